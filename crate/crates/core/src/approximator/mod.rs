//! Small time-conditioned MLP used for the forward and backward transition
//! maps, with hand-written reverse-mode gradients.
//!
//! The architecture has three dense blocks:
//!
//! ```text
//!   x ──► state block (d → 16 → 32) ──┐
//!                                      ├─ concat ─► head (64 → 128 → 128 → d) ─► out
//!   k ─► sin/cos(16) ─► time block ────┘
//!        (16 → 16 → 32)
//! ```
//!
//! Activations sit between the layers of a block but not after its last
//! layer. With `d = 2` this layout has exactly 26498 parameters. All
//! parameters live in one flat `f64` vector; per layer the weight matrix is
//! stored row-major (`fan_out x fan_in`) followed by the bias.

mod optim;

pub use optim::{AdamConfig, AdamState, EmaParams, OptimError};

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::numerics::{sinusoidal_encoding, RngState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("expected input of dimension {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("inputs ({inputs}) and targets ({targets}) disagree in length")]
    BatchMismatch { inputs: usize, targets: usize },
    #[error("encoding width must be even and positive, got {0}")]
    BadEncoding(usize),
    #[error("network spec has zero-width layer")]
    ZeroWidth,
    #[error("a block may have at most {0} layers")]
    TooDeep(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Silu,
    Tanh,
}

impl Activation {
    pub const LEAKY_RELU: Activation = Activation::LeakyRelu { slope: 0.01 };

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Silu => z / (1.0 + libm::exp(-z)),
            Activation::Tanh => libm::tanh(z),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + libm::exp(-z));
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = libm::tanh(z);
                1.0 - t * t
            }
        }
    }
}

/// Shape of a transition network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub input_dim: usize,
    pub enc_dim: usize,
    pub state_widths: Vec<usize>,
    pub time_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub activation: Activation,
    /// Adds the input to the head output, `out = x + head(..)`.
    pub residual: bool,
}

impl NetSpec {
    /// The small 2-D architecture: state (d,16,32), time (16,16,32),
    /// head (64,128,128,d), leaky ReLU.
    pub fn small(input_dim: usize) -> Self {
        Self {
            input_dim,
            enc_dim: 16,
            state_widths: vec![16, 32],
            time_widths: vec![16, 32],
            head_widths: vec![128, 128],
            activation: Activation::LEAKY_RELU,
            residual: false,
        }
    }

    /// Same layout with every latent width multiplied by `factor`.
    pub fn scaled(input_dim: usize, factor: usize) -> Self {
        let mut s = Self::small(input_dim);
        for w in s
            .state_widths
            .iter_mut()
            .chain(s.time_widths.iter_mut())
            .chain(s.head_widths.iter_mut())
        {
            *w *= factor;
        }
        s
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.enc_dim == 0 || self.enc_dim % 2 != 0 {
            return Err(NetError::BadEncoding(self.enc_dim));
        }
        if self.input_dim == 0
            || self
                .state_widths
                .iter()
                .chain(&self.time_widths)
                .chain(&self.head_widths)
                .any(|&w| w == 0)
        {
            return Err(NetError::ZeroWidth);
        }
        Ok(())
    }

    pub fn state_out(&self) -> usize {
        self.state_widths.last().copied().unwrap_or(self.input_dim)
    }

    pub fn time_out(&self) -> usize {
        self.time_widths.last().copied().unwrap_or(self.enc_dim)
    }

    pub fn head_in(&self) -> usize {
        self.state_out() + self.time_out()
    }

    pub fn param_count(&self) -> usize {
        fn count(input: usize, widths: &[usize]) -> usize {
            let mut prev = input;
            let mut n = 0;
            for &w in widths {
                n += prev * w + w;
                prev = w;
            }
            n
        }
        let mut head = self.head_widths.clone();
        head.push(self.input_dim);
        count(self.input_dim, &self.state_widths)
            + count(self.enc_dim, &self.time_widths)
            + count(self.head_in(), &head)
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Dense {
    fn w(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }
    fn b(&self) -> core::ops::Range<usize> {
        let s = self.offset + self.fan_in * self.fan_out;
        s..s + self.fan_out
    }
}

/// Strides of a row-major or transposed operand, `(row_stride, col_stride)`.
type Strides = (usize, usize);

/// `C <- alpha A B + beta C` with `A: m x k`, `B: k x n`, `C: m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, s: Strides| (rows - 1) * s.0 + (cols - 1) * s.1 + 1;
    if k > 0 {
        assert!(a.len() >= span(m, k, sa) && b.len() >= span(k, n, sb));
    }
    assert!(c.len() >= span(m, n, sc));
    // SAFETY: the asserts above keep every addressed element in bounds, and
    // `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// `Z = A W^T + b` for a batch of `m` rows.
fn dense_forward(params: &[f64], layer: &Dense, m: usize, a: &[f64], z: &mut [f64]) {
    let (fi, fo) = (layer.fan_in, layer.fan_out);
    let bias = &params[layer.b()];
    for row in z.chunks_exact_mut(fo) {
        row.copy_from_slice(bias);
    }
    gemm((m, fi, fo), 1.0, a, (fi, 1), &params[layer.w()], (1, fi), 1.0, z, (fo, 1));
}

/// Accumulates `dW += dZ^T A`, `db += colsum dZ`; writes `dA = dZ W` when asked.
fn dense_backward(
    params: &[f64],
    layer: &Dense,
    m: usize,
    a: &[f64],
    dz: &[f64],
    grad_params: &mut [f64],
    da: Option<&mut [f64]>,
) {
    let (fi, fo) = (layer.fan_in, layer.fan_out);
    gemm((fo, m, fi), 1.0, dz, (1, fo), a, (fi, 1), 1.0, &mut grad_params[layer.w()], (fi, 1));
    let gb = &mut grad_params[layer.b()];
    for row in dz.chunks_exact(fo) {
        for (g, &d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    if let Some(da) = da {
        gemm((m, fo, fi), 1.0, dz, (fo, 1), &params[layer.w()], (fi, 1), 0.0, da, (fi, 1));
    }
}

#[derive(Debug, Clone)]
struct Block {
    layers: Vec<Dense>,
    in_dim: usize,
    out_dim: usize,
    /// Sum over layers of `fan_in + fan_out`: tape floats per batch row.
    tape_len: usize,
}

impl Block {
    fn new(in_dim: usize, widths: &[usize], offset: &mut usize) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        let mut tape_len = 0;
        for &w in widths {
            layers.push(Dense {
                fan_in: prev,
                fan_out: w,
                offset: *offset,
            });
            *offset += prev * w + w;
            tape_len += prev + w;
            prev = w;
        }
        Self {
            layers,
            in_dim,
            out_dim: prev,
            tape_len,
        }
    }

    /// Runs the block on `m` rows. The tape holds, layer by layer, the input
    /// matrix (`m x fan_in`) followed by the pre-activations (`m x fan_out`).
    fn forward(&self, params: &[f64], act: Activation, m: usize, input: &[f64], tape: &mut Vec<f64>, out: &mut [f64]) {
        if self.layers.is_empty() {
            out.copy_from_slice(input);
            return;
        }
        tape.resize(m * self.tape_len, 0.0);
        tape[..m * self.in_dim].copy_from_slice(input);
        let mut pos = 0;
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (a_len, z_len) = (m * layer.fan_in, m * layer.fan_out);
            let (head, rest) = tape[pos..].split_at_mut(a_len);
            dense_forward(params, layer, m, head, &mut rest[..z_len]);
            if li == last {
                out.copy_from_slice(&rest[..z_len]);
            } else {
                let (z, next) = rest.split_at_mut(z_len);
                for (a, &zz) in next[..z_len].iter_mut().zip(z.iter()) {
                    *a = act.apply(zz);
                }
            }
            pos += a_len + z_len;
        }
    }

    /// Backpropagates `grad_out` (`m x out_dim`) through a recorded tape,
    /// accumulating into `grad_params`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        params: &[f64],
        act: Activation,
        m: usize,
        tape: &[f64],
        grad_out: &[f64],
        grad_params: &mut [f64],
        dz: &mut Vec<f64>,
        da: &mut Vec<f64>,
        grad_input: Option<&mut [f64]>,
    ) {
        if self.layers.is_empty() {
            if let Some(gi) = grad_input {
                gi.copy_from_slice(grad_out);
            }
            return;
        }
        let mut starts = [0usize; MAX_LAYERS];
        let mut pos = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            starts[li] = pos;
            pos += m * (layer.fan_in + layer.fan_out);
        }
        dz.clear();
        dz.extend_from_slice(grad_out);
        let want_input = grad_input.is_some();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let a = &tape[starts[li]..starts[li] + m * layer.fan_in];
            let need_da = li > 0 || want_input;
            da.resize(m * layer.fan_in, 0.0);
            dense_backward(params, layer, m, a, dz, grad_params, if need_da { Some(da) } else { None });
            if li > 0 {
                let prev = &self.layers[li - 1];
                let zs = starts[li - 1] + m * prev.fan_in;
                let z_prev = &tape[zs..zs + m * prev.fan_out];
                dz.clear();
                dz.extend(da.iter().zip(z_prev).map(|(&g, &z)| g * act.derivative(z)));
            }
        }
        if let Some(gi) = grad_input {
            gi.copy_from_slice(da);
        }
    }

    /// Forward-mode tangent propagation for a single row.
    fn forward_tangent(
        &self,
        params: &[f64],
        act: Activation,
        input: &[f64],
        tangent: &[f64],
        out: &mut [f64],
        out_tangent: &mut [f64],
    ) {
        let mut x = input.to_vec();
        let mut dx = tangent.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.fan_out];
            let mut dz = vec![0.0; layer.fan_out];
            dense_forward(params, layer, 1, &x, &mut z);
            gemm((1, layer.fan_in, layer.fan_out), 1.0, &dx, (layer.fan_in, 1), &params[layer.w()], (1, layer.fan_in), 0.0, &mut dz, (layer.fan_out, 1));
            if li != last {
                for (zz, dd) in z.iter_mut().zip(dz.iter_mut()) {
                    *dd *= act.derivative(*zz);
                    *zz = act.apply(*zz);
                }
            }
            x = z;
            dx = dz;
        }
        out.copy_from_slice(&x);
        out_tangent.copy_from_slice(&dx);
    }

    /// Smallest |pre-activation| feeding an activation, over a recorded tape.
    fn hidden_margin(&self, m: usize, tape: &[f64]) -> f64 {
        let mut margin = f64::INFINITY;
        let mut pos = 0;
        let last = self.layers.len().saturating_sub(1);
        for (li, l) in self.layers.iter().enumerate() {
            pos += m * l.fan_in;
            if li != last {
                for &z in &tape[pos..pos + m * l.fan_out] {
                    margin = margin.min(z.abs());
                }
            }
            pos += m * l.fan_out;
        }
        margin
    }
}

const MAX_LAYERS: usize = 32;

/// How fresh parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; keeps activations O(1).
    FanIn,
    /// As `FanIn`, but the last head layer starts at zero.
    FanInZeroHead,
    Zero,
}

/// A compiled [`NetSpec`]: layer offsets into the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetSpec,
    state: Block,
    time: Block,
    head: Block,
    n_params: usize,
}

/// One regression example: network position (step index or time), state and target.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub position: f64,
    pub x: &'a [f64],
    pub target: &'a [f64],
}

/// Scratch buffers reused across evaluations.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    xs: Vec<f64>,
    state_tape: Vec<f64>,
    state_out: Vec<f64>,
    time_tape: Vec<f64>,
    time_out: Vec<f64>,
    time_grad: Vec<f64>,
    enc: Vec<f64>,
    positions: Vec<f64>,
    slots: Vec<usize>,
    head_in: Vec<f64>,
    head_tape: Vec<f64>,
    out: Vec<f64>,
    grad_out: Vec<f64>,
    grad_head_in: Vec<f64>,
    grad_state: Vec<f64>,
    dz: Vec<f64>,
    da: Vec<f64>,
}

impl Network {
    pub fn new(spec: NetSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let mut offset = 0;
        let state = Block::new(spec.input_dim, &spec.state_widths, &mut offset);
        let time = Block::new(spec.enc_dim, &spec.time_widths, &mut offset);
        let mut head_widths = spec.head_widths.clone();
        head_widths.push(spec.input_dim);
        let head = Block::new(state.out_dim + time.out_dim, &head_widths, &mut offset);
        if [&state, &time, &head].iter().any(|b| b.layers.len() > MAX_LAYERS) {
            return Err(NetError::TooDeep(MAX_LAYERS));
        }
        debug_assert_eq!(offset, spec.param_count());
        Ok(Self {
            spec,
            state,
            time,
            head,
            n_params: offset,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn init_params(&self, scheme: InitScheme, rng: &mut RngState) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        if scheme == InitScheme::Zero {
            return p;
        }
        let last_head = self.head.layers.len() - 1;
        for (bi, block) in [&self.state, &self.time, &self.head].into_iter().enumerate() {
            for (li, layer) in block.layers.iter().enumerate() {
                if scheme == InitScheme::FanInZeroHead && bi == 2 && li == last_head {
                    continue;
                }
                let fan_in = layer.fan_in as f64;
                let wb = libm::sqrt(6.0 / fan_in);
                for v in &mut p[layer.w()] {
                    *v = rng.uniform_range(-wb, wb);
                }
                let bb = 1.0 / libm::sqrt(fan_in);
                for v in &mut p[layer.b()] {
                    *v = rng.uniform_range(-bb, bb);
                }
            }
        }
        p
    }

    fn check_params(&self, params: &[f64]) -> Result<(), NetError> {
        if params.len() != self.n_params {
            return Err(NetError::ParamCount {
                expected: self.n_params,
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_dim(&self, len: usize) -> Result<(), NetError> {
        if len != self.spec.input_dim {
            return Err(NetError::DimMismatch {
                expected: self.spec.input_dim,
                got: len,
            });
        }
        Ok(())
    }

    /// Time features for each distinct position in `ws.positions`.
    fn time_pass(&self, params: &[f64], ws: &mut Workspace) {
        let (e, p) = (self.spec.enc_dim, ws.positions.len());
        ws.enc.resize(p * e, 0.0);
        for (row, &pos) in ws.enc.chunks_exact_mut(e).zip(&ws.positions) {
            sinusoidal_encoding(pos, e, row);
        }
        ws.time_out.resize(p * self.time.out_dim, 0.0);
        self.time
            .forward(params, self.spec.activation, p, &ws.enc, &mut ws.time_tape, &mut ws.time_out);
    }

    /// Forward pass over `m` rows already in `ws.xs`, with `ws.slots[i]`
    /// pointing each row at its time features. Leaves tapes for backward.
    fn trunk_pass(&self, params: &[f64], m: usize, ws: &mut Workspace) {
        let act = self.spec.activation;
        let (so, to, d) = (self.state.out_dim, self.time.out_dim, self.spec.input_dim);
        ws.state_out.resize(m * so, 0.0);
        self.state.forward(params, act, m, &ws.xs, &mut ws.state_tape, &mut ws.state_out);
        let hi = so + to;
        ws.head_in.resize(m * hi, 0.0);
        for (i, row) in ws.head_in.chunks_exact_mut(hi).enumerate() {
            row[..so].copy_from_slice(&ws.state_out[i * so..(i + 1) * so]);
            let s = ws.slots[i];
            row[so..].copy_from_slice(&ws.time_out[s * to..(s + 1) * to]);
        }
        ws.out.resize(m * d, 0.0);
        self.head.forward(params, act, m, &ws.head_in, &mut ws.head_tape, &mut ws.out);
        if self.spec.residual {
            for (o, &x) in ws.out.iter_mut().zip(&ws.xs) {
                *o += x;
            }
        }
    }

    /// Network output at `position` (step index or time) for state `x`.
    pub fn forward(&self, params: &[f64], position: f64, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_dim(x.len())?;
        let mut out = vec![0.0; self.spec.input_dim];
        self.forward_batch(params, position, x, &mut out, &mut Workspace::default())?;
        Ok(out)
    }

    /// Evaluates a row-major batch of states sharing one position.
    pub fn forward_batch(
        &self,
        params: &[f64],
        position: f64,
        xs: &[f64],
        out: &mut [f64],
        ws: &mut Workspace,
    ) -> Result<(), NetError> {
        self.check_params(params)?;
        let d = self.spec.input_dim;
        if xs.len() % d != 0 {
            return Err(NetError::DimMismatch {
                expected: d,
                got: xs.len() % d,
            });
        }
        if out.len() != xs.len() {
            return Err(NetError::BatchMismatch {
                inputs: xs.len(),
                targets: out.len(),
            });
        }
        let m = xs.len() / d;
        if m == 0 {
            return Ok(());
        }
        ws.positions.clear();
        ws.positions.push(position);
        self.time_pass(params, ws);
        ws.slots.clear();
        ws.slots.resize(m, 0);
        ws.xs.clear();
        ws.xs.extend_from_slice(xs);
        self.trunk_pass(params, m, ws);
        out.copy_from_slice(&ws.out);
        Ok(())
    }

    /// Output and Jacobian-vector product `J_x(out) . v`.
    pub fn forward_jvp(
        &self,
        params: &[f64],
        position: f64,
        x: &[f64],
        v: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        self.check_params(params)?;
        self.check_dim(x.len())?;
        self.check_dim(v.len())?;
        let act = self.spec.activation;
        let mut ws = Workspace::default();
        ws.positions.push(position);
        self.time_pass(params, &mut ws);
        let so = self.state.out_dim;
        let mut hs = vec![0.0; so];
        let mut dhs = vec![0.0; so];
        self.state.forward_tangent(params, act, x, v, &mut hs, &mut dhs);
        let mut h = hs;
        h.extend_from_slice(&ws.time_out);
        let mut dh = dhs;
        dh.resize(h.len(), 0.0);
        let d = self.spec.input_dim;
        let mut out = vec![0.0; d];
        let mut dout = vec![0.0; d];
        self.head.forward_tangent(params, act, &h, &dh, &mut out, &mut dout);
        if self.spec.residual {
            for i in 0..d {
                out[i] += x[i];
                dout[i] += v[i];
            }
        }
        Ok((out, dout))
    }

    /// Mean over the batch of `||net(position, x) - target||^2` and its
    /// exact gradient, written into `grad`.
    pub fn loss_grad(
        &self,
        params: &[f64],
        batch: &[Example<'_>],
        grad: &mut [f64],
        ws: &mut Workspace,
    ) -> Result<f64, NetError> {
        if batch.is_empty() {
            return Err(NetError::EmptyBatch);
        }
        self.check_params(params)?;
        self.check_params(grad)?;
        let d = self.spec.input_dim;
        for ex in batch {
            self.check_dim(ex.x.len())?;
            self.check_dim(ex.target.len())?;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let act = self.spec.activation;
        let m = batch.len();
        let inv_m = 1.0 / m as f64;
        let (so, to) = (self.state.out_dim, self.time.out_dim);

        ws.positions.clear();
        ws.slots.clear();
        ws.xs.clear();
        for ex in batch {
            let slot = match ws.positions.iter().position(|&p| p == ex.position) {
                Some(s) => s,
                None => {
                    ws.positions.push(ex.position);
                    ws.positions.len() - 1
                }
            };
            ws.slots.push(slot);
            ws.xs.extend_from_slice(ex.x);
        }
        self.time_pass(params, ws);
        self.trunk_pass(params, m, ws);

        let mut loss = 0.0;
        ws.grad_out.resize(m * d, 0.0);
        for (i, ex) in batch.iter().enumerate() {
            for j in 0..d {
                let r = ws.out[i * d + j] - ex.target[j];
                loss += r * r;
                ws.grad_out[i * d + j] = 2.0 * r * inv_m;
            }
        }

        let hi = so + to;
        ws.grad_head_in.resize(m * hi, 0.0);
        self.head.backward(
            params,
            act,
            m,
            &ws.head_tape,
            &ws.grad_out,
            grad,
            &mut ws.dz,
            &mut ws.da,
            Some(&mut ws.grad_head_in),
        );
        let p = ws.positions.len();
        ws.time_grad.clear();
        ws.time_grad.resize(p * to, 0.0);
        ws.grad_state.resize(m * so, 0.0);
        for (i, row) in ws.grad_head_in.chunks_exact(hi).enumerate() {
            ws.grad_state[i * so..(i + 1) * so].copy_from_slice(&row[..so]);
            let s = ws.slots[i];
            for (acc, &g) in ws.time_grad[s * to..(s + 1) * to].iter_mut().zip(&row[so..]) {
                *acc += g;
            }
        }
        self.state.backward(
            params,
            act,
            m,
            &ws.state_tape,
            &ws.grad_state,
            grad,
            &mut ws.dz,
            &mut ws.da,
            None,
        );
        self.time.backward(
            params,
            act,
            p,
            &ws.time_tape,
            &ws.time_grad,
            grad,
            &mut ws.dz,
            &mut ws.da,
            None,
        );
        Ok(loss * inv_m)
    }

    /// Smallest |pre-activation| over all hidden units for an input; used to
    /// keep finite-difference checks away from activation kinks.
    pub fn min_hidden_margin(&self, params: &[f64], position: f64, x: &[f64]) -> Result<f64, NetError> {
        let mut ws = Workspace::default();
        let mut out = vec![0.0; x.len()];
        self.forward_batch(params, position, x, &mut out, &mut ws)?;
        let m = x.len() / self.spec.input_dim;
        Ok(self
            .time
            .hidden_margin(1, &ws.time_tape)
            .min(self.state.hidden_margin(m, &ws.state_tape))
            .min(self.head.hidden_margin(m, &ws.head_tape)))
    }
}

/// Convenience wrapper returning `(loss, grad)` for a list of examples.
pub fn batch_loss_grad(net: &Network, params: &[f64], batch: &[Example<'_>]) -> Result<(f64, Vec<f64>), NetError> {
    let mut grad = vec![0.0; net.n_params()];
    let loss = net.loss_grad(params, batch, &mut grad, &mut Workspace::default())?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_spec(d: usize, enc: usize) -> NetSpec {
        NetSpec {
            input_dim: d,
            enc_dim: enc,
            state_widths: vec![],
            time_widths: vec![],
            head_widths: vec![],
            activation: Activation::LEAKY_RELU,
            residual: false,
        }
    }

    #[test]
    fn small_net_parameter_count() {
        assert_eq!(NetSpec::small(2).param_count(), 26498);
        let net = Network::new(NetSpec::small(2)).unwrap();
        assert_eq!(net.n_params(), 26498);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = Network::new(NetSpec::small(3)).unwrap();
        let p = net.init_params(InitScheme::Zero, &mut RngState::new(0));
        assert_eq!(net.forward(&p, 4.0, &[0.3, -1.0, 2.0]).unwrap(), vec![0.0; 3]);
        let res = Network::new(NetSpec::small(3).with_residual(true)).unwrap();
        assert_eq!(res.forward(&p, 4.0, &[0.3, -1.0, 2.0]).unwrap(), vec![0.3, -1.0, 2.0]);
    }

    #[test]
    fn same_seed_same_init() {
        let net = Network::new(NetSpec::small(2)).unwrap();
        let a = net.init_params(InitScheme::FanIn, &mut RngState::new(9));
        let b = net.init_params(InitScheme::FanIn, &mut RngState::new(9));
        assert_eq!(a, b);
        let z = net.init_params(InitScheme::FanInZeroHead, &mut RngState::new(9));
        assert_eq!(net.forward(&z, 1.0, &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn init_output_scale_is_order_one() {
        let net = Network::new(NetSpec::small(2)).unwrap();
        let mut rng = RngState::new(4);
        let p = net.init_params(InitScheme::FanIn, &mut rng);
        let mut sum = 0.0;
        let mut sq = 0.0;
        let n = 1000;
        for i in 0..n {
            let x = [rng.normal(), rng.normal()];
            let o = net.forward(&p, (i % 20) as f64, &x).unwrap();
            for v in o {
                sum += v;
                sq += v * v;
            }
        }
        let m = sum / (2 * n) as f64;
        let sd = (sq / (2 * n) as f64 - m * m).sqrt();
        assert!((0.1..=10.0).contains(&sd), "sd {sd}");
    }

    #[test]
    fn degenerate_linear_spec_is_affine() {
        // head: single layer (d + enc) -> d, no hidden blocks.
        let net = Network::new(linear_spec(2, 2)).unwrap();
        assert_eq!(net.n_params(), 2 * 4 + 2);
        // W = [[1, 2, 3, 4], [5, 6, 7, 8]], b = [0.5, -0.5]
        let p = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 0.5, -0.5];
        // position 0 -> encoding (sin 0, cos 0) = (0, 1)
        let out = net.forward(&p, 0.0, &[1.0, -1.0]).unwrap();
        assert_eq!(out, vec![1.0 - 2.0 + 4.0 + 0.5, 5.0 - 6.0 + 8.0 - 0.5]);
    }

    #[test]
    fn output_depends_on_step() {
        let net = Network::new(NetSpec::small(2)).unwrap();
        let p = net.init_params(InitScheme::FanIn, &mut RngState::new(1));
        let a = net.forward(&p, 1.0, &[0.2, 0.1]).unwrap();
        let b = net.forward(&p, 2.0, &[0.2, 0.1]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = Network::new(NetSpec::small(2)).unwrap();
        let p = vec![0.0; net.n_params()];
        assert!(matches!(net.forward(&p, 0.0, &[1.0]), Err(NetError::DimMismatch { .. })));
        assert_eq!(batch_loss_grad(&net, &p, &[]).unwrap_err(), NetError::EmptyBatch);
    }

    #[test]
    fn scalar_net_loss_by_hand() {
        // d = 1, no hidden layers, encoding width 2; zero the encoding
        // weights and bias so the net is f(x) = w x.
        let net = Network::new(linear_spec(1, 2)).unwrap();
        let w = 0.7;
        let p = vec![w, 0.0, 0.0, 0.0];
        let x = [2.0];
        let t = [0.0];
        let (loss, grad) = batch_loss_grad(&net, &p, &[Example { position: 3.0, x: &x, target: &t }]).unwrap();
        assert!((loss - 4.0 * w * w).abs() < 1e-14);
        assert!((grad[0] - 8.0 * w).abs() < 1e-14);
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_grad() {
        let net = Network::new(NetSpec::small(2)).unwrap();
        let mut rng = RngState::new(3);
        let p = net.init_params(InitScheme::FanIn, &mut rng);
        let xs: Vec<[f64; 2]> = (0..5).map(|_| [rng.normal(), rng.normal()]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().enumerate().map(|(i, x)| net.forward(&p, i as f64, x).unwrap()).collect();
        let batch: Vec<Example> = xs
            .iter()
            .zip(&ys)
            .enumerate()
            .map(|(i, (x, y))| Example { position: i as f64, x, target: y })
            .collect();
        let (loss, grad) = batch_loss_grad(&net, &p, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn jvp_matches_directional_difference() {
        let spec = NetSpec { activation: Activation::Silu, ..NetSpec::small(3) }.with_residual(true);
        let net = Network::new(spec).unwrap();
        let mut rng = RngState::new(8);
        let p = net.init_params(InitScheme::FanIn, &mut rng);
        let x = [0.3, -0.2, 1.1];
        let v = [0.5, 1.0, -0.7];
        let (_, jv) = net.forward_jvp(&p, 5.0, &x, &v).unwrap();
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let fp = net.forward(&p, 5.0, &xp).unwrap();
        let fm = net.forward(&p, 5.0, &xm).unwrap();
        for i in 0..3 {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            assert!((fd - jv[i]).abs() < 1e-7, "{fd} vs {}", jv[i]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = NetSpec {
            input_dim: 3,
            enc_dim: 4,
            state_widths: vec![5, 4],
            time_widths: vec![3],
            head_widths: vec![6],
            activation: Activation::Tanh,
            residual: true,
        };
        let net = Network::new(spec).unwrap();
        let mut rng = RngState::new(21);
        let p = net.init_params(InitScheme::FanIn, &mut rng);
        let xs: Vec<f64> = (0..18).map(|_| rng.normal()).collect();
        let ys: Vec<f64> = (0..18).map(|_| rng.normal()).collect();
        let batch: Vec<Example> = (0..6)
            .map(|i| Example {
                position: (i % 3) as f64,
                x: &xs[3 * i..3 * i + 3],
                target: &ys[3 * i..3 * i + 3],
            })
            .collect();
        let (_, g) = batch_loss_grad(&net, &p, &batch).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] = p[i] + h;
            let lp = batch_loss_grad(&net, &q, &batch).unwrap().0;
            q[i] = p[i] - h;
            let lm = batch_loss_grad(&net, &q, &batch).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-5, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }
}
