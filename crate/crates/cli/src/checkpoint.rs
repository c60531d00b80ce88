//! Binary checkpoints, little-endian throughout.
//!
//! `DSBNET01`: one trained net (spec, raw and EMA parameters, Adam state).
//! `DSBRUN01`: a whole run (schedule, reference, every stage, and the
//! diagnostics rows written so far), enough to resume exactly.

use std::path::Path;

use anyhow::{bail, Context, Result};

use dsb_core::approximator::AdamState;
use dsb_core::dsb::{Direction, IpfRun, LossVariant, StageRecord, StageReport, TimeConditioning};
use dsb_core::{Activation, NetSpec, Network, StepSchedule};
use dsb_core::diffusion::ReferenceDrift;

use crate::csvio::write_atomic;

pub const NET_MAGIC: &[u8; 8] = b"DSBNET01";
pub const RUN_MAGIC: &[u8; 8] = b"DSBRUN01";

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usizes(&mut self, v: &[usize]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.u64(x as u64));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!("checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        // every element is at least one byte
        if n > self.buf.len() - self.pos {
            bail!("checkpoint length field {n} exceeds remaining bytes");
        }
        Ok(n)
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        (0..n).map(|_| Ok(self.u64()? as usize)).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        Ok(String::from_utf8(self.take(n)?.to_vec())?)
    }
    fn magic(&mut self, m: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != m {
            bail!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(m));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            bail!("{} trailing bytes in checkpoint", self.buf.len() - self.pos);
        }
        Ok(())
    }
}

fn put_spec(w: &mut Writer, s: &NetSpec) {
    w.u64(s.input_dim as u64);
    w.u64(s.enc_dim as u64);
    w.usizes(&s.state_widths);
    w.usizes(&s.time_widths);
    w.usizes(&s.head_widths);
    match s.activation {
        Activation::LeakyRelu { slope } => {
            w.u8(0);
            w.f64(slope);
        }
        Activation::Silu => w.u8(1),
        Activation::Tanh => w.u8(2),
    }
    w.u8(s.residual as u8);
}

fn get_spec(r: &mut Reader<'_>) -> Result<NetSpec> {
    Ok(NetSpec {
        input_dim: r.u64()? as usize,
        enc_dim: r.u64()? as usize,
        state_widths: r.usizes()?,
        time_widths: r.usizes()?,
        head_widths: r.usizes()?,
        activation: match r.u8()? {
            0 => Activation::LeakyRelu { slope: r.f64()? },
            1 => Activation::Silu,
            2 => Activation::Tanh,
            t => bail!("unknown activation tag {t}"),
        },
        residual: r.u8()? != 0,
    })
}

fn put_net_state(w: &mut Writer, params: &[f64], ema: &[f64], adam: &AdamState) {
    w.f64s(params);
    w.f64s(ema);
    w.u64(adam.step);
    w.f64s(&adam.m);
    w.f64s(&adam.v);
}

fn get_net_state(r: &mut Reader<'_>, n: usize) -> Result<(Vec<f64>, Vec<f64>, AdamState)> {
    let params = r.f64s()?;
    let ema = r.f64s()?;
    let step = r.u64()?;
    let m = r.f64s()?;
    let v = r.f64s()?;
    for (name, len) in [("params", params.len()), ("ema", ema.len()), ("adam.m", m.len()), ("adam.v", v.len())] {
        if len != n {
            bail!("{name} has {len} entries, network needs {n}");
        }
    }
    Ok((params, ema, AdamState { m, v, step }))
}

/// A single trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetCheckpoint {
    pub spec: NetSpec,
    pub params: Vec<f64>,
    pub ema: Vec<f64>,
    pub adam: AdamState,
}

impl NetCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(NET_MAGIC);
        put_spec(&mut w, &self.spec);
        put_net_state(&mut w, &self.params, &self.ema, &self.adam);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        r.magic(NET_MAGIC)?;
        let spec = get_spec(&mut r)?;
        let n = Network::new(spec.clone()).map_err(|e| anyhow::anyhow!("{e}"))?.n_params();
        let (params, ema, adam) = get_net_state(&mut r, n)?;
        r.finish()?;
        Ok(Self { spec, params, ema, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&buf).with_context(|| format!("in {}", path.display()))
    }
}

/// A run plus the bookkeeping needed to resume it.
#[derive(Debug, Clone)]
pub struct RunCheckpoint {
    pub config_hash: String,
    pub seed: u64,
    /// The experiment config the run was trained with, canonical TOML.
    pub config_toml: String,
    pub run: IpfRun,
    /// Diagnostics rows already written, one per completed stage.
    pub diag_rows: Vec<String>,
}

fn variant_tag(v: LossVariant) -> u8 {
    match v {
        LossVariant::MeanMatching => 0,
        LossVariant::ScoreMatching => 1,
        LossVariant::DriftMatching => 2,
    }
}

/// Serializes a borrowed run; same bytes as [`RunCheckpoint::to_bytes`].
pub fn encode_run(config_hash: &str, seed: u64, config_toml: &str, run: &IpfRun, diag_rows: &[String]) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(RUN_MAGIC);
    w.str(config_hash);
    w.u64(seed);
    w.str(config_toml);
    w.f64s(run.schedule.gammas());
    w.f64(run.reference.alpha());
    w.u8(variant_tag(run.variant));
    w.u8(match run.conditioning {
        TimeConditioning::Index => 0,
        TimeConditioning::Time => 1,
    });
    put_spec(&mut w, run.net.spec());
    w.u64(run.stages.len() as u64);
    for s in &run.stages {
        let r = &s.report;
        w.u64(r.stage as u64);
        w.u64(r.iteration as u64);
        w.u8(matches!(r.direction, Direction::Forward) as u8);
        w.u64(r.grad_steps as u64);
        w.f64(r.initial_loss);
        w.f64(r.final_loss);
        w.u64(r.cache_refreshes);
        put_net_state(&mut w, &s.params, &s.ema, &s.adam);
    }
    w.u64(diag_rows.len() as u64);
    for row in diag_rows {
        w.str(row);
    }
    w.0
}

impl RunCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_run(&self.config_hash, self.seed, &self.config_toml, &self.run, &self.diag_rows)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        r.magic(RUN_MAGIC)?;
        let config_hash = r.str()?;
        let seed = r.u64()?;
        let config_toml = r.str()?;
        let schedule = StepSchedule::from_gammas(r.f64s()?).map_err(|e| anyhow::anyhow!("schedule: {e}"))?;
        let reference = ReferenceDrift::new(r.f64()?).map_err(|e| anyhow::anyhow!("{e}"))?;
        let variant = match r.u8()? {
            0 => LossVariant::MeanMatching,
            1 => LossVariant::ScoreMatching,
            2 => LossVariant::DriftMatching,
            t => bail!("unknown loss variant tag {t}"),
        };
        let conditioning = match r.u8()? {
            0 => TimeConditioning::Index,
            1 => TimeConditioning::Time,
            t => bail!("unknown conditioning tag {t}"),
        };
        let net = Network::new(get_spec(&mut r)?).map_err(|e| anyhow::anyhow!("{e}"))?;
        let n_stages = r.len()?;
        let mut stages = Vec::with_capacity(n_stages);
        for expect in 0..n_stages {
            let report = StageReport {
                stage: r.u64()? as usize,
                iteration: r.u64()? as usize,
                direction: if r.u8()? == 1 { Direction::Forward } else { Direction::Backward },
                grad_steps: r.u64()? as usize,
                initial_loss: r.f64()?,
                final_loss: r.f64()?,
                cache_refreshes: r.u64()?,
            };
            if report.stage != expect || report.direction != Direction::of_stage(expect) {
                bail!("stage {expect} record is out of order");
            }
            let (params, ema, adam) = get_net_state(&mut r, net.n_params())?;
            stages.push(StageRecord { params, ema, adam, report });
        }
        let n_rows = r.len()?;
        let diag_rows = (0..n_rows).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            config_hash,
            seed,
            config_toml,
            run: IpfRun {
                net,
                schedule,
                reference,
                variant,
                conditioning,
                stages,
            },
            diag_rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&buf).with_context(|| format!("in {}", path.display()))
    }

    /// The net of one stage in the standalone format.
    pub fn stage_net(&self, stage: usize) -> NetCheckpoint {
        let s = &self.run.stages[stage];
        NetCheckpoint {
            spec: self.run.net.spec().clone(),
            params: s.params.clone(),
            ema: s.ema.clone(),
            adam: s.adam.clone(),
        }
    }
}
