//! Experiment configuration: a sectioned TOML file, validated in full before
//! any compute starts. Unknown keys are errors.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dsb_core::bench::{prior_from_data, DatasetSpec, Family, PriorSpec};
use dsb_core::dsb::{DsbConfig, LossVariant, TimeConditioning};
use dsb_core::{Activation, NetSpec, PointSampler, RngState, StepSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Output directory; when absent, `<output root>/<name>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    pub schedule: ScheduleConfig,
    pub reference: ReferenceConfig,
    pub net: NetConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub prior: PriorConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 0,
            out_dir: None,
            schedule: ScheduleConfig::default(),
            reference: ReferenceConfig::default(),
            net: NetConfig::default(),
            training: TrainingConfig::default(),
            data: DataConfig::default(),
            prior: PriorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Uniform,
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub n_steps: usize,
    /// Step size of the uniform schedule.
    pub gamma: f64,
    /// Ramp end points of the symmetric schedule.
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Uniform,
            n_steps: 20,
            gamma: 0.01,
            gamma_min: 1e-3,
            gamma_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<StepSchedule> {
        let s = match self.kind {
            ScheduleKind::Uniform => StepSchedule::uniform(self.n_steps, self.gamma),
            ScheduleKind::Symmetric => StepSchedule::symmetric(self.n_steps, self.gamma_min, self.gamma_max),
        };
        s.map_err(|e| anyhow::anyhow!("schedule: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    /// Drift `-alpha x`; 0 is Brownian motion.
    pub alpha: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    LeakyRelu,
    Silu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub enc_dim: usize,
    pub state_widths: Vec<usize>,
    pub time_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub activation: ActivationKind,
    pub residual: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        let s = NetSpec::small(1);
        Self {
            enc_dim: s.enc_dim,
            state_widths: s.state_widths,
            time_widths: s.time_widths,
            head_widths: s.head_widths,
            activation: ActivationKind::LeakyRelu,
            residual: false,
        }
    }
}

impl NetConfig {
    pub fn spec(&self, dim: usize) -> NetSpec {
        NetSpec {
            input_dim: dim,
            enc_dim: self.enc_dim,
            state_widths: self.state_widths.clone(),
            time_widths: self.time_widths.clone(),
            head_widths: self.head_widths.clone(),
            activation: match self.activation {
                ActivationKind::LeakyRelu => Activation::LEAKY_RELU,
                ActivationKind::Silu => Activation::Silu,
                ActivationKind::Tanh => Activation::Tanh,
            },
            residual: self.residual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    MeanMatching,
    ScoreMatching,
    DriftMatching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningKind {
    Index,
    Time,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub ipf_iters: usize,
    pub steps_per_half_bridge: usize,
    pub batch_size: usize,
    pub cache_size: usize,
    pub refresh_period: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_thinning: Option<usize>,
    pub lr: f64,
    pub ema_rate: f64,
    pub warm_start: bool,
    /// Defaults to mean matching for residual nets, drift matching otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<VariantKind>,
    pub conditioning: ConditioningKind,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            ipf_iters: 10,
            steps_per_half_bridge: 5000,
            batch_size: 128,
            cache_size: 512,
            refresh_period: 500,
            cache_thinning: None,
            lr: 1e-4,
            ema_rate: 0.999,
            warm_start: true,
            variant: None,
            conditioning: ConditioningKind::Index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// One of two_moons, swiss_roll_2d, s_curve_2d, checkerboard, circles,
    /// gaussian_mixture_8, gaussian.
    pub kind: String,
    /// Mean of the `gaussian` family; its length sets the dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    /// Standard deviation of the `gaussian` family.
    pub std: f64,
    pub scale: f64,
    /// Jitter; when absent, the family default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: "two_moons".into(),
            mean: None,
            std: 1.0,
            scale: 1.0,
            noise: None,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, section: &str) -> Result<DatasetSpec> {
        let family = if self.kind == "gaussian" {
            let Some(mean) = self.mean.clone() else {
                bail!("{section}.mean is required for kind = \"gaussian\"");
            };
            if mean.is_empty() {
                bail!("{section}.mean must be non-empty");
            }
            if !(self.std > 0.0) {
                bail!("{section}.std must be positive");
            }
            Family::Gaussian { mean, std: self.std }
        } else {
            if self.mean.is_some() {
                bail!("{section}.mean only applies to kind = \"gaussian\"");
            }
            Family::from_name(&self.kind).with_context(|| format!("{section}.kind"))?
        };
        let mut spec = DatasetSpec::new(family).with_scale(self.scale);
        if let Some(n) = self.noise {
            if !(n >= 0.0) {
                bail!("{section}.noise must be non-negative");
            }
            spec = spec.with_noise(n);
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// `N(mean, var I)`.
    Gaussian,
    /// Gaussian fitted to `n_fit` data draws, variance times `inflation`.
    FromData,
    /// Another dataset, for dataset-to-dataset bridges.
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub kind: PriorKind,
    /// Defaults to the zero vector.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    pub var: f64,
    pub inflation: f64,
    pub n_fit: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DataConfig>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::FromData,
            mean: None,
            var: 1.0,
            inflation: 1.0,
            n_fit: 10_000,
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate every this many IPF iterations (and always the last).
    pub every: usize,
    pub n_samples: usize,
    pub n_projections: usize,
    /// Grid times at which the final backward chain is recorded.
    pub snapshot_times: Vec<f64>,
    /// Write elapsed time per stage; off makes the diagnostics file fully
    /// reproducible.
    pub record_wall_time: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 1,
            n_samples: 2000,
            n_projections: 50,
            snapshot_times: Vec::new(),
            record_wall_time: true,
        }
    }
}

/// Everything a run needs, built from a validated config.
pub struct Resolved {
    pub dsb: DsbConfig,
    pub data: DatasetSpec,
    pub prior: PriorSpec,
    pub dim: usize,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every field and builds the solver inputs.
    pub fn resolve(&self) -> Result<Resolved> {
        let data = self.data.spec("data")?;
        let dim = data.dim();
        let schedule = self.schedule.build()?;
        let t = &self.training;
        let mut dsb = DsbConfig::new(self.net.spec(dim), schedule, self.reference.alpha);
        dsb.ipf_iters = t.ipf_iters;
        dsb.steps_per_half_bridge = t.steps_per_half_bridge;
        dsb.batch_size = t.batch_size;
        dsb.cache_size = t.cache_size;
        dsb.refresh_period = t.refresh_period;
        dsb.cache_thinning = t.cache_thinning;
        dsb.adam.lr = t.lr;
        dsb.ema_rate = t.ema_rate;
        dsb.warm_start = t.warm_start;
        dsb.conditioning = match t.conditioning {
            ConditioningKind::Index => TimeConditioning::Index,
            ConditioningKind::Time => TimeConditioning::Time,
        };
        if let Some(v) = t.variant {
            dsb.variant = match v {
                VariantKind::MeanMatching => LossVariant::MeanMatching,
                VariantKind::ScoreMatching => LossVariant::ScoreMatching,
                VariantKind::DriftMatching => LossVariant::DriftMatching,
            };
        }
        dsb.validate().map_err(|e| anyhow::anyhow!("training: {e}"))?;
        if self.eval.every == 0 {
            bail!("eval.every must be at least 1");
        }
        if self.eval.n_samples < 2 || self.eval.n_projections == 0 {
            bail!("eval.n_samples must be at least 2 and eval.n_projections at least 1");
        }
        for &time in &self.eval.snapshot_times {
            if dsb.schedule.index_of_time(time).is_none() {
                bail!("eval.snapshot_times: {time} is not a grid time");
            }
        }
        let prior = self.resolve_prior(&data, dim)?;
        Ok(Resolved { dsb, data, prior, dim })
    }

    fn resolve_prior(&self, data: &DatasetSpec, dim: usize) -> Result<PriorSpec> {
        let p = &self.prior;
        let prior = match p.kind {
            PriorKind::Gaussian => {
                let mean = p.mean.clone().unwrap_or_else(|| vec![0.0; dim]);
                if mean.len() != dim {
                    bail!("prior.mean has length {}, data dimension is {dim}", mean.len());
                }
                PriorSpec::gaussian(mean, p.var).map_err(|e| anyhow::anyhow!("prior.var: {e}"))?
            }
            PriorKind::FromData => {
                if p.n_fit < 2 {
                    bail!("prior.n_fit must be at least 2");
                }
                // fitted on a fixed stream independent of the run seed
                let xs = data.sample_n(p.n_fit, &mut RngState::new(0x5052_494f_5246_4954));
                prior_from_data(&xs, dim, p.inflation).map_err(|e| anyhow::anyhow!("prior: {e}"))?
            }
            PriorKind::Dataset => {
                let Some(ds) = &p.dataset else {
                    bail!("prior.dataset is required for kind = \"dataset\"");
                };
                let spec = ds.spec("prior.dataset")?;
                if spec.dim() != dim {
                    bail!("prior.dataset has dimension {}, data has {dim}", spec.dim());
                }
                PriorSpec::Dataset(spec)
            }
        };
        Ok(prior)
    }
}

/// Default configuration with every key documented.
pub const DEFAULT_CONFIG_DOC: &str = r#"# dsb experiment configuration (all keys optional; shown with defaults)
name = "default"            # run name; output goes to <root>/<name> unless out_dir is set
seed = 0                    # master seed; every random stream derives from it
# out_dir = "runs/default"  # explicit output directory

[schedule]
kind = "uniform"            # "uniform" or "symmetric"
n_steps = 20                # N
gamma = 0.01                # uniform step size
gamma_min = 0.001           # symmetric ramp start
gamma_max = 0.02            # symmetric ramp peak

[reference]
alpha = 1.0                 # reference drift -alpha x (0 = Brownian)

[net]
enc_dim = 16                # sinusoidal position features
state_widths = [16, 32]
time_widths = [16, 32]
head_widths = [128, 128]    # a final layer of width d is always appended
activation = "leaky_relu"   # "leaky_relu", "silu" or "tanh"
residual = false            # add the input to the output

[training]
ipf_iters = 10              # L; trains backward nets 0..=L, forward nets 1..=L
steps_per_half_bridge = 5000
batch_size = 128
cache_size = 512            # trajectories per cache
refresh_period = 500        # gradient steps between cache rebuilds
# cache_thinning = 5        # keep only this many transitions per trajectory
lr = 0.0001                 # Adam step size
ema_rate = 0.999            # sampling uses the EMA parameters
warm_start = true           # start each net from its previous iteration
# variant = "drift_matching" # "mean_matching", "score_matching", "drift_matching";
                             # default: mean_matching if residual, else drift_matching
conditioning = "index"      # "index" or "time"

[data]
kind = "two_moons"          # two_moons, swiss_roll_2d, s_curve_2d, checkerboard,
                            # circles, gaussian_mixture_8, gaussian
# mean = [0.0, 0.0]         # gaussian only; sets the dimension
std = 1.0                   # gaussian only
scale = 1.0
# noise = 0.05              # jitter; default depends on the family

[prior]
kind = "from_data"          # "gaussian", "from_data" or "dataset"
# mean = [0.0, 0.0]         # gaussian; default zero
var = 1.0                   # gaussian
inflation = 1.0             # from_data: variance multiplier (>= 1)
n_fit = 10000               # from_data: draws used for the fit
# [prior.dataset]           # dataset: same keys as [data]

[eval]
every = 1                   # evaluate every this many IPF iterations
n_samples = 2000
n_projections = 50          # sliced-Wasserstein directions
snapshot_times = []         # grid times recorded from the final backward chain
record_wall_time = true
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults_match_code_defaults() {
        assert_eq!(ExperimentConfig::parse(DEFAULT_CONFIG_DOC).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = Some("x/y".into());
        cfg.data = DataConfig {
            kind: "gaussian".into(),
            mean: Some(vec![0.1, -0.1]),
            std: 1.0,
            scale: 1.0,
            noise: Some(0.0),
        };
        cfg.training.variant = Some(VariantKind::ScoreMatching);
        cfg.training.cache_thinning = Some(4);
        cfg.prior.kind = PriorKind::Dataset;
        cfg.prior.dataset = Some(DataConfig::default());
        cfg.eval.snapshot_times = vec![0.0, 0.1];
        let text = cfg.to_toml();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = ExperimentConfig::parse("[training]\nlearning_rate = 0.1\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("learning_rate") && msg.contains("line 2"), "{msg}");
        assert!(ExperimentConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.training.lr = -1.0;
        assert!(format!("{:#}", cfg.resolve().err().unwrap()).contains("learning rate"));
        let mut cfg = ExperimentConfig::default();
        cfg.data.kind = "spiral".into();
        assert!(format!("{:#}", cfg.resolve().err().unwrap()).contains("data.kind"));
        let mut cfg = ExperimentConfig::default();
        cfg.eval.snapshot_times = vec![0.015];
        assert!(format!("{:#}", cfg.resolve().err().unwrap()).contains("snapshot_times"));
        let mut cfg = ExperimentConfig::default();
        cfg.prior.kind = PriorKind::Gaussian;
        cfg.prior.mean = Some(vec![0.0; 3]);
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn gaussian_prior_defaults_to_zero_mean() {
        let mut cfg = ExperimentConfig::default();
        cfg.prior.kind = PriorKind::Gaussian;
        cfg.prior.var = 2.0;
        let r = cfg.resolve().unwrap();
        assert_eq!(r.prior, PriorSpec::Gaussian { mean: vec![0.0, 0.0], var: 2.0 });
        assert_eq!(r.dim, 2);
    }
}
