//! Run configuration: JSON file, then flag overrides, then validation.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use ultralbm::analysis::Convention;
use ultralbm::data::SynthSpec;
use ultralbm::losses::DistillWeights;
use ultralbm::network::{ModelConfig, SkipScaleMode, StageKind};
use ultralbm::training::{DistillStrategy, Schedule, TrainConfig};
use ultralbm::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    Hybrid,
    PlainKl,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub strategy: StrategyKind,
    pub weights: DistillWeights,
    /// Weight of the softened KL term under the plain-KL strategy.
    pub lambda_kl: f64,
    pub kl_tau: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Hybrid,
            weights: DistillWeights::default(),
            lambda_kl: 1.0,
            kl_tau: 4.0,
        }
    }
}

impl DistillSection {
    /// `None` means train without a teacher.
    pub fn strategy(&self) -> Option<DistillStrategy> {
        match self.strategy {
            StrategyKind::Hybrid => Some(DistillStrategy::Hybrid(self.weights.clone())),
            StrategyKind::PlainKl => Some(DistillStrategy::PlainKl {
                lambda_h: self.weights.lambda_h,
                lambda_kl: self.lambda_kl,
                tau: self.kl_tau,
            }),
            StrategyKind::None => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Fraction of samples used for training; the rest validates.
    pub split: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            split: 0.8,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    pub input_size: usize,
    pub batch: usize,
    pub convention: Convention,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            input_size: 256,
            batch: 1,
            convention: Convention::Mac,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    /// Empty runs every check.
    pub checks: Vec<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Absent means the subcommand's default preset.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    /// Explicit seed list; absent means `num_seeds` seeds starting at `train.seed`.
    pub seeds: Option<Vec<u64>>,
    pub distill: DistillSection,
    pub synth: SynthSpec,
    pub data: DataSection,
    pub analyze: AnalyzeSection,
    pub gradcheck: GradcheckSection,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    pub fn model(&self) -> ModelConfig {
        self.model.clone().unwrap_or_default()
    }

    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) if !s.is_empty() => s.clone(),
            _ => (0..self.train.num_seeds as u64).map(|k| self.train.seed + k).collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
    }
}

pub fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("missing path: pass {flag} or set it in the config file")))
}

fn parse_stage_kind(s: &str) -> std::result::Result<StageKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "g" | "glmbp" => Ok(StageKind::Glmbp),
        "l" | "lmbp" => Ok(StageKind::Lmbp),
        other => Err(format!("unknown stage kind '{other}' (expected glmbp or lmbp)")),
    }
}

fn parse_skip_mode(s: &str) -> std::result::Result<SkipScaleMode, String> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "none" => Ok(SkipScaleMode::None),
        "shared" => Ok(SkipScaleMode::Shared),
        "stage_wise" => Ok(SkipScaleMode::StageWise),
        other => Err(format!("unknown skip-scale mode '{other}' (expected none, shared or stage_wise)")),
    }
}

fn parse_schedule(s: &str) -> std::result::Result<Schedule, String> {
    match s.to_ascii_lowercase().as_str() {
        "cyclic" => Ok(Schedule::Cyclic),
        "clamp" => Ok(Schedule::Clamp),
        other => Err(format!("unknown schedule '{other}' (expected cyclic or clamp)")),
    }
}

fn parse_strategy(s: &str) -> std::result::Result<StrategyKind, String> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "hybrid" | "full" => Ok(StrategyKind::Hybrid),
        "plain_kl" | "kl" => Ok(StrategyKind::PlainKl),
        "none" => Ok(StrategyKind::None),
        other => Err(format!("unknown strategy '{other}' (expected hybrid, plain_kl or none)")),
    }
}

fn parse_convention(s: &str) -> std::result::Result<Convention, String> {
    match s.to_ascii_lowercase().as_str() {
        "mac" => Ok(Convention::Mac),
        "2mac" => Ok(Convention::TwoMac),
        other => Err(format!("unknown convention '{other}' (expected mac or 2mac)")),
    }
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArg {
    /// JSON config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct ModelArgs {
    /// Model preset: full or t [default: full for train/analyze, t for distill]
    #[arg(long)]
    pub variant: Option<String>,
    /// Six stage widths, comma separated [default: 8,16,24,32,48,64]
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Block kind for stages IV..VI, e.g. lmbp,glmbp,glmbp [default: lmbp,glmbp,glmbp]
    #[arg(long, value_delimiter = ',', value_parser = parse_stage_kind)]
    pub stage_kinds: Option<Vec<StageKind>>,
    /// Encoder depthwise kernels for stages IV..VI [default: 3,5,7]
    #[arg(long, value_delimiter = ',')]
    pub encoder_kernels: Option<Vec<usize>>,
    /// Decoder depthwise kernels [default: 7,5,3]
    #[arg(long, value_delimiter = ',')]
    pub decoder_kernels: Option<Vec<usize>>,
    /// Skip scaling: none, shared or stage_wise [default: shared]
    #[arg(long, value_parser = parse_skip_mode)]
    pub skip_scale_mode: Option<SkipScaleMode>,
    /// Initial skip scale [default: 1.0]
    #[arg(long)]
    pub skip_scale_init: Option<f64>,
    /// SSM state size [default: 16]
    #[arg(long)]
    pub d_state: Option<usize>,
    /// SSM causal conv width [default: 4]
    #[arg(long)]
    pub d_conv: Option<usize>,
    /// SSM inner expansion [default: 1]
    #[arg(long)]
    pub expand: Option<usize>,
    /// SSM step-size rank [default: ceil(width / 4)]
    #[arg(long)]
    pub dt_rank: Option<usize>,
}

impl ModelArgs {
    pub fn apply(&self, cfg: &mut RunConfig, default_preset: &str) -> Result<()> {
        let mut m = match (&self.variant, &cfg.model) {
            (Some(v), _) => ModelConfig::preset(v)?,
            (None, Some(m)) => m.clone(),
            (None, None) => ModelConfig::preset(default_preset)?,
        };
        set!(m.channels, self.channels);
        set!(m.stage_kinds, self.stage_kinds);
        set!(m.encoder_kernels, self.encoder_kernels);
        set!(m.decoder_kernels, self.decoder_kernels);
        set!(m.skip_scale_mode, self.skip_scale_mode);
        set!(m.skip_scale_init, self.skip_scale_init);
        set!(m.mamba.d_state, self.d_state);
        set!(m.mamba.d_conv, self.d_conv);
        set!(m.mamba.expand, self.expand);
        if self.dt_rank.is_some() {
            m.mamba.dt_rank = self.dt_rank;
        }
        m.validate()?;
        cfg.model = Some(m);
        Ok(())
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainArgs {
    /// Base learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// AdamW weight decay [default: 0.01]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Training epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Cosine half period in epochs [default: 50]
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Minimum learning rate [default: 1e-5]
    #[arg(long)]
    pub eta_min: Option<f64>,
    /// Schedule past t_max: cyclic or clamp [default: cyclic]
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<Schedule>,
    /// Seed for initialization, shuffling and augmentation [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds when --seeds is absent [default: 3]
    #[arg(long)]
    pub num_seeds: Option<usize>,
    /// Explicit seed list, e.g. 0,1,2; results are reported as mean ± std
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Square input size, a multiple of 32 [default: 64]
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Random horizontal flips [default: true]
    #[arg(long)]
    pub hflip: Option<bool>,
    /// Random vertical flips [default: true]
    #[arg(long)]
    pub vflip: Option<bool>,
    /// Random quarter turns [default: true]
    #[arg(long)]
    pub rot90: Option<bool>,
    /// Global gradient-norm clip [default: off]
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Training fraction of the dataset [default: 0.8]
    #[arg(long)]
    pub split: Option<f64>,
    /// Seed of the train/validation split [default: 0]
    #[arg(long)]
    pub split_seed: Option<u64>,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let t = &mut cfg.train;
        set!(t.lr, self.lr);
        set!(t.weight_decay, self.weight_decay);
        set!(t.epochs, self.epochs);
        set!(t.batch_size, self.batch_size);
        set!(t.t_max, self.t_max);
        set!(t.eta_min, self.eta_min);
        set!(t.schedule, self.schedule);
        set!(t.seed, self.seed);
        set!(t.num_seeds, self.num_seeds);
        set!(t.image_size, self.image_size);
        set!(t.hflip, self.hflip);
        set!(t.vflip, self.vflip);
        set!(t.rot90, self.rot90);
        if self.grad_clip.is_some() {
            t.grad_clip = self.grad_clip;
        }
        if self.seeds.is_some() {
            cfg.seeds = self.seeds.clone();
        }
        set!(cfg.data.split, self.split);
        set!(cfg.data.split_seed, self.split_seed);
        cfg.train.validate()?;
        if !(cfg.data.split > 0.0 && cfg.data.split < 1.0) {
            return Err(Error::Config(format!("split must lie in (0, 1), got {}", cfg.data.split)));
        }
        Ok(())
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct DistillArgs {
    /// Teacher objective: hybrid, plain_kl or none [default: hybrid]
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<StrategyKind>,
    /// Hard-label weight [default: 1.0]
    #[arg(long)]
    pub lambda_h: Option<f64>,
    /// Soft-output KL weight [default: 1.0]
    #[arg(long)]
    pub lambda_s: Option<f64>,
    /// Attention-transfer weight [default: 0.5]
    #[arg(long)]
    pub lambda_a: Option<f64>,
    /// Edge gradient-matching weight [default: 0.5]
    #[arg(long)]
    pub lambda_g: Option<f64>,
    /// Attention softmax temperature [default: 1.0]
    #[arg(long)]
    pub tau_a: Option<f64>,
    /// KL weight for the plain_kl strategy [default: 1.0]
    #[arg(long)]
    pub lambda_kl: Option<f64>,
    /// Logit temperature for the plain_kl strategy [default: 4.0]
    #[arg(long)]
    pub kl_tau: Option<f64>,
}

impl DistillArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let d = &mut cfg.distill;
        set!(d.strategy, self.strategy);
        set!(d.weights.lambda_h, self.lambda_h);
        set!(d.weights.lambda_s, self.lambda_s);
        set!(d.weights.lambda_a, self.lambda_a);
        set!(d.weights.lambda_g, self.lambda_g);
        set!(d.weights.tau_a, self.tau_a);
        set!(d.lambda_kl, self.lambda_kl);
        set!(d.kl_tau, self.kl_tau);
        d.weights.validate()?;
        if !(d.lambda_kl >= 0.0 && d.kl_tau > 0.0) {
            return Err(Error::Config("lambda_kl must be non-negative and kl_tau positive".into()));
        }
        Ok(())
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct SynthArgs {
    /// Number of samples [default: 200]
    #[arg(long)]
    pub count: Option<usize>,
    /// Square image size, a multiple of 32 [default: 64]
    #[arg(long)]
    pub size: Option<usize>,
    /// Generator seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Minimum lesions per image [default: 1]
    #[arg(long)]
    pub lesions_min: Option<usize>,
    /// Maximum lesions per image [default: 3]
    #[arg(long)]
    pub lesions_max: Option<usize>,
    /// Smallest semi-axis as a fraction of the size [default: 0.08]
    #[arg(long)]
    pub axis_min: Option<f64>,
    /// Largest semi-axis as a fraction of the size [default: 0.25]
    #[arg(long)]
    pub axis_max: Option<f64>,
    /// Gaussian pixel noise [default: 0.05]
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Illumination gradient amplitude [default: 0.15]
    #[arg(long)]
    pub gradient_amplitude: Option<f64>,
}

impl SynthArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let s = &mut cfg.synth;
        set!(s.count, self.count);
        set!(s.size, self.size);
        set!(s.seed, self.seed);
        set!(s.lesions_min, self.lesions_min);
        set!(s.lesions_max, self.lesions_max);
        set!(s.axis_min, self.axis_min);
        set!(s.axis_max, self.axis_max);
        set!(s.noise_sigma, self.noise_sigma);
        set!(s.gradient_amplitude, self.gradient_amplitude);
        s.validate()
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct AnalyzeArgs {
    /// Square input size [default: 256]
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Batch size of the analyzed input [default: 1]
    #[arg(long)]
    pub batch: Option<usize>,
    /// FLOP convention: mac or 2mac [default: mac]
    #[arg(long, value_parser = parse_convention)]
    pub convention: Option<Convention>,
}

impl AnalyzeArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let a = &mut cfg.analyze;
        set!(a.input_size, self.input_size);
        set!(a.batch, self.batch);
        set!(a.convention, self.convention);
        if a.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct GradcheckArgs {
    /// Check to run, repeatable [default: all]
    #[arg(long = "check")]
    pub checks: Vec<String>,
    /// Seed of the random test points [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

impl GradcheckArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if !self.checks.is_empty() {
            cfg.gradcheck.checks = self.checks.clone();
        }
        set!(cfg.gradcheck.seed, self.seed);
        for c in &cfg.gradcheck.checks {
            if !ultralbm::analysis::gradsuite::CHECKS.contains(&c.as_str()) {
                return Err(Error::Config(format!(
                    "unknown check '{c}' (expected one of {})",
                    ultralbm::analysis::gradsuite::CHECKS.join(", ")
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let mut cfg: RunConfig = serde_json::from_str(r#"{"train": {"lr": 0.005, "epochs": 7}}"#).unwrap();
        let flags = TrainArgs {
            epochs: Some(2),
            ..TrainArgs::default()
        };
        flags.apply(&mut cfg).unwrap();
        assert_eq!(cfg.train.lr, 0.005);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"learning_rate": 0.1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"chanels": [1]}}"#).is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = RunConfig::default();
        ModelArgs::default().apply(&mut cfg, "t").unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.seed_list(), vec![0, 1, 2]);
    }

    #[test]
    fn variant_then_overrides() {
        let mut cfg = RunConfig::default();
        let m = ModelArgs {
            variant: Some("t".into()),
            stage_kinds: Some(vec![StageKind::Glmbp; 3]),
            ..ModelArgs::default()
        };
        m.apply(&mut cfg, "full").unwrap();
        let model = cfg.model();
        assert_eq!(model.channels, ModelConfig::tiny().channels);
        assert_eq!(model.stage_kinds, vec![StageKind::Glmbp; 3]);
        let bad = ModelArgs {
            channels: Some(vec![8, 16, 24, 32, 48, 65]),
            ..ModelArgs::default()
        };
        assert!(bad.apply(&mut RunConfig::default(), "full").is_err());
    }
}
