//! Experiment configuration: a TOML document of flat keys grouped into
//! `[sections]`, resolved and validated into an [`ExperimentConfig`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::TransformerConfig;
use crate::optim::{DenomMode, Method, OptimizerConfig, Schedule, ScheduleKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Trajectory2d,
    TrainMlp,
    TrainLm,
    MemoryReport,
    GradnormCompare,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Trajectory2d => "trajectory2d",
            Experiment::TrainMlp => "train_mlp",
            Experiment::TrainLm => "train_lm",
            Experiment::MemoryReport => "memory_report",
            Experiment::GradnormCompare => "gradnorm_compare",
        }
    }
}

/// Whether parameter updates happen inside the backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusedMode {
    /// Fused for LOMO and AdaLomo, full backward otherwise.
    #[default]
    Auto,
    Always,
    Never,
}

/// The `[optimizer]` section; `[overrides.<method>]` sections use the same
/// keys except `methods` and `fused`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHyper {
    methods: Option<Vec<String>>,
    fused: Option<FusedMode>,
    alpha: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    beta: Option<f64>,
    eps: Option<f64>,
    eps1: Option<f64>,
    eps2: Option<f64>,
    weight_decay: Option<f64>,
    clip_threshold: Option<f64>,
    denom: Option<String>,
    schedule: Option<ScheduleKind>,
    warmup_steps: Option<u64>,
    total_steps: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    #[default]
    Transformer,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: Option<ModelKind>,
    widths: Option<Vec<usize>>,
    vocab: Option<usize>,
    d_model: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    context: Option<usize>,
    d_ff: Option<usize>,
    init_std: Option<f64>,
    seq_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Markov,
    File,
    Regression,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    source: Option<DataSource>,
    path: Option<PathBuf>,
    val_fraction: Option<f64>,
    seed: Option<u64>,
    symbols: Option<usize>,
    successors: Option<usize>,
    tokens: Option<usize>,
    samples: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrajectory {
    start: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGradnorm {
    threshold: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Experiment,
    seed: Option<u64>,
    steps: Option<u64>,
    batch_size: Option<usize>,
    eval_interval: Option<u64>,
    eval_batches: Option<usize>,
    out_dir: Option<PathBuf>,
    #[serde(default)]
    optimizer: RawHyper,
    #[serde(default)]
    overrides: BTreeMap<String, RawHyper>,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    trajectory: RawTrajectory,
    #[serde(default)]
    gradnorm: RawGradnorm,
}

/// One optimizer to run, with its resolved hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSpec {
    pub method: Method,
    pub config: OptimizerConfig,
    pub fused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    None,
    Mlp { widths: Vec<usize>, init_std: f64 },
    Transformer { config: TransformerConfig, seq_len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    None,
    Markov {
        seed: u64,
        symbols: usize,
        successors: usize,
        tokens: usize,
        val_fraction: f64,
    },
    File {
        path: PathBuf,
        val_fraction: f64,
    },
    Regression {
        seed: u64,
        samples: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_interval: u64,
    pub eval_batches: usize,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    pub methods: Vec<MethodSpec>,
    pub model: ModelSpec,
    pub data: DataSpec,
    pub start: Option<[f64; 2]>,
    pub clip_threshold: Option<f64>,
}

pub const DEFAULT_EVAL_INTERVAL: u64 = 100;
pub const DEFAULT_VAL_FRACTION: f64 = 0.01;

impl ExperimentConfig {
    /// Reads and validates a config file. Relative data paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent())
    }

    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        resolve(raw, base)
    }

    pub fn method(&self, method: Method) -> Option<&MethodSpec> {
        self.methods.iter().find(|m| m.method == method)
    }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Self::parse(s, None)
    }
}

fn apply_hyper(cfg: &mut OptimizerConfig, h: &RawHyper, steps: u64) -> Result<(), ConfigError> {
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = h.$f { cfg.$f = v; } )* };
    }
    set!(alpha, beta1, beta2, beta, eps, eps1, eps2, weight_decay);
    if h.clip_threshold.is_some() {
        cfg.clip_threshold = h.clip_threshold;
    }
    if let Some(d) = &h.denom {
        cfg.denom = d.parse::<DenomMode>().map_err(ConfigError::Invalid)?;
    }
    if let Some(kind) = h.schedule {
        cfg.schedule.kind = kind;
        if kind == ScheduleKind::Constant {
            cfg.schedule = Schedule::CONSTANT;
        } else if cfg.schedule.total_steps == u64::MAX {
            cfg.schedule.total_steps = steps;
        }
    }
    if let Some(w) = h.warmup_steps {
        cfg.schedule.warmup_steps = w;
    }
    if let Some(t) = h.total_steps {
        cfg.schedule.total_steps = t;
    }
    Ok(())
}

fn default_methods(experiment: Experiment) -> Vec<&'static str> {
    match experiment {
        Experiment::Trajectory2d => vec!["sgd", "momentum", "adam", "variance"],
        Experiment::MemoryReport => vec!["adamw", "adafactor", "lomo", "adalomo"],
        Experiment::GradnormCompare => vec!["adalomo"],
        Experiment::TrainMlp | Experiment::TrainLm => vec!["adalomo"],
    }
}

fn resolve(raw: RawConfig, base: Option<&Path>) -> Result<ExperimentConfig, ConfigError> {
    let exp = raw.experiment;
    let steps = raw.steps.unwrap_or(match exp {
        Experiment::Trajectory2d => 2000,
        Experiment::MemoryReport => 1,
        _ => 1000,
    });
    let batch_size = raw.batch_size.unwrap_or(match exp {
        Experiment::TrainMlp | Experiment::MemoryReport => 32,
        _ => 8,
    });
    if batch_size == 0 {
        return invalid("batch_size must be positive");
    }
    let eval_interval = raw.eval_interval.unwrap_or(DEFAULT_EVAL_INTERVAL);
    if eval_interval == 0 {
        return invalid("eval_interval must be positive");
    }
    let eval_batches = raw.eval_batches.unwrap_or(16);
    if eval_batches == 0 {
        return invalid("eval_batches must be positive");
    }

    let names: Vec<String> = match &raw.optimizer.methods {
        Some(list) if list.is_empty() => return invalid("optimizer.methods is empty"),
        Some(list) => list.clone(),
        None => default_methods(exp).into_iter().map(String::from).collect(),
    };
    let fused_mode = raw.optimizer.fused.unwrap_or_default();
    let mut methods = Vec::new();
    for name in &names {
        let method: Method = name.parse().map_err(|e: crate::optim::OptimError| ConfigError::Invalid(e.to_string()))?;
        if methods.iter().any(|m: &MethodSpec| m.method == method) {
            return invalid(format!("optimizer `{name}` listed twice"));
        }
        let mut cfg = OptimizerConfig::default();
        if exp == Experiment::Trajectory2d {
            cfg.alpha = super::trajectory::default_alpha(method);
        }
        apply_hyper(&mut cfg, &raw.optimizer, steps)?;
        if let Some(h) = raw.overrides.get(method.name()) {
            if h.methods.is_some() || h.fused.is_some() {
                return invalid(format!("overrides.{method} may only set hyperparameters"));
            }
            apply_hyper(&mut cfg, h, steps)?;
        }
        cfg.validate().map_err(|e| ConfigError::Invalid(format!("{method}: {e}")))?;
        let fused = match fused_mode {
            FusedMode::Auto => method.is_fused(),
            FusedMode::Always => true,
            FusedMode::Never => false,
        };
        methods.push(MethodSpec { method, config: cfg, fused });
    }
    for key in raw.overrides.keys() {
        if !methods.iter().any(|m| m.method.name() == key.to_ascii_lowercase()) {
            return invalid(format!("overrides.{key} names an optimizer that is not run"));
        }
    }

    let model = resolve_model(exp, &raw.model)?;
    let data = resolve_data(&model, &raw.data, base)?;

    let start = match exp {
        Experiment::Trajectory2d => {
            let s = raw.trajectory.start.unwrap_or(super::trajectory::FROZEN_START);
            if !s.iter().all(|v| v.is_finite()) {
                return invalid("trajectory.start must be finite");
            }
            Some(s)
        }
        _ => None,
    };

    let clip_threshold = match exp {
        Experiment::GradnormCompare => {
            if methods.len() != 1 || !matches!(methods[0].method, Method::Lomo | Method::AdaLomo) {
                return invalid("gradnorm_compare runs exactly one optimizer, lomo or adalomo");
            }
            let t = raw.gradnorm.threshold.unwrap_or(1.0);
            if !(t > 0.0) {
                return invalid("gradnorm.threshold must be positive");
            }
            Some(t)
        }
        _ => None,
    };

    Ok(ExperimentConfig {
        experiment: exp,
        seed: raw.seed.unwrap_or(0),
        steps,
        batch_size,
        eval_interval,
        eval_batches,
        out_dir: raw.out_dir,
        methods,
        model,
        data,
        start,
        clip_threshold,
    })
}

fn resolve_model(exp: Experiment, m: &RawModel) -> Result<ModelSpec, ConfigError> {
    let kind = match exp {
        Experiment::Trajectory2d => return Ok(ModelSpec::None),
        Experiment::TrainMlp => ModelKind::Mlp,
        Experiment::TrainLm => ModelKind::Transformer,
        Experiment::MemoryReport | Experiment::GradnormCompare => m.kind.unwrap_or_default(),
    };
    if let Some(k) = m.kind {
        if k != kind {
            return invalid(format!("{} requires model.kind = {kind:?}", exp.name()));
        }
    }
    Ok(match kind {
        ModelKind::Mlp => {
            let widths = m.widths.clone().unwrap_or_else(|| vec![8, 32, 32, 1]);
            if widths.len() < 2 || widths.contains(&0) {
                return invalid("model.widths needs at least two positive entries");
            }
            let init_std = m.init_std.unwrap_or(0.02);
            if !(init_std > 0.0) {
                return invalid("model.init_std must be positive");
            }
            ModelSpec::Mlp { widths, init_std }
        }
        ModelKind::Transformer => {
            let d = TransformerConfig::default();
            let config = TransformerConfig {
                vocab: m.vocab.unwrap_or(d.vocab),
                d_model: m.d_model.unwrap_or(d.d_model),
                layers: m.layers.unwrap_or(d.layers),
                heads: m.heads.unwrap_or(d.heads),
                context: m.context.unwrap_or(d.context),
                d_ff: m.d_ff.unwrap_or(4 * m.d_model.unwrap_or(d.d_model)),
                init_std: m.init_std.unwrap_or(d.init_std),
            };
            config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let seq_len = m.seq_len.unwrap_or(config.context);
            if seq_len == 0 || seq_len > config.context {
                return invalid(format!("model.seq_len must lie in 1..={}", config.context));
            }
            ModelSpec::Transformer { config, seq_len }
        }
    })
}

fn resolve_data(model: &ModelSpec, d: &RawData, base: Option<&Path>) -> Result<DataSpec, ConfigError> {
    let val_fraction = d.val_fraction.unwrap_or(DEFAULT_VAL_FRACTION);
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return invalid("data.val_fraction must lie in (0, 1)");
    }
    let seed = d.seed.unwrap_or(0);
    let source = match (model, d.source) {
        (ModelSpec::None, _) => return Ok(DataSpec::None),
        (ModelSpec::Mlp { .. }, None | Some(DataSource::Regression)) => DataSource::Regression,
        (ModelSpec::Transformer { .. }, None) => DataSource::Markov,
        (ModelSpec::Transformer { .. }, Some(s @ (DataSource::Markov | DataSource::File))) => s,
        (_, Some(s)) => return invalid(format!("data.source = {s:?} does not fit the model")),
    };
    Ok(match source {
        DataSource::Regression => DataSpec::Regression {
            seed,
            samples: positive(d.samples.unwrap_or(256), "data.samples")?,
        },
        DataSource::Markov => DataSpec::Markov {
            seed,
            symbols: positive(d.symbols.unwrap_or(24), "data.symbols")?.min(256),
            successors: positive(d.successors.unwrap_or(3), "data.successors")?,
            tokens: positive(d.tokens.unwrap_or(200_000), "data.tokens")?,
            val_fraction,
        },
        DataSource::File => {
            let Some(path) = &d.path else {
                return invalid("data.source = file requires data.path");
            };
            let path = match base {
                Some(b) if path.is_relative() => b.join(path),
                _ => path.clone(),
            };
            if !path.is_file() {
                return invalid(format!("data.path {} does not exist", path.display()));
            }
            DataSpec::File { path, val_fraction }
        }
    })
}

fn positive(v: usize, key: &str) -> Result<usize, ConfigError> {
    if v == 0 {
        return invalid(format!("{key} must be positive"));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_lm_config_takes_defaults() {
        let c: ExperimentConfig = "experiment = \"train_lm\"".parse().unwrap();
        assert_eq!(c.eval_interval, 100);
        assert_eq!(c.methods.len(), 1);
        assert_eq!(c.methods[0].method, Method::AdaLomo);
        assert!(c.methods[0].fused);
        let ModelSpec::Transformer { config, seq_len } = c.model else { panic!() };
        assert_eq!(config, TransformerConfig::default());
        assert_eq!(seq_len, 64);
        assert!(matches!(c.data, DataSpec::Markov { val_fraction, .. } if val_fraction == 0.01));
    }

    #[test]
    fn sections_overrides_and_schedule() {
        let text = r#"
            experiment = "train_lm"
            steps = 500
            [optimizer]
            methods = ["adamw", "sgd"]
            alpha = 0.001
            schedule = "warmup_cosine"
            warmup_steps = 50
            [overrides.sgd]
            alpha = 0.3
        "#;
        let c: ExperimentConfig = text.parse().unwrap();
        let adamw = c.method(Method::AdamW).unwrap();
        let sgd = c.method(Method::Sgd).unwrap();
        assert_eq!(adamw.config.alpha, 0.001);
        assert_eq!(sgd.config.alpha, 0.3);
        assert_eq!(sgd.config.schedule, Schedule::warmup_cosine(50, 500));
        assert!(!adamw.fused && !sgd.fused);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            "experiment = \"train_lm\"\nbogus = 1",
            "experiment = \"dance\"",
            "experiment = \"train_lm\"\n[optimizer]\nmethods = [\"rmsprop\"]",
            "experiment = \"train_lm\"\n[optimizer]\nbeta = 1.5",
            "experiment = \"train_lm\"\n[overrides.adam]\nalpha = 0.1",
            "experiment = \"gradnorm_compare\"\n[optimizer]\nmethods = [\"adam\"]",
            "experiment = \"train_lm\"\n[data]\nsource = \"file\"\npath = \"/nonexistent/x.txt\"",
            "experiment = \"train_lm\"\n[model]\nseq_len = 65",
            "experiment = \"train_mlp\"\n[model]\nkind = \"transformer\"",
            "experiment = \"train_lm\"\n[optimizer]\ndenom = \"cube\"",
            "experiment = \"train_mlp\"\n[data]\nsource = \"markov\"",
        ];
        for text in bad {
            assert!(text.parse::<ExperimentConfig>().is_err(), "{text}");
        }
    }

    #[test]
    fn relative_data_path_resolves_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("corpus.txt"), "hello").unwrap();
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, "experiment = \"train_lm\"\n[data]\nsource = \"file\"\npath = \"corpus.txt\"\n").unwrap();
        let c = ExperimentConfig::load(&cfg_path).unwrap();
        assert!(matches!(c.data, DataSpec::File { ref path, .. } if path == &dir.path().join("corpus.txt")));
    }

    #[test]
    fn trajectory_defaults_to_frozen_start() {
        let c: ExperimentConfig = "experiment = \"trajectory2d\"".parse().unwrap();
        assert_eq!(c.start, Some(super::super::trajectory::FROZEN_START));
        assert_eq!(c.methods.len(), 4);
        assert_eq!(c.steps, 2000);
    }
}
