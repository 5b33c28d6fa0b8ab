use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::factored::{
    step_adafactor, step_adalomo, AdaLomoState, DenomMode, FactoredHyper, SecondMoment,
};
use super::rules::{
    step_adam, step_adamw, step_lomo, step_momentum, step_variance, AdamState, MomentumState,
    VarianceState,
};
use super::schedule::{schedule_alpha, Schedule};
use super::OptimError;
use crate::autograd::{ParamId, ParamStore};
use crate::memtrack::{Category, LedgerError, MemoryLedger};
use crate::tensor::{read_tensor, write_tensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sgd,
    Lomo,
    Momentum,
    Variance,
    Adam,
    AdamW,
    Adafactor,
    AdaLomo,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Sgd,
        Method::Lomo,
        Method::Momentum,
        Method::Variance,
        Method::Adam,
        Method::AdamW,
        Method::Adafactor,
        Method::AdaLomo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Lomo => "lomo",
            Method::Momentum => "momentum",
            Method::Variance => "variance",
            Method::Adam => "adam",
            Method::AdamW => "adamw",
            Method::Adafactor => "adafactor",
            Method::AdaLomo => "adalomo",
        }
    }

    /// Whether the method updates parameters inside the backward sweep.
    pub fn is_fused(self) -> bool {
        matches!(self, Method::Lomo | Method::AdaLomo)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, OptimError> {
        let lower = s.to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| OptimError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decay of the AdaLomo second moment.
    pub beta: f64,
    /// Denominator guard for the Adam family.
    pub eps: f64,
    /// Denominator guard for the factored methods.
    pub eps1: f64,
    /// Floor on the parameter RMS in grouped normalization.
    pub eps2: f64,
    pub weight_decay: f64,
    pub clip_threshold: Option<f64>,
    pub denom: DenomMode,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            beta: 0.9,
            eps: 1e-8,
            eps1: 1e-6,
            eps2: 1e-3,
            weight_decay: 0.01,
            clip_threshold: None,
            denom: DenomMode::Sqrt,
            schedule: Schedule::CONSTANT,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |msg: String| Err(OptimError::Config(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta", self.beta)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        for (name, e) in [("eps", self.eps), ("eps1", self.eps1), ("eps2", self.eps2)] {
            if !(e > 0.0) {
                return bad(format!("{name} must be positive, got {e}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Some(c) = self.clip_threshold {
            if !(c > 0.0) {
                return bad(format!("clip_threshold must be positive, got {c}"));
            }
        }
        self.schedule.validate().map_err(OptimError::Config)
    }

    fn adalomo_hyper(&self) -> FactoredHyper {
        FactoredHyper {
            beta: self.beta,
            eps1: self.eps1,
            eps2: self.eps2,
            mode: self.denom,
        }
    }

    fn adafactor_hyper(&self) -> FactoredHyper {
        FactoredHyper {
            beta: self.beta2,
            eps1: self.eps1,
            eps2: self.eps2,
            mode: DenomMode::Sqrt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamState {
    Stateless,
    Momentum(MomentumState),
    Variance(VarianceState),
    Adam(AdamState),
    Factored(AdaLomoState),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    M,
    V,
    R,
    C,
}

impl SlotKind {
    pub fn name(self) -> &'static str {
        match self {
            SlotKind::M => "m",
            SlotKind::V => "v",
            SlotKind::R => "r",
            SlotKind::C => "c",
        }
    }

    fn parse(s: &str) -> Option<SlotKind> {
        match s {
            "m" => Some(SlotKind::M),
            "v" => Some(SlotKind::V),
            "r" => Some(SlotKind::R),
            "c" => Some(SlotKind::C),
            _ => None,
        }
    }
}

/// One optimizer-state tensor attached to a parameter.
#[derive(Debug)]
pub struct StateSlot<'a> {
    pub param: ParamId,
    pub kind: SlotKind,
    pub step: u64,
    pub tensor: &'a Tensor,
}

impl ParamState {
    fn new(method: Method, theta: &Tensor) -> Result<Self, OptimError> {
        Ok(match method {
            Method::Sgd | Method::Lomo => ParamState::Stateless,
            Method::Momentum => ParamState::Momentum(MomentumState::new(theta)),
            Method::Variance => ParamState::Variance(VarianceState::new(theta)),
            Method::Adam | Method::AdamW => ParamState::Adam(AdamState::new(theta)),
            Method::Adafactor | Method::AdaLomo => ParamState::Factored(AdaLomoState::new(theta)?),
        })
    }

    fn step(&self) -> u64 {
        match self {
            ParamState::Stateless => 0,
            ParamState::Momentum(s) => s.t,
            ParamState::Variance(s) => s.t,
            ParamState::Adam(s) => s.t,
            ParamState::Factored(s) => s.t,
        }
    }

    fn set_step(&mut self, t: u64) {
        match self {
            ParamState::Stateless => {}
            ParamState::Momentum(s) => s.t = t,
            ParamState::Variance(s) => s.t = t,
            ParamState::Adam(s) => s.t = t,
            ParamState::Factored(s) => s.t = t,
        }
    }

    fn slots(&self) -> Vec<(SlotKind, &Tensor)> {
        match self {
            ParamState::Stateless => vec![],
            ParamState::Momentum(s) => vec![(SlotKind::M, &s.m)],
            ParamState::Variance(s) => vec![(SlotKind::V, &s.v)],
            ParamState::Adam(s) => vec![(SlotKind::M, &s.m), (SlotKind::V, &s.v)],
            ParamState::Factored(s) => match &s.moment {
                SecondMoment::Factored(fm) => vec![(SlotKind::R, &fm.r), (SlotKind::C, &fm.c)],
                SecondMoment::Full(v) => vec![(SlotKind::V, v)],
            },
        }
    }

    fn slot_mut(&mut self, kind: SlotKind) -> Option<&mut Tensor> {
        match (self, kind) {
            (ParamState::Momentum(s), SlotKind::M) => Some(&mut s.m),
            (ParamState::Variance(s), SlotKind::V) => Some(&mut s.v),
            (ParamState::Adam(s), SlotKind::M) => Some(&mut s.m),
            (ParamState::Adam(s), SlotKind::V) => Some(&mut s.v),
            (ParamState::Factored(s), kind) => match (&mut s.moment, kind) {
                (SecondMoment::Factored(fm), SlotKind::R) => Some(&mut fm.r),
                (SecondMoment::Factored(fm), SlotKind::C) => Some(&mut fm.c),
                (SecondMoment::Full(v), SlotKind::V) => Some(v),
                _ => None,
            },
            _ => None,
        }
    }
}

/// Per-parameter optimizer state plus the step clock and schedule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    method: Method,
    config: OptimizerConfig,
    states: Vec<ParamState>,
    step: u64,
    alpha_t: f64,
}

impl Optimizer {
    pub fn new(method: Method, config: OptimizerConfig, params: &ParamStore) -> Result<Self, OptimError> {
        config.validate()?;
        let states = params
            .iter()
            .map(|p| ParamState::new(method, p.value()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Optimizer {
            method,
            config,
            states,
            step: 0,
            alpha_t: schedule_alpha(&config.schedule, config.alpha, 0),
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Learning rate for the current step.
    pub fn alpha_t(&self) -> f64 {
        self.alpha_t
    }

    /// Advances the step clock and refreshes the scheduled learning rate.
    pub fn begin_step(&mut self) -> f64 {
        self.step += 1;
        self.alpha_t = schedule_alpha(&self.config.schedule, self.config.alpha, self.step);
        self.alpha_t
    }

    pub fn state(&self, id: ParamId) -> &ParamState {
        &self.states[id.0]
    }

    /// Applies one update to parameter `id`.
    pub fn update(&mut self, id: ParamId, theta: &mut Tensor, g: &Tensor) -> Result<(), OptimError> {
        let c = self.config;
        let a = self.alpha_t;
        let state = self.states.get_mut(id.0).ok_or(OptimError::UnknownParam(id.0))?;
        match (self.method, state) {
            (Method::Sgd | Method::Lomo, _) => step_lomo(theta, g, a)?,
            (Method::Momentum, ParamState::Momentum(s)) => step_momentum(theta, g, s, a, c.beta1)?,
            (Method::Variance, ParamState::Variance(s)) => {
                step_variance(theta, g, s, a, c.beta2, c.eps)?
            }
            (Method::Adam, ParamState::Adam(s)) => step_adam(theta, g, s, a, c.beta1, c.beta2, c.eps)?,
            (Method::AdamW, ParamState::Adam(s)) => {
                step_adamw(theta, g, s, a, c.beta1, c.beta2, c.eps, c.weight_decay)?
            }
            (Method::AdaLomo, ParamState::Factored(s)) => {
                step_adalomo(theta, g, s, a, &c.adalomo_hyper())?
            }
            (Method::Adafactor, ParamState::Factored(s)) => {
                step_adafactor(theta, g, s, a, &c.adafactor_hyper())?
            }
            _ => unreachable!("state variant is fixed by the method at construction"),
        }
        Ok(())
    }

    /// Every state tensor, in parameter order.
    pub fn state_slots(&self) -> Vec<StateSlot<'_>> {
        self.states
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                let step = s.step();
                s.slots().into_iter().map(move |(kind, tensor)| StateSlot {
                    param: ParamId(i),
                    kind,
                    step,
                    tensor,
                })
            })
            .collect()
    }

    pub fn state_elements(&self) -> usize {
        self.state_slots().iter().map(|s| s.tensor.numel()).sum()
    }

    /// Records every state tensor under [`Category::OptimState`].
    pub fn track(&self, params: &ParamStore, ledger: &mut MemoryLedger) -> Result<(), LedgerError> {
        for slot in self.state_slots() {
            let label = format!("{}.{}", params.get(slot.param).name(), slot.kind.name());
            ledger.record_alloc(label, slot.tensor.byte_size(), Category::OptimState)?;
        }
        Ok(())
    }

    /// Writes `manifest.tsv` and `state.bin` into `dir`.
    pub fn save_checkpoint(&self, params: &ParamStore, dir: &Path) -> Result<(), OptimError> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = BufWriter::new(File::create(dir.join("manifest.tsv"))?);
        let mut blob = BufWriter::new(File::create(dir.join("state.bin"))?);
        writeln!(manifest, "# method={} step={}", self.method, self.step)?;
        for slot in self.state_slots() {
            let name = params.get(slot.param).name();
            writeln!(manifest, "{}\t{}\t{}", name, slot.kind.name(), slot.step)?;
            write_tensor(&mut blob, slot.tensor)?;
        }
        manifest.flush()?;
        blob.flush()?;
        Ok(())
    }

    /// Restores state written by [`Optimizer::save_checkpoint`] for the same
    /// method and parameter layout.
    pub fn load_checkpoint(&mut self, params: &ParamStore, dir: &Path) -> Result<(), OptimError> {
        let manifest = BufReader::new(File::open(dir.join("manifest.tsv"))?);
        let mut blob = BufReader::new(File::open(dir.join("state.bin"))?);
        let bad = |msg: String| OptimError::Checkpoint(msg);
        let mut lines = manifest.lines();
        let header = lines.next().ok_or_else(|| bad("empty manifest".into()))??;
        let (method, step) = parse_header(&header).ok_or_else(|| bad(format!("bad header `{header}`")))?;
        if method != self.method {
            return Err(bad(format!("checkpoint is for {method}, optimizer is {}", self.method)));
        }
        let mut restored = self.states.clone();
        for line in lines {
            let line = line?;
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, kind, t] = fields[..] else {
                return Err(bad(format!("bad manifest line `{line}`")));
            };
            let param = params.find(name).ok_or_else(|| bad(format!("unknown parameter `{name}`")))?;
            let kind = SlotKind::parse(kind).ok_or_else(|| bad(format!("unknown slot `{kind}`")))?;
            let t: u64 = t.parse().map_err(|_| bad(format!("bad step `{t}`")))?;
            let tensor = read_tensor(&mut blob)?;
            let state = &mut restored[param.id().0];
            let slot = state
                .slot_mut(kind)
                .ok_or_else(|| bad(format!("`{name}` has no slot `{}`", kind.name())))?;
            if slot.dims() != tensor.dims() {
                return Err(bad(format!("shape mismatch for `{name}.{}`", kind.name())));
            }
            *slot = tensor;
            state.set_step(t);
        }
        self.states = restored;
        self.step = step;
        self.alpha_t = schedule_alpha(&self.config.schedule, self.config.alpha, step);
        Ok(())
    }
}

fn parse_header(line: &str) -> Option<(Method, u64)> {
    let rest = line.strip_prefix("# ")?;
    let mut method = None;
    let mut step = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=')? {
            ("method", v) => method = v.parse().ok(),
            ("step", v) => step = v.parse().ok(),
            _ => return None,
        }
    }
    Some((method?, step?))
}
