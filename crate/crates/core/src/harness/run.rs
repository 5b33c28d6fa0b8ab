use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{ParamStore, Tape};
use crate::memtrack::MemoryReport;
use crate::models::{evaluate_lm, LmBatch, Mlp, Objective, TinyTransformerLM, TransformerConfig};
use crate::optim::Method;

use super::config::{ConfigError, DataSpec, Experiment, ExperimentConfig, MethodSpec, ModelSpec};
use super::data::{eval_batches, ingest_text, sample_batch, MarkovSource, RegressionData, TokenSplit};
use super::output::{write_csv, write_json, write_text, EvalRow, MemoryRow, StepRow, CSV_SCHEMA_VERSION};
use super::trainer::Trainer;
use super::trajectory::{classify, run_trajectory, Basin, TrajPoint};
use super::RunError;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "FUSEDOPT_OUT";

/// Output directory when none is given on the command line: the config's
/// `out_dir`, else `$FUSEDOPT_OUT/<experiment>`, else `fusedopt-out/<experiment>`.
pub fn default_out_dir(config: &ExperimentConfig) -> PathBuf {
    if let Some(d) = &config.out_dir {
        return d.clone();
    }
    let root = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("fusedopt-out"), PathBuf::from);
    root.join(config.experiment.name())
}

/// Everything one optimizer run produced.
#[derive(Debug, Clone, Serialize)]
pub struct MethodRun {
    pub label: String,
    pub method: Method,
    pub fused: bool,
    pub clip_threshold: Option<f64>,
    pub steps_run: u64,
    pub backward_passes: u64,
    pub final_train_loss: Option<f64>,
    pub final_eval: Option<EvalRow>,
    pub terminal: Option<TrajPoint>,
    pub basin: Option<Basin>,
    pub optim_state_elements: usize,
    pub memory: Option<MemoryReport>,
    #[serde(skip)]
    pub steps: Vec<StepRow>,
    #[serde(skip)]
    pub evals: Vec<EvalRow>,
    #[serde(skip)]
    pub trajectory: Vec<TrajPoint>,
}

impl MethodRun {
    fn new(label: String, spec: &MethodSpec) -> Self {
        MethodRun {
            label,
            method: spec.method,
            fused: spec.fused,
            clip_threshold: spec.config.clip_threshold,
            steps_run: 0,
            backward_passes: 0,
            final_train_loss: None,
            final_eval: None,
            terminal: None,
            basin: None,
            optim_state_elements: 0,
            memory: None,
            steps: Vec::new(),
            evals: Vec::new(),
            trajectory: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub runs: Vec<MethodRun>,
    /// Reported to the caller only; never written to the output files.
    pub wall_time: Duration,
}

impl RunRecord {
    pub fn run(&self, label: &str) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.label == label)
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    csv_schema: u32,
    experiment: &'static str,
    seed: u64,
    config: &'a ExperimentConfig,
    runs: &'a [MethodRun],
}

/// Runs the experiment and writes its files into `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunRecord, RunError> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut runs = match config.experiment {
        Experiment::Trajectory2d => run_trajectories(config)?,
        Experiment::TrainMlp | Experiment::TrainLm | Experiment::MemoryReport => {
            let w = Workload::build(config)?;
            let eval = config.experiment != Experiment::MemoryReport;
            config
                .methods
                .iter()
                .map(|spec| w.train(config, spec, spec.method.name().to_string(), eval))
                .collect::<Result<Vec<_>, _>>()?
        }
        Experiment::GradnormCompare => {
            let w = Workload::build(config)?;
            let base = &config.methods[0];
            let mut runs = Vec::new();
            for (suffix, clip) in [("clip", config.clip_threshold), ("noclip", None)] {
                let mut spec = base.clone();
                spec.config.clip_threshold = clip;
                runs.push(w.train(config, &spec, format!("{}_{suffix}", base.method), true)?);
            }
            runs
        }
    };
    if config.experiment == Experiment::MemoryReport {
        let baseline = runs
            .iter()
            .find(|r| r.method == Method::AdamW)
            .or(runs.first())
            .and_then(|r| r.memory.clone());
        if let Some(b) = baseline {
            for r in &mut runs {
                r.memory = r.memory.take().map(|m| m.compare_to(&b));
            }
        }
    }
    write_outputs(config, out_dir, &runs)?;
    Ok(RunRecord {
        config: config.clone(),
        out_dir: out_dir.to_path_buf(),
        runs,
        wall_time: started.elapsed(),
    })
}

/// Runs seeds `seed, seed+1, …, seed+k−1` on worker threads, each writing to
/// `out_root/seed_<n>`.
pub fn run_parallel(config: &ExperimentConfig, out_root: &Path, k: usize) -> Vec<Result<RunRecord, RunError>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..k as u64)
            .map(|i| {
                let mut cfg = config.clone();
                cfg.seed = config.seed.wrapping_add(i);
                let dir = out_root.join(format!("seed_{}", cfg.seed));
                (cfg.seed, scope.spawn(move || run(&cfg, &dir)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(seed, h)| h.join().unwrap_or(Err(RunError::Worker(seed))))
            .collect()
    })
}

fn write_outputs(config: &ExperimentConfig, dir: &Path, runs: &[MethodRun]) -> Result<(), RunError> {
    let trajectory = config.experiment == Experiment::Trajectory2d;
    for r in runs {
        if trajectory {
            write_csv(&dir.join(format!("traj_{}.csv", r.label)), &r.trajectory)?;
        } else {
            write_csv(&dir.join(format!("steps_{}.csv", r.label)), &r.steps)?;
            write_csv(&dir.join(format!("eval_{}.csv", r.label)), &r.evals)?;
        }
    }
    let reports: Vec<&MemoryReport> = runs.iter().filter_map(|r| r.memory.as_ref()).collect();
    if !reports.is_empty() {
        let text = reports.iter().map(|m| m.to_text()).collect::<Vec<_>>().join("\n");
        write_text(&dir.join("memory.txt"), &text)?;
        let rows: Vec<MemoryRow> = reports.iter().flat_map(|m| MemoryRow::from_report(m)).collect();
        write_csv(&dir.join("memory.csv"), &rows)?;
    }
    let summary = Summary {
        csv_schema: CSV_SCHEMA_VERSION,
        experiment: config.experiment.name(),
        seed: config.seed,
        config,
        runs,
    };
    write_json(&dir.join("summary.json"), &summary)
}

fn run_trajectories(config: &ExperimentConfig) -> Result<Vec<MethodRun>, RunError> {
    let start = config.start.unwrap_or(super::trajectory::FROZEN_START);
    config
        .methods
        .iter()
        .map(|spec| {
            let mut r = MethodRun::new(spec.method.name().to_string(), spec);
            r.trajectory = run_trajectory(spec.method, spec.config, start, config.steps)?;
            let end = *r.trajectory.last().expect("path includes the start");
            if !end.f.is_finite() {
                return Err(RunError::NonFinite {
                    method: spec.method.name().to_string(),
                    step: end.step,
                    value: end.f,
                });
            }
            r.steps_run = config.steps;
            r.terminal = Some(end);
            r.basin = Some(classify(end.x, end.y));
            Ok(r)
        })
        .collect()
}

/// A model with its initial parameters and data, shared by every method of a run.
enum Workload {
    Mlp {
        model: Mlp,
        store: ParamStore,
        data: RegressionData,
    },
    Lm {
        model: TinyTransformerLM,
        store: ParamStore,
        split: TokenSplit,
        seq: usize,
        eval: Vec<LmBatch>,
    },
}

fn model_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Batch order depends only on the run seed, so every method sees the same batches.
fn batch_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn lm_tokens(data: &DataSpec, cfg: &TransformerConfig) -> Result<TokenSplit, RunError> {
    let split = match data {
        DataSpec::Markov {
            seed,
            symbols,
            successors,
            tokens,
            val_fraction,
        } => TokenSplit::from_tokens(MarkovSource::new(*seed, *symbols, *successors).generate(*tokens), *val_fraction),
        DataSpec::File { path, val_fraction } => ingest_text(path, *val_fraction)?,
        _ => return Err(ConfigError::Invalid("language model needs token data".into()).into()),
    };
    let max = split.train.iter().chain(&split.val).copied().max().unwrap_or(0) as usize;
    if max >= cfg.vocab {
        return Err(ConfigError::Invalid(format!("token {max} does not fit model.vocab = {}", cfg.vocab)).into());
    }
    Ok(split)
}

impl Workload {
    fn build(config: &ExperimentConfig) -> Result<Workload, RunError> {
        let mut rng = model_rng(config.seed);
        let mut store = ParamStore::new();
        match &config.model {
            ModelSpec::Mlp { widths, init_std } => {
                let DataSpec::Regression { seed, samples } = config.data else {
                    return Err(ConfigError::Invalid("MLP needs regression data".into()).into());
                };
                let model = Mlp::new(widths, *init_std, &mut store, &mut rng)?;
                let data = RegressionData::generate(seed, widths, samples);
                Ok(Workload::Mlp { model, store, data })
            }
            ModelSpec::Transformer { config: tc, seq_len } => {
                let split = lm_tokens(&config.data, tc)?;
                let model = TinyTransformerLM::new(*tc, &mut store, &mut rng)?;
                let eval = eval_batches(&split.val, config.batch_size, *seq_len, config.eval_batches)?;
                Ok(Workload::Lm {
                    model,
                    store,
                    split,
                    seq: *seq_len,
                    eval,
                })
            }
            ModelSpec::None => Err(ConfigError::Invalid("experiment needs a model".into()).into()),
        }
    }

    fn train(&self, config: &ExperimentConfig, spec: &MethodSpec, label: String, eval: bool) -> Result<MethodRun, RunError> {
        let mut rng = batch_rng(config.seed);
        let b = config.batch_size;
        match self {
            Workload::Mlp { model, store, data } => train_loop(
                config,
                Trainer::new(model, store.clone(), spec)?,
                label,
                eval,
                || Ok(data.sample(b, &mut rng)),
                |s| {
                    let mut tape = Tape::new();
                    let loss = model.loss(&mut tape, s, &data.val)?;
                    Ok((tape.value(loss).item(), None, None))
                },
            ),
            Workload::Lm {
                model,
                store,
                split,
                seq,
                eval: val,
            } => train_loop(
                config,
                Trainer::new(model, store.clone(), spec)?,
                label,
                eval,
                || Ok(sample_batch(&split.train, b, *seq, &mut rng)?),
                |s| {
                    let m = evaluate_lm(model, s, val)?;
                    Ok((m.loss, Some(m.perplexity), Some(m.accuracy)))
                },
            ),
        }
    }
}

type EvalOut = (f64, Option<f64>, Option<f64>);

fn train_loop<O: Objective>(
    config: &ExperimentConfig,
    mut trainer: Trainer<'_, O>,
    label: String,
    eval: bool,
    mut next_batch: impl FnMut() -> Result<O::Batch, RunError>,
    mut evaluate: impl FnMut(&ParamStore) -> Result<EvalOut, RunError>,
) -> Result<MethodRun, RunError> {
    let spec = MethodSpec {
        method: trainer.method(),
        config: *trainer.optimizer().config(),
        fused: trainer.is_fused(),
    };
    let mut run = MethodRun::new(label, &spec);
    let mut record_eval = |run: &mut MethodRun, step: u64, store: &ParamStore| -> Result<(), RunError> {
        let (loss, perplexity, accuracy) = evaluate(store)?;
        if !loss.is_finite() {
            return Err(RunError::NonFinite {
                method: run.method.name().to_string(),
                step,
                value: loss,
            });
        }
        run.evals.push(EvalRow {
            step,
            loss,
            perplexity,
            accuracy,
        });
        Ok(())
    };
    if eval {
        record_eval(&mut run, 0, trainer.store())?;
    }
    for _ in 0..config.steps {
        let batch = next_batch()?;
        let out = trainer.step(&batch)?;
        run.steps.push(StepRow {
            step: out.step,
            alpha: out.alpha,
            train_loss: out.loss,
            backward_passes: out.backward_passes as u64,
        });
        if eval && (out.step % config.eval_interval == 0 || out.step == config.steps) {
            record_eval(&mut run, out.step, trainer.store())?;
        }
    }
    run.steps_run = config.steps;
    run.backward_passes = trainer.backward_passes();
    run.final_train_loss = run.steps.last().map(|s| s.train_loss);
    run.final_eval = run.evals.last().copied();
    run.optim_state_elements = trainer.optimizer().state_elements();
    run.memory = Some(MemoryReport {
        method: run.label.clone(),
        ..trainer.memory_report()
    });
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_lm(extra: &str) -> ExperimentConfig {
        let text = format!(
            "experiment = \"train_lm\"\nsteps = 6\nbatch_size = 2\neval_interval = 3\neval_batches = 2\n\
             [model]\nd_model = 8\nlayers = 1\nheads = 2\ncontext = 8\n\
             [data]\ntokens = 2000\nval_fraction = 0.1\n{extra}"
        );
        text.parse().unwrap()
    }

    #[test]
    fn lm_run_writes_csvs_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_lm("[optimizer]\nmethods = [\"adalomo\", \"adamw\"]\n");
        let rec = run(&cfg, dir.path()).unwrap();
        for f in ["steps_adalomo.csv", "eval_adamw.csv", "summary.json", "memory.txt", "memory.csv"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let r = rec.run("adalomo").unwrap();
        assert_eq!(r.steps.iter().map(|s| s.step).collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
        assert_eq!(r.evals.iter().map(|e| e.step).collect::<Vec<_>>(), [0, 3, 6]);
        assert_eq!(r.backward_passes, 6);

        let mut rd = csv::Reader::from_path(dir.path().join("steps_adalomo.csv")).unwrap();
        let rows: Vec<StepRow> = rd.deserialize().collect::<Result<_, _>>().unwrap();
        assert_eq!(rows, r.steps);
        let mut rd = csv::Reader::from_path(dir.path().join("eval_adalomo.csv")).unwrap();
        let rows: Vec<EvalRow> = rd.deserialize().collect::<Result<_, _>>().unwrap();
        assert_eq!(rows, r.evals);

        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["csv_schema"], CSV_SCHEMA_VERSION);
        assert_eq!(summary["runs"][1]["label"], "adamw");
    }

    #[test]
    fn zero_steps_is_eval_only_near_uniform() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_lm("");
        cfg.steps = 0;
        let rec = run(&cfg, dir.path()).unwrap();
        let r = &rec.runs[0];
        assert!(r.steps.is_empty());
        assert_eq!(r.evals.len(), 1);
        let ppl = r.evals[0].perplexity.unwrap();
        assert!((ppl - 256.0).abs() / 256.0 < 0.05, "{ppl}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = tiny_lm("[optimizer]\nmethods = [\"lomo\"]\nclip_threshold = 0.5\n");
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run(&cfg, a.path()).unwrap();
        run(&cfg, b.path()).unwrap();
        for f in ["steps_lomo.csv", "eval_lomo.csv", "summary.json", "memory.csv"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn gradnorm_compare_pairs_runs() {
        let dir = tempfile::tempdir().unwrap();
        let text = "experiment = \"gradnorm_compare\"\nsteps = 4\nbatch_size = 2\n\
                    [optimizer]\nmethods = [\"lomo\"]\nalpha = 0.01\n\
                    [model]\nd_model = 8\nlayers = 1\ncontext = 8\n[data]\ntokens = 1000\nval_fraction = 0.1\n";
        let rec = run(&text.parse().unwrap(), dir.path()).unwrap();
        assert_eq!(rec.run("lomo_clip").unwrap().backward_passes, 8);
        assert_eq!(rec.run("lomo_noclip").unwrap().backward_passes, 4);
    }

    #[test]
    fn trajectory_run_writes_one_file_per_method() {
        let dir = tempfile::tempdir().unwrap();
        let rec = run(&"experiment = \"trajectory2d\"".parse().unwrap(), dir.path()).unwrap();
        for r in &rec.runs {
            assert!(dir.path().join(format!("traj_{}.csv", r.label)).is_file());
            assert_eq!(r.trajectory.len(), 2001);
        }
        let basin = |l: &str| rec.run(l).unwrap().basin.unwrap();
        assert_eq!(basin("sgd"), Basin::Local);
        assert_eq!(basin("adam"), Basin::Global);
    }

    #[test]
    fn mlp_run_and_parallel_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg: ExperimentConfig = "experiment = \"train_mlp\"\nsteps = 20\neval_interval = 10\n\
                                     [model]\nwidths = [3, 8, 1]\n[data]\nsamples = 64\n"
            .parse()
            .unwrap();
        let recs = run_parallel(&cfg, dir.path(), 2);
        assert_eq!(recs.len(), 2);
        let losses: Vec<f64> = recs
            .into_iter()
            .map(|r| r.unwrap().runs[0].final_eval.unwrap().loss)
            .collect();
        assert_ne!(losses[0], losses[1]);
        assert!(dir.path().join("seed_1/eval_adalomo.csv").is_file());
        let eval = std::fs::read_to_string(dir.path().join("seed_0/eval_adalomo.csv")).unwrap();
        assert!(eval.lines().nth(1).unwrap().ends_with(",,"));
    }

    #[test]
    fn exit_codes() {
        let e: RunError = ConfigError::Invalid("x".into()).into();
        assert_eq!(e.exit_code(), 2);
        let e = RunError::NonFinite {
            method: "sgd".into(),
            step: 4,
            value: f64::NAN,
        };
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("step 4"));
    }
}
