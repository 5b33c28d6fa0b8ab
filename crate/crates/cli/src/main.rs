use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fusedopt_core::harness::{self, ConfigError, Experiment, ExperimentConfig, RunError, RunRecord};
use fusedopt_core::memtrack::{
    analytic_estimate, llama7b_shapes, shape_param_count, square_matrix_shapes, EstimateMethod, PrecisionPolicy,
};

#[derive(Parser)]
#[command(name = "fusedopt", version, about = "Fused-backward optimizer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's out_dir or $FUSEDOPT_OUT/<experiment>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run K consecutive seeds on worker threads, each in <out>/seed_<n>.
        #[arg(long, value_name = "K")]
        parallel: Option<usize>,
    },
    /// Print the analytic model-state memory of one method.
    Estimate {
        #[arg(long)]
        method: String,
        /// Model parameter count M; accepts k/m/b suffixes such as 7b.
        #[arg(long, value_parser = parse_count, required_unless_present = "llama7b")]
        params: Option<u64>,
        /// Auxiliary element count N (adapter size for lora, gradient residency for fused methods).
        #[arg(long, value_parser = parse_count, default_value = "0")]
        adapter: u64,
        /// Width of the square matrices assumed for the factored methods.
        #[arg(long, default_value_t = 4096)]
        hidden: usize,
        /// Use the LLaMA-7B parameter shape list instead of square matrices.
        #[arg(long)]
        llama7b: bool,
    },
    /// Train one fused optimizer with and without global-norm clipping.
    CompareGradnorm {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_count(s: &str) -> Result<u64, String> {
    let lower = s.trim().to_ascii_lowercase();
    let (num, mult) = match lower.chars().last() {
        Some('k') => (&lower[..lower.len() - 1], 1e3),
        Some('m') => (&lower[..lower.len() - 1], 1e6),
        Some('b') | Some('g') => (&lower[..lower.len() - 1], 1e9),
        _ => (lower.as_str(), 1.0),
    };
    if mult == 1.0 {
        if let Ok(v) = num.parse::<u64>() {
            return Ok(v);
        }
    }
    let v: f64 = num.parse().map_err(|_| format!("not a count: {s}"))?;
    let v = v * mult;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(format!("not a count: {s}"));
    }
    Ok(v.round() as u64)
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, RunError> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn print_record(rec: &RunRecord) {
    println!(
        "{} seed={} out={} wall_time={:.2}s",
        rec.config.experiment.name(),
        rec.config.seed,
        rec.out_dir.display(),
        rec.wall_time.as_secs_f64()
    );
    for r in &rec.runs {
        let mut line = format!("  {:<18} steps={} backward_passes={}", r.label, r.steps_run, r.backward_passes);
        if let Some(l) = r.final_train_loss {
            line += &format!(" train_loss={l:.6}");
        }
        if let Some(e) = r.final_eval {
            line += &format!(" eval_loss={:.6}", e.loss);
            if let Some(p) = e.perplexity {
                line += &format!(" ppl={p:.4}");
            }
        }
        if let (Some(t), Some(b)) = (r.terminal, r.basin) {
            line += &format!(" end=({:.4}, {:.4}) f={:.4} basin={b:?}", t.x, t.y, t.f);
        }
        println!("{line}");
    }
}

fn cmd_run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, parallel: Option<usize>) -> Result<(), RunError> {
    let config = load(config, seed)?;
    let out = out.unwrap_or_else(|| harness::default_out_dir(&config));
    match parallel {
        None | Some(1) => print_record(&harness::run(&config, &out)?),
        Some(0) => return Err(ConfigError::Invalid("--parallel must be positive".into()).into()),
        Some(k) => {
            let mut first_err = None;
            for r in harness::run_parallel(&config, &out, k) {
                match r {
                    Ok(rec) => print_record(&rec),
                    Err(e) => {
                        eprintln!("error: {e}");
                        first_err.get_or_insert(e);
                    }
                }
            }
            if let Some(e) = first_err {
                return Err(e);
            }
        }
    }
    Ok(())
}

fn cmd_compare(config: &Path, out: Option<PathBuf>) -> Result<(), RunError> {
    let config = load(config, None)?;
    if config.experiment != Experiment::GradnormCompare {
        return Err(ConfigError::Invalid(format!(
            "compare-gradnorm needs experiment = \"gradnorm_compare\", found \"{}\"",
            config.experiment.name()
        ))
        .into());
    }
    let out = out.unwrap_or_else(|| harness::default_out_dir(&config));
    let rec = harness::run(&config, &out)?;
    print_record(&rec);
    println!("{:<18} {:>15} {:>15} {:>12} {:>12}", "run", "backward_passes", "passes_per_step", "train_loss", "eval_loss");
    for r in &rec.runs {
        let per_step = r.backward_passes as f64 / r.steps_run.max(1) as f64;
        println!(
            "{:<18} {:>15} {:>15.2} {:>12.6} {:>12.6}",
            r.label,
            r.backward_passes,
            per_step,
            r.final_train_loss.unwrap_or(f64::NAN),
            r.final_eval.map_or(f64::NAN, |e| e.loss)
        );
    }
    if let [a, b] = rec.runs.as_slice() {
        if let (Some(x), Some(y)) = (a.final_eval, b.final_eval) {
            println!("eval_loss_rel_diff: {:.6}", (x.loss - y.loss).abs() / y.loss.abs());
        }
    }
    Ok(())
}

fn cmd_estimate(method: &str, params: Option<u64>, adapter: u64, hidden: usize, llama7b: bool) -> Result<(), String> {
    let method: EstimateMethod = method.parse().map_err(|e| format!("{e}"))?;
    let (params, shapes) = if llama7b {
        let shapes = llama7b_shapes();
        (params.unwrap_or_else(|| shape_param_count(&shapes)), shapes)
    } else {
        let m = params.expect("clap requires --params without --llama7b");
        if hidden == 0 {
            return Err("--hidden must be positive".into());
        }
        (m, square_matrix_shapes(m, hidden))
    };
    let est = analytic_estimate(method, params, adapter, PrecisionPolicy::MIXED, &shapes).map_err(|e| e.to_string())?;
    print!("{}", est.to_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            parallel,
        } => cmd_run(&config, seed, out, parallel),
        Command::CompareGradnorm { config, out } => cmd_compare(&config, out),
        Command::Estimate {
            method,
            params,
            adapter,
            hidden,
            llama7b,
        } => {
            return match cmd_estimate(&method, params, adapter, hidden, llama7b) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
