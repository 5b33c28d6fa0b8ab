//! Learning-rate sweep on the Markov-byte LM.
//!
//! Runs every (method, alpha) pair of the grid on the optimizer-separation
//! config and prints the final validation perplexity of each.
//!
//! ```text
//! cargo run --release -p fusedopt-core --example lr_sweep [config] [steps]
//! ```

use std::path::PathBuf;

use fusedopt_core::harness::{run, ExperimentConfig};
use fusedopt_core::optim::Method;

const GRID: &[(Method, &[f64])] = &[
    (Method::Sgd, &[0.03, 0.1, 0.3, 1.0]),
    (Method::AdamW, &[3e-4, 1e-3, 3e-3, 1e-2]),
    (Method::Adafactor, &[0.01, 0.03, 0.1, 0.3]),
    (Method::AdaLomo, &[0.01, 0.03, 0.1, 0.3]),
];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().map_or_else(|| PathBuf::from("configs/optimizer_separation.toml"), PathBuf::from);
    let base = ExperimentConfig::load(&path)?;
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(base.steps);
    let scratch = tempfile::tempdir()?;
    println!("method,alpha,final_val_loss,final_val_ppl");
    for &(method, alphas) in GRID {
        let Some(spec) = base.method(method) else { continue };
        for &alpha in alphas {
            let mut cfg = base.clone();
            let mut spec = spec.clone();
            spec.config.alpha = alpha;
            spec.config.schedule.total_steps = steps;
            cfg.steps = steps;
            cfg.methods = vec![spec];
            let rec = run(&cfg, scratch.path())?;
            let e = rec.runs[0].final_eval.expect("training runs evaluate");
            println!("{method},{alpha},{:.6},{:.4}", e.loss, e.perplexity.unwrap_or(f64::NAN));
        }
    }
    Ok(())
}
