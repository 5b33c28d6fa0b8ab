//! Optimizer trajectories on the two-basin surface.

use serde::Serialize;

use crate::autograd::ParamId;
use crate::autograd::ParamStore;
use crate::models::{f2d_eval, f2d_grad, f2d_minima};
use crate::optim::{Method, Optimizer, OptimizerConfig, OptimError};
use crate::tensor::Tensor;

/// Start point found by [`search_starts`] under [`default_alpha`]; every
/// method's basin assignment from here is checked by tests.
pub const FROZEN_START: [f64; 2] = [0.5, 1.5];

/// Step sizes paired with [`FROZEN_START`].
pub fn default_alpha(method: Method) -> f64 {
    match method {
        Method::Sgd | Method::Lomo | Method::Momentum => 0.01,
        _ => 0.05,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajPoint {
    pub step: u64,
    pub x: f64,
    pub y: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Basin {
    /// The deeper basin, f ≈ −2.
    Global,
    /// The shallower basin, f ≈ −1.
    Local,
}

/// Basin of the oracle minimum nearest to `(x, y)`.
pub fn classify(x: f64, y: f64) -> Basin {
    let m = f2d_minima();
    if m.nearest(x, y) == m.global {
        Basin::Global
    } else {
        Basin::Local
    }
}

/// Runs `steps` updates from `start`; the returned path includes step 0.
pub fn run_trajectory(
    method: Method,
    config: OptimizerConfig,
    start: [f64; 2],
    steps: u64,
) -> Result<Vec<TrajPoint>, OptimError> {
    let mut store = ParamStore::new();
    let id: ParamId = store.add("xy", Tensor::vector(start.to_vec())?);
    store.seal();
    let mut opt = Optimizer::new(method, config, &store)?;
    let mut path = Vec::with_capacity(steps as usize + 1);
    let point = |step, t: &Tensor| {
        let (x, y) = (t.data()[0], t.data()[1]);
        TrajPoint { step, x, y, f: f2d_eval(x, y) }
    };
    path.push(point(0, store.get(id).value()));
    for step in 1..=steps {
        opt.begin_step();
        let theta = store.get_mut(id).value_mut();
        let (gx, gy) = f2d_grad(theta.data()[0], theta.data()[1]);
        opt.update(id, theta, &Tensor::vector(vec![gx, gy])?)?;
        path.push(point(step, store.get(id).value()));
    }
    Ok(path)
}

/// The basin where `method` ends up from `start`.
pub fn terminal_basin(method: Method, config: OptimizerConfig, start: [f64; 2], steps: u64) -> Result<Basin, OptimError> {
    let path = run_trajectory(method, config, start, steps)?;
    let end = path.last().expect("path includes the start");
    Ok(classify(end.x, end.y))
}

/// Starts on a 0.25 grid over `[−2, 2]²` from which SGD and momentum settle in
/// the shallow basin while Adam and variance-only reach the deep one.
pub fn search_starts(steps: u64) -> Result<Vec<[f64; 2]>, OptimError> {
    let want = [
        (Method::Sgd, Basin::Local),
        (Method::Momentum, Basin::Local),
        (Method::Adam, Basin::Global),
        (Method::Variance, Basin::Global),
    ];
    let mut hits = Vec::new();
    for i in 0..=16 {
        for j in 0..=16 {
            let start = [-2.0 + 0.25 * i as f64, -2.0 + 0.25 * j as f64];
            let mut ok = true;
            for (m, basin) in want {
                let cfg = OptimizerConfig { alpha: default_alpha(m), ..Default::default() };
                if terminal_basin(m, cfg, start, steps)? != basin {
                    ok = false;
                    break;
                }
            }
            if ok {
                hits.push(start);
            }
        }
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(m: Method) -> OptimizerConfig {
        OptimizerConfig { alpha: default_alpha(m), ..Default::default() }
    }

    #[test]
    fn frozen_start_separates_basins() {
        for (m, basin) in [
            (Method::Sgd, Basin::Local),
            (Method::Momentum, Basin::Local),
            (Method::Adam, Basin::Global),
            (Method::Variance, Basin::Global),
        ] {
            assert_eq!(terminal_basin(m, cfg(m), FROZEN_START, 2000).unwrap(), basin, "{m}");
        }
    }

    #[test]
    fn search_reproduces_frozen_start() {
        let hits = search_starts(2000).unwrap();
        assert!(hits.contains(&FROZEN_START), "{hits:?}");
    }

    #[test]
    fn path_records_every_step() {
        let p = run_trajectory(Method::Sgd, cfg(Method::Sgd), [0.0, 1.0], 10).unwrap();
        assert_eq!(p.len(), 11);
        assert_eq!((p[0].x, p[0].y), (0.0, 1.0));
        assert!(p.windows(2).all(|w| w[1].f <= w[0].f));
    }
}
