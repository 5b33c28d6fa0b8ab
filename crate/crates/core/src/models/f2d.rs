//! Two-basin test surface
//! `f(x, y) = x² + y² − 2·exp(−5[(x−1)² + y²]) − 3·exp(−5[(x+1)² + y²])`.
//! The shallower basin sits near `x = 1` (f ≈ −1), the deeper one near
//! `x = −1` (f ≈ −2).

use std::sync::OnceLock;

use serde::Serialize;

use crate::autograd::{Result, Tape, Var};

const SHALLOW: f64 = 2.0;
const DEEP: f64 = 3.0;
const WIDTH: f64 = 5.0;

pub fn f2d_eval(x: f64, y: f64) -> f64 {
    let y2 = y * y;
    x * x + y2
        - SHALLOW * (-WIDTH * ((x - 1.0).powi(2) + y2)).exp()
        - DEEP * (-WIDTH * ((x + 1.0).powi(2) + y2)).exp()
}

pub fn f2d_grad(x: f64, y: f64) -> (f64, f64) {
    let y2 = y * y;
    let a = SHALLOW * (-WIDTH * ((x - 1.0).powi(2) + y2)).exp();
    let b = DEEP * (-WIDTH * ((x + 1.0).powi(2) + y2)).exp();
    let k = 2.0 * WIDTH;
    (
        2.0 * x + k * (x - 1.0) * a + k * (x + 1.0) * b,
        2.0 * y + k * y * (a + b),
    )
}

/// Builds `f` on the tape from scalar leaves `x` and `y`.
pub fn f2d_on_tape(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let bump = |tape: &mut Tape, center: f64, height: f64| -> Result<Var> {
        let dx = tape.add_scalar(x, -center);
        let dx2 = tape.square(dx);
        let y2 = tape.square(y);
        let r2 = tape.add(dx2, y2)?;
        let z = tape.scale(r2, -WIDTH);
        let e = tape.exp(z);
        Ok(tape.scale(e, height))
    };
    let x2 = tape.square(x);
    let y2 = tape.square(y);
    let bowl = tape.add(x2, y2)?;
    let shallow = bump(tape, 1.0, SHALLOW)?;
    let deep = bump(tape, -1.0, DEEP)?;
    let f = tape.sub(bowl, shallow)?;
    tape.sub(f, deep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Minimum {
    pub x: f64,
    pub y: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Minima {
    /// Deeper basin, negative `x`.
    pub global: Minimum,
    /// Shallower basin, positive `x`.
    pub local: Minimum,
}

impl Minima {
    /// The minimum nearest to `(x, y)` in Euclidean distance.
    pub fn nearest(&self, x: f64, y: f64) -> Minimum {
        let d = |m: &Minimum| (m.x - x).powi(2) + (m.y - y).powi(2);
        if d(&self.global) <= d(&self.local) {
            self.global
        } else {
            self.local
        }
    }
}

fn refine(mut x: f64, mut y: f64) -> Minimum {
    for _ in 0..100_000 {
        let (gx, gy) = f2d_grad(x, y);
        if gx.hypot(gy) < 1e-13 {
            break;
        }
        x -= 0.01 * gx;
        y -= 0.01 * gy;
    }
    Minimum { x, y, f: f2d_eval(x, y) }
}

/// Both basin minima: the lowest point of a 1e-3 grid over `[−2, 2]²` in each
/// half-plane, refined by gradient descent. Computed once per process.
pub fn f2d_minima() -> Minima {
    static CACHE: OnceLock<Minima> = OnceLock::new();
    *CACHE.get_or_init(|| {
        const N: i64 = 4000;
        let at = |i: i64| -2.0 + 4.0 * i as f64 / N as f64;
        let mut best_neg = (f64::INFINITY, 0.0, 0.0);
        let mut best_pos = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=N {
            let x = at(i);
            if x == 0.0 {
                continue;
            }
            let best = if x < 0.0 { &mut best_neg } else { &mut best_pos };
            for j in 0..=N {
                let y = at(j);
                let f = f2d_eval(x, y);
                if f < best.0 {
                    *best = (f, x, y);
                }
            }
        }
        Minima {
            global: refine(best_neg.1, best_neg.2),
            local: refine(best_pos.1, best_pos.2),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn point_values() {
        let e20 = (-20.0f64).exp();
        assert!((f2d_eval(-1.0, 0.0) - (1.0 - 2.0 * e20 - 3.0)).abs() < 1e-15);
        assert!((f2d_eval(-1.0, 0.0) + 2.0000000041).abs() < 1e-10);
        assert!((f2d_eval(1.0, 0.0) + 1.0000000062).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-7;
        for _ in 0..100 {
            let (x, y) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let (gx, gy) = f2d_grad(x, y);
            let fx = (f2d_eval(x + h, y) - f2d_eval(x - h, y)) / (2.0 * h);
            let fy = (f2d_eval(x, y + h) - f2d_eval(x, y - h)) / (2.0 * h);
            for (a, n) in [(gx, fx), (gy, fy)] {
                assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1e-2));
            }
        }
    }

    #[test]
    fn tape_gradient_matches_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (x0, y0) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mut store = ParamStore::new();
            let px = store.add("x", Tensor::scalar(x0));
            let py = store.add("y", Tensor::scalar(y0));
            store.seal();
            let mut tape = Tape::new();
            let (x, y) = (tape.param(store.get(px)), tape.param(store.get(py)));
            let f = f2d_on_tape(&mut tape, x, y).unwrap();
            assert!((tape.value(f).item() - f2d_eval(x0, y0)).abs() < 1e-13);
            let grads = tape.backward_full(f, None).unwrap();
            let (gx, gy) = f2d_grad(x0, y0);
            for (a, b) in [(grads.get(px).unwrap().item(), gx), (grads.get(py).unwrap().item(), gy)] {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1e-12));
            }
        }
    }

    #[test]
    fn minima_are_the_two_basins() {
        let m = f2d_minima();
        assert!(m.global.x < 0.0 && m.local.x > 0.0);
        assert!(m.global.f < m.local.f);
        assert!((m.global.f + 2.0).abs() < 0.1, "{:?}", m.global);
        assert!((m.local.f + 1.0).abs() < 0.1, "{:?}", m.local);
        assert!(m.global.y.abs() < 1e-9 && m.local.y.abs() < 1e-9);
        let (gx, _) = f2d_grad(m.global.x, m.global.y);
        assert!(gx.abs() < 1e-12);
        assert_eq!(m.nearest(-0.8, 0.3), m.global);
        assert_eq!(m.nearest(1.2, -0.4), m.local);
    }
}
