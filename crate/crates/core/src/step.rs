//! Solver for the implicit backward step
//! `y = c + f(y) Δt` with `z` and `ψ` held fixed.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct StepParams {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for StepParams {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-12 }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// `y = c + f Δt`, recomputed from the stored `f` so the discrete
    /// identity holds to rounding.
    pub y: Vec<f64>,
    pub f: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solves `y = c + f(y) Δt` starting from `guess`.
///
/// Each iteration tries a Newton step on `y − c − f(y)Δt` with a
/// finite-difference Jacobian and backtracking, then falls back to the
/// damped move `y ← y + ω (c + f(y)Δt − y)`, halving `ω` while the residual
/// does not decrease. `context` names the node or step in error messages.
pub fn solve_implicit<F>(
    c: &[f64],
    dt: f64,
    guess: &[f64],
    params: StepParams,
    mut f: F,
    context: impl Fn() -> String,
) -> Result<StepOutcome>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let d = c.len();
    let tol = params.tol * max_abs(c).max(1.0);
    let mut y = guess.to_vec();
    let mut fy = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut trial = vec![0.0; d];
    let mut ft = vec![0.0; d];
    let mut gt = vec![0.0; d];
    let mut fp = vec![0.0; d];

    let eval_residual = |y: &[f64], fy: &mut [f64], g: &mut [f64], f: &mut F| -> f64 {
        f(y, fy);
        let mut r = 0.0f64;
        for i in 0..d {
            g[i] = c[i] + fy[i] * dt;
            r = r.max((g[i] - y[i]).abs());
        }
        r
    };

    let mut r = eval_residual(&y, &mut fy, &mut g, &mut f);
    let mut iterations = 0;
    while iterations < params.max_iter {
        if !r.is_finite() {
            break;
        }
        if r <= tol {
            let y_out: Vec<f64> = (0..d).map(|i| c[i] + fy[i] * dt).collect();
            return Ok(StepOutcome { y: y_out, f: fy, iterations, residual: r });
        }
        iterations += 1;
        let mut accepted = false;

        // Newton direction for G(y) = y − g(y).
        let mut jac = nalgebra::DMatrix::<f64>::identity(d, d);
        for col in 0..d {
            let h = 1e-7 * y[col].abs().max(1.0);
            trial.copy_from_slice(&y);
            trial[col] += h;
            f(&trial, &mut fp);
            for row in 0..d {
                jac[(row, col)] -= dt * (fp[row] - fy[row]) / h;
            }
        }
        let rhs = nalgebra::DVector::from_iterator(d, (0..d).map(|i| g[i] - y[i]));
        if let Some(step) = jac.lu().solve(&rhs).filter(|s| s.iter().all(|v| v.is_finite())) {
            let mut lambda = 1.0;
            for _ in 0..20 {
                for i in 0..d {
                    trial[i] = y[i] + lambda * step[i];
                }
                let rt = eval_residual(&trial, &mut ft, &mut gt, &mut f);
                if rt.is_finite() && rt < r {
                    y.copy_from_slice(&trial);
                    fy.copy_from_slice(&ft);
                    g.copy_from_slice(&gt);
                    r = rt;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
        }
        if !accepted {
            let mut omega = 1.0;
            for _ in 0..40 {
                for i in 0..d {
                    trial[i] = y[i] + omega * (g[i] - y[i]);
                }
                let rt = eval_residual(&trial, &mut ft, &mut gt, &mut f);
                if rt.is_finite() && rt < r {
                    y.copy_from_slice(&trial);
                    fy.copy_from_slice(&ft);
                    g.copy_from_slice(&gt);
                    r = rt;
                    accepted = true;
                    break;
                }
                omega *= 0.5;
            }
        }
        if !accepted {
            break;
        }
    }
    Err(Error::numeric(format!(
        "implicit step did not converge at {} after {} iterations (residual {:e}, tolerance {:e})",
        context(),
        iterations,
        r,
        tol
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_step_matches_closed_form() {
        // y = 1 + (−y)·0.25  ⇒  y = 1/1.25
        let out = solve_implicit(&[1.0], 0.25, &[1.0], StepParams::default(), |y, o| o[0] = -y[0], || "test".into())
            .unwrap();
        assert!((out.y[0] - 0.8).abs() < 1e-12);
        assert!((out.y[0] - (1.0 + out.f[0] * 0.25)).abs() == 0.0);
    }

    #[test]
    fn stiff_cubic_needs_damping() {
        // y = 2 − y³ Δt with Δt = 0.5 oscillates without damping.
        let out = solve_implicit(&[2.0], 0.5, &[2.0], StepParams::default(), |y, o| o[0] = -y[0].powi(3), || "cubic".into())
            .unwrap();
        let y = out.y[0];
        assert!((y + 0.5 * y.powi(3) - 2.0).abs() < 1e-11);
    }

    #[test]
    fn different_guesses_agree() {
        let f = |y: &[f64], o: &mut [f64]| {
            o[0] = -y[0] + 0.3 * y[1].sin();
            o[1] = -2.0 * y[1];
        };
        let a = solve_implicit(&[1.0, -1.0], 0.1, &[0.0, 0.0], StepParams::default(), f, || "a".into()).unwrap();
        let b = solve_implicit(&[1.0, -1.0], 0.1, &[5.0, -7.0], StepParams::default(), f, || "b".into()).unwrap();
        for i in 0..2 {
            assert!((a.y[i] - b.y[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn non_convergence_is_numeric_error() {
        let params = StepParams { max_iter: 3, tol: 1e-12 };
        let err = solve_implicit(&[1.0], 10.0, &[0.0], params, |y, o| o[0] = y[0].exp(), || "node 7".into())
            .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(msg.contains("node 7"), "{msg}");
    }
}
