//! Discrete checks of the Itô formula for `|x|^p`, the jump lower bound,
//! the Taylor bound of `|x|^p` for `p ≥ 2`, the zero-set identity and the
//! constants used by the estimates.
//!
//! A discrete step of a [`SemimartingalePath`] is applied in three stages:
//! the continuous move `KΔt − Σ_jψ_jλ_jΔt + ZΔW`, then the jumps of the
//! Poisson part one at a time (`ΔN_j` jumps of size `ψ_j` per atom), then
//! the orthogonal jump `ΔM`. `dt`-integrals use the left endpoint unless
//! another [`Quadrature`] is requested.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::{PathEnsemble, TimeGrid};
use crate::solver::SolutionEnsemble;

/// `c(p) = p(p−1)/2` on `[1, 2)` and `p/2` for `p ≥ 2`.
pub fn c_of_p(p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::domain(format!("c(p) needs p ≥ 1, got {p}")));
    }
    Ok(if p < 2.0 { p * (p - 1.0) / 2.0 } else { p / 2.0 })
}

/// `κ_p = min(p/2, p(p−1)3^{1−p})`.
pub fn kappa_p(p: f64) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::domain(format!("κ_p needs p > 1, got {p}")));
    }
    Ok((p / 2.0).min(p * (p - 1.0) * 3f64.powf(1.0 - p)))
}

/// `β = 2(1 + 2K²)`.
pub fn beta_of_k(lip_k: f64) -> f64 {
    2.0 * (1.0 + 2.0 * lip_k * lip_k)
}

/// `ν = α + K²/((p−1) ∧ 1)`.
pub fn nu(p: f64, lip_k: f64, alpha: f64) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::domain(format!("ν needs p > 1, got {p}")));
    }
    Ok(crate::solver::horizon::nu(alpha, lip_k, p))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EstimateConstants {
    pub p: f64,
    pub lip_k: f64,
    pub alpha: f64,
    pub c_p: f64,
    pub kappa_p: f64,
    pub beta: f64,
    pub nu: f64,
    /// Random-horizon weights need `ρ > rho_min = ν`.
    pub rho_min: f64,
    /// No value is available; see [`e_p_ratio`] for the measured ratio.
    pub e_p: Option<f64>,
}

pub fn constants(p: f64, lip_k: f64, alpha: f64) -> Result<EstimateConstants> {
    if !(p > 1.0) {
        return Err(Error::domain(format!("constants need p > 1 (c(1) is available on its own), got {p}")));
    }
    let nu = nu(p, lip_k, alpha)?;
    Ok(EstimateConstants {
        p,
        lip_k,
        alpha,
        c_p: c_of_p(p)?,
        kappa_p: kappa_p(p)?,
        beta: beta_of_k(lip_k),
        nu,
        rho_min: nu,
        e_p: None,
    })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `∇|x|^p = p|x|^{p−2}x`, zero at the origin.
fn grad(x: &[f64], p: f64) -> Vec<f64> {
    let n = norm(x);
    if n == 0.0 {
        return vec![0.0; x.len()];
    }
    let s = p * n.powf(p - 2.0);
    x.iter().map(|v| s * v).collect()
}

fn pow_norm(x: &[f64], p: f64) -> f64 {
    norm(x).powf(p)
}

/// A discrete semimartingale
/// `X_{i+1} = X_i + K_iΔt + Z_iΔW_i + Σ_j ψ_{i,j}(ΔN_{i,j} − λ_jΔt) + ΔM_i`.
#[derive(Clone, Debug)]
pub struct SemimartingalePath {
    pub grid: TimeGrid,
    pub d: usize,
    pub k: usize,
    pub intensities: Vec<f64>,
    pub x0: Vec<f64>,
    /// `[i][d]`
    pub drift: Vec<f64>,
    /// `[i][d·k]`
    pub z: Vec<f64>,
    /// `[i][k]`
    pub dw: Vec<f64>,
    /// `[i][d·n_atoms]`
    pub psi: Vec<f64>,
    /// `[i][n_atoms]`
    pub counts: Vec<u32>,
    /// `[i][d]`
    pub dm: Vec<f64>,
}

impl SemimartingalePath {
    pub fn zeros(grid: &TimeGrid, d: usize, k: usize, intensities: &[f64], x0: &[f64]) -> Self {
        let n = grid.n_steps();
        let a = intensities.len();
        Self {
            grid: grid.clone(),
            d,
            k,
            intensities: intensities.to_vec(),
            x0: x0.to_vec(),
            drift: vec![0.0; n * d],
            z: vec![0.0; n * d * k],
            dw: vec![0.0; n * k],
            psi: vec![0.0; n * d * a],
            counts: vec![0; n * a],
            dm: vec![0.0; n * d],
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.intensities.len()
    }

    /// Path `p` of a solution seen as `dY = −f dt + Z dW + ψ dπ̃ + dM`.
    pub fn from_solution(sol: &SolutionEnsemble, e: &PathEnsemble, p: usize) -> Result<Self> {
        if sol.n_paths != e.n_paths || sol.grid != e.grid {
            return Err(Error::config("solution and ensemble do not match"));
        }
        let n = e.n_steps();
        let (d, k, a) = (sol.d, e.k, e.n_atoms);
        let mut s = Self::zeros(&e.grid, d, k, &e.intensities, sol.y_at(p, 0));
        for i in 0..n {
            for r in 0..d {
                s.drift[i * d + r] = -sol.f_at(p, i)[r];
            }
            s.z[i * d * k..(i + 1) * d * k].copy_from_slice(sol.z_at(p, i));
            s.dw[i * k..(i + 1) * k].copy_from_slice(e.dw_at(p, i));
            s.psi[i * d * a..(i + 1) * d * a].copy_from_slice(sol.psi_at(p, i));
            s.counts[i * a..(i + 1) * a].copy_from_slice(e.counts_at(p, i));
            s.dm[i * d..(i + 1) * d].copy_from_slice(&sol.dm_at(p, i));
        }
        Ok(s)
    }

    fn continuous_velocity(&self, i: usize) -> Vec<f64> {
        let (d, a) = (self.d, self.n_atoms());
        (0..d)
            .map(|r| {
                let mut v = self.drift[i * d + r];
                for j in 0..a {
                    v -= self.psi[(i * d + r) * a + j] * self.intensities[j];
                }
                v
            })
            .collect()
    }

    fn brownian(&self, i: usize) -> Vec<f64> {
        let (d, k) = (self.d, self.k);
        (0..d)
            .map(|r| (0..k).map(|c| self.z[(i * d + r) * k + c] * self.dw[i * k + c]).sum())
            .collect()
    }

    fn psi_jump(&self, i: usize, j: usize) -> Vec<f64> {
        let (d, a) = (self.d, self.n_atoms());
        (0..d).map(|r| self.psi[(i * d + r) * a + j]).collect()
    }

    /// `X` at every node `[i][d]`.
    pub fn values(&self) -> Vec<f64> {
        let (n, d) = (self.grid.n_steps(), self.d);
        let mut out = Vec::with_capacity((n + 1) * d);
        let mut x = self.x0.clone();
        out.extend_from_slice(&x);
        for i in 0..n {
            let dt = self.grid.dt(i);
            let v = self.continuous_velocity(i);
            let b = self.brownian(i);
            for r in 0..d {
                x[r] += v[r] * dt + b[r];
            }
            for j in 0..self.n_atoms() {
                let jump = self.psi_jump(i, j);
                for _ in 0..self.counts[i * self.n_atoms() + j] {
                    for r in 0..d {
                        x[r] += jump[r];
                    }
                }
            }
            for r in 0..d {
                x[r] += self.dm[i * d + r];
            }
            out.extend_from_slice(&x);
        }
        out
    }

    /// Every jump as `(X_{s−}, ΔX)`, Poisson jumps first within a step.
    pub fn jumps(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let (n, d) = (self.grid.n_steps(), self.d);
        let mut out = Vec::new();
        let mut x = self.x0.clone();
        for i in 0..n {
            let dt = self.grid.dt(i);
            let v = self.continuous_velocity(i);
            let b = self.brownian(i);
            for r in 0..d {
                x[r] += v[r] * dt + b[r];
            }
            for j in 0..self.n_atoms() {
                let jump = self.psi_jump(i, j);
                for _ in 0..self.counts[i * self.n_atoms() + j] {
                    out.push((x.clone(), jump.clone()));
                    for r in 0..d {
                        x[r] += jump[r];
                    }
                }
            }
            let dm = &self.dm[i * d..(i + 1) * d];
            if dm.iter().any(|&v| v != 0.0) {
                out.push((x.clone(), dm.to_vec()));
            }
            for r in 0..d {
                x[r] += dm[r];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Quadrature {
    #[default]
    Left,
    Midpoint,
    /// `|X + vΔt|^p − |X|^p` for the drift segment.
    Exact,
}

/// `|X_t|^p` minus the right-hand side of the Itô formula at every node;
/// the entry at node 0 is zero.
pub fn ito_p_residual(path: &SemimartingalePath, p: f64, quadrature: Quadrature) -> Result<Vec<f64>> {
    if !(p > 1.0) {
        return Err(Error::domain(format!("the Itô formula for |x|^p is checked for p > 1, got {p}")));
    }
    let (n, d, k) = (path.grid.n_steps(), path.d, path.k);
    let mut x = path.x0.clone();
    let mut rhs = pow_norm(&x, p);
    let mut out = vec![0.0; n + 1];
    for i in 0..n {
        let dt = path.grid.dt(i);
        let v = path.continuous_velocity(i);
        let g = grad(&x, p);
        rhs += match quadrature {
            Quadrature::Left => dot(&g, &v) * dt,
            Quadrature::Midpoint => {
                let mid: Vec<f64> = (0..d).map(|r| x[r] + 0.5 * v[r] * dt).collect();
                dot(&grad(&mid, p), &v) * dt
            }
            Quadrature::Exact => {
                let end: Vec<f64> = (0..d).map(|r| x[r] + v[r] * dt).collect();
                pow_norm(&end, p) - pow_norm(&x, p)
            }
        };
        let b = path.brownian(i);
        rhs += dot(&g, &b);
        let nx = norm(&x);
        if nx > 0.0 {
            let z = &path.z[i * d * k..(i + 1) * d * k];
            let z2: f64 = z.iter().map(|v| v * v).sum();
            // x̌ᵀ Z Zᵀ x̌ = |Zᵀ x̌|²
            let zt_x: f64 = (0..k)
                .map(|c| (0..d).map(|r| z[r * k + c] * x[r] / nx).sum::<f64>().powi(2))
                .sum();
            rhs += 0.5 * p * nx.powf(p - 2.0) * ((2.0 - p) * (z2 - zt_x) + (p - 1.0) * z2) * dt;
        }
        for r in 0..d {
            x[r] += v[r] * dt + b[r];
        }
        for j in 0..path.n_atoms() {
            let jump = path.psi_jump(i, j);
            for _ in 0..path.counts[i * path.n_atoms() + j] {
                rhs += jump_terms(&mut x, &jump, p);
            }
        }
        let dm: Vec<f64> = path.dm[i * d..(i + 1) * d].to_vec();
        rhs += jump_terms(&mut x, &dm, p);
        out[i + 1] = pow_norm(&x, p) - rhs;
    }
    Ok(out)
}

/// Stochastic-integral term plus jump correction for one jump; moves `x`.
fn jump_terms(x: &mut [f64], jump: &[f64], p: f64) -> f64 {
    let g = grad(x, p);
    let before = pow_norm(x, p);
    let integral = dot(&g, jump);
    let after: Vec<f64> = x.iter().zip(jump).map(|(a, b)| a + b).collect();
    let correction = pow_norm(&after, p) - before - integral;
    x.copy_from_slice(&after);
    integral + correction
}

/// Both sides of the jump lower bound for one jump:
/// `|y+Δ|^p − |y|^p − p|y|^{p−1}y̌·Δ` and
/// `c(p)|Δ|²(|y|² ∨ |y+Δ|²)^{p/2−1}`.
pub fn jump_bound_terms(y: &[f64], jump: &[f64], p: f64) -> Result<(f64, f64)> {
    if !(1.0..2.0).contains(&p) {
        return Err(Error::domain(format!("the jump bound is stated for p in [1, 2), got {p}")));
    }
    let after: Vec<f64> = y.iter().zip(jump).map(|(a, b)| a + b).collect();
    let lhs = pow_norm(&after, p) - pow_norm(y, p) - dot(&grad(y, p), jump);
    let m = dot(y, y).max(dot(&after, &after));
    let j2 = dot(jump, jump);
    let rhs = if m > 0.0 && j2 > 0.0 { c_of_p(p)? * j2 * m.powf(p / 2.0 - 1.0) } else { 0.0 };
    Ok((lhs, rhs))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct JumpBoundReport {
    pub p: f64,
    pub n_jumps: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// Smallest per-jump `lhs − rhs`; zero without jumps.
    pub min_margin: f64,
}

pub fn jump_bound_check(path: &SemimartingalePath, p: f64) -> Result<JumpBoundReport> {
    let mut r = JumpBoundReport { p, n_jumps: 0, lhs: 0.0, rhs: 0.0, min_margin: 0.0 };
    let mut first = true;
    for (y, jump) in path.jumps() {
        let (l, h) = jump_bound_terms(&y, &jump, p)?;
        r.n_jumps += 1;
        r.lhs += l;
        r.rhs += h;
        r.min_margin = if first { l - h } else { r.min_margin.min(l - h) };
        first = false;
    }
    if r.n_jumps == 0 {
        c_of_p(p)?;
        if !(1.0..2.0).contains(&p) {
            return Err(Error::domain(format!("the jump bound is stated for p in [1, 2), got {p}")));
        }
    }
    Ok(r)
}

/// `|x+y|^p − |x|^p − ∇|x|^p·y − p(p−1)3^{1−p}|y|²|x|^{p−2}` for `p ≥ 2`.
pub fn taylor_margin(x: &[f64], y: &[f64], p: f64) -> Result<f64> {
    if !(p >= 2.0) {
        return Err(Error::domain(format!("the Taylor bound is checked for p ≥ 2, got {p}")));
    }
    let after: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
    let lhs = pow_norm(&after, p) - pow_norm(x, p) - dot(&grad(x, p), y);
    let rhs = p * (p - 1.0) * 3f64.powf(1.0 - p) * dot(y, y) * norm(x).powf(p - 2.0);
    Ok(lhs - rhs)
}

pub const ZERO_BAND: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ZeroSetReport {
    pub p: f64,
    /// `E Σ_{|Y_i| ≤ tol} |Z_i|²Δt`
    pub z_mass: f64,
    /// `E Σ_{|Y_i| ≤ tol} |ΔM_i|²` (all of `M` is jumps in discrete time).
    pub m_jump_mass: f64,
    pub flagged_share: f64,
}

/// Mass of `|Z|²dt` and `d[M]` on the band `|Y| ≤ 1e−9 · sup_t|Y|`.
pub fn zero_set_check(sol: &SolutionEnsemble, p: f64) -> Result<ZeroSetReport> {
    if !(p > 1.0 && p < 2.0) {
        return Err(Error::domain(format!("the zero-set identity is checked for p in (1, 2), got {p}")));
    }
    let n = sol.n_steps();
    let per_path: Vec<(f64, f64, usize)> = (0..sol.n_paths)
        .into_par_iter()
        .map(|q| {
            let sup = (0..=n).map(|i| norm(sol.y_at(q, i))).fold(0.0f64, f64::max);
            let tol = ZERO_BAND * sup;
            let (mut zm, mut mm, mut cnt) = (0.0, 0.0, 0);
            for i in 0..n {
                if norm(sol.y_at(q, i)) <= tol {
                    cnt += 1;
                    zm += sol.z_at(q, i).iter().map(|v| v * v).sum::<f64>() * sol.grid.dt(i);
                    mm += sol.dm_at(q, i).iter().map(|v| v * v).sum::<f64>();
                }
            }
            (zm, mm, cnt)
        })
        .collect();
    let (mut z_mass, mut m_jump_mass, mut flagged) = (0.0, 0.0, 0.0);
    for (q, (zm, mm, c)) in per_path.into_iter().enumerate() {
        let w = sol.weight(q);
        z_mass += w * zm;
        m_jump_mass += w * mm;
        flagged += w * c as f64;
    }
    Ok(ZeroSetReport { p, z_mass, m_jump_mass, flagged_share: flagged / n.max(1) as f64 })
}

/// `E(Σ‖ψ‖²Δt)^{p/2} / E(Σ_j ψ_j²ΔN_j)^{p/2}`, reported without any bound.
pub fn e_p_ratio(sol: &SolutionEnsemble, e: &PathEnsemble, p: f64) -> Result<f64> {
    if sol.n_paths != e.n_paths || sol.grid != e.grid {
        return Err(Error::config("solution and ensemble do not match"));
    }
    let n = e.n_steps();
    let (d, a) = (sol.d, e.n_atoms);
    let (mut num, mut den) = (0.0, 0.0);
    for q in 0..e.n_paths {
        let (mut mu, mut pi) = (0.0, 0.0);
        for i in 0..n {
            let psi = sol.psi_at(q, i);
            for r in 0..d {
                for j in 0..a {
                    let v2 = psi[r * a + j].powi(2);
                    mu += v2 * e.intensities[j] * e.grid.dt(i);
                    pi += v2 * e.counts_at(q, i)[j] as f64;
                }
            }
        }
        num += e.weight(q) * mu.powf(p / 2.0);
        den += e.weight(q) * pi.powf(p / 2.0);
    }
    Ok(if num == 0.0 { 0.0 } else { num / den })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pinned_constants() {
        let c = constants(2.0, 1.0, 0.0).unwrap();
        assert_eq!(c.c_p, 1.0);
        assert!((c.kappa_p - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.beta, 6.0);
        assert_eq!(c_of_p(1.5).unwrap(), 0.375);
        assert_eq!(c_of_p(1.0).unwrap(), 0.0);
        assert_eq!(constants(3.0, 0.5, -1.0).unwrap().nu, -0.75);
        assert!(matches!(constants(1.0, 0.5, 0.0), Err(Error::Domain(_))));
        assert!(matches!(c_of_p(0.9), Err(Error::Domain(_))));
    }

    #[test]
    fn pure_drift_midpoint_is_exact_for_squares() {
        let grid = TimeGrid::uniform(10, 1.0).unwrap();
        let mut path = SemimartingalePath::zeros(&grid, 1, 1, &[], &[1.0]);
        path.drift.iter_mut().for_each(|v| *v = 1.0);
        let mid = ito_p_residual(&path, 2.0, Quadrature::Midpoint).unwrap();
        assert!(mid.iter().all(|r| r.abs() < 1e-12));
        let left = ito_p_residual(&path, 2.0, Quadrature::Left).unwrap();
        // Left endpoint misses Δt² per step.
        assert!((left[10] - 10.0 * 0.01).abs() < 1e-12);
    }

    #[test]
    fn jump_bound_examples() {
        let (l, r) = jump_bound_terms(&[1.0], &[1.0], 1.5).unwrap();
        assert!((l - (2f64.powf(1.5) - 2.5)).abs() < 1e-14);
        assert!((r - 0.375 * 4f64.powf(-0.25)).abs() < 1e-14);
        let (l, r) = jump_bound_terms(&[0.0], &[1.0], 1.5).unwrap();
        assert_eq!(l, 1.0);
        assert!(r <= 0.5);
        assert!(jump_bound_terms(&[0.0], &[1.0], 2.0).is_err());
    }

    #[test]
    fn pure_jump_path_telescopes() {
        let grid = TimeGrid::uniform(20, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut path = SemimartingalePath::zeros(&grid, 2, 1, &[1.0, 0.5], &[0.3, -0.2]);
        for v in path.drift.iter_mut().chain(path.psi.iter_mut()).chain(path.dm.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        for c in path.counts.iter_mut() {
            *c = rng.random_range(0..3);
        }
        for p in [1.2, 1.5, 2.0, 3.0] {
            let r = ito_p_residual(&path, p, Quadrature::Exact).unwrap();
            assert!(r.iter().all(|v| v.abs() < 1e-10), "p = {p}: {r:?}");
        }
        let vals = path.values();
        let jumps = path.jumps();
        assert!(!jumps.is_empty() && vals.len() == 21 * 2);
    }

    #[test]
    fn jump_bound_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst = f64::INFINITY;
        for _ in 0..100_000 {
            let d = rng.random_range(1..4);
            let p = rng.random_range(1.0..2.0);
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let j: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (l, r) = jump_bound_terms(&y, &j, p).unwrap();
            worst = worst.min(l - r);
        }
        assert!(worst >= -1e-12, "{worst}");
    }

    #[test]
    fn taylor_bound_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for p in [2.0, 2.5, 3.0] {
            for _ in 0..100_000 {
                let d = rng.random_range(1..4);
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let y: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                assert!(taylor_margin(&x, &y, p).unwrap() >= -1e-10);
            }
        }
    }
}
