//! Linear BSDEs `f = f_s + α_s y + β_s·z + Σ_j γ_{s,j} ψ_j λ_j` solved through
//! the Doléans-Dade exponential
//! `Γ_{t,s} = exp(∫α) E_{t,s}`, `dE = E_{-}(β dW + Σ γ_j dπ̃_j)`.
//!
//! Three discrete constructions of `Γ` are available:
//!
//! - [`Construction::Euler`]: `Γ_{i+1} = Γ_i (1 + αΔt + β·ΔW + Σγ_jΔπ̃_j)`.
//!   This is the default. On the two-point law of the tree oracle it is an
//!   exact martingale.
//! - [`Construction::Exact`]: the stochastic exponential with per-step
//!   aggregates, `exp(αΔt + β·ΔW − ½|β|²Δt − Σγ_jλ_jΔt) Π_j (1+γ_j)^{ΔN_j}`.
//! - [`Construction::Displayed`]: `exp(αΔt + β·ΔW − ½|β|²Δt) Π_j ((1+γ_j)e^{−γ_j})^{ΔN_j}`,
//!   which drops the compensator factor `exp(Σγ_jΔπ̃_j)`; its expectation is
//!   not one when `γ ≠ 0`. Kept for comparison only.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::expr::{Expr, ExprKind, TerminalEnv};
use crate::model::{DriverArgs, GeneratorSpec, TerminalSpec};
use crate::noise::{PathEnsemble, StateCube, TimeGrid};
use crate::solver::regression::{self, BasisSpec, Features};
use crate::solver::SolutionEnsemble;

/// Largest tolerated share of negative `Γ` values over all path-nodes.
pub const MAX_NEGATIVE_FREQUENCY: f64 = 1e-3;

/// A deterministic function of time: a constant or an expression in `t`.
#[derive(Clone, Debug)]
pub enum TimeFn {
    Const(f64),
    Expr(Arc<Expr>),
}

impl TimeFn {
    pub fn parse(src: &str) -> Result<Self> {
        if let Ok(v) = src.trim().parse::<f64>() {
            return Ok(TimeFn::Const(v));
        }
        let e = Expr::parse(src, ExprKind::Terminal { k: 0, n_atoms: 0 })?;
        if e.dim() != 1 || e.usage.aux || e.usage.state {
            return Err(Error::config(format!("'{src}' must be a scalar expression in t only")));
        }
        Ok(TimeFn::Expr(Arc::new(e)))
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFn::Const(v) => *v,
            TimeFn::Expr(e) => {
                let mut o = [0.0];
                e.eval_terminal(&TerminalEnv { t, w: &[], counts: &[], aux_sum: 0.0, aux: &[] }, &mut o);
                o[0]
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            TimeFn::Const(v) => v.to_string(),
            TimeFn::Expr(e) => e.source.clone(),
        }
    }
}

impl From<f64> for TimeFn {
    fn from(v: f64) -> Self {
        TimeFn::Const(v)
    }
}

#[derive(Clone)]
pub struct LinearCoefficients {
    pub alpha: TimeFn,
    /// One per Brownian coordinate.
    pub beta: Vec<TimeFn>,
    /// One per atom.
    pub gamma: Vec<TimeFn>,
    pub forcing: TimeFn,
    pub intensities: Vec<f64>,
    pub xi: TerminalSpec,
}

/// Sampled bounds of the coefficients over a grid.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CoefficientBounds {
    pub alpha_sup: f64,
    pub alpha_abs_sup: f64,
    pub beta_sup: f64,
    /// `sup_t (Σ_j γ_j² λ_j)^{1/2}`
    pub gamma_norm_sup: f64,
    pub gamma_abs_sup: f64,
    pub gamma_min: f64,
}

impl LinearCoefficients {
    pub fn constant(alpha: f64, beta: &[f64], gamma: &[f64], forcing: f64, intensities: &[f64], xi: TerminalSpec) -> Self {
        Self {
            alpha: alpha.into(),
            beta: beta.iter().map(|&b| b.into()).collect(),
            gamma: gamma.iter().map(|&g| g.into()).collect(),
            forcing: forcing.into(),
            intensities: intensities.to_vec(),
            xi,
        }
    }

    pub fn k(&self) -> usize {
        self.beta.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.gamma.len()
    }

    pub fn id(&self) -> String {
        let list = |v: &[TimeFn]| v.iter().map(TimeFn::label).collect::<Vec<_>>().join(",");
        format!(
            "linear-coeffs(alpha={};beta={};gamma={};f={})",
            self.alpha.label(),
            list(&self.beta),
            list(&self.gamma),
            self.forcing.label()
        )
    }

    /// Checks `γ ≥ −1`, finiteness and shapes on the grid nodes and midpoints.
    pub fn validate(&self, grid: &TimeGrid) -> Result<CoefficientBounds> {
        if self.gamma.len() != self.intensities.len() {
            return Err(Error::config(format!(
                "gamma: {} coefficients for {} atoms",
                self.gamma.len(),
                self.intensities.len()
            )));
        }
        if self.xi.d != 1 {
            return Err(Error::config("terminal: linear engine is scalar (d = 1)"));
        }
        let mut ts: Vec<f64> = grid.times().to_vec();
        ts.extend(grid.times().windows(2).map(|w| 0.5 * (w[0] + w[1])));
        let mut b = CoefficientBounds {
            alpha_sup: f64::NEG_INFINITY,
            alpha_abs_sup: 0.0,
            beta_sup: 0.0,
            gamma_norm_sup: 0.0,
            gamma_abs_sup: 0.0,
            gamma_min: f64::INFINITY,
        };
        for &t in &ts {
            let a = self.alpha.eval(t);
            let beta: Vec<f64> = self.beta.iter().map(|f| f.eval(t)).collect();
            let gamma: Vec<f64> = self.gamma.iter().map(|f| f.eval(t)).collect();
            let fv = self.forcing.eval(t);
            if !a.is_finite() || !fv.is_finite() || beta.iter().chain(&gamma).any(|v| !v.is_finite()) {
                return Err(Error::config(format!("coefficients are not finite at t = {t}")));
            }
            for (j, &g) in gamma.iter().enumerate() {
                if g < -1.0 {
                    return Err(Error::config(format!("gamma: γ_{} = {g} < −1 at t = {t}", j + 1)));
                }
            }
            b.alpha_sup = b.alpha_sup.max(a);
            b.alpha_abs_sup = b.alpha_abs_sup.max(a.abs());
            b.beta_sup = b.beta_sup.max(beta.iter().map(|x| x * x).sum::<f64>().sqrt());
            let gn: f64 = gamma.iter().zip(&self.intensities).map(|(g, l)| g * g * l).sum::<f64>().sqrt();
            b.gamma_norm_sup = b.gamma_norm_sup.max(gn);
            for &g in &gamma {
                b.gamma_abs_sup = b.gamma_abs_sup.max(g.abs());
                b.gamma_min = b.gamma_min.min(g);
            }
        }
        if b.gamma_min == f64::INFINITY {
            b.gamma_min = 0.0;
        }
        Ok(b)
    }

    /// The induced driver, with `α` the sampled supremum and
    /// `K = max(sup|β|, sup‖γ‖)`; comparison weights are `κ_j = γ_j`.
    pub fn to_generator(&self, grid: &TimeGrid) -> Result<GeneratorSpec> {
        let bounds = self.validate(grid)?;
        let k = self.k();
        let c = self.clone();
        let spec = GeneratorSpec::new(
            self.id(),
            1,
            k,
            self.intensities.clone(),
            bounds.alpha_sup,
            bounds.beta_sup.max(bounds.gamma_norm_sup),
            Arc::new(move |x: &DriverArgs, o: &mut [f64]| {
                let t = x.t;
                let mut v = c.forcing.eval(t) + c.alpha.eval(t) * x.y[0];
                for (col, b) in c.beta.iter().enumerate() {
                    v += b.eval(t) * x.z[col];
                }
                for (j, g) in c.gamma.iter().enumerate() {
                    v += g.eval(t) * x.psi[j] * c.intensities[j];
                }
                o[0] = v;
            }),
        )?;
        let g = self.gamma.clone();
        Ok(spec.with_comparison(
            Arc::new(move |x: &DriverArgs, _phi: &[f64], j: usize| g[j].eval(x.t)),
            vec![bounds.gamma_abs_sup; self.n_atoms()],
        ))
    }

    fn check_ensemble(&self, e: &PathEnsemble) -> Result<()> {
        if e.k != self.k() || e.intensities != self.intensities {
            return Err(Error::config(format!(
                "coefficients (k = {}, intensities {:?}) do not match the ensemble (k = {}, intensities {:?})",
                self.k(),
                self.intensities,
                e.k,
                e.intensities
            )));
        }
        Ok(())
    }

    /// Factor `Γ_{i+1}/Γ_i` on path `p`.
    pub fn step_factor(&self, e: &PathEnsemble, p: usize, i: usize, construction: Construction) -> f64 {
        let t = e.grid.times()[i];
        let dt = e.grid.dt(i);
        let a = self.alpha.eval(t);
        let dw = e.dw_at(p, i);
        let counts = e.counts_at(p, i);
        let mut bdw = 0.0;
        let mut b2 = 0.0;
        for (col, b) in self.beta.iter().enumerate() {
            let bv = b.eval(t);
            bdw += bv * dw[col];
            b2 += bv * bv;
        }
        match construction {
            Construction::Euler => {
                let mut g = 1.0 + a * dt + bdw;
                for (j, gf) in self.gamma.iter().enumerate() {
                    g += gf.eval(t) * e.compensated_at(p, i, j);
                }
                g
            }
            Construction::Exact => {
                let mut expo = a * dt + bdw - 0.5 * b2 * dt;
                let mut prod = 1.0;
                for (j, gf) in self.gamma.iter().enumerate() {
                    let g = gf.eval(t);
                    expo -= g * self.intensities[j] * dt;
                    prod *= (1.0 + g).powi(counts[j] as i32);
                }
                expo.exp() * prod
            }
            Construction::Displayed => {
                let mut expo = a * dt + bdw - 0.5 * b2 * dt;
                let mut prod = 1.0;
                for (j, gf) in self.gamma.iter().enumerate() {
                    let g = gf.eval(t);
                    let n = counts[j] as f64;
                    expo -= g * n;
                    prod *= (1.0 + g).powi(counts[j] as i32);
                }
                expo.exp() * prod
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Construction {
    #[default]
    Euler,
    Exact,
    Displayed,
}

impl Construction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Construction::Euler),
            "exact" => Ok(Construction::Exact),
            "displayed" => Ok(Construction::Displayed),
            _ => Err(Error::config(format!("construction: expected euler, exact or displayed, got '{s}'"))),
        }
    }
}

/// `Γ_{t,s}` for `s` from `t_index` to the horizon on every path.
#[derive(Clone, Debug)]
pub struct DoleansPath {
    pub t_index: usize,
    pub n_paths: usize,
    pub n_steps: usize,
    pub construction: Construction,
    /// `[p][s − t_index]`
    pub values: Vec<f64>,
    pub negatives: usize,
    pub min_value: f64,
}

impl DoleansPath {
    fn width(&self) -> usize {
        self.n_steps - self.t_index + 1
    }

    pub fn value(&self, p: usize, s: usize) -> f64 {
        self.values[p * self.width() + s - self.t_index]
    }

    pub fn terminal(&self) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.value(p, self.n_steps)).collect()
    }

    pub fn negative_frequency(&self) -> f64 {
        self.negatives as f64 / (self.n_paths * (self.width() - 1)).max(1) as f64
    }
}

pub fn doleans(coeffs: &LinearCoefficients, ensemble: &PathEnsemble, t_index: usize) -> Result<DoleansPath> {
    doleans_with(coeffs, ensemble, t_index, Construction::Euler)
}

pub fn doleans_with(
    coeffs: &LinearCoefficients,
    ensemble: &PathEnsemble,
    t_index: usize,
    construction: Construction,
) -> Result<DoleansPath> {
    coeffs.check_ensemble(ensemble)?;
    let n = ensemble.n_steps();
    if t_index > n {
        return Err(Error::config(format!("t_index {t_index} is beyond the last node {n}")));
    }
    let width = n - t_index + 1;
    let mut values = vec![0.0; ensemble.n_paths * width];
    values.par_chunks_mut(width).enumerate().for_each(|(p, v)| {
        v[0] = 1.0;
        for s in t_index..n {
            v[s - t_index + 1] = v[s - t_index] * coeffs.step_factor(ensemble, p, s, construction);
        }
    });
    let negatives = values.iter().filter(|&&v| v < 0.0).count();
    let min_value = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(DoleansPath { t_index, n_paths: ensemble.n_paths, n_steps: n, construction, values, negatives, min_value })
}

/// Weighted mean and its standard error (zero on exact enumerations).
pub(crate) fn mean_se(values: &[f64], e: &PathEnsemble) -> (f64, f64) {
    let mean: f64 = match &e.weights {
        Some(w) => values.iter().zip(w).map(|(v, w)| v * w).sum(),
        None => values.iter().sum::<f64>() / values.len() as f64,
    };
    if e.is_exact() || values.len() < 2 {
        return (mean, 0.0);
    }
    let n = values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Moment {
    pub q: u32,
    pub value: f64,
    pub se: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub basis: BasisSpec,
    pub construction: Construction,
}

impl Default for LinearParams {
    fn default() -> Self {
        Self { basis: BasisSpec::default(), construction: Construction::Euler }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LinearSolution {
    pub construction: Construction,
    pub y0: f64,
    pub y0_se: f64,
    /// Mean of `Γ_{0,T}`.
    pub gamma_mean: f64,
    pub gamma_mean_se: f64,
    pub negatives: usize,
    pub negative_frequency: f64,
    /// `E|Γ_{0,T}|^q` for `q = 1..=8`.
    pub moments: Vec<Moment>,
    /// Cross-sectional mean of the `Y` estimate at every node.
    pub time_means: Vec<f64>,
    #[serde(skip)]
    pub grid: TimeGrid,
    #[serde(skip)]
    pub n_paths: usize,
    /// `[p][i in 0..=n]`
    #[serde(skip)]
    pub y: Vec<f64>,
}

/// `Y_t = E[Γ_{t,T}ξ + Σ_{s≥t} Γ_{t,s} f_s Δt | F_t]`: `Y_0` is a plain
/// mean, interior values are regressions of the pathwise representation.
pub fn linear_solve(coeffs: &LinearCoefficients, ensemble: &PathEnsemble, params: &LinearParams) -> Result<LinearSolution> {
    let e = ensemble;
    coeffs.validate(&e.grid)?;
    coeffs.check_ensemble(e)?;
    let n = e.n_steps();
    let np = e.n_paths;
    let gamma = doleans_with(coeffs, e, 0, params.construction)?;
    let freq = gamma.negative_frequency();
    if freq > MAX_NEGATIVE_FREQUENCY {
        return Err(Error::numeric(format!(
            "Γ is negative on {} of {} path-steps ({:.3}% > {}%); refine the grid",
            gamma.negatives,
            np * n,
            100.0 * freq,
            100.0 * MAX_NEGATIVE_FREQUENCY
        )));
    }
    let cube = StateCube::new(e);
    let xi = coeffs.xi.values(e, &cube, n)?;
    let forcing: Vec<f64> = (0..n).map(|i| coeffs.forcing.eval(e.grid.times()[i])).collect();

    // V_i = f_iΔt + g_i V_{i+1}, V_n = ξ.
    let mut v = vec![0.0; np * (n + 1)];
    v.par_chunks_mut(n + 1).enumerate().for_each(|(p, vp)| {
        vp[n] = xi[p];
        for i in (0..n).rev() {
            let g = coeffs.step_factor(e, p, i, params.construction);
            vp[i] = forcing[i] * e.grid.dt(i) + g * vp[i + 1];
        }
    });
    let v0: Vec<f64> = (0..np).map(|p| v[p * (n + 1)]).collect();
    let (y0, y0_se) = mean_se(&v0, e);
    let weights = regression::path_weights(e);
    let use_aux = params.basis.features.aux.unwrap_or_else(|| coeffs.xi.uses_aux());
    let mut y = vec![0.0; np * (n + 1)];
    for p in 0..np {
        y[p * (n + 1)] = y0;
        y[p * (n + 1) + n] = xi[p];
    }
    for i in 1..n {
        let feats = Features::at_node(&cube, i, &params.basis.features, use_aux, None);
        let targets: Vec<f64> = (0..np).map(|p| v[p * (n + 1) + i]).collect();
        let fit = regression::regress(params.basis.family, &feats, &targets, 1, &weights)?;
        for p in 0..np {
            y[p * (n + 1) + i] = fit.values[p];
        }
    }
    let time_means = (0..=n).map(|i| (0..np).map(|p| e.weight(p) * y[p * (n + 1) + i]).sum()).collect();
    let terminal = gamma.terminal();
    let (gamma_mean, gamma_mean_se) = mean_se(&terminal, e);
    let moments = (1..=8u32)
        .map(|q| {
            let vals: Vec<f64> = terminal.iter().map(|g| g.abs().powi(q as i32)).collect();
            let (value, se) = mean_se(&vals, e);
            Moment { q, value, se }
        })
        .collect();
    Ok(LinearSolution {
        construction: params.construction,
        y0,
        y0_se,
        gamma_mean,
        gamma_mean_se,
        negatives: gamma.negatives,
        negative_frequency: freq,
        moments,
        time_means,
        grid: e.grid.clone(),
        n_paths: np,
        y,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Crosscheck {
    pub y0_solver: f64,
    pub y0_linear: f64,
    pub gap: f64,
    pub combined_se: f64,
    pub budget: f64,
    pub tolerance: f64,
    pub flagged: bool,
}

/// Discretization slack between the explicit linear recursion and the
/// implicit backward step: `2 Δt T c² max(1, |Y_0|)` with
/// `c = sup|α| + sup|β| + sup‖γ‖`.
pub fn discretization_budget(coeffs: &LinearCoefficients, grid: &TimeGrid, y0: f64) -> Result<f64> {
    let b = coeffs.validate(grid)?;
    let c = b.alpha_abs_sup + b.beta_sup + b.gamma_norm_sup;
    Ok(2.0 * grid.max_step() * grid.horizon() * c * c * y0.abs().max(1.0))
}

pub fn crosscheck_nonlinear(
    coeffs: &LinearCoefficients,
    linear: &LinearSolution,
    solver: &SolutionEnsemble,
) -> Result<Crosscheck> {
    if linear.grid != solver.grid || linear.n_paths != solver.n_paths || solver.d != 1 {
        return Err(Error::config("crosscheck: linear and solver outputs are not on the same ensemble"));
    }
    let y0_solver = solver.y0()[0];
    let gap = (y0_solver - linear.y0).abs();
    let combined_se = (linear.y0_se.powi(2) + solver.y0_se.powi(2)).sqrt();
    let budget = discretization_budget(coeffs, &linear.grid, linear.y0)?;
    let tolerance = 3.0 * combined_se + budget + 1e-12 * linear.y0.abs().max(1.0);
    Ok(Crosscheck { y0_solver, y0_linear: linear.y0, gap, combined_se, budget, tolerance, flagged: gap > tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{terminal_by_id, ModelContext};
    use crate::noise::{simulate, JumpActivity};
    use crate::oracle::TreeModel;
    use crate::solver::{backward_solve, PicardParams};

    fn xi(id: &str, k: usize, lam: &[f64]) -> TerminalSpec {
        terminal_by_id(id, &ModelContext::new(1, k, lam.to_vec())).unwrap()
    }

    fn ens(n: usize, t: f64, lam: &[f64], paths: usize, seed: u64) -> PathEnsemble {
        simulate(&TimeGrid::uniform(n, t).unwrap(), 1, &JumpActivity::from_intensities(lam).unwrap(), paths, seed).unwrap()
    }

    #[test]
    fn time_functions_parse() {
        assert_eq!(TimeFn::parse("0.5").unwrap().eval(3.0), 0.5);
        assert!((TimeFn::parse("sin(t) + 1").unwrap().eval(0.5) - (0.5f64.sin() + 1.0)).abs() < 1e-15);
        assert!(TimeFn::parse("w + t").is_err());
        assert!(TimeFn::parse("a").is_err());
    }

    #[test]
    fn gamma_below_minus_one_is_rejected() {
        let c = LinearCoefficients::constant(0.0, &[0.0], &[-1.5], 0.0, &[1.0], xi("one", 1, &[1.0]));
        assert!(matches!(c.validate(&TimeGrid::uniform(4, 1.0).unwrap()), Err(Error::Config(_))));
    }

    #[test]
    fn zero_coefficients_give_unit_gamma_and_constant_y() {
        let e = ens(8, 1.0, &[1.0], 200, 1);
        let c = LinearCoefficients::constant(0.0, &[0.0], &[0.0], 0.0, &[1.0], xi("const:2", 1, &[1.0]));
        let g = doleans(&c, &e, 0).unwrap();
        assert!(g.values.iter().all(|&v| v == 1.0));
        let s = linear_solve(&c, &e, &LinearParams::default()).unwrap();
        assert!(s.y.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn pure_drift() {
        let e = ens(64, 1.0, &[], 4, 1);
        let c = LinearCoefficients::constant(0.5, &[0.0], &[], 0.0, &[], xi("one", 1, &[]));
        let exact = doleans_with(&c, &e, 0, Construction::Exact).unwrap();
        assert!((exact.value(0, 64) - 0.5f64.exp()).abs() < 1e-12);
        let euler = doleans(&c, &e, 0).unwrap();
        assert!((euler.value(0, 64) - (1.0 + 0.5 / 64.0f64).powi(64)).abs() < 1e-12);

        let c1 = LinearCoefficients::constant(1.0, &[0.0], &[], 0.0, &[], xi("one", 1, &[]));
        let s = linear_solve(&c1, &e, &LinearParams { construction: Construction::Exact, ..Default::default() }).unwrap();
        for i in 0..=64 {
            let t = i as f64 / 64.0;
            assert!((s.time_means[i] - (1.0 - t).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_minus_one_kills_at_a_jump() {
        let e = ens(16, 1.0, &[1.0], 2000, 3);
        let c = LinearCoefficients::constant(0.0, &[0.0], &[-1.0], 0.0, &[1.0], xi("one", 1, &[1.0]));
        let euler = doleans(&c, &e, 0).unwrap();
        let exact = doleans_with(&c, &e, 0, Construction::Exact).unwrap();
        let q = 1.0 / 16.0;
        let (p, i) = (0..e.n_paths)
            .flat_map(|p| (0..16).map(move |i| (p, i)))
            .find(|&(p, i)| e.counts_at(p, i)[0] == 1 && (0..i).all(|s| e.counts_at(p, s)[0] == 0))
            .unwrap();
        let before = euler.value(p, i);
        assert!((euler.value(p, i + 1) / before - q).abs() < 1e-12);
        assert_eq!(exact.value(p, i + 1), 0.0);
        assert!((i + 1..=16).all(|s| exact.value(p, s) == 0.0));
    }

    #[test]
    fn euler_is_an_exact_martingale_on_the_tree_and_display_is_not() {
        let tree = TreeModel::uniform(4, 0.1, 1, &[2.0]).unwrap();
        let e = tree.paths();
        let c = LinearCoefficients::constant(0.0, &[0.4], &[-1.0], 0.0, &[2.0], xi("one", 1, &[2.0]));
        let mean = |cons| {
            let g = doleans_with(&c, &e, 0, cons).unwrap();
            mean_se(&g.terminal(), &e).0
        };
        assert!((mean(Construction::Euler) - 1.0).abs() < 1e-13);
        let euler = doleans(&c, &e, 0).unwrap();
        assert!(euler.min_value >= 0.0);

        let c2 = LinearCoefficients::constant(0.0, &[0.0], &[0.5], 0.0, &[2.0], xi("one", 1, &[2.0]));
        let g = doleans_with(&c2, &e, 0, Construction::Displayed).unwrap();
        assert!((mean_se(&g.terminal(), &e).0 - 1.0).abs() > 1e-3);
    }

    #[test]
    fn martingale_normalisation_under_monte_carlo() {
        let e = ens(32, 1.0, &[1.0], 20_000, 5);
        let c = LinearCoefficients::constant(0.0, &[0.3], &[0.5], 0.0, &[1.0], xi("one", 1, &[1.0]));
        for cons in [Construction::Euler, Construction::Exact] {
            let g = doleans_with(&c, &e, 0, cons).unwrap();
            let (m, se) = mean_se(&g.terminal(), &e);
            assert!((m - 1.0).abs() < 5.0 * se, "{cons:?}: {m} ± {se}");
        }
        let g = doleans_with(&c, &e, 0, Construction::Displayed).unwrap();
        let (m, se) = mean_se(&g.terminal(), &e);
        let expect = ((1.5 * (-0.5f64).exp() - 1.0) * 1.0).exp();
        assert!((m - expect).abs() < 5.0 * se, "{m} vs {expect}");
    }

    #[test]
    fn lognormal_terminal() {
        let (n, t, beta) = (20, 1.0, 0.3);
        let e = ens(n, t, &[], 20_000, 11);
        let c = LinearCoefficients::constant(0.0, &[beta], &[], 0.0, &[], xi("lognormal:2", 1, &[]));
        let s = linear_solve(&c, &e, &LinearParams::default()).unwrap();
        // Gaussian increments: E[(1 + βΔW)e^{ΔW − Δt/2}] = 1 + βΔt per step.
        let euler = 2.0 * (1.0 + beta * t / n as f64).powi(n as i32);
        assert!((s.y0 - euler).abs() < 3.0 * s.y0_se, "{} vs {euler} ± {}", s.y0, s.y0_se);
        let exact = linear_solve(&c, &e, &LinearParams { construction: Construction::Exact, ..Default::default() }).unwrap();
        let closed = 2.0 * (beta * t).exp();
        assert!((exact.y0 - closed).abs() < 3.0 * exact.y0_se);
    }

    #[test]
    fn crosschecks_against_backward_solver() {
        let e = ens(16, 1.0, &[1.0], 5_000, 2);
        let params = PicardParams::default();
        let basis = BasisSpec::default();
        for (a, g, expect) in [(-1.0, 0.0, (-1.0f64).exp()), (0.0, 0.5, 1.0), (0.0, 0.0, 1.0)] {
            let c = LinearCoefficients::constant(a, &[0.0], &[g], 0.0, &[1.0], xi("one", 1, &[1.0]));
            let lin = linear_solve(&c, &e, &LinearParams::default()).unwrap();
            let spec = c.to_generator(&e.grid).unwrap();
            let sol = backward_solve(&spec, &c.xi, &e, &basis, &params).unwrap();
            let cc = crosscheck_nonlinear(&c, &lin, &sol).unwrap();
            assert!(!cc.flagged, "{cc:?}");
            assert!((lin.y0 - expect).abs() <= cc.tolerance, "{} vs {expect}: {cc:?}", lin.y0);
        }
    }

    #[test]
    fn mismatched_outputs_are_config_errors() {
        let e = ens(8, 1.0, &[], 100, 2);
        let e2 = ens(4, 1.0, &[], 100, 2);
        let c = LinearCoefficients::constant(0.0, &[0.0], &[], 0.0, &[], xi("one", 1, &[]));
        let lin = linear_solve(&c, &e, &LinearParams::default()).unwrap();
        let sol = backward_solve(&c.to_generator(&e2.grid).unwrap(), &c.xi, &e2, &BasisSpec::default(), &PicardParams::default())
            .unwrap();
        assert!(matches!(crosscheck_nonlinear(&c, &lin, &sol), Err(Error::Config(_))));
    }

    #[test]
    fn negative_gamma_frequency_aborts() {
        let e = ens(4, 4.0, &[1.0], 2000, 9);
        let c = LinearCoefficients::constant(0.0, &[0.0], &[-1.0], 0.0, &[1.0], xi("one", 1, &[1.0]));
        assert!(matches!(linear_solve(&c, &e, &LinearParams::default()), Err(Error::Numeric(_))));
    }
}
