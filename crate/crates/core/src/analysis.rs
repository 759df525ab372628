//! Solution norms, a priori ratios, the stability gap, the bounded-data
//! estimate and the comparison harness.
//!
//! All functionals are computed pathwise (sums over steps, suprema over
//! nodes) and then averaged with the ensemble weights; standard errors are
//! zero on exact enumerations.

use rayon::prelude::*;
use serde::Serialize;

use crate::calculus::beta_of_k;
use crate::error::{Error, Result};
use crate::model::{verify_h3prime, GeneratorSpec, StateSampler, TerminalSpec};
use crate::noise::PathEnsemble;
use crate::oracle::{solve_exact, TreeModel};
use crate::solver::SolutionEnsemble;

/// Sample mean and its standard error.
#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    fn of(values: &[f64], sol: &SolutionEnsemble) -> Self {
        let mean = match &sol.weights {
            Some(w) => values.iter().zip(w).map(|(v, w)| v * w).sum(),
            None => values.iter().sum::<f64>() / values.len() as f64,
        };
        if sol.is_exact() || values.len() < 2 {
            return Self { value: mean, se: 0.0 };
        }
        let n = values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { value: mean, se: (var / n).sqrt() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NormReport {
    pub p: f64,
    /// `E sup_t |Y_t|^p`
    pub sup_y: Estimate,
    /// `E (∫|Z|²)^{p/2}`
    pub hp_z: Estimate,
    /// `E (∫‖ψ‖²)^{p/2}`
    pub lp_psi: Estimate,
    /// `E (∫∫|ψ|² dπ)^{p/2}`
    pub lp_psi_pi: Estimate,
    /// `E [M]_T^{p/2}`
    pub mp_m: Estimate,
    /// `E (|ξ|^p + (∫|f(s,0,0,0)|ds)^p)`
    pub rhs_small: Estimate,
    /// `E (|ξ|^p + ∫|f(s,0,0,0)|^p ds)`
    pub rhs_large: Estimate,
    /// Combined left-hand side used by the ratio.
    pub lhs: Estimate,
}

impl NormReport {
    /// The right-hand side matching the regime of `p`.
    pub fn rhs(&self) -> Estimate {
        if self.p < 2.0 {
            self.rhs_small
        } else {
            self.rhs_large
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn check_paths(sol: &SolutionEnsemble, e: &PathEnsemble) -> Result<()> {
    if sol.n_paths != e.n_paths || sol.grid != e.grid || sol.k != e.k || sol.n_atoms != e.n_atoms {
        return Err(Error::config("solution and path ensemble differ in shape or grid"));
    }
    Ok(())
}

/// Norms of the quadruple on the ensemble; `ξ` is read from the terminal
/// layer of `Y`.
pub fn compute_norms(sol: &SolutionEnsemble, e: &PathEnsemble, spec: &GeneratorSpec, p: f64) -> Result<NormReport> {
    if !(p > 1.0) {
        return Err(Error::domain(format!("norms need p > 1, got {p}")));
    }
    check_paths(sol, e)?;
    if spec.d != sol.d {
        return Err(Error::config(format!("model '{}' has d = {}, solution has d = {}", spec.id, spec.d, sol.d)));
    }
    let n = sol.n_steps();
    let (d, a) = (sol.d, sol.n_atoms);
    let times = sol.grid.times();
    let f0: Vec<f64> = (0..n).map(|i| norm2(&spec.at_zero(times[i])).sqrt()).collect();
    let int_f0: f64 = (0..n).map(|i| f0[i] * sol.grid.dt(i)).sum();
    let int_f0p: f64 = (0..n).map(|i| f0[i].powf(p) * sol.grid.dt(i)).sum();
    let h = p / 2.0;
    let rows: Vec<[f64; 8]> = (0..sol.n_paths)
        .into_par_iter()
        .map(|q| {
            let mut sup = 0.0f64;
            let (mut z2, mut psi2, mut jump2, mut m2) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..=n {
                sup = sup.max(norm2(sol.y_at(q, i)).sqrt());
                if i == n {
                    break;
                }
                let dt = sol.grid.dt(i);
                z2 += norm2(sol.z_at(q, i)) * dt;
                let psi = sol.psi_at(q, i);
                let counts = e.counts_at(q, i);
                for r in 0..d {
                    for j in 0..a {
                        let v = psi[r * a + j] * psi[r * a + j];
                        psi2 += v * sol.intensities[j] * dt;
                        jump2 += v * counts[j] as f64;
                    }
                }
                m2 += norm2(&sol.dm_at(q, i));
            }
            let xi = norm2(sol.y_at(q, n)).sqrt().powf(p);
            let lhs_parts = [sup.powf(p), z2.powf(h), psi2.powf(h), jump2.powf(h), m2.powf(h)];
            let lhs = lhs_parts[0] + lhs_parts[1] + lhs_parts[2] + if p < 2.0 { lhs_parts[3] } else { 0.0 } + lhs_parts[4];
            [lhs_parts[0], lhs_parts[1], lhs_parts[2], lhs_parts[3], lhs_parts[4], xi + int_f0.powf(p), xi + int_f0p, lhs]
        })
        .collect();
    let col = |c: usize| Estimate::of(&rows.iter().map(|r| r[c]).collect::<Vec<_>>(), sol);
    Ok(NormReport {
        p,
        sup_y: col(0),
        hp_z: col(1),
        lp_psi: col(2),
        lp_psi_pi: col(3),
        mp_m: col(4),
        rhs_small: col(5),
        rhs_large: col(6),
        lhs: col(7),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AprioriRatio {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// Set when the right-hand side vanishes but the left-hand side does not.
    pub violation: bool,
}

/// `(sup_Y + hp_Z + lp_ψ + lp_ψπ·1{p<2} + mp_M) / rhs`, with `0/0 = 0`.
pub fn apriori_ratio(report: &NormReport) -> AprioriRatio {
    let lhs = report.lhs.value;
    let rhs = report.rhs().value;
    let tiny = 1e-300;
    let (ratio, violation) = if rhs > tiny {
        (lhs / rhs, false)
    } else if lhs <= tiny {
        (0.0, false)
    } else {
        (f64::INFINITY, true)
    };
    AprioriRatio { lhs, rhs, ratio, violation }
}

#[derive(Clone, Debug, Serialize)]
pub struct FittedConstant {
    pub c: f64,
    /// Index of the battery entry attaining the maximum.
    pub argmax: Option<usize>,
    pub violations: usize,
}

/// Empirical constant: the largest ratio over a battery.
pub fn fit_constant(ratios: &[AprioriRatio]) -> FittedConstant {
    let mut c = 0.0;
    let mut argmax = None;
    for (i, r) in ratios.iter().enumerate() {
        if !r.violation && r.ratio > c {
            c = r.ratio;
            argmax = Some(i);
        }
    }
    FittedConstant { c, argmax, violations: ratios.iter().filter(|r| r.violation).count() }
}

#[derive(Clone, Debug, Serialize)]
pub struct LinfReport {
    pub kappa: f64,
    pub beta: f64,
    pub nodes: usize,
    /// Smallest `bound − |Y_t|²` over all nodes.
    pub min_margin: f64,
    pub violations: usize,
    pub witness: Option<(usize, usize)>,
}

/// Pathwise check of `|Y_t|² ≤ κ² e^{β(T−t)} (1 + 1/(2β))` with
/// `κ = sup|ξ| + sup_t|f(t,0,0,0)|` read from the data and
/// `β = 2(1 + 2K²) + 2α⁺`, which is the usual `β` when `α ≤ 0`.
pub fn linf_bound_check(sol: &SolutionEnsemble, spec: &GeneratorSpec, slack: f64) -> Result<LinfReport> {
    if spec.d != sol.d {
        return Err(Error::config(format!("model '{}' has d = {}, solution has d = {}", spec.id, spec.d, sol.d)));
    }
    let n = sol.n_steps();
    let times = sol.grid.times();
    let horizon = sol.grid.horizon();
    let xi_sup = (0..sol.n_paths).map(|q| norm2(sol.y_at(q, n)).sqrt()).fold(0.0, f64::max);
    let f0_sup = times.iter().map(|&t| norm2(&spec.at_zero(t)).sqrt()).fold(0.0, f64::max);
    let kappa = xi_sup + f0_sup;
    let beta = beta_of_k(spec.lip_k) + 2.0 * spec.alpha.max(0.0);
    let mut min_margin = f64::INFINITY;
    let mut violations = 0;
    let mut witness = None;
    for q in 0..sol.n_paths {
        for i in 0..=n {
            let bound = kappa * kappa * (beta * (horizon - times[i])).exp() * (1.0 + 0.5 / beta);
            let margin = bound - norm2(sol.y_at(q, i));
            if margin < min_margin {
                min_margin = margin;
                if margin < -slack {
                    witness = Some((q, i));
                }
            }
            if margin < -slack {
                violations += 1;
            }
        }
    }
    Ok(LinfReport { kappa, beta, nodes: sol.n_paths * (n + 1), min_margin, violations, witness })
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityGap {
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// `lhs / rhs`, zero when both vanish.
    pub ratio: f64,
}

/// Squared-difference norms of `(Ŷ, Ẑ, ψ̂, M̂)` against
/// `E(|ξ̂|² + ∫|f̂(t, Y′, Z′, ψ′)|² dt)` with `f̂ = f − f′` evaluated along
/// the second solution.
pub fn stability_gap(
    sol: &SolutionEnsemble,
    sol_prime: &SolutionEnsemble,
    spec: &GeneratorSpec,
    spec_prime: &GeneratorSpec,
) -> Result<StabilityGap> {
    sol.check_compatible(sol_prime)?;
    if spec.d != sol.d || spec_prime.d != sol.d {
        return Err(Error::config("stability gap: model dimensions differ from the solutions"));
    }
    let n = sol.n_steps();
    let (d, a) = (sol.d, sol.n_atoms);
    let times = sol.grid.times();
    let diff2 = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let rows: Vec<[f64; 2]> = (0..sol.n_paths)
        .into_par_iter()
        .map(|q| {
            let mut sup = 0.0f64;
            let mut rest = 0.0;
            let mut f2 = 0.0;
            for i in 0..=n {
                sup = sup.max(diff2(sol.y_at(q, i), sol_prime.y_at(q, i)));
                if i == n {
                    break;
                }
                let dt = sol.grid.dt(i);
                rest += diff2(sol.z_at(q, i), sol_prime.z_at(q, i)) * dt;
                let (p1, p2) = (sol.psi_at(q, i), sol_prime.psi_at(q, i));
                for r in 0..d {
                    for j in 0..a {
                        rest += (p1[r * a + j] - p2[r * a + j]).powi(2) * sol.intensities[j] * dt;
                    }
                }
                rest += diff2(&sol.dm_at(q, i), &sol_prime.dm_at(q, i));
                let (y, z, psi) = (sol_prime.y_at(q, i), sol_prime.z_at(q, i), sol_prime.psi_at(q, i));
                let fa = spec.eval_vec(times[i], y, z, psi);
                let fb = spec_prime.eval_vec(times[i], y, z, psi);
                f2 += diff2(&fa, &fb) * dt;
            }
            [sup + rest, diff2(sol.y_at(q, n), sol_prime.y_at(q, n)) + f2]
        })
        .collect();
    let lhs = Estimate::of(&rows.iter().map(|r| r[0]).collect::<Vec<_>>(), sol);
    let rhs = Estimate::of(&rows.iter().map(|r| r[1]).collect::<Vec<_>>(), sol);
    let ratio = if rhs.value > 0.0 {
        lhs.value / rhs.value
    } else if lhs.value == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(StabilityGap { lhs, rhs, ratio })
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonWitness {
    pub path: usize,
    pub step: usize,
    pub t: f64,
    pub y1: f64,
    pub y2: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub spec1: String,
    pub spec2: String,
    pub xi1: String,
    pub xi2: String,
    /// Path/node pairs with `Y¹ > Y² + tol`.
    pub count: usize,
    pub checked: usize,
    /// Largest `Y¹ − Y² − tol` (negative when no violation).
    pub worst_margin: f64,
    pub witness: Option<ComparisonWitness>,
    /// Discretization part of the tolerance (zero on exact trees).
    pub budget: f64,
    pub se_factor: f64,
    pub xi_order_ok: bool,
    pub driver_order_ok: bool,
    pub h3prime_pass: bool,
    pub h3prime_kappa_min: Option<f64>,
    pub hypotheses_hold: bool,
}

/// Samples used for the (H3′) check inside [`compare`].
pub const H3PRIME_SAMPLES: usize = 20_000;
const ORDER_SLACK: f64 = 1e-12;

/// Counts nodes where `Y¹` exceeds `Y²` by more than
/// `3·sqrt(se₁² + se₂²) + 2Δt_max(K₂ + |α₂|)·sup|ξ² − ξ¹|` (per-node standard
/// errors; on exact trees only a `1e−12` rounding floor remains).
pub fn compare(
    sol1: &SolutionEnsemble,
    sol2: &SolutionEnsemble,
    spec1: &GeneratorSpec,
    spec2: &GeneratorSpec,
) -> Result<ComparisonReport> {
    if sol1.d != 1 || sol2.d != 1 || spec1.d != 1 || spec2.d != 1 {
        return Err(Error::domain("comparison is defined in dimension d = 1 only"));
    }
    if spec2.comparison.is_none() {
        return Err(Error::config(format!(
            "model '{}': the comparison principle requires an extra condition (H3′) on the jump part; no κ/θ data",
            spec2.id
        )));
    }
    sol1.check_compatible(sol2)?;
    let h3 = verify_h3prime(spec2, &StateSampler::default(), H3PRIME_SAMPLES)?;
    let n = sol1.n_steps();
    let times = sol1.grid.times();
    let exact = sol1.is_exact() && sol2.is_exact();

    let mut xi_gap = 0.0f64;
    let mut xi_order_ok = true;
    let mut driver_order_ok = true;
    for q in 0..sol1.n_paths {
        let (x1, x2) = (sol1.y_at(q, n)[0], sol2.y_at(q, n)[0]);
        xi_gap = xi_gap.max((x2 - x1).abs());
        if x1 > x2 + ORDER_SLACK * x1.abs().max(1.0) {
            xi_order_ok = false;
        }
        for i in 0..n {
            let (y, z, psi) = (sol1.y_at(q, i), sol1.z_at(q, i), sol1.psi_at(q, i));
            let f1 = spec1.eval_vec(times[i], y, z, psi)[0];
            let f2 = spec2.eval_vec(times[i], y, z, psi)[0];
            if f1 > f2 + ORDER_SLACK * f1.abs().max(1.0) {
                driver_order_ok = false;
            }
        }
    }
    let budget = if exact { 0.0 } else { 2.0 * sol1.grid.max_step() * (spec2.lip_k + spec2.alpha.abs()) * xi_gap };
    let se_factor = 3.0;
    let mut count = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut witness = None;
    for q in 0..sol1.n_paths {
        for i in 0..=n {
            let (y1, y2) = (sol1.y_at(q, i)[0], sol2.y_at(q, i)[0]);
            let se = if exact { 0.0 } else { (sol1.node_se[i].powi(2) + sol2.node_se[i].powi(2)).sqrt() };
            let tol = se_factor * se + budget + ORDER_SLACK * y1.abs().max(y2.abs()).max(1.0);
            let margin = y1 - y2 - tol;
            if margin > 0.0 {
                count += 1;
            }
            if margin > worst {
                worst = margin;
                if margin > 0.0 {
                    witness = Some(ComparisonWitness { path: q, step: i, t: times[i], y1, y2 });
                }
            }
        }
    }
    Ok(ComparisonReport {
        spec1: spec1.id.clone(),
        spec2: spec2.id.clone(),
        xi1: sol1.provenance.xi_id.clone(),
        xi2: sol2.provenance.xi_id.clone(),
        count,
        checked: sol1.n_paths * (n + 1),
        worst_margin: worst,
        witness,
        budget,
        se_factor,
        xi_order_ok,
        driver_order_ok,
        h3prime_pass: h3.pass,
        h3prime_kappa_min: h3.kappa_min,
        hypotheses_hold: h3.pass && xi_order_ok && driver_order_ok,
    })
}

/// Solves both problems exactly on the tree and compares them.
pub fn compare_on_tree(
    tree: &TreeModel,
    spec1: &GeneratorSpec,
    xi1: &TerminalSpec,
    spec2: &GeneratorSpec,
    xi2: &TerminalSpec,
) -> Result<ComparisonReport> {
    let (_, s1) = solve_exact(tree, spec1, xi1)?.to_ensembles()?;
    let (_, s2) = solve_exact(tree, spec2, xi2)?.to_ensembles()?;
    compare(&s1, &s2, spec1, spec2)
}

/// Exhaustive search over ordered terminal pairs `ξ¹ ≤ ξ²` for a
/// comparison failure on the tree; returns the reports of all pairs.
pub fn search_violation(
    tree: &TreeModel,
    spec1: &GeneratorSpec,
    spec2: &GeneratorSpec,
    pairs: &[(TerminalSpec, TerminalSpec)],
) -> Result<Vec<ComparisonReport>> {
    pairs.iter().map(|(a, b)| compare_on_tree(tree, spec1, a, spec2, b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generator_by_id, terminal_by_id, ModelContext, TerminalMode};
    use crate::oracle::TreeModel;
    use crate::solver::BasisSpec;
    use std::sync::Arc;

    fn tree_sol(tree: &TreeModel, spec: &GeneratorSpec, xi: &TerminalSpec) -> (PathEnsemble, SolutionEnsemble) {
        solve_exact(tree, spec, xi).unwrap().to_ensembles().unwrap()
    }

    #[test]
    fn constant_solution_norms() {
        let tree = TreeModel::uniform(3, 0.1, 1, &[1.0]).unwrap();
        let ctx = ModelContext::new(1, 1, vec![1.0]);
        let spec = generator_by_id("zero", &ctx).unwrap();
        let xi = terminal_by_id("const:-2", &ctx).unwrap();
        let (e, sol) = tree_sol(&tree, &spec, &xi);
        for p in [1.5, 2.0, 3.0] {
            let r = compute_norms(&sol, &e, &spec, p).unwrap();
            let c = 2f64.powf(p);
            assert!((r.sup_y.value - c).abs() < 1e-12);
            assert!((r.rhs().value - c).abs() < 1e-12);
            for v in [r.hp_z, r.lp_psi, r.lp_psi_pi, r.mp_m] {
                assert!(v.value.abs() < 1e-12);
            }
        }
        assert!(matches!(compute_norms(&sol, &e, &spec, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn aux_terminal_has_unit_bracket() {
        let tree = TreeModel::uniform(2, 0.1, 1, &[1.0]).unwrap();
        let ctx = ModelContext::new(1, 1, vec![1.0]);
        let spec = generator_by_id("zero", &ctx).unwrap();
        let xi = terminal_by_id("aux1", &ctx).unwrap();
        let (e, sol) = tree_sol(&tree, &spec, &xi);
        let r = compute_norms(&sol, &e, &spec, 2.0).unwrap();
        assert!((r.mp_m.value - 1.0).abs() < 1e-12);
        assert!(r.hp_z.value.abs() < 1e-12 && r.lp_psi.value.abs() < 1e-12);
    }

    #[test]
    fn norms_match_tree_norms() {
        let tree = TreeModel::uniform(3, 0.1, 1, &[1.5]).unwrap();
        let ctx = ModelContext::new(1, 1, vec![1.5]);
        let spec = generator_by_id("linear:0.5,0.3,0.2,1", &ctx).unwrap();
        let xi = terminal_by_id("mixed", &ctx).unwrap();
        let ts = solve_exact(&tree, &spec, &xi).unwrap();
        let (e, sol) = ts.to_ensembles().unwrap();
        for p in [1.5, 2.0, 4.0] {
            let a = compute_norms(&sol, &e, &spec, p).unwrap();
            let b = crate::oracle::pathwise_norms(&ts, p).unwrap();
            for (x, y) in [
                (a.sup_y.value, b.sup_y),
                (a.hp_z.value, b.hp_z),
                (a.lp_psi.value, b.lp_psi),
                (a.lp_psi_pi.value, b.lp_psi_pi),
                (a.mp_m.value, b.mp_m),
            ] {
                assert!((x - y).abs() < 1e-12 * y.max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_data_ratio_is_zero() {
        let tree = TreeModel::uniform(2, 0.1, 1, &[1.0]).unwrap();
        let ctx = ModelContext::new(1, 1, vec![1.0]);
        let spec = generator_by_id("zero", &ctx).unwrap();
        let xi = terminal_by_id("zero", &ctx).unwrap();
        let (e, sol) = tree_sol(&tree, &spec, &xi);
        let r = apriori_ratio(&compute_norms(&sol, &e, &spec, 2.0).unwrap());
        assert_eq!(r.ratio, 0.0);
        assert!(!r.violation);
        let fit = fit_constant(&[r]);
        assert_eq!(fit.c, 0.0);
    }

    #[test]
    fn ratio_is_invariant_under_data_scaling() {
        let tree = TreeModel::uniform(3, 0.1, 1, &[2.0]).unwrap();
        let ctx = ModelContext::new(1, 1, vec![2.0]);
        let xi = terminal_by_id("mixed", &ctx).unwrap();
        for p in [1.5, 2.0, 3.0] {
            let base = generator_by_id("linear:-0.5,0.3,0.2,1", &ctx).unwrap();
            let scaled = generator_by_id("linear:-0.5,0.3,0.2,2", &ctx).unwrap();
            let (e, s1) = tree_sol(&tree, &base, &xi);
            let (_, s2) = tree_sol(&tree, &scaled, &xi.scaled(2.0));
            let r1 = apriori_ratio(&compute_norms(&s1, &e, &base, p).unwrap());
            let r2 = apriori_ratio(&compute_norms(&s2, &e, &scaled, p).unwrap());
            assert!((r1.ratio - r2.ratio).abs() < 1e-10 * r1.ratio, "{} vs {}", r1.ratio, r2.ratio);
            assert!((r2.lhs / r1.lhs - 2f64.powf(p)).abs() < 1e-9);
        }
    }

    #[test]
    fn sup_norm_grows_with_horizon() {
        // Driver switched off after t = 0.3; ξ is known after the first step.
        let gate = 0.3 - 1e-9;
        let spec = GeneratorSpec::new(
            "gated",
            1,
            1,
            vec![1.0],
            0.0,
            1.0,
            Arc::new(move |x: &crate::model::DriverArgs, o: &mut [f64]| {
                o[0] = if x.t < gate { 0.5 - x.y[0] + 0.5 * x.z[0] } else { 0.0 };
            }),
        )
        .unwrap();
        let xi = TerminalSpec::new("aux0", TerminalMode::Aux, 1, Arc::new(|x: &crate::model::PathInfo, o: &mut [f64]| {
            o[0] = 2.0 * x.aux[0]
        }));
        let mut last = 0.0;
        for n in 3..=5 {
            let tree = TreeModel::uniform(n, 0.1, 1, &[1.0]).unwrap();
            let (e, sol) = tree_sol(&tree, &spec, &xi);
            let r = compute_norms(&sol, &e, &spec, 2.0).unwrap();
            assert!(r.sup_y.value >= last - 1e-12);
            last = r.sup_y.value;
        }
    }

    #[test]
    fn linf_bound_holds_on_tree() {
        let ctx = ModelContext::new(1, 1, vec![1.0]);
        let tree = TreeModel::uniform(5, 0.1, 1, &[1.0]).unwrap();
        for (m, x) in [("zero", "one"), ("sin:0.3", "aux1"), ("linear:0,0.4,-0.3,0.5", "jump1"), ("ohlm1", "const:-1")] {
            let spec = generator_by_id(m, &ctx).unwrap();
            let xi = terminal_by_id(x, &ctx).unwrap();
            let (_, sol) = tree_sol(&tree, &spec, &xi);
            let r = linf_bound_check(&sol, &spec, 1e-10).unwrap();
            assert_eq!(r.violations, 0, "{m}/{x}: {r:?}");
        }
    }

    #[test]
    fn stability_gap_shift_and_ladder() {
        let ctx = ModelContext::new(1, 1, vec![1.0]);
        let tree = TreeModel::uniform(3, 0.1, 1, &[1.0]).unwrap();
        let spec = generator_by_id("zero", &ctx).unwrap();
        let xi = terminal_by_id("mixed", &ctx).unwrap();
        let (_, s0) = tree_sol(&tree, &spec, &xi);
        let same = stability_gap(&s0, &s0, &spec, &spec).unwrap();
        assert_eq!((same.lhs.value, same.ratio), (0.0, 0.0));
        let mut ratios = Vec::new();
        for delta in [0.1, 0.2, 0.4] {
            let (_, s1) = tree_sol(&tree, &spec, &xi.shifted(delta));
            let g = stability_gap(&s1, &s0, &spec, &spec).unwrap();
            assert!((g.lhs.value - delta * delta).abs() < 1e-12);
            ratios.push(g.ratio);
        }
        assert!(ratios.iter().all(|r| (r - 1.0).abs() < 1e-9));

        let lin = generator_by_id("linear:-0.5,0.3,0.2,1", &ctx).unwrap();
        let (_, base) = tree_sol(&tree, &lin, &xi);
        let mut lhs = Vec::new();
        for delta in [0.1f64, 0.2, 0.4] {
            let pert = generator_by_id(&format!("linear:-0.5,0.3,0.2,{}", 1.0 + delta), &ctx).unwrap();
            let (_, s) = tree_sol(&tree, &pert, &xi);
            lhs.push(stability_gap(&s, &base, &pert, &lin).unwrap().lhs.value);
        }
        assert!(lhs[0] < lhs[1] && lhs[1] < lhs[2]);
        let slope = (lhs[2] / lhs[0]).ln() / 4f64.ln();
        assert!((slope - 2.0).abs() < 1e-9, "slope {slope}");
    }

    #[test]
    fn comparison_on_compliant_pair() {
        let ctx = ModelContext::new(1, 1, vec![1.0]);
        let tree = TreeModel::uniform(4, 0.1, 1, &[1.0]).unwrap();
        let spec = generator_by_id("sin:0.3", &ctx).unwrap();
        let lo = terminal_by_id("min-w0", &ctx).unwrap();
        let hi = terminal_by_id("zero", &ctx).unwrap();
        let r = compare_on_tree(&tree, &spec, &lo, &spec, &hi).unwrap();
        assert!(r.hypotheses_hold, "{r:?}");
        assert_eq!(r.count, 0);
        let same = compare_on_tree(&tree, &spec, &lo, &spec, &lo).unwrap();
        assert_eq!(same.count, 0);
    }

    #[test]
    fn kappa_below_minus_one_breaks_comparison() {
        let ctx = ModelContext::new(1, 1, vec![1.0]);
        let tree = TreeModel::uniform(3, 0.1, 1, &[1.0]).unwrap();
        let spec = generator_by_id("kappa-neg2", &ctx).unwrap();
        let lo = terminal_by_id("zero", &ctx).unwrap();
        let hi = terminal_by_id("jump1", &ctx).unwrap();
        let r = search_violation(&tree, &spec, &spec, &[(lo, hi)]).unwrap();
        assert!(!r[0].h3prime_pass);
        assert!(r[0].xi_order_ok && r[0].driver_order_ok);
        assert!(r[0].count > 0);
        let w = r[0].witness.as_ref().unwrap();
        assert!(w.y1 > w.y2);
    }

    #[test]
    fn compare_rejects_bad_inputs() {
        let ctx = ModelContext::new(1, 1, vec![1.0]);
        let tree = TreeModel::uniform(2, 0.1, 1, &[1.0]).unwrap();
        let spec = generator_by_id("zero", &ctx).unwrap();
        let xi = terminal_by_id("one", &ctx).unwrap();
        let (_, s) = tree_sol(&tree, &spec, &xi);
        let mut bare = spec.clone();
        bare.comparison = None;
        match compare(&s, &s, &spec, &bare) {
            Err(Error::Config(m)) => assert!(m.contains("the comparison principle requires an extra condition")),
            other => panic!("{other:?}"),
        }
        let ctx2 = ModelContext::new(2, 1, vec![1.0]);
        let spec2 = generator_by_id("zero", &ctx2).unwrap();
        let xi2 = terminal_by_id("one", &ctx2).unwrap();
        let (_, s2) = tree_sol(&tree, &spec2, &xi2);
        assert!(matches!(compare(&s2, &s2, &spec2, &spec2), Err(Error::Domain(_))));
    }

    #[test]
    fn mc_comparison_has_no_false_violations() {
        let lam = [1.0];
        let e = crate::noise::simulate(&crate::noise::TimeGrid::uniform(8, 1.0).unwrap(), 1, &crate::noise::JumpActivity::from_intensities(&lam).unwrap(), 4000, 11).unwrap();
        let ctx = ModelContext::new(1, 1, lam.to_vec());
        let spec = generator_by_id("linear:-0.5,0.3,0.2", &ctx).unwrap();
        let lo = terminal_by_id("min-w0", &ctx).unwrap();
        let hi = terminal_by_id("zero", &ctx).unwrap();
        let basis = BasisSpec::default();
        let params = crate::solver::PicardParams::default();
        let s1 = crate::solver::backward_solve(&spec, &lo, &e, &basis, &params).unwrap();
        let s2 = crate::solver::backward_solve(&spec, &hi, &e, &basis, &params).unwrap();
        let r = compare(&s1, &s2, &spec, &spec).unwrap();
        assert_eq!(r.count, 0, "{r:?}");
    }
}
