//! Random terminal time: the sequence `Y^n` solved on `[0, n]` with
//! terminal value `E(ξ | F_n)`, driver switched off after `τ`, and
//! `Y^n_t = E(ξ | F_t)` beyond `n`.

use rayon::prelude::*;
use serde::Serialize;

use super::regression::{self, BasisSpec, Features};
use super::{sweep, Guess, SolutionEnsemble, Sweep};
use crate::error::{Error, Result};
use crate::model::{GeneratorSpec, PathInfo, TerminalSpec};
use crate::noise::{PathEnsemble, StateCube};
use crate::step::StepParams;

/// Pathwise stopping rules evaluable on stored aggregates. Jump-based
/// times sit at the right end of the first step that contains a jump.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum StoppingRule {
    Deterministic { at: f64 },
    /// `atom` is zero-based.
    FirstJump { atom: usize, cap: f64 },
    FirstExit { coord: usize, lo: f64, hi: f64, cap: f64 },
}

impl StoppingRule {
    pub fn cap(&self) -> f64 {
        match *self {
            StoppingRule::Deterministic { at } => at,
            StoppingRule::FirstJump { cap, .. } | StoppingRule::FirstExit { cap, .. } => cap,
        }
    }

    /// Parses `deterministic:T`, `first-jump:ATOM,CAP` (1-based atom) or
    /// `first-exit:COORD,LO,HI,CAP` (1-based coordinate).
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("tau: cannot parse '{s}'"));
        let (head, rest) = s.split_once(':').ok_or_else(bad)?;
        let v: Vec<f64> = rest
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let index = |x: f64| -> Result<usize> {
            if x >= 1.0 && x.fract() == 0.0 {
                Ok(x as usize - 1)
            } else {
                Err(bad())
            }
        };
        match (head, v.len()) {
            ("deterministic", 1) => Ok(StoppingRule::Deterministic { at: v[0] }),
            ("first-jump", 2) => Ok(StoppingRule::FirstJump { atom: index(v[0])?, cap: v[1] }),
            ("first-exit", 4) if v[1] < 0.0 && v[2] > 0.0 => {
                Ok(StoppingRule::FirstExit { coord: index(v[0])?, lo: v[1], hi: v[2], cap: v[3] })
            }
            _ => Err(bad()),
        }
    }

    /// Node index of `τ` on every path.
    pub fn stop_indices(&self, e: &PathEnsemble, cube: &StateCube) -> Result<Vec<usize>> {
        let cap_idx = node_index(e, self.cap(), "tau cap")?;
        match *self {
            StoppingRule::Deterministic { .. } => Ok(vec![cap_idx; e.n_paths]),
            StoppingRule::FirstJump { atom, .. } => {
                if atom >= e.n_atoms {
                    return Err(Error::config(format!("tau: atom {} does not exist ({} atoms)", atom + 1, e.n_atoms)));
                }
                Ok((0..e.n_paths)
                    .map(|p| (0..cap_idx).find(|&i| e.counts_at(p, i)[atom] > 0).map_or(cap_idx, |i| i + 1))
                    .collect())
            }
            StoppingRule::FirstExit { coord, lo, hi, .. } => {
                if coord >= e.k {
                    return Err(Error::config(format!("tau: Brownian coordinate {} does not exist", coord + 1)));
                }
                Ok((0..e.n_paths)
                    .map(|p| {
                        (0..cap_idx)
                            .find(|&i| {
                                let w = cube.w_at(p, i)[coord];
                                w <= lo || w >= hi
                            })
                            .unwrap_or(cap_idx)
                    })
                    .collect())
            }
        }
    }
}

fn node_index(e: &PathEnsemble, t: f64, what: &str) -> Result<usize> {
    let times = e.grid.times();
    let scale = e.grid.horizon().max(1.0);
    times
        .iter()
        .position(|&s| (s - t).abs() <= 1e-9 * scale)
        .ok_or_else(|| Error::config(format!("{what}: time {t} is not a node of the grid (horizon {})", e.grid.horizon())))
}

#[derive(Clone, Debug, Serialize)]
pub struct HorizonParams {
    pub rho: f64,
    pub p: f64,
    pub n_max: usize,
    /// Spacing of the truncation levels: level `n` solves on `[0, n·unit]`.
    pub unit: f64,
    pub basis: BasisSpec,
    #[serde(skip)]
    pub step: StepParams,
    /// Keep every `Y^n` ensemble in the report (otherwise only the last).
    pub keep_all: bool,
}

impl Default for HorizonParams {
    fn default() -> Self {
        Self {
            rho: 0.0,
            p: 2.0,
            n_max: 4,
            unit: 1.0,
            basis: BasisSpec::partition(32).with_features(false, true, None),
            step: StepParams::default(),
            keep_all: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HorizonLevel {
    pub n: usize,
    pub horizon: f64,
    pub y0: f64,
    pub y0_se: f64,
    /// `E sup_t e^{pρ(t∧τ)} |Y^n_t − Y^{n−1}_t|^p`.
    pub distance: f64,
    pub distance_se: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HorizonReport {
    pub rho: f64,
    pub nu: f64,
    pub p: f64,
    pub rule: StoppingRule,
    pub tau_mean: f64,
    pub levels: Vec<HorizonLevel>,
    /// Distances strictly decrease over the levels.
    pub monotone: bool,
    pub y0: f64,
    pub y0_se: f64,
    #[serde(skip)]
    pub solutions: Vec<SolutionEnsemble>,
}

impl HorizonParams {
    /// Checks `p > 1`, the weight condition `ρ > ν` and the level layout;
    /// returns `ν`.
    pub fn validate(&self, spec: &GeneratorSpec) -> Result<f64> {
        if !(self.p > 1.0) {
            return Err(Error::domain(format!("p: the random-horizon weights need p > 1, got {}", self.p)));
        }
        let nu = nu(spec.alpha, spec.lip_k, self.p);
        if !(self.rho > nu) {
            return Err(Error::config(format!(
                "rho = {} violates (H5′): need ρ > ν = α + K²/((p−1)∧1) = {nu} (α = {}, K = {}, p = {})",
                self.rho, spec.alpha, spec.lip_k, self.p
            )));
        }
        if self.n_max == 0 || !(self.unit > 0.0) {
            return Err(Error::config("n_max must be ≥ 1 and unit > 0"));
        }
        Ok(nu)
    }
}

/// `ν = α + K²/((p − 1) ∧ 1)`.
pub fn nu(alpha: f64, lip_k: f64, p: f64) -> f64 {
    alpha + lip_k * lip_k / (p - 1.0).min(1.0)
}

pub fn random_horizon_solve(
    spec: &GeneratorSpec,
    xi: &TerminalSpec,
    rule: StoppingRule,
    ensemble: &PathEnsemble,
    params: &HorizonParams,
) -> Result<HorizonReport> {
    let nu = params.validate(spec)?;
    if spec.d != xi.d {
        return Err(Error::config(format!("terminal '{}' has d = {} but model has d = {}", xi.id, xi.d, spec.d)));
    }
    let e = ensemble;
    let cap = rule.cap();
    if cap > e.grid.horizon() + 1e-12 {
        return Err(Error::config(format!(
            "tau cap {cap} exceeds the ensemble horizon {}",
            e.grid.horizon()
        )));
    }
    let cube = StateCube::new(e);
    let stop = rule.stop_indices(e, &cube)?;
    let d = spec.d;
    let np = e.n_paths;
    let n_tot = e.n_steps();
    let times = e.grid.times();
    let cap_idx = node_index(e, cap, "tau cap")?;
    let weights = regression::path_weights(e);
    let use_aux = params.basis.features.aux.unwrap_or_else(|| xi.uses_aux());

    // ξ on the stopped path.
    let mut xi_tau = vec![0.0; np * d];
    xi_tau.par_chunks_mut(d).enumerate().try_for_each(|(p, o)| {
        let s = stop[p];
        let info = PathInfo {
            t: times[s],
            step: s,
            w: cube.w_at(p, s),
            counts: cube.counts_at(p, s),
            aux_sum: cube.aux_sum_at(p, s),
            aux: &e.aux[p * n_tot..p * n_tot + s],
        };
        (xi.eval)(&info, o);
        if o.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Model(format!("terminal '{}' is not finite on path {p} at τ", xi.id)))
        }
    })?;

    // ξ_t = E(ξ | F_t) on nodes 0..=cap_idx, exact once stopped.
    let mut xi_t = vec![0.0; np * (cap_idx + 1) * d];
    for i in 0..=cap_idx {
        let flag = |p: usize| if i >= stop[p] { 1.0 } else { 0.0 };
        let feats = Features::at_node(&cube, i, &params.basis.features, use_aux, Some(&flag));
        let fit = regression::regress(params.basis.family, &feats, &xi_tau, d, &weights)?;
        for p in 0..np {
            let src = if i >= stop[p] { &xi_tau[p * d..(p + 1) * d] } else { &fit.values[p * d..(p + 1) * d] };
            xi_t[(p * (cap_idx + 1) + i) * d..(p * (cap_idx + 1) + i + 1) * d].copy_from_slice(src);
        }
    }

    let mut prev: Vec<f64> = xi_t.clone();
    let mut levels = Vec::new();
    let mut solutions = Vec::new();
    let tau_mean = (0..np).map(|p| weights[p] * times[stop[p]]).sum::<f64>() / weights.iter().sum::<f64>();
    for n in 1..=params.n_max {
        let t_n = (n as f64 * params.unit).min(cap);
        let n_idx = node_index(e, t_n, "horizon level")?;
        let terminal: Vec<f64> = (0..np)
            .flat_map(|p| xi_t[(p * (cap_idx + 1) + n_idx) * d..(p * (cap_idx + 1) + n_idx + 1) * d].to_vec())
            .collect();
        let mut sol = sweep(Sweep {
            spec,
            ensemble: e,
            cube: &cube,
            basis: &params.basis,
            use_aux,
            terminal,
            n_end: n_idx,
            frozen: None,
            stop: Some(&stop),
            step: params.step,
            guess: Guess::ConditionalMean,
        })?;
        sol.provenance.xi_id = xi.id.clone();

        let mut cur = xi_t.clone();
        for p in 0..np {
            for i in 0..=n_idx {
                cur[(p * (cap_idx + 1) + i) * d..(p * (cap_idx + 1) + i + 1) * d].copy_from_slice(sol.y_at(p, i));
            }
        }
        let dist: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|p| {
                let tau = times[stop[p]];
                let mut sup = 0.0f64;
                for i in 0..=cap_idx {
                    let base = (p * (cap_idx + 1) + i) * d;
                    let diff: f64 = (0..d).map(|r| (cur[base + r] - prev[base + r]).powi(2)).sum::<f64>().sqrt();
                    let w = (params.p * params.rho * times[i].min(tau)).exp();
                    sup = sup.max(w * diff.powf(params.p));
                }
                sup
            })
            .collect();
        let wsum: f64 = weights.iter().sum();
        let mean = (0..np).map(|p| weights[p] * dist[p]).sum::<f64>() / wsum;
        let se = if e.is_exact() || np < 2 {
            0.0
        } else {
            let var = dist.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (np as f64 - 1.0);
            (var / np as f64).sqrt()
        };
        levels.push(HorizonLevel {
            n,
            horizon: t_n,
            y0: sol.y0()[0],
            y0_se: sol.y0_se,
            distance: mean,
            distance_se: se,
        });
        prev = cur;
        if params.keep_all || n == params.n_max {
            solutions.push(sol);
        }
    }
    let monotone = levels.windows(2).all(|w| w[1].distance < w[0].distance);
    let last = levels.last().unwrap();
    Ok(HorizonReport {
        rho: params.rho,
        nu,
        p: params.p,
        rule,
        tau_mean,
        y0: last.y0,
        y0_se: last.y0_se,
        levels,
        monotone,
        solutions,
    })
}
