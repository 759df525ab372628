//! Least-squares Monte Carlo backward solver.
//!
//! At each step `i` (from the last to the first) `Y_{i+1}` is regressed on
//! the basis at node `i` to give `E_i[Y_{i+1}]`; the centered increment
//! `δ = Y_{i+1} − E_i[Y_{i+1}]` is then projected through the targets
//!
//! ```text
//! δ ΔW_i / Δt_i,   δ Δπ̃_{i,j} / v_{i,j}
//! ```
//!
//! where `v_{i,j}` is the variance of the compensated increment under the
//! ensemble's noise law (`λ_jΔt` for Poisson counts, `q_j(1 − q_j)` with
//! `q_j = λ_jΔt` for two-point indicators). The fits give `Z_i` and `ψ_i`;
//! `Y_i` solves `Y_i = E_i[Y_{i+1}] + f(t_i, Y_i, Z_i, ψ_i) Δt_i` by damped
//! fixed point and `ΔM_i = δ − Z_i ΔW_i − Σ_j ψ_{i,j} Δπ̃_{i,j}` absorbs the
//! regression residual, so the discrete equation holds exactly.

pub mod horizon;
pub mod regression;

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DriverArgs, GeneratorSpec, TerminalSpec};
use crate::noise::{PathEnsemble, StateCube, TimeGrid, ENSEMBLE_FORMAT_VERSION, ENSEMBLE_MAGIC};
use crate::step::{solve_implicit, StepParams};

pub use horizon::{random_horizon_solve, HorizonParams, HorizonReport, StoppingRule};
pub use regression::{BasisFamily, BasisSpec, FeatureSet};

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub spec_id: String,
    pub xi_id: String,
    pub basis_id: String,
    pub seed: u64,
    pub n_paths: usize,
    pub outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub scheme: String,
}

/// The quadruple `(Y, Z, ψ, M)` on every path and grid node.
///
/// Layouts: `y`, `m` are `[p][i in 0..=n][d]`; `z` is `[p][i in 0..n][d·k]`;
/// `psi` is `[p][i in 0..n][d·n_atoms]`; `f` (driver values used at each
/// step) is `[p][i in 0..n][d]`.
#[derive(Clone, Debug)]
pub struct SolutionEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub d: usize,
    pub k: usize,
    pub n_atoms: usize,
    pub intensities: Vec<f64>,
    pub weights: Option<Vec<f64>>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub psi: Vec<f64>,
    pub m: Vec<f64>,
    pub f: Vec<f64>,
    /// Approximate standard error of the conditional estimate at each node.
    pub node_se: Vec<f64>,
    /// Monte Carlo standard error of `Y_0` (zero on exact enumerations).
    pub y0_se: f64,
    pub provenance: Provenance,
}

impl SolutionEnsemble {
    pub fn zeros(e: &PathEnsemble, d: usize) -> Self {
        let n = e.n_steps();
        let np = e.n_paths;
        Self {
            grid: e.grid.clone(),
            n_paths: np,
            d,
            k: e.k,
            n_atoms: e.n_atoms,
            intensities: e.intensities.clone(),
            weights: e.weights.clone(),
            y: vec![0.0; np * (n + 1) * d],
            z: vec![0.0; np * n * d * e.k],
            psi: vec![0.0; np * n * d * e.n_atoms],
            m: vec![0.0; np * (n + 1) * d],
            f: vec![0.0; np * n * d],
            node_se: vec![0.0; n + 1],
            y0_se: 0.0,
            provenance: Provenance { seed: e.seed, n_paths: np, scheme: e.scheme.clone(), ..Default::default() },
        }
    }

    /// Random input for the Picard map: per-path constant standard normal
    /// `Y`, `Z`, `ψ` scaled by `scale`, with `M = 0`.
    pub fn random_input(e: &PathEnsemble, d: usize, seed: u64, scale: f64) -> Self {
        let mut s = Self::zeros(e, d);
        let n = e.n_steps();
        let (dk, da) = (d * e.k, d * e.n_atoms);
        for p in 0..e.n_paths {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut g = || -> f64 { scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) };
            let yv: Vec<f64> = (0..d).map(|_| g()).collect();
            let zv: Vec<f64> = (0..dk).map(|_| g()).collect();
            let pv: Vec<f64> = (0..da).map(|_| g()).collect();
            for i in 0..=n {
                s.y[(p * (n + 1) + i) * d..(p * (n + 1) + i + 1) * d].copy_from_slice(&yv);
                if i < n {
                    s.z[(p * n + i) * dk..(p * n + i + 1) * dk].copy_from_slice(&zv);
                    s.psi[(p * n + i) * da..(p * n + i + 1) * da].copy_from_slice(&pv);
                }
            }
        }
        s.provenance.spec_id = format!("random:{seed}");
        s
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    #[inline]
    pub fn weight(&self, p: usize) -> f64 {
        match &self.weights {
            Some(w) => w[p],
            None => 1.0 / self.n_paths as f64,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.weights.is_some()
    }

    #[inline]
    pub fn y_at(&self, p: usize, i: usize) -> &[f64] {
        let s = (p * (self.n_steps() + 1) + i) * self.d;
        &self.y[s..s + self.d]
    }

    #[inline]
    pub fn m_at(&self, p: usize, i: usize) -> &[f64] {
        let s = (p * (self.n_steps() + 1) + i) * self.d;
        &self.m[s..s + self.d]
    }

    /// `ΔM_i = M_{i+1} − M_i`.
    pub fn dm_at(&self, p: usize, i: usize) -> Vec<f64> {
        let (a, b) = (self.m_at(p, i), self.m_at(p, i + 1));
        b.iter().zip(a).map(|(x, y)| x - y).collect()
    }

    #[inline]
    pub fn z_at(&self, p: usize, i: usize) -> &[f64] {
        let w = self.d * self.k;
        let s = (p * self.n_steps() + i) * w;
        &self.z[s..s + w]
    }

    #[inline]
    pub fn psi_at(&self, p: usize, i: usize) -> &[f64] {
        let w = self.d * self.n_atoms;
        let s = (p * self.n_steps() + i) * w;
        &self.psi[s..s + w]
    }

    #[inline]
    pub fn f_at(&self, p: usize, i: usize) -> &[f64] {
        let s = (p * self.n_steps() + i) * self.d;
        &self.f[s..s + self.d]
    }

    /// Weighted mean of `Y_0`.
    pub fn y0(&self) -> Vec<f64> {
        self.mean_y(0)
    }

    pub fn mean_y(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for p in 0..self.n_paths {
            let w = self.weight(p);
            for (o, v) in out.iter_mut().zip(self.y_at(p, i)) {
                *o += w * v;
            }
        }
        out
    }

    /// Time-indexed weighted means: rows `(t, Y, Z, ψ, M)` with the
    /// step-indexed quantities reported at the left node (empty at `t_n`).
    pub fn time_means(&self) -> Vec<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let n = self.n_steps();
        (0..=n)
            .map(|i| {
                let mut y = vec![0.0; self.d];
                let mut m = vec![0.0; self.d];
                let mut z = vec![0.0; if i < n { self.d * self.k } else { 0 }];
                let mut psi = vec![0.0; if i < n { self.d * self.n_atoms } else { 0 }];
                for p in 0..self.n_paths {
                    let w = self.weight(p);
                    for (o, v) in y.iter_mut().zip(self.y_at(p, i)) {
                        *o += w * v;
                    }
                    for (o, v) in m.iter_mut().zip(self.m_at(p, i)) {
                        *o += w * v;
                    }
                    if i < n {
                        for (o, v) in z.iter_mut().zip(self.z_at(p, i)) {
                            *o += w * v;
                        }
                        for (o, v) in psi.iter_mut().zip(self.psi_at(p, i)) {
                            *o += w * v;
                        }
                    }
                }
                (self.grid.times()[i], y, z, psi, m)
            })
            .collect()
    }

    pub fn check_compatible(&self, other: &SolutionEnsemble) -> Result<()> {
        if self.n_paths != other.n_paths
            || self.d != other.d
            || self.k != other.k
            || self.n_atoms != other.n_atoms
            || self.grid != other.grid
        {
            return Err(Error::config(format!(
                "solution ensembles differ in shape or grid ({} vs {} paths, {} vs {} steps)",
                self.n_paths,
                other.n_paths,
                self.n_steps(),
                other.n_steps()
            )));
        }
        Ok(())
    }

    /// `e^{−α t}` applied to `Y`: maps the solution of an α-shifted problem
    /// back to the original one.
    pub fn back_mapped_y(&self, alpha: f64) -> Vec<f64> {
        let n = self.n_steps();
        let times = self.grid.times();
        self.y
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                let i = (idx / self.d) % (n + 1);
                v * (-alpha * times[i]).exp()
            })
            .collect()
    }

    /// Writes the arrays in the `BJL1` container (header as for path
    /// ensembles with `k`, `n_atoms` of the solution) followed by grid
    /// times, `Y`, `Z`, `ψ`, `M`, `f`; the JSON sidecar carries `d`, the
    /// intensities and the provenance.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(ENSEMBLE_MAGIC)?;
        w.write_all(&ENSEMBLE_FORMAT_VERSION.to_le_bytes())?;
        for v in [self.n_paths as u64, self.n_steps() as u64, self.k as u64, self.n_atoms as u64, self.provenance.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        for arr in [self.grid.times(), &self.y, &self.z, &self.psi, &self.m, &self.f] {
            for x in arr {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn sidecar(&self) -> SolutionSidecar {
        SolutionSidecar {
            kind: "solution".into(),
            d: self.d,
            intensities: self.intensities.clone(),
            arrays: vec!["times".into(), "y".into(), "z".into(), "psi".into(), "m".into(), "f".into()],
            node_se: self.node_se.clone(),
            y0_se: self.y0_se,
            provenance: self.provenance.clone(),
        }
    }

    pub fn read_from<R: Read>(mut r: R, sidecar: &SolutionSidecar) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if &magic != ENSEMBLE_MAGIC || u32::from_le_bytes(b4) != ENSEMBLE_FORMAT_VERSION {
            return Err(Error::config("solution file: bad magic or version"));
        }
        let mut u = [0u64; 5];
        for slot in u.iter_mut() {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            *slot = u64::from_le_bytes(b8);
        }
        let (np, n, k, a) = (u[0] as usize, u[1] as usize, u[2] as usize, u[3] as usize);
        let d = sidecar.d;
        let mut read = |len: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let grid = TimeGrid::new(read(n + 1)?)?;
        Ok(Self {
            grid,
            n_paths: np,
            d,
            k,
            n_atoms: a,
            intensities: sidecar.intensities.clone(),
            weights: None,
            y: read(np * (n + 1) * d)?,
            z: read(np * n * d * k)?,
            psi: read(np * n * d * a)?,
            m: read(np * (n + 1) * d)?,
            f: read(np * n * d)?,
            node_se: sidecar.node_se.clone(),
            y0_se: sidecar.y0_se,
            provenance: sidecar.provenance.clone(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SolutionSidecar {
    pub kind: String,
    pub d: usize,
    pub intensities: Vec<f64>,
    pub arrays: Vec<String>,
    pub node_se: Vec<f64>,
    pub y0_se: f64,
    pub provenance: Provenance,
}

/// Parameters of the Picard iteration.
///
/// Defaults: `max_outer = 30`, `tol_beta = 1e−8` (on the square root of the
/// squared β-norm), `beta = None` meaning `2(1 + 2K²)`, inner step
/// `max_iter = 500`, `tol = 1e−12`.
#[derive(Clone, Copy, Debug)]
pub struct PicardParams {
    pub max_outer: usize,
    pub step: StepParams,
    pub tol_beta: f64,
    pub beta: Option<f64>,
}

impl Default for PicardParams {
    fn default() -> Self {
        Self { max_outer: 30, step: StepParams::default(), tol_beta: 1e-8, beta: None }
    }
}

impl PicardParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_beta > 0.0) {
            return Err(Error::config(format!("tol: tol_beta must be positive, got {}", self.tol_beta)));
        }
        if self.max_outer == 0 {
            return Err(Error::config("max_outer must be at least 1"));
        }
        Ok(())
    }

    pub fn beta_for(&self, lip_k: f64) -> f64 {
        self.beta.unwrap_or(2.0 * (1.0 + 2.0 * lip_k * lip_k))
    }
}

/// How the implicit step is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Guess {
    ConditionalMean,
    Offset(f64),
}

/// Everything the backward sweep needs.
pub(crate) struct Sweep<'a> {
    pub spec: &'a GeneratorSpec,
    pub ensemble: &'a PathEnsemble,
    pub cube: &'a StateCube,
    pub basis: &'a BasisSpec,
    pub use_aux: bool,
    /// Terminal values `[p][d]` at node `n_end`.
    pub terminal: Vec<f64>,
    pub n_end: usize,
    pub frozen: Option<&'a SolutionEnsemble>,
    /// Driver is active on step `i` of path `p` iff `i < stop[p]`.
    pub stop: Option<&'a [usize]>,
    pub step: StepParams,
    pub guess: Guess,
}

pub(crate) fn sweep(s: Sweep) -> Result<SolutionEnsemble> {
    let e = s.ensemble;
    let spec = s.spec;
    let (d, k, a) = (spec.d, e.k, e.n_atoms);
    if spec.k != k || spec.n_atoms() != a {
        return Err(Error::config(format!(
            "model '{}' has k = {}, {} atoms but the ensemble has k = {k}, {a} atoms",
            spec.id,
            spec.k,
            spec.n_atoms()
        )));
    }
    let n = s.n_end;
    let np = e.n_paths;
    let grid = e.grid.truncate(n);
    let mut sol = SolutionEnsemble::zeros(e, d);
    sol.grid = grid.clone();
    sol.y = vec![0.0; np * (n + 1) * d];
    sol.m = vec![0.0; np * (n + 1) * d];
    sol.z = vec![0.0; np * n * d * k];
    sol.psi = vec![0.0; np * n * d * a];
    sol.f = vec![0.0; np * n * d];
    sol.node_se = vec![0.0; n + 1];
    if let Some(fr) = s.frozen {
        if fr.n_paths != np || fr.n_steps() < n || fr.d != d {
            return Err(Error::config("apply_xi: input is not defined on the same ensemble"));
        }
    }
    let weights = regression::path_weights(e);
    let exact = e.is_exact();

    let mut y_next: Vec<f64> = s.terminal.clone();
    for p in 0..np {
        sol.y[(p * (n + 1) + n) * d..(p * (n + 1) + n + 1) * d].copy_from_slice(&y_next[p * d..(p + 1) * d]);
    }
    let mut dm = vec![0.0; np * n * d];
    let mut max_inner = 0usize;
    let m_t = d * (1 + k + a);

    for i in (0..n).rev() {
        let dt = e.grid.dt(i);
        let t = e.grid.times()[i];
        let vars: Vec<f64> = e.intensities.iter().map(|&l| e.law.count_variance(l, dt)).collect();
        let stop = s.stop;
        let stopped_flag = move |p: usize| -> f64 { if i >= stop.map_or(usize::MAX, |st| st[p]) { 1.0 } else { 0.0 } };
        let extra: Option<&dyn Fn(usize) -> f64> = if stop.is_some() { Some(&stopped_flag) } else { None };
        let feats = regression::Features::at_node(s.cube, i, &s.basis.features, s.use_aux, extra);
        let is_active = |p: usize| stop.is_none_or(|st| i < st[p]);
        // Stopped paths are frozen at ξ_τ and take no part in the fits.
        let mut fit_w: Vec<f64> = (0..np).map(|p| if is_active(p) { weights[p] } else { 0.0 }).collect();
        if fit_w.iter().all(|&w| w == 0.0) {
            fit_w.clone_from(&weights);
        }
        let mean_fit = regression::regress(s.basis.family, &feats, &y_next, d, &fit_w)?;
        // Z and ψ project the centered increment Y_{i+1} − E_i[Y_{i+1}].
        let m_p = d * (k + a);
        let mut targets = vec![0.0; np * m_p];
        if m_p > 0 {
            targets.par_chunks_mut(m_p).enumerate().for_each(|(p, tg)| {
                let dw = e.dw_at(p, i);
                for r in 0..d {
                    let c0 = y_next[p * d + r] - mean_fit.values[p * d + r];
                    for c in 0..k {
                        tg[r * k + c] = c0 * dw[c] / dt;
                    }
                    for j in 0..a {
                        tg[d * k + r * a + j] = c0 * e.compensated_at(p, i, j) / vars[j];
                    }
                }
            });
        }
        let proj_fit = regression::regress(s.basis.family, &feats, &targets, m_p, &fit_w)?;
        let mut values = vec![0.0; np * m_t];
        for p in 0..np {
            if is_active(p) {
                values[p * m_t..p * m_t + d].copy_from_slice(&mean_fit.values[p * d..(p + 1) * d]);
                values[p * m_t + d..(p + 1) * m_t].copy_from_slice(&proj_fit.values[p * m_p..(p + 1) * m_p]);
            } else {
                values[p * m_t..p * m_t + d].copy_from_slice(&y_next[p * d..(p + 1) * d]);
            }
        }
        let fit = regression::Fitted { values, n_basis: mean_fit.n_basis };

        let results: Vec<Result<(Vec<f64>, Vec<f64>, usize)>> = (0..np)
            .into_par_iter()
            .map(|p| {
                let fv = &fit.values[p * m_t..(p + 1) * m_t];
                let cm = &fv[..d];
                let z = &fv[d..d + d * k];
                let psi = &fv[d + d * k..];
                let (zf, pf) = match s.frozen {
                    Some(fr) => (fr.z_at(p, i), fr.psi_at(p, i)),
                    None => (z, psi),
                };
                let active = s.stop.is_none_or(|st| i < st[p]);
                if !active {
                    return Ok((cm.to_vec(), vec![0.0; d], 0));
                }
                let guess: Vec<f64> = match s.guess {
                    Guess::ConditionalMean => cm.to_vec(),
                    Guess::Offset(o) => cm.iter().map(|v| v + o).collect(),
                };
                let out = solve_implicit(
                    cm,
                    dt,
                    &guess,
                    s.step,
                    |y, o| spec.eval_into(&DriverArgs { t, y, z: zf, psi: pf }, o),
                    || format!("step {i}, path {p}"),
                )?;
                if out.f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Model(format!("model '{}' is not finite at step {i}, path {p}", spec.id)));
                }
                Ok((out.y, out.f, out.iterations))
            })
            .collect();

        let mut y_cur = vec![0.0; np * d];
        let mut resid2 = 0.0;
        for (p, r) in results.into_iter().enumerate() {
            let (yv, fv, it) = r?;
            max_inner = max_inner.max(it);
            let fitted = &fit.values[p * m_t..(p + 1) * m_t];
            let dw = e.dw_at(p, i);
            for r in 0..d {
                let mut recon = fitted[r];
                for c in 0..k {
                    recon += fitted[d + r * k + c] * dw[c];
                }
                for j in 0..a {
                    recon += fitted[d + d * k + r * a + j] * e.compensated_at(p, i, j);
                }
                let yn = y_next[p * d + r];
                dm[(p * n + i) * d + r] = yn - recon;
                resid2 += weights[p] * (yn - fitted[r]).powi(2);
            }
            y_cur[p * d..(p + 1) * d].copy_from_slice(&yv);
            sol.f[(p * n + i) * d..(p * n + i + 1) * d].copy_from_slice(&fv);
            sol.z[(p * n + i) * d * k..(p * n + i + 1) * d * k].copy_from_slice(&fitted[d..d + d * k]);
            sol.psi[(p * n + i) * d * a..(p * n + i + 1) * d * a].copy_from_slice(&fitted[d + d * k..]);
            sol.y[(p * (n + 1) + i) * d..(p * (n + 1) + i + 1) * d].copy_from_slice(&yv);
        }
        let wsum: f64 = weights.iter().sum();
        sol.node_se[i] = if exact { 0.0 } else { (resid2 / wsum * fit.n_basis as f64 / np as f64).sqrt() };
        y_next = y_cur;
    }

    for p in 0..np {
        for i in 0..n {
            for r in 0..d {
                let prev = sol.m[(p * (n + 1) + i) * d + r];
                sol.m[(p * (n + 1) + i + 1) * d + r] = prev + dm[(p * n + i) * d + r];
            }
        }
    }

    sol.y0_se = if exact || np < 2 {
        0.0
    } else {
        // Pathwise representation Y_0 = E[ξ + Σ f Δt].
        let vals: Vec<f64> = (0..np)
            .map(|p| {
                let mut v = s.terminal[p * d];
                for i in 0..n {
                    v += sol.f[(p * n + i) * d] * e.grid.dt(i);
                }
                v
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / np as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (np as f64 - 1.0);
        (var / np as f64).sqrt()
    };
    sol.provenance.max_inner_iterations = max_inner;
    sol.provenance.basis_id = s.basis.id();
    sol.provenance.spec_id = spec.id.clone();
    Ok(sol)
}

fn resolve_aux(basis: &BasisSpec, xi: &TerminalSpec) -> bool {
    basis.features.aux.unwrap_or_else(|| xi.uses_aux())
}

fn prepare(spec: &GeneratorSpec, xi: &TerminalSpec, e: &PathEnsemble) -> Result<StateCube> {
    if xi.d != spec.d {
        return Err(Error::config(format!(
            "terminal '{}' has d = {} but model '{}' has d = {}",
            xi.id, xi.d, spec.id, spec.d
        )));
    }
    Ok(StateCube::new(e))
}

/// Direct backward sweep with `Z`, `ψ` taken from the current step's
/// projections.
pub fn backward_solve(
    spec: &GeneratorSpec,
    xi: &TerminalSpec,
    ensemble: &PathEnsemble,
    basis: &BasisSpec,
    params: &PicardParams,
) -> Result<SolutionEnsemble> {
    backward_solve_with_guess(spec, xi, ensemble, basis, params, Guess::ConditionalMean)
}

pub fn backward_solve_with_guess(
    spec: &GeneratorSpec,
    xi: &TerminalSpec,
    ensemble: &PathEnsemble,
    basis: &BasisSpec,
    params: &PicardParams,
    guess: Guess,
) -> Result<SolutionEnsemble> {
    params.validate()?;
    let cube = prepare(spec, xi, ensemble)?;
    let n = ensemble.n_steps();
    let terminal = xi.values(ensemble, &cube, n)?;
    let mut sol = sweep(Sweep {
        spec,
        ensemble,
        cube: &cube,
        basis,
        use_aux: resolve_aux(basis, xi),
        terminal,
        n_end: n,
        frozen: None,
        stop: None,
        step: params.step,
        guess,
    })?;
    sol.provenance.xi_id = xi.id.clone();
    sol.provenance.outer_iterations = 1;
    Ok(sol)
}

/// One application of the Picard map Ξ: the driver reads `(V, φ)` from
/// `input` in its `z` and `ψ` slots.
pub fn apply_xi(
    spec: &GeneratorSpec,
    xi: &TerminalSpec,
    ensemble: &PathEnsemble,
    basis: &BasisSpec,
    params: &PicardParams,
    input: &SolutionEnsemble,
) -> Result<SolutionEnsemble> {
    let cube = prepare(spec, xi, ensemble)?;
    apply_xi_with_cube(spec, xi, ensemble, &cube, basis, params, input)
}

fn apply_xi_with_cube(
    spec: &GeneratorSpec,
    xi: &TerminalSpec,
    ensemble: &PathEnsemble,
    cube: &StateCube,
    basis: &BasisSpec,
    params: &PicardParams,
    input: &SolutionEnsemble,
) -> Result<SolutionEnsemble> {
    let n = ensemble.n_steps();
    if input.n_paths != ensemble.n_paths || input.grid != ensemble.grid {
        return Err(Error::config("apply_xi: input is not defined on the same ensemble"));
    }
    let terminal = xi.values(ensemble, cube, n)?;
    let mut sol = sweep(Sweep {
        spec,
        ensemble,
        cube,
        basis,
        use_aux: resolve_aux(basis, xi),
        terminal,
        n_end: n,
        frozen: Some(input),
        stop: None,
        step: params.step,
        guess: Guess::ConditionalMean,
    })?;
    sol.provenance.xi_id = xi.id.clone();
    Ok(sol)
}

#[derive(Clone, Debug, Serialize)]
pub struct PicardTrace {
    pub beta: f64,
    /// `‖a_{m+1} − a_m‖_β` (square root of the squared norm) per iteration.
    pub increments: Vec<f64>,
    pub converged: bool,
}

/// Iterates Ξ from the zero input until successive iterates are within
/// `tol_beta` in the β-norm.
pub fn picard_solve(
    spec: &GeneratorSpec,
    xi: &TerminalSpec,
    ensemble: &PathEnsemble,
    basis: &BasisSpec,
    params: &PicardParams,
) -> Result<(SolutionEnsemble, PicardTrace)> {
    params.validate()?;
    let cube = prepare(spec, xi, ensemble)?;
    let beta = params.beta_for(spec.lip_k);
    let mut cur = SolutionEnsemble::zeros(ensemble, spec.d);
    let mut increments = Vec::new();
    for it in 0..params.max_outer {
        let next = apply_xi_with_cube(spec, xi, ensemble, &cube, basis, params, &cur)?;
        let inc = beta_norm(&next, &cur, beta)?.sqrt();
        increments.push(inc);
        cur = next;
        cur.provenance.outer_iterations = it + 1;
        if inc <= params.tol_beta {
            return Ok((cur, PicardTrace { beta, increments, converged: true }));
        }
    }
    Err(Error::numeric(format!(
        "Picard iteration did not reach tol_beta = {:e} in max_outer = {} iterations (last increment {:e})",
        params.tol_beta,
        params.max_outer,
        increments.last().copied().unwrap_or(f64::NAN)
    )))
}

/// Squared discrete β-norm of `a − b`:
///
/// ```text
/// E[ max_i e^{βt_i}|ΔY_i|² + Σ_i e^{βt_i}|ΔZ_i|²Δt_i
///    + Σ_i e^{βt_i} Σ_j |Δψ_{i,j}|² λ_j Δt_i + Σ_i e^{βt_{i+1}} |Δ(M_{i+1} − M_i)|² ]
/// ```
pub fn beta_norm(a: &SolutionEnsemble, b: &SolutionEnsemble, beta: f64) -> Result<f64> {
    a.check_compatible(b)?;
    let n = a.n_steps();
    let times = a.grid.times();
    let na = a.n_atoms;
    let lam = &a.intensities;
    let per_path: Vec<f64> = (0..a.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut sup = 0.0f64;
            for i in 0..=n {
                let dy: f64 = a.y_at(p, i).iter().zip(b.y_at(p, i)).map(|(x, y)| (x - y).powi(2)).sum();
                sup = sup.max((beta * times[i]).exp() * dy);
            }
            let mut acc = 0.0;
            for i in 0..n {
                let dt = a.grid.dt(i);
                let w = (beta * times[i]).exp();
                let dz: f64 = a.z_at(p, i).iter().zip(b.z_at(p, i)).map(|(x, y)| (x - y).powi(2)).sum();
                let dpsi: f64 = a
                    .psi_at(p, i)
                    .iter()
                    .zip(b.psi_at(p, i))
                    .enumerate()
                    .map(|(idx, (x, y))| (x - y).powi(2) * lam[idx % na.max(1)])
                    .sum();
                let ma = a.dm_at(p, i);
                let mb = b.dm_at(p, i);
                let dmm: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
                acc += w * (dz + dpsi) * dt + (beta * times[i + 1]).exp() * dmm;
            }
            a.weight(p) * (sup + acc)
        })
        .collect();
    Ok(per_path.iter().sum())
}

/// Pathwise residual of the discrete equation,
/// `max |Y_i − Y_{i+1} − f_iΔt + Z_iΔW_i + Σψ_{i,j}Δπ̃_{i,j} + ΔM_i|`.
pub fn identity_residual(sol: &SolutionEnsemble, e: &PathEnsemble) -> f64 {
    let n = sol.n_steps();
    let (d, k, a) = (sol.d, sol.k, sol.n_atoms);
    (0..sol.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut worst = 0.0f64;
            for i in 0..n {
                let dt = e.grid.dt(i);
                let dw = e.dw_at(p, i);
                let dm = sol.dm_at(p, i);
                for r in 0..d {
                    let mut v = sol.y_at(p, i)[r] - sol.y_at(p, i + 1)[r] - sol.f_at(p, i)[r] * dt + dm[r];
                    for c in 0..k {
                        v += sol.z_at(p, i)[r * k + c] * dw[c];
                    }
                    for j in 0..a {
                        v += sol.psi_at(p, i)[r * a + j] * e.compensated_at(p, i, j);
                    }
                    worst = worst.max(v.abs());
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct CovariationStats {
    /// Per `(row, Brownian coordinate)`: mean and standard error of
    /// `Σ_i ΔM_i ΔW_i` over paths.
    pub m_w: Vec<(f64, f64)>,
    /// Per `(row, atom)`: mean and standard error of `Σ_i ΔM_i Δπ̃_{i,j}`.
    pub m_jump: Vec<(f64, f64)>,
    /// Largest `|mean| / se` over all entries.
    pub max_z_score: f64,
}

pub fn covariation_stats(sol: &SolutionEnsemble, e: &PathEnsemble) -> CovariationStats {
    let n = sol.n_steps();
    let (d, k, a) = (sol.d, sol.k, sol.n_atoms);
    let nc = d * k + d * a;
    let rows: Vec<Vec<f64>> = (0..sol.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut v = vec![0.0; nc];
            for i in 0..n {
                let dm = sol.dm_at(p, i);
                let dw = e.dw_at(p, i);
                for r in 0..d {
                    for c in 0..k {
                        v[r * k + c] += dm[r] * dw[c];
                    }
                    for j in 0..a {
                        v[d * k + r * a + j] += dm[r] * e.compensated_at(p, i, j);
                    }
                }
            }
            v
        })
        .collect();
    let np = sol.n_paths as f64;
    let mut stats = Vec::with_capacity(nc);
    for c in 0..nc {
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / np;
        let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (np - 1.0).max(1.0);
        stats.push((mean, (var / np).sqrt()));
    }
    let max_z_score = stats
        .iter()
        .map(|(m, s)| if *s > 0.0 { m.abs() / s } else if m.abs() < 1e-14 { 0.0 } else { f64::INFINITY })
        .fold(0.0, f64::max);
    let m_jump = stats.split_off(d * k);
    CovariationStats { m_w: stats, m_jump, max_z_score }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generator_by_id, terminal_by_id, ModelContext};
    use crate::noise::{simulate, JumpActivity};

    fn setup(n: usize, t: f64, lam: &[f64], paths: usize, seed: u64) -> (PathEnsemble, ModelContext) {
        let g = TimeGrid::uniform(n, t).unwrap();
        let act = JumpActivity::from_intensities(lam).unwrap();
        (simulate(&g, 1, &act, paths, seed).unwrap(), ModelContext::new(1, 1, lam.to_vec()))
    }

    #[test]
    fn constant_terminal_is_exact() {
        let (e, ctx) = setup(8, 1.0, &[1.0], 2000, 1);
        let spec = generator_by_id("zero", &ctx).unwrap();
        let xi = terminal_by_id("one", &ctx).unwrap();
        let sol = backward_solve(&spec, &xi, &e, &BasisSpec::default(), &PicardParams::default()).unwrap();
        assert!(sol.y.iter().all(|v| (v - 1.0).abs() <= 1e-10));
        assert!(sol.z.iter().chain(&sol.psi).chain(&sol.m).all(|v| v.abs() <= 1e-10));
        assert!(sol.m_at(0, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn terminal_is_bitwise_and_identity_holds() {
        let (e, ctx) = setup(6, 1.0, &[0.7], 3000, 2);
        let spec = generator_by_id("sin:0.3", &ctx).unwrap();
        let xi = terminal_by_id("mixed", &ctx).unwrap();
        let sol = backward_solve(&spec, &xi, &e, &BasisSpec::default(), &PicardParams::default()).unwrap();
        let cube = StateCube::new(&e);
        let tv = xi.values(&e, &cube, 6).unwrap();
        for p in 0..e.n_paths {
            assert_eq!(sol.y_at(p, 6)[0].to_bits(), tv[p].to_bits());
        }
        assert!(identity_residual(&sol, &e) < 1e-12);
    }

    #[test]
    fn ohlm1_matches_ode() {
        let (e, ctx) = setup(16, 1.0, &[], 4000, 7);
        let spec = generator_by_id("ohlm1", &ctx).unwrap();
        let xi = terminal_by_id("one", &ctx).unwrap();
        let sol = backward_solve(&spec, &xi, &e, &BasisSpec::default(), &PicardParams::default()).unwrap();
        // Implicit Euler on a deterministic ODE: (1 + Δt)^{−n}.
        let disc = (1.0f64 + 1.0 / 16.0).powi(-16);
        assert!((sol.y0()[0] - disc).abs() < 1e-10);
    }

    #[test]
    fn beta_norm_examples() {
        let (e, _) = setup(4, 1.0, &[1.0], 50, 3);
        let zero = SolutionEnsemble::zeros(&e, 1);
        let mut one = zero.clone();
        one.y.iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(beta_norm(&zero, &zero, 2.0).unwrap(), 0.0);
        assert!((beta_norm(&one, &zero, 0.0).unwrap() - 1.0).abs() < 1e-12);
        let a = SolutionEnsemble::random_input(&e, 1, 9, 1.0);
        let mut a3 = a.clone();
        for v in a3.y.iter_mut().chain(a3.z.iter_mut()).chain(a3.psi.iter_mut()).chain(a3.m.iter_mut()) {
            *v *= 3.0;
        }
        let n1 = beta_norm(&a, &zero, 1.5).unwrap();
        let n3 = beta_norm(&a3, &zero, 1.5).unwrap();
        assert!((n3 / n1 - 9.0).abs() < 1e-10);
        let (e2, _) = setup(5, 1.0, &[1.0], 50, 3);
        assert!(beta_norm(&a, &SolutionEnsemble::zeros(&e2, 1), 1.0).is_err());
    }

    #[test]
    fn picard_converges_and_fixed_point_is_stable() {
        let (e, ctx) = setup(8, 1.0, &[1.0], 2000, 4);
        let spec = generator_by_id("sin:0.3", &ctx).unwrap();
        let xi = terminal_by_id("w", &ctx).unwrap();
        let params = PicardParams::default();
        let (sol, trace) = picard_solve(&spec, &xi, &e, &BasisSpec::default(), &params).unwrap();
        assert!(trace.converged);
        let again = apply_xi(&spec, &xi, &e, &BasisSpec::default(), &params, &sol).unwrap();
        assert!(beta_norm(&again, &sol, trace.beta).unwrap().sqrt() <= params.tol_beta);
    }

    #[test]
    fn apply_xi_ignores_input_when_driver_ignores_z_psi() {
        let (e, ctx) = setup(5, 1.0, &[1.0], 500, 5);
        let spec = generator_by_id("cubic", &ctx).unwrap();
        let xi = terminal_by_id("w", &ctx).unwrap();
        let params = PicardParams::default();
        let a = SolutionEnsemble::random_input(&e, 1, 1, 1.0);
        let b = SolutionEnsemble::random_input(&e, 1, 2, 1.0);
        let xa = apply_xi(&spec, &xi, &e, &BasisSpec::default(), &params, &a).unwrap();
        let xb = apply_xi(&spec, &xi, &e, &BasisSpec::default(), &params, &b).unwrap();
        assert_eq!(beta_norm(&xa, &xb, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_params() {
        let (e, ctx) = setup(2, 1.0, &[], 10, 5);
        let spec = generator_by_id("zero", &ctx).unwrap();
        let xi = terminal_by_id("one", &ctx).unwrap();
        let params = PicardParams { tol_beta: 0.0, ..Default::default() };
        assert!(matches!(backward_solve(&spec, &xi, &e, &BasisSpec::default(), &params), Err(Error::Config(_))));
    }

    #[test]
    fn solution_round_trip() {
        let (e, ctx) = setup(3, 1.0, &[1.0], 20, 6);
        let spec = generator_by_id("sin:0.3", &ctx).unwrap();
        let xi = terminal_by_id("w", &ctx).unwrap();
        let sol = backward_solve(&spec, &xi, &e, &BasisSpec::default(), &PicardParams::default()).unwrap();
        let mut buf = Vec::new();
        sol.write_to(&mut buf).unwrap();
        let side: SolutionSidecar = serde_json::from_str(&serde_json::to_string(&sol.sidecar()).unwrap()).unwrap();
        let back = SolutionEnsemble::read_from(&buf[..], &side).unwrap();
        assert_eq!(back.y, sol.y);
        assert_eq!(back.psi, sol.psi);
        assert_eq!(back.m, sol.m);
        assert_eq!(back.provenance, sol.provenance);
    }
}
