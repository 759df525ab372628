//! Generators, terminal conditions and sampled checks of the structural
//! hypotheses: monotonicity in `y` (H1), Lipschitz continuity in `(z, ψ)`
//! (H3) and the jump-monotonicity condition (H3′) used for comparison.
//!
//! The `ψ` argument is the vector of values at the atoms of the jump
//! measure, so `‖ψ‖ = √(Σ_j ψ_j² λ_j)`.

pub mod expr;
pub mod registry;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::{PathEnsemble, StateCube};

pub use registry::{generator_by_id, terminal_by_id, ModelContext};

/// Arguments of the driver. `z` is `d × k` row-major and `psi` is
/// `d × n_atoms` row-major.
#[derive(Clone, Copy, Debug)]
pub struct DriverArgs<'a> {
    pub t: f64,
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub psi: &'a [f64],
}

pub type DriverFn = Arc<dyn Fn(&DriverArgs, &mut [f64]) + Send + Sync>;
/// `κ(t, y, z, ψ, φ, j)`.
pub type KappaFn = Arc<dyn Fn(&DriverArgs, &[f64], usize) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct ComparisonData {
    pub kappa: KappaFn,
    pub theta: Vec<f64>,
}

#[derive(Clone)]
pub struct GeneratorSpec {
    pub id: String,
    pub d: usize,
    pub k: usize,
    pub intensities: Vec<f64>,
    pub alpha: f64,
    pub lip_k: f64,
    pub eval: DriverFn,
    pub comparison: Option<ComparisonData>,
}

impl std::fmt::Debug for GeneratorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneratorSpec")
            .field("id", &self.id)
            .field("d", &self.d)
            .field("k", &self.k)
            .field("intensities", &self.intensities)
            .field("alpha", &self.alpha)
            .field("lip_k", &self.lip_k)
            .field("comparison", &self.comparison.is_some())
            .finish()
    }
}

impl GeneratorSpec {
    pub fn new(
        id: impl Into<String>,
        d: usize,
        k: usize,
        intensities: Vec<f64>,
        alpha: f64,
        lip_k: f64,
        eval: DriverFn,
    ) -> Result<Self> {
        let id = id.into();
        if d == 0 || k == 0 {
            return Err(Error::config(format!("model '{id}': d and k must be at least 1")));
        }
        if !alpha.is_finite() || !lip_k.is_finite() || lip_k < 0.0 {
            return Err(Error::config(format!(
                "model '{id}': declared constants must be finite (alpha = {alpha}, K = {lip_k})"
            )));
        }
        Ok(Self { id, d, k, intensities, alpha, lip_k, eval, comparison: None })
    }

    pub fn with_comparison(mut self, kappa: KappaFn, theta: Vec<f64>) -> Self {
        self.comparison = Some(ComparisonData { kappa, theta });
        self
    }

    pub fn n_atoms(&self) -> usize {
        self.intensities.len()
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensities.iter().sum()
    }

    pub fn eval_into(&self, args: &DriverArgs, out: &mut [f64]) {
        (self.eval)(args, out)
    }

    pub fn eval_vec(&self, t: f64, y: &[f64], z: &[f64], psi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        (self.eval)(&DriverArgs { t, y, z, psi }, &mut out);
        out
    }

    /// `f(t, 0, 0, 0)`.
    pub fn at_zero(&self, t: f64) -> Vec<f64> {
        let y = vec![0.0; self.d];
        let z = vec![0.0; self.d * self.k];
        let psi = vec![0.0; self.d * self.n_atoms()];
        self.eval_vec(t, &y, &z, &psi)
    }

    /// `‖ψ‖_{L²_μ}` for one `d × n_atoms` block, summed over rows.
    pub fn psi_norm(&self, psi: &[f64]) -> f64 {
        psi_norm(psi, &self.intensities)
    }
}

pub fn psi_norm(psi: &[f64], intensities: &[f64]) -> f64 {
    let a = intensities.len();
    if a == 0 {
        return 0.0;
    }
    psi.iter().enumerate().map(|(i, x)| x * x * intensities[i % a]).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TerminalMode {
    State,
    Aux,
    Mixed,
}

/// What a terminal condition may read at node `step` of a path.
#[derive(Clone, Copy, Debug)]
pub struct PathInfo<'a> {
    pub t: f64,
    pub step: usize,
    pub w: &'a [f64],
    pub counts: &'a [f64],
    pub aux_sum: f64,
    /// Auxiliary signs of steps `0..step`.
    pub aux: &'a [f64],
}

pub type TerminalFn = Arc<dyn Fn(&PathInfo, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct TerminalSpec {
    pub id: String,
    pub mode: TerminalMode,
    pub p: f64,
    pub d: usize,
    pub eval: TerminalFn,
}

impl std::fmt::Debug for TerminalSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TerminalSpec")
            .field("id", &self.id)
            .field("mode", &self.mode)
            .field("p", &self.p)
            .field("d", &self.d)
            .finish()
    }
}

impl TerminalSpec {
    pub fn new(id: impl Into<String>, mode: TerminalMode, d: usize, eval: TerminalFn) -> Self {
        Self { id: id.into(), mode, p: 2.0, d, eval }
    }

    pub fn uses_aux(&self) -> bool {
        self.mode != TerminalMode::State
    }

    /// Multiplies the terminal value by `factor`.
    pub fn scaled(&self, factor: f64) -> TerminalSpec {
        let inner = self.eval.clone();
        TerminalSpec {
            id: format!("{}*{}", factor, self.id),
            eval: Arc::new(move |info, out| {
                inner(info, out);
                out.iter_mut().for_each(|x| *x *= factor);
            }),
            ..self.clone()
        }
    }

    /// Adds `delta` to every component.
    pub fn shifted(&self, delta: f64) -> TerminalSpec {
        let inner = self.eval.clone();
        TerminalSpec {
            id: format!("{}+{}", self.id, delta),
            eval: Arc::new(move |info, out| {
                inner(info, out);
                out.iter_mut().for_each(|x| *x += delta);
            }),
            ..self.clone()
        }
    }

    /// Values at node `step` on every path, laid out `[p][d]`.
    pub fn values(&self, ensemble: &PathEnsemble, cube: &StateCube, step: usize) -> Result<Vec<f64>> {
        let n = ensemble.n_steps();
        let t = ensemble.grid.times()[step];
        let mut out = vec![0.0; ensemble.n_paths * self.d];
        out.par_chunks_mut(self.d).enumerate().try_for_each(|(p, o)| {
            let info = PathInfo {
                t,
                step,
                w: cube.w_at(p, step),
                counts: cube.counts_at(p, step),
                aux_sum: cube.aux_sum_at(p, step),
                aux: &ensemble.aux[p * n..p * n + step],
            };
            (self.eval)(&info, o);
            if o.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(Error::Model(format!(
                    "terminal '{}' is not finite on path {p} at step {step} (w = {:?}, counts = {:?})",
                    self.id, info.w, info.counts
                )))
            }
        })?;
        Ok(out)
    }
}

/// Uniform sampler for hypothesis checks: every coordinate of `y`, `z`,
/// `ψ` on `[−range, range]` and `t` on `[0, t_max]`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StateSampler {
    pub y_range: f64,
    pub z_range: f64,
    pub psi_range: f64,
    pub t_max: f64,
    pub seed: u64,
}

impl Default for StateSampler {
    fn default() -> Self {
        Self { y_range: 5.0, z_range: 5.0, psi_range: 5.0, t_max: 1.0, seed: 0x5eed }
    }
}

impl StateSampler {
    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn fill(rng: &mut ChaCha8Rng, v: &mut [f64], r: f64) {
        for x in v {
            *x = rng.random_range(-r..=r);
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub t: f64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport {
    pub hypothesis: String,
    pub model: String,
    pub declared: f64,
    pub n_samples: usize,
    /// Empirical supremum of the tested ratio (for (H3′): of
    /// `f(ψ) − f(φ) − Σ(ψ_j − φ_j)κ_jλ_j`).
    pub max_ratio: f64,
    pub violations: usize,
    pub pass: bool,
    pub witness: Option<Witness>,
    pub kappa_min: Option<f64>,
    pub theta_excess: Option<f64>,
}

fn check_finite(spec: &GeneratorSpec, out: &[f64], t: f64, y: &[f64], z: &[f64], psi: &[f64]) -> Result<()> {
    if out.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Model(format!(
            "model '{}' returned a non-finite value at t = {t}, y = {y:?}, z = {z:?}, psi = {psi:?}",
            spec.id
        )))
    }
}

const SLACK: f64 = 1e-9;

struct Sample {
    t: f64,
    a: Vec<f64>,
    b: Vec<f64>,
    value: f64,
    violated: bool,
}

fn summarize(
    hypothesis: &str,
    spec: &GeneratorSpec,
    declared: f64,
    samples: Vec<Sample>,
) -> HypothesisReport {
    let mut max_ratio = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut witness = None;
    let mut worst_violation = f64::NEG_INFINITY;
    for s in &samples {
        max_ratio = max_ratio.max(s.value);
        if s.violated {
            violations += 1;
            if s.value > worst_violation {
                worst_violation = s.value;
                witness = Some(Witness { t: s.t, first: s.a.clone(), second: s.b.clone(), value: s.value });
            }
        }
    }
    HypothesisReport {
        hypothesis: hypothesis.to_string(),
        model: spec.id.clone(),
        declared,
        n_samples: samples.len(),
        max_ratio,
        violations,
        pass: violations == 0,
        witness,
        kappa_min: None,
        theta_excess: None,
    }
}

/// (H1): `⟨f(y) − f(y′), y − y′⟩ ≤ α|y − y′|²` on sampled pairs.
pub fn verify_monotonicity(spec: &GeneratorSpec, sampler: &StateSampler, n_samples: usize) -> Result<HypothesisReport> {
    if n_samples == 0 {
        return Err(Error::config("n_samples must be at least 1"));
    }
    let (d, k, a) = (spec.d, spec.k, spec.n_atoms());
    let mut rng = sampler.rng();
    let inputs: Vec<_> = (0..n_samples)
        .map(|_| {
            let t = rng.random_range(0.0..=sampler.t_max);
            let mut y = vec![0.0; d];
            let mut y2 = vec![0.0; d];
            let mut z = vec![0.0; d * k];
            let mut psi = vec![0.0; d * a];
            StateSampler::fill(&mut rng, &mut y, sampler.y_range);
            StateSampler::fill(&mut rng, &mut y2, sampler.y_range);
            StateSampler::fill(&mut rng, &mut z, sampler.z_range);
            StateSampler::fill(&mut rng, &mut psi, sampler.psi_range);
            (t, y, y2, z, psi)
        })
        .collect();
    let samples = inputs
        .into_par_iter()
        .map(|(t, y, y2, z, psi)| {
            let f1 = spec.eval_vec(t, &y, &z, &psi);
            check_finite(spec, &f1, t, &y, &z, &psi)?;
            let f2 = spec.eval_vec(t, &y2, &z, &psi);
            check_finite(spec, &f2, t, &y2, &z, &psi)?;
            let dy2: f64 = y.iter().zip(&y2).map(|(a, b)| (a - b).powi(2)).sum();
            let inner: f64 = (0..d).map(|i| (f1[i] - f2[i]) * (y[i] - y2[i])).sum();
            let value = if dy2 > 0.0 { inner / dy2 } else { f64::NEG_INFINITY };
            let violated = inner > spec.alpha * dy2 + SLACK * (1.0 + spec.alpha.abs()) * dy2.max(1e-300);
            Ok(Sample { t, a: y, b: y2, value, violated })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize("H1", spec, spec.alpha, samples))
}

/// (H3): `|f(z, ψ) − f(z′, ψ′)| ≤ K(|z − z′| + ‖ψ − ψ′‖)` on sampled pairs.
pub fn verify_lipschitz(spec: &GeneratorSpec, sampler: &StateSampler, n_samples: usize) -> Result<HypothesisReport> {
    if n_samples == 0 {
        return Err(Error::config("n_samples must be at least 1"));
    }
    let (d, k, a) = (spec.d, spec.k, spec.n_atoms());
    let mut rng = sampler.rng();
    let inputs: Vec<_> = (0..n_samples)
        .map(|_| {
            let t = rng.random_range(0.0..=sampler.t_max);
            let mut y = vec![0.0; d];
            let mut z1 = vec![0.0; d * k];
            let mut z2 = vec![0.0; d * k];
            let mut p1 = vec![0.0; d * a];
            let mut p2 = vec![0.0; d * a];
            StateSampler::fill(&mut rng, &mut y, sampler.y_range);
            StateSampler::fill(&mut rng, &mut z1, sampler.z_range);
            StateSampler::fill(&mut rng, &mut z2, sampler.z_range);
            StateSampler::fill(&mut rng, &mut p1, sampler.psi_range);
            StateSampler::fill(&mut rng, &mut p2, sampler.psi_range);
            (t, y, z1, z2, p1, p2)
        })
        .collect();
    let samples = inputs
        .into_par_iter()
        .map(|(t, y, z1, z2, p1, p2)| {
            let f1 = spec.eval_vec(t, &y, &z1, &p1);
            check_finite(spec, &f1, t, &y, &z1, &p1)?;
            let f2 = spec.eval_vec(t, &y, &z2, &p2);
            check_finite(spec, &f2, t, &y, &z2, &p2)?;
            let df = f1.iter().zip(&f2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dz = z1.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dpsi: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a - b).collect();
            let den = dz + spec.psi_norm(&dpsi);
            let value = if den > 0.0 { df / den } else { 0.0 };
            let violated = df > spec.lip_k * den + SLACK * (1.0 + spec.lip_k) * den.max(1e-300);
            let mut first = z1;
            first.extend(p1);
            let mut second = z2;
            second.extend(p2);
            Ok(Sample { t, a: first, b: second, value, violated })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize("H3", spec, spec.lip_k, samples))
}

/// (H3′): `f(ψ) − f(φ) ≤ Σ_j (ψ_j − φ_j) κ_j λ_j` with `κ ≥ −1` and
/// `|κ_j| ≤ θ_j`. Dimension one only.
pub fn verify_h3prime(spec: &GeneratorSpec, sampler: &StateSampler, n_samples: usize) -> Result<HypothesisReport> {
    let comp = spec.comparison.as_ref().ok_or_else(|| {
        Error::config(format!(
            "model '{}' has no comparison data; the (H3′) check needs κ and θ",
            spec.id
        ))
    })?;
    if spec.d != 1 {
        return Err(Error::domain(format!("(H3′) is checked in dimension one only, model '{}' has d = {}", spec.id, spec.d)));
    }
    if n_samples == 0 {
        return Err(Error::config("n_samples must be at least 1"));
    }
    let (k, a) = (spec.k, spec.n_atoms());
    if comp.theta.len() != a {
        return Err(Error::config(format!(
            "model '{}': θ has {} entries for {a} atoms",
            spec.id,
            comp.theta.len()
        )));
    }
    let mut rng = sampler.rng();
    let inputs: Vec<_> = (0..n_samples)
        .map(|_| {
            let t = rng.random_range(0.0..=sampler.t_max);
            let mut y = vec![0.0; 1];
            let mut z = vec![0.0; k];
            let mut psi = vec![0.0; a];
            let mut phi = vec![0.0; a];
            StateSampler::fill(&mut rng, &mut y, sampler.y_range);
            StateSampler::fill(&mut rng, &mut z, sampler.z_range);
            StateSampler::fill(&mut rng, &mut psi, sampler.psi_range);
            StateSampler::fill(&mut rng, &mut phi, sampler.psi_range);
            (t, y, z, psi, phi)
        })
        .collect();
    let rows = inputs
        .into_par_iter()
        .map(|(t, y, z, psi, phi)| {
            let f1 = spec.eval_vec(t, &y, &z, &psi);
            check_finite(spec, &f1, t, &y, &z, &psi)?;
            let f2 = spec.eval_vec(t, &y, &z, &phi);
            check_finite(spec, &f2, t, &y, &z, &phi)?;
            let args = DriverArgs { t, y: &y, z: &z, psi: &psi };
            let mut rhs = 0.0;
            let mut kmin = f64::INFINITY;
            let mut texcess = f64::NEG_INFINITY;
            for j in 0..a {
                let kj = (comp.kappa)(&args, &phi, j);
                if !kj.is_finite() {
                    return Err(Error::Model(format!(
                        "model '{}': κ_{j} is not finite at t = {t}, psi = {psi:?}, phi = {phi:?}",
                        spec.id
                    )));
                }
                rhs += (psi[j] - phi[j]) * kj * spec.intensities[j];
                kmin = kmin.min(kj);
                texcess = texcess.max(kj.abs() - comp.theta[j]);
            }
            let gap = f1[0] - f2[0] - rhs;
            let scale = 1.0 + f1[0].abs() + f2[0].abs();
            let violated = gap > SLACK * scale || kmin < -1.0 - SLACK || texcess > SLACK;
            Ok((Sample { t, a: psi, b: phi, value: gap, violated }, kmin, texcess))
        })
        .collect::<Result<Vec<_>>>()?;
    let kappa_min = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let theta_excess = rows.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let samples = rows.into_iter().map(|r| r.0).collect();
    let mut report = summarize("H3'", spec, 0.0, samples);
    report.kappa_min = Some(if a == 0 { 0.0 } else { kappa_min });
    report.theta_excess = Some(if a == 0 { 0.0 } else { theta_excess });
    Ok(report)
}

/// Removes the monotonicity constant: `f̄(t, y, z, ψ) = e^{αt} f(t, e^{−αt}y,
/// e^{−αt}z, e^{−αt}ψ) − αy` and `ξ̄ = e^{αT} ξ`. `K` is unchanged and `κ̄`
/// reads its arguments through the same scaling. The solutions relate by
/// `(Y, Z, ψ, M) = e^{−αt}(Ȳ, Z̄, ψ̄, M̄)`.
pub fn shift_alpha_to_zero(spec: &GeneratorSpec, xi: &TerminalSpec, horizon: f64) -> Result<(GeneratorSpec, TerminalSpec)> {
    rescale(spec, xi, horizon, spec.alpha, 0.0)
}

/// Inverse of [`shift_alpha_to_zero`]: restores the original monotonicity
/// constant `alpha`.
pub fn unshift_alpha(spec: &GeneratorSpec, xi: &TerminalSpec, horizon: f64, alpha: f64) -> Result<(GeneratorSpec, TerminalSpec)> {
    rescale(spec, xi, horizon, -alpha, alpha)
}

/// `f̄ = e^{at} f(t, e^{−at}·) − a y` with declared constant `new_alpha`.
fn rescale(
    spec: &GeneratorSpec,
    xi: &TerminalSpec,
    horizon: f64,
    a: f64,
    new_alpha: f64,
) -> Result<(GeneratorSpec, TerminalSpec)> {
    if !a.is_finite() || !horizon.is_finite() {
        return Err(Error::config(format!("alpha shift needs finite α and T (α = {a}, T = {horizon})")));
    }
    if a == 0.0 {
        let mut s = spec.clone();
        s.alpha = new_alpha;
        return Ok((s, xi.clone()));
    }
    let inner = spec.eval.clone();
    let eval: DriverFn = Arc::new(move |args: &DriverArgs, out: &mut [f64]| {
        let s = (-a * args.t).exp();
        let y: Vec<f64> = args.y.iter().map(|v| v * s).collect();
        let z: Vec<f64> = args.z.iter().map(|v| v * s).collect();
        let psi: Vec<f64> = args.psi.iter().map(|v| v * s).collect();
        inner(&DriverArgs { t: args.t, y: &y, z: &z, psi: &psi }, out);
        let e = (a * args.t).exp();
        for (o, yv) in out.iter_mut().zip(args.y) {
            *o = e * *o - a * yv;
        }
    });
    let comparison = spec.comparison.as_ref().map(|c| {
        let kappa = c.kappa.clone();
        ComparisonData {
            kappa: Arc::new(move |args: &DriverArgs, phi: &[f64], j| {
                let s = (-a * args.t).exp();
                let y: Vec<f64> = args.y.iter().map(|v| v * s).collect();
                let z: Vec<f64> = args.z.iter().map(|v| v * s).collect();
                let psi: Vec<f64> = args.psi.iter().map(|v| v * s).collect();
                let phi: Vec<f64> = phi.iter().map(|v| v * s).collect();
                kappa(&DriverArgs { t: args.t, y: &y, z: &z, psi: &psi }, &phi, j)
            }),
            theta: c.theta.clone(),
        }
    });
    let spec_bar = GeneratorSpec {
        id: format!("shift({}, {a})", spec.id),
        alpha: new_alpha,
        eval,
        comparison,
        ..spec.clone()
    };
    let xi_bar = xi.scaled((a * horizon).exp());
    Ok((spec_bar, xi_bar))
}
