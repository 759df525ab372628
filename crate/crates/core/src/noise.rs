//! Driving noise: time grids, finite-atom jump activity and seeded path
//! ensembles.
//!
//! Every path owns a ChaCha8 substream selected by its index, so path `p`
//! depends only on `(seed, p)`: ensembles of different sizes share their
//! prefixes and the result does not depend on the rayon thread count.
//!
//! # Ensemble file layout (`BJL1`)
//!
//! All integers and floats are little-endian.
//!
//! | field      | type  |
//! |------------|-------|
//! | magic      | `b"BJL1"` |
//! | version    | u32 (currently 1) |
//! | n_paths    | u64 |
//! | n_steps    | u64 |
//! | k          | u64 |
//! | n_atoms    | u64 |
//! | seed       | u64 |
//!
//! followed by f64 arrays in this order: grid times (`n_steps + 1`),
//! atom intensities (`n_atoms`), the noise law tag (1 value, 0 = Gaussian,
//! 1 = two-point), `dW` (`n_paths · n_steps · k`, path-major), jump counts
//! as f64 (`n_paths · n_steps · n_atoms`) and the auxiliary signs
//! (`n_paths · n_steps`).

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENSEMBLE_MAGIC: &[u8; 4] = b"BJL1";
pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;
pub const SUBSTREAM_SCHEME: &str = "chacha8-stream-per-path-v1";

/// Number of paths per chunk in fixed-order parallel reductions.
pub(crate) const REDUCE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    max_step: f64,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::config("grid: at least one time node is required"));
        }
        if times[0] != 0.0 {
            return Err(Error::config("grid: t_0 must be 0"));
        }
        let mut max_step = 0.0f64;
        for w in times.windows(2) {
            let h = w[1] - w[0];
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::config(format!(
                    "grid: times must be strictly increasing and finite (found {} then {})",
                    w[0], w[1]
                )));
            }
            max_step = max_step.max(h);
        }
        Ok(Self { times, max_step })
    }

    pub fn uniform(n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps > 0 && !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!("grid: horizon must be positive, got {horizon}")));
        }
        let h = if n_steps == 0 { 0.0 } else { horizon / n_steps as f64 };
        let mut times: Vec<f64> = (0..=n_steps).map(|i| i as f64 * h).collect();
        if n_steps > 0 {
            times[n_steps] = horizon;
        }
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    pub fn max_step(&self) -> f64 {
        self.max_step
    }

    /// The grid restricted to its first `n_steps` steps.
    pub fn truncate(&self, n_steps: usize) -> TimeGrid {
        let n = n_steps.min(self.n_steps());
        TimeGrid::new(self.times[..=n].to_vec()).expect("prefix of a valid grid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub mark: Vec<f64>,
    pub intensity: f64,
}

/// Finite-atom Lévy measure `μ = Σ_j λ_j δ_{u_j}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JumpActivity {
    atoms: Vec<Atom>,
}

impl JumpActivity {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        for (j, a) in atoms.iter().enumerate() {
            if !(a.intensity > 0.0) || !a.intensity.is_finite() {
                return Err(Error::config(format!(
                    "activity: atom {j} has intensity {} (must be > 0)",
                    a.intensity
                )));
            }
            if a.mark.is_empty() || a.mark.iter().all(|&u| u == 0.0) {
                return Err(Error::config(format!("activity: atom {j} has a zero mark")));
            }
            if a.mark.iter().any(|u| !u.is_finite()) {
                return Err(Error::config(format!("activity: atom {j} has a non-finite mark")));
            }
            if a.mark.len() != atoms[0].mark.len() {
                return Err(Error::config("activity: marks must share one dimension"));
            }
            if atoms[..j].iter().any(|b| b.mark == a.mark) {
                return Err(Error::config(format!("activity: atom {j} duplicates an earlier mark")));
            }
        }
        let act = Self { atoms };
        if !act.small_jump_integral().is_finite() {
            return Err(Error::config("activity: ∫(1 ∧ |u|²) μ(du) is not finite"));
        }
        Ok(act)
    }

    pub fn empty() -> Self {
        Self { atoms: Vec::new() }
    }

    /// Unit-mark atoms with the given intensities.
    pub fn from_intensities(intensities: &[f64]) -> Result<Self> {
        Self::new(
            intensities
                .iter()
                .enumerate()
                .map(|(j, &l)| Atom { mark: vec![(j + 1) as f64], intensity: l })
                .collect(),
        )
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn intensities(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.intensity).collect()
    }

    pub fn total_intensity(&self) -> f64 {
        self.atoms.iter().map(|a| a.intensity).sum()
    }

    /// `Σ_j (1 ∧ |u_j|²) λ_j`.
    pub fn small_jump_integral(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| {
                let u2: f64 = a.mark.iter().map(|u| u * u).sum();
                u2.min(1.0) * a.intensity
            })
            .sum()
    }
}

/// Per-step increment law of the simulated noises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseLaw {
    /// `ΔW ~ N(0, Δt)`, jump counts `~ Poisson(λΔt)`.
    Gaussian,
    /// `ΔW = ±√Δt` with equal probability, jump indicator `~ Bernoulli(λΔt)`.
    /// Matches the exact tree oracle's discrete filtration.
    TwoPoint,
}

impl NoiseLaw {
    /// Variance of one compensated jump increment `ΔN − λΔt`.
    pub fn count_variance(self, intensity: f64, dt: f64) -> f64 {
        let m = intensity * dt;
        match self {
            NoiseLaw::Gaussian => m,
            NoiseLaw::TwoPoint => m * (1.0 - m),
        }
    }

    fn tag(self) -> f64 {
        match self {
            NoiseLaw::Gaussian => 0.0,
            NoiseLaw::TwoPoint => 1.0,
        }
    }
}

/// Seeded Monte Carlo sample of the driving noises on a grid.
///
/// Arrays are path-major: `dw[(p * n_steps + i) * k + c]`,
/// `counts[(p * n_steps + i) * n_atoms + j]`, `aux[p * n_steps + i]`.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub k: usize,
    pub n_atoms: usize,
    pub intensities: Vec<f64>,
    pub seed: u64,
    pub law: NoiseLaw,
    pub scheme: String,
    pub dw: Vec<f64>,
    pub counts: Vec<u32>,
    pub aux: Vec<f64>,
    /// Path probabilities for exact enumerations; `None` means equal weights.
    pub weights: Option<Vec<f64>>,
}

pub fn simulate(
    grid: &TimeGrid,
    k: usize,
    activity: &JumpActivity,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_with_law(grid, k, activity, n_paths, seed, NoiseLaw::Gaussian)
}

pub fn simulate_with_law(
    grid: &TimeGrid,
    k: usize,
    activity: &JumpActivity,
    n_paths: usize,
    seed: u64,
    law: NoiseLaw,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::config("paths: n_paths must be at least 1"));
    }
    if k == 0 {
        return Err(Error::config("k: Brownian dimension must be at least 1"));
    }
    let n = grid.n_steps();
    let a = activity.n_atoms();
    let lambdas = activity.intensities();
    if law == NoiseLaw::TwoPoint {
        for (j, &l) in lambdas.iter().enumerate() {
            let q = l * grid.max_step();
            if q >= 1.0 {
                return Err(Error::config(format!(
                    "activity: two-point law needs λΔt < 1, atom {j} has {q}"
                )));
            }
        }
    }
    let poissons: Vec<Vec<Option<Poisson<f64>>>> = (0..n)
        .map(|i| {
            lambdas
                .iter()
                .map(|&l| {
                    let m = l * grid.dt(i);
                    if law == NoiseLaw::Gaussian && m > 0.0 {
                        Some(Poisson::new(m).expect("positive Poisson mean"))
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();

    let per_path: Vec<(Vec<f64>, Vec<u32>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut dw_p = Vec::with_capacity(n * k);
            let mut cnt_p = Vec::with_capacity(n * a);
            let mut aux_p = Vec::with_capacity(n);
            for i in 0..n {
                let h = grid.dt(i);
                let sh = h.sqrt();
                for _ in 0..k {
                    dw_p.push(match law {
                        NoiseLaw::Gaussian => {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            g * sh
                        }
                        NoiseLaw::TwoPoint => {
                            if rng.random::<bool>() {
                                sh
                            } else {
                                -sh
                            }
                        }
                    });
                }
                for j in 0..a {
                    cnt_p.push(match law {
                        NoiseLaw::Gaussian => match &poissons[i][j] {
                            Some(d) => d.sample(&mut rng) as u32,
                            None => 0,
                        },
                        NoiseLaw::TwoPoint => u32::from(rng.random::<f64>() < lambdas[j] * h),
                    });
                }
                aux_p.push(if rng.random::<bool>() { 1.0 } else { -1.0 });
            }
            (dw_p, cnt_p, aux_p)
        })
        .collect();
    let mut dw = Vec::with_capacity(n_paths * n * k);
    let mut counts = Vec::with_capacity(n_paths * n * a);
    let mut aux = Vec::with_capacity(n_paths * n);
    for (d, c, x) in per_path {
        dw.extend(d);
        counts.extend(c);
        aux.extend(x);
    }

    Ok(PathEnsemble {
        grid: grid.clone(),
        n_paths,
        k,
        n_atoms: a,
        intensities: lambdas,
        seed,
        law,
        scheme: SUBSTREAM_SCHEME.to_string(),
        dw,
        counts,
        aux,
        weights: None,
    })
}

impl PathEnsemble {
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    #[inline]
    pub fn dw_at(&self, p: usize, i: usize) -> &[f64] {
        let s = (p * self.n_steps() + i) * self.k;
        &self.dw[s..s + self.k]
    }

    #[inline]
    pub fn counts_at(&self, p: usize, i: usize) -> &[u32] {
        let s = (p * self.n_steps() + i) * self.n_atoms;
        &self.counts[s..s + self.n_atoms]
    }

    #[inline]
    pub fn aux_at(&self, p: usize, i: usize) -> f64 {
        self.aux[p * self.n_steps() + i]
    }

    /// `ΔN_j − λ_j Δt` for path `p`, step `i`, atom `j`.
    #[inline]
    pub fn compensated_at(&self, p: usize, i: usize, j: usize) -> f64 {
        self.counts_at(p, i)[j] as f64 - self.intensities[j] * self.grid.dt(i)
    }

    /// Normalised path weight (sums to one over the ensemble).
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

    /// The ensemble restricted to the first `n_steps` steps of its grid.
    pub fn truncate(&self, n_steps: usize) -> PathEnsemble {
        let n_old = self.n_steps();
        let n = n_steps.min(n_old);
        let mut dw = Vec::with_capacity(self.n_paths * n * self.k);
        let mut counts = Vec::with_capacity(self.n_paths * n * self.n_atoms);
        let mut aux = Vec::with_capacity(self.n_paths * n);
        for p in 0..self.n_paths {
            dw.extend_from_slice(&self.dw[p * n_old * self.k..(p * n_old + n) * self.k]);
            counts.extend_from_slice(
                &self.counts[p * n_old * self.n_atoms..(p * n_old + n) * self.n_atoms],
            );
            aux.extend_from_slice(&self.aux[p * n_old..p * n_old + n]);
        }
        PathEnsemble {
            grid: self.grid.truncate(n),
            dw,
            counts,
            aux,
            intensities: self.intensities.clone(),
            scheme: self.scheme.clone(),
            weights: self.weights.clone(),
            ..*self
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.weights.is_some() {
            return Err(Error::config("ensemble: weighted (exact) ensembles cannot be persisted"));
        }
        let n = self.n_steps();
        w.write_all(ENSEMBLE_MAGIC)?;
        w.write_all(&ENSEMBLE_FORMAT_VERSION.to_le_bytes())?;
        for v in [self.n_paths as u64, n as u64, self.k as u64, self.n_atoms as u64, self.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut put = |x: f64| w.write_all(&x.to_le_bytes());
        for &t in self.grid.times() {
            put(t)?;
        }
        for &l in &self.intensities {
            put(l)?;
        }
        put(self.law.tag())?;
        for &x in &self.dw {
            put(x)?;
        }
        for &c in &self.counts {
            put(c as f64)?;
        }
        for &x in &self.aux {
            put(x)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(Error::config("ensemble file: bad magic (expected BJL1)"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != ENSEMBLE_FORMAT_VERSION {
            return Err(Error::config(format!("ensemble file: unsupported version {version}")));
        }
        let mut u = [0u64; 5];
        for slot in u.iter_mut() {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            *slot = u64::from_le_bytes(b8);
        }
        let [n_paths, n, k, a, seed] = u;
        let (n_paths, n, k, a) = (n_paths as usize, n as usize, k as usize, a as usize);
        let mut read_f64s = |len: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let grid = TimeGrid::new(read_f64s(n + 1)?)?;
        let intensities = read_f64s(a)?;
        let law = match read_f64s(1)?[0] {
            t if t == 0.0 => NoiseLaw::Gaussian,
            t if t == 1.0 => NoiseLaw::TwoPoint,
            t => return Err(Error::config(format!("ensemble file: unknown law tag {t}"))),
        };
        let dw = read_f64s(n_paths * n * k)?;
        let counts = read_f64s(n_paths * n * a)?.into_iter().map(|c| c as u32).collect();
        let aux = read_f64s(n_paths * n)?;
        Ok(PathEnsemble {
            grid,
            n_paths,
            k,
            n_atoms: a,
            intensities,
            seed,
            law,
            scheme: SUBSTREAM_SCHEME.to_string(),
            dw,
            counts,
            aux,
            weights: None,
        })
    }
}

/// `ΔN − λΔt` for every path, step and atom, laid out like `counts`.
pub fn compensated_increments(ensemble: &PathEnsemble, activity: &JumpActivity) -> Result<Vec<f64>> {
    if activity.n_atoms() != ensemble.n_atoms {
        return Err(Error::config(format!(
            "activity has {} atoms but the ensemble was simulated with {}",
            activity.n_atoms(),
            ensemble.n_atoms
        )));
    }
    let n = ensemble.n_steps();
    let a = ensemble.n_atoms;
    let lambdas = activity.intensities();
    Ok(ensemble
        .counts
        .iter()
        .enumerate()
        .map(|(idx, &c)| {
            let i = (idx / a) % n;
            let j = idx % a;
            c as f64 - lambdas[j] * ensemble.grid.dt(i)
        })
        .collect())
}

/// Cumulative state of every path at every grid node: Brownian position,
/// per-atom jump counts and the running sum of auxiliary signs.
#[derive(Clone, Debug)]
pub struct StateCube {
    pub n_paths: usize,
    pub n_steps: usize,
    pub k: usize,
    pub n_atoms: usize,
    /// `[p][i in 0..=n][k]`
    pub w: Vec<f64>,
    /// `[p][i in 0..=n][n_atoms]`
    pub counts: Vec<f64>,
    /// `[p][i in 0..=n]`
    pub aux_sum: Vec<f64>,
}

impl StateCube {
    pub fn new(e: &PathEnsemble) -> Self {
        let n = e.n_steps();
        let (k, a) = (e.k, e.n_atoms);
        let mut w = vec![0.0; e.n_paths * (n + 1) * k];
        let mut counts = vec![0.0; e.n_paths * (n + 1) * a];
        let mut aux_sum = vec![0.0; e.n_paths * (n + 1)];
        for p in 0..e.n_paths {
            for i in 0..n {
                let (b0, b1) = ((p * (n + 1) + i) * k, (p * (n + 1) + i + 1) * k);
                for c in 0..k {
                    w[b1 + c] = w[b0 + c] + e.dw_at(p, i)[c];
                }
                let (c0, c1) = ((p * (n + 1) + i) * a, (p * (n + 1) + i + 1) * a);
                for j in 0..a {
                    counts[c1 + j] = counts[c0 + j] + e.counts_at(p, i)[j] as f64;
                }
                aux_sum[p * (n + 1) + i + 1] = aux_sum[p * (n + 1) + i] + e.aux_at(p, i);
            }
        }
        Self { n_paths: e.n_paths, n_steps: n, k, n_atoms: a, w, counts, aux_sum }
    }

    #[inline]
    pub fn w_at(&self, p: usize, i: usize) -> &[f64] {
        let s = (p * (self.n_steps + 1) + i) * self.k;
        &self.w[s..s + self.k]
    }

    #[inline]
    pub fn counts_at(&self, p: usize, i: usize) -> &[f64] {
        let s = (p * (self.n_steps + 1) + i) * self.n_atoms;
        &self.counts[s..s + self.n_atoms]
    }

    #[inline]
    pub fn aux_sum_at(&self, p: usize, i: usize) -> f64 {
        self.aux_sum[p * (self.n_steps + 1) + i]
    }
}

/// Per-step sample moments of an ensemble with their standard errors.
#[derive(Clone, Debug, Serialize)]
pub struct StepMoments {
    pub step: usize,
    pub dt: f64,
    pub dw_mean: Vec<f64>,
    pub dw_var: Vec<f64>,
    pub dw_var_se: Vec<f64>,
    pub count_mean: Vec<f64>,
    pub count_mean_se: Vec<f64>,
    pub aux_mean: f64,
    pub aux_sq_mean: f64,
}

pub fn step_moments(e: &PathEnsemble) -> Vec<StepMoments> {
    let n = e.n_steps();
    let np = e.n_paths as f64;
    (0..n)
        .map(|i| {
            let mut dw_mean = vec![0.0; e.k];
            let mut dw_m2 = vec![0.0; e.k];
            let mut dw_m4 = vec![0.0; e.k];
            let mut c_mean = vec![0.0; e.n_atoms];
            let mut c_m2 = vec![0.0; e.n_atoms];
            let (mut a1, mut a2) = (0.0, 0.0);
            for p in 0..e.n_paths {
                for (c, &x) in e.dw_at(p, i).iter().enumerate() {
                    dw_mean[c] += x;
                    dw_m2[c] += x * x;
                    dw_m4[c] += x.powi(4);
                }
                for (j, &x) in e.counts_at(p, i).iter().enumerate() {
                    c_mean[j] += x as f64;
                    c_m2[j] += (x as f64).powi(2);
                }
                let x = e.aux_at(p, i);
                a1 += x;
                a2 += x * x;
            }
            let dw_var: Vec<f64> = dw_m2.iter().map(|s| s / np).collect();
            let dw_var_se = (0..e.k)
                .map(|c| ((dw_m4[c] / np - dw_var[c].powi(2)).max(0.0) / np).sqrt())
                .collect();
            let count_mean: Vec<f64> = c_mean.iter().map(|s| s / np).collect();
            let count_mean_se = (0..e.n_atoms)
                .map(|j| ((c_m2[j] / np - count_mean[j].powi(2)).max(0.0) / np).sqrt())
                .collect();
            StepMoments {
                step: i,
                dt: e.grid.dt(i),
                dw_mean: dw_mean.iter().map(|s| s / np).collect(),
                dw_var,
                dw_var_se,
                count_mean,
                count_mean_se,
                aux_mean: a1 / np,
                aux_sq_mean: a2 / np,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_atom(l: f64) -> JumpActivity {
        JumpActivity::new(vec![Atom { mark: vec![1.0], intensity: l }]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.4]).is_err());
        assert!(TimeGrid::new(vec![0.1, 0.5]).is_err());
        let g = TimeGrid::new(vec![0.0, 0.1, 0.5]).unwrap();
        assert!((g.max_step() - 0.4).abs() < 1e-15);
        assert_eq!(TimeGrid::uniform(4, 1.0).unwrap().times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn activity_validation() {
        assert!(JumpActivity::new(vec![Atom { mark: vec![1.0], intensity: 0.0 }]).is_err());
        assert!(JumpActivity::new(vec![Atom { mark: vec![1.0], intensity: -1.0 }]).is_err());
        assert!(JumpActivity::new(vec![Atom { mark: vec![0.0], intensity: 1.0 }]).is_err());
        let dup = vec![
            Atom { mark: vec![1.0], intensity: 1.0 },
            Atom { mark: vec![1.0], intensity: 2.0 },
        ];
        assert!(JumpActivity::new(dup).is_err());
        let act = JumpActivity::new(vec![
            Atom { mark: vec![0.5], intensity: 2.0 },
            Atom { mark: vec![3.0], intensity: 1.0 },
        ])
        .unwrap();
        assert!((act.small_jump_integral() - (0.25 * 2.0 + 1.0)).abs() < 1e-15);
        assert_eq!(act.total_intensity(), 3.0);
    }

    #[test]
    fn zero_step_grid_gives_empty_arrays() {
        let g = TimeGrid::uniform(0, 1.0).unwrap();
        let e = simulate(&g, 2, &one_atom(1.0), 7, 1).unwrap();
        assert!(e.dw.is_empty() && e.counts.is_empty() && e.aux.is_empty());
        assert_eq!(e.n_paths, 7);
    }

    #[test]
    fn empty_activity_has_no_jumps() {
        let g = TimeGrid::uniform(8, 1.0).unwrap();
        let e = simulate(&g, 1, &JumpActivity::empty(), 100, 3).unwrap();
        assert!(e.counts.is_empty());
        assert_eq!(e.n_atoms, 0);
        assert!(compensated_increments(&e, &JumpActivity::empty()).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = TimeGrid::uniform(2, 1.0).unwrap();
        assert!(simulate(&g, 1, &JumpActivity::empty(), 0, 1).is_err());
        assert!(simulate(&g, 0, &JumpActivity::empty(), 1, 1).is_err());
        let e = simulate(&g, 1, &one_atom(1.0), 4, 1).unwrap();
        assert!(compensated_increments(&e, &JumpActivity::empty()).is_err());
    }

    #[test]
    fn compensated_examples() {
        let g = TimeGrid::uniform(1, 0.1).unwrap();
        let mut e = simulate(&g, 1, &one_atom(1.0), 2, 5).unwrap();
        e.counts = vec![0, 1];
        let c = compensated_increments(&e, &one_atom(1.0)).unwrap();
        assert!((c[0] + 0.1).abs() < 1e-15);
        assert!((c[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn poisson_mean_matches_intensity() {
        // λ = 2, Δt = 0.5: Poisson(1) has mean 1 and variance 1.
        let g = TimeGrid::uniform(1, 0.5).unwrap();
        let n = 100_000;
        let e = simulate(&g, 1, &one_atom(2.0), n, 11).unwrap();
        let mean = e.counts.iter().map(|&c| c as f64).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 5.0 * (1.0 / n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn same_seed_is_bit_identical_and_prefix_stable() {
        let g = TimeGrid::uniform(5, 1.0).unwrap();
        let act = one_atom(1.5);
        let a = simulate(&g, 2, &act, 300, 42).unwrap();
        let b = simulate(&g, 2, &act, 300, 42).unwrap();
        assert_eq!(a.dw, b.dw);
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.aux, b.aux);
        let c = simulate(&g, 2, &act, 100, 42).unwrap();
        assert_eq!(&a.dw[..c.dw.len()], &c.dw[..]);
        assert_eq!(&a.counts[..c.counts.len()], &c.counts[..]);
        let d = simulate(&g, 2, &act, 300, 43).unwrap();
        assert_ne!(a.dw, d.dw);
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let g = TimeGrid::uniform(6, 1.0).unwrap();
        let act = one_atom(1.0);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate(&g, 1, &act, 500, 9).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.dw, b.dw);
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.aux, b.aux);
    }

    #[test]
    fn persistence_round_trip() {
        let g = TimeGrid::uniform(3, 0.75).unwrap();
        let act = one_atom(1.0);
        let e = simulate_with_law(&g, 2, &act, 20, 4, NoiseLaw::TwoPoint).unwrap();
        let mut buf = Vec::new();
        e.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"BJL1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        let header = 8 + 5 * 8;
        let floats = 4 + 1 + 1 + 20 * 3 * 2 + 20 * 3 + 20 * 3;
        assert_eq!(buf.len(), header + 8 * floats);
        let r = PathEnsemble::read_from(&buf[..]).unwrap();
        assert_eq!(r.dw, e.dw);
        assert_eq!(r.counts, e.counts);
        assert_eq!(r.aux, e.aux);
        assert_eq!(r.law, NoiseLaw::TwoPoint);
        assert_eq!(r.grid, e.grid);
        assert!(PathEnsemble::read_from(&b"XXXX0000"[..]).is_err());
    }

    #[test]
    fn two_point_law_values() {
        let g = TimeGrid::uniform(4, 1.0).unwrap();
        let e = simulate_with_law(&g, 1, &one_atom(1.0), 50, 2, NoiseLaw::TwoPoint).unwrap();
        assert!(e.dw.iter().all(|&x| (x.abs() - 0.5).abs() < 1e-15));
        assert!(e.counts.iter().all(|&c| c <= 1));
        let g2 = TimeGrid::uniform(1, 1.0).unwrap();
        assert!(simulate_with_law(&g2, 1, &one_atom(1.0), 5, 2, NoiseLaw::TwoPoint).is_err());
    }
}
