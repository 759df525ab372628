//! Least-squares conditional expectations on a per-step feature matrix.
//!
//! Two basis families are available: polynomials of total degree at most
//! `g` in standardized features, and indicators of a hypercube partition
//! (equal-width bins per feature; integer-valued features are binned by
//! value). A ridge term `1e−10 · trace/dim` is always added to the normal
//! equations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{PathEnsemble, StateCube, REDUCE_CHUNK};

pub const RIDGE: f64 = 1e-10;
const MAX_CELLS: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisFamily {
    Polynomial { degree: usize },
    Partition { bins: usize },
}

/// Which parts of the path state feed the basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub w: bool,
    pub counts: bool,
    /// `None` lets the solver decide from the terminal condition.
    pub aux: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub features: FeatureSet,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            family: BasisFamily::Polynomial { degree: 2 },
            features: FeatureSet { w: true, counts: true, aux: None },
        }
    }
}

impl BasisSpec {
    pub fn polynomial(degree: usize) -> Self {
        Self { family: BasisFamily::Polynomial { degree }, ..Default::default() }
    }

    pub fn partition(bins: usize) -> Self {
        Self { family: BasisFamily::Partition { bins }, ..Default::default() }
    }

    pub fn with_features(mut self, w: bool, counts: bool, aux: Option<bool>) -> Self {
        self.features = FeatureSet { w, counts, aux };
        self
    }

    /// Parses `poly:G[:LIST]` or `partition:B[:LIST]` where `LIST` is a
    /// comma-separated subset of `w`, `counts`, `aux`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::config(format!("basis: cannot parse '{s}' (expected poly:G[:w,counts,aux] or partition:B[:...])"));
        if parts.len() < 2 || parts.len() > 3 {
            return Err(bad());
        }
        let n: usize = parts[1].parse().map_err(|_| bad())?;
        let family = match parts[0] {
            "poly" => BasisFamily::Polynomial { degree: n },
            "partition" if n >= 1 => BasisFamily::Partition { bins: n },
            _ => return Err(bad()),
        };
        let features = match parts.get(2) {
            None => FeatureSet { w: true, counts: true, aux: None },
            Some(list) => {
                let mut f = FeatureSet { w: false, counts: false, aux: Some(false) };
                for item in list.split(',') {
                    match item.trim() {
                        "w" => f.w = true,
                        "counts" => f.counts = true,
                        "aux" => f.aux = Some(true),
                        _ => return Err(bad()),
                    }
                }
                f
            }
        };
        Ok(Self { family, features })
    }

    pub fn id(&self) -> String {
        let fam = match self.family {
            BasisFamily::Polynomial { degree } => format!("poly:{degree}"),
            BasisFamily::Partition { bins } => format!("partition:{bins}"),
        };
        let mut f = Vec::new();
        if self.features.w {
            f.push("w");
        }
        if self.features.counts {
            f.push("counts");
        }
        match self.features.aux {
            Some(true) => f.push("aux"),
            None => f.push("aux?"),
            Some(false) => {}
        }
        format!("{fam}:{}", f.join(","))
    }
}

/// Feature matrix `[p][nf]` at one grid node.
#[derive(Clone, Debug)]
pub struct Features {
    pub n_paths: usize,
    pub nf: usize,
    pub data: Vec<f64>,
}

impl Features {
    /// Features of node `i`. `extra` appends one more column per path.
    pub fn at_node(
        cube: &StateCube,
        i: usize,
        set: &FeatureSet,
        use_aux: bool,
        extra: Option<&dyn Fn(usize) -> f64>,
    ) -> Self {
        let nf = if set.w { cube.k } else { 0 }
            + if set.counts { cube.n_atoms } else { 0 }
            + usize::from(use_aux)
            + usize::from(extra.is_some());
        let mut data = Vec::with_capacity(cube.n_paths * nf);
        for p in 0..cube.n_paths {
            if set.w {
                data.extend_from_slice(cube.w_at(p, i));
            }
            if set.counts {
                data.extend_from_slice(cube.counts_at(p, i));
            }
            if use_aux {
                data.push(cube.aux_sum_at(p, i));
            }
            if let Some(g) = extra {
                data.push(g(p));
            }
        }
        Self { n_paths: cube.n_paths, nf, data }
    }

    fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.nf..(p + 1) * self.nf]
    }
}

pub fn path_weights(e: &PathEnsemble) -> Vec<f64> {
    (0..e.n_paths).map(|p| e.weight(p)).collect()
}

/// Result of one regression: fitted values `[p][m]` and the basis size.
pub struct Fitted {
    pub values: Vec<f64>,
    pub n_basis: usize,
}

/// Regresses the `m` targets `[p][m]` on the basis built from `features`.
///
/// Targets are centered by their weighted means before fitting, so the
/// ridge never biases the constant part of the fit.
pub fn regress(family: BasisFamily, features: &Features, targets: &[f64], m: usize, weights: &[f64]) -> Result<Fitted> {
    let np = features.n_paths;
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::numeric("regression: all path weights vanish"));
    }
    let mut means = vec![0.0; m];
    for p in 0..np {
        for t in 0..m {
            means[t] += weights[p] * targets[p * m + t];
        }
    }
    means.iter_mut().for_each(|x| *x /= wsum);
    let centered: Vec<f64> = targets.iter().enumerate().map(|(idx, v)| v - means[idx % m]).collect();
    let mut fit = match family {
        BasisFamily::Polynomial { degree } => regress_poly(degree, features, &centered, m, weights)?,
        BasisFamily::Partition { bins } => regress_partition(bins, features, &centered, m, weights)?,
    };
    fit.values.iter_mut().enumerate().for_each(|(idx, v)| *v += means[idx % m]);
    Ok(fit)
}

fn exponents(nf: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(nf: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == nf {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(nf, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(nf, degree, &mut Vec::new(), &mut out);
    out.sort_by_key(|e| (e.iter().sum::<usize>(), std::cmp::Reverse(e.clone())));
    out
}

fn regress_poly(degree: usize, features: &Features, targets: &[f64], m: usize, weights: &[f64]) -> Result<Fitted> {
    let np = features.n_paths;
    // Standardize; constant features are dropped.
    let wsum: f64 = weights.iter().sum();
    let mut keep = Vec::new();
    let mut mean = Vec::new();
    let mut sd = Vec::new();
    for c in 0..features.nf {
        let mu = (0..np).map(|p| weights[p] * features.row(p)[c]).sum::<f64>() / wsum;
        let var = (0..np).map(|p| weights[p] * (features.row(p)[c] - mu).powi(2)).sum::<f64>() / wsum;
        if var > 1e-24 * (1.0 + mu * mu) {
            keep.push(c);
            mean.push(mu);
            sd.push(var.sqrt());
        }
    }
    let exps = exponents(keep.len(), degree);
    let nb = exps.len();
    let phi = |p: usize, out: &mut [f64]| {
        let row = features.row(p);
        let x: Vec<f64> = keep.iter().enumerate().map(|(q, &c)| (row[c] - mean[q]) / sd[q]).collect();
        for (b, e) in exps.iter().enumerate() {
            let mut v = 1.0;
            for (q, &pw) in e.iter().enumerate() {
                if pw > 0 {
                    v *= x[q].powi(pw as i32);
                }
            }
            out[b] = v;
        }
    };

    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..np.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut a = vec![0.0; nb * nb];
            let mut bm = vec![0.0; nb * m];
            let mut f = vec![0.0; nb];
            for p in c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(np) {
                phi(p, &mut f);
                let w = weights[p];
                for r in 0..nb {
                    let wr = w * f[r];
                    for s in r..nb {
                        a[r * nb + s] += wr * f[s];
                    }
                    for t in 0..m {
                        bm[r * m + t] += wr * targets[p * m + t];
                    }
                }
            }
            (a, bm)
        })
        .collect();
    let mut a = vec![0.0; nb * nb];
    let mut bm = vec![0.0; nb * m];
    for (ca, cb) in chunks {
        for (x, y) in a.iter_mut().zip(ca) {
            *x += y;
        }
        for (x, y) in bm.iter_mut().zip(cb) {
            *x += y;
        }
    }
    for r in 0..nb {
        for s in 0..r {
            a[r * nb + s] = a[s * nb + r];
        }
    }
    let trace: f64 = (0..nb).map(|r| a[r * nb + r]).sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::numeric(format!("regression: degenerate design (trace {trace})")));
    }
    let ridge = RIDGE * trace / nb as f64;
    let mut am = DMatrix::from_row_slice(nb, nb, &a);
    for r in 0..nb {
        am[(r, r)] += ridge;
    }
    let chol = am
        .cholesky()
        .ok_or_else(|| Error::numeric(format!("regression: design matrix of size {nb} is not positive definite after ridge")))?;
    let mut coef = vec![0.0; nb * m];
    for t in 0..m {
        let rhs = DVector::from_iterator(nb, (0..nb).map(|r| bm[r * m + t]));
        let sol = chol.solve(&rhs);
        for r in 0..nb {
            coef[r * m + t] = sol[r];
        }
    }
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::numeric("regression: non-finite coefficients"));
    }
    let mut values = vec![0.0; np * m];
    values.par_chunks_mut(m.max(1)).enumerate().for_each(|(p, out)| {
        let mut f = vec![0.0; nb];
        phi(p, &mut f);
        for t in 0..m {
            out[t] = (0..nb).map(|r| f[r] * coef[r * m + t]).sum();
        }
    });
    Ok(Fitted { values, n_basis: nb })
}

fn regress_partition(bins: usize, features: &Features, targets: &[f64], m: usize, weights: &[f64]) -> Result<Fitted> {
    let np = features.n_paths;
    let mut radix = Vec::with_capacity(features.nf);
    let mut lo = Vec::new();
    let mut width = Vec::new();
    let mut integer = Vec::new();
    for c in 0..features.nf {
        let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut int = true;
        for p in 0..np {
            let v = features.row(p)[c];
            mn = mn.min(v);
            mx = mx.max(v);
            int &= v.fract() == 0.0;
        }
        let nbins = if mx == mn {
            1
        } else if int {
            bins.min((mx - mn) as usize + 1)
        } else {
            bins
        };
        radix.push(nbins);
        lo.push(mn);
        width.push(if nbins > 1 { (mx - mn) / nbins as f64 } else { 1.0 });
        integer.push(int);
    }
    let cells: usize = radix.iter().try_fold(1usize, |acc, &r| acc.checked_mul(r)).unwrap_or(usize::MAX);
    if cells > MAX_CELLS {
        return Err(Error::config(format!("basis: partition has {cells} cells (limit {MAX_CELLS}); reduce bins")));
    }
    let cell_of = |p: usize| -> usize {
        let row = features.row(p);
        let mut id = 0;
        for c in 0..features.nf {
            let b = if radix[c] == 1 {
                0
            } else if integer[c] {
                ((row[c] - lo[c]) as usize).min(radix[c] - 1)
            } else {
                (((row[c] - lo[c]) / width[c]) as usize).min(radix[c] - 1)
            };
            id = id * radix[c] + b;
        }
        id
    };
    let ids: Vec<usize> = (0..np).into_par_iter().map(cell_of).collect();
    let mut wsum = vec![0.0; cells];
    let mut tsum = vec![0.0; cells * m];
    for p in 0..np {
        let c = ids[p];
        wsum[c] += weights[p];
        for t in 0..m {
            tsum[c * m + t] += weights[p] * targets[p * m + t];
        }
    }
    let total: f64 = wsum.iter().sum();
    if !(total > 0.0) {
        return Err(Error::numeric("regression: all path weights vanish"));
    }
    let ridge = RIDGE * total / cells as f64;
    let mut values = vec![0.0; np * m];
    values.par_chunks_mut(m.max(1)).enumerate().for_each(|(p, out)| {
        let c = ids[p];
        for t in 0..m {
            out[t] = tsum[c * m + t] / (wsum[c] + ridge);
        }
    });
    Ok(Fitted { values, n_basis: wsum.iter().filter(|&&w| w > 0.0).count() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feats(rows: &[Vec<f64>]) -> Features {
        Features { n_paths: rows.len(), nf: rows[0].len(), data: rows.concat() }
    }

    #[test]
    fn basis_parse_and_id() {
        let b = BasisSpec::parse("poly:3:w,aux").unwrap();
        assert_eq!(b.family, BasisFamily::Polynomial { degree: 3 });
        assert_eq!(b.features, FeatureSet { w: true, counts: false, aux: Some(true) });
        assert_eq!(b.id(), "poly:3:w,aux");
        assert!(BasisSpec::parse("partition:0").is_err());
        assert!(BasisSpec::parse("spline:3").is_err());
        assert!(BasisSpec::parse("poly:2:foo").is_err());
        assert_eq!(BasisSpec::default().id(), "poly:2:w,counts,aux?");
    }

    #[test]
    fn exponent_count_is_binomial() {
        assert_eq!(exponents(3, 2).len(), 10);
        assert_eq!(exponents(0, 2).len(), 1);
        assert_eq!(exponents(2, 3).len(), 10);
    }

    #[test]
    fn quadratic_target_is_reproduced() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 10.0 - 2.0, ((i * 7) % 11) as f64]).collect();
        let targets: Vec<f64> = rows.iter().map(|r| 1.0 + 2.0 * r[0] - r[0] * r[1] + 0.5 * r[1] * r[1]).collect();
        let w = vec![1.0 / 50.0; 50];
        let fit = regress(BasisFamily::Polynomial { degree: 2 }, &feats(&rows), &targets, 1, &w).unwrap();
        for (a, b) in fit.values.iter().zip(&targets) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_features_reduce_to_the_mean() {
        let rows = vec![vec![0.0, 0.0]; 4];
        let targets = vec![1.0, 2.0, 3.0, 6.0];
        let w = vec![0.25; 4];
        let fit = regress(BasisFamily::Polynomial { degree: 2 }, &feats(&rows), &targets, 1, &w).unwrap();
        assert_eq!(fit.n_basis, 1);
        assert!(fit.values.iter().all(|v| (v - 3.0).abs() < 1e-14));
    }

    #[test]
    fn partition_gives_cell_means() {
        let rows = vec![vec![0.0], vec![0.0], vec![1.0], vec![3.0]];
        let targets = vec![1.0, 3.0, 5.0, 7.0];
        let w = vec![0.25; 4];
        let fit = regress(BasisFamily::Partition { bins: 8 }, &feats(&rows), &targets, 1, &w).unwrap();
        let v = &fit.values;
        assert!((v[0] - 2.0).abs() < 1e-8 && (v[1] - 2.0).abs() < 1e-8);
        assert!((v[2] - 5.0).abs() < 1e-8 && (v[3] - 7.0).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn regression_residual_is_orthogonal_to_constants(ys in proptest::collection::vec(-5.0f64..5.0, 8..40)) {
            let rows: Vec<Vec<f64>> = (0..ys.len()).map(|i| vec![(i as f64).sin()]).collect();
            let w = vec![1.0 / ys.len() as f64; ys.len()];
            let fit = regress(BasisFamily::Polynomial { degree: 1 }, &feats(&rows), &ys, 1, &w).unwrap();
            let r: f64 = ys.iter().zip(&fit.values).map(|(y, v)| y - v).sum::<f64>() / ys.len() as f64;
            prop_assert!(r.abs() < 1e-7 * (1.0 + ys.iter().map(|y| y.abs()).sum::<f64>()));
        }
    }
}
