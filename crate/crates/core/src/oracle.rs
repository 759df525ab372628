//! Exact backward induction on a small discrete filtration.
//!
//! Each step branches on `k` Brownian signs (`±√Δt`, probability ½ each),
//! one jump indicator per atom (probability `q_j = λ_jΔt`) and one
//! auxiliary sign. A child digit `c` packs these as bits: the low `k` bits
//! are the Brownian signs (1 means `+√Δt`), the next `n_atoms` bits the
//! jump indicators and the top bit the auxiliary sign (1 means `+1`).
//! Node `m` of layer `i` has children `m·b + c` in layer `i + 1`.
//!
//! The orthogonal increment `ΔM` depends on the child, so it is stored on
//! the child node: `dm[i + 1][m·b + c]` belongs to the step leaving node
//! `m` of layer `i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DriverArgs, GeneratorSpec, TerminalSpec};
use crate::noise::{NoiseLaw, PathEnsemble, StateCube, TimeGrid};
use crate::solver::{Provenance, SolutionEnsemble};
use crate::step::{solve_implicit, StepParams};

pub const DEFAULT_NODE_BUDGET: usize = 2_000_000;
pub const CONTRACTION_THRESHOLD: f64 = 0.5;
pub const TREE_SCHEME: &str = "tree-enumeration-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub grid: TimeGrid,
    pub k: usize,
    pub intensities: Vec<f64>,
    pub budget: usize,
}

/// Increments and probabilities of every child digit for one step.
#[derive(Clone, Debug)]
pub struct ChildTable {
    pub dt: f64,
    pub prob: Vec<f64>,
    /// `[c][k]`
    pub dw: Vec<f64>,
    /// `[c][n_atoms]`, 0 or 1
    pub jump: Vec<f64>,
    pub aux: Vec<f64>,
    pub q: Vec<f64>,
}

impl TreeModel {
    pub fn new(grid: TimeGrid, k: usize, intensities: Vec<f64>) -> Result<Self> {
        Self::with_budget(grid, k, intensities, DEFAULT_NODE_BUDGET)
    }

    pub fn uniform(n_steps: usize, dt: f64, k: usize, intensities: &[f64]) -> Result<Self> {
        Self::new(TimeGrid::uniform(n_steps, n_steps as f64 * dt)?, k, intensities.to_vec())
    }

    pub fn with_budget(grid: TimeGrid, k: usize, intensities: Vec<f64>, budget: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("k: the tree needs at least one Brownian coordinate"));
        }
        for (j, &l) in intensities.iter().enumerate() {
            for i in 0..grid.n_steps() {
                let q = l * grid.dt(i);
                if !(q > 0.0 && q < 1.0) {
                    return Err(Error::config(format!(
                        "activity: tree needs q = λΔt in (0, 1), atom {} has {q} on step {i}",
                        j + 1
                    )));
                }
            }
        }
        let tree = Self { grid, k, intensities, budget };
        let nodes = tree.n_nodes();
        match nodes {
            Some(n) if n <= budget => Ok(tree),
            _ => Err(Error::Resource(format!(
                "tree with branching {} and {} steps has {} nodes, budget is {budget}",
                tree.branching(),
                tree.n_steps(),
                nodes.map_or("more than 2^64".to_string(), |n| n.to_string())
            ))),
        }
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn n_atoms(&self) -> usize {
        self.intensities.len()
    }

    pub fn bits(&self) -> usize {
        self.k + self.n_atoms() + 1
    }

    pub fn branching(&self) -> usize {
        1 << self.bits()
    }

    pub fn layer_size(&self, i: usize) -> usize {
        self.branching().pow(i as u32)
    }

    pub fn n_leaves(&self) -> usize {
        self.layer_size(self.n_steps())
    }

    /// Total node count over all layers, `None` on overflow.
    pub fn n_nodes(&self) -> Option<usize> {
        let b = self.branching();
        let mut total: usize = 0;
        let mut layer: usize = 1;
        for i in 0..=self.n_steps() {
            total = total.checked_add(layer)?;
            if i < self.n_steps() {
                layer = layer.checked_mul(b)?;
            }
        }
        Some(total)
    }

    pub fn child_table(&self, i: usize) -> ChildTable {
        let (k, a, b) = (self.k, self.n_atoms(), self.branching());
        let dt = self.grid.dt(i);
        let sh = dt.sqrt();
        let q: Vec<f64> = self.intensities.iter().map(|l| l * dt).collect();
        let mut t = ChildTable {
            dt,
            prob: vec![0.0; b],
            dw: vec![0.0; b * k],
            jump: vec![0.0; b * a],
            aux: vec![0.0; b],
            q: q.clone(),
        };
        for c in 0..b {
            let mut pr = 1.0;
            for col in 0..k {
                t.dw[c * k + col] = if c >> col & 1 == 1 { sh } else { -sh };
                pr *= 0.5;
            }
            for j in 0..a {
                let on = c >> (k + j) & 1 == 1;
                t.jump[c * a + j] = if on { 1.0 } else { 0.0 };
                pr *= if on { q[j] } else { 1.0 - q[j] };
            }
            t.aux[c] = if c >> (k + a) & 1 == 1 { 1.0 } else { -1.0 };
            t.prob[c] = pr * 0.5;
        }
        t
    }

    /// Every leaf as a weighted path of the two-point law.
    pub fn paths(&self) -> PathEnsemble {
        let (n, k, a, b) = (self.n_steps(), self.k, self.n_atoms(), self.branching());
        let np = self.n_leaves();
        let tables: Vec<ChildTable> = (0..n).map(|i| self.child_table(i)).collect();
        let mut dw = vec![0.0; np * n * k];
        let mut counts = vec![0u32; np * n * a];
        let mut aux = vec![0.0; np * n];
        let mut weights = vec![0.0; np];
        for p in 0..np {
            let mut w = 1.0;
            for (i, t) in tables.iter().enumerate() {
                let c = (p / b.pow((n - 1 - i) as u32)) % b;
                dw[(p * n + i) * k..(p * n + i + 1) * k].copy_from_slice(&t.dw[c * k..(c + 1) * k]);
                for j in 0..a {
                    counts[(p * n + i) * a + j] = t.jump[c * a + j] as u32;
                }
                aux[p * n + i] = t.aux[c];
                w *= t.prob[c];
            }
            weights[p] = w;
        }
        PathEnsemble {
            grid: self.grid.clone(),
            n_paths: np,
            k,
            n_atoms: a,
            intensities: self.intensities.clone(),
            seed: 0,
            law: NoiseLaw::TwoPoint,
            scheme: TREE_SCHEME.to_string(),
            dw,
            counts,
            aux,
            weights: Some(weights),
        }
    }

    /// Node of layer `i` on the path through leaf `p`.
    pub fn ancestor(&self, p: usize, i: usize) -> usize {
        p / self.layer_size(self.n_steps() - i)
    }
}

/// Exact projection of a child-indexed increment.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    /// `E[Y_next | node]`, `[d]`
    pub mean: Vec<f64>,
    /// `[d][k]`
    pub z: Vec<f64>,
    /// `[d][n_atoms]`
    pub psi: Vec<f64>,
    /// `[c][d]`
    pub dm: Vec<f64>,
}

/// Splits `values[c][d]` into its conditional mean, `Z·ΔW`, `Σψ_j(I_j − q_j)`
/// and the orthogonal rest.
pub fn decompose_increment(table: &ChildTable, values: &[f64], d: usize) -> Decomposition {
    let b = table.prob.len();
    let k = table.dw.len() / b;
    let a = table.q.len();
    let mut mean = vec![0.0; d];
    for c in 0..b {
        for r in 0..d {
            mean[r] += table.prob[c] * values[c * d + r];
        }
    }
    let mut z = vec![0.0; d * k];
    let mut psi = vec![0.0; d * a];
    for c in 0..b {
        for r in 0..d {
            let x = table.prob[c] * (values[c * d + r] - mean[r]);
            for col in 0..k {
                z[r * k + col] += x * table.dw[c * k + col];
            }
            for j in 0..a {
                psi[r * a + j] += x * (table.jump[c * a + j] - table.q[j]);
            }
        }
    }
    z.iter_mut().for_each(|v| *v /= table.dt);
    for r in 0..d {
        for j in 0..a {
            psi[r * a + j] /= table.q[j] * (1.0 - table.q[j]);
        }
    }
    let mut dm = vec![0.0; b * d];
    for c in 0..b {
        for r in 0..d {
            let mut recon = mean[r];
            for col in 0..k {
                recon += z[r * k + col] * table.dw[c * k + col];
            }
            for j in 0..a {
                recon += psi[r * a + j] * (table.jump[c * a + j] - table.q[j]);
            }
            dm[c * d + r] = values[c * d + r] - recon;
        }
    }
    Decomposition { mean, z, psi, dm }
}

/// The quadruple on every node of a tree. Layer vectors are node-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TreeSolution {
    pub tree: TreeModel,
    pub d: usize,
    pub spec_id: String,
    pub xi_id: String,
    pub solved: bool,
    /// `y[i]`: `[m][d]` for layers `0..=n`.
    pub y: Vec<Vec<f64>>,
    /// `z[i]`: `[m][d·k]` for layers `0..n`.
    pub z: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
    /// `dm[i]`: `[m][d]` for layers `1..=n`; `dm[0]` is empty.
    pub dm: Vec<Vec<f64>>,
    pub max_inner_iterations: usize,
}

impl TreeSolution {
    /// All-zero quadruple, not marked as solved.
    pub fn empty(tree: &TreeModel, d: usize) -> Self {
        let n = tree.n_steps();
        let (k, a) = (tree.k, tree.n_atoms());
        Self {
            tree: tree.clone(),
            d,
            spec_id: String::new(),
            xi_id: String::new(),
            solved: false,
            y: (0..=n).map(|i| vec![0.0; tree.layer_size(i) * d]).collect(),
            z: (0..n).map(|i| vec![0.0; tree.layer_size(i) * d * k]).collect(),
            psi: (0..n).map(|i| vec![0.0; tree.layer_size(i) * d * a]).collect(),
            f: (0..n).map(|i| vec![0.0; tree.layer_size(i) * d]).collect(),
            dm: (0..=n).map(|i| if i == 0 { Vec::new() } else { vec![0.0; tree.layer_size(i) * d] }).collect(),
            max_inner_iterations: 0,
        }
    }

    pub fn y0(&self) -> &[f64] {
        &self.y[0][..self.d]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sol: TreeSolution = serde_json::from_str(s)?;
        let n = sol.tree.n_steps();
        let ok = sol.y.len() == n + 1
            && sol.z.len() == n
            && sol.psi.len() == n
            && sol.f.len() == n
            && sol.dm.len() == n + 1
            && (0..=n).all(|i| sol.y[i].len() == sol.tree.layer_size(i) * sol.d);
        if !ok {
            return Err(Error::config("tree solution JSON has inconsistent layer sizes"));
        }
        Ok(sol)
    }

    /// Leaves as a weighted path ensemble together with the quadruple along
    /// every leaf path.
    pub fn to_ensembles(&self) -> Result<(PathEnsemble, SolutionEnsemble)> {
        if !self.solved {
            return Err(Error::State("tree solution has not been solved".into()));
        }
        let tree = &self.tree;
        let e = tree.paths();
        let (n, d, k, a) = (tree.n_steps(), self.d, tree.k, tree.n_atoms());
        let mut sol = SolutionEnsemble::zeros(&e, d);
        for p in 0..e.n_paths {
            for i in 0..=n {
                let m = tree.ancestor(p, i);
                sol.y[(p * (n + 1) + i) * d..(p * (n + 1) + i + 1) * d].copy_from_slice(&self.y[i][m * d..(m + 1) * d]);
                if i < n {
                    sol.z[(p * n + i) * d * k..(p * n + i + 1) * d * k]
                        .copy_from_slice(&self.z[i][m * d * k..(m + 1) * d * k]);
                    sol.psi[(p * n + i) * d * a..(p * n + i + 1) * d * a]
                        .copy_from_slice(&self.psi[i][m * d * a..(m + 1) * d * a]);
                    sol.f[(p * n + i) * d..(p * n + i + 1) * d].copy_from_slice(&self.f[i][m * d..(m + 1) * d]);
                    let child = tree.ancestor(p, i + 1);
                    for r in 0..d {
                        sol.m[(p * (n + 1) + i + 1) * d + r] =
                            sol.m[(p * (n + 1) + i) * d + r] + self.dm[i + 1][child * d + r];
                    }
                }
            }
        }
        sol.provenance = Provenance {
            spec_id: self.spec_id.clone(),
            xi_id: self.xi_id.clone(),
            basis_id: "exact".into(),
            seed: 0,
            n_paths: e.n_paths,
            outer_iterations: 0,
            max_inner_iterations: self.max_inner_iterations,
            scheme: TREE_SCHEME.into(),
        };
        Ok((e, sol))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OracleParams {
    pub step: StepParams,
    /// Initial guess offset added to the conditional mean in the implicit step.
    pub guess_offset: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self { step: StepParams::default(), guess_offset: 0.0 }
    }
}

/// `max_i Δt_i (α⁺ + K(1 + √Λ))`.
pub fn contraction_level(tree: &TreeModel, spec: &GeneratorSpec) -> f64 {
    let lam: f64 = tree.intensities.iter().sum();
    tree.grid.max_step() * (spec.alpha.max(0.0) + spec.lip_k * (1.0 + lam.sqrt()))
}

fn check_compatible(tree: &TreeModel, spec: &GeneratorSpec, xi: &TerminalSpec) -> Result<()> {
    if spec.k != tree.k || spec.intensities != tree.intensities {
        return Err(Error::config(format!(
            "model '{}' (k = {}, intensities {:?}) does not match the tree (k = {}, intensities {:?})",
            spec.id, spec.k, spec.intensities, tree.k, tree.intensities
        )));
    }
    if xi.d != spec.d {
        return Err(Error::config(format!("terminal '{}' has d = {} but model has d = {}", xi.id, xi.d, spec.d)));
    }
    let level = contraction_level(tree, spec);
    if level > CONTRACTION_THRESHOLD {
        return Err(Error::config(format!(
            "grid: contraction threshold Δt(α⁺ + K(1+√Λ)) = {level} exceeds {CONTRACTION_THRESHOLD}; refine the tree"
        )));
    }
    Ok(())
}

pub fn terminal_layer(tree: &TreeModel, xi: &TerminalSpec) -> Result<Vec<f64>> {
    let e = tree.paths();
    let cube = StateCube::new(&e);
    xi.values(&e, &cube, tree.n_steps())
}

pub fn solve_exact(tree: &TreeModel, spec: &GeneratorSpec, xi: &TerminalSpec) -> Result<TreeSolution> {
    solve_exact_with(tree, spec, xi, &OracleParams::default())
}

pub fn solve_exact_with(
    tree: &TreeModel,
    spec: &GeneratorSpec,
    xi: &TerminalSpec,
    params: &OracleParams,
) -> Result<TreeSolution> {
    check_compatible(tree, spec, xi)?;
    let leaves = terminal_layer(tree, xi)?;
    backward(tree, spec, &leaves, None, params, &xi.id)
}

fn backward(
    tree: &TreeModel,
    spec: &GeneratorSpec,
    leaves: &[f64],
    frozen: Option<&TreeSolution>,
    params: &OracleParams,
    xi_id: &str,
) -> Result<TreeSolution> {
    let n = tree.n_steps();
    let (d, k, a, b) = (spec.d, tree.k, tree.n_atoms(), tree.branching());
    let mut sol = TreeSolution::empty(tree, d);
    sol.spec_id = spec.id.clone();
    sol.xi_id = xi_id.to_string();
    sol.y[n].copy_from_slice(leaves);
    for i in (0..n).rev() {
        let table = tree.child_table(i);
        let t = tree.grid.times()[i];
        let next = &sol.y[i + 1];
        let out: Vec<Result<(Decomposition, Vec<f64>, Vec<f64>, usize)>> = (0..tree.layer_size(i))
            .into_par_iter()
            .map(|m| {
                let dec = decompose_increment(&table, &next[m * b * d..(m + 1) * b * d], d);
                let (zf, pf) = match frozen {
                    Some(fr) => (&fr.z[i][m * d * k..(m + 1) * d * k], &fr.psi[i][m * d * a..(m + 1) * d * a]),
                    None => (&dec.z[..], &dec.psi[..]),
                };
                let guess: Vec<f64> = dec.mean.iter().map(|v| v + params.guess_offset).collect();
                let step = solve_implicit(
                    &dec.mean,
                    table.dt,
                    &guess,
                    params.step,
                    |y, o| spec.eval_into(&DriverArgs { t, y, z: zf, psi: pf }, o),
                    || format!("tree layer {i}, node {m}"),
                )?;
                if step.f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Model(format!("model '{}' is not finite at tree layer {i}, node {m}", spec.id)));
                }
                Ok((dec, step.y, step.f, step.iterations))
            })
            .collect();
        for (m, r) in out.into_iter().enumerate() {
            let (dec, y, f, it) = r?;
            sol.max_inner_iterations = sol.max_inner_iterations.max(it);
            sol.y[i][m * d..(m + 1) * d].copy_from_slice(&y);
            sol.f[i][m * d..(m + 1) * d].copy_from_slice(&f);
            sol.z[i][m * d * k..(m + 1) * d * k].copy_from_slice(&dec.z);
            sol.psi[i][m * d * a..(m + 1) * d * a].copy_from_slice(&dec.psi);
            sol.dm[i + 1][m * b * d..(m + 1) * b * d].copy_from_slice(&dec.dm);
        }
    }
    sol.solved = true;
    Ok(sol)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PicardInit {
    Zero,
    /// Independent standard normal `Z`, `ψ` on every node.
    Random(u64),
}

/// Picard iteration on the tree: each pass solves the backward recursion
/// with `(Z, ψ)` frozen at the previous pass. Returns the limit and the
/// number of passes.
pub fn picard_exact(
    tree: &TreeModel,
    spec: &GeneratorSpec,
    xi: &TerminalSpec,
    init: PicardInit,
    max_passes: usize,
    tol: f64,
) -> Result<(TreeSolution, usize)> {
    check_compatible(tree, spec, xi)?;
    let leaves = terminal_layer(tree, xi)?;
    let mut cur = TreeSolution::empty(tree, spec.d);
    if let PicardInit::Random(seed) = init {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in cur.z.iter_mut().chain(cur.psi.iter_mut()) {
            layer.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        }
    }
    let params = OracleParams::default();
    for pass in 1..=max_passes {
        let next = backward(tree, spec, &leaves, Some(&cur), &params, &xi.id)?;
        let diff = next
            .y
            .iter()
            .zip(&cur.y)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0f64, f64::max);
        cur = next;
        if diff <= tol {
            return Ok((cur, pass));
        }
    }
    Err(Error::numeric(format!("tree Picard iteration did not settle within {max_passes} passes")))
}

/// Largest violations of the discrete identity and of the orthogonality
/// relations over all nodes.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct TreeCheck {
    pub identity: f64,
    pub orth_w: f64,
    pub orth_jump: f64,
    pub mean_dm: f64,
}

impl TreeCheck {
    pub fn max(&self) -> f64 {
        self.identity.max(self.orth_w).max(self.orth_jump).max(self.mean_dm)
    }
}

pub fn check_identities(sol: &TreeSolution) -> Result<TreeCheck> {
    if !sol.solved {
        return Err(Error::State("tree solution has not been solved".into()));
    }
    let tree = &sol.tree;
    let (d, k, a, b) = (sol.d, tree.k, tree.n_atoms(), tree.branching());
    let mut out = TreeCheck::default();
    for i in 0..tree.n_steps() {
        let t = tree.child_table(i);
        let layer = (0..tree.layer_size(i))
            .into_par_iter()
            .map(|m| {
                let mut c_out = TreeCheck::default();
                for r in 0..d {
                    let y = sol.y[i][m * d + r];
                    let f = sol.f[i][m * d + r];
                    let mut ew = vec![0.0; k];
                    let mut ej = vec![0.0; a];
                    let mut em = 0.0;
                    for c in 0..b {
                        let ch = m * b + c;
                        let dm = sol.dm[i + 1][ch * d + r];
                        let mut rhs = sol.y[i + 1][ch * d + r] + f * t.dt - dm;
                        for col in 0..k {
                            rhs -= sol.z[i][(m * d + r) * k + col] * t.dw[c * k + col];
                            ew[col] += t.prob[c] * dm * t.dw[c * k + col];
                        }
                        for j in 0..a {
                            let comp = t.jump[c * a + j] - t.q[j];
                            rhs -= sol.psi[i][(m * d + r) * a + j] * comp;
                            ej[j] += t.prob[c] * dm * comp;
                        }
                        em += t.prob[c] * dm;
                        c_out.identity = c_out.identity.max((y - rhs).abs());
                    }
                    c_out.orth_w = ew.iter().fold(c_out.orth_w, |s, v| s.max(v.abs()));
                    c_out.orth_jump = ej.iter().fold(c_out.orth_jump, |s, v| s.max(v.abs()));
                    c_out.mean_dm = c_out.mean_dm.max(em.abs());
                }
                c_out
            })
            .reduce(TreeCheck::default, |x, y| TreeCheck {
                identity: x.identity.max(y.identity),
                orth_w: x.orth_w.max(y.orth_w),
                orth_jump: x.orth_jump.max(y.orth_jump),
                mean_dm: x.mean_dm.max(y.mean_dm),
            });
        out = TreeCheck {
            identity: out.identity.max(layer.identity),
            orth_w: out.orth_w.max(layer.orth_w),
            orth_jump: out.orth_jump.max(layer.orth_jump),
            mean_dm: out.mean_dm.max(layer.mean_dm),
        };
    }
    Ok(out)
}

/// Exact expectations over all leaves.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TreeNorms {
    pub p: f64,
    /// `E sup_t |Y_t|^p`
    pub sup_y: f64,
    /// `E (Σ|Z|²Δt)^{p/2}`
    pub hp_z: f64,
    /// `E (Σ‖ψ‖²Δt)^{p/2}` with `‖ψ‖² = Σ_j ψ_j²λ_j`
    pub lp_psi: f64,
    /// `E (Σ_j Σ ψ_j² ΔN_j)^{p/2}`
    pub lp_psi_pi: f64,
    /// `E ([M]_T)^{p/2}`
    pub mp_m: f64,
}

pub fn pathwise_norms(sol: &TreeSolution, p: f64) -> Result<TreeNorms> {
    if !sol.solved {
        return Err(Error::State("pathwise norms need a solved tree".into()));
    }
    if !(p > 0.0) {
        return Err(Error::domain(format!("p must be positive, got {p}")));
    }
    let tree = &sol.tree;
    let (n, d, k, a, b) = (tree.n_steps(), sol.d, tree.k, tree.n_atoms(), tree.branching());
    let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    // Running per-node accumulators [sup|Y|, ΣZ², Σ‖ψ‖², Σψ²ΔN, [M]] and probability.
    let mut acc: Vec<[f64; 5]> = vec![[norm2(&sol.y[0][..d]).sqrt(), 0.0, 0.0, 0.0, 0.0]];
    let mut prob = vec![1.0];
    for i in 0..n {
        let t = tree.child_table(i);
        let size = tree.layer_size(i + 1);
        let mut next = vec![[0.0; 5]; size];
        let mut next_prob = vec![0.0; size];
        for m in 0..tree.layer_size(i) {
            let z2 = norm2(&sol.z[i][m * d * k..(m + 1) * d * k]);
            let mut psi2 = 0.0;
            for r in 0..d {
                for j in 0..a {
                    psi2 += sol.psi[i][(m * d + r) * a + j].powi(2) * tree.intensities[j];
                }
            }
            for c in 0..b {
                let ch = m * b + c;
                let mut jump2 = 0.0;
                for r in 0..d {
                    for j in 0..a {
                        jump2 += sol.psi[i][(m * d + r) * a + j].powi(2) * t.jump[c * a + j];
                    }
                }
                let y = norm2(&sol.y[i + 1][ch * d..(ch + 1) * d]).sqrt();
                let s = acc[m];
                next[ch] = [
                    s[0].max(y),
                    s[1] + z2 * t.dt,
                    s[2] + psi2 * t.dt,
                    s[3] + jump2,
                    s[4] + norm2(&sol.dm[i + 1][ch * d..(ch + 1) * d]),
                ];
                next_prob[ch] = prob[m] * t.prob[c];
            }
        }
        acc = next;
        prob = next_prob;
    }
    let h = p / 2.0;
    let mut out = [0.0; 5];
    for (s, w) in acc.iter().zip(&prob) {
        out[0] += w * s[0].powf(p);
        for q in 1..5 {
            out[q] += w * s[q].powf(h);
        }
    }
    Ok(TreeNorms { p, sup_y: out[0], hp_z: out[1], lp_psi: out[2], lp_psi_pi: out[3], mp_m: out[4] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generator_by_id, terminal_by_id, ModelContext, TerminalMode};
    use std::sync::Arc;

    fn ctx(k: usize, lam: &[f64]) -> ModelContext {
        ModelContext::new(1, k, lam.to_vec())
    }

    #[test]
    fn budget_and_q_validation() {
        assert!(matches!(TreeModel::uniform(12, 0.1, 2, &[1.0]), Err(Error::Resource(_))));
        assert!(matches!(TreeModel::uniform(2, 0.5, 1, &[2.0]), Err(Error::Config(_))));
        let t = TreeModel::uniform(3, 0.1, 1, &[1.0]).unwrap();
        assert_eq!(t.branching(), 8);
        assert_eq!(t.n_nodes(), Some(1 + 8 + 64 + 512));
    }

    #[test]
    fn child_probabilities_sum_to_one() {
        let t = TreeModel::uniform(2, 0.2, 2, &[1.0, 0.5]).unwrap();
        let ct = t.child_table(0);
        assert!((ct.prob.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let w = t.paths().weights.unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn constant_terminal_is_trivial() {
        let c = ctx(1, &[1.0]);
        let tree = TreeModel::uniform(3, 0.1, 1, &[1.0]).unwrap();
        let sol = solve_exact(&tree, &generator_by_id("zero", &c).unwrap(), &terminal_by_id("const:2.5", &c).unwrap()).unwrap();
        for layer in &sol.y {
            assert!(layer.iter().all(|&v| v == 2.5));
        }
        for layer in sol.z.iter().chain(&sol.psi).chain(&sol.dm) {
            assert!(layer.iter().all(|&v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn aux_terminal_is_carried_by_m() {
        let c = ctx(1, &[1.0]);
        let tree = TreeModel::uniform(2, 0.25, 1, &[1.0]).unwrap();
        let sol = solve_exact(&tree, &generator_by_id("zero", &c).unwrap(), &terminal_by_id("aux1", &c).unwrap()).unwrap();
        assert_eq!(sol.y0(), &[0.0]);
        for layer in sol.z.iter().chain(&sol.psi) {
            assert!(layer.iter().all(|&v| v.abs() < 1e-15));
        }
        let b = tree.branching();
        for c in 0..b {
            let expect = if c >> 2 & 1 == 1 { 1.0 } else { -1.0 };
            assert!((sol.dm[1][c] - expect).abs() < 1e-15);
        }
        assert!(sol.dm[2].iter().all(|&v| v.abs() < 1e-15));
        let norms = pathwise_norms(&sol, 2.0).unwrap();
        assert!((norms.mp_m - 1.0).abs() < 1e-14);
    }

    #[test]
    fn implicit_recursion_matches_hand_value() {
        let c = ModelContext::new(1, 1, vec![]);
        let spec = generator_by_id("linear:-1,0,0", &c).unwrap();
        let tree = TreeModel::uniform(4, 0.25, 1, &[]).unwrap();
        let sol = solve_exact(&tree, &spec, &terminal_by_id("one", &c).unwrap()).unwrap();
        assert!((sol.y0()[0] - 0.4096).abs() < 1e-12);
    }

    #[test]
    fn decomposition_examples() {
        let tree = TreeModel::uniform(1, 0.2, 2, &[1.5]).unwrap();
        let t = tree.child_table(0);
        let b = tree.branching();
        let two_w: Vec<f64> = (0..b).map(|c| 2.0 * t.dw[c * 2]).collect();
        let dec = decompose_increment(&t, &two_w, 1);
        assert!((dec.z[0] - 2.0).abs() < 1e-14 && dec.z[1].abs() < 1e-14 && dec.psi[0].abs() < 1e-14);
        assert!(dec.dm.iter().all(|v| v.abs() < 1e-14));

        let jump: Vec<f64> = (0..b).map(|c| 3.0 * (t.jump[c] - t.q[0])).collect();
        let dec = decompose_increment(&t, &jump, 1);
        assert!((dec.psi[0] - 3.0).abs() < 1e-13 && dec.z.iter().all(|v| v.abs() < 1e-14));

        let prod: Vec<f64> = (0..b).map(|c| t.dw[c * 2] * t.aux[c]).collect();
        let dec = decompose_increment(&t, &prod, 1);
        assert!(dec.z.iter().chain(&dec.psi).all(|v| v.abs() < 1e-14));
        for c in 0..b {
            assert!((dec.dm[c] - prod[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn z_energy_of_w_terminal() {
        let c = ctx(1, &[]);
        let tree = TreeModel::uniform(2, 0.3, 1, &[]).unwrap();
        let sol = solve_exact(&tree, &generator_by_id("zero", &c).unwrap(), &terminal_by_id("w", &c).unwrap()).unwrap();
        let norms = pathwise_norms(&sol, 2.0).unwrap();
        assert!((norms.hp_z - 0.6).abs() < 1e-14);
    }

    #[test]
    fn unsolved_tree_is_state_error() {
        let tree = TreeModel::uniform(2, 0.3, 1, &[]).unwrap();
        let empty = TreeSolution::empty(&tree, 1);
        assert!(matches!(pathwise_norms(&empty, 2.0), Err(Error::State(_))));
        assert!(matches!(empty.to_ensembles(), Err(Error::State(_))));
    }

    #[test]
    fn threshold_is_enforced() {
        let c = ctx(1, &[1.0]);
        let tree = TreeModel::uniform(2, 0.25, 1, &[1.0]).unwrap();
        let spec = generator_by_id("kappa-neg2", &c).unwrap();
        let err = solve_exact(&tree, &spec, &terminal_by_id("one", &c).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("contraction threshold")));
    }

    #[test]
    fn non_convergence_reports_node() {
        let c = ctx(1, &[]);
        let spec = GeneratorSpec::new("explode", 1, 1, vec![], 0.0, 0.0, Arc::new(|x: &DriverArgs, o: &mut [f64]| {
            o[0] = x.y[0].exp();
        }))
        .unwrap();
        let tree = TreeModel::uniform(2, 0.5, 1, &[]).unwrap();
        let xi = TerminalSpec::new("big", TerminalMode::State, 1, Arc::new(|_, o: &mut [f64]| o[0] = 5.0));
        let _ = c;
        let err = solve_exact(&tree, &spec, &xi).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("tree layer 1")), "{err}");
    }

    #[test]
    fn identities_hold_and_json_round_trips() {
        let c = ctx(1, &[1.0]);
        let tree = TreeModel::uniform(3, 0.1, 1, &[1.0]).unwrap();
        let spec = generator_by_id("sin:0.3", &c).unwrap();
        let sol = solve_exact(&tree, &spec, &terminal_by_id("mixed", &c).unwrap()).unwrap();
        assert!(check_identities(&sol).unwrap().max() < 1e-12);
        let back = TreeSolution::from_json(&sol.to_json().unwrap()).unwrap();
        assert_eq!(back.y, sol.y);
        assert_eq!(back.dm, sol.dm);
    }

    #[test]
    fn ensemble_view_matches_layers() {
        let c = ctx(1, &[1.0]);
        let tree = TreeModel::uniform(2, 0.2, 1, &[1.0]).unwrap();
        let sol = solve_exact(&tree, &generator_by_id("ohlm1", &c).unwrap(), &terminal_by_id("count", &c).unwrap()).unwrap();
        let (e, s) = sol.to_ensembles().unwrap();
        assert!(crate::solver::identity_residual(&s, &e) < 1e-13);
        let mean_y0: f64 = (0..e.n_paths).map(|p| e.weight(p) * s.y_at(p, 0)[0]).sum();
        assert!((mean_y0 - sol.y0()[0]).abs() < 1e-14);
    }
}
