use bsdelab::analysis::{self, apriori_ratio, compute_norms, linf_bound_check};
use bsdelab::calculus::{self, e_p_ratio, zero_set_check};
use bsdelab::linear::{self, Construction, LinearCoefficients, LinearParams, TimeFn};
use bsdelab::model::{
    generator_by_id, terminal_by_id, verify_lipschitz, verify_monotonicity, GeneratorSpec, HypothesisReport,
    StateSampler, TerminalSpec,
};
use bsdelab::noise::{simulate_with_law, step_moments, PathEnsemble};
use bsdelab::oracle::{self, check_identities, pathwise_norms, solve_exact, TreeModel};
use bsdelab::solver::{
    self, backward_solve, covariation_stats, identity_residual, picard_solve, HorizonParams, SolutionEnsemble,
    StoppingRule,
};
use bsdelab::suite::{self, SuiteParams};
use bsdelab::{Error, Result};
use serde_json::{json, Value};

use crate::config::Settings;
use crate::output::Artifacts;

/// What a subcommand hands back: the deterministic result block, whether
/// its own checks passed, and extra timing data for the metadata file.
pub struct Outcome {
    pub result: Value,
    pub pass: bool,
    pub timings: Value,
}

impl Outcome {
    fn ok(result: Value) -> Self {
        Self { result, pass: true, timings: Value::Null }
    }
}

fn models(s: &Settings, model: &str, terminal: &str) -> Result<(GeneratorSpec, TerminalSpec)> {
    let ctx = s.context()?;
    let spec = generator_by_id(model, &ctx)?;
    let xi = terminal_by_id(terminal, &ctx)?;
    if spec.d != xi.d {
        return Err(Error::config(format!("terminal: '{}' has d = {} but model '{}' has d = {}", xi.id, xi.d, spec.id, spec.d)));
    }
    Ok((spec, xi))
}

/// Checks the declared (H1) and (H3) constants of `spec` on sampled states.
fn hypotheses(s: &Settings, spec: &GeneratorSpec, horizon: f64) -> Result<Value> {
    let sampler = StateSampler { t_max: horizon, ..Default::default() };
    let h1 = verify_monotonicity(spec, &sampler, s.samples())?;
    let h3 = verify_lipschitz(spec, &sampler, s.samples())?;
    for r in [&h1, &h3] {
        reject_failed(r)?;
    }
    Ok(json!({ "sampler": sampler, "monotonicity": h1, "lipschitz": h3 }))
}

fn reject_failed(r: &HypothesisReport) -> Result<()> {
    if r.pass {
        return Ok(());
    }
    Err(Error::Model(format!(
        "model '{}' violates ({}) with the declared constant {}: empirical maximum {} over {} samples ({} violations)",
        r.model, r.hypothesis, r.declared, r.max_ratio, r.n_samples, r.violations
    )))
}

fn ensemble(s: &Settings) -> Result<PathEnsemble> {
    simulate_with_law(&s.grid()?, s.k(), &s.activity()?, s.paths()?, s.seed(), s.law()?)
}

fn tree(s: &Settings) -> Result<TreeModel> {
    let (n, t) = s.grid_shape()?;
    TreeModel::uniform(n, t / n as f64, s.k(), &s.intensities()?)
}

/// Monte Carlo or exact solution of the configured problem.
fn solve_problem(
    s: &Settings,
    spec: &GeneratorSpec,
    xi: &TerminalSpec,
) -> Result<(PathEnsemble, SolutionEnsemble, Value)> {
    if s.tree.unwrap_or(false) {
        let t = tree(s)?;
        let sol = solve_exact(&t, spec, xi)?;
        let checks = check_identities(&sol)?;
        let (e, sol) = sol.to_ensembles()?;
        let info = json!({ "method": "tree", "identity_checks": checks, "contraction_level": oracle::contraction_level(&t, spec) });
        return Ok((e, sol, info));
    }
    let e = ensemble(s)?;
    let basis = s.basis()?;
    let pp = s.picard_params()?;
    if s.picard.unwrap_or(false) {
        let (sol, trace) = picard_solve(spec, xi, &e, &basis, &pp)?;
        Ok((e, sol, json!({ "method": "picard", "picard": trace })))
    } else {
        let sol = backward_solve(spec, xi, &e, &basis, &pp)?;
        Ok((e, sol, json!({ "method": "backward" })))
    }
}

pub fn simulate(s: &Settings, art: &mut Artifacts) -> Result<Outcome> {
    let e = ensemble(s)?;
    let moments = step_moments(&e);
    let mut buf = Vec::new();
    e.write_to(&mut buf)?;
    art.add("ensemble.bjl", buf);
    Ok(Outcome::ok(json!({
        "n_paths": e.n_paths,
        "n_steps": e.n_steps(),
        "k": e.k,
        "intensities": e.intensities,
        "law": e.law,
        "scheme": e.scheme,
        "seed": e.seed,
        "step_moments": moments,
    })))
}

pub fn solve(s: &Settings, art: &mut Artifacts) -> Result<Outcome> {
    let (spec, xi) = models(s, s.model_id(), s.terminal_id())?;
    let (_, t) = s.grid_shape()?;
    let hyp = hypotheses(s, &spec, t)?;
    let (e, sol, info) = solve_problem(s, &spec, &xi)?;
    art.add_solution(&sol, &e, s.save_ensembles.unwrap_or(false))?;
    Ok(Outcome::ok(json!({
        "model": spec.id,
        "terminal": xi.id,
        "y0": sol.y0(),
        "y0_se": sol.y0_se,
        "identity_residual": identity_residual(&sol, &e),
        "covariation": covariation_stats(&sol, &e),
        "solver": info,
        "hypotheses": hyp,
        "provenance": sol.provenance,
    })))
}

pub fn oracle(s: &Settings, art: &mut Artifacts) -> Result<Outcome> {
    let (spec, xi) = models(s, s.model_id(), s.terminal_id())?;
    let t = tree(s)?;
    let hyp = hypotheses(s, &spec, t.grid.horizon())?;
    let sol = solve_exact(&t, &spec, &xi)?;
    let checks = check_identities(&sol)?;
    let norms = pathwise_norms(&sol, s.p()?)?;
    if s.save_ensembles.unwrap_or(false) {
        art.add("tree_solution.json", sol.to_json()?.into_bytes());
    }
    let y0 = sol.y0().to_vec();
    let (e, sol) = sol.to_ensembles()?;
    art.add_solution(&sol, &e, false)?;
    Ok(Outcome::ok(json!({
        "model": spec.id,
        "terminal": xi.id,
        "y0": y0,
        "n_leaves": t.n_leaves(),
        "contraction_level": oracle::contraction_level(&t, &spec),
        "identity_checks": checks,
        "norms": norms,
        "hypotheses": hyp,
    })))
}

fn time_fns(key: &str, src: Option<&str>, len: usize) -> Result<Vec<TimeFn>> {
    let Some(src) = src else {
        return Ok(vec![TimeFn::Const(0.0); len]);
    };
    let v = src.split(';').map(TimeFn::parse).collect::<Result<Vec<_>>>()?;
    if v.len() != len {
        return Err(Error::config(format!("{key}: expected {len} entries separated by ';', got {}", v.len())));
    }
    Ok(v)
}

pub fn linear(s: &Settings, _art: &mut Artifacts) -> Result<Outcome> {
    let ctx = s.context()?;
    let lam = s.intensities()?;
    let xi = terminal_by_id(s.terminal_id(), &ctx)?;
    let coeffs = LinearCoefficients {
        alpha: TimeFn::Const(s.alpha.unwrap_or(0.0)),
        beta: time_fns("beta", s.beta.as_deref(), s.k())?,
        gamma: time_fns("gamma", s.gamma.as_deref(), lam.len())?,
        forcing: TimeFn::parse(s.forcing.as_deref().unwrap_or("0"))?,
        intensities: lam,
        xi,
    };
    let grid = s.grid()?;
    let bounds = coeffs.validate(&grid)?;
    let construction = Construction::parse(s.construction.as_deref().unwrap_or("euler"))?;
    let e = ensemble(s)?;
    let params = LinearParams { basis: s.basis()?, construction };
    let sol = linear::linear_solve(&coeffs, &e, &params)?;
    let budget = linear::discretization_budget(&coeffs, &grid, sol.y0)?;
    Ok(Outcome::ok(json!({
        "coefficients": coeffs.id(),
        "bounds": bounds,
        "discretization_budget": budget,
        "solution": sol,
    })))
}

pub fn calculus(s: &Settings, _art: &mut Artifacts) -> Result<Outcome> {
    let params = SuiteParams { seed: s.seed.unwrap_or(SuiteParams::default().seed), paths: s.paths()? };
    let checks = suite::run_calculus(&params)?;
    let constants = calculus::constants(s.p()?, s.lip_k.unwrap_or(0.0), s.alpha.unwrap_or(0.0))?;
    let pass = checks.pass;
    let timings = json!({ "checks_seconds": checks.elapsed });
    Ok(Outcome {
        result: json!({ "params": params, "constants": constants, "checks": checks }),
        pass,
        timings,
    })
}

pub fn analyze(s: &Settings, art: &mut Artifacts) -> Result<Outcome> {
    let (spec, xi) = models(s, s.model_id(), s.terminal_id())?;
    let p = s.p()?;
    let (_, t) = s.grid_shape()?;
    let hyp = hypotheses(s, &spec, t)?;
    let (e, sol, info) = solve_problem(s, &spec, &xi)?;
    let norms = compute_norms(&sol, &e, &spec, p)?;
    let ratio = apriori_ratio(&norms);
    let linf = linf_bound_check(&sol, &spec, 0.0)?;
    let zero_set = if p < 2.0 { Some(zero_set_check(&sol, p)?) } else { None };
    let ep = e_p_ratio(&sol, &e, p)?;
    art.add_solution(&sol, &e, s.save_ensembles.unwrap_or(false))?;
    Ok(Outcome::ok(json!({
        "model": spec.id,
        "terminal": xi.id,
        "y0": sol.y0(),
        "y0_se": sol.y0_se,
        "solver": info,
        "norms": norms,
        "apriori": ratio,
        "linf": linf,
        "zero_set": zero_set,
        "e_p_ratio": ep,
        "hypotheses": hyp,
    })))
}

pub fn compare(s: &Settings, _art: &mut Artifacts) -> Result<Outcome> {
    let need = |v: &Option<String>, key: &str| {
        v.clone().ok_or_else(|| Error::config(format!("{key}: compare needs both problems (model, terminal, model2, terminal2)")))
    };
    let (m1, t1) = (need(&s.model, "model")?, need(&s.terminal, "terminal")?);
    let (m2, t2) = (need(&s.model2, "model2")?, need(&s.terminal2, "terminal2")?);
    let (spec1, xi1) = models(s, &m1, &t1)?;
    let (spec2, xi2) = models(s, &m2, &t2)?;
    let report = if s.tree.unwrap_or(false) {
        analysis::compare_on_tree(&tree(s)?, &spec1, &xi1, &spec2, &xi2)?
    } else {
        let e = ensemble(s)?;
        let basis = s.basis()?;
        let pp = s.picard_params()?;
        let sol1 = backward_solve(&spec1, &xi1, &e, &basis, &pp)?;
        let sol2 = backward_solve(&spec2, &xi2, &e, &basis, &pp)?;
        analysis::compare(&sol1, &sol2, &spec1, &spec2)?
    };
    Ok(Outcome::ok(json!({
        "method": if s.tree.unwrap_or(false) { "tree" } else { "backward" },
        "hypotheses_hold": report.hypotheses_hold,
        "violations": report.count,
        "report": report,
    })))
}

pub fn horizon(s: &Settings, art: &mut Artifacts) -> Result<Outcome> {
    let (spec, xi) = models(s, s.model_id(), s.terminal_id())?;
    let rho = s.rho.ok_or_else(|| Error::config("rho: a random-horizon run needs a weight rate ρ > ν (H5′)"))?;
    let rule = StoppingRule::parse(s.tau.as_deref().unwrap_or("first-jump:1,4"))?;
    let mut params = HorizonParams { rho, p: s.p()?, ..Default::default() };
    if let Some(n) = s.n_max {
        params.n_max = n;
    }
    if let Some(u) = s.unit {
        params.unit = u;
    }
    if let Some(b) = &s.basis {
        params.basis = solver::BasisSpec::parse(b)?;
    }
    let nu = params.validate(&spec)?;
    let cap = rule.cap();
    let grid = if s.grid.is_some() || s.steps.is_some() || s.horizon.is_some() {
        s.grid()?
    } else {
        bsdelab::noise::TimeGrid::uniform((32.0 * cap).ceil().max(1.0) as usize, cap)?
    };
    let e = simulate_with_law(&grid, s.k(), &s.activity()?, s.paths()?, s.seed(), s.law()?)?;
    let report = solver::random_horizon_solve(&spec, &xi, rule, &e, &params)?;
    if let Some(last) = report.solutions.last() {
        art.add_solution(last, &e, s.save_ensembles.unwrap_or(false))?;
    }
    Ok(Outcome::ok(json!({ "model": spec.id, "terminal": xi.id, "nu": nu, "report": report })))
}

pub fn suite(s: &Settings, _art: &mut Artifacts) -> Result<Outcome> {
    let params = SuiteParams {
        seed: s.seed.unwrap_or(SuiteParams::default().seed),
        paths: s.paths.unwrap_or(SuiteParams::default().paths),
    };
    let report = suite::run_full(&params, &s.thread_counts()?)?;
    for c in &report.criteria {
        println!("{}", c.line());
    }
    let timings: Vec<Value> = report
        .criteria
        .iter()
        .map(|c| json!({ "id": c.id, "seconds": c.elapsed, "limit": c.runtime_limit, "within": c.within_runtime() }))
        .collect();
    let pass = report.all_pass();
    Ok(Outcome { result: serde_json::to_value(&report)?, pass, timings: Value::Array(timings) })
}
