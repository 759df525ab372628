//! Built-in generators and terminal conditions, selectable by string id.
//!
//! Generators (dimension `d` from the context unless stated):
//!
//! | id | driver | α | K |
//! |----|--------|---|---|
//! | `zero` | `0` | 0 | 0 |
//! | `ohlm1` | `−y` | −1 | 0 |
//! | `linear:a,b,g[,c]` | `c + a·y + b·z₁ + g·Σψ_jλ_j` | a | max(\|b\|, \|g\|√Λ) |
//! | `cubic` | `−y³` | 0 | 0 |
//! | `sup-psi` | `max(0, Σψ_jλ_j)` (d = 1) | 0 | √Λ |
//! | `kappa-neg2` | `−2Σψ_jλ_j` (d = 1) | 0 | 2√Λ |
//! | `sin:K` | `K sin z₁ + (K/√Λ) sin(Σψ_jλ_j)` | 0 | K |
//! | `expr:<src>` | see [`super::expr`] | `alpha` key | `lip_k` key |
//!
//! Terminal conditions: `one`, `zero`, `const:c`, `aux1` (first auxiliary
//! sign), `aux` (sum of auxiliary signs), `w` (first Brownian coordinate),
//! `lognormal:c` (`c·exp(W_T − T/2)`), `min-w0` (`min(W_T, 0)`), `count`
//! (jumps of the first atom), `jump1` (indicator of at least one jump of the
//! first atom), `mixed` (`W_T + aux1`), `expr:<src>`.

use std::sync::Arc;

use super::expr::{DriverEnv, Expr, ExprKind, TerminalEnv};
use super::{DriverArgs, GeneratorSpec, PathInfo, TerminalMode, TerminalSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ModelContext {
    pub d: usize,
    pub k: usize,
    pub intensities: Vec<f64>,
    /// Declared monotonicity constant for `expr:` generators.
    pub alpha: Option<f64>,
    /// Declared Lipschitz constant for `expr:` generators.
    pub lip_k: Option<f64>,
    /// Declared integrability exponent of terminal conditions.
    pub p: f64,
}

impl Default for ModelContext {
    fn default() -> Self {
        Self { d: 1, k: 1, intensities: Vec::new(), alpha: None, lip_k: None, p: 2.0 }
    }
}

impl ModelContext {
    pub fn new(d: usize, k: usize, intensities: Vec<f64>) -> Self {
        Self { d, k, intensities, ..Default::default() }
    }
}

fn parse_params(id: &str, rest: &str, min: usize, max: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = rest
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("model '{id}': parameters must be numbers")))?;
    if vals.len() < min || vals.len() > max || vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::config(format!(
            "model '{id}': expected {min}..={max} finite parameters, got {}",
            vals.len()
        )));
    }
    Ok(vals)
}

fn weighted_sum(psi_row: &[f64], lam: &[f64]) -> f64 {
    psi_row.iter().zip(lam).map(|(p, l)| p * l).sum()
}

fn require_d1(id: &str, ctx: &ModelContext) -> Result<()> {
    if ctx.d != 1 {
        return Err(Error::config(format!("model '{id}' is defined for d = 1 only (d = {})", ctx.d)));
    }
    Ok(())
}

pub fn generator_by_id(id: &str, ctx: &ModelContext) -> Result<GeneratorSpec> {
    let (d, k) = (ctx.d, ctx.k);
    let lam = ctx.intensities.clone();
    let a = lam.len();
    let big_lambda: f64 = lam.iter().sum();
    let sqrt_l = big_lambda.sqrt();
    let (head, rest) = match id.split_once(':') {
        Some((h, r)) => (h, Some(r)),
        None => (id, None),
    };
    let spec = match (head, rest) {
        ("zero", None) => GeneratorSpec::new(id, d, k, lam, 0.0, 0.0, Arc::new(|_, o: &mut [f64]| o.fill(0.0)))?
            .with_comparison(Arc::new(|_, _, _| 0.0), vec![0.0; a]),
        ("ohlm1", None) => GeneratorSpec::new(id, d, k, lam, -1.0, 0.0, Arc::new(|x: &DriverArgs, o: &mut [f64]| {
            for (o, y) in o.iter_mut().zip(x.y) {
                *o = -y;
            }
        }))?
        .with_comparison(Arc::new(|_, _, _| 0.0), vec![0.0; a]),
        ("linear", Some(r)) => {
            let p = parse_params(id, r, 3, 4)?;
            let (ca, cb, cg, c0) = (p[0], p[1], p[2], p.get(3).copied().unwrap_or(0.0));
            let l2 = lam.clone();
            let s = GeneratorSpec::new(
                id,
                d,
                k,
                lam,
                ca,
                cb.abs().max(cg.abs() * sqrt_l),
                Arc::new(move |x: &DriverArgs, o: &mut [f64]| {
                    for c in 0..o.len() {
                        o[c] = c0 + ca * x.y[c] + cb * x.z[c * k] + cg * weighted_sum(&x.psi[c * a..(c + 1) * a], &l2);
                    }
                }),
            )?;
            s.with_comparison(Arc::new(move |_, _, _| cg), vec![cg.abs(); a])
        }
        ("cubic", None) => GeneratorSpec::new(id, d, k, lam, 0.0, 0.0, Arc::new(|x: &DriverArgs, o: &mut [f64]| {
            for (o, y) in o.iter_mut().zip(x.y) {
                *o = -y * y * y;
            }
        }))?
        .with_comparison(Arc::new(|_, _, _| 0.0), vec![0.0; a]),
        ("sup-psi", None) => {
            require_d1(id, ctx)?;
            let (l1, l2) = (lam.clone(), lam.clone());
            GeneratorSpec::new(id, 1, k, lam, 0.0, sqrt_l, Arc::new(move |x: &DriverArgs, o: &mut [f64]| {
                o[0] = weighted_sum(x.psi, &l1).max(0.0);
            }))?
            .with_comparison(
                Arc::new(move |x: &DriverArgs, _: &[f64], _| if weighted_sum(x.psi, &l2) > 0.0 { 1.0 } else { 0.0 }),
                vec![1.0; a],
            )
        }
        ("kappa-neg2", None) => {
            require_d1(id, ctx)?;
            let l1 = lam.clone();
            GeneratorSpec::new(id, 1, k, lam, 0.0, 2.0 * sqrt_l, Arc::new(move |x: &DriverArgs, o: &mut [f64]| {
                o[0] = -2.0 * weighted_sum(x.psi, &l1);
            }))?
            .with_comparison(Arc::new(|_, _, _| -2.0), vec![2.0; a])
        }
        ("sin", Some(r)) => {
            let kk = parse_params(id, r, 1, 1)?[0];
            if kk < 0.0 {
                return Err(Error::config(format!("model '{id}': K must be nonnegative")));
            }
            let coef = if a == 0 { 0.0 } else { kk / sqrt_l };
            let (l1, l2) = (lam.clone(), lam.clone());
            let s = GeneratorSpec::new(id, d, k, lam, 0.0, kk, Arc::new(move |x: &DriverArgs, o: &mut [f64]| {
                for c in 0..o.len() {
                    o[c] = kk * x.z[c * k].sin() + coef * weighted_sum(&x.psi[c * a..(c + 1) * a], &l1).sin();
                }
            }))?;
            if d == 1 && coef <= 1.0 {
                // Difference quotient of sin along Σψλ, constant across atoms.
                s.with_comparison(
                    Arc::new(move |x: &DriverArgs, phi: &[f64], _| {
                        let (u, v) = (weighted_sum(x.psi, &l2), weighted_sum(phi, &l2));
                        let q = if (u - v).abs() > 1e-12 { (u.sin() - v.sin()) / (u - v) } else { u.cos() };
                        coef * q
                    }),
                    vec![coef; a],
                )
            } else {
                s
            }
        }
        ("expr", Some(src)) => {
            let (alpha, lip_k) = match (ctx.alpha, ctx.lip_k) {
                (Some(al), Some(kk)) => (al, kk),
                _ => {
                    return Err(Error::config(format!(
                        "model '{id}': expression drivers need declared 'alpha' (H1) and 'lip_k' (H3)"
                    )))
                }
            };
            let e = Expr::parse(src, ExprKind::Driver { d, k, n_atoms: a })?;
            let l1 = lam.clone();
            GeneratorSpec::new(id, d, k, lam, alpha, lip_k, Arc::new(move |x: &DriverArgs, o: &mut [f64]| {
                e.eval_driver(&DriverEnv { t: x.t, y: x.y, z: x.z, psi: x.psi, lambdas: &l1, k }, o);
            }))?
        }
        _ => return Err(Error::config(format!("model: unknown id '{id}'"))),
    };
    Ok(spec)
}

pub fn terminal_by_id(id: &str, ctx: &ModelContext) -> Result<TerminalSpec> {
    let d = ctx.d;
    let (head, rest) = match id.split_once(':') {
        Some((h, r)) => (h, Some(r)),
        None => (id, None),
    };
    let need_atom = || {
        if ctx.intensities.is_empty() {
            Err(Error::config(format!("terminal '{id}' needs at least one jump atom")))
        } else {
            Ok(())
        }
    };
    let state = TerminalMode::State;
    let mut spec = match (head, rest) {
        ("one", None) => TerminalSpec::new(id, state, d, Arc::new(|_, o: &mut [f64]| o.fill(1.0))),
        ("zero", None) => TerminalSpec::new(id, state, d, Arc::new(|_, o: &mut [f64]| o.fill(0.0))),
        ("const", Some(r)) => {
            let c = parse_params(id, r, 1, 1)?[0];
            TerminalSpec::new(id, state, d, Arc::new(move |_, o: &mut [f64]| o.fill(c)))
        }
        ("aux1", None) => TerminalSpec::new(id, TerminalMode::Aux, d, Arc::new(|x: &PathInfo, o: &mut [f64]| {
            o.fill(x.aux.first().copied().unwrap_or(f64::NAN))
        })),
        ("aux", None) => TerminalSpec::new(id, TerminalMode::Aux, d, Arc::new(|x: &PathInfo, o: &mut [f64]| o.fill(x.aux_sum))),
        ("w", None) => TerminalSpec::new(id, state, d, Arc::new(|x: &PathInfo, o: &mut [f64]| o.fill(x.w[0]))),
        ("lognormal", Some(r)) => {
            let c = parse_params(id, r, 1, 1)?[0];
            TerminalSpec::new(id, state, d, Arc::new(move |x: &PathInfo, o: &mut [f64]| {
                o.fill(c * (x.w[0] - 0.5 * x.t).exp())
            }))
        }
        ("min-w0", None) => TerminalSpec::new(id, state, d, Arc::new(|x: &PathInfo, o: &mut [f64]| o.fill(x.w[0].min(0.0)))),
        ("count", None) => {
            need_atom()?;
            TerminalSpec::new(id, state, d, Arc::new(|x: &PathInfo, o: &mut [f64]| o.fill(x.counts[0])))
        }
        ("jump1", None) => {
            need_atom()?;
            TerminalSpec::new(id, state, d, Arc::new(|x: &PathInfo, o: &mut [f64]| {
                o.fill(if x.counts[0] > 0.0 { 1.0 } else { 0.0 })
            }))
        }
        ("mixed", None) => TerminalSpec::new(id, TerminalMode::Mixed, d, Arc::new(|x: &PathInfo, o: &mut [f64]| {
            o.fill(x.w[0] + x.aux.first().copied().unwrap_or(f64::NAN))
        })),
        ("expr", Some(src)) => {
            let e = Expr::parse(src, ExprKind::Terminal { k: ctx.k, n_atoms: ctx.intensities.len() })?;
            if e.dim() != d {
                return Err(Error::config(format!(
                    "terminal '{id}' has {} components, expected d = {d}",
                    e.dim()
                )));
            }
            let mode = match (e.usage.aux, e.usage.state) {
                (false, _) => TerminalMode::State,
                (true, false) => TerminalMode::Aux,
                (true, true) => TerminalMode::Mixed,
            };
            TerminalSpec::new(id, mode, d, Arc::new(move |x: &PathInfo, o: &mut [f64]| {
                e.eval_terminal(&TerminalEnv { t: x.t, w: x.w, counts: x.counts, aux_sum: x.aux_sum, aux: x.aux }, o)
            }))
        }
        _ => return Err(Error::config(format!("terminal: unknown id '{id}'"))),
    };
    spec.p = ctx.p;
    Ok(spec)
}

/// Ids of the bundled generators instantiated for the given context (those
/// restricted to `d = 1` are skipped otherwise).
pub fn bundled_generator_ids(ctx: &ModelContext) -> Vec<String> {
    let mut ids: Vec<String> = ["zero", "ohlm1", "linear:0.5,0.3,0.2", "linear:-1,0.2,-0.5,1", "cubic", "sin:0.3"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if ctx.d == 1 && !ctx.intensities.is_empty() {
        ids.push("sup-psi".into());
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{verify_h3prime, verify_lipschitz, verify_monotonicity, StateSampler};

    fn ctx() -> ModelContext {
        ModelContext::new(1, 1, vec![0.8, 1.7])
    }

    #[test]
    fn bundled_models_pass_their_own_checks() {
        for c in [ctx(), ModelContext::new(2, 2, vec![1.0]), ModelContext::new(1, 1, vec![])] {
            for id in bundled_generator_ids(&c) {
                let s = generator_by_id(&id, &c).unwrap();
                let sm = StateSampler::default();
                let m = verify_monotonicity(&s, &sm, 10_000).unwrap();
                let l = verify_lipschitz(&s, &sm, 10_000).unwrap();
                assert!(m.pass, "{id}: {m:?}");
                assert!(l.pass, "{id}: {l:?}");
                if c.d == 1 && s.comparison.is_some() {
                    let h = verify_h3prime(&s, &sm, 10_000).unwrap();
                    assert!(h.pass, "{id}: {h:?}");
                }
            }
        }
    }

    #[test]
    fn kappa_neg2_fails_h3prime() {
        let s = generator_by_id("kappa-neg2", &ctx()).unwrap();
        let r = verify_h3prime(&s, &StateSampler::default(), 1000).unwrap();
        assert!(!r.pass);
        assert!(r.kappa_min.unwrap() < -1.0);
    }

    #[test]
    fn expression_models_need_declared_constants() {
        assert!(generator_by_id("expr:-y", &ctx()).is_err());
        let mut c = ctx();
        c.alpha = Some(-1.0);
        c.lip_k = Some(0.0);
        let s = generator_by_id("expr:-y", &c).unwrap();
        assert_eq!(s.eval_vec(0.0, &[2.0], &[0.0], &[0.0, 0.0]), vec![-2.0]);
    }

    #[test]
    fn unknown_ids_are_config_errors() {
        assert!(matches!(generator_by_id("nope", &ctx()), Err(Error::Config(_))));
        assert!(matches!(terminal_by_id("nope", &ctx()), Err(Error::Config(_))));
        assert!(matches!(generator_by_id("linear:1", &ctx()), Err(Error::Config(_))));
        assert!(generator_by_id("sup-psi", &ModelContext::new(2, 1, vec![1.0])).is_err());
    }

    #[test]
    fn terminal_values() {
        let c = ctx();
        let info = PathInfo { t: 2.0, step: 3, w: &[0.4], counts: &[2.0, 0.0], aux_sum: -1.0, aux: &[-1.0, 1.0, -1.0] };
        let eval = |id: &str| {
            let t = terminal_by_id(id, &c).unwrap();
            let mut o = [0.0];
            (t.eval)(&info, &mut o);
            (o[0], t.mode)
        };
        assert_eq!(eval("one").0, 1.0);
        assert_eq!(eval("const:3").0, 3.0);
        assert_eq!(eval("aux1"), (-1.0, TerminalMode::Aux));
        assert_eq!(eval("mixed"), (0.4 - 1.0, TerminalMode::Mixed));
        assert_eq!(eval("min-w0").0, 0.0);
        assert_eq!(eval("count").0, 2.0);
        assert_eq!(eval("jump1").0, 1.0);
        assert!((eval("lognormal:2").0 - 2.0 * (0.4f64 - 1.0).exp()).abs() < 1e-15);
        let (v, mode) = eval("expr:w^2 + n2 - a");
        assert!((v - 1.16).abs() < 1e-15);
        assert_eq!(mode, TerminalMode::Mixed);
    }
}
