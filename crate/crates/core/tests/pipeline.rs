use std::fs::File;

use bsdelab::model::{generator_by_id, terminal_by_id, ModelContext};
use bsdelab::noise::{simulate, simulate_with_law, step_moments, JumpActivity, NoiseLaw, TimeGrid};
use bsdelab::oracle::{picard_exact, solve_exact, PicardInit, TreeModel};
use bsdelab::solver::{backward_solve, covariation_stats, BasisSpec, PicardParams, SolutionEnsemble};

fn ctx(lam: &[f64]) -> ModelContext {
    ModelContext::new(1, 1, lam.to_vec())
}

#[test]
fn step_moments_within_five_standard_errors() {
    let lam = [0.5, 2.0];
    let grid = TimeGrid::uniform(6, 1.5).unwrap();
    let e = simulate(&grid, 2, &JumpActivity::from_intensities(&lam).unwrap(), 20_000, 42).unwrap();
    let n = e.n_paths as f64;
    for m in step_moments(&e) {
        for c in 0..2 {
            assert!(m.dw_mean[c].abs() <= 5.0 * (m.dt / n).sqrt(), "{m:?}");
            assert!((m.dw_var[c] - m.dt).abs() <= 5.0 * m.dw_var_se[c], "{m:?}");
        }
        for j in 0..2 {
            assert!((m.count_mean[j] - lam[j] * m.dt).abs() <= 5.0 * m.count_mean_se[j], "{m:?}");
        }
        assert!(m.aux_mean.abs() <= 5.0 / n.sqrt());
        assert_eq!(m.aux_sq_mean, 1.0);
    }
}

#[test]
fn noise_sources_are_uncorrelated() {
    let lam = [1.0];
    let grid = TimeGrid::uniform(4, 1.0).unwrap();
    let e = simulate(&grid, 1, &JumpActivity::from_intensities(&lam).unwrap(), 20_000, 3).unwrap();
    let n = e.n_paths;
    let corr = |a: &[f64], b: &[f64]| {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(a), mean(b));
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    };
    for i in 0..4 {
        let dw: Vec<f64> = (0..n).map(|p| e.dw_at(p, i)[0]).collect();
        let jump: Vec<f64> = (0..n).map(|p| e.compensated_at(p, i, 0)).collect();
        let aux: Vec<f64> = (0..n).map(|p| e.aux_at(p, i)).collect();
        let bound = 5.0 / (n as f64).sqrt();
        for (a, b) in [(&dw, &jump), (&dw, &aux), (&jump, &aux)] {
            assert!(corr(a, b).abs() <= bound, "step {i}: {}", corr(a, b));
        }
    }
}

#[test]
fn picard_on_the_tree_forgets_its_start() {
    let lam = [1.0];
    let spec = generator_by_id("sin:0.4", &ctx(&lam)).unwrap();
    let xi = terminal_by_id("mixed", &ctx(&lam)).unwrap();
    let tree = TreeModel::uniform(3, 0.2, 1, &lam).unwrap();
    let (a, _) = picard_exact(&tree, &spec, &xi, PicardInit::Zero, 200, 1e-14).unwrap();
    let (b, _) = picard_exact(&tree, &spec, &xi, PicardInit::Random(7), 200, 1e-14).unwrap();
    for (la, lb) in a.y.iter().zip(&b.y) {
        for (x, y) in la.iter().zip(lb) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
    let direct = solve_exact(&tree, &spec, &xi).unwrap();
    assert!((direct.y0()[0] - a.y0()[0]).abs() <= 1e-10);
}

#[test]
fn monte_carlo_matches_tree_on_a_discrete_problem() {
    let lam = [1.0];
    let spec = generator_by_id("sin:0.3", &ctx(&lam)).unwrap();
    let xi = terminal_by_id("jump1", &ctx(&lam)).unwrap();
    let tree = TreeModel::uniform(3, 0.2, 1, &lam).unwrap();
    let exact = solve_exact(&tree, &spec, &xi).unwrap().y0()[0];
    let e = simulate_with_law(&tree.grid, 1, &JumpActivity::from_intensities(&lam).unwrap(), 10_000, 5, NoiseLaw::TwoPoint)
        .unwrap();
    let basis = BasisSpec::partition(64).with_features(true, true, Some(false));
    let sol = backward_solve(&spec, &xi, &e, &basis, &PicardParams::default()).unwrap();
    let y0 = sol.y0()[0];
    assert!((y0 - exact).abs() <= 3.0 * sol.y0_se, "{y0} vs {exact} ± {}", sol.y0_se);
}

#[test]
fn covariation_with_the_drivers_shrinks_with_paths() {
    let lam = [1.0];
    let spec = generator_by_id("sin:0.3", &ctx(&lam)).unwrap();
    let xi = terminal_by_id("mixed", &ctx(&lam)).unwrap();
    let grid = TimeGrid::uniform(4, 1.0).unwrap();
    let act = JumpActivity::from_intensities(&lam).unwrap();
    let mean_abs = |paths: usize| {
        let e = simulate(&grid, 1, &act, paths, 17).unwrap();
        let sol = backward_solve(&spec, &xi, &e, &BasisSpec::default(), &PicardParams::default()).unwrap();
        let c = covariation_stats(&sol, &e);
        assert!(c.max_z_score <= 5.0, "{c:?}");
        let all: Vec<f64> = c.m_w.iter().chain(&c.m_jump).map(|(m, _)| m.abs()).collect();
        all.iter().sum::<f64>() / all.len() as f64
    };
    let coarse = mean_abs(2_000);
    let fine = mean_abs(32_000);
    assert!(fine < coarse, "{fine} ≥ {coarse}");
}

#[test]
fn solution_files_round_trip() {
    let lam = [0.7];
    let spec = generator_by_id("sup-psi", &ctx(&lam)).unwrap();
    let xi = terminal_by_id("count", &ctx(&lam)).unwrap();
    let grid = TimeGrid::uniform(3, 0.6).unwrap();
    let e = simulate(&grid, 1, &JumpActivity::from_intensities(&lam).unwrap(), 50, 8).unwrap();
    let sol = backward_solve(&spec, &xi, &e, &BasisSpec::default(), &PicardParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("solution.bjl");
    sol.write_to(File::create(&path).unwrap()).unwrap();
    let back = SolutionEnsemble::read_from(File::open(&path).unwrap(), &sol.sidecar()).unwrap();
    assert_eq!(back.y, sol.y);
    assert_eq!(back.z, sol.z);
    assert_eq!(back.psi, sol.psi);
    assert_eq!(back.m, sol.m);
    assert_eq!(back.provenance, sol.provenance);
}
