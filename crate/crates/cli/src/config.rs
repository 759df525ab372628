use std::path::{Path, PathBuf};

use bsdelab::model::ModelContext;
use bsdelab::noise::{JumpActivity, NoiseLaw, TimeGrid};
use bsdelab::solver::{BasisSpec, PicardParams};
use bsdelab::{Error, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

/// Every run setting. The same keys are accepted on the command line
/// (as `--kebab-case` flags) and in a TOML config file (as `snake_case`
/// keys); flags win over the file.
#[derive(Args, Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Generator id or `expr:` driver.
    #[arg(long)]
    pub model: Option<String>,
    /// Terminal condition id or `expr:` terminal.
    #[arg(long)]
    pub terminal: Option<String>,
    /// Second generator (compare).
    #[arg(long)]
    pub model2: Option<String>,
    /// Second terminal condition (compare).
    #[arg(long)]
    pub terminal2: Option<String>,
    /// Uniform grid as `N,T`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Number of steps; overrides the `N` of `grid`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Horizon; overrides the `T` of `grid`.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Dimension of Y.
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of Brownian coordinates.
    #[arg(long)]
    pub k: Option<usize>,
    /// Jump atom intensities, comma separated.
    #[arg(long)]
    pub atoms: Option<String>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `gaussian` or `two-point`.
    #[arg(long)]
    pub law: Option<String>,
    /// Regression basis, e.g. `poly:2` or `partition:32:w,counts`.
    #[arg(long)]
    pub basis: Option<String>,
    /// Solve by Picard iteration instead of the direct backward sweep.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub picard: Option<bool>,
    /// Solve on the exact tree instead of Monte Carlo (analyze, compare).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub tree: Option<bool>,
    /// Declared α of `expr:` drivers; α of the linear equation.
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    /// Declared Lipschitz constant K of `expr:` drivers.
    #[arg(long)]
    pub lip_k: Option<f64>,
    /// Integrability exponent.
    #[arg(long)]
    pub p: Option<f64>,
    /// Weight rate of random-horizon runs.
    #[arg(long, allow_hyphen_values = true)]
    pub rho: Option<f64>,
    /// Stopping rule: `deterministic:T`, `first-jump:ATOM,CAP` or
    /// `first-exit:COORD,LO,HI,CAP`.
    #[arg(long)]
    pub tau: Option<String>,
    /// Number of truncation levels of a random-horizon run.
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Length of one truncation level.
    #[arg(long)]
    pub unit: Option<f64>,
    /// Linear equation: Brownian coefficients, `;` separated.
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<String>,
    /// Linear equation: jump coefficients, `;` separated.
    #[arg(long, allow_hyphen_values = true)]
    pub gamma: Option<String>,
    /// Linear equation: forcing term.
    #[arg(long, allow_hyphen_values = true)]
    pub forcing: Option<String>,
    /// Doléans construction: `euler`, `exact` or `displayed`.
    #[arg(long)]
    pub construction: Option<String>,
    /// Picard stopping tolerance on the β-norm.
    #[arg(long)]
    pub tol_beta: Option<f64>,
    /// Picard iteration cap.
    #[arg(long)]
    pub max_outer: Option<usize>,
    /// Samples of the hypothesis checks.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Thread counts compared by `suite`, comma separated.
    #[arg(long)]
    pub thread_counts: Option<String>,
    /// Write the noise and solution ensembles next to the report.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub save_ensembles: Option<bool>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f; } )*
    };
}

impl Settings {
    /// Fills every unset field from `file`.
    pub fn or(mut self, file: Settings) -> Settings {
        overlay!(self, file; model, terminal, model2, terminal2, grid, steps, horizon, d, k, atoms,
            paths, seed, law, basis, picard, tree, alpha, lip_k, p, rho, tau, n_max, unit, beta,
            gamma, forcing, construction, tol_beta, max_outer, samples, thread_counts, save_ensembles);
        self
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("config: cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("config {}: {}", path.display(), e.message())))
    }

    pub fn model_id(&self) -> &str {
        self.model.as_deref().unwrap_or("zero")
    }

    pub fn terminal_id(&self) -> &str {
        self.terminal.as_deref().unwrap_or("one")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    pub fn paths(&self) -> Result<usize> {
        match self.paths.unwrap_or(10_000) {
            0 | 1 => Err(Error::config("paths: need at least 2 paths")),
            n => Ok(n),
        }
    }

    pub fn p(&self) -> Result<f64> {
        let p = self.p.unwrap_or(2.0);
        if !(p > 1.0) || !p.is_finite() {
            return Err(Error::config(format!("p: need p > 1, got {p}")));
        }
        Ok(p)
    }

    pub fn d(&self) -> Result<usize> {
        match self.d.unwrap_or(1) {
            0 => Err(Error::config("d: need d ≥ 1")),
            d => Ok(d),
        }
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or(1)
    }

    /// `(n, T)` from `grid`, `steps` and `horizon`; defaults `16, 1.0`.
    pub fn grid_shape(&self) -> Result<(usize, f64)> {
        let (mut n, mut t) = (16usize, 1.0f64);
        if let Some(g) = &self.grid {
            let bad = || Error::config(format!("grid: expected N,T, got '{g}'"));
            let (a, b) = g.split_once(',').ok_or_else(bad)?;
            n = a.trim().parse().map_err(|_| bad())?;
            t = b.trim().parse().map_err(|_| bad())?;
        }
        if let Some(s) = self.steps {
            n = s;
        }
        if let Some(h) = self.horizon {
            t = h;
        }
        if n == 0 {
            return Err(Error::config("grid: need n ≥ 1 steps"));
        }
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::config(format!("grid: horizon must be positive and finite, got {t}")));
        }
        Ok((n, t))
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        let (n, t) = self.grid_shape()?;
        TimeGrid::uniform(n, t)
    }

    pub fn intensities(&self) -> Result<Vec<f64>> {
        let Some(list) = self.atoms.as_deref().filter(|s| !s.trim().is_empty()) else {
            return Ok(Vec::new());
        };
        let lam: Vec<f64> = list
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("atoms: expected comma separated intensities, got '{list}'")))?;
        if let Some(bad) = lam.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return Err(Error::config(format!("atoms: intensities must be positive, got {bad}")));
        }
        Ok(lam)
    }

    pub fn activity(&self) -> Result<JumpActivity> {
        JumpActivity::from_intensities(&self.intensities()?)
    }

    pub fn law(&self) -> Result<NoiseLaw> {
        match self.law.as_deref().unwrap_or("gaussian") {
            "gaussian" => Ok(NoiseLaw::Gaussian),
            "two-point" => Ok(NoiseLaw::TwoPoint),
            other => Err(Error::config(format!("law: expected gaussian or two-point, got '{other}'"))),
        }
    }

    pub fn basis(&self) -> Result<BasisSpec> {
        match &self.basis {
            Some(b) => BasisSpec::parse(b),
            None => Ok(BasisSpec::default()),
        }
    }

    pub fn context(&self) -> Result<ModelContext> {
        let mut ctx = ModelContext::new(self.d()?, self.k(), self.intensities()?);
        ctx.alpha = self.alpha;
        ctx.lip_k = self.lip_k;
        ctx.p = self.p()?;
        Ok(ctx)
    }

    pub fn picard_params(&self) -> Result<PicardParams> {
        let mut pp = PicardParams::default();
        if let Some(t) = self.tol_beta {
            pp.tol_beta = t;
        }
        if let Some(m) = self.max_outer {
            pp.max_outer = m;
        }
        pp.validate()?;
        Ok(pp)
    }

    pub fn samples(&self) -> usize {
        self.samples.unwrap_or(10_000)
    }

    pub fn thread_counts(&self) -> Result<Vec<usize>> {
        let list = self.thread_counts.as_deref().unwrap_or("1,4");
        let v: Vec<usize> = list
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("thread_counts: expected comma separated integers, got '{list}'")))?;
        if v.is_empty() || v.contains(&0) {
            return Err(Error::config("thread_counts: counts must be at least 1"));
        }
        Ok(v)
    }
}

/// Flags shared by every subcommand that are not part of the hashed
/// configuration.
#[derive(Args, Clone, Debug, Default)]
pub struct RunFlags {
    /// TOML config file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (does not change any numeric output).
    #[arg(long, env = "BSDELAB_THREADS")]
    pub threads: Option<usize>,
}
