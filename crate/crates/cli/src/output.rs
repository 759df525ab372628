use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use bsdelab::noise::PathEnsemble;
use bsdelab::solver::SolutionEnsemble;
use bsdelab::{Error, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::Settings;

/// Build-time `git describe` output, if the build exported one.
pub const GIT_DESCRIBE: Option<&str> = option_env!("BSDELAB_GIT_DESCRIBE");

#[derive(Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub tool_version: String,
}

#[derive(Serialize)]
pub struct Report<'a> {
    pub schema_version: &'a str,
    pub command: &'a str,
    pub provenance: Provenance,
    pub config: &'a Settings,
    pub result: Value,
}

/// SHA-256 of the compact JSON form of the effective settings.
pub fn config_hash(command: &str, settings: &Settings) -> Result<String> {
    let text = serde_json::to_string(&(command, settings))?;
    let digest = Sha256::digest(text.as_bytes());
    let mut hex = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Plot-ready time means of `(Y, Z, ψ, M)`; step quantities are empty on
/// the last row.
pub fn means_csv(sol: &SolutionEnsemble) -> String {
    let (d, k, na) = (sol.d, sol.k, sol.n_atoms);
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=d).map(|r| format!("y{r}")));
    for r in 1..=d {
        cols.extend((1..=k).map(|c| format!("z{r}_{c}")));
    }
    for r in 1..=d {
        cols.extend((1..=na).map(|j| format!("psi{r}_{j}")));
    }
    cols.extend((1..=d).map(|r| format!("m{r}")));
    let mut out = cols.join(",");
    out.push('\n');
    for (t, y, z, psi, m) in sol.time_means() {
        let mut row = vec![format!("{t}")];
        row.extend(y.iter().map(|v| format!("{v:e}")));
        let pad = |v: &[f64], len: usize| -> Vec<String> {
            if v.is_empty() {
                vec![String::new(); len]
            } else {
                v.iter().map(|x| format!("{x:e}")).collect()
            }
        };
        row.extend(pad(&z, d * k));
        row.extend(pad(&psi, d * na));
        row.extend(m.iter().map(|v| format!("{v:e}")));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Collects the artifacts of one run and writes them to the output
/// directory.
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf(), files: Vec::new() }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn add_solution(&mut self, sol: &SolutionEnsemble, e: &PathEnsemble, save: bool) -> Result<()> {
        self.add("means.csv", means_csv(sol).into_bytes());
        if save {
            let mut buf = Vec::new();
            e.write_to(&mut buf)?;
            self.add("ensemble.bjl", buf);
            let mut buf = Vec::new();
            sol.write_to(&mut buf)?;
            self.add("solution.bjl", buf);
            self.add("solution.json", serde_json::to_vec_pretty(&sol.sidecar())?);
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn write(self) -> Result<()> {
        fs::create_dir_all(&self.dir)
            .map_err(|e| Error::config(format!("out: cannot create {}: {e}", self.dir.display())))?;
        for (name, bytes) in self.files {
            fs::write(self.dir.join(&name), bytes)?;
        }
        Ok(())
    }
}
