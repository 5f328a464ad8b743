use std::fs;
use std::path::PathBuf;

use crate::config::RunConfig;
use crate::CliError;

/// Reals with 17 significant digits, which round-trip exactly.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn vector(v: &[f64]) -> String {
    v.iter().map(|x| real(*x)).collect::<Vec<_>>().join(";")
}

pub struct Output {
    dir: PathBuf,
}

impl Output {
    /// Creates the output directory and writes `resolved_config.toml`.
    pub fn create(cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = PathBuf::from(&cfg.output_dir);
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        let out = Self { dir };
        fs::write(out.path("resolved_config.toml"), cfg.to_toml()?)?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn csv(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("{prefix}_{k}")).collect()
}
