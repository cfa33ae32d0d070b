//! Machine-readable run reports: a JSON document per invocation plus an
//! optional CSV summary. Reports are deterministic for a fixed config and
//! command except for the `runtime_ms` field.

use std::fs;
use std::path::Path;

use gbsde::gcore::CheckReport;
use gbsde::{Error, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct CheckJson {
    pub name: String,
    pub pass: bool,
    pub worst_margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<String>,
}

impl From<&CheckReport> for CheckJson {
    fn from(r: &CheckReport) -> Self {
        CheckJson {
            name: r.name.clone(),
            pass: r.pass,
            worst_margin: r.worst_margin,
            witness: r.witness.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
    pub dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub checks: Vec<CheckJson>,
    pub outputs: serde_json::Value,
    pub all_pass: bool,
    pub runtime_ms: u128,
}

impl RunReport {
    pub fn new(command: &str, dim: usize, seed: u64) -> Self {
        RunReport {
            command: command.to_string(),
            config_sha256: None,
            dim,
            steps: None,
            dt: None,
            seed,
            threads: None,
            checks: Vec::new(),
            outputs: serde_json::Value::Null,
            all_pass: true,
            runtime_ms: 0,
        }
    }

    pub fn push_check(&mut self, check: &CheckReport) {
        self.all_pass &= check.pass;
        self.checks.push(check.into());
    }

    pub fn push_checks(&mut self, checks: &[CheckReport]) {
        for c in checks {
            self.push_check(c);
        }
    }

    pub fn print_summary(&self) {
        for c in &self.checks {
            let status = if c.pass { "PASS" } else { "FAIL" };
            match &c.witness {
                Some(w) => println!("check {}: {status} (worst margin {:.3e}; {w})", c.name, c.worst_margin),
                None => println!("check {}: {status} (worst margin {:.3e})", c.name, c.worst_margin),
            }
        }
        println!(
            "{}: {}",
            self.command,
            if self.all_pass { "PASS" } else { "FAIL" }
        );
    }

    pub fn write_json(&self, out_dir: &Path) -> Result<std::path::PathBuf> {
        fs::create_dir_all(out_dir)
            .map_err(|e| Error::config(format!("cannot create output directory: {e}")))?;
        let path = out_dir.join(format!("{}.json", self.command));
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::numeric(format!("report serialization failed: {e}")))?;
        fs::write(&path, text + "\n")
            .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// One CSV summary row; numeric cells use 17 significant digits so values
/// round-trip bit-exactly.
#[derive(Debug, Clone)]
pub struct CsvRow {
    pub command: String,
    pub dim: usize,
    pub steps: usize,
    pub dt: f64,
    pub y0: f64,
    pub z0: Vec<f64>,
    pub k_t_min: f64,
    pub bound: Option<f64>,
    pub margin: Option<f64>,
    pub runtime_ms: u128,
}

pub fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv(out_dir: &Path, dim: usize, rows: &[CsvRow]) -> Result<std::path::PathBuf> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::config(format!("cannot create output directory: {e}")))?;
    let path = out_dir.join("summary.csv");
    let mut text = String::from("command,dim,steps,dt,Y0");
    for i in 1..=dim {
        text.push_str(&format!(",Z0_{i}"));
    }
    text.push_str(",K_T_min,bound,margin,runtime_ms\n");
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{},{}",
            row.command,
            row.dim,
            row.steps,
            sig17(row.dt),
            sig17(row.y0)
        ));
        for i in 0..dim {
            let z = row.z0.get(i).copied().unwrap_or(0.0);
            text.push_str(&format!(",{}", sig17(z)));
        }
        text.push_str(&format!(",{}", sig17(row.k_t_min)));
        text.push_str(&format!(",{}", row.bound.map(sig17).unwrap_or_default()));
        text.push_str(&format!(",{}", row.margin.map(sig17).unwrap_or_default()));
        text.push_str(&format!(",{}\n", row.runtime_ms));
    }
    fs::write(&path, text)
        .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}
