//! Run directories: artifacts, `report.json` and `summary.csv`.

use std::fs;
use std::path::Path;

use gbdsde::verify::CheckRow;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const REPORT_SCHEMA: &str = "gbdsde-report/1";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: [&str; 9] = [
    "config_hash",
    "seed",
    "command",
    "check",
    "scenario_id",
    "metric",
    "value",
    "tolerance",
    "pass",
];

/// A file produced by a command, written into the run directory.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub file: String,
    pub bytes: Vec<u8>,
}

/// What a command computed, before it is written out.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: String,
    pub checks: Vec<CheckRow>,
    pub details: Value,
    pub artifacts: Vec<Artifact>,
}

impl Outcome {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            checks: Vec::new(),
            details: Value::Object(Default::default()),
            artifacts: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("details serialize");
        if let Value::Object(m) = &mut self.details {
            m.insert(key.to_string(), v);
        }
    }

    pub fn csv<F>(&mut self, file: &str, write: F) -> std::io::Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut bytes = Vec::new();
        write(&mut bytes)?;
        self.artifacts.push(Artifact {
            file: file.to_string(),
            bytes,
        });
        Ok(())
    }

    /// Appends another command's results under its own name.
    pub fn absorb(&mut self, other: Outcome) {
        self.checks.extend(other.checks);
        self.artifacts.extend(other.artifacts);
        let name = other.command.clone();
        self.detail(&name, other.details);
    }
}

/// One check as stored in `report.json`; non-finite numbers become `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub check: String,
    pub scenario_id: Option<usize>,
    pub metric: String,
    pub value: Option<f64>,
    pub tolerance: Option<f64>,
    pub pass: bool,
}

impl From<&CheckRow> for ReportRow {
    fn from(r: &CheckRow) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        Self {
            check: r.check.clone(),
            scenario_id: r.scenario_id,
            metric: r.metric.clone(),
            value: finite(r.value),
            tolerance: finite(r.tolerance),
            pass: r.pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub pass: bool,
    pub checks: Vec<ReportRow>,
    pub details: Value,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn pretty_json(v: &impl Serialize) -> String {
    let value = serde_json::to_value(v).expect("value serializes");
    let mut s = serde_json::to_string_pretty(&value).expect("value prints");
    s.push('\n');
    s
}

/// Writes artifacts, `config.json`, `report.json` and `summary.csv` into `dir`.
pub fn write_run(dir: &Path, outcome: &Outcome, config_json: &str, config_hash: &str, seed: u64) -> Result<Report, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut artifacts = Vec::new();
    let config_artifact = Artifact {
        file: "config.json".into(),
        bytes: config_json.as_bytes().to_vec(),
    };
    for a in std::iter::once(&config_artifact).chain(&outcome.artifacts) {
        let path = dir.join(&a.file);
        fs::write(&path, &a.bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        artifacts.push(ArtifactEntry {
            file: a.file.clone(),
            sha256: sha256_hex(&a.bytes),
            bytes: a.bytes.len(),
        });
    }
    let report = Report {
        schema: REPORT_SCHEMA.into(),
        command: outcome.command.clone(),
        config_hash: config_hash.into(),
        seed,
        pass: outcome.passed(),
        checks: outcome.checks.iter().map(ReportRow::from).collect(),
        details: outcome.details.clone(),
        artifacts,
    };
    let text = pretty_json(&report);
    let path = dir.join(REPORT_FILE);
    fs::write(&path, &text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    // The summary is rebuilt from the file so that merging one directory is an identity.
    let stored = parse_report(&text, &path)?;
    let path = dir.join(SUMMARY_FILE);
    fs::write(&path, summary_csv(std::slice::from_ref(&stored))?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(stored)
}

fn parse_report(text: &str, path: &Path) -> Result<Report, CliError> {
    let r: Report = serde_json::from_str(text).map_err(|e| CliError::MalformedReport(format!("{}: {e}", path.display())))?;
    if r.schema != REPORT_SCHEMA {
        return Err(CliError::MalformedReport(format!(
            "{}: schema \"{}\" is not \"{REPORT_SCHEMA}\"",
            path.display(),
            r.schema
        )));
    }
    Ok(r)
}

pub fn read_report(dir: &Path) -> Result<Report, CliError> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::MalformedReport(format!("{}: {e}", path.display())))?;
    parse_report(&text, &path)
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Summary CSV of the given reports, rows in input order.
pub fn summary_csv(reports: &[Report]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    for r in reports {
        let seed = r.seed.to_string();
        for c in &r.checks {
            let sid = c.scenario_id.map(|s| s.to_string()).unwrap_or_default();
            w.write_record([
                r.config_hash.as_str(),
                &seed,
                &r.command,
                &c.check,
                &sid,
                &c.metric,
                &num(c.value),
                &num(c.tolerance),
                if c.pass { "true" } else { "false" },
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Concatenated summary of the run directories, in the given order.
pub fn merge(dirs: &[&Path]) -> Result<String, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Config("report-merge needs at least one directory".into()));
    }
    let reports = dirs.iter().map(|d| read_report(d)).collect::<Result<Vec<_>, _>>()?;
    summary_csv(&reports)
}
