//! Run artifacts: `report.json`, `summary.csv`, `paper_map.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use kh_core::report::VerificationReport;

use crate::config::ExperimentConfig;

pub const SUMMARY_HEADER: &str = "id,seed,lhs,rhs,fitted_c,pass,anchor";

/// Contents of `report.json`: the resolved config and every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub reports: Vec<VerificationReport>,
}

impl RunRecord {
    /// Whether every gated check passed.
    pub fn all_pass(&self) -> bool {
        self.reports.iter().all(|r| r.pass)
    }
}

/// Shortest round-trip decimal; identical inputs give identical text.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn summary_csv(reports: &[VerificationReport]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        let fitted = r.fitted_c.map(num).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.id),
            seed,
            num(r.lhs),
            num(r.rhs),
            fitted,
            r.pass,
            csv_field(&r.anchor)
        );
    }
    out
}

pub fn paper_map(reports: &[VerificationReport]) -> BTreeMap<String, String> {
    reports.iter().map(|r| (r.id.clone(), r.anchor.clone())).collect()
}

/// Write all three artifacts into `dir`, creating it if needed.
pub fn write_all(dir: &Path, record: &RunRecord) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(record).map_err(std::io::Error::other)?;
    fs::write(dir.join("report.json"), json + "\n")?;
    fs::write(dir.join("summary.csv"), summary_csv(&record.reports))?;
    let map = serde_json::to_string_pretty(&paper_map(&record.reports)).map_err(std::io::Error::other)?;
    fs::write(dir.join("paper_map.json"), map + "\n")?;
    Ok(())
}

/// A recorded run: the typed config plus the reports as raw JSON, since
/// non-finite floats are written as `null` and do not read back as `f64`.
pub struct Recorded {
    pub config: ExperimentConfig,
    pub reports: serde_json::Value,
}

pub fn read_record(path: &Path) -> Result<Recorded, String> {
    let err = |e: &dyn std::fmt::Display| format!("{}: {e}", path.display());
    let text = fs::read_to_string(path).map_err(|e| err(&e))?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| err(&e))?;
    let config = serde_json::from_value(value["config"].take()).map_err(|e| err(&e))?;
    Ok(Recorded {
        config,
        reports: value["reports"].take(),
    })
}

/// Whether fresh reports serialize to exactly the recorded JSON. Floats are
/// written in shortest round-trip form and parsed exactly, so equal values
/// mean equal bit patterns.
pub fn identical(recorded: &serde_json::Value, fresh: &[VerificationReport]) -> bool {
    serde_json::to_value(fresh).is_ok_and(|v| &v == recorded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VerificationReport {
        VerificationReport::new("x", "an, anchor", 0.1 + 0.2, 3.0)
            .param("a", 1.5)
            .with_seed(7)
    }

    #[test]
    fn csv_is_quoted_and_exact() {
        let csv = summary_csv(&[sample()]);
        let line = csv.lines().nth(1).unwrap();
        assert_eq!(
            line,
            "x,7,0.30000000000000004,3.0,0.10000000000000002,false,\"an, anchor\""
        );
    }

    #[test]
    fn identical_detects_edits() {
        let a = vec![sample().param("inf", f64::INFINITY)];
        let recorded = serde_json::to_value(&a).unwrap();
        assert!(identical(&recorded, &a));
        let mut b = a.clone();
        b[0].lhs = f64::from_bits(b[0].lhs.to_bits() + 1);
        assert!(!identical(&recorded, &b));
    }

    #[test]
    fn record_round_trips() {
        let cfg = ExperimentConfig::parse("kind = \"pop\"").unwrap();
        let rec = RunRecord {
            config: cfg,
            reports: vec![sample()],
        };
        let dir = tempfile::tempdir().unwrap();
        write_all(dir.path(), &rec).unwrap();
        let back = read_record(&dir.path().join("report.json")).unwrap();
        assert!(identical(&back.reports, &rec.reports));
        assert_eq!(back.config, rec.config);
    }
}
