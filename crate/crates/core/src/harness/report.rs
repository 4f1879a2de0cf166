use std::fmt::Write as _;

use crate::harness::scenarios::ScenarioResult;

pub const CSV_HEADER: &str = "scenario,mitigation_fingerprint,seed,metric,value";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "text" => Ok(ReportFormat::Text),
            _ => Err(crate::error::Error::config(format!("unknown report format '{s}'"))),
        }
    }
}

fn rows(results: &[ScenarioResult]) -> Vec<[String; 5]> {
    let mut rows: Vec<[String; 5]> = results
        .iter()
        .flat_map(|r| {
            r.metrics
                .iter()
                .map(|(k, v)| (k.clone(), *v))
                .chain(std::iter::once(("passed".to_string(), if r.passed { 1.0 } else { 0.0 })))
                .map(move |(k, v)| [r.scenario.to_string(), r.fingerprint.clone(), r.seed.to_string(), k, v.to_string()])
        })
        .collect();
    rows.sort();
    rows
}

/// Renders results. Rows are sorted, so output does not depend on the order
/// results were produced in.
pub fn emit_report(results: &[ScenarioResult], format: ReportFormat) -> String {
    let rows = rows(results);
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in rows {
                out.push_str(&r.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Text => {
            let header = ["scenario", "mitigations", "seed", "metric", "value"];
            let mut width = header.map(str::len);
            for r in &rows {
                for (w, c) in width.iter_mut().zip(r) {
                    *w = (*w).max(c.len());
                }
            }
            let line = |cells: [&str; 5]| {
                let mut s = String::new();
                for (i, (c, w)) in cells.iter().zip(width).enumerate() {
                    if i == 4 {
                        let _ = write!(s, "{c:>w$}");
                    } else {
                        let _ = write!(s, "{c:<w$}  ");
                    }
                }
                s.trim_end().to_string() + "\n"
            };
            out.push_str(&line(header));
            for r in &rows {
                out.push_str(&line([&r[0], &r[1], &r[2], &r[3], &r[4]]));
            }
            let mut sorted: Vec<&ScenarioResult> = results.iter().collect();
            sorted.sort_by(|a, b| (a.scenario, &a.fingerprint, a.seed).cmp(&(b.scenario, &b.fingerprint, b.seed)));
            for r in sorted {
                let _ = writeln!(out, "{} {}: {}", r.scenario, r.fingerprint, if r.passed { "PASS" } else { "FAIL" });
                for n in &r.notes {
                    let _ = writeln!(out, "  {n}");
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Scenario;

    fn result(metrics: &[(&str, f64)]) -> ScenarioResult {
        ScenarioResult {
            scenario: Scenario::SyscallSweep,
            fingerprint: "00ff".into(),
            seed: 3,
            metrics: metrics.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            passed: true,
            notes: vec![],
        }
    }

    #[test]
    fn empty_is_header_only() {
        assert_eq!(emit_report(&[], ReportFormat::Csv), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn one_f1_row() {
        let csv = emit_report(&[result(&[("f1", 0.75)])], ReportFormat::Csv);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "syscall_sweep,00ff,3,f1,0.75");
        assert_eq!(lines[2], "syscall_sweep,00ff,3,passed,1");
    }

    #[test]
    fn sorted_and_text_mode() {
        let r = result(&[("z", 1.0), ("a", 2.0)]);
        let csv = emit_report(std::slice::from_ref(&r), ReportFormat::Csv);
        assert!(csv.find(",a,").unwrap() < csv.find(",z,").unwrap());
        let text = emit_report(&[r], ReportFormat::Text);
        assert!(text.starts_with("scenario"));
        assert!(text.contains("syscall_sweep 00ff: PASS"));
    }
}
