//! CSV and JSON outputs. Floats are written with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::auglag::MajorRecord;
use crate::error::{invalid, Result};
use crate::trustregion::TrRecord;

/// Column order of history.csv.
pub const HISTORY_COLUMNS: [&str; 10] = [
    "iteration",
    "j",
    "c_inf",
    "chi_inf",
    "s",
    "usage_min_pct",
    "usage_max_pct",
    "hdm_solves",
    "rom_solves",
    "eqp_solves",
];

/// Column order of comparison.csv.
pub const COMPARISON_COLUMNS: [&str; 9] =
    ["constraint_tol", "method", "epsilon", "hdm_solves", "rom_solves", "eqp_solves", "cost_s", "speedup", "major"];

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// S_i = |j_i − j⋆| / j_initial.
pub fn compute_si(j_i: f64, j_star: f64, j_initial: f64) -> Result<f64> {
    if j_initial == 0.0 || !j_initial.is_finite() {
        return Err(invalid("S_i needs a finite nonzero initial objective"));
    }
    Ok((j_i - j_star).abs() / j_initial)
}

/// One history.csv row per major iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub iteration: usize,
    pub j: f64,
    pub c_inf: f64,
    pub chi_inf: f64,
    pub s: Option<f64>,
    pub usage_min_pct: Option<f64>,
    pub usage_max_pct: Option<f64>,
    pub hdm_solves: usize,
    pub rom_solves: usize,
    pub eqp_solves: usize,
}

pub fn report_rows(majors: &[MajorRecord], traces: &[Vec<TrRecord>], j_star: Option<f64>, j_initial: f64) -> Vec<ReportRow> {
    majors
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let usage: Vec<f64> = traces
                .get(k)
                .map(|t| t.iter().filter_map(|r| r.model.usage_fraction).collect())
                .unwrap_or_default();
            let (lo, hi) = if usage.is_empty() {
                (None, None)
            } else {
                let lo = usage.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = usage.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (Some(100.0 * lo), Some(100.0 * hi))
            };
            ReportRow {
                iteration: m.i,
                j: m.j,
                c_inf: m.c_inf,
                chi_inf: m.chi_inf,
                s: j_star.and_then(|js| compute_si(m.j, js, j_initial).ok()),
                usage_min_pct: lo,
                usage_max_pct: hi,
                hdm_solves: m.tally[0],
                rom_solves: m.tally[1],
                eqp_solves: m.tally[2],
            }
        })
        .collect()
}

pub fn history_csv(rows: &[ReportRow]) -> String {
    let mut out = HISTORY_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            fmt_f64(r.j),
            fmt_f64(r.c_inf),
            fmt_f64(r.chi_inf),
            fmt_opt(r.s),
            fmt_opt(r.usage_min_pct),
            fmt_opt(r.usage_max_pct),
            r.hdm_solves,
            r.rom_solves,
            r.eqp_solves
        );
    }
    out
}

/// Compact JSON with every float printed to 17 significant digits.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| invalid(e.to_string()))?;
    let mut out = String::new();
    write_value(&v, &mut out);
    Ok(out)
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&fmt_f64(n.as_f64().unwrap_or(f64::NAN)));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(x, out);
            }
            out.push(']');
        }
        Value::Object(m) => {
            out.push('{');
            for (i, (k, x)) in m.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_value(x, out);
            }
            out.push('}');
        }
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// One line of trace.jsonl.
#[derive(Serialize)]
pub struct TraceLine<'a> {
    pub major: usize,
    #[serde(flatten)]
    pub record: &'a TrRecord,
}

pub fn trace_jsonl(traces: &[Vec<TrRecord>]) -> Result<String> {
    let mut out = String::new();
    for (major, t) in traces.iter().enumerate() {
        for record in t {
            out.push_str(&to_json(&TraceLine { major, record })?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// One comparison.csv cell: the first major at which a method reaches
/// S_i < ε with ‖c_i‖∞ ≤ the constraint tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cutoff {
    pub major: usize,
    pub hdm_solves: usize,
    pub rom_solves: usize,
    pub eqp_solves: usize,
    pub cost: f64,
}

pub fn find_cutoff(majors: &[MajorRecord], rows: &[ReportRow], epsilon: f64, ctol: f64) -> Option<Cutoff> {
    majors.iter().zip(rows).find_map(|(m, r)| {
        let s = r.s?;
        (s < epsilon && m.c_inf <= ctol).then(|| Cutoff {
            major: m.i,
            hdm_solves: m.tally[0],
            rom_solves: m.tally[1],
            eqp_solves: m.tally[2],
            cost: m.cost,
        })
    })
}

pub const EPSILONS: [f64; 3] = [1e-3, 1e-4, 1e-6];
pub const CONSTRAINT_TOLS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// Marker for cells a method never reached.
pub const UNREACHED: &str = "unreached";

/// Builds comparison.csv from labelled runs; `baseline` indexes the run
/// whose cost defines speedup 1.
pub fn comparison_csv(runs: &[(String, Vec<MajorRecord>, Vec<ReportRow>)], baseline: usize) -> String {
    let mut out = COMPARISON_COLUMNS.join(",");
    out.push('\n');
    for ctol in CONSTRAINT_TOLS {
        for (label, majors, rows) in runs {
            for eps in EPSILONS {
                let cut = find_cutoff(majors, rows, eps, ctol);
                let base = find_cutoff(&runs[baseline].1, &runs[baseline].2, eps, ctol);
                match cut {
                    Some(c) => {
                        let speedup = match base {
                            Some(b) if c.cost > 0.0 => fmt_f64(b.cost / c.cost),
                            _ => UNREACHED.to_string(),
                        };
                        let _ = writeln!(
                            out,
                            "{},{label},{},{},{},{},{},{speedup},{}",
                            fmt_f64(ctol),
                            fmt_f64(eps),
                            c.hdm_solves,
                            c.rom_solves,
                            c.eqp_solves,
                            fmt_f64(c.cost),
                            c.major
                        );
                    }
                    None => {
                        let _ = writeln!(
                            out,
                            "{},{label},{},{UNREACHED},{UNREACHED},{UNREACHED},{UNREACHED},{UNREACHED},{UNREACHED}",
                            fmt_f64(ctol),
                            fmt_f64(eps)
                        );
                    }
                }
            }
        }
    }
    out
}
