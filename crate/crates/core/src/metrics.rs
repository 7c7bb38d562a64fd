//! Evaluation records, the performance-energy consistency metric, success
//! rates with binomial errors, and scaling-table emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::CoreError;

/// Fraction of pairs whose energy ordering agrees with their performance
/// ordering; ties in either list count as non-concordant.
pub fn consistency(energies: &[f64], performances: &[f64]) -> Result<f64, CoreError> {
    let n = energies.len();
    if n != performances.len() {
        return Err(CoreError::invalid(format!(
            "consistency: {n} energies vs {} performances",
            performances.len()
        )));
    }
    if n < 2 {
        return Err(CoreError::invalid("consistency needs at least two samples"));
    }
    let mut concordant = 0usize;
    for i in 0..n - 1 {
        for j in i + 1..n {
            let de = energies[i] - energies[j];
            let dp = performances[i] - performances[j];
            if de * dp > 0.0 {
                concordant += 1;
            }
        }
    }
    Ok(concordant as f64 / (n * (n - 1) / 2) as f64)
}

/// One inference result for a (problem, method, budget) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub problem_id: u64,
    pub method: String,
    pub budget: u64,
    pub success: bool,
    pub elementwise_accuracy: f64,
    pub final_energy: f64,
    /// Squared L2 distance of the encoded solution to the ground truth.
    pub l2_distance: f64,
    pub nfe: u64,
}

pub const RECORDS_HEADER: &str =
    "problem_id,method,budget,success,elementwise_accuracy,final_energy,l2_distance,nfe";

impl EvalRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.problem_id,
            self.method,
            self.budget,
            self.success as u8,
            self.elementwise_accuracy,
            self.final_energy,
            self.l2_distance,
            self.nfe
        )
    }

    /// Parses a records CSV (header required, schema checked).
    pub fn parse_csv(text: &str) -> Result<Vec<EvalRecord>, CoreError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == RECORDS_HEADER => {}
            Some(h) => {
                return Err(CoreError::invalid(format!(
                    "records schema mismatch: `{h}`"
                )))
            }
            None => return Err(CoreError::invalid("empty records file")),
        }
        let mut out = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(CoreError::invalid(format!(
                    "records line {}: expected 8 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let bad = |what: &str| {
                CoreError::invalid(format!("records line {}: bad {what}", lineno + 2))
            };
            out.push(EvalRecord {
                problem_id: fields[0].parse().map_err(|_| bad("problem_id"))?,
                method: validate_method_tag(fields[1], lineno + 2)?,
                budget: fields[2].parse().map_err(|_| bad("budget"))?,
                success: match fields[3] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad("success flag")),
                },
                elementwise_accuracy: parse_finite(fields[4]).ok_or_else(|| bad("accuracy"))?,
                final_energy: fields[5].parse().map_err(|_| bad("final_energy"))?,
                l2_distance: parse_finite(fields[6]).ok_or_else(|| bad("l2_distance"))?,
                nfe: fields[7].parse().map_err(|_| bad("nfe"))?,
            });
        }
        Ok(out)
    }
}

fn parse_finite(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn validate_method_tag(s: &str, lineno: usize) -> Result<String, CoreError> {
    let ok = !s.is_empty()
        && s.len() <= 64
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(s.to_string())
    } else {
        Err(CoreError::invalid(format!(
            "records line {lineno}: bad method tag"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateCell {
    pub rate: f64,
    /// Binomial standard error `sqrt(p (1-p) / n)`.
    pub se: f64,
    pub n: usize,
}

/// Mean success per (method, budget) cell; empty cells are absent.
pub fn success_rate(records: &[EvalRecord]) -> BTreeMap<(String, u64), RateCell> {
    let mut counts: BTreeMap<(String, u64), (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = counts.entry((r.method.clone(), r.budget)).or_insert((0, 0));
        e.0 += r.success as usize;
        e.1 += 1;
    }
    counts
        .into_iter()
        .map(|(k, (s, n))| {
            let p = s as f64 / n as f64;
            (
                k,
                RateCell {
                    rate: p,
                    se: (p * (1.0 - p) / n as f64).sqrt(),
                    n,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTable {
    /// Machine-readable: `method,<b1>,<b2>,...` rows with empty cells for
    /// absent combinations.
    pub csv: String,
    /// Aligned human-readable rendering of the same data.
    pub text: String,
}

/// One row per method, one column per budget (input order preserved).
pub fn scaling_table(records: &[EvalRecord], budgets: &[u64]) -> ScalingTable {
    let rates = success_rate(records);
    let methods: Vec<String> = {
        let mut m: Vec<String> = rates.keys().map(|(m, _)| m.clone()).collect();
        m.dedup();
        m.sort();
        m.dedup();
        m
    };
    let mut csv = String::from("method");
    for b in budgets {
        let _ = write!(csv, ",{b}");
    }
    csv.push('\n');
    let mut text = format!("{:<24}", "method");
    for b in budgets {
        let _ = write!(text, " {:>12}", format!("N={b}"));
    }
    text.push('\n');
    for m in &methods {
        let _ = write!(csv, "{m}");
        let _ = write!(text, "{m:<24}");
        for b in budgets {
            match rates.get(&(m.clone(), *b)) {
                Some(cell) => {
                    let _ = write!(csv, ",{:.6}", cell.rate);
                    let _ = write!(text, " {:>12}", format!("{:.4}", cell.rate));
                }
                None => {
                    csv.push(',');
                    let _ = write!(text, " {:>12}", "-");
                }
            }
        }
        csv.push('\n');
        text.push('\n');
    }
    ScalingTable { csv, text }
}
