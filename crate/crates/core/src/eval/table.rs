//! Aligned text rendering of a comparison report.

use super::{MetricsReport, Prf};

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub name: String,
    pub correct: f64,
    pub f1: f64,
    pub single: Prf,
    pub double: Prf,
    pub triple: Prf,
}

impl TableRow {
    pub fn from_metrics(name: &str, m: &MetricsReport) -> Self {
        Self {
            name: name.to_string(),
            correct: m.overall.correct,
            f1: m.overall.f1,
            single: m.single,
            double: m.double,
            triple: m.triple,
        }
    }
}

/// Render rows under a two-level header: overall (Correct, F1) then
/// Prec./Recall/F1 for single, double and triple gold sets. Rows given as
/// `Err(tag)` are shown with their failure tag. Values use three decimals.
pub fn format_table(rows: &[(String, Result<TableRow, String>)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).chain(["Method".len()]).max().unwrap_or(6);
    let mut out = String::new();
    let groups = ["All", "Single", "Double", "Triple"];
    out.push_str(&format!("{:<name_w$} | {:^14} |", "", groups[0]));
    for g in &groups[1..] {
        out.push_str(&format!(" {:^20} |", g));
    }
    out.push('\n');
    out.push_str(&format!("{:<name_w$} | {:>7} {:>6} |", "Method", "Correct", "F1"));
    for _ in 0..3 {
        out.push_str(&format!(" {:>6} {:>6} {:>6} |", "Prec.", "Recall", "F1"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w + 3 + 14 + 2 + 3 * 23));
    out.push('\n');
    for (name, row) in rows {
        match row {
            Ok(r) => {
                out.push_str(&format!("{:<name_w$} | {:>7.3} {:>6.3} |", name, r.correct, r.f1));
                for b in [r.single, r.double, r.triple] {
                    out.push_str(&format!(" {:>6.3} {:>6.3} {:>6.3} |", b.p, b.r, b.f1));
                }
            }
            Err(tag) => out.push_str(&format!("{:<name_w$} | failed: {tag}", name)),
        }
        out.push('\n');
    }
    out
}
