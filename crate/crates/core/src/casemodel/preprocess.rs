//! Normalisation, categorical encoding and outlier handling.
//!
//! Feature vector layout (fixed for a given stats document):
//!
//! * one slot per numeric field, alphabetical, holding the z-score
//!   (0 when absent), followed by a presence bit for each optional numeric
//!   field;
//! * one-hot blocks for `cdr`, `gender`, `handedness` and `ses`, the
//!   optional ones followed by a presence bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::case::{Cdr, Gender, Handedness, NumericField, PatientCase};
use super::CaseRecord;

pub const STATS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub field: String,
    pub mean: f64,
    pub std: f64,
    /// Zero observed variance; `std` is then 1.0.
    pub constant: bool,
    /// Inlier fence `[Q1 - 1.5 IQR, Q3 + 1.5 IQR]`; `None` if the field never occurs.
    pub bounds: Option<(f64, f64)>,
    pub present: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalCodes {
    pub field: String,
    pub levels: Vec<String>,
    pub optional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub format_version: u32,
    pub numeric: Vec<NumericStats>,
    pub categorical: Vec<CategoricalCodes>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierPolicy {
    #[default]
    Clip,
    Reject,
}

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("cannot fit preprocessing on an empty corpus")]
    EmptyCorpus,
    #[error("outlier rejected in field {0}")]
    OutlierRejected(String),
    #[error("stats format_version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("stats document malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn numeric_stats(field: NumericField, values: &mut [f64]) -> NumericStats {
    if values.is_empty() {
        return NumericStats {
            field: field.name().into(),
            mean: 0.0,
            std: 1.0,
            constant: true,
            bounds: None,
            present: 0,
        };
    }
    values.sort_by(f64::total_cmp);
    let q1 = quantile(values, 0.25);
    let q3 = quantile(values, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inliers: Vec<f64> = values.iter().copied().filter(|v| *v >= lo && *v <= hi).collect();
    let n = inliers.len() as f64;
    let mean = inliers.iter().sum::<f64>() / n;
    let var = inliers.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let constant = !(std > 1e-12);
    NumericStats {
        field: field.name().into(),
        mean,
        std: if constant { 1.0 } else { std },
        constant,
        bounds: Some((lo, hi)),
        present: values.len(),
    }
}

fn categorical_tables() -> Vec<CategoricalCodes> {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    vec![
        CategoricalCodes { field: "cdr".into(), levels: s(&["0", "0.5", "1", "2", "3"]), optional: false },
        CategoricalCodes { field: "gender".into(), levels: s(&["female", "male", "other"]), optional: true },
        CategoricalCodes { field: "handedness".into(), levels: s(&["left", "right", "ambi"]), optional: true },
        CategoricalCodes { field: "ses".into(), levels: s(&["1", "2", "3", "4", "5"]), optional: true },
    ]
}

/// Fit normalisation parameters on a (training) corpus.
///
/// Mean and standard deviation are computed over inliers only.
pub fn fit_preprocess(corpus: &[CaseRecord]) -> Result<PreprocessStats, PreprocessError> {
    if corpus.is_empty() {
        return Err(PreprocessError::EmptyCorpus);
    }
    let numeric = NumericField::ALL
        .iter()
        .map(|&f| {
            let mut vals: Vec<f64> = corpus.iter().filter_map(|r| f.get(&r.case)).collect();
            numeric_stats(f, &mut vals)
        })
        .collect();
    Ok(PreprocessStats {
        format_version: STATS_FORMAT_VERSION,
        numeric,
        categorical: categorical_tables(),
    })
}

fn one_hot(out: &mut Vec<f64>, n: usize, idx: Option<usize>, optional: bool) {
    for i in 0..n {
        out.push(if idx == Some(i) { 1.0 } else { 0.0 });
    }
    if optional {
        out.push(if idx.is_some() { 1.0 } else { 0.0 });
    }
}

impl PreprocessStats {
    pub fn numeric_stats(&self, field: NumericField) -> &NumericStats {
        &self.numeric[NumericField::ALL.iter().position(|f| *f == field).expect("known field")]
    }

    /// Length of the encoded feature vector.
    pub fn feature_len(&self) -> usize {
        self.feature_names().len()
    }

    /// Names of every slot in the encoded feature vector.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for f in NumericField::ALL {
            names.push(f.name().to_string());
        }
        for f in NumericField::ALL.iter().filter(|f| !f.required()) {
            names.push(format!("{}_present", f.name()));
        }
        for c in &self.categorical {
            for l in &c.levels {
                names.push(format!("{}={}", c.field, l));
            }
            if c.optional {
                names.push(format!("{}_present", c.field));
            }
        }
        names
    }

    /// Slot indices of the z-scored numeric fields.
    pub fn numeric_slot(&self, field: NumericField) -> usize {
        NumericField::ALL.iter().position(|f| *f == field).expect("known field")
    }

    pub fn save(&self, path: &Path) -> Result<(), PreprocessError> {
        let json = serde_json::to_string_pretty(self).expect("stats serialize");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, PreprocessError> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| PreprocessError::Malformed(e.to_string()))?;
        let found = v
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| PreprocessError::Malformed("missing format_version".into()))?;
        if found != u64::from(STATS_FORMAT_VERSION) {
            return Err(PreprocessError::VersionMismatch {
                found: found as u32,
                expected: STATS_FORMAT_VERSION,
            });
        }
        serde_json::from_value(v).map_err(|e| PreprocessError::Malformed(e.to_string()))
    }
}

/// Encode a case as a fixed-length real vector.
pub fn apply_preprocess(
    case: &PatientCase,
    stats: &PreprocessStats,
    policy: OutlierPolicy,
) -> Result<Vec<f64>, PreprocessError> {
    let mut out = Vec::with_capacity(43);
    let mut presence = Vec::with_capacity(11);
    for f in NumericField::ALL {
        let st = stats.numeric_stats(f);
        let v = f.get(case);
        let z = match v {
            None => 0.0,
            Some(mut x) => {
                if let Some((lo, hi)) = st.bounds {
                    if x < lo || x > hi {
                        match policy {
                            OutlierPolicy::Clip => x = x.clamp(lo, hi),
                            OutlierPolicy::Reject => {
                                return Err(PreprocessError::OutlierRejected(f.name().into()))
                            }
                        }
                    }
                }
                (x - st.mean) / st.std
            }
        };
        out.push(z);
        if !f.required() {
            presence.push(if v.is_some() { 1.0 } else { 0.0 });
        }
    }
    out.extend(presence);

    for c in &stats.categorical {
        let n = c.levels.len();
        match c.field.as_str() {
            "cdr" => one_hot(&mut out, n, Some(case.cdr.index()), c.optional),
            "gender" => one_hot(
                &mut out,
                n,
                case.gender.map(|g| Gender::ALL.iter().position(|x| *x == g).unwrap()),
                c.optional,
            ),
            "handedness" => one_hot(
                &mut out,
                n,
                case.handedness.map(|h| Handedness::ALL.iter().position(|x| *x == h).unwrap()),
                c.optional,
            ),
            "ses" => one_hot(&mut out, n, case.ses.map(|s| usize::from(s) - 1), c.optional),
            other => return Err(PreprocessError::Malformed(format!("unknown categorical field {other}"))),
        }
    }
    debug_assert_eq!(Cdr::ALL.len(), 5);
    Ok(out)
}
