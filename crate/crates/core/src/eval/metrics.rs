//! Exact-set accuracy and micro-averaged precision/recall/F1, overall and
//! by gold-label cardinality.

use serde::{Deserialize, Serialize};

use crate::casemodel::LabelSet;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no prediction/gold pairs to score")]
    EmptyPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Single,
    Double,
    Triple,
    Other,
}

pub fn cardinality_bucket(gold: LabelSet) -> Bucket {
    match gold.len() {
        1 => Bucket::Single,
        2 => Bucket::Double,
        3 => Bucket::Triple,
        _ => Bucket::Other,
    }
}

/// Micro true-positive / false-positive / false-negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, decided: LabelSet, gold: LabelSet) {
        self.tp += decided.intersection(gold).len();
        self.fp += decided.difference(gold).len();
        self.fn_ += gold.difference(decided).len();
    }

    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Prf { p, r, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    /// Fraction of cases whose decided set equals the gold set.
    pub correct: f64,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub single: usize,
    pub double: usize,
    pub triple: usize,
    pub other: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub overall: Overall,
    pub single: Prf,
    pub double: Prf,
    pub triple: Prf,
    pub bucket_counts: BucketCounts,
    pub counts: Counts,
}

/// Score `(decided, gold)` pairs. Buckets follow the gold cardinality; cases
/// with 0, 4 or 5 gold labels count only towards the overall figures.
pub fn compute_metrics(pairs: &[(LabelSet, LabelSet)]) -> Result<MetricsReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyPairs);
    }
    let mut all = Counts::default();
    let mut by = [Counts::default(); 3];
    let mut bucket_counts = BucketCounts::default();
    let mut exact = 0usize;
    for &(decided, gold) in pairs {
        all.add(decided, gold);
        exact += usize::from(decided == gold);
        let slot = match cardinality_bucket(gold) {
            Bucket::Single => {
                bucket_counts.single += 1;
                Some(0)
            }
            Bucket::Double => {
                bucket_counts.double += 1;
                Some(1)
            }
            Bucket::Triple => {
                bucket_counts.triple += 1;
                Some(2)
            }
            Bucket::Other => {
                bucket_counts.other += 1;
                None
            }
        };
        if let Some(i) = slot {
            by[i].add(decided, gold);
        }
    }
    let o = all.prf();
    Ok(MetricsReport {
        n: pairs.len(),
        overall: Overall { correct: exact as f64 / pairs.len() as f64, p: o.p, r: o.r, f1: o.f1 },
        single: by[0].prf(),
        double: by[1].prf(),
        triple: by[2].prf(),
        bucket_counts,
        counts: all,
    })
}
