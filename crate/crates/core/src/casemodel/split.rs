//! Deterministic train/validation/test split, stratified by label cardinality.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CaseRecord;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SplitError {
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
}

/// Largest-remainder apportionment of `n` items over `ratios`.
pub(crate) fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Train, validation and test partitions.
pub type Splits = (Vec<CaseRecord>, Vec<CaseRecord>, Vec<CaseRecord>);

/// Split a corpus into (train, val, test).
///
/// Global split sizes follow largest-remainder rounding of `ratios`; within
/// that, each cardinality class (single, double, triple, other) is spread
/// across the splits as evenly as the totals allow.
pub fn split_corpus(
    corpus: &[CaseRecord],
    ratios: [f64; 3],
    seed: u64,
) -> Result<Splits, SplitError> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SplitError::BadRatios(ratios));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // strata keyed by label-set size: 0..=5
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); 6];
    for (i, r) in corpus.iter().enumerate() {
        strata[r.labels.len()].push(i);
    }
    for s in strata.iter_mut() {
        s.shuffle(&mut rng);
    }

    let targets = apportion(corpus.len(), &ratios);
    let mut alloc: Vec<[usize; 3]> = Vec::with_capacity(strata.len());
    let mut filled = [0usize; 3];
    let mut leftovers = Vec::with_capacity(strata.len());
    for s in &strata {
        let mut a = [0usize; 3];
        for j in 0..3 {
            a[j] = (ratios[j] * s.len() as f64).floor() as usize;
            filled[j] += a[j];
        }
        leftovers.push(s.len() - a.iter().sum::<usize>());
        alloc.push(a);
    }
    let mut deficit: Vec<usize> = (0..3).map(|j| targets[j] - filled[j]).collect();
    for (si, left) in leftovers.iter().enumerate() {
        for _ in 0..*left {
            let j = (0..3)
                .max_by(|&a, &b| deficit[a].cmp(&deficit[b]).then(b.cmp(&a)))
                .expect("three splits");
            debug_assert!(deficit[j] > 0);
            deficit[j] -= 1;
            alloc[si][j] += 1;
        }
    }

    let mut out: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (s, a) in strata.iter().zip(&alloc) {
        let mut it = s.iter().copied();
        for j in 0..3 {
            out[j].extend(it.by_ref().take(a[j]));
        }
    }
    let take = |idx: &mut Vec<usize>| {
        idx.sort_unstable();
        idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>()
    };
    let [mut a, mut b, mut c] = out;
    Ok((take(&mut a), take(&mut b), take(&mut c)))
}
