//! Case fusion: single-head cross-attention of the target `[CLS]` over the
//! stacked hidden vectors of the retrieved cases.
//!
//! ```text
//! q   = W_Q t
//! k_j = W_K a_j        v_j = W_V a_j   (W_V = W_K when shared)
//! α   = softmax(k_j · q / √d_k)        over unmasked rows
//! out = Σ α_j v_j
//! ```
//!
//! [`fuse_backward`] is the hand-derived reverse pass of the same map.

mod prompt;

use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::HiddenSequence;
use crate::linalg::{dot, softmax, Matrix};

pub use prompt::{splice_prompt, PromptSequence, PromptSlot, SlotRole};

/// Default projected dimension.
pub const DEFAULT_DK: usize = 64;
/// Upper bound on the number of masked auxiliary cases.
pub const MASK_MAX: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FusionError {
    #[error("vector has dimension {found}, expected {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("no retrieved cases to concatenate")]
    EmptyRetrieval,
    #[error("non-finite value in fusion input")]
    NonFiniteInput,
    #[error("prompt template has no <RAGHere> slot")]
    MissingRagSlot,
    #[error("prompt template has {0} <RAGHere> slots")]
    MultipleRagSlots(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `d_k × d`
    pub w_q: Matrix,
    /// `d_k × d`
    pub w_k: Matrix,
    /// Separate value projection; `None` means values use `w_k`.
    pub w_v: Option<Matrix>,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(d: usize, d_k: usize, shared_kv: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let w_q = Matrix::uniform(d_k, d, bound, rng);
        let w_k = Matrix::uniform(d_k, d, bound, rng);
        let w_v = (!shared_kv).then(|| Matrix::uniform(d_k, d, bound, rng));
        Self { w_q, w_k, w_v }
    }

    pub fn d_k(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d(&self) -> usize {
        self.w_q.cols()
    }

    pub fn shared_kv(&self) -> bool {
        self.w_v.is_none()
    }

    pub fn value_proj(&self) -> &Matrix {
        self.w_v.as_ref().unwrap_or(&self.w_k)
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("fusion.w_q".to_string(), &self.w_q), ("fusion.w_k".to_string(), &self.w_k)];
        if let Some(v) = &self.w_v {
            out.push(("fusion.w_v".to_string(), v));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![("fusion.w_q".to_string(), &mut self.w_q), ("fusion.w_k".to_string(), &mut self.w_k)];
        if let Some(v) = &mut self.w_v {
            out.push(("fusion.w_v".to_string(), v));
        }
        out
    }
}

/// Retrieved-case rows stacked in retrieval order, `[CLS]` first in each block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatMatrix {
    pub rows: Vec<Vec<f64>>,
    pub boundaries: Vec<Range<usize>>,
    pub mask: Vec<bool>,
}

impl ConcatMatrix {
    pub fn cases(&self) -> usize {
        self.boundaries.len()
    }

    pub fn active_rows(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }

    /// Mask every row of the given case blocks.
    pub fn mask_cases(&mut self, cases: &[usize]) {
        for &c in cases {
            for r in self.boundaries[c].clone() {
                self.mask[r] = true;
            }
        }
    }

    pub fn masked_cases(&self) -> Vec<usize> {
        (0..self.cases()).filter(|&c| self.boundaries[c].clone().all(|r| self.mask[r])).collect()
    }
}

pub fn build_concat(sequences: &[&HiddenSequence]) -> Result<ConcatMatrix, FusionError> {
    let first = sequences.first().ok_or(FusionError::EmptyRetrieval)?;
    let d = first.dim();
    let mut rows = Vec::new();
    let mut boundaries = Vec::with_capacity(sequences.len());
    for s in sequences {
        let start = rows.len();
        for v in std::iter::once(&s.cls).chain(&s.tokens) {
            if v.len() != d {
                return Err(FusionError::DimensionMismatch { found: v.len(), expected: d });
            }
            rows.push(v.clone());
        }
        boundaries.push(start..rows.len());
    }
    let mask = vec![false; rows.len()];
    Ok(ConcatMatrix { rows, boundaries, mask })
}

/// How many retrieved cases to hide, and the seed choosing which.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub m: usize,
    pub seed: u64,
}

/// Case indices selected by `spec`, without replacement, sorted. `m` is
/// clamped to the number of cases.
pub fn mask_selection(cases: usize, spec: MaskSpec) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = sample(&mut rng, cases, spec.m.min(cases)).into_vec();
    picked.sort_unstable();
    picked
}

pub fn apply_mask(a: &ConcatMatrix, spec: MaskSpec) -> ConcatMatrix {
    let mut out = a.clone();
    out.mask_cases(&mask_selection(a.cases(), spec));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    /// Length `d_k`.
    pub vector: Vec<f64>,
    /// One weight per row of the concat matrix; exactly 0 on masked rows.
    pub weights: Vec<f64>,
    /// No active rows: `vector` is all zeros.
    pub no_evidence: bool,
}

/// Forward intermediates reused by the backward pass.
struct Forward {
    q: Vec<f64>,
    active: Vec<usize>,
    keys: Vec<Vec<f64>>,
    values: Option<Vec<Vec<f64>>>,
    alpha: Vec<f64>,
    out: Vec<f64>,
}

fn check(t_cls: &[f64], a: Option<&ConcatMatrix>, params: &FusionParams) -> Result<(), FusionError> {
    if t_cls.len() != params.d() {
        return Err(FusionError::DimensionMismatch { found: t_cls.len(), expected: params.d() });
    }
    if !t_cls.iter().all(|v| v.is_finite()) {
        return Err(FusionError::NonFiniteInput);
    }
    if let Some(a) = a {
        for (r, m) in a.rows.iter().zip(&a.mask) {
            if r.len() != params.d() {
                return Err(FusionError::DimensionMismatch { found: r.len(), expected: params.d() });
            }
            if !*m && !r.iter().all(|v| v.is_finite()) {
                return Err(FusionError::NonFiniteInput);
            }
        }
    }
    Ok(())
}

fn forward(t_cls: &[f64], a: &ConcatMatrix, params: &FusionParams) -> Forward {
    let d_k = params.d_k();
    let q = params.w_q.matvec(t_cls);
    let active: Vec<usize> = (0..a.rows.len()).filter(|&r| !a.mask[r]).collect();
    let keys: Vec<Vec<f64>> = active.iter().map(|&r| params.w_k.matvec(&a.rows[r])).collect();
    let values: Option<Vec<Vec<f64>>> =
        params.w_v.as_ref().map(|wv| active.iter().map(|&r| wv.matvec(&a.rows[r])).collect());
    let inv = 1.0 / (d_k as f64).sqrt();
    let scores: Vec<f64> = keys.iter().map(|k| dot(k, &q) * inv).collect();
    let alpha = softmax(&scores);
    let mut out = vec![0.0; d_k];
    for (j, w) in alpha.iter().enumerate() {
        let v = values.as_ref().map_or(&keys[j], |vs| &vs[j]);
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Forward { q, active, keys, values, alpha, out }
}

/// Attend from `t_cls` over the unmasked rows of `a`. A missing or fully
/// masked concat matrix yields the zero vector with `no_evidence` set.
pub fn fuse(t_cls: &[f64], a: Option<&ConcatMatrix>, params: &FusionParams) -> Result<FusionOutput, FusionError> {
    check(t_cls, a, params)?;
    let Some(a) = a.filter(|a| a.active_rows() > 0) else {
        let weights = a.map_or_else(Vec::new, |a| vec![0.0; a.rows.len()]);
        return Ok(FusionOutput { vector: vec![0.0; params.d_k()], weights, no_evidence: true });
    };
    let f = forward(t_cls, a, params);
    let mut weights = vec![0.0; a.rows.len()];
    for (&r, w) in f.active.iter().zip(&f.alpha) {
        weights[r] = *w;
    }
    Ok(FusionOutput { vector: f.out, weights, no_evidence: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Option<Matrix>,
    pub t_cls: Vec<f64>,
    /// Per concat row; `None` when input gradients were not requested.
    pub rows: Option<Vec<Vec<f64>>>,
}

impl FusionGrads {
    pub fn zeros(params: &FusionParams) -> Self {
        let (d_k, d) = (params.d_k(), params.d());
        Self {
            w_q: Matrix::zeros(d_k, d),
            w_k: Matrix::zeros(d_k, d),
            w_v: params.w_v.as_ref().map(|_| Matrix::zeros(d_k, d)),
            t_cls: vec![0.0; d],
            rows: None,
        }
    }
}

/// Reverse pass of [`fuse`] for upstream gradient `upstream` (length `d_k`).
pub fn fuse_backward(
    t_cls: &[f64],
    a: Option<&ConcatMatrix>,
    params: &FusionParams,
    upstream: &[f64],
) -> Result<FusionGrads, FusionError> {
    fuse_backward_with(t_cls, a, params, upstream, true)
}

/// As [`fuse_backward`]; `input_grads = false` skips the per-row input
/// gradients, which the trainer does not need while the encoder is frozen.
pub fn fuse_backward_with(
    t_cls: &[f64],
    a: Option<&ConcatMatrix>,
    params: &FusionParams,
    upstream: &[f64],
    input_grads: bool,
) -> Result<FusionGrads, FusionError> {
    check(t_cls, a, params)?;
    if upstream.len() != params.d_k() {
        return Err(FusionError::DimensionMismatch { found: upstream.len(), expected: params.d_k() });
    }
    let mut g = FusionGrads::zeros(params);
    let Some(a) = a else {
        return Ok(g);
    };
    if input_grads {
        g.rows = Some(vec![vec![0.0; params.d()]; a.rows.len()]);
    }
    if a.active_rows() == 0 {
        return Ok(g);
    }
    let f = forward(t_cls, a, params);
    let inv = 1.0 / (params.d_k() as f64).sqrt();
    let value = |j: usize| f.values.as_ref().map_or(&f.keys[j], |vs| &vs[j]);

    let d_alpha: Vec<f64> = (0..f.active.len()).map(|j| dot(upstream, value(j))).collect();
    let mean = dot(&f.alpha, &d_alpha);
    let d_s: Vec<f64> = f.alpha.iter().zip(&d_alpha).map(|(al, da)| al * (da - mean)).collect();

    let mut d_q = vec![0.0; params.d_k()];
    for (j, ds) in d_s.iter().enumerate() {
        for (x, k) in d_q.iter_mut().zip(&f.keys[j]) {
            *x += ds * inv * k;
        }
    }
    g.w_q.add_outer(1.0, &d_q, t_cls);
    g.t_cls = params.w_q.matvec_t(&d_q);

    for (j, &r) in f.active.iter().enumerate() {
        let row = &a.rows[r];
        // d k_j = ds_j q / √d_k ;  d v_j = α_j g
        let dk: Vec<f64> = f.q.iter().map(|x| d_s[j] * inv * x).collect();
        let dv: Vec<f64> = upstream.iter().map(|x| f.alpha[j] * x).collect();
        match g.w_v.as_mut() {
            None => {
                let sum: Vec<f64> = dk.iter().zip(&dv).map(|(a, b)| a + b).collect();
                g.w_k.add_outer(1.0, &sum, row);
                if let Some(rows) = g.rows.as_mut() {
                    rows[r] = params.w_k.matvec_t(&sum);
                }
            }
            Some(gv) => {
                g.w_k.add_outer(1.0, &dk, row);
                gv.add_outer(1.0, &dv, row);
                if let Some(rows) = g.rows.as_mut() {
                    let mut x = params.w_k.matvec_t(&dk);
                    for (xi, yi) in x.iter_mut().zip(params.value_proj().matvec_t(&dv)) {
                        *xi += yi;
                    }
                    rows[r] = x;
                }
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n_tokens: usize, d: usize, base: f64) -> HiddenSequence {
        HiddenSequence {
            cls: vec![base; d],
            tokens: (0..n_tokens).map(|i| vec![base + i as f64 + 1.0; d]).collect(),
            source_len: n_tokens,
        }
    }

    #[test]
    fn concat_counts_and_boundaries() {
        let (a, b) = (seq(3, 4, 0.0), seq(4, 4, 10.0));
        let c = build_concat(&[&a, &b]).unwrap();
        assert_eq!(c.rows.len(), 9);
        assert_eq!(c.boundaries, vec![0..4, 4..9]);
        assert_eq!(c.rows[4], vec![10.0; 4]);
        let solo = build_concat(&[&seq(0, 4, 1.0)]).unwrap();
        assert_eq!(solo.rows.len(), 1);
        let swapped = build_concat(&[&b, &a]).unwrap();
        assert_eq!(&swapped.rows[..5], &c.rows[4..]);
        assert_eq!(build_concat(&[]), Err(FusionError::EmptyRetrieval));
    }

    #[test]
    fn mask_selection_rules() {
        let c = build_concat(&[&seq(1, 2, 0.0), &seq(1, 2, 1.0), &seq(1, 2, 2.0)]).unwrap();
        assert_eq!(apply_mask(&c, MaskSpec { m: 0, seed: 1 }), c);
        assert_eq!(apply_mask(&c, MaskSpec { m: 3, seed: 1 }).active_rows(), 0);
        let a = apply_mask(&c, MaskSpec { m: 2, seed: 9 });
        assert_eq!(a, apply_mask(&c, MaskSpec { m: 2, seed: 9 }));
        assert_eq!(a.masked_cases().len(), 2);
    }

    #[test]
    fn two_row_hand_case() {
        let p = FusionParams { w_q: Matrix::identity(2), w_k: Matrix::identity(2), w_v: None };
        let a = ConcatMatrix {
            rows: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            boundaries: vec![0..1, 1..2],
            mask: vec![false, false],
        };
        let out = fuse(&[1.0, 0.0], Some(&a), &p).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let w1 = e / (e + 1.0);
        assert!((out.vector[0] - w1).abs() < 1e-15);
        assert!((out.vector[1] - (1.0 - w1)).abs() < 1e-15);
    }

    #[test]
    fn empty_and_fully_masked_fall_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = FusionParams::init(4, 3, true, &mut rng);
        let out = fuse(&[0.1; 4], None, &p).unwrap();
        assert!(out.no_evidence);
        assert_eq!(out.vector, vec![0.0; 3]);
        let c = apply_mask(&build_concat(&[&seq(2, 4, 0.5)]).unwrap(), MaskSpec { m: 1, seed: 0 });
        let out = fuse(&[0.1; 4], Some(&c), &p).unwrap();
        assert!(out.no_evidence);
        assert_eq!(out.weights, vec![0.0; 3]);
    }

    #[test]
    fn non_finite_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = FusionParams::init(2, 2, true, &mut rng);
        assert_eq!(fuse(&[f64::NAN, 0.0], None, &p), Err(FusionError::NonFiniteInput));
        let c = build_concat(&[&HiddenSequence { cls: vec![f64::INFINITY, 0.0], tokens: vec![], source_len: 0 }]).unwrap();
        assert_eq!(fuse(&[0.0, 0.0], Some(&c), &p), Err(FusionError::NonFiniteInput));
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FusionParams::init(4, 2, false, &mut rng);
        let c = build_concat(&[&seq(2, 4, 0.3), &seq(1, 4, -0.2)]).unwrap();
        let g = fuse_backward(&[0.2, -0.1, 0.4, 0.0], Some(&c), &p, &[0.0, 0.0]).unwrap();
        assert!(g.w_q.as_slice().iter().chain(g.w_k.as_slice()).all(|v| *v == 0.0));
        assert!(g.rows.unwrap().iter().flatten().all(|v| *v == 0.0));
    }
}
