use rand::Rng;

use super::{EncoderError, HiddenSequence};
use crate::casemodel::{LabelSet, SubtypeLabel};
use crate::linalg::Matrix;

/// Weights of the structured-mode encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredWeights {
    /// `d × F`: summary projection of the whole feature vector.
    pub projection: Matrix,
    /// `F × d`: one direction per feature slot.
    pub directions: Matrix,
    /// `5 × d`: one direction per subtype, used for reference-case diagnoses.
    pub label_directions: Matrix,
}

impl StructuredWeights {
    pub(super) fn init<R: Rng>(d: usize, feature_len: usize, bound: f64, rng: &mut R) -> Self {
        Self {
            projection: Matrix::uniform(d, feature_len, bound, rng),
            directions: Matrix::uniform(feature_len, d, bound, rng),
            label_directions: Matrix::uniform(SubtypeLabel::ALL.len(), d, bound, rng),
        }
    }

    pub fn feature_len(&self) -> usize {
        self.projection.cols()
    }

    pub(super) fn encode(&self, x: &[f64], labels: Option<LabelSet>) -> Result<HiddenSequence, EncoderError> {
        if x.len() != self.feature_len() {
            return Err(EncoderError::FeatureLength { found: x.len(), expected: self.feature_len() });
        }
        let mut cls = self.projection.matvec(x);
        let mut tokens: Vec<Vec<f64>> = x
            .iter()
            .enumerate()
            .map(|(j, &xj)| self.directions.row(j).iter().map(|v| v * xj).collect())
            .collect();
        if let Some(labels) = labels {
            let shift = self.label_shift(labels);
            for row in std::iter::once(&mut cls).chain(tokens.iter_mut()) {
                for (a, b) in row.iter_mut().zip(&shift) {
                    *a += b;
                }
            }
        }
        Ok(HiddenSequence { cls, tokens, source_len: x.len() })
    }

    /// Sum of the label directions of `labels`: the diagnosis embedding
    /// added to every row of a reference case.
    pub fn label_shift(&self, labels: LabelSet) -> Vec<f64> {
        let mut shift = vec![0.0; self.label_directions.cols()];
        for l in labels.iter() {
            for (a, b) in shift.iter_mut().zip(self.label_directions.row(l.code() as usize)) {
                *a += b;
            }
        }
        shift
    }

    pub(super) fn tensors<'a>(&'a self, out: &mut Vec<(String, &'a Matrix)>) {
        out.push(("encoder.projection".into(), &self.projection));
        out.push(("encoder.directions".into(), &self.directions));
        out.push(("encoder.label_directions".into(), &self.label_directions));
    }

    pub(super) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Matrix)>) {
        out.push(("encoder.projection".into(), &mut self.projection));
        out.push(("encoder.directions".into(), &mut self.directions));
        out.push(("encoder.label_directions".into(), &mut self.label_directions));
    }
}
