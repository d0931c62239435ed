//! Prompt embedding sequence with a single `<RAGHere>` slot for the fusion
//! vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::FusionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SlotRole {
    Bos,
    System,
    Instruction,
    TargetCase,
    RagHere,
    /// A `<RAGHere>` slot after splicing.
    Fusion,
    Assistant,
    Eos,
}

impl SlotRole {
    pub fn token(self) -> &'static str {
        match self {
            SlotRole::Bos => "<s>",
            SlotRole::System => "System",
            SlotRole::Instruction => "Instruction",
            SlotRole::TargetCase => "TargetCase",
            SlotRole::RagHere => "<RAGHere>",
            SlotRole::Fusion => "<Fusion>",
            SlotRole::Assistant => "Assistant",
            SlotRole::Eos => "</s>",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSlot {
    pub role: SlotRole,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSequence {
    pub slots: Vec<PromptSlot>,
}

impl PromptSequence {
    /// `<s> System Instruction TargetCase <RAGHere> Assistant </s>`, each slot
    /// a fixed seed-derived embedding of length `d_k`.
    pub fn default_template(d_k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_k as f64).sqrt();
        let roles = [
            SlotRole::Bos,
            SlotRole::System,
            SlotRole::Instruction,
            SlotRole::TargetCase,
            SlotRole::RagHere,
            SlotRole::Assistant,
            SlotRole::Eos,
        ];
        let slots = roles
            .into_iter()
            .map(|role| PromptSlot { role, vector: (0..d_k).map(|_| rng.random_range(-bound..=bound)).collect() })
            .collect();
        Self { slots }
    }

    pub fn rag_position(&self) -> Result<usize, FusionError> {
        let hits: Vec<usize> =
            self.slots.iter().enumerate().filter(|(_, s)| s.role == SlotRole::RagHere).map(|(i, _)| i).collect();
        match hits.as_slice() {
            [] => Err(FusionError::MissingRagSlot),
            [i] => Ok(*i),
            many => Err(FusionError::MultipleRagSlots(many.len())),
        }
    }
}

/// Replace the `<RAGHere>` slot with the fusion vector. Length and every
/// other slot are unchanged; the replaced slot is re-tagged [`SlotRole::Fusion`].
pub fn splice_prompt(template: &PromptSequence, fusion: &[f64]) -> Result<PromptSequence, FusionError> {
    let at = template.rag_position()?;
    let expected = template.slots[at].vector.len();
    if fusion.len() != expected {
        return Err(FusionError::DimensionMismatch { found: fusion.len(), expected });
    }
    let mut out = template.clone();
    out.slots[at] = PromptSlot { role: SlotRole::Fusion, vector: fusion.to_vec() };
    Ok(out)
}
