//! Clinical case schema, preprocessing, text rendering and synthetic cohorts.

pub mod case;
pub mod io;
pub mod narrative;
pub mod preprocess;
pub mod split;
pub mod synth;

pub use case::{
    validate_case, Cardinality, Cdr, FieldError, Gender, Handedness, LabelSet, NumericField,
    PatientCase, SubtypeLabel, ValidationErrors,
};
pub use narrative::{render_text, sanitize_corpus_text};
pub use preprocess::{apply_preprocess, fit_preprocess, OutlierPolicy, PreprocessError, PreprocessStats};
pub use split::{split_corpus, SplitError, Splits};
pub use synth::{generate_synthetic, GeneratorConfig, GeneratorError};

use sha2::{Digest, Sha256};

/// A labelled case together with its cached canonical narrative.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case: PatientCase,
    pub labels: LabelSet,
    narrative: String,
}

impl CaseRecord {
    pub fn new(case: PatientCase, labels: LabelSet) -> Self {
        let narrative = render_text(&case);
        Self { case, labels, narrative }
    }

    pub fn id(&self) -> &str {
        &self.case.id
    }

    pub fn narrative(&self) -> &str {
        &self.narrative
    }

    /// SHA-256 of the narrative bytes.
    pub fn narrative_digest(&self) -> [u8; 32] {
        Sha256::digest(self.narrative.as_bytes()).into()
    }
}
