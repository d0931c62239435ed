//! Canonical text rendering of a case and corpus sentence filtering.

use super::case::{fmt_num, PatientCase};

/// Render a case as one sentence per present field, fields in alphabetical
/// order. The id is not rendered.
pub fn render_text(case: &PatientCase) -> String {
    let mut s: Vec<String> = Vec::with_capacity(17);
    s.push(format!("Age is {} years.", fmt_num(case.age)));
    if let Some(v) = case.amygdala_volume {
        s.push(format!("Amygdala volume is {v:.1} mL."));
    }
    if let Some(v) = case.apoe_e4_count {
        s.push(format!("APOE e4 allele count is {v}."));
    }
    s.push(format!("CDR is {}.", fmt_num(case.cdr.value())));
    if let Some(v) = case.education {
        s.push(format!("Education is {} years.", fmt_num(v)));
    }
    if let Some(v) = case.etiv {
        s.push(format!("eTIV is {v:.1} mL."));
    }
    if let Some(v) = case.gds {
        s.push(format!("GDS score is {}.", fmt_num(v)));
    }
    if let Some(v) = case.gender {
        s.push(format!("Gender is {}.", v.token()));
    }
    if let Some(v) = case.handedness {
        s.push(format!("Handedness is {}.", v.token()));
    }
    if let Some(v) = case.hippocampal_volume {
        s.push(format!("Hippocampal volume is {v:.1} mL."));
    }
    s.push(format!("MMSE is {}.", fmt_num(case.mmse)));
    if let Some(v) = case.moca {
        s.push(format!("MoCA score is {}.", fmt_num(v)));
    }
    if let Some(v) = case.nwbv {
        s.push(format!("nWBV is {v:.3}."));
    }
    if let Some(v) = case.ses {
        s.push(format!("SES band is {v}."));
    }
    if let Some(v) = case.temporal_thickness {
        s.push(format!("Temporal thickness is {v:.2} mm."));
    }
    if let Some(v) = case.ventricular_volume {
        s.push(format!("Ventricular volume is {v:.1} mL."));
    }
    if let Some(v) = case.wmh_load {
        s.push(format!("WMH load is {v:.2}."));
    }
    s.join(" ")
}

pub const DEFAULT_VISUAL_TOKENS: [&str; 4] = ["Figure", "Fig.", "see image", "shown in image"];

/// Splits text into sentence slices. Each slice keeps its trailing whitespace
/// so concatenating all slices reproduces the input exactly.
fn sentence_slices(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if matches!(b, b'.' | b'!' | b'?')
            && bytes.get(i + 1).is_some_and(|c| c.is_ascii_whitespace())
            && !ends_with_abbrev(&text[start..=i])
        {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_whitespace() {
                j += 1;
            }
            out.push(&text[start..j]);
            start = j;
            i = j;
            continue;
        }
        i += 1;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn ends_with_abbrev(s: &str) -> bool {
    let lower = s.to_ascii_lowercase();
    lower.ends_with(" fig.") || lower == "fig."
}

fn contains_token(sentence: &str, token: &str) -> bool {
    let hay = sentence.to_ascii_lowercase();
    let needle = token.to_ascii_lowercase();
    hay.match_indices(&needle).any(|(pos, _)| {
        pos == 0 || !hay.as_bytes()[pos - 1].is_ascii_alphanumeric()
    })
}

/// Remove every sentence that references a visual element.
///
/// Returns the input unchanged when nothing matches.
pub fn sanitize_corpus_text(text: &str) -> String {
    sanitize_with(text, &DEFAULT_VISUAL_TOKENS)
}

pub fn sanitize_with(text: &str, tokens: &[&str]) -> String {
    let slices = sentence_slices(text);
    let kept: Vec<&str> = slices
        .iter()
        .copied()
        .filter(|s| !tokens.iter().any(|t| contains_token(s, t)))
        .collect();
    if kept.len() == slices.len() {
        return text.to_string();
    }
    kept.concat().trim_end().to_string()
}

/// Number of sentences as seen by the sanitizer.
pub fn sentence_count(text: &str) -> usize {
    sentence_slices(text).iter().filter(|s| !s.trim().is_empty()).count()
}
