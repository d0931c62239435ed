use std::sync::OnceLock;

use regex::Regex;

use super::EncoderError;

/// FNV-1a, 64-bit. Stable across platforms and releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{N}+(?:\.\p{N}+)?|\p{Alphabetic}+").expect("static regex"))
}

/// Lowercased word and number tokens; punctuation separates but is dropped.
pub fn words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    token_re().find_iter(&lower).map(|m| m.as_str().to_string()).collect()
}

/// Hash each token into `vocab` buckets, keeping at most `max_len - 1` ids
/// (position 0 is reserved for `[CLS]`).
pub fn tokenize(text: &str, vocab: usize, max_len: usize) -> Result<Vec<u32>, EncoderError> {
    if text.trim().is_empty() {
        return Err(EncoderError::EmptyText);
    }
    let ids: Vec<u32> = words(text)
        .iter()
        .take(max_len.saturating_sub(1))
        .map(|w| (fnv1a64(w.as_bytes()) % vocab as u64) as u32)
        .collect();
    if ids.is_empty() {
        return Err(EncoderError::EmptyText);
    }
    Ok(ids)
}
