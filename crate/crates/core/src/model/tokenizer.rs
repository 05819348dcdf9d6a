//! Byte-level tokenizer. Ids 0..5 are reserved specials, so the raw bytes
//! 0x00..=0x04 cannot appear in text.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const QUERY: usize = 1;
pub const ANSWER: usize = 2;
pub const MASK: usize = 3;
pub const EOS: usize = 4;
pub const N_SPECIAL: usize = 5;

pub fn is_special(id: usize) -> bool {
    id < N_SPECIAL
}

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.bytes()
        .map(|b| {
            let id = b as usize;
            if is_special(id) {
                Err(Error::Data(format!("byte 0x{b:02x} collides with a reserved token")))
            } else {
                Ok(id)
            }
        })
        .collect()
}

/// Text of the non-special ids, invalid UTF-8 replaced.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| !is_special(i) && i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// `[Query] X [Answer]`, the prompt the decoder sees.
pub fn prompt(query: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(query.len() + 2);
    out.push(QUERY);
    out.extend_from_slice(query);
    out.push(ANSWER);
    out
}

/// `[Query] X [Answer] Y [EOS]`.
pub fn interaction(query: &[usize], answer: &[usize]) -> Vec<usize> {
    let mut out = prompt(query);
    out.extend_from_slice(answer);
    out.push(EOS);
    out
}

/// Splits a templated interaction back into `(query, answer)`.
pub fn split_interaction(ids: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let bad = || Error::Data("interaction does not follow [Query] X [Answer] Y [EOS]".into());
    if ids.first() != Some(&QUERY) {
        return Err(bad());
    }
    let a = ids.iter().position(|&t| t == ANSWER).ok_or_else(bad)?;
    let e = ids.iter().rposition(|&t| t == EOS).ok_or_else(bad)?;
    if e < a || e != ids.iter().rposition(|&t| t != PAD).unwrap_or(0) {
        return Err(bad());
    }
    let (q, y) = (&ids[1..a], &ids[a + 1..e]);
    if q.iter().chain(y).any(|&t| is_special(t)) {
        return Err(bad());
    }
    Ok((q.to_vec(), y.to_vec()))
}
