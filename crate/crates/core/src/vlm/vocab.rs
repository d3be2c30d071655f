// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixed symbolic vocabulary. Ids beyond the table are reserved and unused.

use crate::error::{CloomError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;

pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white",
];

pub const COLOR_RGB: [[f32; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.15],
    [0.15, 0.2, 0.95],
    [0.95, 0.9, 0.1],
    [0.1, 0.9, 0.9],
    [0.9, 0.15, 0.85],
    [1.0, 0.55, 0.05],
    [0.95, 0.95, 0.95],
];

pub const SHAPES: [&str; 6] = ["square", "circle", "triangle", "cross", "diamond", "frame"];

#[cfg(test)]
const WORDS: [&str; 13] = [
    "the", "color", "shape", "count", "sum", "is", "how", "many", "what", "of", "plus", "?", "=",
];

const TABLE: [&str; 39] = [
    "<pad>", "<bos>", "the", "color", "shape", "count", "sum", "is", "how", "many", "what", "of",
    "plus", "?", "=", "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white",
    "square", "circle", "triangle", "cross", "diamond", "frame", "0", "1", "2", "3", "4", "5",
    "6", "7", "8", "9",
];

/// Smallest vocabulary that holds every symbol.
pub const MIN_VOCAB: usize = TABLE.len();

pub fn word(id: usize) -> &'static str {
    TABLE.get(id).copied().unwrap_or("<unused>")
}

pub fn id(word: &str) -> Option<usize> {
    TABLE.iter().position(|w| *w == word)
}

pub fn color_token(color: usize) -> usize {
    15 + color
}

pub fn shape_token(shape: usize) -> usize {
    23 + shape
}

pub fn digit_token(d: usize) -> usize {
    debug_assert!(d < 10);
    29 + d
}

/// Tokenizes a space-separated prompt, prepending `<bos>` if absent.
pub fn encode_prompt(text: &str) -> Result<Vec<usize>> {
    let mut out = vec![BOS];
    for w in text.split_whitespace() {
        let t = id(w).ok_or_else(|| CloomError::UnknownWord(w.to_string()))?;
        if t != BOS || out.len() > 1 {
            out.push(t);
        }
    }
    Ok(out)
}

pub fn decode(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" ")
}
