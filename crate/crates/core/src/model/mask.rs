use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Every real position sees every real position.
    Bidirectional,
    /// Prefix sees only the prefix; the second segment sees the prefix and
    /// itself up to the current position.
    Alg,
}

/// Square attention mask; `true` means attend. Blocked cells contribute
/// [`Float::NEG_SENTINEL`] to the attention logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..n * n).map(|k| f(k / n, k % n)).collect();
        AttentionMask { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allowed[row * self.n..(row + 1) * self.n]
    }

    pub fn bias<T: Float>(&self, row: usize, col: usize) -> T {
        if self.allowed(row, col) {
            T::zero()
        } else {
            T::NEG_SENTINEL
        }
    }

    /// Swaps two positions (rows and columns).
    pub fn permute(&self, a: usize, b: usize) -> AttentionMask {
        let idx = |i: usize| if i == a { b } else if i == b { a } else { i };
        let mut allowed = vec![false; self.n * self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                allowed[i * self.n + j] = self.allowed(idx(i), idx(j));
            }
        }
        AttentionMask { n: self.n, allowed }
    }
}

/// `prefix_len` covers `[CLS] first [SEP]`, `second_len` covers
/// `second [SEP]`, and everything past both up to `total_len` is padding.
pub fn build_mask(
    prefix_len: usize,
    second_len: usize,
    total_len: usize,
    mode: MaskMode,
) -> Result<AttentionMask> {
    let real = prefix_len + second_len;
    if real > total_len {
        return Err(Error::Contract(format!(
            "segment lengths {prefix_len}+{second_len} exceed sequence length {total_len}"
        )));
    }
    let n = total_len;
    let mut allowed = vec![false; n * n];
    for i in 0..real {
        let row = &mut allowed[i * n..(i + 1) * n];
        match mode {
            MaskMode::Bidirectional => row[..real].fill(true),
            MaskMode::Alg if i < prefix_len => row[..prefix_len].fill(true),
            MaskMode::Alg => row[..=i].fill(true),
        }
    }
    Ok(AttentionMask { n, allowed })
}
