//! Block-diagonal self-attention mask over grouped queries.

use std::ops::Range;

use crate::error::{Error, Result};

/// `blocked(i, j) == true` means query `i` cannot attend to query `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    blocked: Vec<bool>,
    blocks: Vec<Range<usize>>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.n + j]
    }

    /// Row-major dense view.
    pub fn as_slice(&self) -> &[bool] {
        &self.blocked
    }

    /// The unblocked index blocks; query `i` sees exactly the block containing it.
    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn block_of(&self, i: usize) -> &Range<usize> {
        let k = self.blocks.partition_point(|b| b.end <= i);
        &self.blocks[k]
    }
}

pub fn build_attention_mask(group_sizes: &[usize]) -> Result<AttentionMask> {
    if group_sizes.is_empty() {
        return Err(Error::InvalidMask("no groups".into()));
    }
    if let Some(k) = group_sizes.iter().position(|&n| n == 0) {
        return Err(Error::InvalidMask(format!("group {k} is empty")));
    }
    let n: usize = group_sizes.iter().sum();
    let mut blocks = Vec::with_capacity(group_sizes.len());
    let mut start = 0;
    for &size in group_sizes {
        blocks.push(start..start + size);
        start += size;
    }
    let mut blocked = vec![true; n * n];
    for b in &blocks {
        for i in b.clone() {
            blocked[i * n + b.start..i * n + b.end].fill(false);
        }
    }
    Ok(AttentionMask { n, blocked, blocks })
}
