//! Run-length encoded binary masks.
//!
//! Runs alternate zero/one in row-major order, starting with a (possibly
//! empty) zero-run, and sum to `width × height`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    width: usize,
    height: usize,
    runs: Vec<u32>,
}

impl RleMask {
    pub fn from_runs(width: usize, height: usize, runs: Vec<u32>) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (width * height) as u64 {
            return Err(Error::invalid(format!(
                "RLE runs cover {total} pixels, mask is {width}x{height}"
            )));
        }
        Ok(Self {
            width,
            height,
            runs,
        })
    }

    pub fn from_bits(width: usize, height: usize, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), width * height);
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in bits {
            if b != current {
                runs.push(len);
                current = b;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        Self {
            width,
            height,
            runs,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn to_bits(&self) -> Vec<bool> {
        let mut bits = Vec::with_capacity(self.width * self.height);
        for (k, &r) in self.runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(k % 2 == 1, r as usize));
        }
        bits
    }

    /// Row-major indices of the set pixels.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        let mut start = 0usize;
        self.runs.iter().enumerate().flat_map(move |(k, &r)| {
            let s = start;
            start += r as usize;
            if k % 2 == 1 { s..s + r as usize } else { 0..0 }
        })
    }

    pub fn count(&self) -> usize {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}
