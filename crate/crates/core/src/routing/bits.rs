//! Variable-width bitsets stored in 64-bit blocks.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use crate::error::{Error, Result};

/// A dense matrix of `rows` bitsets, each `width` bits wide and padded to
/// whole 64-bit blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    width: usize,
    blocks_per_row: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn new(rows: usize, width: usize) -> Self {
        let blocks_per_row = width.div_ceil(64);
        Self { rows, width, blocks_per_row, data: vec![0; rows * blocks_per_row] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn blocks_per_row(&self) -> usize {
        self.blocks_per_row
    }

    #[inline]
    pub fn set(&mut self, row: usize, bit: usize) {
        debug_assert!(bit < self.width && row < self.rows);
        self.data[row * self.blocks_per_row + bit / 64] |= 1u64 << (bit % 64);
    }

    #[inline]
    pub fn get(&self, row: usize, bit: usize) -> bool {
        bit < self.width && self.data[row * self.blocks_per_row + bit / 64] & (1u64 << (bit % 64)) != 0
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[u64] {
        &self.data[row * self.blocks_per_row..(row + 1) * self.blocks_per_row]
    }

    pub fn row_count_ones(&self, row: usize) -> usize {
        self.row(row).iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Bits set in `row`, ascending.
    pub fn row_bits(&self, row: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(row).iter().enumerate().flat_map(|(bi, &block)| {
            let mut b = block;
            std::iter::from_fn(move || {
                (b != 0).then(|| {
                    let t = b.trailing_zeros() as usize;
                    b &= b - 1;
                    bi * 64 + t
                })
            })
        })
    }

    /// Number of rows with `bit` set.
    pub fn column_count(&self, bit: usize) -> usize {
        if bit >= self.width {
            return 0;
        }
        let (block, mask) = (bit / 64, 1u64 << (bit % 64));
        self.data.iter().skip(block).step_by(self.blocks_per_row.max(1)).filter(|&&b| b & mask != 0).count()
    }

    /// Rows packed back to back at exactly `width` bits each (LSB first),
    /// base64 encoded.
    pub fn to_packed_b64(&self) -> String {
        let total_bits = self.rows * self.width;
        let mut bytes = vec![0u8; total_bits.div_ceil(8)];
        for row in 0..self.rows {
            for bit in self.row_bits(row) {
                let pos = row * self.width + bit;
                bytes[pos / 8] |= 1 << (pos % 8);
            }
        }
        B64.encode(bytes)
    }

    pub fn from_packed_b64(rows: usize, width: usize, text: &str) -> Result<Self> {
        let bytes = B64.decode(text).map_err(|e| Error::Parse(format!("bitset blocks: {e}")))?;
        if bytes.len() != (rows * width).div_ceil(8) {
            return Err(Error::Parse(format!("bitset blocks hold {} bytes, expected {rows}x{width} bits", bytes.len())));
        }
        let mut m = Self::new(rows, width);
        for row in 0..rows {
            for bit in 0..width {
                let pos = row * width + bit;
                if bytes[pos / 8] & (1 << (pos % 8)) != 0 {
                    m.set(row, bit);
                }
            }
        }
        Ok(m)
    }
}

/// Encodes one row's blocks as little-endian bytes in base64.
pub(crate) fn blocks_to_b64(blocks: &[u64]) -> String {
    let bytes: Vec<u8> = blocks.iter().flat_map(|b| b.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub(crate) fn blocks_from_b64(text: &str, blocks: usize) -> Result<Vec<u64>> {
    let bytes = B64.decode(text).map_err(|e| Error::Parse(format!("bitset row: {e}")))?;
    if bytes.len() != blocks * 8 {
        return Err(Error::Parse(format!("bitset row has {} bytes, expected {}", bytes.len(), blocks * 8)));
    }
    Ok(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_rows() {
        let mut m = BitMatrix::new(3, 120);
        assert_eq!(m.blocks_per_row(), 2);
        m.set(1, 119);
        m.set(1, 0);
        m.set(2, 64);
        assert!(m.get(1, 119) && m.get(1, 0) && m.get(2, 64));
        assert!(!m.get(0, 119) && !m.get(1, 64) && !m.get(1, 120));
        assert_eq!(m.row_bits(1).collect::<Vec<_>>(), vec![0, 119]);
        assert_eq!(m.row_count_ones(1), 2);
        assert_eq!(m.column_count(119), 1);
        assert_eq!(m.column_count(64), 1);
    }

    #[test]
    fn packed_roundtrip() {
        let mut m = BitMatrix::new(5, 3);
        for (r, b) in [(0, 0), (1, 2), (4, 1), (4, 2)] {
            m.set(r, b);
        }
        let text = m.to_packed_b64();
        assert_eq!(BitMatrix::from_packed_b64(5, 3, &text).unwrap(), m);
        assert!(BitMatrix::from_packed_b64(6, 3, &text).is_err());
    }

    #[test]
    fn block_roundtrip() {
        let blocks = [u64::MAX, 1 << 55];
        assert_eq!(blocks_from_b64(&blocks_to_b64(&blocks), 2).unwrap(), blocks);
    }
}
