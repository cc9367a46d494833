//! Bit-level helpers for physical addresses viewed as GF(2) vectors.

/// Parity (XOR of all bits) of `value`.
#[inline]
pub fn parity(value: u64) -> u64 {
    (value.count_ones() & 1) as u64
}

/// Mask with the given bit positions set.
pub fn mask_of(bits: &[u8]) -> u64 {
    bits.iter().fold(0u64, |m, &b| m | (1u64 << b))
}

/// Ascending bit positions set in `mask`.
pub fn bits_of(mut mask: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(mask.count_ones() as usize);
    while mask != 0 {
        let b = mask.trailing_zeros() as u8;
        out.push(b);
        mask &= mask - 1;
    }
    out
}

/// Mask covering the inclusive bit range `lo..=hi`.
pub fn range_mask(lo: u8, hi: u8) -> u64 {
    debug_assert!(lo <= hi && hi < 64);
    let width = hi - lo + 1;
    if width == 64 {
        u64::MAX
    } else {
        ((1u64 << width) - 1) << lo
    }
}

/// Rank of a set of GF(2) row vectors, by Gaussian elimination.
pub fn gf2_rank(vectors: &[u64]) -> usize {
    let mut basis: Vec<u64> = Vec::with_capacity(vectors.len());
    for &v in vectors {
        if let Some(reduced) = reduce(&basis, v) {
            basis.push(reduced);
        }
    }
    basis.len()
}

/// Reduces `v` against an echelon basis kept sorted by leading bit.
/// Returns `None` when `v` lies in the span.
fn reduce(basis: &[u64], mut v: u64) -> Option<u64> {
    for &b in basis {
        let lead = 63 - b.leading_zeros();
        if v >> lead & 1 == 1 {
            v ^= b;
        }
    }
    (v != 0).then_some(v)
}

/// Incremental independence check used when growing a basis greedily.
#[derive(Debug, Default, Clone)]
pub struct Gf2Basis {
    rows: Vec<u64>,
}

impl Gf2Basis {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `v` if it is independent of the current span; returns whether it was.
    pub fn insert(&mut self, v: u64) -> bool {
        match reduce(&self.rows, v) {
            Some(r) => {
                // keep rows in decreasing leading-bit order so `reduce` is a single pass
                let lead = 63 - r.leading_zeros();
                let pos = self
                    .rows
                    .iter()
                    .position(|&b| 63 - b.leading_zeros() < lead)
                    .unwrap_or(self.rows.len());
                // eliminate the new leading bit from existing rows
                for row in self.rows.iter_mut() {
                    if *row >> lead & 1 == 1 {
                        *row ^= r;
                    }
                }
                self.rows.insert(pos, r);
                true
            }
            None => false,
        }
    }

    pub fn rank(&self) -> usize {
        self.rows.len()
    }
}

/// Binomial coefficient as u128 (exact for the sizes used here).
pub fn binomial(n: u32, k: u32) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}
