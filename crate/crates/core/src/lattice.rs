//! Modality subsets, per-sample presence masks and the strict-inclusion
//! lattice over observed subsets.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest modality count supported by the subset encoding.
pub const MAX_MODALITIES: usize = 16;

/// A set of modalities over `m` total, stored as a bitmask.
///
/// Used both for observed subsets (where it must be nonempty, see
/// [`SubsetMask::observed`]) and for drop sets, which may be empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubsetMask {
    bits: u32,
    m: u8,
}

impl SubsetMask {
    pub fn new(bits: u32, m: usize) -> Result<Self> {
        if m == 0 || m > MAX_MODALITIES {
            return Err(Error::InvalidArgument(format!(
                "modality count {m} outside 1..={MAX_MODALITIES}"
            )));
        }
        if bits >> m != 0 {
            return Err(Error::InvalidArgument(format!(
                "subset bits {bits:#b} exceed {m} modalities"
            )));
        }
        Ok(Self { bits, m: m as u8 })
    }

    /// A nonempty observed subset.
    pub fn observed(bits: u32, m: usize) -> Result<Self> {
        let s = Self::new(bits, m)?;
        if s.is_empty() {
            return Err(Error::InvalidArgument("observed subset must be nonempty".into()));
        }
        Ok(s)
    }

    pub fn from_indices(indices: &[usize], m: usize) -> Result<Self> {
        let mut bits = 0u32;
        for &i in indices {
            if i >= m {
                return Err(Error::InvalidArgument(format!("modality {i} >= {m}")));
            }
            bits |= 1 << i;
        }
        Self::new(bits, m)
    }

    pub fn empty(m: usize) -> Self {
        Self { bits: 0, m: m as u8 }
    }

    pub fn full(m: usize) -> Self {
        Self {
            bits: ((1u64 << m) - 1) as u32,
            m: m as u8,
        }
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn modalities(self) -> usize {
        self.m as usize
    }

    pub fn contains(self, i: usize) -> bool {
        self.bits >> i & 1 == 1
    }

    pub fn len(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.bits == 0
    }

    pub fn is_full(self) -> bool {
        self == Self::full(self.modalities())
    }

    pub fn complement(self) -> Self {
        Self {
            bits: !self.bits & Self::full(self.modalities()).bits,
            m: self.m,
        }
    }

    /// `self ⊂ other`, strictly.
    pub fn is_strict_subset_of(self, other: Self) -> bool {
        self.m == other.m && self.bits & other.bits == self.bits && self.bits != other.bits
    }

    pub fn indices(self) -> impl Iterator<Item = usize> {
        (0..self.modalities()).filter(move |&i| self.contains(i))
    }

    /// Every nonempty subset of `m` modalities, in increasing bit order.
    pub fn all_nonempty(m: usize) -> Vec<Self> {
        (1..(1u32 << m)).map(|bits| Self { bits, m: m as u8 }).collect()
    }
}

impl fmt::Display for SubsetMask {
    /// One-based modality indices, e.g. `{1,3}`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<String> = self.indices().map(|i| (i + 1).to_string()).collect();
        write!(f, "{{{}}}", items.join(","))
    }
}

/// All strict-inclusion pairs `(A, B)`, `A ⊂ B`, over nonempty subsets of
/// `m` modalities. Ordered by `A` then `B` in bit order.
pub fn subset_lattice(m: usize) -> Result<Vec<(SubsetMask, SubsetMask)>> {
    if !(2..=10).contains(&m) {
        return Err(Error::InvalidArgument(format!(
            "subset lattice needs 2 <= M <= 10, got {m}"
        )));
    }
    let subsets = SubsetMask::all_nonempty(m);
    let mut pairs = Vec::new();
    for &a in &subsets {
        for &b in &subsets {
            if a.is_strict_subset_of(b) {
                pairs.push((a, b));
            }
        }
    }
    Ok(pairs)
}

/// Per-sample observed flags, `n × m`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presence {
    n: usize,
    m: usize,
    bits: Vec<bool>,
}

impl Presence {
    pub fn all(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            bits: vec![true; n * m],
        }
    }

    pub fn from_bits(n: usize, m: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * m {
            return Err(Error::Shape(format!(
                "presence of length {} for {n}x{m}",
                bits.len()
            )));
        }
        Ok(Self { n, m, bits })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn modalities(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, m: usize) -> bool {
        self.bits[i * self.m + m]
    }

    pub fn set(&mut self, i: usize, m: usize, v: bool) {
        self.bits[i * self.m + m] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.m..(i + 1) * self.m]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn observed_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }

    /// Observed set of sample `i` as a subset mask.
    pub fn subset(&self, i: usize) -> SubsetMask {
        let bits = self
            .row(i)
            .iter()
            .enumerate()
            .fold(0u32, |acc, (j, &b)| acc | ((b as u32) << j));
        SubsetMask {
            bits,
            m: self.m as u8,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(idx.len() * self.m);
        for &i in idx {
            bits.extend_from_slice(self.row(i));
        }
        Self {
            n: idx.len(),
            m: self.m,
            bits,
        }
    }

    /// First row with no observed modality, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.n).find(|&i| self.observed_count(i) == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent count: pairs (A, B) with A ⊂ B ⊆ [m], A ≠ ∅, by brute force
    /// over all ordered pairs of bitmasks.
    fn brute_force_pairs(m: usize) -> usize {
        let mut count = 0;
        for a in 1u32..(1 << m) {
            for b in 1u32..(1 << m) {
                if a != b && (a & b) == a {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn lattice_for_two_modalities() {
        let pairs = subset_lattice(2).unwrap();
        let one = SubsetMask::from_indices(&[0], 2).unwrap();
        let two = SubsetMask::from_indices(&[1], 2).unwrap();
        let both = SubsetMask::full(2);
        assert_eq!(pairs, vec![(one, both), (two, both)]);
    }

    #[test]
    fn lattice_sizes_match_enumeration_and_formula() {
        // 12 strict pairs among the 7 nonempty subsets of three modalities;
        // counting the empty set as a bottom element would give 19.
        assert_eq!(brute_force_pairs(3), 12);
        for m in 2..=6 {
            let pairs = subset_lattice(m).unwrap();
            assert_eq!(pairs.len(), brute_force_pairs(m));
            let formula: usize = SubsetMask::all_nonempty(m)
                .iter()
                .map(|a| (1usize << (m - a.len())) - 1)
                .sum();
            assert_eq!(pairs.len(), formula);
            assert!(pairs.iter().all(|(a, b)| a.is_strict_subset_of(*b)));
        }
        assert_eq!(subset_lattice(3).unwrap().len(), 12);
    }

    #[test]
    fn lattice_rejects_out_of_range() {
        assert!(subset_lattice(1).is_err());
        assert!(subset_lattice(11).is_err());
    }

    #[test]
    fn subset_basics() {
        let s = SubsetMask::from_indices(&[0, 2], 3).unwrap();
        assert_eq!(s.to_string(), "{1,3}");
        assert_eq!(s.complement(), SubsetMask::from_indices(&[1], 3).unwrap());
        assert!(SubsetMask::observed(0, 3).is_err());
        assert!(SubsetMask::new(0b1000, 3).is_err());
        assert!(!s.is_strict_subset_of(s));
        assert!(SubsetMask::full(3).is_full());
    }

    #[test]
    fn presence_subset_roundtrip() {
        let p = Presence::from_bits(2, 3, vec![true, false, true, false, false, false]).unwrap();
        assert_eq!(p.subset(0), SubsetMask::from_indices(&[0, 2], 3).unwrap());
        assert_eq!(p.first_empty_row(), Some(1));
    }
}
