//! n-step influence-pattern algebra.
//!
//! The support kept by the n-step approximation is the set of (state, param)
//! positions reachable within n steps: P₁ = supp(I), Pₙ = supp(I) ∪
//! supp(D ∘ Pₙ₋₁) with ∘ the boolean matrix product. Patterns here are
//! structural (mask-derived): a position is included if it can ever be
//! nonzero, even when a particular realization vanishes numerically.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::SparsityPattern;

/// Bijection between unmasked flat parameter indices and compressed columns.
#[derive(Debug, Clone)]
pub struct CompressedColumnMap {
    forward: Vec<Option<u32>>,
    inverse: Vec<u32>,
}

impl CompressedColumnMap {
    /// `unmasked[i]` says whether flat parameter `i` is trainable.
    pub fn new(unmasked: &[bool]) -> Self {
        let mut forward = Vec::with_capacity(unmasked.len());
        let mut inverse = Vec::new();
        for (i, &keep) in unmasked.iter().enumerate() {
            if keep {
                forward.push(Some(inverse.len() as u32));
                inverse.push(i as u32);
            } else {
                forward.push(None);
            }
        }
        Self { forward, inverse }
    }

    /// Total parameter count p.
    pub fn total(&self) -> usize {
        self.forward.len()
    }

    /// Nonzero parameter count p̃.
    pub fn compressed(&self) -> usize {
        self.inverse.len()
    }

    pub fn column_of(&self, flat: usize) -> Option<usize> {
        self.forward[flat].map(|c| c as usize)
    }

    pub fn flat_of(&self, column: usize) -> usize {
        self.inverse[column] as usize
    }

    /// Expands a compressed gradient to flat parameter space (zeros elsewhere).
    pub fn expand(&self, compressed: &[f64]) -> Result<Vec<f64>> {
        if compressed.len() != self.compressed() {
            return Err(Error::dimension(
                "CompressedColumnMap::expand",
                format!("{} values for p̃ = {}", compressed.len(), self.compressed()),
            ));
        }
        let mut out = vec![0.0; self.total()];
        for (c, &v) in compressed.iter().enumerate() {
            out[self.inverse[c] as usize] = v;
        }
        Ok(out)
    }

    /// Restricts a flat vector to the unmasked columns.
    pub fn compress(&self, flat: &[f64]) -> Result<Vec<f64>> {
        if flat.len() != self.total() {
            return Err(Error::dimension(
                "CompressedColumnMap::compress",
                format!("{} values for p = {}", flat.len(), self.total()),
            ));
        }
        Ok(self.inverse.iter().map(|&i| flat[i as usize]).collect())
    }
}

/// Row bitsets over the compressed column space, used for the boolean
/// reachability iteration.
#[derive(Clone, PartialEq, Eq)]
struct BitRows {
    rows: usize,
    words: usize,
    bits: Vec<u64>,
}

impl BitRows {
    fn new(rows: usize, cols: usize) -> Self {
        let words = cols.div_ceil(64);
        Self {
            rows,
            words,
            bits: vec![0u64; rows * words],
        }
    }

    fn from_pattern(p: &SparsityPattern) -> Self {
        let mut out = Self::new(p.rows(), p.cols());
        for (r, c) in p.positions() {
            out.set(r, c);
        }
        out
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize) {
        self.bits[r * self.words + c / 64] |= 1u64 << (c % 64);
    }

    #[inline]
    fn row(&self, r: usize) -> &[u64] {
        &self.bits[r * self.words..(r + 1) * self.words]
    }

    fn to_pattern(&self, cols: usize) -> SparsityPattern {
        let mut pos = Vec::new();
        for r in 0..self.rows {
            let row = self.row(r);
            for (w, &word) in row.iter().enumerate() {
                let mut bits = word;
                while bits != 0 {
                    let b = bits.trailing_zeros() as usize;
                    pos.push((r, w * 64 + b));
                    bits &= bits - 1;
                }
            }
        }
        SparsityPattern::from_positions(self.rows, cols, &pos).expect("bits in bounds")
    }
}

fn check_shapes(d_pat: &SparsityPattern, i_pat: &SparsityPattern) -> Result<()> {
    if d_pat.rows() != d_pat.cols() || d_pat.cols() != i_pat.rows() {
        return Err(Error::dimension(
            "n_step_pattern",
            format!(
                "d {}x{} vs i {}x{}",
                d_pat.rows(),
                d_pat.cols(),
                i_pat.rows(),
                i_pat.cols()
            ),
        ));
    }
    Ok(())
}

/// One boolean step: I ∪ supp(D ∘ P). Reads the previous iterate `p`, writes
/// a fresh bitset, so the recurrence is exact.
fn step(d: &SparsityPattern, i_rows: &BitRows, p: &BitRows) -> BitRows {
    let mut next = i_rows.clone();
    let words = next.words;
    for r in 0..d.rows() {
        let dst = &mut next.bits[r * words..(r + 1) * words];
        for &m in d.row_cols(r) {
            for (d_word, &s_word) in dst.iter_mut().zip(p.row(m)) {
                *d_word |= s_word;
            }
        }
    }
    next
}

/// Boolean-arithmetic support of Σ_{m=0}^{n−1} Dᵐ·I: the n-step pattern.
/// Monotone in n; reaches a fixpoint at n ≤ K.
pub fn n_step_pattern(
    d_pat: &SparsityPattern,
    i_pat: &SparsityPattern,
    n: usize,
) -> Result<SparsityPattern> {
    if n == 0 {
        return Err(Error::Config("n_step_pattern requires n ≥ 1".into()));
    }
    check_shapes(d_pat, i_pat)?;
    let i_rows = BitRows::from_pattern(i_pat);
    let mut p = i_rows.clone();
    for _ in 1..n {
        let next = step(d_pat, &i_rows, &p);
        if next == p {
            break;
        }
        p = next;
    }
    Ok(p.to_pattern(i_pat.cols()))
}

/// Smallest n with Pₙ = Pₙ₊₁ and that pattern: the full reachable support.
pub fn pattern_fixpoint(
    d_pat: &SparsityPattern,
    i_pat: &SparsityPattern,
) -> Result<(SparsityPattern, usize)> {
    check_shapes(d_pat, i_pat)?;
    let i_rows = BitRows::from_pattern(i_pat);
    let mut p = i_rows.clone();
    let mut n = 1usize;
    loop {
        let next = step(d_pat, &i_rows, &p);
        if next == p {
            return Ok((p.to_pattern(i_pat.cols()), n));
        }
        p = next;
        n += 1;
    }
}

/// 1 − density, with an exact integer count before the final division.
pub fn measure_sparsity(p: &SparsityPattern) -> f64 {
    let total = (p.rows() as u128) * (p.cols() as u128);
    if total == 0 {
        return 0.0;
    }
    1.0 - (p.nnz() as f64) / (total as f64)
}

/// Writes the pattern as a sorted `row col` coordinate list.
pub fn export_pattern<W: Write>(p: &SparsityPattern, out: &mut W) -> Result<()> {
    for (r, c) in p.positions() {
        writeln!(out, "{r} {c}")?;
    }
    Ok(())
}

/// Convenience: the fixpoint pattern wrapped in an Arc, as engines use it.
pub fn reachable_pattern(
    d_pat: &SparsityPattern,
    i_pat: &SparsityPattern,
) -> Result<(Arc<SparsityPattern>, usize)> {
    let (p, n_star) = pattern_fixpoint(d_pat, i_pat)?;
    Ok((Arc::new(p), n_star))
}
