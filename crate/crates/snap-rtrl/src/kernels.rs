//! Dense and fixed-pattern sparse matrix kernels.
//!
//! The hot loop of every influence-propagating engine is the masked product
//! `D · J` where both operands keep one sparsity pattern for the whole run.
//! Patterns are therefore canonical, immutable values (row-sorted coordinate
//! layout with per-row extents) and the expensive index matching is done once
//! per run by [`MaskedProductPlan`]. All accumulations run in ascending inner
//! index order so results are bit-identical across runs and thread counts.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Multiply-add counter threaded through every kernel.
///
/// One unit is one fused multiply-add. Pure additions (pattern stamping,
/// `add_into`) are not multiplies and count zero; scalar-times-vector style
/// updates count one per touched element.
#[derive(Debug, Default, Clone)]
pub struct MaddCounter {
    madds: u64,
}

impl MaddCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, n: u64) {
        self.madds += n;
    }

    pub fn total(&self) -> u64 {
        self.madds
    }

    pub fn reset(&mut self) {
        self.madds = 0;
    }
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dimension(
                "DenseMatrix::from_values",
                format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, values.len()),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    /// `self · other`, counting `rows·cols·inner` multiply-adds.
    pub fn matmul(&self, other: &DenseMatrix, counter: &mut MaddCounter) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::dimension(
                "DenseMatrix::matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let out_row = out.row_mut(r);
            for (m, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(m);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        counter.add((self.rows * self.cols * other.cols) as u64);
        Ok(out)
    }

    /// `vᵀ · self`, counting `rows·cols` multiply-adds.
    pub fn vec_mat(&self, v: &[f64], counter: &mut MaddCounter) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::dimension(
                "DenseMatrix::vec_mat",
                format!("vector length {} vs {} rows", v.len(), self.rows),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r).iter()) {
                *o += vr * m;
            }
        }
        counter.add((self.rows * self.cols) as u64);
        Ok(out)
    }
}

/// Immutable set of (row, col) positions over a matrix shape: the structural
/// support of a Jacobian. Stored row-sorted with per-row extents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SparsityPattern {
    /// Canonicalizes (sorts, dedups, bounds-checks) the given positions.
    pub fn from_positions(rows: usize, cols: usize, positions: &[(usize, usize)]) -> Result<Self> {
        let mut pos: Vec<(usize, usize)> = positions.to_vec();
        pos.sort_unstable();
        pos.dedup();
        for &(r, c) in &pos {
            if r >= rows || c >= cols {
                return Err(Error::pattern(
                    "SparsityPattern::from_positions",
                    format!("position ({r}, {c}) out of bounds for {rows}x{cols}"),
                ));
            }
        }
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(pos.len());
        let mut cur = 0usize;
        for &(r, c) in &pos {
            while cur < r {
                cur += 1;
                row_ptr[cur] = col_idx.len();
            }
            col_idx.push(c);
        }
        while cur < rows {
            cur += 1;
            row_ptr[cur] = col_idx.len();
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
        })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::with_capacity(rows * cols);
        row_ptr.push(0);
        for _ in 0..rows {
            col_idx.extend(0..cols);
            row_ptr.push(col_idx.len());
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
        }
    }

    pub fn identity(n: usize) -> Self {
        let row_ptr = (0..=n).collect();
        let col_idx = (0..n).collect();
        Self {
            rows: n,
            cols: n,
            row_ptr,
            col_idx,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn density(&self) -> f64 {
        let total = (self.rows as u128) * (self.cols as u128);
        if total == 0 {
            return 0.0;
        }
        self.nnz() as f64 / total as f64
    }

    /// Column indices of row `r`, ascending.
    #[inline]
    pub fn row_cols(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    /// Value-slot range of row `r`.
    #[inline]
    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    /// Slot of position (r, c) in the value array, if present.
    #[inline]
    pub fn slot(&self, r: usize, c: usize) -> Option<usize> {
        let range = self.row_range(r);
        let cols = &self.col_idx[range.clone()];
        cols.binary_search(&c).ok().map(|i| range.start + i)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.slot(r, c).is_some()
    }

    /// Positions in slot order (row-major).
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |r| self.row_cols(r).iter().map(move |&c| (r, c)))
    }

    pub fn union(&self, other: &SparsityPattern) -> Result<SparsityPattern> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dimension(
                "SparsityPattern::union",
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut pos: Vec<(usize, usize)> = self.positions().collect();
        pos.extend(other.positions());
        SparsityPattern::from_positions(self.rows, self.cols, &pos)
    }

    pub fn is_superset_of(&self, other: &SparsityPattern) -> bool {
        if self.rows != other.rows || self.cols != other.cols {
            return false;
        }
        other.positions().all(|(r, c)| self.contains(r, c))
    }
}

/// Per-column view of a pattern: rows and value slots of each column,
/// ascending by row. Built once per run for the product/grad loops.
#[derive(Debug, Clone)]
pub struct ColumnView {
    col_ptr: Vec<usize>,
    rows: Vec<u32>,
    slots: Vec<u32>,
}

impl ColumnView {
    pub fn new(pattern: &SparsityPattern) -> Self {
        let ncols = pattern.cols();
        let mut counts = vec![0usize; ncols + 1];
        for &c in &pattern.col_idx {
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let col_ptr = counts.clone();
        let mut fill = counts;
        let nnz = pattern.nnz();
        let mut rows = vec![0u32; nnz];
        let mut slots = vec![0u32; nnz];
        for r in 0..pattern.rows() {
            for slot in pattern.row_range(r) {
                let c = pattern.col_idx[slot];
                let at = fill[c];
                rows[at] = r as u32;
                slots[at] = slot as u32;
                fill[c] += 1;
            }
        }
        Self {
            col_ptr,
            rows,
            slots,
        }
    }

    /// (row, slot) pairs of column `c`, ascending by row.
    #[inline]
    pub fn col(&self, c: usize) -> (&[u32], &[u32]) {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        (&self.rows[range.clone()], &self.slots[range])
    }
}

/// Real values stored only at a pattern's positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternedMatrix {
    pattern: Arc<SparsityPattern>,
    values: Vec<f64>,
}

impl PatternedMatrix {
    pub fn zeros(pattern: Arc<SparsityPattern>) -> Self {
        let n = pattern.nnz();
        Self {
            pattern,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(pattern: Arc<SparsityPattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::dimension(
                "PatternedMatrix::from_values",
                format!("{} values for nnz {}", values.len(), pattern.nnz()),
            ));
        }
        Ok(Self { pattern, values })
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn rows(&self) -> usize {
        self.pattern.rows()
    }

    pub fn cols(&self) -> usize {
        self.pattern.cols()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Swaps the value storage with an equally sized buffer.
    pub fn swap_values(&mut self, other: &mut Vec<f64>) -> Result<()> {
        if other.len() != self.values.len() {
            return Err(Error::dimension(
                "PatternedMatrix::swap_values",
                format!("{} vs {}", other.len(), self.values.len()),
            ));
        }
        std::mem::swap(&mut self.values, other);
        Ok(())
    }

    /// Value at (r, c); zero outside the pattern.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pattern.slot(r, c).map_or(0.0, |s| self.values[s])
    }

    /// Writing outside the pattern is a contract violation.
    pub fn set(&mut self, r: usize, c: usize, v: f64) -> Result<()> {
        match self.pattern.slot(r, c) {
            Some(s) => {
                self.values[s] = v;
                Ok(())
            }
            None => Err(Error::pattern(
                "PatternedMatrix::set",
                format!("({r}, {c}) not in pattern"),
            )),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows(), self.cols());
        for (slot, (r, c)) in self.pattern.positions().enumerate() {
            out.set(r, c, self.values[slot]);
        }
        out
    }

    pub fn from_dense(dense: &DenseMatrix, pattern: Arc<SparsityPattern>) -> Result<Self> {
        if dense.rows() != pattern.rows() || dense.cols() != pattern.cols() {
            return Err(Error::dimension(
                "PatternedMatrix::from_dense",
                format!(
                    "{}x{} vs pattern {}x{}",
                    dense.rows(),
                    dense.cols(),
                    pattern.rows(),
                    pattern.cols()
                ),
            ));
        }
        let values = pattern.positions().map(|(r, c)| dense.get(r, c)).collect();
        Ok(Self { pattern, values })
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }
}

/// Precomputed index matching for the masked product `D · J` evaluated only
/// at `out_pattern` positions. For each output slot, the (d_slot, j_slot)
/// pairs are stored ascending in the shared inner index so the accumulation
/// order is fixed.
#[derive(Debug, Clone)]
pub struct MaskedProductPlan {
    d_pattern: Arc<SparsityPattern>,
    j_pattern: Arc<SparsityPattern>,
    out_pattern: Arc<SparsityPattern>,
    range_ptr: Vec<usize>,
    pairs: Vec<(u32, u32)>,
}

impl MaskedProductPlan {
    pub fn new(
        d_pattern: Arc<SparsityPattern>,
        j_pattern: Arc<SparsityPattern>,
        out_pattern: Arc<SparsityPattern>,
    ) -> Result<Self> {
        if d_pattern.cols() != j_pattern.rows()
            || out_pattern.rows() != d_pattern.rows()
            || out_pattern.cols() != j_pattern.cols()
        {
            return Err(Error::dimension(
                "MaskedProductPlan::new",
                format!(
                    "d {}x{}, j {}x{}, out {}x{}",
                    d_pattern.rows(),
                    d_pattern.cols(),
                    j_pattern.rows(),
                    j_pattern.cols(),
                    out_pattern.rows(),
                    out_pattern.cols()
                ),
            ));
        }
        let j_cols = ColumnView::new(&j_pattern);
        let mut range_ptr = Vec::with_capacity(out_pattern.nnz() + 1);
        range_ptr.push(0usize);
        let mut pairs: Vec<(u32, u32)> = Vec::new();
        for r in 0..out_pattern.rows() {
            let d_ms = d_pattern.row_cols(r);
            let d_base = d_pattern.row_range(r).start;
            for &c in out_pattern.row_cols(r) {
                let (j_rows, j_slots) = j_cols.col(c);
                // merge-join row r of d with column c of j on the inner index
                let mut a = 0usize;
                let mut b = 0usize;
                while a < d_ms.len() && b < j_rows.len() {
                    let m_d = d_ms[a];
                    let m_j = j_rows[b] as usize;
                    if m_d == m_j {
                        pairs.push(((d_base + a) as u32, j_slots[b]));
                        a += 1;
                        b += 1;
                    } else if m_d < m_j {
                        a += 1;
                    } else {
                        b += 1;
                    }
                }
                range_ptr.push(pairs.len());
            }
        }
        Ok(Self {
            d_pattern,
            j_pattern,
            out_pattern,
            range_ptr,
            pairs,
        })
    }

    pub fn out_pattern(&self) -> &Arc<SparsityPattern> {
        &self.out_pattern
    }

    /// Multiply-adds per execution: one per stored index pair.
    pub fn madds(&self) -> u64 {
        self.pairs.len() as u64
    }

    /// Evaluates the product into `out` (values aligned with `out_pattern`).
    pub fn execute_into(
        &self,
        d: &PatternedMatrix,
        j: &PatternedMatrix,
        out: &mut [f64],
        counter: &mut MaddCounter,
    ) -> Result<()> {
        if !Arc::ptr_eq(d.pattern(), &self.d_pattern) && *d.pattern().as_ref() != *self.d_pattern {
            return Err(Error::pattern("MaskedProductPlan::execute", "d pattern differs from plan"));
        }
        if !Arc::ptr_eq(j.pattern(), &self.j_pattern) && *j.pattern().as_ref() != *self.j_pattern {
            return Err(Error::pattern("MaskedProductPlan::execute", "j pattern differs from plan"));
        }
        if out.len() != self.out_pattern.nnz() {
            return Err(Error::dimension(
                "MaskedProductPlan::execute",
                format!("out length {} vs nnz {}", out.len(), self.out_pattern.nnz()),
            ));
        }
        let dv = d.values();
        let jv = j.values();
        // plan construction guarantees every stored slot is in bounds for
        // matrices carrying the planned patterns, which were checked above
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            let range = self.range_ptr[i]..self.range_ptr[i + 1];
            for &(ds, js) in unsafe { self.pairs.get_unchecked(range) } {
                acc += unsafe { dv.get_unchecked(ds as usize) * jv.get_unchecked(js as usize) };
            }
            *o = acc;
        }
        counter.add(self.madds());
        Ok(())
    }

    pub fn execute(
        &self,
        d: &PatternedMatrix,
        j: &PatternedMatrix,
        counter: &mut MaddCounter,
    ) -> Result<PatternedMatrix> {
        let mut out = PatternedMatrix::zeros(Arc::clone(&self.out_pattern));
        self.execute_into(d, j, out.values_mut(), counter)?;
        Ok(out)
    }
}

/// `D · J` evaluated only at `out_pattern` positions; positions of the true
/// product outside `out_pattern` are discarded. Builds a throwaway plan; the
/// engines keep a [`MaskedProductPlan`] instead.
pub fn spmm_masked(
    d: &PatternedMatrix,
    j: &PatternedMatrix,
    out_pattern: &Arc<SparsityPattern>,
    counter: &mut MaddCounter,
) -> Result<PatternedMatrix> {
    let plan = MaskedProductPlan::new(
        Arc::clone(d.pattern()),
        Arc::clone(j.pattern()),
        Arc::clone(out_pattern),
    )?;
    plan.execute(d, j, counter)
}

/// Elementwise sum where `b`'s support must be contained in `a`'s; the result
/// carries `a`'s pattern. Pure additions: zero multiply-adds.
pub fn add_into(a: &PatternedMatrix, b: &PatternedMatrix) -> Result<PatternedMatrix> {
    let mut out = a.clone();
    accumulate(&mut out, b)?;
    Ok(out)
}

/// In-place variant of [`add_into`].
pub fn accumulate(a: &mut PatternedMatrix, b: &PatternedMatrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::dimension(
            "add_into",
            format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let a_pattern = Arc::clone(a.pattern());
    let av = a.values_mut();
    for (slot, (r, c)) in b.pattern().positions().enumerate() {
        match a_pattern.slot(r, c) {
            Some(s) => av[s] += b.values()[slot],
            None => {
                return Err(Error::pattern(
                    "add_into",
                    format!("b position ({r}, {c}) outside a's support"),
                ))
            }
        }
    }
    Ok(())
}

/// Slot map from `b`'s pattern into `a`'s pattern, for repeated accumulation.
pub fn support_map(a: &SparsityPattern, b: &SparsityPattern) -> Result<Vec<u32>> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::dimension(
            "support_map",
            format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    b.positions()
        .map(|(r, c)| {
            a.slot(r, c).map(|s| s as u32).ok_or_else(|| {
                Error::pattern("support_map", format!("({r}, {c}) outside target support"))
            })
        })
        .collect()
}

/// `vᵀ · M` for a patterned `M`; one multiply-add per stored entry.
pub fn vec_mat(v: &[f64], m: &PatternedMatrix, counter: &mut MaddCounter) -> Result<Vec<f64>> {
    if v.len() != m.rows() {
        return Err(Error::dimension(
            "vec_mat",
            format!("vector length {} vs {} rows", v.len(), m.rows()),
        ));
    }
    let mut out = vec![0.0; m.cols()];
    let pattern = m.pattern();
    for r in 0..m.rows() {
        let vr = v[r];
        let range = pattern.row_range(r);
        let cols = &pattern.col_idx[range.clone()];
        let vals = &m.values()[range];
        for (&c, &x) in cols.iter().zip(vals.iter()) {
            out[c] += vr * x;
        }
    }
    counter.add(m.pattern().nnz() as u64);
    Ok(out)
}

/// Copies `src` values at positions in `src.pattern ∩ dst_pattern`; positions
/// only in `dst_pattern` are zero, positions only in `src.pattern` are dropped.
pub fn masked_assign(
    src: &PatternedMatrix,
    dst_pattern: &Arc<SparsityPattern>,
) -> Result<PatternedMatrix> {
    if src.rows() != dst_pattern.rows() || src.cols() != dst_pattern.cols() {
        return Err(Error::dimension(
            "masked_assign",
            format!(
                "{}x{} vs {}x{}",
                src.rows(),
                src.cols(),
                dst_pattern.rows(),
                dst_pattern.cols()
            ),
        ));
    }
    let values = dst_pattern
        .positions()
        .map(|(r, c)| src.get(r, c))
        .collect();
    PatternedMatrix::from_values(Arc::clone(dst_pattern), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_pattern(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> SparsityPattern {
        let mut pos = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if rng.gen::<f64>() < density {
                    pos.push((r, c));
                }
            }
        }
        SparsityPattern::from_positions(rows, cols, &pos).unwrap()
    }

    fn random_patterned(rng: &mut ChaCha8Rng, pattern: SparsityPattern) -> PatternedMatrix {
        let values = (0..pattern.nnz()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PatternedMatrix::from_values(Arc::new(pattern), values).unwrap()
    }

    fn random_filled(
        rng: &mut ChaCha8Rng,
        rows: usize,
        cols: usize,
        density: f64,
    ) -> PatternedMatrix {
        let pattern = random_pattern(rng, rows, cols, density);
        random_patterned(rng, pattern)
    }

    #[test]
    fn spmm_one_by_one() {
        let mut counter = MaddCounter::new();
        let p = Arc::new(SparsityPattern::full(1, 1));
        let d = PatternedMatrix::from_values(Arc::clone(&p), vec![0.5]).unwrap();
        let j = PatternedMatrix::from_values(Arc::clone(&p), vec![2.0]).unwrap();
        let out = spmm_masked(&d, &j, &p, &mut counter).unwrap();
        assert_eq!(out.values(), &[1.0]);
        assert_eq!(counter.total(), 1);
    }

    #[test]
    fn spmm_empty_out_pattern() {
        let mut counter = MaddCounter::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = random_filled(&mut rng, 4, 4, 0.6);
        let j = random_filled(&mut rng, 4, 5, 0.6);
        let empty = Arc::new(SparsityPattern::empty(4, 5));
        let out = spmm_masked(&d, &j, &empty, &mut counter).unwrap();
        assert_eq!(out.values().len(), 0);
        assert_eq!(counter.total(), 0);
    }

    #[test]
    fn spmm_full_pattern_matches_dense_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = random_filled(&mut rng, 6, 6, 0.4);
        let j = random_filled(&mut rng, 6, 10, 0.5);
        let full = Arc::new(SparsityPattern::full(6, 10));
        let mut counter = MaddCounter::new();
        let out = spmm_masked(&d, &j, &full, &mut counter).unwrap();
        let expected = d
            .to_dense()
            .matmul(&j.to_dense(), &mut MaddCounter::new())
            .unwrap();
        for r in 0..6 {
            for c in 0..10 {
                assert!((out.get(r, c) - expected.get(r, c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn spmm_masked_equals_masked_full_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_filled(&mut rng, 5, 5, 0.5);
        let j = random_filled(&mut rng, 5, 7, 0.5);
        let out_pat = Arc::new(random_pattern(&mut rng, 5, 7, 0.4));
        let full = Arc::new(SparsityPattern::full(5, 7));
        let mut c1 = MaddCounter::new();
        let masked = spmm_masked(&d, &j, &out_pat, &mut c1).unwrap();
        let full_prod = spmm_masked(&d, &j, &full, &mut MaddCounter::new()).unwrap();
        let remasked = masked_assign(&full_prod, &out_pat).unwrap();
        assert_eq!(masked.values(), remasked.values());
    }

    #[test]
    fn spmm_madd_count_matches_index_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d_pat = random_pattern(&mut rng, 6, 6, 0.5);
        let j_pat = random_pattern(&mut rng, 6, 9, 0.4);
        let out_pat = random_pattern(&mut rng, 6, 9, 0.6);
        let mut expected = 0u64;
        for (r, c) in out_pat.positions() {
            for m in 0..6 {
                if d_pat.contains(r, m) && j_pat.contains(m, c) {
                    expected += 1;
                }
            }
        }
        let d = random_patterned(&mut rng, d_pat);
        let j = random_patterned(&mut rng, j_pat);
        let mut counter = MaddCounter::new();
        spmm_masked(&d, &j, &Arc::new(out_pat), &mut counter).unwrap();
        assert_eq!(counter.total(), expected);
    }

    #[test]
    fn add_into_scalar_case() {
        let p = Arc::new(SparsityPattern::from_positions(1, 1, &[(0, 0)]).unwrap());
        let a = PatternedMatrix::from_values(Arc::clone(&p), vec![1.0]).unwrap();
        let b = PatternedMatrix::from_values(Arc::clone(&p), vec![2.0]).unwrap();
        let out = add_into(&a, &b).unwrap();
        assert_eq!(out.values(), &[3.0]);
    }

    #[test]
    fn add_into_empty_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_filled(&mut rng, 4, 6, 0.5);
        let b = PatternedMatrix::zeros(Arc::new(SparsityPattern::empty(4, 6)));
        let out = add_into(&a, &b).unwrap();
        assert_eq!(out.values(), a.values());
    }

    #[test]
    fn add_into_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a_pat = random_pattern(&mut rng, 5, 8, 0.7);
        // b strictly inside a
        let b_pos: Vec<_> = a_pat.positions().filter(|_| rng.gen::<f64>() < 0.5).collect();
        let b_pat = SparsityPattern::from_positions(5, 8, &b_pos).unwrap();
        let a = random_patterned(&mut rng, a_pat);
        let b = random_patterned(&mut rng, b_pat);
        let out = add_into(&a, &b).unwrap();
        let da = a.to_dense();
        let db = b.to_dense();
        for r in 0..5 {
            for c in 0..8 {
                assert!((out.get(r, c) - (da.get(r, c) + db.get(r, c))).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn add_into_rejects_support_violation() {
        let a = PatternedMatrix::zeros(Arc::new(
            SparsityPattern::from_positions(2, 2, &[(0, 0)]).unwrap(),
        ));
        let b = PatternedMatrix::zeros(Arc::new(
            SparsityPattern::from_positions(2, 2, &[(1, 1)]).unwrap(),
        ));
        assert!(matches!(add_into(&a, &b), Err(Error::Pattern { .. })));
    }

    #[test]
    fn vec_mat_basis_vector_selects_row() {
        let full = Arc::new(SparsityPattern::full(2, 3));
        let m =
            PatternedMatrix::from_values(Arc::clone(&full), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
                .unwrap();
        let out = vec_mat(&[1.0, 0.0], &m, &mut MaddCounter::new()).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
        let zero = vec_mat(&[0.0, 0.0], &m, &mut MaddCounter::new()).unwrap();
        assert_eq!(zero, vec![0.0; 3]);
    }

    #[test]
    fn vec_mat_matches_dense_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = random_filled(&mut rng, 7, 5, 0.5);
        let v: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = vec_mat(&v, &m, &mut MaddCounter::new()).unwrap();
        let expected = m.to_dense().vec_mat(&v, &mut MaddCounter::new()).unwrap();
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn masked_assign_diagonal_of_full() {
        let full = Arc::new(SparsityPattern::full(2, 2));
        let src =
            PatternedMatrix::from_values(Arc::clone(&full), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let diag = Arc::new(SparsityPattern::identity(2));
        let out = masked_assign(&src, &diag).unwrap();
        assert_eq!(out.values(), &[1.0, 4.0]);
    }

    #[test]
    fn masked_assign_superset_preserves_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let src = random_filled(&mut rng, 4, 4, 0.3);
        let full = Arc::new(SparsityPattern::full(4, 4));
        let out = masked_assign(&src, &full).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(out.get(r, c), src.get(r, c));
            }
        }
    }

    #[test]
    fn patterned_set_outside_pattern_errors() {
        let mut m = PatternedMatrix::zeros(Arc::new(
            SparsityPattern::from_positions(2, 2, &[(0, 1)]).unwrap(),
        ));
        assert!(m.set(0, 1, 2.0).is_ok());
        assert!(matches!(m.set(1, 0, 1.0), Err(Error::Pattern { .. })));
    }

    #[test]
    fn pattern_construction_canonicalizes() {
        let a = SparsityPattern::from_positions(3, 3, &[(2, 1), (0, 0), (2, 1), (1, 2)]).unwrap();
        let b = SparsityPattern::from_positions(3, 3, &[(0, 0), (1, 2), (2, 1)]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.nnz(), 3);
    }

    #[test]
    fn pattern_rejects_out_of_bounds() {
        assert!(SparsityPattern::from_positions(2, 2, &[(2, 0)]).is_err());
    }

    #[test]
    fn determinism_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = random_filled(&mut rng, 8, 8, 0.5);
        let j = random_filled(&mut rng, 8, 12, 0.4);
        let out_pat = Arc::new(random_pattern(&mut rng, 8, 12, 0.5));
        let a = spmm_masked(&d, &j, &out_pat, &mut MaddCounter::new()).unwrap();
        let b = spmm_masked(&d, &j, &out_pat, &mut MaddCounter::new()).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
