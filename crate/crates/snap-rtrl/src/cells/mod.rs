//! Recurrent cell definitions: forward steps, analytic per-step Jacobians,
//! and structural (mask-level) Jacobian patterns.
//!
//! Every cell exposes the same contract over a stacked state vector of
//! dimension K (= k for the vanilla RNN and GRU, 2k for the LSTM, stored
//! `[h; c]`). A step yields the next state, the dynamics Jacobian
//! D = ∂state_t/∂state_{t−1} on its structural pattern, and the immediate
//! Jacobian Ĩ = ∂state_t/∂θ_t column-compressed to the unmasked parameters.

mod gru;
mod lstm;
mod vanilla;

pub use gru::{variant1_structural_d_pattern, variant1_structural_i_pattern};

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{DenseMatrix, MaddCounter, PatternedMatrix, SparsityPattern};
use crate::pattern::CompressedColumnMap;

/// Stacked recurrent state (h, or [h; c] for LSTM).
pub type StateVec = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Vanilla,
    Gru,
    Lstm,
}

impl Architecture {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Architecture::Vanilla),
            "gru" => Ok(Architecture::Gru),
            "lstm" => Ok(Architecture::Lstm),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Vanilla => "vanilla",
            Architecture::Gru => "gru",
            Architecture::Lstm => "lstm",
        }
    }

    /// Stacked state dimension K for `k` hidden units.
    pub fn state_dim(self, k: usize) -> usize {
        match self {
            Architecture::Lstm => 2 * k,
            _ => k,
        }
    }

    /// Tracked rows per Ĩ column (2 for LSTM's [h; c] state).
    pub fn tracked_rows_per_param(self) -> usize {
        match self {
            Architecture::Lstm => 2,
            _ => 1,
        }
    }

    pub(crate) fn weight_shapes(self, k: usize, a: usize) -> Vec<(usize, usize)> {
        match self {
            Architecture::Vanilla => vec![(k, k), (k, a)],
            // recurrent matrices first, then input matrices, gate order z, r, a
            Architecture::Gru => vec![(k, k), (k, k), (k, k), (k, a), (k, a), (k, a)],
            // gate order i, f, g, o
            Architecture::Lstm => {
                vec![(k, k), (k, k), (k, k), (k, k), (k, a), (k, a), (k, a), (k, a)]
            }
        }
    }

    pub(crate) fn bias_count(self) -> usize {
        match self {
            Architecture::Vanilla => 1,
            Architecture::Gru => 3,
            Architecture::Lstm => 4,
        }
    }
}

/// Step input: a dense vector or a one-hot index (byte-level LM).
#[derive(Debug, Clone)]
pub enum InputVec<'a> {
    Dense(&'a [f64]),
    OneHot { index: usize, dim: usize },
}

impl InputVec<'_> {
    pub fn dim(&self) -> usize {
        match self {
            InputVec::Dense(v) => v.len(),
            InputVec::OneHot { dim, .. } => *dim,
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match self {
            InputVec::Dense(v) => v[i],
            InputVec::OneHot { index, .. } => {
                if i == *index {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Owned form of a step input, for the BPTT tape.
#[derive(Debug, Clone)]
pub enum OwnedInput {
    Dense(Vec<f64>),
    OneHot { index: usize, dim: usize },
}

impl OwnedInput {
    pub fn as_ref(&self) -> InputVec<'_> {
        match self {
            OwnedInput::Dense(v) => InputVec::Dense(v),
            OwnedInput::OneHot { index, dim } => InputVec::OneHot {
                index: *index,
                dim: *dim,
            },
        }
    }
}

impl InputVec<'_> {
    pub fn to_owned_input(&self) -> OwnedInput {
        match self {
            InputVec::Dense(v) => OwnedInput::Dense(v.to_vec()),
            InputVec::OneHot { index, dim } => OwnedInput::OneHot {
                index: *index,
                dim: *dim,
            },
        }
    }
}

/// A weight matrix with a fixed boolean mask; masked entries are exactly
/// zero and stay zero through any update. Values are stored densely.
#[derive(Debug, Clone)]
pub struct MaskedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub mask: SparsityPattern,
}

impl MaskedMatrix {
    fn dense(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
            mask: SparsityPattern::full(rows, cols),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    /// y += W·x over the mask support.
    pub fn matvec_into(&self, x: &InputVec<'_>, y: &mut [f64], counter: &mut MaddCounter) {
        match x {
            InputVec::Dense(xv) => {
                for r in 0..self.rows {
                    let mut acc = 0.0;
                    for &c in self.mask.row_cols(r) {
                        acc += self.values[r * self.cols + c] * xv[c];
                    }
                    y[r] += acc;
                }
                counter.add(self.mask.nnz() as u64);
            }
            InputVec::OneHot { index, .. } => {
                let mut touched = 0u64;
                for r in 0..self.rows {
                    if self.mask.contains(r, *index) {
                        y[r] += self.values[r * self.cols + index];
                        touched += 1;
                    }
                }
                counter.add(touched);
            }
        }
    }

    /// y += Wᵀ·v over the mask support (backward pass).
    pub fn matvec_transpose_into(&self, v: &[f64], y: &mut [f64], counter: &mut MaddCounter) {
        for r in 0..self.rows {
            let vr = v[r];
            if vr == 0.0 {
                continue;
            }
            for &c in self.mask.row_cols(r) {
                y[c] += self.values[r * self.cols + c] * vr;
            }
        }
        counter.add(self.mask.nnz() as u64);
    }

    /// Zeroes masked entries in place.
    pub fn enforce_mask(&mut self) {
        let mut keep = vec![false; self.rows * self.cols];
        for (r, c) in self.mask.positions() {
            keep[r * self.cols + c] = true;
        }
        for (v, k) in self.values.iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
}

/// Identifies one parameter slot within a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    Weight { matrix: usize, row: usize, col: usize },
    Bias { vector: usize, index: usize },
}

/// Fixed bijection from cell parameters to flat (dense) and compressed
/// indices. Weight matrices come first in architecture order, row-major,
/// then bias vectors; the compressed side enumerates unmasked entries only.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub p: usize,
    pub p_tilde: usize,
    pub map: CompressedColumnMap,
    weight_offsets: Vec<usize>,
    bias_offsets: Vec<usize>,
    weight_dims: Vec<(usize, usize)>,
    compressed_refs: Vec<ParamRef>,
}

impl ParamLayout {
    fn new(weights: &[MaskedMatrix], biases: &[Vec<f64>]) -> Self {
        let mut weight_offsets = Vec::with_capacity(weights.len());
        let mut weight_dims = Vec::with_capacity(weights.len());
        let mut offset = 0usize;
        for w in weights {
            weight_offsets.push(offset);
            weight_dims.push((w.rows, w.cols));
            offset += w.rows * w.cols;
        }
        let mut bias_offsets = Vec::with_capacity(biases.len());
        for b in biases {
            bias_offsets.push(offset);
            offset += b.len();
        }
        let p = offset;
        let mut unmasked = vec![false; p];
        for (mi, w) in weights.iter().enumerate() {
            for (r, c) in w.mask.positions() {
                unmasked[weight_offsets[mi] + r * w.cols + c] = true;
            }
        }
        for (bi, b) in biases.iter().enumerate() {
            for i in 0..b.len() {
                unmasked[bias_offsets[bi] + i] = true;
            }
        }
        let map = CompressedColumnMap::new(&unmasked);
        let mut layout = Self {
            p,
            p_tilde: map.compressed(),
            map,
            weight_offsets,
            bias_offsets,
            weight_dims,
            compressed_refs: Vec::new(),
        };
        layout.compressed_refs = (0..layout.p_tilde)
            .map(|j| layout.param_ref(layout.map.flat_of(j)))
            .collect();
        layout
    }

    /// ParamRef of compressed column `j`; hot-loop friendly.
    #[inline]
    pub fn compressed_ref(&self, j: usize) -> ParamRef {
        self.compressed_refs[j]
    }

    pub(crate) fn weight_offset(&self, matrix: usize) -> usize {
        self.weight_offsets[matrix]
    }

    pub(crate) fn bias_offset(&self, vector: usize) -> usize {
        self.bias_offsets[vector]
    }

    pub fn flat_index(&self, r: ParamRef) -> usize {
        match r {
            ParamRef::Weight { matrix, row, col } => {
                self.weight_offsets[matrix] + row * self.weight_dims[matrix].1 + col
            }
            ParamRef::Bias { vector, index } => self.bias_offsets[vector] + index,
        }
    }

    pub fn compressed_index(&self, r: ParamRef) -> Option<usize> {
        self.map.column_of(self.flat_index(r))
    }

    pub fn param_ref(&self, flat: usize) -> ParamRef {
        for (mi, &off) in self.weight_offsets.iter().enumerate().rev() {
            if flat >= off && flat < off + self.weight_dims[mi].0 * self.weight_dims[mi].1 {
                let rel = flat - off;
                return ParamRef::Weight {
                    matrix: mi,
                    row: rel / self.weight_dims[mi].1,
                    col: rel % self.weight_dims[mi].1,
                };
            }
        }
        for (bi, &off) in self.bias_offsets.iter().enumerate().rev() {
            if flat >= off {
                return ParamRef::Bias {
                    vector: bi,
                    index: flat - off,
                };
            }
        }
        unreachable!("flat index {flat} out of range")
    }
}

/// Recurrent core parameters: named masked weight matrices and bias vectors
/// with a fixed flat indexing over the unmasked entries.
#[derive(Debug, Clone)]
pub struct CellParams {
    pub arch: Architecture,
    pub units: usize,
    pub input_dim: usize,
    pub weights: Vec<MaskedMatrix>,
    pub biases: Vec<Vec<f64>>,
    pub layout: Arc<ParamLayout>,
}

impl CellParams {
    /// Builds a cell with per-matrix uniformly random masks at `sparsity`
    /// (biases always dense), then initializes unmasked weights uniformly in
    /// ±1/√fan_in (dense fan-in). The LSTM forget-gate bias starts at +1.
    pub fn new(
        arch: Architecture,
        units: usize,
        input_dim: usize,
        sparsity: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::Config(format!(
                "sparsity must be in [0, 1), got {sparsity}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.weight_shapes(units, input_dim);
        let mut weights = Vec::with_capacity(shapes.len());
        for &(rows, cols) in &shapes {
            let mut w = if sparsity == 0.0 {
                MaskedMatrix::dense(rows, cols)
            } else {
                let keep = ((1.0 - sparsity) * (rows * cols) as f64).round() as usize;
                let chosen = rand::seq::index::sample(&mut rng, rows * cols, keep);
                let pos: Vec<(usize, usize)> =
                    chosen.iter().map(|i| (i / cols, i % cols)).collect();
                MaskedMatrix {
                    rows,
                    cols,
                    values: vec![0.0; rows * cols],
                    mask: SparsityPattern::from_positions(rows, cols, &pos)?,
                }
            };
            let bound = 1.0 / (cols as f64).sqrt();
            for (r, c) in w.mask.clone().positions() {
                w.set(r, c, rng.gen_range(-bound..bound));
            }
            weights.push(w);
        }
        let mut biases = vec![vec![0.0; units]; arch.bias_count()];
        if arch == Architecture::Lstm {
            // gate order i, f, g, o: forget bias helps early memory retention
            biases[1] = vec![1.0; units];
        }
        let layout = Arc::new(ParamLayout::new(&weights, &biases));
        Ok(Self {
            arch,
            units,
            input_dim,
            weights,
            biases,
            layout,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.arch.state_dim(self.units)
    }

    pub fn zero_state(&self) -> StateVec {
        vec![0.0; self.state_dim()]
    }

    /// Re-zeroes masked weight entries.
    pub fn enforce_mask(&mut self) {
        for w in &mut self.weights {
            w.enforce_mask();
        }
    }

    /// Reads the unmasked parameters into `out` (compressed layout).
    pub fn read_compressed(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.layout.p_tilde);
        for (j, slot) in out.iter_mut().enumerate() {
            *slot = self.value_at(self.layout.compressed_ref(j));
        }
    }

    /// Writes the unmasked parameters from `vals` (compressed layout).
    pub fn write_compressed(&mut self, vals: &[f64]) {
        assert_eq!(vals.len(), self.layout.p_tilde);
        for (j, &v) in vals.iter().enumerate() {
            self.set_value_at(self.layout.compressed_ref(j), v);
        }
    }

    /// Reads all parameters into `out` (dense flat layout, masked entries
    /// zero). The flat layout is the weight matrices in architecture order,
    /// row-major, followed by the bias vectors.
    pub fn read_flat(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.layout.p);
        let mut at = 0;
        for w in &self.weights {
            out[at..at + w.values.len()].copy_from_slice(&w.values);
            at += w.values.len();
        }
        for b in &self.biases {
            out[at..at + b.len()].copy_from_slice(b);
            at += b.len();
        }
    }

    pub fn write_flat(&mut self, vals: &[f64]) {
        assert_eq!(vals.len(), self.layout.p);
        let mut at = 0;
        for w in &mut self.weights {
            let n = w.values.len();
            w.values.copy_from_slice(&vals[at..at + n]);
            at += n;
        }
        for b in &mut self.biases {
            let n = b.len();
            b.copy_from_slice(&vals[at..at + n]);
            at += n;
        }
    }

    pub fn value_at(&self, r: ParamRef) -> f64 {
        match r {
            ParamRef::Weight { matrix, row, col } => self.weights[matrix].get(row, col),
            ParamRef::Bias { vector, index } => self.biases[vector][index],
        }
    }

    pub fn set_value_at(&mut self, r: ParamRef, v: f64) {
        match r {
            ParamRef::Weight { matrix, row, col } => self.weights[matrix].set(row, col, v),
            ParamRef::Bias { vector, index } => self.biases[vector][index] = v,
        }
    }

    /// Structural support of the dynamics Jacobian D over the stacked state.
    pub fn structural_d_pattern(&self) -> Result<SparsityPattern> {
        match self.arch {
            Architecture::Vanilla => Ok(self.weights[0].mask.clone()),
            Architecture::Gru => {
                let k = self.units;
                let mut pos: Vec<(usize, usize)> = (0..k).map(|i| (i, i)).collect();
                for w in &self.weights[0..3] {
                    pos.extend(w.mask.positions());
                }
                SparsityPattern::from_positions(k, k, &pos)
            }
            Architecture::Lstm => {
                let k = self.units;
                // state order [h; c]; recurrent gate masks i, f, g, o
                let mut pos: Vec<(usize, usize)> = Vec::new();
                for w in &self.weights[0..4] {
                    for (r, c) in w.mask.positions() {
                        pos.push((r, c)); // h←h through gates and the cell
                        pos.push((k + r, c)); // c←h
                    }
                }
                for i in 0..k {
                    pos.push((i, k + i)); // h←c through o ⊙ φ(c)
                    pos.push((k + i, k + i)); // c←c through the forget gate
                }
                SparsityPattern::from_positions(2 * k, 2 * k, &pos)
            }
        }
    }

    /// Structural support of the column-compressed immediate Jacobian Ĩ:
    /// one tracked row per column (the unit the parameter feeds), two for
    /// the LSTM's stacked state.
    pub fn structural_i_pattern(&self) -> Result<SparsityPattern> {
        let k = self.units;
        let big_k = self.state_dim();
        let p_tilde = self.layout.p_tilde;
        let mut pos = Vec::with_capacity(p_tilde * self.arch.tracked_rows_per_param());
        for j in 0..p_tilde {
            let fed = match self.layout.param_ref(self.layout.map.flat_of(j)) {
                ParamRef::Weight { row, .. } => row,
                ParamRef::Bias { index, .. } => index,
            };
            match self.arch {
                Architecture::Lstm => {
                    pos.push((fed, j));
                    pos.push((k + fed, j));
                }
                _ => pos.push((fed, j)),
            }
        }
        SparsityPattern::from_positions(big_k, p_tilde, &pos)
    }

    /// One step: next state plus the exact analytic Jacobians at this point.
    pub fn step(
        &self,
        state: &StateVec,
        x: &InputVec<'_>,
        d_pattern: &Arc<SparsityPattern>,
        i_pattern: &Arc<SparsityPattern>,
        counter: &mut MaddCounter,
    ) -> Result<CellStepOutput> {
        let (next_state, cache) = self.step_forward(state, x, counter)?;
        let (d, i_tilde) =
            self.jacobians(state, x, &cache, d_pattern, i_pattern, counter)?;
        Ok(CellStepOutput {
            next_state,
            d,
            i_tilde,
        })
    }

    pub fn step_forward(
        &self,
        state: &StateVec,
        x: &InputVec<'_>,
        counter: &mut MaddCounter,
    ) -> Result<(StateVec, CellCache)> {
        if state.len() != self.state_dim() {
            return Err(Error::dimension(
                "cell step",
                format!("state length {} vs K = {}", state.len(), self.state_dim()),
            ));
        }
        if x.dim() != self.input_dim {
            return Err(Error::dimension(
                "cell step",
                format!("input length {} vs a = {}", x.dim(), self.input_dim),
            ));
        }
        match self.arch {
            Architecture::Vanilla => vanilla::forward(self, state, x, counter),
            Architecture::Gru => gru::forward(self, state, x, counter),
            Architecture::Lstm => lstm::forward(self, state, x, counter),
        }
    }

    /// Analytic D and Ĩ for the step that produced `cache`.
    pub fn jacobians(
        &self,
        state: &StateVec,
        x: &InputVec<'_>,
        cache: &CellCache,
        d_pattern: &Arc<SparsityPattern>,
        i_pattern: &Arc<SparsityPattern>,
        counter: &mut MaddCounter,
    ) -> Result<(PatternedMatrix, PatternedMatrix)> {
        match self.arch {
            Architecture::Vanilla => vanilla::jacobians(self, state, x, cache, d_pattern, i_pattern, counter),
            Architecture::Gru => gru::jacobians(self, state, x, cache, d_pattern, i_pattern, counter),
            Architecture::Lstm => lstm::jacobians(self, state, x, cache, d_pattern, i_pattern, counter),
        }
    }

    /// Reverse-mode step: accumulates ∂L/∂θ into `grads` (dense flat layout,
    /// unmasked entries only) and returns ∂L/∂state_{t−1} given
    /// `dnext` = ∂L/∂state_t.
    pub fn backward_step(
        &self,
        state: &StateVec,
        x: &InputVec<'_>,
        cache: &CellCache,
        dnext: &[f64],
        grads: &mut [f64],
        counter: &mut MaddCounter,
    ) -> Result<Vec<f64>> {
        match self.arch {
            Architecture::Vanilla => vanilla::backward(self, state, x, cache, dnext, grads, counter),
            Architecture::Gru => gru::backward(self, state, x, cache, dnext, grads, counter),
            Architecture::Lstm => lstm::backward(self, state, x, cache, dnext, grads, counter),
        }
    }
}

/// Per-step activations kept for Jacobian evaluation and reverse mode.
#[derive(Debug, Clone)]
pub enum CellCache {
    Vanilla {
        next_h: Vec<f64>,
    },
    Gru {
        z: Vec<f64>,
        r: Vec<f64>,
        q: Vec<f64>,
        a: Vec<f64>,
    },
    Lstm {
        i: Vec<f64>,
        f: Vec<f64>,
        g: Vec<f64>,
        o: Vec<f64>,
        c_next: Vec<f64>,
        tanh_c_next: Vec<f64>,
    },
}

/// Result of one cell step.
#[derive(Debug, Clone)]
pub struct CellStepOutput {
    pub next_state: StateVec,
    pub d: PatternedMatrix,
    pub i_tilde: PatternedMatrix,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what: name.into() })
    }
}

/// Densifies D for the dense-RTRL engine.
pub fn dense_dynamics(d: &PatternedMatrix) -> DenseMatrix {
    d.to_dense()
}

#[cfg(test)]
mod tests;
