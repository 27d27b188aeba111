//! Readout heads mapping the visible state to class logits, with exact
//! local gradients. The language-model head is a one-hidden-layer rectifier
//! MLP; the copy task uses a plain linear head over two classes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::MaddCounter;

#[derive(Debug, Clone)]
pub enum Readout {
    Linear {
        in_dim: usize,
        out_dim: usize,
        w: Vec<f64>, // out×in row-major
        b: Vec<f64>,
    },
    Mlp {
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        w1: Vec<f64>, // hidden×in
        b1: Vec<f64>,
        w2: Vec<f64>, // out×hidden
        b2: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct ReadoutCache {
    hidden: Vec<f64>, // post-rectifier activations (empty for linear)
    pub logits: Vec<f64>,
}

impl Readout {
    pub fn linear(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (in_dim as f64).sqrt();
        Readout::Linear {
            in_dim,
            out_dim,
            w: (0..out_dim * in_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            b: vec![0.0; out_dim],
        }
    }

    pub fn mlp(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound1 = 1.0 / (in_dim as f64).sqrt();
        let w1 = (0..hidden * in_dim).map(|_| rng.gen_range(-bound1..bound1)).collect();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        let w2 = (0..out_dim * hidden).map(|_| rng.gen_range(-bound2..bound2)).collect();
        Readout::Mlp {
            in_dim,
            hidden,
            out_dim,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Readout::Linear { in_dim, .. } | Readout::Mlp { in_dim, .. } => *in_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Readout::Linear { out_dim, .. } | Readout::Mlp { out_dim, .. } => *out_dim,
        }
    }

    /// Flat trainable parameter count.
    pub fn param_len(&self) -> usize {
        match self {
            Readout::Linear { in_dim, out_dim, .. } => out_dim * in_dim + out_dim,
            Readout::Mlp {
                in_dim,
                hidden,
                out_dim,
                ..
            } => hidden * in_dim + hidden + out_dim * hidden + out_dim,
        }
    }

    pub fn read_flat(&self, out: &mut [f64]) {
        let parts = self.flat_parts();
        let mut at = 0;
        for p in parts {
            out[at..at + p.len()].copy_from_slice(p);
            at += p.len();
        }
    }

    pub fn write_flat(&mut self, vals: &[f64]) {
        let mut at = 0;
        for p in self.flat_parts_mut() {
            let n = p.len();
            p.copy_from_slice(&vals[at..at + n]);
            at += n;
        }
    }

    fn flat_parts(&self) -> Vec<&[f64]> {
        match self {
            Readout::Linear { w, b, .. } => vec![w, b],
            Readout::Mlp { w1, b1, w2, b2, .. } => vec![w1, b1, w2, b2],
        }
    }

    fn flat_parts_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Readout::Linear { w, b, .. } => vec![w, b],
            Readout::Mlp { w1, b1, w2, b2, .. } => vec![w1, b1, w2, b2],
        }
    }

    pub fn forward(&self, input: &[f64], counter: &mut MaddCounter) -> Result<ReadoutCache> {
        if input.len() != self.in_dim() {
            return Err(Error::dimension(
                "readout forward",
                format!("input {} vs {}", input.len(), self.in_dim()),
            ));
        }
        match self {
            Readout::Linear { in_dim, out_dim, w, b } => {
                let mut logits = b.clone();
                for o in 0..*out_dim {
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    logits[o] += dot(row, input);
                }
                counter.add((out_dim * in_dim) as u64);
                Ok(ReadoutCache {
                    hidden: Vec::new(),
                    logits,
                })
            }
            Readout::Mlp {
                in_dim,
                hidden,
                out_dim,
                w1,
                b1,
                w2,
                b2,
            } => {
                let mut hid = b1.clone();
                for hsl in 0..*hidden {
                    let row = &w1[hsl * in_dim..(hsl + 1) * in_dim];
                    hid[hsl] += dot(row, input);
                }
                for v in hid.iter_mut() {
                    *v = v.max(0.0);
                }
                let mut logits = b2.clone();
                for o in 0..*out_dim {
                    let row = &w2[o * hidden..(o + 1) * hidden];
                    logits[o] += dot(row, &hid);
                }
                counter.add((hidden * in_dim + out_dim * hidden) as u64);
                Ok(ReadoutCache { hidden: hid, logits })
            }
        }
    }

    /// Accumulates parameter gradients into `grads` (flat layout) and returns
    /// ∂L/∂input, given ∂L/∂logits.
    pub fn backward(
        &self,
        input: &[f64],
        cache: &ReadoutCache,
        dlogits: &[f64],
        grads: &mut [f64],
        counter: &mut MaddCounter,
    ) -> Result<Vec<f64>> {
        match self {
            Readout::Linear { in_dim, out_dim, w, .. } => {
                let (gw, gb) = grads.split_at_mut(out_dim * in_dim);
                let mut dinput = vec![0.0; *in_dim];
                for o in 0..*out_dim {
                    let dl = dlogits[o];
                    gb[o] += dl;
                    if dl == 0.0 {
                        continue;
                    }
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
                    for c in 0..*in_dim {
                        grow[c] += dl * input[c];
                        dinput[c] += dl * row[c];
                    }
                }
                counter.add(2 * (out_dim * in_dim) as u64);
                Ok(dinput)
            }
            Readout::Mlp {
                in_dim,
                hidden,
                out_dim,
                w1,
                w2,
                ..
            } => {
                let n_w1 = hidden * in_dim;
                let (gw1, rest) = grads.split_at_mut(n_w1);
                let (gb1, rest) = rest.split_at_mut(*hidden);
                let (gw2, gb2) = rest.split_at_mut(out_dim * hidden);
                let hid = &cache.hidden;
                let mut dhid = vec![0.0; *hidden];
                for o in 0..*out_dim {
                    let dl = dlogits[o];
                    gb2[o] += dl;
                    if dl == 0.0 {
                        continue;
                    }
                    let row = &w2[o * hidden..(o + 1) * hidden];
                    let grow = &mut gw2[o * hidden..(o + 1) * hidden];
                    for hsl in 0..*hidden {
                        grow[hsl] += dl * hid[hsl];
                        dhid[hsl] += dl * row[hsl];
                    }
                }
                // rectifier gate
                for hsl in 0..*hidden {
                    if hid[hsl] <= 0.0 {
                        dhid[hsl] = 0.0;
                    }
                }
                let mut dinput = vec![0.0; *in_dim];
                for hsl in 0..*hidden {
                    let dh = dhid[hsl];
                    gb1[hsl] += dh;
                    if dh == 0.0 {
                        continue;
                    }
                    let row = &w1[hsl * in_dim..(hsl + 1) * in_dim];
                    let grow = &mut gw1[hsl * in_dim..(hsl + 1) * in_dim];
                    for c in 0..*in_dim {
                        grow[c] += dh * input[c];
                        dinput[c] += dh * row[c];
                    }
                }
                counter.add(2 * (hidden * in_dim + out_dim * hidden) as u64);
                Ok(dinput)
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax cross-entropy in nats: loss and ∂L/∂logits.
pub fn softmax_loss(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[target];
    let mut dlogits: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    dlogits[target] -= 1.0;
    (loss, dlogits)
}
