//! Data generation and ingestion: the curriculum copy task, its fixed-length
//! variant for bias analysis, and a byte-level language-modeling corpus.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Input channels of the copy task.
pub const COPY_CHANNELS: usize = 4;
const CH_BIT: usize = 0;
const CH_START: usize = 1;
const CH_END: usize = 2;
const CH_GO: usize = 3;

/// Copy-task classes are the two payload bits.
pub const COPY_CLASSES: usize = 2;

/// Curriculum over the copy length L: L increments by one whenever the
/// average bits per character of a training minibatch drops strictly below
/// the threshold.
#[derive(Debug, Clone)]
pub struct CopyCurriculum {
    pub level: usize,
    pub threshold_bpc: f64,
}

impl CopyCurriculum {
    pub fn new() -> Self {
        Self {
            level: 1,
            threshold_bpc: 0.15,
        }
    }
}

impl Default for CopyCurriculum {
    fn default() -> Self {
        Self::new()
    }
}

/// Strictly-below comparison; ties do not advance, and L moves by at most
/// one per batch.
pub fn curriculum_update(curriculum: &mut CopyCurriculum, batch_bpc: f64) {
    if batch_bpc < curriculum.threshold_bpc {
        curriculum.level += 1;
    }
}

/// One copy sequence: start flag, ℓ_p payload steps, end flag, then ℓ_p
/// target steps under a go cue. Total length 2·ℓ_p + 2; the loss mask covers
/// exactly the target steps.
#[derive(Debug, Clone)]
pub struct CopySequence {
    pub inputs: Vec<[f64; COPY_CHANNELS]>,
    pub targets: Vec<Option<usize>>,
}

impl CopySequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Generates one sequence with payload length `payload_len`.
pub fn sample_copy_sequence(payload_len: usize, rng: &mut ChaCha8Rng) -> CopySequence {
    let total = 2 * payload_len + 2;
    let mut inputs = vec![[0.0; COPY_CHANNELS]; total];
    let mut targets = vec![None; total];
    inputs[0][CH_START] = 1.0;
    let bits: Vec<usize> = (0..payload_len).map(|_| rng.gen_range(0..2)).collect();
    for (i, &bit) in bits.iter().enumerate() {
        inputs[1 + i][CH_BIT] = bit as f64;
    }
    inputs[payload_len + 1][CH_END] = 1.0;
    for (i, &bit) in bits.iter().enumerate() {
        let t = payload_len + 2 + i;
        inputs[t][CH_GO] = 1.0;
        targets[t] = Some(bit);
    }
    CopySequence { inputs, targets }
}

/// Batch with per-element payload lengths drawn uniformly from
/// [max(L−5, 1), L].
pub fn sample_copy_batch(
    curriculum: &CopyCurriculum,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<CopySequence> {
    let lo = curriculum.level.saturating_sub(5).max(1);
    let hi = curriculum.level;
    (0..batch)
        .map(|_| {
            let len = rng.gen_range(lo..=hi);
            sample_copy_sequence(len, rng)
        })
        .collect()
}

/// Fixed-length batch for the bias analysis.
pub fn sample_copy_fixed_batch(
    payload_len: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<CopySequence> {
    (0..batch)
        .map(|_| sample_copy_sequence(payload_len, rng))
        .collect()
}

/// Raw byte corpus; crops are sampled uniformly with replacement and no
/// state is carried across a crop boundary.
#[derive(Debug, Clone)]
pub struct ByteCorpus {
    bytes: Vec<u8>,
}

/// Byte vocabulary size.
pub const BYTE_CLASSES: usize = 256;

impl ByteCorpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(Self {
            bytes: std::fs::read(path)?,
        })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Splits off the trailing `fraction` of the corpus as a validation set.
    pub fn split_validation(&self, fraction: f64) -> (ByteCorpus, ByteCorpus) {
        let cut = ((1.0 - fraction) * self.bytes.len() as f64) as usize;
        (
            ByteCorpus::from_bytes(self.bytes[..cut].to_vec()),
            ByteCorpus::from_bytes(self.bytes[cut..].to_vec()),
        )
    }

    /// Uniform crop start offset such that inputs and shifted targets fit.
    pub fn sample_offset(&self, crop_len: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
        if self.bytes.len() <= crop_len {
            return Err(Error::Config(format!(
                "corpus of {} bytes is too short for crop length {}",
                self.bytes.len(),
                crop_len
            )));
        }
        Ok(rng.gen_range(0..=self.bytes.len() - crop_len - 1))
    }

    /// Input bytes and next-byte targets of the crop at `offset`.
    pub fn crop(&self, offset: usize, crop_len: usize) -> (&[u8], &[u8]) {
        (
            &self.bytes[offset..offset + crop_len],
            &self.bytes[offset + 1..offset + crop_len + 1],
        )
    }
}

/// Batch of crop offsets.
pub fn sample_lm_batch(
    corpus: &ByteCorpus,
    batch: usize,
    crop_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    (0..batch).map(|_| corpus.sample_offset(crop_len, rng)).collect()
}

/// Deterministic English-like filler corpus for self-contained runs and
/// tests: a Zipf-weighted word vocabulary arranged into sentences and
/// paragraphs. Enough structure for a byte model to have something to learn.
pub fn synthetic_corpus(target_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const ONSETS: [&str; 12] = [
        "b", "br", "d", "f", "gr", "k", "l", "m", "p", "st", "t", "v",
    ];
    const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ou"];
    const CODAS: [&str; 8] = ["", "n", "r", "s", "t", "l", "nd", "m"];
    let vocab_size = 600;
    let mut vocab: Vec<String> = Vec::with_capacity(vocab_size);
    for _ in 0..vocab_size {
        let syllables = rng.gen_range(1..=3);
        let mut word = String::new();
        for _ in 0..syllables {
            word.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            word.push_str(NUCLEI[rng.gen_range(0..NUCLEI.len())]);
            word.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
        }
        vocab.push(word);
    }
    // Zipf weights via inverse-CDF sampling
    let weights: Vec<f64> = (0..vocab_size).map(|i| 1.0 / (i as f64 + 1.0).powf(1.1)).collect();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(vocab_size);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }
    let sample_word = |rng: &mut ChaCha8Rng| -> usize {
        let u: f64 = rng.gen();
        cdf.partition_point(|&c| c < u).min(vocab_size - 1)
    };

    let mut out: Vec<u8> = Vec::with_capacity(target_bytes + 64);
    let mut sentence_in_paragraph = 0;
    while out.len() < target_bytes {
        let words = rng.gen_range(6..=14);
        for w in 0..words {
            let word = &vocab[sample_word(&mut rng)];
            if w == 0 {
                let mut chars = word.chars();
                if let Some(first) = chars.next() {
                    out.extend(first.to_uppercase().to_string().as_bytes());
                    out.extend(chars.as_str().as_bytes());
                }
            } else {
                out.extend(word.as_bytes());
            }
            if w + 1 < words {
                if w > 2 && rng.gen::<f64>() < 0.08 {
                    out.push(b',');
                }
                out.push(b' ');
            }
        }
        out.push(b'.');
        sentence_in_paragraph += 1;
        if sentence_in_paragraph >= rng.gen_range(3..=6) {
            out.push(b'\n');
            sentence_in_paragraph = 0;
        } else {
            out.push(b' ');
        }
    }
    out.truncate(target_bytes);
    out
}

/// Bits per character from a mean per-step loss in nats.
pub fn bpc_from_nats(mean_nats: f64) -> f64 {
    mean_nats / std::f64::consts::LN_2
}
