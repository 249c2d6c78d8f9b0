//! Frozen text embeddings behind a stable interface, plus the trainable
//! decoder projection applied to instance embeddings.
//!
//! The default encoder is a deterministic stub: tokens hash to seeded
//! pseudo-random unit vectors which are summed with positional weights and
//! renormalized. Similar token sets therefore land near each other while
//! distinct prompts stay separated, and the whole test suite runs without any
//! downloaded weights. A vocabulary-file adapter provides the seam for a real
//! pretrained encoder's exported token table.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{TapeParams, TransformerDecoderLayer};

/// Unit-norm embedding of one text.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Array1<f64>,
    pub source_text: String,
}

/// Exported token table for the pretrained adapter: token -> vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    embedding_dim: usize,
    vocab: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone)]
enum EncoderKind {
    Stub,
    Pretrained { vocab: BTreeMap<String, Array1<f64>> },
}

/// Frozen text encoder. Construction is the only fallible step; encoding
/// afterwards is total and deterministic.
#[derive(Debug, Clone)]
pub struct TextEncoderHandle {
    kind: EncoderKind,
    embedding_dim: usize,
}

/// FNV-1a, fixed across platforms and releases.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn token_unit_vector(token: &str, dim: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(token.as_bytes()));
    // Box-Muller from explicit uniforms keeps the stream layout obvious.
    let mut v = Array1::<f64>::zeros(dim);
    for x in v.iter_mut() {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        *x = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    let norm = v.dot(&v).sqrt();
    v.mapv_into(|x| x / norm)
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

impl TextEncoderHandle {
    pub fn stub(embedding_dim: usize) -> Self {
        Self {
            kind: EncoderKind::Stub,
            embedding_dim,
        }
    }

    /// Load the exported token table. Missing or malformed files fail here,
    /// never mid-training.
    pub fn pretrained(path: &Path, embedding_dim: usize) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            Error::TextEncoder(format!("weights file {}: {e}", path.display()))
        })?;
        let file: VocabFile = serde_json::from_str(&raw)
            .map_err(|e| Error::TextEncoder(format!("weights file parse: {e}")))?;
        if file.embedding_dim != embedding_dim {
            return Err(Error::TextEncoder(format!(
                "weights carry dim {}, config wants {}",
                file.embedding_dim, embedding_dim
            )));
        }
        let mut vocab = BTreeMap::new();
        for (token, vec) in file.vocab {
            if vec.len() != embedding_dim {
                return Err(Error::TextEncoder(format!(
                    "token '{token}' has {} dims",
                    vec.len()
                )));
            }
            vocab.insert(token, Array1::from_vec(vec));
        }
        Ok(Self {
            kind: EncoderKind::Pretrained { vocab },
            embedding_dim,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            EncoderKind::Stub => "stub",
            EncoderKind::Pretrained { .. } => "pretrained",
        }
    }

    /// Hash of the full encoder state; training must leave it unchanged.
    pub fn state_hash(&self) -> u64 {
        let mut acc = fnv1a64(self.kind_name().as_bytes()) ^ self.embedding_dim as u64;
        if let EncoderKind::Pretrained { vocab } = &self.kind {
            for (token, vec) in vocab {
                acc ^= fnv1a64(token.as_bytes());
                for v in vec {
                    acc = acc.wrapping_mul(31).wrapping_add(v.to_bits());
                }
            }
        }
        acc
    }

    fn token_vector(&self, token: &str) -> Option<Array1<f64>> {
        match &self.kind {
            EncoderKind::Stub => Some(token_unit_vector(token, self.embedding_dim)),
            EncoderKind::Pretrained { vocab } => vocab.get(token).cloned(),
        }
    }

    /// Encode texts to unit-norm vectors. Deterministic per (handle, text).
    pub fn encode_text(&self, texts: &[String]) -> Result<Vec<TextEmbedding>> {
        if texts.is_empty() {
            return Err(Error::TextEncoder("encode_text on empty list".into()));
        }
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            if text.trim().is_empty() {
                return Err(Error::TextEncoder("empty text".into()));
            }
            let tokens = tokenize(text);
            if tokens.is_empty() {
                return Err(Error::TextEncoder(format!(
                    "text '{text}' has no usable tokens"
                )));
            }
            let mut sum = Array1::<f64>::zeros(self.embedding_dim);
            let mut found = 0usize;
            for (pos, token) in tokens.iter().enumerate() {
                match self.token_vector(token) {
                    Some(v) => {
                        sum.scaled_add(1.0 / (1.0 + pos as f64), &v);
                        found += 1;
                    }
                    None => log::warn!("token '{token}' missing from vocabulary, skipped"),
                }
            }
            if found == 0 {
                return Err(Error::TextEncoder(format!(
                    "no token of '{text}' is in the vocabulary"
                )));
            }
            let norm = sum.dot(&sum).sqrt();
            if norm == 0.0 {
                return Err(Error::TextEncoder(format!(
                    "text '{text}' encoded to a zero vector"
                )));
            }
            out.push(TextEmbedding {
                vector: sum.mapv_into(|x| x / norm),
                source_text: text.clone(),
            });
        }
        Ok(out)
    }

    /// Encode to an N x C_emb matrix.
    pub fn encode_matrix(&self, texts: &[String]) -> Result<Array2<f64>> {
        let embeddings = self.encode_text(texts)?;
        let mut out = Array2::<f64>::zeros((embeddings.len(), self.embedding_dim));
        for (i, e) in embeddings.iter().enumerate() {
            out.row_mut(i).assign(&e.vector);
        }
        Ok(out)
    }
}

/// Write a stub-generated vocabulary file (useful for round-trip tests and as
/// the export format a real encoder's table would be converted into).
pub fn export_stub_vocab(tokens: &[String], dim: usize, path: &Path) -> Result<()> {
    let mut vocab = BTreeMap::new();
    for t in tokens {
        for token in tokenize(t) {
            vocab
                .entry(token.clone())
                .or_insert_with(|| token_unit_vector(&token, dim).to_vec());
        }
    }
    let file = VocabFile {
        embedding_dim: dim,
        vocab,
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Project instance embeddings through the trainable decoder layer.
///
/// Self-attention runs over the N instance rows; cross-attention (when the
/// layer is configured with it) attends to the image feature tokens. Returns
/// the N x C_emb instance text features. N = 0 yields an empty matrix.
pub fn project_text_features<'t>(
    tape: &'t Tape,
    params: &TapeParams<'t>,
    decoder: &TransformerDecoderLayer,
    instance_embeddings: Array2<f64>,
    image_tokens: Var<'t>,
) -> Var<'t> {
    if instance_embeddings.nrows() == 0 {
        return tape.leaf2(Array2::zeros((0, instance_embeddings.ncols())));
    }
    let queries = tape.leaf2(instance_embeddings);
    decoder.forward(params, queries, image_tokens)
}
