//! Offline text encoder: a signed token-hash bag of features.

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use super::TextPrompt;
use crate::autodiff::Real;
use crate::error::{ensure, Error, Result};

pub const DEFAULT_TEXT_DIM: usize = 64;
const PROBES: usize = 3;

/// `(B, d_text)` text features, one row per prompt (or per batch item).
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T> {
    pub values: Array2<T>,
}

impl<T: Real> TextEmbedding<T> {
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn batch(&self) -> usize {
        self.values.nrows()
    }

    /// Mean of all rows repeated `batch` times.
    pub fn pooled(&self, batch: usize) -> Self {
        let mean = self.values.mean_axis(ndarray::Axis(0)).expect("non-empty embedding");
        let values = Array2::from_shape_fn((batch, mean.len()), |(_, j)| mean[j]);
        Self { values }
    }
}

/// Deterministic stand-in for a pretrained text tower. Feature 0 is a constant
/// bias so every row has positive norm; each lowercase alphanumeric token adds
/// ±1 at three hashed positions in `1..dim`, and the bag is averaged.
#[derive(Clone, Debug)]
pub struct HashTextEncoder {
    pub dim: usize,
}

impl Default for HashTextEncoder {
    fn default() -> Self {
        Self { dim: DEFAULT_TEXT_DIM }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

impl HashTextEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        ensure!(dim >= 2, Error::Config(format!("text dimension {dim} must be at least 2")));
        Ok(Self { dim })
    }

    pub fn encode_one<T: Real>(&self, text: &str) -> Array1<T> {
        let mut row = vec![0.0f64; self.dim];
        let tokens = tokenize(text);
        for token in &tokens {
            let digest = Sha256::digest(token.as_bytes());
            for probe in 0..PROBES {
                let b = &digest[probe * 4..probe * 4 + 4];
                let h = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                let idx = 1 + (h >> 1) as usize % (self.dim - 1);
                let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
                row[idx] += sign;
            }
        }
        let n = tokens.len().max(1) as f64;
        row.iter_mut().skip(1).for_each(|v| *v /= n);
        row[0] = 1.0;
        row.into_iter().map(T::lit).collect()
    }

    /// `encode_text`: one row per prompt.
    pub fn encode<T: Real>(&self, prompts: &[TextPrompt]) -> Result<TextEmbedding<T>> {
        ensure!(!prompts.is_empty(), Error::Argument("encode_text needs at least one prompt".into()));
        let mut values = Array2::zeros((prompts.len(), self.dim));
        for (mut row, p) in values.rows_mut().into_iter().zip(prompts) {
            row.assign(&self.encode_one::<T>(&p.text));
        }
        Ok(TextEmbedding { values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_prior::{PromptSource, TextPrompt};

    fn prompt(text: &str) -> TextPrompt {
        TextPrompt { organ: "spleen".into(), text: text.into(), source: PromptSource::Template, fallback: false }
    }

    #[test]
    fn identical_prompts_identical_rows() {
        let enc = HashTextEncoder::default();
        let e = enc.encode::<f64>(&[prompt("a ct of the spleen"), prompt("a ct of the spleen")]).unwrap();
        assert_eq!(e.values.row(0), e.values.row(1));
    }

    #[test]
    fn rows_have_positive_finite_norm() {
        let enc = HashTextEncoder::default();
        for text in ["spleen", "", "!!!", "liver liver liver"] {
            let row = enc.encode_one::<f64>(text);
            let norm = row.dot(&row).sqrt();
            assert!(norm.is_finite() && norm > 0.0, "{text:?}");
        }
    }

    #[test]
    fn one_token_difference_changes_the_row() {
        let enc = HashTextEncoder::default();
        let e = enc
            .encode::<f64>(&[prompt("A CT scan showing the spleen"), prompt("A CT scan showing the liver")])
            .unwrap();
        assert_ne!(e.values.row(0), e.values.row(1));
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(matches!(HashTextEncoder::default().encode::<f64>(&[]), Err(Error::Argument(_))));
    }
}
