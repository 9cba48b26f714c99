use sha2::{Digest, Sha256};

use crate::numerics::{Real, SeededRng, Tensor};

/// Seed of the token and position tables; part of the model definition.
const TEXT_TABLE_SEED: u64 = 0x7e47_5eed_0000_0001;

/// `L × d_text` embedding of a caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T>(pub Tensor<T>);

impl<T: Real> TextEmbedding<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn tokens(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn cast<U: Real>(&self) -> TextEmbedding<U> {
        TextEmbedding(self.0.cast())
    }
}

/// Whitespace tokenizer with hashed lookup into a fixed random table plus
/// a positional table.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    vocab: usize,
    dim: usize,
    max_len: usize,
    /// `(vocab + 1) × dim`; the last row is the padding token.
    table: Vec<f64>,
    pos: Vec<f64>,
}

impl TextEncoder {
    pub fn new(vocab: usize, dim: usize, max_len: usize) -> Self {
        let mut rng = SeededRng::stream(TEXT_TABLE_SEED, "tokens");
        let table = (0..(vocab + 1) * dim).map(|_| rng.normal()).collect();
        let mut rng = SeededRng::stream(TEXT_TABLE_SEED, "positions");
        let pos = (0..max_len * dim).map(|_| 0.5 * rng.normal()).collect();
        Self {
            vocab,
            dim,
            max_len,
            table,
            pos,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn token_id(&self, token: &str) -> usize {
        let digest = Sha256::digest(token.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(b) % self.vocab as u64) as usize
    }

    pub fn encode<T: Real>(&self, s: &str) -> TextEmbedding<T> {
        let mut ids: Vec<usize> = s
            .split_whitespace()
            .take(self.max_len)
            .map(|t| self.token_id(t))
            .collect();
        if ids.is_empty() {
            ids.push(self.vocab);
        }
        let d = self.dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for (p, &id) in ids.iter().enumerate() {
            data.extend((0..d).map(|k| T::lit(self.table[id * d + k] + self.pos[p * d + k])));
        }
        TextEmbedding(Tensor::new(&[ids.len(), d], data).expect("at least one token"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_order_sensitive() {
        let enc = TextEncoder::new(64, 8, 6);
        let a: TextEmbedding<f64> = enc.encode("a red square");
        assert_eq!(a, enc.encode("a red square"));
        assert_eq!(a.tokens(), 3);
        assert_ne!(enc.encode::<f64>("a b"), enc.encode::<f64>("b a"));
        let e: TextEmbedding<f64> = enc.encode("   ");
        assert_eq!(e.tensor().dims(), &[1, 8]);
        let long = "w ".repeat(20);
        assert_eq!(enc.encode::<f64>(&long).tokens(), 6);
    }
}
