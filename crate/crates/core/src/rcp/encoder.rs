//! Encoder provider contract and a deterministic, trainable stub encoder.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output of an encoder: one row of `hidden` and one attention row per
/// head for every input token.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    /// `l × d` contextual embeddings.
    pub hidden: Array2<f64>,
    /// `heads × l × l` last-layer attention; every row sums to 1.
    pub attention: Array3<f64>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.hidden.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.nrows() == 0
    }

    /// Checks declared dimensions and row-stochastic attention (within 1e-4).
    pub fn check(&self, hidden_dim: usize, num_heads: usize) -> Result<()> {
        let (l, d) = self.hidden.dim();
        let (h, q, k) = self.attention.dim();
        if d != hidden_dim || h != num_heads || q != l || k != l {
            return Err(Error::Encoder(format!(
                "shape mismatch: hidden {l}x{d}, attention {h}x{q}x{k}, declared d={hidden_dim} heads={num_heads}"
            )));
        }
        for head in self.attention.outer_iter() {
            for (i, row) in head.outer_iter().enumerate() {
                let s: f64 = row.sum();
                if (s - 1.0).abs() > 1e-4 || row.iter().any(|&a| a < 0.0 || !a.is_finite()) {
                    return Err(Error::Encoder(format!(
                        "attention row {i} is not a distribution (sum {s})"
                    )));
                }
            }
        }
        if self.hidden.iter().any(|v| !v.is_finite()) {
            return Err(Error::Encoder("non-finite hidden state".into()));
        }
        Ok(())
    }
}

/// A contextual encoder. Implementations return one output row per input
/// token, so marker positions in the input index directly into the output.
pub trait Encoder: Send + Sync {
    fn identifier(&self) -> String;
    fn hidden_dim(&self) -> usize;
    fn num_heads(&self) -> usize;
    /// Maximum number of input tokens accepted by `encode`.
    fn max_length(&self) -> usize;
    fn encode(&self, tokens: &[String]) -> Result<Encoding>;
}

/// An encoder whose weights are updated during proposal-model training.
pub trait TrainableEncoder: Encoder {
    fn parameters(&self) -> &[f64];
    fn parameters_mut(&mut self) -> &mut [f64];
    /// Adds dLoss/dparameters into `grad`, given dLoss/dhidden for the
    /// encoding of `tokens`. Attention is treated as independent of the
    /// trainable parameters.
    fn backward(&self, tokens: &[String], grad_hidden: &Array2<f64>, grad: &mut [f64]) -> Result<()>;
}

/// Configuration of [`HashingEncoder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashingEncoderSpec {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub max_length: usize,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for HashingEncoderSpec {
    fn default() -> Self {
        HashingEncoderSpec {
            hidden_dim: 16,
            num_heads: 2,
            max_length: 512,
            buckets: 4096,
            seed: 13,
        }
    }
}

/// Deterministic stand-in for a pretrained encoder.
///
/// Tokens are hashed into a trainable embedding table `X`. Head `k` attends
/// with weights proportional to `exp(-|i - j| / 2^k)`, and the output is
/// `H = (X + Ā X) / 2` where `Ā` is the head-averaged attention.
#[derive(Debug, Clone, PartialEq)]
pub struct HashingEncoder {
    spec: HashingEncoderSpec,
    table: Vec<f64>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl HashingEncoder {
    pub fn new(spec: HashingEncoderSpec) -> Result<Self> {
        if spec.hidden_dim == 0 || spec.num_heads == 0 || spec.max_length == 0 || spec.buckets == 0 {
            return Err(Error::Config(format!("degenerate encoder spec {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let table = (0..spec.buckets * spec.hidden_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Ok(HashingEncoder { spec, table })
    }

    /// Rebuilds an encoder from a saved table.
    pub fn from_parts(spec: HashingEncoderSpec, table: Vec<f64>) -> Result<Self> {
        if table.len() != spec.buckets * spec.hidden_dim {
            return Err(Error::Checkpoint(format!(
                "encoder table has {} values, expected {}",
                table.len(),
                spec.buckets * spec.hidden_dim
            )));
        }
        Ok(HashingEncoder { spec, table })
    }

    pub fn spec(&self) -> &HashingEncoderSpec {
        &self.spec
    }

    fn bucket(&self, token: &str) -> usize {
        (fnv1a(token) % self.spec.buckets as u64) as usize
    }

    fn attention(&self, l: usize) -> Array3<f64> {
        let mut a = Array3::zeros((self.spec.num_heads, l, l));
        for (k, mut head) in a.outer_iter_mut().enumerate() {
            let scale = f64::powi(2.0, k as i32);
            for i in 0..l {
                let mut z = 0.0;
                for j in 0..l {
                    let w = (-(i.abs_diff(j) as f64) / scale).exp();
                    head[[i, j]] = w;
                    z += w;
                }
                head.row_mut(i).mapv_inplace(|w| w / z);
            }
        }
        a
    }

    fn embeddings(&self, tokens: &[String]) -> Array2<f64> {
        let d = self.spec.hidden_dim;
        let mut x = Array2::zeros((tokens.len(), d));
        for (i, t) in tokens.iter().enumerate() {
            let b = self.bucket(t) * d;
            x.row_mut(i)
                .iter_mut()
                .zip(&self.table[b..b + d])
                .for_each(|(o, v)| *o = *v);
        }
        x
    }

    fn check_len(&self, tokens: &[String]) -> Result<()> {
        if tokens.len() > self.spec.max_length {
            return Err(Error::Encoder(format!(
                "{} tokens exceed capacity {}",
                tokens.len(),
                self.spec.max_length
            )));
        }
        Ok(())
    }
}

impl Encoder for HashingEncoder {
    fn identifier(&self) -> String {
        let s = &self.spec;
        format!(
            "hashing(d={},heads={},max_len={},buckets={},seed={})",
            s.hidden_dim, s.num_heads, s.max_length, s.buckets, s.seed
        )
    }

    fn hidden_dim(&self) -> usize {
        self.spec.hidden_dim
    }

    fn num_heads(&self) -> usize {
        self.spec.num_heads
    }

    fn max_length(&self) -> usize {
        self.spec.max_length
    }

    fn encode(&self, tokens: &[String]) -> Result<Encoding> {
        self.check_len(tokens)?;
        let attention = self.attention(tokens.len());
        let x = self.embeddings(tokens);
        let mean = attention.mean_axis(Axis(0)).expect("at least one head");
        let hidden = (&x + &mean.dot(&x)) * 0.5;
        Ok(Encoding { hidden, attention })
    }
}

impl TrainableEncoder for HashingEncoder {
    fn parameters(&self) -> &[f64] {
        &self.table
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    fn backward(&self, tokens: &[String], grad_hidden: &Array2<f64>, grad: &mut [f64]) -> Result<()> {
        self.check_len(tokens)?;
        let attention = self.attention(tokens.len());
        let mean = attention.mean_axis(Axis(0)).expect("at least one head");
        // dX = (dH + Āᵀ dH) / 2
        let grad_x = (grad_hidden + &mean.t().dot(grad_hidden)) * 0.5;
        let d = self.spec.hidden_dim;
        for (i, t) in tokens.iter().enumerate() {
            let b = self.bucket(t) * d;
            grad[b..b + d]
                .iter_mut()
                .zip(grad_x.row(i))
                .for_each(|(g, v)| *g += v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn encoding_satisfies_contract() {
        let enc = HashingEncoder::new(HashingEncoderSpec::default()).unwrap();
        let e = enc.encode(&toks("* Alice * met * Bob * today .")).unwrap();
        e.check(enc.hidden_dim(), enc.num_heads()).unwrap();
        assert_eq!(e.len(), 9);
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = HashingEncoder::new(HashingEncoderSpec::default()).unwrap();
        let b = HashingEncoder::new(HashingEncoderSpec::default()).unwrap();
        let t = toks("the same input twice");
        assert_eq!(a.encode(&t).unwrap(), b.encode(&t).unwrap());
    }

    #[test]
    fn rejects_over_capacity() {
        let enc = HashingEncoder::new(HashingEncoderSpec { max_length: 3, ..Default::default() }).unwrap();
        assert!(enc.encode(&toks("a b c d")).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = HashingEncoderSpec { hidden_dim: 4, buckets: 16, ..Default::default() };
        let mut enc = HashingEncoder::new(spec).unwrap();
        let t = toks("x y z x w");
        // loss = sum(H ∘ G) for a fixed G
        let g = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
        let loss = |e: &HashingEncoder| (e.encode(&t).unwrap().hidden * &g).sum();
        let mut grad = vec![0.0; enc.parameters().len()];
        enc.backward(&t, &g, &mut grad).unwrap();
        let step = 1e-6;
        for k in 0..enc.parameters().len() {
            let orig = enc.parameters()[k];
            enc.parameters_mut()[k] = orig + step;
            let up = loss(&enc);
            enc.parameters_mut()[k] = orig - step;
            let down = loss(&enc);
            enc.parameters_mut()[k] = orig;
            let fd = (up - down) / (2.0 * step);
            assert!((fd - grad[k]).abs() < 1e-6, "param {k}: fd {fd} vs {}", grad[k]);
        }
    }
}
