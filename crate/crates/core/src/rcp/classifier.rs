//! Context-enhanced bilinear classifier scoring `P(NA | subject, object)`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

/// Trainable head parameters. `w_o` is the object-side projection; `w_c`
/// is shared by both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcpParams {
    pub w_s: Array2<f64>,
    pub w_c: Array2<f64>,
    pub w_o: Array2<f64>,
    pub w_bilinear: Array2<f64>,
    pub b: f64,
}

impl RcpParams {
    pub fn zeros(d: usize) -> Self {
        RcpParams {
            w_s: Array2::zeros((d, d)),
            w_c: Array2::zeros((d, d)),
            w_o: Array2::zeros((d, d)),
            w_bilinear: Array2::zeros((d, d)),
            b: 0.0,
        }
    }

    /// Uniform fan-in initialization in `±1/√d`, bias zero.
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let mut m = || Array2::from_shape_fn((d, d), |_| rng.gen_range(-bound..bound));
        RcpParams {
            w_s: m(),
            w_c: m(),
            w_o: m(),
            w_bilinear: m(),
            b: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_s.nrows()
    }

    pub fn num_values(&self) -> usize {
        4 * self.dim() * self.dim() + 1
    }

    fn matrices(&self) -> [&Array2<f64>; 4] {
        [&self.w_s, &self.w_c, &self.w_o, &self.w_bilinear]
    }

    fn matrices_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [&mut self.w_s, &mut self.w_c, &mut self.w_o, &mut self.w_bilinear]
    }

    /// Flattened values: `w_s, w_c, w_o, w_bilinear` row-major, then `b`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for m in self.matrices() {
            out.extend(m.iter().copied());
        }
        out.push(self.b);
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_values());
        let mut it = flat.iter();
        for m in self.matrices_mut() {
            m.iter_mut().for_each(|v| *v = *it.next().expect("sized"));
        }
        self.b = *it.next().expect("sized");
    }

    pub fn check(&self, hidden_dim: usize) -> Result<()> {
        for m in self.matrices() {
            if m.dim() != (hidden_dim, hidden_dim) {
                return Err(Error::Checkpoint(format!(
                    "parameter shape {:?} does not match encoder dimension {hidden_dim}",
                    m.dim()
                )));
            }
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Intermediate values of one pair's forward pass.
#[derive(Debug, Clone)]
pub struct PairForward {
    pub z_s: Array1<f64>,
    pub z_o: Array1<f64>,
    pub logit: f64,
    pub probability: f64,
}

pub fn pair_forward(h_s: &Array1<f64>, h_o: &Array1<f64>, c: &Array1<f64>, params: &RcpParams) -> PairForward {
    let ctx = params.w_c.dot(c);
    let z_s = (params.w_s.dot(h_s) + &ctx).mapv(f64::tanh);
    let z_o = (params.w_o.dot(h_o) + &ctx).mapv(f64::tanh);
    let logit = z_s.dot(&params.w_bilinear.dot(&z_o)) + params.b;
    PairForward {
        probability: sigmoid(logit),
        z_s,
        z_o,
        logit,
    }
}

/// `σ(z_sᵀ W z_o + b)` with `z_· = tanh(W_· h_· + W_c c)`: the probability
/// that the pair expresses no relation.
pub fn pair_probability(h_s: &Array1<f64>, h_o: &Array1<f64>, c: &Array1<f64>, params: &RcpParams) -> f64 {
    pair_forward(h_s, h_o, c, params).probability
}

/// Summed binary cross-entropy, with `P(NA)` as the positive class.
pub fn bce_loss(probs: &[f64], is_na: &[bool]) -> Result<f64> {
    if probs.len() != is_na.len() {
        return Err(Error::Contract(format!(
            "{} probabilities for {} labels",
            probs.len(),
            is_na.len()
        )));
    }
    Ok(probs
        .iter()
        .zip(is_na)
        .map(|(&p, &na)| {
            let p = clamp_probability(p);
            if na {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum())
}

/// dLoss/d(logit) for one pair's binary cross-entropy.
pub fn bce_logit_grad(probability: f64, is_na: bool) -> f64 {
    if probability != clamp_probability(probability) {
        return 0.0;
    }
    probability - if is_na { 1.0 } else { 0.0 }
}

/// Input gradients of one pair, for backpropagation into the encoder.
#[derive(Debug, Clone)]
pub struct PairInputGrads {
    pub h_s: Array1<f64>,
    pub h_o: Array1<f64>,
    pub context: Array1<f64>,
}

/// Accumulates `scale · d(logit)/d(params)` into `grads` and returns the
/// matching input gradients.
pub fn pair_backward(
    h_s: &Array1<f64>,
    h_o: &Array1<f64>,
    c: &Array1<f64>,
    params: &RcpParams,
    fwd: &PairForward,
    scale: f64,
    grads: &mut RcpParams,
) -> PairInputGrads {
    let outer = |a: &Array1<f64>, b: &Array1<f64>| {
        Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
    };
    grads.b += scale;
    grads.w_bilinear.scaled_add(scale, &outer(&fwd.z_s, &fwd.z_o));
    let dz_s = params.w_bilinear.dot(&fwd.z_o) * scale;
    let dz_o = params.w_bilinear.t().dot(&fwd.z_s) * scale;
    let da_s = dz_s * fwd.z_s.mapv(|z| 1.0 - z * z);
    let da_o = dz_o * fwd.z_o.mapv(|z| 1.0 - z * z);
    grads.w_s += &outer(&da_s, h_s);
    grads.w_o += &outer(&da_o, h_o);
    let da_c = &da_s + &da_o;
    grads.w_c += &outer(&da_c, c);
    PairInputGrads {
        h_s: params.w_s.t().dot(&da_s),
        h_o: params.w_o.t().dot(&da_o),
        context: params.w_c.t().dot(&da_c),
    }
}
