//! Proposal-model training: AdamW with per-group learning rates, linear
//! warmup then linear decay, global gradient-norm clipping, and early
//! stopping on development-set binary F1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::RcpParams;
use super::encoder::{Encoder, TrainableEncoder};
use super::model::{document_gradients, prepare_document, score_document};
use crate::corpus::{Document, EntityPair};
use crate::error::{Error, Result};
use crate::eval::{rcp_binary_metrics, BinaryMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStoppingMetric {
    DevBinaryF1,
    DevLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RcpConfig {
    /// Pairs with `P(NA) < na_threshold` are proposed.
    pub na_threshold: f64,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub epochs: usize,
    /// Documents per optimization step.
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub max_grad_norm: f64,
    pub weight_decay: f64,
    pub adam_epsilon: f64,
    /// Hard cap on optimization steps.
    pub max_steps: Option<usize>,
    /// Evaluate every this many steps; `None` evaluates once per epoch.
    pub eval_every: Option<usize>,
    pub early_stopping_metric: EarlyStoppingMetric,
    /// Stop after this many evaluations without improvement.
    pub patience: Option<usize>,
    /// Re-pick the threshold on the dev set after training.
    pub calibrate_threshold: bool,
    pub seed: u64,
}

impl Default for RcpConfig {
    fn default() -> Self {
        RcpConfig {
            na_threshold: 0.5,
            lr_encoder: 3e-5,
            lr_head: 1e-4,
            epochs: 30,
            batch_size: 4,
            warmup_fraction: 0.06,
            max_grad_norm: 1.0,
            weight_decay: 0.01,
            adam_epsilon: 1e-6,
            max_steps: None,
            eval_every: None,
            early_stopping_metric: EarlyStoppingMetric::DevBinaryF1,
            patience: None,
            calibrate_threshold: false,
            seed: 42,
        }
    }
}

impl RcpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.na_threshold > 0.0 && self.na_threshold < 1.0) {
            return bad(format!("na_threshold {} outside (0, 1)", self.na_threshold));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_head", self.lr_head),
            ("max_grad_norm", self.max_grad_norm),
            ("weight_decay", self.weight_decay),
            ("adam_epsilon", self.adam_epsilon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be at least 1".into());
        }
        Ok(())
    }
}

/// Learning-rate multiplier: linear warmup over `warmup` steps, then linear
/// decay to zero at `total`.
pub fn lr_multiplier(step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else if total <= warmup {
        1.0
    } else {
        ((total - step) as f64 / (total - warmup) as f64).max(0.0)
    }
}

/// AdamW with decoupled weight decay over a flat parameter slice.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(len: usize, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *p -= lr * self.weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev: BinaryMetrics,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RcpParams,
    pub na_threshold: f64,
    pub history: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
    pub steps: usize,
}

/// Scores `docs` and thresholds them, in parallel across documents.
pub fn score_corpus<E: Encoder + ?Sized>(
    docs: &[Document],
    encoder: &E,
    params: &RcpParams,
) -> Result<Vec<Vec<EntityPair>>> {
    docs.par_iter()
        .map(|d| score_document(d, encoder, params).map(|(p, _)| p))
        .collect()
}

fn select(scored: &[Vec<EntityPair>], tau: f64) -> Vec<EntityPair> {
    scored
        .iter()
        .flatten()
        .filter(|p| p.na_probability.is_some_and(|v| v < tau))
        .cloned()
        .collect()
}

fn dev_loss(docs: &[Document], scored: &[Vec<EntityPair>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (d, pairs) in docs.iter().zip(scored) {
        let gold = crate::corpus::gold_pairs(d);
        for p in pairs {
            let prob = super::classifier::clamp_probability(p.na_probability.unwrap_or(1.0));
            total -= if gold.contains(&(p.head, p.tail)) { (1.0 - prob).ln() } else { prob.ln() };
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { total / n as f64 }
}

/// Picks the threshold on a 0.05 grid that maximizes binary F1 on `docs`;
/// ties go to the value nearest 0.5.
pub fn calibrate_threshold(docs: &[Document], scored: &[Vec<EntityPair>]) -> f64 {
    let mut best: (f64, f64) = (f64::NEG_INFINITY, 0.5);
    for i in 1..20 {
        let tau = i as f64 * 0.05;
        let f1 = rcp_binary_metrics(&select(scored, tau), docs).f1;
        let better = f1 > best.0 || (f1 == best.0 && (tau - 0.5).abs() < (best.1 - 0.5).abs());
        if better {
            best = (f1, tau);
        }
    }
    best.1
}

struct Snapshot {
    params: RcpParams,
    encoder: Vec<f64>,
    record: EvalRecord,
}

fn improves(metric: EarlyStoppingMetric, new: &EvalRecord, old: &EvalRecord) -> bool {
    match metric {
        EarlyStoppingMetric::DevBinaryF1 => new.dev.f1 > old.dev.f1,
        EarlyStoppingMetric::DevLoss => new.dev_loss < old.dev_loss,
    }
}

/// Trains the proposal head and fine-tunes `encoder`. On return the encoder
/// holds the weights of the best evaluated checkpoint.
pub fn train_rcp<E: TrainableEncoder>(
    train: &[Document],
    dev: &[Document],
    encoder: &mut E,
    config: &RcpConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("empty training corpus".into()));
    }
    let d = encoder.hidden_dim();
    let mut params = RcpParams::init(d, config.seed);
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let mut total = config.epochs * steps_per_epoch;
    if let Some(cap) = config.max_steps {
        total = total.min(cap);
    }
    if total == 0 {
        return Ok(TrainOutcome {
            params,
            na_threshold: config.na_threshold,
            history: vec![],
            best: None,
            steps: 0,
        });
    }
    let warmup = (config.warmup_fraction * total as f64).ceil() as usize;
    let mut opt_head = AdamW::new(params.num_values(), config.adam_epsilon, config.weight_decay);
    let mut opt_enc = AdamW::new(encoder.parameters().len(), config.adam_epsilon, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut stale = 0usize;
    let mut step = 0usize;
    let mut running = (0.0, 0usize);

    'outer: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            if step >= total {
                break 'outer;
            }
            let mut head_grads = RcpParams::zeros(d);
            let mut enc_grads = vec![0.0; encoder.parameters().len()];
            let mut batch_loss = 0.0;
            let mut batch_pairs = 0usize;
            let mut per_doc = Vec::with_capacity(batch.len());
            for &i in batch {
                let prep = prepare_document(&train[i], &*encoder)?;
                let g = document_gradients(&train[i], &prep, &params, 1.0, &mut head_grads)?;
                batch_loss += g.loss;
                batch_pairs += g.pairs;
                per_doc.push((i, prep.marked.tokens, g.grad_hidden));
            }
            if batch_pairs > 0 {
                let scale = 1.0 / batch_pairs as f64;
                let mut flat_head = head_grads.to_flat();
                flat_head.iter_mut().for_each(|g| *g *= scale);
                for (_, tokens, gh) in &per_doc {
                    encoder.backward(tokens, &(gh * scale), &mut enc_grads)?;
                }
                let norm = flat_head
                    .iter()
                    .chain(&enc_grads)
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if !norm.is_finite() {
                    let ids: Vec<&str> = batch.iter().map(|&i| train[i].doc_id.as_str()).collect();
                    return Err(Error::Training(format!(
                        "non-finite gradient norm at step {step} (documents {ids:?})"
                    )));
                }
                if config.max_grad_norm > 0.0 && norm > config.max_grad_norm {
                    let c = config.max_grad_norm / norm;
                    flat_head.iter_mut().chain(enc_grads.iter_mut()).for_each(|g| *g *= c);
                }
                let mult = lr_multiplier(step, warmup, total);
                let mut flat_params = params.to_flat();
                opt_head.step(&mut flat_params, &flat_head, config.lr_head * mult);
                params.assign_flat(&flat_params);
                opt_enc.step(encoder.parameters_mut(), &enc_grads, config.lr_encoder * mult);
                running.0 += batch_loss / batch_pairs as f64;
                running.1 += 1;
            }
            step += 1;

            let end_of_epoch = b + 1 == steps_per_epoch;
            let due = match config.eval_every {
                Some(k) => step.is_multiple_of(k),
                None => end_of_epoch,
            } || step == total;
            if due && !dev.is_empty() {
                let scored = score_corpus(dev, &*encoder, &params)?;
                let record = EvalRecord {
                    epoch,
                    step,
                    train_loss: if running.1 > 0 { running.0 / running.1 as f64 } else { 0.0 },
                    dev_loss: dev_loss(dev, &scored),
                    dev: rcp_binary_metrics(&select(&scored, config.na_threshold), dev),
                };
                running = (0.0, 0);
                history.push(record.clone());
                let better = best
                    .as_ref()
                    .is_none_or(|s| improves(config.early_stopping_metric, &record, &s.record));
                if better {
                    best = Some(Snapshot {
                        params: params.clone(),
                        encoder: encoder.parameters().to_vec(),
                        record,
                    });
                    stale = 0;
                } else {
                    stale += 1;
                    if config.patience.is_some_and(|p| stale >= p) {
                        break 'outer;
                    }
                }
            }
        }
    }

    let best_record = best.as_ref().map(|s| s.record.clone());
    if let Some(s) = best {
        params = s.params;
        encoder.parameters_mut().copy_from_slice(&s.encoder);
    }
    let mut na_threshold = config.na_threshold;
    if config.calibrate_threshold && !dev.is_empty() {
        let scored = score_corpus(dev, &*encoder, &params)?;
        na_threshold = calibrate_threshold(dev, &scored);
    }
    Ok(TrainOutcome {
        params,
        na_threshold,
        history,
        best: best_record,
        steps: step,
    })
}
