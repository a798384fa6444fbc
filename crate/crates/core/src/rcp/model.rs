//! Whole-document scoring and loss over the full candidate space.

use ndarray::{Array1, Array2};

use super::classifier::{
    bce_logit_grad, clamp_probability, pair_backward, pair_forward, RcpParams,
};
use super::encoder::{Encoder, Encoding};
use super::marking::{mark_entities, MarkedDocument};
use super::pooling::{embedding_weights, entity_attention, entity_embedding, localized_context};
use crate::corpus::{candidate_pairs, gold_pairs, Document, EntityPair};
use crate::error::{Error, Result};

/// A document run through the encoder, with per-entity pooled signals.
/// Entities whose markers were all truncated away carry `None`.
pub struct PreparedDocument {
    pub marked: MarkedDocument,
    pub encoding: Encoding,
    pub positions: Vec<Vec<usize>>,
    pub embeddings: Vec<Option<Array1<f64>>>,
    pub attentions: Vec<Option<Array2<f64>>>,
}

pub fn prepare_document<E: Encoder + ?Sized>(doc: &Document, encoder: &E) -> Result<PreparedDocument> {
    let marked = mark_entities(doc, encoder.max_length())?;
    let encoding = encoder.encode(&marked.tokens)?;
    encoding.check(encoder.hidden_dim(), encoder.num_heads())?;
    let positions: Vec<Vec<usize>> = (0..doc.num_entities())
        .map(|e| marked.entity_positions(e))
        .collect();
    let mut embeddings = Vec::with_capacity(positions.len());
    let mut attentions = Vec::with_capacity(positions.len());
    for p in &positions {
        if p.is_empty() {
            embeddings.push(None);
            attentions.push(None);
        } else {
            embeddings.push(Some(entity_embedding(encoding.hidden.view(), p)?));
            attentions.push(Some(entity_attention(encoding.attention.view(), p)?));
        }
    }
    Ok(PreparedDocument {
        marked,
        encoding,
        positions,
        embeddings,
        attentions,
    })
}

/// Per-document scoring diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScoreDiagnostics {
    pub overflow: bool,
    /// Pairs scored `P(NA) = 1` because an entity lost every marker.
    pub truncated_pairs: usize,
    /// Pairs whose attention maps did not overlap.
    pub degenerate_contexts: usize,
}

/// Scores every candidate pair of `doc`; probabilities are clamped to
/// `[1e-7, 1 − 1e-7]`, except truncated pairs which score exactly 1.
pub fn score_document<E: Encoder + ?Sized>(
    doc: &Document,
    encoder: &E,
    params: &RcpParams,
) -> Result<(Vec<EntityPair>, ScoreDiagnostics)> {
    let prep = prepare_document(doc, encoder)?;
    let mut diag = ScoreDiagnostics {
        overflow: prep.marked.overflow,
        ..Default::default()
    };
    let mut pairs = candidate_pairs(doc);
    for pair in &mut pairs {
        let p = match (
            &prep.embeddings[pair.head],
            &prep.embeddings[pair.tail],
            &prep.attentions[pair.head],
            &prep.attentions[pair.tail],
        ) {
            (Some(h_s), Some(h_o), Some(a_s), Some(a_o)) => {
                let ctx = localized_context(prep.encoding.hidden.view(), a_s.view(), a_o.view())?;
                if ctx.degenerate {
                    diag.degenerate_contexts += 1;
                }
                clamp_probability(pair_forward(h_s, h_o, &ctx.context, params).probability)
            }
            _ => {
                diag.truncated_pairs += 1;
                1.0
            }
        };
        pair.na_probability = Some(p);
    }
    Ok((pairs, diag))
}

/// Loss and gradients of one document.
pub struct DocumentGradients {
    pub loss: f64,
    pub pairs: usize,
    pub grad_hidden: Array2<f64>,
}

/// Summed BCE over all scorable pairs of the document. Head gradients
/// (scaled by `scale`) are added into `head_grads`; `grad_hidden` holds the
/// matching dLoss/dH for the encoder.
pub fn document_gradients(
    doc: &Document,
    prep: &PreparedDocument,
    params: &RcpParams,
    scale: f64,
    head_grads: &mut RcpParams,
) -> Result<DocumentGradients> {
    let hidden = prep.encoding.hidden.view();
    let mut grad_hidden = Array2::zeros(hidden.dim());
    let gold = gold_pairs(doc);
    let mut loss = 0.0;
    let mut count = 0;
    let n = doc.num_entities();
    let mut grad_emb: Vec<Array1<f64>> = vec![Array1::zeros(hidden.ncols()); n];
    for s in 0..n {
        for o in 0..n {
            if s == o {
                continue;
            }
            let (Some(h_s), Some(h_o), Some(a_s), Some(a_o)) = (
                &prep.embeddings[s],
                &prep.embeddings[o],
                &prep.attentions[s],
                &prep.attentions[o],
            ) else {
                continue;
            };
            let ctx = localized_context(hidden, a_s.view(), a_o.view())?;
            let fwd = pair_forward(h_s, h_o, &ctx.context, params);
            let is_na = !gold.contains(&(s, o));
            let p = clamp_probability(fwd.probability);
            let l = if is_na { -p.ln() } else { -(1.0 - p).ln() };
            if !l.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss on {} pair ({s}, {o}): logit {}",
                    doc.doc_id, fwd.logit
                )));
            }
            loss += l;
            count += 1;
            let dlogit = bce_logit_grad(fwd.probability, is_na) * scale;
            let g = pair_backward(h_s, h_o, &ctx.context, params, &fwd, dlogit, head_grads);
            grad_emb[s] += &g.h_s;
            grad_emb[o] += &g.h_o;
            // c = Hᵀ q  ⇒  dH[j] += q_j · dc
            for (j, &q) in ctx.weights.iter().enumerate() {
                if q != 0.0 {
                    grad_hidden.row_mut(j).scaled_add(q, &g.context);
                }
            }
        }
    }
    // logsumexp pooling: dH[p] += softmax_p ⊙ dh
    for (e, g) in grad_emb.iter().enumerate() {
        let Some(pooled) = &prep.embeddings[e] else { continue };
        let pos = &prep.positions[e];
        let w = embedding_weights(hidden, pos, pooled);
        for (m, &p) in pos.iter().enumerate() {
            let mut row = grad_hidden.row_mut(p);
            row += &(&w.row(m) * g);
        }
    }
    Ok(DocumentGradients {
        loss,
        pairs: count,
        grad_hidden,
    })
}
