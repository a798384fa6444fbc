//! Mention-to-entity pooling and localized context for an entity pair.

use ndarray::{Array1, Array2, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

fn check_positions(positions: &[usize], len: usize) -> Result<()> {
    if positions.is_empty() {
        return Err(Error::Contract("entity has no marker positions".into()));
    }
    if let Some(p) = positions.iter().find(|&&p| p >= len) {
        return Err(Error::Contract(format!("marker position {p} outside sequence of {len}")));
    }
    Ok(())
}

/// Elementwise log-sum-exp over the hidden rows at `positions`.
pub fn entity_embedding(hidden: ArrayView2<f64>, positions: &[usize]) -> Result<Array1<f64>> {
    check_positions(positions, hidden.nrows())?;
    let d = hidden.ncols();
    let mut out = Array1::zeros(d);
    for k in 0..d {
        let max = positions
            .iter()
            .map(|&p| hidden[[p, k]])
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = positions.iter().map(|&p| (hidden[[p, k]] - max).exp()).sum();
        out[k] = max + s.ln();
    }
    Ok(out)
}

/// Softmax weights of the log-sum-exp pooling: `[mention][dim]`, the
/// derivative of each output dimension with respect to each pooled row.
pub(crate) fn embedding_weights(hidden: ArrayView2<f64>, positions: &[usize], pooled: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((positions.len(), hidden.ncols()), |(m, k)| {
        (hidden[[positions[m], k]] - pooled[k]).exp()
    })
}

/// Mean of the attention rows at `positions`, per head: `heads × l`.
pub fn entity_attention(attention: ArrayView3<f64>, positions: &[usize]) -> Result<Array2<f64>> {
    let (h, l, _) = attention.dim();
    check_positions(positions, l)?;
    let mut out = Array2::zeros((h, l));
    for &p in positions {
        out += &attention.index_axis(Axis(1), p);
    }
    out /= positions.len() as f64;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalContext {
    /// `c = Hᵀ q`.
    pub context: Array1<f64>,
    /// Normalized pair attention `q` over positions.
    pub weights: Array1<f64>,
    /// The two attention maps had no overlap and `q` fell back to uniform.
    pub degenerate: bool,
}

/// `q = Σ_heads A_s ∘ A_o`, normalized to sum to one; `c = Hᵀ q`.
pub fn localized_context(
    hidden: ArrayView2<f64>,
    subject_attention: ArrayView2<f64>,
    object_attention: ArrayView2<f64>,
) -> Result<LocalContext> {
    let l = hidden.nrows();
    if subject_attention.dim() != object_attention.dim() || subject_attention.ncols() != l {
        return Err(Error::Contract(format!(
            "attention shapes {:?} / {:?} do not match sequence length {l}",
            subject_attention.dim(),
            object_attention.dim()
        )));
    }
    if l == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    let q = (&subject_attention * &object_attention).sum_axis(Axis(0));
    let total = q.sum();
    let (weights, degenerate) = if total > 0.0 && total.is_finite() {
        (q / total, false)
    } else {
        (Array1::from_elem(l, 1.0 / l as f64), true)
    };
    Ok(LocalContext {
        context: hidden.t().dot(&weights),
        weights,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    #[test]
    fn single_mention_is_identity() {
        let h = array![[1.0, -2.0], [0.5, 3.0]];
        assert_eq!(entity_embedding(h.view(), &[1]).unwrap(), array![0.5, 3.0]);
    }

    #[test]
    fn duplicated_embedding_adds_ln2() {
        let h = array![[1.0, -2.0], [1.0, -2.0]];
        let e = entity_embedding(h.view(), &[0, 1]).unwrap();
        assert!((e[0] - (1.0 + 2f64.ln())).abs() < 1e-15);
        assert!((e[1] - (-2.0 + 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn large_values_do_not_overflow() {
        let h = array![[1000.0], [1000.0]];
        let e = entity_embedding(h.view(), &[0, 1]).unwrap();
        assert!((e[0] - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn empty_positions_are_a_contract_violation() {
        let h = array![[1.0]];
        assert!(matches!(entity_embedding(h.view(), &[]), Err(Error::Contract(_))));
        let a = Array3::<f64>::zeros((1, 1, 1));
        assert!(matches!(entity_attention(a.view(), &[]), Err(Error::Contract(_))));
        assert!(entity_attention(a.view(), &[3]).is_err());
    }

    #[test]
    fn attention_mean_of_two_rows() {
        let mut a = Array3::zeros((1, 3, 3));
        a[[0, 0, 0]] = 1.0;
        a[[0, 2, 1]] = 0.5;
        a[[0, 2, 2]] = 0.5;
        let m = entity_attention(a.view(), &[0, 2]).unwrap();
        assert_eq!(m, array![[0.5, 0.25, 0.25]]);
        let single = entity_attention(a.view(), &[2]).unwrap();
        assert_eq!(single, array![[0.0, 0.5, 0.5]]);
    }

    #[test]
    fn one_hot_attention_selects_row() {
        let h = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let a = array![[0.0, 1.0, 0.0]];
        let c = localized_context(h.view(), a.view(), a.view()).unwrap();
        assert!(!c.degenerate);
        assert_eq!(c.context, array![3.0, 4.0]);
    }

    #[test]
    fn disjoint_attention_falls_back_to_mean() {
        let h = array![[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]];
        let s = array![[1.0, 0.0, 0.0]];
        let o = array![[0.0, 0.0, 1.0]];
        let c = localized_context(h.view(), s.view(), o.view()).unwrap();
        assert!(c.degenerate);
        assert!((c.context[0] - 3.0).abs() < 1e-12);
        assert!((c.context[1] - 5.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn logsumexp_is_order_free_and_above_max(
            rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 1..6)
        ) {
            let h = Array2::from_shape_fn((rows.len(), 3), |(i, j)| rows[i][j]);
            let pos: Vec<usize> = (0..rows.len()).collect();
            let rev: Vec<usize> = pos.iter().rev().copied().collect();
            let a = entity_embedding(h.view(), &pos).unwrap();
            let b = entity_embedding(h.view(), &rev).unwrap();
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() < 1e-12);
                let max = rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(a[k] >= max);
            }
        }

        #[test]
        fn context_is_in_convex_hull(
            vals in prop::collection::vec(-5.0f64..5.0, 12),
            att in prop::collection::vec(0.0f64..1.0, 12),
        ) {
            let h = Array2::from_shape_fn((6, 2), |(i, j)| vals[i * 2 + j]);
            let s = Array2::from_shape_fn((2, 6), |(k, i)| att[k * 6 + i]);
            let o = Array2::from_shape_fn((2, 6), |(k, i)| att[11 - (k * 6 + i)]);
            let c = localized_context(h.view(), s.view(), o.view()).unwrap();
            prop_assert!((c.weights.sum() - 1.0).abs() < 1e-12);
            prop_assert!(c.weights.iter().all(|&w| w >= 0.0));
            for j in 0..2 {
                let col = h.column(j);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c.context[j] >= lo - 1e-12 && c.context[j] <= hi + 1e-12);
            }
        }
    }
}
