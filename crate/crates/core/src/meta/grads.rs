//! Closed-form outer-loop quantities for the head and the encoder.
//!
//! Every "grad" returned here is an ascent direction (the negative gradient of
//! the query loss), matching the `w'⁰ = w⁰ + ρ·(…)` form of the updates.

use serde::{Deserialize, Serialize};

use super::{AdaptedHead, LabeledFeatures, LinearHead};
use crate::error::{contract, Error, Result};
use crate::numerics::{add, axpy, dot, log_sum_exp, softmax_unchecked, Matrix, Vector};

/// Mean softmax cross-entropy of `query` under `head`.
pub fn query_loss(head: &LinearHead, query: &LabeledFeatures) -> Result<f64> {
    query.check(head.feature_dim(), head.n_way(), "query")?;
    let total: f64 = query
        .iter()
        .map(|(f, u)| {
            let logits = head.logits_unchecked(f);
            log_sum_exp(&logits) - logits[u]
        })
        .sum();
    Ok(total / query.len() as f64)
}

/// Column `k`: `E_q (1_{k=u} − g_{q,k,w^{N_step}}) φ(q)`.
///
/// This is the negative gradient of the query loss with respect to the
/// adapted head; FOMAML applies it to `w⁰` directly.
pub fn fomaml_head_grad(adapted: &AdaptedHead, query: &LabeledFeatures) -> Result<Matrix> {
    let head = &adapted.head;
    query.check(head.feature_dim(), head.n_way(), "query")?;
    let inv = 1.0 / query.len() as f64;
    let mut out = Matrix::zeros(head.feature_dim(), head.n_way());
    for (f, u) in query.iter() {
        let g = softmax_unchecked(&head.logits_unchecked(f));
        let mut coef: Vector = g.iter().map(|p| -p * inv).collect();
        coef[u] += inv;
        out.add_outer(1.0, f, &coef);
    }
    Ok(out)
}

fn require_single_step(adapted: &AdaptedHead) -> Result<()> {
    if adapted.n_step() != 1 {
        return Err(Error::Unsupported(format!(
            "SOMAML closed form is defined for one inner step, trajectory has {}",
            adapted.n_step()
        )));
    }
    Ok(())
}

/// Exact SOMAML ascent direction for `w⁰` after one inner step.
///
/// Column `k`:
/// `[I − η E_s (g_k − g_k²) φφᵀ] a_k + η Σ_{m≠k} [E_s g_m g_k φφᵀ] a_m`,
/// where `g` is evaluated at `w⁰` and `a_m` is column `m` of
/// [`fomaml_head_grad`].
pub fn somaml_head_grad(head0: &LinearHead, adapted: &AdaptedHead, query: &LabeledFeatures) -> Result<Matrix> {
    require_single_step(adapted)?;
    if head0.w.shape() != adapted.head.w.shape() {
        return Err(contract("initial and adapted heads differ in shape"));
    }
    let a = fomaml_head_grad(adapted, query)?;
    let n_way = head0.n_way();
    let support = &adapted.support;
    let probs = &adapted.trajectory[0].probs;
    let scale = adapted.eta / support.len() as f64;

    let mut out = a.clone();
    let a_cols: Vec<Vector> = (0..n_way).map(|m| a.col(m)).collect();
    for (f, g) in support.features.iter().zip(probs) {
        // φ(s)ᵀ a_m for every channel
        let proj: Vector = a_cols.iter().map(|am| dot(f, am)).collect();
        let mut coef = vec![0.0; n_way];
        for k in 0..n_way {
            let mut c = -(g[k] - g[k] * g[k]) * proj[k];
            for m in (0..n_way).filter(|&m| m != k) {
                c += g[m] * g[k] * proj[m];
            }
            coef[k] = scale * c;
        }
        out.add_outer(1.0, f, &coef);
    }
    Ok(out)
}

/// The SOMAML direction split as `[I − ηH_k] a_k` plus the cross-channel
/// sum over all `m` (including `m = k`), with `H_k = E_s g_k φφᵀ`.
#[derive(Debug, Clone)]
pub struct SomamlTerms {
    pub preconditioned: Matrix,
    pub cross_channel: Matrix,
}

impl SomamlTerms {
    pub fn total(&self) -> Matrix {
        let mut t = self.preconditioned.clone();
        t.add_scaled(1.0, &self.cross_channel);
        t
    }
}

/// Builds the two SOMAML terms from explicit `N_f × N_f` weighted second
/// moments. Same value as [`somaml_head_grad`] by a different route; the
/// cross-channel term vanishes when `w⁰ = 0`.
pub fn somaml_terms(head0: &LinearHead, adapted: &AdaptedHead, query: &LabeledFeatures) -> Result<SomamlTerms> {
    require_single_step(adapted)?;
    let a = fomaml_head_grad(adapted, query)?;
    let (n_f, n_way) = (head0.feature_dim(), head0.n_way());
    let support = &adapted.support;
    let probs = &adapted.trajectory[0].probs;
    let inv = 1.0 / support.len() as f64;
    let eta = adapted.eta;

    let mut preconditioned = Matrix::zeros(n_f, n_way);
    let mut cross_channel = Matrix::zeros(n_f, n_way);
    for k in 0..n_way {
        let mut h_k = Matrix::zeros(n_f, n_f);
        for (f, g) in support.features.iter().zip(probs) {
            h_k.add_outer(inv * g[k], f, f);
        }
        let a_k = a.col(k);
        let mut col = a_k.clone();
        axpy(-eta, &h_k.matvec(&a_k), &mut col);
        preconditioned.set_col(k, &col);

        let mut cross = vec![0.0; n_f];
        for m in 0..n_way {
            let mut h_mk = Matrix::zeros(n_f, n_f);
            for (f, g) in support.features.iter().zip(probs) {
                h_mk.add_outer(inv * g[m] * g[k], f, f);
            }
            axpy(eta, &h_mk.matvec(&a.col(m)), &mut cross);
        }
        cross_channel.set_col(k, &cross);
    }
    Ok(SomamlTerms { preconditioned, cross_channel })
}

/// Split of `−∂L_q/∂φ(q)` for one query sample into the part carried by the
/// initial head and the part imprinted from support features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientDecomposition {
    /// `Σ_j (1_{j=u} − g_{q,j}) w⁰_j`
    pub interference: Vector,
    /// `η Σ_j (1_{j=u} − g_{q,j}) Σ_p E_s (1_{j=t} − g^{(p-1)}_{s,j}) φ(s)`
    pub contrastive: Vector,
    /// `Σ_j (1_{j=u} − g_{q,j}) w^{N_step}_j`, computed from the adapted head directly.
    pub total: Vector,
}

impl GradientDecomposition {
    /// Largest componentwise gap between `total` and the sum of the two terms.
    pub fn identity_gap(&self) -> f64 {
        crate::numerics::max_abs_diff(&self.total, &add(&self.interference, &self.contrastive))
    }
}

/// Back-propagated error (descent-direction convention) of one query sample
/// at the adapted head, decomposed into interference and contrastive terms.
pub fn encoder_backprop_error(
    head0: &LinearHead,
    adapted: &AdaptedHead,
    feature: &[f64],
    label: usize,
) -> Result<GradientDecomposition> {
    let head = &adapted.head;
    let (n_f, n_way) = (head.feature_dim(), head.n_way());
    if feature.len() != n_f {
        return Err(contract(format!("query feature length {} != {n_f}", feature.len())));
    }
    if label >= n_way {
        return Err(contract(format!("query label {label} outside 0..{n_way}")));
    }
    if adapted.trajectory.is_empty() && adapted.head != *head0 {
        return Err(contract("adapted head has no trajectory"));
    }
    if head0.w.shape() != head.w.shape() {
        return Err(contract("initial and adapted heads differ in shape"));
    }
    let g = softmax_unchecked(&head.logits_unchecked(feature));
    let mut interference = vec![0.0; n_f];
    let mut contrastive = vec![0.0; n_f];
    let mut total = vec![0.0; n_f];
    for j in 0..n_way {
        let r = (if j == label { 1.0 } else { 0.0 }) - g[j];
        axpy(r, &head0.column(j), &mut interference);
        axpy(r, &adapted.imprint(j), &mut contrastive);
        axpy(r, &head.column(j), &mut total);
    }
    Ok(GradientDecomposition { interference, contrastive, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{adapt, init_head, HeadInit};
    use crate::numerics::{norm, RngStream};

    fn random_set(rng: &mut RngStream, n: usize, n_f: usize, n_way: usize) -> LabeledFeatures {
        let features = (0..n).map(|_| rng.draw_gaussian(n_f, 0.0, 1.0).unwrap()).collect();
        let labels = (0..n).map(|i| i % n_way).collect();
        LabeledFeatures::new(features, labels).unwrap()
    }

    #[test]
    fn fomaml_uniform_case() {
        let h0 = LinearHead::zeros(2, 2);
        let s = LabeledFeatures::new(vec![vec![0.0, 1.0]], vec![1]).unwrap();
        let adapted = adapt(&h0, &s, 1, 0.0).unwrap();
        let q = LabeledFeatures::new(vec![vec![1.0, 0.0]], vec![0]).unwrap();
        let g = fomaml_head_grad(&adapted, &q).unwrap();
        assert_eq!(g.col(0), vec![0.5, 0.0]);
        assert_eq!(g.col(1), vec![-0.5, 0.0]);
        assert!(fomaml_head_grad(&adapted, &LabeledFeatures::default()).is_err());
    }

    #[test]
    fn fomaml_saturates_to_zero() {
        let w = Matrix::from_columns(&[vec![200.0, 0.0], vec![0.0, 200.0]]).unwrap();
        let h0 = LinearHead::from_matrix(w);
        let s = LabeledFeatures::new(vec![vec![1.0, 0.0]], vec![0]).unwrap();
        let adapted = adapt(&h0, &s, 1, 0.0).unwrap();
        let q = LabeledFeatures::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]).unwrap();
        assert!(fomaml_head_grad(&adapted, &q).unwrap().frobenius_norm() < 1e-80);
    }

    #[test]
    fn somaml_rejects_multi_step() {
        let mut rng = RngStream::new(1);
        let s = random_set(&mut rng, 4, 3, 2);
        let q = random_set(&mut rng, 4, 3, 2);
        let h0 = LinearHead::zeros(3, 2);
        let adapted = adapt(&h0, &s, 2, 0.1).unwrap();
        assert!(matches!(somaml_head_grad(&h0, &adapted, &q), Err(Error::Unsupported(_))));
    }

    #[test]
    fn somaml_with_zero_rate_is_fomaml() {
        let mut rng = RngStream::new(2);
        let h0 = init_head(HeadInit::Random(None), 4, 3, &mut rng).unwrap();
        let s = random_set(&mut rng, 6, 4, 3);
        let q = random_set(&mut rng, 6, 4, 3);
        let adapted = adapt(&h0, &s, 1, 0.0).unwrap();
        assert_eq!(somaml_head_grad(&h0, &adapted, &q).unwrap(), fomaml_head_grad(&adapted, &q).unwrap());
    }

    #[test]
    fn both_somaml_routes_agree() {
        let mut rng = RngStream::new(3);
        for _ in 0..10 {
            let h0 = init_head(HeadInit::Random(Some(0.8)), 5, 4, &mut rng).unwrap();
            let s = random_set(&mut rng, 8, 5, 4);
            let q = random_set(&mut rng, 8, 5, 4);
            let adapted = adapt(&h0, &s, 1, 0.3).unwrap();
            let a = somaml_head_grad(&h0, &adapted, &q).unwrap();
            let b = somaml_terms(&h0, &adapted, &q).unwrap().total();
            assert!(a.max_abs_diff(&b) < 1e-13);
        }
    }

    #[test]
    fn cross_channel_vanishes_at_zero_head() {
        let mut rng = RngStream::new(4);
        for _ in 0..20 {
            let h0 = LinearHead::zeros(4, 5);
            let s = random_set(&mut rng, 5, 4, 5);
            let q = random_set(&mut rng, 10, 4, 5);
            let adapted = adapt(&h0, &s, 1, 0.4).unwrap();
            let terms = somaml_terms(&h0, &adapted, &q).unwrap();
            assert!(terms.cross_channel.frobenius_norm() <= 1e-12);
        }
    }

    #[test]
    fn decomposition_identity_and_zeroing() {
        let mut rng = RngStream::new(5);
        let s = random_set(&mut rng, 6, 4, 3);
        let q = rng.draw_gaussian(4, 0.0, 1.0).unwrap();
        for h0 in [LinearHead::zeros(4, 3), init_head(HeadInit::Random(None), 4, 3, &mut rng).unwrap()] {
            let adapted = adapt(&h0, &s, 3, 0.2).unwrap();
            let d = encoder_backprop_error(&h0, &adapted, &q, 1).unwrap();
            assert!(d.identity_gap() <= 1e-12);
            if h0.is_zero() {
                assert!(d.interference.iter().all(|v| *v == 0.0));
            } else {
                assert!(norm(&d.interference) > 0.0);
            }
        }
        let adapted = adapt(&LinearHead::zeros(4, 3), &s, 1, 0.0).unwrap();
        let d = encoder_backprop_error(&LinearHead::zeros(4, 3), &adapted, &q, 0).unwrap();
        assert!(d.contrastive.iter().all(|v| *v == 0.0));
        assert!(encoder_backprop_error(&LinearHead::zeros(4, 3), &adapted, &q, 3).is_err());
    }

    #[test]
    fn uniform_query_loss_is_log_n_way() {
        let mut rng = RngStream::new(6);
        let q = random_set(&mut rng, 10, 3, 5);
        let loss = query_loss(&LinearHead::zeros(3, 5), &q).unwrap();
        assert!((loss - 5f64.ln()).abs() <= 1e-12);
        assert!((loss - 1.609_437_912_434_100_3).abs() <= 1e-12);
    }
}
