use super::{LabeledFeatures, LinearHead};
use crate::error::{contract, Result};
use crate::numerics::{axpy, softmax_unchecked, Vector};

/// Softmax outputs `g_{s,·,w^{i-1}}` for every support sample at one inner step.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerStepRecord {
    pub probs: Vec<Vector>,
}

/// Result of the inner loop: `w^{N_step}` plus what is needed to replay it.
#[derive(Debug, Clone)]
pub struct AdaptedHead {
    pub head: LinearHead,
    /// Support features the head was adapted on (encoder is frozen, so one set).
    pub support: LabeledFeatures,
    pub eta: f64,
    pub trajectory: Vec<InnerStepRecord>,
}

impl AdaptedHead {
    pub fn n_step(&self) -> usize {
        self.trajectory.len()
    }

    /// `η Σ_p E_s (1_{k=t} − g^{(p-1)}_{s,k}) φ(s)` for channel `k`: the
    /// support-feature imprint accumulated over the trajectory.
    pub fn imprint(&self, k: usize) -> Vector {
        let n_f = self.head.feature_dim();
        let mut acc = vec![0.0; n_f];
        let inv = 1.0 / self.support.len() as f64;
        for step in &self.trajectory {
            for ((f, t), g) in self.support.iter().zip(&step.probs) {
                let coef = (if t == k { 1.0 } else { 0.0 }) - g[k];
                axpy(self.eta * inv * coef, f, &mut acc);
            }
        }
        acc
    }

    /// Rebuilds `w^{N_step}` from `w^0` by summing the recorded imprints.
    pub fn replay(&self, head0: &LinearHead) -> LinearHead {
        let mut w = head0.w.clone();
        for k in 0..head0.n_way() {
            let mut col = head0.column(k);
            axpy(1.0, &self.imprint(k), &mut col);
            w.set_col(k, &col);
        }
        LinearHead { w }
    }
}

/// Probabilities for each support sample and the gradient-ascent step
/// `E_s (1_{k=t} − g_{s,k}) φ(s)` as an `(N_f, N_way)` matrix.
fn support_ascent(head: &LinearHead, support: &LabeledFeatures) -> (Vec<Vector>, crate::numerics::Matrix) {
    let (n_f, n_way) = (head.feature_dim(), head.n_way());
    let inv = 1.0 / support.len() as f64;
    let mut grad = crate::numerics::Matrix::zeros(n_f, n_way);
    let mut probs = Vec::with_capacity(support.len());
    for (f, t) in support.iter() {
        let g = softmax_unchecked(&head.logits_unchecked(f));
        let mut coef: Vector = g.iter().map(|p| -p * inv).collect();
        coef[t] += inv;
        grad.add_outer(1.0, f, &coef);
        probs.push(g);
    }
    (probs, grad)
}

/// One inner-loop step on the head: `w_k ← w_k + η E_s (1_{k=t} − g_{s,k,w}) φ(s)`.
pub fn inner_step(head: &LinearHead, support: &LabeledFeatures, eta: f64) -> Result<LinearHead> {
    support.check(head.feature_dim(), head.n_way(), "support")?;
    let (_, grad) = support_ascent(head, support);
    let mut next = head.clone();
    next.w.add_scaled(eta, &grad);
    Ok(next)
}

/// Runs `n_step` inner steps from `head0`, recording the softmax trajectory.
pub fn adapt(head0: &LinearHead, support: &LabeledFeatures, n_step: usize, eta: f64) -> Result<AdaptedHead> {
    support.check(head0.feature_dim(), head0.n_way(), "support")?;
    if !eta.is_finite() {
        return Err(contract("inner rate must be finite"));
    }
    let mut head = head0.clone();
    let mut trajectory = Vec::with_capacity(n_step);
    for _ in 0..n_step {
        let (probs, grad) = support_ascent(&head, support);
        head.w.add_scaled(eta, &grad);
        trajectory.push(InnerStepRecord { probs });
    }
    Ok(AdaptedHead { head, support: support.clone(), eta, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, RngStream};

    fn lf(rows: &[(&[f64], usize)]) -> LabeledFeatures {
        LabeledFeatures::new(rows.iter().map(|(f, _)| f.to_vec()).collect(), rows.iter().map(|(_, t)| *t).collect())
            .unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn zero_head_single_support() {
        let h = LinearHead::zeros(2, 2);
        let s = lf(&[(&[1.0, 0.0], 0)]);
        let w1 = inner_step(&h, &s, 0.1).unwrap();
        assert!(close(&w1.column(0), &[0.05, 0.0], 1e-15));
        assert!(close(&w1.column(1), &[-0.05, 0.0], 1e-15));
    }

    #[test]
    fn nonzero_head_single_support() {
        // g = softmax([1, 0]) = [0.7310585786300049, 0.2689414213699951]
        let h = LinearHead::from_matrix(Matrix::from_columns(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let s = lf(&[(&[1.0, 0.0], 0)]);
        let w1 = inner_step(&h, &s, 0.1).unwrap();
        assert!(close(&w1.column(0), &[1.0 + 0.1 * 0.268_941_421_369_995_1, 0.0], 1e-15));
        assert!(close(&w1.column(1), &[-0.1 * 0.268_941_421_369_995_1, 0.0], 1e-15));
        assert!((w1.column(0)[0] - 1.026_894_142_136_999_5).abs() < 1e-15);
        assert!((w1.column(1)[0] + 0.026_894_142_136_999_5).abs() < 1e-15);
    }

    #[test]
    fn zero_head_two_supports() {
        let h = LinearHead::zeros(2, 2);
        let s = lf(&[(&[1.0, 0.0], 0), (&[0.0, 1.0], 1)]);
        let w1 = inner_step(&h, &s, 0.1).unwrap();
        assert!(close(&w1.column(0), &[0.025, -0.025], 1e-15));
        assert!(close(&w1.column(1), &[-0.025, 0.025], 1e-15));
    }

    #[test]
    fn empty_support_is_rejected() {
        let h = LinearHead::zeros(2, 2);
        assert!(inner_step(&h, &LabeledFeatures::default(), 0.1).is_err());
        assert!(inner_step(&h, &lf(&[(&[1.0, 0.0], 2)]), 0.1).is_err());
    }

    fn random_support(rng: &mut RngStream, n: usize, n_f: usize, n_way: usize) -> LabeledFeatures {
        let features = (0..n).map(|_| rng.draw_gaussian(n_f, 0.0, 1.0).unwrap()).collect();
        let labels = (0..n).map(|i| i % n_way).collect();
        LabeledFeatures::new(features, labels).unwrap()
    }

    #[test]
    fn one_step_adapt_equals_inner_step() {
        let mut rng = RngStream::new(4);
        let h = crate::meta::init_head(crate::meta::HeadInit::Random(None), 4, 3, &mut rng).unwrap();
        let s = random_support(&mut rng, 6, 4, 3);
        assert_eq!(adapt(&h, &s, 1, 0.3).unwrap().head, inner_step(&h, &s, 0.3).unwrap());
    }

    #[test]
    fn replay_reproduces_multi_step_head() {
        let mut rng = RngStream::new(5);
        let h0 = LinearHead::zeros(4, 3);
        let s = random_support(&mut rng, 6, 4, 3);
        let a = adapt(&h0, &s, 3, 0.5).unwrap();
        assert_eq!(a.n_step(), 3);
        let replayed = a.replay(&h0);
        assert!(replayed.w.max_abs_diff(&a.head.w) < 1e-14);

        // independent replay: recompute each step's softmax from scratch and sum
        let mut w = h0.clone();
        let mut total = Matrix::zeros(4, 3);
        for _ in 0..3 {
            let mut step = Matrix::zeros(4, 3);
            for (f, t) in s.iter() {
                let logits: Vec<f64> = (0..3).map(|k| crate::numerics::dot(&w.column(k), f)).collect();
                let g = crate::numerics::softmax(&logits).unwrap();
                for k in 0..3 {
                    let c = (if k == t { 1.0 } else { 0.0 }) - g[k];
                    for i in 0..4 {
                        step[(i, k)] += 0.5 * c * f[i] / 6.0;
                    }
                }
            }
            w.w.add_scaled(1.0, &step);
            total.add_scaled(1.0, &step);
        }
        assert!(total.max_abs_diff(&a.head.w) < 1e-14);
    }

    #[test]
    fn zero_rate_keeps_head() {
        let mut rng = RngStream::new(6);
        let h = crate::meta::init_head(crate::meta::HeadInit::Random(None), 3, 2, &mut rng).unwrap();
        let s = random_support(&mut rng, 4, 3, 2);
        for n in [1, 2, 5] {
            assert_eq!(adapt(&h, &s, n, 0.0).unwrap().head, h);
        }
    }
}
