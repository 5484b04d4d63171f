use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    adapt, fomaml_head_grad, init_head, query_loss, somaml_head_grad, HeadInit, LabeledFeatures, LinearHead,
    MetaConfig, OuterOptimizer, Variant,
};
use crate::encoder::{init_encoder, EncoderGradient, EncoderParams, Tape};
use crate::episodes::Episode;
use crate::error::{contract, Error, Result};
use crate::numerics::{Matrix, RngStream, Vector};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

/// Base model `θ = {ϕ, w}` plus outer-optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub encoder: EncoderParams,
    pub head: LinearHead,
    pub optimizer: OptimizerState,
}

impl MetaModel {
    pub fn new(encoder: EncoderParams, head: LinearHead, config: &MetaConfig) -> Result<Self> {
        if head.feature_dim() != encoder.feature_dim() {
            return Err(contract(format!(
                "head expects {} features, encoder produces {}",
                head.feature_dim(),
                encoder.feature_dim()
            )));
        }
        if head.n_way() != config.n_way {
            return Err(contract(format!("head has {} columns, config n_way is {}", head.n_way(), config.n_way)));
        }
        Ok(Self { encoder, head, optimizer: OptimizerState::Sgd })
    }

    /// Encoder from `sizes`, head from the configured policy.
    pub fn init(sizes: &[usize], config: &MetaConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let encoder = init_encoder(sizes, rng)?;
        let head = init_head(config.head_init, encoder.feature_dim(), config.n_way, rng)?;
        Self::new(encoder, head, config)
    }

    pub fn features(&self, samples: &[(Vector, usize)]) -> Result<LabeledFeatures> {
        let features = samples.iter().map(|(x, _)| self.encoder.features(x)).collect::<Result<Vec<_>>>()?;
        LabeledFeatures::new(features, samples.iter().map(|(_, y)| *y).collect())
    }

    fn num_params(&self) -> usize {
        self.encoder.num_params() + self.head.w.as_slice().len()
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.head.w.is_finite()
    }

    /// Applies a descent gradient `(∂L/∂ϕ, −head_ascent)` with the configured optimizer.
    fn apply(&mut self, grad: &BatchGradient, config: &MetaConfig) {
        let n_enc = self.encoder.num_params();
        let mut theta = self.encoder.to_flat();
        theta.extend_from_slice(self.head.w.as_slice());
        let mut g = grad.encoder.to_flat();
        g.extend(grad.head.as_slice().iter().map(|a| -a));

        match config.outer_optimizer {
            OuterOptimizer::PlainSgd => {
                self.optimizer = OptimizerState::Sgd;
                for (p, gi) in theta.iter_mut().zip(&g) {
                    *p -= config.rho * gi;
                }
            }
            OuterOptimizer::Adam { lr } => {
                let n = self.num_params();
                if !matches!(&self.optimizer, OptimizerState::Adam { m, .. } if m.len() == n) {
                    self.optimizer = OptimizerState::Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 };
                }
                let OptimizerState::Adam { m, v, t } = &mut self.optimizer else { unreachable!() };
                *t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for i in 0..n {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        self.encoder.set_flat(&theta[..n_enc]).expect("encoder parameter count is fixed");
        self.head.w.as_mut_slice().copy_from_slice(&theta[n_enc..]);
    }
}

/// Per-task outer-loop quantities.
#[derive(Debug, Clone)]
pub struct TaskGradient {
    /// Ascent direction for `w⁰` (FOMAML or SOMAML closed form).
    pub head: Matrix,
    /// `∂L_q/∂ϕ` through the query features, adapted head held fixed.
    pub encoder: EncoderGradient,
    pub query_loss: f64,
}

/// Task gradients summed over a batch in task order.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub head: Matrix,
    pub encoder: EncoderGradient,
    pub mean_query_loss: f64,
}

fn check_episode(episode: &Episode, config: &MetaConfig) -> Result<()> {
    let (ns, nq) = (config.n_way * config.n_shot, config.n_way * config.n_query);
    if episode.support.len() != ns || episode.query.len() != nq {
        return Err(contract(format!(
            "episode has {}+{} samples, config needs {ns}+{nq}",
            episode.support.len(),
            episode.query.len()
        )));
    }
    Ok(())
}

struct QueryPass {
    features: LabeledFeatures,
    tapes: Vec<Tape>,
}

fn forward_query(encoder: &EncoderParams, query: &[(Vector, usize)]) -> Result<QueryPass> {
    let mut features = Vec::with_capacity(query.len());
    let mut tapes = Vec::with_capacity(query.len());
    for (x, _) in query {
        let (f, tape) = encoder.forward(x)?;
        features.push(f);
        tapes.push(tape);
    }
    let labels = query.iter().map(|(_, y)| *y).collect();
    Ok(QueryPass { features: LabeledFeatures::new(features, labels)?, tapes })
}

/// Averages `encoder.backward(−total / |Q|)` over the query set, where
/// `total = Σ_j (1_{j=u} − g_{q,j}) w^{N_step}_j` is the back-propagated error.
fn encoder_grad_from_query(encoder: &EncoderParams, adapted_head: &LinearHead, pass: &QueryPass) -> Result<EncoderGradient> {
    let inv = 1.0 / pass.features.len() as f64;
    let mut grad = encoder.zeros_like();
    for ((f, u), tape) in pass.features.iter().zip(&pass.tapes) {
        let g = crate::numerics::softmax_unchecked(&adapted_head.logits_unchecked(f));
        let mut r: Vector = g.iter().map(|p| -p).collect();
        r[u] += 1.0;
        let total = adapted_head.w.matvec(&r);
        let upstream: Vector = total.iter().map(|v| -v * inv).collect();
        let (g_enc, _) = encoder.backward(tape, &upstream)?;
        grad.add_scaled(1.0, &g_enc);
    }
    Ok(grad)
}

/// Encoder outer-loop gradient of the mean query loss for one task.
pub fn encoder_meta_grad(model: &MetaModel, episode: &Episode, config: &MetaConfig) -> Result<EncoderGradient> {
    check_episode(episode, config)?;
    let support = model.features(&episode.support)?;
    let adapted = adapt(&model.head, &support, config.n_step, config.eta)?;
    let pass = forward_query(&model.encoder, &episode.query)?;
    encoder_grad_from_query(&model.encoder, &adapted.head, &pass)
}

pub fn task_gradient(model: &MetaModel, episode: &Episode, config: &MetaConfig) -> Result<TaskGradient> {
    check_episode(episode, config)?;
    let support = model.features(&episode.support)?;
    let adapted = adapt(&model.head, &support, config.n_step, config.eta)?;
    let pass = forward_query(&model.encoder, &episode.query)?;
    let head = match config.variant {
        Variant::Fomaml => fomaml_head_grad(&adapted, &pass.features)?,
        Variant::Somaml => somaml_head_grad(&model.head, &adapted, &pass.features)?,
    };
    let encoder = encoder_grad_from_query(&model.encoder, &adapted.head, &pass)?;
    let query_loss = query_loss(&adapted.head, &pass.features)?;
    Ok(TaskGradient { head, encoder, query_loss })
}

/// Sums task gradients over `batch` in ascending task index. With a pool the
/// per-task work runs in parallel; the reduction order is unchanged.
pub fn batch_gradient(
    model: &MetaModel,
    batch: &[Episode],
    config: &MetaConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(contract("empty task batch"));
    }
    let tasks: Vec<TaskGradient> = match pool {
        Some(pool) => pool.install(|| {
            batch.par_iter().map(|e| task_gradient(model, e, config)).collect::<Result<Vec<_>>>()
        })?,
        None => batch.iter().map(|e| task_gradient(model, e, config)).collect::<Result<Vec<_>>>()?,
    };
    let mut head = Matrix::zeros(model.head.feature_dim(), model.head.n_way());
    let mut encoder = model.encoder.zeros_like();
    let mut loss = 0.0;
    for t in &tasks {
        head.add_scaled(1.0, &t.head);
        encoder.add_scaled(1.0, &t.encoder);
        loss += t.query_loss;
    }
    Ok(BatchGradient { head, encoder, mean_query_loss: loss / tasks.len() as f64 })
}

/// One outer iteration: summed task gradients, optimizer step, then the
/// zeroing trick when configured. Returns the mean pre-update query loss.
pub fn outer_update(
    model: &mut MetaModel,
    batch: &[Episode],
    config: &MetaConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<f64> {
    let grad = batch_gradient(model, batch, config, pool)?;
    if !grad.mean_query_loss.is_finite() {
        return Err(Error::NonFinite("query loss".into()));
    }
    model.apply(&grad, config);
    if config.head_init == HeadInit::ZeroingTrick {
        model.head.w.fill(0.0);
    }
    if !model.is_finite() {
        return Err(Error::NonFinite("model parameters after outer update".into()));
    }
    Ok(grad.mean_query_loss)
}
