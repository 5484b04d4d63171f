//! Finite-difference certification of the closed-form gradients.
//!
//! Everything here differentiates the composed meta-loss numerically and
//! compares against the closed forms in [`crate::meta`]. The oracle never
//! calls the closed forms to build its reference values.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{init_encoder, EncoderParams};
use crate::episodes::Episode;
use crate::error::{contract, Error, Result};
use crate::meta::{
    adapt, encoder_backprop_error, encoder_meta_grad, fomaml_head_grad, init_head, query_loss, somaml_head_grad,
    somaml_terms, HeadInit, LabeledFeatures, LinearHead, MetaConfig, MetaModel, OuterOptimizer, Variant,
};
use crate::numerics::{norm, relative_error, Matrix, RngStream, Vector};

/// A deterministic scalar function of a flat parameter vector.
pub trait ScalarFieldProbe {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> Result<f64>;
}

/// Adapts a closure into a [`ScalarFieldProbe`].
pub struct FnProbe<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Result<f64>> FnProbe<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> Result<f64>> ScalarFieldProbe for FnProbe<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, x: &[f64]) -> Result<f64> {
        (self.f)(x)
    }
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn fd_gradient(probe: &dyn ScalarFieldProbe, point: &[f64], h: f64) -> Result<Vector> {
    if !(h > 0.0) {
        return Err(contract(format!("finite-difference step must be positive, got {h}")));
    }
    if point.len() != probe.dim() {
        return Err(contract(format!("point has {} coordinates, probe expects {}", point.len(), probe.dim())));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let plus = probe.evaluate(&x)?;
        x[i] = point[i] - h;
        let minus = probe.evaluate(&x)?;
        x[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("probe value at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Mean query cross-entropy after adapting `w0` on the support set.
pub fn meta_loss(w0: &LinearHead, encoder: &EncoderParams, episode: &Episode, config: &MetaConfig) -> Result<f64> {
    let support = features_of(encoder, &episode.support)?;
    let query = features_of(encoder, &episode.query)?;
    let adapted = adapt(w0, &support, config.n_step, config.eta)?;
    query_loss(&adapted.head, &query)
}

fn features_of(encoder: &EncoderParams, samples: &[(Vector, usize)]) -> Result<LabeledFeatures> {
    let f = samples.iter().map(|(x, _)| encoder.features(x)).collect::<Result<Vec<_>>>()?;
    LabeledFeatures::new(f, samples.iter().map(|(_, y)| *y).collect())
}

fn head_with(template: &LinearHead, flat: &[f64]) -> LinearHead {
    let (r, c) = template.w.shape();
    LinearHead::from_matrix(Matrix::from_vec(r, c, flat.to_vec()).expect("flat head has the template's size"))
}

/// Settings shared by the verification routines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifySettings {
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self { trials: 100, step: 1e-5, tolerance: 1e-5 }
    }
}

/// One failing trial, serialized in the config text format for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub trial: usize,
    pub rel_err: f64,
    pub instance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub variant: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub failures: Vec<FailureRecord>,
    /// Additional certified quantities (worst case over trials).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub checks: BTreeMap<String, f64>,
}

impl VerificationReport {
    fn new(variant: &str) -> Self {
        Self { variant: variant.into(), trials: 0, max_rel_err: 0.0, failures: Vec::new(), checks: BTreeMap::new() }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, trial: usize, rel_err: f64, tolerance: f64, instance: impl FnOnce() -> String) {
        self.max_rel_err = self.max_rel_err.max(rel_err);
        if !(rel_err <= tolerance) {
            self.failures.push(FailureRecord { trial, rel_err, instance: instance() });
        }
    }

    fn check_max(&mut self, key: &str, value: f64) {
        let e = self.checks.entry(key.to_string()).or_insert(0.0);
        *e = e.max(value);
    }
}

/// A small random head-gradient instance.
#[derive(Debug, Clone)]
pub struct HeadInstance {
    pub head0: LinearHead,
    pub support: LabeledFeatures,
    pub query: LabeledFeatures,
    pub n_step: usize,
    pub eta: f64,
}

impl HeadInstance {
    pub fn random(rng: &mut RngStream, n_step: usize, zero_head: bool) -> Self {
        let n_f = [2, 4, 8][rng.below(3)];
        let n_way = [2, 3, 5][rng.below(3)];
        let n_s = 1 + rng.below(4);
        let n_q = 1 + rng.below(4);
        let eta = 0.05 + 0.95 * rng.next_f64();
        let head0 = if zero_head {
            LinearHead::zeros(n_f, n_way)
        } else {
            init_head(HeadInit::Random(Some(0.7)), n_f, n_way, rng).expect("valid shape")
        };
        let mut set = |n: usize| {
            let mut features = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..n {
                for label in 0..n_way {
                    features.push(rng.draw_gaussian(n_f, 0.0, 1.0).expect("unit stddev"));
                    labels.push(label);
                }
            }
            LabeledFeatures::new(features, labels).expect("parallel arrays")
        };
        let support = set(n_s);
        let query = set(n_q);
        Self { head0, support, query, n_step, eta }
    }

    pub fn to_config_text(&self, variant: &str, trial: usize) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let _ = writeln!(s, "[instance]\nvariant = {variant}\ntrial = {trial}");
        let _ = writeln!(s, "n_f = {}\nn_way = {}", self.head0.feature_dim(), self.head0.n_way());
        let _ = writeln!(s, "n_step = {}\neta = {:?}", self.n_step, self.eta);
        let _ = writeln!(s, "head0 = {}", list(self.head0.w.as_slice()));
        for (name, set) in [("support", &self.support), ("query", &self.query)] {
            for (i, (f, t)) in set.iter().enumerate() {
                let _ = writeln!(s, "{name}.{i} = {t}; {}", list(f));
            }
        }
        s
    }

    /// FD of the query loss with respect to `w^{N_step}`, adaptation held fixed.
    pub fn fd_at_adapted(&self, adapted_head: &LinearHead, h: f64) -> Result<Vector> {
        let probe = FnProbe::new(adapted_head.w.as_slice().len(), |x: &[f64]| {
            query_loss(&head_with(adapted_head, x), &self.query)
        });
        fd_gradient(&probe, adapted_head.w.as_slice(), h)
    }

    /// FD of the meta-loss with respect to `w⁰`, through the adaptation.
    pub fn fd_through_adaptation(&self, h: f64) -> Result<Vector> {
        let probe = FnProbe::new(self.head0.w.as_slice().len(), |x: &[f64]| {
            let adapted = adapt(&head_with(&self.head0, x), &self.support, self.n_step, self.eta)?;
            query_loss(&adapted.head, &self.query)
        });
        fd_gradient(&probe, self.head0.w.as_slice(), h)
    }
}

/// Closed form under test; swapped out by negative-control fixtures.
pub type HeadGradFn = fn(&HeadInstance, Variant) -> Result<Matrix>;

pub fn closed_form_head_grad(inst: &HeadInstance, variant: Variant) -> Result<Matrix> {
    let adapted = adapt(&inst.head0, &inst.support, inst.n_step, inst.eta)?;
    match variant {
        Variant::Fomaml => fomaml_head_grad(&adapted, &inst.query),
        Variant::Somaml => somaml_head_grad(&inst.head0, &adapted, &inst.query),
    }
}

fn negated(v: &[f64]) -> Vector {
    v.iter().map(|x| -x).collect()
}

/// Certifies FOMAML (`N_step` cycling through 1, 2, 3) and SOMAML (`N_step = 1`,
/// every other trial at `w⁰ = 0`) head directions against central differences.
pub fn verify_head_grads(settings: &VerifySettings, rng: &RngStream) -> Result<Vec<VerificationReport>> {
    verify_head_grads_with(settings, rng, closed_form_head_grad)
}

pub fn verify_head_grads_with(
    settings: &VerifySettings,
    rng: &RngStream,
    closed_form: HeadGradFn,
) -> Result<Vec<VerificationReport>> {
    if settings.trials == 0 {
        return Err(contract("verification needs at least one trial"));
    }
    let mut fomaml = VerificationReport::new("fomaml");
    let mut somaml = VerificationReport::new("somaml");
    let fo_stream = rng.split(0);
    let so_stream = rng.split(1);
    for trial in 0..settings.trials {
        let mut r = fo_stream.split(trial as u64);
        let inst = HeadInstance::random(&mut r, 1 + trial % 3, trial % 4 == 0);
        let adapted = adapt(&inst.head0, &inst.support, inst.n_step, inst.eta)?;
        let fd = inst.fd_at_adapted(&adapted.head, settings.step)?;
        let analytic = closed_form(&inst, Variant::Fomaml)?;
        let err = relative_error(analytic.as_slice(), &negated(&fd));
        fomaml.record(trial, err, settings.tolerance, || inst.to_config_text("fomaml", trial));
        fomaml.trials += 1;

        let mut r = so_stream.split(trial as u64);
        let inst = HeadInstance::random(&mut r, 1, trial % 2 == 0);
        let fd = inst.fd_through_adaptation(settings.step)?;
        let analytic = closed_form(&inst, Variant::Somaml)?;
        let err = relative_error(analytic.as_slice(), &negated(&fd));
        somaml.record(trial, err, settings.tolerance, || inst.to_config_text("somaml", trial));
        somaml.trials += 1;

        // η = 0 collapses the preconditioner: both closed forms must coincide bit for bit
        let frozen = HeadInstance { eta: 0.0, ..inst.clone() };
        let same = closed_form(&frozen, Variant::Somaml)? == closed_form(&frozen, Variant::Fomaml)?;
        somaml.check_max("eta_zero_mismatch", if same { 0.0 } else { 1.0 });

        if inst.head0.is_zero() {
            let adapted = adapt(&inst.head0, &inst.support, 1, inst.eta)?;
            let cross = somaml_terms(&inst.head0, &adapted, &inst.query)?.cross_channel.frobenius_norm();
            somaml.check_max("cross_channel_norm_at_zero_head", cross);
        }
    }
    Ok(vec![fomaml, somaml])
}

/// A small random encoder-gradient instance.
#[derive(Debug, Clone)]
pub struct EncoderInstance {
    pub model: MetaModel,
    pub episode: Episode,
    pub config: MetaConfig,
}

impl EncoderInstance {
    /// `linear` selects a single-layer encoder; otherwise one ReLU hidden
    /// layer, redrawn until every pre-activation is at least `margin` from 0.
    pub fn random(rng: &mut RngStream, n_step: usize, zero_head: bool, eta: f64, linear: bool, margin: f64) -> Self {
        loop {
            let n_in = 2 + rng.below(4);
            let n_f = [2, 4][rng.below(2)];
            let n_way = [2, 3][rng.below(2)];
            let sizes = if linear { vec![n_in, n_f] } else { vec![n_in, 3 + rng.below(4), n_f] };
            let config = MetaConfig {
                n_way,
                n_shot: 1 + rng.below(2),
                n_query: 1 + rng.below(2),
                n_batch: 1,
                n_step,
                eta,
                rho: 0.1,
                variant: Variant::Fomaml,
                head_init: if zero_head { HeadInit::ZeroingTrick } else { HeadInit::Random(Some(0.7)) },
                outer_optimizer: OuterOptimizer::PlainSgd,
            };
            let mut encoder = init_encoder(&sizes, rng).expect("valid sizes");
            for l in encoder.layers_mut() {
                for b in &mut l.bias {
                    *b = 0.2 * rng.next_gaussian();
                }
            }
            let head = init_head(config.head_init, n_f, n_way, rng).expect("valid shape");
            let model = MetaModel::new(encoder, head, &config).expect("consistent shapes");
            let mut draw = |per: usize| -> Vec<(Vector, usize)> {
                (0..per)
                    .flat_map(|_| (0..n_way).collect::<Vec<_>>())
                    .map(|label| (rng.draw_gaussian(n_in, 0.0, 1.0).expect("unit stddev"), label))
                    .collect()
            };
            let support = draw(config.n_shot);
            let query = draw(config.n_query);
            let episode = Episode { support, query, class_map: (0..n_way).collect() };
            let min_margin = episode
                .support
                .iter()
                .chain(&episode.query)
                .map(|(x, _)| {
                    let (_, tape) = model.encoder.forward(x).expect("matching input");
                    model.encoder.kink_margin(&tape)
                })
                .fold(f64::INFINITY, f64::min);
            if linear || min_margin >= margin {
                return Self { model, episode, config };
            }
        }
    }

    pub fn to_config_text(&self, trial: usize) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let sizes: Vec<String> = self.model.encoder.sizes().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "[instance]\nvariant = encoder\ntrial = {trial}");
        let _ = writeln!(s, "sizes = {}\nn_way = {}", sizes.join(", "), self.config.n_way);
        let _ = writeln!(s, "n_step = {}\neta = {:?}", self.config.n_step, self.config.eta);
        let _ = writeln!(s, "encoder = {}", list(&self.model.encoder.to_flat()));
        let _ = writeln!(s, "head0 = {}", list(self.model.head.w.as_slice()));
        for (name, set) in [("support", &self.episode.support), ("query", &self.episode.query)] {
            for (i, (x, t)) in set.iter().enumerate() {
                let _ = writeln!(s, "{name}.{i} = {t}; {}", list(x));
            }
        }
        s
    }

    /// Adapted head from the unperturbed encoder.
    fn adapted_head(&self) -> Result<LinearHead> {
        let support = features_of(&self.model.encoder, &self.episode.support)?;
        Ok(adapt(&self.model.head, &support, self.config.n_step, self.config.eta)?.head)
    }

    /// FD over encoder parameters of the query loss at the adapted head held
    /// fixed; this is the function whose gradient flows through `φ(q)`.
    pub fn fd_query_path(&self, h: f64) -> Result<Vector> {
        let adapted = self.adapted_head()?;
        let mut enc = self.model.encoder.clone();
        let base = enc.to_flat();
        let probe = FnProbe::new(base.len(), |x: &[f64]| {
            let mut e = self.model.encoder.clone();
            e.set_flat(x)?;
            query_loss(&adapted, &features_of(&e, &self.episode.query)?)
        });
        let g = fd_gradient(&probe, &base, h)?;
        enc.set_flat(&base)?;
        Ok(g)
    }

    /// FD over encoder parameters of the full meta-loss, support path included.
    pub fn fd_full(&self, h: f64) -> Result<Vector> {
        let base = self.model.encoder.to_flat();
        let probe = FnProbe::new(base.len(), |x: &[f64]| {
            let mut e = self.model.encoder.clone();
            e.set_flat(x)?;
            meta_loss(&self.model.head, &e, &self.episode, &self.config)
        });
        fd_gradient(&probe, &base, h)
    }
}

/// Certifies the encoder meta-gradient and, on every trial, the
/// decomposition identity, the back-propagated error against FD of the
/// meta-loss in the query feature, the vanishing cross-channel term and the
/// zero interference under the zeroing trick.
pub fn verify_encoder_grad(settings: &VerifySettings, rng: &RngStream) -> Result<VerificationReport> {
    if settings.trials == 0 {
        return Err(contract("verification needs at least one trial"));
    }
    let mut report = VerificationReport::new("encoder");
    let stream = rng.split(2);
    for trial in 0..settings.trials {
        let mut r = stream.split(trial as u64);
        let n_step = 1 + trial % 3;
        let zero_head = trial % 2 == 0;
        let eta = if trial % 10 == 9 { 0.0 } else { 0.05 + 0.95 * r.next_f64() };
        let linear = trial % 3 != 2;
        let inst = EncoderInstance::random(&mut r, n_step, zero_head, eta, linear, 1e-3);

        let analytic = encoder_meta_grad(&inst.model, &inst.episode, &inst.config)?.to_flat();
        let fd = inst.fd_query_path(settings.step)?;
        let err = relative_error(&analytic, &fd);
        report.record(trial, err, settings.tolerance, || inst.to_config_text(trial));
        report.trials += 1;

        let full = inst.fd_full(settings.step)?;
        report.check_max("support_path_share", norm(&crate::numerics::sub(&full, &fd)) / (norm(&full) + 1e-8));

        let head0 = &inst.model.head;
        let support = features_of(&inst.model.encoder, &inst.episode.support)?;
        let adapted = adapt(head0, &support, n_step, eta)?;
        for (x, u) in &inst.episode.query {
            let q = inst.model.encoder.features(x)?;
            let d = encoder_backprop_error(head0, &adapted, &q, *u)?;
            report.check_max("decomposition_gap", d.identity_gap());
            // −∂ℓ_q/∂φ(q) for this query sample through the full meta-loss
            let probe = FnProbe::new(q.len(), |f: &[f64]| {
                let one = LabeledFeatures::new(vec![f.to_vec()], vec![*u])?;
                let adapted = adapt(head0, &support, n_step, eta)?;
                query_loss(&adapted.head, &one)
            });
            let fd_q = fd_gradient(&probe, &q, settings.step)?;
            let e = relative_error(&d.total, &negated(&fd_q));
            report.check_max("backprop_error_rel_err", e);
            if !(e <= settings.tolerance) {
                report.failures.push(FailureRecord { trial, rel_err: e, instance: inst.to_config_text(trial) });
            }
            if zero_head {
                report.check_max("interference_norm_zeroing", norm(&d.interference));
            }
            if eta == 0.0 {
                report.check_max("contrastive_norm_eta_zero", norm(&d.contrastive));
            }
        }
        if zero_head && n_step == 1 {
            let query = features_of(&inst.model.encoder, &inst.episode.query)?;
            let cross = somaml_terms(head0, &adapted, &query)?.cross_channel.frobenius_norm();
            report.check_max("cross_channel_norm_at_zero_head", cross);
        }
    }
    for (key, limit) in [
        ("decomposition_gap", 1e-12),
        ("cross_channel_norm_at_zero_head", 1e-12),
        ("interference_norm_zeroing", 0.0),
        ("contrastive_norm_eta_zero", 0.0),
    ] {
        if let Some(v) = report.checks.get(key) {
            if *v > limit {
                report.failures.push(FailureRecord {
                    trial: usize::MAX,
                    rel_err: *v,
                    instance: format!("[check]\n{key} = {v:?}\nlimit = {limit:?}\n"),
                });
            }
        }
    }
    Ok(report)
}
