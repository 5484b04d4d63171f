//! Experiment drivers behind the CLI: training, memorization, evaluation,
//! analysis and gradient verification.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    contrast_score, evaluate, overfit_groups, preconditioner_report, similarity_heatmap, EvalResult,
    SimilarityHeatmap, SpectralReport,
};
use crate::config::{ExperimentConfig, TaskSource};
use crate::episodes::{
    make_bank_in_subspace, overfit_set, sample_episode, sample_nme_episode, ClassBank, Episode, OverfitSet,
};
use crate::error::{config_err, Error, Result};
use crate::io::{load_model_for, save_model, write_json, MetricsRow, MetricsWriter};
use crate::meta::{batch_gradient, outer_update, LabeledFeatures, MetaModel};
use crate::numerics::RngStream;
use crate::oracle::{closed_form_head_grad, verify_encoder_grad, verify_head_grads_with, HeadGradFn, VerificationReport};

// Independent random streams derived from the run seed.
const STREAM_TRAIN_BANK: u64 = 0;
const STREAM_TEST_BANK: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_TASKS: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_OVERFIT: u64 = 5;
const STREAM_PROBE: u64 = 6;
const STREAM_VERIFY: u64 = 7;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.txt";
pub const LAST_GOOD_FILE: &str = "model.last_good.txt";
pub const CONFIG_ECHO_FILE: &str = "config.resolved.txt";
pub const HEATMAP_FILE: &str = "heatmap.json";
pub const SPECTRAL_FILE: &str = "spectral.json";
pub const VERIFY_FILE: &str = "verify.json";

/// How training tasks are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSampler {
    /// Mutually exclusive episodes from the training bank.
    Bank,
    /// The fixed overfit set, labels reshuffled per task.
    Overfit,
    /// Label `t` fixed to a block of `L` training classes.
    NonMutuallyExclusive(usize),
}

/// Banks, the fixed overfit set and the frozen meta-test episodes for one
/// configuration and seed.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub train_bank: ClassBank,
    pub test_bank: ClassBank,
    pub overfit: OverfitSet,
    pub eval_episodes: Vec<Episode>,
    pool: Option<rayon::ThreadPool>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(config.run.seed);
        let b = &config.bank;
        let bank = |dir: &Option<PathBuf>, classes: usize, stream: u64| match dir {
            Some(d) => ClassBank::from_csv_dir(d),
            None => {
                make_bank_in_subspace(classes, b.n_in, b.signal_dims, b.separation, b.stddev, &mut root.split(stream))
            }
        };
        let train_bank = bank(&b.train_dir, b.train_classes, STREAM_TRAIN_BANK)?;
        let test_bank = bank(&b.test_dir, b.test_classes, STREAM_TEST_BANK)?;
        for (name, bk) in [("train_dir", &train_bank), ("test_dir", &test_bank)] {
            if bk.dim() != b.n_in {
                return Err(config_err(name, format!("samples have {} values, n_in is {}", bk.dim(), b.n_in)));
            }
        }
        let o = &config.overfit;
        let overfit = overfit_set(&train_bank, o.n_way, o.n_support, o.n_query, &mut root.split(STREAM_OVERFIT))?;
        let mut eval_rng = root.split(STREAM_EVAL);
        let eval_episodes = (0..config.run.eval_episodes)
            .map(|_| sample_episode(&test_bank, &config.meta, &mut eval_rng))
            .collect::<Result<Vec<_>>>()?;
        let pool = if config.run.threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(config.run.threads)
                .build()
                .map_err(|e| config_err("threads", e.to_string()))?;
            Some(pool)
        } else {
            None
        };
        Ok(Self { config, train_bank, test_bank, overfit, eval_episodes, pool })
    }

    pub fn pool(&self) -> Option<&rayon::ThreadPool> {
        self.pool.as_ref()
    }

    pub fn init_model(&self) -> Result<MetaModel> {
        let root = RngStream::new(self.config.run.seed);
        MetaModel::init(&self.config.encoder_sizes(), &self.config.meta, &mut root.split(STREAM_INIT))
    }

    /// The sampler implied by the config's `task_source`.
    pub fn default_sampler(&self) -> TaskSampler {
        match self.config.run.task_source {
            TaskSource::Bank => TaskSampler::Bank,
            TaskSource::Overfit => TaskSampler::Overfit,
        }
    }

    pub fn check_sampler(&self, sampler: TaskSampler) -> Result<()> {
        if let TaskSampler::NonMutuallyExclusive(l) = sampler {
            let want = self.config.meta.n_way * l;
            if self.train_bank.len() != want {
                return Err(config_err(
                    "train_classes",
                    format!("memorization with nme_l = {l} needs {want} training classes, bank has {}", self.train_bank.len()),
                ));
            }
        }
        Ok(())
    }

    fn sample_task(&self, sampler: TaskSampler, rng: &mut RngStream) -> Result<Episode> {
        match sampler {
            TaskSampler::Bank => sample_episode(&self.train_bank, &self.config.meta, rng),
            TaskSampler::Overfit => Ok(self.overfit.episode(rng)),
            TaskSampler::NonMutuallyExclusive(l) => sample_nme_episode(&self.train_bank, &self.config.meta, l, rng),
        }
    }

    /// The stream [`Experiment::train`] draws its task batches from.
    pub fn task_rng(&self) -> RngStream {
        RngStream::new(self.config.run.seed).split(STREAM_TASKS)
    }

    /// `n_batch` training tasks.
    pub fn sample_batch(&self, sampler: TaskSampler, rng: &mut RngStream) -> Result<Vec<Episode>> {
        (0..self.config.meta.n_batch).map(|_| self.sample_task(sampler, rng)).collect()
    }

    /// Meta-test accuracy with the head as trained, and with it zeroed first.
    pub fn evaluate_both(&self, model: &MetaModel) -> Result<(EvalResult, EvalResult)> {
        let steps = self.config.run.test_steps;
        let eta = self.config.meta.eta;
        let raw = evaluate(model, &self.eval_episodes, steps, eta, false, self.pool())?;
        let zeroed = evaluate(model, &self.eval_episodes, steps, eta, true, self.pool())?;
        Ok((raw, zeroed))
    }

    pub fn overfit_heatmap(&self, model: &MetaModel) -> Result<SimilarityHeatmap> {
        similarity_heatmap(&overfit_groups(&model.encoder, &self.overfit)?)
    }

    fn metrics_row(&self, model: &MetaModel, iteration: usize, train_query_loss: f64) -> Result<MetricsRow> {
        let (raw, zeroed) = self.evaluate_both(model)?;
        let contrast_score = if self.config.run.track_contrast {
            Some(contrast_score(&self.overfit_heatmap(model)?))
        } else {
            None
        };
        Ok(MetricsRow {
            iteration,
            train_query_loss,
            test_acc_raw: raw.accuracy,
            test_acc_zeroed: zeroed.accuracy,
            contrast_score,
            head_norm: model.head.norm(),
        })
    }

    /// Runs `iterations` outer updates, emitting a row at iteration 0 and at
    /// every `eval_every` boundary (and after the last update). A row's loss
    /// is the mean pre-update query loss since the previous row; the initial
    /// row's loss comes from a probe batch that does not update the model.
    ///
    /// On a non-finite update the model is restored to its last finite state
    /// and the error is returned.
    pub fn train(
        &self,
        model: &mut MetaModel,
        sampler: TaskSampler,
        sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        self.check_sampler(sampler)?;
        let cfg = &self.config;
        let root = RngStream::new(cfg.run.seed);
        let probe = self.sample_batch(sampler, &mut root.split(STREAM_PROBE))?;
        let initial_loss = batch_gradient(model, &probe, &cfg.meta, self.pool())?.mean_query_loss;
        let mut rows = vec![self.metrics_row(model, 0, initial_loss)?];
        sink(&rows[0])?;
        let mut tasks = self.task_rng();
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for it in 1..=cfg.run.iterations {
            let batch = self.sample_batch(sampler, &mut tasks)?;
            let last_good = model.clone();
            match outer_update(model, &batch, &cfg.meta, self.pool()) {
                Ok(loss) => {
                    loss_sum += loss;
                    loss_count += 1;
                }
                Err(e) => {
                    *model = last_good;
                    return Err(e);
                }
            }
            if it % cfg.run.eval_every == 0 || it == cfg.run.iterations {
                let row = self.metrics_row(model, it, loss_sum / loss_count as f64)?;
                sink(&row)?;
                rows.push(row);
                loss_sum = 0.0;
                loss_count = 0;
            }
        }
        Ok(rows)
    }
}

/// Result of a training or memorization run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub model: MetaModel,
    pub metrics_path: PathBuf,
    pub model_path: PathBuf,
}

fn prepare_out(config: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_ECHO_FILE), config.to_text())?;
    Ok(())
}

fn train_to_dir(config: ExperimentConfig, out: &Path, sampler: Option<TaskSampler>) -> Result<TrainOutcome> {
    prepare_out(&config, out)?;
    let exp = Experiment::new(config)?;
    let sampler = sampler.unwrap_or_else(|| exp.default_sampler());
    let mut model = exp.init_model()?;
    let metrics_path = out.join(METRICS_FILE);
    let model_path = out.join(MODEL_FILE);
    let mut writer = MetricsWriter::create(&metrics_path)?;
    match exp.train(&mut model, sampler, &mut |row| writer.write(row)) {
        Ok(rows) => {
            save_model(&model, &model_path)?;
            Ok(TrainOutcome { rows, model, metrics_path, model_path })
        }
        Err(e @ Error::NonFinite(_)) => {
            save_model(&model, &out.join(LAST_GOOD_FILE))?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

/// Outer loop on the configured task source; writes the metrics CSV, the
/// final model and the resolved config into `out`.
pub fn run_train(config: ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    train_to_dir(config, out, None)
}

/// Trains on non-mutually-exclusive tasks (`nme_l` classes per label) and
/// evaluates on ordinary mutually exclusive meta-test episodes.
pub fn run_memorization(config: ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    let l = config.run.nme_l.ok_or_else(|| config_err("nme_l", "required for memorization runs"))?;
    train_to_dir(config, out, Some(TaskSampler::NonMutuallyExclusive(l)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub test_steps: usize,
    pub accuracy_raw: f64,
    pub std_error_raw: f64,
    pub accuracy_zeroed: f64,
    pub std_error_zeroed: f64,
    /// The accuracy selected by `zero_head_at_test`.
    pub accuracy: f64,
}

pub fn run_eval(config: ExperimentConfig, model_path: &Path) -> Result<EvalSummary> {
    let model = load_model_for(model_path, &config.encoder_sizes(), &config.meta)?;
    let exp = Experiment::new(config)?;
    let (raw, zeroed) = exp.evaluate_both(&model)?;
    let accuracy = if exp.config.run.zero_head_at_test { zeroed.accuracy } else { raw.accuracy };
    Ok(EvalSummary {
        episodes: exp.eval_episodes.len(),
        test_steps: exp.config.run.test_steps,
        accuracy_raw: raw.accuracy,
        std_error_raw: raw.std_error(),
        accuracy_zeroed: zeroed.accuracy,
        std_error_zeroed: zeroed.std_error(),
        accuracy,
    })
}

#[derive(Debug, Clone)]
pub struct AnalysisOutcome {
    pub heatmap: SimilarityHeatmap,
    pub contrast_score: f64,
    pub spectra: Vec<SpectralReport>,
}

/// Heatmap over the fixed overfit set and one preconditioner spectrum per
/// channel, computed from the overfit support features at the model's head.
pub fn analyze_model(exp: &Experiment, model: &MetaModel) -> Result<AnalysisOutcome> {
    let heatmap = exp.overfit_heatmap(model)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (class, xs) in exp.overfit.support.iter().enumerate() {
        for x in xs {
            features.push(model.encoder.features(x)?);
            labels.push(class % model.head.n_way());
        }
    }
    let support = LabeledFeatures::new(features, labels)?;
    let spectra = (0..model.head.n_way())
        .map(|k| preconditioner_report(&support, &model.head, k, exp.config.meta.eta))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalysisOutcome { contrast_score: contrast_score(&heatmap), heatmap, spectra })
}

/// Writes the heatmap and spectral reports as JSON into `out`.
pub fn run_analyze(config: ExperimentConfig, model_path: &Path, out: &Path) -> Result<AnalysisOutcome> {
    let model = load_model_for(model_path, &config.encoder_sizes(), &config.meta)?;
    prepare_out(&config, out)?;
    let exp = Experiment::new(config)?;
    let outcome = analyze_model(&exp, &model)?;
    write_json(&outcome.heatmap, &out.join(HEATMAP_FILE))?;
    write_json(&outcome.spectra, &out.join(SPECTRAL_FILE))?;
    Ok(outcome)
}

/// FOMAML, SOMAML and encoder reports with the configured trial count.
pub fn run_verify(config: &ExperimentConfig) -> Result<Vec<VerificationReport>> {
    run_verify_with(config, closed_form_head_grad)
}

/// As [`run_verify`], with the head closed form swapped for `closed_form`.
pub fn run_verify_with(config: &ExperimentConfig, closed_form: HeadGradFn) -> Result<Vec<VerificationReport>> {
    let rng = RngStream::new(config.run.seed).split(STREAM_VERIFY);
    let mut reports = verify_head_grads_with(&config.verify, &rng, closed_form)?;
    reports.push(verify_encoder_grad(&config.verify, &rng)?);
    Ok(reports)
}
