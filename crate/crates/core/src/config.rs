//! Experiment configuration: a flat `key = value` text format with
//! `[section]` headers, named presets, and an exact echo of the resolved
//! values.
//!
//! The inner/outer rates, step count, variant and head policy have no
//! defaults and must be spelled out; everything else falls back to the
//! documented desk-scale values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::meta::{HeadInit, MetaConfig, OuterOptimizer, Variant};
use crate::oracle::VerifySettings;

/// Synthetic class banks, or CSV directories that replace them.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSpec {
    pub train_classes: usize,
    pub test_classes: usize,
    pub n_in: usize,
    /// Class means live in the first `signal_dims` input coordinates.
    pub signal_dims: usize,
    /// Norm of every class mean.
    pub separation: f64,
    pub stddev: f64,
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    /// Hidden ReLU widths; empty means a single linear layer.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

/// Where training episodes come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSource {
    /// Mutually exclusive episodes from the training bank.
    Bank,
    /// The fixed overfit set with fresh label shuffles.
    Overfit,
}

impl FromStr for TaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bank" => Ok(TaskSource::Bank),
            "overfit" => Ok(TaskSource::Overfit),
            other => Err(config_err("task_source", format!("expected `bank` or `overfit`, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for TaskSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskSource::Bank => "bank",
            TaskSource::Overfit => "overfit",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub iterations: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Inner steps taken on each meta-test support set.
    pub test_steps: usize,
    /// Which accuracy the `eval` subcommand reports as primary.
    pub zero_head_at_test: bool,
    /// Log the contrast score on the fixed overfit set at each evaluation.
    pub track_contrast: bool,
    pub task_source: TaskSource,
    /// Classes per label for non-mutually-exclusive training.
    pub nme_l: Option<usize>,
    pub seed: u64,
    /// 1 = single-threaded; more enables parallel per-task work.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitSpec {
    pub n_way: usize,
    pub n_support: usize,
    pub n_query: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub meta: MetaConfig,
    pub encoder: EncoderSpec,
    pub bank: BankSpec,
    pub run: RunSpec,
    pub overfit: OverfitSpec,
    pub verify: VerifySettings,
}

pub const PRESET_NAMES: [&str; 4] =
    ["miniimagenet-like-1shot", "miniimagenet-like-5shot", "omniglot-like", "memorization-L12"];

const SYNTHETIC_BANK: &str = "\
[encoder]
hidden = 64
feature_dim = 32

[bank]
train_classes = 64
test_classes = 20
n_in = 64
signal_dims = 8
separation = 2.5
stddev = 1.0
";

/// Source text of a named preset.
pub fn preset_text(name: &str) -> Result<String> {
    let meta = match name {
        "miniimagenet-like-1shot" => {
            "n_way = 5\nn_shot = 1\nn_query = 15\nn_batch = 4\nn_step = 1\neta = 0.01\nrho = 0.001\n"
        }
        "miniimagenet-like-5shot" => {
            "n_way = 5\nn_shot = 5\nn_query = 15\nn_batch = 2\nn_step = 1\neta = 0.01\nrho = 0.001\n"
        }
        "omniglot-like" => "n_way = 5\nn_shot = 1\nn_query = 15\nn_batch = 32\nn_step = 1\neta = 0.4\nrho = 0.001\n",
        "memorization-L12" => {
            "n_way = 5\nn_shot = 1\nn_query = 15\nn_batch = 4\nn_step = 1\neta = 0.01\nrho = 0.001\n"
        }
        other => {
            return Err(config_err("preset", format!("unknown preset `{other}`; known: {}", PRESET_NAMES.join(", "))))
        }
    };
    let mut text = format!("# preset {name}\n[meta]\n{meta}variant = fomaml\nhead_init = random\nouter_optimizer = adam\n\n");
    if name == "memorization-L12" {
        // five labels, twelve classes behind each
        text.push_str(&SYNTHETIC_BANK.replace("train_classes = 64", "train_classes = 60"));
        // trained to the accuracy plateau rather than the generic desk-scale length
        text.push_str("\n[run]\nnme_l = 12\niterations = 5000\n");
    } else {
        text.push_str(SYNTHETIC_BANK);
    }
    Ok(text)
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::parse(&preset_text(name)?)
}

/// `(section, key) → (value, line)` with duplicate detection.
type RawDoc = BTreeMap<(String, String), (String, usize)>;

fn parse_raw(text: &str) -> Result<RawDoc> {
    let mut doc = RawDoc::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Format(format!("line {line_no}: unterminated section header")))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {line_no}: expected `key = value`")))?;
        let key = key.trim().to_string();
        if section.is_empty() {
            return Err(Error::Format(format!("line {line_no}: `{key}` appears before any [section]")));
        }
        let slot = (section.clone(), key);
        if let Some((_, first)) = doc.get(&slot) {
            return Err(config_err(
                format!("{}.{}", slot.0, slot.1),
                format!("set twice (lines {first} and {line_no})"),
            ));
        }
        doc.insert(slot, (value.trim().to_string(), line_no));
    }
    Ok(doc)
}

/// Typed, consuming access to a raw document; leftovers are unknown keys.
struct Fields {
    doc: RawDoc,
}

impl Fields {
    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.doc.remove(&(section.to_string(), key.to_string())).map(|(v, _)| v)
    }

    fn required<T: FromStr>(&mut self, section: &str, key: &str) -> Result<T> {
        let v = self.take(section, key).ok_or_else(|| config_err(key, format!("required in [{section}]")))?;
        parse_value(key, &v)
    }

    fn optional<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T> {
        match self.take(section, key) {
            Some(v) => parse_value(key, &v),
            None => Ok(default),
        }
    }

    fn maybe<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>> {
        self.take(section, key).map(|v| parse_value(key, &v)).transpose()
    }

    fn finish(self) -> Result<()> {
        match self.doc.into_iter().next() {
            None => Ok(()),
            Some(((section, key), (_, line))) => {
                Err(config_err(format!("{section}.{key}"), format!("unknown key (line {line})")))
            }
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| config_err(key, format!("cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_value(key, s)).collect()
}

/// `adam` alone takes its rate from `rho`.
fn parse_optimizer(v: &str, rho: f64) -> Result<OuterOptimizer> {
    if v.trim() == "adam" {
        Ok(OuterOptimizer::Adam { lr: rho })
    } else {
        v.parse()
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields { doc: parse_raw(text)? };
        let rho: f64 = f.required("meta", "rho")?;
        let variant: Variant = f.required("meta", "variant")?;
        let head_init: HeadInit = f.required("meta", "head_init")?;
        let optimizer = f.take("meta", "outer_optimizer").unwrap_or_else(|| "adam".into());
        let meta = MetaConfig {
            n_way: f.required("meta", "n_way")?,
            n_shot: f.required("meta", "n_shot")?,
            n_query: f.required("meta", "n_query")?,
            n_batch: f.required("meta", "n_batch")?,
            n_step: f.required("meta", "n_step")?,
            eta: f.required("meta", "eta")?,
            rho,
            variant,
            head_init,
            outer_optimizer: parse_optimizer(&optimizer, rho)?,
        };
        let hidden = f.take("encoder", "hidden").unwrap_or_default();
        let encoder = EncoderSpec {
            hidden: parse_list("hidden", &hidden)?,
            feature_dim: f.optional("encoder", "feature_dim", 32)?,
        };
        if let Some(init) = f.take("encoder", "init") {
            if init != "fan_in_gaussian" {
                return Err(config_err("init", format!("only `fan_in_gaussian` is available, got `{init}`")));
            }
        }
        let n_in: usize = f.optional("bank", "n_in", 32)?;
        let bank = BankSpec {
            train_classes: f.optional("bank", "train_classes", 64)?,
            test_classes: f.optional("bank", "test_classes", 20)?,
            n_in,
            signal_dims: f.optional("bank", "signal_dims", n_in)?,
            separation: f.optional("bank", "separation", 3.0)?,
            stddev: f.optional("bank", "stddev", 1.0)?,
            train_dir: f.maybe("bank", "train_dir")?,
            test_dir: f.maybe("bank", "test_dir")?,
        };
        let run = RunSpec {
            iterations: f.optional("run", "iterations", 2000)?,
            eval_every: f.optional("run", "eval_every", 100)?,
            eval_episodes: f.optional("run", "eval_episodes", 400)?,
            test_steps: f.optional("run", "test_steps", meta.n_step)?,
            zero_head_at_test: f.optional("run", "zero_head_at_test", true)?,
            track_contrast: f.optional("run", "track_contrast", true)?,
            task_source: f.optional("run", "task_source", TaskSource::Bank)?,
            nme_l: f.maybe("run", "nme_l")?,
            seed: f.optional("run", "seed", 0)?,
            threads: f.optional("run", "threads", 1)?,
        };
        let overfit = OverfitSpec {
            n_way: f.optional("overfit", "n_way", 5)?,
            n_support: f.optional("overfit", "n_support", 20)?,
            n_query: f.optional("overfit", "n_query", 20)?,
        };
        let defaults = VerifySettings::default();
        let verify = VerifySettings {
            trials: f.optional("verify", "trials", defaults.trials)?,
            step: f.optional("verify", "step", defaults.step)?,
            tolerance: f.optional("verify", "tolerance", defaults.tolerance)?,
        };
        f.finish()?;
        let cfg = Self { meta, encoder, bank, run, overfit, verify };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        if self.encoder.feature_dim == 0 || self.encoder.hidden.contains(&0) {
            return Err(config_err("encoder", "layer widths must be positive"));
        }
        let b = &self.bank;
        if b.n_in == 0 {
            return Err(config_err("n_in", "must be positive"));
        }
        if b.signal_dims == 0 || b.signal_dims > b.n_in {
            return Err(config_err("signal_dims", format!("must lie in 1..={}", b.n_in)));
        }
        if !(b.separation >= 0.0 && b.separation.is_finite()) {
            return Err(config_err("separation", "must be finite and non-negative"));
        }
        if !(b.stddev > 0.0 && b.stddev.is_finite()) {
            return Err(config_err("stddev", "must be finite and positive"));
        }
        if b.train_dir.is_none() && b.train_classes < self.meta.n_way {
            return Err(config_err("train_classes", format!("fewer than n_way = {}", self.meta.n_way)));
        }
        if b.test_dir.is_none() && b.test_classes < self.meta.n_way {
            return Err(config_err("test_classes", format!("fewer than n_way = {}", self.meta.n_way)));
        }
        let r = &self.run;
        for (name, v) in [("eval_every", r.eval_every), ("eval_episodes", r.eval_episodes), ("threads", r.threads)] {
            if v == 0 {
                return Err(config_err(name, "must be positive"));
            }
        }
        if r.nme_l == Some(0) {
            return Err(config_err("nme_l", "must be positive"));
        }
        let o = &self.overfit;
        if o.n_way == 0 || o.n_support == 0 || o.n_query == 0 {
            return Err(config_err("overfit", "counts must be positive"));
        }
        if r.task_source == TaskSource::Overfit
            && (o.n_way, o.n_support, o.n_query) != (self.meta.n_way, self.meta.n_shot, self.meta.n_query)
        {
            return Err(config_err(
                "task_source",
                "overfit training needs the overfit set's n_way, n_support and n_query to equal meta n_way, n_shot and n_query",
            ));
        }
        if self.verify.trials == 0 || !(self.verify.step > 0.0) || !(self.verify.tolerance > 0.0) {
            return Err(config_err("verify", "trials, step and tolerance must be positive"));
        }
        Ok(())
    }

    /// Full encoder layer sizes, input first.
    pub fn encoder_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.bank.n_in];
        sizes.extend(&self.encoder.hidden);
        sizes.push(self.encoder.feature_dim);
        sizes
    }

    /// Every resolved value, in a form [`ExperimentConfig::parse`] reads back
    /// to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let b = &self.bank;
        let r = &self.run;
        let mut s = String::new();
        let _ = writeln!(s, "[meta]");
        let _ = writeln!(s, "n_way = {}\nn_shot = {}\nn_query = {}\nn_batch = {}", m.n_way, m.n_shot, m.n_query, m.n_batch);
        let _ = writeln!(s, "n_step = {}\neta = {:?}\nrho = {:?}", m.n_step, m.eta, m.rho);
        let _ = writeln!(s, "variant = {}\nhead_init = {}\nouter_optimizer = {}", m.variant, m.head_init, m.outer_optimizer);
        let hidden: Vec<String> = self.encoder.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "\n[encoder]\ninit = fan_in_gaussian\nhidden = {}", hidden.join(", "));
        let _ = writeln!(s, "feature_dim = {}", self.encoder.feature_dim);
        let _ = writeln!(s, "\n[bank]\ntrain_classes = {}\ntest_classes = {}", b.train_classes, b.test_classes);
        let _ = writeln!(s, "n_in = {}\nsignal_dims = {}", b.n_in, b.signal_dims);
        let _ = writeln!(s, "separation = {:?}\nstddev = {:?}", b.separation, b.stddev);
        for (key, dir) in [("train_dir", &b.train_dir), ("test_dir", &b.test_dir)] {
            if let Some(d) = dir {
                let _ = writeln!(s, "{key} = {}", d.display());
            }
        }
        let _ = writeln!(s, "\n[run]\niterations = {}\neval_every = {}", r.iterations, r.eval_every);
        let _ = writeln!(s, "eval_episodes = {}\ntest_steps = {}", r.eval_episodes, r.test_steps);
        let _ = writeln!(s, "zero_head_at_test = {}\ntrack_contrast = {}", r.zero_head_at_test, r.track_contrast);
        let _ = writeln!(s, "task_source = {}", r.task_source);
        if let Some(l) = r.nme_l {
            let _ = writeln!(s, "nme_l = {l}");
        }
        let _ = writeln!(s, "seed = {}\nthreads = {}", r.seed, r.threads);
        let o = &self.overfit;
        let _ = writeln!(s, "\n[overfit]\nn_way = {}\nn_support = {}\nn_query = {}", o.n_way, o.n_support, o.n_query);
        let v = &self.verify;
        let _ = writeln!(s, "\n[verify]\ntrials = {}\nstep = {:?}\ntolerance = {:?}", v.trials, v.step, v.tolerance);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[meta]\nn_way = 3\nn_shot = 2\nn_query = 4\nn_batch = 2\nn_step = 1\n\
                           eta = 0.5\nrho = 0.01\nvariant = somaml\nhead_init = zeroing_trick\n";

    #[test]
    fn every_preset_parses_and_round_trips() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg, "{name}");
        }
    }

    #[test]
    fn preset_constants() {
        let c = preset("miniimagenet-like-1shot").unwrap();
        assert_eq!((c.meta.eta, c.meta.n_batch, c.meta.n_way, c.meta.n_shot), (0.01, 4, 5, 1));
        assert_eq!(c.meta.outer_optimizer, OuterOptimizer::Adam { lr: 0.001 });
        assert_eq!(c.run.iterations, 2000);
        let c = preset("miniimagenet-like-5shot").unwrap();
        assert_eq!((c.meta.n_shot, c.meta.n_batch), (5, 2));
        let c = preset("omniglot-like").unwrap();
        assert_eq!((c.meta.eta, c.meta.n_batch, c.meta.n_query), (0.4, 32, 15));
        let c = preset("memorization-L12").unwrap();
        assert_eq!((c.run.nme_l, c.run.iterations), (Some(12), 5000));
        assert_eq!(c.bank.train_classes, c.meta.n_way * 12);
        assert!(preset("cifar").is_err());
    }

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.meta.variant, Variant::Somaml);
        assert_eq!(c.meta.outer_optimizer, OuterOptimizer::Adam { lr: 0.01 });
        assert_eq!(c.encoder_sizes(), vec![32, 32]);
        assert_eq!(c.run.test_steps, 1);
        assert_eq!(c.verify, VerifySettings::default());
    }

    #[test]
    fn physics_fields_are_required() {
        for key in ["eta", "rho", "n_step", "variant", "head_init"] {
            let text: String = MINIMAL.lines().filter(|l| !l.starts_with(key)).map(|l| format!("{l}\n")).collect();
            match ExperimentConfig::parse(&text) {
                Err(Error::Config { field, .. }) => assert_eq!(field, key),
                other => panic!("{key}: {other:?}"),
            }
        }
    }

    #[test]
    fn errors_name_the_field() {
        let bad = MINIMAL.replace("eta = 0.5", "eta = fast");
        assert!(matches!(ExperimentConfig::parse(&bad), Err(Error::Config { field, .. }) if field == "eta"));
        let unknown = format!("{MINIMAL}learning_rate = 3\n");
        assert!(matches!(ExperimentConfig::parse(&unknown), Err(Error::Config { field, .. }) if field == "meta.learning_rate"));
        let twice = format!("{MINIMAL}eta = 0.1\n");
        assert!(matches!(ExperimentConfig::parse(&twice), Err(Error::Config { .. })));
        assert!(matches!(ExperimentConfig::parse("eta = 1\n"), Err(Error::Format(_))));
        let multi = MINIMAL.replace("n_step = 1", "n_step = 2");
        assert!(matches!(ExperimentConfig::parse(&multi), Err(Error::Unsupported(_))));
    }

    #[test]
    fn comments_and_linear_encoder() {
        let text = format!("# top\n{MINIMAL}\n[encoder]\nhidden =   # none\nfeature_dim = 4\n[bank]\nn_in = 6\n");
        let c = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(c.encoder_sizes(), vec![6, 4]);
    }
}
