use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zeromaml::config::{preset, ExperimentConfig, PRESET_NAMES};
use zeromaml::io::write_json;
use zeromaml::meta::Variant;
use zeromaml::numerics::Matrix;
use zeromaml::oracle::{closed_form_head_grad, HeadInstance};
use zeromaml::runner::{
    run_analyze, run_eval, run_memorization, run_train, run_verify, run_verify_with, TrainOutcome, VERIFY_FILE,
};
use zeromaml::{Error, Result};

#[derive(Parser)]
#[command(name = "zeromaml", version, about = "Linear-head MAML with the zeroing trick: verify, train, evaluate, analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the closed-form gradients against central finite differences.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Trials per variant (overrides the config).
        #[arg(long)]
        trials: Option<usize>,
        /// Perturb the head closed form to exercise the failure path.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Meta-train and log metrics at every evaluation boundary.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Meta-test a saved model with and without zeroing the head first.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Similarity heatmap and preconditioner spectra of a saved model.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train on non-mutually-exclusive tasks, test on mutually exclusive ones.
    Memorization {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config file (`key = value` with `[section]` headers).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset used instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics, models and reports.
    #[arg(long, default_value = "zeromaml-out")]
    out: PathBuf,
    /// Worker threads; 1 keeps runs single-threaded and byte-reproducible.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self, fallback_preset: Option<&str>) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset, fallback_preset) {
            (Some(path), _, _) => ExperimentConfig::parse(&std::fs::read_to_string(path)?)?,
            (None, Some(name), _) => preset(name)?,
            (None, None, Some(name)) => preset(name)?,
            (None, None, None) => {
                return Err(Error::Config {
                    field: "config".into(),
                    message: format!("pass --config PATH or --preset NAME ({})", PRESET_NAMES.join(", ")),
                })
            }
        };
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(threads) = self.threads {
            cfg.run.threads = threads;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn corrupted_closed_form(inst: &HeadInstance, variant: Variant) -> Result<Matrix> {
    let mut g = closed_form_head_grad(inst, variant)?;
    g.as_mut_slice()[0] += 1e-3;
    Ok(g)
}

fn report_training(outcome: &TrainOutcome) {
    if let Some(last) = outcome.rows.last() {
        println!(
            "iteration {}: train_query_loss {:.6}, test_acc_raw {:.4}, test_acc_zeroed {:.4}, head_norm {:.4}",
            last.iteration, last.train_query_loss, last.test_acc_raw, last.test_acc_zeroed, last.head_norm
        );
    }
    println!("metrics: {}", outcome.metrics_path.display());
    println!("model: {}", outcome.model_path.display());
}

fn verify(common: &Common, trials: Option<usize>, inject_fault: bool) -> Result<bool> {
    // the physics settings of a preset do not enter verification
    let mut cfg = common.load(Some("miniimagenet-like-1shot"))?;
    if let Some(t) = trials {
        cfg.verify.trials = t;
    }
    cfg.validate()?;
    let reports = if inject_fault { run_verify_with(&cfg, corrupted_closed_form)? } else { run_verify(&cfg)? };
    std::fs::create_dir_all(&common.out)?;
    write_json(&reports, &common.out.join(VERIFY_FILE))?;
    let mut ok = true;
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!("{status} {}: {} trials, max_rel_err {:.3e}", r.variant, r.trials, r.max_rel_err);
        for (key, value) in &r.checks {
            println!("    {key} = {value:.3e}");
        }
        for f in &r.failures {
            ok = false;
            eprintln!("# failing {} instance (rel_err {:.3e})\n{}", r.variant, f.rel_err, f.instance);
        }
    }
    Ok(ok)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify { common, trials, inject_fault } => verify(&common, trials, inject_fault),
        Command::Train { common } => {
            report_training(&run_train(common.load(None)?, &common.out)?);
            Ok(true)
        }
        Command::Memorization { common } => {
            report_training(&run_memorization(common.load(None)?, &common.out)?);
            Ok(true)
        }
        Command::Eval { common, model } => {
            print_json(&run_eval(common.load(None)?, &model)?)?;
            Ok(true)
        }
        Command::Analyze { common, model } => {
            let outcome = run_analyze(common.load(None)?, &model, &common.out)?;
            println!("contrast_score {:.6}", outcome.contrast_score);
            for s in &outcome.spectra {
                let top = s.eigenvalues.first().copied().unwrap_or(0.0);
                println!("channel {}: lambda_max {:.6}, contraction {:.6}", s.channel, top, 1.0 - s.eta * top);
            }
            println!("reports: {}", common.out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
