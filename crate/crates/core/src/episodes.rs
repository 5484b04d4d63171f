//! Synthetic class banks and episodic task sampling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::meta::MetaConfig;
use crate::numerics::{RngStream, Vector};

/// Where a class's samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClassSource {
    /// Isotropic Gaussian around `mean`.
    Gaussian { mean: Vector, stddev: f64 },
    /// A finite pool of stored samples, drawn without replacement per episode.
    Empirical { samples: Vec<Vector> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBank {
    dim: usize,
    classes: Vec<ClassSource>,
}

impl ClassBank {
    pub fn new(dim: usize, classes: Vec<ClassSource>) -> Result<Self> {
        for (i, c) in classes.iter().enumerate() {
            match c {
                ClassSource::Gaussian { mean, stddev } => {
                    if mean.len() != dim {
                        return Err(contract(format!("class {i}: mean length {} != {dim}", mean.len())));
                    }
                    if !(*stddev > 0.0) {
                        return Err(contract(format!("class {i}: stddev must be positive")));
                    }
                }
                ClassSource::Empirical { samples } => {
                    if samples.is_empty() || samples.iter().any(|s| s.len() != dim) {
                        return Err(contract(format!("class {i}: empty pool or wrong sample length")));
                    }
                }
            }
        }
        Ok(Self { dim, classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassSource] {
        &self.classes
    }

    /// `n` distinct draws from class `class`.
    pub fn draw(&self, class: usize, n: usize, rng: &mut RngStream) -> Result<Vec<Vector>> {
        match &self.classes[class] {
            ClassSource::Gaussian { mean, stddev } => Ok((0..n)
                .map(|_| mean.iter().map(|m| m + stddev * rng.next_gaussian()).collect())
                .collect()),
            ClassSource::Empirical { samples } => {
                if n > samples.len() {
                    return Err(contract(format!(
                        "class {class} holds {} samples, {n} requested",
                        samples.len()
                    )));
                }
                Ok(rng.choose_distinct(samples.len(), n).into_iter().map(|i| samples[i].clone()).collect())
            }
        }
    }

    /// One CSV per class (sorted by file name), rows are samples, no header.
    pub fn from_csv_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
            .collect();
        paths.sort();
        let mut classes = Vec::with_capacity(paths.len());
        let mut dim = None;
        for p in &paths {
            let text = fs::read_to_string(p)?;
            let mut samples = Vec::new();
            for (line_no, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let row = line
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Format(format!("{}:{}: {e}", p.display(), line_no + 1)))?;
                if *dim.get_or_insert(row.len()) != row.len() {
                    return Err(Error::Format(format!("{}:{}: inconsistent row length", p.display(), line_no + 1)));
                }
                samples.push(row);
            }
            classes.push(ClassSource::Empirical { samples });
        }
        if classes.is_empty() {
            return Err(Error::Format(format!("no CSV class files in {}", dir.display())));
        }
        Self::new(dim.unwrap_or(0), classes)
    }
}

/// Class means on a sphere of radius `separation` spanning the first
/// `signal_dims` coordinates; isotropic noise in all `n_in` coordinates.
pub fn make_bank_in_subspace(
    classes: usize,
    n_in: usize,
    signal_dims: usize,
    separation: f64,
    stddev: f64,
    rng: &mut RngStream,
) -> Result<ClassBank> {
    if classes == 0 || n_in == 0 {
        return Err(contract("bank needs at least one class and one dimension"));
    }
    if signal_dims == 0 || signal_dims > n_in {
        return Err(contract(format!("signal dims {signal_dims} outside 1..={n_in}")));
    }
    if !(stddev > 0.0) || !(separation >= 0.0) {
        return Err(contract("stddev must be positive and separation non-negative"));
    }
    let classes = (0..classes)
        .map(|_| {
            let mut dir: Vector = (0..signal_dims).map(|_| rng.next_gaussian()).collect();
            let n = crate::numerics::norm(&dir);
            dir.iter_mut().for_each(|v| *v *= separation / n);
            dir.resize(n_in, 0.0);
            ClassSource::Gaussian { mean: dir, stddev }
        })
        .collect();
    ClassBank::new(n_in, classes)
}

pub fn make_bank(classes: usize, n_in: usize, separation: f64, stddev: f64, rng: &mut RngStream) -> Result<ClassBank> {
    make_bank_in_subspace(classes, n_in, n_in, separation, stddev, rng)
}

/// One few-shot task. Labels are 0-based; `class_map[label]` is the bank class.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<(Vector, usize)>,
    pub query: Vec<(Vector, usize)>,
    pub class_map: Vec<usize>,
}

fn build_episode(
    bank: &ClassBank,
    class_map: Vec<usize>,
    n_shot: usize,
    n_query: usize,
    rng: &mut RngStream,
) -> Result<Episode> {
    let mut support = Vec::with_capacity(class_map.len() * n_shot);
    let mut query = Vec::with_capacity(class_map.len() * n_query);
    for (label, &class) in class_map.iter().enumerate() {
        let mut draws = bank.draw(class, n_shot + n_query, rng)?.into_iter();
        support.extend(draws.by_ref().take(n_shot).map(|x| (x, label)));
        query.extend(draws.map(|x| (x, label)));
    }
    Ok(Episode { support, query, class_map })
}

/// Mutually exclusive task: `N_way` distinct classes in uniformly random label order.
pub fn sample_episode(bank: &ClassBank, config: &MetaConfig, rng: &mut RngStream) -> Result<Episode> {
    if bank.len() < config.n_way {
        return Err(contract(format!("bank has {} classes, {}-way tasks need more", bank.len(), config.n_way)));
    }
    let class_map = rng.choose_distinct(bank.len(), config.n_way);
    build_episode(bank, class_map, config.n_shot, config.n_query, rng)
}

/// Non-mutually-exclusive task: label `t` always draws from bank classes
/// `[t·L, (t+1)·L)` (0-based, half-open).
pub fn sample_nme_episode(
    bank: &ClassBank,
    config: &MetaConfig,
    classes_per_label: usize,
    rng: &mut RngStream,
) -> Result<Episode> {
    if classes_per_label == 0 || bank.len() != config.n_way * classes_per_label {
        return Err(contract(format!(
            "non-mutually-exclusive sampling needs exactly {}·{} classes, bank has {}",
            config.n_way,
            classes_per_label,
            bank.len()
        )));
    }
    let class_map = (0..config.n_way).map(|t| t * classes_per_label + rng.below(classes_per_label)).collect();
    build_episode(bank, class_map, config.n_shot, config.n_query, rng)
}

/// A frozen draw of support and query samples for a fixed set of classes.
///
/// `support[i]` and `query[i]` belong to bank class `classes[i]`. Every call
/// to [`OverfitSet::episode`] reuses the same samples with freshly shuffled
/// labels.
#[derive(Debug, Clone, PartialEq)]
pub struct OverfitSet {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<Vector>>,
    pub query: Vec<Vec<Vector>>,
}

impl OverfitSet {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn episode(&self, rng: &mut RngStream) -> Episode {
        let perm = rng.permutation(self.n_way());
        // perm[i] is the label given to fixed class i
        let mut class_map = vec![0; self.n_way()];
        for (i, &label) in perm.iter().enumerate() {
            class_map[label] = self.classes[i];
        }
        let mut support = Vec::new();
        let mut query = Vec::new();
        for label in 0..self.n_way() {
            let i = perm.iter().position(|&l| l == label).expect("permutation covers every label");
            support.extend(self.support[i].iter().map(|x| (x.clone(), label)));
            query.extend(self.query[i].iter().map(|x| (x.clone(), label)));
        }
        Episode { support, query, class_map }
    }
}

pub fn overfit_set(
    bank: &ClassBank,
    n_way: usize,
    n_support: usize,
    n_query: usize,
    rng: &mut RngStream,
) -> Result<OverfitSet> {
    if bank.len() < n_way {
        return Err(contract(format!("bank has {} classes, overfit set needs {n_way}", bank.len())));
    }
    let mut classes = rng.choose_distinct(bank.len(), n_way);
    classes.sort_unstable();
    let mut support = Vec::with_capacity(n_way);
    let mut query = Vec::with_capacity(n_way);
    for &c in &classes {
        let mut draws = bank.draw(c, n_support + n_query, rng)?;
        query.push(draws.split_off(n_support));
        support.push(draws);
    }
    Ok(OverfitSet { classes, support, query })
}

/// Five classes, 20 support and 20 query samples each.
pub fn fixed_overfit_set(bank: &ClassBank, rng: &mut RngStream) -> Result<OverfitSet> {
    overfit_set(bank, 5, 20, 20, rng)
}
