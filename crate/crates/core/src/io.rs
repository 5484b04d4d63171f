//! On-disk artifacts: the text model file, the metrics CSV and JSON reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::encoder::{EncoderParams, Layer};
use crate::error::{Error, Result};
use crate::meta::{LinearHead, MetaConfig, MetaModel, OptimizerState};
use crate::numerics::Matrix;

pub const MODEL_VERSION_TAG: &str = "zeromaml-model v1";

pub const METRICS_HEADER: &str = "iteration,train_query_loss,test_acc_raw,test_acc_zeroed,contrast_score,head_norm";

fn write_rows(out: &mut String, m: &Matrix) {
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

/// Version tag, header (layer sizes, `n_way`, `n_f`), then every layer's
/// weight rows and bias followed by the head rows, all as shortest
/// round-trip decimals. Optimizer state is not stored.
pub fn model_to_text(model: &MetaModel) -> String {
    let sizes: Vec<String> = model.encoder.sizes().iter().map(|s| s.to_string()).collect();
    let mut s = format!(
        "{MODEL_VERSION_TAG}\nsizes {}\nn_way {}\nn_f {}\n",
        sizes.join(" "),
        model.head.n_way(),
        model.head.feature_dim()
    );
    for (i, layer) in model.encoder.layers().iter().enumerate() {
        s.push_str(&format!("weight {i} {} {}\n", layer.weight.rows(), layer.weight.cols()));
        write_rows(&mut s, &layer.weight);
        s.push_str(&format!("bias {i} {}\n", layer.bias.len()));
        write_rows(&mut s, &Matrix::from_rows(std::slice::from_ref(&layer.bias)).expect("one row"));
    }
    s.push_str(&format!("head {} {}\n", model.head.feature_dim(), model.head.n_way()));
    write_rows(&mut s, &model.head.w);
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::Format(format!("model file ends before {what}")))
    }

    /// `keyword a b ...` → the numbers after the keyword.
    fn header(&mut self, keyword: &str) -> Result<Vec<usize>> {
        let (n, line) = self.next(keyword)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(keyword) {
            return Err(Error::Format(format!("line {n}: expected `{keyword}`, found `{line}`")));
        }
        parts
            .map(|p| p.parse().map_err(|_| Error::Format(format!("line {n}: bad count `{p}`"))))
            .collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (n, line) = self.next("matrix data")?;
            let row = line
                .split_whitespace()
                .map(|p| p.parse::<f64>().map_err(|_| Error::Format(format!("line {n}: bad number `{p}`"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != cols {
                return Err(Error::Format(format!("line {n}: {} values, expected {cols}", row.len())));
            }
            data.extend(row);
        }
        Matrix::from_vec(rows, cols, data)
    }
}

fn expect_shape(got: &[usize], want: &[usize], what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Format(format!("{what}: header says {got:?}, expected {want:?}")));
    }
    Ok(())
}

pub fn model_from_text(text: &str) -> Result<MetaModel> {
    let mut lines = Lines { inner: text.lines().enumerate() };
    let (_, tag) = lines.next("version tag")?;
    if tag != MODEL_VERSION_TAG {
        return Err(Error::Format(format!("unrecognised model version tag `{tag}`")));
    }
    let sizes = lines.header("sizes")?;
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Format(format!("invalid layer sizes {sizes:?}")));
    }
    let n_way = one(lines.header("n_way")?, "n_way")?;
    let n_f = one(lines.header("n_f")?, "n_f")?;
    if n_f != sizes[sizes.len() - 1] {
        return Err(Error::Format(format!("n_f = {n_f} but the last layer has {} outputs", sizes[sizes.len() - 1])));
    }
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    for (i, pair) in sizes.windows(2).enumerate() {
        expect_shape(&lines.header("weight")?, &[i, pair[1], pair[0]], "weight")?;
        let weight = lines.matrix(pair[1], pair[0])?;
        expect_shape(&lines.header("bias")?, &[i, pair[1]], "bias")?;
        let bias = lines.matrix(1, pair[1])?.into_vec();
        layers.push(Layer { weight, bias });
    }
    expect_shape(&lines.header("head")?, &[n_f, n_way], "head")?;
    let head = LinearHead::from_matrix(lines.matrix(n_f, n_way)?);
    if let Some((n, extra)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Format(format!("line {}: trailing content `{}`", n + 1, extra.trim())));
    }
    let encoder = EncoderParams::new(layers).map_err(|e| Error::Format(e.to_string()))?;
    Ok(MetaModel { encoder, head, optimizer: OptimizerState::Sgd })
}

fn one(v: Vec<usize>, what: &str) -> Result<usize> {
    match v.as_slice() {
        [x] => Ok(*x),
        _ => Err(Error::Format(format!("`{what}` takes exactly one value"))),
    }
}

pub fn save_model(model: &MetaModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_text(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MetaModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read model file {}: {e}", path.display())))?;
    model_from_text(&text)
}

/// Loads a model and checks it against the expected encoder sizes and `n_way`.
pub fn load_model_for(path: &Path, sizes: &[usize], config: &MetaConfig) -> Result<MetaModel> {
    let model = load_model(path)?;
    if model.encoder.sizes() != sizes || model.head.n_way() != config.n_way {
        return Err(Error::Format(format!(
            "model has sizes {:?} and {} ways; config expects {sizes:?} and {}",
            model.encoder.sizes(),
            model.head.n_way(),
            config.n_way
        )));
    }
    Ok(model)
}

/// One evaluation boundary of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub train_query_loss: f64,
    pub test_acc_raw: f64,
    pub test_acc_zeroed: f64,
    /// Absent when contrast tracking is off.
    pub contrast_score: Option<f64>,
    pub head_norm: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let contrast = self.contrast_score.map(|c| format!("{c:?}")).unwrap_or_default();
        format!(
            "{},{:?},{:?},{:?},{},{:?}",
            self.iteration, self.train_query_loss, self.test_acc_raw, self.test_acc_zeroed, contrast, self.head_norm
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Format(format!("metrics row has {} fields: `{line}`", parts.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad metrics value `{s}`")));
        Ok(Self {
            iteration: parts[0].parse().map_err(|_| Error::Format(format!("bad iteration `{}`", parts[0])))?,
            train_query_loss: num(parts[1])?,
            test_acc_raw: num(parts[2])?,
            test_acc_zeroed: num(parts[3])?,
            contrast_score: if parts[4].is_empty() { None } else { Some(num(parts[4])?) },
            head_norm: num(parts[5])?,
        })
    }
}

/// Writes the header on creation and flushes after every row.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{} does not start with the metrics header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::from_csv).collect()
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
