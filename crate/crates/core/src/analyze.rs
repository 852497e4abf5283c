//! Post-hoc analysis: word activations on the prototype map, alignment
//! traces, the log-log throughput/turnaround regression and heatmap export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::embed::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::series::csv_open_error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationMode {
    Signed,
    Absolute,
}

impl std::str::FromStr for ActivationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed" => Ok(ActivationMode::Signed),
            "absolute" => Ok(ActivationMode::Absolute),
            other => Err(Error::InvalidConfig(format!("unknown activation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordActivation {
    pub set: String,
    pub word: String,
    /// Token the word resolved to (its first token when it splits).
    pub token: String,
    pub token_id: usize,
    pub oov: bool,
    pub multi_token: bool,
    /// `(prototype, activation)` pairs, strongest first.
    pub top: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationReport {
    pub mode: ActivationMode,
    pub k: usize,
    pub words: Vec<WordActivation>,
    /// Sorted union of every word's top prototypes.
    pub prototypes: Vec<usize>,
    /// `prototypes.len() × words.len()` activations.
    pub grid: Matrix,
}

impl ActivationReport {
    pub fn row_labels(&self) -> Vec<String> {
        self.prototypes.iter().map(|j| format!("proto_{j}")).collect()
    }

    pub fn col_labels(&self) -> Vec<String> {
        self.words.iter().map(|w| format!("{}:{}", w.set, w.word)).collect()
    }
}

/// Reads word activations off `W_E` (`V* × V`): the activation of word `w` on
/// prototype `j` is `W_E[j, id(w)]`, or its magnitude in absolute mode.
pub fn prototype_activations<S: AsRef<str>>(
    w_e: &Matrix,
    word_sets: &[(&str, &[S])],
    vocab: &Vocabulary,
    k: usize,
    mode: ActivationMode,
) -> Result<ActivationReport> {
    if word_sets.is_empty() || word_sets.iter().any(|(_, ws)| ws.is_empty()) {
        return Err(Error::EmptyInput("word set"));
    }
    if w_e.cols() != vocab.len() {
        return Err(Error::ShapeMismatch {
            op: "prototype_activations",
            left: w_e.shape(),
            right: (1, vocab.len()),
        });
    }
    let k = k.min(w_e.rows());
    let act = |j: usize, id: usize| {
        let v = w_e.get(j, id);
        match mode {
            ActivationMode::Signed => v,
            ActivationMode::Absolute => v.abs(),
        }
    };
    let mut words = Vec::new();
    for (set, ws) in word_sets {
        for w in ws.iter() {
            let w = w.as_ref();
            let toks = tokenize(w);
            let token = toks.first().cloned().unwrap_or_default();
            let id = vocab.id(&token);
            let token_id = id.unwrap_or_else(|| vocab.id_or_unk(&token));
            let mut ranked: Vec<(usize, f64)> = (0..w_e.rows()).map(|j| (j, act(j, token_id))).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(k);
            words.push(WordActivation {
                set: set.to_string(),
                word: w.to_string(),
                token,
                token_id,
                oov: id.is_none(),
                multi_token: toks.len() > 1,
                top: ranked,
            });
        }
    }
    let mut prototypes: Vec<usize> = words.iter().flat_map(|w| w.top.iter().map(|t| t.0)).collect();
    prototypes.sort_unstable();
    prototypes.dedup();
    let mut grid = Matrix::zeros(prototypes.len(), words.len());
    for (c, w) in words.iter().enumerate() {
        for (r, &j) in prototypes.iter().enumerate() {
            grid.set(r, c, act(j, w.token_id));
        }
    }
    Ok(ActivationReport {
        mode,
        k,
        words,
        prototypes,
        grid,
    })
}

/// Per-epoch `P × V*` attention averages.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTrace {
    pub epochs: Vec<usize>,
    pub matrices: Vec<Matrix>,
}

pub const ROW_SUM_TOL: f64 = 1e-6;

/// Wraps training snapshots (one per epoch, epoch numbers from 1) after
/// checking that every row is a probability distribution.
pub fn alignment_trace(snapshots: &[Matrix]) -> Result<AlignmentTrace> {
    if snapshots.is_empty() {
        return Err(Error::EmptyInput("alignment snapshots"));
    }
    for (e, m) in snapshots.iter().enumerate() {
        for r in 0..m.rows() {
            let row = m.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidData(format!(
                    "alignment row {r} of epoch {} is not a distribution (sum {s})",
                    e + 1
                )));
            }
        }
    }
    Ok(AlignmentTrace {
        epochs: (1..=snapshots.len()).collect(),
        matrices: snapshots.to_vec(),
    })
}

impl AlignmentTrace {
    /// Writes `alignment_epoch_NNN.csv` per epoch into `dir`; returns the paths.
    pub fn export(&self, dir: impl AsRef<Path>, svg: bool) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (e, m) in self.epochs.iter().zip(&self.matrices) {
            let rows: Vec<String> = (0..m.rows()).map(|i| format!("patch_{i}")).collect();
            let cols: Vec<String> = (0..m.cols()).map(|j| format!("proto_{j}")).collect();
            let path = dir.join(format!("alignment_epoch_{e:03}.csv"));
            write_heatmap_csv(m, &rows, &cols, &path)?;
            if svg {
                write_heatmap_svg(m, path.with_extension("svg"))?;
            }
            paths.push(path);
        }
        Ok(paths)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub beta: f64,
    pub intercept: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `beta / std_error`; infinite for an exact fit (serialized as null).
    pub z: f64,
    pub p_value: f64,
    pub n: usize,
    /// Pairs left out because either value was not positive.
    pub dropped: usize,
}

const Z_975: f64 = 1.96;

/// Ordinary least squares of `ln(tat)` on `ln(ct)` with a normal-approximation
/// confidence interval and two-sided p-value.
pub fn loglog_regress(ct: &[f64], tat: &[f64]) -> Result<RegressionResult> {
    if ct.len() != tat.len() {
        return Err(Error::ShapeMismatch {
            op: "loglog_regress",
            left: (1, ct.len()),
            right: (1, tat.len()),
        });
    }
    let (x, y): (Vec<f64>, Vec<f64>) = ct
        .iter()
        .zip(tat)
        .filter(|(c, t)| **c > 0.0 && **t > 0.0)
        .map(|(c, t)| (c.ln(), t.ln()))
        .unzip();
    let n = x.len();
    let dropped = ct.len() - n;
    if n < 3 {
        return Err(Error::SeriesTooShort { needed: 3, got: n });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx <= 1e-24 * nf * mx.abs().max(1.0).powi(2) {
        return Err(Error::DegenerateSeries("ln(ct) has zero variance".into()));
    }
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let beta = sxy / sxx;
    let intercept = my - beta * mx;
    let rss: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - beta * a).powi(2)).sum();
    let std_error = (rss / (nf - 2.0) / sxx).sqrt();
    let z = beta / std_error;
    Ok(RegressionResult {
        beta,
        intercept,
        std_error,
        ci_low: beta - Z_975 * std_error,
        ci_high: beta + Z_975 * std_error,
        z,
        p_value: erfc(z.abs() / std::f64::consts::SQRT_2),
        n,
        dropped,
    })
}

impl RegressionResult {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self)?;
        fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }
}

/// CSV heatmap: first row holds column labels, first column row labels.
pub fn write_heatmap_csv(m: &Matrix, row_labels: &[String], col_labels: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if row_labels.len() != m.rows() || col_labels.len() != m.cols() {
        return Err(Error::ShapeMismatch {
            op: "heatmap labels",
            left: m.shape(),
            right: (row_labels.len(), col_labels.len()),
        });
    }
    m.ensure_finite("heatmap")?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let mut header = vec![String::new()];
    header.extend(col_labels.iter().cloned());
    w.write_record(&header)?;
    for (i, label) in row_labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub matrix: Matrix,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

pub fn read_heatmap_csv(path: impl AsRef<Path>) -> Result<Heatmap> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_open_error(path, e))?;
    let mut records = r.records();
    let header = records.next().ok_or(Error::EmptyInput("heatmap csv"))??;
    let col_labels: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut row_labels = Vec::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec?;
        if rec.len() != col_labels.len() + 1 {
            return Err(Error::InvalidData(format!("heatmap row has {} fields", rec.len())));
        }
        row_labels.push(rec[0].to_string());
        for f in rec.iter().skip(1) {
            values.push(
                f.parse::<f64>()
                    .map_err(|_| Error::InvalidData(format!("heatmap value {f:?} is not a number")))?,
            );
        }
    }
    let matrix = Matrix::from_vec(row_labels.len(), col_labels.len(), values)?;
    Ok(Heatmap {
        matrix,
        row_labels,
        col_labels,
    })
}

/// Blue (weak) to red (strong) through white, over the matrix's value range.
fn diverging_color(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let ch = |x: f64| (x * 255.0).round() as u8;
    if t < 0.5 {
        let s = t / 0.5;
        (ch(s), ch(s), 255)
    } else {
        let s = (1.0 - t) / 0.5;
        (255, ch(s), ch(s))
    }
}

const CELL: usize = 12;

pub fn write_heatmap_svg(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    m.ensure_finite("heatmap")?;
    let lo = m.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (m.cols() * CELL, m.rows() * CELL);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let v = m.get(i, j);
            let (r, g, b) = diverging_color((v - lo) / span);
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="#{r:02x}{g:02x}{b:02x}"><title>{v}</title></rect>"##,
                j * CELL,
                i * CELL
            );
        }
    }
    s.push_str("</svg>\n");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes the CSV with default `r{i}` / `c{j}` labels and, when `svg` is
/// given, a vector rendering next to it.
pub fn export_heatmap(m: &Matrix, path: impl AsRef<Path>, svg: Option<&Path>) -> Result<()> {
    let rows: Vec<String> = (0..m.rows()).map(|i| format!("r{i}")).collect();
    let cols: Vec<String> = (0..m.cols()).map(|j| format!("c{j}")).collect();
    write_heatmap_csv(m, &rows, &cols, path)?;
    if let Some(svg) = svg {
        write_heatmap_svg(m, svg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_scale_endpoints() {
        assert_eq!(diverging_color(0.0), (0, 0, 255));
        assert_eq!(diverging_color(0.5), (255, 255, 255));
        assert_eq!(diverging_color(1.0), (255, 0, 0));
    }

    #[test]
    fn constant_ct_is_rejected() {
        let ct = vec![100.0; 10];
        let tat: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!(matches!(loglog_regress(&ct, &tat), Err(Error::DegenerateSeries(_))));
        assert!(loglog_regress(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn non_positive_pairs_are_counted() {
        let ct = [0.0, 10.0, 20.0, 40.0, 80.0];
        let tat = [5.0, 10.0, 20.0, -1.0, 80.0];
        let r = loglog_regress(&ct, &tat).unwrap();
        assert_eq!((r.n, r.dropped), (3, 2));
        assert!((r.beta - 1.0).abs() < 1e-12);
    }
}
