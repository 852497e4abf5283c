//! Reference forecasters used to sanity-check the evaluation harness.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{DataBundle, PreparedWindow};
use crate::error::{Error, Result};
use crate::series::Split;
use crate::train::Metrics;

const SEASON: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    SeasonalNaive,
    Mean,
    DlinearStyle,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::SeasonalNaive, BaselineKind::Mean, BaselineKind::DlinearStyle];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::SeasonalNaive => "seasonal_naive",
            BaselineKind::Mean => "mean",
            BaselineKind::DlinearStyle => "dlinear_style",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown baseline {s:?}")))
    }
}

/// A baseline ready to forecast scaled input windows.
#[derive(Clone, Debug)]
pub enum Baseline {
    SeasonalNaive { horizon: usize },
    Mean { horizon: usize },
    /// `(T + 1) × H` coefficients; the last row is the intercept.
    Linear { coef: DMatrix<f64> },
}

/// Repeats the last observed week: `ŷ[t+h] = y[t+h−7k]` with the smallest
/// `k` that lands inside the input.
pub fn seasonal_naive(input: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let t = input.len();
    if t < SEASON {
        return Err(Error::SeriesTooShort { needed: SEASON, got: t });
    }
    Ok((1..=horizon)
        .map(|h| {
            let back = SEASON * h.div_ceil(SEASON);
            input[t - 1 + h - back]
        })
        .collect())
}

pub fn mean_forecast(input: &[f64], horizon: usize) -> Result<Vec<f64>> {
    if input.is_empty() {
        return Err(Error::EmptyInput("mean baseline input"));
    }
    let m = input.iter().sum::<f64>() / input.len() as f64;
    Ok(vec![m; horizon])
}

fn scaled_input(bundle: &DataBundle, w: &PreparedWindow) -> Vec<f64> {
    bundle.scaler.apply(&w.window.input)
}

/// Least-squares fit of one affine map per horizon step on the training split.
pub fn fit_linear(bundle: &DataBundle) -> Result<DMatrix<f64>> {
    let train = &bundle.train;
    if train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let t = bundle.spec.input_len;
    let h = bundle.spec.horizon;
    let x = DMatrix::from_fn(train.len(), t + 1, |i, j| {
        if j == t {
            1.0
        } else {
            bundle.scaler.apply_one(train[i].window.input[j])
        }
    });
    let y = DMatrix::from_fn(train.len(), h, |i, j| train[i].target_scaled[j]);
    let svd = x.svd(true, true);
    let coef = svd.solve(&y, 1e-12).map_err(|e| Error::NonFinite(format!("least squares: {e}")))?;
    if coef.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least-squares coefficients".into()));
    }
    Ok(coef)
}

impl Baseline {
    pub fn fit(kind: BaselineKind, bundle: &DataBundle) -> Result<Self> {
        let horizon = bundle.spec.horizon;
        Ok(match kind {
            BaselineKind::SeasonalNaive => {
                if bundle.spec.input_len < SEASON {
                    return Err(Error::SeriesTooShort {
                        needed: SEASON,
                        got: bundle.spec.input_len,
                    });
                }
                Baseline::SeasonalNaive { horizon }
            }
            BaselineKind::Mean => Baseline::Mean { horizon },
            BaselineKind::DlinearStyle => Baseline::Linear { coef: fit_linear(bundle)? },
        })
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        match self {
            Baseline::SeasonalNaive { horizon } => seasonal_naive(input, *horizon),
            Baseline::Mean { horizon } => mean_forecast(input, *horizon),
            Baseline::Linear { coef } => {
                let t = coef.nrows() - 1;
                if input.len() != t {
                    return Err(Error::ShapeMismatch {
                        op: "linear baseline",
                        left: (1, input.len()),
                        right: (coef.nrows(), coef.ncols()),
                    });
                }
                Ok((0..coef.ncols())
                    .map(|j| input.iter().enumerate().map(|(i, x)| x * coef[(i, j)]).sum::<f64>() + coef[(t, j)])
                    .collect())
            }
        }
    }
}

/// Fits `kind` on the training split and scores it on `split` in scaled units.
pub fn run_baseline_on(kind: BaselineKind, bundle: &DataBundle, split: Split) -> Result<Metrics> {
    let model = Baseline::fit(kind, bundle)?;
    let windows = bundle.split(split);
    if windows.is_empty() {
        return Err(Error::EmptyInput("evaluation split"));
    }
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for w in windows {
        pred.extend(model.predict(&scaled_input(bundle, w))?);
        truth.extend_from_slice(&w.target_scaled);
    }
    Metrics::compute(&pred, &truth)
}

pub fn run_baseline(kind: BaselineKind, bundle: &DataBundle) -> Result<Metrics> {
    run_baseline_on(kind, bundle, Split::Test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seasonal_naive_indexing() {
        let input: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(seasonal_naive(&input, 3).unwrap(), vec![3.0, 4.0, 5.0]);
        // Beyond one season the last week repeats.
        assert_eq!(seasonal_naive(&input, 9).unwrap(), vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 3.0, 4.0]);
        assert!(seasonal_naive(&input[..6], 1).is_err());
    }

    #[test]
    fn names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.to_string().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("arima".parse::<BaselineKind>().is_err());
    }
}
