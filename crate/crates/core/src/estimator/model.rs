use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::store::{Sample, SeriesKey};
use super::EstimatorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Algorithm {
    SeasonalNaive {
        period: usize,
    },
    #[serde(rename_all = "camelCase")]
    Autoregressive {
        lags: usize,
        ridge_lambda: f64,
    },
}

impl Algorithm {
    /// Samples of context inference needs.
    pub fn context(&self) -> usize {
        match *self {
            Algorithm::SeasonalNaive { period } => period,
            Algorithm::Autoregressive { lags, .. } => lags,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub algorithm: Algorithm,
    pub window_size: usize,
    pub train_test_ratio: f64,
    pub min_samples: usize,
    pub retrain_period_seconds: i64,
    pub inference_period_seconds: i64,
    pub horizon_seconds: i64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Autoregressive {
                lags: 4,
                ridge_lambda: 1e-3,
            },
            window_size: 5000,
            train_test_ratio: 0.8,
            min_samples: 1000,
            retrain_period_seconds: 86_400,
            inference_period_seconds: 900,
            horizon_seconds: 3600,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::InvalidConfig(m.to_string()));
        match self.algorithm {
            Algorithm::Autoregressive { lags, ridge_lambda } => {
                if lags < 1 {
                    return bad("lags must be at least 1");
                }
                if !(ridge_lambda >= 0.0) || !ridge_lambda.is_finite() {
                    return bad("ridgeLambda must be a non-negative number");
                }
            }
            Algorithm::SeasonalNaive { period } => {
                if period < 1 {
                    return bad("period must be at least 1");
                }
            }
        }
        if !(self.train_test_ratio > 0.0 && self.train_test_ratio < 1.0) {
            return bad("trainTestRatio must lie in (0, 1)");
        }
        if self.min_samples < 1 || self.window_size < 1 {
            return bad("minSamples and windowSize must be positive");
        }
        if self.retrain_period_seconds <= 0
            || self.inference_period_seconds <= 0
            || self.horizon_seconds <= 0
        {
            return bad("periods must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ForecastModel {
    pub entity_id: String,
    pub attribute_name: String,
    pub algorithm: Algorithm,
    /// Intercept first, then lag 1..=L. Empty for seasonal-naive.
    pub coefficients: Vec<f64>,
    pub trained_at: i64,
    pub test_error: f64,
    /// Median gap of the training window, seconds.
    pub sampling_interval: f64,
    pub train_rows: usize,
    pub test_rows: usize,
}

impl ForecastModel {
    pub fn key(&self) -> SeriesKey {
        SeriesKey::new(self.entity_id.clone(), self.attribute_name.clone())
    }

    /// One-step prediction from `history` (oldest first).
    pub fn step(&self, history: &[f64]) -> f64 {
        match self.algorithm {
            Algorithm::Autoregressive { lags, .. } => {
                let n = history.len();
                (0..lags).fold(self.coefficients[0], |acc, j| {
                    acc + self.coefficients[j + 1] * history[n - 1 - j]
                })
            }
            Algorithm::SeasonalNaive { period } => history[history.len() - period],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Prediction {
    pub entity_id: String,
    pub attribute_name: String,
    pub issued_at: i64,
    pub horizon_start: i64,
    pub horizon_end: i64,
    pub value: f64,
}

/// Solves the ridge normal equations `(AᵀA + λI)β = Aᵀy` by Cholesky. The
/// penalty applies to every column, including an intercept column.
pub fn fit_ridge(a: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>, EstimatorError> {
    let p = a.ncols();
    let mut normal = a.transpose() * a;
    for i in 0..p {
        normal[(i, i)] += lambda;
    }
    let rhs = a.transpose() * y;
    let max_diag = (0..p).map(|i| normal[(i, i)].abs()).fold(0.0, f64::max);
    let chol = normal.cholesky().ok_or(EstimatorError::SingularFit)?;
    let l = chol.l_dirty();
    let min_pivot = (0..p).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(max_diag > 0.0) || min_pivot < 1e-12 * max_diag {
        return Err(EstimatorError::SingularFit);
    }
    Ok(chol.solve(&rhs))
}

/// Lagged design matrix: row for each target index `i` in `targets`, columns
/// `[1, y[i-1], ..., y[i-lags]]`.
pub fn lag_matrix(values: &[f64], lags: usize, targets: std::ops::Range<usize>) -> (DMatrix<f64>, DVector<f64>) {
    let rows = targets.len();
    let mut a = DMatrix::zeros(rows, lags + 1);
    let mut y = DVector::zeros(rows);
    for (r, i) in targets.enumerate() {
        a[(r, 0)] = 1.0;
        for j in 0..lags {
            a[(r, j + 1)] = values[i - 1 - j];
        }
        y[r] = values[i];
    }
    (a, y)
}

pub fn median_gap(samples: &[Sample]) -> f64 {
    let mut gaps: Vec<i64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    if gaps.is_empty() {
        return 0.0;
    }
    gaps.sort_unstable();
    let m = gaps.len() / 2;
    if gaps.len() % 2 == 1 {
        gaps[m] as f64
    } else {
        (gaps[m - 1] + gaps[m]) as f64 / 2.0
    }
}

/// Fits a model on the `windowSize` most recent samples (the caller passes
/// that window). `None` when the series is below `minSamples`.
pub fn train(
    key: &SeriesKey,
    window: &[Sample],
    total_len: usize,
    config: &TrainingConfig,
    now: i64,
) -> Result<Option<ForecastModel>, EstimatorError> {
    if total_len < config.min_samples {
        return Ok(None);
    }
    let values: Vec<f64> = window.iter().map(|s| s.value).collect();
    let n = values.len();
    let split = ((n as f64) * config.train_test_ratio).floor() as usize;
    let ctx = config.algorithm.context();
    if split <= ctx || split > n {
        return Err(EstimatorError::InsufficientContext {
            needed: ctx + 1,
            available: split,
        });
    }
    let mut model = ForecastModel {
        entity_id: key.entity_id.clone(),
        attribute_name: key.attribute.clone(),
        algorithm: config.algorithm,
        coefficients: Vec::new(),
        trained_at: now,
        test_error: 0.0,
        sampling_interval: median_gap(window),
        train_rows: split - ctx,
        test_rows: n - split,
    };
    if let Algorithm::Autoregressive { lags, ridge_lambda } = config.algorithm {
        let (a, y) = lag_matrix(&values, lags, lags..split);
        model.coefficients = fit_ridge(&a, &y, ridge_lambda)?.iter().copied().collect();
    }
    if n > split {
        let sse: f64 = (split..n)
            .map(|i| {
                let e = model.step(&values[..i]) - values[i];
                e * e
            })
            .sum();
        model.test_error = (sse / (n - split) as f64).sqrt();
    }
    Ok(Some(model))
}

/// Predicts the value at the end of `[now, now + horizon]`. `recent` holds the
/// latest observations, oldest first.
pub fn infer(
    model: &ForecastModel,
    recent: &[Sample],
    now: i64,
    horizon: i64,
) -> Result<Prediction, EstimatorError> {
    let ctx = model.algorithm.context();
    if recent.len() < ctx || recent.is_empty() {
        return Err(EstimatorError::InsufficientContext {
            needed: ctx.max(1),
            available: recent.len(),
        });
    }
    let t_last = recent[recent.len() - 1].t;
    let dt = if model.sampling_interval > 0.0 {
        model.sampling_interval
    } else {
        horizon as f64
    };
    let values: Vec<f64> = recent.iter().map(|s| s.value).collect();
    let value = match model.algorithm {
        Algorithm::Autoregressive { .. } => {
            let steps = (((now + horizon - t_last) as f64) / dt).ceil().max(1.0) as usize;
            let mut hist = values[values.len() - ctx..].to_vec();
            let mut v = 0.0;
            for _ in 0..steps {
                v = model.step(&hist);
                hist.remove(0);
                hist.push(v);
            }
            v
        }
        Algorithm::SeasonalNaive { period } => {
            let k = (((now - t_last) as f64) / dt).ceil().max(1.0) as usize;
            let n = values.len();
            let mut j = n - 1 + k;
            while j >= n {
                j -= period;
            }
            values[j]
        }
    };
    Ok(Prediction {
        entity_id: model.entity_id.clone(),
        attribute_name: model.attribute_name.clone(),
        issued_at: now,
        horizon_start: now,
        horizon_end: now + horizon,
        value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: impl IntoIterator<Item = f64>, dt: i64) -> Vec<Sample> {
        values
            .into_iter()
            .enumerate()
            .map(|(i, value)| Sample {
                t: i as i64 * dt,
                value,
            })
            .collect()
    }

    fn key() -> SeriesKey {
        SeriesKey::new("e", "a")
    }

    #[test]
    fn default_config_valid_and_gated() {
        let c = TrainingConfig::default();
        c.validate().unwrap();
        let s = series((0..999).map(|i| i as f64), 900);
        assert!(train(&key(), &s, s.len(), &c, 0).unwrap().is_none());
        let s = series((0..1000).map(|i| (i % 7) as f64), 900);
        assert!(train(&key(), &s, s.len(), &c, 0).unwrap().is_some());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = TrainingConfig::default();
        c.train_test_ratio = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainingConfig::default();
        c.algorithm = Algorithm::Autoregressive {
            lags: 0,
            ridge_lambda: 0.1,
        };
        assert!(c.validate().is_err());
        let mut c = TrainingConfig::default();
        c.inference_period_seconds = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ar1_one_step() {
        let m = ForecastModel {
            entity_id: "e".into(),
            attribute_name: "a".into(),
            algorithm: Algorithm::Autoregressive {
                lags: 1,
                ridge_lambda: 0.0,
            },
            coefficients: vec![3.0, 0.5],
            trained_at: 0,
            test_error: 0.0,
            sampling_interval: 900.0,
            train_rows: 0,
            test_rows: 0,
        };
        let recent = [Sample { t: 0, value: 10.0 }];
        // Horizon shorter than one interval: a single step.
        let p = infer(&m, &recent, 0, 600).unwrap();
        assert_eq!(p.value, 8.0);
        assert_eq!(p.horizon_end - p.horizon_start, 600);
        // Two steps: 3 + 0.5 * 8
        assert_eq!(infer(&m, &recent, 0, 1800).unwrap().value, 7.0);
    }

    #[test]
    fn seasonal_naive_slot() {
        let mut c = TrainingConfig::default();
        c.algorithm = Algorithm::SeasonalNaive { period: 4 };
        c.min_samples = 8;
        let s = series((0..12).map(|i| i as f64), 10);
        let m = train(&key(), &s, s.len(), &c, 0).unwrap().unwrap();
        // Last sample t=110; next slot k=1 is index 12, four back is 8.
        assert_eq!(infer(&m, &s, 115, 3600).unwrap().value, 8.0);
        assert_eq!(infer(&m, &s, 130, 3600).unwrap().value, 9.0);
        // Beyond one period wraps into the last period.
        assert_eq!(infer(&m, &s, 160, 3600).unwrap().value, 8.0);
    }

    #[test]
    fn singular_without_ridge() {
        let c = TrainingConfig {
            algorithm: Algorithm::Autoregressive {
                lags: 2,
                ridge_lambda: 0.0,
            },
            min_samples: 10,
            ..TrainingConfig::default()
        };
        let s = series(std::iter::repeat_n(7.0, 100), 60);
        assert!(matches!(
            train(&key(), &s, s.len(), &c, 0),
            Err(EstimatorError::SingularFit)
        ));
    }

    #[test]
    fn constant_series_fixed_point() {
        let c = TrainingConfig {
            algorithm: Algorithm::Autoregressive {
                lags: 2,
                ridge_lambda: 0.1,
            },
            window_size: 20_000,
            ..TrainingConfig::default()
        };
        let s = series(std::iter::repeat_n(7.0, 20_000), 60);
        let m = train(&key(), &s, s.len(), &c, 0).unwrap().unwrap();
        assert!(m.test_error <= 1e-6, "{}", m.test_error);
        let p = infer(&m, &s, s.last().unwrap().t, 30).unwrap();
        assert!((p.value - 7.0).abs() <= 1e-6, "{}", p.value);
    }
}
