//! Overfitting-onset detection on per-epoch metric series.
//!
//! The rule: smooth the series with a centered moving average, track the
//! running minimum after a warmup window, and report onset at the
//! running-minimum epoch once the smoothed value has exceeded
//! (minimum + min_delta) for `patience` consecutive epochs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("series is empty")]
    EmptySeries,
    #[error("series epochs must be strictly increasing (offending epoch {0})")]
    NonIncreasingEpochs(i64),
    #[error("invalid detector config: {0}")]
    BadConfig(String),
}

/// How the required rise above the running minimum is specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinDelta {
    /// Fixed absolute rise.
    Absolute(f64),
    /// Fraction of the observed series range (max - min), resolved at
    /// evaluation time.
    FractionOfRange(f64),
}

impl MinDelta {
    fn resolve(&self, series_min: f64, series_max: f64) -> f64 {
        match *self {
            MinDelta::Absolute(d) => d,
            MinDelta::FractionOfRange(f) => f * (series_max - series_min),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Width of the centered moving average; 1 disables smoothing.
    pub smoothing_window: usize,
    /// Required rise above the running minimum.
    pub min_delta: MinDelta,
    /// Consecutive epochs the rise must persist before firing.
    pub patience: usize,
    /// Epochs ignored at the start of the series.
    pub warmup: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            smoothing_window: 11,
            min_delta: MinDelta::FractionOfRange(0.01),
            patience: 25,
            warmup: 20,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.smoothing_window < 1 {
            return Err(DetectorError::BadConfig("smoothing_window must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(DetectorError::BadConfig("patience must be >= 1".into()));
        }
        let d = match self.min_delta {
            MinDelta::Absolute(d) | MinDelta::FractionOfRange(d) => d,
        };
        if !(d >= 0.0) {
            return Err(DetectorError::BadConfig(format!("min_delta must be >= 0, got {d}")));
        }
        Ok(())
    }
}

/// Verdict for one monitored series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetReport {
    pub series_name: String,
    /// Epoch of the smoothed running minimum preceding the sustained rise.
    pub onset_epoch: Option<i64>,
    /// Epoch at which the patience criterion completed.
    pub fired_epoch: Option<i64>,
    /// Smoothed running minimum at the time of the verdict.
    pub minimum_value: f64,
}

impl OnsetReport {
    pub fn fired(&self) -> bool {
        self.fired_epoch.is_some()
    }
}

/// Relative position of two onsets from the same run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsetOrdering {
    Earlier,
    Later,
    Equal,
    Incomparable,
}

/// Centered moving average with the radius shrinking symmetrically at the
/// series boundaries. Even window widths round down to the next odd width.
fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let radius = (window.max(1) - 1) / 2;
    if radius == 0 {
        return values.to_vec();
    }
    let n = values.len();
    (0..n)
        .map(|i| {
            let r = radius.min(i).min(n - 1 - i);
            let slice = &values[i - r..=i + r];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// Runs the onset rule over an ordered (epoch, value) series.
pub fn detect_onset(
    series: &[(i64, f64)],
    cfg: &DetectorConfig,
    series_name: &str,
) -> Result<OnsetReport, DetectorError> {
    cfg.validate()?;
    if series.is_empty() {
        return Err(DetectorError::EmptySeries);
    }
    for w in series.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(DetectorError::NonIncreasingEpochs(w[1].0));
        }
    }

    let values: Vec<f64> = series.iter().map(|&(_, v)| v).collect();
    let smoothed = smooth(&values, cfg.smoothing_window);

    let post_warmup: Vec<(i64, f64)> = series
        .iter()
        .zip(&smoothed)
        .skip(cfg.warmup)
        .map(|(&(e, _), &s)| (e, s))
        .collect();

    if post_warmup.is_empty() {
        return Ok(OnsetReport {
            series_name: series_name.to_string(),
            onset_epoch: None,
            fired_epoch: None,
            minimum_value: f64::NAN,
        });
    }

    let series_min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let series_max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_delta = cfg.min_delta.resolve(series_min, series_max);

    let (mut min_epoch, mut min_value) = post_warmup[0];
    let mut streak = 0usize;
    for &(epoch, value) in &post_warmup[1..] {
        if value < min_value {
            min_value = value;
            min_epoch = epoch;
            streak = 0;
        } else if value > min_value + min_delta {
            streak += 1;
            if streak >= cfg.patience {
                return Ok(OnsetReport {
                    series_name: series_name.to_string(),
                    onset_epoch: Some(min_epoch),
                    fired_epoch: Some(epoch),
                    minimum_value: min_value,
                });
            }
        } else {
            streak = 0;
        }
    }

    Ok(OnsetReport {
        series_name: series_name.to_string(),
        onset_epoch: None,
        fired_epoch: None,
        minimum_value: min_value,
    })
}

/// Orders the positive-term onset against the total-loss onset.
pub fn compare_onsets(report_pos: &OnsetReport, report_total: &OnsetReport) -> OnsetOrdering {
    match (report_pos.onset_epoch, report_total.onset_epoch) {
        (Some(p), Some(t)) if p < t => OnsetOrdering::Earlier,
        (Some(p), Some(t)) if p > t => OnsetOrdering::Later,
        (Some(_), Some(_)) => OnsetOrdering::Equal,
        _ => OnsetOrdering::Incomparable,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(window: usize, delta: f64, patience: usize, warmup: usize) -> DetectorConfig {
        DetectorConfig {
            smoothing_window: window,
            min_delta: MinDelta::Absolute(delta),
            patience,
            warmup,
        }
    }

    fn v_curve() -> Vec<(i64, f64)> {
        (1i64..=200).map(|e| (e, (e - 100).abs() as f64 * 0.01)).collect()
    }

    #[test]
    fn v_curve_onset_100_fired_107() {
        let report = detect_onset(&v_curve(), &cfg(1, 0.02, 5, 0), "val/positive_term").unwrap();
        assert_eq!(report.onset_epoch, Some(100));
        assert_eq!(report.fired_epoch, Some(107));
        assert_eq!(report.minimum_value, 0.0);
    }

    #[test]
    fn strictly_decreasing_never_fires() {
        let series: Vec<(i64, f64)> = (1..=100).map(|e| (e, -0.1 * e as f64)).collect();
        let report = detect_onset(&series, &cfg(1, 0.01, 3, 0), "s").unwrap();
        assert_eq!(report.onset_epoch, None);
        assert_eq!(report.fired_epoch, None);
    }

    #[test]
    fn constant_series_never_fires() {
        let series: Vec<(i64, f64)> = (1..=100).map(|e| (e, 1.5)).collect();
        let report = detect_onset(&series, &cfg(1, 0.01, 3, 0), "s").unwrap();
        assert!(!report.fired());
    }

    #[test]
    fn constant_shift_leaves_onset_unchanged() {
        let base = detect_onset(&v_curve(), &cfg(1, 0.02, 5, 0), "s").unwrap();
        let shifted: Vec<(i64, f64)> = v_curve().iter().map(|&(e, v)| (e, v + 42.0)).collect();
        let moved = detect_onset(&shifted, &cfg(1, 0.02, 5, 0), "s").unwrap();
        assert_eq!(base.onset_epoch, moved.onset_epoch);
        assert_eq!(base.fired_epoch, moved.fired_epoch);
    }

    #[test]
    fn scaling_series_and_delta_leaves_onset_unchanged() {
        let base = detect_onset(&v_curve(), &cfg(1, 0.02, 5, 0), "s").unwrap();
        let c = 7.5;
        let scaled: Vec<(i64, f64)> = v_curve().iter().map(|&(e, v)| (e, v * c)).collect();
        let moved = detect_onset(&scaled, &cfg(1, 0.02 * c, 5, 0), "s").unwrap();
        assert_eq!(base.onset_epoch, moved.onset_epoch);
        assert_eq!(base.fired_epoch, moved.fired_epoch);
    }

    #[test]
    fn no_onset_inside_warmup() {
        // Minimum at epoch 5, rise afterwards; warmup past the whole rise.
        let series: Vec<(i64, f64)> = (1i64..=30)
            .map(|e| (e, (e - 5).abs() as f64))
            .collect();
        let report = detect_onset(&series, &cfg(1, 0.5, 3, 30), "s").unwrap();
        assert!(!report.fired());
    }

    #[test]
    fn fraction_of_range_resolves_against_observed_range() {
        // Range is 1.0, so FractionOfRange(0.02) == Absolute(0.02) here.
        let abs = detect_onset(&v_curve(), &cfg(1, 0.02, 5, 0), "s").unwrap();
        let frac_cfg = DetectorConfig {
            min_delta: MinDelta::FractionOfRange(0.02 / (0.99 - 0.0)),
            ..cfg(1, 0.0, 5, 0)
        };
        let frac = detect_onset(&v_curve(), &frac_cfg, "s").unwrap();
        assert_eq!(abs.onset_epoch, frac.onset_epoch);
    }

    #[test]
    fn rejects_empty_and_unordered() {
        assert_eq!(
            detect_onset(&[], &cfg(1, 0.1, 1, 0), "s"),
            Err(DetectorError::EmptySeries)
        );
        let bad = vec![(1, 0.0), (3, 0.0), (2, 0.0)];
        assert_eq!(
            detect_onset(&bad, &cfg(1, 0.1, 1, 0), "s"),
            Err(DetectorError::NonIncreasingEpochs(2))
        );
    }

    #[test]
    fn smoothing_window_shrinks_at_boundaries() {
        let vals = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let sm = smooth(&vals, 3);
        assert_eq!(sm, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let vals = vec![10.0, 0.0, 0.0, 0.0, 10.0];
        let sm = smooth(&vals, 3);
        assert_eq!(sm[0], 10.0);
        assert!((sm[1] - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn compare_onsets_orderings() {
        let mk = |onset: Option<i64>| OnsetReport {
            series_name: "s".into(),
            onset_epoch: onset,
            fired_epoch: onset.map(|e| e + 5),
            minimum_value: 0.0,
        };
        assert_eq!(compare_onsets(&mk(Some(120)), &mk(Some(500))), OnsetOrdering::Earlier);
        assert_eq!(compare_onsets(&mk(Some(500)), &mk(Some(120))), OnsetOrdering::Later);
        assert_eq!(compare_onsets(&mk(Some(9)), &mk(Some(9))), OnsetOrdering::Equal);
        assert_eq!(compare_onsets(&mk(None), &mk(Some(9))), OnsetOrdering::Incomparable);
    }
}
