//! Renders the two standard figures from a metrics table:
//!
//! 1. train vs validation total loss, with a horizontal reference line at
//!    the validation minimum;
//! 2. validation positive and negative terms on separate vertical axes.
//!
//! Both figures mark the detected validation positive-term onset with a
//! vertical line when it exists. Each SVG gets a JSON sidecar listing the
//! drawn series, markers, and reference lines so figures can be checked
//! without parsing SVG.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use simclr_core::detector::{detect_onset, DetectorConfig, DetectorError};
use simclr_core::telemetry::{read_series, MetricColumn, Split, TelemetryError};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("metrics table has no rows for split '{0}'")]
    EmptySplit(String),
    #[error("render error: {0}")]
    Render(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Machine-readable description of one rendered figure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotSidecar {
    pub title: String,
    pub series: Vec<SeriesSummary>,
    pub reference_lines: Vec<ReferenceLine>,
    pub markers: Vec<Marker>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub name: String,
    pub axis: String,
    pub points: usize,
    pub first_epoch: i64,
    pub last_epoch: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Marker {
    pub label: String,
    pub epoch: i64,
}

/// Paths of everything written by [`render_all`].
#[derive(Debug, Clone)]
pub struct PlotPaths {
    pub loss_curves_svg: PathBuf,
    pub loss_curves_json: PathBuf,
    pub decomposition_svg: PathBuf,
    pub decomposition_json: PathBuf,
}

fn axis_range(series: &[&[(i64, f64)]]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &(_, v) in *s {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn epoch_range(series: &[&[(i64, f64)]]) -> (i64, i64) {
    let mut lo = i64::MAX;
    let mut hi = i64::MIN;
    for s in series {
        for &(e, _) in *s {
            lo = lo.min(e);
            hi = hi.max(e);
        }
    }
    (lo, hi.max(lo + 1))
}

fn write_sidecar(path: &Path, sidecar: &PlotSidecar) -> Result<(), PlotError> {
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    std::fs::write(path, json).map_err(|source| PlotError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn render_err<E: std::fmt::Display>(e: E) -> PlotError {
    PlotError::Render(e.to_string())
}

/// Figure 1: train and validation total loss over epochs.
pub fn render_loss_curves(
    metrics_path: &Path,
    out_svg: &Path,
    detector: &DetectorConfig,
) -> Result<PlotSidecar, PlotError> {
    let train = read_series(metrics_path, Split::Train, MetricColumn::TotalLoss)?;
    let val = read_series(metrics_path, Split::Val, MetricColumn::TotalLoss)?;
    if train.is_empty() {
        return Err(PlotError::EmptySplit("train".into()));
    }

    let mut reference_lines = Vec::new();
    let mut markers = Vec::new();
    let mut val_min = None;
    if !val.is_empty() {
        let m = val.iter().map(|&(_, v)| v).fold(f64::INFINITY, f64::min);
        val_min = Some(m);
        reference_lines.push(ReferenceLine {
            label: "val minimum".into(),
            value: m,
        });
        let pos = read_series(metrics_path, Split::Val, MetricColumn::PositiveTerm)?;
        let report = detect_onset(&pos, detector, "val/positive_term")?;
        if let Some(onset) = report.onset_epoch {
            markers.push(Marker {
                label: "positive-term onset".into(),
                epoch: onset,
            });
        }
    }

    let both: Vec<&[(i64, f64)]> = if val.is_empty() {
        vec![&train]
    } else {
        vec![&train, &val]
    };
    let (y_lo, y_hi) = axis_range(&both);
    let (x_lo, x_hi) = epoch_range(&both);

    let root = SVGBackend::new(out_svg, (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(render_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .caption("total loss per epoch", ("sans-serif", 24))
        .build_cartesian_2d(x_lo..x_hi, y_lo..y_hi)
        .map_err(render_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("total loss")
        .draw()
        .map_err(render_err)?;

    chart
        .draw_series(LineSeries::new(train.iter().map(|&(e, v)| (e, v)), &BLUE))
        .map_err(render_err)?
        .label("train")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE));
    if !val.is_empty() {
        chart
            .draw_series(LineSeries::new(val.iter().map(|&(e, v)| (e, v)), &RED))
            .map_err(render_err)?
            .label("val")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED));
    }
    if let Some(m) = val_min {
        chart
            .draw_series(LineSeries::new([(x_lo, m), (x_hi, m)], BLACK.stroke_width(1)))
            .map_err(render_err)?;
    }
    for marker in &markers {
        chart
            .draw_series(LineSeries::new(
                [(marker.epoch, y_lo), (marker.epoch, y_hi)],
                MAGENTA.stroke_width(1),
            ))
            .map_err(render_err)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .draw()
        .map_err(render_err)?;
    root.present().map_err(render_err)?;

    let mut series = vec![SeriesSummary {
        name: "train/total_loss".into(),
        axis: "left".into(),
        points: train.len(),
        first_epoch: train.first().unwrap().0,
        last_epoch: train.last().unwrap().0,
    }];
    if !val.is_empty() {
        series.push(SeriesSummary {
            name: "val/total_loss".into(),
            axis: "left".into(),
            points: val.len(),
            first_epoch: val.first().unwrap().0,
            last_epoch: val.last().unwrap().0,
        });
    }
    Ok(PlotSidecar {
        title: "total loss per epoch".into(),
        series,
        reference_lines,
        markers,
    })
}

/// Figure 2: validation positive term (left axis) and negative term
/// (right axis).
pub fn render_decomposition(
    metrics_path: &Path,
    out_svg: &Path,
    detector: &DetectorConfig,
) -> Result<PlotSidecar, PlotError> {
    let pos = read_series(metrics_path, Split::Val, MetricColumn::PositiveTerm)?;
    let neg = read_series(metrics_path, Split::Val, MetricColumn::NegativeTerm)?;
    if pos.is_empty() {
        return Err(PlotError::EmptySplit("val".into()));
    }

    let report = detect_onset(&pos, detector, "val/positive_term")?;
    let mut markers = Vec::new();
    if let Some(onset) = report.onset_epoch {
        markers.push(Marker {
            label: "positive-term onset".into(),
            epoch: onset,
        });
    }

    let (x_lo, x_hi) = epoch_range(&[&pos]);
    let (pl, ph) = axis_range(&[&pos]);
    let (nl, nh) = axis_range(&[&neg]);

    let root = SVGBackend::new(out_svg, (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(render_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .right_y_label_area_size(60)
        .caption("validation loss decomposition", ("sans-serif", 24))
        .build_cartesian_2d(x_lo..x_hi, pl..ph)
        .map_err(render_err)?
        .set_secondary_coord(x_lo..x_hi, nl..nh);
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("positive term")
        .draw()
        .map_err(render_err)?;
    chart
        .configure_secondary_axes()
        .y_desc("negative term")
        .draw()
        .map_err(render_err)?;

    chart
        .draw_series(LineSeries::new(pos.iter().map(|&(e, v)| (e, v)), &BLUE))
        .map_err(render_err)?
        .label("val positive term")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE));
    chart
        .draw_secondary_series(LineSeries::new(neg.iter().map(|&(e, v)| (e, v)), &GREEN))
        .map_err(render_err)?
        .label("val negative term")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], GREEN));
    for marker in &markers {
        chart
            .draw_series(LineSeries::new(
                [(marker.epoch, pl), (marker.epoch, ph)],
                MAGENTA.stroke_width(1),
            ))
            .map_err(render_err)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .draw()
        .map_err(render_err)?;
    root.present().map_err(render_err)?;

    Ok(PlotSidecar {
        title: "validation loss decomposition".into(),
        series: vec![
            SeriesSummary {
                name: "val/positive_term".into(),
                axis: "left".into(),
                points: pos.len(),
                first_epoch: pos.first().unwrap().0,
                last_epoch: pos.last().unwrap().0,
            },
            SeriesSummary {
                name: "val/negative_term".into(),
                axis: "right".into(),
                points: neg.len(),
                first_epoch: neg.first().unwrap().0,
                last_epoch: neg.last().unwrap().0,
            },
        ],
        reference_lines: Vec::new(),
        markers,
    })
}

/// Renders both figures plus sidecars into `out_dir`.
pub fn render_all(
    metrics_path: &Path,
    out_dir: &Path,
    detector: &DetectorConfig,
) -> Result<PlotPaths, PlotError> {
    std::fs::create_dir_all(out_dir).map_err(|source| PlotError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let paths = PlotPaths {
        loss_curves_svg: out_dir.join("loss_curves.svg"),
        loss_curves_json: out_dir.join("loss_curves.json"),
        decomposition_svg: out_dir.join("decomposition.svg"),
        decomposition_json: out_dir.join("decomposition.json"),
    };
    let sidecar = render_loss_curves(metrics_path, &paths.loss_curves_svg, detector)?;
    write_sidecar(&paths.loss_curves_json, &sidecar)?;
    let sidecar = render_decomposition(metrics_path, &paths.decomposition_svg, detector)?;
    write_sidecar(&paths.decomposition_json, &sidecar)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use simclr_core::telemetry::{EpochMetrics, MetricsWriter};

    fn synthetic_metrics(dir: &Path) -> PathBuf {
        let path = dir.join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        for e in 1i64..=60 {
            let val_pos = (e - 30).abs() as f64 * 0.02 - 1.0;
            for (split, pos) in [
                (Split::Train, -1.2 - 0.001 * e as f64),
                (Split::Val, val_pos),
            ] {
                let neg = 2.0 - 0.005 * e as f64;
                w.append(&EpochMetrics {
                    epoch: e,
                    split,
                    total_loss: pos + neg,
                    positive_term: pos,
                    negative_term: neg,
                    wall_time_s: 0.0,
                })
                .unwrap();
            }
        }
        path
    }

    fn detector() -> DetectorConfig {
        DetectorConfig {
            smoothing_window: 1,
            min_delta: simclr_core::detector::MinDelta::Absolute(0.05),
            patience: 5,
            warmup: 0,
        }
    }

    #[test]
    fn renders_both_figures_with_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let metrics = synthetic_metrics(dir.path());
        let out = dir.path().join("plots");
        let paths = render_all(&metrics, &out, &detector()).unwrap();

        for svg in [&paths.loss_curves_svg, &paths.decomposition_svg] {
            let text = std::fs::read_to_string(svg).unwrap();
            assert!(text.contains("<svg"), "not an svg: {}", svg.display());
            assert!(text.contains("polyline") || text.contains("path"));
        }

        let sidecar: PlotSidecar =
            serde_json::from_str(&std::fs::read_to_string(&paths.loss_curves_json).unwrap())
                .unwrap();
        assert_eq!(sidecar.series.len(), 2);
        assert_eq!(sidecar.reference_lines.len(), 1);
        // V-shaped val positive term has its minimum at epoch 30.
        assert_eq!(sidecar.markers[0].epoch, 30);

        let sidecar: PlotSidecar =
            serde_json::from_str(&std::fs::read_to_string(&paths.decomposition_json).unwrap())
                .unwrap();
        assert_eq!(sidecar.series[0].axis, "left");
        assert_eq!(sidecar.series[1].axis, "right");
        assert_eq!(sidecar.markers[0].epoch, 30);
    }

    #[test]
    fn missing_val_rows_is_an_error_for_decomposition() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.append(&EpochMetrics {
            epoch: 1,
            split: Split::Train,
            total_loss: 1.0,
            positive_term: -0.5,
            negative_term: 1.5,
            wall_time_s: 0.0,
        })
        .unwrap();
        let out = dir.path().join("x.svg");
        assert!(matches!(
            render_decomposition(&path, &out, &detector()),
            Err(PlotError::EmptySplit(_))
        ));
    }
}
