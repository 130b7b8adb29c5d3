//! Report emission: deterministic CSV, JSON summary, and SVG plots
//! ((-NMSE in dB) vs SNR, one curve per estimator).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use plotters::prelude::*;

use super::{ExperimentError, NmseReport};

/// Writes `results.csv`, `summary.json`, `manifest.json`, and one plot per
/// experiment under `plots/`. Output bytes depend only on the report content.
pub fn emit_report(
    report: &NmseReport,
    manifest: &serde_json::Value,
    out_dir: &Path,
) -> Result<(), ExperimentError> {
    if report.rows.is_empty() {
        return Err(ExperimentError::InvalidSpec("empty report".to_string()));
    }
    std::fs::create_dir_all(out_dir.join("plots"))?;

    // Manifest first so an interrupted run stays diagnosable.
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest).expect("manifest json"),
    )?;

    let mut rows = report.rows.clone();
    rows.sort_by(|a, b| {
        (&a.experiment, &a.estimator)
            .cmp(&(&b.experiment, &b.estimator))
            .then(a.snr_db.partial_cmp(&b.snr_db).unwrap())
    });

    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("results.csv"))?);
    writeln!(csv, "experiment,estimator,snr_db,nmse,ci_halfwidth,n_slots")?;
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{:.6e},{:.6e},{}",
            r.experiment, r.estimator, r.snr_db, r.nmse, r.ci_halfwidth, r.n_slots
        )?;
    }
    csv.flush()?;

    // experiment -> estimator -> [snr, nmse, ci].
    let mut summary: BTreeMap<String, BTreeMap<String, Vec<serde_json::Value>>> = BTreeMap::new();
    for r in &rows {
        summary
            .entry(r.experiment.clone())
            .or_default()
            .entry(r.estimator.clone())
            .or_default()
            .push(serde_json::json!({
                "snr_db": r.snr_db,
                "nmse": r.nmse,
                "ci_halfwidth": r.ci_halfwidth,
                "n_slots": r.n_slots,
            }));
    }
    let summary_doc = serde_json::json!({
        "manifest_hash": report.manifest_hash,
        "experiments": summary,
    });
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary_doc).expect("summary json"),
    )?;

    let experiments: Vec<String> = {
        let mut seen = Vec::new();
        for r in &rows {
            if !seen.contains(&r.experiment) {
                seen.push(r.experiment.clone());
            }
        }
        seen
    };
    for exp in &experiments {
        let filename = format!("{}.svg", exp.replace(['/', '='], "_"));
        render_plot(report, exp, &out_dir.join("plots").join(filename))?;
    }
    Ok(())
}

/// Renders one experiment's curves as (-NMSE in dB) vs SNR (dB).
pub fn render_plot(
    report: &NmseReport,
    experiment: &str,
    path: &Path,
) -> Result<(), ExperimentError> {
    let rows: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.experiment == experiment)
        .collect();
    if rows.is_empty() {
        return Err(ExperimentError::InvalidSpec(format!(
            "no rows for experiment `{experiment}`"
        )));
    }
    let mut estimators: Vec<String> = Vec::new();
    for r in &rows {
        if !estimators.contains(&r.estimator) {
            estimators.push(r.estimator.clone());
        }
    }

    let neg_nmse_db = |nmse: f64| -10.0 * nmse.max(1e-12).log10();
    let snr_min = rows.iter().map(|r| r.snr_db).fold(f64::INFINITY, f64::min);
    let snr_max = rows.iter().map(|r| r.snr_db).fold(f64::NEG_INFINITY, f64::max);
    let y_vals: Vec<f64> = rows.iter().map(|r| neg_nmse_db(r.nmse)).collect();
    let y_min = y_vals.iter().cloned().fold(f64::INFINITY, f64::min) - 2.0;
    let y_max = y_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 2.0;

    let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE)
        .map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(experiment, ("sans-serif", 24))
        .margin(12)
        .x_label_area_size(44)
        .y_label_area_size(54)
        .build_cartesian_2d(snr_min..snr_max.max(snr_min + 1.0), y_min..y_max)
        .map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("SNR (dB)")
        .y_desc("-NMSE (dB)")
        .draw()
        .map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;

    let palette = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
    ];
    for (i, est) in estimators.iter().enumerate() {
        let color = palette[i % palette.len()];
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| &r.estimator == est)
            .map(|r| (r.snr_db, neg_nmse_db(r.nmse)))
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        chart
            .draw_series(LineSeries::new(pts.iter().cloned(), color.stroke_width(2)))
            .map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?
            .label(est.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
        chart
            .draw_series(pts.iter().map(|&(x, y)| Circle::new((x, y), 3, color.filled())))
            .map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
    root.present()
        .map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::ReportRow;

    fn small_report() -> NmseReport {
        let mut rows = Vec::new();
        for est in ["ls_occ", "genie_lmmse"] {
            for (i, snr) in [0.0, 10.0, 20.0].iter().enumerate() {
                rows.push(ReportRow {
                    experiment: "delay/profile=tdl-b100".to_string(),
                    estimator: est.to_string(),
                    snr_db: *snr,
                    nmse: 0.5 / (i + 1) as f64,
                    ci_halfwidth: 0.01,
                    n_slots: 10,
                });
            }
        }
        NmseReport {
            rows,
            manifest_hash: "deadbeef".to_string(),
        }
    }

    #[test]
    fn emit_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let report = small_report();
        emit_report(&report, &serde_json::json!({"seed": 1}), dir.path()).unwrap();
        assert!(dir.path().join("results.csv").exists());
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("manifest.json").exists());
        let plots: Vec<_> = std::fs::read_dir(dir.path().join("plots"))
            .unwrap()
            .collect();
        assert_eq!(plots.len(), 1);

        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        // Header plus 2 estimators x 3 snr points.
        assert_eq!(csv.lines().count(), 1 + 6);
        let svg = std::fs::read_to_string(
            dir.path().join("plots/delay_profile_tdl-b100.svg"),
        )
        .unwrap();
        assert!(svg.contains("SNR (dB)"), "axis label missing");
    }

    #[test]
    fn emission_is_byte_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let report = small_report();
        let manifest = serde_json::json!({"seed": 7});
        emit_report(&report, &manifest, a.path()).unwrap();
        emit_report(&report, &manifest, b.path()).unwrap();
        for file in ["results.csv", "summary.json", "manifest.json"] {
            assert_eq!(
                std::fs::read(a.path().join(file)).unwrap(),
                std::fs::read(b.path().join(file)).unwrap(),
                "{file} differs"
            );
        }
        assert_eq!(
            std::fs::read(a.path().join("plots/delay_profile_tdl-b100.svg")).unwrap(),
            std::fs::read(b.path().join("plots/delay_profile_tdl-b100.svg")).unwrap()
        );
    }

    #[test]
    fn empty_report_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let report = NmseReport {
            rows: vec![],
            manifest_hash: String::new(),
        };
        assert!(emit_report(&report, &serde_json::json!({}), dir.path()).is_err());
    }
}
