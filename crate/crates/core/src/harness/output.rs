//! Result files: a reproducible CSV, a separate wall-clock CSV,
//! tab-separated plot data and a run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::render_settings;
use super::{Baseline, ExperimentSpec, ResultRow};
use crate::error::{Error, Result};

const PARAM_COLUMNS: [&str; 15] = [
    "baseline",
    "occlusion",
    "augmented",
    "k2",
    "scheme",
    "hypotheses",
    "iterations",
    "alpha",
    "beta",
    "tau",
    "layer1_feedback",
    "anneal",
    "ncs_average3",
    "gibbs_epochs",
    "seed",
];

const RESULT_COLUMNS: [&str; 9] = [
    "status",
    "reason",
    "test_images",
    "accuracy",
    "accuracy_by_iteration",
    "per_class_accuracy",
    "cluster_distance_evals",
    "store_distance_evals",
    "reconstruction_flips",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn joined(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn param_fields(r: &ResultRow) -> Vec<String> {
    let fb = r.feedback.as_ref();
    vec![
        r.baseline.to_string(),
        r.occlusion.to_string(),
        r.augmented.to_string(),
        opt(r.k2),
        opt(fb.map(|c| c.scheme)),
        opt(fb.map(|c| c.m)),
        opt(fb.map(|c| c.iterations)),
        opt(fb.map(|c| c.alpha)),
        opt(fb.map(|c| c.beta)),
        opt(fb.map(|c| c.tau)),
        opt(fb.map(|c| c.layer1_feedback)),
        opt(fb.map(|c| c.anneal)),
        opt(fb.map(|c| c.ncs_average3)),
        opt(r.gibbs_epochs),
        r.seed.to_string(),
    ]
}

fn write_csv(header: &[&str], records: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(fail)?;
    for rec in records {
        w.write_record(&rec).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One line per row and no wall-clock fields, so identical specs give
/// identical bytes.
pub fn results_csv(rows: &[ResultRow]) -> Result<String> {
    let header: Vec<&str> = PARAM_COLUMNS
        .iter()
        .chain(&RESULT_COLUMNS)
        .copied()
        .collect();
    write_csv(
        &header,
        rows.iter().map(|r| {
            let mut f = param_fields(r);
            f.extend([
                if r.is_ok() { "ok" } else { "failed" }.to_string(),
                r.failure.clone().unwrap_or_default(),
                r.test_images.to_string(),
                r.accuracy.to_string(),
                joined(&r.accuracy_by_iteration),
                joined(&r.per_class),
                r.cluster_distance_evals.to_string(),
                r.store_distance_evals.to_string(),
                opt(r.reconstruction_flips),
            ]);
            f
        }),
    )
}

pub fn timing_csv(rows: &[ResultRow]) -> Result<String> {
    let header: Vec<&str> = PARAM_COLUMNS
        .iter()
        .copied()
        .chain(["mean_test_us", "mean_loop_us"])
        .collect();
    write_csv(
        &header,
        rows.iter().filter(|r| r.is_ok()).map(|r| {
            let mut f = param_fields(r);
            f.push(format!("{:.3}", r.timing.mean_test_us));
            f.push(format!("{:.3}", r.timing.mean_loop_us));
            f
        }),
    )
}

/// Tab-separated `x, y, series` points of one figure.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub name: &'static str,
    pub x_label: &'static str,
    pub y_label: &'static str,
    pub points: Vec<(f64, f64, String)>,
}

impl PlotData {
    pub fn render(&self) -> String {
        let mut s = format!(
            "# x = {}, y = {}\nx\ty\tseries\n",
            self.x_label, self.y_label
        );
        for (x, y, series) in &self.points {
            s += &format!("{x}\t{y}\t{series}\n");
        }
        s
    }
}

/// Relative improvement of feedback over feedforward, in percent.
pub fn percent_gain(feedforward: f64, recurrent: f64) -> f64 {
    if feedforward == 0.0 {
        0.0
    } else {
        100.0 * (recurrent - feedforward) / feedforward
    }
}

fn feedback_label(r: &ResultRow) -> String {
    let c = r.feedback.as_ref().expect("feedback row");
    let mut s = format!(
        "{} m={} T={} alpha={}",
        c.scheme, c.m, c.iterations, c.alpha
    );
    if c.layer1_feedback {
        s += &format!(" beta={} tau={}", c.beta, c.tau);
    }
    s + &format!(" k2={}", opt(r.k2))
}

fn series_label(r: &ResultRow) -> String {
    let base = match r.baseline {
        Baseline::Feedforward => "feedforward".to_string(),
        Baseline::Feedback => format!("feedback {}", feedback_label(r)),
        Baseline::Rbm => format!("rbm gibbs={}", opt(r.gibbs_epochs)),
    };
    if r.augmented {
        base + " augmented"
    } else {
        base
    }
}

/// Plot data mirroring the experiment figures; empty figures are dropped.
pub fn plot_data(rows: &[ResultRow]) -> Vec<PlotData> {
    let ok: Vec<&ResultRow> = rows.iter().filter(|r| r.is_ok()).collect();
    let feedback: Vec<&&ResultRow> = ok
        .iter()
        .filter(|r| r.baseline == Baseline::Feedback)
        .collect();
    let l2_feedback = || {
        feedback
            .iter()
            .filter(|r| !r.feedback.as_ref().unwrap().layer1_feedback)
    };
    let fig = |name, x_label, y_label, points: Vec<(f64, f64, String)>| PlotData {
        name,
        x_label,
        y_label,
        points,
    };
    let out = vec![
        fig(
            "occlusion_accuracy",
            "occlusion fraction",
            "accuracy",
            ok.iter()
                .filter(|r| !r.augmented)
                .map(|r| (r.occlusion, r.accuracy, series_label(r)))
                .collect(),
        ),
        fig(
            "k2_accuracy",
            "clusters per class",
            "accuracy",
            l2_feedback()
                .map(|r| {
                    let c = r.feedback.as_ref().unwrap();
                    let series =
                        format!("occlusion={} {} T={}", r.occlusion, c.scheme, c.iterations);
                    (r.k2.unwrap() as f64, r.accuracy, series)
                })
                .collect(),
        ),
        fig(
            "iteration_gain",
            "iteration",
            "percent accuracy improvement",
            l2_feedback()
                .flat_map(|r| {
                    let a0 = r.accuracy_by_iteration[0];
                    let series = format!("occlusion={} {}", r.occlusion, feedback_label(r));
                    r.accuracy_by_iteration
                        .iter()
                        .enumerate()
                        .map(move |(t, &a)| (t as f64, percent_gain(a0, a), series.clone()))
                })
                .collect(),
        ),
        fig(
            "alpha_gain",
            "feedback magnitude alpha",
            "percent accuracy improvement",
            l2_feedback()
                .map(|r| {
                    let c = r.feedback.as_ref().unwrap();
                    let series = format!(
                        "occlusion={} {} T={} k2={}",
                        r.occlusion,
                        c.scheme,
                        c.iterations,
                        opt(r.k2)
                    );
                    (
                        c.alpha,
                        percent_gain(r.accuracy_by_iteration[0], r.accuracy),
                        series,
                    )
                })
                .collect(),
        ),
        fig(
            "scheme_gain",
            "occlusion fraction",
            "percent accuracy improvement",
            l2_feedback()
                .map(|r| {
                    (
                        r.occlusion,
                        percent_gain(r.accuracy_by_iteration[0], r.accuracy),
                        feedback_label(r),
                    )
                })
                .collect(),
        ),
        fig(
            "layer1_gain",
            "layer-1 feedback magnitude beta",
            "percent accuracy improvement",
            feedback
                .iter()
                .filter(|r| r.feedback.as_ref().unwrap().layer1_feedback)
                .map(|r| {
                    let c = r.feedback.as_ref().unwrap();
                    let series = format!("occlusion={} tau={}", r.occlusion, c.tau);
                    (
                        c.beta,
                        percent_gain(r.accuracy_by_iteration[0], r.accuracy),
                        series,
                    )
                })
                .collect(),
        ),
        fig(
            "gibbs_accuracy",
            "gibbs epochs",
            "accuracy",
            ok.iter()
                .filter(|r| r.baseline == Baseline::Rbm)
                .map(|r| {
                    (
                        r.gibbs_epochs.unwrap() as f64,
                        r.accuracy,
                        format!("occlusion={}", r.occlusion),
                    )
                })
                .collect(),
        ),
        fig(
            "augment_accuracy",
            "occlusion fraction",
            "accuracy",
            ok.iter()
                .filter(|r| r.baseline != Baseline::Rbm && rows.iter().any(|o| o.augmented))
                .map(|r| (r.occlusion, r.accuracy, series_label(r)))
                .collect(),
        ),
        fig(
            "augment_gain",
            "occlusion fraction",
            "percent accuracy improvement",
            l2_feedback()
                .filter(|_| rows.iter().any(|o| o.augmented))
                .map(|r| {
                    let training = if r.augmented { "augmented" } else { "original" };
                    (
                        r.occlusion,
                        percent_gain(r.accuracy_by_iteration[0], r.accuracy),
                        training.to_string(),
                    )
                })
                .collect(),
        ),
    ];
    out.into_iter().filter(|p| !p.points.is_empty()).collect()
}

/// Creates `dir` and checks it accepts files, so a bad path fails before
/// any training starts.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("plots"))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"")?;
    fs::remove_file(probe)?;
    Ok(())
}

/// Manifest: tool version, seed and every resolved setting, in the same
/// `key = value` format the config file uses.
pub fn manifest(spec: &ExperimentSpec) -> String {
    format!(
        "# fastrec {} run manifest\n{}",
        env!("CARGO_PKG_VERSION"),
        render_settings(&spec.to_settings())
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputFiles {
    pub results: PathBuf,
    pub timing: PathBuf,
    pub manifest: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Writes `results.csv`, `timing.csv`, `manifest.txt` and `plots/*.tsv`.
pub fn emit_outputs(rows: &[ResultRow], spec: &ExperimentSpec, dir: &Path) -> Result<OutputFiles> {
    if rows.is_empty() {
        return Err(Error::Config("no result rows to write".into()));
    }
    prepare_output_dir(dir)?;
    let results = dir.join("results.csv");
    fs::write(&results, results_csv(rows)?)?;
    let timing = dir.join("timing.csv");
    fs::write(&timing, timing_csv(rows)?)?;
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest(spec))?;
    let mut plots = Vec::new();
    for p in plot_data(rows) {
        let path = dir.join("plots").join(format!("{}.tsv", p.name));
        fs::write(&path, p.render())?;
        plots.push(path);
    }
    Ok(OutputFiles {
        results,
        timing,
        manifest: manifest_path,
        plots,
    })
}
