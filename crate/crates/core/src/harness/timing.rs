//! Cost summaries: per-configuration test time and distance counts, and a
//! least-squares fit of feedback time against K2.

use serde::Serialize;

use super::{Baseline, ResultRow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    /// Coefficient of determination; 1 when `y` is constant.
    pub r2: f64,
    pub points: usize,
}

/// Ordinary least squares `y = intercept + slope x`. `None` with fewer than
/// two distinct `x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs[..n].iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs[..n]
        .iter()
        .zip(&ys[..n])
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys[..n].iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs[..n]
        .iter()
        .zip(&ys[..n])
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Some(LinearFit {
        intercept,
        slope,
        r2,
        points: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigTiming {
    /// Everything identifying the row except K2.
    pub config: String,
    pub k2: Option<usize>,
    pub mean_test_us: f64,
    pub mean_loop_us: f64,
    pub cluster_distance_evals: f64,
    pub store_distance_evals: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct K2Fit {
    pub config: String,
    /// Feedback loop time (microseconds per image) against K2.
    pub loop_time: LinearFit,
    /// Cluster distance evaluations per image against K2.
    pub distance_evals: LinearFit,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TimingReport {
    pub configs: Vec<ConfigTiming>,
    pub fits: Vec<K2Fit>,
}

fn config_key(row: &ResultRow) -> String {
    let mut key = format!(
        "{} occlusion={} augmented={}",
        row.baseline, row.occlusion, row.augmented
    );
    if let Some(cfg) = &row.feedback {
        key += &format!(
            " scheme={} m={} T={} alpha={} anneal={} layer1={}",
            cfg.scheme, cfg.m, cfg.iterations, cfg.alpha, cfg.anneal, cfg.layer1_feedback
        );
        if cfg.layer1_feedback {
            key += &format!(" beta={} tau={}", cfg.beta, cfg.tau);
        }
    }
    if let Some(g) = row.gibbs_epochs {
        key += &format!(" gibbs={g}");
    }
    key
}

/// Summarizes successful rows and fits cost against K2 for every feedback
/// configuration evaluated at two or more K2 values.
pub fn timing_report(rows: &[ResultRow]) -> TimingReport {
    let ok: Vec<&ResultRow> = rows.iter().filter(|r| r.is_ok()).collect();
    let configs: Vec<ConfigTiming> = ok
        .iter()
        .map(|r| ConfigTiming {
            config: config_key(r),
            k2: r.k2,
            mean_test_us: r.timing.mean_test_us,
            mean_loop_us: r.timing.mean_loop_us,
            cluster_distance_evals: r.cluster_distance_evals,
            store_distance_evals: r.store_distance_evals,
        })
        .collect();

    let mut keys: Vec<String> = Vec::new();
    for r in ok.iter().filter(|r| r.baseline == Baseline::Feedback) {
        let k = config_key(r);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let fits = keys
        .into_iter()
        .filter_map(|key| {
            let group: Vec<&ConfigTiming> = configs
                .iter()
                .filter(|c| c.config == key && c.k2.is_some())
                .collect();
            let xs: Vec<f64> = group.iter().map(|c| c.k2.unwrap() as f64).collect();
            let time: Vec<f64> = group.iter().map(|c| c.mean_loop_us).collect();
            let evals: Vec<f64> = group.iter().map(|c| c.cluster_distance_evals).collect();
            Some(K2Fit {
                loop_time: linear_fit(&xs, &time)?,
                distance_evals: linear_fit(&xs, &evals)?,
                config: key,
            })
        })
        .collect();
    TimingReport { configs, fits }
}
