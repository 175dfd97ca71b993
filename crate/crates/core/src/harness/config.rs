//! Plain-text `key = value` settings shared by the config file, the command
//! line and the run manifest. Keys use the command-line flag names; list
//! values are comma separated and form grid axes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{Baseline, DataSource, ExperimentSpec};
use crate::error::{Error, Result};
use crate::feedback::{FeedbackConfig, Scheme};
use crate::memory::LowPass;

pub type Settings = BTreeMap<String, String>;

/// Every key [`ExperimentSpec::from_settings`] understands.
pub const KEYS: &[&str] = &[
    "alpha",
    "anneal",
    "augment",
    "augment-levels",
    "baselines",
    "beta",
    "binary-readout",
    "data-dir",
    "data-seed",
    "dataset",
    "gibbs-epochs",
    "hypotheses",
    "iterations",
    "k",
    "k2",
    "layer1-feedback",
    "lowpass",
    "ncs-average3",
    "occlusion",
    "patch-size",
    "patches-per-image",
    "profile",
    "rbm-batch",
    "rbm-epochs",
    "rbm-hidden",
    "rbm-lr",
    "scheme",
    "seed",
    "store-h1",
    "svm-c",
    "svm-epochs",
    "tau",
    "test-count",
    "train-count",
];

fn normalize_key(k: &str) -> String {
    k.trim().trim_start_matches("--").replace('_', "-")
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped; a
/// repeated key keeps the last value.
pub fn parse_settings(text: &str) -> Result<Settings> {
    let mut out = Settings::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                n + 1
            )));
        };
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn load_settings(path: &Path) -> Result<Settings> {
    parse_settings(&std::fs::read_to_string(path)?)
}

pub fn render_settings(settings: &Settings) -> String {
    settings
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// `base` with every entry of `overrides` applied on top.
pub fn merge(base: &Settings, overrides: &Settings) -> Settings {
    let mut out = base.clone();
    out.extend(overrides.iter().map(|(k, v)| (normalize_key(k), v.clone())));
    out
}

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on|off, got `{v}`"))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{}`", v.trim())))
}

fn parse_list<T>(key: &str, v: &str, one: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<&str> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    items.into_iter().map(|s| one(key, s)).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Distinct values in first-seen order.
fn distinct<T: PartialEq + Clone>(items: impl IntoIterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

struct Reader<'a> {
    s: &'a Settings,
}

impl Reader<'_> {
    fn get(&self, key: &str) -> Option<&str> {
        self.s.get(key).map(String::as_str)
    }

    fn one<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        self.get(key).map_or(Ok(default), |v| parse_one(key, v))
    }

    fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        self.get(key)
            .map_or(Ok(default), |v| parse_list(key, v, parse_one))
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        self.get(key).map_or(Ok(default), |v| parse_bool(key, v))
    }

    fn flags(&self, key: &str, default: bool) -> Result<Vec<bool>> {
        self.get(key)
            .map_or(Ok(vec![default]), |v| parse_list(key, v, parse_bool))
    }
}

impl ExperimentSpec {
    /// Builds a spec from settings on top of the desk profile (or the
    /// full-scale one with `profile = full`). Unknown keys are errors.
    pub fn from_settings(settings: &Settings) -> Result<Self> {
        if let Some(k) = settings.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown setting `{k}`")));
        }
        let r = Reader { s: settings };
        let base = match r.get("profile").unwrap_or("desk") {
            "desk" => ExperimentSpec::desk(),
            "full" => ExperimentSpec::full_scale(),
            other => {
                return Err(Error::Config(format!(
                    "profile: expected desk|full, got `{other}`"
                )))
            }
        };
        let data_dir = r.get("data-dir").map(PathBuf::from);
        let source = match (r.get("dataset"), data_dir) {
            (Some("cifar"), Some(dir)) | (None, Some(dir)) => DataSource::Cifar { dir },
            (Some("cifar"), None) => {
                return Err(Error::Config("dataset = cifar needs data-dir".into()))
            }
            (Some("synthetic") | None, _) => DataSource::Synthetic {
                seed: r.one("data-seed", 0)?,
            },
            (Some(other), _) => {
                return Err(Error::Config(format!(
                    "dataset: expected synthetic|cifar, got `{other}`"
                )))
            }
        };

        let mut dictionary = base.dictionary;
        dictionary.k = r.one("k", dictionary.k)?;
        dictionary.patch_size = r.one("patch-size", dictionary.patch_size)?;
        dictionary.patches_per_image = r.one("patches-per-image", dictionary.patches_per_image)?;

        let mut svm = base.svm;
        svm.c_reg = r.one("svm-c", svm.c_reg)?;
        svm.epochs = r.one("svm-epochs", svm.epochs)?;

        let mut rbm = base.rbm;
        rbm.hidden = r.one("rbm-hidden", rbm.hidden)?;
        rbm.lr = r.one("rbm-lr", rbm.lr)?;
        rbm.batch = r.one("rbm-batch", rbm.batch)?;
        rbm.epochs = r.one("rbm-epochs", rbm.epochs)?;

        let d = FeedbackConfig::default();
        let alphas = r.list("alpha", vec![d.alpha])?;
        let betas = r.list("beta", vec![d.beta])?;
        let taus = r.list("tau", vec![d.tau])?;
        let iterations = r.list("iterations", vec![d.iterations])?;
        let schemes: Vec<Scheme> = r.list("scheme", vec![d.scheme])?;
        let ms = r.list("hypotheses", vec![d.m])?;
        let layer1 = r.flags("layer1-feedback", d.layer1_feedback)?;
        let anneal = r.flags("anneal", d.anneal)?;
        let ncs_average3 = r.flag("ncs-average3", d.ncs_average3)?;
        let mut feedback = Vec::new();
        for &scheme in &schemes {
            for &m in &ms {
                for &iterations in &iterations {
                    for &anneal in &anneal {
                        for &alpha in &alphas {
                            for &layer1_feedback in &layer1 {
                                for &beta in &betas {
                                    for &tau in &taus {
                                        feedback.push(FeedbackConfig {
                                            alpha,
                                            beta,
                                            tau,
                                            iterations,
                                            scheme,
                                            m,
                                            layer1_feedback,
                                            anneal,
                                            ncs_average3,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let augment = match r.get("augment").unwrap_or("off") {
            "off" => vec![false],
            "on" => vec![true],
            "both" => vec![false, true],
            other => {
                return Err(Error::Config(format!(
                    "augment: expected off|on|both, got `{other}`"
                )))
            }
        };
        let lowpass: LowPass = r.one("lowpass", base.lowpass)?;

        let spec = ExperimentSpec {
            source,
            train_count: r.one("train-count", base.train_count)?,
            test_count: r.one("test-count", base.test_count)?,
            dictionary,
            lowpass,
            store_h1: r.flag("store-h1", base.store_h1 || layer1.contains(&true))?,
            k2: r.list("k2", base.k2)?,
            svm,
            feedback,
            occlusions: r.list("occlusion", base.occlusions)?,
            augment,
            augment_levels: r.list("augment-levels", base.augment_levels)?,
            baselines: r.list::<Baseline>("baselines", base.baselines)?,
            rbm,
            gibbs_epochs: r.list("gibbs-epochs", base.gibbs_epochs)?,
            binary_readout: r.flag("binary-readout", base.binary_readout)?,
            seed: r.one("seed", base.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Settings that rebuild this spec. Feedback grids are written as the
    /// distinct value of each field, which round-trips grids built by
    /// [`ExperimentSpec::from_settings`].
    pub fn to_settings(&self) -> Settings {
        let mut s = Settings::new();
        let mut put = |k: &str, v: String| {
            s.insert(k.to_string(), v);
        };
        match &self.source {
            DataSource::Synthetic { seed } => {
                put("dataset", "synthetic".into());
                put("data-seed", seed.to_string());
            }
            DataSource::Cifar { dir } => {
                put("dataset", "cifar".into());
                put("data-dir", dir.display().to_string());
            }
        }
        put("train-count", self.train_count.to_string());
        put("test-count", self.test_count.to_string());
        put("k", self.dictionary.k.to_string());
        put("patch-size", self.dictionary.patch_size.to_string());
        put(
            "patches-per-image",
            self.dictionary.patches_per_image.to_string(),
        );
        put("lowpass", self.lowpass.to_string());
        put("store-h1", on_off(self.store_h1).into());
        put("k2", join(&self.k2));
        put("svm-c", self.svm.c_reg.to_string());
        put("svm-epochs", self.svm.epochs.to_string());
        let fb = &self.feedback;
        put("alpha", join(&distinct(fb.iter().map(|c| c.alpha))));
        put("beta", join(&distinct(fb.iter().map(|c| c.beta))));
        put("tau", join(&distinct(fb.iter().map(|c| c.tau))));
        put(
            "iterations",
            join(&distinct(fb.iter().map(|c| c.iterations))),
        );
        put("scheme", join(&distinct(fb.iter().map(|c| c.scheme))));
        put("hypotheses", join(&distinct(fb.iter().map(|c| c.m))));
        put(
            "layer1-feedback",
            join(&distinct(fb.iter().map(|c| on_off(c.layer1_feedback)))),
        );
        put(
            "anneal",
            join(&distinct(fb.iter().map(|c| on_off(c.anneal)))),
        );
        put(
            "ncs-average3",
            on_off(fb.iter().any(|c| c.ncs_average3)).into(),
        );
        put("occlusion", join(&self.occlusions));
        put(
            "augment",
            match (self.augment.contains(&false), self.augment.contains(&true)) {
                (true, true) => "both",
                (false, true) => "on",
                _ => "off",
            }
            .into(),
        );
        put("augment-levels", join(&self.augment_levels));
        put("baselines", join(&self.baselines));
        put("rbm-hidden", self.rbm.hidden.to_string());
        put("rbm-lr", self.rbm.lr.to_string());
        put("rbm-batch", self.rbm.batch.to_string());
        put("rbm-epochs", self.rbm.epochs.to_string());
        put("gibbs-epochs", join(&self.gibbs_epochs));
        put("binary-readout", on_off(self.binary_readout).into());
        put("seed", self.seed.to_string());
        s
    }
}
