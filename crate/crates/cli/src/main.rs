//! `fastrec`: train, evaluate and sweep the pseudo-recurrent occlusion
//! classifier, run the 2-D toy model and the RBM baseline, and fit timing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fastrec::classifiers::HypothesisBank;
use fastrec::container::Artifact;
use fastrec::dataset::{occlude, OcclusionSpec};
use fastrec::features::learn_dictionary;
use fastrec::features::{Dictionary, Layer1Activity};
use fastrec::feedback::run_feedback;
use fastrec::harness::config::{load_settings, merge, Settings};
use fastrec::harness::output::{emit_outputs, manifest, prepare_output_dir, results_csv};
use fastrec::harness::timing::timing_report;
use fastrec::harness::toy::{toy_exact, toy_oracle, ToyWorld};
use fastrec::harness::{
    accuracy, activity_rows, run_sweep, train_bank_for, Artifacts, Baseline, ExperimentSpec,
    TrainParams,
};
use fastrec::memory::{
    activities, build_cluster_memory, build_store, ActivityStore, ClusterMemory, H1Mode,
    MemoryParams, StoreOptions,
};

#[derive(Parser, Debug)]
#[command(
    name = "fastrec",
    version,
    about = "Occluded-image classification with pseudo-recurrent feedback"
)]
struct Cli {
    /// Plain-text `key = value` settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn the dictionary, activity store, cluster memory and classifier bank.
    Train {
        #[command(flatten)]
        s: SettingFlags,
        /// Directory for the artifact files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify the occluded test set with trained artifacts.
    Eval {
        #[command(flatten)]
        s: SettingFlags,
        /// Directory written by `train`.
        #[arg(long)]
        artifacts: PathBuf,
        /// Write one JSON line per test image and configuration.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Train once per artifact setting and evaluate every grid point.
    Sweep {
        #[command(flatten)]
        s: SettingFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo imputation in the two-class, two-cluster 2-D world.
    Toy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        /// Offsets added to attribute 0, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2,3,4,6")]
        distortion: Vec<f64>,
        /// Merge weights, comma separated; `inf` moves onto the center.
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,4,inf")]
        alpha: Vec<f64>,
        /// Also sum the mixture density on a grid of this spacing.
        #[arg(long)]
        exact_step: Option<f64>,
        /// Write the table here as well as to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gibbs-correction baseline over binarized activity.
    RbmBaseline {
        #[command(flatten)]
        s: SettingFlags,
        #[arg(long)]
        out: PathBuf,
        /// Save the trained binarizer, RBM and classifier.
        #[arg(long)]
        save_model: Option<PathBuf>,
    },
    /// Feedback cost against K2: counters, wall time and a least-squares fit.
    Timing {
        #[command(flatten)]
        s: SettingFlags,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Every experiment setting. Values are checked when the `ExperimentSpec` is built, so
/// a config file and these flags accept the same text.
#[derive(Args, Debug, Default)]
struct SettingFlags {
    /// synthetic or cifar.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    data_seed: Option<String>,
    /// desk (10k/2k) or full (50k/10k).
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    train_count: Option<String>,
    #[arg(long)]
    test_count: Option<String>,
    /// Occlusion fractions, comma separated.
    #[arg(long)]
    occlusion: Option<String>,
    /// off, on or both.
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    augment_levels: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    patch_size: Option<String>,
    #[arg(long)]
    patches_per_image: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    k2: Option<String>,
    /// on or off.
    #[arg(long)]
    store_h1: Option<String>,
    /// box3 or off.
    #[arg(long)]
    lowpass: Option<String>,
    #[arg(long)]
    svm_c: Option<String>,
    #[arg(long)]
    svm_epochs: Option<String>,
    /// Hypothesis count m (1, 2 or 3).
    #[arg(long, visible_alias = "m")]
    hypotheses: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    /// wta, average or ncs.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "on")]
    layer1_feedback: Option<String>,
    /// on or off.
    #[arg(long)]
    anneal: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "on")]
    ncs_average3: Option<String>,
    /// feedforward, feedback and/or rbm.
    #[arg(long)]
    baselines: Option<String>,
    #[arg(long)]
    rbm_hidden: Option<String>,
    #[arg(long)]
    rbm_lr: Option<String>,
    #[arg(long)]
    rbm_batch: Option<String>,
    #[arg(long)]
    rbm_epochs: Option<String>,
    #[arg(long)]
    gibbs_epochs: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "on")]
    binary_readout: Option<String>,
}

impl SettingFlags {
    fn settings(&self) -> Settings {
        let pairs = [
            ("dataset", &self.dataset),
            ("data-dir", &self.data_dir),
            ("data-seed", &self.data_seed),
            ("profile", &self.profile),
            ("train-count", &self.train_count),
            ("test-count", &self.test_count),
            ("occlusion", &self.occlusion),
            ("augment", &self.augment),
            ("augment-levels", &self.augment_levels),
            ("k", &self.k),
            ("patch-size", &self.patch_size),
            ("patches-per-image", &self.patches_per_image),
            ("seed", &self.seed),
            ("k2", &self.k2),
            ("store-h1", &self.store_h1),
            ("lowpass", &self.lowpass),
            ("svm-c", &self.svm_c),
            ("svm-epochs", &self.svm_epochs),
            ("hypotheses", &self.hypotheses),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("tau", &self.tau),
            ("iterations", &self.iterations),
            ("scheme", &self.scheme),
            ("layer1-feedback", &self.layer1_feedback),
            ("anneal", &self.anneal),
            ("ncs-average3", &self.ncs_average3),
            ("baselines", &self.baselines),
            ("rbm-hidden", &self.rbm_hidden),
            ("rbm-lr", &self.rbm_lr),
            ("rbm-batch", &self.rbm_batch),
            ("rbm-epochs", &self.rbm_epochs),
            ("gibbs-epochs", &self.gibbs_epochs),
            ("binary-readout", &self.binary_readout),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

/// Config file settings, then `defaults` for keys neither source sets, then flags.
fn resolve(
    config: Option<&Path>,
    flags: &SettingFlags,
    defaults: &[(&str, &str)],
) -> Result<ExperimentSpec> {
    let file = match config {
        Some(p) => load_settings(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Settings::new(),
    };
    let mut base: Settings = defaults
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    base = merge(&base, &file);
    Ok(ExperimentSpec::from_settings(&merge(
        &base,
        &flags.settings(),
    ))?)
}

const DICTIONARY_FILE: &str = "dictionary.bin";
const STORE_FILE: &str = "store.bin";
const MEMORY_FILE: &str = "memory.bin";
const BANK_FILE: &str = "bank.bin";

fn train(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    prepare_output_dir(out)?;
    if spec.k2.len() != 1 || spec.augment.len() != 1 {
        bail!("train takes a single k2 and a single augment setting");
    }
    let (train, _) = spec.source.load(spec.train_count, 0)?;
    let params = TrainParams {
        dictionary: fastrec::features::DictionaryParams {
            seed: spec.seed,
            ..spec.dictionary
        },
        store: StoreOptions {
            lowpass: spec.lowpass,
            h1: if spec.store_h1 {
                H1Mode::Memory
            } else {
                H1Mode::Off
            },
        },
        memory: MemoryParams::new(spec.k2[0], spec.seed),
        svm: fastrec::classifiers::SvmParams {
            seed: spec.seed,
            ..spec.svm
        },
        augment_levels: if spec.augment[0] {
            spec.augment_levels.clone()
        } else {
            Vec::new()
        },
    };
    let clock = std::time::Instant::now();
    let stage = |name: &str| eprintln!("{name} done at {:.1}s", clock.elapsed().as_secs_f64());
    let dictionary = learn_dictionary(&train, &params.dictionary)?;
    stage("dictionary");
    let store = build_store(&train, &dictionary, &params.store)?;
    stage("activity store");
    let memory = build_cluster_memory(&store, &params.memory)?;
    stage("cluster memory");
    let bank = train_bank_for(
        &train,
        &dictionary,
        &store,
        &params.augment_levels,
        &params.svm,
    )?;
    stage("classifier bank");
    let a = Artifacts {
        dictionary,
        store,
        memory,
        bank,
    };
    a.dictionary.save(&out.join(DICTIONARY_FILE))?;
    a.store.save(&out.join(STORE_FILE))?;
    a.memory.save(&out.join(MEMORY_FILE))?;
    a.bank.save(&out.join(BANK_FILE))?;
    fs::write(out.join("manifest.txt"), manifest(spec))?;
    println!(
        "trained on {} images: K={} K2={} bank of {} classifiers -> {}",
        train.len(),
        a.dictionary.k(),
        a.memory.k2,
        a.bank.len(),
        out.display()
    );
    Ok(())
}

fn eval(spec: &ExperimentSpec, dir: &Path, trajectory: Option<&Path>) -> Result<()> {
    let load = |name: &str| dir.join(name);
    let dict = Dictionary::load(&load(DICTIONARY_FILE)).context("loading dictionary")?;
    let store = ActivityStore::load(&load(STORE_FILE)).context("loading activity store")?;
    let mem = ClusterMemory::load(&load(MEMORY_FILE)).context("loading cluster memory")?;
    let bank = HypothesisBank::load(&load(BANK_FILE)).context("loading classifier bank")?;
    let (_, test) = spec.source.load(0, spec.test_count)?;
    let truth: Vec<u8> = test.iter().map(|r| r.label()).collect();
    let mut log = match trajectory {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };

    println!("occlusion,config,feedforward_accuracy,accuracy");
    for &occlusion in &spec.occlusions {
        let occ = OcclusionSpec::new(occlusion)?;
        let images: Vec<_> = test.iter().map(|r| occlude(r, &occ)).collect();
        let rows = activity_rows(&images, &dict, store.lowpass, 0.0)?;
        for cfg in &spec.feedback {
            let empty = Layer1Activity::zeros(0, 0);
            let mut labels = Vec::with_capacity(images.len());
            let mut first = Vec::with_capacity(images.len());
            for (i, img) in images.iter().enumerate() {
                let (h1, h2) = if cfg.layer1_feedback {
                    activities(img, &dict, store.lowpass)
                } else {
                    (empty.clone(), rows.row(i).to_owned().into())
                };
                let (label, trace) = run_feedback(&h1, &h2, &mem, &store, &bank, cfg)?;
                labels.push(label);
                first.push(trace.records[0].hypotheses[0]);
                if let Some(w) = log.as_mut() {
                    let line = serde_json::json!({
                        "image": i,
                        "occlusion": occlusion,
                        "truth": truth[i],
                        "label": label,
                        "config": cfg,
                        "records": trace.records,
                    });
                    writeln!(w, "{line}")?;
                }
            }
            println!(
                "{occlusion},{} m={} T={} alpha={},{},{}",
                cfg.scheme,
                cfg.m,
                cfg.iterations,
                cfg.alpha,
                accuracy(&first, &truth),
                accuracy(&labels, &truth)
            );
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    Ok(())
}

fn sweep(spec: &ExperimentSpec, out: &Path) -> Result<Vec<fastrec::harness::ResultRow>> {
    prepare_output_dir(out).with_context(|| format!("output directory {}", out.display()))?;
    let rows = run_sweep(spec)?;
    print!("{}", results_csv(&rows)?);
    emit_outputs(&rows, spec, out)?;
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    eprintln!("{} rows ({failed} failed) -> {}", rows.len(), out.display());
    Ok(rows)
}

fn toy(
    seed: u64,
    trials: usize,
    distortions: &[f64],
    alphas: &[f64],
    exact_step: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let world = ToyWorld::two_cluster_classes();
    let mut table = String::from(
        "distortion,alpha,trials,error_before,error_after,correction_rate,damage_rate,median_ratio_before,median_ratio_after,ratio_decreased,exact_before,exact_after\n",
    );
    for &d in distortions {
        for &a in alphas {
            let o = toy_oracle(&world, trials, d, a, seed)?;
            let exact = exact_step.map(|h| toy_exact(&world, d, a, h, 6.0));
            table += &format!(
                "{d},{a},{},{},{},{},{},{},{},{},{},{}\n",
                o.trials,
                o.error_before,
                o.error_after,
                o.correction_rate,
                o.damage_rate,
                o.median_ratio_before,
                o.median_ratio_after,
                o.ratio_decreased,
                exact.map(|e| e.0.to_string()).unwrap_or_default(),
                exact.map(|e| e.1.to_string()).unwrap_or_default(),
            );
        }
    }
    print!("{table}");
    if let Some(p) = out {
        fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Train { s, out } => train(&resolve(config, s, &[])?, out),
        Command::Eval {
            s,
            artifacts,
            trajectory,
        } => eval(&resolve(config, s, &[])?, artifacts, trajectory.as_deref()),
        Command::Sweep { s, out } => sweep(&resolve(config, s, &[])?, out).map(|_| ()),
        Command::Toy {
            seed,
            trials,
            distortion,
            alpha,
            exact_step,
            out,
        } => toy(
            *seed,
            *trials,
            distortion,
            alpha,
            *exact_step,
            out.as_deref(),
        ),
        Command::RbmBaseline { s, out, save_model } => {
            let mut spec = resolve(config, s, &[("occlusion", "0,0.33")])?;
            spec.baselines = vec![Baseline::Rbm];
            spec.augment = vec![false];
            sweep(&spec, out)?;
            if let Some(path) = save_model {
                let (train, _) = spec.source.load(spec.train_count, 0)?;
                let dict = fastrec::features::learn_dictionary(
                    &train,
                    &fastrec::features::DictionaryParams {
                        seed: spec.seed,
                        ..spec.dictionary
                    },
                )?;
                let store = fastrec::memory::build_store(
                    &train,
                    &dict,
                    &StoreOptions {
                        lowpass: spec.lowpass,
                        h1: H1Mode::Off,
                    },
                )?;
                let trained = fastrec::rbm::train_rbm_baseline(
                    store.h2.view(),
                    &store.labels,
                    &fastrec::rbm::RbmParams {
                        seed: spec.seed,
                        ..spec.rbm
                    },
                    &fastrec::classifiers::SvmParams {
                        seed: spec.seed,
                        ..spec.svm
                    },
                )?;
                trained.baseline.save(path)?;
                let curve: Vec<String> = trained
                    .reconstruction_error
                    .iter()
                    .map(|e| format!("{e:.3}"))
                    .collect();
                eprintln!("reconstruction error per epoch: {}", curve.join(" "));
            }
            Ok(())
        }
        Command::Timing { s, out } => {
            let mut spec = resolve(config, s, &[("k2", "10,25,50,100"), ("occlusion", "0.33")])?;
            spec.baselines = vec![Baseline::Feedback];
            let rows = sweep(&spec, out)?;
            let report = timing_report(&rows);
            for fit in &report.fits {
                println!(
                    "{}: loop time = {:.3} + {:.5} * K2 us (R^2 = {:.4}); distance evals = {:.1} + {:.1} * K2",
                    fit.config,
                    fit.loop_time.intercept,
                    fit.loop_time.slope,
                    fit.loop_time.r2,
                    fit.distance_evals.intercept,
                    fit.distance_evals.slope
                );
            }
            fs::write(
                out.join("timing_report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            Ok(())
        }
    }
}
