//! End-to-end runs: a declarative run configuration, dataset assembly for
//! the MNIST and phantom experiments, training with on-disk artifacts and
//! evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_phantom_set, hu_to_normalized, load_mnist, resize_bilinear, split_exclude_digit, split_random,
    DatasetSplit, LabeledImage, PhantomSpec, EXPERIMENT_POOL,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, train_oracle, DigitOracle, EvalOutcome, EvalTruth, GatedOracle, OracleTrainConfig};
use crate::formats::{self, encode_pgm, KeyValues};
use crate::model::{AutomapConfig, AutomapParams, Preset};
use crate::radon::{AngleSet, ImageGrid};
use crate::train::{cache_path, cached_sinograms, resume, store_key, Checkpoint, TrainConfig, TrainingSet, CHECKPOINT_OPTIMIZER};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Clean held-out digits used to gate the oracle: the first 5000 test-file images.
pub const ORACLE_GATE_SIZE: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    MnistRandom,
    MnistExclude,
    Phantom,
}

fn default_angles() -> String {
    "four_view".into()
}
fn default_digit() -> u32 {
    2
}
fn default_preset() -> String {
    "full".into()
}
fn default_epochs() -> usize {
    50
}
fn default_lr() -> f64 {
    2e-5
}
fn default_rho() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    64
}
fn default_checkpoint_every() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_phantom_train() -> usize {
    2000
}
fn default_phantom_test() -> usize {
    200
}
fn default_data_dir() -> PathBuf {
    PathBuf::from("data/mnist")
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything that defines a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default = "default_angles")]
    pub angles: String,
    #[serde(default = "default_digit")]
    pub excluded_digit: u32,
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_rho")]
    pub rmsprop_rho: f64,
    #[serde(default = "default_eps")]
    pub rmsprop_eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_true")]
    pub recalibrate_bn: bool,
    /// Seeds weight initialization, shuffling, the random split and phantoms.
    #[serde(default)]
    pub seed: u64,
    /// Keep only this many training samples (after splitting).
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Keep only this many test samples (after splitting).
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default = "default_phantom_train")]
    pub phantom_train: usize,
    #[serde(default = "default_phantom_test")]
    pub phantom_test: usize,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Digit oracle weights; required to evaluate MNIST runs.
    #[serde(default)]
    pub oracle: Option<PathBuf>,
    /// Top-1 oracle probability below which a reconstruction counts as "no
    /// digit". Off by default.
    #[serde(default)]
    pub oracle_reject_below: Option<f64>,
}

impl RunConfig {
    pub fn new(experiment: Experiment) -> Self {
        toml::from_str(&format!("experiment = \"{}\"", experiment_name(experiment))).expect("defaults parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if let Err(e) = AngleSet::parse(&self.angles) {
            return cfg_err(format!("angles: {e}"));
        }
        if Preset::parse(&self.preset).is_err() {
            return cfg_err(format!("preset: unknown model preset `{}`", self.preset));
        }
        if let Some(t) = self.oracle_reject_below.filter(|t| !(0.0..=1.0).contains(t)) {
            return cfg_err(format!("oracle_reject_below: {t} is not a probability"));
        }
        if self.excluded_digit > 9 {
            return cfg_err(format!("excluded_digit: {} is not a digit", self.excluded_digit));
        }
        self.train_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn angle_set(&self) -> AngleSet {
        AngleSet::parse(&self.angles).expect("validated")
    }

    pub fn model_config(&self) -> AutomapConfig {
        AutomapConfig::preset(Preset::parse(&self.preset).expect("validated"), &self.angle_set())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            rmsprop_rho: self.rmsprop_rho,
            rmsprop_eps: self.rmsprop_eps,
            batch_size: self.batch_size,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            recalibrate_bn: self.recalibrate_bn,
        }
    }

    /// Canonical TOML with every field spelled out.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Short content hash of the fields that determine the trained model.
    /// Output locations and oracle settings do not take part.
    pub fn run_id(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.oracle = None;
        c.oracle_reject_below = None;
        let digest = Sha256::digest(c.canonical().as_bytes());
        hex::encode(&digest[..6])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_id())
    }

    pub fn key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        for line in self.canonical().lines().filter(|l| l.contains(" = ")) {
            let (k, v) = line.split_once(" = ").expect("checked");
            kv.push(k, v.trim_matches('"'));
        }
        kv
    }
}

fn experiment_name(e: Experiment) -> &'static str {
    match e {
        Experiment::MnistRandom => "mnist_random",
        Experiment::MnistExclude => "mnist_exclude",
        Experiment::Phantom => "phantom",
    }
}

/// Train and test images of one run. MNIST images are normalized; phantom
/// truth is kept in HU and normalized for training.
pub struct RunData {
    pub train: Vec<ImageGrid>,
    pub test: Vec<LabeledImage>,
    pub split: Option<DatasetSplit>,
}

/// Loads the MNIST training pool (the first 48000 records of the training
/// file).
pub fn load_mnist_pool(data_dir: &Path) -> Result<Vec<LabeledImage>> {
    let mut all = load_mnist(&data_dir.join(TRAIN_IMAGES), &data_dir.join(TRAIN_LABELS))?;
    if all.len() < EXPERIMENT_POOL {
        return Err(Error::invalid(format!("MNIST training file has {} records, need {EXPERIMENT_POOL}", all.len())));
    }
    all.truncate(EXPERIMENT_POOL);
    Ok(all)
}

fn resized(items: impl Iterator<Item = LabeledImage>, n: usize) -> Result<Vec<LabeledImage>> {
    items
        .map(|r| {
            Ok(LabeledImage {
                image: resize_bilinear(&r.image, n)?,
                label: r.label,
            })
        })
        .collect()
}

pub fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    let n = cfg.model_config().n;
    let limit = |v: Vec<usize>, l: Option<usize>| v.into_iter().take(l.unwrap_or(usize::MAX)).collect::<Vec<_>>();
    match cfg.experiment {
        Experiment::MnistRandom | Experiment::MnistExclude => {
            let pool = load_mnist_pool(&cfg.data_dir)?;
            let split = if cfg.experiment == Experiment::MnistRandom {
                split_random(&pool, cfg.seed)?
            } else {
                split_exclude_digit(&pool, cfg.excluded_digit)?
            };
            let split = DatasetSplit {
                train: limit(split.train, cfg.train_limit),
                test: limit(split.test, cfg.test_limit),
                protocol: split.protocol,
            };
            let train = resized(split.train_items(&pool).cloned(), n)?.into_iter().map(|r| r.image).collect();
            let test = resized(split.test_items(&pool).cloned(), n)?;
            Ok(RunData {
                train,
                test,
                split: Some(split),
            })
        }
        Experiment::Phantom => {
            let spec = PhantomSpec {
                n,
                ..PhantomSpec::default()
            };
            let (n_train, n_test) = (cfg.train_limit.unwrap_or(cfg.phantom_train), cfg.test_limit.unwrap_or(cfg.phantom_test));
            let mut all = generate_phantom_set(&spec, cfg.seed, n_train + n_test)?;
            let test = all.split_off(n_train);
            let train = all.iter().map(|p| hu_to_normalized(&p.image)).collect::<Result<_>>()?;
            Ok(RunData { train, test, split: None })
        }
    }
}

pub const WEIGHTS_FILE: &str = "weights.amap";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const TRAIN_REPORT_FILE: &str = "train_report.txt";
pub const EVAL_REPORT_FILE: &str = "eval_report.txt";
pub const GRID_FILE: &str = "grid.pgm";
pub const CONFIG_FILE: &str = "config.toml";
pub const TIMING_FILE: &str = "timing.txt";

/// Creates the run directory, refusing to reuse one written by a different
/// configuration.
pub fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    let path = dir.join(CONFIG_FILE);
    let mut canon = cfg.clone();
    canon.output_dir = PathBuf::new();
    canon.oracle = None;
    canon.oracle_reject_below = None;
    let text = canon.canonical();
    match std::fs::read_to_string(&path) {
        Ok(existing) if existing != text => {
            return Err(Error::Config(format!(
                "{} belongs to a different configuration; refusing to overwrite",
                dir.display()
            )))
        }
        Ok(_) => {}
        Err(_) => formats::write_file(&path, text.as_bytes())?,
    }
    Ok(dir)
}

/// What a training run leaves behind.
pub struct TrainedRun {
    pub dir: PathBuf,
    pub params: AutomapParams,
    pub report: KeyValues,
}

/// Trains the configured model, resuming from a checkpoint in the run
/// directory when one exists, and writes weights, loss log and report.
pub fn run_training(cfg: &RunConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let dir = prepare_run_dir(cfg)?;
    let started = Instant::now();
    let data = load_run_data(cfg)?;
    let angles = cfg.angle_set();
    let images: Vec<&ImageGrid> = data.train.iter().collect();
    let key = store_key(&images, &angles);
    let (store, status) = cached_sinograms(&cache_path(&cfg.output_dir.join("cache"), &key), &images, &angles)?;
    info!("{} training sinograms ({status:?})", store.len());
    let set = TrainingSet::from_store(&store, &images)?;

    let train_cfg = cfg.train_config();
    let start = if dir.join(CHECKPOINT_OPTIMIZER).exists() {
        Checkpoint::load(&dir)?
    } else {
        crate::train::initial_checkpoint(&cfg.model_config(), &train_cfg)?
    };
    if start.epochs_completed > 0 {
        info!("resuming {} after {} epochs", dir.display(), start.epochs_completed);
    }
    let outcome = resume(&set, &train_cfg, start, Some(&dir))?;
    let log = &outcome.checkpoint.log;
    formats::write_file(&dir.join(LOSS_LOG_FILE), log.to_csv().as_bytes())?;
    formats::write_file(&dir.join(WEIGHTS_FILE), &outcome.params.to_bytes()?)?;

    let mut report = KeyValues::default();
    report.push("run_id", cfg.run_id());
    report.push("train_samples", set.len());
    report.push("training_set_sha256", &key);
    report.push("weights_sha256", hex::encode(Sha256::digest(outcome.params.to_bytes()?)));
    report.push("steps", log.entries.len());
    if let Some(last) = log.entries.last() {
        report.push("final_loss", format!("{:.16e}", last.loss));
        report.push("final_epoch_mean_loss", format!("{:.16e}", log.epoch_mean(last.epoch).unwrap_or(f64::NAN)));
    }
    for (k, v) in &cfg.key_values().entries {
        if !matches!(k.as_str(), "output_dir" | "oracle" | "oracle_reject_below") {
            report.push(format!("config.{k}"), v);
        }
    }
    formats::write_file(&dir.join(TRAIN_REPORT_FILE), report.to_text().as_bytes())?;
    formats::write_file(
        &dir.join(TIMING_FILE),
        format!("train_wall_seconds = {:.1}\n", started.elapsed().as_secs_f64()).as_bytes(),
    )?;
    Ok(TrainedRun {
        dir,
        params: outcome.params,
        report,
    })
}

/// Loads the test-file digits used to gate the oracle, resized to 64x64.
pub fn oracle_gate_set(data_dir: &Path) -> Result<Vec<LabeledImage>> {
    let t10k = crate::data::load_mnist_prefix(&data_dir.join(TEST_IMAGES), &data_dir.join(TEST_LABELS), ORACLE_GATE_SIZE)?;
    resized(t10k.into_iter(), DigitOracle::SIDE)
}

/// Oracle training images: MNIST records outside the experiment pool and
/// outside the gate set (training-file records 48000.. and test-file
/// records 5000..).
pub fn oracle_training_set(data_dir: &Path) -> Result<Vec<LabeledImage>> {
    let train = load_mnist(&data_dir.join(TRAIN_IMAGES), &data_dir.join(TRAIN_LABELS))?;
    let test = load_mnist(&data_dir.join(TEST_IMAGES), &data_dir.join(TEST_LABELS))?;
    resized(
        train.into_iter().skip(EXPERIMENT_POOL).chain(test.into_iter().skip(ORACLE_GATE_SIZE)),
        DigitOracle::SIDE,
    )
}

/// Trains the oracle and checks it against the gate set.
pub fn build_oracle(data_dir: &Path, cfg: &OracleTrainConfig) -> Result<(DigitOracle, f64)> {
    let train = oracle_training_set(data_dir)?;
    let images: Vec<&ImageGrid> = train.iter().map(|r| &r.image).collect();
    let labels: Vec<u32> = train.iter().map(|r| r.label).collect();
    let oracle = train_oracle(&images, &labels, cfg)?;
    let gate = oracle_gate_set(data_dir)?;
    let accuracy = oracle.accuracy(&gate.iter().map(|r| &r.image).collect::<Vec<_>>(), &gate.iter().map(|r| r.label).collect::<Vec<_>>())?;
    Ok((oracle, accuracy))
}

/// Loads oracle weights and applies the accuracy gate.
pub fn load_gated_oracle(path: &Path, data_dir: &Path) -> Result<GatedOracle> {
    let oracle = DigitOracle::load(path)?;
    let gate = oracle_gate_set(data_dir)?;
    oracle.gate(&gate.iter().map(|r| &r.image).collect::<Vec<_>>(), &gate.iter().map(|r| r.label).collect::<Vec<_>>())
}

/// Evaluates `params` on the configured test set and writes the report and
/// grid into the run directory.
pub fn run_evaluation(cfg: &RunConfig, params: &AutomapParams, oracle: Option<&GatedOracle>) -> Result<EvalOutcome> {
    cfg.validate()?;
    if params.config() != &cfg.model_config() {
        return Err(Error::Config(format!(
            "weights were built for {:?}, the configuration describes {:?}",
            params.config(),
            cfg.model_config()
        )));
    }
    let data = load_run_data(cfg)?;
    let images: Vec<&ImageGrid> = data.test.iter().map(|r| &r.image).collect();
    let labels: Vec<u32> = data.test.iter().map(|r| r.label).collect();
    let truth = match cfg.experiment {
        Experiment::Phantom => EvalTruth::Phantoms { images: &images },
        _ => EvalTruth::Digits {
            images: &images,
            labels: &labels,
            oracle: oracle.ok_or_else(|| Error::Config("MNIST evaluation needs a digit oracle (`oracle = ...`)".into()))?,
            reject_below: cfg.oracle_reject_below,
        },
    };
    let mut config = cfg.key_values();
    config.entries.retain(|(k, _)| k != "output_dir" && k != "oracle");
    let outcome = evaluate_run(params, &cfg.angle_set(), truth, &cfg.run_id(), config)?;
    let dir = cfg.run_dir();
    formats::write_file(&dir.join(EVAL_REPORT_FILE), outcome.report.to_text().as_bytes())?;
    formats::write_file(&dir.join(GRID_FILE), &encode_pgm(&outcome.grid))?;
    Ok(outcome)
}
