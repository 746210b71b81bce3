//! Training: RMSProp on the MSE between reconstruction and target image,
//! with seeded per-epoch shuffling, checkpoints and a loss log.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::{self, Container, OPTIMIZER_MAGIC};
use crate::autodiff::BatchStats;
use crate::model::{batch_statistics, init_params, loss_and_gradients, predict, AutomapConfig, AutomapParams};
use crate::radon::{forward_project, normalize_sinogram, AngleSet, ImageGrid};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint after every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Replace the moving-average batch-norm statistics by population
    /// statistics of the training set once training ends.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 2e-5,
            rmsprop_rho: 0.9,
            rmsprop_eps: 1e-8,
            batch_size: 64,
            seed: 0,
            checkpoint_every: 5,
            recalibrate_bn: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.rmsprop_rho) || !(self.rmsprop_eps > 0.0) {
            return Err(Error::invalid("rmsprop rho must be in [0, 1) and eps positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        Ok(())
    }

    fn rmsprop(&self) -> RmsProp {
        RmsProp {
            learning_rate: self.learning_rate,
            rho: self.rmsprop_rho,
            eps: self.rmsprop_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub rho: f64,
    pub eps: f64,
}

/// Squared-gradient moving averages, one per trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub names: Vec<String>,
    pub accumulators: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros_like(names: Vec<String>, params: &[&Tensor]) -> Self {
        OptimizerState {
            names,
            accumulators: params.iter().map(|t| Tensor::zeros(t.dims())).collect(),
        }
    }
}

/// `v <- rho v + (1 - rho) g^2`, `theta <- theta - lr g / (sqrt(v) + eps)`.
///
/// Every gradient is checked before any parameter moves; a non-finite
/// gradient aborts the whole step and names the parameter.
pub fn rmsprop_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    opt: &RmsProp,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.accumulators.len() {
        return Err(Error::invalid(format!(
            "rmsprop: {} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            state.accumulators.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.accumulators).enumerate() {
        if p.len() != g.len() || p.dims() != v.dims() {
            return Err(Error::Shape {
                op: "rmsprop",
                lhs: p.dims().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            let name = state.names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.accumulators.iter_mut()) {
        for ((theta, &g), acc) in p.data_mut().iter_mut().zip(g).zip(v.data_mut()) {
            *acc = opt.rho * *acc + (1.0 - opt.rho) * g * g;
            *theta -= opt.learning_rate * g / (acc.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Network inputs and target images, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub input_len: usize,
    pub target_side: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl TrainingSet {
    pub fn new(input_len: usize, target_side: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        let pixels = target_side * target_side;
        if input_len == 0 || inputs.len() % input_len != 0 || targets.len() != inputs.len() / input_len * pixels {
            return Err(Error::invalid(format!(
                "training set: {} inputs of width {input_len} vs {} target values of {target_side}^2",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(TrainingSet {
            input_len,
            target_side,
            inputs,
            targets,
        })
    }

    /// Projects every normalized image and pairs the sinogram with the image.
    pub fn from_images(images: &[&ImageGrid], angles: &AngleSet) -> Result<Self> {
        let store = precompute_sinograms(images, angles)?;
        Self::from_store(&store, images)
    }

    pub fn from_store(store: &SinogramStore, images: &[&ImageGrid]) -> Result<Self> {
        let side = images.first().map(|i| i.n()).ok_or_else(|| Error::invalid("no images"))?;
        let targets: Vec<f64> = images.iter().flat_map(|i| i.values().iter().copied()).collect();
        Self::new(store.row_len, side, store.rows.clone(), targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_len
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Gathers the given rows into `(B x input_len, B x 1 x n x n)` tensors.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let pixels = self.target_side * self.target_side;
        let mut x = Vec::with_capacity(indices.len() * self.input_len);
        let mut y = Vec::with_capacity(indices.len() * pixels);
        for &i in indices {
            x.extend_from_slice(&self.inputs[i * self.input_len..(i + 1) * self.input_len]);
            y.extend_from_slice(&self.targets[i * pixels..(i + 1) * pixels]);
        }
        Ok((
            Tensor::new(vec![indices.len(), self.input_len], x)?,
            Tensor::new(vec![indices.len(), 1, self.target_side, self.target_side], y)?,
        ))
    }
}

/// Splits a permutation into batches of `batch_size`. A trailing batch of
/// one sample is merged into the previous batch.
pub fn batch_plan(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("at least one batch").extend(last);
    }
    batches
}

/// Sample order for `epoch` (0-based), a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossEntry {
    /// 1-based epoch.
    pub epoch: usize,
    /// 0-based batch index within the epoch.
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub entries: Vec<LossEntry>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{:.16e}\n", e.epoch, e.step, e.loss));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("epoch,step,loss") {
            return Err(Error::format("loss log", "missing header"));
        }
        let entries = lines
            .map(|line| {
                let bad = || Error::format("loss log", format!("bad line `{line}`"));
                let mut f = line.split(',');
                let epoch = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                let step = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                let loss = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                Ok(LossEntry { epoch, step, loss })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LossLog { entries })
    }

    /// Mean loss over the entries of one epoch.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self.entries.iter().filter(|e| e.epoch == epoch).map(|e| e.loss).collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// Parameters, optimizer state and loss history after some number of whole
/// epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: AutomapParams,
    pub optimizer: OptimizerState,
    pub epochs_completed: usize,
    pub log: LossLog,
}

pub const CHECKPOINT_WEIGHTS: &str = "checkpoint.amap";
pub const CHECKPOINT_OPTIMIZER: &str = "checkpoint.aopt";
pub const CHECKPOINT_LOSS_LOG: &str = "checkpoint.loss.csv";

impl Checkpoint {
    pub fn optimizer_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Tensor)> = self
            .optimizer
            .names
            .iter()
            .cloned()
            .zip(self.optimizer.accumulators.iter().cloned())
            .collect();
        tensors.push(("epochs_completed".into(), Tensor::scalar(self.epochs_completed as f64)));
        formats::encode_container(
            OPTIMIZER_MAGIC,
            &Container {
                header: self.params.to_container().header,
                tensors,
            },
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        formats::write_file(&dir.join(CHECKPOINT_WEIGHTS), &self.params.to_bytes()?)?;
        formats::write_file(&dir.join(CHECKPOINT_LOSS_LOG), self.log.to_csv().as_bytes())?;
        formats::write_file(&dir.join(CHECKPOINT_OPTIMIZER), &self.optimizer_bytes()?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = AutomapParams::from_bytes(&formats::read_file(&dir.join(CHECKPOINT_WEIGHTS))?)?;
        let c = formats::decode_container(OPTIMIZER_MAGIC, &formats::read_file(&dir.join(CHECKPOINT_OPTIMIZER))?)?;
        if c.header != params.to_container().header {
            return Err(Error::format("optimizer state", "architecture differs from checkpoint weights"));
        }
        let mut tensors = c.tensors;
        let epochs = match tensors.pop() {
            Some((name, t)) if name == "epochs_completed" && t.is_scalar() => t.data()[0] as usize,
            _ => return Err(Error::format("optimizer state", "missing epochs_completed")),
        };
        let names = params.trainable_names();
        let expected: Vec<(&String, &[usize])> = names.iter().zip(params.trainable().into_iter().map(|t| t.dims())).collect();
        if tensors.len() != expected.len()
            || tensors.iter().zip(&expected).any(|((n, t), (en, ed))| n != *en || t.dims() != *ed)
        {
            return Err(Error::format("optimizer state", "accumulators do not match parameters"));
        }
        let (names, accumulators) = tensors.into_iter().unzip();
        let log_path = dir.join(CHECKPOINT_LOSS_LOG);
        let log = LossLog::parse_csv(&std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?)?;
        if log.entries.last().map_or(0, |e| e.epoch) != epochs {
            return Err(Error::format("checkpoint", "loss log does not end at the checkpointed epoch"));
        }
        Ok(Checkpoint {
            params,
            optimizer: OptimizerState { names, accumulators },
            epochs_completed: epochs,
            log,
        })
    }
}

/// Result of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final weights, with recalibrated batch-norm statistics if requested.
    pub params: AutomapParams,
    /// Training state to resume from (moving-average statistics).
    pub checkpoint: Checkpoint,
}

/// Fresh parameters and optimizer state for `model_cfg` seeded by `cfg.seed`.
pub fn initial_checkpoint(model_cfg: &AutomapConfig, cfg: &TrainConfig) -> Result<Checkpoint> {
    let params = init_params(model_cfg, cfg.seed)?;
    let optimizer = OptimizerState::zeros_like(params.trainable_names(), &params.trainable());
    Ok(Checkpoint {
        params,
        optimizer,
        epochs_completed: 0,
        log: LossLog::default(),
    })
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(
    set: &TrainingSet,
    cfg: &TrainConfig,
    model_cfg: &AutomapConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    resume(set, cfg, initial_checkpoint(model_cfg, cfg)?, checkpoint_dir)
}

/// Continues a run from `start` until `cfg.epochs` epochs are complete.
pub fn resume(
    set: &TrainingSet,
    cfg: &TrainConfig,
    start: Checkpoint,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.len() < 2 {
        return Err(Error::invalid("training needs at least two samples"));
    }
    let model_cfg = start.params.config().clone();
    if set.input_len != model_cfg.input_len || set.target_side != model_cfg.n {
        return Err(Error::invalid(format!(
            "training set ({} inputs, {}^2 targets) does not fit model ({} inputs, {}^2 outputs)",
            set.input_len, set.target_side, model_cfg.input_len, model_cfg.n
        )));
    }
    let opt = cfg.rmsprop();
    let mut ck = start;
    let started = Instant::now();
    while ck.epochs_completed < cfg.epochs {
        let epoch = ck.epochs_completed;
        let order = epoch_order(set.len(), cfg.seed, epoch);
        for (step, batch) in batch_plan(&order, cfg.batch_size).iter().enumerate() {
            let (x, y) = set.batch(batch)?;
            let g = loss_and_gradients(&ck.params, &x, &y)?;
            if !g.loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {} step {step}", epoch + 1)));
            }
            rmsprop_step(&mut ck.params.trainable_mut(), &g.grads, &mut ck.optimizer, &opt)?;
            ck.params.fold_batch_stats(&g.batch_stats)?;
            ck.log.entries.push(LossEntry {
                epoch: epoch + 1,
                step,
                loss: g.loss,
            });
        }
        ck.epochs_completed += 1;
        info!(
            "epoch {}/{}: mean loss {:.6e} ({:.0}s elapsed)",
            ck.epochs_completed,
            cfg.epochs,
            ck.log.epoch_mean(ck.epochs_completed).unwrap_or(f64::NAN),
            started.elapsed().as_secs_f64()
        );
        let due = cfg.checkpoint_every > 0 && ck.epochs_completed % cfg.checkpoint_every == 0;
        if let Some(dir) = checkpoint_dir {
            if due || ck.epochs_completed == cfg.epochs {
                ck.save(dir)?;
            }
        }
    }
    let mut params = ck.params.clone();
    if cfg.recalibrate_bn {
        recalibrate_batch_norm(&mut params, set, cfg.batch_size)?;
    }
    Ok(TrainOutcome { params, checkpoint: ck })
}

/// Sets every running mean and variance to the statistics of the whole
/// training set under train-mode normalization, accumulated batch by batch.
///
/// The moving averages lag behind the weights while they change quickly;
/// after this pass eval-mode output on the training set equals the
/// full-batch train-mode output.
pub fn recalibrate_batch_norm(params: &mut AutomapParams, set: &TrainingSet, batch_size: usize) -> Result<()> {
    let order: Vec<usize> = (0..set.len()).collect();
    let mut sums: Option<Vec<(Vec<f64>, Vec<f64>)>> = None;
    for rows in batch_plan(&order, batch_size.max(2)) {
        let (x, _) = set.batch(&rows)?;
        let stats = batch_statistics(params, &x)?;
        let w = rows.len() as f64;
        let acc = sums.get_or_insert_with(|| {
            stats.iter().map(|s| (vec![0.0; s.mean.len()], vec![0.0; s.mean.len()])).collect()
        });
        for ((m1, m2), s) in acc.iter_mut().zip(&stats) {
            for (i, (&m, &v)) in s.mean.iter().zip(&s.var).enumerate() {
                m1[i] += w * m;
                m2[i] += w * (v + m * m);
            }
        }
    }
    let total = set.len() as f64;
    let stats: Vec<BatchStats> = sums
        .unwrap_or_default()
        .into_iter()
        .map(|(m1, m2)| {
            let mean: Vec<f64> = m1.iter().map(|s| s / total).collect();
            let var = m2.iter().zip(&mean).map(|(s, m)| (s / total - m * m).max(0.0)).collect();
            BatchStats { mean, var }
        })
        .collect();
    params.set_batch_stats(&stats)
}

/// Eval-mode mean squared error over the whole set, in chunks of `chunk`.
pub fn dataset_mse(params: &AutomapParams, set: &TrainingSet, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let order: Vec<usize> = (0..set.len()).collect();
    for rows in order.chunks(chunk.max(1)) {
        let (x, y) = set.batch(rows)?;
        let out = predict(params, &x)?;
        total += out.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / set.targets.len() as f64)
}

/// Normalized network inputs for a list of images, keyed by a content hash
/// of the angle set, grid size, pitch and image data.
#[derive(Clone, Debug, PartialEq)]
pub struct SinogramStore {
    pub key: String,
    pub row_len: usize,
    pub rows: Vec<f64>,
}

impl SinogramStore {
    pub fn len(&self) -> usize {
        self.rows.len() / self.row_len.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.row_len..(i + 1) * self.row_len]
    }
}

pub fn store_key(images: &[&ImageGrid], angles: &AngleSet) -> String {
    let mut h = Sha256::new();
    h.update(b"sinogram-store-v1");
    for a in angles.degrees() {
        h.update(a.to_le_bytes());
    }
    if let Some(first) = images.first() {
        h.update((first.n() as u64).to_le_bytes());
        h.update(first.pitch_mm().to_le_bytes());
    }
    h.update((images.len() as u64).to_le_bytes());
    for img in images {
        for v in img.values() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Projects and normalizes every image (in parallel, collected in order).
pub fn precompute_sinograms(images: &[&ImageGrid], angles: &AngleSet) -> Result<SinogramStore> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to project"))?;
    if images.iter().any(|i| i.n() != first.n() || i.pitch_mm() != first.pitch_mm()) {
        return Err(Error::invalid("all images in a store must share size and pitch"));
    }
    let row_len = angles.len() * first.n();
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| Ok(normalize_sinogram(&forward_project(img, angles)?).into_data()))
        .collect::<Result<_>>()?;
    Ok(SinogramStore {
        key: store_key(images, angles),
        row_len,
        rows: rows.concat(),
    })
}

const STORE_MAGIC: &[u8; 4] = b"SCAC";

fn encode_store(s: &SinogramStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + s.key.len() + s.rows.len() * 8);
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&(s.key.len() as u32).to_le_bytes());
    out.extend_from_slice(s.key.as_bytes());
    out.extend_from_slice(&(s.row_len as u64).to_le_bytes());
    out.extend_from_slice(&(s.rows.len() as u64).to_le_bytes());
    for v in &s.rows {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_store(bytes: &[u8]) -> Option<SinogramStore> {
    let rest = bytes.strip_prefix(STORE_MAGIC)?;
    let key_len = u32::from_le_bytes(rest.get(..4)?.try_into().ok()?) as usize;
    let key = String::from_utf8(rest.get(4..4 + key_len)?.to_vec()).ok()?;
    let rest = &rest[4 + key_len..];
    let row_len = u64::from_le_bytes(rest.get(..8)?.try_into().ok()?) as usize;
    let count = u64::from_le_bytes(rest.get(8..16)?.try_into().ok()?) as usize;
    let data = rest.get(16..)?;
    if data.len() != count * 8 {
        return None;
    }
    let rows = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Some(SinogramStore { key, row_len, rows })
}

/// Outcome of a cache lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
}

/// Loads the store at `path` if its key matches, otherwise recomputes and
/// rewrites it.
pub fn cached_sinograms(path: &Path, images: &[&ImageGrid], angles: &AngleSet) -> Result<(SinogramStore, CacheStatus)> {
    let key = store_key(images, angles);
    if let Ok(bytes) = std::fs::read(path) {
        if let Some(store) = decode_store(&bytes) {
            if store.key == key {
                return Ok((store, CacheStatus::Hit));
            }
        }
    }
    let store = precompute_sinograms(images, angles)?;
    formats::write_file(path, &encode_store(&store))?;
    Ok((store, CacheStatus::Miss))
}

/// Default cache location for a store key under `dir`.
pub fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("sino-{}.cache", &key[..16.min(key.len())]))
}
