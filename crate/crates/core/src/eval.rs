//! Reconstruction metrics, the digit oracle that stands in for a human
//! reader, image grids and per-run reports.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::data::{hu_to_unit, normalized_to_hu, resize_bilinear};
use crate::error::{Error, Result};
use crate::formats::{self, Container, Gray8, KeyValues, ModelHeader, WEIGHTS_MAGIC};
use crate::model::{predict, AutomapParams};
use crate::radon::{fbp_reconstruct, forward_project, normalize_sinogram, AngleSet, Domain, ImageGrid};
use crate::tensor::Tensor;
use crate::train::{rmsprop_step, OptimizerState, RmsProp};

/// Threshold separating body from air in the phantom outline metric.
pub const BODY_THRESHOLD_HU: f64 = -500.0;
/// Minimum clean held-out accuracy for the oracle to judge reconstructions.
pub const ORACLE_MIN_ACCURACY: f64 = 0.95;

fn check_pair(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.domain() != b.domain() {
        return Err(Error::invalid(format!(
            "cannot compare a {} image with a {} image",
            a.domain().as_str(),
            b.domain().as_str()
        )));
    }
    if a.n() != b.n() {
        return Err(Error::Shape {
            op: "rmse",
            lhs: vec![a.n(), a.n()],
            rhs: vec![b.n(), b.n()],
        });
    }
    Ok(())
}

pub fn rmse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_pair(a, b)?;
    let sq: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.values().len() as f64).sqrt())
}

/// RMSE in Hounsfield units of a normalized prediction against HU truth.
pub fn hu_rmse(pred: &ImageGrid, truth_hu: &ImageGrid) -> Result<f64> {
    if pred.domain() != Domain::Normalized || truth_hu.domain() != Domain::Hounsfield {
        return Err(Error::invalid("hu_rmse expects a normalized prediction and a HU truth"));
    }
    rmse(&normalized_to_hu(pred)?, truth_hu)
}

/// Intersection over union of the `> -500 HU` masks of prediction and truth.
pub fn body_iou(pred: &ImageGrid, truth_hu: &ImageGrid) -> Result<f64> {
    if pred.domain() != Domain::Normalized || truth_hu.domain() != Domain::Hounsfield {
        return Err(Error::invalid("body_iou expects a normalized prediction and a HU truth"));
    }
    let pred = normalized_to_hu(pred)?;
    check_pair(&pred, truth_hu)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.values().iter().zip(truth_hu.values()) {
        let (p, t) = (p > BODY_THRESHOLD_HU, t > BODY_THRESHOLD_HU);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Two-layer digit classifier on 64x64 normalized images.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitOracle {
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for OracleTrainConfig {
    fn default() -> Self {
        OracleTrainConfig {
            epochs: 8,
            batch_size: 64,
            learning_rate: 5e-4,
            seed: 0,
        }
    }
}

/// One oracle judgement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verdict {
    /// `None` when confidence fell below the rejection threshold.
    pub digit: Option<u32>,
    pub confidence: f64,
}

impl DigitOracle {
    pub const SIDE: usize = 64;
    pub const HIDDEN: usize = 256;
    pub const CLASSES: usize = 10;
    const NAMES: [&'static str; 4] = ["hidden.weight", "hidden.bias", "out.weight", "out.bias"];

    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, h, c) = (Self::SIDE * Self::SIDE, Self::HIDDEN, Self::CLASSES);
        let mut glorot = |fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-a..a))
        };
        DigitOracle {
            hidden_weight: glorot(i, h),
            hidden_bias: Tensor::zeros(&[h]),
            out_weight: glorot(h, c),
            out_bias: Tensor::zeros(&[c]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.hidden_weight, &self.hidden_bias, &self.out_weight, &self.out_bias]
    }

    /// Records the logits of a `B x 4096` batch on `tape`.
    fn record<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<(Var, [Var; 4])> {
        let params = self.tensors().map(|t| tape.param(t));
        let [w1, b1, w2, b2] = params;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, w2)?;
        Ok((tape.add_bias(h, b2)?, params))
    }

    /// Class probabilities, `B x 10`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vx = tape.constant(x);
        let (logits, _) = self.record(&mut tape, vx)?;
        Ok(softmax_rows(tape.value(logits), Self::CLASSES))
    }

    /// Judges each image (resized to 64x64 first when needed). With a
    /// threshold, a top-1 probability below it yields "no digit".
    pub fn classify(&self, images: &[&ImageGrid], reject_below: Option<f64>) -> Result<Vec<Verdict>> {
        let chunks: Vec<Vec<Verdict>> = images
            .par_chunks(256)
            .map(|chunk| {
                let x = oracle_batch(chunk)?;
                let probs = self.probabilities(&x)?;
                Ok(probs
                    .chunks(Self::CLASSES)
                    .map(|p| {
                        let (best, &confidence) = p
                            .iter()
                            .enumerate()
                            .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
                        let rejected = reject_below.map_or(false, |t| confidence < t);
                        Verdict {
                            digit: (!rejected).then_some(best as u32),
                            confidence,
                        }
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }

    pub fn accuracy(&self, images: &[&ImageGrid], labels: &[u32]) -> Result<f64> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::invalid("accuracy needs one label per image"));
        }
        let verdicts = self.classify(images, None)?;
        let hits = verdicts.iter().zip(labels).filter(|(v, &l)| v.digit == Some(l)).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Checks the accuracy bar on clean held-out digits.
    pub fn gate(self, images: &[&ImageGrid], labels: &[u32]) -> Result<GatedOracle> {
        let accuracy = self.accuracy(images, labels)?;
        if accuracy < ORACLE_MIN_ACCURACY {
            return Err(Error::invalid(format!(
                "digit oracle accuracy {accuracy:.4} is below the {ORACLE_MIN_ACCURACY} bar; refusing to judge"
            )));
        }
        Ok(GatedOracle {
            oracle: self,
            accuracy,
            held_out: labels.len(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            n: Self::SIDE as u32,
            input_len: (Self::SIDE * Self::SIDE) as u32,
            dense: vec![Self::HIDDEN as u32, Self::CLASSES as u32],
            conv: vec![],
        };
        let tensors = Self::NAMES
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        formats::encode_container(WEIGHTS_MAGIC, &Container { header, tensors })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = formats::decode_container(WEIGHTS_MAGIC, bytes)?;
        let fresh = Self::init(0);
        let names: Vec<&str> = c.tensors.iter().map(|(n, _)| n.as_str()).collect();
        if names != Self::NAMES
            || c.tensors.iter().zip(fresh.tensors()).any(|((_, t), f)| t.dims() != f.dims())
        {
            return Err(Error::format("oracle weights", "unexpected tensor names or shapes"));
        }
        let mut it = c.tensors.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("four tensors checked above");
        Ok(DigitOracle {
            hidden_weight: next(),
            hidden_bias: next(),
            out_weight: next(),
            out_bias: next(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        formats::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&formats::read_file(path)?)
    }
}

fn oracle_batch(images: &[&ImageGrid]) -> Result<Tensor> {
    let side = DigitOracle::SIDE;
    let mut data = Vec::with_capacity(images.len() * side * side);
    for img in images {
        if img.domain() != Domain::Normalized {
            return Err(Error::invalid("the digit oracle reads normalized images"));
        }
        if img.n() == side {
            data.extend_from_slice(img.values());
        } else {
            data.extend_from_slice(resize_bilinear(img, side)?.values());
        }
    }
    Tensor::new(vec![images.len(), side * side], data)
}

/// Softmax cross-entropy training with RMSProp and seeded shuffling.
pub fn train_oracle(images: &[&ImageGrid], labels: &[u32], cfg: &OracleTrainConfig) -> Result<DigitOracle> {
    if images.len() < 2 || images.len() != labels.len() {
        return Err(Error::invalid("oracle training needs at least two labelled images"));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= DigitOracle::CLASSES) {
        return Err(Error::invalid(format!("label {l} outside 0..=9")));
    }
    let mut oracle = DigitOracle::init(cfg.seed);
    let mut state = OptimizerState::zeros_like(
        DigitOracle::NAMES.iter().map(|s| s.to_string()).collect(),
        &oracle.tensors(),
    );
    let opt = RmsProp {
        learning_rate: cfg.learning_rate,
        rho: 0.9,
        eps: 1e-8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in crate::train::batch_plan(&order, cfg.batch_size) {
            let picked: Vec<&ImageGrid> = batch.iter().map(|&i| images[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i] as usize).collect();
            let x = oracle_batch(&picked)?;
            let grads = {
                let mut tape = Tape::new();
                let vx = tape.constant(&x);
                let (logits, params) = oracle.record(&mut tape, vx)?;
                let loss = tape.softmax_cross_entropy(logits, &targets)?;
                total += tape.value(loss)[0];
                let mut g = tape.backward(loss)?;
                params.map(|p| g.take(p).expect("parameter gradient")).to_vec()
            };
            let DigitOracle {
                hidden_weight,
                hidden_bias,
                out_weight,
                out_bias,
            } = &mut oracle;
            rmsprop_step(&mut [hidden_weight, hidden_bias, out_weight, out_bias], &grads, &mut state, &opt)?;
            steps += 1;
        }
        info!("oracle epoch {}/{}: mean loss {:.4}", epoch + 1, cfg.epochs, total / steps as f64);
    }
    Ok(oracle)
}

/// An oracle that has passed the accuracy gate.
#[derive(Clone, Debug)]
pub struct GatedOracle {
    pub oracle: DigitOracle,
    pub accuracy: f64,
    pub held_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FalseDigitResult {
    pub rate: f64,
    /// `true` where the reconstruction was judged a different digit or none.
    pub false_digit: Vec<bool>,
    pub verdicts: Vec<Verdict>,
    /// `confusion[true][judged]`, with column 10 counting "no digit".
    pub confusion: Vec<[usize; 11]>,
}

pub fn false_digit_rate(
    recons: &[&ImageGrid],
    labels: &[u32],
    oracle: &GatedOracle,
    reject_below: Option<f64>,
) -> Result<FalseDigitResult> {
    if recons.is_empty() || recons.len() != labels.len() {
        return Err(Error::invalid("false_digit_rate needs one label per reconstruction"));
    }
    let verdicts = oracle.oracle.classify(recons, reject_below)?;
    let mut confusion = vec![[0usize; 11]; DigitOracle::CLASSES];
    let false_digit: Vec<bool> = verdicts
        .iter()
        .zip(labels)
        .map(|(v, &l)| {
            confusion[l as usize][v.digit.map_or(10, |d| d as usize)] += 1;
            v.digit != Some(l)
        })
        .collect();
    let rate = false_digit.iter().filter(|&&f| f).count() as f64 / labels.len() as f64;
    Ok(FalseDigitResult {
        rate,
        false_digit,
        verdicts,
        confusion,
    })
}

/// Display value in `[0, 1]`: normalized images as is, HU images through the
/// standard window.
fn display_unit(img: &ImageGrid, v: f64) -> f64 {
    match img.domain() {
        Domain::Normalized => v,
        Domain::Hounsfield => hu_to_unit(v),
    }
}

pub const GRID_SEPARATOR: usize = 2;

/// Rows of (truth, FBP, AUTOMAP) separated by 2-pixel white lines; values
/// map linearly to `floor(255 v)`.
pub fn render_grid(samples: &[(&ImageGrid, &ImageGrid, &ImageGrid)]) -> Result<Gray8> {
    let n = samples
        .first()
        .map(|s| s.0.n())
        .ok_or_else(|| Error::invalid("render_grid needs at least one sample"))?;
    if samples.iter().any(|(a, b, c)| a.n() != n || b.n() != n || c.n() != n) {
        return Err(Error::invalid("render_grid: all images must share one size"));
    }
    let sep = GRID_SEPARATOR;
    let width = 3 * n + 2 * sep;
    let height = samples.len() * n + (samples.len() - 1) * sep;
    let mut pixels = vec![255u8; width * height];
    for (r, (a, b, c)) in samples.iter().enumerate() {
        for (k, img) in [a, b, c].into_iter().enumerate() {
            let (y0, x0) = (r * (n + sep), k * (n + sep));
            for row in 0..n {
                for col in 0..n {
                    let v = display_unit(img, img.get(row, col)).clamp(0.0, 1.0);
                    pixels[(y0 + row) * width + x0 + col] = (v * 255.0).floor() as u8;
                }
            }
        }
    }
    Ok(Gray8 { width, height, pixels })
}

/// Network input for one image under `angles`.
pub fn encode_input(img: &ImageGrid, angles: &AngleSet) -> Result<Vec<f64>> {
    Ok(normalize_sinogram(&forward_project(img, angles)?).into_data())
}

/// Eval-mode reconstructions of normalized images, in input order.
pub fn reconstruct_all(params: &AutomapParams, images: &[&ImageGrid], angles: &AngleSet) -> Result<Vec<ImageGrid>> {
    let cfg = params.config();
    if cfg.input_len != angles.len() * cfg.n {
        return Err(Error::Shape {
            op: "model input vs angle preset",
            lhs: vec![cfg.input_len],
            rhs: vec![angles.len(), cfg.n],
        });
    }
    let chunks: Vec<Vec<ImageGrid>> = images
        .par_chunks(32)
        .map(|chunk| {
            let mut x = Vec::with_capacity(chunk.len() * cfg.input_len);
            for img in chunk {
                if img.n() != cfg.n {
                    return Err(Error::invalid(format!("image is {}x{}, model expects {}", img.n(), img.n(), cfg.n)));
                }
                x.extend(encode_input(img, angles)?);
            }
            let out = predict(params, &Tensor::new(vec![chunk.len(), cfg.input_len], x)?)?;
            out.data()
                .chunks(cfg.n * cfg.n)
                .zip(chunk)
                .map(|(v, img)| ImageGrid::normalized_clamped(cfg.n, img.pitch_mm(), v.to_vec()))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Filtered-backprojection baseline for a normalized image.
pub fn fbp_baseline(img: &ImageGrid, angles: &AngleSet) -> Result<ImageGrid> {
    let out = fbp_reconstruct(&forward_project(img, angles)?, Domain::Normalized)?;
    if out.n() == img.n() {
        Ok(out)
    } else {
        resize_bilinear(&out, img.n())
    }
}

/// Which test set an evaluation runs on.
pub enum EvalTruth<'a> {
    /// Normalized MNIST digits with labels, judged by the oracle.
    Digits {
        images: &'a [&'a ImageGrid],
        labels: &'a [u32],
        oracle: &'a GatedOracle,
        reject_below: Option<f64>,
    },
    /// Phantoms in Hounsfield units.
    Phantoms { images: &'a [&'a ImageGrid] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub run_id: String,
    pub rmse_per_sample: Vec<f64>,
    pub rmse_mean: f64,
    pub fbp_rmse_mean: f64,
    pub false_digits: Option<FalseDigitResult>,
    pub oracle_accuracy: Option<f64>,
    pub hu_rmse_per_sample: Option<Vec<f64>>,
    pub hu_rmse_mean: Option<f64>,
    pub body_iou_mean: Option<f64>,
    pub config: KeyValues,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(",")
}

impl EvalReport {
    pub fn n_samples(&self) -> usize {
        self.rmse_per_sample.len()
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("run_id", &self.run_id);
        kv.push("n_samples", self.n_samples());
        kv.push("rmse_mean", format!("{:.16e}", self.rmse_mean));
        kv.push("fbp_rmse_mean", format!("{:.16e}", self.fbp_rmse_mean));
        if let Some(f) = &self.false_digits {
            kv.push("false_digit_rate", format!("{:.16e}", f.rate));
            kv.push("false_digit_count", f.false_digit.iter().filter(|&&b| b).count());
            for (digit, row) in f.confusion.iter().enumerate() {
                if row.iter().any(|&c| c > 0) {
                    let cells: Vec<String> = row.iter().map(usize::to_string).collect();
                    kv.push(format!("confusion.{digit}"), cells.join(","));
                }
            }
        }
        if let Some(a) = self.oracle_accuracy {
            kv.push("oracle_accuracy", format!("{a:.6}"));
        }
        if let Some(h) = self.hu_rmse_mean {
            kv.push("hu_rmse_mean", format!("{h:.16e}"));
        }
        if let Some(i) = self.body_iou_mean {
            kv.push("body_iou_mean", format!("{i:.16e}"));
        }
        kv.push("rmse_per_sample", join(&self.rmse_per_sample));
        if let Some(h) = &self.hu_rmse_per_sample {
            kv.push("hu_rmse_per_sample", join(h));
        }
        for (k, v) in &self.config.entries {
            kv.push(format!("config.{k}"), v);
        }
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_key_values().to_text()
    }
}

/// Everything an evaluation produces.
pub struct EvalOutcome {
    pub report: EvalReport,
    /// Grid of the first eight samples.
    pub grid: Gray8,
    pub reconstructions: Vec<ImageGrid>,
}

pub const GRID_SAMPLES: usize = 8;

/// Reconstructs every test image in eval mode and scores it against truth
/// and against the FBP baseline.
pub fn evaluate_run(
    params: &AutomapParams,
    angles: &AngleSet,
    truth: EvalTruth<'_>,
    run_id: &str,
    config: KeyValues,
) -> Result<EvalOutcome> {
    let (images, hu_truth): (Vec<ImageGrid>, Option<&[&ImageGrid]>) = match &truth {
        EvalTruth::Digits { images, .. } => (images.iter().map(|&i| i.clone()).collect(), None),
        EvalTruth::Phantoms { images } => (
            images.iter().map(|&i| crate::data::hu_to_normalized(i)).collect::<Result<_>>()?,
            Some(images),
        ),
    };
    if images.is_empty() {
        return Err(Error::invalid("evaluation needs a non-empty test set"));
    }
    let refs: Vec<&ImageGrid> = images.iter().collect();
    let recons = reconstruct_all(params, &refs, angles)?;
    let fbp: Vec<ImageGrid> = refs.par_iter().map(|img| fbp_baseline(img, angles)).collect::<Result<_>>()?;
    let rmse_per_sample = refs.iter().zip(&recons).map(|(t, r)| rmse(r, t)).collect::<Result<Vec<_>>>()?;
    let fbp_rmse = refs.iter().zip(&fbp).map(|(t, r)| rmse(r, t)).collect::<Result<Vec<_>>>()?;

    let mut report = EvalReport {
        run_id: run_id.to_string(),
        rmse_mean: mean(&rmse_per_sample),
        rmse_per_sample,
        fbp_rmse_mean: mean(&fbp_rmse),
        false_digits: None,
        oracle_accuracy: None,
        hu_rmse_per_sample: None,
        hu_rmse_mean: None,
        body_iou_mean: None,
        config,
    };
    match truth {
        EvalTruth::Digits {
            labels,
            oracle,
            reject_below,
            ..
        } => {
            let rec_refs: Vec<&ImageGrid> = recons.iter().collect();
            report.false_digits = Some(false_digit_rate(&rec_refs, labels, oracle, reject_below)?);
            report.oracle_accuracy = Some(oracle.accuracy);
        }
        EvalTruth::Phantoms { .. } => {
            let hu = hu_truth.expect("phantom truth");
            let per = recons.iter().zip(hu).map(|(r, t)| hu_rmse(r, t)).collect::<Result<Vec<_>>>()?;
            let iou = recons.iter().zip(hu).map(|(r, t)| body_iou(r, t)).collect::<Result<Vec<_>>>()?;
            report.hu_rmse_mean = Some(mean(&per));
            report.hu_rmse_per_sample = Some(per);
            report.body_iou_mean = Some(mean(&iou));
        }
    }
    let shown: Vec<(&ImageGrid, &ImageGrid, &ImageGrid)> = refs
        .iter()
        .zip(&fbp)
        .zip(&recons)
        .take(GRID_SAMPLES)
        .map(|((t, f), r)| (*t, f, r))
        .collect();
    let grid = render_grid(&shown)?;
    Ok(EvalOutcome {
        report,
        grid,
        reconstructions: recons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(values: Vec<f64>, domain: Domain) -> ImageGrid {
        let n = (values.len() as f64).sqrt() as usize;
        ImageGrid::new(n, 5.0, values, domain).unwrap()
    }

    #[test]
    fn rmse_trivial_cases() {
        let a = img((0..16).map(|i| i as f64 / 20.0).collect(), Domain::Normalized);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b = img(a.values().iter().map(|v| v + 0.1).collect(), Domain::Normalized);
        assert!((rmse(&a, &b).unwrap() - 0.1).abs() < 1e-15);
        let h = img(vec![0.0; 16], Domain::Hounsfield);
        assert!(rmse(&a, &h).is_err());
    }

    #[test]
    fn hu_rmse_scale() {
        let truth = img(vec![0.0; 16], Domain::Hounsfield);
        let perfect = crate::data::hu_to_normalized(&truth).unwrap();
        assert!(hu_rmse(&perfect, &truth).unwrap().abs() < 1e-9);
        let off = img(perfect.values().iter().map(|v| v + 1.0 / 3000.0).collect(), Domain::Normalized);
        assert!((hu_rmse(&off, &truth).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grid_layout_and_quantization() {
        let half = ImageGrid::filled(64, 5.0, 0.5, Domain::Normalized).unwrap();
        let g = render_grid(&[(&half, &half, &half)]).unwrap();
        assert_eq!((g.width, g.height), (196, 64));
        assert_eq!(g.pixels[0], 127);
        assert_eq!(g.pixels[64], 255);
        let g2 = render_grid(&[(&half, &half, &half), (&half, &half, &half)]).unwrap();
        assert_eq!(g2.height, 130);
        assert_eq!(g2, render_grid(&[(&half, &half, &half), (&half, &half, &half)]).unwrap());
    }

    #[test]
    fn body_iou_bounds() {
        let truth = img(vec![0.0, 0.0, -1000.0, -1000.0], Domain::Hounsfield);
        let pred = crate::data::hu_to_normalized(&truth).unwrap();
        assert_eq!(body_iou(&pred, &truth).unwrap(), 1.0);
        let all_body = img(vec![0.5; 4], Domain::Normalized);
        assert_eq!(body_iou(&all_body, &truth).unwrap(), 0.5);
    }

    #[test]
    fn oracle_round_trip_and_gate() {
        let o = DigitOracle::init(3);
        let back = DigitOracle::from_bytes(&o.to_bytes().unwrap()).unwrap();
        assert_eq!(o, back);
        let zero = ImageGrid::filled(64, 5.0, 0.0, Domain::Normalized).unwrap();
        let imgs = vec![&zero; 10];
        let labels: Vec<u32> = (0..10).collect();
        // A constant input gets a constant verdict, so at most one label hits.
        assert!(o.accuracy(&imgs, &labels).unwrap() <= 0.1);
        assert!(o.gate(&imgs, &labels).is_err());
    }

    #[test]
    fn report_mean_matches_samples() {
        let r = EvalReport {
            run_id: "x".into(),
            rmse_per_sample: vec![0.1, 0.2, 0.4],
            rmse_mean: mean(&[0.1, 0.2, 0.4]),
            fbp_rmse_mean: 0.5,
            false_digits: None,
            oracle_accuracy: None,
            hu_rmse_per_sample: None,
            hu_rmse_mean: None,
            body_iou_mean: None,
            config: KeyValues::default(),
        };
        let kv = KeyValues::parse(&r.to_text()).unwrap();
        let per: Vec<f64> = kv.get("rmse_per_sample").unwrap().split(',').map(|s| s.parse().unwrap()).collect();
        let m: f64 = kv.get("rmse_mean").unwrap().parse().unwrap();
        assert!((mean(&per) - m).abs() < 1e-12);
    }
}
