//! The AUTOMAP network: three dense layers with batch norm and tanh, a
//! reshape to the image grid, then three convolutions with ReLU (batch norm
//! on all but the last).

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormMode, BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::formats::{self, Container, ModelHeader, WEIGHTS_MAGIC};
use crate::radon::AngleSet;
use crate::tensor::Tensor;

/// One convolution layer: `filters` output channels, square odd kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 64x64 output, dense widths `[2n^2, n^2, n^2]`.
    Full,
    /// 32x32 output with the same structure, for quick runs.
    Small,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Preset::Full),
            "small" => Ok(Preset::Small),
            other => Err(Error::invalid(format!("unknown model preset `{other}` (expected full or small)"))),
        }
    }

    pub fn side(self) -> usize {
        match self {
            Preset::Full => 64,
            Preset::Small => 32,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::Small => "small",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AutomapConfig {
    /// Output image side.
    pub n: usize,
    /// Sinogram entries per sample (`angles * bins`).
    pub input_len: usize,
    pub fc_dims: Vec<usize>,
    pub conv: Vec<ConvSpec>,
}

impl AutomapConfig {
    pub fn preset(preset: Preset, angles: &AngleSet) -> Self {
        let n = preset.side();
        AutomapConfig {
            n,
            input_len: angles.len() * n,
            fc_dims: vec![2 * n * n, n * n, n * n],
            conv: vec![
                ConvSpec { filters: 64, kernel: 5 },
                ConvSpec { filters: 64, kernel: 5 },
                ConvSpec { filters: 1, kernel: 7 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("model config: {msg}")));
        if self.n < 2 || self.input_len == 0 {
            return bad(format!("n = {} and input_len = {} must be positive", self.n, self.input_len));
        }
        if self.fc_dims.last() != Some(&(self.n * self.n)) || self.fc_dims.contains(&0) {
            return bad(format!("last dense width must be n^2 = {}, got {:?}", self.n * self.n, self.fc_dims));
        }
        match self.conv.last() {
            Some(last) if last.filters == 1 => {}
            _ => return bad("last convolution must have exactly one filter".into()),
        }
        if let Some(c) = self.conv.iter().find(|c| c.kernel % 2 == 0 || c.filters == 0) {
            return bad(format!("convolution {c:?} needs an odd kernel and at least one filter"));
        }
        Ok(())
    }

    pub(crate) fn header(&self) -> ModelHeader {
        ModelHeader {
            n: self.n as u32,
            input_len: self.input_len as u32,
            dense: self.fc_dims.iter().map(|&d| d as u32).collect(),
            conv: self
                .conv
                .iter()
                .map(|c| (c.filters as u32, c.kernel as u32, c.kernel as u32))
                .collect(),
        }
    }

    pub(crate) fn from_header(h: &ModelHeader) -> Result<Self> {
        let conv = h
            .conv
            .iter()
            .map(|&(filters, kh, kw)| {
                if kh != kw {
                    return Err(Error::format("weight file", format!("non-square kernel {kh}x{kw}")));
                }
                Ok(ConvSpec {
                    filters: filters as usize,
                    kernel: kh as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = AutomapConfig {
            n: h.n as usize,
            input_len: h.input_len as usize,
            fc_dims: h.dense.iter().map(|&d| d as usize).collect(),
            conv,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        let mut total = 0;
        let mut fan_in = self.input_len;
        for &width in &self.fc_dims {
            total += fan_in * width + width + 2 * width;
            fan_in = width;
        }
        let mut channels = 1;
        for (i, c) in self.conv.iter().enumerate() {
            total += c.filters * channels * c.kernel * c.kernel + c.filters;
            if i + 1 < self.conv.len() {
                total += 2 * c.filters;
            }
            channels = c.filters;
        }
        total
    }
}

/// Batch-norm affine parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormParams {
    fn new(features: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::filled(&[features], 1.0),
        }
    }

    fn fold(&mut self, stats: &BatchStats) {
        stats.fold_into(self.running_mean.data_mut(), self.running_var.data_mut());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNormParams>,
}

/// Every tensor of an AUTOMAP network plus the configuration it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct AutomapParams {
    config: AutomapConfig,
    pub dense: Vec<Layer>,
    pub conv: Vec<Layer>,
}

/// Whether the forward pass normalizes with batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handles produced by [`forward`].
pub struct ForwardPass {
    pub output: Var,
    /// Trainable parameters in canonical order.
    pub trainable: Vec<Var>,
    /// Train-mode statistics of every batch-norm layer, dense layers first.
    pub batch_stats: Vec<BatchStats>,
}

fn glorot(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(dims, |_| rng.gen_range(-a..a))
}

/// Glorot-uniform weights, zero biases, unit gamma, zero beta, running
/// mean 0 and running variance 1.
pub fn init_params(cfg: &AutomapConfig, seed: u64) -> Result<AutomapParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dense = Vec::with_capacity(cfg.fc_dims.len());
    let mut fan_in = cfg.input_len;
    for &width in &cfg.fc_dims {
        dense.push(Layer {
            weight: glorot(&mut rng, &[fan_in, width], fan_in, width),
            bias: Tensor::zeros(&[width]),
            bn: Some(BatchNormParams::new(width)),
        });
        fan_in = width;
    }
    let mut conv = Vec::with_capacity(cfg.conv.len());
    let mut channels = 1;
    for (i, c) in cfg.conv.iter().enumerate() {
        let area = c.kernel * c.kernel;
        conv.push(Layer {
            weight: glorot(&mut rng, &[c.filters, channels, c.kernel, c.kernel], channels * area, c.filters * area),
            bias: Tensor::zeros(&[c.filters]),
            bn: (i + 1 < cfg.conv.len()).then(|| BatchNormParams::new(c.filters)),
        });
        channels = c.filters;
    }
    Ok(AutomapParams {
        config: cfg.clone(),
        dense,
        conv,
    })
}

impl AutomapParams {
    pub fn config(&self) -> &AutomapConfig {
        &self.config
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Layer)> {
        let dense = self.dense.iter().enumerate().map(|(i, l)| (format!("fc{}", i + 1), l));
        let conv = self.conv.iter().enumerate().map(|(i, l)| (format!("conv{}", i + 1), l));
        dense.chain(conv)
    }

    /// Every tensor in canonical order with its name and whether it trains.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out = Vec::new();
        for (prefix, layer) in self.layers() {
            out.push((format!("{prefix}.weight"), &layer.weight, true));
            out.push((format!("{prefix}.bias"), &layer.bias, true));
            if let Some(bn) = &layer.bn {
                out.push((format!("{prefix}.bn.gamma"), &bn.gamma, true));
                out.push((format!("{prefix}.bn.beta"), &bn.beta, true));
                out.push((format!("{prefix}.bn.running_mean"), &bn.running_mean, false));
                out.push((format!("{prefix}.bn.running_var"), &bn.running_var, false));
            }
        }
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, _, trains)| *trains)
            .map(|(name, _, _)| name)
            .collect()
    }

    /// Trainable tensors in the same order as [`Self::trainable_names`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self.dense.iter_mut().chain(self.conv.iter_mut()) {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(bn) = &mut layer.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, _, trains)| *trains)
            .map(|(_, t, _)| t)
            .collect()
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn fold_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        self.apply_batch_stats(stats, |bn, s| bn.fold(s))
    }

    /// Overwrites the running statistics with `stats`.
    pub fn set_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        self.apply_batch_stats(stats, |bn, s| {
            bn.running_mean.data_mut().copy_from_slice(&s.mean);
            bn.running_var.data_mut().copy_from_slice(&s.var);
        })
    }

    fn apply_batch_stats(&mut self, stats: &[BatchStats], f: impl Fn(&mut BatchNormParams, &BatchStats)) -> Result<()> {
        let mut bns: Vec<&mut BatchNormParams> = self
            .dense
            .iter_mut()
            .chain(self.conv.iter_mut())
            .filter_map(|l| l.bn.as_mut())
            .collect();
        if bns.len() != stats.len() {
            return Err(Error::invalid(format!(
                "{} batch-norm layers but {} statistics",
                bns.len(),
                stats.len()
            )));
        }
        for (bn, s) in bns.iter_mut().zip(stats) {
            f(bn, s);
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        Container {
            header: self.config.header(),
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(name, t, _)| (name, t.clone()))
                .collect(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let cfg = AutomapConfig::from_header(&c.header)?;
        let mut params = init_params(&cfg, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(name, t, _)| (name, t.dims().to_vec()))
            .collect();
        if expected.len() != c.tensors.len() {
            return Err(Error::format(
                "weight file",
                format!("expected {} tensors, found {}", expected.len(), c.tensors.len()),
            ));
        }
        for ((name, dims), (got_name, t)) in expected.iter().zip(&c.tensors) {
            if name != got_name || dims.as_slice() != t.dims() {
                return Err(Error::format(
                    "weight file",
                    format!("tensor {got_name} {:?} does not match {name} {dims:?}", t.dims()),
                ));
            }
        }
        let mut incoming = c.tensors.into_iter().map(|(_, t)| t);
        for layer in params.dense.iter_mut().chain(params.conv.iter_mut()) {
            layer.weight = incoming.next().expect("count checked");
            layer.bias = incoming.next().expect("count checked");
            if let Some(bn) = &mut layer.bn {
                bn.gamma = incoming.next().expect("count checked");
                bn.beta = incoming.next().expect("count checked");
                bn.running_mean = incoming.next().expect("count checked");
                bn.running_var = incoming.next().expect("count checked");
            }
        }
        Ok(params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        formats::encode_container(WEIGHTS_MAGIC, &self.to_container())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(formats::decode_container(WEIGHTS_MAGIC, bytes)?)
    }
}

pub fn save_params(params: &AutomapParams, path: &Path) -> Result<()> {
    formats::write_file(path, &params.to_bytes()?)
}

pub fn load_params(path: &Path) -> Result<AutomapParams> {
    AutomapParams::from_bytes(&formats::read_file(path)?)
}

fn record_bn<'a>(
    tape: &mut Tape<'a>,
    h: Var,
    bn: &'a BatchNormParams,
    mode: Mode,
    trainable: &mut Vec<Var>,
    stats: &mut Vec<BatchStats>,
) -> Result<Var> {
    let gamma = tape.param(&bn.gamma);
    let beta = tape.param(&bn.beta);
    trainable.push(gamma);
    trainable.push(beta);
    let bn_mode = match mode {
        Mode::Train => BatchNormMode::Train,
        Mode::Eval => BatchNormMode::Eval {
            mean: bn.running_mean.data(),
            var: bn.running_var.data(),
        },
    };
    let (out, s) = tape.batchnorm(h, gamma, beta, bn_mode)?;
    stats.extend(s);
    Ok(out)
}

/// Records the full network on `tape` for a `B x input_len` input and
/// returns the `B x 1 x n x n` output handle.
pub fn forward<'a>(params: &'a AutomapParams, tape: &mut Tape<'a>, x: Var, mode: Mode) -> Result<ForwardPass> {
    let cfg = &params.config;
    let dims = tape.dims(x).to_vec();
    if dims.len() != 2 || dims[1] != cfg.input_len {
        return Err(Error::Shape {
            op: "automap input",
            lhs: dims,
            rhs: vec![0, cfg.input_len],
        });
    }
    let batch = dims[0];
    let mut trainable = Vec::new();
    let mut stats = Vec::new();
    let mut h = x;
    for layer in &params.dense {
        let w = tape.param(&layer.weight);
        let b = tape.param(&layer.bias);
        trainable.push(w);
        trainable.push(b);
        h = tape.matmul(h, w)?;
        h = tape.add_bias(h, b)?;
        if let Some(bn) = &layer.bn {
            h = record_bn(tape, h, bn, mode, &mut trainable, &mut stats)?;
        }
        h = tape.tanh(h);
    }
    h = tape.reshape(h, &[batch, 1, cfg.n, cfg.n])?;
    for layer in &params.conv {
        let w = tape.param(&layer.weight);
        let b = tape.param(&layer.bias);
        trainable.push(w);
        trainable.push(b);
        h = tape.conv2d(h, w, b)?;
        if let Some(bn) = &layer.bn {
            h = record_bn(tape, h, bn, mode, &mut trainable, &mut stats)?;
        }
        h = tape.relu(h);
    }
    Ok(ForwardPass {
        output: h,
        trainable,
        batch_stats: stats,
    })
}

/// Eval-mode reconstruction of a `B x input_len` batch.
pub fn predict(params: &AutomapParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vx = tape.constant(x);
    let pass = forward(params, &mut tape, vx, Mode::Eval)?;
    Ok(tape.to_tensor(pass.output))
}

/// Batch-norm statistics of a train-mode forward pass, without gradients.
pub fn batch_statistics(params: &AutomapParams, x: &Tensor) -> Result<Vec<BatchStats>> {
    let mut tape = Tape::new();
    let vx = tape.constant(x);
    Ok(forward(params, &mut tape, vx, Mode::Train)?.batch_stats)
}

/// Loss, per-parameter gradients and batch statistics of one train-mode step.
pub struct StepGradients {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub batch_stats: Vec<BatchStats>,
}

/// Train-mode forward, MSE against `target` (`B x 1 x n x n`) and backward.
pub fn loss_and_gradients(params: &AutomapParams, x: &Tensor, target: &Tensor) -> Result<StepGradients> {
    let mut tape = Tape::new();
    let vx = tape.constant(x);
    let vt = tape.constant(target);
    let pass = forward(params, &mut tape, vx, Mode::Train)?;
    let loss = tape.mse(pass.output, vt)?;
    let mut g = tape.backward(loss)?;
    let grads = pass
        .trainable
        .iter()
        .zip(params.trainable())
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok(StepGradients {
        loss: tape.value(loss)[0],
        grads,
        batch_stats: pass.batch_stats,
    })
}
