#![allow(dead_code)]

use std::path::PathBuf;

use automap_ct::autodiff::{BatchNormMode, Tape, Var};
use automap_ct::model::{loss_and_gradients, AutomapConfig, AutomapParams, ConvSpec};
use automap_ct::model::init_params;
use automap_ct::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-8;

/// Directory with the MNIST IDX files, if present.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("AUTOMAP_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Default, Clone, Copy)]
pub struct FdStats {
    pub checked: usize,
    pub max_abs: f64,
    pub max_rel: f64,
}

/// Accepts a component when it is within the absolute floor or the relative
/// bound.
pub fn compare(analytic: &[f64], numeric: &[f64], what: &str, stats: &mut FdStats) -> Result<(), String> {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(f64::MIN_POSITIVE);
        if abs > FD_ABS_TOL {
            if rel > FD_REL_TOL {
                return Err(format!("{what}[{i}]: analytic {a:e} vs numeric {n:e} (rel {rel:e})"));
            }
            stats.max_rel = stats.max_rel.max(rel);
        }
        stats.checked += 1;
        stats.max_abs = stats.max_abs.max(abs);
    }
    Ok(())
}

/// Central-difference check of a scalar function of several input tensors.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape<'_>, &[Var]) -> automap_ct::Result<Var>,
    stats: &mut FdStats,
) -> Result<(), String> {
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone(), false)).collect();
        let out = build(&mut tape, &vars).expect("forward");
        tape.value(out)[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).map_err(|e| format!("{name}: {e}"))?;
    let grads = tape.backward(out).map_err(|e| format!("{name}: {e}"))?;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        let mut work = inputs.to_vec();
        for j in 0..input.len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work[k].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work[k].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        compare(&analytic, &numeric, &format!("{name} input {k}"), stats)?;
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so a ReLU kink never sits inside the
/// difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Checks every tape operation once for `seed`.
pub fn check_all_ops(seed: u64, stats: &mut FdStats) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;

    let (a, b, t) = (uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[3, 5], -1.0, 1.0));
    check_op("matmul", &[a, b, t.clone()], &|tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        tp.mse(y, v[2])
    }, stats)?;

    let (x, bias) = (uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0));
    check_op("add_bias", &[x, bias, t.clone()], &|tp, v| {
        let y = tp.add_bias(v[0], v[1])?;
        tp.mse(y, v[2])
    }, stats)?;

    let x = uniform(r, &[2, 3, 5, 6], -1.0, 1.0);
    let w = uniform(r, &[4, 3, 3, 5], -0.5, 0.5);
    let cb = uniform(r, &[4], -0.5, 0.5);
    let ct = uniform(r, &[2, 4, 5, 6], -1.0, 1.0);
    check_op("conv2d", &[x, w, cb, ct], &|tp, v| {
        let y = tp.conv2d(v[0], v[1], v[2])?;
        tp.mse(y, v[3])
    }, stats)?;

    let x = uniform(r, &[3, 5], -2.0, 2.0);
    check_op("tanh", &[x, t.clone()], &|tp, v| {
        let y = tp.tanh(v[0]);
        tp.mse(y, v[1])
    }, stats)?;

    let x = away_from_zero(r, &[3, 5]);
    check_op("relu", &[x, t.clone()], &|tp, v| {
        let y = tp.relu(v[0]);
        tp.mse(y, v[1])
    }, stats)?;

    for (label, dims) in [("batchnorm dense", vec![4, 3]), ("batchnorm spatial", vec![3, 2, 3, 4])] {
        let c = dims[1];
        let x = uniform(r, &dims, -2.0, 2.0);
        let g = uniform(r, &[c], 0.5, 1.5);
        let be = uniform(r, &[c], -0.5, 0.5);
        let target = uniform(r, &dims, -1.0, 1.0);
        check_op(label, &[x.clone(), g.clone(), be.clone(), target.clone()], &|tp, v| {
            let (y, _) = tp.batchnorm(v[0], v[1], v[2], BatchNormMode::Train)?;
            tp.mse(y, v[3])
        }, stats)?;
        let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
        check_op(&format!("{label} eval"), &[x, g, be, target], &|tp, v| {
            let (y, _) = tp.batchnorm(v[0], v[1], v[2], BatchNormMode::Eval { mean: &mean, var: &var })?;
            tp.mse(y, v[3])
        }, stats)?;
    }

    let (p, q) = (uniform(r, &[2, 1, 3, 3], -1.0, 1.0), uniform(r, &[2, 1, 3, 3], -1.0, 1.0));
    check_op("mse", &[p, q], &|tp, v| tp.mse(v[0], v[1]), stats)?;

    let x = uniform(r, &[2, 6], -1.0, 1.0);
    check_op("reshape+sum", &[x], &|tp, v| {
        let y = tp.reshape(v[0], &[3, 4])?;
        let y = tp.tanh(y);
        Ok(tp.sum(y))
    }, stats)?;

    let (x, y) = (uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[3, 5], -1.0, 1.0));
    check_op("add", &[x, y, t], &|tp, v| {
        let s = tp.add(v[0], v[1])?;
        tp.mse(s, v[2])
    }, stats)?;

    let logits = uniform(r, &[4, 10], -3.0, 3.0);
    let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..10)).collect();
    check_op("softmax_cross_entropy", &[logits], &|tp, v| tp.softmax_cross_entropy(v[0], &labels), stats)?;
    Ok(())
}

/// A miniature AUTOMAP with the same layer structure as the presets.
pub fn tiny_config() -> AutomapConfig {
    AutomapConfig {
        n: 4,
        input_len: 6,
        fc_dims: vec![10, 16],
        conv: vec![
            ConvSpec { filters: 2, kernel: 3 },
            ConvSpec { filters: 2, kernel: 3 },
            ConvSpec { filters: 1, kernel: 3 },
        ],
    }
}

fn perturbed_loss(params: &AutomapParams, t: usize, j: usize, delta: f64, x: &Tensor, y: &Tensor) -> f64 {
    let mut p = params.clone();
    p.trainable_mut()[t].data_mut()[j] += delta;
    loss_and_gradients(&p, x, y).expect("forward").loss
}

/// One-sided differences that disagree far beyond curvature effects mean
/// the stencil straddles a ReLU kink, where no derivative exists.
fn straddles_kink(params: &AutomapParams, t: usize, j: usize, x: &Tensor, y: &Tensor) -> bool {
    let center = perturbed_loss(params, t, j, 0.0, x, y);
    let fwd = (perturbed_loss(params, t, j, FD_STEP, x, y) - center) / FD_STEP;
    let bwd = (center - perturbed_loss(params, t, j, -FD_STEP, x, y)) / FD_STEP;
    (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1e-6)
}

/// Checks the gradient of the train-mode MSE loss for every trainable scalar.
///
/// The batch is drawn from `seed`; if a mismatch turns out to sit on a ReLU
/// kink the batch is redrawn (same weights), since the derivative is
/// undefined there. Any other mismatch fails immediately.
pub fn check_composite(seed: u64, stats: &mut FdStats) -> Result<(), String> {
    let cfg = tiny_config();
    let params = init_params(&cfg, seed).map_err(|e| e.to_string())?;
    let names = params.trainable_names();
    'draw: for draw in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        rng.set_stream(draw);
        let x = uniform(&mut rng, &[3, cfg.input_len], 0.0, 1.0);
        let y = uniform(&mut rng, &[3, 1, cfg.n, cfg.n], 0.0, 1.0);
        let g = loss_and_gradients(&params, &x, &y).map_err(|e| e.to_string())?;
        for (t, analytic) in g.grads.iter().enumerate() {
            for (j, &a) in analytic.iter().enumerate() {
                let n = (perturbed_loss(&params, t, j, FD_STEP, &x, &y) - perturbed_loss(&params, t, j, -FD_STEP, &x, &y))
                    / (2.0 * FD_STEP);
                if let Err(e) = compare(&[a], &[n], &format!("automap {}[{j}]", names[t]), stats) {
                    if straddles_kink(&params, t, j, &x, &y) {
                        continue 'draw;
                    }
                    return Err(e);
                }
            }
        }
        return Ok(());
    }
    Err(format!("seed {seed}: every batch drawn hit a ReLU kink"))
}

/// The full suite over `seeds`: every op plus the composite network.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Result<FdStats, String> {
    let mut stats = FdStats::default();
    for seed in seeds {
        check_all_ops(seed, &mut stats).map_err(|e| format!("seed {seed}: {e}"))?;
        check_composite(seed, &mut stats).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok(stats)
}

/// Bilinear interpolant of a row-major `n x n` grid at continuous pixel
/// coordinates, zero beyond the outermost samples.
pub fn oracle_bilinear(values: &[f64], n: usize, row: f64, col: f64) -> f64 {
    let mut acc = 0.0;
    let (r0, c0) = (row.floor() as i64, col.floor() as i64);
    for r in [r0, r0 + 1] {
        for c in [c0, c0 + 1] {
            if r >= 0 && c >= 0 && (r as usize) < n && (c as usize) < n {
                let w = (1.0 - (row - r as f64).abs()) * (1.0 - (col - c as f64).abs());
                acc += w * values[r as usize * n + c as usize];
            }
        }
    }
    acc
}

/// Brute-force parallel-beam projection: each ray is sampled at `samples`
/// equidistant midpoints across a span that covers the whole grid.
pub fn dense_projection_oracle(values: &[f64], n: usize, pitch: f64, degrees: f64, samples: usize) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let center = (n as f64 - 1.0) / 2.0;
    let half = n as f64;
    let dt = 2.0 * half / samples as f64;
    (0..n)
        .map(|k| {
            let sigma = k as f64 - center;
            let sum: f64 = (0..samples)
                .map(|i| {
                    let t = -half + (i as f64 + 0.5) * dt;
                    // Physical position in pixel units: detector offset along
                    // (cos, sin), ray direction (-sin, cos).
                    let (x, y) = (sigma * c - t * s, sigma * s + t * c);
                    oracle_bilinear(values, n, center - y, x + center)
                })
                .sum();
            sum * dt * pitch
        })
        .collect()
}
