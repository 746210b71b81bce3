//! Compares reverse-mode gradients of a small AUTOMAP network with central
//! finite differences and prints the worst relative error per tensor.
//!
//! cargo run --release --example gradient_check -- [seed]

use automap_ct::model::{init_params, loss_and_gradients, AutomapConfig, ConvSpec};
use automap_ct::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> automap_ct::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = AutomapConfig {
        n: 4,
        input_len: 8,
        fc_dims: vec![12, 16],
        conv: vec![
            ConvSpec { filters: 3, kernel: 3 },
            ConvSpec { filters: 2, kernel: 3 },
            ConvSpec { filters: 1, kernel: 3 },
        ],
    };
    let params = init_params(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let x = Tensor::from_fn(&[3, cfg.input_len], |_| rng.gen_range(-1.0..1.0));
    let y = Tensor::from_fn(&[3, 1, cfg.n, cfg.n], |_| rng.gen_range(0.0..1.0));
    let analytic = loss_and_gradients(&params, &x, &y)?;

    // Components sitting on a ReLU kink have no derivative; they show up as
    // disagreeing one-sided differences and are counted, not scored.
    let h = 1e-6;
    let base = analytic.loss;
    for (t, name) in params.trainable_names().iter().enumerate() {
        let (mut worst, mut kinks): (f64, usize) = (0.0, 0);
        for j in 0..params.trainable()[t].len() {
            let loss_at = |delta: f64| -> automap_ct::Result<f64> {
                let mut p = params.clone();
                p.trainable_mut()[t].data_mut()[j] += delta;
                Ok(loss_and_gradients(&p, &x, &y)?.loss)
            };
            let (up, down) = (loss_at(h)?, loss_at(-h)?);
            let (fwd, bwd) = ((up - base) / h, (base - down) / h);
            if (fwd - bwd).abs() > 1e-6 && (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) {
                kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.grads[t][j];
            if (a - numeric).abs() > 1e-10 {
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
            }
        }
        println!("{name:<16} max rel error {worst:.2e}  ({kinks} on a kink)");
    }
    Ok(())
}
