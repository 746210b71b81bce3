//! Times one train-mode forward/backward and one eval-mode forward of the
//! AUTOMAP network on random data.
//!
//! cargo run --release --example step_timing -- [full|small] [batch]

use std::time::Instant;

use automap_ct::model::{init_params, loss_and_gradients, predict, AutomapConfig, Preset};
use automap_ct::radon::AngleSet;
use automap_ct::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> automap_ct::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let preset = Preset::parse(args.get(1).map(String::as_str).unwrap_or("full"))?;
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let cfg = AutomapConfig::preset(preset, &AngleSet::FourView);
    let t = Instant::now();
    let params = init_params(&cfg, 0)?;
    println!("init {:?}, {} trainable", t.elapsed(), cfg.trainable_count());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[batch, cfg.input_len], |_| rng.gen_range(0.0..1.0));
    let y = Tensor::from_fn(&[batch, 1, cfg.n, cfg.n], |_| rng.gen_range(0.0..1.0));

    let t = Instant::now();
    let step = loss_and_gradients(&params, &x, &y)?;
    let dt = t.elapsed();
    println!(
        "train step batch {batch}: {dt:?} ({:.1} ms/sample), loss {:.6}",
        dt.as_secs_f64() * 1e3 / batch as f64,
        step.loss
    );
    let t = Instant::now();
    predict(&params, &x)?;
    println!("eval forward: {:?}", t.elapsed());
    Ok(())
}
