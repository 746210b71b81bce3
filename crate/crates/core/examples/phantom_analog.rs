//! CT analog on synthetic ellipse phantoms: trains from four views and
//! reports HU error and body-outline overlap on unseen phantoms.
//!
//! cargo run --release --example phantom_analog -- [train_count] [test_count] [epochs] [preset]

use automap_ct::experiment::{run_evaluation, run_training, Experiment, RunConfig};

fn main() -> automap_ct::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);

    let mut cfg = RunConfig::new(Experiment::Phantom);
    cfg.phantom_train = arg(1, 200);
    cfg.phantom_test = arg(2, 20);
    cfg.epochs = arg(3, 5);
    cfg.preset = args.get(4).cloned().unwrap_or_else(|| "small".into());
    cfg.batch_size = 16;
    cfg.learning_rate = 1e-4;

    let run = run_training(&cfg)?;
    let r = run_evaluation(&cfg, &run.params, None)?.report;
    println!(
        "{} phantoms: HU rmse {:.1}, body IoU {:.3}, normalized rmse {:.4} (fbp {:.4})",
        r.n_samples(),
        r.hu_rmse_mean.unwrap_or(f64::NAN),
        r.body_iou_mean.unwrap_or(f64::NAN),
        r.rmse_mean,
        r.fbp_rmse_mean
    );
    println!("grid and report in {}", run.dir.display());
    Ok(())
}
