//! One MNIST experiment end to end: train AUTOMAP, then score it with the
//! digit oracle against the FBP baseline.
//!
//! The defaults are a quick small-preset run; pass a TOML run configuration
//! to run anything else, for example the two-view leave-out-2 condition:
//!
//! cargo run --release --example mnist_experiment -- configs/mnist_exclude2_two_view.toml
//!
//! The oracle is trained first when the configuration does not name one.

use automap_ct::eval::OracleTrainConfig;
use automap_ct::experiment::{build_oracle, load_gated_oracle, run_evaluation, run_training, Experiment, RunConfig};

fn main() -> automap_ct::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => {
            let mut cfg = RunConfig::new(Experiment::MnistExclude);
            cfg.preset = "small".into();
            cfg.angles = "two_view".into();
            cfg.epochs = 3;
            cfg.batch_size = 32;
            cfg.learning_rate = 1e-4;
            cfg.train_limit = Some(2000);
            cfg.test_limit = Some(200);
            cfg
        }
    };
    let oracle_path = match &cfg.oracle {
        Some(p) => p.clone(),
        None => {
            let path = cfg.output_dir.join("digit_oracle.amap");
            if !path.exists() {
                let (oracle, accuracy) = build_oracle(&cfg.data_dir, &OracleTrainConfig::default())?;
                println!("oracle accuracy {accuracy:.4}");
                oracle.save(&path)?;
            }
            path
        }
    };
    cfg.oracle = Some(oracle_path.clone());
    let oracle = load_gated_oracle(&oracle_path, &cfg.data_dir)?;

    let run = run_training(&cfg)?;
    let outcome = run_evaluation(&cfg, &run.params, Some(&oracle))?;
    let r = &outcome.report;
    println!("run {} in {}", r.run_id, run.dir.display());
    println!("automap rmse {:.4}, fbp rmse {:.4}", r.rmse_mean, r.fbp_rmse_mean);
    if let Some(f) = &r.false_digits {
        println!("false-digit rate {:.3} over {} digits", f.rate, r.n_samples());
    }
    Ok(())
}
