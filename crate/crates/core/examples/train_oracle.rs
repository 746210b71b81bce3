//! Trains the digit oracle on MNIST records outside the experiment pool and
//! reports its held-out accuracy.
//!
//! cargo run --release --example train_oracle -- [mnist_dir] [out.amap] [epochs]

use std::path::PathBuf;
use std::time::Instant;

use automap_ct::eval::{OracleTrainConfig, ORACLE_MIN_ACCURACY};
use automap_ct::experiment::build_oracle;

fn main() -> automap_ct::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let dir = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("data/mnist"));
    let out = PathBuf::from(args.get(2).map(String::as_str).unwrap_or("digit_oracle.amap"));

    let mut cfg = OracleTrainConfig::default();
    if let Some(e) = args.get(3) {
        cfg.epochs = e.parse().expect("epochs must be an integer");
    }

    let started = Instant::now();
    let (oracle, accuracy) = build_oracle(&dir, &cfg)?;
    oracle.save(&out)?;
    println!(
        "accuracy {accuracy:.4} on 5000 held-out digits ({}), {:.0} s, saved to {}",
        if accuracy >= ORACLE_MIN_ACCURACY { "passes the gate" } else { "below the gate" },
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}
