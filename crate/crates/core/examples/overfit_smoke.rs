//! Overfits the small network on 64 MNIST digits from four views.
//!
//! Training runs in phases, each a number of epochs at its own learning
//! rate, chained through checkpoints:
//!
//! cargo run --release --example overfit_smoke -- [mnist_dir] [batch] [lr:epochs,...]

use std::path::PathBuf;
use std::time::Instant;

use automap_ct::data::{load_mnist_prefix, resize_bilinear};
use automap_ct::model::{AutomapConfig, Preset};
use automap_ct::radon::AngleSet;
use automap_ct::train::{dataset_mse, initial_checkpoint, resume, TrainConfig, TrainingSet};

fn main() -> automap_ct::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let dir = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("data/mnist"));
    let batch = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let phases: Vec<(f64, usize)> = args
        .get(3)
        .map(String::as_str)
        .unwrap_or("3e-4:100,1e-4:25,3e-5:25,1e-5:25")
        .split(',')
        .map(|p| {
            let (lr, ep) = p.split_once(':').expect("phase must be lr:epochs");
            (lr.parse().expect("lr"), ep.parse().expect("epochs"))
        })
        .collect();

    let angles = AngleSet::FourView;
    let model = AutomapConfig::preset(Preset::Small, &angles);
    let digits = load_mnist_prefix(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"), 64)?;
    let images = digits
        .iter()
        .map(|d| resize_bilinear(&d.image, model.n))
        .collect::<automap_ct::Result<Vec<_>>>()?;
    let set = TrainingSet::from_images(&images.iter().collect::<Vec<_>>(), &angles)?;

    let base = TrainConfig {
        epochs: 0,
        batch_size: batch,
        seed: 7,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let mut ck = initial_checkpoint(&model, &base)?;
    for (lr, epochs) in phases {
        let target = ck.epochs_completed + epochs;
        let cfg = TrainConfig {
            epochs: target,
            learning_rate: lr,
            ..base.clone()
        };
        let out = resume(&set, &cfg, ck, None)?;
        println!(
            "lr {lr:.1e} to epoch {target} (step {}): last epoch loss {:.3e}, training mse {:.3e} ({:.0}s)",
            out.checkpoint.log.entries.len(),
            out.checkpoint.log.epoch_mean(target).unwrap_or(f64::NAN),
            dataset_mse(&out.params, &set, 64)?,
            started.elapsed().as_secs_f64()
        );
        ck = out.checkpoint;
    }
    Ok(())
}
