//! Reads one MNIST digit, resizes it to 64x64 and prints its four-view
//! sinogram together with the network input derived from it.
//!
//! cargo run --release --example project_digit -- [mnist_dir] [index]

use std::path::PathBuf;

use automap_ct::data::{load_mnist_prefix, resize_bilinear};
use automap_ct::radon::{forward_project, normalize_sinogram, AngleSet};

fn main() -> automap_ct::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let dir = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("data/mnist"));
    let index: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let digits = load_mnist_prefix(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        index + 1,
    )?;
    let digit = &digits[index];
    let img = resize_bilinear(&digit.image, 64)?;
    let sino = forward_project(&img, &AngleSet::FourView)?;
    println!("digit {} at index {index}", digit.label);
    for (a, deg) in sino.angles_deg().iter().enumerate() {
        let row = sino.row(a);
        let peak = row.iter().cloned().fold(0.0, f64::max);
        let total: f64 = row.iter().sum();
        println!("{deg:>5} deg: {} bins, peak {peak:.1} mm, sum {total:.1}", row.len());
    }
    let x = normalize_sinogram(&sino);
    println!("network input: {} values, max {:.3}", x.len(), x.data().iter().cloned().fold(0.0, f64::max));
    Ok(())
}
