//! Filtered backprojection of a phantom from 180, 4 and 2 views.
//!
//! Writes `fbp_views.pgm` (truth, then one column per view count) into the
//! output directory and prints the normalized RMSE of each reconstruction.
//!
//! cargo run --release --example sparse_vs_dense_fbp -- [out_dir]

use std::path::PathBuf;

use automap_ct::data::{generate_phantom, hu_to_normalized, PhantomSpec};
use automap_ct::eval::{render_grid, rmse};
use automap_ct::formats::{encode_pgm, write_file};
use automap_ct::radon::{fbp_reconstruct, forward_project, AngleSet, Domain};

fn main() -> automap_ct::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    let phantom = generate_phantom(&PhantomSpec::default(), 1)?;
    let truth = hu_to_normalized(&phantom.image)?;

    let mut recons = Vec::new();
    for (name, angles) in [
        ("180 views", AngleSet::uniform(180)?),
        ("four_view", AngleSet::FourView),
        ("two_view", AngleSet::TwoView),
    ] {
        let sino = forward_project(&truth, &angles)?;
        let rec = fbp_reconstruct(&sino, Domain::Normalized)?;
        println!("{name:>10}: rmse {:.4}", rmse(&rec, &truth)?);
        recons.push(rec);
    }
    let grid = render_grid(&[(&truth, &recons[0], &recons[1]), (&truth, &recons[2], &recons[2])])?;
    let path = out.join("fbp_views.pgm");
    write_file(&path, &encode_pgm(&grid))?;
    println!("wrote {}", path.display());
    Ok(())
}
