//! Turns a textured mesh into training input: unit-box normalization,
//! area-weighted colored surface samples and a colored occupancy grid.
//!
//! cargo run --release --example preprocess_shape -- [obj] [out_dir]
//!
//! Without an OBJ a synthetic head is used.

use std::path::PathBuf;

use auvnet::geometry::{load_textured_mesh, normalize_to_unit_box, sample_surface, voxelize_colored};
use auvnet::raster::Raster;
use auvnet::synthdata::make_head_mesh;
use auvnet::trainer::ShapeSample;

fn main() -> auvnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let mesh = match args.next() {
        Some(p) => load_textured_mesh(&PathBuf::from(p))?,
        None => make_head_mesh(0, 256).mesh,
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/preprocess".into()));
    std::fs::create_dir_all(&out)?;

    let unit = normalize_to_unit_box(&mesh)?;
    let (lo, hi) = unit.bounds().expect("non-empty mesh");
    println!("normalized bounds {lo:.3?} .. {hi:.3?}");

    let cloud = sample_surface(&unit, 16384, 0)?;
    let grid = voxelize_colored(&cloud, 32)?;
    println!(
        "{} samples, {} of {} voxels occupied",
        cloud.len(),
        grid.occupancy_count(),
        32 * 32 * 32
    );

    // Middle slice along x, colored where occupied.
    let r = grid.resolution;
    let mut slice = Raster::new(r, r, 3);
    for y in 0..r {
        for z in 0..r {
            if grid.occupied(r / 2, y, z) {
                slice.pixel_mut(z, r - 1 - y).copy_from_slice(&grid.color(r / 2, y, z));
            }
        }
    }
    slice.save_png(&out.join("slice_x.png"))?;
    ShapeSample { grid: grid.to_tensor(), cloud }.save(&out.join("shape.auvn"))?;
    println!("wrote {}", out.display());
    Ok(())
}
