//! Fits a pretrained model to an unseen head with the basis generators frozen
//! and checks that the basis parameters never move.
//!
//! cargo run --release --example fit_new_shape -- [heads] [epoch_scale]

use auvnet::baker::bake_texture;
use auvnet::config::RunConfig;
use auvnet::networks::Category;
use auvnet::synthdata::make_head_mesh;
use auvnet::trainer::{fit_new_shape, preprocess_mesh, train, FitConfig, ShapeRecord, TrainHooks};

fn main() -> auvnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: u64 = args.next().map_or(8, |s| s.parse().expect("heads"));
    let scale: f64 = args.next().map_or(0.002, |s| s.parse().expect("epoch scale"));

    let mut run = RunConfig::for_category(Category::Head, 32, 8);
    run.epoch_scale = scale;
    run.points = 1024;
    run.smooth_subset = 128;
    let samples = (0..count)
        .map(|s| preprocess_mesh(&make_head_mesh(s, 128).mesh, 8192, 32, s))
        .collect::<auvnet::Result<Vec<_>>>()?;
    let model = train(&run, &samples, TrainHooks::default())?.model;

    let unseen = preprocess_mesh(&make_head_mesh(500, 128).mesh, 8192, 32, 500)?;
    let before = ShapeRecord::of(&model, &unseen)?;
    let fit = fit_new_shape(&model, &run, &unseen, &FitConfig { duplicates: 8, epochs: 6 })?;
    for (row, hash) in fit.metrics.iter().zip(&fit.basis_hashes) {
        println!("epoch {}  total {:.5}  basis {}", row.epoch, row.total, &hash[..16]);
    }
    let moved = before
        .coeffs
        .iter()
        .zip(&fit.record.coeffs)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0f32, f32::max);
    println!("basis unchanged: {}", fit.basis_hashes.iter().all(|h| *h == model.basis_hash()));
    println!("largest coefficient change {moved:.4}");
    let textures = bake_texture(&fit.model, &unseen, 128)?;
    println!("baked texels per texture {:?}", textures.iter().map(|t| t.valid_count()).collect::<Vec<_>>());
    Ok(())
}
