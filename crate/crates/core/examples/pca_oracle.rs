//! Trains the linear restriction of the model (identity UVs, texel-table basis,
//! linear coefficients) on aligned faces and compares it with the best
//! rank-16 reconstruction from a truncated SVD.
//!
//! cargo run --release --example pca_oracle -- [epochs]

use auvnet::config::ToyConfig;
use auvnet::eval::svd_reconstruction_mse;
use auvnet::synthdata::make_aligned_face;
use auvnet::trainer::{toy_reconstruction_mse, train_toy, MetricRow, TrainHooks};

fn main() -> auvnet::Result<()> {
    let mut cfg = ToyConfig::pca(32, 16, 200);
    let mut args = std::env::args().skip(1);
    if let Some(e) = args.next() {
        cfg.epochs = e.parse().expect("epochs");
    }
    let faces: Vec<_> = (0..cfg.images as u64).map(|s| make_aligned_face(s, 32)).collect();
    let rasters: Vec<_> = faces.iter().map(|f| f.raster.clone()).collect();
    let oracle = svd_reconstruction_mse(&rasters, 16)?;
    println!("rank-16 SVD MSE {oracle:.6}");

    let hooks = TrainHooks {
        out_dir: None,
        on_epoch: Some(Box::new(|row: &MetricRow, _| {
            if row.epoch % 100 == 0 {
                println!("epoch {:3}  L_c {:.6}", row.epoch, row.terms[0].unwrap_or(0.0));
            }
        })),
    };
    let trained = train_toy(&cfg, &faces, hooks)?;
    let mse = toy_reconstruction_mse(&trained.model, &faces)?;
    println!("trained MSE {mse:.6}  ratio to oracle {:.4}", mse / oracle);
    Ok(())
}
