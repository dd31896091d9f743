//! Renders the learned basis images of a model, one PNG per channel.
//!
//! cargo run --release --example render_basis -- [model.auvn] [out_dir]
//!
//! Without a checkpoint a small toy model is trained first.

use std::path::PathBuf;

use auv_tensor::Checkpoint;
use auvnet::config::ToyConfig;
use auvnet::networks::AuvModel;
use auvnet::raster::Raster;
use auvnet::synthdata::toy_dataset;
use auvnet::trainer::{train_toy, TrainHooks};

fn stretched(img: &Raster, grid: usize) -> auvnet::Result<Raster> {
    let (lo, hi) = img.data().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut data = Vec::with_capacity(grid * grid * 3);
    for row in (0..grid).rev() {
        for col in 0..grid {
            let v = (img.pixel(col, row)[0] - lo) / span;
            data.extend([v; 3]);
        }
    }
    Raster::from_data(grid, grid, 3, data)
}

fn main() -> auvnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(p) => AuvModel::from_checkpoint(&Checkpoint::load(&PathBuf::from(p))?)?,
        None => {
            let mut cfg = ToyConfig::desk(64).scaled(0.05);
            cfg.images = 20;
            let data = toy_dataset(cfg.seed, cfg.images, 64, cfg.corner_shift)?;
            train_toy(&cfg, &data, TrainHooks::default())?.model
        }
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/basis".into()));
    std::fs::create_dir_all(&out)?;
    let grid = 64;
    for k in 0..model.config.num_generators() {
        let images = model.render_basis(k, grid)?;
        for (c, img) in images.iter().enumerate().take(16) {
            stretched(img, grid)?.save_png(&out.join(format!("basis{k}_{c:03}.png")))?;
        }
        println!("generator {k}: {} basis images", images.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}
