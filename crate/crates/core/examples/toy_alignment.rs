//! Trains the 2D alignment module on warped procedural faces and reports how
//! tightly the eye and mouth landmarks collapse in UV space.
//!
//! cargo run --release --example toy_alignment -- [epoch_scale] [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use auvnet::baker::bake_toy_image;
use auvnet::config::ToyConfig;
use auvnet::eval::landmark_uv_stats;
use auvnet::synthdata::{toy_dataset, LANDMARK_NAMES};
use auvnet::trainer::{toy_reconstruction_mse, train_toy, MetricRow, TrainHooks};

fn main() -> auvnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let scale: f64 = args.next().map_or(1.0, |s| s.parse().expect("epoch scale"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/toy".into()));

    let cfg = ToyConfig::desk(64).scaled(scale);
    let data = toy_dataset(cfg.seed, cfg.images, 64, cfg.corner_shift)?;
    println!("{} images, {} epochs", data.len(), cfg.epochs);

    let start = Instant::now();
    let hooks = TrainHooks {
        out_dir: Some(out.clone()),
        on_epoch: Some(Box::new(|row: &MetricRow, _| {
            if row.epoch % 5 == 0 {
                println!("epoch {:4}  L_c {:.5}  {:.0}s", row.epoch, row.terms[0].unwrap_or(0.0), start.elapsed().as_secs_f64());
            }
        })),
    };
    let trained = train_toy(&cfg, &data, hooks)?;

    println!("reconstruction MSE {:.5}", toy_reconstruction_mse(&trained.model, &data)?);
    for (name, s) in LANDMARK_NAMES.iter().zip(landmark_uv_stats(&trained.model, &data)?) {
        println!("{name:>10}: uv std {:.4}  input std {:.4}  ratio {:.3}", s.uv_std, s.input_std, s.ratio());
    }
    for (i, img) in data.iter().take(4).enumerate() {
        img.raster.save_png(&out.join(format!("input_{i}.png")))?;
        bake_toy_image(&trained.model, img, 64)?
            .inpainted(5)?
            .save_png(&out.join(format!("aligned_{i}.png")))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
