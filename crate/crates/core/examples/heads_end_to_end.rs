//! Synthetic heads from generation to evaluation: preprocess, three-stage
//! training, one-shot segmentation, texture transfer and fitting a new head.
//!
//! cargo run --release --example heads_end_to_end -- [count] [epoch_scale] [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use auvnet::baker::{bake_texture, export_textured, transfer_texture, INPAINT_RADIUS};
use auvnet::config::RunConfig;
use auvnet::eval::{head_segmentation, head_transfer_eye_distance};
use auvnet::networks::Category;
use auvnet::synthdata::make_head_mesh;
use auvnet::trainer::{fit_new_shape, preprocess_mesh, train, FitConfig, MetricRow, TrainHooks};

fn main() -> auvnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(100, |s| s.parse().expect("count"));
    let scale: f64 = args.next().map_or(0.02, |s| s.parse().expect("epoch scale"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/heads".into()));

    let mut run = RunConfig::for_category(Category::Head, 32, 8);
    run.epoch_scale = scale;
    run.points = 2048;
    run.smooth_subset = 256;

    let t = Instant::now();
    let heads: Vec<_> = (0..count as u64).map(|s| make_head_mesh(s, 256)).collect();
    let samples = heads
        .iter()
        .enumerate()
        .map(|(i, h)| preprocess_mesh(&h.mesh, 16384, 32, i as u64))
        .collect::<auvnet::Result<Vec<_>>>()?;
    println!("{count} heads preprocessed in {:.1}s", t.elapsed().as_secs_f64());

    let hooks = TrainHooks {
        out_dir: Some(out.clone()),
        on_epoch: Some(Box::new(|row: &MetricRow, _| {
            println!(
                "stage {} epoch {:3}  total {:.5}  {:.0}s",
                row.stage,
                row.epoch,
                row.total,
                t.elapsed().as_secs_f64()
            );
        })),
    };
    let model = train(&run, &samples, hooks)?.model;

    let styled: Vec<_> = heads.iter().map(|h| &h.style).zip(&samples).collect();
    let (miou, per_class) = head_segmentation(&model, &styled, 256)?;
    println!("one-shot segmentation mean IOU {miou:.3}  per class {per_class:?}");

    let eyes = head_transfer_eye_distance(&model, (&heads[1], &samples[1]), (&heads[2], &samples[2]), 256)?;
    println!("transfer: distance from head 1 eyes to head 2 eye color {eyes:?}");

    let a_tex: Vec<_> = bake_texture(&model, &samples[1], 256)?
        .iter()
        .map(|t| t.filled(INPAINT_RADIUS))
        .collect::<auvnet::Result<_>>()?;
    let b_tex: Vec<_> = bake_texture(&model, &samples[2], 256)?
        .iter()
        .map(|t| t.filled(INPAINT_RADIUS))
        .collect::<auvnet::Result<_>>()?;
    let export = export_textured(&heads[1].mesh, &model, &samples[1].grid, &a_tex)?;
    export.write(&out, "head1")?;
    transfer_texture(&export, &b_tex)?.write(&out, "head1_with_head2")?;

    let new_head = make_head_mesh(10_000, 256);
    let new_sample = preprocess_mesh(&new_head.mesh, 16384, 32, 10_000)?;
    let fit = fit_new_shape(&model, &run, &new_sample, &FitConfig { duplicates: 10, epochs: 4 })?;
    let constant = fit.basis_hashes.windows(2).all(|w| w[0] == w[1]);
    println!("fit-new: basis hash constant over {} epochs: {constant}", fit.metrics.len());
    println!("done in {:.0}s, wrote {}", t.elapsed().as_secs_f64(), out.display());
    Ok(())
}
