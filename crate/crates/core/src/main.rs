use std::path::{Path, PathBuf};
use std::process::ExitCode;

use auv_tensor::Checkpoint;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use auvnet::baker::{bake_texture, export_textured, transfer_texture, TexturedExport, INPAINT_RADIUS};
use auvnet::config::{load_json, worker_threads, RunConfig, ToyConfig};
use auvnet::eval::{head_segmentation, landmark_uv_stats, mean_iou};
use auvnet::geometry::load_textured_mesh;
use auvnet::networks::{AuvModel, Category};
use auvnet::synthdata::{read_head_sidecar, toy_dataset, write_head_dataset, write_toy_dataset, LANDMARK_NAMES};
use auvnet::trainer::{
    files_with_extension, fit_new_shape, load_samples, par_map, preprocess_mesh, toy_reconstruction_mse, train, train_toy,
    FitConfig, MetricRow, ShapeSample, TrainHooks,
};
use auvnet::{AuvError, Result};

/// Aligned texture-space learning for shape collections.
#[derive(Parser)]
#[command(name = "auvnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run config (a toy config for train-toy and eval-landmarks).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Multiplier applied to every epoch count.
    #[arg(long, global = true)]
    epoch_scale: Option<f64>,
    /// Image size, voxel resolution or texture size, depending on the command.
    #[arg(long, global = true)]
    resolution: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Toy,
    Heads,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: warped face images or textured heads.
    GenData {
        #[arg(long, value_enum, default_value = "toy")]
        kind: DataKind,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Sample and voxelize every OBJ in a directory.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 16384)]
        points: usize,
    },
    /// Train a 3D model on preprocessed shapes.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Category used when no config is given.
        #[arg(long, default_value = "head")]
        category: String,
    },
    /// Train the 2D alignment module on generated faces.
    TrainToy,
    /// Bake, inpaint and export the textures of a mesh.
    Bake {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long, default_value_t = 16384)]
        points: usize,
    },
    /// Put the textures of export B onto export A.
    Transfer {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Fit a trained model to an unseen mesh with the basis frozen.
    FitNew {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long, default_value_t = 100)]
        duplicates: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 16384)]
        points: usize,
    },
    /// One-shot segmentation IOU on a generated heads directory.
    EvalSeg {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        exemplar: usize,
        #[arg(long, default_value_t = 16384)]
        points: usize,
    },
    /// Landmark spread in UV space for a toy model.
    EvalLandmarks {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Render the basis images of every generator.
    RenderBasis {
        #[arg(long)]
        model: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_model(path: &Path) -> Result<AuvModel> {
    AuvModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn report(out: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    auvnet::io::write_json(&out.join(name), value)
}

fn print_row(row: &MetricRow) {
    let terms: Vec<String> = ["L_c", "L_n", "L_x", "L_s", "L_p"]
        .iter()
        .zip(row.terms)
        .filter_map(|(n, t)| t.map(|v| format!("{n} {v:.5}")))
        .collect();
    println!("stage {} epoch {:4}  {}  total {:.5}", row.stage, row.epoch, terms.join("  "), row.total);
}

fn toy_config(cli: &Cli) -> Result<ToyConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_json(p)?,
        None => ToyConfig::desk(cli.resolution.unwrap_or(64)),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.epoch_scale {
        cfg = cfg.scaled(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_config(cli: &Cli, category: &str) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_json(p)?,
        None => {
            let cat: Category = serde_json::from_value(json!(category))
                .map_err(|_| AuvError::Config(format!("unknown category `{category}`")))?;
            RunConfig::for_category(cat, cli.resolution.unwrap_or(32), 8)
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.epoch_scale {
        cfg.epoch_scale = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn preprocess_file(path: &Path, points: usize, resolution: usize, seed: u64) -> Result<ShapeSample> {
    if path.extension().is_some_and(|e| e == "auvn") {
        return ShapeSample::load(path);
    }
    preprocess_mesh(&load_textured_mesh(path)?, points, resolution, seed)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "shape".into(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::GenData { kind, count } => {
            let out = out_dir(&cli, "data");
            std::fs::create_dir_all(&out)?;
            match kind {
                DataKind::Toy => {
                    let shift = match &cli.config {
                        Some(p) => load_json::<ToyConfig>(p)?.corner_shift,
                        None => 0.15,
                    };
                    write_toy_dataset(&out, seed, *count, cli.resolution.unwrap_or(64), shift)?
                }
                DataKind::Heads => write_head_dataset(&out, seed, *count, cli.resolution.unwrap_or(256))?,
            }
            println!("wrote {count} items to {}", out.display());
        }
        Command::Preprocess { data, points } => {
            let out = out_dir(&cli, "preprocessed");
            std::fs::create_dir_all(&out)?;
            let res = cli.resolution.unwrap_or(32);
            let files = files_with_extension(data, "obj")?;
            if files.is_empty() {
                return Err(AuvError::Data(format!("no OBJ files in {}", data.display())));
            }
            par_map(&files, worker_threads()?, |i, f| {
                preprocess_file(f, *points, res, seed.wrapping_add(i as u64))?.save(&out.join(format!("{}.auvn", stem(f))))
            })
            .into_iter()
            .collect::<Result<Vec<()>>>()?;
            println!("preprocessed {} shapes into {}", files.len(), out.display());
        }
        Command::Train { data, category } => {
            let run = run_config(&cli, category)?;
            let data = data
                .clone()
                .or_else(|| run.paths.data.clone())
                .ok_or_else(|| AuvError::Config("no data directory given".into()))?;
            let out = cli.out.clone().or_else(|| run.paths.out.clone()).unwrap_or_else(|| "out/train".into());
            let samples = load_samples(&data)?;
            let hooks = TrainHooks {
                out_dir: Some(out.clone()),
                on_epoch: Some(Box::new(|row: &MetricRow, _| print_row(row))),
            };
            let trained = train(&run, &samples, hooks)?;
            trained.model.to_checkpoint()?.save(&out.join("model.auvn"))?;
            auvnet::io::write_json(&out.join("run.json"), &run)?;
            println!("wrote {}", out.join("model.auvn").display());
        }
        Command::TrainToy => {
            let cfg = toy_config(&cli)?;
            let out = out_dir(&cli, "out/toy");
            let res = cfg.model.input_resolution;
            let data = toy_dataset(cfg.seed, cfg.images, res, cfg.corner_shift)?;
            let hooks = TrainHooks {
                out_dir: Some(out.clone()),
                on_epoch: Some(Box::new(|row: &MetricRow, _| print_row(row))),
            };
            let trained = train_toy(&cfg, &data, hooks)?;
            trained.model.to_checkpoint()?.save(&out.join("model.auvn"))?;
            auvnet::io::write_json(&out.join("toy.json"), &cfg)?;
            for (i, img) in data.iter().take(8).enumerate() {
                auvnet::baker::bake_toy_image(&trained.model, img, res)?
                    .filled(INPAINT_RADIUS)?
                    .save_png(&out.join(format!("aligned_{i:02}.png")))?;
            }
            let mse = toy_reconstruction_mse(&trained.model, &data)?;
            let stats = landmark_uv_stats(&trained.model, &data)?;
            report(&out, "landmarks.json", &landmark_json(mse, &stats))?;
        }
        Command::Bake { model, shape, points } => {
            let model = load_model(model)?;
            let out = out_dir(&cli, "out/bake");
            let r = cli.resolution.unwrap_or(auvnet::baker::DEFAULT_RESOLUTION);
            let mesh = load_textured_mesh(shape)?;
            let sample = preprocess_mesh(&mesh, *points, model.config.input_resolution, seed)?;
            let baked = bake_texture(&model, &sample, r)?;
            for (k, t) in baked.iter().enumerate() {
                if t.valid_count() == 0 {
                    eprintln!("warning: no samples routed to texture {k}; it stays blank");
                }
            }
            let textures = baked.iter().map(|t| t.filled(INPAINT_RADIUS)).collect::<Result<Vec<_>>>()?;
            let export = export_textured(&mesh, &model, &sample.grid, &textures)?;
            let obj = export.write(&out, &stem(shape))?;
            println!("wrote {} ({} seam faces)", obj.display(), export.seam_faces);
        }
        Command::Transfer { a, b } => {
            let out = out_dir(&cli, "out/transfer");
            let ea = TexturedExport::load(a)?;
            let eb = TexturedExport::load(b)?;
            let obj = transfer_texture(&ea, &eb.textures)?.write(&out, &format!("{}_with_{}", stem(a), stem(b)))?;
            println!("wrote {}", obj.display());
        }
        Command::FitNew { model, shape, duplicates, epochs, points } => {
            let model = load_model(model)?;
            let out = out_dir(&cli, "out/fit");
            let mut run = match &cli.config {
                Some(_) => run_config(&cli, "head")?,
                None => {
                    let mut r = RunConfig::for_category(model.config.category, model.config.input_resolution, 8);
                    r.model = model.config.clone();
                    r
                }
            };
            run.model = model.config.clone();
            let scale = cli.epoch_scale.unwrap_or(1.0);
            let fit = FitConfig {
                duplicates: *duplicates,
                epochs: ((*epochs as f64 * scale).round() as usize).max(1),
            };
            let sample = preprocess_file(shape, *points, model.config.input_resolution, seed)?;
            let result = fit_new_shape(&model, &run, &sample, &fit)?;
            result.model.to_checkpoint()?.save(&out.join("model.auvn"))?;
            let constant = result.basis_hashes.windows(2).all(|w| w[0] == w[1]);
            report(
                &out,
                "fit.json",
                &json!({
                    "epochs": fit.epochs,
                    "duplicates": fit.duplicates,
                    "colorless": sample.colorless(),
                    "basis_hash": result.basis_hashes[0],
                    "basis_hash_constant": constant,
                    "code": result.record.code.data(),
                    "final_total": result.metrics.last().map(|m| m.total),
                }),
            )?;
        }
        Command::EvalSeg { model, data, exemplar, points } => {
            let model = load_model(model)?;
            let out = out_dir(&cli, "out/eval");
            let r = cli.resolution.unwrap_or(auvnet::baker::DEFAULT_RESOLUTION);
            let files = files_with_extension(data, "obj")?;
            if files.len() < 2 || *exemplar >= files.len() {
                return Err(AuvError::Data("need an exemplar and at least one other head".into()));
            }
            let styles = files
                .iter()
                .map(|f| Ok(read_head_sidecar(&f.with_extension("json"))?.style))
                .collect::<Result<Vec<_>>>()?;
            let samples = par_map(&files, worker_threads()?, |i, f| {
                preprocess_mesh(&load_textured_mesh(f)?, *points, model.config.input_resolution, seed.wrapping_add(i as u64))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mut order: Vec<usize> = (0..files.len()).collect();
            order.swap(0, *exemplar);
            let pairs: Vec<_> = order.iter().map(|&i| (&styles[i], &samples[i])).collect();
            let (miou, per_class) = head_segmentation(&model, &pairs, r)?;
            report(
                &out,
                "segmentation.json",
                &json!({
                    "exemplar": files[*exemplar].display().to_string(),
                    "shapes": files.len() - 1,
                    "mean_iou": miou,
                    "pooled_mean_iou": mean_iou(&per_class),
                    "per_class_iou": per_class,
                }),
            )?;
        }
        Command::EvalLandmarks { model, count } => {
            let model = load_model(model)?;
            let out = out_dir(&cli, "out/eval");
            let shift = match &cli.config {
                Some(p) => load_json::<ToyConfig>(p)?.corner_shift,
                None => 0.15,
            };
            let data = toy_dataset(seed, *count, model.config.input_resolution, shift)?;
            let mse = toy_reconstruction_mse(&model, &data)?;
            let stats = landmark_uv_stats(&model, &data)?;
            report(&out, "landmarks.json", &landmark_json(mse, &stats))?;
        }
        Command::RenderBasis { model } => {
            let model = load_model(model)?;
            let out = out_dir(&cli, "out/basis");
            let grid = cli.resolution.unwrap_or(128);
            for k in 0..model.config.num_generators() {
                for (c, img) in model.render_basis(k, grid)?.iter().enumerate() {
                    normalized(img)?.save_png(&out.join(format!("basis{k}_{c:03}.png")))?;
                }
            }
            println!("wrote basis images to {}", out.display());
        }
    }
    Ok(())
}

fn landmark_json(mse: f64, stats: &[auvnet::eval::LandmarkStats]) -> serde_json::Value {
    json!({
        "reconstruction_mse": mse,
        "landmarks": LANDMARK_NAMES.iter().zip(stats).map(|(n, s)| json!({
            "name": n,
            "uv_mean": s.uv_mean,
            "uv_std": s.uv_std,
            "input_std": s.input_std,
            "ratio": s.ratio(),
        })).collect::<Vec<_>>(),
    })
}

/// Min-max stretch of a single-channel raster into `[0, 1]`, flipped so that
/// v points up.
fn normalized(img: &auvnet::raster::Raster) -> Result<auvnet::raster::Raster> {
    let (lo, hi) = img.data().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-12);
    let (w, h) = (img.width(), img.height());
    let mut data = Vec::with_capacity(w * h);
    for row in (0..h).rev() {
        for x in 0..w {
            data.push((img.pixel(x, row)[0] - lo) / span);
        }
    }
    auvnet::raster::Raster::from_data(w, h, 1, data)
}
