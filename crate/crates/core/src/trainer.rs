//! Multi-stage training, the 2D toy loop and unseen-shape fitting.

use std::path::{Path, PathBuf};

use auv_tensor::{clip_grad_norm, Adam, AdamConfig, NamedGrads, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{OptimConfig, RunConfig, StageConfig, ToyConfig};
use crate::error::{AuvError, Result};
use crate::geometry::{normalize_to_unit_box, sample_surface, voxelize_colored, ColoredPointCloud, TexturedMesh};
use crate::losses::{
    choose_subset, neighbors_grid, prior_loss, prior_targets, recon_losses, smoothness_loss, total_loss,
    LossTerms, LossWeights, PriorTargets,
};
use crate::networks::{is_basis_param, model_forward, AuvModel, ModelConfig};
use crate::synthdata::ToyImage;

/// One preprocessed shape: encoder input grid and a dense surface sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    pub grid: Tensor<f32>,
    pub cloud: ColoredPointCloud,
}

impl ShapeSample {
    pub fn colorless(&self) -> bool {
        self.cloud.colorless
    }

    pub fn write_entries(&self, ckpt: &mut auv_tensor::Checkpoint, prefix: &str) {
        ckpt.insert(format!("{prefix}grid"), self.grid.clone());
        self.cloud.write_entries(ckpt, prefix);
    }

    pub fn read_entries(ckpt: &auv_tensor::Checkpoint, prefix: &str) -> Result<Self> {
        Ok(Self {
            grid: ckpt.tensor(&format!("{prefix}grid"))?.clone(),
            cloud: ColoredPointCloud::read_entries(ckpt, prefix)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = auv_tensor::Checkpoint::new();
        self.write_entries(&mut ckpt, "sample.");
        Ok(ckpt.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_entries(&auv_tensor::Checkpoint::load(path)?, "sample.")
    }
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every preprocessed `.auvn` sample in `dir`, sorted by file name.
pub fn load_samples(dir: &Path) -> Result<Vec<ShapeSample>> {
    let files = files_with_extension(dir, "auvn")?;
    if files.is_empty() {
        return Err(AuvError::Data(format!("no preprocessed shapes in {}", dir.display())));
    }
    files.iter().map(|f| ShapeSample::load(f)).collect()
}

/// Normalizes, samples `points` surface points with `seed` and voxelizes.
pub fn preprocess_mesh(mesh: &TexturedMesh, points: usize, voxel_resolution: usize, seed: u64) -> Result<ShapeSample> {
    let mesh = normalize_to_unit_box(mesh)?;
    let cloud = sample_surface(&mesh, points, seed)?;
    let grid = voxelize_colored(&cloud, voxel_resolution)?.to_tensor();
    Ok(ShapeSample { grid, cloud })
}

/// Maps `f` over `items` on `threads` scoped workers, preserving order.
pub fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(usize, &T) -> U + Sync) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || part.iter().enumerate().map(|(i, t)| f(c * chunk + i, t)).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Mean loss terms of one epoch. Absent terms are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub stage: usize,
    pub epoch: usize,
    pub terms: [Option<f64>; 5],
    pub total: f64,
}

pub const METRIC_HEADER: &str = "epoch,stage,L_c,L_n,L_x,L_s,L_p,total";

impl MetricRow {
    pub fn csv(&self) -> String {
        let mut s = format!("{},{}", self.epoch, self.stage);
        for t in self.terms {
            match t {
                Some(v) => s.push_str(&format!(",{v:.9e}")),
                None => s.push(','),
            }
        }
        s.push_str(&format!(",{:.9e}", self.total));
        s
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRIC_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: AuvModel,
    pub metrics: Vec<MetricRow>,
}

/// Running per-term means over the steps of one epoch.
#[derive(Default)]
struct EpochAccumulator {
    sums: [f64; 5],
    counts: [usize; 5],
    total: f64,
    steps: usize,
}

impl EpochAccumulator {
    fn add(&mut self, terms: &[Option<f64>; 5], total: f64) {
        for (k, t) in terms.iter().enumerate() {
            if let Some(v) = t {
                self.sums[k] += v;
                self.counts[k] += 1;
            }
        }
        self.total += total;
        self.steps += 1;
    }

    fn row(&self, stage: usize, epoch: usize) -> MetricRow {
        let mut terms = [None; 5];
        for k in 0..5 {
            if self.counts[k] > 0 {
                terms[k] = Some(self.sums[k] / self.counts[k] as f64);
            }
        }
        MetricRow {
            stage,
            epoch,
            terms,
            total: self.total / self.steps.max(1) as f64,
        }
    }
}

fn optimizer(optim: &OptimConfig) -> Adam<f32> {
    Adam::new(AdamConfig {
        lr: optim.lr,
        ..AdamConfig::default()
    })
}

/// Clips and applies one Adam update, aborting on a non-finite gradient.
fn apply(
    model: &mut AuvModel,
    adam: &mut Adam<f32>,
    mut grads: NamedGrads<f32>,
    clip: Option<f64>,
    stage: usize,
    epoch: usize,
) -> Result<()> {
    let norm = match clip {
        Some(c) => clip_grad_norm(&mut grads, c),
        None => grads.values().map(|g| g.sum_sq() as f64).sum::<f64>().sqrt(),
    };
    if !norm.is_finite() {
        return Err(AuvError::Numerical {
            stage,
            epoch,
            term: "gradient".into(),
        });
    }
    adam.step(&mut model.params, &grads)?;
    Ok(())
}

fn check_terms(values: &[Option<f64>; 5], total: f64, stage: usize, epoch: usize) -> Result<()> {
    const NAMES: [&str; 5] = ["L_c", "L_n", "L_x", "L_s", "L_p"];
    for (name, v) in NAMES.iter().zip(values) {
        if matches!(v, Some(x) if !x.is_finite()) {
            return Err(AuvError::Numerical {
                stage,
                epoch,
                term: name.to_string(),
            });
        }
    }
    if !total.is_finite() {
        return Err(AuvError::Numerical {
            stage,
            epoch,
            term: "total".into(),
        });
    }
    Ok(())
}

fn rows_tensor(rows: impl Iterator<Item = [f64; 3]>, n: usize) -> Tensor<f32> {
    let data = rows.flat_map(|r| r.map(|v| v as f32)).collect();
    Tensor::new(vec![n, 3], data).expect("n x 3")
}

/// Settings of a 3D optimization pass shared by training and fitting.
struct ShapePass<'a> {
    points: usize,
    smooth_subset: usize,
    sigma: f64,
    optim: &'a OptimConfig,
}

/// Forward/backward for one shape; returns gradients and the term values.
fn shape_step(
    model: &AuvModel,
    shape: &ShapeSample,
    weights: &LossWeights,
    freeze_basis: bool,
    pass: &ShapePass<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(NamedGrads<f32>, [Option<f64>; 5], f64)> {
    let cfg = &model.config;
    let cloud = &shape.cloud;
    let idx = choose_subset(rng, cloud.len(), pass.points);
    let n = idx.len();
    let pos: Vec<[f64; 3]> = idx.iter().map(|&i| cloud.positions[i]).collect();
    let nrm: Vec<[f64; 3]> = idx.iter().map(|&i| cloud.normals[i]).collect();

    let mut tape = Tape::<f32>::new();
    let params = model.params.bind(&mut tape, |name| !(freeze_basis && is_basis_param(name)));
    let grid = tape.constant(shape.grid.clone());
    let p = tape.constant(rows_tensor(pos.iter().copied(), n));
    let nv = tape.constant(rows_tensor(nrm.iter().copied(), n));
    let colors = if cloud.colorless {
        None
    } else {
        let data = idx.iter().flat_map(|&i| cloud.colors[i]).collect();
        Some(tape.constant(Tensor::new(vec![n, 3], data)?))
    };
    let (_, dec) = model_forward(cfg, &params, &mut tape, grid, p, Some(nv))?;
    let mut terms: LossTerms = recon_losses(&mut tape, dec.pred, colors, Some(nv), Some(p))?;

    let local = choose_subset(rng, n, pass.smooth_subset);
    let nb = neighbors_grid(&pos, &local, pass.sigma);
    terms.smooth = Some(smoothness_loss(&mut tape, dec.uv, &nb)?);
    if weights.prior > 0.0 {
        let targets = prior_targets(cfg.category, &pos, &nrm)?;
        terms.prior = Some(prior_loss(&mut tape, dec.uv, dec.masks, &targets)?);
    }
    let total = total_loss(&mut tape, &terms, weights);
    let values = terms.named().map(|(_, v)| v.map(|v| tape.value(v).item() as f64));
    let total_value = tape.value(total).item() as f64;
    let grads = tape.backward(total)?;
    Ok((params.collect_grads(&tape, &grads), values, total_value))
}

/// Callbacks and outputs of a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Directory receiving `stage{k}.auvn` checkpoints and `metrics.csv`.
    pub out_dir: Option<PathBuf>,
    pub on_epoch: Option<Box<dyn FnMut(&MetricRow, &AuvModel) + 'a>>,
}

fn save_stage(dir: &Path, stage: usize, model: &AuvModel, metrics: &[MetricRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    model.to_checkpoint()?.save(&dir.join(format!("stage{stage}.auvn")))?;
    crate::io::write_text(&dir.join("metrics.csv"), &metrics_csv(metrics))
}

/// Runs the scaled stages of `run` from a freshly initialized model.
pub fn train(run: &RunConfig, data: &[ShapeSample], hooks: TrainHooks<'_>) -> Result<TrainOutcome> {
    run.validate()?;
    let model = AuvModel::new(run.model.clone(), run.seed)?;
    train_stages(model, run, &run.scaled_stages(), data, hooks)
}

/// Runs `stages` on `model` with one optimizer step per shape per epoch.
pub fn train_stages(
    mut model: AuvModel,
    run: &RunConfig,
    stages: &[StageConfig],
    data: &[ShapeSample],
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(AuvError::Data("no training shapes".into()));
    }
    let expected = run.model.input_shape();
    if let Some(bad) = data.iter().find(|s| s.grid.shape() != expected.as_slice()) {
        return Err(AuvError::Data(format!(
            "voxel grid {:?} does not match model input {expected:?}",
            bad.grid.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x7a11_0000);
    let mut adam = optimizer(&run.optim);
    let pass = ShapePass {
        points: run.points,
        smooth_subset: run.smooth_subset,
        sigma: run.sigma,
        optim: &run.optim,
    };
    let total_epochs: usize = stages.iter().map(|s| s.epochs).sum();
    let mut global = 0;
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for (si, stage) in stages.iter().enumerate() {
        let stage_no = si + 1;
        for epoch in 0..stage.epochs {
            adam.config.lr = pass.optim.lr_at(global, total_epochs);
            let weights = stage.weights_at(epoch);
            order.shuffle(&mut rng);
            let mut acc = EpochAccumulator::default();
            for &s in &order {
                let (grads, values, total) =
                    shape_step(&model, &data[s], &weights, stage.freeze_basis, &pass, &mut rng)?;
                check_terms(&values, total, stage_no, epoch)?;
                apply(&mut model, &mut adam, grads, pass.optim.clip, stage_no, epoch)?;
                acc.add(&values, total);
            }
            let row = acc.row(stage_no, epoch);
            if let Some(cb) = hooks.on_epoch.as_mut() {
                cb(&row, &model);
            }
            metrics.push(row);
            global += 1;
        }
        if let Some(dir) = &hooks.out_dir {
            save_stage(dir, stage_no, &model, &metrics)?;
        }
    }
    Ok(TrainOutcome { model, metrics })
}

/// Encoder input `[3, H, W]` of a toy image.
pub fn image_tensor(img: &ToyImage) -> Tensor<f32> {
    let r = &img.raster;
    let (w, h) = (r.width(), r.height());
    let mut data = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let px = r.pixel(x, y);
            for c in 0..3 {
                data[(c * h + y) * w + x] = px[c];
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("sized")
}

/// Pixel centres of a `size²` image in the `[-0.5, 0.5]²` frame, row-major.
pub fn pixel_points(size: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(size * size * 2);
    for y in 0..size {
        for x in 0..size {
            data.push(((x as f64 + 0.5) / size as f64 - 0.5) as f32);
            data.push(((y as f64 + 0.5) / size as f64 - 0.5) as f32);
        }
    }
    Tensor::new(vec![size * size, 2], data).expect("sized")
}

/// Trains a toy model on warped face images: color reconstruction plus an
/// identity prior on the UV mapper during the first `prior_epochs`.
pub fn train_toy(cfg: &ToyConfig, data: &[ToyImage], mut hooks: TrainHooks<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let res = cfg.model.input_resolution;
    if data.is_empty() {
        return Err(AuvError::Data("no toy images".into()));
    }
    if let Some(bad) = data.iter().find(|d| d.raster.width() != res || d.raster.height() != res) {
        return Err(AuvError::Data(format!(
            "image {}x{} does not match model resolution {res}",
            bad.raster.width(),
            bad.raster.height()
        )));
    }
    let mut model = AuvModel::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x70e_0000);
    let mut adam = optimizer(&cfg.optim);
    let inputs: Vec<Tensor<f32>> = data.iter().map(image_tensor).collect();
    let grid_points = pixel_points(res);
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        adam.config.lr = cfg.optim.lr_at(epoch, cfg.epochs);
        let weights = LossWeights::new(
            1.0,
            0.0,
            0.0,
            0.0,
            if epoch < cfg.prior_epochs { cfg.prior_weight } else { 0.0 },
        );
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::default();
        for batch in order.chunks(cfg.batch) {
            let mut tape = Tape::<f32>::new();
            let params = model.params.bind(&mut tape, |_| true);
            let mut batch_terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let idx = choose_subset(&mut rng, res * res, cfg.points);
                let n = idx.len();
                let mut pts = Vec::with_capacity(2 * n);
                let mut cols = Vec::with_capacity(3 * n);
                for &k in &idx {
                    pts.extend_from_slice(grid_points.row(k));
                    cols.extend_from_slice(data[i].raster.pixel(k % res, k / res));
                }
                let pts = Tensor::new(vec![n, 2], pts)?;
                let x = tape.constant(inputs[i].clone());
                let p = tape.constant(pts.clone());
                let c = tape.constant(Tensor::new(vec![n, 3], cols)?);
                let (_, dec) = model_forward(&model.config, &params, &mut tape, x, p, None)?;
                let mut terms = recon_losses(&mut tape, dec.pred, Some(c), None, None)?;
                if weights.prior > 0.0 {
                    let targets = PriorTargets { uv: pts.cast(), masks: None };
                    terms.prior = Some(prior_loss(&mut tape, dec.uv, None, &targets)?);
                }
                batch_terms.push(terms);
            }
            let terms = mean_terms(&mut tape, &batch_terms)?;
            let total = total_loss(&mut tape, &terms, &weights);
            let values = terms.named().map(|(_, v)| v.map(|v| tape.value(v).item() as f64));
            let total_value = tape.value(total).item() as f64;
            check_terms(&values, total_value, 1, epoch)?;
            let grads = tape.backward(total)?;
            let grads = params.collect_grads(&tape, &grads);
            apply(&mut model, &mut adam, grads, cfg.optim.clip, 1, epoch)?;
            acc.add(&values, total_value);
        }
        let row = acc.row(1, epoch);
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&row, &model);
        }
        metrics.push(row);
    }
    if let Some(dir) = &hooks.out_dir {
        save_stage(dir, 1, &model, &metrics)?;
    }
    Ok(TrainOutcome { model, metrics })
}

/// Term-wise mean over a batch; a single entry is returned as is.
fn mean_terms(tape: &mut Tape<f32>, batch: &[LossTerms]) -> Result<LossTerms> {
    if let [only] = batch {
        return Ok(*only);
    }
    let scale = 1.0 / batch.len() as f32;
    let mut mean = |pick: fn(&LossTerms) -> Option<Var>| -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for t in batch {
            let Some(v) = pick(t) else { return Ok(None) };
            acc = Some(match acc {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
        }
        Ok(acc.map(|a| tape.scale(a, scale)))
    };
    Ok(LossTerms {
        color: mean(|t| t.color)?,
        normal: mean(|t| t.normal)?,
        coord: mean(|t| t.coord)?,
        smooth: mean(|t| t.smooth)?,
        prior: mean(|t| t.prior)?,
    })
}

/// Mean squared color error of the toy model over every pixel of `data`.
pub fn toy_reconstruction_mse(model: &AuvModel, data: &[ToyImage]) -> Result<f64> {
    let res = model.config.input_resolution;
    let points = pixel_points(res);
    let mut sum = 0.0;
    for img in data {
        let out = model.evaluate(&image_tensor(img), &points, None)?;
        let target = img.raster.data();
        sum += out
            .pred
            .data()
            .iter()
            .zip(target)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / target.len() as f64;
    }
    Ok(sum / data.len() as f64)
}

/// Per-shape outputs of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRecord {
    pub code: Tensor<f32>,
    pub coeffs: Vec<Tensor<f32>>,
}

impl ShapeRecord {
    pub fn of(model: &AuvModel, shape: &ShapeSample) -> Result<Self> {
        let (code, coeffs) = model.encode_values(&shape.grid)?;
        Ok(Self { code, coeffs })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FitConfig {
    pub duplicates: usize,
    pub epochs: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            duplicates: 100,
            epochs: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: AuvModel,
    pub record: ShapeRecord,
    pub metrics: Vec<MetricRow>,
    /// Basis-generator hash before fitting and after every epoch.
    pub basis_hashes: Vec<String>,
}

/// Continues the last stage of `run` on `duplicates` copies of one new shape
/// with the basis generators frozen. Colorless shapes train without `L_c`.
pub fn fit_new_shape(model: &AuvModel, run: &RunConfig, shape: &ShapeSample, fit: &FitConfig) -> Result<FitOutcome> {
    if fit.duplicates == 0 || fit.epochs == 0 {
        return Err(AuvError::Config("fit needs at least one duplicate and one epoch".into()));
    }
    let last = run
        .stages
        .last()
        .ok_or_else(|| AuvError::Config("run has no stages".into()))?;
    let mut stage = last.clone();
    stage.epochs = fit.epochs;
    stage.freeze_basis = true;
    stage.prior_epochs = None;
    stage.weights.prior = 0.0;
    let data = vec![shape.clone(); fit.duplicates];
    let mut hashes = vec![model.basis_hash()];
    let outcome = {
        let hooks = TrainHooks {
            out_dir: None,
            on_epoch: Some(Box::new(|_: &MetricRow, m: &AuvModel| hashes.push(m.basis_hash()))),
        };
        train_stages(model.clone(), run, &[stage], &data, hooks)?
    };
    let record = ShapeRecord::of(&outcome.model, shape)?;
    Ok(FitOutcome {
        model: outcome.model,
        record,
        metrics: outcome.metrics,
        basis_hashes: hashes,
    })
}

/// Config of a model checkpoint, for callers that only need the header.
pub fn checkpoint_config(path: &Path) -> Result<ModelConfig> {
    Ok(AuvModel::from_checkpoint(&auv_tensor::Checkpoint::load(path)?)?.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Category, EncoderConfig, EncoderKind, GeneratorConfig, MlpConfig};
    use crate::synthdata::{make_head_mesh, toy_dataset};

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::for_category(Category::Head, 8, 1);
        run.model = ModelConfig {
            category: Category::Head,
            input_resolution: 8,
            out_channels: 9,
            code_dim: 4,
            encoder: EncoderConfig { kind: EncoderKind::Conv, channels: vec![4, 4], kernel: 4 },
            uv_mapper: MlpConfig { width: 16, depth: 2 },
            uv_skip: true,
            uv_identity: false,
            masker: Some(MlpConfig { width: 8, depth: 1 }),
            generators: vec![
                GeneratorConfig { channels: 4, width: 8, depth: 2, table_resolution: None },
                GeneratorConfig { channels: 2, width: 8, depth: 1, table_resolution: None },
            ],
        };
        run.points = 256;
        run.smooth_subset = 64;
        run.epoch_scale = 0.001;
        run
    }

    fn tiny_data() -> Vec<ShapeSample> {
        (0..2)
            .map(|s| preprocess_mesh(&make_head_mesh(s, 16).mesh, 1024, 8, s).unwrap())
            .collect()
    }

    #[test]
    fn training_is_deterministic() {
        let run = tiny_run();
        let data = tiny_data();
        let a = train(&run, &data, TrainHooks::default()).unwrap();
        let b = train(&run, &data, TrainHooks::default()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
        let epochs: Vec<usize> = run.scaled_stages().iter().map(|s| s.epochs).collect();
        assert_eq!(epochs, vec![1, 2, 2]);
        assert_eq!(a.metrics.len(), 5);
        assert!(a.metrics[0].terms[4].is_some());
        assert!(a.metrics[1..].iter().all(|m| m.terms[4].is_none()));
    }

    #[test]
    fn fit_keeps_basis_and_drops_color_for_colorless_shapes() {
        let run = tiny_run();
        let data = tiny_data();
        let model = AuvModel::new(run.model.clone(), 0).unwrap();
        let mut shape = data[0].clone();
        shape.cloud.colorless = true;
        let fit = fit_new_shape(&model, &run, &shape, &FitConfig { duplicates: 3, epochs: 2 }).unwrap();
        assert_eq!(fit.basis_hashes.len(), 3);
        assert!(fit.basis_hashes.iter().all(|h| *h == fit.basis_hashes[0]));
        for (name, t) in model.params.iter().filter(|(n, _)| is_basis_param(n)) {
            assert_eq!(t, fit.model.params.get(name).unwrap());
        }
        assert_ne!(model.params.get("uv.0.w").unwrap(), fit.model.params.get("uv.0.w").unwrap());
        assert!(fit.metrics.iter().all(|m| m.terms[0].is_none()));
    }

    #[test]
    fn nan_input_aborts_with_diagnostic() {
        let run = tiny_run();
        let mut data = tiny_data();
        data[0].cloud.colors[0] = [f32::NAN; 3];
        data[1].cloud.colors[0] = [f32::NAN; 3];
        let mut r = run.clone();
        r.points = 1024;
        match train(&r, &data, TrainHooks::default()) {
            Err(AuvError::Numerical { stage, epoch, term }) => {
                assert_eq!((stage, epoch), (1, 0));
                assert_eq!(term, "L_c");
            }
            other => panic!("expected a numerical abort, got {other:?}"),
        }
    }

    #[test]
    fn toy_training_runs_and_is_deterministic() {
        let mut cfg = ToyConfig::desk(16);
        cfg.model.generators[0].channels = 8;
        cfg.images = 3;
        cfg.epochs = 2;
        cfg.prior_epochs = 1;
        cfg.points = 64;
        let data = toy_dataset(0, 3, 16, 0.15).unwrap();
        let a = train_toy(&cfg, &data, TrainHooks::default()).unwrap();
        let b = train_toy(&cfg, &data, TrainHooks::default()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
        assert!(a.metrics[0].terms[4].is_some());
        assert!(a.metrics[1].terms[4].is_none());
        assert!(toy_reconstruction_mse(&a.model, &data).unwrap().is_finite());
    }

    #[test]
    fn metrics_csv_layout() {
        let row = MetricRow { stage: 2, epoch: 5, terms: [Some(1.0), None, None, None, None], total: 1.0 };
        let csv = metrics_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRIC_HEADER);
        assert_eq!(lines.next().unwrap().split(',').count(), 8);
    }
}
