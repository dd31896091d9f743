//! Run configurations and per-category training schedules.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AuvError, Result};
use crate::losses::LossWeights;
use crate::networks::{pca_config, shape_config, toy_config, Category, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub weights: LossWeights,
    /// Epochs into the stage after which `w_p` drops to zero.
    #[serde(default)]
    pub prior_epochs: Option<usize>,
    #[serde(default)]
    pub freeze_basis: bool,
}

impl StageConfig {
    pub fn new(epochs: usize, w: [f64; 5]) -> Self {
        Self {
            epochs,
            weights: LossWeights::new(w[0], w[1], w[2], w[3], w[4]),
            prior_epochs: None,
            freeze_basis: false,
        }
    }

    fn with_prior_epochs(mut self, e: usize) -> Self {
        self.prior_epochs = Some(e);
        self
    }

    /// Weights in effect at `epoch` (0-based, within the stage).
    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        let mut w = self.weights;
        if matches!(self.prior_epochs, Some(p) if epoch >= p) {
            w.prior = 0.0;
        }
        w
    }

    /// Multiplies epoch counts by `scale`, keeping at least one epoch.
    pub fn scaled(&self, scale: f64) -> Self {
        let s = |e: usize| ((e as f64 * scale).round() as usize).max(1);
        Self {
            epochs: s(self.epochs),
            prior_epochs: self.prior_epochs.map(s),
            ..self.clone()
        }
    }
}

/// Three-stage schedule of `category` at full scale.
pub fn paper_schedule(category: Category) -> Vec<StageConfig> {
    let st = StageConfig::new;
    match category {
        Category::Toy => vec![st(100, [1.0, 0.0, 0.0, 0.0, 1.0]).with_prior_epochs(5)],
        Category::Head => vec![
            st(10, [1.0, 0.5, 100.0, 100.0, 1.0]),
            st(2000, [1.0, 0.5, 1.0, 1.0, 0.0]),
            st(2000, [1.0, 0.5, 100.0, 100.0, 0.0]),
        ],
        Category::Body => vec![
            st(10, [1.0, 0.5, 1.0, 1.0, 1.0]),
            st(2000, [1.0, 0.1, 1.0, 1.0, 0.0]),
            st(2000, [1.0, 0.5, 100.0, 100.0, 0.0]),
        ],
        Category::Animal => vec![
            st(10, [0.1, 1.0, 100.0, 100.0, 100.0]),
            st(2000, [0.1, 1.0, 100.0, 100.0, 0.0]),
            st(2000, [0.1, 1.0, 100.0, 10.0, 0.0]),
        ],
        Category::TurbosquidCar => vec![
            st(200, [1.0, 0.1, 100.0, 10.0, 1.0]).with_prior_epochs(10),
            st(1800, [1.0, 0.1, 1.0, 10.0, 0.0]),
            st(2000, [1.0, 0.1, 1000.0, 100.0, 0.0]),
        ],
        Category::ShapenetCar => vec![
            st(20, [1.0, 0.1, 10.0, 10.0, 1.0]).with_prior_epochs(5),
            st(40, [1.0, 0.1, 1.0, 10.0, 0.0]),
            st(140, [1.0, 1.0, 100.0, 100.0, 0.0]),
        ],
        Category::Chair => vec![
            st(50, [1.0, 1.0, 10.0, 100.0, 100.0]).with_prior_epochs(5),
            st(50, [1.0, 1.0, 10.0, 10.0, 0.0]),
            st(100, [1.0, 1.0, 100.0, 100.0, 0.0]),
        ],
    }
}

pub fn validate_stages(stages: &[StageConfig]) -> Result<()> {
    if stages.is_empty() {
        return Err(AuvError::Config("at least one stage is required".into()));
    }
    for (i, s) in stages.iter().enumerate() {
        s.weights.validate()?;
        if s.epochs == 0 {
            return Err(AuvError::Config(format!("stage {} has zero epochs", i + 1)));
        }
        if i > 0 && s.weights.prior > 0.0 {
            return Err(AuvError::Config(format!(
                "stage {} uses the prior loss; only the first stage may",
                i + 1
            )));
        }
    }
    Ok(())
}

fn default_lr() -> f64 {
    1e-4
}

fn default_clip() -> Option<f64> {
    Some(10.0)
}

fn default_sigma() -> f64 {
    crate::losses::DEFAULT_SIGMA
}

/// Optimization settings shared by 2D and 3D runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Fractions of all epochs after which the learning rate is multiplied
    /// by `lr_decay`.
    #[serde(default)]
    pub lr_decay_at: Vec<f64>,
    #[serde(default = "one")]
    pub lr_decay: f64,
    #[serde(default = "default_clip")]
    pub clip: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            lr_decay_at: Vec::new(),
            lr_decay: 1.0,
            clip: default_clip(),
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        self.lr_decay_at
            .iter()
            .filter(|&&f| epoch as f64 >= f * total_epochs as f64)
            .fold(self.lr, |lr, _| lr * self.lr_decay)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) {
            return Err(AuvError::Config("learning rate and decay must be positive".into()));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(AuvError::Config("clip must be positive".into()));
        }
        if self.lr_decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(AuvError::Config("lr_decay_at fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// 3D training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub category: Category,
    pub model: ModelConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epoch_scale")]
    pub epoch_scale: f64,
    #[serde(default)]
    pub optim: OptimConfig,
    /// Points per shape per step.
    pub points: usize,
    /// Smoothness subset size M.
    pub smooth_subset: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub paths: Paths,
}

fn default_epoch_scale() -> f64 {
    0.05
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Paper schedule with a desk-scale model for `category`.
    pub fn for_category(category: Category, voxel_resolution: usize, width_divisor: usize) -> Self {
        Self {
            category,
            model: shape_config(category, voxel_resolution, width_divisor),
            stages: paper_schedule(category),
            seed: 0,
            epoch_scale: default_epoch_scale(),
            optim: OptimConfig::default(),
            points: 4096,
            smooth_subset: 512,
            sigma: default_sigma(),
            paths: Paths::default(),
        }
    }

    pub fn scaled_stages(&self) -> Vec<StageConfig> {
        self.stages.iter().map(|s| s.scaled(self.epoch_scale)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.category != self.category {
            return Err(AuvError::Config(format!(
                "model category {:?} differs from run category {:?}",
                self.model.category, self.category
            )));
        }
        if !self.category.is_3d() {
            return Err(AuvError::Config("use a toy config for 2D runs".into()));
        }
        validate_stages(&self.stages)?;
        self.optim.validate()?;
        if !(self.epoch_scale > 0.0 && self.epoch_scale.is_finite()) {
            return Err(AuvError::Config("epoch_scale must be positive".into()));
        }
        if self.points == 0 || self.smooth_subset == 0 || self.smooth_subset > self.points {
            return Err(AuvError::Config("need 0 < smooth_subset <= points".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(AuvError::Config("sigma must be positive".into()));
        }
        Ok(())
    }
}

/// 2D toy run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub seed: u64,
    pub images: usize,
    pub corner_shift: f64,
    pub epochs: usize,
    /// Leading epochs that include the identity prior.
    pub prior_epochs: usize,
    #[serde(default = "one")]
    pub prior_weight: f64,
    /// Pixels sampled per image per step.
    pub points: usize,
    /// Images per optimizer step.
    #[serde(default = "one_usize")]
    pub batch: usize,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub paths: Paths,
}

impl ToyConfig {
    pub fn desk(resolution: usize) -> Self {
        Self {
            model: toy_config(resolution, 128),
            seed: 0,
            images: 100,
            corner_shift: 0.15,
            epochs: 300,
            prior_epochs: 15,
            prior_weight: 1.0,
            points: 1024,
            batch: 1,
            optim: OptimConfig {
                lr: 1e-3,
                lr_decay_at: vec![0.5],
                lr_decay: 0.1,
                clip: Some(10.0),
            },
            paths: Paths::default(),
        }
    }

    /// Linear basis fit on `images` unwarped faces.
    pub fn pca(resolution: usize, basis: usize, images: usize) -> Self {
        Self {
            model: pca_config(resolution, basis),
            seed: 0,
            images,
            corner_shift: 0.0,
            epochs: 1000,
            prior_epochs: 0,
            prior_weight: 0.0,
            points: resolution * resolution,
            batch: 4,
            optim: OptimConfig {
                lr: 1e-3,
                lr_decay_at: vec![0.5, 0.85],
                lr_decay: 0.1,
                clip: None,
            },
            paths: Paths::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.category != Category::Toy {
            return Err(AuvError::Config("toy runs need a toy model".into()));
        }
        self.optim.validate()?;
        if self.images == 0 || self.epochs == 0 || self.points == 0 || self.batch == 0 {
            return Err(AuvError::Config("images, epochs, points and batch must be positive".into()));
        }
        if self.prior_epochs > self.epochs {
            return Err(AuvError::Config("prior_epochs exceeds epochs".into()));
        }
        if !(0.0..=0.25).contains(&self.corner_shift) {
            return Err(AuvError::Config("corner_shift must lie in [0, 0.25]".into()));
        }
        Ok(())
    }

    /// Scales epoch counts, keeping at least one epoch of each phase.
    pub fn scaled(&self, scale: f64) -> Self {
        let s = |e: usize| ((e as f64 * scale).round() as usize).max(1);
        Self {
            epochs: s(self.epochs),
            prior_epochs: s(self.prior_epochs).min(s(self.epochs)),
            ..self.clone()
        }
    }
}

/// Worker threads for per-shape work, from `AUV_THREADS` or the available
/// parallelism.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("AUV_THREADS") {
        Ok(raw) => raw
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| AuvError::Config(format!("AUV_THREADS must be a positive integer, got `{raw}`"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AuvError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| AuvError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_schedule_tuples() {
        let s = paper_schedule(Category::Head);
        let w: Vec<[f64; 5]> = s.iter().map(|s| s.weights.as_array()).collect();
        assert_eq!(
            w,
            vec![
                [1.0, 0.5, 100.0, 100.0, 1.0],
                [1.0, 0.5, 1.0, 1.0, 0.0],
                [1.0, 0.5, 100.0, 100.0, 0.0]
            ]
        );
        assert_eq!(s.iter().map(|s| s.epochs).collect::<Vec<_>>(), vec![10, 2000, 2000]);
    }

    #[test]
    fn shapenet_car_prior_cutoff() {
        let s = &paper_schedule(Category::ShapenetCar)[0];
        assert_eq!(s.weights_at(4).prior, 1.0);
        assert_eq!(s.weights_at(5).prior, 0.0);
        assert_eq!(s.weights_at(5).coord, 10.0);
    }

    #[test]
    fn every_schedule_is_valid() {
        for c in [
            Category::Toy,
            Category::Head,
            Category::Body,
            Category::Animal,
            Category::TurbosquidCar,
            Category::ShapenetCar,
            Category::Chair,
        ] {
            validate_stages(&paper_schedule(c)).unwrap();
        }
    }

    #[test]
    fn prior_outside_first_stage_rejected() {
        let mut s = paper_schedule(Category::Head);
        s[1].weights.prior = 1.0;
        assert!(validate_stages(&s).is_err());
    }

    #[test]
    fn scaling_keeps_one_epoch() {
        let s = StageConfig::new(10, [1.0; 5]).scaled(0.01);
        assert_eq!(s.epochs, 1);
        assert_eq!(StageConfig::new(2000, [1.0; 5]).scaled(0.05).epochs, 100);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(RunConfig::for_category(Category::Head, 32, 8)).unwrap();
        v["extra"] = serde_json::json!(true);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
        let ok = serde_json::to_value(RunConfig::for_category(Category::Head, 32, 8)).unwrap();
        serde_json::from_value::<RunConfig>(ok).unwrap().validate().unwrap();
    }
}
