//! Encoder, UV mapper, masker and basis generators, and their composition.

use auv_tensor::{BoundParams, Checkpoint, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AuvError, Result};

pub const LEAKY_SLOPE: f64 = 0.02;
const CONFIG_ENTRY: &str = "config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Toy,
    Head,
    Body,
    Animal,
    TurbosquidCar,
    ShapenetCar,
    Chair,
}

impl Category {
    /// Point axes that the prior maps onto the two UV axes.
    pub fn projection_axes(self) -> [usize; 2] {
        match self {
            Category::Toy | Category::Head | Category::Body => [0, 1],
            Category::Animal => [1, 2],
            Category::TurbosquidCar | Category::ShapenetCar | Category::Chair => [0, 2],
        }
    }

    pub fn is_3d(self) -> bool {
        self != Category::Toy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Stride-2 convolution stack followed by linear heads.
    Conv,
    /// Linear heads straight from the flattened input.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    #[serde(default)]
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    4
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub width: usize,
    /// Number of hidden layers.
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Basis images produced by this generator.
    pub channels: usize,
    pub width: usize,
    pub depth: usize,
    /// When set, the generator is a learned `r x r` texel table looked up at
    /// the nearest texel instead of an MLP. It carries no UV gradient.
    #[serde(default)]
    pub table_resolution: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub category: Category,
    /// Image side (toy) or voxel resolution (3D).
    pub input_resolution: usize,
    /// Output channels per point: 3 for toy images, 9 for shapes.
    pub out_channels: usize,
    pub code_dim: usize,
    pub encoder: EncoderConfig,
    pub uv_mapper: MlpConfig,
    /// Adds the prior projection of the point to the mapper output.
    #[serde(default)]
    pub uv_skip: bool,
    /// Bypasses the mapper: UVs are the prior projection of the point.
    #[serde(default)]
    pub uv_identity: bool,
    #[serde(default)]
    pub masker: Option<MlpConfig>,
    pub generators: Vec<GeneratorConfig>,
}

impl ModelConfig {
    pub fn point_dim(&self) -> usize {
        if self.category.is_3d() {
            3
        } else {
            2
        }
    }

    pub fn input_channels(&self) -> usize {
        if self.category.is_3d() {
            4
        } else {
            3
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        let r = self.input_resolution;
        if self.category.is_3d() {
            vec![4, r, r, r]
        } else {
            vec![3, r, r]
        }
    }

    pub fn num_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AuvError::Config(m));
        if self.generators.is_empty() {
            return bad("at least one basis generator is required".into());
        }
        let k = self.generators.len();
        if self.category == Category::Chair && k != 4 {
            return bad(format!("chair models need 4 generators, got {k}"));
        }
        if k > 1 && self.masker.is_none() {
            return bad("multiple generators need a masker".into());
        }
        if k == 1 && self.masker.is_some() {
            return bad("a masker needs at least two generators".into());
        }
        if k > 2 && self.category != Category::Chair {
            return bad("more than two generators is only defined for chairs".into());
        }
        let expected_c = if self.category.is_3d() { 9 } else { 3 };
        if self.out_channels != expected_c {
            return bad(format!(
                "{:?} models emit {expected_c} channels, got {}",
                self.category, self.out_channels
            ));
        }
        if self.code_dim == 0 || self.input_resolution == 0 {
            return bad("code_dim and input_resolution must be positive".into());
        }
        if self.encoder.kind == EncoderKind::Conv {
            let stages = self.encoder.channels.len() as u32;
            if stages == 0 || self.input_resolution % 2usize.pow(stages) != 0 {
                return bad(format!(
                    "input resolution {} is not divisible by 2^{stages}",
                    self.input_resolution
                ));
            }
            if self.encoder.kernel != 4 {
                return bad("encoder kernel must be 4 (stride 2, pad 1 halves each stage)".into());
            }
        }
        for g in &self.generators {
            if g.channels == 0 || (g.table_resolution.is_none() && (g.width == 0 || g.depth == 0)) {
                return bad(format!("degenerate generator {g:?}"));
            }
        }
        if !self.uv_identity && (self.uv_mapper.width == 0 || self.uv_mapper.depth == 0) {
            return bad("degenerate uv mapper".into());
        }
        Ok(())
    }

    fn encoder_features(&self) -> usize {
        match self.encoder.kind {
            EncoderKind::Linear => self.input_shape().iter().product(),
            EncoderKind::Conv => {
                let stages = self.encoder.channels.len() as u32;
                let side = self.input_resolution / 2usize.pow(stages);
                let last = *self.encoder.channels.last().expect("validated");
                last * side.pow(if self.category.is_3d() { 3 } else { 2 })
            }
        }
    }

    fn masker_outputs(&self) -> usize {
        if self.category == Category::Chair {
            4
        } else {
            1
        }
    }

    fn masker_inputs(&self) -> usize {
        if self.category == Category::Chair {
            3 + self.code_dim
        } else {
            6 + self.code_dim
        }
    }

    /// Parameter names and shapes in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let dense = |prefix: &str, sizes: &[usize], out: &mut Vec<(String, Vec<usize>)>| {
            for (i, w) in sizes.windows(2).enumerate() {
                out.push((format!("{prefix}.{i}.w"), vec![w[0], w[1]]));
                out.push((format!("{prefix}.{i}.b"), vec![w[1]]));
            }
        };
        if self.encoder.kind == EncoderKind::Conv {
            let k = self.encoder.kernel;
            let mut cin = self.input_channels();
            for (i, &c) in self.encoder.channels.iter().enumerate() {
                let mut shape = vec![c, cin, k, k];
                if self.category.is_3d() {
                    shape.push(k);
                }
                out.push((format!("encoder.conv{i}.w"), shape));
                out.push((format!("encoder.conv{i}.b"), vec![c]));
                cin = c;
            }
        }
        let f = self.encoder_features();
        let coeffs: usize = self.generators.iter().map(|g| g.channels).sum::<usize>() * self.out_channels;
        dense("encoder.code", &[f, self.code_dim], &mut out);
        dense("encoder.coeff", &[f, coeffs], &mut out);
        if !self.uv_identity {
            dense("uv", &mlp_sizes(self.point_dim() + self.code_dim, self.uv_mapper, 2), &mut out);
        }
        if let Some(m) = self.masker {
            dense("masker", &mlp_sizes(self.masker_inputs(), m, self.masker_outputs()), &mut out);
        }
        for (k, g) in self.generators.iter().enumerate() {
            match g.table_resolution {
                Some(r) => out.push((format!("basis{k}.table"), vec![r * r, g.channels])),
                None => dense(
                    &format!("basis{k}"),
                    &mlp_sizes(2, MlpConfig { width: g.width, depth: g.depth }, g.channels),
                    &mut out,
                ),
            }
        }
        out
    }
}

fn mlp_sizes(input: usize, cfg: MlpConfig, output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(std::iter::repeat(cfg.width).take(cfg.depth));
    s.push(output);
    s
}

/// Whether a parameter belongs to a basis generator.
pub fn is_basis_param(name: &str) -> bool {
    name.starts_with("basis")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuvModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl AuvModel {
    /// Uniform `±1/sqrt(fan_in)` initialization for every weight and bias,
    /// drawn in declaration order from a seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut fan_in = 1usize;
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            if name.ends_with(".w") {
                fan_in = if shape.len() == 2 { shape[0] } else { shape[1..].iter().product() };
            }
            let bound = if name.ends_with(".table") {
                0.01
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// Checks that every declared parameter exists with the declared shape.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.param_shapes();
        if shapes.len() != self.params.len() {
            return Err(AuvError::Data(format!(
                "model has {} parameters, config declares {}",
                self.params.len(),
                shapes.len()
            )));
        }
        for (name, shape) in shapes {
            let t = self.params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(AuvError::Data(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        ckpt.insert_text(CONFIG_ENTRY, &serde_json::to_string(&self.config)?);
        ckpt.insert_params("model.", &self.params);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&ckpt.text(CONFIG_ENTRY)?)?;
        let model = Self {
            config,
            params: ckpt.params("model."),
        };
        model.validate()?;
        Ok(model)
    }

    /// SHA-256 over the names and little-endian bytes of all basis-generator
    /// parameters.
    pub fn basis_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| is_basis_param(n)) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn slope<T: Scalar>() -> T {
    T::from_f64(LEAKY_SLOPE).expect("representable")
}

/// Dense stack named `prefix.{i}`; leaky ReLU between layers, none after the
/// last.
pub fn mlp<T: Scalar>(tape: &mut Tape<T>, params: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let mut h = x;
    let mut i = 0;
    loop {
        let (Ok(w), Ok(b)) = (
            params.var(&format!("{prefix}.{i}.w")),
            params.var(&format!("{prefix}.{i}.b")),
        ) else {
            break;
        };
        if i > 0 {
            h = tape.leaky_relu(h, slope());
        }
        let y = tape.matmul(h, w)?;
        h = tape.add_bias(y, b)?;
        i += 1;
    }
    if i == 0 {
        return Err(AuvError::Data(format!("no layers named {prefix}.*")));
    }
    Ok(h)
}

/// Per-shape outputs of the encoder.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[1, Z]`
    pub code: Var,
    /// One `[C, N_k]` matrix per generator.
    pub coeffs: Vec<Var>,
}

pub fn encode<T: Scalar>(
    cfg: &ModelConfig,
    params: &BoundParams,
    tape: &mut Tape<T>,
    input: Var,
) -> Result<Encoded> {
    let expected = cfg.input_shape();
    if tape.shape(input) != expected.as_slice() {
        return Err(AuvError::Data(format!(
            "encoder input has shape {:?}, expected {expected:?}",
            tape.shape(input)
        )));
    }
    let mut h = input;
    if cfg.encoder.kind == EncoderKind::Conv {
        for i in 0..cfg.encoder.channels.len() {
            let w = params.var(&format!("encoder.conv{i}.w"))?;
            let b = params.var(&format!("encoder.conv{i}.b"))?;
            h = if cfg.category.is_3d() {
                tape.conv3d(h, w, b, 2, 1)?
            } else {
                tape.conv2d(h, w, b, 2, 1)?
            };
            h = tape.leaky_relu(h, slope());
        }
    }
    let n = tape.value(h).len();
    let flat = tape.reshape(h, &[1, n])?;
    let code = mlp(tape, params, "encoder.code", flat)?;
    let all = mlp(tape, params, "encoder.coeff", flat)?;
    let c = cfg.out_channels;
    let mut coeffs = Vec::with_capacity(cfg.generators.len());
    let mut start = 0;
    for g in &cfg.generators {
        let part = tape.slice_cols(all, start, start + c * g.channels)?;
        coeffs.push(tape.reshape(part, &[c, g.channels])?);
        start += c * g.channels;
    }
    Ok(Encoded { code, coeffs })
}

/// Per-point outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Decoded {
    /// `[P, 2]`
    pub uv: Var,
    /// `[P, K]` partition of unity over generators; absent when K = 1.
    pub masks: Option<Var>,
    /// `[P, C]` per generator.
    pub per_generator: Vec<Var>,
    /// `[P, C]` blended prediction.
    pub pred: Var,
}

pub fn uv_forward<T: Scalar>(
    cfg: &ModelConfig,
    params: &BoundParams,
    tape: &mut Tape<T>,
    points: Var,
    code: Var,
) -> Result<Var> {
    let p = tape.shape(points)[0];
    let [a, b] = cfg.category.projection_axes();
    let proj = if cfg.point_dim() == 2 {
        points
    } else {
        let pa = tape.slice_cols(points, a, a + 1)?;
        let pb = tape.slice_cols(points, b, b + 1)?;
        tape.concat_cols(&[pa, pb])?
    };
    if cfg.uv_identity {
        return Ok(proj);
    }
    let z = tape.repeat_rows(code, p)?;
    let x = tape.concat_cols(&[points, z])?;
    let uv = mlp(tape, params, "uv", x)?;
    if cfg.uv_skip {
        Ok(tape.add(uv, proj)?)
    } else {
        Ok(uv)
    }
}

/// Composes chair masks `[m_a, m_b, m_c, m_d]` from the predicted mask and
/// the normal-agreement mask `m_n`: `[m_a m_c; m_b m_d] = [m_n; 1−m_n]·[m, 1−m]`.
pub fn chair_mask_compose<T: Scalar>(tape: &mut Tape<T>, m_pred: Var, m_n: Var) -> Result<Var> {
    let not_n = tape.one_minus(m_n);
    let not_m = tape.one_minus(m_pred);
    let a = tape.mul(m_n, m_pred)?;
    let b = tape.mul(not_n, m_pred)?;
    let c = tape.mul(m_n, not_m)?;
    let d = tape.mul(not_n, not_m)?;
    Ok(tape.concat_cols(&[a, b, c, d])?)
}

pub fn masker_forward<T: Scalar>(
    cfg: &ModelConfig,
    params: &BoundParams,
    tape: &mut Tape<T>,
    points: Var,
    normals: Option<Var>,
    code: Var,
) -> Result<Var> {
    let p = tape.shape(points)[0];
    let z = tape.repeat_rows(code, p)?;
    if cfg.category == Category::Chair {
        let normals = normals.ok_or_else(|| AuvError::Data("chair masker needs normals".into()))?;
        let x = tape.concat_cols(&[points, z])?;
        let out = mlp(tape, params, "masker", x)?;
        let n_pred = tape.slice_cols(out, 0, 3)?;
        let logit = tape.slice_cols(out, 3, 4)?;
        let m_pred = tape.sigmoid(logit);
        let agree = tape.mul(n_pred, normals)?;
        let dot = tape.row_sum(agree);
        let m_n = tape.sigmoid(dot);
        chair_mask_compose(tape, m_pred, m_n)
    } else {
        let normals = normals.ok_or_else(|| AuvError::Data("masker needs normals".into()))?;
        let x = tape.concat_cols(&[points, normals, z])?;
        let logit = mlp(tape, params, "masker", x)?;
        let m = tape.sigmoid(logit);
        let rest = tape.one_minus(m);
        Ok(tape.concat_cols(&[m, rest])?)
    }
}

/// Basis values `[P, N_k]` of generator `k` at `uv`.
pub fn basis_forward<T: Scalar>(
    cfg: &ModelConfig,
    params: &BoundParams,
    tape: &mut Tape<T>,
    k: usize,
    uv: Var,
) -> Result<Var> {
    let g = &cfg.generators[k];
    match g.table_resolution {
        Some(r) => {
            let table = params.var(&format!("basis{k}.table"))?;
            let idx: Vec<usize> = tape
                .value(uv)
                .data()
                .chunks(2)
                .map(|q| {
                    let cell = |v: T| {
                        let f = ((v.to_f64().unwrap_or(0.0) + 0.5) * r as f64).floor();
                        f.clamp(0.0, (r - 1) as f64) as usize
                    };
                    cell(q[1]) * r + cell(q[0])
                })
                .collect();
            Ok(tape.gather_rows(table, &idx)?)
        }
        None => mlp(tape, params, &format!("basis{k}"), uv),
    }
}

/// `values · coeffsᵀ`: `[P, N] × [C, N]ᵀ → [P, C]`.
pub fn combine_basis<T: Scalar>(tape: &mut Tape<T>, values: Var, coeffs: Var) -> Result<Var> {
    Ok(tape.matmul_t(values, false, coeffs, true)?)
}

/// `Σ_k masks[:, k] · outputs[k]`.
pub fn blend_masked<T: Scalar>(tape: &mut Tape<T>, outputs: &[Var], masks: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, &o) in outputs.iter().enumerate() {
        let m = tape.slice_cols(masks, k, k + 1)?;
        let term = tape.mul_col(o, m)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| AuvError::Data("nothing to blend".into()))
}

pub fn decode<T: Scalar>(
    cfg: &ModelConfig,
    params: &BoundParams,
    tape: &mut Tape<T>,
    enc: &Encoded,
    points: Var,
    normals: Option<Var>,
) -> Result<Decoded> {
    let ps = tape.shape(points);
    if ps.len() != 2 || ps[1] != cfg.point_dim() {
        return Err(AuvError::Data(format!(
            "points have shape {ps:?}, expected [P, {}]",
            cfg.point_dim()
        )));
    }
    let uv = uv_forward(cfg, params, tape, points, enc.code)?;
    let mut per_generator = Vec::with_capacity(cfg.generators.len());
    for k in 0..cfg.generators.len() {
        let values = basis_forward(cfg, params, tape, k, uv)?;
        per_generator.push(combine_basis(tape, values, enc.coeffs[k])?);
    }
    let (masks, pred) = if cfg.masker.is_some() {
        let masks = masker_forward(cfg, params, tape, points, normals, enc.code)?;
        let pred = blend_masked(tape, &per_generator, masks)?;
        (Some(masks), pred)
    } else {
        (None, per_generator[0])
    };
    Ok(Decoded {
        uv,
        masks,
        per_generator,
        pred,
    })
}

/// Full forward pass for one shape or image.
pub fn model_forward<T: Scalar>(
    cfg: &ModelConfig,
    params: &BoundParams,
    tape: &mut Tape<T>,
    input: Var,
    points: Var,
    normals: Option<Var>,
) -> Result<(Encoded, Decoded)> {
    let enc = encode(cfg, params, tape, input)?;
    let dec = decode(cfg, params, tape, &enc, points, normals)?;
    Ok((enc, dec))
}

/// Values of a forward pass without gradient bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub code: Tensor<f32>,
    pub coeffs: Vec<Tensor<f32>>,
    pub uv: Tensor<f32>,
    pub masks: Option<Tensor<f32>>,
    pub pred: Tensor<f32>,
}

impl AuvModel {
    pub fn encode_values(&self, input: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(input.clone());
        let enc = encode(&self.config, &params, &mut tape, x)?;
        Ok((
            tape.value(enc.code).clone(),
            enc.coeffs.iter().map(|&c| tape.value(c).clone()).collect(),
        ))
    }

    /// Evaluates the model on `points` in chunks, reusing one encoding.
    pub fn evaluate(
        &self,
        input: &Tensor<f32>,
        points: &Tensor<f32>,
        normals: Option<&Tensor<f32>>,
    ) -> Result<Evaluation> {
        let (code, coeffs) = self.encode_values(input)?;
        self.evaluate_with(&code, &coeffs, points, normals)
    }

    pub fn evaluate_with(
        &self,
        code: &Tensor<f32>,
        coeffs: &[Tensor<f32>],
        points: &Tensor<f32>,
        normals: Option<&Tensor<f32>>,
    ) -> Result<Evaluation> {
        const CHUNK: usize = 4096;
        let n = points.rows();
        let d = points.cols();
        let mut uv = Vec::with_capacity(n * 2);
        let mut pred = Vec::with_capacity(n * self.config.out_channels);
        let mut masks = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let mut tape = Tape::new();
            let params = self.params.bind(&mut tape, |_| false);
            let enc = Encoded {
                code: tape.constant(code.clone()),
                coeffs: coeffs.iter().map(|c| tape.constant(c.clone())).collect(),
            };
            let p = tape.constant(Tensor::new(
                vec![end - start, d],
                points.data()[start * d..end * d].to_vec(),
            )?);
            let nv = match normals {
                Some(nm) => Some(tape.constant(Tensor::new(
                    vec![end - start, 3],
                    nm.data()[start * 3..end * 3].to_vec(),
                )?)),
                None => None,
            };
            let dec = decode(&self.config, &params, &mut tape, &enc, p, nv)?;
            uv.extend_from_slice(tape.value(dec.uv).data());
            pred.extend_from_slice(tape.value(dec.pred).data());
            if let Some(m) = dec.masks {
                masks.extend_from_slice(tape.value(m).data());
            }
            start = end;
        }
        let k = self.config.num_generators();
        Ok(Evaluation {
            code: code.clone(),
            coeffs: coeffs.to_vec(),
            uv: Tensor::new(vec![n, 2], uv)?,
            masks: if self.config.masker.is_some() {
                Some(Tensor::new(vec![n, k], masks)?)
            } else {
                None
            },
            pred: Tensor::new(vec![n, self.config.out_channels], pred)?,
        })
    }

    /// Basis images of generator `k` on a `grid x grid` lattice covering
    /// `[-0.5, 0.5]²`, one single-channel raster per basis channel. Row 0 is
    /// the lattice row with the smallest v.
    pub fn render_basis(&self, k: usize, grid: usize) -> Result<Vec<crate::raster::Raster>> {
        if k >= self.config.num_generators() {
            return Err(AuvError::Data(format!("no generator {k}")));
        }
        let uv = uv_lattice(grid);
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, |_| false);
        let q = tape.constant(uv);
        let values = basis_forward(&self.config, &params, &mut tape, k, q)?;
        let v = tape.value(values);
        let n = v.cols();
        (0..n)
            .map(|c| {
                let data = (0..grid * grid).map(|i| v.row(i)[c]).collect();
                crate::raster::Raster::from_data(grid, grid, 1, data)
            })
            .collect()
    }
}

/// Texel-centre UVs of a `grid x grid` lattice over `[-0.5, 0.5]²`, row-major
/// with u varying fastest.
pub fn uv_lattice(grid: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(grid * grid * 2);
    for j in 0..grid {
        for i in 0..grid {
            data.push(((i as f64 + 0.5) / grid as f64 - 0.5) as f32);
            data.push(((j as f64 + 0.5) / grid as f64 - 0.5) as f32);
        }
    }
    Tensor::new(vec![grid * grid, 2], data).expect("sized")
}

/// Toy model: 2D conv encoder, one generator, RGB output.
pub fn toy_config(resolution: usize, basis: usize) -> ModelConfig {
    ModelConfig {
        category: Category::Toy,
        input_resolution: resolution,
        out_channels: 3,
        code_dim: 32,
        encoder: EncoderConfig {
            kind: EncoderKind::Conv,
            channels: vec![16, 32, 64, 64],
            kernel: 4,
        },
        uv_mapper: MlpConfig { width: 128, depth: 4 },
        uv_skip: true,
        uv_identity: false,
        masker: None,
        generators: vec![GeneratorConfig {
            channels: basis,
            width: 32,
            depth: 4,
            table_resolution: None,
        }],
    }
}

/// Linear model for already aligned images: identity UVs, a texel-table basis
/// of `basis` channels and a linear coefficient head. Its reconstructions are
/// exactly the rank-`basis` linear reconstructions shared across channels.
pub fn pca_config(resolution: usize, basis: usize) -> ModelConfig {
    ModelConfig {
        category: Category::Toy,
        input_resolution: resolution,
        out_channels: 3,
        code_dim: 1,
        encoder: EncoderConfig {
            kind: EncoderKind::Linear,
            channels: Vec::new(),
            kernel: default_kernel(),
        },
        uv_mapper: MlpConfig { width: 1, depth: 1 },
        uv_skip: false,
        uv_identity: true,
        masker: None,
        generators: vec![GeneratorConfig {
            channels: basis,
            width: 1,
            depth: 1,
            table_resolution: Some(resolution),
        }],
    }
}

/// Generator sizes `(channels, hidden width)` per category at full scale.
pub fn paper_generators(category: Category) -> Vec<(usize, usize)> {
    match category {
        Category::Toy => vec![(128, 128)],
        Category::Head | Category::TurbosquidCar | Category::ShapenetCar => vec![(64, 1024), (16, 128)],
        Category::Body | Category::Animal => vec![(64, 1024), (64, 1024)],
        Category::Chair => vec![(64, 512); 4],
    }
}

/// A 3D model for `category` with generator widths divided by `width_divisor`.
pub fn shape_config(category: Category, voxel_resolution: usize, width_divisor: usize) -> ModelConfig {
    let generators = paper_generators(category)
        .into_iter()
        .map(|(channels, width)| GeneratorConfig {
            channels,
            width: (width / width_divisor.max(1)).max(16),
            depth: 4,
            table_resolution: None,
        })
        .collect();
    ModelConfig {
        category,
        input_resolution: voxel_resolution,
        out_channels: 9,
        code_dim: 64,
        encoder: EncoderConfig {
            kind: EncoderKind::Conv,
            channels: vec![16, 32, 64, 64],
            kernel: 4,
        },
        uv_mapper: MlpConfig { width: 128, depth: 4 },
        uv_skip: true,
        uv_identity: false,
        masker: Some(MlpConfig { width: 64, depth: 3 }),
        generators,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_head() -> ModelConfig {
        ModelConfig {
            category: Category::Head,
            input_resolution: 8,
            out_channels: 9,
            code_dim: 3,
            encoder: EncoderConfig {
                kind: EncoderKind::Conv,
                channels: vec![2, 2],
                kernel: 4,
            },
            uv_mapper: MlpConfig { width: 4, depth: 2 },
            uv_skip: false,
            uv_identity: false,
            masker: Some(MlpConfig { width: 4, depth: 1 }),
            generators: vec![
                GeneratorConfig { channels: 4, width: 4, depth: 2, table_resolution: None },
                GeneratorConfig { channels: 2, width: 4, depth: 1, table_resolution: None },
            ],
        }
    }

    fn inputs(cfg: &ModelConfig, points: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = cfg.input_shape();
        let n: usize = shape.iter().product();
        let grid = Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let d = cfg.point_dim();
        let p = Tensor::new(vec![points, d], (0..points * d).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let normals = (0..points)
            .flat_map(|_| {
                let v: [f32; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                v.map(|x| x / l)
            })
            .collect();
        (grid, p, Tensor::new(vec![points, 3], normals).unwrap())
    }

    #[test]
    fn coefficient_dims_follow_generators() {
        let model = AuvModel::new(tiny_head(), 0).unwrap();
        let (g, _, _) = inputs(&model.config, 1, 0);
        let (code, coeffs) = model.encode_values(&g).unwrap();
        assert_eq!(code.shape(), &[1, 3]);
        assert_eq!(coeffs[0].shape(), &[9, 4]);
        assert_eq!(coeffs[1].shape(), &[9, 2]);

        let head = shape_config(Category::Head, 16, 16);
        let sizes: Vec<usize> = head.generators.iter().map(|g| g.channels).collect();
        assert_eq!(sizes, vec![64, 16]);
        assert_eq!(toy_config(64, 128).generators[0].channels, 128);
    }

    #[test]
    fn toy_coefficients_are_3_by_128() {
        let model = AuvModel::new(toy_config(16, 128), 0).unwrap();
        let g = Tensor::filled(&[3, 16, 16], 0.5);
        let (_, coeffs) = model.encode_values(&g).unwrap();
        assert_eq!(coeffs[0].shape(), &[3, 128]);
    }

    #[test]
    fn forward_is_deterministic_and_partitions() {
        let model = AuvModel::new(tiny_head(), 1).unwrap();
        let (g, p, n) = inputs(&model.config, 16, 2);
        let a = model.evaluate(&g, &p, Some(&n)).unwrap();
        let b = model.evaluate(&g, &p, Some(&n)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pred.shape(), &[16, 9]);
        for row in a.masks.unwrap().data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
            assert!(row[0] > 0.0 && row[0] < 1.0);
        }
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let model = AuvModel::new(tiny_head(), 1).unwrap();
        let g = Tensor::zeros(&[4, 16, 16, 16]);
        assert!(model.encode_values(&g).is_err());
    }

    #[test]
    fn combine_examples() {
        let mut tape = Tape::<f64>::new();
        let basis = tape.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let coeff = tape.constant(Tensor::from_rows(&[[0.5, 0.25], [1.0, 0.0], [0.0, 0.0]]).unwrap());
        let out = combine_basis(&mut tape, basis, coeff).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn blend_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_rows(&[[0.0, 0.0], [3.0, 4.0], [3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[[2.0, 2.0], [7.0, 8.0], [7.0, 8.0]]).unwrap());
        let m = tape.constant(Tensor::from_rows(&[[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]]).unwrap());
        let out = blend_masked(&mut tape, &[a, b], m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 1.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn chair_masks_at_zero_agreement() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::from_rows(&[[1.0]]).unwrap());
        let logit = tape.constant(Tensor::from_rows(&[[0.0]]).unwrap());
        let mn = tape.sigmoid(logit);
        let out = chair_mask_compose(&mut tape, m, mn).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let model = AuvModel::new(tiny_head(), 3).unwrap();
        let ckpt = model.to_checkpoint().unwrap();
        let back = AuvModel::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, model);

        let mut broken = model.clone();
        *broken.params.get_mut("uv.0.w").unwrap() = Tensor::zeros(&[2, 2]);
        assert!(broken.validate().is_err());
    }

    #[test]
    fn basis_hash_ignores_other_params() {
        let model = AuvModel::new(tiny_head(), 3).unwrap();
        let mut other = model.clone();
        other.params.get_mut("uv.0.w").unwrap().data_mut()[0] += 1.0;
        assert_eq!(model.basis_hash(), other.basis_hash());
        other.params.get_mut("basis1.0.b").unwrap().data_mut()[0] += 1.0;
        assert_ne!(model.basis_hash(), other.basis_hash());
    }

    #[test]
    fn identity_mapper_projects_points() {
        let mut cfg = tiny_head();
        cfg.uv_identity = true;
        let model = AuvModel::new(cfg, 0).unwrap();
        let (g, p, n) = inputs(&model.config, 5, 0);
        let out = model.evaluate(&g, &p, Some(&n)).unwrap();
        for (q, pt) in out.uv.data().chunks(2).zip(p.data().chunks(3)) {
            assert_eq!(q, &pt[..2]);
        }
    }

    #[test]
    fn render_basis_grid() {
        let model = AuvModel::new(tiny_head(), 0).unwrap();
        let imgs = model.render_basis(0, 8).unwrap();
        assert_eq!(imgs.len(), 4);
        assert_eq!((imgs[0].width(), imgs[0].height()), (8, 8));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let mut v = serde_json::to_value(tiny_head()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
