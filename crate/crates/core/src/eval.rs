//! Alignment metrics: landmark spread in UV space, one-shot segmentation
//! transfer with IOU, PSNR and the truncated-SVD reconstruction bound.

use auv_tensor::Tensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baker::{atlas_to_uv, bake_texture, route_points, uv_to_texel, INPAINT_RADIUS};
use crate::error::{AuvError, Result};
use crate::networks::AuvModel;
use crate::raster::Raster;
use crate::synthdata::{head_sample_labels, HeadStyle, SyntheticHead, ToyImage, HEAD_CLASSES};
use crate::trainer::{image_tensor, ShapeSample};

/// Mean squared error of the best rank-`rank` reconstruction of `images`
/// where every color channel of every image is one row and the basis is shared
/// across rows (uncentered truncated SVD).
pub fn svd_reconstruction_mse(images: &[Raster], rank: usize) -> Result<f64> {
    let first = images.first().ok_or_else(|| AuvError::Data("no images".into()))?;
    let (w, h, c) = (first.width(), first.height(), first.channels());
    if images.iter().any(|im| (im.width(), im.height(), im.channels()) != (w, h, c)) {
        return Err(AuvError::Data("images differ in size".into()));
    }
    let rows = images.len() * c;
    let cols = w * h;
    let m = DMatrix::from_fn(rows, cols, |r, p| images[r / c].data()[p * c + r % c] as f64);
    let sv = m.singular_values();
    let mut sq: Vec<f64> = sv.iter().map(|s| s * s).collect();
    sq.sort_by(|a, b| b.total_cmp(a));
    let residual: f64 = sq.iter().skip(rank).sum();
    Ok(residual / (rows * cols) as f64)
}

/// Spread of one landmark across a dataset, in UV space and in the input
/// frame. `std` is the per-axis pooled standard deviation
/// `sqrt(mean over axes of the variance)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkStats {
    pub uv_mean: [f64; 2],
    pub uv_std: f64,
    pub input_mean: Vec<f64>,
    pub input_std: f64,
}

impl LandmarkStats {
    /// `uv_std / input_std`; smaller is better aligned.
    pub fn ratio(&self) -> f64 {
        self.uv_std / self.input_std
    }
}

fn pooled(points: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let n = points.len() as f64;
    let d = points.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..d).map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    let var = (0..d)
        .map(|k| points.iter().map(|p| (p[k] - mean[k]).powi(2)).sum::<f64>() / n)
        .sum::<f64>()
        / d.max(1) as f64;
    (mean, var.sqrt())
}

/// Per-landmark statistics from `uvs[shape][landmark]` and the matching
/// input-frame positions `inputs[shape][landmark]`.
pub fn landmark_stats(uvs: &[Vec<[f64; 2]>], inputs: &[Vec<Vec<f64>>]) -> Result<Vec<LandmarkStats>> {
    if uvs.is_empty() || uvs.len() != inputs.len() {
        return Err(AuvError::Data("landmark sets are empty or differ in length".into()));
    }
    let l = uvs[0].len();
    if uvs.iter().any(|u| u.len() != l) || inputs.iter().any(|p| p.len() != l) {
        return Err(AuvError::Data("shapes carry different landmark counts".into()));
    }
    Ok((0..l)
        .map(|k| {
            let (uv_mean, uv_std) = pooled(&uvs.iter().map(|u| u[k].to_vec()).collect::<Vec<_>>());
            let (input_mean, input_std) = pooled(&inputs.iter().map(|p| p[k].clone()).collect::<Vec<_>>());
            LandmarkStats {
                uv_mean: [uv_mean[0], uv_mean[1]],
                uv_std,
                input_mean,
                input_std,
            }
        })
        .collect())
}

/// Landmark statistics of a toy model over warped face images.
pub fn landmark_uv_stats(model: &AuvModel, images: &[ToyImage]) -> Result<Vec<LandmarkStats>> {
    let mut uvs = Vec::with_capacity(images.len());
    let mut inputs = Vec::with_capacity(images.len());
    for img in images {
        let lm = img.landmarks_normalized();
        let pts = Tensor::new(
            vec![lm.len(), 2],
            lm.iter().flat_map(|p| p.map(|x| x as f32)).collect(),
        )?;
        let eval = model.evaluate(&image_tensor(img), &pts, None)?;
        uvs.push((0..lm.len()).map(|i| {
            let r = eval.uv.row(i);
            [r[0] as f64, r[1] as f64]
        }).collect());
        inputs.push(lm.iter().map(|p| p.to_vec()).collect());
    }
    landmark_stats(&uvs, &inputs)
}

/// Per-texel labels of the textures of one exemplar shape, `None` where the
/// exemplar left a texel unlabeled. Texel `(i, j)` is stored at `j·R + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub resolution: usize,
    pub labels: Vec<Vec<Option<u8>>>,
}

impl LabelMap {
    /// Labels each texel with the majority label of the samples landing in
    /// it (ties to the lower label).
    pub fn from_samples(
        uvs: &[[f64; 2]],
        routes: &[usize],
        labels: &[u8],
        k: usize,
        resolution: usize,
    ) -> Result<Self> {
        if uvs.len() != routes.len() || uvs.len() != labels.len() {
            return Err(AuvError::Data("label samples differ in length".into()));
        }
        let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut votes = vec![vec![vec![0u32; classes]; resolution * resolution]; k];
        for ((uv, &r), &l) in uvs.iter().zip(routes).zip(labels) {
            let o = uv_to_texel(uv[1], resolution) * resolution + uv_to_texel(uv[0], resolution);
            votes[r][o][l as usize] += 1;
        }
        let labels = votes
            .into_iter()
            .map(|tex| {
                tex.into_iter()
                    .map(|v| {
                        let best = (0..classes).fold(0, |b, c| if v[c] > v[b] { c } else { b });
                        (classes > 0 && v[best] > 0).then_some(best as u8)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { resolution, labels })
    }

    /// A map with every texel of every texture labeled `label`.
    pub fn constant(k: usize, resolution: usize, label: u8) -> Self {
        Self {
            resolution,
            labels: vec![vec![Some(label); resolution * resolution]; k],
        }
    }

    /// Label at a UV point in texture `k`, falling back to the nearest
    /// labeled texel of that texture (ties to the lower texel index).
    pub fn lookup(&self, k: usize, uv: [f64; 2]) -> Result<u8> {
        let r = self.resolution;
        let (i, j) = (uv_to_texel(uv[0], r), uv_to_texel(uv[1], r));
        let tex = &self.labels[k];
        if let Some(l) = tex[j * r + i] {
            return Ok(l);
        }
        let mut best: Option<(usize, u8)> = None;
        for (o, l) in tex.iter().enumerate() {
            if let Some(l) = l {
                let (di, dj) = ((o % r) as isize - i as isize, (o / r) as isize - j as isize);
                let d = (di * di + dj * dj) as usize;
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, *l));
                }
            }
        }
        best.map(|(_, l)| l)
            .ok_or_else(|| AuvError::Data(format!("texture {k} has no labeled texel")))
    }
}

/// Labels each point with the label at its UV texel in the texture chosen
/// by its argmax mask.
pub fn one_shot_segmentation(
    model: &AuvModel,
    map: &LabelMap,
    input: &Tensor<f32>,
    points: &[[f64; 3]],
    normals: &[[f64; 3]],
) -> Result<Vec<u8>> {
    if map.labels.len() != model.config.num_generators() {
        return Err(AuvError::Data("label map and model disagree on texture count".into()));
    }
    let (uvs, routes, _) = route_points(model, input, points, normals)?;
    uvs.iter().zip(&routes).map(|(&uv, &k)| map.lookup(k, uv)).collect()
}

/// Distance in UV units from `uv` to the nearest texel centre of `texture`
/// whose color is within `tol` of `color` in every channel. `None` when no
/// texel matches.
pub fn distance_to_color(texture: &Raster, uv: [f64; 2], color: [f32; 3], tol: f32) -> Option<f64> {
    let r = texture.width();
    let mut best: Option<f64> = None;
    for row in 0..r {
        let j = r - 1 - row;
        let v = atlas_to_uv((j as f64 + 0.5) / r as f64);
        for i in 0..r {
            let px = texture.pixel(i, row);
            if (0..3).all(|c| (px[c] - color[c]).abs() <= tol) {
                let u = atlas_to_uv((i as f64 + 0.5) / r as f64);
                let d = ((u - uv[0]).powi(2) + (v - uv[1]).powi(2)).sqrt();
                best = Some(best.map_or(d, |b: f64| b.min(d)));
            }
        }
    }
    best
}

/// IOU per class in `0..classes`; `None` for classes absent from both.
pub fn iou(pred: &[u8], gt: &[u8], classes: usize) -> Result<Vec<Option<f64>>> {
    if pred.len() != gt.len() {
        return Err(AuvError::Data("prediction and ground truth differ in length".into()));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes || g >= classes {
            return Err(AuvError::Data(format!("label out of range for {classes} classes")));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    Ok((0..classes)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect())
}

/// Mean over the classes that are present.
pub fn mean_iou(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len().max(1) as f64
}

/// One-shot segmentation of synthetic heads: the first pair is the labeled
/// exemplar, every other pair is segmented through it. Returns the mean over
/// shapes of the per-shape mean IOU and the IOU per class pooled over all
/// points.
pub fn head_segmentation(
    model: &AuvModel,
    heads: &[(&HeadStyle, &ShapeSample)],
    resolution: usize,
) -> Result<(f64, Vec<Option<f64>>)> {
    let [(ex_style, ex), rest @ ..] = heads else {
        return Err(AuvError::Data("segmentation needs an exemplar".into()));
    };
    if rest.is_empty() {
        return Err(AuvError::Data("segmentation needs shapes besides the exemplar".into()));
    }
    let (uvs, routes, _) = route_points(model, &ex.grid, &ex.cloud.positions, &ex.cloud.normals)?;
    let ex_labels = head_sample_labels(ex_style, &ex.cloud.source_uvs);
    let map = LabelMap::from_samples(&uvs, &routes, &ex_labels, model.config.num_generators(), resolution)?;
    let mut per_shape = 0.0;
    let (mut all_pred, mut all_gt) = (Vec::new(), Vec::new());
    for (style, shape) in rest {
        let pred = one_shot_segmentation(model, &map, &shape.grid, &shape.cloud.positions, &shape.cloud.normals)?;
        let gt = head_sample_labels(style, &shape.cloud.source_uvs);
        per_shape += mean_iou(&iou(&pred, &gt, HEAD_CLASSES)?);
        all_pred.extend(pred);
        all_gt.extend(gt);
    }
    Ok((per_shape / rest.len() as f64, iou(&all_pred, &all_gt, HEAD_CLASSES)?))
}

/// Bakes `b`, swaps its textures onto `a`, and measures for each of `a`'s
/// eye landmarks the UV distance to the nearest texel carrying `b`'s eye
/// color (within 0.1 per channel) in the texture the landmark routes to.
pub fn head_transfer_eye_distance(
    model: &AuvModel,
    a: (&SyntheticHead, &ShapeSample),
    b: (&SyntheticHead, &ShapeSample),
    resolution: usize,
) -> Result<[Option<f64>; 2]> {
    let textures = bake_texture(model, b.1, resolution)?
        .iter()
        .map(|t| t.filled(INPAINT_RADIUS))
        .collect::<Result<Vec<_>>>()?;
    let (pos, nrm) = a.0.normalized_landmarks()?;
    let (uvs, routes, _) = route_points(model, &a.1.grid, &pos[..2], &nrm[..2])?;
    Ok([0, 1].map(|e| distance_to_color(&textures[routes[e]], uvs[e], b.0.style.eye, 0.1)))
}

/// `10·log10(1/MSE)` for images in `[0, 1]`; identical images give `+inf`.
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    let mse = a.mse(b)?;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// PSNR restricted to pixels with `mask == true`.
pub fn psnr_masked(a: &Raster, b: &Raster, mask: &[bool]) -> Result<f64> {
    if a.data().len() != b.data().len() || mask.len() * a.channels() != a.data().len() {
        return Err(AuvError::Data("raster sizes differ".into()));
    }
    let ch = a.channels();
    let (mut sum, mut n) = (0.0, 0usize);
    for (o, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..ch {
            sum += ((a.data()[o * ch + c] - b.data()[o * ch + c]) as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(AuvError::Data("no pixels selected".into()));
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapsed_landmarks_have_zero_spread() {
        let uvs = vec![vec![[0.1, 0.2]]; 4];
        let inputs: Vec<Vec<Vec<f64>>> = (0..4).map(|i| vec![vec![i as f64, 0.0]]).collect();
        let s = landmark_stats(&uvs, &inputs).unwrap();
        assert_eq!(s[0].uv_std, 0.0);
        assert!((s[0].input_std - (1.25f64 / 2.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn stats_ignore_order() {
        let uvs: Vec<Vec<[f64; 2]>> = (0..5).map(|i| vec![[i as f64 * 0.1, 0.3 - i as f64 * 0.05]]).collect();
        let inputs: Vec<Vec<Vec<f64>>> = (0..5).map(|i| vec![vec![i as f64, 1.0]]).collect();
        let a = landmark_stats(&uvs, &inputs).unwrap();
        let (mut ru, mut ri) = (uvs.clone(), inputs.clone());
        ru.reverse();
        ri.reverse();
        let b = landmark_stats(&ru, &ri).unwrap();
        assert!((a[0].uv_std - b[0].uv_std).abs() < 1e-15);
    }

    #[test]
    fn constant_label_map_labels_everything() {
        let map = LabelMap::constant(2, 8, 1);
        let pred: Vec<u8> = [[0.0, 0.0], [0.4, -0.4], [9.0, 9.0]]
            .iter()
            .map(|&uv| map.lookup(1, uv).unwrap())
            .collect();
        assert_eq!(pred, vec![1, 1, 1]);
        let ious = iou(&pred, &[1, 1, 1], 3).unwrap();
        assert_eq!(ious[1], Some(1.0));
        assert_eq!(ious[0], None);
    }

    #[test]
    fn nearest_labeled_texel_fallback() {
        let map = LabelMap::from_samples(&[[-0.5, -0.5], [0.5, 0.5]], &[0, 0], &[0, 2], 1, 8).unwrap();
        assert_eq!(map.lookup(0, [-0.4, -0.4]).unwrap(), 0);
        assert_eq!(map.lookup(0, [0.3, 0.4]).unwrap(), 2);
        assert!(LabelMap::from_samples(&[], &[], &[], 1, 4).unwrap().lookup(0, [0.0, 0.0]).is_err());
    }

    #[test]
    fn iou_properties() {
        let a = [0, 1, 1, 2, 2, 2];
        let b = [0, 1, 2, 2, 2, 1];
        assert!(iou(&a, &a, 3).unwrap().iter().all(|v| *v == Some(1.0)));
        let ab = iou(&a, &b, 3).unwrap();
        assert_eq!(ab[0], Some(1.0));
        assert!((ab[1].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((ab[2].unwrap() - 0.5).abs() < 1e-12);
        let perm = |x: &[u8]| x.iter().map(|&l| (l + 1) % 3).collect::<Vec<_>>();
        let pp = iou(&perm(&a), &perm(&b), 3).unwrap();
        assert_eq!(pp[1], ab[0]);
        assert_eq!(pp[2], ab[1]);
        assert_eq!(pp[0], ab[2]);
    }

    #[test]
    fn psnr_values() {
        let a = Raster::filled(4, 4, &[0.5, 0.5, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Raster::filled(4, 4, &[0.6, 0.6, 0.6]);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-5);
        assert_eq!(p, psnr(&b, &a).unwrap());
    }
}
