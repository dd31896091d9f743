//! Reconstruction, smoothness and prior losses and their weighted sum.

use std::collections::HashMap;

use auv_tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuvError, Result};
use crate::geometry::Vec3;
use crate::networks::Category;

pub const DEFAULT_SIGMA: f64 = 0.02;

/// `{w_c, w_n, w_x, w_s, w_p}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub color: f64,
    pub normal: f64,
    pub coord: f64,
    pub smooth: f64,
    pub prior: f64,
}

impl LossWeights {
    pub const fn new(color: f64, normal: f64, coord: f64, smooth: f64, prior: f64) -> Self {
        Self {
            color,
            normal,
            coord,
            smooth,
            prior,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.color, self.normal, self.coord, self.smooth, self.prior]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(AuvError::Config(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("representable")
}

/// Loss terms of one batch; absent terms are excluded from the total.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub color: Option<Var>,
    pub normal: Option<Var>,
    pub coord: Option<Var>,
    pub smooth: Option<Var>,
    pub prior: Option<Var>,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, Option<Var>); 5] {
        [
            ("L_c", self.color),
            ("L_n", self.normal),
            ("L_x", self.coord),
            ("L_s", self.smooth),
            ("L_p", self.prior),
        ]
    }
}

/// Weighted sum of the present terms. Terms with zero weight are skipped.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, terms: &LossTerms, w: &LossWeights) -> Var {
    let weights = w.as_array();
    let mut acc: Option<Var> = None;
    for ((_, term), weight) in terms.named().into_iter().zip(weights) {
        let Some(t) = term else { continue };
        if weight == 0.0 {
            continue;
        }
        let scaled = tape.scale(t, lit(weight));
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled).expect("scalars"),
            None => scaled,
        });
    }
    acc.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero())))
}

/// MSE per channel group of a `[P, C]` prediction against the targets.
/// `colors` is `None` for colorless shapes, which leaves `L_c` absent.
/// Shapes with `C = 3` only produce `L_c`.
pub fn recon_losses<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    colors: Option<Var>,
    normals: Option<Var>,
    points: Option<Var>,
) -> Result<LossTerms> {
    let c = tape.shape(pred)[1];
    let mut terms = LossTerms::default();
    if let Some(col) = colors {
        let p = tape.slice_cols(pred, 0, 3)?;
        terms.color = Some(tape.mse(p, col)?);
    }
    if c >= 9 {
        if let Some(n) = normals {
            let p = tape.slice_cols(pred, 3, 6)?;
            terms.normal = Some(tape.mse(p, n)?);
        }
        if let Some(x) = points {
            let p = tape.slice_cols(pred, 6, 9)?;
            terms.coord = Some(tape.mse(p, x)?);
        }
    }
    Ok(terms)
}

/// Pairs `(i, j)` with `i` in the subset, `j` over all points and
/// `D(p_i, p_j) < σ`, ordered by subset position then `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub subset: Vec<usize>,
    pub total: usize,
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn neighbors_brute_force(points: &[Vec3], subset: &[usize], sigma: f64) -> NeighborSet {
    let mut pairs = Vec::new();
    let mut distances = Vec::new();
    for &i in subset {
        for (j, &q) in points.iter().enumerate() {
            let d = dist(points[i], q);
            if d < sigma {
                pairs.push((i, j));
                distances.push(d);
            }
        }
    }
    NeighborSet {
        subset: subset.to_vec(),
        total: points.len(),
        pairs,
        distances,
    }
}

/// Same result as [`neighbors_brute_force`] using a uniform grid of cell
/// size σ.
pub fn neighbors_grid(points: &[Vec3], subset: &[usize], sigma: f64) -> NeighborSet {
    let cell = |p: Vec3| p.map(|v| (v / sigma).floor() as i64);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (j, &p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(j);
    }
    let mut pairs = Vec::new();
    let mut distances = Vec::new();
    let mut found = Vec::new();
    for &i in subset {
        let c = cell(points[i]);
        found.clear();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(js) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        found.extend(js.iter().copied());
                    }
                }
            }
        }
        found.sort_unstable();
        for &j in &found {
            let d = dist(points[i], points[j]);
            if d < sigma {
                pairs.push((i, j));
                distances.push(d);
            }
        }
    }
    NeighborSet {
        subset: subset.to_vec(),
        total: points.len(),
        pairs,
        distances,
    }
}

/// `m` distinct indices out of `n`, uniformly.
pub fn choose_subset(rng: &mut impl Rng, n: usize, m: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, m.min(n)).into_vec()
}

/// `(1/(M·N)) Σ_i Σ_j |D(p_i,p_j) − D(q_i,q_j)| · T(p_i,p_j)` over the pairs
/// of `nb`, differentiable in `uv` (`[N, 2]`).
pub fn smoothness_loss<T: Scalar>(tape: &mut Tape<T>, uv: Var, nb: &NeighborSet) -> Result<Var> {
    let denom = (nb.subset.len() * nb.total) as f64;
    if nb.pairs.is_empty() || denom == 0.0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let is: Vec<usize> = nb.pairs.iter().map(|p| p.0).collect();
    let js: Vec<usize> = nb.pairs.iter().map(|p| p.1).collect();
    let qi = tape.gather_rows(uv, &is)?;
    let qj = tape.gather_rows(uv, &js)?;
    let diff = tape.sub(qi, qj)?;
    let dq = tape.row_norm(diff);
    let dp = tape.constant(Tensor::new(
        vec![nb.pairs.len(), 1],
        nb.distances.iter().map(|&d| lit(d)).collect(),
    )?);
    let gap = tape.sub(dp, dq)?;
    let a = tape.abs(gap);
    let s = tape.sum(a);
    Ok(tape.scale(s, lit(1.0 / denom)))
}

/// Per-point prior targets: UV targets `[P, 2]` and mask targets `[P, K_m]`
/// compared with the first `K_m` mask columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorTargets {
    pub uv: Tensor<f64>,
    pub masks: Option<Tensor<f64>>,
}

/// Height of the chair seat: the highest point in the thin slab
/// `0 < x < 0.1, |z| < 0.05`. Falls back to 0 when the slab is empty.
pub fn chair_seat_height(points: &[Vec3]) -> f64 {
    points
        .iter()
        .filter(|p| p[0] > 0.0 && p[0] < 0.1 && p[2] > -0.05 && p[2] < 0.05)
        .map(|p| p[1])
        .fold(None, |acc: Option<f64>, y| Some(acc.map_or(y, |a| a.max(y))))
        .unwrap_or(0.0)
}

/// Radial stretch `d` of the chair prior; 1 on the vertical axis where the
/// ratio is undefined.
pub fn chair_stretch(p: Vec3, seat: f64) -> f64 {
    let r2 = p[0] * p[0] + p[2] * p[2];
    if r2 == 0.0 {
        return 1.0;
    }
    ((r2 + 4.0 * (p[1] - seat).powi(2)) / r2).sqrt()
}

/// Builds the prior targets of `category` for one shape.
pub fn prior_targets(category: Category, points: &[Vec3], normals: &[Vec3]) -> Result<PriorTargets> {
    if points.len() != normals.len() {
        return Err(AuvError::Data("points and normals differ in length".into()));
    }
    let n = points.len();
    let indicator = |b: bool| if b { 1.0 } else { 0.0 };
    let project = |axes: [usize; 2]| -> Tensor<f64> {
        let data = points.iter().flat_map(|p| [p[axes[0]], p[axes[1]]]).collect();
        Tensor::new(vec![n, 2], data).expect("n x 2")
    };
    let mask_col = |f: &dyn Fn(Vec3, Vec3) -> bool| -> Tensor<f64> {
        let data = points
            .iter()
            .zip(normals)
            .map(|(&p, &nm)| indicator(f(p, nm)))
            .collect();
        Tensor::new(vec![n, 1], data).expect("n x 1")
    };
    let axes = category.projection_axes();
    Ok(match category {
        Category::Toy => PriorTargets {
            uv: project(axes),
            masks: None,
        },
        Category::Head => PriorTargets {
            uv: project(axes),
            masks: Some(mask_col(&|_, nm| nm[2] > -0.5)),
        },
        Category::Body => PriorTargets {
            uv: project(axes),
            masks: Some(mask_col(&|_, nm| {
                // z component of the normal's projection onto the yz plane
                let len = (nm[1] * nm[1] + nm[2] * nm[2]).sqrt();
                let z = if len > 0.0 { nm[2] / len } else { 0.0 };
                z > -0.5
            })),
        },
        Category::Animal => PriorTargets {
            uv: project(axes),
            masks: Some(mask_col(&|_, nm| nm[0] > 0.0)),
        },
        Category::TurbosquidCar => PriorTargets {
            uv: project(axes),
            masks: Some(mask_col(&|_, nm| nm[1] > -0.5)),
        },
        Category::ShapenetCar => PriorTargets {
            uv: project(axes),
            masks: Some(mask_col(&|p, nm| p[1] > 0.0 || nm[1] > -0.5)),
        },
        Category::Chair => {
            let p_max = points.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            let seat = chair_seat_height(points);
            let mut s = Vec::with_capacity(4 * n);
            let mut t = Vec::with_capacity(2 * n);
            for (&p, &nm) in points.iter().zip(normals) {
                let y_shift = p[1] - p_max - 0.05;
                let m1 = indicator(p[0] * nm[0] + y_shift * nm[1] + p[2] * nm[2] < 0.0);
                let m2 = indicator(p[1] > seat - 0.2);
                s.extend([m1 * m2, (1.0 - m1) * m2, m1 * (1.0 - m2), (1.0 - m1) * (1.0 - m2)]);
                let d = chair_stretch(p, seat);
                t.extend([p[0] * d, p[2] * d]);
            }
            PriorTargets {
                uv: Tensor::new(vec![n, 2], t)?,
                masks: Some(Tensor::new(vec![n, 4], s)?),
            }
        }
    })
}

/// `(1/N) Σ_i [Σ_k (m_ik − s_ik)² + |q_i − t_i|²]`.
pub fn prior_loss<T: Scalar>(
    tape: &mut Tape<T>,
    uv: Var,
    masks: Option<Var>,
    targets: &PriorTargets,
) -> Result<Var> {
    let n = tape.shape(uv)[0];
    let t = tape.constant(targets.uv.cast());
    let dq = tape.sub(uv, t)?;
    let sq = tape.square(dq);
    let mut total = tape.sum(sq);
    if let Some(s) = &targets.masks {
        let m = masks.ok_or_else(|| AuvError::Data("prior needs the model masks".into()))?;
        let k = s.cols();
        let mk = tape.slice_cols(m, 0, k)?;
        let sv = tape.constant(s.cast());
        let dm = tape.sub(mk, sv)?;
        let sq = tape.square(dm);
        let ms = tape.sum(sq);
        total = tape.add(total, ms)?;
    }
    Ok(tape.scale(total, lit(1.0 / n as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn recon_color_example() {
        let mut tape = Tape::<f64>::new();
        let mut pred = vec![0.0; 9];
        pred[0] = 1.0;
        let pv = tape.constant(Tensor::new(vec![1, 9], pred).unwrap());
        let zero = tape.constant(Tensor::zeros(&[1, 3]));
        let t = recon_losses(&mut tape, pv, Some(zero), Some(zero), Some(zero)).unwrap();
        assert!((value(&tape, t.color.unwrap()) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(value(&tape, t.normal.unwrap()), 0.0);
        let none = recon_losses(&mut tape, pv, None, Some(zero), Some(zero)).unwrap();
        assert!(none.color.is_none());
    }

    #[test]
    fn smoothness_three_point_example() {
        let p = vec![[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [0.5, 0.5, 0.5]];
        let nb = neighbors_brute_force(&p, &[0, 1, 2], DEFAULT_SIGMA);
        let mut tape = Tape::<f64>::new();
        let uv = tape.constant(Tensor::from_rows(&[[0.0, 0.0], [0.02, 0.0], [0.3, -0.7]]).unwrap());
        let l = smoothness_loss(&mut tape, uv, &nb).unwrap();
        // Oracle: direct double loop over the definition.
        let q = [[0.0, 0.0], [0.02, 0.0], [0.3, -0.7]];
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dp = dist(p[i], p[j]);
                if dp < DEFAULT_SIGMA {
                    let dq = ((q[i][0] - q[j][0]) as f64).hypot(q[i][1] - q[j][1]);
                    s += (dp - dq).abs();
                }
            }
        }
        let oracle = s / 9.0;
        assert!((value(&tape, l) - oracle).abs() < 1e-15);
        assert!((value(&tape, l) - 0.002_222_222_222).abs() < 1e-9);
    }

    #[test]
    fn smoothness_zero_without_pairs_and_for_isometry() {
        let p = vec![[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
        let nb = neighbors_brute_force(&p, &[0, 1], DEFAULT_SIGMA);
        let mut tape = Tape::<f64>::new();
        let uv = tape.constant(Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap());
        let l = smoothness_loss(&mut tape, uv, &nb).unwrap();
        assert_eq!(value(&tape, l), 0.0);

        let p = vec![[0.0, 0.0, 0.1], [0.006, 0.008, 0.1], [0.01, 0.0, 0.1]];
        let nb = neighbors_brute_force(&p, &[0, 1, 2], DEFAULT_SIGMA);
        let uv = tape.constant(Tensor::from_rows(&[[0.0, 0.0], [0.008, -0.006], [0.0, -0.01]]).unwrap());
        let l = smoothness_loss(&mut tape, uv, &nb).unwrap();
        assert!(value(&tape, l).abs() < 1e-12);
    }

    #[test]
    fn grid_search_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        use rand::SeedableRng;
        let pts: Vec<Vec3> = (0..2000)
            .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.05..0.05)])
            .collect();
        let subset = choose_subset(&mut rng, pts.len(), 300);
        assert_eq!(neighbors_grid(&pts, &subset, 0.03), neighbors_brute_force(&pts, &subset, 0.03));
    }

    #[test]
    fn head_prior_example_and_threshold() {
        let t = prior_targets(Category::Head, &[[0.0; 3]], &[[0.0, 0.0, -1.0]]).unwrap();
        let mut tape = Tape::<f64>::new();
        let uv = tape.constant(Tensor::from_rows(&[[0.5, 0.5]]).unwrap());
        let m = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let l = prior_loss(&mut tape, uv, Some(m), &t).unwrap();
        assert!((value(&tape, l) - 1.5).abs() < 1e-12);

        let edge = prior_targets(Category::Head, &[[0.0; 3]], &[[0.0, 0.866, -0.5]]).unwrap();
        assert_eq!(edge.masks.unwrap().data(), &[0.0]);
    }

    #[test]
    fn animal_prior_perfect_prediction() {
        let p = [0.1, 0.2, 0.3];
        let t = prior_targets(Category::Animal, &[p], &[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(t.masks.as_ref().unwrap().data(), &[1.0]);
        let mut tape = Tape::<f64>::new();
        let uv = tape.constant(Tensor::from_rows(&[[0.2, 0.3]]).unwrap());
        let m = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let l = prior_loss(&mut tape, uv, Some(m), &t).unwrap();
        assert_eq!(value(&tape, l), 0.0);
    }

    #[test]
    fn car_variants() {
        let down = [0.0, -1.0, 0.0];
        let ts = prior_targets(Category::TurbosquidCar, &[[0.1, 0.2, 0.3]], &[down]).unwrap();
        assert_eq!(ts.masks.unwrap().data(), &[0.0]);
        assert_eq!(ts.uv.data(), &[0.1, 0.3]);
        let sn = prior_targets(Category::ShapenetCar, &[[0.1, 0.2, 0.3]], &[down]).unwrap();
        assert_eq!(sn.masks.unwrap().data(), &[1.0]);
    }

    #[test]
    fn body_prior_uses_yz_direction() {
        let t = prior_targets(
            Category::Body,
            &[[0.0; 3], [0.0; 3]],
            &[[0.9, 0.0, -0.436], [0.0, 0.6, -0.8]],
        )
        .unwrap();
        // yz-projection of the first normal points straight back (-z).
        assert_eq!(t.masks.unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn chair_targets() {
        let pts = vec![[0.05, 0.1, 0.0], [0.3, 0.1, 0.4], [0.0, 0.45, -0.3], [-0.2, -0.4, 0.1]];
        let normals = vec![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];
        assert_eq!(chair_seat_height(&pts), 0.1);
        let t = prior_targets(Category::Chair, &pts, &normals).unwrap();
        for row in t.masks.as_ref().unwrap().data().chunks(4) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
        // At seat height the stretch is 1.
        assert_eq!(&t.uv.data()[2..4], &[0.3, 0.4]);
    }

    #[test]
    fn total_loss_weights() {
        let mut tape = Tape::<f64>::new();
        let vals = [2.0, 3.0, 5.0, 7.0, 11.0];
        let v: Vec<Var> = vals.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
        let terms = LossTerms {
            color: Some(v[0]),
            normal: Some(v[1]),
            coord: Some(v[2]),
            smooth: Some(v[3]),
            prior: Some(v[4]),
        };
        let l = total_loss(&mut tape, &terms, &LossWeights::new(1.0, 0.5, 100.0, 100.0, 1.0));
        assert_eq!(value(&tape, l), 2.0 + 1.5 + 500.0 + 700.0 + 11.0);
        let z = total_loss(&mut tape, &terms, &LossWeights::new(0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(value(&tape, z), 0.0);
        let no_color = LossTerms { color: None, ..terms };
        let l = total_loss(&mut tape, &no_color, &LossWeights::new(1.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(value(&tape, l), 0.0);
    }
}
