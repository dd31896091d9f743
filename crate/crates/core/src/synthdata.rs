//! Procedural datasets with exact ground truth: warped 2D faces and textured
//! 3D heads.
//!
//! Toy images use pixel coordinates with the origin at the top-left corner,
//! `x` to the right and `y` down; pixel `(i, j)` has its centre at
//! `(i + 0.5, j + 0.5)`. Homographies act on these coordinates.

use std::path::Path;

use nalgebra::{Matrix3, SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuvError, Result};
use crate::geometry::{TexturedMesh, Vec3};
use crate::raster::Raster;

pub type Homography = [[f64; 3]; 3];

pub const IDENTITY: Homography = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Eye centres and mouth centre of the canonical face, in units of the image
/// width relative to the image centre.
pub const FACE_LANDMARKS: [[f64; 2]; 3] = [[-0.13, -0.06], [0.13, -0.06], [0.0, 0.18]];
pub const LANDMARK_NAMES: [&str; 3] = ["left_eye", "right_eye", "mouth"];

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub raster: Raster,
    pub homography: Homography,
    pub background: [f32; 3],
    pub landmarks_canonical: [[f64; 2]; 3],
    pub landmarks: [[f64; 2]; 3],
}

impl ToyImage {
    pub fn size(&self) -> usize {
        self.raster.width()
    }

    /// Landmarks in the `[-0.5, 0.5]²` frame the toy model works in.
    pub fn landmarks_normalized(&self) -> [[f64; 2]; 3] {
        let w = self.size() as f64;
        self.landmarks.map(|[x, y]| [x / w - 0.5, y / w - 0.5])
    }
}

fn smooth_step(d: f64, width: f64) -> f64 {
    1.0 / (1.0 + (d / width).exp())
}

fn mix(dst: &mut [f64; 3], color: [f64; 3], a: f64) {
    for k in 0..3 {
        dst[k] = dst[k] * (1.0 - a) + color[k] * a;
    }
}

fn uniform3(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Geometry of a procedural face. Landmark positions are fixed; these only
/// change the extent of the regions around them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceShape {
    pub face_axes: [f64; 2],
    pub hair_axes: [f64; 2],
    pub hairline: f64,
    pub eye_radius: f64,
    /// The mouth is the lower part of a ring centred at `(0, mouth_center)`
    /// below `mouth_cut`.
    pub mouth_center: f64,
    pub mouth_radius: f64,
    pub mouth_cut: f64,
    pub mouth_thickness: f64,
    /// Eyebrow arcs above the eyes: height above the eye centre and
    /// half-thickness; no brows when the thickness is 0.
    pub brow_height: f64,
    pub brow_thickness: f64,
    /// Linear shading `1 + a·x + b·y` applied to the whole image.
    pub shading: [f64; 2],
}

impl Default for FaceShape {
    fn default() -> Self {
        Self {
            face_axes: [0.3, 0.38],
            hair_axes: [0.33, 0.4],
            hairline: 0.18,
            eye_radius: 0.045,
            mouth_center: 0.05,
            mouth_radius: 0.13,
            mouth_cut: 0.13,
            mouth_thickness: 0.035,
            brow_height: 0.0,
            brow_thickness: 0.0,
            shading: [0.0, 0.0],
        }
    }
}

impl FaceShape {
    pub fn random(rng: &mut impl Rng) -> Self {
        let face_axes = [rng.gen_range(0.26..0.34), rng.gen_range(0.34..0.42)];
        let mouth_radius = rng.gen_range(0.1..0.16);
        let mouth_center = FACE_LANDMARKS[2][1] - mouth_radius;
        Self {
            face_axes,
            hair_axes: [face_axes[0] + 0.03, face_axes[1] + 0.02],
            hairline: rng.gen_range(0.12..0.24),
            eye_radius: rng.gen_range(0.03..0.06),
            mouth_center,
            mouth_radius,
            mouth_cut: mouth_center + 0.08,
            mouth_thickness: rng.gen_range(0.025..0.045),
            brow_height: rng.gen_range(0.06..0.1),
            brow_thickness: rng.gen_range(0.008..0.02),
            shading: [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)],
        }
    }
}

struct FacePalette {
    background: [f64; 3],
    skin: [f64; 3],
    hair: [f64; 3],
    eye: [f64; 3],
    mouth: [f64; 3],
}

impl FacePalette {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            background: uniform3(rng, 0.0, 1.0),
            skin: uniform3(rng, 0.3, 1.0),
            hair: uniform3(rng, 0.0, 0.6),
            eye: uniform3(rng, 0.0, 0.3),
            mouth: [rng.gen_range(0.5..1.0), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)],
        }
    }
}

fn render_face(pal: &FacePalette, shape: &FaceShape, size: usize) -> ToyImage {
    let w = size as f64;
    let mut data = Vec::with_capacity(size * size * 3);
    for j in 0..size {
        for i in 0..size {
            let x = (i as f64 + 0.5) / w - 0.5;
            let y = (j as f64 + 0.5) / w - 0.5;
            let mut c = pal.background;
            let [ax, ay] = shape.face_axes;
            let face = ((x / ax).powi(2) + (y / ay).powi(2)).sqrt() - 1.0;
            mix(&mut c, pal.skin, smooth_step(face * 0.3, 0.012));
            let [hx, hy] = shape.hair_axes;
            let hairline = (((x / hx).powi(2) + ((y + 0.05) / hy).powi(2)).sqrt() - 1.0)
                .max(y + shape.hairline);
            mix(&mut c, pal.hair, smooth_step(hairline * 0.3, 0.012));
            for [lx, ly] in &FACE_LANDMARKS[..2] {
                let d = ((x - lx).powi(2) + (y - ly).powi(2)).sqrt() - shape.eye_radius;
                mix(&mut c, pal.eye, smooth_step(d, 0.012));
            }
            let r = (x * x + (y - shape.mouth_center).powi(2)).sqrt();
            let arc = ((r - shape.mouth_radius).abs() - shape.mouth_thickness).max(shape.mouth_cut - y);
            mix(&mut c, pal.mouth, smooth_step(arc, 0.012));
            if shape.brow_thickness > 0.0 {
                for [lx, ly] in &FACE_LANDMARKS[..2] {
                    let (dx, dy) = (x - lx, y - (ly - shape.brow_height));
                    let d = (dy - 2.0 * dx * dx).abs().max(dx.abs() - 0.06) - shape.brow_thickness;
                    mix(&mut c, pal.hair, smooth_step(d, 0.008));
                }
            }
            if shape.shading != [0.0, 0.0] {
                let f = 1.0 + shape.shading[0] * x + shape.shading[1] * y;
                c = c.map(|v| (v * f).clamp(0.0, 1.0));
            }
            data.extend(c.map(|v| v as f32));
        }
    }
    let landmarks = FACE_LANDMARKS.map(|[x, y]| [(x + 0.5) * w, (y + 0.5) * w]);
    ToyImage {
        raster: Raster::from_data(size, size, 3, data).expect("sized"),
        homography: IDENTITY,
        background: pal.background.map(|v| v as f32),
        landmarks_canonical: landmarks,
        landmarks,
    }
}

/// Canonical (unwarped) procedural face of `size²` pixels. Only the colors
/// depend on the seed.
pub fn make_face_image(seed: u64, size: usize) -> ToyImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pal = FacePalette::random(&mut rng);
    render_face(&pal, &FaceShape::default(), size)
}

/// Unwarped face whose colors and region geometry both depend on the seed,
/// with the landmarks at their canonical positions.
pub fn make_aligned_face(seed: u64, size: usize) -> ToyImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pal = FacePalette::random(&mut rng);
    let shape = FaceShape::random(&mut rng);
    render_face(&pal, &shape, size)
}

pub fn apply_homography(h: &Homography, p: [f64; 2]) -> [f64; 2] {
    let x = h[0][0] * p[0] + h[0][1] * p[1] + h[0][2];
    let y = h[1][0] * p[0] + h[1][1] * p[1] + h[1][2];
    let w = h[2][0] * p[0] + h[2][1] * p[1] + h[2][2];
    [x / w, y / w]
}

fn to_matrix(h: &Homography) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| h[r][c])
}

pub fn invert_homography(h: &Homography) -> Result<Homography> {
    let m = to_matrix(h);
    if m.determinant().abs() <= 1e-6 {
        return Err(AuvError::Data("homography is not invertible".into()));
    }
    let inv = m.try_inverse().ok_or_else(|| AuvError::Data("homography is singular".into()))?;
    Ok(std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)])))
}

/// Homography mapping the four image corners to independently jittered
/// positions, each coordinate moved by at most `max_corner_shift · size`.
pub fn random_homography(seed: u64, size: usize, max_corner_shift: f64) -> Result<Homography> {
    if !(0.0..=0.25).contains(&max_corner_shift) {
        return Err(AuvError::Config(format!(
            "corner shift {max_corner_shift} outside [0, 0.25]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = size as f64;
    let src = [[0.0, 0.0], [w, 0.0], [w, w], [0.0, w]];
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (k, [x, y]) in src.into_iter().enumerate() {
        let s = max_corner_shift * w;
        let u = x + if s > 0.0 { rng.gen_range(-s..=s) } else { 0.0 };
        let v = y + if s > 0.0 { rng.gen_range(-s..=s) } else { 0.0 };
        let rows = [
            [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y],
            [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y],
        ];
        for (r, row) in rows.iter().enumerate() {
            for (c, &val) in row.iter().enumerate() {
                a[(2 * k + r, c)] = val;
            }
        }
        b[2 * k] = u;
        b[2 * k + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| AuvError::Data("degenerate corner configuration".into()))?;
    let out = [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]];
    invert_homography(&out)?;
    Ok(out)
}

/// Warps by inverse mapping with bilinear interpolation. Taps that fall
/// outside the source read the background color. The result's homography is
/// `h` composed after the input's own.
pub fn warp_image(img: &ToyImage, h: &Homography) -> Result<ToyImage> {
    let inv = invert_homography(h)?;
    let (w, ht) = (img.raster.width(), img.raster.height());
    let bg = img.background;
    let src = &img.raster;
    let mut out = Raster::new(w, ht, 3);
    for j in 0..ht {
        for i in 0..w {
            let [sx, sy] = apply_homography(&inv, [i as f64 + 0.5, j as f64 + 0.5]);
            let fx = sx - 0.5;
            let fy = sy - 0.5;
            let x0 = fx.floor();
            let y0 = fy.floor();
            let tx = (fx - x0) as f32;
            let ty = (fy - y0) as f32;
            let tap = |dx: f64, dy: f64| -> [f32; 3] {
                let (x, y) = (x0 + dx, y0 + dy);
                if x >= 0.0 && y >= 0.0 && x < w as f64 && y < ht as f64 {
                    let p = src.pixel(x as usize, y as usize);
                    [p[0], p[1], p[2]]
                } else {
                    bg
                }
            };
            let taps = [
                (tap(0.0, 0.0), (1.0 - tx) * (1.0 - ty)),
                (tap(1.0, 0.0), tx * (1.0 - ty)),
                (tap(0.0, 1.0), (1.0 - tx) * ty),
                (tap(1.0, 1.0), tx * ty),
            ];
            let px = out.pixel_mut(i, j);
            for (c, o) in px.iter_mut().enumerate() {
                *o = taps
                    .iter()
                    .filter(|(_, wt)| *wt != 0.0)
                    .map(|(v, wt)| v[c] * wt)
                    .sum();
            }
        }
    }
    let composed = to_matrix(h) * to_matrix(&img.homography);
    Ok(ToyImage {
        raster: out,
        homography: std::array::from_fn(|r| std::array::from_fn(|c| composed[(r, c)])),
        background: bg,
        landmarks_canonical: img.landmarks_canonical,
        landmarks: img.landmarks.map(|p| apply_homography(h, p)),
    })
}

/// Face `i` of a toy dataset: canonical face with seed `seed + i`, warped by a
/// homography drawn from an independent stream.
pub fn toy_item(seed: u64, index: usize, size: usize, max_corner_shift: f64) -> Result<ToyImage> {
    let face = make_face_image(seed.wrapping_add(index as u64), size);
    let h = random_homography(
        seed.wrapping_add(index as u64) ^ 0x9e37_79b9_7f4a_7c15,
        size,
        max_corner_shift,
    )?;
    warp_image(&face, &h)
}

pub fn toy_dataset(seed: u64, count: usize, size: usize, max_corner_shift: f64) -> Result<Vec<ToyImage>> {
    (0..count).map(|i| toy_item(seed, i, size, max_corner_shift)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLabel {
    Face = 0,
    Scalp = 1,
    Neck = 2,
}

pub const HEAD_CLASSES: usize = 3;

impl HeadLabel {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Hair colors available to synthetic heads.
pub fn hair_palette() -> Vec<[f32; 3]> {
    (0..32)
        .map(|i| {
            let hue = (i % 8) as f32 / 8.0;
            let value = [0.15, 0.3, 0.45, 0.6][i / 8];
            hsv(hue, 0.7, value)
        })
        .collect()
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let k = |n: f32| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// Appearance and feature placement of one synthetic head, expressed on the
/// unit sphere before the ellipsoidal deformation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStyle {
    pub radii: [f64; 3],
    pub eye_spacing: f64,
    pub eye_height: f64,
    pub mouth_height: f64,
    pub hairline: f64,
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub hair_index: usize,
    pub eye: [f32; 3],
    pub mouth: [f32; 3],
}

const EYE_RADIUS: f64 = 0.14;
const MOUTH_HALF_WIDTH: f64 = 0.25;
const NECK_LEVEL: f64 = -0.75;

impl HeadStyle {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_4ead);
        let palette = hair_palette();
        let hair_index = rng.gen_range(0..palette.len());
        let skin_tone: f32 = rng.gen_range(0.35..0.95);
        Self {
            radii: [
                rng.gen_range(0.32..0.36),
                rng.gen_range(0.44..0.5),
                rng.gen_range(0.36..0.4),
            ],
            eye_spacing: rng.gen_range(0.3..0.34),
            eye_height: rng.gen_range(0.16..0.2),
            mouth_height: rng.gen_range(-0.38..-0.34),
            hairline: rng.gen_range(0.42..0.5),
            skin: [skin_tone, skin_tone * 0.8, skin_tone * 0.65],
            hair: palette[hair_index],
            hair_index,
            eye: [rng.gen_range(0.0..0.3), rng.gen_range(0.3..0.9), rng.gen_range(0.6..1.0)],
            mouth: [rng.gen_range(0.6..1.0), rng.gen_range(0.0..0.2), rng.gen_range(0.1..0.3)],
        }
    }

    fn eye_dirs(&self) -> [Vec3; 2] {
        let s = self.eye_spacing;
        let h = self.eye_height;
        let z = (1.0 - s * s - h * h).sqrt();
        [[-s, h, z], [s, h, z]]
    }

    fn mouth_dir(&self) -> Vec3 {
        let h = self.mouth_height;
        [0.0, h, (1.0 - h * h).sqrt()]
    }

    fn is_scalp(&self, d: Vec3) -> bool {
        d[1] > self.hairline || (d[2] < -0.2 && d[1] > -0.35)
    }

    /// Semantic label of a unit-sphere direction.
    pub fn label(&self, d: Vec3) -> HeadLabel {
        if d[1] < NECK_LEVEL {
            HeadLabel::Neck
        } else if self.is_scalp(d) {
            HeadLabel::Scalp
        } else {
            HeadLabel::Face
        }
    }

    /// Surface color of a unit-sphere direction.
    pub fn color(&self, d: Vec3) -> [f32; 3] {
        let dist = |a: Vec3| crate::geometry::norm(crate::geometry::sub(a, d));
        match self.label(d) {
            HeadLabel::Scalp => self.hair,
            HeadLabel::Neck => self.skin.map(|c| c * 0.8),
            HeadLabel::Face => {
                if self.eye_dirs().iter().any(|&e| dist(e) < EYE_RADIUS) {
                    self.eye
                } else if (d[1] - self.mouth_height).abs() < 0.05
                    && d[0].abs() < MOUTH_HALF_WIDTH
                    && d[2] > 0.0
                {
                    self.mouth
                } else {
                    self.skin
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticHead {
    pub mesh: TexturedMesh,
    pub style: HeadStyle,
    pub vertex_labels: Vec<HeadLabel>,
    /// Per-texel labels of the source texture, same layout as the texture.
    pub label_raster: Vec<u8>,
    pub landmarks: [Vec3; 3],
}

fn sphere_dir(u: f64, v: f64) -> Vec3 {
    // u ∈ [0,1] longitude with u = 0.5 facing +z; v ∈ [0,1] from bottom to top.
    let lon = (u - 0.5) * std::f64::consts::TAU;
    let lat = (v - 0.5) * std::f64::consts::PI;
    [lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos()]
}

fn dir_uv(d: Vec3) -> [f64; 2] {
    let lon = d[0].atan2(d[2]);
    let lat = d[1].clamp(-1.0, 1.0).asin();
    [
        lon / std::f64::consts::TAU + 0.5,
        lat / std::f64::consts::PI + 0.5,
    ]
}

/// Rows and columns of the latitude/longitude tessellation.
const HEAD_RINGS: usize = 40;
const HEAD_SEGMENTS: usize = 64;

impl SyntheticHead {
    /// Ground-truth label at a source-texture coordinate.
    /// Landmarks and their vertex normals in the unit-box frame the models
    /// are trained in.
    pub fn normalized_landmarks(&self) -> Result<([Vec3; 3], [Vec3; 3])> {
        let (c, s) = crate::geometry::unit_box_transform(&self.mesh.positions)?;
        let normals = self.mesh.vertex_normals();
        let nearest = |p: Vec3| {
            (0..self.mesh.positions.len())
                .min_by(|&a, &b| {
                    let da = crate::geometry::norm(crate::geometry::sub(self.mesh.positions[a], p));
                    let db = crate::geometry::norm(crate::geometry::sub(self.mesh.positions[b], p));
                    da.total_cmp(&db)
                })
                .expect("non-empty mesh")
        };
        let pos = self.landmarks.map(|p| [(p[0] - c[0]) * s, (p[1] - c[1]) * s, (p[2] - c[2]) * s]);
        let nrm = self.landmarks.map(|p| normals[nearest(p)]);
        Ok((pos, nrm))
    }

    pub fn label_at_uv(&self, uv: [f64; 2]) -> HeadLabel {
        self.style.label(sphere_dir(uv[0], uv[1].clamp(0.0, 1.0)))
    }

    /// Surface point of the deformed head along unit direction `d`.
    fn position(style: &HeadStyle, d: Vec3) -> Vec3 {
        // A soft bump along +z forms the nose.
        let nose = 0.06 * (-((d[0] / 0.12).powi(2) + ((d[1] + 0.05) / 0.15).powi(2))).exp();
        let r = style.radii;
        let scale = 1.0 + nose * d[2].max(0.0);
        [d[0] * r[0] * scale, d[1] * r[1] * scale, d[2] * r[2] * scale]
    }
}

/// Smooth color field used by [`make_textured_plane`].
pub fn plane_color(u: f64, v: f64) -> [f32; 3] {
    use std::f64::consts::TAU;
    [
        0.5 + 0.35 * (TAU * u).sin() * (TAU * 0.5 * v).cos(),
        0.3 + 0.5 * v,
        0.5 + 0.3 * (TAU * (u + v)).cos(),
    ]
    .map(|c| c as f32)
}

/// Square patch `[-0.5, 0.5]²` at `z = 0` split into `cells²` quads, with
/// texture coordinates `(x + 0.5, y + 0.5)` and a `texture_size²` texture
/// painted from [`plane_color`].
pub fn make_textured_plane(texture_size: usize, cells: usize) -> TexturedMesh {
    let n = cells.max(1);
    let mut positions = Vec::with_capacity((n + 1) * (n + 1));
    let mut uvs = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
            positions.push([u - 0.5, v - 0.5, 0.0]);
            uvs.push([u, v]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let a = j * (n + 1) + i;
            triangles.push([a, a + 1, a + n + 2]);
            triangles.push([a, a + n + 2, a + n + 1]);
        }
    }
    let t = texture_size;
    let mut data = Vec::with_capacity(t * t * 3);
    for row in 0..t {
        for col in 0..t {
            let u = (col as f64 + 0.5) / t as f64;
            let v = 1.0 - (row as f64 + 0.5) / t as f64;
            data.extend(plane_color(u, v));
        }
    }
    TexturedMesh {
        positions,
        uv_triangles: triangles.clone(),
        material_ids: vec![0; triangles.len()],
        triangles,
        uvs,
        texture: Some(Raster::from_data(t, t, 3, data).expect("sized")),
    }
}

/// Deformed, textured ellipsoid facing +z with +y up.
pub fn make_head_mesh(seed: u64, texture_size: usize) -> SyntheticHead {
    let style = HeadStyle::from_seed(seed);
    let mut positions = Vec::new();
    let mut uvs = Vec::new();
    let mut vertex_labels = Vec::new();
    // Pole vertices, then ring vertices (shared across the seam for
    // positions, duplicated for uvs).
    positions.push(SyntheticHead::position(&style, [0.0, -1.0, 0.0]));
    positions.push(SyntheticHead::position(&style, [0.0, 1.0, 0.0]));
    vertex_labels.push(style.label([0.0, -1.0, 0.0]));
    vertex_labels.push(style.label([0.0, 1.0, 0.0]));
    let ring_index = |r: usize, s: usize| 2 + (r - 1) * HEAD_SEGMENTS + s % HEAD_SEGMENTS;
    for r in 1..HEAD_RINGS {
        let v = r as f64 / HEAD_RINGS as f64;
        for s in 0..HEAD_SEGMENTS {
            let d = sphere_dir(s as f64 / HEAD_SEGMENTS as f64, v);
            positions.push(SyntheticHead::position(&style, d));
            vertex_labels.push(style.label(d));
        }
    }
    // uv grid (HEAD_SEGMENTS + 1) x (HEAD_RINGS + 1)
    for r in 0..=HEAD_RINGS {
        for s in 0..=HEAD_SEGMENTS {
            uvs.push([
                s as f64 / HEAD_SEGMENTS as f64,
                r as f64 / HEAD_RINGS as f64,
            ]);
        }
    }
    let uv_index = |r: usize, s: usize| r * (HEAD_SEGMENTS + 1) + s;
    let mut triangles = Vec::new();
    let mut uv_triangles = Vec::new();
    for s in 0..HEAD_SEGMENTS {
        // bottom cap (counter-clockwise seen from outside)
        triangles.push([0, ring_index(1, s + 1), ring_index(1, s)]);
        uv_triangles.push([uv_index(0, s), uv_index(1, s + 1), uv_index(1, s)]);
        // top cap
        let top = HEAD_RINGS - 1;
        triangles.push([1, ring_index(top, s), ring_index(top, s + 1)]);
        uv_triangles.push([uv_index(HEAD_RINGS, s), uv_index(top, s), uv_index(top, s + 1)]);
    }
    for r in 1..HEAD_RINGS - 1 {
        for s in 0..HEAD_SEGMENTS {
            let (a, b) = (ring_index(r, s), ring_index(r, s + 1));
            let (c, d) = (ring_index(r + 1, s), ring_index(r + 1, s + 1));
            let (ta, tb) = (uv_index(r, s), uv_index(r, s + 1));
            let (tc, td) = (uv_index(r + 1, s), uv_index(r + 1, s + 1));
            triangles.push([a, b, d]);
            uv_triangles.push([ta, tb, td]);
            triangles.push([a, d, c]);
            uv_triangles.push([ta, td, tc]);
        }
    }

    let mut texture = Raster::new(texture_size, texture_size, 3);
    let mut label_raster = vec![0u8; texture_size * texture_size];
    for j in 0..texture_size {
        for i in 0..texture_size {
            let u = (i as f64 + 0.5) / texture_size as f64;
            let v = 1.0 - (j as f64 + 0.5) / texture_size as f64;
            let d = sphere_dir(u, v);
            texture.pixel_mut(i, j).copy_from_slice(&style.color(d));
            label_raster[j * texture_size + i] = style.label(d) as u8;
        }
    }

    // Landmarks snap to the mesh vertex nearest each feature direction so
    // they lie exactly on the surface.
    let nearest_vertex = |d: Vec3| -> Vec3 {
        let target = SyntheticHead::position(&style, d);
        *positions
            .iter()
            .min_by(|a, b| {
                let da = crate::geometry::norm(crate::geometry::sub(**a, target));
                let db = crate::geometry::norm(crate::geometry::sub(**b, target));
                da.total_cmp(&db)
            })
            .expect("nonempty")
    };
    let [le, re] = style.eye_dirs();
    let landmarks = [nearest_vertex(le), nearest_vertex(re), nearest_vertex(style.mouth_dir())];

    let n = triangles.len();
    SyntheticHead {
        mesh: TexturedMesh {
            positions,
            triangles,
            uvs,
            uv_triangles,
            material_ids: vec![0; n],
            texture: Some(texture),
        },
        style,
        vertex_labels,
        label_raster,
        landmarks,
    }
}

/// Direction on the unit sphere whose texel lies at `uv`.
pub fn head_uv_direction(uv: [f64; 2]) -> Vec3 {
    sphere_dir(uv[0], uv[1])
}

/// Ground-truth label of each surface sample from its source-texture UV.
pub fn head_sample_labels(style: &HeadStyle, source_uvs: &[[f64; 2]]) -> Vec<u8> {
    source_uvs
        .iter()
        .map(|uv| style.label(sphere_dir(uv[0], uv[1].clamp(0.0, 1.0))).index() as u8)
        .collect()
}

/// Source-texture coordinate of a unit-sphere direction.
pub fn head_direction_uv(d: Vec3) -> [f64; 2] {
    dir_uv(d)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ToySidecar {
    pub seed: u64,
    pub index: usize,
    pub homography: Homography,
    pub landmark_names: Vec<String>,
    pub landmarks_canonical: Vec<[f64; 2]>,
    pub landmarks: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HeadSidecar {
    pub seed: u64,
    pub style: HeadStyle,
    pub landmark_names: Vec<String>,
    pub landmarks: Vec<Vec3>,
    pub vertex_labels: Vec<HeadLabel>,
}

/// Writes `toy_XXXX.png` plus a JSON sidecar per item.
pub fn write_toy_dataset(dir: &Path, seed: u64, count: usize, size: usize, shift: f64) -> Result<()> {
    for i in 0..count {
        let item = toy_item(seed, i, size, shift)?;
        item.raster.save_png(&dir.join(format!("toy_{i:04}.png")))?;
        crate::io::write_json(
            &dir.join(format!("toy_{i:04}.json")),
            &ToySidecar {
                seed,
                index: i,
                homography: item.homography,
                landmark_names: LANDMARK_NAMES.iter().map(|s| s.to_string()).collect(),
                landmarks_canonical: item.landmarks_canonical.to_vec(),
                landmarks: item.landmarks.to_vec(),
            },
        )?;
    }
    Ok(())
}

/// Writes `head_XXXX.obj/.mtl/.png` plus a JSON sidecar per head.
pub fn write_head_dataset(dir: &Path, seed: u64, count: usize, texture_size: usize) -> Result<()> {
    for i in 0..count {
        let s = seed.wrapping_add(i as u64);
        let head = make_head_mesh(s, texture_size);
        let stem = format!("head_{i:04}");
        crate::baker::write_obj_bundle(dir, &stem, &head.mesh, &[head.mesh.texture.clone().expect("textured")], None)?;
        crate::io::write_json(
            &dir.join(format!("{stem}.json")),
            &HeadSidecar {
                seed: s,
                style: head.style.clone(),
                landmark_names: LANDMARK_NAMES.iter().map(|s| s.to_string()).collect(),
                landmarks: head.landmarks.to_vec(),
                vertex_labels: head.vertex_labels.clone(),
            },
        )?;
    }
    Ok(())
}

pub fn read_head_sidecar(path: &Path) -> Result<HeadSidecar> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn color_dist(a: &[f32], b: &[f32; 3]) -> f32 {
        (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f32>().sqrt()
    }

    #[test]
    fn faces_are_seed_deterministic() {
        assert_eq!(make_face_image(4, 32), make_face_image(4, 32));
    }

    #[test]
    fn landmarks_sit_in_their_blobs() {
        for seed in 0..50 {
            let img = make_face_image(seed, 64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let _bg = uniform3(&mut rng, 0.0, 1.0);
            let _skin = uniform3(&mut rng, 0.3, 1.0);
            let _hair = uniform3(&mut rng, 0.0, 0.6);
            let eye = uniform3(&mut rng, 0.0, 0.3).map(|v| v as f32);
            let mouth = [rng.gen_range(0.5..1.0), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)]
                .map(|v: f64| v as f32);
            let mut px = [0.0f32; 3];
            for (k, l) in img.landmarks.iter().enumerate() {
                img.raster.sample_bilinear(l[0], l[1], &mut px);
                let want = if k < 2 { &eye } else { &mouth };
                assert!(color_dist(&px, want) < 0.1, "seed {seed} landmark {k}");
            }
        }
    }

    #[test]
    fn thousand_seeds_give_distinct_images() {
        let imgs: Vec<Raster> = (0..1000).map(|s| make_face_image(s, 16).raster).collect();
        for a in 0..imgs.len() {
            for b in a + 1..imgs.len() {
                assert!(imgs[a].mse(&imgs[b]).unwrap() > 0.0, "{a} {b}");
            }
        }
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = make_face_image(1, 32);
        let out = warp_image(&img, &IDENTITY).unwrap();
        assert_eq!(out.raster, img.raster);
    }

    #[test]
    fn constant_image_stays_constant() {
        let mut img = make_face_image(1, 32);
        img.raster = Raster::filled(32, 32, &[0.3, 0.6, 0.9]);
        img.background = [0.3, 0.6, 0.9];
        let h = random_homography(3, 32, 0.2).unwrap();
        let out = warp_image(&img, &h).unwrap();
        for v in out.raster.data().chunks(3) {
            for (a, b) in v.iter().zip([0.3f32, 0.6, 0.9]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bright_pixel_follows_homography() {
        for seed in 0..20 {
            let mut img = make_face_image(0, 48);
            img.raster = Raster::new(48, 48, 3);
            img.background = [0.0; 3];
            img.raster.pixel_mut(20, 25).copy_from_slice(&[1.0, 1.0, 1.0]);
            let h = random_homography(seed, 48, 0.15).unwrap();
            let out = warp_image(&img, &h).unwrap();
            let (mut best, mut at) = (-1.0, (0, 0));
            for j in 0..48 {
                for i in 0..48 {
                    let v = out.raster.pixel(i, j)[0];
                    if v > best {
                        best = v;
                        at = (i, j);
                    }
                }
            }
            let [ex, ey] = apply_homography(&h, [20.5, 25.5]);
            let (cx, cy) = (at.0 as f64 + 0.5, at.1 as f64 + 0.5);
            assert!((cx - ex).abs() <= 1.0 && (cy - ey).abs() <= 1.0, "seed {seed}");
        }
    }

    #[test]
    fn warped_landmarks_match_homography() {
        let item = toy_item(9, 3, 64, 0.15).unwrap();
        for (c, w) in item.landmarks_canonical.iter().zip(&item.landmarks) {
            let p = apply_homography(&item.homography, *c);
            assert!((p[0] - w[0]).abs() < 1e-9 && (p[1] - w[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trip_warp_preserves_interior() {
        let img = make_face_image(5, 64);
        let h = random_homography(5, 64, 0.1).unwrap();
        let back = warp_image(&warp_image(&img, &h).unwrap(), &invert_homography(&h).unwrap()).unwrap();
        let mut se = 0.0;
        let mut n = 0.0;
        for j in 16..48 {
            for i in 16..48 {
                for c in 0..3 {
                    se += ((back.raster.pixel(i, j)[c] - img.raster.pixel(i, j)[c]) as f64).powi(2);
                    n += 1.0;
                }
            }
        }
        let psnr = 10.0 * (1.0 / (se / n)).log10();
        assert!(psnr > 30.0, "{psnr}");
    }

    #[test]
    fn excessive_shift_and_singular_matrix_rejected() {
        assert!(random_homography(0, 64, 0.3).is_err());
        let singular = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(warp_image(&make_face_image(0, 8), &singular).is_err());
    }

    #[test]
    fn heads_are_seed_deterministic() {
        assert_eq!(make_head_mesh(3, 32), make_head_mesh(3, 32));
    }

    #[test]
    fn head_landmarks_face_forward_and_lie_on_vertices() {
        for seed in 0..10 {
            let h = make_head_mesh(seed, 32);
            h.mesh.validate().unwrap();
            for l in &h.landmarks[..2] {
                assert!(l[2] > 0.0);
            }
            for l in &h.landmarks {
                let d = h
                    .mesh
                    .positions
                    .iter()
                    .map(|p| crate::geometry::norm(crate::geometry::sub(*p, *l)))
                    .fold(f64::INFINITY, f64::min);
                assert!(d < 1e-3);
            }
        }
    }

    #[test]
    fn nose_points_along_z() {
        let h = make_head_mesh(0, 16);
        let tip = h
            .mesh
            .positions
            .iter()
            .max_by(|a, b| a[2].total_cmp(&b[2]))
            .unwrap();
        let dir = crate::geometry::normalized(*tip);
        assert!(dir[2] > 0.9);
    }

    #[test]
    fn hair_palette_coverage() {
        let distinct: std::collections::BTreeSet<usize> =
            (0..200).map(|s| HeadStyle::from_seed(s).hair_index).collect();
        assert!(hair_palette().len() >= 24);
        assert!(distinct.len() >= 20, "{}", distinct.len());
    }

    #[test]
    fn head_faces_point_outward() {
        let h = make_head_mesh(2, 16);
        for f in 0..h.mesh.triangles.len() {
            let c = h.mesh.triangles[f]
                .iter()
                .fold([0.0; 3], |acc, &i| {
                    let p = h.mesh.positions[i];
                    [acc[0] + p[0], acc[1] + p[1], acc[2] + p[2]]
                });
            assert!(crate::geometry::dot(h.mesh.face_normal(f), c) > 0.0, "face {f}");
        }
    }

    #[test]
    fn uv_and_direction_round_trip() {
        for &d in &[[0.0, 0.0, 1.0], [0.6, 0.0, 0.8], [0.0, 0.6, 0.8]] {
            let back = head_uv_direction(head_direction_uv(d));
            for k in 0..3 {
                assert!((back[k] - d[k]).abs() < 1e-12);
            }
        }
    }
}
