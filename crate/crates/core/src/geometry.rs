//! Textured meshes, surface point clouds and colored voxel grids.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use auv_tensor::{Checkpoint, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AuvError, Result};
use crate::raster::Raster;

pub type Vec3 = [f64; 3];

/// Color written to samples of untextured meshes.
pub const COLORLESS_SENTINEL: [f32; 3] = [-1.0, -1.0, -1.0];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalized(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n > 0.0 {
        [a[0] / n, a[1] / n, a[2] / n]
    } else {
        [0.0, 0.0, 0.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TexturedMesh {
    pub positions: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub uvs: Vec<[f64; 2]>,
    /// Per-corner indices into `uvs`, parallel to `triangles`. Empty when the
    /// mesh has no texture coordinates.
    pub uv_triangles: Vec<[usize; 3]>,
    pub material_ids: Vec<usize>,
    pub texture: Option<Raster>,
}

impl TexturedMesh {
    pub fn is_textured(&self) -> bool {
        self.texture.is_some() && self.uv_triangles.len() == self.triangles.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (f, tri) in self.triangles.iter().enumerate() {
            if let Some(&i) = tri.iter().find(|&&i| i >= self.positions.len()) {
                return Err(AuvError::Validation(format!(
                    "face {f} references vertex {i} of {}",
                    self.positions.len()
                )));
            }
        }
        if !self.uv_triangles.is_empty() && self.uv_triangles.len() != self.triangles.len() {
            return Err(AuvError::Validation("uv faces do not match faces".into()));
        }
        for (f, tri) in self.uv_triangles.iter().enumerate() {
            if let Some(&i) = tri.iter().find(|&&i| i >= self.uvs.len()) {
                return Err(AuvError::Validation(format!(
                    "face {f} references uv {i} of {}",
                    self.uvs.len()
                )));
            }
        }
        if self.uvs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AuvError::Validation("non-finite uv".into()));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AuvError::Validation("non-finite position".into()));
        }
        Ok(())
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangles[f].map(|i| self.positions[i]);
        normalized(cross(sub(b, a), sub(c, a)))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangles[f].map(|i| self.positions[i]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    /// Area-weighted average of incident face normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![[0.0; 3]; self.positions.len()];
        for tri in &self.triangles {
            let [a, b, c] = tri.map(|i| self.positions[i]);
            let n = cross(sub(b, a), sub(c, a));
            for &i in tri {
                for k in 0..3 {
                    acc[i][k] += n[k];
                }
            }
        }
        acc.into_iter().map(normalized).collect()
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        bounds(&self.positions)
    }

    /// Writes positions, uvs and faces as OBJ text (1-based indices).
    pub fn to_obj_string(&self, mtllib: Option<&str>, material: Option<&str>) -> String {
        let mut s = String::new();
        if let Some(lib) = mtllib {
            let _ = writeln!(s, "mtllib {lib}");
        }
        for p in &self.positions {
            let _ = writeln!(s, "v {} {} {}", p[0], p[1], p[2]);
        }
        for t in &self.uvs {
            let _ = writeln!(s, "vt {} {}", t[0], t[1]);
        }
        if let Some(m) = material {
            let _ = writeln!(s, "usemtl {m}");
        }
        for (f, tri) in self.triangles.iter().enumerate() {
            if let Some(uvt) = self.uv_triangles.get(f) {
                let _ = writeln!(
                    s,
                    "f {}/{} {}/{} {}/{}",
                    tri[0] + 1,
                    uvt[0] + 1,
                    tri[1] + 1,
                    uvt[1] + 1,
                    tri[2] + 1,
                    uvt[2] + 1
                );
            } else {
                let _ = writeln!(s, "f {} {} {}", tri[0] + 1, tri[1] + 1, tri[2] + 1);
            }
        }
        s
    }
}

fn bounds(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = *points.first()?;
    Some(points.iter().fold((first, first), |(lo, hi), p| {
        (
            [lo[0].min(p[0]), lo[1].min(p[1]), lo[2].min(p[2])],
            [hi[0].max(p[0]), hi[1].max(p[1]), hi[2].max(p[2])],
        )
    }))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> AuvError {
    AuvError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_floats<const N: usize>(path: &Path, line: usize, toks: &[&str]) -> Result<[f64; N]> {
    if toks.len() < N {
        return Err(parse_err(path, line, format!("expected {N} numbers")));
    }
    let mut out = [0.0; N];
    for (o, t) in out.iter_mut().zip(toks) {
        *o = t
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad number `{t}`")))?;
    }
    Ok(out)
}

/// Resolves a 1-based (or negative, relative) OBJ index.
fn obj_index(path: &Path, line: usize, tok: &str, count: usize) -> Result<usize> {
    let i: i64 = tok
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad index `{tok}`")))?;
    let resolved = match i {
        0 => {
            return Err(AuvError::Validation(format!(
                "{}:{line}: index 0 is invalid, OBJ indices are 1-based",
                path.display()
            )))
        }
        i if i > 0 => i - 1,
        i => count as i64 + i,
    };
    if resolved < 0 || resolved as usize >= count {
        return Err(AuvError::Validation(format!(
            "{}:{line}: index {i} out of range ({count} defined)",
            path.display()
        )));
    }
    Ok(resolved as usize)
}

/// Diffuse texture paths per material name, relative paths resolved against
/// the MTL file's directory.
pub fn parse_mtl(path: &Path) -> Result<HashMap<String, PathBuf>> {
    let text = fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = HashMap::new();
    let mut current: Option<String> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("newmtl") => {
                let name = toks
                    .next()
                    .ok_or_else(|| parse_err(path, n + 1, "newmtl without a name"))?;
                current = Some(name.to_string());
            }
            Some("map_Kd") => {
                let file = toks
                    .last()
                    .ok_or_else(|| parse_err(path, n + 1, "map_Kd without a file"))?;
                let Some(m) = &current else {
                    return Err(parse_err(path, n + 1, "map_Kd before newmtl"));
                };
                out.insert(m.clone(), dir.join(file));
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Loads a triangle OBJ with its MTL and diffuse texture. A missing MTL or
/// texture leaves the mesh untextured.
pub fn load_textured_mesh(path: &Path) -> Result<TexturedMesh> {
    let text = fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut mesh = TexturedMesh {
        positions: Vec::new(),
        triangles: Vec::new(),
        uvs: Vec::new(),
        uv_triangles: Vec::new(),
        material_ids: Vec::new(),
        texture: None,
    };
    let mut mtllib: Option<PathBuf> = None;
    let mut materials: Vec<String> = Vec::new();
    let mut current_material = 0usize;
    let mut faces_without_uv = 0usize;

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let toks: Vec<&str> = line.split_whitespace().collect();
        let Some((&head, rest)) = toks.split_first() else { continue };
        match head {
            "v" => mesh.positions.push(parse_floats::<3>(path, line_no, rest)?),
            "vt" => {
                let [u, v] = parse_floats::<2>(path, line_no, rest)?;
                mesh.uvs.push([u, v]);
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!("only triangles are supported, got {} corners", rest.len()),
                    ));
                }
                let mut tri = [0; 3];
                let mut uvt = [0; 3];
                let mut has_uv = true;
                for (k, corner) in rest.iter().enumerate() {
                    let mut parts = corner.split('/');
                    let vi = parts.next().unwrap_or("");
                    tri[k] = obj_index(path, line_no, vi, mesh.positions.len())?;
                    match parts.next() {
                        Some(t) if !t.is_empty() => {
                            uvt[k] = obj_index(path, line_no, t, mesh.uvs.len())?;
                        }
                        _ => has_uv = false,
                    }
                }
                mesh.triangles.push(tri);
                if has_uv {
                    mesh.uv_triangles.push(uvt);
                } else {
                    faces_without_uv += 1;
                }
                mesh.material_ids.push(current_material);
            }
            "mtllib" => {
                let file = rest
                    .first()
                    .ok_or_else(|| parse_err(path, line_no, "mtllib without a file"))?;
                mtllib = Some(dir.join(file));
            }
            "usemtl" => {
                let name = rest
                    .first()
                    .ok_or_else(|| parse_err(path, line_no, "usemtl without a name"))?;
                current_material = match materials.iter().position(|m| m == name) {
                    Some(i) => i,
                    None => {
                        materials.push(name.to_string());
                        materials.len() - 1
                    }
                };
            }
            _ => {}
        }
    }
    if faces_without_uv > 0 {
        mesh.uv_triangles.clear();
    }
    mesh.validate()?;

    if let Some(lib) = mtllib.filter(|p| p.exists()) {
        let maps = parse_mtl(&lib)?;
        let texture_path = materials
            .iter()
            .find_map(|m| maps.get(m))
            .or_else(|| maps.values().next());
        if let Some(tp) = texture_path.filter(|p| p.exists()) {
            mesh.texture = Some(Raster::load_png(tp)?);
        }
    }
    Ok(mesh)
}

/// Centre and scale that [`normalize_to_unit_box`] applies: `p' = (p - c)·s`.
pub fn unit_box_transform(points: &[Vec3]) -> Result<(Vec3, f64)> {
    let (lo, hi) = bounds(points).ok_or_else(|| AuvError::Validation("empty mesh".into()))?;
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(AuvError::Validation("degenerate mesh with zero extent".into()));
    }
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    Ok((center, 1.0 / extent))
}

/// Centers the bounding box at the origin and scales the longest axis to 1.
pub fn normalize_to_unit_box(mesh: &TexturedMesh) -> Result<TexturedMesh> {
    let (center, scale) = unit_box_transform(&mesh.positions)?;
    let mut out = mesh.clone();
    for p in &mut out.positions {
        for k in 0..3 {
            p[k] = (p[k] - center[k]) * scale;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColoredPointCloud {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub colors: Vec<[f32; 3]>,
    /// Source-texture coordinates each sample was colored from.
    pub source_uvs: Vec<[f64; 2]>,
    pub face_ids: Vec<usize>,
    pub colorless: bool,
}

impl ColoredPointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Same centering/scaling as [`normalize_to_unit_box`], applied to points.
    pub fn normalized(&self) -> Result<Self> {
        let (center, scale) = unit_box_transform(&self.positions)?;
        let mut out = self.clone();
        for p in &mut out.positions {
            for k in 0..3 {
                p[k] = (p[k] - center[k]) * scale;
            }
        }
        Ok(out)
    }

    pub fn positions_tensor(&self) -> Tensor<f32> {
        vec3_tensor(&self.positions)
    }

    pub fn normals_tensor(&self) -> Tensor<f32> {
        vec3_tensor(&self.normals)
    }

    pub fn colors_tensor(&self) -> Tensor<f32> {
        let data = self.colors.iter().flatten().copied().collect();
        Tensor::new(vec![self.len(), 3], data).expect("n x 3")
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            normals: idx.iter().map(|&i| self.normals[i]).collect(),
            colors: idx.iter().map(|&i| self.colors[i]).collect(),
            source_uvs: idx.iter().map(|&i| self.source_uvs[i]).collect(),
            face_ids: idx.iter().map(|&i| self.face_ids[i]).collect(),
            colorless: self.colorless,
        }
    }

    /// Stores the cloud as checkpoint entries under `prefix`.
    pub fn write_entries(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.insert(format!("{prefix}positions"), self.positions_tensor());
        ckpt.insert(format!("{prefix}normals"), self.normals_tensor());
        ckpt.insert(format!("{prefix}colors"), self.colors_tensor());
        let uv = self.source_uvs.iter().flat_map(|u| u.map(|v| v as f32)).collect();
        ckpt.insert(
            format!("{prefix}source_uvs"),
            Tensor::new(vec![self.len(), 2], uv).expect("n x 2"),
        );
        let faces = self.face_ids.iter().map(|&f| f as f32).collect();
        ckpt.insert(
            format!("{prefix}face_ids"),
            Tensor::new(vec![self.len()], faces).expect("n"),
        );
        ckpt.insert(
            format!("{prefix}colorless"),
            Tensor::scalar(if self.colorless { 1.0 } else { 0.0 }),
        );
    }

    pub fn read_entries(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let rows3 = |name: &str| -> Result<Vec<Vec3>> {
            let t = ckpt.tensor(&format!("{prefix}{name}"))?;
            if t.cols() != 3 {
                return Err(AuvError::Data(format!("{prefix}{name} is not n x 3")));
            }
            Ok(t.data()
                .chunks(3)
                .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
                .collect())
        };
        let positions = rows3("positions")?;
        let normals = rows3("normals")?;
        let colors = ckpt
            .tensor(&format!("{prefix}colors"))?
            .data()
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect::<Vec<_>>();
        let source_uvs = ckpt
            .tensor(&format!("{prefix}source_uvs"))?
            .data()
            .chunks(2)
            .map(|c| [c[0] as f64, c[1] as f64])
            .collect::<Vec<_>>();
        let face_ids = ckpt
            .tensor(&format!("{prefix}face_ids"))?
            .data()
            .iter()
            .map(|&f| f as usize)
            .collect::<Vec<_>>();
        let colorless = ckpt.tensor(&format!("{prefix}colorless"))?.item() != 0.0;
        let n = positions.len();
        if normals.len() != n || colors.len() != n || source_uvs.len() != n || face_ids.len() != n {
            return Err(AuvError::Data(format!("{prefix}: point arrays disagree in length")));
        }
        Ok(Self {
            positions,
            normals,
            colors,
            source_uvs,
            face_ids,
            colorless,
        })
    }
}

fn vec3_tensor(v: &[Vec3]) -> Tensor<f32> {
    let data = v.iter().flat_map(|p| p.map(|x| x as f32)).collect();
    Tensor::new(vec![v.len(), 3], data).expect("n x 3")
}

/// Area-proportional surface samples with face normals and bilinearly
/// sampled texture colors. `seed` drives a ChaCha stream, so equal seeds give
/// equal clouds.
pub fn sample_surface(mesh: &TexturedMesh, n: usize, seed: u64) -> Result<ColoredPointCloud> {
    if n == 0 {
        return Err(AuvError::Data("sample count must be at least 1".into()));
    }
    if mesh.triangles.is_empty() {
        return Err(AuvError::Validation("mesh has no faces".into()));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for f in 0..mesh.triangles.len() {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(AuvError::Validation("mesh has zero surface area".into()));
    }
    let textured = mesh.is_textured();
    let normals: Vec<Vec3> = (0..mesh.triangles.len()).map(|f| mesh.face_normal(f)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = ColoredPointCloud {
        positions: Vec::with_capacity(n),
        normals: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
        source_uvs: Vec::with_capacity(n),
        face_ids: Vec::with_capacity(n),
        colorless: !textured,
    };
    let mut rgb = [0.0f32; 3];
    for _ in 0..n {
        let r: f64 = rng.gen::<f64>() * total;
        let f = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        let w = [1.0 - s, s * (1.0 - r2), s * r2];
        let [a, b, c] = mesh.triangles[f].map(|i| mesh.positions[i]);
        let p = [
            w[0] * a[0] + w[1] * b[0] + w[2] * c[0],
            w[0] * a[1] + w[1] * b[1] + w[2] * c[1],
            w[0] * a[2] + w[1] * b[2] + w[2] * c[2],
        ];
        let (uv, color) = if textured {
            let [ta, tb, tc] = mesh.uv_triangles[f].map(|i| mesh.uvs[i]);
            let uv = [
                w[0] * ta[0] + w[1] * tb[0] + w[2] * tc[0],
                w[0] * ta[1] + w[1] * tb[1] + w[2] * tc[1],
            ];
            mesh.texture
                .as_ref()
                .expect("textured")
                .sample_uv(uv[0], uv[1], &mut rgb);
            (uv, rgb)
        } else {
            ([0.0, 0.0], COLORLESS_SENTINEL)
        };
        cloud.positions.push(p);
        cloud.normals.push(normals[f]);
        cloud.colors.push(color);
        cloud.source_uvs.push(uv);
        cloud.face_ids.push(f);
    }
    Ok(cloud)
}

/// `R³` grid with four channels (RGB, occupancy), stored channel-major as
/// `[4, R, R, R]` with x the slowest spatial axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ColoredVoxelGrid {
    pub resolution: usize,
    pub data: Vec<f32>,
}

impl ColoredVoxelGrid {
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let r = self.resolution;
        (x * r + y) * r + z
    }

    pub fn occupied(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[3 * self.resolution.pow(3) + self.index(x, y, z)] > 0.5
    }

    pub fn color(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let r3 = self.resolution.pow(3);
        let i = self.index(x, y, z);
        [self.data[i], self.data[r3 + i], self.data[2 * r3 + i]]
    }

    pub fn occupancy_count(&self) -> usize {
        let r3 = self.resolution.pow(3);
        self.data[3 * r3..].iter().filter(|&&o| o > 0.5).count()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let r = self.resolution;
        Tensor::new(vec![4, r, r, r], self.data.clone()).expect("4 x R³")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match t.shape() {
            &[4, a, b, c] if a == b && b == c => Ok(Self {
                resolution: a,
                data: t.data().to_vec(),
            }),
            s => Err(AuvError::Data(format!("voxel grid tensor has shape {s:?}"))),
        }
    }
}

/// Voxel index of a coordinate in the unit box: `floor((p + 0.5)·R)`, clamped.
pub fn voxel_coord(p: f64, resolution: usize) -> usize {
    let i = ((p + 0.5) * resolution as f64).floor();
    i.clamp(0.0, (resolution - 1) as f64) as usize
}

/// Occupancy plus mean sample color per voxel. Colorless clouds get zero
/// color channels.
pub fn voxelize_colored(cloud: &ColoredPointCloud, resolution: usize) -> Result<ColoredVoxelGrid> {
    if cloud.is_empty() {
        return Err(AuvError::Data("cannot voxelize an empty cloud".into()));
    }
    if resolution < 8 {
        return Err(AuvError::Config(format!("voxel resolution {resolution} < 8")));
    }
    let r3 = resolution.pow(3);
    let mut sums = vec![[0.0f64; 3]; r3];
    let mut counts = vec![0u32; r3];
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        let [x, y, z] = p.map(|v| voxel_coord(v, resolution));
        let i = (x * resolution + y) * resolution + z;
        counts[i] += 1;
        for k in 0..3 {
            sums[i][k] += c[k] as f64;
        }
    }
    let mut data = vec![0.0f32; 4 * r3];
    for i in 0..r3 {
        if counts[i] == 0 {
            continue;
        }
        data[3 * r3 + i] = 1.0;
        if !cloud.colorless {
            for k in 0..3 {
                data[k * r3 + i] = (sums[i][k] / counts[i] as f64) as f32;
            }
        }
    }
    Ok(ColoredVoxelGrid { resolution, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_triangles(ratio: f64) -> TexturedMesh {
        // Two disjoint right triangles in the z=0 plane with areas 1 : ratio.
        let s = ratio.sqrt();
        TexturedMesh {
            positions: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [2.0, 0.0, 0.0],
                [2.0 + s, 0.0, 0.0],
                [2.0, s, 0.0],
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
            uvs: vec![],
            uv_triangles: vec![],
            material_ids: vec![0, 0],
            texture: None,
        }
    }

    #[test]
    fn box_normalization_scales_longest_axis() {
        let mut m = two_triangles(1.0);
        m.positions = vec![[-1.0, -0.5, -0.5], [1.0, 0.5, 0.5], [1.0, -0.5, 0.5]];
        m.triangles = vec![[0, 1, 2]];
        let n = normalize_to_unit_box(&m).unwrap();
        let (lo, hi) = n.bounds().unwrap();
        assert_eq!(hi[0] - lo[0], 1.0);
        assert_eq!(hi[1] - lo[1], 0.5);
        assert_eq!(hi[2] - lo[2], 0.5);
    }

    #[test]
    fn spanning_minus_two_to_two_maps_into_unit_box() {
        let mut m = two_triangles(1.0);
        m.positions = vec![[-2.0, -2.0, -2.0], [2.0, 2.0, 2.0], [2.0, -2.0, 0.0]];
        m.triangles = vec![[0, 1, 2]];
        let n = normalize_to_unit_box(&m).unwrap();
        assert_eq!(n.positions[0], [-0.5, -0.5, -0.5]);
        assert_eq!(n.positions[1], [0.5, 0.5, 0.5]);
        assert_eq!(n.positions[2], [0.5, -0.5, 0.0]);
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut m = two_triangles(3.0);
        m.positions.iter_mut().for_each(|p| p[2] = p[0] * 0.3);
        let once = normalize_to_unit_box(&m).unwrap();
        let twice = normalize_to_unit_box(&once).unwrap();
        for (a, b) in once.positions.iter().zip(&twice.positions) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn degenerate_mesh_rejected() {
        let mut m = two_triangles(1.0);
        m.positions = vec![[1.0, 1.0, 1.0]; 3];
        m.triangles = vec![[0, 1, 2]];
        assert!(normalize_to_unit_box(&m).is_err());
    }

    #[test]
    fn area_proportional_sampling() {
        let m = two_triangles(3.0);
        let cloud = sample_surface(&m, 40_000, 0).unwrap();
        let first = cloud.face_ids.iter().filter(|&&f| f == 0).count() as f64;
        let second = 40_000.0 - first;
        assert!((first - 10_000.0).abs() <= 0.02 * 10_000.0, "{first}");
        assert!((second - 30_000.0).abs() <= 0.02 * 30_000.0, "{second}");
    }

    #[test]
    fn single_triangle_normals_and_constant_color() {
        let mut m = two_triangles(1.0);
        m.positions.truncate(3);
        m.triangles.truncate(1);
        m.material_ids.truncate(1);
        m.uvs = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        m.uv_triangles = vec![[0, 1, 2]];
        m.texture = Some(Raster::filled(8, 8, &[0.25, 0.5, 0.75]));
        let cloud = sample_surface(&m, 500, 3).unwrap();
        assert!(!cloud.colorless);
        for (n, c) in cloud.normals.iter().zip(&cloud.colors) {
            assert_eq!(*n, [0.0, 0.0, 1.0]);
            for (a, b) in c.iter().zip([0.25, 0.5, 0.75]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn untextured_cloud_is_flagged() {
        let cloud = sample_surface(&two_triangles(1.0), 10, 0).unwrap();
        assert!(cloud.colorless);
        assert!(cloud.colors.iter().all(|c| *c == COLORLESS_SENTINEL));
    }

    fn cloud_of(points: &[(Vec3, [f32; 3])]) -> ColoredPointCloud {
        ColoredPointCloud {
            positions: points.iter().map(|p| p.0).collect(),
            normals: vec![[0.0, 0.0, 1.0]; points.len()],
            colors: points.iter().map(|p| p.1).collect(),
            source_uvs: vec![[0.0; 2]; points.len()],
            face_ids: vec![0; points.len()],
            colorless: false,
        }
    }

    #[test]
    fn origin_lands_in_centre_voxel() {
        let g = voxelize_colored(&cloud_of(&[([0.0; 3], [0.1, 0.2, 0.3])]), 64).unwrap();
        assert!(g.occupied(32, 32, 32));
        assert_eq!(g.color(32, 32, 32), [0.1, 0.2, 0.3]);
        assert_eq!(g.occupancy_count(), 1);
    }

    #[test]
    fn shared_voxel_averages_colors() {
        let c = cloud_of(&[
            ([0.001, 0.0, 0.0], [0.2, 0.2, 0.2]),
            ([0.002, 0.0, 0.0], [0.4, 0.4, 0.4]),
        ]);
        let g = voxelize_colored(&c, 64).unwrap();
        let col = g.color(32, 32, 32);
        assert!((col[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn upper_boundary_clamps() {
        assert_eq!(voxel_coord(0.5, 64), 63);
        assert_eq!(voxel_coord(-0.5, 64), 0);
        assert_eq!(voxel_coord(-0.7, 64), 0);
    }

    #[test]
    fn empty_cloud_and_small_grid_rejected() {
        assert!(voxelize_colored(&cloud_of(&[]), 64).is_err());
        assert!(voxelize_colored(&cloud_of(&[([0.0; 3], [0.0; 3])]), 4).is_err());
    }
}
