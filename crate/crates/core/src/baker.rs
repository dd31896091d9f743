//! Texture baking, fast-marching inpainting, textured export and transfer.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use auv_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AuvError, Result};
use crate::geometry::{load_textured_mesh, normalize_to_unit_box, parse_mtl, TexturedMesh};
use crate::networks::AuvModel;
use crate::raster::Raster;
use crate::trainer::ShapeSample;

/// Half-width of the UV window mapped onto a texture.
pub const UV_WINDOW: f64 = 0.55;
pub const DEFAULT_RESOLUTION: usize = 256;
pub const INPAINT_RADIUS: usize = 5;
const INPAINT_EPS: f64 = 1e-6;

/// UV coordinate in `[-0.55, 0.55]` to atlas coordinate in `[0, 1]`.
pub fn uv_to_atlas(q: f64) -> f64 {
    (q.clamp(-UV_WINDOW, UV_WINDOW) + UV_WINDOW) / (2.0 * UV_WINDOW)
}

pub fn atlas_to_uv(t: f64) -> f64 {
    t * 2.0 * UV_WINDOW - UV_WINDOW
}

/// Texel index of a UV coordinate on an `r`-texel axis.
pub fn uv_to_texel(q: f64, r: usize) -> usize {
    ((uv_to_atlas(q) * r as f64).floor() as usize).min(r - 1)
}

/// A baked raster with per-texel sample counts. Texel `(i, j)` has `i` along
/// u and `j` along v; it is stored at raster row `R-1-j` so that the image is
/// upright under OBJ texture conventions.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureImage {
    pub raster: Raster,
    pub counts: Vec<u32>,
}

impl TextureImage {
    pub fn empty(resolution: usize, channels: usize) -> Self {
        Self {
            raster: Raster::new(resolution, resolution, channels),
            counts: vec![0; resolution * resolution],
        }
    }

    pub fn resolution(&self) -> usize {
        self.raster.width()
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        let r = self.resolution();
        (r - 1 - j) * r + i
    }

    pub fn texel(&self, i: usize, j: usize) -> &[f32] {
        let r = self.resolution();
        self.raster.pixel(i, r - 1 - j)
    }

    pub fn count(&self, i: usize, j: usize) -> u32 {
        self.counts[self.offset(i, j)]
    }

    /// Validity per raster pixel (row-major, same layout as the raster).
    pub fn validity(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Inpaints invalid texels; the result is fully valid.
    pub fn inpainted(&self, radius: usize) -> Result<Raster> {
        inpaint_fmm(&self.raster, &self.validity(), radius)
    }

    /// Like [`TextureImage::inpainted`], but a texture that received no
    /// samples stays blank instead of failing.
    pub fn filled(&self, radius: usize) -> Result<Raster> {
        if self.valid_count() == 0 {
            Ok(self.raster.clone())
        } else {
            self.inpainted(radius)
        }
    }
}

/// Scatters colored UV samples into `k` textures of size `resolution²`,
/// routing sample `s` to texture `routes[s]` and averaging per texel.
pub fn bake_samples(
    uvs: &[[f64; 2]],
    colors: &[[f32; 3]],
    routes: &[usize],
    k: usize,
    resolution: usize,
) -> Result<Vec<TextureImage>> {
    if uvs.len() != colors.len() || uvs.len() != routes.len() {
        return Err(AuvError::Data("bake inputs differ in length".into()));
    }
    if resolution == 0 || k == 0 {
        return Err(AuvError::Config("bake needs a positive resolution and texture count".into()));
    }
    let mut sums = vec![vec![[0.0f64; 3]; resolution * resolution]; k];
    let mut textures: Vec<TextureImage> = (0..k).map(|_| TextureImage::empty(resolution, 3)).collect();
    for ((uv, c), &route) in uvs.iter().zip(colors).zip(routes) {
        if route >= k {
            return Err(AuvError::Data(format!("sample routed to texture {route} of {k}")));
        }
        let tex = &mut textures[route];
        let o = tex.offset(uv_to_texel(uv[0], resolution), uv_to_texel(uv[1], resolution));
        tex.counts[o] += 1;
        for ch in 0..3 {
            sums[route][o][ch] += c[ch] as f64;
        }
    }
    for (tex, sum) in textures.iter_mut().zip(&sums) {
        let data = tex.raster.data_mut();
        for (o, (&n, s)) in tex.counts.iter().zip(sum).enumerate() {
            if n > 0 {
                for ch in 0..3 {
                    data[o * 3 + ch] = (s[ch] / n as f64) as f32;
                }
            }
        }
    }
    Ok(textures)
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-point UVs and generator routes of a shape under `model`.
pub fn route_points(
    model: &AuvModel,
    input: &Tensor<f32>,
    points: &[[f64; 3]],
    normals: &[[f64; 3]],
) -> Result<(Vec<[f64; 2]>, Vec<usize>, Option<Tensor<f32>>)> {
    let n = points.len();
    let flat = |v: &[[f64; 3]]| Tensor::new(vec![n, 3], v.iter().flat_map(|p| p.map(|x| x as f32)).collect());
    let eval = model.evaluate(input, &flat(points)?, Some(&flat(normals)?))?;
    let uvs = (0..n)
        .map(|i| {
            let r = eval.uv.row(i);
            [r[0] as f64, r[1] as f64]
        })
        .collect();
    let routes = match &eval.masks {
        Some(m) => (0..n).map(|i| argmax(m.row(i))).collect(),
        None => vec![0; n],
    };
    Ok((uvs, routes, eval.masks))
}

/// Bakes the colored surface samples of `shape` into one texture per
/// generator. A generator that receives no samples yields an all-invalid
/// texture.
pub fn bake_texture(model: &AuvModel, shape: &ShapeSample, resolution: usize) -> Result<Vec<TextureImage>> {
    if shape.cloud.colorless {
        return Err(AuvError::Data("cannot bake a colorless shape".into()));
    }
    let (uvs, routes, _) = route_points(model, &shape.grid, &shape.cloud.positions, &shape.cloud.normals)?;
    bake_samples(&uvs, &shape.cloud.colors, &routes, model.config.num_generators(), resolution)
}

/// Deforms a toy image into UV space: every pixel is scattered to the texel
/// of its predicted UV. Image rows run downward, so v is negated to keep the
/// texture upright.
pub fn bake_toy_image(model: &AuvModel, img: &crate::synthdata::ToyImage, resolution: usize) -> Result<TextureImage> {
    let res = img.raster.width();
    let points = crate::trainer::pixel_points(res);
    let eval = model.evaluate(&crate::trainer::image_tensor(img), &points, None)?;
    let n = points.rows();
    let uvs: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let r = eval.uv.row(i);
            [r[0] as f64, -(r[1] as f64)]
        })
        .collect();
    let colors: Vec<[f32; 3]> = img.raster.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(bake_samples(&uvs, &colors, &vec![0; n], 1, resolution)?.remove(0))
}

/// Mean absolute color difference between textures `a` and `b` over samples
/// whose two mask values are within `band` of each other. `None` when no
/// sample falls in the band.
pub fn boundary_disagreement(
    textures: &[Raster],
    uvs: &[[f64; 2]],
    masks: &Tensor<f32>,
    a: usize,
    b: usize,
    band: f32,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let (mut ca, mut cb) = ([0.0f32; 3], [0.0f32; 3]);
    for (i, uv) in uvs.iter().enumerate() {
        let m = masks.row(i);
        if (m[a] - m[b]).abs() > band {
            continue;
        }
        let (u, v) = (uv_to_atlas(uv[0]), uv_to_atlas(uv[1]));
        textures[a].sample_uv(u, v, &mut ca);
        textures[b].sample_uv(u, v, &mut cb);
        sum += (0..3).map(|c| (ca[c] - cb[c]).abs() as f64).sum::<f64>() / 3.0;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Flag {
    Known,
    Band,
    Inside,
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn eikonal(t1: f64, t2: f64) -> f64 {
    match (t1.is_finite(), t2.is_finite()) {
        (true, true) => {
            let d = 2.0 - (t1 - t2) * (t1 - t2);
            if d > 0.0 {
                let r = d.sqrt();
                let s = (t1 + t2 - r) / 2.0;
                if s >= t1 && s >= t2 {
                    return s;
                }
                let s = s + r;
                if s >= t1 && s >= t2 {
                    return s;
                }
            }
            1.0 + t1.min(t2)
        }
        (true, false) => 1.0 + t1,
        (false, true) => 1.0 + t2,
        (false, false) => f64::INFINITY,
    }
}

struct Fmm {
    w: usize,
    h: usize,
    ch: usize,
    img: Vec<f32>,
    flag: Vec<Flag>,
    t: Vec<f64>,
    radius: usize,
}

impl Fmm {
    fn t_at(&self, x: isize, y: isize) -> f64 {
        if x < 0 || y < 0 || x >= self.w as isize || y >= self.h as isize {
            return f64::INFINITY;
        }
        let o = y as usize * self.w + x as usize;
        if self.flag[o] == Flag::Inside {
            f64::INFINITY
        } else {
            self.t[o]
        }
    }

    fn solve(&self, x: usize, y: usize) -> f64 {
        let (x, y) = (x as isize, y as isize);
        let l = self.t_at(x - 1, y);
        let r = self.t_at(x + 1, y);
        let u = self.t_at(x, y - 1);
        let d = self.t_at(x, y + 1);
        eikonal(l, u).min(eikonal(r, u)).min(eikonal(l, d)).min(eikonal(r, d))
    }

    fn known(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && x < self.w as isize
            && y < self.h as isize
            && self.flag[y as usize * self.w + x as usize] != Flag::Inside
    }

    /// Finite-difference gradient along one axis from non-inside neighbours.
    fn diff(&self, x: isize, y: isize, dx: isize, dy: isize, value: impl Fn(usize) -> f64) -> f64 {
        let at = |x: isize, y: isize| value(y as usize * self.w + x as usize);
        let (p, m) = (self.known(x + dx, y + dy), self.known(x - dx, y - dy));
        match (p, m) {
            (true, true) => (at(x + dx, y + dy) - at(x - dx, y - dy)) / 2.0,
            (true, false) if self.known(x, y) => at(x + dx, y + dy) - at(x, y),
            (false, true) if self.known(x, y) => at(x, y) - at(x - dx, y - dy),
            _ => 0.0,
        }
    }

    fn inpaint(&mut self, x: usize, y: usize) {
        let (xi, yi) = (x as isize, y as isize);
        let o = y * self.w + x;
        let t = &self.t;
        let gx = self.diff(xi, yi, 1, 0, |k| t[k]);
        let gy = self.diff(xi, yi, 0, 1, |k| t[k]);
        let gn = (gx * gx + gy * gy).sqrt();
        let (nx, ny) = if gn > 0.0 { (gx / gn, gy / gn) } else { (0.0, 0.0) };
        let r = self.radius as isize;
        let mut acc = vec![0.0f64; self.ch];
        let mut wsum = 0.0;
        for qy in (yi - r).max(0)..=(yi + r).min(self.h as isize - 1) {
            for qx in (xi - r).max(0)..=(xi + r).min(self.w as isize - 1) {
                let q = qy as usize * self.w + qx as usize;
                if self.flag[q] == Flag::Inside || q == o {
                    continue;
                }
                let (rx, ry) = ((xi - qx) as f64, (yi - qy) as f64);
                let len2 = rx * rx + ry * ry;
                if len2 > (r * r) as f64 {
                    continue;
                }
                let len = len2.sqrt();
                let dir = ((rx * nx + ry * ny) / len).abs().max(INPAINT_EPS);
                let dst = 1.0 / len2;
                let lev = 1.0 / (1.0 + (self.t[q] - self.t[o]).abs());
                let w = dir * dst * lev;
                for c in 0..self.ch {
                    let img = &self.img;
                    let ch = self.ch;
                    let ix = self.diff(qx, qy, 1, 0, |k| img[k * ch + c] as f64);
                    let iy = self.diff(qx, qy, 0, 1, |k| img[k * ch + c] as f64);
                    acc[c] += w * (self.img[q * self.ch + c] as f64 + ix * rx + iy * ry);
                }
                wsum += w;
            }
        }
        if wsum > 0.0 {
            for c in 0..self.ch {
                self.img[o * self.ch + c] = (acc[c] / wsum) as f32;
            }
        }
    }
}

/// Fills texels with `valid == false` by fast marching from the boundary
/// inward, each weighted by direction, distance and level-set agreement with
/// its known neighbours within `radius`. Valid texels are left untouched.
pub fn inpaint_fmm(img: &Raster, valid: &[bool], radius: usize) -> Result<Raster> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    if valid.len() != w * h {
        return Err(AuvError::Data("validity mask does not match the image".into()));
    }
    if radius == 0 {
        return Err(AuvError::Config("inpainting radius must be at least 1".into()));
    }
    if !valid.iter().any(|&v| v) {
        return Err(AuvError::Data("cannot inpaint an image without valid texels".into()));
    }
    let mut fmm = Fmm {
        w,
        h,
        ch,
        img: img.data().to_vec(),
        flag: valid.iter().map(|&v| if v { Flag::Known } else { Flag::Inside }).collect(),
        t: valid.iter().map(|&v| if v { 0.0 } else { 1e6 }).collect(),
        radius,
    };
    let mut heap = BinaryHeap::new();
    for y in 0..h {
        for x in 0..w {
            let o = y * w + x;
            if !valid[o] {
                continue;
            }
            let touches_hole = [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)].iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize && !valid[ny as usize * w + nx as usize]
            });
            if touches_hole {
                fmm.flag[o] = Flag::Band;
                heap.push(HeapItem(0.0, o));
            }
        }
    }
    while let Some(HeapItem(_, o)) = heap.pop() {
        if fmm.flag[o] == Flag::Known {
            continue;
        }
        fmm.flag[o] = Flag::Known;
        let (x, y) = ((o % w) as isize, (o / w) as isize);
        for (dx, dy) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let n = ny as usize * w + nx as usize;
            if fmm.flag[n] != Flag::Inside {
                continue;
            }
            fmm.t[n] = fmm.solve(nx as usize, ny as usize);
            fmm.inpaint(nx as usize, ny as usize);
            fmm.flag[n] = Flag::Band;
            heap.push(HeapItem(fmm.t[n], n));
        }
    }
    let mut out = Raster::from_data(w, h, ch, fmm.img)?;
    // Valid texels must survive bit-exactly regardless of float round trips.
    for (o, &v) in valid.iter().enumerate() {
        if v {
            out.data_mut()[o * ch..(o + 1) * ch].copy_from_slice(&img.data()[o * ch..(o + 1) * ch]);
        }
    }
    Ok(out)
}

/// Per-face texture by majority vote of the vertex routes (ties to the lower
/// index) and the number of faces whose vertices disagree.
pub fn face_textures(triangles: &[[usize; 3]], vertex_routes: &[usize], k: usize) -> (Vec<usize>, usize) {
    let mut seams = 0;
    let faces = triangles
        .iter()
        .map(|tri| {
            let r = tri.map(|v| vertex_routes[v]);
            if r[0] != r[1] || r[1] != r[2] {
                seams += 1;
            }
            let mut counts = vec![0usize; k];
            for x in r {
                counts[x] += 1;
            }
            let mut best = 0;
            for (i, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    (faces, seams)
}

/// A mesh with per-vertex atlas UVs, per-face texture indices and K rasters.
#[derive(Clone, Debug, PartialEq)]
pub struct TexturedExport {
    pub mesh: TexturedMesh,
    pub textures: Vec<Raster>,
    pub seam_faces: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportSidecar {
    #[serde(rename = "R")]
    pub resolution: usize,
    pub uv_window: [f64; 2],
    #[serde(rename = "K")]
    pub k: usize,
    pub seam_faces: usize,
}

impl TexturedExport {
    pub fn face_texture(&self, f: usize) -> usize {
        self.mesh.material_ids[f]
    }

    pub fn sidecar(&self) -> ExportSidecar {
        ExportSidecar {
            resolution: self.textures.first().map_or(0, Raster::width),
            uv_window: [-UV_WINDOW, UV_WINDOW],
            k: self.textures.len(),
            seam_faces: self.seam_faces,
        }
    }

    /// Writes `{stem}.obj`, `{stem}.mtl`, `{stem}_tex{k}.png` and `{stem}.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let obj = write_obj_bundle(dir, stem, &self.mesh, &self.textures, Some(&self.mesh.material_ids))?;
        crate::io::write_json(&dir.join(format!("{stem}.json")), &self.sidecar())?;
        Ok(obj)
    }

    /// Reloads an export written by [`TexturedExport::write`].
    pub fn load(obj: &Path) -> Result<Self> {
        let mesh = load_textured_mesh(obj)?;
        let sidecar: ExportSidecar = crate::config::load_json(&obj.with_extension("json"))?;
        let maps = parse_mtl(&obj.with_extension("mtl"))?;
        let textures = (0..sidecar.k)
            .map(|k| {
                let path = maps
                    .get(&material_name(k))
                    .ok_or_else(|| AuvError::Data(format!("material {} missing", material_name(k))))?;
                Raster::load_png(path)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mesh = mesh;
        mesh.texture = textures.first().cloned();
        Ok(Self {
            mesh,
            textures,
            seam_faces: sidecar.seam_faces,
        })
    }
}

fn material_name(k: usize) -> String {
    format!("tex{k}")
}

/// Writes an OBJ/MTL pair and one PNG per texture. Faces use texture
/// `face_tex[f]`, or texture 0 when `face_tex` is `None`. Every material is
/// declared before the first face so material order equals texture order on
/// reload. Returns the OBJ path.
pub fn write_obj_bundle(
    dir: &Path,
    stem: &str,
    mesh: &TexturedMesh,
    textures: &[Raster],
    face_tex: Option<&[usize]>,
) -> Result<PathBuf> {
    if let Some(ft) = face_tex {
        if ft.len() != mesh.triangles.len() || ft.iter().any(|&k| k >= textures.len()) {
            return Err(AuvError::Data("face texture indices do not match the mesh".into()));
        }
    }
    std::fs::create_dir_all(dir)?;
    let mut mtl = String::new();
    for (k, tex) in textures.iter().enumerate() {
        let png = format!("{stem}_tex{k}.png");
        tex.save_png(&dir.join(&png))?;
        let _ = writeln!(mtl, "newmtl {}\nKd 1 1 1\nmap_Kd {png}\n", material_name(k));
    }
    crate::io::write_text(&dir.join(format!("{stem}.mtl")), &mtl)?;

    let mut s = format!("mtllib {stem}.mtl\n");
    for p in &mesh.positions {
        let _ = writeln!(s, "v {} {} {}", p[0], p[1], p[2]);
    }
    for t in &mesh.uvs {
        let _ = writeln!(s, "vt {} {}", t[0], t[1]);
    }
    for k in 0..textures.len() {
        let _ = writeln!(s, "usemtl {}", material_name(k));
    }
    let mut current = textures.len().saturating_sub(1);
    for (f, tri) in mesh.triangles.iter().enumerate() {
        let k = face_tex.map_or(0, |ft| ft[f]);
        if k != current && !textures.is_empty() {
            let _ = writeln!(s, "usemtl {}", material_name(k));
            current = k;
        }
        match mesh.uv_triangles.get(f) {
            Some(t) => {
                let _ = writeln!(
                    s,
                    "f {}/{} {}/{} {}/{}",
                    tri[0] + 1,
                    t[0] + 1,
                    tri[1] + 1,
                    t[1] + 1,
                    tri[2] + 1,
                    t[2] + 1
                );
            }
            None => {
                let _ = writeln!(s, "f {} {} {}", tri[0] + 1, tri[1] + 1, tri[2] + 1);
            }
        }
    }
    let obj = dir.join(format!("{stem}.obj"));
    crate::io::write_text(&obj, &s)?;
    Ok(obj)
}

/// Builds an export of `mesh` under `model`: per-vertex UVs and routes are
/// evaluated on the normalized mesh, geometry keeps its original frame, and
/// textures are quantized to what the PNGs will hold.
pub fn export_textured(
    mesh: &TexturedMesh,
    model: &AuvModel,
    input: &Tensor<f32>,
    textures: &[Raster],
) -> Result<TexturedExport> {
    let k = model.config.num_generators();
    if textures.len() != k {
        return Err(AuvError::Data(format!("model has {k} generators but {} textures given", textures.len())));
    }
    let normalized = normalize_to_unit_box(mesh)?;
    let normals = normalized.vertex_normals();
    let (uvs, routes, _) = route_points(model, input, &normalized.positions, &normals)?;
    let (faces, seam_faces) = face_textures(&mesh.triangles, &routes, k);
    let out = TexturedMesh {
        positions: mesh.positions.clone(),
        triangles: mesh.triangles.clone(),
        uvs: uvs.iter().map(|q| [uv_to_atlas(q[0]), uv_to_atlas(q[1])]).collect(),
        uv_triangles: mesh.triangles.clone(),
        material_ids: faces,
        texture: None,
    };
    let textures: Vec<Raster> = textures.iter().map(Raster::quantized).collect();
    Ok(TexturedExport {
        mesh: TexturedMesh {
            texture: textures.first().cloned(),
            ..out
        },
        textures,
        seam_faces,
    })
}

/// `a` with its rasters replaced by `textures`; geometry, UVs and face
/// indices are untouched.
pub fn transfer_texture(a: &TexturedExport, textures: &[Raster]) -> Result<TexturedExport> {
    if textures.len() != a.textures.len() {
        return Err(AuvError::Data(format!(
            "texture count mismatch: export has {}, got {}",
            a.textures.len(),
            textures.len()
        )));
    }
    let mut out = a.clone();
    out.textures = textures.to_vec();
    out.mesh.texture = textures.first().cloned();
    Ok(out)
}
