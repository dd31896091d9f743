//! Bakes colored samples of a planar patch into a texture through a slightly
//! warped UV map, then fills the empty texels by fast-marching inpainting.
//!
//! cargo run --release --example bake_inpaint -- [samples] [out_dir]

use std::f64::consts::TAU;
use std::path::PathBuf;

use auvnet::baker::{atlas_to_uv, bake_samples};
use auvnet::eval::psnr_masked;
use auvnet::geometry::sample_surface;
use auvnet::raster::Raster;
use auvnet::synthdata::{make_textured_plane, plane_color};

const WARP: f64 = 0.01;

fn main() -> auvnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let samples: usize = args.next().map_or(60_000, |s| s.parse().expect("samples"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/bake".into()));
    std::fs::create_dir_all(&out)?;
    let r = 256;

    let plane = make_textured_plane(256, 8);
    let cloud = sample_surface(&plane, samples, 0)?;
    let uvs: Vec<[f64; 2]> = cloud
        .positions
        .iter()
        .map(|p| [p[0] + WARP * (TAU * p[1]).sin(), p[1] + WARP * (TAU * p[0]).sin()])
        .collect();
    let tex = bake_samples(&uvs, &cloud.colors, &vec![0; uvs.len()], 1, r)?.remove(0);
    println!("{} of {} texels received samples", tex.valid_count(), r * r);

    let filled = tex.inpainted(5)?;
    let mut reference = Raster::new(r, r, 3);
    let mut inside = vec![false; r * r];
    for j in 0..r {
        for i in 0..r {
            let q = [atlas_to_uv((i as f64 + 0.5) / r as f64), atlas_to_uv((j as f64 + 0.5) / r as f64)];
            let mut p = q;
            for _ in 0..50 {
                p = [q[0] - WARP * (TAU * p[1]).sin(), q[1] - WARP * (TAU * p[0]).sin()];
            }
            reference.pixel_mut(i, r - 1 - j).copy_from_slice(&plane_color(p[0] + 0.5, p[1] + 0.5));
            inside[(r - 1 - j) * r + i] = p[0].abs() < 0.49 && p[1].abs() < 0.49;
        }
    }
    let valid_inside: Vec<bool> = tex.validity().iter().zip(&inside).map(|(a, b)| *a && *b).collect();
    println!("PSNR on baked texels {:.2} dB", psnr_masked(&tex.raster, &reference, &valid_inside)?);
    println!("PSNR after inpainting {:.2} dB", psnr_masked(&filled, &reference, &inside)?);

    tex.raster.save_png(&out.join("baked.png"))?;
    filled.save_png(&out.join("inpainted.png"))?;
    reference.save_png(&out.join("reference.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}
