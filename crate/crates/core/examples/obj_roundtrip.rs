//! Writes a textured mesh as OBJ + MTL + PNG and reads it back.
//!
//! cargo run --release --example obj_roundtrip -- [out_dir]

use std::path::PathBuf;

use auvnet::baker::write_obj_bundle;
use auvnet::geometry::load_textured_mesh;
use auvnet::synthdata::make_head_mesh;

fn main() -> auvnet::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/obj".into()));
    let head = make_head_mesh(3, 128).mesh;
    let texture = head.texture.clone().expect("synthetic heads are textured");
    let obj = write_obj_bundle(&out, "head", &head, &[texture], None)?;

    let back = load_textured_mesh(&obj)?;
    let max_dv = head
        .positions
        .iter()
        .zip(&back.positions)
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
        .fold(0.0, f64::max);
    let max_dt = head
        .texture
        .as_ref()
        .zip(back.texture.as_ref())
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max));
    println!(
        "{} vertices, {} faces; max position change {max_dv:.1e}; max texel change {:?}",
        back.positions.len(),
        back.triangles.len(),
        max_dt
    );
    println!("wrote {}", obj.display());
    Ok(())
}
