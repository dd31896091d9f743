//! Writes the two procedural datasets to disk: warped toy faces with their
//! homographies and landmarks, and textured heads with label sidecars.
//!
//! cargo run --release --example synthetic_data -- [out_dir]

use std::path::PathBuf;

use auvnet::synthdata::{make_head_mesh, write_head_dataset, write_toy_dataset};

fn main() -> auvnet::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/data".into()));
    write_toy_dataset(&out.join("toy"), 0, 16, 64, 0.15)?;
    write_head_dataset(&out.join("heads"), 0, 4, 256)?;

    let head = make_head_mesh(0, 256);
    let mut counts = [0usize; 3];
    for l in &head.vertex_labels {
        counts[l.index()] += 1;
    }
    println!(
        "head 0: {} vertices, {} faces, face/scalp/neck vertices {:?}",
        head.mesh.positions.len(),
        head.mesh.triangles.len(),
        counts
    );
    println!("skin {:?}, hair {:?}, eyes {:?}", head.style.skin, head.style.hair, head.style.eye);
    println!("wrote {}", out.display());
    Ok(())
}
