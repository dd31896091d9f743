//! The four-way chair partition: masks composed from a predicted mask and the
//! agreement between predicted and true normals, and the prior targets that
//! initialize them.
//!
//! cargo run --release --example chair_masks -- [points]

use auv_tensor::Tensor;
use auvnet::losses::{chair_seat_height, prior_targets};
use auvnet::networks::{shape_config, AuvModel, Category};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> auvnet::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(10_000, |s| s.parse().expect("points"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let points: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
        .collect();
    let normals: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0f64..1.0)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            v.map(|x| x / l)
        })
        .collect();

    let model = AuvModel::new(shape_config(Category::Chair, 16, 16), 0)?;
    let grid = Tensor::filled(&[4, 16, 16, 16], 0.5f32);
    let flat = |v: &[[f64; 3]]| Tensor::new(vec![n, 3], v.iter().flat_map(|p| p.map(|x| x as f32)).collect());
    let eval = model.evaluate(&grid, &flat(&points)?, Some(&flat(&normals)?))?;
    let masks = eval.masks.expect("chair models have masks");
    let worst = masks
        .data()
        .chunks(4)
        .map(|m| (m.iter().sum::<f32>() - 1.0).abs())
        .fold(0.0f32, f32::max);
    let share: Vec<f32> = (0..4).map(|k| masks.data().iter().skip(k).step_by(4).sum::<f32>() / n as f32).collect();
    println!("untrained masks: mean share per part {share:.3?}, max |sum - 1| {worst:.1e}");

    let targets = prior_targets(Category::Chair, &points, &normals)?;
    let s = targets.masks.expect("chair prior has mask targets");
    let counts: Vec<usize> = (0..4)
        .map(|k| s.data().iter().skip(k).step_by(4).filter(|&&v| v == 1.0).count())
        .collect();
    println!("seat height {:.3}, prior part sizes {counts:?}", chair_seat_height(&points));
    Ok(())
}
