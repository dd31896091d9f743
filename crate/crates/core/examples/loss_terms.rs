//! Evaluates each loss term on small hand-made inputs: reconstruction,
//! distance-preserving smoothness, the category priors and their weighted
//! total.
//!
//! cargo run --release --example loss_terms

use auv_tensor::{Tape, Tensor};
use auvnet::losses::{
    neighbors_brute_force, prior_loss, prior_targets, recon_losses, smoothness_loss, total_loss, LossWeights,
    DEFAULT_SIGMA,
};
use auvnet::networks::Category;

fn main() -> auvnet::Result<()> {
    let mut tape = Tape::<f64>::new();

    let mut pred = vec![0.0; 9];
    pred[0] = 1.0;
    let pred = tape.constant(Tensor::new(vec![1, 9], pred)?);
    let zero = tape.constant(Tensor::zeros(&[1, 3]));
    let mut terms = recon_losses(&mut tape, pred, Some(zero), Some(zero), Some(zero))?;
    println!("L_c {:.6}", tape.value(terms.color.unwrap()).item());

    // Two neighbours 0.01 apart pulled to 0.02 in UV, one far point ignored.
    let points = [[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [0.5, 0.5, 0.5]];
    let nb = neighbors_brute_force(&points, &[0, 1, 2], DEFAULT_SIGMA);
    let uv = tape.constant(Tensor::from_rows(&[[0.0, 0.0], [0.02, 0.0], [0.3, -0.7]])?);
    let ls = smoothness_loss(&mut tape, uv, &nb)?;
    println!("L_s {:.6} over {} pairs", tape.value(ls).item(), nb.pairs.len());
    terms.smooth = Some(ls);

    let head = prior_targets(Category::Head, &[[0.0; 3]], &[[0.0, 0.0, -1.0]])?;
    let uv = tape.constant(Tensor::from_rows(&[[0.5, 0.5]])?);
    let masks = tape.constant(Tensor::from_rows(&[[1.0, 0.0]])?);
    let lp = prior_loss(&mut tape, uv, Some(masks), &head)?;
    println!("head L_p {:.6}", tape.value(lp).item());
    terms.prior = Some(lp);

    let chair = prior_targets(
        Category::Chair,
        &[[0.05, 0.1, 0.0], [0.3, 0.1, 0.4], [-0.2, -0.4, 0.1]],
        &[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]],
    )?;
    println!("chair UV targets {:?}", chair.uv.data());
    println!("chair mask targets {:?}", chair.masks.as_ref().map(|m| m.data().to_vec()));

    for (name, w) in [
        ("stage 1", LossWeights::new(1.0, 0.5, 100.0, 100.0, 1.0)),
        ("stage 2", LossWeights::new(1.0, 0.5, 1.0, 1.0, 0.0)),
    ] {
        let total = total_loss(&mut tape, &terms, &w);
        println!("{name} total {:.6}", tape.value(total).item());
    }
    Ok(())
}
