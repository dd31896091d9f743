//! Central finite-difference oracle and the per-op gradient-check suite.
//!
//! Only forward evaluations feed the numerical estimate, so it is independent
//! of the backward rules it is compared against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Numerical gradient of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Graph builder: receives the tape and one leaf per input, returns a scalar.
pub type GraphFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares backward against central differences for the scalar graph built
/// by `build` over `inputs`. Every input is differentiated. Returns the
/// relative error over the concatenated gradient.
pub fn check_graph(inputs: &[Tensor<f64>], build: &GraphFn<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| grads.wrt(v).into_data())
        .collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let eval = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let mut offset = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let data = x[offset..offset + t.len()].to_vec();
                offset += t.len();
                tape.constant(Tensor::new(t.shape().to_vec(), data).expect("same shape"))
            })
            .collect();
        let loss = build(&mut tape, &vars).expect("graph built once already");
        tape.value(loss).item()
    };
    let numeric = central_difference(eval, &flat, DEFAULT_STEP);
    Ok(relative_error(&analytic, &numeric))
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_relative_error: f64,
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero, so kinks of
/// piecewise ops are never straddled by a finite-difference probe.
fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// Reduces an arbitrary tensor to a scalar through a fixed random weighting,
/// so every output element carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, weights: &Tensor<f64>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(weights.clone().reshaped(&shape)?);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

type Case = (&'static str, Vec<Vec<usize>>, Vec<usize>, Box<GraphFn<'static>>);

fn suite() -> Vec<Case> {
    fn case(
        name: &'static str,
        inputs: &[&[usize]],
        out: &[usize],
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Case {
        (
            name,
            inputs.iter().map(|s| s.to_vec()).collect(),
            out.to_vec(),
            Box::new(f),
        )
    }
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], &[3, 2], |t, v| t.matmul(v[0], v[1])),
        case("matmul_ta", &[&[4, 3], &[4, 2]], &[3, 2], |t, v| t.matmul_t(v[0], true, v[1], false)),
        case("matmul_tb", &[&[3, 4], &[2, 4]], &[3, 2], |t, v| t.matmul_t(v[0], false, v[1], true)),
        case("matmul_tab", &[&[4, 3], &[2, 4]], &[3, 2], |t, v| t.matmul_t(v[0], true, v[1], true)),
        case("add_bias", &[&[3, 4], &[4]], &[3, 4], |t, v| t.add_bias(v[0], v[1])),
        case("add", &[&[2, 3], &[2, 3]], &[2, 3], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], &[2, 3], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], &[2, 3], |t, v| t.mul(v[0], v[1])),
        case("mul_col", &[&[4, 3], &[4, 1]], &[4, 3], |t, v| t.mul_col(v[0], v[1])),
        case("affine", &[&[2, 3]], &[2, 3], |t, v| Ok(t.affine(v[0], -1.7, 0.3))),
        case("leaky_relu", &[&[3, 3]], &[3, 3], |t, v| Ok(t.leaky_relu(v[0], 0.02))),
        case("sigmoid", &[&[3, 3]], &[3, 3], |t, v| Ok(t.sigmoid(v[0]))),
        case("tanh", &[&[3, 3]], &[3, 3], |t, v| Ok(t.tanh(v[0]))),
        case("abs", &[&[3, 3]], &[3, 3], |t, v| Ok(t.abs(v[0]))),
        case("square", &[&[3, 3]], &[3, 3], |t, v| Ok(t.square(v[0]))),
        case("mse", &[&[3, 2], &[3, 2]], &[1], |t, v| t.mse(v[0], v[1])),
        case("sum", &[&[2, 5]], &[1], |t, v| Ok(t.sum(v[0]))),
        case("mean", &[&[2, 5]], &[1], |t, v| Ok(t.mean(v[0]))),
        case("row_sum", &[&[4, 3]], &[4, 1], |t, v| Ok(t.row_sum(v[0]))),
        case("row_norm", &[&[4, 3]], &[4, 1], |t, v| Ok(t.row_norm(v[0]))),
        case("concat_cols", &[&[3, 2], &[3, 1], &[3, 3]], &[3, 6], |t, v| t.concat_cols(v)),
        case("slice_cols", &[&[3, 5]], &[3, 2], |t, v| t.slice_cols(v[0], 1, 3)),
        case("reshape", &[&[2, 6]], &[3, 4], |t, v| t.reshape(v[0], &[3, 4])),
        case("repeat_rows", &[&[1, 3]], &[4, 3], |t, v| t.repeat_rows(v[0], 4)),
        case("gather_rows", &[&[4, 2]], &[5, 2], |t, v| t.gather_rows(v[0], &[3, 0, 3, 1, 2])),
        case("conv2d", &[&[2, 5, 6], &[3, 2, 3, 3], &[3]], &[3, 3, 3], |t, v| {
            t.conv2d(v[0], v[1], v[2], 2, 1)
        }),
        case("conv3d", &[&[2, 4, 4, 4], &[2, 2, 2, 2, 2], &[2]], &[2, 2, 2, 2], |t, v| {
            t.conv3d(v[0], v[1], v[2], 2, 0)
        }),
    ]
}

/// Runs `cases` randomized finite-difference checks for every differentiable
/// op on the tape.
pub fn op_suite(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (name, in_shapes, out_shape, build) in suite() {
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let inputs: Vec<Tensor<f64>> =
                in_shapes.iter().map(|s| random_tensor(&mut rng, s, 1e-2)).collect();
            let weights = random_tensor(&mut rng, &out_shape, 0.1);
            let err = check_graph(&inputs, &|t, v| {
                let out = build(t, v)?;
                weighted_sum(t, out, &weights)
            })?;
            worst = worst.max(err);
        }
        reports.push(CheckReport {
            name,
            cases,
            max_relative_error: worst,
        });
    }
    Ok(reports)
}
