//! Every differentiable tape op against central finite differences in f64.
//!
//! cargo run --release --example gradient_check -- [cases]

use auv_tensor::gradcheck::op_suite;

fn main() -> auv_tensor::Result<()> {
    let cases = std::env::args().nth(1).map_or(100, |s| s.parse().expect("cases"));
    let reports = op_suite(cases, 7)?;
    for r in &reports {
        let verdict = if r.max_relative_error < 1e-4 { "ok" } else { "FAIL" };
        println!("{:>12}  {:>4} cases  worst rel. error {:.2e}  {verdict}", r.name, r.cases, r.max_relative_error);
    }
    Ok(())
}
