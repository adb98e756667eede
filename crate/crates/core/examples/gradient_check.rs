// Differentiate a temperature-scaled soft cross-entropy on the tape and
// compare against central finite differences.

use distillforge::autodiff::{finite_difference_check, Tape, Tensor};
use distillforge::distill::distillation_ce_loss;

/// Worst relative error between analytic and numeric gradients.
pub fn run_example() -> Result<f64, Box<dyn std::error::Error>> {
    let student = Tensor::new(vec![2, 4], vec![0.3, -1.2, 0.8, 0.1, 1.5, 0.2, -0.4, 0.9])?;
    let teacher = Tensor::new(vec![2, 4], vec![1.0, 0.0, -1.0, 0.5, -0.3, 2.0, 0.1, 0.0])?;
    Ok(finite_difference_check(
        |tape: &mut Tape<f64>, x| {
            let t = tape.constant(&teacher);
            distillation_ce_loss(tape, t, x, 2.0)
        },
        &student,
        1e-3,
    )?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let err = run_example()?;
    println!("max relative gradient error: {err:.2e}");
    Ok(())
}
