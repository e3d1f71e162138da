//! Reverse-mode differentiation checked against central differences.

use spikesal::grad::{central_difference, relative_error, Tape, Tensor};

fn f(x: &Tensor, w: &Tensor) -> anyhow::Result<(f64, Tensor)> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let wv = tape.constant(w.clone());
    // sum(sigmoid(x ⊙ w) · x)
    let y = xv.mul(wv)?.sigmoid().mul(xv)?.sum();
    tape.backward(y)?;
    Ok((y.value().item(), xv.grad().expect("leaf requires grad")))
}

fn main() -> anyhow::Result<()> {
    let x = Tensor::from_fn(&[2, 3], |i| 0.3 * i as f64 - 0.7);
    let w = Tensor::from_fn(&[2, 3], |i| 1.0 - 0.25 * i as f64);
    let (value, analytic) = f(&x, &w)?;
    let numeric = central_difference(&x, 1e-5, None, |x| f(x, &w).unwrap().0);
    println!("f(x)      = {value:.6}");
    println!("analytic  = {:?}", analytic.data().iter().map(|g| format!("{g:.6}")).collect::<Vec<_>>());
    println!("numeric   = {:?}", numeric.iter().map(|g| format!("{g:.6}")).collect::<Vec<_>>());
    println!("rel error = {:.2e}", relative_error(analytic.data(), &numeric));
    Ok(())
}
