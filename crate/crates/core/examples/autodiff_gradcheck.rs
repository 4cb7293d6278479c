//! Records a small network on the tape, runs the reverse pass, and compares
//! the result with central differences.
//!
//! ```text
//! cargo run --example autodiff_gradcheck
//! ```

use arbench::tensor::finite_diff_check;
use arbench::{Tape, Tensor};

fn main() -> arbench::Result<()> {
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?;
    let w = Tensor::new(vec![3, 2], vec![0.2, -0.4, 1.1, 0.6, -0.3, 0.9])?;

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.constant(w.clone());
    let h = tape.matmul(xv, wv)?;
    let h = tape.tanh(h)?;
    let lp = tape.log_softmax(h)?;
    let loss = tape.sum(lp)?;
    let grads = tape.backward(loss)?;
    println!("loss      {:.6}", tape.value(loss).item()?);
    println!("d loss/dx {:?}", grads.get(xv).expect("leaf gradient").data());

    let err = finite_diff_check(
        |t, xv| {
            let wv = t.constant(w.clone());
            let h = t.matmul(xv, wv)?;
            let h = t.tanh(h)?;
            let lp = t.log_softmax(h)?;
            t.sum(lp)
        },
        &x,
        1e-5,
    )?;
    println!("worst relative error against central differences: {err:.2e}");
    Ok(())
}
