//! Reverse-mode differentiation on the tape: a two-layer perceptron.

use lomoe::{Rng, Tape, Tensor};

fn main() -> lomoe::Result<()> {
    let mut rng = Rng::new(0);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?)?;
    let w1 = tape.param("w1", Tensor::new([3, 4], (0..12).map(|_| rng.normal()).collect())?, true)?;
    let w2 = tape.param("w2", Tensor::new([4, 1], (0..4).map(|_| rng.normal()).collect())?, true)?;
    let h = tape.matmul(x, w1)?;
    let h = tape.gelu(h)?;
    let y = tape.matmul(h, w2)?;
    let sq = tape.mul(y, y)?;
    let loss = tape.sum_all(sq)?;
    println!("loss = {:.6}", tape.value(loss).data()[0]);
    let grads = tape.backward(loss)?;
    for (name, g) in grads.params() {
        println!("d loss / d {name} = {:?}", g.data().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    }
    Ok(())
}
