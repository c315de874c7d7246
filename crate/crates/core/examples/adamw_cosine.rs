//! AdamW on a quadratic under a warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;

use lomoe::train::{AdamW, AdamWConfig, Schedule};
use lomoe::{Param, Tensor};

fn main() -> lomoe::Result<()> {
    let schedule = Schedule::new(0.1, 0.0, 10, 150)?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    let mut p = Param::new("x", Tensor::matrix(1, 2, vec![3.0, -2.0])?, true);
    let target = [1.0f64, 0.5];
    for epoch in 0..150 {
        let lr = schedule.lr_at(epoch)?;
        let g: Vec<f64> = p.value.data().iter().zip(target).map(|(&x, t)| 2.0 * (x as f64 - t)).collect();
        let grads = BTreeMap::from([("x".to_string(), g)]);
        opt.step(&mut [&mut p], &grads, lr)?;
        if epoch % 25 == 0 || epoch == 149 {
            println!("epoch {epoch:2} lr {lr:.5} x = {:?}", p.value.data());
        }
    }
    Ok(())
}
