//! Stacked low-rank adapters on one linear map, and folding them into W0.

use lomoe::lora::LoraLinear;
use lomoe::{Rng, Tensor};

fn main() -> lomoe::Result<()> {
    let mut lin = LoraLinear::new("demo", Tensor::eye(2))?;
    let mut rng = Rng::new(1);
    lin.add_adapter(1, &mut rng)?;
    let ad = &mut lin.adapters_mut()[0];
    ad.b.value = Tensor::matrix(2, 1, vec![1.0, 0.0])?;
    ad.a.value = Tensor::matrix(1, 2, vec![0.0, 1.0])?;
    let x = Tensor::matrix(1, 2, vec![1.0, 2.0])?;
    println!("base only      : {:?}", lin.apply(&x, 0)?.data());
    println!("with expert 1  : {:?}", lin.apply(&x, 1)?.data());
    println!("merged W0 + BA : {:?}", lin.merge_to_dense(1)?.data());

    let mut big = LoraLinear::random("big", 16, 16, &mut rng)?;
    for _ in 0..3 {
        big.freeze_all();
        big.add_adapter(4, &mut rng)?;
        for v in big.adapters_mut().last_mut().unwrap().b.value.data_mut() {
            *v = (rng.normal() * 0.1) as f32;
        }
    }
    let x = Tensor::randn([5, 16], &mut rng, 1.0)?;
    let merged = big.merged(3)?;
    let diff = big.apply(&x, 3)?.max_abs_diff(&merged.apply(&x, 0)?);
    println!("stack of 3 experts vs merged dense: max abs diff {diff:.2e}");
    println!("trainable {} of {} parameters", big.trainable_param_count(), big.param_count());
    Ok(())
}
