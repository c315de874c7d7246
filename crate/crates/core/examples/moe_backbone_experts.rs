//! Segmentation backbone with per-task experts: appending an expert leaves
//! every earlier stack untouched.

use lomoe::gating::{add_expert, ExpertInit};
use lomoe::model::{Mode, ModelConfig, Routing, SegBackbone};
use lomoe::{Rng, Tensor};

fn main() -> lomoe::Result<()> {
    let config = ModelConfig::desk();
    let mut model = SegBackbone::new(config.clone(), Mode::Task, None, 7)?;
    let root = Rng::new(7);
    add_expert(&mut model, ExpertInit::Fresh, &root)?;
    model.add_head_rows(1, &[0, 1, 2])?;
    println!(
        "desk backbone: {} layers, d_model {}, rank {}; trainable {} / total {}",
        config.layers,
        config.d_model,
        config.rank,
        model.trainable_param_count(),
        model.total_param_count()
    );
    let mut rng = Rng::new(3);
    let image = Tensor::new([32, 32], (0..1024).map(|_| rng.uniform() as f32).collect())?;
    let rows = model.rows_of_step(1);
    let before = model.logits(&image, Routing::Stack(1), &rows)?.0;
    add_expert(&mut model, ExpertInit::Fresh, &root)?;
    model.add_head_rows(2, &[0, 3])?;
    let after = model.logits(&image, Routing::Stack(2), &rows)?.0;
    println!("experts {}, max abs change from the zero-init expert: {}", model.experts(), before.max_abs_diff(&after));
    let pred = model.predict(&image, Routing::Stack(2), &model.rows_of_step(2))?;
    println!("task-2 prediction covers {} pixels", pred.len());
    Ok(())
}
