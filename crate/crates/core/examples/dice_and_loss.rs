//! Dice score, pooled Dice counts and the cross-entropy + soft-Dice loss.

use lomoe::train::{dice_score, seg_loss, DiceCounts};
use lomoe::Tensor;

fn main() -> lomoe::Result<()> {
    let truth = vec![0u16, 1, 1, 2, 2, 2, 0, 0, 1];
    let pred = vec![0u16, 1, 2, 2, 2, 0, 0, 1, 1];
    for c in [1, 2] {
        println!("class {c}: dice {:.4}", dice_score(&pred, &truth, c)?);
    }
    let mut counts = DiceCounts::default();
    counts.add(&pred, &truth, &[0, 1, 2]);
    counts.add(&truth, &truth, &[0, 1, 2]);
    println!("pooled over two images: class 1 {:.4}, class 2 {:.4}", counts.dice(1), counts.dice(2));

    let classes = [0u16, 1, 2];
    let uniform = Tensor::full([truth.len(), 3], 1.0f32 / 3.0);
    let onehot = Tensor::new(
        [truth.len(), 3],
        truth.iter().flat_map(|&t| (0..3).map(move |c| if c == t { 1.0 } else { 0.0 })).collect(),
    )?;
    println!("loss of uniform probabilities {:.4}", seg_loss(&uniform, &truth, &classes)?);
    println!("loss of the one-hot truth     {:.4}", seg_loss(&onehot, &truth, &classes)?);
    Ok(())
}
