//! Prompt-conditioned gate weights and top-1 expert choice per token.

use lomoe::gating::{class_gate_weights, top1_route, EmbeddingProvider, HashEmbedder};
use lomoe::model::GateComposition;
use lomoe::{Rng, Tensor};

fn main() -> lomoe::Result<()> {
    let embed = HashEmbedder::new(16);
    let prompts = ["abdominal organs", "liver lesion", "vessels"];
    let taus: Vec<Tensor> = prompts.iter().map(|p| embed.embed(p)).collect::<lomoe::Result<_>>()?;
    let mut rng = Rng::new(5);
    let tokens = Tensor::randn([6, 32], &mut rng, 1.0)?;
    let w_g = Tensor::randn([32, 16], &mut rng, 0.3)?;
    for comp in [GateComposition::InputProjection, GateComposition::EmbeddingProjection] {
        let gw = class_gate_weights(&tokens, &w_g, &taus, comp)?;
        println!("{comp:?}");
        for s in 0..6 {
            let row: Vec<f64> = gw.row(s).iter().map(|&v| v as f64).collect();
            let e = top1_route(&row)?;
            println!("  token {s}: weights {:?} -> expert {e}", row.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
        }
    }
    Ok(())
}
