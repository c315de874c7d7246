//! Binary checkpoints: byte-identical round trip, merge, and corruption
//! reported with a byte offset.

use lomoe::checkpoint;
use lomoe::gating::{add_expert, ExpertInit};
use lomoe::model::{Mode, ModelConfig, SegBackbone};
use lomoe::train::Session;
use lomoe::Rng;

fn main() -> lomoe::Result<()> {
    let mut model = SegBackbone::new(ModelConfig::tiny(), Mode::Task, None, 2)?;
    add_expert(&mut model, ExpertInit::Fresh, &Rng::new(2))?;
    model.add_head_rows(1, &[0, 1])?;
    let session = Session::new(model, 2);
    let bytes = checkpoint::to_bytes(&session)?;
    let again = checkpoint::to_bytes(&checkpoint::from_bytes(&bytes, "mem")?)?;
    println!("{} bytes, round trip identical: {}", bytes.len(), bytes == again);

    let merged = checkpoint::merge(&session, 1)?;
    println!("merged: {} adapters, {} parameters", merged.model.experts(), merged.model.total_param_count());

    let mut bad = bytes.clone();
    bad[5] = 9;
    match checkpoint::from_bytes(&bad, "mem") {
        Err(e) => println!("corrupt version: {e}"),
        Ok(_) => println!("corruption went unnoticed"),
    }
    match checkpoint::from_bytes(&bytes[..bytes.len() - 3], "mem") {
        Err(e) => println!("truncated: {e}"),
        Ok(_) => println!("truncation went unnoticed"),
    }
    Ok(())
}
