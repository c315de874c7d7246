//! Nearest-centroid task identification from 8-shot support sets.

use lomoe::data::{gen_task_dataset, TaskSpec};
use lomoe::gating::{classify_task, PyramidHistogram, TaskRegistry};
use lomoe::Tensor;

fn main() -> lomoe::Result<()> {
    let ex = PyramidHistogram::default();
    let mut reg = TaskRegistry::new();
    let mut queries = Vec::new();
    for name in ["task-a", "task-b", "task-c"] {
        let spec = TaskSpec::named(name)?.with_counts(8, 0, 40);
        let ds = gen_task_dataset(&spec)?;
        let id = reg.register(name, &spec.classes, None)?;
        let support: Vec<Tensor> = ds.train.iter().map(|s| s.image.clone()).collect();
        reg.set_support(id, &support, &ex)?;
        queries.extend(ds.test.into_iter().map(|s| (id, s.image)));
    }
    let mut confusion = [[0usize; 3]; 3];
    for (truth, img) in &queries {
        confusion[truth - 1][classify_task(img, &reg, &ex)? - 1] += 1;
    }
    let correct: usize = (0..3).map(|i| confusion[i][i]).sum();
    println!("accuracy {correct}/{}", queries.len());
    for (i, row) in confusion.iter().enumerate() {
        println!("task {} -> {row:?}", i + 1);
    }
    Ok(())
}
