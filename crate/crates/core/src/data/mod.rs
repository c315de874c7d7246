//! Synthetic segmentation tasks, label-space bookkeeping and the on-disk
//! dataset format.

mod folder;
mod synth;

pub use folder::{load_folder_dataset, write_folder_dataset, FolderDataset, MANIFEST};
pub use synth::{
    gen_task_dataset, Geometry, Modality, Noise, ShapeKind, TaskDataset, TaskSpec, Texture,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image (`H x W`, values in `[0, 1]`) with its class-id mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Vec<u16>,
}

impl Sample {
    pub fn new(image: Tensor, mask: Vec<u16>) -> Result<Self> {
        let (h, w) = image.dims2()?;
        if mask.len() != h * w {
            return Err(Error::shape(format!("mask has {} ids for a {h}x{w} image", mask.len())));
        }
        Ok(Self { image, mask })
    }

    pub fn size(&self) -> (usize, usize) {
        self.image.dims2().expect("sample images are matrices")
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&c| c != 0).count() as f64 / self.mask.len() as f64
    }
}

/// `Y^t = Y^{t-1} ∪ C^t`, keeping insertion order. Background (0) may
/// repeat; any other shared id is an error.
pub fn accumulate_labels(prev: &[u16], new: &[u16]) -> Result<Vec<u16>> {
    let mut out = prev.to_vec();
    for &c in new {
        if out.contains(&c) {
            if c == 0 {
                continue;
            }
            return Err(Error::config(format!("class id {c} is already in the label space")));
        }
        out.push(c);
    }
    Ok(out)
}

/// Records which steps' samples a training loader handed out, and refuses
/// anything but the current step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccessLog {
    entries: Vec<(usize, usize)>,
}

impl AccessLog {
    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    /// True when every access during `step` came from `step` itself.
    pub fn only_step(&self, step: usize) -> bool {
        self.entries.iter().all(|&(s, _)| s == step)
    }
}

/// Training-data gate: holds every step's training split and yields only
/// the active step's samples.
#[derive(Debug, Default)]
pub struct StepLoader {
    splits: Vec<Vec<Sample>>,
    active: usize,
    log: AccessLog,
}

impl StepLoader {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the training split of the next step (1-based id returned).
    pub fn push_step(&mut self, samples: Vec<Sample>) -> usize {
        self.splits.push(samples);
        self.splits.len()
    }

    pub fn activate(&mut self, step: usize) -> Result<()> {
        if step == 0 || step > self.splits.len() {
            return Err(Error::State(format!("no training split for step {step}")));
        }
        self.active = step;
        self.log = AccessLog::default();
        Ok(())
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn len(&self, step: usize) -> usize {
        self.splits.get(step.wrapping_sub(1)).map_or(0, Vec::len)
    }

    pub fn is_empty(&self, step: usize) -> bool {
        self.len(step) == 0
    }

    /// Sample `index` of `step`; any step other than the active one is refused.
    pub fn get(&mut self, step: usize, index: usize) -> Result<&Sample> {
        if step != self.active {
            return Err(Error::State(format!(
                "training step {} may not read data of step {step}",
                self.active
            )));
        }
        let s = self.splits[step - 1]
            .get(index)
            .ok_or_else(|| Error::State(format!("step {step} has no sample {index}")))?;
        self.log.entries.push((step, index));
        Ok(s)
    }

    pub fn log(&self) -> &AccessLog {
        &self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_examples() {
        let organs: Vec<u16> = (0..=13).collect();
        let y = accumulate_labels(&organs, &[14]).unwrap();
        assert_eq!(y.len(), 15);
        assert_eq!(accumulate_labels(&[], &[0, 3]).unwrap(), vec![0, 3]);
        assert_eq!(accumulate_labels(&y, &[]).unwrap(), y);
        assert_eq!(accumulate_labels(&[0, 1], &[0, 2]).unwrap(), vec![0, 1, 2]);
        assert!(matches!(accumulate_labels(&[0, 1], &[1]), Err(Error::Config(_))));
    }

    #[test]
    fn loader_refuses_other_steps() {
        let s = Sample::new(Tensor::zeros([2, 2]), vec![0; 4]).unwrap();
        let mut l = StepLoader::new();
        l.push_step(vec![s.clone()]);
        l.push_step(vec![s]);
        l.activate(2).unwrap();
        assert!(matches!(l.get(1, 0), Err(Error::State(_))));
        l.get(2, 0).unwrap();
        assert!(l.log().only_step(2));
        assert_eq!(l.log().entries(), &[(2, 0)]);
    }
}
