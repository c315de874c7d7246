use crate::error::{Error, Result};
use crate::gating::normalise;
use crate::tensor::Tensor;

/// Image descriptor used by the task classifier.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, image: &Tensor) -> Result<Vec<f64>>;
}

/// Average-pool pyramid (cells centred on 0.5) concatenated with an
/// intensity histogram. Each part is unit-normalised before concatenation
/// so both carry equal weight.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidHistogram {
    pub levels: Vec<usize>,
    pub bins: usize,
}

impl Default for PyramidHistogram {
    fn default() -> Self {
        Self { levels: vec![1, 2, 4], bins: 64 }
    }
}

impl FeatureExtractor for PyramidHistogram {
    fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        let (h, w) = image.dims2()?;
        if h == 0 || w == 0 || self.bins == 0 {
            return Err(Error::shape("feature extraction needs a non-empty image and bins"));
        }
        let px = image.data();
        let mut pool = Vec::new();
        for &n in &self.levels {
            if n == 0 || h % n != 0 || w % n != 0 {
                return Err(Error::shape(format!("pyramid level {n} does not tile a {h}x{w} image")));
            }
            let (ch, cw) = (h / n, w / n);
            for cy in 0..n {
                for cx in 0..n {
                    let mut s = 0.0;
                    for y in cy * ch..(cy + 1) * ch {
                        for x in cx * cw..(cx + 1) * cw {
                            s += px[y * w + x] as f64;
                        }
                    }
                    pool.push(s / (ch * cw) as f64 - 0.5);
                }
            }
        }
        let mut hist = vec![0.0; self.bins];
        for &v in px {
            let b = ((v as f64).clamp(0.0, 1.0) * self.bins as f64) as usize;
            hist[b.min(self.bins - 1)] += 1.0;
        }
        let mut out = normalise(pool);
        out.extend(normalise(hist));
        Ok(out)
    }
}
