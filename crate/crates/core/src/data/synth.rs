use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "law")]
pub enum Noise {
    Gaussian { sigma: f64 },
    Uniform { half_width: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Texture {
    Flat,
    /// `amplitude · sin(x/3 + φ) · cos(y/4)` with a random phase per image.
    Sinusoid { amplitude: f64 },
}

/// Background appearance of a task's images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modality {
    pub background: f64,
    pub noise: Noise,
    pub texture: Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    Disc,
    Square,
    /// Horizontal bar, 3 px half-height at 32 px scale.
    Bar,
    /// Ellipse with independent radii.
    Ellipse,
    /// Disc with a radius modulated by three lobes.
    Blob,
    /// Four-lobed blob filled with alternating diagonal stripes.
    StripedBlob,
}

/// One foreground class the generator can draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeKind {
    pub class_id: u16,
    pub geometry: Geometry,
    pub intensity: f64,
    /// Radius range in pixels at 32 px scale.
    pub radius: (f64, f64),
}

/// A reproducible synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub modality: Modality,
    pub shapes: Vec<ShapeKind>,
    /// Shapes per image (inclusive range); distinct classes are drawn.
    pub per_image: (usize, usize),
    /// `C^t`: the classes this step introduces.
    pub classes: Vec<u16>,
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

const FG_RANGE: (f64, f64) = (0.05, 0.40);
const SHAPE_NOISE: f64 = 0.04;
const MAX_ATTEMPTS: usize = 200;

impl TaskSpec {
    fn base(id: usize, name: &str, modality: Modality, shapes: Vec<ShapeKind>, classes: Vec<u16>) -> Self {
        Self {
            id,
            name: name.to_string(),
            modality,
            shapes,
            per_image: (1, 1),
            classes,
            image_size: 32,
            train: 200,
            val: 0,
            test: 50,
            seed: id as u64,
        }
    }

    /// Dark flat background with bright discs (class 1) and squares (class 2).
    pub fn task_a() -> Self {
        let mut s = Self::base(
            1,
            "task-a",
            Modality { background: 0.2, noise: Noise::Gaussian { sigma: 0.05 }, texture: Texture::Flat },
            vec![
                ShapeKind { class_id: 1, geometry: Geometry::Disc, intensity: 0.8, radius: (4.0, 8.0) },
                ShapeKind { class_id: 2, geometry: Geometry::Square, intensity: 0.55, radius: (4.0, 8.0) },
            ],
            vec![0, 1, 2],
        );
        s.per_image = (1, 2);
        s
    }

    /// Bright sinusoidal texture with a dark ellipse (class 3).
    pub fn task_b() -> Self {
        Self::base(
            2,
            "task-b",
            Modality {
                background: 0.75,
                noise: Noise::Gaussian { sigma: 0.03 },
                texture: Texture::Sinusoid { amplitude: 0.08 },
            },
            vec![ShapeKind { class_id: 3, geometry: Geometry::Ellipse, intensity: 0.3, radius: (5.0, 10.0) }],
            vec![0, 3],
        )
    }

    /// Mid-grey uniform noise with a bright lobed blob (class 4).
    pub fn task_c() -> Self {
        Self::base(
            3,
            "task-c",
            Modality { background: 0.45, noise: Noise::Uniform { half_width: 0.05 }, texture: Texture::Flat },
            vec![ShapeKind { class_id: 4, geometry: Geometry::Blob, intensity: 0.9, radius: (5.0, 9.0) }],
            vec![0, 4],
        )
    }

    /// First class-level step: four structures on one background.
    pub fn organs() -> Self {
        let mut s = Self::base(
            1,
            "organs",
            Modality { background: 0.3, noise: Noise::Gaussian { sigma: 0.05 }, texture: Texture::Flat },
            vec![
                ShapeKind { class_id: 1, geometry: Geometry::Disc, intensity: 0.85, radius: (4.0, 7.0) },
                ShapeKind { class_id: 2, geometry: Geometry::Square, intensity: 0.62, radius: (4.0, 7.0) },
                ShapeKind { class_id: 3, geometry: Geometry::Bar, intensity: 0.45, radius: (4.0, 7.0) },
                ShapeKind { class_id: 4, geometry: Geometry::Ellipse, intensity: 0.05, radius: (4.0, 7.0) },
            ],
            vec![0, 1, 2, 3, 4],
        );
        s.per_image = (1, 2);
        s
    }

    /// Second class-level step: a striped lesion (class 5) on the same background.
    pub fn lesion() -> Self {
        Self::base(
            2,
            "lesion",
            Modality { background: 0.3, noise: Noise::Gaussian { sigma: 0.05 }, texture: Texture::Flat },
            vec![ShapeKind { class_id: 5, geometry: Geometry::StripedBlob, intensity: 0.6, radius: (4.0, 8.0) }],
            vec![5],
        )
    }

    /// Built-in profile by name.
    pub fn named(name: &str) -> Result<Self> {
        Ok(match name {
            "task-a" => Self::task_a(),
            "task-b" => Self::task_b(),
            "task-c" => Self::task_c(),
            "organs" => Self::organs(),
            "lesion" => Self::lesion(),
            other => {
                return Err(Error::config(format!(
                    "unknown synthetic profile {other:?} (task-a, task-b, task-c, organs, lesion)"
                )))
            }
        })
    }

    pub fn with_counts(mut self, train: usize, val: usize, test: usize) -> Self {
        self.train = train;
        self.val = val;
        self.test = test;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(Error::config("image_size must be at least 4"));
        }
        if self.per_image.0 > self.per_image.1 || (!self.shapes.is_empty() && self.per_image.1 == 0) {
            return Err(Error::config(format!("invalid shapes-per-image range {:?}", self.per_image)));
        }
        if let Some(s) = self.shapes.iter().find(|s| !self.classes.contains(&s.class_id) || s.class_id == 0) {
            return Err(Error::config(format!("shape class {} is not a foreground class of the task", s.class_id)));
        }
        Ok(())
    }
}

fn draw_noise(noise: Noise, rng: &mut Rng) -> f64 {
    match noise {
        Noise::Gaussian { sigma } => sigma * rng.normal(),
        Noise::Uniform { half_width } => rng.uniform_range(-half_width, half_width),
    }
}

fn render(spec: &TaskSpec, rng: &mut Rng) -> (Vec<f32>, Vec<u16>) {
    let n = spec.image_size;
    let scale = n as f64 / 32.0;
    let m = spec.modality;
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let mut img = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let t = match m.texture {
                Texture::Flat => 0.0,
                Texture::Sinusoid { amplitude } => {
                    let (xs, ys) = (x as f64 / scale, y as f64 / scale);
                    amplitude * libm::sin(xs / 3.0 + phase) * libm::cos(ys / 4.0)
                }
            };
            img[y * n + x] = m.background + t + draw_noise(m.noise, rng);
        }
    }
    let mut mask = vec![0u16; n * n];
    if spec.shapes.is_empty() {
        return (img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(), mask);
    }
    let (lo, hi) = spec.per_image;
    let count = (lo + rng.below(hi - lo + 1)).min(spec.shapes.len());
    let mut order: Vec<usize> = (0..spec.shapes.len()).collect();
    rng.shuffle(&mut order);
    for &k in &order[..count] {
        let shape = spec.shapes[k];
        let cy = rng.uniform_range(0.25, 0.75) * n as f64;
        let cx = rng.uniform_range(0.25, 0.75) * n as f64;
        let r = rng.uniform_range(shape.radius.0, shape.radius.1) * scale;
        let r2 = rng.uniform_range(shape.radius.0, shape.radius.1) * scale;
        let lobe_phase = rng.uniform_range(0.0, std::f64::consts::TAU);
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = match shape.geometry {
                    Geometry::Disc => dy * dy + dx * dx <= r * r,
                    Geometry::Square => dy.abs() <= 0.8 * r && dx.abs() <= 0.8 * r,
                    Geometry::Bar => dy.abs() <= 3.0 * scale && dx.abs() <= 1.5 * r,
                    Geometry::Ellipse => (dy / r).powi(2) + (dx / r2).powi(2) <= 1.0,
                    Geometry::Blob => {
                        let rr = r * (1.0 + 0.25 * libm::sin(3.0 * libm::atan2(dy, dx) + lobe_phase));
                        dy * dy + dx * dx <= rr * rr
                    }
                    Geometry::StripedBlob => {
                        let rr = r * (1.0 + 0.2 * libm::sin(4.0 * libm::atan2(dy, dx)));
                        dy * dy + dx * dx <= rr * rr
                    }
                };
                if inside {
                    let base = match shape.geometry {
                        Geometry::StripedBlob => {
                            let stripe = ((x + y) as f64 / (2.0 * scale)).floor() as i64 % 2;
                            shape.intensity + 0.35 * stripe as f64
                        }
                        _ => shape.intensity,
                    };
                    img[y * n + x] = base + SHAPE_NOISE * rng.normal();
                    mask[y * n + x] = shape.class_id;
                }
            }
        }
    }
    (img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(), mask)
}

fn gen_split(spec: &TaskSpec, split: &str, count: usize) -> Result<Vec<Sample>> {
    let root = Rng::new(spec.seed).derive(&spec.name).derive(split);
    let n = spec.image_size;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = root.split(i as u64);
        let mut attempt = 0;
        let sample = loop {
            let (img, mask) = render(spec, &mut rng);
            let s = Sample::new(Tensor::new([n, n], img)?, mask)?;
            let fg = s.foreground_fraction();
            if spec.shapes.is_empty() || (FG_RANGE.0..=FG_RANGE.1).contains(&fg) {
                break s;
            }
            attempt += 1;
            if attempt == MAX_ATTEMPTS {
                return Err(Error::config(format!(
                    "{}: could not place shapes covering 5-40% of a {n}x{n} image",
                    spec.name
                )));
            }
        };
        out.push(sample);
    }
    Ok(out)
}

/// Generates the train/val/test splits; a pure function of its argument.
pub fn gen_task_dataset(spec: &TaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    Ok(TaskDataset {
        train: gen_split(spec, "train", spec.train)?,
        val: gen_split(spec, "val", spec.val)?,
        test: gen_split(spec, "test", spec.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_split_ignores_the_train_count() {
        let small = gen_task_dataset(&TaskSpec::task_b().with_counts(2, 0, 5)).unwrap();
        let large = gen_task_dataset(&TaskSpec::task_b().with_counts(9, 0, 7)).unwrap();
        assert_eq!(small.test[..], large.test[..5]);
        assert_eq!(small.train[..], large.train[..2]);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TaskSpec::task_a().with_counts(4, 1, 2);
        assert_eq!(gen_task_dataset(&spec).unwrap(), gen_task_dataset(&spec).unwrap());
    }

    #[test]
    fn empty_vocabulary_gives_background_only() {
        let mut spec = TaskSpec::task_b().with_counts(3, 0, 0);
        spec.shapes.clear();
        let d = gen_task_dataset(&spec).unwrap();
        assert!(d.train.iter().all(|s| s.mask.iter().all(|&c| c == 0)));
    }

    #[test]
    fn foreground_fraction_in_range_and_ids_valid() {
        for spec in [TaskSpec::task_a(), TaskSpec::task_b(), TaskSpec::task_c(), TaskSpec::organs(), TaskSpec::lesion()] {
            let spec = spec.with_counts(20, 0, 5);
            let d = gen_task_dataset(&spec).unwrap();
            for s in d.train.iter().chain(&d.test) {
                let fg = s.foreground_fraction();
                assert!((0.05..=0.40).contains(&fg), "{} {fg}", spec.name);
                assert!(s.mask.iter().all(|&c| c == 0 || spec.classes.contains(&c)));
                assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn shape_outside_classes_is_rejected() {
        let mut spec = TaskSpec::task_b();
        spec.classes = vec![0, 9];
        assert!(matches!(gen_task_dataset(&spec), Err(Error::Config(_))));
    }
}
