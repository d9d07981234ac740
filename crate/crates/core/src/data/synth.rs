//! Seeded two-class synthetic images.
//!
//! Class 0 ("disk") is a bright centered disk on dark noise; class 1
//! ("stripe") is a bright horizontal band on dark noise. The bright area
//! differs between the classes, so the mean pixel value separates them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pnm, Image, LabeledDataset, Sample};
use crate::error::Result;
use crate::tensor::Tensor;

pub const SYNTH_CLASSES: [&str; 2] = ["disk", "stripe"];

const NOISE: f64 = 0.2;
const BRIGHT_LO: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

fn disk(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let radius = size as f64 / 4.0;
    // up to one pixel of center jitter
    let cy = size as f64 / 2.0 - 0.5 + rng.random_range(-1.0..=1.0);
    let cx = size as f64 / 2.0 - 0.5 + rng.random_range(-1.0..=1.0);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            out.push(if d2 <= radius * radius {
                rng.random_range(BRIGHT_LO..1.0)
            } else {
                rng.random_range(0.0..NOISE)
            });
        }
    }
    out
}

fn stripe(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let height = (size / 3).max(1);
    let top = rng.random_range(0..=size - height);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for _ in 0..size {
            out.push(if (top..top + height).contains(&y) {
                rng.random_range(BRIGHT_LO..1.0)
            } else {
                rng.random_range(0.0..NOISE)
            });
        }
    }
    out
}

/// Seed of split `index` (train 0, val 1, test 2) in a run seeded `seed`;
/// distinct across splits and across neighbouring run seeds.
pub fn split_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(3).wrapping_add(index as u64)
}

/// `2·n_per_class` samples alternating disk, stripe, disk, …
pub fn synth_dataset(spec: &SynthSpec, split: &str) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(2 * spec.n_per_class);
    for _ in 0..spec.n_per_class {
        for label in 0..2 {
            let gray = if label == 0 {
                disk(spec.size, &mut rng)
            } else {
                stripe(spec.size, &mut rng)
            };
            let image = Tensor::new(vec![3, spec.size, spec.size], gray.repeat(3))?;
            samples.push(Sample { image, label });
        }
    }
    LabeledDataset::new(
        split,
        SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
        samples,
    )
}

/// Writes `<root>/<split>/<class>/NNNNN.pgm` (first channel, 8-bit).
pub fn write_dataset(dataset: &LabeledDataset, root: &Path) -> Result<()> {
    let size = dataset.image_size().unwrap_or(0);
    for class in dataset.class_names() {
        std::fs::create_dir_all(root.join(dataset.split()).join(class))?;
    }
    for (i, s) in dataset.samples().iter().enumerate() {
        let image = Image {
            channels: 1,
            height: size,
            width: size,
            data: s.image.data()[..size * size].to_vec(),
        };
        let path = root
            .join(dataset.split())
            .join(&dataset.class_names()[s.label])
            .join(format!("{i:05}.pgm"));
        std::fs::write(path, pnm::encode(&image)?)?;
    }
    Ok(())
}
