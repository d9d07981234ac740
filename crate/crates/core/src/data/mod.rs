//! Labeled image datasets: decoding, resizing, directory ingestion and a
//! seeded synthetic generator.

mod ingest;
pub mod pnm;
pub mod rawt;
mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ingest::{count_directory, ingest_directory, IngestOptions, Ingested, SplitReport, SPLITS};
pub use synth::{split_seed, synth_dataset, write_dataset, SynthSpec, SYNTH_CLASSES};

/// ImageNet per-channel mean and standard deviation.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Decoded image, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    /// Decodes by extension: `.pgm`/`.ppm` or `.rawt`.
    pub fn load(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path)?;
        match extension(path).as_deref() {
            Some("pgm" | "ppm") => pnm::decode(&bytes),
            Some("rawt") => rawt::decode(&bytes),
            _ => Err(Error::Ingest(format!(
                "unsupported file {}",
                path.display()
            ))),
        }
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let axis = |i: usize, scale: f64, extent: usize| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(extent - 1);
            let hi = (lo + 1).min(extent - 1);
            (lo, hi, src - lo as f64)
        };
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let plane =
                &self.data[c * self.height * self.width..(c + 1) * self.height * self.width];
            for y in 0..height {
                let (y0, y1, fy) = axis(y, sy, self.height);
                for x in 0..width {
                    let (x0, x1, fx) = axis(x, sx, self.width);
                    let top =
                        plane[y0 * self.width + x0] * (1.0 - fx) + plane[y0 * self.width + x1] * fx;
                    let bot =
                        plane[y1 * self.width + x0] * (1.0 - fx) + plane[y1 * self.width + x1] * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Image {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    /// Three-channel `[3, s, s]` tensor; grayscale is replicated.
    pub fn to_model_input(&self, size: usize, imagenet_norm: bool) -> Result<Tensor> {
        let img = self.resize(size, size);
        let plane = size * size;
        let mut data = match img.channels {
            1 => img.data.repeat(3),
            3 => img.data,
            c => {
                return Err(Error::Ingest(format!(
                    "{c}-channel images are not supported"
                )))
            }
        };
        if imagenet_norm {
            for (c, chunk) in data.chunks_mut(plane).enumerate() {
                chunk
                    .iter_mut()
                    .for_each(|v| *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
            }
        }
        Tensor::new(vec![3, size, size], data)
    }
}

pub(crate) fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3, s, s]`
    pub image: Tensor,
    pub label: usize,
}

/// Samples with labels indexing into a lexicographically sorted class list.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    split: String,
    class_names: Vec<String>,
    samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(
        split: impl Into<String>,
        class_names: Vec<String>,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        if class_names.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(
                "LabeledDataset",
                "class names must be sorted and unique",
            ));
        }
        let shape = samples.first().map(|s| s.image.shape().to_vec());
        for s in &samples {
            if s.label >= class_names.len() {
                return Err(Error::contract(
                    "LabeledDataset",
                    format!(
                        "label {} out of range for {} classes",
                        s.label,
                        class_names.len()
                    ),
                ));
            }
            let img = s.image.shape();
            if img.len() != 3 || img[0] != 3 || Some(img) != shape.as_deref() {
                return Err(Error::dim(
                    "LabeledDataset",
                    img,
                    shape.as_deref().unwrap_or(&[]),
                ));
            }
        }
        Ok(Self {
            split: split.into(),
            class_names,
            samples,
        })
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Spatial size of the images, if any.
    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.shape()[1])
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Per-class counts in class order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn counts_by_name(&self) -> BTreeMap<String, usize> {
        self.class_names
            .iter()
            .cloned()
            .zip(self.class_counts())
            .collect()
    }

    /// Stacks the given samples into `[b, 3, s, s]` with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let first = indices
            .first()
            .and_then(|&i| self.samples.get(i))
            .ok_or_else(|| Error::contract("batch", "empty or out-of-range batch"))?;
        let mut shape = first.image.shape().to_vec();
        let per = first.image.numel();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::contract("batch", format!("index {i} out of range")))?;
            data.extend_from_slice(s.image.data());
            labels.push(s.label);
        }
        shape.insert(0, indices.len());
        Ok((Tensor::new(shape, data)?, labels))
    }
}
