//! `<root>/{train,val,test}/<CLASS>/*.{pgm,ppm,rawt}` ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{extension, Image, LabeledDataset, Sample};
use crate::error::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const EXTENSIONS: [&str; 3] = ["pgm", "ppm", "rawt"];

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOptions {
    pub input_size: usize,
    pub imagenet_norm: bool,
}

/// What was found (and skipped) in one split directory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SplitReport {
    pub split: String,
    pub counts: BTreeMap<String, usize>,
    pub empty_classes: Vec<String>,
    /// Files that failed to decode or had an unsupported extension.
    pub skipped: Vec<(PathBuf, String)>,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub reports: Vec<SplitReport>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

fn split_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::DatasetRootNotFound(root.to_path_buf()));
    }
    SPLITS
        .iter()
        .map(|s| {
            let dir = root.join(s);
            if dir.is_dir() {
                Ok(dir)
            } else {
                Err(Error::Ingest(format!(
                    "missing split directory {}",
                    dir.display()
                )))
            }
        })
        .collect()
}

/// Sorted union of class directory names over all splits.
fn class_names(splits: &[PathBuf]) -> Result<Vec<String>> {
    let mut names = BTreeSet::new();
    for dir in splits {
        for entry in sorted_entries(dir)? {
            if entry.is_dir() {
                if let Some(name) = entry.file_name().and_then(|n| n.to_str()) {
                    names.insert(name.to_string());
                }
            }
        }
    }
    if names.is_empty() {
        return Err(Error::Ingest("no class directories found".into()));
    }
    Ok(names.into_iter().collect())
}

fn is_supported(path: &Path) -> bool {
    extension(path).is_some_and(|e| EXTENSIONS.contains(&e.as_str()))
}

/// Walks one split, decoding with `decode` and recording skips.
fn walk_split<T>(
    split: &str,
    dir: &Path,
    classes: &[String],
    mut decode: impl FnMut(&Path) -> Result<T>,
) -> Result<(Vec<(T, usize)>, SplitReport)> {
    let mut report = SplitReport {
        split: split.to_string(),
        ..Default::default()
    };
    let mut items = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let class_dir = dir.join(class);
        let mut count = 0;
        if class_dir.is_dir() {
            for path in sorted_entries(&class_dir)? {
                if !path.is_file() {
                    continue;
                }
                if !is_supported(&path) {
                    log::warn!("skipping unsupported file {}", path.display());
                    report.skipped.push((path, "unsupported extension".into()));
                    continue;
                }
                match decode(&path) {
                    Ok(item) => {
                        items.push((item, label));
                        count += 1;
                    }
                    Err(e) => {
                        log::warn!("skipping {}: {e}", path.display());
                        report.skipped.push((path, e.to_string()));
                    }
                }
            }
        }
        if count == 0 {
            log::warn!("split {split}: class {class} has no images");
            report.empty_classes.push(class.clone());
        }
        report.counts.insert(class.clone(), count);
    }
    Ok((items, report))
}

/// Decodes every split, resized to `opts.input_size`.
pub fn ingest_directory(root: &Path, opts: &IngestOptions) -> Result<Ingested> {
    let dirs = split_dirs(root)?;
    let classes = class_names(&dirs)?;
    let mut datasets = Vec::new();
    let mut reports = Vec::new();
    for (split, dir) in SPLITS.iter().zip(&dirs) {
        let (items, report) = walk_split(split, dir, &classes, |p| {
            Image::load(p)?.to_model_input(opts.input_size, opts.imagenet_norm)
        })?;
        log::info!("split {split}: {:?}", report.counts);
        let samples = items
            .into_iter()
            .map(|(image, label)| Sample { image, label })
            .collect();
        datasets.push(LabeledDataset::new(*split, classes.clone(), samples)?);
        reports.push(report);
    }
    let test = datasets.pop().expect("three splits");
    let val = datasets.pop().expect("three splits");
    let train = datasets.pop().expect("three splits");
    Ok(Ingested {
        train,
        val,
        test,
        reports,
    })
}

/// Per-split class counts of supported files, without decoding.
pub fn count_directory(root: &Path) -> Result<Vec<SplitReport>> {
    let dirs = split_dirs(root)?;
    let classes = class_names(&dirs)?;
    SPLITS
        .iter()
        .zip(&dirs)
        .map(|(split, dir)| Ok(walk_split(split, dir, &classes, |_| Ok(()))?.1))
        .collect()
}
