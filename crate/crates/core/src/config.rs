//! Experiment configuration files.
//!
//! A config file is JSON; unknown keys are rejected. Every optional field is
//! filled in by [`ExperimentConfig::resolve`], and the resolved form is what
//! gets written next to experiment outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    ingest_directory, split_seed, synth_dataset, IngestOptions, Ingested, SplitReport, SynthSpec,
    SPLITS,
};
use crate::dense::DenseConfig;
use crate::ensemble::{EnsembleConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::mobile::MobileConfig;
use crate::train::TrainConfig;
use crate::vit::VitConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Tiny,
    Full,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    /// Branch and head overrides; `None` takes the preset value.
    pub mobile: Option<MobileConfig>,
    pub dense: Option<DenseConfig>,
    pub vit: Option<VitConfig>,
    pub head: Option<HeadConfig>,
    pub freeze_backbones: Option<bool>,
}

/// Synthetic splits generated in memory at the model's input size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            train_per_class: 32,
            val_per_class: 8,
            test_per_class: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `<root>/{train,val,test}/<CLASS>/*` tree.
    pub root: Option<PathBuf>,
    /// Used when `root` is absent.
    pub synth: Option<SynthSection>,
    pub imagenet_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    /// Seeds model init, shuffling, dropout and synthetic data.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fills every optional field from the preset and copies the top-level
    /// seed into the train section.
    pub fn resolve(&self) -> Result<Self> {
        let preset = match self.model.preset {
            Preset::Tiny => EnsembleConfig::tiny(),
            Preset::Full => EnsembleConfig::full(),
        };
        let m = &self.model;
        let mut out = self.clone();
        out.model = ModelSection {
            preset: m.preset,
            mobile: Some(m.mobile.clone().unwrap_or(preset.mobile)),
            dense: Some(m.dense.clone().unwrap_or(preset.dense)),
            vit: Some(m.vit.clone().unwrap_or(preset.vit)),
            head: Some(m.head.clone().unwrap_or(preset.head)),
            freeze_backbones: Some(m.freeze_backbones.unwrap_or(preset.freeze_backbones)),
        };
        out.train.seed = self.seed;
        if out.data.root.is_none() && out.data.synth.is_none() {
            out.data.synth = Some(SynthSection::default());
        }
        out.ensemble()?.validate()?;
        out.train.validate()?;
        Ok(out)
    }

    /// Ensemble config of a resolved experiment.
    pub fn ensemble(&self) -> Result<EnsembleConfig> {
        let m = &self.model;
        let missing = || Error::Config("model section is not resolved".into());
        Ok(EnsembleConfig {
            mobile: m.mobile.clone().ok_or_else(missing)?,
            dense: m.dense.clone().ok_or_else(missing)?,
            vit: m.vit.clone().ok_or_else(missing)?,
            head: m.head.clone().ok_or_else(missing)?,
            freeze_backbones: m.freeze_backbones.ok_or_else(missing)?,
            seed: self.seed,
        })
    }

    /// Train, val and test splits of a resolved experiment: ingested from
    /// `data.root`, or generated from `data.synth` at the model input size.
    pub fn load_datasets(&self) -> Result<Ingested> {
        let size = self.ensemble()?.input_size();
        if let Some(root) = &self.data.root {
            let opts = IngestOptions {
                input_size: size,
                imagenet_norm: self.data.imagenet_norm,
            };
            return ingest_directory(root, &opts);
        }
        let synth = self
            .data
            .synth
            .clone()
            .ok_or_else(|| Error::Config("data section is not resolved".into()))?;
        let per_class = [
            synth.train_per_class,
            synth.val_per_class,
            synth.test_per_class,
        ];
        let mut splits = Vec::new();
        let mut reports = Vec::new();
        for (i, (split, n)) in SPLITS.iter().zip(per_class).enumerate() {
            let spec = SynthSpec {
                n_per_class: n,
                size,
                seed: split_seed(self.seed, i),
            };
            let ds = synth_dataset(&spec, split)?;
            reports.push(SplitReport {
                split: split.to_string(),
                counts: ds.counts_by_name(),
                ..SplitReport::default()
            });
            splits.push(ds);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Ingested {
            train,
            val,
            test,
            reports,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
