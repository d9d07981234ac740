//! Three parallel branches fused by concatenation into a trainable head.
//!
//! The head is BN → dense(hidden) → activation → dropout → dense(classes);
//! [`EnsembleModel::forward`] applies softmax to its logits. Branch
//! parameters are frozen by default, in which case the branches run in eval
//! mode and their per-image features are served from a cache.

use std::collections::HashMap;
use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dense::{build_dense, DenseBranch, DenseConfig};
use crate::error::{Error, Result};
use crate::layers::{Activation, BatchNorm, Dense, Dropout};
use crate::mobile::{build_mobile, MobileBranch, MobileConfig};
use crate::module::{Mode, Module, Parameter};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{build_vit, VitBranch, VitConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl HeadConfig {
    pub fn tiny() -> Self {
        Self {
            hidden_dim: 32,
            num_classes: 2,
            dropout: 0.5,
            activation: Activation::Relu,
        }
    }

    pub fn full() -> Self {
        Self {
            hidden_dim: 256,
            ..Self::tiny()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub mobile: MobileConfig,
    pub dense: DenseConfig,
    pub vit: VitConfig,
    pub head: HeadConfig,
    pub freeze_backbones: bool,
    pub seed: u64,
}

impl EnsembleConfig {
    pub fn tiny() -> Self {
        Self {
            mobile: MobileConfig::tiny(),
            dense: DenseConfig::tiny(),
            vit: VitConfig::tiny(),
            head: HeadConfig::tiny(),
            freeze_backbones: true,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            mobile: MobileConfig::full(),
            dense: DenseConfig::full(),
            vit: VitConfig::full(),
            head: HeadConfig::full(),
            freeze_backbones: true,
            seed: 0,
        }
    }

    pub fn input_size(&self) -> usize {
        self.mobile.input_size
    }

    /// Fused feature length implied by the branch configs.
    pub fn fused_dim(&self) -> usize {
        self.mobile.feature_dim + self.dense.feature_dim() + self.vit.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.mobile.input_size,
            self.dense.input_size,
            self.vit.input_size,
        ];
        if sizes.iter().any(|&s| s != sizes[0]) {
            return Err(Error::Config(format!(
                "branch input sizes differ: mobile {}, dense {}, vit {}",
                sizes[0], sizes[1], sizes[2]
            )));
        }
        self.mobile.validate()?;
        self.dense.validate()?;
        self.vit.validate()?;
        let h = &self.head;
        if h.hidden_dim == 0 || h.num_classes < 2 {
            return Err(Error::Config(
                "head: need hidden_dim >= 1 and >= 2 classes".into(),
            ));
        }
        if !(0.0..1.0).contains(&h.dropout) {
            return Err(Error::Config("head: dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the JSON encoding of the architecture (branches and
    /// head; the seed and freeze flag are excluded).
    pub fn fingerprint(&self) -> String {
        let arch = (&self.mobile, &self.dense, &self.vit, &self.head);
        let json = serde_json::to_vec(&arch).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// SHA-256 over an image's shape and f64 bit patterns.
pub fn image_digest(shape: &[usize], data: &[f64]) -> [u8; 32] {
    let mut h = Sha256::new();
    for &d in shape {
        h.update((d as u64).to_le_bytes());
    }
    for v in data {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

type Key = ([u8; 32], [u8; 32]);

/// Branch features keyed by (image digest, branch state digest).
///
/// Reads take a shared lock, inserts an exclusive one.
#[derive(Debug, Default)]
pub struct FeatureCache {
    entries: RwLock<HashMap<Key, Vec<f64>>>,
}

impl FeatureCache {
    pub fn get(&self, image: &[u8; 32], branches: &[u8; 32]) -> Option<Vec<f64>> {
        self.entries
            .read()
            .expect("cache lock")
            .get(&(*image, *branches))
            .cloned()
    }

    pub fn insert(&self, image: [u8; 32], branches: [u8; 32], features: Vec<f64>) {
        self.entries
            .write()
            .expect("cache lock")
            .insert((image, branches), features);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.write().expect("cache lock").clear();
    }
}

#[derive(Clone, Debug)]
struct Head {
    bn: BatchNorm,
    fc1: Dense,
    activation: Activation,
    dropout: Dropout,
    fc2: Dense,
}

impl Head {
    fn preactivation<'t>(&mut self, tape: &'t Tape, fused: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let h = self.bn.forward(tape, fused, mode)?;
        self.fc1.forward(tape, h)
    }

    fn forward<'t>(&mut self, tape: &'t Tape, fused: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let h = self
            .activation
            .apply(self.preactivation(tape, fused, mode)?);
        let h = self.dropout.forward(h, mode)?;
        self.fc2.forward(tape, h)
    }
}

impl Module for Head {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.bn.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.bn.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[derive(Debug)]
pub struct EnsembleModel {
    config: EnsembleConfig,
    mobile: MobileBranch,
    dense: DenseBranch,
    vit: VitBranch,
    head: Head,
    cache: FeatureCache,
    use_cache: bool,
    branch_key: Option<[u8; 32]>,
}

impl Clone for EnsembleModel {
    /// The clone starts with an empty feature cache.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            mobile: self.mobile.clone(),
            dense: self.dense.clone(),
            vit: self.vit.clone(),
            head: self.head.clone(),
            cache: FeatureCache::default(),
            use_cache: self.use_cache,
            branch_key: None,
        }
    }
}

/// Builds all three branches and the head from one seeded stream.
pub fn build_ensemble(config: &EnsembleConfig) -> Result<EnsembleModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mobile = build_mobile(&config.mobile, "mobile", &mut rng)?;
    let dense = build_dense(&config.dense, "dense", &mut rng)?;
    let vit = build_vit(&config.vit, "vit", &mut rng)?;
    let fused = mobile.feature_len() + dense.feature_len() + vit.feature_len();
    let h = &config.head;
    let head = Head {
        bn: BatchNorm::new("head.bn", fused),
        fc1: Dense::new("head.fc1", fused, h.hidden_dim, &mut rng),
        activation: h.activation,
        dropout: Dropout::new(h.dropout, config.seed ^ 0x6865_6164)?,
        fc2: Dense::new("head.fc2", h.hidden_dim, h.num_classes, &mut rng),
    };
    let mut model = EnsembleModel {
        config: config.clone(),
        mobile,
        dense,
        vit,
        head,
        cache: FeatureCache::default(),
        use_cache: true,
        branch_key: None,
    };
    model.set_backbones_frozen(config.freeze_backbones);
    Ok(model)
}

impl EnsembleModel {
    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size()
    }

    pub fn num_classes(&self) -> usize {
        self.head.fc2.output_dim()
    }

    /// Feature lengths of the constructed branches, in fusion order.
    pub fn branch_dims(&self) -> [usize; 3] {
        [
            self.mobile.feature_len(),
            self.dense.feature_len(),
            self.vit.feature_len(),
        ]
    }

    /// Fused length read off the constructed head.
    pub fn fused_dim(&self) -> usize {
        self.head.fc1.input_dim()
    }

    pub fn mobile(&self) -> &MobileBranch {
        &self.mobile
    }

    pub fn dense(&self) -> &DenseBranch {
        &self.dense
    }

    pub fn vit(&self) -> &VitBranch {
        &self.vit
    }

    pub fn set_backbones_frozen(&mut self, frozen: bool) {
        self.mobile.set_trainable(!frozen);
        self.dense.set_trainable(!frozen);
        self.vit.set_trainable(!frozen);
        self.config.freeze_backbones = frozen;
    }

    pub fn backbones_frozen(&self) -> bool {
        self.config.freeze_backbones
    }

    /// Position of the head dropout's counter-based mask stream.
    pub fn set_dropout_counter(&mut self, counter: u64) {
        self.head.dropout.set_counter(counter);
    }

    /// Enables or disables the frozen-branch feature cache.
    pub fn set_feature_cache(&mut self, enabled: bool) {
        self.use_cache = enabled;
    }

    pub fn feature_cache(&self) -> &FeatureCache {
        &self.cache
    }

    /// Parameters an optimizer would update.
    pub fn trainable_parameters(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        self.visit(&mut |p| {
            if p.is_trainable() {
                out.push(p.clone());
            }
        });
        out
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = self.input_size();
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [3, s, s] || shape[0] == 0 {
            return Err(Error::dim("ensemble_forward", shape, &[0, 3, s, s]));
        }
        Ok(())
    }

    fn run_branches<'t>(&mut self, tape: &'t Tape, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let a = self.mobile.forward(tape, x, mode)?;
        let b = self.dense.forward(tape, x, mode)?;
        let c = self.vit.forward(tape, x)?;
        Var::concat(&[a, b, c], 1)
    }

    fn branch_key(&mut self) -> [u8; 32] {
        if let Some(key) = self.branch_key {
            return key;
        }
        let mut h = Sha256::new();
        h.update(self.config.fingerprint());
        let mut absorb = |p: &Parameter| {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        self.mobile.visit(&mut absorb);
        self.dense.visit(&mut absorb);
        self.vit.visit(&mut absorb);
        let key: [u8; 32] = h.finalize().into();
        self.branch_key = Some(key);
        key
    }

    fn cached_features(&mut self, images: &Tensor) -> Result<Tensor> {
        let key = self.branch_key();
        let b = images.shape()[0];
        let per = images.numel() / b;
        let fused = self.fused_dim();
        let digests: Vec<[u8; 32]> = images
            .data()
            .chunks(per)
            .map(|img| image_digest(&images.shape()[1..], img))
            .collect();
        let mut out = vec![0.0; b * fused];
        let mut missing = Vec::new();
        for (i, d) in digests.iter().enumerate() {
            match self.cache.get(d, &key) {
                Some(f) => out[i * fused..(i + 1) * fused].copy_from_slice(&f),
                None => missing.push(i),
            }
        }
        if !missing.is_empty() {
            let mut shape = images.shape().to_vec();
            shape[0] = missing.len();
            let mut batch = Vec::with_capacity(missing.len() * per);
            for &i in &missing {
                batch.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
            }
            let tape = Tape::new();
            let x = tape.constant(&Tensor::new(shape, batch)?);
            let feats = self.run_branches(&tape, x, Mode::Eval)?.data();
            for (j, &i) in missing.iter().enumerate() {
                let f = &feats[j * fused..(j + 1) * fused];
                out[i * fused..(i + 1) * fused].copy_from_slice(f);
                self.cache.insert(digests[i], key, f.to_vec());
            }
        }
        Tensor::new(vec![b, fused], out)
    }

    /// Fused branch features `[b, fused_dim]`.
    ///
    /// Frozen branches run in eval mode whatever `mode` is.
    pub fn features<'t>(&mut self, tape: &'t Tape, images: &Tensor, mode: Mode) -> Result<Var<'t>> {
        self.check_images(images)?;
        if self.backbones_frozen() {
            if self.use_cache {
                return Ok(tape.constant(&self.cached_features(images)?));
            }
            return self.run_branches(tape, tape.constant(images), Mode::Eval);
        }
        self.run_branches(tape, tape.constant(images), mode)
    }

    /// Head output before the activation, `[b, hidden]`.
    pub fn head_preactivation<'t>(
        &mut self,
        tape: &'t Tape,
        fused: Var<'t>,
        mode: Mode,
    ) -> Result<Var<'t>> {
        self.head.preactivation(tape, fused, mode)
    }

    pub fn head_logits<'t>(
        &mut self,
        tape: &'t Tape,
        fused: Var<'t>,
        mode: Mode,
    ) -> Result<Var<'t>> {
        self.head.forward(tape, fused, mode)
    }

    pub fn logits<'t>(&mut self, tape: &'t Tape, images: &Tensor, mode: Mode) -> Result<Var<'t>> {
        let fused = self.features(tape, images, mode)?;
        self.head.forward(tape, fused, mode)
    }

    /// Class probabilities `[b, num_classes]`.
    pub fn forward<'t>(&mut self, tape: &'t Tape, images: &Tensor, mode: Mode) -> Result<Var<'t>> {
        self.logits(tape, images, mode)?.softmax(1)
    }

    /// Eval-mode probabilities as a plain tensor.
    pub fn predict_proba(&mut self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward(&tape, images, Mode::Eval)?.value())
    }
}

impl Module for EnsembleModel {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.mobile.visit(f);
        self.dense.visit(f);
        self.vit.visit(f);
        self.head.visit(f);
    }

    /// Any mutable visit may change branch state, so the cached branch
    /// digest is dropped and recomputed on the next forward.
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.branch_key = None;
        self.mobile.visit_mut(f);
        self.dense.visit_mut(f);
        self.vit.visit_mut(f);
        self.head.visit_mut(f);
    }
}
