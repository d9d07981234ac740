//! Densely connected branch.
//!
//! Within a dense block every layer sees the channel-concatenation of all
//! earlier outputs and adds `growth_rate` channels. Transitions between
//! blocks compress channels by `compression` and halve the spatial size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{global_average_pool, BatchNorm, Conv2d};
use crate::module::{join, Mode, Module, Parameter};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// 2×2 average pool after the stem.
    pub stem_pool: bool,
    pub growth_rate: usize,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck_factor: usize,
    pub block_layers: Vec<usize>,
    pub compression: f64,
}

impl DenseConfig {
    /// Two blocks on 32×32 input: 8 → 16 → 8 → 24 channels.
    pub fn tiny() -> Self {
        Self {
            input_size: 32,
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: false,
            growth_rate: 4,
            bottleneck_factor: 4,
            block_layers: vec![2, 4],
            compression: 0.5,
        }
    }

    /// DenseNet-169 layout on 224×224 input, 1664 features.
    pub fn full() -> Self {
        Self {
            input_size: 224,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            growth_rate: 32,
            bottleneck_factor: 4,
            block_layers: vec![6, 12, 32, 32],
            compression: 0.5,
        }
    }

    /// Channels after each block (before its transition).
    pub fn block_channels(&self) -> Vec<usize> {
        let mut c = self.stem_channels;
        let mut out = Vec::with_capacity(self.block_layers.len());
        for (i, &layers) in self.block_layers.iter().enumerate() {
            c += layers * self.growth_rate;
            out.push(c);
            if i + 1 < self.block_layers.len() {
                c = transition_channels(c, self.compression);
            }
        }
        out
    }

    pub fn feature_dim(&self) -> usize {
        self.block_channels()
            .last()
            .copied()
            .unwrap_or(self.stem_channels)
    }

    /// Spatial size entering each block.
    pub fn block_sizes(&self) -> Result<Vec<usize>> {
        let k = self.stem_kernel;
        let conv_out = (self.input_size + 2 * (k / 2))
            .checked_sub(k)
            .map(|v| v / self.stem_stride + 1);
        let mut s = conv_out
            .ok_or_else(|| Error::Config("dense: input smaller than stem kernel".into()))?;
        if self.stem_pool {
            if s < 2 {
                return Err(Error::Config(
                    "dense: spatial size exhausted at stem pool".into(),
                ));
            }
            s /= 2;
        }
        let mut sizes = vec![s];
        for i in 1..self.block_layers.len() {
            if s < 2 {
                return Err(Error::Config(format!(
                    "dense: spatial size exhausted before block {i}"
                )));
            }
            s /= 2;
            sizes.push(s);
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_layers.is_empty() || self.block_layers.contains(&0) {
            return Err(Error::Config(
                "dense: every block needs at least one layer".into(),
            ));
        }
        if self.growth_rate == 0 || self.bottleneck_factor == 0 || self.stem_channels == 0 {
            return Err(Error::Config("dense: widths must be >= 1".into()));
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 {
            return Err(Error::Config(
                "dense: stem kernel and stride must be >= 1".into(),
            ));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config("dense: compression must be in (0, 1]".into()));
        }
        self.block_sizes()?;
        Ok(())
    }
}

/// `floor(θ·c)`, never below 1.
pub fn transition_channels(c: usize, compression: f64) -> usize {
    ((c as f64 * compression).floor() as usize).max(1)
}

/// BN → ReLU → 1×1 conv (bottleneck) → BN → ReLU → 3×3 conv (growth).
#[derive(Clone, Debug)]
struct DenseLayer {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
}

impl DenseLayer {
    fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        growth: usize,
        factor: usize,
        rng: &mut R,
    ) -> Self {
        let mid = growth * factor;
        Self {
            bn1: BatchNorm::new(&join(name, "bn1"), in_ch),
            conv1: Conv2d::new(&join(name, "conv1"), in_ch, mid, 1, 1, 0, false, rng),
            bn2: BatchNorm::new(&join(name, "bn2"), mid),
            conv2: Conv2d::new(&join(name, "conv2"), mid, growth, 3, 1, 1, false, rng),
        }
    }

    fn forward<'t>(&mut self, tape: &'t Tape, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let h = self.bn1.forward(tape, x, mode)?.relu();
        let h = self.conv1.forward(tape, h)?;
        let h = self.bn2.forward(tape, h, mode)?.relu();
        self.conv2.forward(tape, h)
    }
}

impl Module for DenseLayer {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.bn1.visit(f);
        self.conv1.visit(f);
        self.bn2.visit(f);
        self.conv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.bn1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.bn2.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    in_channels: usize,
    growth_rate: usize,
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        layers: usize,
        growth_rate: usize,
        bottleneck_factor: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|i| {
                DenseLayer::new(
                    &join(name, &format!("layer{i}")),
                    in_channels + i * growth_rate,
                    growth_rate,
                    bottleneck_factor,
                    rng,
                )
            })
            .collect();
        Self {
            in_channels,
            growth_rate,
            layers,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth_rate
    }

    pub fn forward<'t>(&mut self, tape: &'t Tape, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let mut state = x;
        for layer in &mut self.layers {
            let new = layer.forward(tape, state, mode)?;
            state = Var::concat(&[state, new], 1)?;
        }
        Ok(state)
    }
}

impl Module for DenseBlock {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// BN → ReLU → 1×1 conv (compression) → 2×2 average pool.
#[derive(Clone, Debug)]
struct Transition {
    bn: BatchNorm,
    conv: Conv2d,
}

impl Transition {
    fn forward<'t>(&mut self, tape: &'t Tape, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let h = self.bn.forward(tape, x, mode)?.relu();
        self.conv.forward(tape, h)?.avg_pool2d(2, 2)
    }
}

impl Module for Transition {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.bn.visit(f);
        self.conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.bn.visit_mut(f);
        self.conv.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct DenseBranch {
    config: DenseConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm,
}

pub fn build_dense<R: Rng + ?Sized>(
    config: &DenseConfig,
    prefix: &str,
    rng: &mut R,
) -> Result<DenseBranch> {
    config.validate()?;
    let k = config.stem_kernel;
    let stem = Conv2d::new(
        &join(prefix, "stem"),
        3,
        config.stem_channels,
        k,
        config.stem_stride,
        k / 2,
        false,
        rng,
    );
    let stem_bn = BatchNorm::new(&join(prefix, "stem_bn"), config.stem_channels);
    let mut c = config.stem_channels;
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    for (i, &layers) in config.block_layers.iter().enumerate() {
        let block = DenseBlock::new(
            &join(prefix, &format!("block{i}")),
            c,
            layers,
            config.growth_rate,
            config.bottleneck_factor,
            rng,
        );
        c = block.out_channels();
        blocks.push(block);
        if i + 1 < config.block_layers.len() {
            let out = transition_channels(c, config.compression);
            let name = join(prefix, &format!("transition{i}"));
            transitions.push(Transition {
                bn: BatchNorm::new(&join(&name, "bn"), c),
                conv: Conv2d::new(&join(&name, "conv"), c, out, 1, 1, 0, false, rng),
            });
            c = out;
        }
    }
    Ok(DenseBranch {
        config: config.clone(),
        stem,
        stem_bn,
        blocks,
        transitions,
        final_bn: BatchNorm::new(&join(prefix, "final_bn"), c),
    })
}

impl DenseBranch {
    pub fn config(&self) -> &DenseConfig {
        &self.config
    }

    /// Width of the pooled output, read off the constructed layers.
    pub fn feature_len(&self) -> usize {
        self.final_bn.channels()
    }

    /// Channels leaving each block, read off the constructed layers.
    pub fn block_out_channels(&self) -> Vec<usize> {
        self.blocks.iter().map(DenseBlock::out_channels).collect()
    }

    /// `[b, 3, s, s]` → `[b, feature_dim]`.
    pub fn forward<'t>(&mut self, tape: &'t Tape, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let s = self.config.input_size;
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != [3, s, s] {
            return Err(Error::dim("dense_forward", &shape, &[0, 3, s, s]));
        }
        let mut h = self.stem.forward(tape, x)?;
        h = self.stem_bn.forward(tape, h, mode)?.relu();
        if self.config.stem_pool {
            h = h.avg_pool2d(2, 2)?;
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            h = block.forward(tape, h, mode)?;
            if let Some(t) = self.transitions.get_mut(i) {
                h = t.forward(tape, h, mode)?;
            }
        }
        h = self.final_bn.forward(tape, h, mode)?.relu();
        global_average_pool(h)
    }
}

impl Module for DenseBranch {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.stem.visit(f);
        self.stem_bn.visit(f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(f);
            if let Some(t) = self.transitions.get(i) {
                t.visit(f);
            }
        }
        self.final_bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem.visit_mut(f);
        self.stem_bn.visit_mut(f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(f);
            if let Some(t) = self.transitions.get_mut(i) {
                t.visit_mut(f);
            }
        }
        self.final_bn.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn block_of_four_with_growth_eight() {
        let mut block = DenseBlock::new("b", 16, 4, 8, 4, &mut rng(1));
        assert_eq!(block.out_channels(), 48);
        let tape = Tape::new();
        let x = tape.constant(&Tensor::uniform(vec![2, 16, 4, 4], -1.0, 1.0, &mut rng(2)));
        let y = block.forward(&tape, x, Mode::Train).unwrap();
        assert_eq!(y.shape(), vec![2, 48, 4, 4]);
        // the input passes through unchanged as the leading channels
        assert_eq!(y.data()[..16 * 16], x.data()[..16 * 16]);
    }

    #[test]
    fn tiny_preset_is_24_wide() {
        let cfg = DenseConfig::tiny();
        assert_eq!(cfg.block_channels(), vec![16, 24]);
        assert_eq!(cfg.block_sizes().unwrap(), vec![16, 8]);
        let mut branch = build_dense(&cfg, "dense", &mut rng(3)).unwrap();
        assert_eq!(branch.feature_len(), 24);
        assert_eq!(branch.block_out_channels(), vec![16, 24]);
        let tape = Tape::new();
        let x = tape.constant(&Tensor::uniform(vec![2, 3, 32, 32], 0.0, 1.0, &mut rng(4)));
        for mode in [Mode::Train, Mode::Eval] {
            let y = branch.forward(&tape, x, mode).unwrap();
            assert_eq!(y.shape(), vec![2, 24]);
            assert!(y.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn full_preset_is_1664_wide() {
        let cfg = DenseConfig::full();
        assert_eq!(cfg.block_channels(), vec![256, 512, 1280, 1664]);
        assert_eq!(cfg.block_sizes().unwrap(), vec![56, 28, 14, 7]);
        assert_eq!(cfg.feature_dim(), 1664);
    }

    #[test]
    fn spatial_exhaustion_is_a_config_error() {
        let mut cfg = DenseConfig::tiny();
        cfg.input_size = 4;
        cfg.block_layers = vec![1, 1, 1, 1];
        assert!(matches!(
            build_dense(&cfg, "d", &mut rng(5)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_compression_is_rejected() {
        let mut cfg = DenseConfig::tiny();
        cfg.compression = 0.0;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn channel_law(c0 in 1usize..64, layers in 1usize..8, k in 1usize..16) {
            let block = DenseBlock::new("b", c0, layers, k, 4, &mut rng(0));
            prop_assert_eq!(block.out_channels(), c0 + layers * k);
        }

        #[test]
        fn built_widths_follow_the_closed_form(
            c0 in 1usize..24,
            k in 1usize..8,
            blocks in proptest::collection::vec(1usize..4, 1..4),
            theta in prop_oneof![Just(0.5), Just(1.0), Just(0.25)],
        ) {
            let cfg = DenseConfig {
                input_size: 64,
                stem_channels: c0,
                stem_kernel: 3,
                stem_stride: 2,
                stem_pool: false,
                growth_rate: k,
                bottleneck_factor: 1,
                block_layers: blocks.clone(),
                compression: theta,
            };
            // closed form evaluated independently of DenseConfig
            let mut c = c0;
            for (i, l) in blocks.iter().enumerate() {
                c += l * k;
                if i + 1 < blocks.len() {
                    c = ((c as f64 * theta).floor() as usize).max(1);
                }
            }
            let branch = build_dense(&cfg, "d", &mut rng(0)).unwrap();
            prop_assert_eq!(branch.feature_len(), c);
            prop_assert_eq!(cfg.feature_dim(), c);
        }
    }
}
