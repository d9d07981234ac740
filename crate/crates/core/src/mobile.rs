//! MobileNet-style branch built from depthwise-separable blocks.
//!
//! Two block forms are supported. A block without an expansion factor is the
//! plain separable pair: depthwise 3×3 → BN → activation → pointwise 1×1 →
//! BN → activation. A block with an expansion factor is an inverted residual:
//! optional 1×1 expansion → BN → activation → depthwise → BN → activation →
//! linear 1×1 projection → BN, plus an identity shortcut when the stride is 1
//! and the channel count is unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{global_average_pool, Activation, BatchNorm, Conv2d, DepthwiseConv2d};
use crate::module::{join, Mode, Module, Parameter};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    /// `None` for a plain separable block, `Some(t)` for an inverted residual
    /// with hidden width `t·in_channels`.
    pub expansion: Option<usize>,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub const fn separable(out_channels: usize, stride: usize) -> Self {
        Self {
            expansion: None,
            out_channels,
            stride,
        }
    }

    pub const fn inverted(expansion: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            expansion: Some(expansion),
            out_channels,
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobileConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub blocks: Vec<BlockSpec>,
    /// Width of the emitted feature vector. When it differs from the last
    /// block's width a 1×1 conv → BN → activation head widens to it.
    pub feature_dim: usize,
    pub activation: Activation,
}

impl MobileConfig {
    /// Three separable blocks on 32×32 input, 32 features.
    pub fn tiny() -> Self {
        Self {
            input_size: 32,
            stem_channels: 8,
            stem_stride: 2,
            blocks: vec![
                BlockSpec::separable(8, 1),
                BlockSpec::separable(16, 2),
                BlockSpec::separable(32, 2),
            ],
            feature_dim: 32,
            activation: Activation::Relu,
        }
    }

    /// MobileNetV2 layout on 224×224 input with the 1280-wide head.
    pub fn full() -> Self {
        // (expansion, channels, repeats, first stride)
        const TABLE: [(usize, usize, usize, usize); 7] = [
            (1, 16, 1, 1),
            (6, 24, 2, 2),
            (6, 32, 3, 2),
            (6, 64, 4, 2),
            (6, 96, 3, 1),
            (6, 160, 3, 2),
            (6, 320, 1, 1),
        ];
        let blocks = TABLE
            .iter()
            .flat_map(|&(t, c, n, s)| {
                (0..n).map(move |i| BlockSpec::inverted(t, c, if i == 0 { s } else { 1 }))
            })
            .collect();
        Self {
            input_size: 224,
            stem_channels: 32,
            stem_stride: 2,
            blocks,
            feature_dim: 1280,
            activation: Activation::Relu6,
        }
    }

    pub fn stride_product(&self) -> usize {
        self.blocks
            .iter()
            .fold(self.stem_stride, |acc, b| acc * b.stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("mobile: no blocks".into()));
        }
        if self.stem_stride == 0
            || self
                .blocks
                .iter()
                .any(|b| b.stride == 0 || b.out_channels == 0)
        {
            return Err(Error::Config(
                "mobile: strides and widths must be >= 1".into(),
            ));
        }
        if self.blocks.iter().any(|b| b.expansion == Some(0)) {
            return Err(Error::Config("mobile: expansion must be >= 1".into()));
        }
        let product = self.stride_product();
        if self.input_size == 0 || !self.input_size.is_multiple_of(product) {
            return Err(Error::Config(format!(
                "mobile: input size {} not divisible by stride product {product}",
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Block {
    Separable {
        dw: DepthwiseConv2d,
        bn_dw: BatchNorm,
        pw: Conv2d,
        bn_pw: BatchNorm,
    },
    Inverted {
        expand: Option<(Conv2d, BatchNorm)>,
        dw: DepthwiseConv2d,
        bn_dw: BatchNorm,
        project: Conv2d,
        bn_project: BatchNorm,
        residual: bool,
    },
}

impl Block {
    fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, spec: &BlockSpec, rng: &mut R) -> Self {
        let out = spec.out_channels;
        match spec.expansion {
            None => Block::Separable {
                dw: DepthwiseConv2d::new(&join(name, "dw"), in_ch, 3, spec.stride, 1, rng),
                bn_dw: BatchNorm::new(&join(name, "bn_dw"), in_ch),
                pw: Conv2d::new(&join(name, "pw"), in_ch, out, 1, 1, 0, false, rng),
                bn_pw: BatchNorm::new(&join(name, "bn_pw"), out),
            },
            Some(t) => {
                let hidden = in_ch * t;
                Block::Inverted {
                    expand: (t != 1).then(|| {
                        (
                            Conv2d::new(&join(name, "expand"), in_ch, hidden, 1, 1, 0, false, rng),
                            BatchNorm::new(&join(name, "bn_expand"), hidden),
                        )
                    }),
                    dw: DepthwiseConv2d::new(&join(name, "dw"), hidden, 3, spec.stride, 1, rng),
                    bn_dw: BatchNorm::new(&join(name, "bn_dw"), hidden),
                    project: Conv2d::new(&join(name, "project"), hidden, out, 1, 1, 0, false, rng),
                    bn_project: BatchNorm::new(&join(name, "bn_project"), out),
                    residual: spec.stride == 1 && in_ch == out,
                }
            }
        }
    }

    fn forward<'t>(
        &mut self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: Mode,
        act: Activation,
    ) -> Result<Var<'t>> {
        match self {
            Block::Separable {
                dw,
                bn_dw,
                pw,
                bn_pw,
            } => {
                let h = act.apply(bn_dw.forward(tape, dw.forward(tape, x)?, mode)?);
                Ok(act.apply(bn_pw.forward(tape, pw.forward(tape, h)?, mode)?))
            }
            Block::Inverted {
                expand,
                dw,
                bn_dw,
                project,
                bn_project,
                residual,
            } => {
                let mut h = x;
                if let Some((conv, bn)) = expand {
                    h = act.apply(bn.forward(tape, conv.forward(tape, h)?, mode)?);
                }
                h = act.apply(bn_dw.forward(tape, dw.forward(tape, h)?, mode)?);
                let y = bn_project.forward(tape, project.forward(tape, h)?, mode)?;
                if *residual {
                    y.add(x)
                } else {
                    Ok(y)
                }
            }
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            Block::Separable { pw, .. } => pw.out_channels(),
            Block::Inverted { project, .. } => project.out_channels(),
        }
    }
}

impl Module for Block {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        match self {
            Block::Separable {
                dw,
                bn_dw,
                pw,
                bn_pw,
            } => {
                dw.visit(f);
                bn_dw.visit(f);
                pw.visit(f);
                bn_pw.visit(f);
            }
            Block::Inverted {
                expand,
                dw,
                bn_dw,
                project,
                bn_project,
                ..
            } => {
                if let Some((c, b)) = expand {
                    c.visit(f);
                    b.visit(f);
                }
                dw.visit(f);
                bn_dw.visit(f);
                project.visit(f);
                bn_project.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match self {
            Block::Separable {
                dw,
                bn_dw,
                pw,
                bn_pw,
            } => {
                dw.visit_mut(f);
                bn_dw.visit_mut(f);
                pw.visit_mut(f);
                bn_pw.visit_mut(f);
            }
            Block::Inverted {
                expand,
                dw,
                bn_dw,
                project,
                bn_project,
                ..
            } => {
                if let Some((c, b)) = expand {
                    c.visit_mut(f);
                    b.visit_mut(f);
                }
                dw.visit_mut(f);
                bn_dw.visit_mut(f);
                project.visit_mut(f);
                bn_project.visit_mut(f);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct MobileBranch {
    config: MobileConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
    head: Option<(Conv2d, BatchNorm)>,
}

/// Builds the branch with parameter names under `prefix`.
pub fn build_mobile<R: Rng + ?Sized>(
    config: &MobileConfig,
    prefix: &str,
    rng: &mut R,
) -> Result<MobileBranch> {
    config.validate()?;
    let stem = Conv2d::new(
        &join(prefix, "stem"),
        3,
        config.stem_channels,
        3,
        config.stem_stride,
        1,
        false,
        rng,
    );
    let stem_bn = BatchNorm::new(&join(prefix, "stem_bn"), config.stem_channels);
    let mut in_ch = config.stem_channels;
    let mut blocks = Vec::with_capacity(config.blocks.len());
    for (i, spec) in config.blocks.iter().enumerate() {
        blocks.push(Block::new(
            &join(prefix, &format!("block{i}")),
            in_ch,
            spec,
            rng,
        ));
        in_ch = spec.out_channels;
    }
    let head = (config.feature_dim != in_ch).then(|| {
        (
            Conv2d::new(
                &join(prefix, "head"),
                in_ch,
                config.feature_dim,
                1,
                1,
                0,
                false,
                rng,
            ),
            BatchNorm::new(&join(prefix, "head_bn"), config.feature_dim),
        )
    });
    Ok(MobileBranch {
        config: config.clone(),
        stem,
        stem_bn,
        blocks,
        head,
    })
}

impl MobileBranch {
    pub fn config(&self) -> &MobileConfig {
        &self.config
    }

    /// Width of the pooled output, read off the constructed layers.
    pub fn feature_len(&self) -> usize {
        match &self.head {
            Some((conv, _)) => conv.out_channels(),
            None => self
                .blocks
                .last()
                .map_or(self.stem.out_channels(), Block::out_channels),
        }
    }

    /// `[b, 3, s, s]` → `[b, feature_dim]`.
    pub fn forward<'t>(&mut self, tape: &'t Tape, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let s = self.config.input_size;
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != [3, s, s] {
            return Err(Error::dim("mobile_forward", &shape, &[0, 3, s, s]));
        }
        let act = self.config.activation;
        let mut h = act.apply(
            self.stem_bn
                .forward(tape, self.stem.forward(tape, x)?, mode)?,
        );
        for block in &mut self.blocks {
            h = block.forward(tape, h, mode, act)?;
        }
        if let Some((conv, bn)) = &mut self.head {
            h = act.apply(bn.forward(tape, conv.forward(tape, h)?, mode)?);
        }
        global_average_pool(h)
    }
}

impl Module for MobileBranch {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.stem.visit(f);
        self.stem_bn.visit(f);
        self.blocks.iter().for_each(|b| b.visit(f));
        if let Some((c, b)) = &self.head {
            c.visit(f);
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem.visit_mut(f);
        self.stem_bn.visit_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        if let Some((c, b)) = &mut self.head {
            c.visit_mut(f);
            b.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, CheckOptions};
    use crate::tensor::Tensor;
    use crate::ParamKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn tiny_preset_emits_32_features() {
        let mut branch = build_mobile(&MobileConfig::tiny(), "mobile", &mut rng(1)).unwrap();
        assert_eq!(branch.feature_len(), 32);
        let tape = Tape::new();
        let x = tape.constant(&Tensor::uniform(vec![2, 3, 32, 32], 0.0, 1.0, &mut rng(2)));
        let y = branch.forward(&tape, x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), vec![2, 32]);
        assert!(y.data().iter().all(|v| v.is_finite()));
        let y = branch.forward(&tape, x, Mode::Train).unwrap();
        assert_eq!(y.shape(), vec![2, 32]);
    }

    #[test]
    fn full_preset_widths() {
        let cfg = MobileConfig::full();
        assert_eq!(cfg.stride_product(), 32);
        assert_eq!(cfg.blocks.len(), 17);
        cfg.validate().unwrap();
        let branch = build_mobile(&cfg, "mobile", &mut rng(3)).unwrap();
        assert_eq!(branch.feature_len(), 1280);
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let mut cfg = MobileConfig::tiny();
        assert_eq!(cfg.stride_product(), 8);
        cfg.input_size = 12;
        assert!(matches!(
            build_mobile(&cfg, "m", &mut rng(4)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn wrong_input_shape_is_a_dimension_error() {
        let mut branch = build_mobile(&MobileConfig::tiny(), "m", &mut rng(5)).unwrap();
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![1, 3, 16, 16]));
        assert!(matches!(
            branch.forward(&tape, x, Mode::Eval),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_input_traces_to_beta_through_every_stage() {
        // With zero input every conv outputs 0; BN maps 0 to beta (eval with
        // unit running stats, or train with zero batch variance); ReLU keeps
        // non-negative betas. Setting every beta to 0 gives the zero vector.
        let mut branch = build_mobile(&MobileConfig::tiny(), "m", &mut rng(6)).unwrap();
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![2, 3, 32, 32]));
        for mode in [Mode::Eval, Mode::Train] {
            let y = branch.forward(&tape, x, mode).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
        // last BN beta = 0.25 → pooled features are exactly 0.25 (train mode
        // normalizes a constant map to 0 before the shift)
        let Block::Separable { bn_pw, .. } = branch.blocks.last_mut().unwrap() else {
            unreachable!()
        };
        bn_pw.beta.tensor = Tensor::full(vec![32], 0.25);
        let y = branch.forward(&tape, x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn separable_parameter_count() {
        let (c, c_out, k) = (16, 32, 3);
        let block = Block::new("b", c, &BlockSpec::separable(c_out, 1), &mut rng(7));
        let mut conv_params = 0;
        let mut bn_params = 0;
        block.visit(&mut |p| {
            if p.kind == ParamKind::Weight {
                if p.name.contains("bn") {
                    bn_params += p.tensor.numel();
                } else {
                    conv_params += p.tensor.numel();
                }
            }
        });
        assert_eq!(conv_params, c * k * k + c * c_out);
        assert_eq!(bn_params, 2 * c + 2 * c_out);
        assert!(conv_params < c * c_out * k * k);
    }

    #[test]
    fn separable_pair_equals_composed_full_conv() {
        let (c, o) = (3, 4);
        let x = Tensor::uniform(vec![2, c, 6, 6], -1.0, 1.0, &mut rng(8));
        let dw = Tensor::uniform(vec![c, 1, 3, 3], -1.0, 1.0, &mut rng(9));
        let pw = Tensor::uniform(vec![o, c, 1, 1], -1.0, 1.0, &mut rng(10));
        let mut full = Tensor::zeros(vec![o, c, 3, 3]);
        for oc in 0..o {
            for ic in 0..c {
                for k in 0..9 {
                    full.data_mut()[(oc * c + ic) * 9 + k] =
                        pw.data()[oc * c + ic] * dw.data()[ic * 9 + k];
                }
            }
        }
        let tape = Tape::new();
        let xv = tape.constant(&x);
        for stride in [1, 2] {
            let sep = xv
                .depthwise_conv2d(tape.constant(&dw), stride, 1)
                .unwrap()
                .conv2d(tape.constant(&pw), None, 1, 0)
                .unwrap()
                .value();
            let fc = xv
                .conv2d(tape.constant(&full), None, stride, 1)
                .unwrap()
                .value();
            assert!(sep.max_abs_diff(&fc) <= 1e-10);
        }
    }

    #[test]
    fn inverted_residual_block_shapes_and_shortcut() {
        let mut cfg = MobileConfig::tiny();
        cfg.blocks = vec![
            BlockSpec::inverted(1, 8, 1),
            BlockSpec::inverted(4, 8, 1),
            BlockSpec::inverted(4, 16, 2),
        ];
        cfg.feature_dim = 40;
        cfg.activation = Activation::Relu6;
        let mut branch = build_mobile(&cfg, "m", &mut rng(11)).unwrap();
        assert_eq!(branch.feature_len(), 40);
        assert!(matches!(
            branch.blocks[1],
            Block::Inverted { residual: true, .. }
        ));
        assert!(matches!(
            branch.blocks[2],
            Block::Inverted {
                residual: false,
                ..
            }
        ));
        let tape = Tape::new();
        let x = tape.constant(&Tensor::uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut rng(12)));
        cfg.input_size = 16;
        branch.config.input_size = 16;
        assert_eq!(
            branch.forward(&tape, x, Mode::Train).unwrap().shape(),
            vec![2, 40]
        );
    }

    #[test]
    fn gradient_through_a_separable_block() {
        // dw, bn_dw γ/β, pw, bn_pw γ/β supplied as inputs, train-mode BN
        let mut r = rng(13);
        let inputs = vec![
            Tensor::uniform(vec![2, 2, 4, 4], -2.0, 2.0, &mut r),
            Tensor::uniform(vec![2, 1, 3, 3], -1.0, 1.0, &mut r),
            Tensor::uniform(vec![2], 0.5, 1.5, &mut r),
            Tensor::uniform(vec![2], -0.5, 0.5, &mut r),
            Tensor::uniform(vec![3, 2, 1, 1], -1.0, 1.0, &mut r),
            Tensor::uniform(vec![3], 0.5, 1.5, &mut r),
            Tensor::uniform(vec![3], -0.5, 0.5, &mut r),
        ];
        let probe = Tensor::uniform(vec![2, 3, 2, 2], -1.0, 1.0, &mut r);
        let report = check_gradients(
            |tape, v| {
                let h = v[0].depthwise_conv2d(v[1], 2, 1)?;
                let h = h.batch_norm_train(v[2], v[3], 1e-5)?.0.relu();
                let h = h.conv2d(v[4], None, 1, 0)?;
                let h = h.batch_norm_train(v[5], v[6], 1e-5)?.0.relu();
                Ok(h.mul(tape.constant(&probe))?.sum())
            },
            &inputs,
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
