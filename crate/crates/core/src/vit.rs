//! Vision Transformer branch.
//!
//! The image is cut into non-overlapping `P×P` patches, each flattened
//! channel-major and projected to `d` dimensions. A learned class token is
//! prepended, learned positional embeddings are added, and the sequence
//! passes through pre-norm encoder layers (LN → MHSA → residual, LN → MLP →
//! residual). The branch emits the final-normalized class token, or the mean
//! over all tokens when `pool` is `Mean`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Dense, DepthwiseConv2d, LayerNorm};
use crate::module::{join, Module, Parameter};
use crate::tensor::{Tape, Tensor, Var};

const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VitPool {
    #[default]
    ClassToken,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden_dim: usize,
    /// Adds a 3×3 depthwise conv over the patch grid inside each MLP.
    #[serde(default)]
    pub local_mlp: bool,
    #[serde(default)]
    pub pool: VitPool,
}

impl VitConfig {
    /// 32×32 input, 8×8 patches, two layers of width 32.
    pub fn tiny() -> Self {
        Self {
            input_size: 32,
            patch_size: 8,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            mlp_hidden_dim: 64,
            local_mlp: false,
            pool: VitPool::ClassToken,
        }
    }

    /// ViT-Base/16 on 224×224 input.
    pub fn full() -> Self {
        Self {
            input_size: 224,
            patch_size: 16,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_hidden_dim: 3072,
            local_mlp: false,
            pool: VitPool::ClassToken,
        }
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size.max(1)
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.input_size == 0
            || !self.input_size.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "vit: input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.num_heads == 0
            || self.embed_dim == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return Err(Error::Config(format!(
                "vit: embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.mlp_hidden_dim == 0 {
            return Err(Error::Config(
                "vit: layers and MLP width must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `[b, c, s, s]` → `[b, (s/P)², c·P·P]`, patches in row-major scan order and
/// each patch flattened channel-major, then row-major within the channel.
pub fn patchify<'t>(x: Var<'t>, patch: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 4
        || patch == 0
        || !shape[2].is_multiple_of(patch)
        || !shape[3].is_multiple_of(patch)
    {
        return Err(Error::dim("patchify", &shape, &[patch, patch]));
    }
    let (b, c, gh, gw) = (shape[0], shape[1], shape[2] / patch, shape[3] / patch);
    x.reshape(vec![b, c, gh, patch, gw, patch])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(vec![b, gh * gw, c * patch * patch])
}

/// Stacks `b` copies of `x` along a new leading axis.
fn repeat_batch<'t>(x: Var<'t>, b: usize) -> Result<Var<'t>> {
    let mut shape = x.shape();
    shape.insert(0, 1);
    let one = x.reshape(shape)?;
    Var::concat(&vec![one; b], 0)
}

#[derive(Clone, Debug)]
struct PatchEmbedding {
    patch_size: usize,
    proj: Dense,
    class_token: Parameter,
    position: Parameter,
}

impl PatchEmbedding {
    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let b = x.shape()[0];
        let tokens = self.proj.forward(tape, patchify(x, self.patch_size)?)?;
        let d = self.proj.output_dim();
        let cls = repeat_batch(tape.param(&self.class_token), b)?.reshape(vec![b, 1, d])?;
        let seq = Var::concat(&[cls, tokens], 1)?;
        seq.add(repeat_batch(tape.param(&self.position), b)?)
    }
}

impl Module for PatchEmbedding {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.proj.visit(f);
        f(&self.class_token);
        f(&self.position);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.proj.visit_mut(f);
        f(&mut self.class_token);
        f(&mut self.position);
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Clone, Debug)]
pub struct Attention {
    num_heads: usize,
    qkv: Dense,
    out: Dense,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, num_heads: usize, rng: &mut R) -> Self {
        Self {
            num_heads,
            qkv: Dense::new(&join(name, "qkv"), dim, 3 * dim, rng),
            out: Dense::new(&join(name, "out"), dim, dim, rng),
        }
    }

    /// `[b, t, d]` → output `[b, t, d]` and attention weights `[b·h, t, t]`.
    pub fn forward_with_weights<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.out.output_dim() {
            return Err(Error::dim(
                "attention",
                &shape,
                &[0, 0, self.out.output_dim()],
            ));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.num_heads;
        let hd = d / h;
        let qkv = self
            .qkv
            .forward(tape, x)?
            .reshape(vec![b, t, 3, h, hd])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i| -> Result<Var<'t>> { qkv.slice(0, i, 1)?.reshape(vec![b * h, t, hd]) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = q.matmul_transposed(k)?.scale(1.0 / (hd as f64).sqrt());
        let weights = scores.softmax(2)?;
        tape.probe_attention(weights);
        let ctx = weights
            .matmul(v)?
            .reshape(vec![b, h, t, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![b, t, d])?;
        Ok((self.out.forward(tape, ctx)?, weights))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(tape, x)?.0)
    }
}

impl Module for Attention {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.qkv.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.qkv.visit_mut(f);
        self.out.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    fc1: Dense,
    local: Option<DepthwiseConv2d>,
    fc2: Dense,
}

impl Mlp {
    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = self.fc1.forward(tape, x)?.gelu();
        if let Some(dw) = &self.local {
            h = local_mix(tape, dw, h)?;
        }
        self.fc2.forward(tape, h)
    }
}

/// Depthwise conv over the patch grid; the class token bypasses it.
fn local_mix<'t>(tape: &'t Tape, dw: &DepthwiseConv2d, h: Var<'t>) -> Result<Var<'t>> {
    let shape = h.shape();
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let n = t - 1;
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::contract(
            "local_mlp",
            "patch tokens do not form a square grid",
        ));
    }
    let cls = h.slice(1, 0, 1)?;
    let grid = h
        .slice(1, 1, n)?
        .permute(&[0, 2, 1])?
        .reshape(vec![b, c, g, g])?;
    let mixed = dw
        .forward(tape, grid)?
        .reshape(vec![b, c, n])?
        .permute(&[0, 2, 1])?;
    Var::concat(&[cls, mixed], 1)
}

impl Module for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.fc1.visit(f);
        if let Some(dw) = &self.local {
            dw.visit(f);
        }
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.fc1.visit_mut(f);
        if let Some(dw) = &mut self.local {
            dw.visit_mut(f);
        }
        self.fc2.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    attention: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl EncoderLayer {
    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let x = x.add(self.attention.forward(tape, self.norm1.forward(tape, x)?)?)?;
        x.add(self.mlp.forward(tape, self.norm2.forward(tape, x)?)?)
    }
}

impl Module for EncoderLayer {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.norm1.visit(f);
        self.attention.visit(f);
        self.norm2.visit(f);
        self.mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.norm1.visit_mut(f);
        self.attention.visit_mut(f);
        self.norm2.visit_mut(f);
        self.mlp.visit_mut(f);
    }
}

/// Shapes through the embedding and the first attention block for one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VitShapeTrace {
    pub patches: [usize; 2],
    pub tokens: [usize; 2],
    pub qkv: [usize; 2],
    pub qkv_split: [usize; 3],
    pub heads: [usize; 3],
    pub attention: [usize; 3],
    pub output: usize,
}

#[derive(Clone, Debug)]
pub struct VitBranch {
    config: VitConfig,
    embed: PatchEmbedding,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

pub fn build_vit<R: Rng + ?Sized>(
    config: &VitConfig,
    prefix: &str,
    rng: &mut R,
) -> Result<VitBranch> {
    config.validate()?;
    let d = config.embed_dim;
    let p = config.patch_size;
    let mut proj = Dense::new(&join(prefix, "patch_proj"), 3 * p * p, d, rng);
    proj.bias.tensor = Tensor::zeros(vec![d]);
    let embed = PatchEmbedding {
        patch_size: p,
        proj,
        class_token: Parameter::weight(
            join(prefix, "class_token"),
            Tensor::randn(vec![1, d], EMBED_INIT_STD, rng),
        ),
        position: Parameter::weight(
            join(prefix, "position"),
            Tensor::randn(vec![config.num_patches() + 1, d], EMBED_INIT_STD, rng),
        ),
    };
    let layers = (0..config.num_layers)
        .map(|i| {
            let name = join(prefix, &format!("layer{i}"));
            let hidden = config.mlp_hidden_dim;
            EncoderLayer {
                norm1: LayerNorm::new(&join(&name, "norm1"), d),
                attention: Attention::new(&join(&name, "attn"), d, config.num_heads, rng),
                norm2: LayerNorm::new(&join(&name, "norm2"), d),
                mlp: Mlp {
                    fc1: Dense::new(&join(&name, "fc1"), d, hidden, rng),
                    local: config
                        .local_mlp
                        .then(|| DepthwiseConv2d::new(&join(&name, "local"), hidden, 3, 1, 1, rng)),
                    fc2: Dense::new(&join(&name, "fc2"), hidden, d, rng),
                },
            }
        })
        .collect();
    Ok(VitBranch {
        config: config.clone(),
        embed,
        layers,
        final_norm: LayerNorm::new(&join(prefix, "final_norm"), d),
    })
}

impl VitBranch {
    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn feature_len(&self) -> usize {
        self.final_norm.gamma.tensor.numel()
    }

    /// Shape trace derived from the constructed parameter shapes.
    pub fn shape_trace(&self) -> VitShapeTrace {
        let n = self.embed.position.tensor.shape()[0] - 1;
        let patch_len = self.embed.proj.input_dim();
        let d = self.embed.proj.output_dim();
        let t = n + 1;
        let attn = &self.layers[0].attention;
        let qkv = attn.qkv.output_dim();
        let h = attn.num_heads;
        VitShapeTrace {
            patches: [n, patch_len],
            tokens: [t, d],
            qkv: [t, qkv],
            qkv_split: [3, t, qkv / 3],
            heads: [h, t, qkv / 3 / h],
            attention: [h, t, t],
            output: self.feature_len(),
        }
    }

    /// Normalized token sequence `[b, t, d]`.
    pub fn encode<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let s = self.config.input_size;
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != [3, s, s] {
            return Err(Error::dim("vit_forward", &shape, &[0, 3, s, s]));
        }
        let mut h = self.embed.forward(tape, x)?;
        for layer in &self.layers {
            h = layer.forward(tape, h)?;
        }
        self.final_norm.forward(tape, h)
    }

    /// `[b, 3, s, s]` → `[b, d]`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.encode(tape, x)?;
        match self.config.pool {
            VitPool::ClassToken => {
                let shape = h.shape();
                h.slice(1, 0, 1)?.reshape(vec![shape[0], shape[2]])
            }
            VitPool::Mean => h.mean_axis(1),
        }
    }
}

impl Module for VitBranch {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.embed.visit(f);
        self.layers.iter().for_each(|l| l.visit(f));
        self.final_norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.embed.visit_mut(f);
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
        self.final_norm.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, CheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn patchify_order_matches_index_arithmetic() {
        let (c, s, p) = (3, 8, 4);
        let img = Tensor::from_fn(vec![1, c, s, s], |i| i as f64);
        let tape = Tape::new();
        let out = patchify(tape.constant(&img), p).unwrap();
        assert_eq!(out.shape(), vec![1, 4, c * p * p]);
        let data = out.data();
        let g = s / p;
        for patch in 0..g * g {
            let (pr, pc) = (patch / g, patch % g);
            for ch in 0..c {
                for r in 0..p {
                    for col in 0..p {
                        let want = img.at(&[0, ch, pr * p + r, pc * p + col]);
                        let got = data[patch * c * p * p + (ch * p + r) * p + col];
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }

    #[test]
    fn patchify_224_by_16() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![1, 3, 224, 224]));
        assert_eq!(patchify(x, 16).unwrap().shape(), vec![1, 196, 768]);
    }

    #[test]
    fn full_trace_on_112_input() {
        let mut cfg = VitConfig::full();
        cfg.input_size = 112;
        cfg.num_layers = 1;
        let branch = build_vit(&cfg, "vit", &mut rng(1)).unwrap();
        let trace = branch.shape_trace();
        assert_eq!(trace.patches, [49, 768]);
        assert_eq!(trace.tokens, [50, 768]);
        assert_eq!(trace.qkv, [50, 2304]);
        assert_eq!(trace.qkv_split, [3, 50, 768]);
        assert_eq!(trace.heads, [12, 50, 64]);
        assert_eq!(trace.output, 768);
    }

    #[test]
    fn tiny_forward_runs_with_both_pools() {
        let x = Tensor::uniform(vec![2, 3, 32, 32], 0.0, 1.0, &mut rng(2));
        for pool in [VitPool::ClassToken, VitPool::Mean] {
            for local_mlp in [false, true] {
                let cfg = VitConfig {
                    pool,
                    local_mlp,
                    ..VitConfig::tiny()
                };
                let branch = build_vit(&cfg, "vit", &mut rng(3)).unwrap();
                let tape = Tape::new();
                let y = branch.forward(&tape, tape.constant(&x)).unwrap();
                assert_eq!(y.shape(), vec![2, 32]);
                assert!(y.data().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let branch = build_vit(&VitConfig::tiny(), "vit", &mut rng(4)).unwrap();
        let tape = Tape::new();
        tape.enable_attention_probe();
        let x = Tensor::uniform(vec![2, 3, 32, 32], -3.0, 3.0, &mut rng(5));
        branch.forward(&tape, tape.constant(&x)).unwrap();
        let errors = tape.attention_row_errors().unwrap();
        assert_eq!(errors.len(), 2);
        assert!(errors.iter().all(|&e| e <= 1e-9), "{errors:?}");
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        // zero q/k weights make every score 0 → uniform rows
        let mut attn = Attention::new("a", 4, 2, &mut rng(6));
        let mut w = attn.qkv.weight.tensor.clone();
        let cols = 12;
        for r in 0..4 {
            for c in 0..8 {
                w.data_mut()[r * cols + c] = 0.0;
            }
        }
        attn.qkv.weight.tensor = w;
        attn.qkv.bias.tensor = Tensor::zeros(vec![12]);
        let tape = Tape::new();
        let x = tape.constant(&Tensor::uniform(vec![1, 2, 4], -1.0, 1.0, &mut rng(7)));
        let (_, weights) = attn.forward_with_weights(&tape, x).unwrap();
        assert_eq!(weights.shape(), vec![2, 2, 2]);
        assert!(weights.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn indivisible_sizes_are_config_errors() {
        let mut cfg = VitConfig::tiny();
        cfg.input_size = 30;
        assert!(matches!(
            build_vit(&cfg, "v", &mut rng(8)),
            Err(Error::Config(_))
        ));
        let mut cfg = VitConfig::tiny();
        cfg.num_heads = 3;
        assert!(matches!(
            build_vit(&cfg, "v", &mut rng(8)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let attn = Attention::new("a", 4, 2, &mut rng(9));
        let x = Tensor::uniform(vec![1, 3, 4], -1.0, 1.0, &mut rng(10));
        let probe = Tensor::uniform(vec![1, 3, 4], -1.0, 1.0, &mut rng(11));
        let report = check_gradients(
            |tape, v| {
                let y = attn.forward(tape, v[0])?;
                Ok(y.mul(tape.constant(&probe))?.sum())
            },
            &[x],
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn parameter_names_are_prefixed_and_unique() {
        let branch = build_vit(&VitConfig::tiny(), "vit", &mut rng(12)).unwrap();
        let names = branch.param_names();
        assert!(names.iter().all(|n| n.starts_with("vit.")));
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }
}
