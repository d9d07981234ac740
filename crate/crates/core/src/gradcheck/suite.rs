//! Named finite-difference cases over ops, layers, tiny backbones and the
//! tiny ensemble.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{check_gradients, check_module_gradients, CheckOptions, GradReport};
use crate::dense::{build_dense, DenseConfig};
use crate::ensemble::{build_ensemble, EnsembleConfig};
use crate::error::{Error, Result};
use crate::layers::{
    global_average_pool, BatchNorm, Conv2d, Dense, DepthwiseConv2d, Dropout, LayerNorm,
};
use crate::mobile::{build_mobile, MobileConfig};
use crate::module::{Mode, Module, Parameter};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::one_hot;
use crate::vit::{build_vit, patchify, Attention, VitConfig};

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Layers,
    Backbones,
    Ensemble,
    All,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ops" => Scope::Ops,
            "layers" => Scope::Layers,
            "backbones" => Scope::Backbones,
            "ensemble" => Scope::Ensemble,
            "all" => Scope::All,
            _ => return Err(Error::Config(format!("unknown gradcheck scope {s:?}"))),
        })
    }
}

type Runner = Box<dyn Fn(&mut ChaCha8Rng, &CheckOptions) -> Result<GradReport>>;

pub struct GradCase {
    pub name: String,
    pub scope: Scope,
    run: Runner,
}

impl fmt::Debug for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GradCase")
            .field("name", &self.name)
            .field("scope", &self.scope)
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub scope: Scope,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub tolerance: f64,
    pub results: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }

    pub fn worst(&self) -> f64 {
        self.results
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{:<4} {:<10} {:<28} {:.3e} ({} coords)",
                if r.passed { "ok" } else { "FAIL" },
                format!("{:?}", r.scope).to_lowercase(),
                r.name,
                r.max_rel_error,
                r.coords_checked
            )?;
        }
        Ok(())
    }
}

/// Scalarizes `y` with fixed, non-uniform weights so every output
/// coordinate contributes a distinct amount.
fn weigh<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let w = Tensor::from_fn(y.shape(), |i| (0.7 * i as f64 + 0.3).cos());
    Ok(y.mul(tape.constant(&w))?.sum())
}

type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// Case over plain tensors; each input is `(shape, lo, hi)`.
fn op(name: &str, inputs: &'static [(&'static [usize], f64, f64)], f: OpFn) -> GradCase {
    GradCase {
        name: name.to_string(),
        scope: Scope::Ops,
        run: Box::new(move |rng, opts| {
            let xs: Vec<Tensor> = inputs
                .iter()
                .map(|(shape, lo, hi)| Tensor::uniform(shape.to_vec(), *lo, *hi, rng))
                .collect();
            check_gradients(|tape, v| weigh(tape, f(tape, v)?), &xs, opts)
        }),
    }
}

const FULL: f64 = 2.0;

fn op_cases() -> Vec<GradCase> {
    const A: &[usize] = &[3, 4];
    vec![
        op("add", &[(A, -FULL, FULL), (A, -FULL, FULL)], |_, v| {
            v[0].add(v[1])
        }),
        op(
            "add_scalar_broadcast",
            &[(A, -FULL, FULL), (&[], -FULL, FULL)],
            |_, v| v[0].add(v[1]),
        ),
        op("sub", &[(A, -FULL, FULL), (A, -FULL, FULL)], |_, v| {
            v[0].sub(v[1])
        }),
        op("mul", &[(A, -FULL, FULL), (A, -FULL, FULL)], |_, v| {
            v[0].mul(v[1])
        }),
        op("div", &[(A, -FULL, FULL), (A, 0.5, FULL)], |_, v| {
            v[0].div(v[1])
        }),
        op("scale_shift_neg", &[(A, -FULL, FULL)], |_, v| {
            Ok(v[0].scale(1.7).add_scalar(0.3).neg())
        }),
        op("exp", &[(A, -1.0, 1.0)], |_, v| Ok(v[0].exp())),
        op("tanh", &[(A, -FULL, FULL)], |_, v| Ok(v[0].tanh())),
        op("relu", &[(A, -FULL, FULL)], |_, v| Ok(v[0].relu())),
        op("relu6", &[(A, -2.0, 8.0)], |_, v| Ok(v[0].relu6())),
        op("gelu", &[(A, -3.0, 3.0)], |_, v| Ok(v[0].gelu())),
        op("mul_const", &[(A, -FULL, FULL)], |_, v| {
            let mask = (0..12).map(|i| (i % 3) as f64 * 0.5).collect();
            v[0].mul_const(std::sync::Arc::new(mask))
        }),
        op(
            "add_bias",
            &[(&[2, 3, 2], -FULL, FULL), (&[3], -FULL, FULL)],
            |_, v| v[0].add_bias(v[1], 1),
        ),
        op(
            "matmul",
            &[(&[3, 4], -FULL, FULL), (&[4, 2], -FULL, FULL)],
            |_, v| v[0].matmul(v[1]),
        ),
        op(
            "matmul_batched",
            &[(&[2, 3, 4], -FULL, FULL), (&[2, 4, 2], -FULL, FULL)],
            |_, v| v[0].matmul(v[1]),
        ),
        op(
            "matmul_transposed",
            &[(&[2, 3, 4], -FULL, FULL), (&[2, 5, 4], -FULL, FULL)],
            |_, v| v[0].matmul_transposed(v[1]),
        ),
        op("reshape_permute", &[(&[2, 3, 4], -FULL, FULL)], |_, v| {
            v[0].reshape(vec![6, 4])?
                .reshape(vec![2, 3, 4])?
                .permute(&[2, 0, 1])
        }),
        op("transpose_last2", &[(&[2, 3, 4], -FULL, FULL)], |_, v| {
            v[0].transpose_last2()
        }),
        op(
            "slice_concat",
            &[(&[2, 5], -FULL, FULL), (&[2, 2], -FULL, FULL)],
            |_, v| Var::concat(&[v[0].slice(1, 1, 3)?, v[1]], 1),
        ),
        op("sum_mean", &[(&[2, 3, 4], -FULL, FULL)], |_, v| {
            v[0].mean_axis(1)?.sum().add(v[0].mean())
        }),
        op(
            "conv2d",
            &[
                (&[2, 2, 4, 4], -FULL, FULL),
                (&[3, 2, 3, 3], -1.0, 1.0),
                (&[3], -1.0, 1.0),
            ],
            |_, v| v[0].conv2d(v[1], Some(v[2]), 2, 1),
        ),
        op(
            "conv2d_pointwise",
            &[(&[2, 3, 3, 3], -FULL, FULL), (&[2, 3, 1, 1], -1.0, 1.0)],
            |_, v| v[0].conv2d(v[1], None, 1, 0),
        ),
        op(
            "depthwise_conv2d",
            &[(&[1, 3, 4, 4], -FULL, FULL), (&[3, 1, 3, 3], -1.0, 1.0)],
            |_, v| v[0].depthwise_conv2d(v[1], 1, 1),
        ),
        op("avg_pool2d", &[(&[2, 2, 4, 4], -FULL, FULL)], |_, v| {
            v[0].avg_pool2d(2, 2)
        }),
        op("softmax", &[(&[3, 5], -FULL, FULL)], |_, v| v[0].softmax(1)),
        op(
            "cross_entropy_softmax",
            &[(&[2, 3], -FULL, FULL)],
            |_, v| v[0].softmax(1)?.cross_entropy(&one_hot(&[2, 0], 3)),
        ),
        op(
            "softmax_cross_entropy",
            &[(&[3, 3], -FULL, FULL)],
            |_, v| v[0].softmax_cross_entropy(&one_hot(&[1, 0, 2], 3), Some(&[0.5, 1.0, 2.0])),
        ),
        op(
            "batch_norm_train",
            &[
                (&[4, 3, 2], -FULL, FULL),
                (&[3], 0.5, 1.5),
                (&[3], -1.0, 1.0),
            ],
            |_, v| Ok(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0),
        ),
        op(
            "batch_norm_eval",
            &[
                (&[2, 3, 2], -FULL, FULL),
                (&[3], 0.5, 1.5),
                (&[3], -1.0, 1.0),
            ],
            |_, v| v[0].batch_norm_eval(v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.0, 2.0], 1e-5),
        ),
        op(
            "layer_norm",
            &[
                (&[2, 3, 5], -FULL, FULL),
                (&[5], 0.5, 1.5),
                (&[5], -1.0, 1.0),
            ],
            |_, v| v[0].layer_norm(v[1], v[2], 1e-6),
        ),
    ]
}

/// Case over a module's parameters plus one random input.
fn module_case<M, B, F>(
    name: &str,
    scope: Scope,
    input: &'static [usize],
    build: B,
    f: F,
) -> GradCase
where
    M: Module + 'static,
    B: Fn(&mut ChaCha8Rng) -> Result<M> + 'static,
    F: for<'t> Fn(&mut M, &'t Tape, Var<'t>) -> Result<Var<'t>> + 'static,
{
    GradCase {
        name: name.to_string(),
        scope,
        run: Box::new(move |rng, opts| {
            let mut module = build(rng)?;
            let x = Tensor::uniform(input.to_vec(), -FULL, FULL, rng);
            check_module_gradients(
                &mut module,
                std::slice::from_ref(&x),
                |m, tape, v| weigh(tape, f(m, tape, v[0])?),
                opts,
            )
        }),
    }
}

/// Wraps a stateless layer so it can be checked as a module.
struct Stateless;

impl Module for Stateless {
    fn visit(&self, _: &mut dyn FnMut(&Parameter)) {}

    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Parameter)) {}
}

fn layer_cases() -> Vec<GradCase> {
    let l = Scope::Layers;
    vec![
        module_case(
            "conv2d_layer",
            l,
            &[2, 2, 5, 5],
            |r| Ok(Conv2d::new("conv", 2, 3, 3, 2, 1, true, r)),
            |m, t, x| m.forward(t, x),
        ),
        module_case(
            "depthwise_layer",
            l,
            &[2, 3, 4, 4],
            |r| Ok(DepthwiseConv2d::new("dw", 3, 3, 2, 1, r)),
            |m, t, x| m.forward(t, x),
        ),
        module_case(
            "batch_norm_layer",
            l,
            &[3, 4, 2, 2],
            |_| Ok(BatchNorm::new("bn", 4)),
            |m, t, x| m.forward(t, x, Mode::Train),
        ),
        module_case(
            "layer_norm_layer",
            l,
            &[2, 3, 6],
            |_| Ok(LayerNorm::new("ln", 6)),
            |m, t, x| m.forward(t, x),
        ),
        module_case(
            "dense_layer",
            l,
            &[2, 3, 5],
            |r| Ok(Dense::new("fc", 5, 4, r)),
            |m, t, x| m.forward(t, x),
        ),
        module_case(
            "dropout_layer",
            l,
            &[4, 8],
            |_| Ok(DropoutCase(Dropout::new(0.5, 3)?)),
            |m, _, x| {
                m.0.set_counter(0);
                m.0.forward(x, Mode::Train)
            },
        ),
        module_case(
            "global_average_pool",
            l,
            &[2, 3, 3, 3],
            |_| Ok(Stateless),
            |_, _, x| global_average_pool(x),
        ),
        module_case(
            "attention",
            l,
            &[2, 3, 8],
            |r| Ok(Attention::new("attn", 8, 2, r)),
            |m, t, x| m.forward(t, x),
        ),
        module_case(
            "patchify",
            l,
            &[1, 3, 4, 4],
            |_| Ok(Stateless),
            |_, _, x| patchify(x, 2),
        ),
    ]
}

struct DropoutCase(Dropout);

impl Module for DropoutCase {
    fn visit(&self, _: &mut dyn FnMut(&Parameter)) {}

    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Parameter)) {}
}

fn backbone_cases() -> Vec<GradCase> {
    let b = Scope::Backbones;
    const X: &[usize] = &[2, 3, 32, 32];
    vec![
        module_case(
            "mobile_tiny",
            b,
            X,
            |r| build_mobile(&MobileConfig::tiny(), "mobile", r),
            |m, t, x| m.forward(t, x, Mode::Train),
        ),
        module_case(
            "dense_tiny",
            b,
            X,
            |r| build_dense(&DenseConfig::tiny(), "dense", r),
            |m, t, x| m.forward(t, x, Mode::Train),
        ),
        module_case(
            "vit_tiny",
            b,
            X,
            |r| build_vit(&VitConfig::tiny(), "vit", r),
            |m, t, x| m.forward(t, x),
        ),
    ]
}

fn ensemble_case(name: &str, frozen: bool) -> GradCase {
    GradCase {
        name: name.to_string(),
        scope: Scope::Ensemble,
        run: Box::new(move |rng, opts| {
            let cfg = EnsembleConfig {
                freeze_backbones: frozen,
                ..EnsembleConfig::tiny()
            };
            let mut model = build_ensemble(&cfg)?;
            let images = Tensor::uniform(vec![4, 3, 32, 32], 0.0, 1.0, rng);
            let targets = one_hot(&[0, 1, 1, 0], 2);
            check_module_gradients(
                &mut model,
                &[],
                |m, tape, _| {
                    m.set_dropout_counter(0);
                    m.logits(tape, &images, Mode::Train)?
                        .softmax_cross_entropy(&targets, None)
                },
                opts,
            )
        }),
    }
}

/// Every case, in scope order.
pub fn suite() -> Vec<GradCase> {
    let mut cases = op_cases();
    cases.extend(layer_cases());
    cases.extend(backbone_cases());
    cases.push(ensemble_case("ensemble_head_frozen", true));
    cases.push(ensemble_case("ensemble_end_to_end", false));
    cases
}

/// Squaring op whose backward rule wrongly returns the incoming gradient.
pub fn broken_fixture() -> GradCase {
    op("broken_square", &[(&[4], 0.5, FULL)], |tape, v| {
        let data: Vec<f64> = v[0].data().iter().map(|x| x * x).collect();
        tape.custom_op(&[v[0]], vec![4], data, |g| vec![g.to_vec()])
    })
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a, so each case's inputs do not depend on its position
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Runs the cases in `scope` (all of them for [`Scope::All`]).
pub fn run_cases(cases: &[GradCase], scope: Scope, seed: u64) -> Result<SuiteReport> {
    let mut results = Vec::new();
    for case in cases
        .iter()
        .filter(|c| scope == Scope::All || c.scope == scope)
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(name_stream(&case.name));
        let opts = CheckOptions {
            seed: seed ^ name_stream(&case.name),
            ..CheckOptions::default()
        };
        let report = (case.run)(&mut rng, &opts)?;
        log::debug!("{}: {:.3e}", case.name, report.max_rel_error);
        results.push(CaseResult {
            name: case.name.clone(),
            scope: case.scope,
            max_rel_error: report.max_rel_error,
            coords_checked: report.coords_checked,
            passed: report.max_rel_error <= TOLERANCE,
        });
    }
    Ok(SuiteReport {
        seed,
        tolerance: TOLERANCE,
        results,
    })
}

pub fn run_suite(scope: Scope, seed: u64) -> Result<SuiteReport> {
    run_cases(&suite(), scope, seed)
}
