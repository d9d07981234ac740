//! Central finite-difference checks of the tape's analytic gradients.

mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::module::{Module, Parameter};
use crate::tensor::{Tape, Tensor, Var};

pub use suite::{
    broken_fixture, run_cases, run_suite, suite, CaseResult, GradCase, Scope, SuiteReport,
    TOLERANCE,
};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Coordinates probed per input; larger inputs are sampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)` for a
/// scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let opts = CheckOptions {
        eps,
        max_coords: usize::MAX,
        seed: 0,
    };
    let report = check_gradients(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), &opts)?;
    Ok(report.max_rel_error)
}

/// Multi-input version of [`finite_diff_check`].
///
/// Every input is treated as differentiable; at most `opts.max_coords`
/// coordinates of each input are probed, chosen with `opts.seed`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: &CheckOptions) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_module_gradients(&mut NoParams, inputs, |_, tape, xs| f(tape, xs), opts)
}

struct NoParams;

impl Module for NoParams {
    fn visit(&self, _: &mut dyn FnMut(&Parameter)) {}

    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Parameter)) {}
}

fn sample_coords(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut c = sample(rng, n, max).into_vec();
        c.sort_unstable();
        c
    }
}

/// Checks gradients with respect to `inputs` and to every trainable
/// parameter of `module` that `f` registers with [`Tape::param`].
///
/// Up to `opts.max_coords` coordinates are probed per input, and up to
/// `opts.max_coords` coordinates in total across the parameters. In the
/// report, `worst.0 >= inputs.len()` indexes parameters in visit order.
pub fn check_module_gradients<M, F>(
    module: &mut M,
    inputs: &[Tensor],
    mut f: F,
    opts: &CheckOptions,
) -> Result<GradReport>
where
    M: Module + ?Sized,
    F: for<'t> FnMut(&mut M, &'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if opts.eps.is_nan() || opts.eps <= 0.0 {
        return Err(Error::contract("finite_diff_check", "eps must be > 0"));
    }
    let (input_grads, param_grads) = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        let out = f(module, &tape, &vars)?;
        let grads = tape.backward(out)?;
        let input_grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .grad(*v)
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect();
        (input_grads, grads.param_grads())
    };

    let mut eval = |module: &mut M, probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t)).collect();
        let out = f(module, &tape, &vars)?;
        if out.numel() != 1 {
            return Err(Error::contract(
                "finite_diff_check",
                "function must be scalar",
            ));
        }
        Ok(out.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let record = |report: &mut GradReport, analytic: f64, numeric: f64, at: (usize, usize)| {
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if err.is_nan() {
            return Err(Error::numeric(
                "finite_diff_check",
                "NaN in gradient comparison",
            ));
        }
        report.coords_checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(at);
        }
        Ok(())
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in sample_coords(&mut rng, input.numel(), opts.max_coords) {
            let orig = input.data()[i];
            probe[which].data_mut()[i] = orig + opts.eps;
            let plus = eval(module, &probe)?;
            probe[which].data_mut()[i] = orig - opts.eps;
            let minus = eval(module, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            record(&mut report, input_grads[which][i], numeric, (which, i))?;
        }
    }

    let mut params: Vec<(String, usize)> = Vec::new();
    module.visit(&mut |p| {
        if p.is_trainable() {
            params.push((p.name.clone(), p.tensor.numel()));
        }
    });
    let total: usize = params.iter().map(|p| p.1).sum();
    for flat in sample_coords(&mut rng, total, opts.max_coords) {
        let (mut which, mut i) = (0, flat);
        while i >= params[which].1 {
            i -= params[which].1;
            which += 1;
        }
        let name = params[which].0.clone();
        let set = |module: &mut M, delta: f64| {
            module.visit_mut(&mut |p| {
                if p.name == name {
                    p.tensor.data_mut()[i] += delta;
                }
            })
        };
        let orig = {
            let mut v = 0.0;
            module.visit(&mut |p| {
                if p.name == name {
                    v = p.tensor.data()[i];
                }
            });
            v
        };
        set(module, opts.eps);
        let plus = eval(module, &probe);
        set(module, -2.0 * opts.eps);
        let minus = eval(module, &probe);
        // restore the exact original bits
        module.visit_mut(&mut |p| {
            if p.name == name {
                p.tensor.data_mut()[i] = orig;
            }
        });
        let numeric = (plus? - minus?) / (2.0 * opts.eps);
        let analytic = param_grads.get(&name).map_or(0.0, |g| g[i]);
        record(&mut report, analytic, numeric, (inputs.len() + which, i))?;
    }
    Ok(report)
}
