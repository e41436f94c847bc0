//! Finite-difference verification harness.
//!
//! Every analytic gradient in the crate is checked against 64-bit central
//! differences. The suites here are shared by the test suite and the
//! `grad-check` CLI subcommand; each suite returns one report per checked
//! quantity, and a report fails when the worst relative error exceeds its
//! tolerance.

use crate::error::Result;
use crate::rng::{derive_rng, normal_vec, Stream};
use crate::tensor::{autograd, concat, PaddingMode, Tensor};

pub const FD_STEP: f64 = 1e-5;
/// Tolerance for single primitives.
pub const TOL_PRIMITIVE: f64 = 1e-4;
/// Tolerance for composed blocks.
pub const TOL_COMPOSITE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked_elements: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    if a.abs() < 1e-9 && n.abs() < 1e-9 {
        return 0.0;
    }
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Check d(scalar f)/d(inputs) against central finite differences.
///
/// `f` must be a pure function of the given tensors. Analytic gradients come
/// from one reverse pass; numeric ones from 2·numel re-evaluations.
pub fn check_fn(
    name: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> GradCheckReport {
    check_fn_inner(name, inputs, tolerance, f, false)
}

fn check_fn_inner(
    name: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    flip_analytic_sign: bool,
) -> GradCheckReport {
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| t.tracked()).collect();
    let out = f(&tracked).expect("gradcheck forward failed");
    let refs: Vec<&Tensor<f64>> = tracked.iter().collect();
    let analytic = autograd::grad(&out, &refs, false).expect("gradcheck backward failed");

    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for (i, base) in inputs.iter().enumerate() {
        let a = analytic[i].to_vec();
        for j in 0..base.numel() {
            let probe = |delta: f64| -> f64 {
                let mut d = base.to_vec();
                d[j] += delta;
                let mut probe_inputs: Vec<Tensor<f64>> = inputs.to_vec();
                probe_inputs[i] = Tensor::from_vec(d, base.shape()).unwrap();
                f(&probe_inputs).expect("gradcheck probe failed").item()
            };
            let numeric = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
            let analytic_v = if flip_analytic_sign { -a[j] } else { a[j] };
            max_err = max_err.max(rel_err(analytic_v, numeric));
            checked += 1;
        }
    }
    GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_err,
        tolerance,
        checked_elements: checked,
    }
}

/// Harness self-test fixture: re-runs a healthy check with the analytic
/// gradient's sign deliberately flipped, which must fail.
pub fn injected_failure_report() -> GradCheckReport {
    let x = randn_t(7, &[4]);
    check_fn_inner(
        "selftest-injected-wrong-sign",
        &[x],
        TOL_PRIMITIVE,
        &|t| Ok(t[0].gelu().sum_all()),
        true,
    )
}

/// Deterministic standard-normal test tensor.
pub fn randn_t(salt: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = derive_rng(0xCAFE, Stream::WeightInit, salt);
    let n = shape.iter().product();
    Tensor::from_vec(normal_vec(&mut rng, n), shape).unwrap()
}

// ---------------------------------------------------------------------------
// primitive suites
// ---------------------------------------------------------------------------

fn suite_matmul() -> Vec<GradCheckReport> {
    let a = randn_t(1, &[5, 4]);
    let b = randn_t(2, &[4, 3]);
    vec![
        check_fn("matmul 5x4 * 4x3", &[a.clone(), b.clone()], TOL_PRIMITIVE, &|t| {
            // weight the output so every entry has a distinct adjoint
            let w = randn_t(3, &[5, 3]);
            Ok(t[0].matmul(&t[1])?.mul(&w)?.sum_all())
        }),
        check_fn("matmul transposed operands", &[a, b], TOL_PRIMITIVE, &|t| {
            let at = t[0].transpose_axes(&[1, 0])?;
            let bt = t[1].transpose_axes(&[1, 0])?;
            Ok(bt.matmul(&at)?.sum_all())
        }),
    ]
}

fn suite_elementwise() -> Vec<GradCheckReport> {
    let x = randn_t(10, &[17]);
    let y = randn_t(11, &[17]);
    let pos = {
        let d: Vec<f64> = randn_t(12, &[9]).to_vec().iter().map(|v| v.abs() + 0.5).collect();
        Tensor::from_vec(d, &[9]).unwrap()
    };
    let bias = randn_t(13, &[5]);
    let img = randn_t(14, &[2, 3, 5]);
    vec![
        check_fn("gelu", std::slice::from_ref(&x), TOL_PRIMITIVE, &|t| {
            let w = randn_t(15, &[17]);
            Ok(t[0].gelu().mul(&w)?.sum_all())
        }),
        check_fn("tanh", std::slice::from_ref(&x), TOL_PRIMITIVE, &|t| {
            Ok(t[0].tanh_act().square().sum_all())
        }),
        check_fn("sigmoid+softplus", std::slice::from_ref(&x), TOL_PRIMITIVE, &|t| {
            Ok(t[0].sigmoid().add(&t[0].softplus())?.sum_all())
        }),
        check_fn("abs", std::slice::from_ref(&x), TOL_PRIMITIVE, &|t| {
            Ok(t[0].abs_val().sum_all())
        }),
        check_fn("ln/sqrt/recip", &[pos], TOL_PRIMITIVE, &|t| {
            let a = t[0].ln_op()?;
            let b = t[0].sqrt_op()?;
            let c = t[0].recip_op()?;
            Ok(a.add(&b)?.add(&c)?.sum_all())
        }),
        check_fn("mul chain", &[x, y], TOL_PRIMITIVE, &|t| {
            Ok(t[0].mul(&t[1])?.mul(&t[0])?.sum_all())
        }),
        check_fn("broadcast add [2,3,5]+[5]", &[img, bias], TOL_PRIMITIVE, &|t| {
            Ok(t[0].add(&t[1])?.square().sum_all())
        }),
    ]
}

fn suite_movement() -> Vec<GradCheckReport> {
    let x = randn_t(20, &[2, 3, 4]);
    vec![
        check_fn("reshape/permute/narrow/pad", std::slice::from_ref(&x), TOL_PRIMITIVE, &|t| {
            let r = t[0].transpose_axes(&[2, 0, 1])?;
            let n = r.narrow(0, 1, 2)?;
            let p = n.pad_axis(2, 1, 5)?;
            let w = randn_t(21, &[2, 2, 5]);
            Ok(p.mul(&w)?.sum_all())
        }),
        check_fn("roll", std::slice::from_ref(&x), TOL_PRIMITIVE, &|t| {
            let w = randn_t(22, &[2, 3, 4]);
            Ok(t[0].roll_last(3)?.mul(&w)?.sum_all())
        }),
        check_fn("concat+sum_to", &[x], TOL_PRIMITIVE, &|t| {
            let c = concat(&[&t[0], &t[0]], 1)?;
            Ok(c.sum_to(&[6, 1])?.square().sum_all())
        }),
    ]
}

fn suite_depthwise() -> Vec<GradCheckReport> {
    let x = randn_t(30, &[1, 4, 8, 8]);
    let k = randn_t(31, &[4, 3, 3]);
    vec![check_fn(
        "depthwise conv circular/replicate",
        &[x, k],
        TOL_PRIMITIVE,
        &|t| {
            let w = randn_t(32, &[1, 4, 8, 8]);
            Ok(t[0]
                .depthwise_conv2d(&t[1], PaddingMode::seam_aware())?
                .mul(&w)?
                .sum_all())
        },
    )]
}

fn suite_large_shapes() -> Vec<GradCheckReport> {
    // randomized shapes up to 1e4 elements
    let big = randn_t(50, &[10, 25, 40]);
    let k = randn_t(51, &[64, 90]);
    let q = randn_t(52, &[90, 48]);
    vec![
        check_fn("gelu 10k elements", std::slice::from_ref(&big), TOL_PRIMITIVE, &|t| {
            let w = randn_t(53, &[10, 25, 40]);
            Ok(t[0].gelu().mul(&w)?.sum_all())
        }),
        check_fn("sum_to over 10k elements", &[big], TOL_PRIMITIVE, &|t| {
            Ok(t[0].sum_to(&[25, 1])?.square().sum_all())
        }),
        check_fn("matmul 64x90 * 90x48", &[k, q], TOL_PRIMITIVE, &|t| {
            let w = randn_t(54, &[64, 48]);
            Ok(t[0].matmul(&t[1])?.mul(&w)?.sum_all())
        }),
    ]
}

fn suite_double_backward() -> Vec<GradCheckReport> {
    // d/dw of || d f/d x ||^2 for f = sum(gelu(x W)), checked by FD on w.
    let x = randn_t(40, &[3, 4]);
    let w = randn_t(41, &[4, 2]);
    vec![check_fn(
        "gradient-norm-through-weights",
        &[w],
        TOL_COMPOSITE,
        &|t| {
            let xt = x.tracked();
            let out = xt.matmul(&t[0])?.gelu().sum_all();
            let g = autograd::grad(&out, &[&xt], true)?.remove(0);
            Ok(g.square().sum_all())
        },
    )]
}

/// A named gradient-check suite.
pub struct Suite {
    pub name: &'static str,
    pub run: fn() -> Vec<GradCheckReport>,
}

/// All registered suites, in execution order.
pub fn suites() -> Vec<Suite> {
    vec![
        Suite { name: "matmul", run: suite_matmul },
        Suite { name: "elementwise", run: suite_elementwise },
        Suite { name: "movement", run: suite_movement },
        Suite { name: "large-shapes", run: suite_large_shapes },
        Suite { name: "depthwise", run: suite_depthwise },
        Suite { name: "double-backward", run: suite_double_backward },
        Suite { name: "patch-embed", run: crate::layers::gradcheck_patch_embed },
        Suite { name: "cond-batch-norm", run: crate::layers::gradcheck_cond_batch_norm },
        Suite { name: "layer-norm", run: crate::layers::gradcheck_layer_norm },
        Suite { name: "mixer-layer", run: crate::layers::gradcheck_mixer_layer },
        Suite { name: "depthwise-layer", run: crate::layers::gradcheck_depthwise_layer },
        Suite { name: "patch-split", run: crate::layers::gradcheck_patch_split },
        Suite { name: "to-rgb", run: crate::layers::gradcheck_to_rgb },
        Suite { name: "losses", run: crate::losses::gradcheck_losses },
        Suite { name: "generator-block", run: crate::generator::gradcheck_blocks },
        Suite { name: "discriminator", run: crate::discriminator::gradcheck_discriminator },
        Suite { name: "r1-penalty", run: crate::discriminator::gradcheck_r1 },
    ]
}
