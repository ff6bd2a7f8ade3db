//! Named gradient checks for every differentiable component.
//!
//! Each check builds a small random instance from a seed, projects the
//! output onto a fixed random direction to get a scalar loss, and compares
//! the analytic gradient against central differences with respect to both
//! inputs and parameters. The reported error is the worst of the two.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Dimension, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{finite_diff_gradcheck, module_gradcheck, GradcheckReport, DEFAULT_EPS};
use crate::error::Result;
use crate::losses::{
    attention_transfer_loss, bce_dice_loss, distill_loss, dkd_loss, gradient_matching_loss, plain_kl_loss,
    DistillWeights, LossGrad,
};
use crate::perception::{GlmbpBlock, LmbpBlock};
use crate::ssm::{selective_scan, selective_scan_vjp, BiMambaBlock, MambaConfig, MambaParams};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform<D: Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(r: &mut ChaCha8Rng, shape: Sh, lo: f64, hi: f64) -> ndarray::Array<f64, D> {
    ndarray::Array::from_shape_simple_fn(shape, || r.random_range(lo..hi))
}

fn to_dyn<D: Dimension>(a: &ndarray::Array<f64, D>) -> ArrayD<f64> {
    a.clone().into_dyn()
}

fn worst(a: GradcheckReport, b: GradcheckReport) -> GradcheckReport {
    let checked = a.checked + b.checked;
    let mut w = if b.max_rel_error > a.max_rel_error { b } else { a };
    w.checked = checked;
    w
}

/// Every coordinate when small, otherwise an evenly spread subset of `cap`.
fn spread(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        return (0..len).collect();
    }
    (0..cap).map(|i| i * len / cap).collect()
}

/// Names accepted by [`run_check`].
pub const CHECKS: &[&str] = &[
    "selective_scan",
    "mamba_forward",
    "bi_mamba",
    "glmbp",
    "lmbp",
    "bce_dice",
    "dkd",
    "attention_transfer",
    "gradient_matching",
    "plain_kl",
    "distill",
    "model",
];

/// Pass threshold on the relative error for a named check.
pub fn tolerance(name: &str) -> f64 {
    if name == "model" {
        1e-3
    } else {
        1e-4
    }
}

pub fn run_check(name: &str, seed: u64) -> Result<GradcheckReport> {
    match name {
        "selective_scan" => check_selective_scan(seed),
        "mamba_forward" => check_mamba(seed),
        "bi_mamba" => check_bi_mamba(seed),
        "glmbp" => check_glmbp(seed),
        "lmbp" => check_lmbp(seed),
        "bce_dice" => check_loss(seed, |s, t| {
            let y = t.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
            bce_dice_loss(s, &y)
        }),
        "dkd" => check_loss(seed, dkd_loss),
        "attention_transfer" => check_loss(seed, |s, t| attention_transfer_loss(s, t, 0.5)),
        "gradient_matching" => check_loss(seed, gradient_matching_loss),
        "plain_kl" => check_loss(seed, |s, t| plain_kl_loss(s, t, 4.0)),
        "distill" => check_loss(seed, |s, t| {
            let y = t.mapv(|v| if v > 0.4 { 1.0 } else { 0.0 });
            let (br, g) = distill_loss(s, t, &y, &DistillWeights::default())?;
            Ok(LossGrad {
                value: br.total,
                grad: g,
            })
        }),
        "model" => check_model(seed, 64),
        other => Err(crate::Error::Config(format!(
            "unknown gradcheck '{other}'; expected one of {CHECKS:?}"
        ))),
    }
}

/// Gradient of `sum(w * y)` for the scan with respect to u, delta, A, B, C and D.
pub fn check_selective_scan(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (b, n, d, s) = (2, 6, 3, 4);
    let u: Array3<f64> = uniform(&mut r, (b, n, d), -1.0, 1.0);
    let delta: Array3<f64> = uniform(&mut r, (b, n, d), 0.1, 1.0);
    let a: Array2<f64> = uniform(&mut r, (d, s), -1.5, -0.1);
    let bm: Array3<f64> = uniform(&mut r, (b, n, s), -1.0, 1.0);
    let cm: Array3<f64> = uniform(&mut r, (b, n, s), -1.0, 1.0);
    let dv: Array1<f64> = uniform(&mut r, d, -1.0, 1.0);
    let w: Array3<f64> = uniform(&mut r, (b, n, d), -1.0, 1.0);
    let sizes = [u.len(), delta.len(), a.len(), bm.len(), cm.len(), dv.len()];
    let flat: Vec<f64> = u
        .iter()
        .chain(delta.iter())
        .chain(a.iter())
        .chain(bm.iter())
        .chain(cm.iter())
        .chain(dv.iter())
        .copied()
        .collect();
    let point = ArrayD::from_shape_vec(IxDyn(&[flat.len()]), flat).expect("1-d");
    finite_diff_gradcheck(
        |p| {
            let v = p.as_slice().expect("1-d");
            let mut off = 0;
            let mut take = |k: usize| {
                let out = v[off..off + sizes[k]].to_vec();
                off += sizes[k];
                out
            };
            let u = Array3::from_shape_vec((b, n, d), take(0)).expect("shape");
            let delta = Array3::from_shape_vec((b, n, d), take(1)).expect("shape");
            let a = Array2::from_shape_vec((d, s), take(2)).expect("shape");
            let bm = Array3::from_shape_vec((b, n, s), take(3)).expect("shape");
            let cm = Array3::from_shape_vec((b, n, s), take(4)).expect("shape");
            let dv = Array1::from_vec(take(5));
            let y = selective_scan(&u, &delta, &a, &bm, &cm, &dv)?;
            let g = selective_scan_vjp(&u, &delta, &a, &bm, &cm, &dv, &w)?;
            let grad: Vec<f64> = g
                .du
                .iter()
                .chain(g.ddelta.iter())
                .chain(g.da.iter())
                .chain(g.db.iter())
                .chain(g.dc.iter())
                .chain(g.dd.iter())
                .copied()
                .collect();
            Ok(((&y * &w).sum(), ArrayD::from_shape_vec(IxDyn(&[grad.len()]), grad).expect("1-d")))
        },
        &point,
        DEFAULT_EPS,
    )
}

fn seq_input_check<F, B>(x: &Array3<f64>, w: &Array3<f64>, mut forward: F, mut backward: B) -> Result<GradcheckReport>
where
    F: FnMut(&Array3<f64>) -> Result<Array3<f64>>,
    B: FnMut(&Array3<f64>, &Array3<f64>) -> Result<Array3<f64>>,
{
    let dim = x.dim();
    finite_diff_gradcheck(
        |p| {
            let xi = p.clone().into_dimensionality::<ndarray::Ix3>().expect("3-d");
            let y = forward(&xi)?;
            let dx = backward(&xi, w)?;
            debug_assert_eq!(dx.dim(), dim);
            Ok(((&y * w).sum(), to_dyn(&dx)))
        },
        &to_dyn(x),
        DEFAULT_EPS,
    )
}

fn map_input_check<F, B>(x: &Array4<f64>, w: &Array4<f64>, mut forward: F, mut backward: B) -> Result<GradcheckReport>
where
    F: FnMut(&Array4<f64>) -> Result<Array4<f64>>,
    B: FnMut(&Array4<f64>, &Array4<f64>) -> Result<Array4<f64>>,
{
    finite_diff_gradcheck(
        |p| {
            let xi = p.clone().into_dimensionality::<ndarray::Ix4>().expect("4-d");
            let y = forward(&xi)?;
            let dx = backward(&xi, w)?;
            Ok(((&y * w).sum(), to_dyn(&dx)))
        },
        &to_dyn(x),
        DEFAULT_EPS,
    )
}

fn small_mamba() -> MambaConfig {
    MambaConfig {
        d_state: 4,
        d_conv: 3,
        expand: 2,
        dt_rank: None,
    }
}

/// Mamba forward with respect to its input and every parameter tensor.
pub fn check_mamba(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let mut m = MambaParams::<f64>::new(4, &small_mamba(), &mut r)?;
    // Non-trivial output projection so every path carries gradient.
    for v in m.out_proj.data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
    let x: Array3<f64> = uniform(&mut r, (2, 5, 4), -1.0, 1.0);
    let w: Array3<f64> = uniform(&mut r, (2, 5, 4), -1.0, 1.0);
    let mut probe = m.clone();
    let input = seq_input_check(
        &x,
        &w,
        |xi| m.forward(xi),
        |xi, w| {
            let (_, cache) = probe.forward_cached(xi)?;
            Ok(probe.backward(&cache, w))
        },
    )?;
    let params = module_gradcheck(
        &mut m,
        |m, bw| {
            let (y, cache) = m.forward_cached(&x)?;
            if bw {
                m.backward(&cache, &w);
            }
            Ok((&y * &w).sum())
        },
        DEFAULT_EPS,
        None,
    )?;
    Ok(worst(input, params))
}

/// Shared-weight bidirectional block with respect to input and parameters.
pub fn check_bi_mamba(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let mut m = BiMambaBlock::<f64>::new(4, &small_mamba(), &mut r)?;
    for v in m.mamba.out_proj.data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
    m.gamma.set(0.7);
    let x: Array3<f64> = uniform(&mut r, (2, 5, 4), -1.0, 1.0);
    let w: Array3<f64> = uniform(&mut r, (2, 5, 4), -1.0, 1.0);
    let mut probe = m.clone();
    let input = seq_input_check(
        &x,
        &w,
        |xi| m.forward(xi),
        |xi, w| {
            let (_, cache) = probe.forward_cached(xi)?;
            Ok(probe.backward(&cache, w))
        },
    )?;
    let params = module_gradcheck(
        &mut m,
        |m, bw| {
            let (y, cache) = m.forward_cached(&x)?;
            if bw {
                m.backward(&cache, &w);
            }
            Ok((&y * &w).sum())
        },
        DEFAULT_EPS,
        None,
    )?;
    Ok(worst(input, params))
}

/// GLMBP block with respect to input and parameters.
pub fn check_glmbp(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let mut blk = GlmbpBlock::new(8, 3, &small_mamba(), &mut r)?;
    for v in blk.bimamba.mamba.out_proj.data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
    blk.gamma.set(0.6);
    blk.bimamba.gamma.set(0.8);
    perturb_affine(&mut blk.norm, &mut r);
    let x: Array4<f64> = uniform(&mut r, (2, 8, 3, 3), -1.0, 1.0);
    let w: Array4<f64> = uniform(&mut r, (2, 8, 3, 3), -1.0, 1.0);
    let mut probe = blk.clone();
    let input = map_input_check(
        &x,
        &w,
        |xi| blk.forward(xi),
        |xi, w| {
            let (_, cache) = probe.forward_cached(xi)?;
            Ok(probe.backward(&cache, w))
        },
    )?;
    let n = crate::param::Module::num_params(&blk);
    let coords = spread(n, 400);
    let params = module_gradcheck(
        &mut blk,
        |m, bw| {
            let (y, cache) = m.forward_cached(&x)?;
            if bw {
                m.backward(&cache, &w);
            }
            Ok((&y * &w).sum())
        },
        DEFAULT_EPS,
        Some(&coords),
    )?;
    Ok(worst(input, params))
}

/// LMBP block with respect to input and parameters.
pub fn check_lmbp(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let mut blk = LmbpBlock::new(8, 3, &mut r)?;
    blk.gamma.set(0.6);
    perturb_affine(&mut blk.norm, &mut r);
    let x: Array4<f64> = uniform(&mut r, (2, 8, 4, 4), -1.0, 1.0);
    let w: Array4<f64> = uniform(&mut r, (2, 8, 4, 4), -1.0, 1.0);
    let mut probe = blk.clone();
    let input = map_input_check(
        &x,
        &w,
        |xi| blk.forward(xi),
        |xi, w| {
            let (_, cache) = probe.forward_cached(xi)?;
            Ok(probe.backward(&cache, w))
        },
    )?;
    let params = module_gradcheck(
        &mut blk,
        |m, bw| {
            let (y, cache) = m.forward_cached(&x)?;
            if bw {
                m.backward(&cache, &w);
            }
            Ok((&y * &w).sum())
        },
        DEFAULT_EPS,
        None,
    )?;
    Ok(worst(input, params))
}

fn perturb_affine(norm: &mut crate::nn::LayerNorm, r: &mut ChaCha8Rng) {
    for v in norm.weight.data_mut() {
        *v = r.random_range(0.5..1.5);
    }
    for v in norm.bias.data_mut() {
        *v = r.random_range(-0.3..0.3);
    }
}

/// End-to-end check on the T-width model at 32x32 over a spread subset of parameters.
pub fn check_model(seed: u64, n_params: usize) -> Result<GradcheckReport> {
    let cfg = crate::network::ModelConfig::tiny();
    let mut model = crate::network::Model::new(&cfg, seed)?;
    let mut r = rng(seed ^ 0x5eed);
    let x: Array4<f64> = uniform(&mut r, (2, 3, 32, 32), -1.0, 1.0);
    let w: Array4<f64> = uniform(&mut r, (2, 1, 32, 32), -1.0, 1.0);
    let n = crate::param::Module::num_params(&model);
    let coords = spread(n, n_params);
    module_gradcheck(
        &mut model,
        |m, bw| {
            let cache = m.forward_train(&x)?;
            if bw {
                m.backward_from_probs(&cache, &w);
            }
            Ok((&cache.probs * &w).sum())
        },
        DEFAULT_EPS,
        Some(&coords),
    )
}

/// Loss gradient with respect to the student map on random 2x1x5x5 probability maps.
pub fn check_loss<F>(seed: u64, mut loss: F) -> Result<GradcheckReport>
where
    F: FnMut(&Array4<f64>, &Array4<f64>) -> Result<LossGrad>,
{
    let mut r = rng(seed);
    let s: Array4<f64> = uniform(&mut r, (2, 1, 5, 5), 0.05, 0.95);
    let t: Array4<f64> = uniform(&mut r, (2, 1, 5, 5), 0.05, 0.95);
    finite_diff_gradcheck(
        |p| {
            let si = p.clone().into_dimensionality::<ndarray::Ix4>().expect("4-d");
            let lg = loss(&si, &t)?;
            Ok((lg.value, to_dyn(&lg.grad)))
        },
        &to_dyn(&s),
        DEFAULT_EPS,
    )
}
