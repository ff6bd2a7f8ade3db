//! Segmentation and distillation losses on (B, 1, H, W) probability maps.
//!
//! Every loss returns its value together with the gradient with respect to
//! the student map `S` (or the prediction). Teacher maps are constants.

use ndarray::{Array2, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-6;
/// Added under square roots of Sobel magnitudes.
pub const SQRT_EPS: f64 = 1e-8;
/// Dice smoothing.
pub const DICE_SMOOTH: f64 = 1.0;

/// A scalar loss and its gradient with respect to the differentiable input.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array4<f64>,
}

fn same_shape(a: &Array4<f64>, b: &Array4<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "{what}: shapes differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_probs(p: &Array4<f64>, what: &str) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} contains {v}")));
    }
    if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Input(format!("{what} has values outside [0, 1]")));
    }
    Ok(())
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Derivative of the clamp: 1 strictly inside the interval, 0 where clamped.
fn clamp_slope(p: f64) -> f64 {
    if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        1.0
    } else {
        0.0
    }
}

/// Mean binary cross-entropy plus per-sample soft Dice (smoothing 1) averaged over the batch.
pub fn bce_dice_loss(pred: &Array4<f64>, target: &Array4<f64>) -> Result<LossGrad> {
    same_shape(pred, target, "bce_dice_loss")?;
    check_probs(pred, "prediction")?;
    if target.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Input("target mask is not binary".into()));
    }
    let b = pred.dim().0;
    let n = pred.len() as f64;
    let mut bce = 0.0;
    let mut grad = Array4::<f64>::zeros(pred.dim());
    Zip::from(&mut grad).and(pred).and(target).for_each(|g, &p, &y| {
        let pc = clamp_p(p);
        bce -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        *g = (-y / pc + (1.0 - y) / (1.0 - pc)) / n * clamp_slope(p);
    });
    bce /= n;
    let mut dice = 0.0;
    for bi in 0..b {
        let p = pred.index_axis(Axis(0), bi);
        let y = target.index_axis(Axis(0), bi);
        let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
        Zip::from(&p).and(&y).for_each(|&pv, &yv| {
            let pc = clamp_p(pv);
            inter += pc * yv;
            sp += pc;
            sy += yv;
        });
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = sp + sy + DICE_SMOOTH;
        dice += 1.0 - num / den;
        // d(1 - num/den)/dp = -(2y den - num) / den^2
        let mut g = grad.index_axis_mut(Axis(0), bi);
        Zip::from(&mut g).and(&p).and(&y).for_each(|gv, &pv, &yv| {
            *gv += -(2.0 * yv * den - num) / (den * den) / b as f64 * clamp_slope(pv);
        });
    }
    dice /= b as f64;
    Ok(LossGrad {
        value: bce + dice,
        grad,
    })
}

/// Pixelwise binary KL(T || S) averaged over all pixels and the batch.
pub fn dkd_loss(s: &Array4<f64>, t: &Array4<f64>) -> Result<LossGrad> {
    same_shape(s, t, "dkd_loss")?;
    check_probs(s, "student map")?;
    check_probs(t, "teacher map")?;
    let n = s.len() as f64;
    let mut value = 0.0;
    let mut grad = Array4::<f64>::zeros(s.dim());
    Zip::from(&mut grad).and(s).and(t).for_each(|g, &sv, &tv| {
        let (sc, tc) = (clamp_p(sv), clamp_p(tv));
        value += tc * (tc / sc).ln() + (1.0 - tc) * ((1.0 - tc) / (1.0 - sc)).ln();
        *g = (-tc / sc + (1.0 - tc) / (1.0 - sc)) / n * clamp_slope(sv);
    });
    Ok(LossGrad {
        value: value / n,
        grad,
    })
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

fn flatten_samples(x: &Array4<f64>) -> Array2<f64> {
    let b = x.dim().0;
    let n = x.len() / b.max(1);
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, n))
        .expect("contiguous")
}

/// Per-sample softmax of `S / tau` and `T / tau` over all flattened positions, as (B, H*W).
pub fn attention_maps(s: &Array4<f64>, t: &Array4<f64>, tau: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    same_shape(s, t, "attention_maps")?;
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("attention temperature must be positive, got {tau}")));
    }
    let a_s = softmax_rows(&flatten_samples(s).mapv(|v| v / tau));
    let a_t = softmax_rows(&flatten_samples(t).mapv(|v| v / tau));
    Ok((a_s, a_t))
}

/// KL(A_T || A_S) of the attention maps, averaged over the batch.
pub fn attention_transfer_loss(s: &Array4<f64>, t: &Array4<f64>, tau: f64) -> Result<LossGrad> {
    let (a_s, a_t) = attention_maps(s, t, tau)?;
    let b = s.dim().0 as f64;
    let mut value = 0.0;
    Zip::from(&a_s).and(&a_t).for_each(|&p, &q| {
        if q > 0.0 {
            value += q * (q / p).ln();
        }
    });
    // d/dz_S of KL(q || softmax(z)) = softmax(z) - q, with z = S / tau
    let g2 = (&a_s - &a_t).mapv(|v| v / (tau * b));
    let grad = g2.into_shape_with_order(s.raw_dim()).expect("same element count");
    Ok(LossGrad {
        value: value / b,
        grad,
    })
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

fn sobel_weight(kind: usize, a: usize, b: usize) -> f64 {
    if kind == 0 {
        SOBEL_X[a][b]
    } else {
        SOBEL_X[b][a]
    }
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// 3x3 Sobel responses with replicate padding, applied per (batch, channel) plane.
pub fn sobel_gradients(x: &Array4<f64>) -> Result<(Array4<f64>, Array4<f64>)> {
    let (_, _, h, w) = x.dim();
    if h < 3 || w < 3 {
        return Err(Error::Input(format!("sobel needs at least 3x3 maps, got {h}x{w}")));
    }
    let mut gx = Array4::<f64>::zeros(x.dim());
    let mut gy = Array4::<f64>::zeros(x.dim());
    for ((bi, ci, i, j), out) in gx.indexed_iter_mut() {
        *out = sobel_at(x, 0, bi, ci, i, j);
    }
    for ((bi, ci, i, j), out) in gy.indexed_iter_mut() {
        *out = sobel_at(x, 1, bi, ci, i, j);
    }
    Ok((gx, gy))
}

fn sobel_at(x: &Array4<f64>, kind: usize, bi: usize, ci: usize, i: usize, j: usize) -> f64 {
    let (_, _, h, w) = x.dim();
    let mut acc = 0.0;
    for a in 0..3 {
        let ii = clamp_idx(i as isize + a as isize - 1, h);
        for b in 0..3 {
            let k = sobel_weight(kind, a, b);
            if k != 0.0 {
                acc += k * x[[bi, ci, ii, clamp_idx(j as isize + b as isize - 1, w)]];
            }
        }
    }
    acc
}

/// Adjoint of [`sobel_gradients`]: maps (dgx, dgy) back onto the input.
fn sobel_adjoint(dgx: &Array4<f64>, dgy: &Array4<f64>) -> Array4<f64> {
    let (_, _, h, w) = dgx.dim();
    let mut dx = Array4::<f64>::zeros(dgx.dim());
    for (kind, dg) in [dgx, dgy].into_iter().enumerate() {
        for ((bi, ci, i, j), &g) in dg.indexed_iter() {
            if g == 0.0 {
                continue;
            }
            for a in 0..3 {
                let ii = clamp_idx(i as isize + a as isize - 1, h);
                for b in 0..3 {
                    let k = sobel_weight(kind, a, b);
                    if k != 0.0 {
                        dx[[bi, ci, ii, clamp_idx(j as isize + b as isize - 1, w)]] += k * g;
                    }
                }
            }
        }
    }
    dx
}

/// Mean squared difference of Sobel gradient magnitudes.
pub fn gradient_matching_loss(s: &Array4<f64>, t: &Array4<f64>) -> Result<LossGrad> {
    same_shape(s, t, "gradient_matching_loss")?;
    let (sx, sy) = sobel_gradients(s)?;
    let (tx, ty) = sobel_gradients(t)?;
    let n = s.len() as f64;
    let mag = |gx: f64, gy: f64| (gx * gx + gy * gy + SQRT_EPS).sqrt();
    let mut value = 0.0;
    let mut dgx = Array4::<f64>::zeros(s.dim());
    let mut dgy = Array4::<f64>::zeros(s.dim());
    Zip::from(&mut dgx)
        .and(&mut dgy)
        .and(&sx)
        .and(&sy)
        .and(&tx)
        .and(&ty)
        .for_each(|dx, dy, &a, &b, &c, &d| {
            let ms = mag(a, b);
            let diff = ms - mag(c, d);
            value += diff * diff;
            let dm = 2.0 * diff / n;
            *dx = dm * a / ms;
            *dy = dm * b / ms;
        });
    Ok(LossGrad {
        value: value / n,
        grad: sobel_adjoint(&dgx, &dgy),
    })
}

/// Temperature-softened pixelwise binary KL used by the plain-KL ablation.
///
/// Both maps are mapped back to logits, divided by `tau`, squashed again and
/// compared with binary KL(T || S); the mean is scaled by `tau^2`.
pub fn plain_kl_loss(s: &Array4<f64>, t: &Array4<f64>, tau: f64) -> Result<LossGrad> {
    same_shape(s, t, "plain_kl_loss")?;
    check_probs(s, "student map")?;
    check_probs(t, "teacher map")?;
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("KL temperature must be positive, got {tau}")));
    }
    let n = s.len() as f64;
    let soften = |p: f64| crate::nn::sigmoid((p / (1.0 - p)).ln() / tau);
    let mut value = 0.0;
    let mut grad = Array4::<f64>::zeros(s.dim());
    Zip::from(&mut grad).and(s).and(t).for_each(|g, &sv, &tv| {
        let sc = clamp_p(sv);
        let (ps, pt) = (soften(sc), soften(clamp_p(tv)));
        value += pt * (pt / ps).ln() + (1.0 - pt) * ((1.0 - pt) / (1.0 - ps)).ln();
        // dKL/dz = ps - pt with z = logit(s) / tau; dz/ds = 1 / (tau s (1 - s))
        *g = tau * tau * (ps - pt) / (tau * sc * (1.0 - sc)) / n * clamp_slope(sv);
    });
    Ok(LossGrad {
        value: tau * tau * value / n,
        grad,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillWeights {
    pub lambda_h: f64,
    pub lambda_s: f64,
    pub lambda_a: f64,
    pub lambda_g: f64,
    pub tau_a: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            lambda_h: 1.0,
            lambda_s: 1.0,
            lambda_a: 0.5,
            lambda_g: 0.5,
            tau_a: 1.0,
        }
    }
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_h", self.lambda_h),
            ("lambda_s", self.lambda_s),
            ("lambda_a", self.lambda_a),
            ("lambda_g", self.lambda_g),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.tau_a <= 0.0 || !self.tau_a.is_finite() {
            return Err(Error::Config(format!("tau_a must be positive, got {}", self.tau_a)));
        }
        Ok(())
    }

    /// Hard supervision only.
    pub fn hard_only() -> Self {
        Self {
            lambda_h: 1.0,
            lambda_s: 0.0,
            lambda_a: 0.0,
            lambda_g: 0.0,
            tau_a: 1.0,
        }
    }
}

/// Unweighted value of every term and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub hard: f64,
    pub dkd: f64,
    pub attention: f64,
    pub gradient: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `(name, value)` pairs in reporting order, total last.
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("hard", self.hard),
            ("dkd", self.dkd),
            ("attention", self.attention),
            ("gradient", self.gradient),
            ("total", self.total),
        ]
    }
}

/// Hybrid objective `lh*bce_dice(S,Y) + ls*dkd(S,T) + la*AT(S,T) + lg*grad_match(S,T)`.
///
/// Terms with a zero weight are skipped and reported as 0.
pub fn distill_loss(
    s: &Array4<f64>,
    t: &Array4<f64>,
    y: &Array4<f64>,
    w: &DistillWeights,
) -> Result<(LossBreakdown, Array4<f64>)> {
    w.validate()?;
    same_shape(s, t, "distill_loss")?;
    let mut grad = Array4::<f64>::zeros(s.dim());
    let mut br = LossBreakdown::default();
    let mut add = |lambda: f64, lg: LossGrad, slot: &mut f64| {
        *slot = lg.value;
        grad.scaled_add(lambda, &lg.grad);
    };
    if w.lambda_h > 0.0 {
        add(w.lambda_h, bce_dice_loss(s, y)?, &mut br.hard);
    }
    if w.lambda_s > 0.0 {
        add(w.lambda_s, dkd_loss(s, t)?, &mut br.dkd);
    }
    if w.lambda_a > 0.0 {
        add(w.lambda_a, attention_transfer_loss(s, t, w.tau_a)?, &mut br.attention);
    }
    if w.lambda_g > 0.0 {
        add(w.lambda_g, gradient_matching_loss(s, t)?, &mut br.gradient);
    }
    br.total = w.lambda_h * br.hard + w.lambda_s * br.dkd + w.lambda_a * br.attention + w.lambda_g * br.gradient;
    Ok((br, grad))
}
