//! Central finite-difference gradient checking.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::param::{assign_values, flatten_grads, flatten_values, Module};

/// Outcome of a gradient check; `worst_index` is the flat coordinate with
/// the largest relative error.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error `|a - n| / max(1, |a|, |n|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks `f`'s analytic gradient against central differences at every coordinate.
///
/// `f` returns the scalar value and its analytic gradient at the given point.
pub fn finite_diff_gradcheck<F>(f: F, point: &ArrayD<f64>, eps: f64) -> Result<GradcheckReport>
where
    F: FnMut(&ArrayD<f64>) -> Result<(f64, ArrayD<f64>)>,
{
    let all: Vec<usize> = (0..point.len()).collect();
    finite_diff_gradcheck_at(f, point, eps, &all)
}

/// Like [`finite_diff_gradcheck`] but only perturbs the listed flat coordinates.
pub fn finite_diff_gradcheck_at<F>(
    mut f: F,
    point: &ArrayD<f64>,
    eps: f64,
    coords: &[usize],
) -> Result<GradcheckReport>
where
    F: FnMut(&ArrayD<f64>) -> Result<(f64, ArrayD<f64>)>,
{
    let (v0, grad) = f(point)?;
    if !v0.is_finite() {
        return Err(Error::NonFinite("gradcheck: value at the base point".into()));
    }
    if grad.shape() != point.shape() {
        return Err(Error::Contract(format!(
            "gradcheck: gradient shape {:?} != point shape {:?}",
            grad.shape(),
            point.shape()
        )));
    }
    let g = grad.as_standard_layout();
    let gs = g.as_slice().expect("standard layout");
    let mut work = point.as_standard_layout().into_owned();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in coords {
        if i >= work.len() {
            return Err(Error::Contract(format!("gradcheck: coordinate {i} out of range")));
        }
        let orig = work.as_slice().expect("standard")[i];
        work.as_slice_mut().expect("standard")[i] = orig + eps;
        let (fp, _) = f(&work)?;
        work.as_slice_mut().expect("standard")[i] = orig - eps;
        let (fm, _) = f(&work)?;
        work.as_slice_mut().expect("standard")[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradcheck: non-finite evaluation when perturbing coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let err = rel_error(gs[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = gs[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check over the parameters of a module.
///
/// `eval(m, backward)` must compute the scalar loss at the current parameter
/// values; when `backward` is true it must also accumulate the analytic
/// gradient into the (already zeroed) parameter grads. `coords` selects flat
/// registry coordinates; `None` checks them all. Parameters are restored on
/// return.
pub fn module_gradcheck<M, F>(m: &mut M, mut eval: F, eps: f64, coords: Option<&[usize]>) -> Result<GradcheckReport>
where
    M: Module,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    let base = flatten_values(m);
    let point = ArrayD::from_shape_vec(IxDyn(&[base.len()]), base.clone()).expect("1-d");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..base.len()).collect();
            &all
        }
    };
    let mut first = true;
    let report = finite_diff_gradcheck_at(
        |p| {
            assign_values(m, p.as_slice().expect("1-d standard"));
            if first {
                first = false;
                m.zero_grads();
                let v = eval(m, true)?;
                let g = flatten_grads(m);
                Ok((v, ArrayD::from_shape_vec(IxDyn(&[g.len()]), g).expect("1-d")))
            } else {
                Ok((eval(m, false)?, ArrayD::zeros(IxDyn(&[p.len()]))))
            }
        },
        &point,
        eps,
        coords,
    );
    assign_values(m, &base);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point() -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[3, 4]), |ix| 0.3 * ix[0] as f64 - 0.7 * ix[1] as f64 + 0.1)
    }

    #[test]
    fn half_squared_norm() {
        let r = finite_diff_gradcheck(|x| Ok((0.5 * x.mapv(|v| v * v).sum(), x.clone())), &point(), DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn sum_of_sines_against_cosine() {
        let r = finite_diff_gradcheck(|x| Ok((x.mapv(f64::sin).sum(), x.mapv(f64::cos))), &point(), DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let r = finite_diff_gradcheck(|x| Ok((x.sum(), x.mapv(|_| 2.0))), &point(), DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn reports_non_finite_coordinate() {
        let err = finite_diff_gradcheck_at(
            |x| {
                let v = x.as_slice().unwrap()[5];
                let val = if v > 10.0 { f64::NAN } else { x.sum() };
                Ok((val, x.mapv(|_| 1.0)))
            },
            &point(),
            20.0,
            &[5],
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 5"), "{err}");
    }
}
