//! Central-difference gradient checking.

use rand::seq::index::sample;
use thiserror::Error;

use super::ParamSet;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("step must be positive, got {0}")]
    BadStep(f64),
    #[error("loss is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("analytic gradient has a different layout than the parameters")]
    LayoutMismatch,
}

/// Central-difference formula.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(L(+h) - L(-h)) / 2h`, error O(h²).
    #[default]
    ThreePoint,
    /// `(L(-2h) - 8L(-h) + 8L(+h) - L(+2h)) / 12h`, error O(h⁴). Allows a
    /// larger step, which keeps rounding noise off tiny gradient entries.
    FivePoint,
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: f64,
    pub stencil: Stencil,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            stencil: Stencil::ThreePoint,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<WorstCoordinate>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(L(p + h e_i) - L(p - h e_i)) / 2h` for one coordinate of a named tensor.
pub fn central_difference<P: ParamSet>(
    mut loss: impl FnMut(&P) -> f64,
    params: &P,
    tensor: &str,
    index: usize,
    step: f64,
) -> f64 {
    let mut work = params.clone();
    let orig = coordinate(&mut work, tensor, index);
    set_coordinate(&mut work, tensor, index, orig + step);
    let plus = loss(&work);
    set_coordinate(&mut work, tensor, index, orig - step);
    let minus = loss(&work);
    (plus - minus) / (2.0 * step)
}

fn coordinate<P: ParamSet>(p: &mut P, tensor: &str, index: usize) -> f64 {
    p.named()
        .into_iter()
        .find(|(n, _)| n == tensor)
        .map(|(_, t)| t[index])
        .unwrap_or_else(|| panic!("no tensor named {tensor}"))
}

fn set_coordinate<P: ParamSet>(p: &mut P, tensor: &str, index: usize, value: f64) {
    let mut named = p.named_mut();
    let slot = named
        .iter_mut()
        .find(|(n, _)| n == tensor)
        .unwrap_or_else(|| panic!("no tensor named {tensor}"));
    slot.1[index] = value;
}

fn set_by_position<P: ParamSet>(p: &mut P, tensor_pos: usize, index: usize, value: f64) {
    p.named_mut()[tensor_pos].1[index] = value;
}

/// Compares an analytic gradient against central differences.
///
/// Returns the maximum over checked coordinates of
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn finite_diff_check<P: ParamSet>(
    mut loss: impl FnMut(&P) -> f64,
    params: &P,
    analytic: &P,
    opts: FdOptions,
) -> Result<FdReport, GradCheckError> {
    if !(opts.step > 0.0) {
        return Err(GradCheckError::BadStep(opts.step));
    }
    let first = loss(params);
    let second = loss(params);
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }

    let layout: Vec<(String, Vec<f64>)> = analytic
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.to_vec()))
        .collect();
    let param_layout: Vec<(String, usize)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    if layout.len() != param_layout.len()
        || layout
            .iter()
            .zip(&param_layout)
            .any(|((a, ta), (b, lb))| a != b || ta.len() != *lb)
    {
        return Err(GradCheckError::LayoutMismatch);
    }

    let mut rng = rng::seeded(opts.seed);
    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (pos, (name, grad)) in layout.iter().enumerate() {
        let indices: Vec<usize> = match opts.max_coords_per_tensor {
            Some(n) if n < grad.len() => {
                let mut v = sample(&mut rng, grad.len(), n).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..grad.len()).collect(),
        };
        for i in indices {
            let orig = work.named()[pos].1[i];
            let h = opts.step;
            let mut at = |x: f64| {
                set_by_position(&mut work, pos, i, x);
                loss(&work)
            };
            let fd = match opts.stencil {
                Stencil::ThreePoint => (at(orig + h) - at(orig - h)) / (2.0 * h),
                Stencil::FivePoint => {
                    (at(orig - 2.0 * h) - 8.0 * at(orig - h) + 8.0 * at(orig + h) - at(orig + 2.0 * h)) / (12.0 * h)
                }
            };
            set_by_position(&mut work, pos, i, orig);
            let err = relative_error(grad[i], fd);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(WorstCoordinate {
                    tensor: name.clone(),
                    index: i,
                    analytic: grad[i],
                    numeric: fd,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn squared_norm_gradient_is_exact_to_step_squared() {
        let p = vec![0.3, -1.5, 2.0, 0.0];
        let analytic: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let report = finite_diff_check(
            |q: &Vec<f64>| q.iter().map(|v| v * v).sum(),
            &p,
            &analytic,
            FdOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let p = vec![1.0, 2.0];
        let report =
            finite_diff_check(|_: &Vec<f64>| 3.5, &p, &vec![0.0, 0.0], FdOptions::default()).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let p = vec![1.0];
        let report =
            finite_diff_check(|q: &Vec<f64>| q[0] * q[0], &p, &vec![1.0], FdOptions::default()).unwrap();
        assert!(report.max_rel_err > 0.4);
        let worst = report.worst.unwrap();
        assert_eq!(worst.index, 0);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let counter = Cell::new(0.0);
        let err = finite_diff_check(
            |_: &Vec<f64>| {
                counter.set(counter.get() + 1.0);
                counter.get()
            },
            &vec![0.0],
            &vec![0.0],
            FdOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GradCheckError::NonDeterministic { .. }));
    }

    #[test]
    fn five_point_stencil_is_exact_on_cubics() {
        let p = vec![0.7, -1.3];
        let analytic: Vec<f64> = p.iter().map(|v| 3.0 * v * v).collect();
        let opts = FdOptions {
            step: 0.1,
            stencil: Stencil::FivePoint,
            ..FdOptions::default()
        };
        let report = finite_diff_check(|q: &Vec<f64>| q.iter().map(|v| v * v * v).sum(), &p, &analytic, opts).unwrap();
        assert!(report.max_rel_err < 1e-12, "{report:?}");
    }

    #[test]
    fn bad_step_is_rejected() {
        let opts = FdOptions {
            step: 0.0,
            ..FdOptions::default()
        };
        assert_eq!(
            finite_diff_check(|_: &Vec<f64>| 0.0, &vec![0.0], &vec![0.0], opts).unwrap_err(),
            GradCheckError::BadStep(0.0)
        );
    }

    #[test]
    fn sampling_limits_checked_coordinates() {
        let p: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let opts = FdOptions {
            max_coords_per_tensor: Some(7),
            ..FdOptions::default()
        };
        let report = finite_diff_check(|q: &Vec<f64>| q.iter().map(|v| v * v).sum(), &p, &g, opts).unwrap();
        assert_eq!(report.checked, 7);
    }
}
