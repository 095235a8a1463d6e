//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it is
//! independent of every backward rule it checks.

use super::tensor::{no_grad, Tensor};
use crate::error::Result;

/// Components with magnitude below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst component.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements excluded because the stencil crossed a non-differentiable point.
    pub straddled: usize,
}

/// Which elements of each parameter to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// Every `n`-th element starting at an offset, at most `limit` per tensor.
    Strided { step: usize, limit: usize },
}

/// Compares `backward` of the scalar produced by `f` against central
/// differences with step `h` on every covered element of `params`.
///
/// Elements whose error exceeds `tol` are re-measured at `h / 2` and `h / 4`;
/// if a smaller step disagrees with `h` by more than `tol / 2` the
/// piecewise-smooth function has a kink inside the stencil and the element is counted in `straddled` instead
/// of `max_rel_err`. The test reads only forward values.
pub fn check<F>(params: &[Tensor], h: f64, tol: f64, coverage: Coverage, f: F) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().expect("gradient check needs trainable leaves"))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        straddled: 0,
    };
    no_grad(|| -> Result<()> {
        for (pi, p) in params.iter().enumerate() {
            let n = p.numel();
            let indices: Vec<usize> = match coverage {
                Coverage::All => (0..n).collect(),
                Coverage::Strided { step, limit } => {
                    (0..n).skip((pi * 7) % step.max(1)).step_by(step.max(1)).take(limit).collect()
                }
            };
            let central = |i: usize, step: f64| -> Result<f64> {
                let orig = p.data()[i];
                p.data_mut()[i] = orig + step;
                let plus = f()?.item();
                p.data_mut()[i] = orig - step;
                let minus = f()?.item();
                p.data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            for i in indices {
                let numeric = central(i, h)?;
                let a = analytic[pi][i];
                let err = relative_error(a, numeric);
                let mut kinked = false;
                if err > tol {
                    for div in [2.0, 4.0] {
                        kinked |= relative_error(numeric, central(i, h / div)?) > tol / 2.0;
                    }
                }
                if kinked {
                    report.straddled += 1;
                    continue;
                }
                report.checked += 1;
                if err > report.max_rel_err || report.checked == 1 {
                    report.max_rel_err = err;
                    report.worst = (pi, i);
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        Ok(())
    })?;
    Ok(report)
}
