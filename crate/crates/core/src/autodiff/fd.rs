//! Central finite-difference checks of reverse-mode rules.

use rand::Rng;

use super::tape::Op;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FdReport {
    /// Largest `|a - n| / (|a| + |n| + 1e-8)` over all checked coordinates.
    pub max_rel: f64,
    pub max_abs: f64,
    /// `(input, coordinate)` where `max_rel` was found.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn relative(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-8)
}

/// Compare `vjp(cotangent)` against central differences of
/// `<cotangent, eval(x)>` for every coordinate of every input `vjp` reports
/// a gradient for. The cotangent is drawn from `rng`.
pub fn fd_check_with<R, E, V>(inputs: &[Vec<f64>], h: f64, rng: &mut R, eval: E, vjp: V) -> Result<FdReport>
where
    R: Rng,
    E: Fn(&[Vec<f64>]) -> Result<Vec<f64>>,
    V: Fn(&[Vec<f64>], &[f64]) -> Result<Vec<Vec<f64>>>,
{
    let out = eval(inputs)?;
    let cot: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let analytic = vjp(inputs, &cot)?;
    let dot = |x: &[Vec<f64>]| -> Result<f64> { Ok(eval(x)?.iter().zip(&cot).map(|(a, b)| a * b).sum()) };
    let mut report = FdReport::default();
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        if grad.is_empty() {
            continue;
        }
        for j in 0..inputs[i].len() {
            let x0 = inputs[i][j];
            probe[i][j] = x0 + h;
            let up = dot(&probe)?;
            probe[i][j] = x0 - h;
            let down = dot(&probe)?;
            probe[i][j] = x0;
            let num = (up - down) / (2.0 * h);
            let rel = relative(grad[j], num);
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = (i, j);
            }
            report.max_abs = report.max_abs.max((grad[j] - num).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

fn borrow(x: &[Vec<f64>]) -> Vec<&[f64]> {
    x.iter().map(Vec::as_slice).collect()
}

/// [`fd_check_with`] on a single [`Op`].
pub fn fd_check<R: Rng>(op: &dyn Op, inputs: &[Vec<f64>], h: f64, rng: &mut R) -> Result<FdReport> {
    fd_check_with(
        inputs,
        h,
        rng,
        |x| Ok(op.forward(&borrow(x))?.0),
        |x, cot| {
            let refs = borrow(x);
            let (out, saved) = op.forward(&refs)?;
            Ok(op.backward(&refs, &out, &saved, cot))
        },
    )
}
