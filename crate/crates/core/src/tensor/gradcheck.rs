//! Central finite-difference gradient checking.
//!
//! The numerical side only ever runs forward passes, so it stays independent
//! of the backward rules it is used to verify.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing one analytic partial derivative with its numerical estimate.
#[derive(Debug, Clone, Copy)]
pub struct Comparison {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Comparison {
    /// `|analytic − numeric| / (|analytic| + 1e-8)`
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.analytic.abs() + 1e-8)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub comparisons: Vec<Comparison>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .max_by(|a, b| a.relative_error().total_cmp(&b.relative_error()))
    }

    /// Fraction of comparisons whose relative error is below `tol`.
    pub fn pass_rate(&self, tol: f64) -> f64 {
        if self.comparisons.is_empty() {
            return 1.0;
        }
        let ok = self
            .comparisons
            .iter()
            .filter(|c| c.relative_error() < tol)
            .count();
        ok as f64 / self.comparisons.len() as f64
    }

    pub fn all_within(&self, tol: f64) -> bool {
        self.pass_rate(tol) == 1.0
    }
}

/// Checks `d loss / d inputs` where `build` records a scalar loss on a fresh
/// tape from the given input vars.
///
/// `select(input, element)` chooses which elements to probe; pass `|_, _| true`
/// for all of them.
pub fn check<F, S>(inputs: &[Tensor], build: F, h: f64, mut select: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    S: FnMut(usize, usize) -> bool,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut comparisons = Vec::new();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(<[f64]>::to_vec);
        for e in 0..inputs[i].numel() {
            if !select(i, e) {
                continue;
            }
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            comparisons.push(Comparison {
                input: i,
                element: e,
                analytic: analytic.as_ref().map_or(0.0, |g| g[e]),
                numeric: (plus - minus) / (2.0 * h),
            });
        }
    }
    Ok(GradCheckReport { comparisons })
}
