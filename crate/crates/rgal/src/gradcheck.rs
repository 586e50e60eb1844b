//! Central finite-difference verification of recorded gradients.
//!
//! `check_grad` runs `backward` on a recorded scalar and compares every
//! coordinate of every `input` leaf against `(f(x+h) - f(x-h)) / 2h`,
//! evaluated by replaying the tape. Callers are expected to keep sample
//! points away from kinks (`Tape::kink_margin`).

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use rand::Rng;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Distance from non-differentiable points below which a sample is rejected.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub checked_coords: usize,
    /// (leaf, coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} over {} coords (tolerance {:.1e})",
            if self.passed() { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.checked_coords,
            self.tolerance
        )?;
        if let Some((leaf, coord, a, n)) = &self.worst {
            write!(f, "; worst at leaf {leaf}[{coord}]: analytic {a:.6e} vs fd {n:.6e}")?;
        }
        Ok(())
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks every coordinate of every input leaf.
pub fn check_grad(tape: &mut Tape, out: VarId, tolerance: f64) -> Result<GradCheckReport> {
    check_grad_coords(tape, out, tolerance, None, &mut |_leaf_len, i| i)
}

/// Checks at most `max_coords` randomly chosen coordinates per input leaf.
/// Large parameter tensors are spot-checked instead of swept.
pub fn check_grad_sampled<R: Rng>(
    tape: &mut Tape,
    out: VarId,
    tolerance: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    check_grad_coords(tape, out, tolerance, Some(max_coords), &mut |leaf_len, _| {
        rng.gen_range(0..leaf_len)
    })
}

fn check_grad_coords(
    tape: &mut Tape,
    out: VarId,
    tolerance: f64,
    max_coords: Option<usize>,
    pick: &mut dyn FnMut(usize, usize) -> usize,
) -> Result<GradCheckReport> {
    if tolerance <= 0.0 {
        return Err(Error::invalid_arg("check_grad", "tolerance must be > 0"));
    }
    tape.backward(out)?;

    let mut report = GradCheckReport {
        tolerance,
        max_rel_err: 0.0,
        checked_coords: 0,
        worst: None,
    };

    for (leaf_no, leaf) in tape.inputs().into_iter().enumerate() {
        let base = tape.value(leaf).clone();
        let n = base.len();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => (0..m).map(|i| pick(n, i)).collect(),
            _ => (0..n).collect(),
        };
        let analytic = tape.grad(leaf).cloned();
        for coord in coords {
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[coord]);
            let mut plus = base.clone();
            plus.data_mut()[coord] += DEFAULT_FD_STEP;
            let mut minus = base.clone();
            minus.data_mut()[coord] -= DEFAULT_FD_STEP;
            let fp = tape.replay_value(out, &[(leaf, plus)])?;
            let fm = tape.replay_value(out, &[(leaf, minus)])?;
            let numeric = (fp - fm) / (2.0 * DEFAULT_FD_STEP);
            let err = rel_err(a, numeric);
            report.checked_coords += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((leaf_no, coord, a, numeric));
            }
        }
    }
    Ok(report)
}
