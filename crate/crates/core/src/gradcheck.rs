//! Whole-network gradient check against central finite differences.
//!
//! The analytic gradient treats the routing coefficients as constants, so the
//! numeric side re-evaluates the loss with the coefficients frozen at the
//! values of the unperturbed forward pass.
//!
//! Loss differences are taken term by term from the perturbed class-capsule
//! norms. Subtracting two O(1) losses directly loses about one ulp of the
//! loss to cancellation, which is already 1e-11 in the derivative.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{MarginConstants, OpKind};
use crate::capsnet::{CapsNet, CapsNetConfig, ModelError};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockError {
    pub name: String,
    pub size: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub blocks: Vec<BlockError>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.tolerance)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            let status = if b.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{:<20} {:>6} params  max rel err {:.3e}  {status}", b.name, b.size, b.max_rel_error)?;
        }
        write!(
            f,
            "{} (tolerance {:.0e}, worst {:.3e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance,
            self.max_error()
        )
    }
}

/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// `margin_loss(p) - margin_loss(q)` for one sample. Where a hinge is
/// active at both points, `a² - b²` is formed as `(a - b)(a + b)` with
/// `a - b` taken from the norms directly.
pub fn margin_loss_difference(p: &[f64], q: &[f64], label: usize, c: MarginConstants) -> f64 {
    p.iter()
        .zip(q)
        .enumerate()
        .map(|(k, (&np, &nq))| {
            let (a, b, diff, weight) = if k == label {
                (c.m_plus - np, c.m_plus - nq, nq - np, 1.0)
            } else {
                (np - c.m_minus, nq - c.m_minus, np - nq, c.lambda)
            };
            match (a > 0.0, b > 0.0) {
                (true, true) => weight * diff * (a + b),
                (true, false) => weight * a * a,
                (false, true) => -weight * b * b,
                (false, false) => 0.0,
            }
        })
        .sum()
}

/// Checks the shrunk version of `config` on two random inputs, one per class.
pub fn gradcheck(config: &CapsNetConfig, seed: u64) -> Result<GradcheckReport, ModelError> {
    gradcheck_with(config, seed, None)
}

/// As [`gradcheck`], optionally corrupting one backward rule.
#[doc(hidden)]
pub fn gradcheck_with(config: &CapsNetConfig, seed: u64, corrupt: Option<OpKind>) -> Result<GradcheckReport, ModelError> {
    let mut tiny = config.shrunk_for_gradcheck();
    tiny.seed = seed;
    let model = CapsNet::new(tiny)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = model.config().input_shape();
    let samples: Vec<(Tensor, usize)> = (0..2)
        .map(|label| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            (Tensor::new(shape.to_vec(), data).expect("valid shape"), label)
        })
        .collect();

    let mut analytic: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    let mut coupling = Vec::new();
    for (x, label) in &samples {
        let sg = model.loss_and_grads_with(x, *label, corrupt)?;
        for (acc, g) in analytic.iter_mut().zip(&sg.grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        coupling.push(sg.coupling);
    }

    let margin = model.config().margin.into();
    let all_norms = |m: &CapsNet| -> Result<Vec<Vec<f64>>, ModelError> {
        samples
            .iter()
            .zip(&coupling)
            .map(|((x, _), c)| m.norms_with_coupling(x, Some(c)))
            .collect()
    };
    let loss_difference = |plus: &[Vec<f64>], minus: &[Vec<f64>]| -> f64 {
        samples
            .iter()
            .zip(plus.iter().zip(minus))
            .map(|((_, label), (p, q))| margin_loss_difference(p, q, *label, margin))
            .sum()
    };

    let mut probe = model.clone();
    let mut blocks = Vec::new();
    for (b, grads) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (e, &ga) in grads.iter().enumerate() {
            let orig = probe.params()[b].value.data()[e];
            probe.params_mut()[b].value.data_mut()[e] = orig + FD_STEP;
            let plus = all_norms(&probe)?;
            probe.params_mut()[b].value.data_mut()[e] = orig - FD_STEP;
            let minus = all_norms(&probe)?;
            probe.params_mut()[b].value.data_mut()[e] = orig;
            let numeric = loss_difference(&plus, &minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(ga, numeric));
        }
        blocks.push(BlockError {
            name: model.params()[b].name.clone(),
            size: grads.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport {
        seed,
        blocks,
        tolerance: GRADCHECK_TOLERANCE,
    })
}
