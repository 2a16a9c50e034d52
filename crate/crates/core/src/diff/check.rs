//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check. Failures are reported, not raised.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen for each input.
    pub max_rel_err: Vec<f64>,
    /// Number of elements compared per input.
    pub checked: Vec<usize>,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with a `max(|a|, |b|, 1e-8)` denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, 1e-8)
}

/// Relative error with a `max(|a|, |b|, floor)` denominator. The floor
/// turns the test absolute for gradients that are zero up to roundoff.
pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Finite-difference settings. `fraction < 1` checks a seeded random subset
/// of elements.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    pub fraction: f64,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Second step tried for elements that fail at `h`, e.g. when a ReLU
    /// kink lies within `h` of the point.
    pub fallback_h: Option<f64>,
}

impl GradCheck {
    pub fn new(h: f64, tol: f64) -> Self {
        GradCheck {
            h,
            tol,
            fraction: 1.0,
            seed: 0,
            floor: 1e-8,
            fallback_h: None,
        }
    }

    pub fn floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn fallback(mut self, h: f64) -> Self {
        self.fallback_h = Some(h);
        self
    }

    pub fn sampled(mut self, fraction: f64, seed: u64) -> Self {
        self.fraction = fraction;
        self.seed = seed;
        self
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        drop(tape);

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&tape, &vars)?;
            Ok(tape.value(out).item())
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut max_rel_err = vec![0.0; inputs.len()];
        let mut checked = vec![0; inputs.len()];
        for i in 0..inputs.len() {
            for k in 0..inputs[i].len() {
                if self.fraction < 1.0 && rng.random::<f64>() >= self.fraction {
                    continue;
                }
                let orig = inputs[i].data()[k];
                let mut central = |h: f64| -> Result<f64> {
                    work[i].data_mut()[k] = orig + h;
                    let fp = eval(&work)?;
                    work[i].data_mut()[k] = orig - h;
                    let fm = eval(&work)?;
                    work[i].data_mut()[k] = orig;
                    Ok((fp - fm) / (2.0 * h))
                };
                let a = analytic[i].data()[k];
                let mut e = rel_err_floor(a, central(self.h)?, self.floor);
                if let Some(h2) = self.fallback_h.filter(|_| e > self.tol) {
                    e = e.min(rel_err_floor(a, central(h2)?, self.floor));
                }
                max_rel_err[i] = f64::max(max_rel_err[i], e);
                checked[i] += 1;
            }
        }
        let passed = max_rel_err.iter().all(|&e| e <= self.tol);
        Ok(GradCheckReport {
            max_rel_err,
            checked,
            tol: self.tol,
            passed,
        })
    }
}

/// Checks every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    GradCheck::new(h, tol).run(f, inputs)
}
