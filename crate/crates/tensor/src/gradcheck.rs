//! Central finite-difference gradient oracle (test support).
//!
//! Computes every partial derivative numerically by re-running the forward
//! closure on a fresh tape, so it shares no code with `Tape::backward`.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Lower bound on the relative-error denominator, so exact zeros compare
    /// against finite-difference round-off rather than dividing by zero.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    /// `f` builds a scalar from the registered input vars.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();

        let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let loss = f(&mut tape, &vars)?;
            Ok(tape.scalar(loss))
        };

        let mut numeric = Vec::with_capacity(inputs.len());
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for i in 0..inputs.len() {
            let mut col = Vec::with_capacity(inputs[i].numel());
            for j in 0..inputs[i].numel() {
                let orig = inputs[i].data()[j];
                work[i].data_mut()[j] = orig + self.step;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - self.step;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                col.push((plus - minus) / (2.0 * self.step));
            }
            numeric.push(col);
        }

        let mut max_rel_error = 0.0;
        let mut worst = (0, 0);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            for (j, (&x, &y)) in a.iter().zip(n).enumerate() {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(self.floor);
                if rel > max_rel_error || rel.is_nan() {
                    max_rel_error = rel;
                    worst = (i, j);
                }
            }
        }
        Ok(GradReport {
            max_rel_error,
            worst,
            analytic,
            numeric,
        })
    }
}
