//! Central finite-difference verification of tape gradients.

use rand::RngExt;

use super::params::{GradientMap, ParameterSet};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Component};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference half step.
    pub step: f64,
    /// Maximum allowed relative error per entry.
    pub tolerance: f64,
    /// Entries probed per tensor; tensors at or below this size are probed
    /// exhaustively.
    pub samples_per_tensor: usize,
    /// Relative errors are computed against `max(|analytic|, |numeric|, floor)`.
    /// At a step of 1e-5 the rounding error of the difference quotient is
    /// around 1e-10, so gradients much below 1e-5 cannot be resolved to 1e-4.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 12,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }
}

fn eval<F>(params: &ParameterSet, forward: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = forward(&mut tape)?;
    Ok(tape.scalar(loss))
}

/// Analytic gradients of `forward` checked against central differences.
pub fn grad_check<F>(params: &ParameterSet, forward: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = forward(&mut tape)?;
        let first = tape.scalar(loss);
        let again = eval(params, &forward)?;
        if first.to_bits() != again.to_bits() {
            return Err(Error::NonDeterministic(format!(
                "loss {first:e} then {again:e} for identical inputs"
            )));
        }
        tape.backward(loss)?
    };
    compare_gradients(params, forward, &analytic, cfg)
}

/// Compares supplied analytic gradients with central differences of `forward`.
pub fn compare_gradients<F>(
    params: &ParameterSet,
    forward: F,
    analytic: &GradientMap,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let mut rng = stream(cfg.seed, Component::Validation);
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (id, name, tensor) in params.iter() {
        let n = tensor.len();
        let entries: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            (0..cfg.samples_per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let grad = analytic.get(name).expect("gradient map aligned with parameters");
        let mut max_rel = 0.0f64;
        for &i in &entries {
            let orig = tensor.data()[i];
            work.value_mut(id).data_mut()[i] = orig + cfg.step;
            let plus = eval(&work, &forward)?;
            work.value_mut(id).data_mut()[i] = orig - cfg.step;
            let minus = eval(&work, &forward)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
        report.params.push(ParamCheck {
            name: name.to_string(),
            entries_checked: entries.len(),
            max_rel_error: max_rel,
            passed: max_rel <= cfg.tolerance,
        });
    }
    Ok(report)
}
