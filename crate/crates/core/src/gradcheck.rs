//! Central-difference verification of tape gradients.
//!
//! The loss closure is re-run from scratch for every probe, so the check is
//! independent of the backward rules it verifies. Probes whose `+h` or `-h`
//! pass takes a different piecewise branch than the base point (different
//! ReLU mask, routing choice, argmax) are skipped and counted: a finite
//! difference across a kink measures nothing about the local derivative.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub frozen: bool,
    pub elements: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest |tape gradient| seen; exactly 0 for frozen tensors.
    pub max_tape_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped_kinks).sum()
    }

    pub fn frozen_grads_zero(&self) -> bool {
        self.params.iter().filter(|p| p.frozen).all(|p| p.max_tape_grad == 0.0)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance && self.frozen_grads_zero()
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn evaluate<P, F>(params: &P, f: &F) -> Result<(f64, u64)>
where
    P: Parameters,
    F: for<'t> Fn(&mut Tape<'t>, &'t P) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let v = tape.item(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite { stage: "grad_check probe" });
    }
    Ok((v, tape.pattern()))
}

fn set_element<P: Parameters>(params: &mut P, tensor: usize, elem: usize, value: f64) -> f64 {
    let mut i = 0;
    let mut old = f64::NAN;
    params.visit_mut(&mut |_, t| {
        if i == tensor {
            old = t.data()[elem];
            t.data_mut()[elem] = value;
        }
        i += 1;
    });
    old
}

/// Compares tape gradients of the scalar `f` against central differences
/// for every trainable tensor of `params`.
///
/// Frozen tensors are not probed; their tape gradient and accumulated
/// gradient buffer are recorded so the caller can assert they are zero.
/// Gradient buffers of `params` are left zeroed.
pub fn grad_check<P, F>(params: &mut P, f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    P: Parameters,
    F: for<'t> Fn(&mut Tape<'t>, &'t P) -> Result<Var>,
{
    if cfg.step <= 0.0 {
        return Err(Error::config("step", "must be positive"));
    }

    struct Entry {
        name: String,
        frozen: bool,
        trainable: bool,
        analytic: Vec<f64>,
    }

    let (loss, base_pattern, entries) = {
        let mut tape = Tape::new();
        let out = f(&mut tape, &*params)?;
        let loss = tape.item(out);
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: "grad_check base" });
        }
        let grads = tape.backward(out)?;
        let mut entries = Vec::new();
        params.visit(&mut |name, t| {
            let analytic = grads
                .for_param(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            entries.push(Entry {
                name: String::from(name),
                frozen: t.is_frozen(),
                trainable: t.is_trainable(),
                analytic,
            });
        });
        (loss, tape.pattern(), (entries, grads))
    };
    let (entries, grads) = entries;

    // Fold into the buffers as training would, so frozen buffers are checked too.
    crate::params::zero_grads(params);
    grads.accumulate_into(params);
    let mut buffer_max = Vec::new();
    params.visit(&mut |_, t| {
        buffer_max.push(t.grad().map_or(0.0, |g| g.iter().fold(0.0f64, |m, x| m.max(x.abs()))));
    });
    crate::params::zero_grads(params);

    let mut report = Vec::with_capacity(entries.len());
    for (ti, e) in entries.iter().enumerate() {
        let tape_max = e.analytic.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut pc = ParamCheck {
            name: e.name.clone(),
            frozen: e.frozen,
            elements: e.analytic.len(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            max_tape_grad: if e.frozen { tape_max.max(buffer_max[ti]) } else { tape_max },
        };
        if e.trainable {
            for j in 0..e.analytic.len() {
                let x0 = set_element(params, ti, j, f64::NAN);
                set_element(params, ti, j, x0 + cfg.step);
                let plus = evaluate(params, &f);
                set_element(params, ti, j, x0 - cfg.step);
                let minus = evaluate(params, &f);
                set_element(params, ti, j, x0);
                let ((lp, pp), (lm, pm)) = (plus?, minus?);
                if pp != base_pattern || pm != base_pattern {
                    pc.skipped_kinks += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * cfg.step);
                let a = e.analytic[j];
                pc.checked += 1;
                pc.max_abs_error = pc.max_abs_error.max((a - numeric).abs());
                pc.max_rel_error = pc.max_rel_error.max(relative_error(a, numeric, cfg.floor));
            }
        }
        report.push(pc);
    }

    Ok(GradCheckReport {
        params: report,
        tolerance: cfg.tolerance,
        loss,
    })
}
