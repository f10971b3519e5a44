//! Central-finite-difference verification of reverse-mode gradients.
//!
//! The numeric side re-evaluates the loss at `value ± h` per parameter
//! element and never touches the reverse-mode path, so it stays an
//! independent oracle for everything built on the tape.

use super::{BoundParams, ParamStore, Tape, Tensor};
use crate::{MirlError, Result};

// Denominator floor for the relative error. Central differences at h = 1e-4
// carry O(h^2 f''') truncation noise (observed up to ~1e-8 on composite
// losses), so gradient components below this magnitude are held to the
// absolute tolerance tol * REL_FLOOR instead of a pure ratio that the noise
// would dominate. A sign flip or scale error on such a component still
// exceeds the bar by orders of magnitude.
const REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Names of parameters whose error exceeded `tol`.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences with step `h`, for every element of every parameter.
pub fn grad_check<F>(store: &ParamStore, f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &BoundParams) -> Result<Tensor>,
{
    // Analytic pass.
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let loss = f(&tape, &bound)?;
    if loss.numel() != 1 {
        return Err(MirlError::GradCheck(format!(
            "function must return a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    loss.backward()?;
    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(store.len());
    for p in store.iter() {
        let g = bound
            .get(&p.name)?
            .grad()
            .unwrap_or_else(|| vec![0.0; p.value.len()]);
        analytic.push(g);
    }

    // Numeric pass on a scratch copy.
    let mut work = store.clone();
    let mut checks = Vec::with_capacity(store.len());
    let mut failures = Vec::new();
    let mut global_max = 0.0f64;
    let names: Vec<String> = store.names().map(str::to_string).collect();

    for (pi, name) in names.iter().enumerate() {
        let len = work.get(name)?.value.len();
        let mut worst = 0.0f64;
        for e in 0..len {
            let orig = work.get(name)?.value[e];
            work.get_mut(name)?.value[e] = orig + h;
            let f_plus = eval_scalar(&work, &f)?;
            work.get_mut(name)?.value[e] = orig - h;
            let f_minus = eval_scalar(&work, &f)?;
            work.get_mut(name)?.value[e] = orig;
            let fd = (f_plus - f_minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[pi][e], fd));
        }
        if worst > tol {
            failures.push(name.clone());
        }
        global_max = global_max.max(worst);
        checks.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
        });
    }

    Ok(GradCheckReport {
        checks,
        max_rel_err: global_max,
        tol,
        failures,
    })
}

fn eval_scalar<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&Tape, &BoundParams) -> Result<Tensor>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let loss = f(&tape, &bound)?;
    Ok(loss.item())
}
