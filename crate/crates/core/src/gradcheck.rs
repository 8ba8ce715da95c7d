//! Central finite-difference verification of graph gradients.

use crate::error::Result;
use crate::graph::Var;
use crate::params::{Ctx, ParamStore};

/// Magnitudes below this are compared as if they had this size, so that
/// roundoff in near-zero gradients does not dominate the relative error.
pub const REL_FLOOR: f64 = 1e-6;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval(store: &ParamStore<f64>, f: &impl Fn(&mut Ctx<f64>) -> Result<Var>) -> Result<f64> {
    let mut ctx = Ctx::new(store);
    let out = f(&mut ctx)?;
    Ok(ctx.value(out).item())
}

/// Compares analytic parameter gradients of the scalar built by `f` with central
/// differences. At most `per_param` evenly spaced entries of each array are
/// probed (all entries when `None`).
pub fn check_param_grads(
    store: &ParamStore<f64>,
    f: impl Fn(&mut Ctx<f64>) -> Result<Var>,
    eps: f64,
    per_param: Option<usize>,
) -> Result<GradReport> {
    let mut ctx = Ctx::new(store);
    let out = f(&mut ctx)?;
    let grads = ctx.param_grads(out);
    drop(ctx);

    let mut report = GradReport { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    let mut probe = store.clone();
    for (name, analytic) in &grads {
        let n = analytic.len();
        let step = match per_param {
            Some(k) if k > 0 && n > k => n / k,
            _ => 1,
        };
        for idx in (0..n).step_by(step) {
            let orig = probe.get(name).unwrap().data()[idx];
            probe.get_mut(name).unwrap().data_mut()[idx] = orig + eps;
            let up = eval(&probe, &f)?;
            probe.get_mut(name).unwrap().data_mut()[idx] = orig - eps;
            let down = eval(&probe, &f)?;
            probe.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_error(analytic.data()[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                if err >= report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = format!(
                        "{name}[{idx}]: analytic {:.6e} numeric {numeric:.6e}",
                        analytic.data()[idx]
                    );
                }
            }
        }
    }
    Ok(report)
}
