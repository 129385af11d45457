//! Central-difference gradient checker.

use crate::diff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of `f` at `theta` with central differences of step `h`.
///
/// `f` receives a fresh tape and one parameter leaf per entry of `theta`, and
/// must return a scalar node. Stop-gradient values inside `f` are recomputed at
/// every probe, so callers checking a loss with frozen terms should capture
/// those terms outside the closure.
pub fn grad_check<F>(f: F, theta: &[Matrix], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let eval = |ps: &[Matrix]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut t = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let out = f(&mut t, &vars)?;
        let v = t.value(out);
        if v.shape() != (1, 1) {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        if !v.as_slice()[0].is_finite() {
            return Err(Error::Numerical("non-finite function value during gradient check".into()));
        }
        Ok((t, vars, out))
    };

    let (tape, vars, root) = eval(theta)?;
    let grads = tape.backward(root)?;
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe: Vec<Matrix> = theta.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for k in 0..theta[pi].len() {
            let base = theta[pi].as_slice()[k];
            probe[pi].as_mut_slice()[k] = base + h;
            let (tp, _, rp) = eval(&probe)?;
            let fp = tp.scalar(rp);
            probe[pi].as_mut_slice()[k] = base - h;
            let (tm, _, rm) = eval(&probe)?;
            let fm = tm.scalar(rm);
            probe[pi].as_mut_slice()[k] = base;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
