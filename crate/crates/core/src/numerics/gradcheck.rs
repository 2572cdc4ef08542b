//! Central finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};

/// Outcome of a finite-difference sweep. Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)` for analytic `a` and numeric `n`.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// (parameter name, coordinate, analytic, numeric) of the worst error.
    pub worst: Option<(String, usize, f64, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} coords, max rel err {:.3e} (tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.coords_checked,
            self.max_rel_err,
            self.tol
        )?;
        if let Some((name, i, a, n)) = &self.worst {
            write!(f, "; worst {name}[{i}] analytic={a:.6e} numeric={n:.6e}")?;
        }
        Ok(())
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare the analytic gradients already stored on `ids` (populated by a
/// prior backward pass of the same function) against central differences
/// `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// `f` must be a deterministic, side-effect-free function of the store's
/// values; it is called with single coordinates perturbed and must restore
/// nothing itself.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("grad_check: h must be > 0, got {h}")));
    }
    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_err: 0.0,
        worst: None,
        tol,
    };
    for &id in ids {
        let n_coords = store.tensor(id).numel();
        let analytic = store.tensor(id).grad_or_zeros();
        let name = store.entry(id).name.clone();
        for i in 0..n_coords {
            let orig = store.tensor(id).values()[i];
            store.tensor_mut(id).values_mut()[i] = orig + h;
            let f_plus = f(store)?;
            store.tensor_mut(id).values_mut()[i] = orig - h;
            let f_minus = f(store)?;
            store.tensor_mut(id).values_mut()[i] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::Numeric("grad_check"));
            }
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let e = rel_err(analytic[i], numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((name.clone(), i, analytic[i], numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Group;
    use crate::numerics::{Tape, Tensor};

    /// f(w) = sum_i w_i^2 via the tape; fills grads.
    fn quad_loss(store: &mut ParamStore) -> Result<f64> {
        let id = ParamId(0);
        let mut tape = Tape::new();
        let w = store.leaf(&mut tape, id);
        let n = tape.values(w).len();
        let row = tape.reshape(w, vec![1, n])?;
        let col = tape.transpose(row)?;
        let s = tape.matmul(row, col)?;
        Ok(tape.values(s)[0])
    }

    fn quad_backward(store: &mut ParamStore) -> Result<()> {
        let id = ParamId(0);
        store.clear_grads();
        let mut tape = Tape::new();
        let w = store.leaf(&mut tape, id);
        let n = tape.values(w).len();
        let row = tape.reshape(w, vec![1, n])?;
        let col = tape.transpose(row)?;
        let s = tape.matmul(row, col)?;
        let loss = tape.reshape(s, vec![1])?;
        tape.backward(loss)?;
        store.write_back_grads(&tape);
        Ok(())
    }

    #[test]
    fn quadratic_passes_tightly() {
        let mut store = ParamStore::new();
        let mut t = Tensor::vector(vec![0.5, -1.25, 2.0]);
        t.requires_grad = true;
        let id = store.push("w", Group::Mop, true, t);
        quad_backward(&mut store).unwrap();
        let report = grad_check(&mut store, &[id], quad_loss, 1e-5, 1e-9).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut store = ParamStore::new();
        let mut t = Tensor::vector(vec![0.5, -1.25, 2.0]);
        t.requires_grad = true;
        let id = store.push("w", Group::Mop, true, t);
        quad_backward(&mut store).unwrap();
        // Plant a fault: double the analytic gradient.
        for g in store.tensor_mut(id).grad.as_mut().unwrap() {
            *g *= 2.0;
        }
        let report = grad_check(&mut store, &[id], quad_loss, 1e-5, 1e-3).unwrap();
        assert!(!report.passed(), "{report}");
    }

    #[test]
    fn rejects_nonpositive_h() {
        let mut store = ParamStore::new();
        let id = store.push("w", Group::Mop, true, Tensor::vector(vec![1.0]));
        assert!(grad_check(&mut store, &[id], quad_loss, 0.0, 1e-3).is_err());
    }
}
