//! Finite-difference verification of analytic gradients.

use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4, tolerance: 1e-4, max_elements_per_param: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub checked: usize,
    /// First element whose analytic gradient was NaN or infinite.
    pub non_finite_at: Option<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn param(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn sample_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len && k > 0 => (0..k).map(|j| j * len / k).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares backward-pass gradients of every parameter in `store` against
/// central differences of the scalar produced by `f`.
///
/// `f` must build a fresh tape from the current parameter values and return
/// it with its scalar output.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Tape<f64>, Var)>,
{
    store.zero_grad();
    let (tape, loss) = f(store)?;
    tape.backward(loss, store)?;
    drop(tape);
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, _, p)| p.grad.data().to_vec()).collect();

    let eval = |f: &mut F, s: &ParamStore<f64>| -> Result<f64> {
        let (t, l) = f(s)?;
        t.value(l).item()
    };

    let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    let mut params = Vec::with_capacity(ids.len());
    for (k, (id, name)) in ids.into_iter().enumerate() {
        let grads = &analytic[k];
        let non_finite_at = grads.iter().position(|g| !g.is_finite());
        let indices = sample_indices(grads.len(), opts.max_elements_per_param);
        let mut worst = 0.0;
        let mut worst_index = 0;
        if non_finite_at.is_none() {
            for &i in &indices {
                let orig = store.value(id).data()[i];
                store.value_mut(id).data_mut()[i] = orig + opts.step;
                let plus = eval(&mut f, store)?;
                store.value_mut(id).data_mut()[i] = orig - opts.step;
                let minus = eval(&mut f, store)?;
                store.value_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * opts.step);
                let err = relative_error(grads[i], numeric);
                if err > worst || err.is_nan() {
                    worst = err;
                    worst_index = i;
                }
            }
        }
        let passed = non_finite_at.is_none() && worst <= opts.tolerance;
        params.push(ParamCheck {
            name,
            max_rel_err: worst,
            worst_index,
            checked: indices.len(),
            non_finite_at,
            passed,
        });
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    let passed = params.iter().all(|p| p.passed);
    Ok(GradCheckReport { params, max_rel_err, passed })
}
