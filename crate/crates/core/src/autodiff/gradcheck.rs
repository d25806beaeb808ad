//! Central-difference gradient oracle.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
///
/// Errors are measured per parameter tensor as `|a - n| / max(|a|, |n|, f)`
/// with Euclidean norms and the floor `f = 1e-3 * |a_all|` (the norm of the
/// whole analytic gradient, plus 1e-12). An elementwise ratio would flag
/// entries whose true gradient is ~1e-7, where the central difference is
/// dominated by round-off of order `eps * |loss| / h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)`: the largest absolute
    /// discrepancy inside the worst tensor.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-8)
}

fn eval<F>(store: &ParamStore, loss: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = loss(store, &mut tape)?;
    let val = tape.value(v);
    if val.dim() != (1, 1) {
        return Err(Error::NonScalarLoss {
            rows: val.nrows(),
            cols: val.ncols(),
        });
    }
    Ok(val[[0, 0]])
}

/// Compares analytic gradients of `loss` against `(f(θ+h) − f(θ−h)) / 2h`
/// for every scalar of every parameter in `store`.
pub fn finite_diff_check<F>(store: &ParamStore, h: f64, loss: F) -> Result<GradCheck>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(store, &mut tape)?;
    let analytic: Vec<Option<_>> = tape
        .backward(out, store.len())?
        .into_iter()
        .map(|g| g.map(|g| g.as_standard_layout().into_owned()))
        .collect();
    drop(tape);
    let total = analytic
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let floor = 1e-3 * total + 1e-12;

    let mut probe = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for id in store.ids() {
        let n = store.get(id).value.len();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let mut largest: Option<(usize, f64, f64)> = None;
        for flat in 0..n {
            let orig = store.get(id).value.as_slice().expect("standard layout")[flat];
            let set = |probe: &mut ParamStore, x: f64| {
                probe.get_mut(id).value.as_slice_mut().expect("standard layout")[flat] = x;
            };
            set(&mut probe, orig + h);
            let plus = eval(&probe, &loss)?;
            set(&mut probe, orig - h);
            let minus = eval(&probe, &loss)?;
            set(&mut probe, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at perturbed `{}`[{flat}]",
                    store.get(id).name
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.index()]
                .as_ref()
                .map_or(0.0, |g| g.as_slice().expect("standard layout")[flat]);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            if largest.is_none_or(|(_, la, ln)| (a - numeric).abs() > (la - ln).abs()) {
                largest = Some((flat, a, numeric));
            }
            report.checked += 1;
        }
        let err = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(floor);
        if let Some((flat, a, numeric)) = largest {
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.get(id).name.clone(), flat, a, numeric));
            }
        }
    }
    Ok(report)
}
