//! Central-difference check of taped gradients.

use alloc::string::String;

use super::{ParamStore, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub loss: f64,
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    Ok(tape.scalar(loss))
}

/// Compares the taped gradient of `f` with central differences
/// `(f(θ+ε) - f(θ-ε)) / 2ε` over every coordinate of every parameter accepted
/// by `include`.
pub fn grad_check<F>(
    f: F,
    store: &ParamStore,
    eps: f64,
    include: impl Fn(&super::Param) -> bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidInput(alloc::format!(
            "finite-difference step {eps:e} outside [1e-6, 1e-4]"
        )));
    }
    let (loss, grads) = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        (tape.scalar(out), tape.backward(out)?)
    };
    let again = evaluate(&f, store)?;
    if loss.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: loss,
            second: again,
        });
    }

    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate(&grads);

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
        loss,
    };
    for (id, param) in store.iter() {
        if !include(param) {
            continue;
        }
        let touched = analytic.get(id).has_grad();
        let g_ad = analytic.get(id).grad();
        for k in 0..param.value.as_slice().len() {
            let base = param.value.as_slice()[k];
            probe.value_mut(id).as_mut_slice()[k] = base + eps;
            let up = evaluate(&f, &probe)?;
            probe.value_mut(id).as_mut_slice()[k] = base - eps;
            let down = evaluate(&f, &probe)?;
            probe.value_mut(id).as_mut_slice()[k] = base;

            let fd = (up - down) / (2.0 * eps);
            let ad = if touched { g_ad.as_slice()[k] } else { 0.0 };
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((param.name.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Matrix, ParamGroup};
    use core::cell::Cell;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let id = store.add("theta", ParamGroup::Rs, Matrix::row_vector(&[3.0])).unwrap();
        let f = |t: &mut Tape<'_>| {
            let x = t.param(id);
            t.mul(x, x)
        };
        let mut tape = Tape::new(&store);
        let y = f(&mut tape).unwrap();
        let g = tape.backward(y).unwrap();
        let mut s = store.clone();
        s.accumulate(&g);
        assert_eq!(s.get(id).grad().as_slice(), &[6.0]);
        let report = grad_check(f, &store, 1e-5, |_| true).unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        store
            .add("theta", ParamGroup::Rs, Matrix::row_vector(&[1.0, 2.0]))
            .unwrap();
        let report = grad_check(
            |t: &mut Tape<'_>| Ok(t.constant(Matrix::row_vector(&[4.0]))),
            &store,
            1e-5,
            |_| true,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.coordinates, 2);
    }

    #[test]
    fn nondeterminism_is_detected() {
        let mut store = ParamStore::new();
        store.add("theta", ParamGroup::Rs, Matrix::row_vector(&[1.0])).unwrap();
        let calls = Cell::new(0.0);
        let err = grad_check(
            |t: &mut Tape<'_>| {
                calls.set(calls.get() + 1.0);
                Ok(t.constant(Matrix::row_vector(&[calls.get()])))
            },
            &store,
            1e-5,
            |_| true,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn step_outside_range_rejected() {
        let store = ParamStore::new();
        let f = |t: &mut Tape<'_>| Ok(t.constant(Matrix::row_vector(&[0.0])));
        assert!(grad_check(f, &store, 1e-2, |_| true).is_err());
    }
}
