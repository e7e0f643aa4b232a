//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

fn check_step(h: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    Ok(())
}

fn scalar_output(tape: &Tape, out: ValueId) -> Result<f64> {
    if tape.value(out).len() != 1 {
        return Err(Error::Usage(format!(
            "checked function must be scalar-valued, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.assert_all_finite()?;
    Ok(tape.value(out).data()[0])
}

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued function of one tensor input.
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    check_step(h)?;
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let out = f(&mut tape, x)?;
    let _ = scalar_output(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(probe.clone());
        let out = f(&mut t, x)?;
        scalar_output(&t, out)
    };

    let mut max_rel: f64 = 0.0;
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite-difference probe at coordinate {i} produced {fp} / {fm}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Same check, but differentiating w.r.t. selected parameters of a store.
/// The builder runs the full forward pass and returns the scalar loss.
pub fn grad_check_params<F>(
    f: F,
    store: &mut ParamStore,
    which: &[ParamId],
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<ValueId>,
{
    check_step(h)?;
    store.zero_grads();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let _ = scalar_output(&tape, out)?;
    let grads = tape.backward(out)?;
    tape.accumulate_param_grads(&grads, store);

    let mut max_rel: f64 = 0.0;
    for &pid in which {
        let n = store.value(pid).len();
        for i in 0..n {
            let orig = store.value(pid).data()[i];
            store.value_mut(pid).data_mut()[i] = orig + h;
            let fp = {
                let mut t = Tape::new();
                let out = f(&mut t, store)?;
                scalar_output(&t, out)?
            };
            store.value_mut(pid).data_mut()[i] = orig - h;
            let fm = {
                let mut t = Tape::new();
                let out = f(&mut t, store)?;
                scalar_output(&t, out)?
            };
            store.value_mut(pid).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = store.grad(pid).data()[i];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
