//! Central finite-difference checks of reverse-mode gradients.
//!
//! Inputs under test are registered as parameters, so one checker covers
//! both weights and activations.

use crate::autograd::Var;
use crate::nn::{ParamStore, Session};

pub const STEP: f64 = 1e-4;

/// Gradients below this magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Worst relative error and where it occurred.
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn scalar(store: &ParamStore, f: &dyn Fn(&mut Session) -> Var) -> f64 {
    let mut s = Session::inference(store);
    let out = f(&mut s);
    let v = s.g.value(out);
    assert_eq!(v.len(), 1, "gradient check needs a scalar output");
    v.data()[0]
}

/// Compare the analytic gradient of `f` with central differences at up to
/// `per_tensor` evenly spread entries of every parameter.
pub fn check(store: &mut ParamStore, per_tensor: usize, f: &dyn Fn(&mut Session) -> Var) -> GradCheck {
    let analytic = {
        let mut s = Session::training(store);
        let out = f(&mut s);
        let mut grads = s.g.backward(out);
        s.param_grads(&mut grads)
    };
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut result = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (i, name) in names.iter().enumerate() {
        let len = analytic[i].len();
        let picks = per_tensor.min(len);
        for p in 0..picks {
            let j = p * len / picks;
            let orig = store.by_name(name).unwrap().data()[j];
            store.by_name_mut(name).unwrap().data_mut()[j] = orig + STEP;
            let plus = scalar(store, f);
            store.by_name_mut(name).unwrap().data_mut()[j] = orig - STEP;
            let minus = scalar(store, f);
            store.by_name_mut(name).unwrap().data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric);
            result.checked += 1;
            if e > result.max_rel_err || result.worst.is_none() {
                result.max_rel_err = result.max_rel_err.max(e);
                result.worst = Some((name.clone(), j, a, numeric));
            }
        }
    }
    result
}
