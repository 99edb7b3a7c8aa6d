//! Central finite-difference checks of parameter gradients.

use ndarray::Array4;
use rand::Rng;

use super::{ParamStore, Real};
use crate::rng::stream_rng;

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` (one tensor per parameter, in store order) with central
/// differences of `loss` on up to `per_tensor` random entries of every parameter.
/// `params` projects the store out of `state`; entries are restored after each probe.
pub fn check_gradients<S, F: Real>(
    state: &mut S,
    params: impl Fn(&mut S) -> &mut ParamStore<F>,
    loss: impl Fn(&S) -> f64,
    analytic: &[Array4<F>],
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> GradCheck {
    let mut rng = stream_rng(seed, 0);
    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let names: Vec<(String, usize)> = params(state).iter().map(|(n, v)| (n.to_string(), v.len())).collect();
    assert_eq!(names.len(), analytic.len(), "one gradient per parameter");
    let step = F::from_f64(h).unwrap();
    for ((name, len), grad) in names.iter().zip(analytic) {
        for _ in 0..per_tensor.min(*len) {
            let i = rng.random_range(0..*len);
            let set = |state: &mut S, v: Option<F>| -> F {
                let value = params(state).by_name_mut(name).expect("parameter exists");
                let slot = &mut value.as_slice_memory_order_mut().expect("contiguous")[i];
                let old = *slot;
                if let Some(v) = v {
                    *slot = v;
                }
                old
            };
            let original = set(state, None);
            let mut probe = |delta: F| {
                set(state, Some(original + delta));
                let l = loss(state);
                set(state, Some(original));
                l
            };
            let numeric = (probe(step) - probe(-step)) / (2.0 * h);
            let a = grad.as_slice_memory_order().expect("contiguous")[i].to_f64().unwrap();
            let err = relative_error(a, numeric, 1e-6);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    report
}
