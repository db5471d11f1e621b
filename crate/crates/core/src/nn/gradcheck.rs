//! Central finite-difference gradient checking for models built on [`Tape`].

use rand::Rng;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a small absolute floor so that vanishing gradients
/// compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares backprop gradients of `loss` against central differences on
/// `samples` randomly chosen scalar parameters.
///
/// `loss` must be a pure function of the bound parameters.
pub fn check_gradients<R, F>(
    params: &ParamStore,
    samples: usize,
    step: f64,
    rng: &mut R,
    loss: F,
) -> GradCheckReport
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let root = loss(&mut tape, &bound);
    let mut grads = tape.backward(root);
    let analytic = params.collect_grads(&bound, &mut grads);

    let eval = |store: &ParamStore| {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let root = loss(&mut tape, &bound);
        tape.scalar(root)
    };

    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let sizes: Vec<usize> = params.iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut scratch = params.clone();
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let original = params.iter().nth(which).unwrap().1.as_slice_memory_order().unwrap()[flat];
        let set = |store: &mut ParamStore, v: f64| {
            let t = store.tensors_mut().nth(which).unwrap();
            t.as_slice_memory_order_mut().unwrap()[flat] = v;
        };
        set(&mut scratch, original + step);
        let plus = eval(&scratch);
        set(&mut scratch, original - step);
        let minus = eval(&scratch);
        set(&mut scratch, original);
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[which].as_slice_memory_order().unwrap()[flat];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((names[which].clone(), flat, a, numeric));
        }
    }
    report
}
