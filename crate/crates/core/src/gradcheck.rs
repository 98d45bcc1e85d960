//! Central finite-difference verification of tape adjoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub mode: Mode,
    /// Seed for dropout masks and the random output projection.
    pub seed: u64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords_per_param: Option<usize>,
    pub check_params: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            mode: Mode::Eval,
            seed: 0,
            max_coords_per_param: None,
            check_params: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all checked coordinates.
    pub max_rel_error: f64,
    /// Where the maximum occurred: `input[i]` or a parameter name, plus the flat index.
    pub worst: Option<(String, usize)>,
    pub coords: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the tape's gradient of `sum(R ⊙ f(inputs))` against central
/// differences, for a fixed pseudo-random projection `R`. Coordinates of all
/// inputs and (optionally) all parameters in `store` are checked.
pub fn grad_check<T, F>(
    store: &mut ParamStore<T>,
    inputs: &[Tensor<T>],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var>,
{
    let saved = store.snapshot();
    let mut projection: Option<Tensor<T>> = None;

    let eval = |store: &mut ParamStore<T>, inputs: &[Tensor<T>], projection: &mut Option<Tensor<T>>, want_grads: bool| -> Result<(f64, Vec<Option<Tensor<T>>>, Vec<(usize, Tensor<T>)>)> {
        let mut g = Graph::new(store, opts.mode, opts.seed);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let r = projection.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
            Tensor::from_fn(g.shape(out), |_, _, _, _| T::of(rng.gen_range(-1.0..1.0)))
        });
        let r = g.constant(r.clone());
        let weighted = g.mul(out, r)?;
        let loss = g.sum_all(weighted);
        let value = g.value(loss).data()[0].as_f64();
        if !want_grads {
            return Ok((value, Vec::new(), Vec::new()));
        }
        let grads = g.tape_backward(loss)?;
        let gin = vars.iter().map(|&v| grads.wrt(v).cloned()).collect();
        let gp = grads.params().iter().map(|(id, t)| (id.index(), t.clone())).collect();
        Ok((value, gin, gp))
    };

    let (_, input_grads, param_grads) = eval(store, inputs, &mut projection, true)?;
    let h = T::of(opts.step);
    let two_h = 2.0 * opts.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords: 0,
    };
    let note = |report: &mut GradCheckReport, err: f64, label: String, idx: usize| {
        report.coords += 1;
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = Some((label, idx));
        }
    };

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (which, grad) in input_grads.iter().enumerate() {
        for idx in 0..work[which].len() {
            let orig = work[which].data()[idx];
            work[which].data_mut()[idx] = orig + h;
            let (up, _, _) = eval(store, &work, &mut projection, false)?;
            work[which].data_mut()[idx] = orig - h;
            let (down, _, _) = eval(store, &work, &mut projection, false)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (up - down) / two_h;
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[idx].as_f64());
            note(&mut report, rel_error(analytic, numeric), format!("input[{which}]"), idx);
        }
    }

    if opts.check_params {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let len = store.value(id).len();
            let stride = opts
                .max_coords_per_param
                .map_or(1, |m| len.div_ceil(m.max(1)).max(1));
            let analytic_all = param_grads.iter().find(|(i, _)| *i == id.index()).map(|(_, t)| t);
            let name = store.get(id).name.clone();
            for idx in (0..len).step_by(stride) {
                let orig = store.value(id).data()[idx];
                store.get_mut(id).value.data_mut()[idx] = orig + h;
                let (up, _, _) = eval(store, inputs, &mut projection, false)?;
                store.get_mut(id).value.data_mut()[idx] = orig - h;
                let (down, _, _) = eval(store, inputs, &mut projection, false)?;
                store.get_mut(id).value.data_mut()[idx] = orig;
                let numeric = (up - down) / two_h;
                let analytic = analytic_all.map_or(0.0, |g| g.data()[idx].as_f64());
                note(&mut report, rel_error(analytic, numeric), name.clone(), idx);
            }
        }
    }
    store.restore(&saved);
    Ok(report)
}
