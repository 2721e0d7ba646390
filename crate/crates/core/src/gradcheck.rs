//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Graph, Var};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Entries probed per input tensor (evenly strided); `usize::MAX` probes all.
    pub max_entries: usize,
    /// Fourth-order stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
    /// instead of `(f(x+h) - f(x-h)) / 2h`. Tolerates a larger step, so
    /// round-off stays small on objectives with large values.
    pub five_point: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-6,
            floor: 1e-6,
            max_entries: usize::MAX,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub probed: usize,
}

/// Compares reverse-mode gradients of `build` (which must return a scalar)
/// against central differences for every input tensor.
/// Central difference of `f` around `orig`; ends with `f(orig)` so the
/// probed entry is restored.
fn central(cfg: &GradCheck, orig: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = cfg.step;
    let numeric = if cfg.five_point {
        let (p2, p1, m1, m2) = (f(orig + 2.0 * h), f(orig + h), f(orig - h), f(orig - 2.0 * h));
        (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
    } else {
        (f(orig + h) - f(orig - h)) / (2.0 * h)
    };
    f(orig);
    numeric
}

pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F, cfg: GradCheck) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        probed: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(v).unwrap_or(&zeros);
        let stride = if cfg.max_entries >= n { 1 } else { n.div_ceil(cfg.max_entries) };
        for e in (0..n).step_by(stride) {
            let orig = work[k].data()[e];
            let numeric = central(&cfg, orig, |v| {
                work[k].data_mut()[e] = v;
                eval(&work)
            });
            probe(&mut report, k, e, analytic.data()[e], numeric, cfg.floor);
        }
    }
    report
}

fn probe(report: &mut GradCheckReport, k: usize, e: usize, analytic: f64, numeric: f64, floor: f64) {
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
    report.probed += 1;
    if rel > report.max_rel_err || rel.is_nan() {
        report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
        report.worst = (k, e);
        report.analytic = analytic;
        report.numeric = numeric;
    }
}

/// Like [`check_gradients`], but probes the store tensors whose names pass
/// `select`, followed by the extra `inputs`. Worst-entry indices count the
/// selected store tensors first.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    select: impl Fn(&str) -> bool,
    inputs: &[Tensor<f64>],
    build: F,
    cfg: GradCheck,
) -> GradCheckReport
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Var,
{
    let eval = |store: &ParamStore<f64>, values: &[Tensor<f64>]| -> f64 {
        let mut ctx = Ctx::train(store);
        let vars: Vec<Var> = values.iter().map(|t| ctx.g.param(t.clone())).collect();
        let out = build(&mut ctx, &vars);
        ctx.g.value(out).data()[0]
    };

    let mut ctx = Ctx::train(store);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.g.param(t.clone())).collect();
    let out = build(&mut ctx, &vars);
    let param_grads = ctx.param_grads(out);
    let mut input_grads = ctx.g.backward(out);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        probed: 0,
    };
    let stride = |n: usize| if cfg.max_entries >= n { 1 } else { n.div_ceil(cfg.max_entries) };

    let mut work = store.clone();
    let ids: Vec<_> = store.ids().filter(|&id| select(store.name(id))).collect();
    for (k, &id) in ids.iter().enumerate() {
        let n = store.get(id).len();
        for e in (0..n).step_by(stride(n)) {
            let orig = store.get(id).data()[e];
            let numeric = central(&cfg, orig, |v| {
                work.get_mut(id).data_mut()[e] = v;
                eval(&work, inputs)
            });
            probe(&mut report, k, e, param_grads[id.0].data()[e], numeric, cfg.floor);
        }
    }

    let mut values = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let analytic = input_grads.take(v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for e in (0..n).step_by(stride(n)) {
            let orig = values[k].data()[e];
            let numeric = central(&cfg, orig, |v| {
                values[k].data_mut()[e] = v;
                eval(store, &values)
            });
            probe(&mut report, ids.len() + k, e, analytic.data()[e], numeric, cfg.floor);
        }
    }
    report
}
