//! Central finite-difference gradient checking in double precision.

use ndarray::ArrayD;

use crate::autodiff::{Graph, Var};
use crate::nn::{Ctx, ParamId, ParamStore};

/// Comparison of analytic and numeric gradients for one input tensor.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub elements: usize,
    pub max_abs_diff: f64,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Checks `d f / d inputs` where `f` builds a scalar on a fresh graph from the
/// given input variables. Every element of every input is perturbed by `±h`.
pub fn check<F>(inputs: &[ArrayD<f64>], h: f64, f: F) -> Vec<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.constant(v.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.variable(v.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut reports = Vec::with_capacity(inputs.len());
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).cloned().unwrap_or_else(|| ArrayD::zeros(inputs[k].raw_dim()));
        let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (idx, a) in analytic.iter().enumerate() {
            let orig = inputs[k].as_slice().expect("standard layout")[idx];
            work[k].as_slice_mut().expect("standard layout")[idx] = orig + h;
            let plus = eval(&work);
            work[k].as_slice_mut().expect("standard layout")[idx] = orig - h;
            let minus = eval(&work);
            work[k].as_slice_mut().expect("standard layout")[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let d = a - numeric;
            diff2 += d * d;
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max(d.abs());
        }
        let denom = a2.sqrt().max(n2.sqrt());
        reports.push(GradReport {
            elements: analytic.len(),
            max_abs_diff: max_abs,
            rel_error: if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom },
            analytic_norm: a2.sqrt(),
        });
    }
    reports
}

/// Like [`check`], but `f` runs a model: the extra inputs come first in the
/// report, followed by one entry per trainable parameter in store order.
pub fn check_model<F>(store: &ParamStore<f64>, inputs: &[ArrayD<f64>], h: f64, f: F) -> Vec<(String, GradReport)>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Var,
{
    let params: Vec<(ParamId, String)> =
        store.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, p.name.clone())).collect();
    let mut all = inputs.to_vec();
    all.extend(params.iter().map(|(id, _)| store.value(*id).clone()));
    let n_in = inputs.len();
    let reports = check(&all, h, |g, vars| {
        let mut ctx = Ctx::with_graph(store, std::mem::replace(g, Graph::new()));
        for ((id, _), &v) in params.iter().zip(&vars[n_in..]) {
            ctx.bind(*id, v);
        }
        let out = f(&mut ctx, &vars[..n_in]);
        *g = ctx.into_graph();
        out
    });
    let names = (0..n_in).map(|i| format!("input{i}")).chain(params.into_iter().map(|(_, n)| n));
    names.zip(reports).collect()
}
