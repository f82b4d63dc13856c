//! Finite-difference verification of the analytic gradients.

use crate::error::{DcaeError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `param:index` or `input#k:index` of the worst coordinate.
    pub worst: String,
    pub coords_checked: usize,
    /// Analytic gradients of the inputs, in input order.
    pub input_grads: Vec<Tensor<f64>>,
}

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    /// Restrict the parameter sweep to names with one of these prefixes.
    pub param_prefixes: Option<Vec<String>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_coords_per_tensor: None,
            param_prefixes: None,
        }
    }
}

fn coords(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

/// Compare analytic gradients of a scalar-valued fragment against central
/// finite differences in double precision.
///
/// `fragment` receives the graph and one variable per entry of `inputs` and
/// must return a single-element loss. Every parameter the fragment touches
/// is checked, as is every input. The difference quotient is the fourth-order
/// central stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    fragment: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let (analytic_params, input_grads) = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.input_with_grad(t.clone()))
            .collect();
        let loss = fragment(&mut g, &vars)?;
        if g.value(loss).numel() != 1 {
            return Err(DcaeError::Precondition(
                "grad_check needs a scalar loss head".into(),
            ));
        }
        let bp = g.backward(loss)?;
        for (name, grad) in &bp.params.params {
            if !grad.is_finite() {
                return Err(DcaeError::integrity(name, "non-finite analytic gradient"));
            }
        }
        let ig: Vec<Tensor<f64>> = vars.iter().map(|&v| bp.grad(&g, v)).collect();
        for (k, t) in ig.iter().enumerate() {
            if !t.is_finite() {
                return Err(DcaeError::integrity(
                    format!("input#{k}"),
                    "non-finite analytic gradient",
                ));
            }
        }
        (bp.params, ig)
    };

    let eval = |s: &ParamStore<f64>, ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference(s);
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let loss = fragment(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };
    let h = opts.step;
    let stencil = |f: &mut dyn FnMut(f64) -> Result<f64>| -> Result<f64> {
        let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
        Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
    };

    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    let mut work = store.clone();
    for (name, grad) in &analytic_params.params {
        if let Some(prefixes) = &opts.param_prefixes {
            if !prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                continue;
            }
        }
        let n = grad.numel();
        for i in coords(n, opts.max_coords_per_tensor) {
            let base = work.value(name)?.data()[i];
            let numeric = stencil(&mut |delta| {
                work.get_mut(name)?.value.data_mut()[i] = base + delta;
                let v = eval(&work, inputs);
                work.get_mut(name)?.value.data_mut()[i] = base;
                v
            })?;
            let err = relative_error(grad.data()[i], numeric);
            checked += 1;
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{name}:{i}"));
            }
        }
    }

    let mut ins = inputs.to_vec();
    for k in 0..ins.len() {
        let n = ins[k].numel();
        for i in coords(n, opts.max_coords_per_tensor) {
            let base = ins[k].data()[i];
            let numeric = stencil(&mut |delta| {
                ins[k].data_mut()[i] = base + delta;
                let v = eval(store, &ins);
                ins[k].data_mut()[i] = base;
                v
            })?;
            let err = relative_error(input_grads[k].data()[i], numeric);
            checked += 1;
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("input#{k}:{i}"));
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_err: worst.0,
        worst: worst.1,
        coords_checked: checked,
        input_grads,
    })
}
