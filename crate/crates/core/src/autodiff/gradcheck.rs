use super::graph::{Bindings, Graph};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Worst disagreement between backward-pass and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Input name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst element.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

fn trainable_names<T: Real>(graph: &Graph<T>) -> Vec<String> {
    graph
        .input_specs()
        .filter(|(_, _, trainable)| *trainable)
        .map(|(name, _, _)| name.to_string())
        .collect()
}

/// Checks every trainable input of `graph` against central finite differences.
pub fn grad_check<T: Real>(
    graph: &Graph<T>,
    bindings: &Bindings<'_, T>,
    output: &str,
    eps: f64,
) -> Result<GradCheckReport> {
    let wrt = trainable_names(graph);
    let wrt: Vec<&str> = wrt.iter().map(String::as_str).collect();
    grad_check_steps(graph, bindings, output, &wrt, &[eps])
}

/// Checks the named inputs of `graph` against central finite differences
/// `(f(x+eps) − f(x−eps)) / 2eps`, one element at a time. The relative error of
/// each element uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check_wrt<T: Real>(
    graph: &Graph<T>,
    bindings: &Bindings<'_, T>,
    output: &str,
    wrt: &[&str],
    eps: f64,
) -> Result<GradCheckReport> {
    grad_check_steps(graph, bindings, output, wrt, &[eps])
}

/// Like [`grad_check_wrt`] with several step sizes; each element is scored by
/// the step that agrees best.
///
/// Graphs with bilinear sampling are only piecewise smooth: a step that
/// carries a sampling point across a cell boundary yields a difference quotient
/// of a different piece, while a very small step drowns small derivatives in
/// rounding error. Pairing a moderate and a tiny step covers both cases.
pub fn grad_check_steps<T: Real>(
    graph: &Graph<T>,
    bindings: &Bindings<'_, T>,
    output: &str,
    wrt: &[&str],
    steps: &[f64],
) -> Result<GradCheckReport> {
    if steps.is_empty() || steps.iter().any(|&e| !(e > 0.0 && e <= 1e-3)) {
        return Err(Error::contract(format!("gradient check steps {steps:?} must lie in (0, 1e-3]")));
    }
    let out_id = graph.output_id(output)?;
    let out_shape = graph.shape(out_id);
    if out_shape.iter().product::<usize>() != 1 {
        return Err(Error::NonScalarOutput {
            name: output.to_string(),
            shape: out_shape.to_vec(),
        });
    }
    let analytic = graph.evaluate(bindings)?.backward_wrt(output, wrt)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for &name in wrt {
        let base: Tensor<T> = bindings
            .get(name)
            .ok_or_else(|| Error::UnboundInput(name.to_string()))?
            .clone();
        let grad = &analytic[name];
        let mut perturbed = bindings.clone();
        for j in 0..base.len() {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[j] += T::lit(delta);
                perturbed.bind_owned(name, t);
                let ev = graph.evaluate(&perturbed)?;
                Ok(ev.value(out_id).item().to_f64_lossy())
            };
            let a = grad.data()[j].to_f64_lossy();
            let mut best = (f64::INFINITY, f64::NAN);
            for &eps in steps {
                let numeric = (eval_at(eps)? - eval_at(-eps)?) / (2.0 * eps);
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                let rel = (a - numeric).abs() / denom;
                if rel < best.0 || best.1.is_nan() {
                    best = (rel, numeric);
                }
            }
            report.checked += 1;
            if best.0 > report.max_relative_error || best.0.is_nan() {
                report.max_relative_error = best.0;
                report.worst = Some((name.to_string(), j));
                report.worst_values = (a, best.1);
            }
        }
    }
    Ok(report)
}
