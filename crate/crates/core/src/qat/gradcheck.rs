//! Analytic gradients against central finite differences.

use super::engine::{layer_alphas, loss_and_grad, loss_depth, FakeQuantMode, Net};
use crate::data::Labels;
use crate::error::Result;
use crate::graph::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(tensor, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compare the backward pass to central differences of the loss over every
/// parameter entry. Parameters are perturbed in `f64`, without the `f32`
/// narrowing applied during training.
///
/// Fake-quantized layers should be checked in [`FakeQuantMode::ClipOnly`]:
/// the quantized loss is piecewise constant, so its finite differences are
/// zero or undefined. Points must avoid clip edges by more than `epsilon`.
pub fn grad_check(
    model: &Model,
    x: &Tensor,
    labels: &Labels,
    epsilon: f64,
    mode: FakeQuantMode,
) -> Result<GradCheckReport> {
    let alphas = layer_alphas(model)?;
    let depth = loss_depth(model, labels);
    let mut params = model.weights().clone();
    let loss_at = |params: &std::collections::BTreeMap<String, Tensor>| -> Result<f64> {
        let net = Net { model, params, alphas: &alphas, mode, bits: 8 };
        let (out, _) = net.forward(x, depth)?;
        Ok(loss_and_grad(&out, labels)?.0)
    };
    let analytic = {
        let net = Net { model, params: &params, alphas: &alphas, mode, bits: 8 };
        let (out, tape) = net.forward(x, depth)?;
        let (_, d) = loss_and_grad(&out, labels)?;
        net.backward(tape, d)?
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, g) in &analytic.params {
        for i in 0..g.len() {
            let orig = params[name].data()[i];
            params.get_mut(name).unwrap().data_mut()[i] = orig + epsilon;
            let up = loss_at(&params)?;
            params.get_mut(name).unwrap().data_mut()[i] = orig - epsilon;
            let down = loss_at(&params)?;
            params.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = g.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-3);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((name.clone(), i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
