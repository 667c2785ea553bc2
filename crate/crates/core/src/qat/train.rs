//! Fine-tuning loops.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::engine::{layer_alphas, loss_and_grad, loss_depth, FakeQuantMode, Net};
use super::optim::{cosine_lr, Sgd};
use super::LearnableRange;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, Model};
use crate::quant::{fake_quantize, QuantParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial learning rate; annealed to `lr * final_lr_ratio`.
    pub lr: f64,
    pub final_lr_ratio: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Train the activation ranges of quantized layers.
    pub learn_ranges: bool,
    /// Learning rate for ranges; `None` uses `lr`. Follows the same schedule.
    pub alpha_lr: Option<f64>,
    pub alpha_weight_decay: f64,
    pub bits: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.01,
            final_lr_ratio: 0.01,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            learn_ranges: false,
            alpha_lr: None,
            alpha_weight_decay: 0.0,
            bits: 8,
        }
    }
}

fn trainable(model: &Model) -> Vec<String> {
    let mut names: Vec<String> = model
        .layers()
        .iter()
        .flat_map(|l| match &l.kind {
            LayerKind::Linear { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                std::iter::once(weight.clone()).chain(bias.clone()).collect()
            }
            LayerKind::BatchNorm { gamma, beta, .. } => vec![gamma.clone(), beta.clone()],
            _ => Vec::new(),
        })
        .collect();
    names.sort();
    names.dedup();
    names
}

/// Fine-tune with fake quantization on every enabled layer.
pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    train_logged(model, data, cfg).map(|(m, _)| m)
}

/// As [`train`], also returning the mean loss of every epoch.
pub fn train_logged(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    if cfg.epochs == 0 {
        return Ok((model.clone(), Vec::new()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || !cfg.lr.is_finite() || cfg.lr <= 0.0 {
        return Err(Error::InvalidParams(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let names = trainable(model);
    let mut params: BTreeMap<String, Tensor> = model.weights().clone();
    let mut ranges: Vec<Option<LearnableRange>> = layer_alphas(model)?
        .into_iter()
        .map(|a| a.map(|a| LearnableRange::new(a, cfg.learn_ranges)).transpose())
        .collect::<Result<_>>()?;
    let depth = loss_depth(model, data.labels());
    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let alpha_lr = cfg.alpha_lr.unwrap_or(cfg.lr);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum);
    let mut alpha_sgd = Sgd::new(cfg.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.subset(idx);
            let alphas: Vec<Option<f64>> =
                ranges.iter().map(|r| r.as_ref().map(|r| r.alpha())).collect();
            let net = Net {
                model,
                params: &params,
                alphas: &alphas,
                mode: FakeQuantMode::Quantize,
                bits: cfg.bits,
            };
            let (out, tape) = net.forward(batch.inputs(), depth)?;
            let (loss, dout) = loss_and_grad(&out, batch.labels())?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let grads = net.backward(tape, dout)?;
            let lr = cosine_lr(cfg.lr, cfg.final_lr_ratio, step, total);
            for name in &names {
                if let Some(g) = grads.params.get(name) {
                    let p = params.get_mut(name).expect("trainable tensors exist");
                    sgd.step(name, p.data_mut(), g.data(), lr, cfg.weight_decay);
                    *p = p.round_to_f32();
                }
            }
            if cfg.learn_ranges {
                let alr = cosine_lr(alpha_lr, cfg.final_lr_ratio, step, total);
                for (i, r) in ranges.iter_mut().enumerate() {
                    if let Some(r) = r {
                        let mut a = [r.alpha()];
                        alpha_sgd.step(&format!("alpha/{i}"), &mut a, &[grads.alphas[i]], alr, cfg.alpha_weight_decay);
                        r.set_alpha(a[0]);
                    }
                }
            }
            sum += loss * idx.len() as f64;
            step += 1;
        }
        let mean = sum / n as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }

    let mut out = model.clone();
    for name in &names {
        out.set_weight(name, params[name].clone())?;
    }
    if cfg.learn_ranges {
        for (i, r) in ranges.iter().enumerate() {
            if let Some(r) = r {
                out.set_activation_alpha(i, Some(r.alpha()))?;
            }
        }
    }
    Ok((out, epoch_losses))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarTrainOutcome {
    /// Final latent (real) weight.
    pub w: f64,
    /// Final weight as deployed: the latent weight on the grid.
    pub w_quantized: f64,
    /// Latent weight after every step.
    pub trajectory: Vec<f64>,
}

/// Fake-quantized SGD on a single scalar weight: the loss gradient is
/// evaluated at the quantized weight and passed straight through to the
/// latent weight inside the representable range.
pub fn train_scalar(
    w0: f64,
    params: &QuantParams,
    grad: impl Fn(f64) -> f64,
    steps: usize,
    lr0: f64,
    momentum: f64,
    final_lr_ratio: f64,
) -> Result<ScalarTrainOutcome> {
    let fq = |w: f64| -> Result<(f64, bool)> {
        let t = Tensor::scalar(w);
        let q = fake_quantize(&t, params)?.data()[0];
        Ok((q, params.representable_range(0).contains(w)))
    };
    let mut sgd = Sgd::new(momentum);
    let mut w = [w0];
    let mut trajectory = Vec::with_capacity(steps);
    for step in 0..steps {
        let (q, inside) = fq(w[0])?;
        let g = if inside { grad(q) } else { 0.0 };
        if !g.is_finite() {
            return Err(Error::Divergence { step, loss: g });
        }
        sgd.step("w", &mut w, &[g], cosine_lr(lr0, final_lr_ratio, step, steps), 0.0);
        trajectory.push(w[0]);
    }
    Ok(ScalarTrainOutcome {
        w: w[0],
        w_quantized: fq(w[0])?.0,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Labels;
    use crate::graph::{forward_fp32, Layer};
    use crate::quant::scale_params;

    fn tiny() -> (Model, Dataset) {
        let mut w = BTreeMap::new();
        w.insert("fc.weight".into(), Tensor::new(vec![2, 2], vec![0.1, -0.1, 0.2, 0.05]).unwrap());
        w.insert("fc.bias".into(), Tensor::zeros(vec![2]));
        let m = Model::new(vec![2], vec![Layer::linear("fc")], w).unwrap();
        let x = Tensor::from_fn(vec![40, 2], |i| ((i * 37 % 17) as f64 / 8.5) - 1.0);
        let labels = (0..40).map(|r| (x.data()[2 * r] > x.data()[2 * r + 1]) as u32).collect();
        (m, Dataset::new(x, Labels::Classes(labels)).unwrap())
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (m, d) = tiny();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert_eq!(train(&m, &d, &cfg).unwrap(), m);
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let (mut m, d) = tiny();
        m.set_all_quant(true);
        m.set_activation_alpha(0, Some(1.0)).unwrap();
        let cfg = TrainConfig { epochs: 20, lr: 0.5, batch_size: 8, seed: 9, ..Default::default() };
        let (a, losses) = train_logged(&m, &d, &cfg).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let b = train(&m, &d, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        // Fixed ranges stay fixed.
        assert_eq!(a.layers()[0].quant.activation_alpha, Some(1.0));
        assert!(a.weights().values().all(|t| t.is_f32_exact()));
    }

    #[test]
    fn learned_ranges_change_only_alpha() {
        let (mut m, d) = tiny();
        m.set_all_quant(true);
        m.set_activation_alpha(0, Some(0.3)).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.1,
            learn_ranges: true,
            alpha_lr: Some(0.05),
            ..Default::default()
        };
        let out = train(&m, &d, &cfg).unwrap();
        let a = out.layers()[0].quant.activation_alpha.unwrap();
        assert!(a != 0.3 && a > 0.0);
    }

    #[test]
    fn divergence_is_reported() {
        let (m, d) = tiny();
        let t = Tensor::from_fn(vec![40, 2], |i| i as f64);
        let d = Dataset::new(d.inputs().clone(), Labels::Targets(t)).unwrap();
        let cfg = TrainConfig { epochs: 50, lr: 1e3, ..Default::default() };
        match train(&m, &d, &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("{:?}", other.map(|m| forward_fp32(&m, d.inputs()).unwrap())),
        }
    }

    #[test]
    fn scalar_ste_moves_off_a_bad_grid_point() {
        // Quadratic with minimum at 2.3 on a unit grid.
        let p = scale_params(127.0, 8).unwrap();
        let out = train_scalar(-0.6, &p, |w| 2.0 * (w - 2.3), 100, 0.1, 0.9, 0.01).unwrap();
        assert_eq!(out.w_quantized, 2.0);
        assert_eq!(out.trajectory.len(), 100);
    }
}
