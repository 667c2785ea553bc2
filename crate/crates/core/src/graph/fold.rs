//! Batch-norm folding into the preceding linear or convolution layer.

use std::collections::BTreeMap;

use super::{Layer, LayerKind, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel `(c, d)` with `BN(y) = c * y + d`:
/// `c = γ / sqrt(Var + ε)`, `d = β - γ E / sqrt(Var + ε)`.
pub fn batch_norm_coefficients(model: &Model, layer: &Layer) -> Result<(Vec<f64>, Vec<f64>)> {
    let LayerKind::BatchNorm {
        gamma,
        beta,
        mean,
        var,
        eps,
    } = &layer.kind
    else {
        return Err(Error::Layer {
            layer: layer.name.clone(),
            reason: "not a batch norm".into(),
        });
    };
    let (g, b, e, v) = (
        model.weight(gamma)?.data(),
        model.weight(beta)?.data(),
        model.weight(mean)?.data(),
        model.weight(var)?.data(),
    );
    let mut c = Vec::with_capacity(g.len());
    let mut d = Vec::with_capacity(g.len());
    for k in 0..g.len() {
        let inv = 1.0 / (v[k] + eps).sqrt();
        c.push(g[k] * inv);
        d.push(b[k] - g[k] * e[k] * inv);
    }
    Ok((c, d))
}

fn unique_name(base: String, taken: &BTreeMap<String, Tensor>) -> String {
    if !taken.contains_key(&base) {
        return base;
    }
    (1..)
        .map(|i| format!("{base}{i}"))
        .find(|n| !taken.contains_key(n))
        .expect("unbounded")
}

/// Remove every batch norm by rescaling the preceding layer's output
/// channels: `w' = c w`, `b' = c b + d`. BN parameter tensors no longer
/// referenced are dropped from the store.
pub fn fold_batch_norm(model: &Model) -> Result<Model> {
    let mut weights = model.weights().clone();
    let mut layers: Vec<Layer> = Vec::with_capacity(model.layers().len());
    for l in model.layers() {
        if !matches!(l.kind, LayerKind::BatchNorm { .. }) {
            layers.push(l.clone());
            continue;
        }
        let (c, d) = batch_norm_coefficients(model, l)?;
        let unfoldable = || Error::UnfoldableBatchNorm(l.name.clone());
        let prev = layers.last_mut().ok_or_else(unfoldable)?;
        let (weight, bias) = match &mut prev.kind {
            LayerKind::Linear { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                (weight.clone(), bias)
            }
            _ => return Err(unfoldable()),
        };
        let w = &weights[&weight];
        let scaled = if w.rank() == 2 {
            // in × out: channel is the column.
            let n = w.shape()[1];
            Tensor::from_fn(w.shape().to_vec(), |i| c[i % n] * w.data()[i])
        } else {
            // OIHW: channel is the leading axis.
            let per = w.len() / w.shape()[0];
            Tensor::from_fn(w.shape().to_vec(), |i| c[i / per] * w.data()[i])
        };
        let old_bias = bias.as_ref().map(|b| weights[b].data().to_vec());
        let new_bias = Tensor::from_fn(vec![c.len()], |j| {
            c[j] * old_bias.as_ref().map_or(0.0, |b| b[j]) + d[j]
        });
        // Fresh names so that tensors shared with other layers stay intact.
        let wname = unique_name(format!("{}.folded_weight", prev.name), &weights);
        weights.insert(wname.clone(), scaled.round_to_f32());
        let bname = unique_name(format!("{}.folded_bias", prev.name), &weights);
        weights.insert(bname.clone(), new_bias.round_to_f32());
        match &mut prev.kind {
            LayerKind::Linear { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                *weight = wname;
                *bias = Some(bname);
            }
            _ => unreachable!(),
        }
    }
    let used: std::collections::HashSet<String> = layers
        .iter()
        .flat_map(|l| l.kind.tensor_names().into_iter().map(str::to_string))
        .collect();
    weights.retain(|k, _| used.contains(k));
    let m = Model::from_parts_unchecked(model.input_shape().to_vec(), layers, weights);
    m.infer_shapes()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{forward_fp32, LayerKind};
    use crate::kernels::weight_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    fn linear_bn(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> Model {
        let mut w = BTreeMap::new();
        w.insert("fc.weight".into(), Tensor::new(vec![2, 1], vec![0.5, -1.5]).unwrap());
        w.insert("fc.bias".into(), t(&[0.25]));
        w.insert("bn.gamma".into(), t(&[gamma]));
        w.insert("bn.beta".into(), t(&[beta]));
        w.insert("bn.mean".into(), t(&[mean]));
        w.insert("bn.var".into(), t(&[var]));
        Model::new(vec![2], vec![Layer::linear("fc"), Layer::batch_norm("bn", eps)], w).unwrap()
    }

    fn folded_linear(m: &Model) -> (Vec<f64>, Vec<f64>) {
        let LayerKind::Linear { weight, bias } = &m.layers()[0].kind else { panic!() };
        (
            m.weight(weight).unwrap().data().to_vec(),
            m.weight(bias.as_ref().unwrap()).unwrap().data().to_vec(),
        )
    }

    #[test]
    fn identity_batch_norm() {
        let eps = 1.0 / 1024.0;
        let m = linear_bn(1.0, 0.0, 0.0, 1.0 - eps, eps);
        let f = fold_batch_norm(&m).unwrap();
        assert_eq!(f.layers().len(), 1);
        assert_eq!(folded_linear(&f), (vec![0.5, -1.5], vec![0.25]));
    }

    #[test]
    fn hand_example_shifts_bias() {
        let m = linear_bn(2.0, 1.0, 3.0, 4.0, 0.0);
        let (c, d) = batch_norm_coefficients(&m, &m.layers()[1]).unwrap();
        assert_eq!((c, d), (vec![1.0], vec![-2.0]));
        let f = fold_batch_norm(&m).unwrap();
        assert_eq!(folded_linear(&f), (vec![0.5, -1.5], vec![0.25 - 2.0]));
        assert!(!f.weights().contains_key("bn.gamma"));
    }

    #[test]
    fn unfoldable_positions() {
        let mut w = BTreeMap::new();
        for p in ["gamma", "beta", "mean", "var"] {
            w.insert(format!("bn.{p}"), t(&[1.0, 1.0]));
        }
        let m = Model::new(
            vec![2],
            vec![Layer::new("r", LayerKind::Relu), Layer::batch_norm("bn", 1e-5)],
            w.clone(),
        )
        .unwrap();
        assert!(matches!(fold_batch_norm(&m), Err(Error::UnfoldableBatchNorm(n)) if n == "bn"));
        let m = Model::new(vec![2], vec![Layer::batch_norm("bn", 1e-5)], w).unwrap();
        assert!(fold_batch_norm(&m).is_err());
    }

    #[test]
    fn conv_bn_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut r = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(lo..hi)).collect()
        };
        let mut w = BTreeMap::new();
        w.insert("c.weight".into(), Tensor::new(vec![4, 2, 3, 3], r(72, -1.0, 1.0)).unwrap());
        w.insert("c.bias".into(), t(&r(4, -1.0, 1.0)));
        w.insert("bn.gamma".into(), t(&r(4, 0.2, 3.0)));
        w.insert("bn.beta".into(), t(&r(4, -1.0, 1.0)));
        w.insert("bn.mean".into(), t(&r(4, -1.0, 1.0)));
        w.insert("bn.var".into(), t(&r(4, 0.1, 4.0)));
        let m = Model::new(
            vec![2, 6, 6],
            vec![Layer::conv2d("c", 1, 1), Layer::batch_norm("bn", 1e-5)],
            w,
        )
        .unwrap();
        let f = fold_batch_norm(&m).unwrap();
        let x = Tensor::new(vec![3, 2, 6, 6], r(216, -2.0, 2.0)).unwrap();
        let a = forward_fp32(&m, &x).unwrap();
        let b = forward_fp32(&f, &x).unwrap();
        assert!(a.zip_map(&b, |u, v| u - v).unwrap().max_abs() < 1e-5);

        // Per-channel scales of the folded kernel differ by |c_j|.
        let (c, _) = batch_norm_coefficients(&m, &m.layers()[1]).unwrap();
        let lowered = |m: &Model, name: &str| {
            crate::kernels::conv_weight_matrix(m.weight(name).unwrap()).unwrap()
        };
        let LayerKind::Conv2d { weight, .. } = &f.layers()[0].kind else { panic!() };
        let s0 = weight_params(&lowered(&m, "c.weight"), true, 8).unwrap();
        let s1 = weight_params(&lowered(&f, weight), true, 8).unwrap();
        for j in 0..4 {
            let ratio = s0.scales()[j] / s1.scales()[j];
            assert!((ratio / c[j].abs() - 1.0).abs() < 1e-6);
        }
    }
}
