//! Seeded synthetic data and small models for demonstrations and tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Labels};
use crate::error::Result;
use crate::graph::{Layer, LayerKind, Model};
use crate::qat::{train, TrainConfig};
use crate::tensor::Tensor;

/// Two interleaved half circles with Gaussian noise; classes alternate so
/// the set is balanced.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 2) as u32;
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (a, b) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x.push(a + normal.sample(&mut rng));
        x.push(b + normal.sample(&mut rng));
        y.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 2], x).expect("2n values"), Labels::Classes(y))
        .expect("matching lengths")
}

/// Fully connected chain `dims[0] -> ... -> dims[last]` with ReLU between
/// layers and He-uniform initial weights. Layers are named `fc1`, `fc2`, ...
pub fn mlp(dims: &[usize], seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = BTreeMap::new();
    let mut layers = Vec::new();
    for (i, pair) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let name = format!("fc{}", i + 1);
        let bound = (6.0 / fan_in as f64).sqrt();
        weights.insert(
            format!("{name}.weight"),
            Tensor::from_fn(vec![fan_in, fan_out], |_| rng.random_range(-bound..bound)),
        );
        weights.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        if i > 0 {
            layers.push(Layer::new(format!("relu{i}"), LayerKind::Relu));
        }
        layers.push(Layer::linear(&name));
    }
    Model::new(vec![dims[0]], layers, weights)
}

/// Datasets and a trained fp32 model for the desk-scale workflow.
#[derive(Debug, Clone)]
pub struct ToyBundle {
    pub model: Model,
    pub train: Dataset,
    pub calib: Dataset,
    pub eval: Dataset,
}

/// Noise of the bundled two-moons sets.
pub const TOY_NOISE: f64 = 0.15;

/// A 2-64-2 MLP trained in fp32 on two-moons data.
pub fn toy_bundle(seed: u64) -> Result<ToyBundle> {
    let train_set = two_moons(1000, TOY_NOISE, seed);
    let calib = two_moons(256, TOY_NOISE, seed.wrapping_add(1));
    let eval = two_moons(500, TOY_NOISE, seed.wrapping_add(2));
    let model = train(
        &mlp(&[2, 64, 2], seed)?,
        &train_set,
        &TrainConfig {
            epochs: 40,
            lr: 0.05,
            batch_size: 32,
            seed,
            ..Default::default()
        },
    )?;
    Ok(ToyBundle {
        model,
        train: train_set,
        calib,
        eval,
    })
}

/// Rescale hidden unit `unit` of a two-layer ReLU MLP: its incoming weights
/// and bias by `factor`, its outgoing weights by `1 / factor`. The fp32
/// function is unchanged (ReLU is positively homogeneous), but the second
/// layer's input range becomes dominated by one unit, which destroys its
/// per-tensor activation quantization.
pub fn poison_hidden_unit(model: &Model, unit: usize, factor: f64) -> Result<Model> {
    let mut m = model.clone();
    let w1 = m.weight("fc1.weight")?.clone();
    let h = w1.shape()[1];
    m.set_weight(
        "fc1.weight",
        Tensor::from_fn(w1.shape().to_vec(), |i| {
            w1.data()[i] * if i % h == unit { factor } else { 1.0 }
        }),
    )?;
    let b1 = m.weight("fc1.bias")?.clone();
    m.set_weight(
        "fc1.bias",
        Tensor::from_fn(vec![h], |i| b1.data()[i] * if i == unit { factor } else { 1.0 }),
    )?;
    let w2 = m.weight("fc2.weight")?.clone();
    let o = w2.shape()[1];
    m.set_weight(
        "fc2.weight",
        Tensor::from_fn(w2.shape().to_vec(), |i| {
            w2.data()[i] / if i / o == unit { factor } else { 1.0 }
        }),
    )?;
    Ok(m)
}
