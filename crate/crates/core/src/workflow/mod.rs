//! The quantization procedure end to end: calibrate, sweep PTQ over
//! calibration methods, rank layers by sensitivity, leave the most sensitive
//! ones in floating point, and hand off to fine-tuning.

mod ptq;
mod sensitivity;

pub use crate::data::{Dataset, Labels};
pub use ptq::{relative_change, run_ptq, PtqOutcome, PtqReport, PtqRow};
pub use sensitivity::{
    partial_quantize, sensitivity_scan, PartialOutcome, SensitivityEntry, SensitivityReport,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::calib::{calibrate, CalibrationCache, CalibrationMethod, Histogram};
use crate::error::{Error, Result};
use crate::graph::{Int8Executor, Model};

/// Samples per execution chunk.
pub const EVAL_CHUNK: usize = 256;

/// Limit applied by the GELU10 rewrite.
pub const GELU10_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    /// Arg-max equals the class label; ties resolve to the lowest index.
    Top1,
    /// Per-sample mean squared error against the target is at most the
    /// threshold.
    MseThreshold(f64),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Top1 => write!(f, "top1"),
            Metric::MseThreshold(t) => write!(f, "mse={t}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(Metric::Top1),
            _ => s
                .strip_prefix("mse=")
                .and_then(|t| t.parse::<f64>().ok())
                .filter(|t| *t >= 0.0)
                .map(Metric::MseThreshold)
                .ok_or_else(|| Error::InvalidParams(format!("unknown metric `{s}`"))),
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy in percent, running each layer as configured (quantized where
/// enabled).
pub fn evaluate(model: &Model, data: &Dataset, metric: Metric) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let exec = Int8Executor::new(model)?;
    let starts: Vec<usize> = (0..data.len()).step_by(EVAL_CHUNK).collect();
    let correct = starts
        .par_iter()
        .map(|&s| -> Result<usize> {
            let chunk = data.slice(s, s + EVAL_CHUNK);
            let out = exec.forward(chunk.inputs())?;
            let n = chunk.len();
            let k = out.len() / n;
            let rows = out.data().chunks(k);
            Ok(match (metric, chunk.labels()) {
                (Metric::Top1, Labels::Classes(c)) => rows
                    .zip(c)
                    .filter(|(r, &y)| argmax(r) == y as usize)
                    .count(),
                (Metric::MseThreshold(t), Labels::Targets(tg)) => {
                    if tg.len() != out.len() {
                        return Err(Error::shape(format!(
                            "targets {:?} vs outputs {:?}",
                            tg.shape(),
                            out.shape()
                        )));
                    }
                    rows.zip(tg.data().chunks(k))
                        .filter(|(r, t_)| {
                            r.iter().zip(*t_).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / k as f64
                                <= t
                        })
                        .count()
                }
                _ => {
                    return Err(Error::InvalidParams(format!(
                        "metric {metric} does not match the dataset labels"
                    )))
                }
            })
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Absolute-value histograms of every quantizable layer's input, observed
/// under fp32 execution.
pub fn collect_histograms(
    model: &Model,
    data: &Dataset,
    num_bins: usize,
) -> Result<BTreeMap<String, Histogram>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut fp32 = model.clone();
    fp32.set_all_quant(false);
    let exec = Int8Executor::new(&fp32)?;
    let targets: Vec<usize> = model.quantizable_layers();
    let mut hists: Vec<Histogram> = targets.iter().map(|_| Histogram::new(num_bins)).collect();
    let mut failure = None;
    for s in (0..data.len()).step_by(EVAL_CHUNK) {
        let chunk = data.slice(s, s + EVAL_CHUNK);
        exec.forward_observed(chunk.inputs(), |i, t| {
            if let Some(k) = targets.iter().position(|&j| j == i) {
                if let Err(e) = hists[k].observe(t.data()) {
                    failure.get_or_insert((k, e));
                }
            }
        })?;
        if let Some((k, e)) = failure.take() {
            return Err(Error::Calibration {
                tensor: model.layers()[targets[k]].input_tensor(),
                source: Box::new(e),
            });
        }
    }
    Ok(targets
        .iter()
        .zip(hists)
        .map(|(&i, h)| (model.layers()[i].input_tensor(), h))
        .collect())
}

/// Calibrate every histogram with `method`.
pub fn calibrate_histograms(
    hists: &BTreeMap<String, Histogram>,
    method: CalibrationMethod,
    bit_width: u32,
) -> Result<CalibrationCache> {
    let mut cache = CalibrationCache::new();
    for (name, h) in hists {
        let r = calibrate(h, method, bit_width).map_err(|e| Error::Calibration {
            tensor: name.clone(),
            source: Box::new(match e {
                Error::DegenerateTensor(None) => Error::DegenerateTensor(Some(name.clone())),
                e => e,
            }),
        })?;
        cache.insert(name.clone(), method, r.alpha);
    }
    Ok(cache)
}

/// Histogram collection followed by calibration.
pub fn calibrate_model(
    model: &Model,
    data: &Dataset,
    method: CalibrationMethod,
    num_bins: usize,
) -> Result<CalibrationCache> {
    calibrate_histograms(&collect_histograms(model, data, num_bins)?, method, 8)
}

/// Replace every GELU with GELU clipped at 10, so that max calibration of
/// its output leaves room on the grid for the negative lobe.
pub fn gelu10_rewrite(model: &Model) -> Result<Model> {
    model.clip_gelu_outputs(GELU10_LIMIT)
}

/// Copy of `model` with every quantizable layer enabled, per-channel
/// weights and activation ranges from `cache`.
pub fn quantized_copy(model: &Model, cache: &CalibrationCache) -> Result<Model> {
    let mut m = model.clone();
    m.set_weight_granularity(crate::graph::WeightGranularity::PerChannel);
    m.attach_calibration(cache);
    m.set_all_quant(true);
    for &i in &m.quantizable_layers() {
        if m.layers()[i].quant.activation_alpha.is_none() {
            return Err(Error::MissingCalibration(m.layers()[i].input_tensor()));
        }
    }
    Ok(m)
}
