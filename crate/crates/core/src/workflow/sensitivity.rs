//! One-at-a-time sensitivity analysis and partial quantization.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::{evaluate, Metric};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityEntry {
    pub layer: String,
    pub index: usize,
    /// Accuracy with only this layer quantized.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub baseline: f64,
    /// Most sensitive first: ascending accuracy, then layer index.
    pub entries: Vec<SensitivityEntry>,
}

impl SensitivityReport {
    fn sort(&mut self) {
        self.entries
            .sort_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(a.index.cmp(&b.index)));
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("baseline: {}\n", self.baseline);
        for e in &self.entries {
            let _ = writeln!(s, "layer: {} index={} accuracy={}", e.layer, e.index, e.accuracy);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut baseline = None;
        let mut entries = Vec::new();
        let bad = |l: &str| Error::format(format!("bad sensitivity line `{l}`"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, rest) = line.split_once(": ").ok_or_else(|| bad(line))?;
            match key {
                "baseline" => baseline = Some(rest.parse().map_err(|_| bad(line))?),
                "layer" => {
                    let mut it = rest.split(' ');
                    let layer = it.next().ok_or_else(|| bad(line))?.to_string();
                    let index = it
                        .next()
                        .and_then(|s| s.strip_prefix("index="))
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(line))?;
                    let accuracy = it
                        .next()
                        .and_then(|s| s.strip_prefix("accuracy="))
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(line))?;
                    entries.push(SensitivityEntry { layer, index, accuracy });
                }
                _ => return Err(bad(line)),
            }
        }
        Ok(Self {
            baseline: baseline.ok_or_else(|| Error::format("missing baseline"))?,
            entries,
        })
    }

    pub fn render_table(&self) -> String {
        let mut s = format!("{:<24} {:>10}\n{:<24} {:>10.2}\n", "layer", "accuracy", "(fp32)", self.baseline);
        for e in &self.entries {
            let _ = writeln!(s, "{:<24} {:>10.2}", e.layer, e.accuracy);
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn require_calibration(model: &Model) -> Result<()> {
    for &i in &model.quantizable_layers() {
        let l = &model.layers()[i];
        if l.quant.activation_alpha.is_none() {
            return Err(Error::MissingCalibration(l.input_tensor()));
        }
    }
    Ok(())
}

/// Evaluate the model with exactly one quantizable layer quantized, for
/// each such layer. `model` must carry calibrated ranges on all of them.
pub fn sensitivity_scan(model: &Model, eval_data: &Dataset, metric: Metric) -> Result<SensitivityReport> {
    require_calibration(model)?;
    let mut base = model.clone();
    base.set_all_quant(false);
    let baseline = evaluate(&base, eval_data, metric)?;
    let mut entries = model
        .quantizable_layers()
        .into_par_iter()
        .map(|i| -> Result<SensitivityEntry> {
            let mut m = base.clone();
            m.set_quant_enabled(i, true)?;
            Ok(SensitivityEntry {
                layer: m.layers()[i].name.clone(),
                index: i,
                accuracy: evaluate(&m, eval_data, metric)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.index);
    let mut r = SensitivityReport { baseline, entries };
    r.sort();
    Ok(r)
}

#[derive(Debug, Clone)]
pub struct PartialOutcome {
    pub model: Model,
    /// Layers left in floating point, in the order they were skipped.
    pub skipped: Vec<String>,
    /// `(layers skipped, accuracy)` after every evaluation, starting from
    /// the fully quantized model.
    pub trajectory: Vec<(usize, f64)>,
}

/// Starting from every quantizable layer quantized, skip layers in report
/// order, re-evaluating after each skip, until accuracy reaches `target`.
pub fn partial_quantize(
    model: &Model,
    report: &SensitivityReport,
    target: f64,
    eval_data: &Dataset,
    metric: Metric,
) -> Result<PartialOutcome> {
    require_calibration(model)?;
    let mut m = model.clone();
    m.set_all_quant(true);
    let mut skipped = Vec::new();
    let mut acc = evaluate(&m, eval_data, metric)?;
    let mut trajectory = vec![(0, acc)];
    for e in &report.entries {
        if acc >= target {
            break;
        }
        let i = m
            .layer_index(&e.layer)
            .ok_or_else(|| Error::Layer {
                layer: e.layer.clone(),
                reason: "in the report but not in the model".into(),
            })?;
        m.set_quant_enabled(i, false)?;
        skipped.push(e.layer.clone());
        acc = evaluate(&m, eval_data, metric)?;
        log::info!("skip {}: {acc:.3}", e.layer);
        trajectory.push((skipped.len(), acc));
    }
    if acc < target {
        return Err(Error::Unreachable { target, trajectory });
    }
    Ok(PartialOutcome {
        model: m,
        skipped,
        trajectory,
    })
}
