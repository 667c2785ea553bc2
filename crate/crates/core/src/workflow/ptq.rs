//! Post-training quantization sweep over calibration methods.

use std::fmt::Write as _;
use std::path::Path;

use super::{calibrate_histograms, collect_histograms, evaluate, quantized_copy, Metric};
use crate::calib::{CalibrationCache, CalibrationMethod};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Model;

/// `(acc_int8 - acc_fp32) / acc_fp32`; zero when both are zero.
pub fn relative_change(acc_int8: f64, acc_fp32: f64) -> f64 {
    if acc_fp32 == 0.0 {
        if acc_int8 == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (acc_int8 - acc_fp32) / acc_fp32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PtqRow {
    pub method: CalibrationMethod,
    pub accuracy: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PtqReport {
    pub fp32_accuracy: f64,
    pub rows: Vec<PtqRow>,
    /// Index into `rows` of the best method.
    pub best: usize,
}

#[derive(Debug, Clone)]
pub struct PtqOutcome {
    pub report: PtqReport,
    /// One cache per row of the report.
    pub caches: Vec<CalibrationCache>,
}

impl PtqOutcome {
    pub fn best_cache(&self) -> &CalibrationCache {
        &self.caches[self.report.best]
    }
}

impl PtqReport {
    pub fn best_row(&self) -> &PtqRow {
        &self.rows[self.best]
    }

    /// Whether the best method loses at most `max_drop` relative accuracy.
    pub fn accepts(&self, max_drop: f64) -> bool {
        self.best_row().relative >= -max_drop
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("fp32_accuracy: {}\n", self.fp32_accuracy);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "method: {} accuracy={} relative={}",
                r.method, r.accuracy, r.relative
            );
        }
        let _ = writeln!(s, "best: {}", self.best_row().method);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fp32 = None;
        let mut rows = Vec::new();
        let mut best = None;
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::format(format!("bad number `{s}`")))
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, rest) = line
                .split_once(": ")
                .ok_or_else(|| Error::format(format!("bad report line `{line}`")))?;
            match key {
                "fp32_accuracy" => fp32 = Some(num(rest)?),
                "method" => {
                    let mut it = rest.split(' ');
                    let method: CalibrationMethod = it.next().unwrap_or_default().parse()?;
                    let mut acc = None;
                    let mut rel = None;
                    for kv in it {
                        match kv.split_once('=') {
                            Some(("accuracy", v)) => acc = Some(num(v)?),
                            Some(("relative", v)) => rel = Some(num(v)?),
                            _ => return Err(Error::format(format!("bad field `{kv}`"))),
                        }
                    }
                    rows.push(PtqRow {
                        method,
                        accuracy: acc.ok_or_else(|| Error::format("missing accuracy"))?,
                        relative: rel.ok_or_else(|| Error::format("missing relative"))?,
                    });
                }
                "best" => best = Some(rest.parse::<CalibrationMethod>()?),
                _ => return Err(Error::format(format!("unknown key `{key}`"))),
            }
        }
        let best = best.ok_or_else(|| Error::format("missing best"))?;
        let best = rows
            .iter()
            .position(|r| r.method == best)
            .ok_or_else(|| Error::format("best method not among rows"))?;
        Ok(Self {
            fp32_accuracy: fp32.ok_or_else(|| Error::format("missing fp32_accuracy"))?,
            rows,
            best,
        })
    }

    /// Fixed-width table for terminals.
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<20} {:>10} {:>10}\n{:<20} {:>10.2} {:>10}\n",
            "method", "accuracy", "relative", "fp32", self.fp32_accuracy, "-"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<20} {:>10.2} {:>9.2}%{}",
                r.method.to_string(),
                r.accuracy,
                100.0 * r.relative,
                if i == self.best { "  *" } else { "" }
            );
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

/// Highest accuracy wins; ties go to max calibration, then to the earlier
/// row.
fn select_best(rows: &[PtqRow]) -> usize {
    let mut best = 0;
    for (i, r) in rows.iter().enumerate().skip(1) {
        let b = &rows[best];
        if r.accuracy > b.accuracy
            || (r.accuracy == b.accuracy
                && r.method == CalibrationMethod::Max
                && b.method != CalibrationMethod::Max)
        {
            best = i;
        }
    }
    best
}

/// Quantize every quantizable layer (per-channel max weights) and evaluate
/// once per calibration method.
pub fn run_ptq(
    model: &Model,
    calib_data: &Dataset,
    eval_data: &Dataset,
    methods: &[CalibrationMethod],
    metric: Metric,
    num_bins: usize,
) -> Result<PtqOutcome> {
    if methods.is_empty() {
        return Err(Error::EmptyMethodList);
    }
    if calib_data.is_empty() || eval_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut fp32 = model.clone();
    fp32.set_all_quant(false);
    let fp32_accuracy = evaluate(&fp32, eval_data, metric)?;
    let hists = collect_histograms(model, calib_data, num_bins)?;
    let mut rows = Vec::with_capacity(methods.len());
    let mut caches = Vec::with_capacity(methods.len());
    for &method in methods {
        let cache = calibrate_histograms(&hists, method, 8)?;
        let accuracy = evaluate(&quantized_copy(model, &cache)?, eval_data, metric)?;
        log::info!("ptq {method}: {accuracy:.3}");
        rows.push(PtqRow {
            method,
            accuracy,
            relative: relative_change(accuracy, fp32_accuracy),
        });
        caches.push(cache);
    }
    let best = select_best(&rows);
    Ok(PtqOutcome {
        report: PtqReport {
            fp32_accuracy,
            rows,
            best,
        },
        caches,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::sign_model;
    use super::*;
    use crate::graph::{Layer, LayerKind};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn default_set_gives_four_rows() {
        let (m, d) = sign_model();
        let out = run_ptq(&m, &d, &d, &CalibrationMethod::default_set(), Metric::Top1, 2048).unwrap();
        let r = &out.report;
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows.iter().all(|x| (0.0..=100.0).contains(&x.accuracy)));
        assert!(r.rows.iter().all(|x| x.accuracy <= r.best_row().accuracy));
        assert_eq!(PtqReport::parse(&r.to_text()).unwrap(), *r);
        assert!(r.render_table().contains("entropy"));
    }

    #[test]
    fn no_quantizable_layers_reports_fp32() {
        let m = Model::new(vec![2], vec![Layer::new("s", LayerKind::Softmax)], Default::default()).unwrap();
        let d = Dataset::new(
            Tensor::from_fn(vec![5, 2], |i| (i % 3) as f64),
            crate::data::Labels::Classes(vec![0, 1, 0, 1, 1]),
        )
        .unwrap();
        let out = run_ptq(&m, &d, &d, &CalibrationMethod::default_set(), Metric::Top1, 64).unwrap();
        for r in &out.report.rows {
            assert_eq!(r.accuracy, out.report.fp32_accuracy);
            assert_eq!(r.relative, 0.0);
        }
        assert_eq!(out.report.best_row().method, CalibrationMethod::Max);
    }

    #[test]
    fn empty_method_list_is_an_error() {
        let (m, d) = sign_model();
        assert!(matches!(
            run_ptq(&m, &d, &d, &[], Metric::Top1, 64),
            Err(Error::EmptyMethodList)
        ));
    }

    #[test]
    fn ties_prefer_max() {
        let row = |method, accuracy| PtqRow { method, accuracy, relative: 0.0 };
        let rows = [
            row(CalibrationMethod::Entropy, 90.0),
            row(CalibrationMethod::Max, 90.0),
            row(CalibrationMethod::Percentile(0.9999), 89.0),
        ];
        assert_eq!(select_best(&rows), 1);
    }

    proptest! {
        #[test]
        fn relative_change_formula(a8 in 0.0f64..100.0, a32 in 0.01f64..100.0) {
            let r = relative_change(a8, a32);
            prop_assert!((r * a32 + a32 - a8).abs() <= 1e-12 * a32.max(1.0));
        }
    }
}
