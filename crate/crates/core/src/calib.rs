//! Activation statistics and range calibration.
//!
//! Histograms track absolute values only, so every calibrator returns a
//! symmetric range `[-alpha, alpha]` suitable for scale quantization.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::quant::RangeSpec;

pub const DEFAULT_BINS: usize = 2048;

/// Two KL values within `KL_TIE_RTOL * |b| + KL_TIE_ATOL` count as a tie.
pub const KL_TIE_RTOL: f64 = 1e-12;
pub const KL_TIE_ATOL: f64 = 1e-15;

/// Mass given to empty reference bins when evaluating KL divergence.
pub const KL_EPSILON: f64 = 1e-9;

/// Fixed-bin histogram of `|x|` over `[0, upper]`.
///
/// Bin `i` covers `(i*w, (i+1)*w]` with `w = upper / num_bins`, and bin 0
/// also holds zero. When a value larger than `upper` arrives the range grows
/// by the smallest power of two that covers it and groups of `2^k` adjacent
/// bins are merged; with right-closed bins this puts every count exactly
/// where direct binning over the wider range would.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    counts: Vec<u64>,
    upper: f64,
    total: u64,
    max_abs: f64,
}

impl Histogram {
    pub fn new(num_bins: usize) -> Self {
        assert!(num_bins >= 1, "histogram needs at least one bin");
        Self {
            counts: vec![0; num_bins],
            upper: 0.0,
            total: 0,
            max_abs: 0.0,
        }
    }

    /// Build from raw parts. `upper` must be positive unless every count
    /// sits in bin 0 and `max_abs` is zero.
    pub fn from_counts(counts: Vec<u64>, upper: f64, max_abs: f64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::format("histogram needs at least one bin"));
        }
        if !upper.is_finite() || upper < 0.0 || !(0.0..=upper).contains(&max_abs) {
            return Err(Error::format(format!(
                "bad histogram bounds upper={upper} max_abs={max_abs}"
            )));
        }
        let total = counts.iter().sum();
        Ok(Self {
            counts,
            upper,
            total,
            max_abs,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    pub fn bin_width(&self) -> f64 {
        self.upper / self.counts.len() as f64
    }

    /// Upper edge of bin `i`.
    pub fn edge(&self, i: usize) -> f64 {
        self.upper * (i + 1) as f64 / self.counts.len() as f64
    }

    fn bin_of(&self, a: f64) -> usize {
        if self.upper == 0.0 {
            return 0;
        }
        let n = self.counts.len();
        let pos = (a * n as f64 / self.upper).ceil();
        if pos <= 1.0 {
            0
        } else {
            (pos as usize - 1).min(n - 1)
        }
    }

    fn widen_to(&mut self, target: f64) {
        if self.upper == 0.0 {
            self.upper = target;
            return;
        }
        let mut k = 0u32;
        let mut upper = self.upper;
        while upper < target {
            upper *= 2.0;
            k += 1;
        }
        if k == 0 {
            return;
        }
        let mut merged = vec![0u64; self.counts.len()];
        for (i, &c) in self.counts.iter().enumerate() {
            let j = if k >= usize::BITS { 0 } else { i >> k };
            merged[j] += c;
        }
        self.counts = merged;
        self.upper = upper;
    }

    /// Add `|x|` for every element; rejects non-finite values without
    /// touching the histogram.
    pub fn observe(&mut self, x: &[f64]) -> Result<()> {
        let mut batch_max = 0.0f64;
        for &v in x {
            if !v.is_finite() {
                return Err(Error::NonFinite);
            }
            batch_max = batch_max.max(v.abs());
        }
        if x.is_empty() {
            return Ok(());
        }
        if batch_max > self.upper {
            self.widen_to(batch_max);
        }
        for &v in x {
            let b = self.bin_of(v.abs());
            self.counts[b] += 1;
        }
        self.total += x.len() as u64;
        self.max_abs = self.max_abs.max(batch_max);
        Ok(())
    }

    /// Owned variant of [`Histogram::observe`].
    pub fn observed(mut self, x: &[f64]) -> Result<Self> {
        self.observe(x)?;
        Ok(self)
    }

    /// Fold `other` into `self`.
    ///
    /// Exact when the two bin ranges agree or differ by a power of two;
    /// otherwise `other`'s bins are redistributed by their centres.
    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if other.num_bins() != self.num_bins() {
            return Err(Error::shape(format!(
                "merging {} bins into {}",
                other.num_bins(),
                self.num_bins()
            )));
        }
        if other.total == 0 {
            return Ok(());
        }
        let mut other = other.clone();
        if other.upper > self.upper {
            self.widen_to(other.upper);
        }
        if self.upper > other.upper && other.upper > 0.0 {
            other.widen_to(self.upper);
        }
        if other.upper == self.upper || other.upper == 0.0 {
            for (a, b) in self.counts.iter_mut().zip(&other.counts) {
                *a += b;
            }
        } else {
            let w = other.bin_width();
            for (i, &c) in other.counts.iter().enumerate() {
                let b = self.bin_of((i as f64 + 0.5) * w);
                self.counts[b] += c;
            }
        }
        self.total += other.total;
        self.max_abs = self.max_abs.max(other.max_abs);
        Ok(())
    }

    fn require_data(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::EmptyHistogram);
        }
        if self.max_abs == 0.0 {
            return Err(Error::DegenerateTensor(None));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationMethod {
    Max,
    Entropy,
    /// Fraction of observations kept inside the range, in `(0, 1]`.
    Percentile(f64),
}

impl CalibrationMethod {
    /// Max, entropy, 99.99% and 99.999%.
    pub fn default_set() -> Vec<CalibrationMethod> {
        vec![
            CalibrationMethod::Max,
            CalibrationMethod::Entropy,
            CalibrationMethod::Percentile(0.9999),
            CalibrationMethod::Percentile(0.99999),
        ]
    }

    pub const PERCENTILE_PRESETS: [f64; 4] = [0.999, 0.9999, 0.99999, 0.999999];
}

impl fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibrationMethod::Max => write!(f, "max"),
            CalibrationMethod::Entropy => write!(f, "entropy"),
            CalibrationMethod::Percentile(p) => write!(f, "percentile={p}"),
        }
    }
}

impl FromStr for CalibrationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(CalibrationMethod::Max),
            "entropy" => Ok(CalibrationMethod::Entropy),
            _ => {
                let frac = s
                    .strip_prefix("percentile=")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::format(format!("unknown calibration method `{s}`")))?;
                if !(frac > 0.0 && frac <= 1.0) {
                    return Err(Error::Fraction(frac));
                }
                Ok(CalibrationMethod::Percentile(frac))
            }
        }
    }
}

/// `alpha = max |x|`.
pub fn calibrate_max(h: &Histogram) -> Result<RangeSpec> {
    h.require_data()?;
    RangeSpec::symmetric(h.max_abs)
}

/// Smallest bin edge `e` with `count(|x| <= e) / total >= fraction`, capped at
/// the observed maximum so that `fraction = 1` reproduces max calibration.
pub fn calibrate_percentile(h: &Histogram, fraction: f64) -> Result<RangeSpec> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Fraction(fraction));
    }
    h.require_data()?;
    let total = h.total as f64;
    let mut cum = 0u64;
    let mut edge = h.upper;
    for (i, &c) in h.counts.iter().enumerate() {
        cum += c;
        if cum == h.total {
            // The bin holding the maximum; its edge can round below it.
            edge = h.max_abs;
            break;
        }
        if cum as f64 / total >= fraction {
            edge = h.edge(i);
            break;
        }
    }
    RangeSpec::symmetric(edge.min(h.max_abs))
}

/// KL divergence of keeping the first `i` bins with `levels` quantization
/// levels.
///
/// `P` is the first `i` bins with all mass beyond them folded into bin
/// `i - 1`. `Q` groups the unfolded first `i` bins into `levels` chunks of
/// `i / levels` bins (the last chunk takes the remainder) and spreads each
/// chunk's mass uniformly over the positions where `P` is non-zero.
///
/// The folded tail is absent from `Q`, so clipping is paid for through the
/// smoothed last bin. Building `Q` from `P` instead makes every candidate
/// below `2 * levels` bins exact on sparse histograms, which clips them far
/// too hard.
pub(crate) fn kl_for_threshold(counts: &[u64], i: usize, levels: usize) -> f64 {
    let tail: u64 = counts[i..].iter().sum();
    let mut p: Vec<f64> = counts[..i].iter().map(|&c| c as f64).collect();
    p[i - 1] += tail as f64;

    let chunk = i / levels;
    let mut q = vec![0.0f64; i];
    for j in 0..levels {
        let start = j * chunk;
        let stop = if j + 1 == levels { i } else { start + chunk };
        let mass: u64 = counts[start..stop].iter().sum();
        let nonzero = p[start..stop].iter().filter(|&&v| v != 0.0).count();
        if nonzero == 0 {
            continue;
        }
        let share = mass as f64 / nonzero as f64;
        for k in start..stop {
            if p[k] != 0.0 {
                q[k] = share;
            }
        }
    }

    let p_sum: f64 = p.iter().sum();
    let q_sum: f64 = q.iter().sum();
    let mut kl = 0.0;
    for k in 0..i {
        if p[k] == 0.0 {
            continue;
        }
        let pk = p[k] / p_sum;
        let qk = if q_sum > 0.0 { q[k] / q_sum } else { 0.0 };
        kl += pk * (pk / qk.max(KL_EPSILON)).ln();
    }
    kl
}

/// `a <= b` up to the tie tolerance.
pub fn kl_not_worse(a: f64, b: f64) -> bool {
    a <= b + KL_TIE_RTOL * b.abs() + KL_TIE_ATOL
}

/// Number of leading bins kept by entropy calibration, or `None` when the
/// histogram has too few bins for `bit_width` and max calibration applies.
pub fn entropy_threshold_bins(h: &Histogram, bit_width: u32) -> Result<Option<usize>> {
    h.require_data()?;
    let levels = (1usize << (bit_width - 1)) - 1;
    let n = h.num_bins();
    if levels == 0 || n < levels + 1 {
        return Ok(None);
    }
    let mut best_i = levels + 1;
    let mut best_kl = f64::INFINITY;
    for i in levels + 1..=n {
        let kl = kl_for_threshold(&h.counts, i, levels);
        if kl_not_worse(kl, best_kl) {
            best_kl = best_kl.min(kl);
            best_i = i;
        }
    }
    Ok(Some(best_i))
}

/// Threshold minimizing `KL(P || Q)`; ties go to the larger threshold.
pub fn calibrate_entropy(h: &Histogram, bit_width: u32) -> Result<RangeSpec> {
    if !(crate::quant::MIN_BITS..=crate::quant::MAX_BITS).contains(&bit_width) {
        return Err(Error::BitWidth(bit_width));
    }
    match entropy_threshold_bins(h, bit_width)? {
        None => calibrate_max(h),
        Some(i) => RangeSpec::symmetric(h.edge(i - 1).min(h.max_abs)),
    }
}

pub fn calibrate(h: &Histogram, method: CalibrationMethod, bit_width: u32) -> Result<RangeSpec> {
    match method {
        CalibrationMethod::Max => calibrate_max(h),
        CalibrationMethod::Entropy => calibrate_entropy(h, bit_width),
        CalibrationMethod::Percentile(f) => calibrate_percentile(h, f),
    }
}

/// Calibrated `alpha` per activation tensor.
///
/// Text form, one line per tensor in name order:
/// `<tensor_name>: <method>: <alpha_hex>` where `alpha_hex` is the IEEE-754
/// bit pattern of the `f64` alpha in lowercase hex.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationCache {
    entries: BTreeMap<String, (CalibrationMethod, f64)>,
}

impl CalibrationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tensor: impl Into<String>, method: CalibrationMethod, alpha: f64) {
        self.entries.insert(tensor.into(), (method, alpha));
    }

    pub fn alpha(&self, tensor: &str) -> Option<f64> {
        self.entries.get(tensor).map(|e| e.1)
    }

    pub fn get(&self, tensor: &str) -> Option<(CalibrationMethod, f64)> {
        self.entries.get(tensor).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, CalibrationMethod, f64)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.0, v.1))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, (method, alpha)) in &self.entries {
            out.push_str(&format!("{name}: {method}: {:016x}\n", alpha.to_bits()));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cache = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.rsplitn(3, ": ");
            let (hex, method, name) = match (parts.next(), parts.next(), parts.next()) {
                (Some(h), Some(m), Some(n)) => (h, m, n),
                _ => {
                    return Err(Error::format(format!(
                        "calibration cache line {}: expected `name: method: hex`",
                        lineno + 1
                    )))
                }
            };
            let bits = u64::from_str_radix(hex.trim(), 16).map_err(|e| {
                Error::format(format!("calibration cache line {}: {e}", lineno + 1))
            })?;
            cache.insert(name, method.parse()?, f64::from_bits(bits));
        }
        Ok(cache)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
