//! Labelled datasets and the `QKDATA1` file format.
//!
//! ```text
//! QKDATA1
//! inputs: 500x2
//! labels: classes
//! blob_bytes: 6000
//! <f32 LE inputs><u32 LE class labels | f32 LE targets>
//! ```
//!
//! `labels: targets 500x1` stores one real target vector per sample instead.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_MAGIC: &str = "QKDATA1";

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// One class index per sample.
    Classes(Vec<u32>),
    /// One target vector per sample, shape `[N, K]`.
    Targets(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Targets(t) => t.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes(c) => Labels::Classes(idx.iter().map(|&i| c[i]).collect()),
            Labels::Targets(t) => Labels::Targets(t.gather_rows(idx)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Labels,
}

impl Dataset {
    /// `inputs` carries the sample axis first. Values are rounded to `f32`.
    pub fn new(inputs: Tensor, labels: Labels) -> Result<Self> {
        let n = inputs.shape().first().copied().ok_or_else(|| Error::shape("scalar inputs"))?;
        if labels.len() != n {
            return Err(Error::shape(format!("{n} inputs, {} labels", labels.len())));
        }
        let labels = match labels {
            Labels::Targets(t) if t.rank() != 2 => {
                return Err(Error::shape(format!("targets {:?}, expected [N, K]", t.shape())))
            }
            Labels::Targets(t) => Labels::Targets(t.round_to_f32()),
            c => c,
        };
        Ok(Self {
            inputs: inputs.round_to_f32(),
            labels,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.gather_rows(idx),
            labels: self.labels.gather(idx),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let labels = match &self.labels {
            Labels::Classes(_) => "classes".to_string(),
            Labels::Targets(t) => format!("targets {}x{}", t.shape()[0], t.shape()[1]),
        };
        let label_bytes = match &self.labels {
            Labels::Classes(c) => 4 * c.len(),
            Labels::Targets(t) => 4 * t.len(),
        };
        let shape: Vec<String> = self.inputs.shape().iter().map(|d| d.to_string()).collect();
        let mut out = format!(
            "{DATA_MAGIC}\ninputs: {}\nlabels: {labels}\nblob_bytes: {}\n",
            shape.join("x"),
            4 * self.inputs.len() + label_bytes
        )
        .into_bytes();
        for &v in self.inputs.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        match &self.labels {
            Labels::Classes(c) => c.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Labels::Targets(t) => t
                .data()
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut rest = bytes;
        let mut line = || -> Result<&str> {
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format("truncated dataset header"))?;
            let l = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::format("header is not UTF-8"))?;
            rest = &rest[nl + 1..];
            Ok(l)
        };
        if line()? != DATA_MAGIC {
            return Err(Error::format(format!("missing `{DATA_MAGIC}` magic")));
        }
        let field = |l: &str, key: &str| -> Result<String> {
            l.strip_prefix(key)
                .and_then(|s| s.strip_prefix(": "))
                .map(str::to_string)
                .ok_or_else(|| Error::format(format!("expected `{key}:`, got `{l}`")))
        };
        let dims = |s: &str| -> Result<Vec<usize>> {
            s.split('x')
                .map(|d| d.parse().map_err(|_| Error::format(format!("bad shape `{s}`"))))
                .collect()
        };
        let shape = dims(&field(line()?, "inputs")?)?;
        let labels = field(line()?, "labels")?;
        let blob_bytes: usize = field(line()?, "blob_bytes")?
            .parse()
            .map_err(|_| Error::format("bad blob_bytes"))?;
        if rest.len() != blob_bytes {
            return Err(Error::format(format!(
                "blob holds {} bytes, header says {blob_bytes}",
                rest.len()
            )));
        }
        let n_in: usize = shape.iter().product();
        if rest.len() < 4 * n_in {
            return Err(Error::format("blob shorter than the inputs"));
        }
        let f32s = |b: &[u8]| -> Vec<f64> {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        let inputs = Tensor::new(shape, f32s(&rest[..4 * n_in]))?;
        let tail = &rest[4 * n_in..];
        let labels = if labels == "classes" {
            if !tail.len().is_multiple_of(4) {
                return Err(Error::format("ragged label blob"));
            }
            Labels::Classes(
                tail.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else if let Some(s) = labels.strip_prefix("targets ") {
            let shape = dims(s)?;
            if tail.len() != 4 * shape.iter().product::<usize>() {
                return Err(Error::format("target blob size mismatch"));
            }
            Labels::Targets(Tensor::new(shape, f32s(tail))?)
        } else {
            return Err(Error::format(format!("unknown labels `{labels}`")));
        };
        Dataset::new(inputs, labels)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_classes_and_targets() {
        let x = Tensor::from_fn(vec![3, 2], |i| i as f64 * 0.3 - 1.0);
        for labels in [
            Labels::Classes(vec![0, 1, 7]),
            Labels::Targets(Tensor::from_fn(vec![3, 2], |i| 1.0 / (i + 1) as f64)),
        ] {
            let d = Dataset::new(x.clone(), labels).unwrap();
            let b = d.to_bytes();
            let back = Dataset::from_bytes(&b).unwrap();
            assert_eq!(back, d);
            assert_eq!(back.to_bytes(), b);
        }
    }

    #[test]
    fn header_text() {
        let d = Dataset::new(Tensor::zeros(vec![2, 1, 2]), Labels::Classes(vec![1, 0])).unwrap();
        let b = d.to_bytes();
        assert!(b.starts_with(b"QKDATA1\ninputs: 2x1x2\nlabels: classes\nblob_bytes: 24\n"));
    }

    #[test]
    fn rejects_mismatch_and_truncation() {
        assert!(Dataset::new(Tensor::zeros(vec![2, 2]), Labels::Classes(vec![0])).is_err());
        let b = Dataset::new(Tensor::zeros(vec![2, 2]), Labels::Classes(vec![0, 1]))
            .unwrap()
            .to_bytes();
        assert!(Dataset::from_bytes(&b[..b.len() - 2]).is_err());
    }

    #[test]
    fn subset_keeps_pairs() {
        let d = Dataset::new(
            Tensor::from_fn(vec![4, 1], |i| i as f64),
            Labels::Classes(vec![10, 11, 12, 13]),
        )
        .unwrap();
        let s = d.subset(&[3, 1]);
        assert_eq!(s.inputs().data(), &[3.0, 1.0]);
        assert_eq!(s.labels(), &Labels::Classes(vec![13, 11]));
    }
}
