//! On-disk model format.
//!
//! ```text
//! QKMODEL1
//! input_shape: 1x8x8
//! layer: conv1 conv2d weight=conv1.weight bias=conv1.bias stride=1 padding=1 quant=on granularity=per_channel act_alpha=4004000000000000
//! layer: act1 relu
//! tensor: conv1.weight shape=4x1x3x3 offset=0
//! blob_bytes: 160
//! <little-endian f32 blob>
//! ```
//!
//! Tensors are listed in name order and packed back to back, so writing is
//! deterministic. `act_alpha` holds the bits of the `f64` range in hex.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Layer, LayerKind, Model, QuantConfig, WeightGranularity, DEFAULT_BN_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &str = "QKMODEL1";

fn shape_str(s: &[usize]) -> String {
    if s.is_empty() {
        "-".into()
    } else {
        s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::format(format!("bad shape `{s}`"))))
        .collect()
}

fn opt_name(o: &Option<String>) -> &str {
    o.as_deref().unwrap_or("-")
}

fn layer_line(l: &Layer) -> String {
    let mut s = format!("layer: {} {}", l.name, l.kind.tag());
    match &l.kind {
        LayerKind::Linear { weight, bias } => {
            s += &format!(" weight={weight} bias={}", opt_name(bias));
        }
        LayerKind::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => {
            s += &format!(
                " weight={weight} bias={} stride={stride} padding={padding}",
                opt_name(bias)
            );
        }
        LayerKind::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            eps,
        } => {
            s += &format!(" gamma={gamma} beta={beta} mean={mean} var={var} eps={eps}");
        }
        LayerKind::ClippedGelu { limit } => s += &format!(" limit={limit}"),
        _ => {}
    }
    if l.kind.is_quantizable() {
        let q = &l.quant;
        s += &format!(
            " quant={} granularity={} act_alpha={}",
            if q.enabled { "on" } else { "off" },
            match q.weight_granularity {
                WeightGranularity::PerChannel => "per_channel",
                WeightGranularity::PerTensor => "per_tensor",
            },
            q.activation_alpha
                .map_or("-".to_string(), |a| format!("{:016x}", a.to_bits()))
        );
    }
    s
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MODEL_MAGIC}\ninput_shape: {}\n", shape_str(self.input_shape()));
        for l in self.layers() {
            head += &layer_line(l);
            head.push('\n');
        }
        let mut offset = 0usize;
        for (name, t) in self.weights() {
            head += &format!("tensor: {name} shape={} offset={offset}\n", shape_str(t.shape()));
            offset += 4 * t.len();
        }
        head += &format!("blob_bytes: {offset}\n");
        let mut out = head.into_bytes();
        out.reserve(offset);
        for t in self.weights().values() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        const BLOB: &[u8] = b"\nblob_bytes: ";
        let pos = bytes
            .windows(BLOB.len())
            .position(|w| w == BLOB)
            .ok_or_else(|| Error::format("missing blob_bytes line"))?;
        let nl = bytes[pos + 1..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("unterminated blob_bytes line"))?
            + pos
            + 1;
        let head = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::format("manifest is not UTF-8"))?;
        let blob = &bytes[nl + 1..];

        let mut lines = head.lines();
        if lines.next() != Some(MODEL_MAGIC) {
            return Err(Error::format(format!("missing `{MODEL_MAGIC}` magic")));
        }
        let mut input_shape = None;
        let mut layers = Vec::new();
        let mut tensors = Vec::new();
        let mut blob_bytes = None;
        for line in lines {
            let (key, rest) = line
                .split_once(": ")
                .ok_or_else(|| Error::format(format!("bad line `{line}`")))?;
            match key {
                "input_shape" => input_shape = Some(parse_shape(rest)?),
                "layer" => layers.push(parse_layer(rest)?),
                "tensor" => tensors.push(parse_tensor(rest)?),
                "blob_bytes" => {
                    blob_bytes = Some(
                        rest.parse::<usize>()
                            .map_err(|_| Error::format("bad blob_bytes"))?,
                    )
                }
                _ => return Err(Error::format(format!("unknown key `{key}`"))),
            }
        }
        let input_shape = input_shape.ok_or_else(|| Error::format("missing input_shape"))?;
        let blob_bytes = blob_bytes.ok_or_else(|| Error::format("missing blob_bytes"))?;
        if blob.len() != blob_bytes {
            return Err(Error::format(format!(
                "blob holds {} bytes, manifest says {blob_bytes}",
                blob.len()
            )));
        }
        let mut weights = BTreeMap::new();
        for (name, shape, offset) in tensors {
            let n: usize = shape.iter().product();
            let end = offset
                .checked_add(4 * n)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| Error::format(format!("tensor `{name}` exceeds the blob")))?;
            let data = blob[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            if weights.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::format(format!("duplicate tensor `{name}`")));
            }
        }
        Model::new(input_shape, layers, weights)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
    }
}

struct Fields<'a>(BTreeMap<&'a str, &'a str>);

impl<'a> Fields<'a> {
    fn parse(parts: impl Iterator<Item = &'a str>) -> Result<Self> {
        parts
            .map(|p| {
                p.split_once('=')
                    .ok_or_else(|| Error::format(format!("expected key=value, got `{p}`")))
            })
            .collect::<Result<_>>()
            .map(Fields)
    }

    fn get(&self, k: &str) -> Result<&'a str> {
        self.0
            .get(k)
            .copied()
            .ok_or_else(|| Error::format(format!("missing field `{k}`")))
    }

    fn name(&self, k: &str) -> Result<String> {
        self.get(k).map(str::to_string)
    }

    fn opt_name(&self, k: &str) -> Result<Option<String>> {
        Ok(match self.get(k)? {
            "-" => None,
            s => Some(s.to_string()),
        })
    }

    fn num<T: std::str::FromStr>(&self, k: &str) -> Result<T> {
        let s = self.get(k)?;
        s.parse()
            .map_err(|_| Error::format(format!("bad value `{s}` for `{k}`")))
    }
}

fn parse_layer(rest: &str) -> Result<Layer> {
    let mut parts = rest.split(' ');
    let name = parts.next().unwrap_or_default().to_string();
    let tag = parts
        .next()
        .ok_or_else(|| Error::format(format!("layer `{name}` has no kind")))?;
    let f = Fields::parse(parts)?;
    let kind = match tag {
        "linear" => LayerKind::Linear {
            weight: f.name("weight")?,
            bias: f.opt_name("bias")?,
        },
        "conv2d" => LayerKind::Conv2d {
            weight: f.name("weight")?,
            bias: f.opt_name("bias")?,
            stride: f.num("stride")?,
            padding: f.num("padding")?,
        },
        "batch_norm" => LayerKind::BatchNorm {
            gamma: f.name("gamma")?,
            beta: f.name("beta")?,
            mean: f.name("mean")?,
            var: f.name("var")?,
            eps: if f.0.contains_key("eps") {
                f.num("eps")?
            } else {
                DEFAULT_BN_EPS
            },
        },
        "relu" => LayerKind::Relu,
        "gelu" => LayerKind::Gelu,
        "swish" => LayerKind::Swish,
        "clipped_gelu" => LayerKind::ClippedGelu {
            limit: f.num("limit")?,
        },
        "softmax" => LayerKind::Softmax,
        "flatten" => LayerKind::Flatten,
        t => return Err(Error::format(format!("unknown layer kind `{t}`"))),
    };
    let quant = if kind.is_quantizable() {
        QuantConfig {
            enabled: match f.get("quant")? {
                "on" => true,
                "off" => false,
                s => return Err(Error::format(format!("bad quant flag `{s}`"))),
            },
            weight_granularity: match f.get("granularity")? {
                "per_channel" => WeightGranularity::PerChannel,
                "per_tensor" => WeightGranularity::PerTensor,
                s => return Err(Error::format(format!("bad granularity `{s}`"))),
            },
            activation_alpha: match f.get("act_alpha")? {
                "-" => None,
                s => Some(f64::from_bits(
                    u64::from_str_radix(s, 16)
                        .map_err(|_| Error::format(format!("bad act_alpha `{s}`")))?,
                )),
            },
        }
    } else {
        QuantConfig::default()
    };
    Ok(Layer { name, kind, quant })
}

fn parse_tensor(rest: &str) -> Result<(String, Vec<usize>, usize)> {
    let mut parts = rest.split(' ');
    let name = parts.next().unwrap_or_default().to_string();
    let f = Fields::parse(parts)?;
    Ok((name, parse_shape(f.get("shape")?)?, f.num("offset")?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Model {
        let mut w = BTreeMap::new();
        w.insert("c.weight".into(), Tensor::from_fn(vec![2, 1, 3, 3], |i| i as f64 * 0.1 - 0.7));
        w.insert("c.bias".into(), Tensor::new(vec![2], vec![0.5, -0.25]).unwrap());
        for (k, v) in [("gamma", 1.5), ("beta", 0.1), ("mean", -0.2), ("var", 0.9)] {
            w.insert(format!("bn.{k}"), Tensor::new(vec![2], vec![v, v * 2.0]).unwrap());
        }
        w.insert("fc.weight".into(), Tensor::from_fn(vec![8, 3], |i| (i as f64).sin()));
        let mut fc = Layer::new(
            "fc",
            LayerKind::Linear {
                weight: "fc.weight".into(),
                bias: None,
            },
        );
        fc.quant = QuantConfig {
            enabled: true,
            weight_granularity: WeightGranularity::PerTensor,
            activation_alpha: Some(1.0 / 3.0),
        };
        Model::new(
            vec![1, 4, 4],
            vec![
                Layer::conv2d("c", 1, 0),
                Layer::batch_norm("bn", 1e-3),
                Layer::new("g", LayerKind::ClippedGelu { limit: 10.0 }),
                Layer::new("f", LayerKind::Flatten),
                fc,
                Layer::new("s", LayerKind::Softmax),
            ],
            w,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = sample();
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn manifest_text() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("QKMODEL1\ninput_shape: 1x4x4\nlayer: c conv2d weight=c.weight bias=c.bias stride=1 padding=0 quant=off granularity=per_channel act_alpha=-\n"));
        assert!(text.contains(&format!(
            "layer: fc linear weight=fc.weight bias=- quant=on granularity=per_tensor act_alpha={:016x}\n",
            (1.0f64 / 3.0).to_bits()
        )));
        assert!(text.contains("tensor: bn.beta shape=2 offset=0\n"));
    }

    #[test]
    fn default_eps_when_omitted() {
        let l = parse_layer("bn batch_norm gamma=a beta=b mean=c var=d").unwrap();
        assert!(matches!(l.kind, LayerKind::BatchNorm { eps, .. } if eps == DEFAULT_BN_EPS));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Model::from_bytes(b"QKMODEL2\nblob_bytes: 0\n").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::from_bytes(&bad).is_err());
    }
}
