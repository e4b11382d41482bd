//! Weight containers: a JSON text form and a flat little-endian binary form.
//!
//! Both carry the model config, the optional pruning record and a list of
//! named tensors. Byte layouts are described in `docs/FORMATS.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{DType, Real};
use crate::ssm::config::ModelConfig;
use crate::ssm::params::{LayerParams, Model, PruningMeta};

pub const FORMAT_NAME: &str = "ssmprune-weights";
pub const FORMAT_VERSION: u32 = 1;
pub const BINARY_MAGIC: &[u8; 4] = b"SSMW";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightFormat {
    Json,
    Binary,
}

impl WeightFormat {
    /// `.json` selects the text form, anything else the binary one.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => WeightFormat::Json,
            _ => WeightFormat::Binary,
        }
    }
}

enum Payload<T> {
    Real(Vec<T>),
    Mask(Vec<bool>),
}

struct Tensor<T> {
    name: String,
    shape: Vec<usize>,
    payload: Payload<T>,
}

fn flatten<T: Real>(model: &Model<T>) -> Vec<Tensor<T>> {
    let mut out = Vec::new();
    let mut push1 = |name: String, a: &Array1<T>| {
        out.push(Tensor {
            name,
            shape: vec![a.len()],
            payload: Payload::Real(a.to_vec()),
        })
    };
    let mut tensors1 = Vec::new();
    let mut tensors2: Vec<(String, &Array2<T>)> = Vec::new();
    if let Some(e) = &model.embedding {
        tensors2.push(("embedding".into(), e));
    }
    for (i, l) in model.layers.iter().enumerate() {
        let p = |n: &str| format!("layers.{i}.{n}");
        tensors1.push((p("w_norm"), &l.w_norm));
        tensors2.push((p("w_in"), &l.w_in));
        tensors2.push((p("w_conv"), &l.w_conv));
        tensors1.push((p("conv_bias"), &l.conv_bias));
        tensors1.push((p("a_diag"), &l.a_diag));
        tensors2.push((p("w_out"), &l.w_out));
        if let Some(w) = &l.w_out_norm {
            tensors1.push((p("w_out_norm"), w));
        }
        if let Some(b) = &l.bridge {
            tensors2.push((p("bridge"), b));
        }
    }
    for (name, a) in tensors1 {
        push1(name, a);
    }
    for (name, a) in tensors2 {
        out.push(Tensor {
            name,
            shape: vec![a.nrows(), a.ncols()],
            payload: Payload::Real(a.iter().copied().collect()),
        });
    }
    for (i, l) in model.layers.iter().enumerate() {
        if let Some(m) = &l.state_mask {
            out.push(Tensor {
                name: format!("layers.{i}.state_mask"),
                shape: vec![m.len()],
                payload: Payload::Mask(m.clone()),
            });
        }
    }
    out.sort_by(|a, b| tensor_order(&a.name).cmp(&tensor_order(&b.name)));
    out
}

fn tensor_order(name: &str) -> (usize, usize) {
    const FIELDS: [&str; 9] = [
        "w_norm",
        "w_in",
        "w_conv",
        "conv_bias",
        "a_diag",
        "w_out",
        "w_out_norm",
        "bridge",
        "state_mask",
    ];
    let mut parts = name.split('.');
    match (parts.next(), parts.next(), parts.next()) {
        (Some("layers"), Some(i), Some(field)) => (
            i.parse::<usize>().map_or(usize::MAX, |v| v + 1),
            FIELDS.iter().position(|f| *f == field).unwrap_or(FIELDS.len()),
        ),
        _ => (0, 0),
    }
}

fn assemble<T: Real>(
    config: ModelConfig,
    pruning: Option<PruningMeta>,
    tensors: Vec<Tensor<T>>,
) -> Result<Model<T>> {
    let mut by_name: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        let got = match &t.payload {
            Payload::Real(v) => v.len(),
            Payload::Mask(v) => v.len(),
        };
        if expected != got {
            return Err(Error::format(
                "weight file",
                format!("tensor {} has {got} values for shape {:?}", t.name, t.shape),
            ));
        }
        if by_name.contains_key(&t.name) {
            return Err(Error::format("weight file", format!("duplicate tensor {}", t.name)));
        }
        by_name.insert(t.name.clone(), t);
    }
    let mut take_real = |name: &str, rank: usize, required: bool| -> Result<Option<(Vec<usize>, Vec<T>)>> {
        match by_name.remove(name) {
            None if required => Err(Error::format("weight file", format!("missing tensor {name}"))),
            None => Ok(None),
            Some(Tensor {
                shape,
                payload: Payload::Real(v),
                ..
            }) if shape.len() == rank => Ok(Some((shape, v))),
            Some(t) => Err(Error::format(
                "weight file",
                format!("tensor {name} has unexpected shape {:?} or type", t.shape),
            )),
        }
    };
    let vec1 = |(_, v): (Vec<usize>, Vec<T>)| Array1::from_vec(v);
    let mat = |(s, v): (Vec<usize>, Vec<T>)| {
        Array2::from_shape_vec((s[0], s[1]), v).map_err(|e| Error::format("weight file", e))
    };

    let embedding = take_real("embedding", 2, false)?.map(mat).transpose()?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = |n: &str| format!("layers.{i}.{n}");
        let layer = LayerParams {
            w_norm: vec1(take_real(&p("w_norm"), 1, true)?.expect("required")),
            w_in: mat(take_real(&p("w_in"), 2, true)?.expect("required"))?,
            w_conv: mat(take_real(&p("w_conv"), 2, true)?.expect("required"))?,
            conv_bias: vec1(take_real(&p("conv_bias"), 1, true)?.expect("required")),
            a_diag: vec1(take_real(&p("a_diag"), 1, true)?.expect("required")),
            w_out: mat(take_real(&p("w_out"), 2, true)?.expect("required"))?,
            w_out_norm: take_real(&p("w_out_norm"), 1, false)?.map(vec1),
            bridge: take_real(&p("bridge"), 2, false)?.map(mat).transpose()?,
            state_mask: None,
        };
        layers.push(layer);
    }
    for (i, layer) in layers.iter_mut().enumerate() {
        match by_name.remove(&format!("layers.{i}.state_mask")) {
            None => {}
            Some(Tensor {
                payload: Payload::Mask(m),
                ..
            }) => layer.state_mask = Some(m),
            Some(t) => return Err(Error::format("weight file", format!("tensor {} must be a mask", t.name))),
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::format("weight file", format!("unexpected tensor {extra}")));
    }
    let model = Model {
        config,
        embedding,
        layers,
        pruning,
    };
    model.validate()?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct JsonTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    mask: bool,
}

#[derive(Serialize, Deserialize)]
struct JsonContainer {
    format: String,
    version: u32,
    dtype: DType,
    config: ModelConfig,
    pruning: Option<PruningMeta>,
    tensors: Vec<JsonTensor>,
}

/// Serialize to the JSON text form. Values are written as decimal numbers
/// that parse back to the same bits.
pub fn to_json<T: Real>(model: &Model<T>) -> Result<String> {
    let tensors = flatten(model)
        .into_iter()
        .map(|t| {
            let (data, mask) = match t.payload {
                Payload::Real(v) => (v.into_iter().map(|x| x.to_f64()).collect(), false),
                Payload::Mask(m) => (m.into_iter().map(|k| if k { 1.0 } else { 0.0 }).collect(), true),
            };
            JsonTensor {
                name: t.name,
                shape: t.shape,
                data,
                mask,
            }
        })
        .collect();
    let doc = JsonContainer {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        dtype: T::DTYPE,
        config: model.config.clone(),
        pruning: model.pruning.clone(),
        tensors,
    };
    serde_json::to_string(&doc).map_err(|e| Error::format("weight file", e))
}

pub fn from_json<T: Real>(text: &str) -> Result<Model<T>> {
    let doc: JsonContainer = serde_json::from_str(text).map_err(|e| Error::format("weight file", e))?;
    if doc.format != FORMAT_NAME || doc.version != FORMAT_VERSION {
        return Err(Error::format(
            "weight file",
            format!("unsupported container {} v{}", doc.format, doc.version),
        ));
    }
    let tensors = doc
        .tensors
        .into_iter()
        .map(|t| Tensor {
            name: t.name,
            shape: t.shape,
            payload: if t.mask {
                Payload::Mask(t.data.iter().map(|&v| v != 0.0).collect())
            } else {
                Payload::Real(t.data.into_iter().map(T::from_f64).collect())
            },
        })
        .collect();
    assemble(doc.config, doc.pruning, tensors)
}

#[derive(Serialize, Deserialize)]
struct BinaryEntry {
    name: String,
    shape: Vec<usize>,
    /// `f32`, `f64` or `u8`.
    dtype: String,
    /// Byte offset from the start of the data section.
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    format: String,
    dtype: DType,
    config: ModelConfig,
    pruning: Option<PruningMeta>,
    tensors: Vec<BinaryEntry>,
}

fn push_real<T: Real>(buf: &mut Vec<u8>, v: T) {
    match T::DTYPE {
        DType::F32 => buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
        DType::F64 => buf.extend_from_slice(&v.to_f64().to_le_bytes()),
    }
}

/// Serialize to the binary form: magic, version, header length, JSON header,
/// zero padding to an 8-byte boundary, then raw little-endian tensor data.
pub fn to_binary<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut entries = Vec::new();
    for t in flatten(model) {
        while data.len() % 8 != 0 {
            data.push(0);
        }
        let start = data.len();
        let dtype = match &t.payload {
            Payload::Real(v) => {
                v.iter().for_each(|&x| push_real(&mut data, x));
                T::DTYPE.name()
            }
            Payload::Mask(m) => {
                data.extend(m.iter().map(|&k| k as u8));
                "u8"
            }
        };
        entries.push(BinaryEntry {
            name: t.name,
            shape: t.shape,
            dtype: dtype.into(),
            offset: start as u64,
            nbytes: (data.len() - start) as u64,
        });
    }
    let header = BinaryHeader {
        format: FORMAT_NAME.into(),
        dtype: T::DTYPE,
        config: model.config.clone(),
        pruning: model.pruning.clone(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::format("weight file", e))?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 + data.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    while out.len() % 8 != 0 {
        out.push(0);
    }
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn from_binary<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let bad = |d: &str| Error::format("weight file", d.to_string());
    if bytes.len() < 16 || &bytes[..4] != BINARY_MAGIC {
        return Err(bad("missing SSMW magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: BinaryHeader =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::format("weight file", e))?;
    let data_start = header_end.div_ceil(8) * 8;
    let data = bytes.get(data_start..).ok_or_else(|| bad("truncated data"))?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let (off, len) = (e.offset as usize, e.nbytes as usize);
        let raw = off
            .checked_add(len)
            .and_then(|end| data.get(off..end))
            .ok_or_else(|| bad(&format!("tensor {} out of bounds", e.name)))?;
        let payload = match e.dtype.as_str() {
            "f32" => Payload::Real(
                raw.chunks_exact(4)
                    .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                    .collect(),
            ),
            "f64" => Payload::Real(
                raw.chunks_exact(8)
                    .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect(),
            ),
            "u8" => Payload::Mask(raw.iter().map(|&b| b != 0).collect()),
            other => return Err(bad(&format!("unknown tensor dtype {other}"))),
        };
        tensors.push(Tensor {
            name: e.name,
            shape: e.shape,
            payload,
        });
    }
    assemble(header.config, header.pruning, tensors)
}

/// Element type recorded in a serialized container.
pub fn stored_dtype(bytes: &[u8]) -> Result<DType> {
    #[derive(Deserialize)]
    struct Probe {
        dtype: DType,
    }
    let probe: Probe = if bytes.starts_with(BINARY_MAGIC) && bytes.len() >= 16 {
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = (16 + len).min(bytes.len());
        serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::format("weight file", e))?
    } else {
        serde_json::from_slice(bytes).map_err(|e| Error::format("weight file", e))?
    };
    Ok(probe.dtype)
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path, format: WeightFormat) -> Result<()> {
    let bytes = match format {
        WeightFormat::Json => to_json(model)?.into_bytes(),
        WeightFormat::Binary => to_binary(model)?,
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Load either form, detected by the leading magic bytes, converting to `T`.
pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        from_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::format("weight file", e))?;
        from_json(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::config::{InputMode, Variant};

    fn sample() -> Model<f64> {
        let mut cfg = ModelConfig::new(Variant::Mamba2, 6, 4, 2).with_heads(2);
        cfg.input = InputMode::EmbeddedTokens { vocab_size: 7 };
        let mut m = Model::<f64>::random(cfg, 3).unwrap();
        m.layers[1].state_mask = Some(vec![true, false, true, true]);
        m.layers[0].bridge = Some(Array2::eye(4));
        m.pruning = Some(PruningMeta {
            variant: "sparse".into(),
            ratio: 0.25,
            original_state: 4,
            plan_sha256: "ab".repeat(32),
        });
        m
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = sample();
        let back: Model<f64> = from_json(&to_json(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let m32 = m.cast::<f32>();
        assert_eq!(from_json::<f32>(&to_json(&m32).unwrap()).unwrap(), m32);
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let m = sample();
        let bytes = to_binary(&m).unwrap();
        assert_eq!(&bytes[..4], b"SSMW");
        assert_eq!(from_binary::<f64>(&bytes).unwrap(), m);
        assert_eq!(stored_dtype(&bytes).unwrap(), DType::F64);
        let m32 = m.cast::<f32>();
        let bytes32 = to_binary(&m32).unwrap();
        assert_eq!(from_binary::<f32>(&bytes32).unwrap(), m32);
        assert_eq!(stored_dtype(&bytes32).unwrap(), DType::F32);
    }

    #[test]
    fn binary_data_is_aligned() {
        let bytes = to_binary(&sample()).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: BinaryHeader = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        assert!(header.tensors.iter().all(|t| t.offset % 8 == 0));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = to_binary(&sample()).unwrap();
        assert!(from_binary::<f64>(&bytes[..bytes.len() - 8]).is_err());
        assert!(from_binary::<f64>(b"NOPE").is_err());
        let text = to_json(&sample()).unwrap().replace("layers.1.w_out\"", "layers.1.w_outx\"");
        let err = from_json::<f64>(&text).unwrap_err();
        assert_eq!(err.code(), "format");
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample();
        for (name, fmt) in [("w.json", WeightFormat::Json), ("w.bin", WeightFormat::Binary)] {
            let p = dir.path().join(name);
            assert_eq!(WeightFormat::from_path(&p), fmt);
            save_model(&m, &p, fmt).unwrap();
            assert_eq!(load_model::<f64>(&p).unwrap(), m);
        }
    }
}
