//! Checkpoint serialization: a text header naming format version, model
//! shape, vocabulary, and tensor layout, followed by the raw little-endian
//! f64 arrays in header order. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::interventions::{GateMode, InterventionParams, InterventionSet};
use crate::numerics::Tensor;
use crate::tinylm::model::{ModelConfig, TinyModel};
use crate::tinylm::vocab::Vocab;

const MAGIC: &str = "tinylm-checkpoint";
const VERSION: u32 = 1;
/// Upper bound on total stored values; keeps hostile headers from forcing
/// huge allocations.
const MAX_TOTAL_ELEMENTS: usize = 1 << 26;

pub fn encode(model: &TinyModel, interventions: Option<&InterventionSet>) -> Vec<u8> {
    let mut header = String::new();
    header.push_str(&format!("{MAGIC} {VERSION}\n"));
    let vocab_hex: String = model
        .vocab
        .chars()
        .iter()
        .collect::<String>()
        .as_bytes()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    header.push_str(&format!("vocab {vocab_hex}\n"));
    let c = &model.config;
    header.push_str(&format!(
        "model dim={} layers={} heads={} ffn={} context={}\n",
        c.dim, c.layers, c.heads, c.ffn_dim, c.context
    ));

    let mut tensors: Vec<(String, &Tensor)> = model
        .param_names()
        .into_iter()
        .zip(model.param_tensors())
        .collect();
    if let Some(set) = interventions {
        for (&layer, p) in &set.by_layer {
            header.push_str(&format!(
                "intervention layer={} rank={} gate={}\n",
                layer,
                p.rank,
                p.gate_mode.as_str()
            ));
            let prefix = format!("iv.layer{layer}");
            tensors.push((format!("{prefix}.basis"), &p.basis));
            tensors.push((format!("{prefix}.predictor"), &p.predictor));
            tensors.push((format!("{prefix}.offset"), &p.offset));
            if let Some(u) = &p.gate_w {
                tensors.push((format!("{prefix}.gate_w"), u));
            }
            if let Some(b) = &p.gate_b {
                tensors.push((format!("{prefix}.gate_b"), b));
            }
        }
    }
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {} {}\n", name, dims.join("x")));
    }
    header.push_str("data\n");

    let mut out = header.into_bytes();
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(TinyModel, Option<InterventionSet>)> {
    // Split the text header from the binary payload at the "data\n" line.
    let mut header_end = None;
    let mut line_start = 0usize;
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' {
            if &bytes[line_start..i] == b"data" {
                header_end = Some((line_start, i + 1));
                break;
            }
            line_start = i + 1;
        }
    }
    let (_, payload_start) =
        header_end.ok_or_else(|| Error::Checkpoint("missing data marker".into()))?;
    let header = std::str::from_utf8(&bytes[..payload_start])
        .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
    let payload = &bytes[payload_start..];

    let mut lines = header.lines();
    let magic = lines.next().ok_or_else(|| Error::Checkpoint("empty header".into()))?;
    let mut magic_parts = magic.split_whitespace();
    if magic_parts.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version: u32 = magic_parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing format version".into()))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }

    let mut vocab: Option<Vocab> = None;
    let mut config: Option<ModelConfig> = None;
    let mut iv_headers: BTreeMap<usize, (usize, GateMode)> = BTreeMap::new();
    let mut tensor_specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut total_elements = 0usize;

    for line in lines {
        if line == "data" {
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("vocab") => {
                let hex = parts.next().ok_or_else(|| Error::Checkpoint("vocab line".into()))?;
                if hex.len() % 2 != 0 {
                    return Err(Error::Checkpoint("odd vocab hex length".into()));
                }
                let mut raw = Vec::with_capacity(hex.len() / 2);
                for i in (0..hex.len()).step_by(2) {
                    let byte = u8::from_str_radix(&hex[i..i + 2], 16)
                        .map_err(|_| Error::Checkpoint("bad vocab hex".into()))?;
                    raw.push(byte);
                }
                let s = String::from_utf8(raw)
                    .map_err(|_| Error::Checkpoint("vocab is not UTF-8".into()))?;
                vocab = Some(Vocab::from_chars(s.chars().collect()));
            }
            Some("model") => {
                let mut map = BTreeMap::new();
                for kv in parts {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::Checkpoint(format!("bad model field {kv}")))?;
                    let v: usize = v
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad model value {kv}")))?;
                    map.insert(k.to_string(), v);
                }
                let get = |k: &str| {
                    map.get(k)
                        .copied()
                        .ok_or_else(|| Error::Checkpoint(format!("model line missing {k}")))
                };
                let cfg = ModelConfig {
                    dim: get("dim")?,
                    layers: get("layers")?,
                    heads: get("heads")?,
                    ffn_dim: get("ffn")?,
                    context: get("context")?,
                };
                if cfg.dim == 0
                    || cfg.layers == 0
                    || cfg.heads == 0
                    || cfg.ffn_dim == 0
                    || cfg.context == 0
                    || cfg.dim % cfg.heads != 0
                    || cfg.dim > 1 << 16
                    || cfg.layers > 1 << 10
                    || cfg.context > 1 << 20
                {
                    return Err(Error::Checkpoint("implausible model configuration".into()));
                }
                config = Some(cfg);
            }
            Some("intervention") => {
                let mut layer = None;
                let mut rank = None;
                let mut gate = None;
                for kv in parts {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::Checkpoint(format!("bad intervention field {kv}")))?;
                    match k {
                        "layer" => layer = v.parse::<usize>().ok(),
                        "rank" => rank = v.parse::<usize>().ok(),
                        "gate" => {
                            gate = match v {
                                "constant" => Some(GateMode::Constant),
                                "scalar" => Some(GateMode::Scalar),
                                "per_basis" => Some(GateMode::PerBasis),
                                _ => None,
                            }
                        }
                        _ => return Err(Error::Checkpoint(format!("unknown field {k}"))),
                    }
                }
                let (layer, rank, gate) = match (layer, rank, gate) {
                    (Some(l), Some(r), Some(g)) => (l, r, g),
                    _ => return Err(Error::Checkpoint("incomplete intervention line".into())),
                };
                if rank == 0 || iv_headers.insert(layer, (rank, gate)).is_some() {
                    return Err(Error::Checkpoint(format!(
                        "bad or duplicate intervention layer {layer}"
                    )));
                }
            }
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("tensor line missing name".into()))?;
                let dims = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("tensor line missing shape".into()))?;
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad dim {d}"))))
                    .collect::<Result<_>>()?;
                let numel: usize = shape.iter().try_fold(1usize, |acc, &d| {
                    acc.checked_mul(d)
                        .ok_or_else(|| Error::Checkpoint("tensor shape overflow".into()))
                })?;
                total_elements = total_elements
                    .checked_add(numel)
                    .filter(|&t| t <= MAX_TOTAL_ELEMENTS)
                    .ok_or_else(|| Error::Checkpoint("checkpoint too large".into()))?;
                tensor_specs.push((name.to_string(), shape));
            }
            Some(other) => {
                return Err(Error::Checkpoint(format!("unknown header line {other:?}")));
            }
            None => {}
        }
    }

    let vocab = vocab.ok_or_else(|| Error::Checkpoint("missing vocab line".into()))?;
    let config = config.ok_or_else(|| Error::Checkpoint("missing model line".into()))?;

    if payload.len() != total_elements * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes but header describes {}",
            payload.len(),
            total_elements * 8
        )));
    }

    let mut values: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut offset = 0usize;
    for (name, shape) in tensor_specs {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = offset + i * 8;
            let raw: [u8; 8] = payload[at..at + 8].try_into().expect("length checked");
            data.push(f64::from_le_bytes(raw));
        }
        offset += numel * 8;
        if values.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }

    let mut model = TinyModel::new(config, vocab, 0);
    let names = model.param_names();
    for (name, slot) in names.iter().zip(model.param_tensors_mut()) {
        let t = values
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }

    let interventions = if iv_headers.is_empty() {
        None
    } else {
        let mut set = InterventionSet::default();
        for (layer, (rank, gate_mode)) in iv_headers {
            if layer >= model.config.layers {
                return Err(Error::Checkpoint(format!(
                    "intervention layer {layer} out of range"
                )));
            }
            let prefix = format!("iv.layer{layer}");
            let mut take = |field: &str, shape: &[usize]| -> Result<Tensor> {
                let name = format!("{prefix}.{field}");
                let t = values
                    .remove(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if t.shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )));
                }
                Ok(t)
            };
            let d = model.config.dim;
            let basis = take("basis", &[rank, d])?;
            let predictor = take("predictor", &[rank, d])?;
            let offs = take("offset", &[rank])?;
            let (gate_w, gate_b) = match gate_mode {
                GateMode::Constant => (None, None),
                GateMode::Scalar => (Some(take("gate_w", &[1, d])?), Some(take("gate_b", &[1])?)),
                GateMode::PerBasis => {
                    (Some(take("gate_w", &[rank, d])?), Some(take("gate_b", &[rank])?))
                }
            };
            set.by_layer.insert(
                layer,
                InterventionParams {
                    rank,
                    dim: d,
                    gate_mode,
                    basis,
                    predictor,
                    offset: offs,
                    gate_w,
                    gate_b,
                },
            );
        }
        Some(set)
    };

    if let Some(name) = values.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }

    Ok((model, interventions))
}

pub fn save(path: &Path, model: &TinyModel, interventions: Option<&InterventionSet>) -> Result<()> {
    std::fs::write(path, encode(model, interventions))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TinyModel, Option<InterventionSet>)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}
