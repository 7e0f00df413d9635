//! `PCKP` float32 checkpoints.
//!
//! ```text
//! "PCKP" | version u8 = 1 | config_len u32 | config (key = value text)
//!        | count u32 | count x (name_len u16 | name | PTSR tensor)
//! ```
//! Records follow the model's parameter order.

use std::collections::HashMap;
use std::path::Path;

use super::ptsr::{decode_tensor, encode_tensor};
use super::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::AnyTensor;

pub const MAGIC: &[u8; 4] = b"PCKP";
pub const VERSION: u8 = 1;

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.push(VERSION);
    let cfg = model.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        encode_tensor(&AnyTensor::F32(p.value.clone()), &mut out);
    }
    out
}

struct Parsed {
    config: ModelConfig,
    records: Vec<(String, u64, AnyTensor)>,
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let v = r.u8("version")?;
    if v != VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {v}")));
    }
    let len = r.u32("config length")? as usize;
    let at = r.offset();
    let text = r.string(len, "config block")?;
    let config = ModelConfig::parse(&text).map_err(|e| Error::format(at, format!("config block: {e}")))?;
    let count = r.u32("record count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let n = r.u16("name length")? as usize;
        let name = r.string(n, "parameter name")?;
        let at = r.offset();
        records.push((name, at, decode_tensor(&mut r)?));
    }
    r.finish()?;
    Ok(Parsed { config, records })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model<f32>> {
    let parsed = parse(bytes)?;
    let mut model = Model::<f32>::build(&parsed.config)?;
    let index: HashMap<String, usize> = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();
    let mut seen = vec![false; index.len()];
    let mut params = model.params_mut();
    for (name, at, t) in parsed.records {
        let &i = index
            .get(&name)
            .ok_or_else(|| Error::format(at, format!("unknown parameter {name:?}")))?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::format(at, format!("duplicate parameter {name:?}")));
        }
        let t = t.into_f32().map_err(|e| Error::format(at, format!("parameter {name:?}: {e}")))?;
        if t.shape() != params[i].value.shape() {
            return Err(Error::format(
                at,
                format!(
                    "parameter {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    params[i].value.shape()
                ),
            ));
        }
        params[i].value = t;
    }
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(Error::Data(format!("checkpoint is missing parameter {:?}", params[i].name)));
    }
    Ok(model)
}

/// Bytes of tensor element data in an encoded checkpoint, excluding every
/// header, name and config byte.
pub fn payload_bytes(bytes: &[u8]) -> Result<usize> {
    Ok(parse(bytes)?
        .records
        .iter()
        .map(|(_, _, t)| t.shape().iter().product::<usize>() * t.dtype().size_of())
        .sum())
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    decode_checkpoint(&read_file(path)?).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::desk_config;

    fn model() -> Model<f32> {
        let mut m = Model::<f32>::build(&desk_config()).unwrap();
        for (k, p) in m.params_mut().into_iter().enumerate() {
            for (j, v) in p.value.data_mut().iter_mut().enumerate() {
                *v = ((k * 31 + j) % 97) as f32 / 97.0 - 0.5;
            }
        }
        m
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let m = model();
        let b = encode_checkpoint(&m);
        let back = decode_checkpoint(&b).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), b);
        assert_eq!(payload_bytes(&b).unwrap(), m.param_count() * 4);
    }

    #[test]
    fn rejects_unknown_and_missing() {
        let m = model();
        let b = encode_checkpoint(&m);
        let first = &m.params()[0].name;
        let pos = b.windows(first.len()).position(|w| w == first.as_bytes()).unwrap();
        let mut renamed = b.clone();
        renamed[pos] = b'X';
        let err = decode_checkpoint(&renamed).unwrap_err().to_string();
        assert!(err.contains("unknown parameter"), "{err}");
        assert!(decode_checkpoint(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'Q';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
