//! Binary model container.
//!
//! Layout: the 8-byte magic `TCNFMODL`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every parameter
//! value followed by the normalization minima and maxima as little-endian
//! `f64`. Raw floats keep the round trip bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FlowModel, ModelConfig};
use crate::data::NormStats;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TCNFMODL";
const MAX_HEADER: u64 = 1 << 26;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    seed: u64,
    params: Vec<ParamEntry>,
    norm: Option<NormEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormEntry {
    channels: usize,
    zero_channels: Vec<bool>,
}

pub fn write_model<W: Write>(model: &FlowModel, mut out: W) -> Result<()> {
    let header = Header {
        config: model.config().clone(),
        seed: model.seed(),
        params: model
            .params()
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
        norm: model.norm_stats().map(|n| NormEntry {
            channels: n.min.len(),
            zero_channels: n.zero_channels.clone(),
        }),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::CorruptModel(format!("header encoding failed: {e}")))?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, p) in model.params().iter() {
        write_floats(&mut out, p.value.data())?;
    }
    if let Some(n) = model.norm_stats() {
        write_floats(&mut out, &n.min)?;
        write_floats(&mut out, &n.max)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut input: R) -> Result<FlowModel> {
    let mut magic = [0u8; 8];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::CorruptModel("not a model file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    read_exact(&mut input, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut len = [0u8; 8];
    read_exact(&mut input, &mut len, "header length")?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::CorruptModel(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    read_exact(&mut input, &mut json, "header")?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| Error::CorruptModel(format!("header: {e}")))?;

    let mut model = FlowModel::new(&header.config, header.seed)
        .map_err(|e| Error::CorruptModel(format!("stored architecture is invalid: {e}")))?;
    if model.params().len() != header.params.len() {
        return Err(Error::CorruptModel(format!(
            "file lists {} parameters, architecture has {}",
            header.params.len(),
            model.params().len()
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let param = model.params_mut().get_mut(id);
        if param.name != entry.name || param.value.shape() != entry.shape.as_slice() {
            return Err(Error::CorruptModel(format!(
                "parameter {} {:?} does not match the architecture's {} {:?}",
                entry.name,
                entry.shape,
                param.name,
                param.value.shape()
            )));
        }
        param.trainable = entry.trainable;
        read_floats(&mut input, param.value.data_mut(), &entry.name)?;
    }
    if let Some(norm) = header.norm {
        if norm.zero_channels.len() != norm.channels {
            return Err(Error::CorruptModel("normalization flags have the wrong length".into()));
        }
        let mut min = vec![0.0; norm.channels];
        let mut max = vec![0.0; norm.channels];
        read_floats(&mut input, &mut min, "normalization minima")?;
        read_floats(&mut input, &mut max, "normalization maxima")?;
        model.set_norm_stats(Some(NormStats {
            min,
            max,
            zero_channels: norm.zero_channels,
        }));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::CorruptModel("trailing bytes after the last array".into()));
    }
    Ok(model)
}

pub fn save_model(model: &FlowModel, path: &Path) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: &Path) -> Result<FlowModel> {
    read_model(BufReader::new(File::open(path)?))
}

fn write_floats<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::CorruptModel(format!("file truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_floats<R: Read>(input: &mut R, out: &mut [f64], what: &str) -> Result<()> {
    let mut buf = [0u8; 8];
    for v in out.iter_mut() {
        read_exact(input, &mut buf, what)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioners::{EncoderConfig, EncoderKind};
    use crate::flow::ConditionerConfig;

    fn model() -> FlowModel {
        let config = ModelConfig {
            dim: 2,
            coupling_layers: 3,
            conditioner: ConditionerConfig::default(),
            encoder: EncoderConfig::with_kind(EncoderKind::Cnn, 4),
        };
        let mut m = FlowModel::new(&config, 11).unwrap();
        m.perturb_parameters(0.37, 2);
        m.set_norm_stats(Some(NormStats {
            min: vec![-0.1, 1.0 / 3.0],
            max: vec![0.7, 0.0],
            zero_channels: vec![false, true],
        }));
        m
    }

    fn bytes(m: &FlowModel) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model(m, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let buf = bytes(&m);
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut buf = bytes(&model());
        buf[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = read_model(buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 7, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
    }

    #[test]
    fn truncation_is_a_structured_error() {
        let buf = bytes(&model());
        for cut in [3, 10, 20, buf.len() / 2, buf.len() - 1] {
            match read_model(&buf[..cut]) {
                Err(Error::CorruptModel(msg)) => assert!(msg.contains("truncated"), "{msg}"),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(
            read_model(&b"not a model at all"[..]),
            Err(Error::CorruptModel(_))
        ));
        let mut buf = bytes(&model());
        buf.push(0);
        assert!(matches!(read_model(buf.as_slice()), Err(Error::CorruptModel(_))));
    }
}
