//! Single-file model archive.
//!
//! ```text
//! b"ULBMCKPT" | u32 version | u64 manifest length | manifest JSON | raw data
//! ```
//!
//! The manifest records the model configuration, the input normalization and
//! one entry per parameter and buffer (name, dtype, shape, byte offset into
//! the data section). Data is little-endian `f64`.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::param::Module;

pub const MAGIC: &[u8; 8] = b"ULBMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    pub normalization: Normalization,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
}

fn collect(model: &Model) -> (Vec<TensorEntry>, Vec<TensorEntry>, Vec<u8>) {
    let mut data = Vec::new();
    let mut push = |name: &str, a: &ArrayD<f64>, list: &mut Vec<TensorEntry>| {
        list.push(TensorEntry {
            name: name.to_string(),
            dtype: "f64".into(),
            shape: a.shape().to_vec(),
            offset: data.len() as u64,
        });
        for v in a.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    };
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    model.visit_params("", &mut |n, p| push(n, &p.value, &mut params));
    model.visit_buffers("", &mut |n, b| push(n, b, &mut buffers));
    (params, buffers, data)
}

/// Serializes a model and its input normalization.
pub fn to_bytes(model: &Model, norm: &Normalization) -> Result<Vec<u8>> {
    let (params, buffers, data) = collect(model);
    let manifest = Manifest {
        model: model.config.clone(),
        normalization: norm.clone(),
        params,
        buffers,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses the header and manifest; returns the manifest and the data section.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[20..end]).map_err(|e| bad(format!("malformed manifest: {e}")))?;
    Ok((manifest, &bytes[end..]))
}

fn read_tensor(data: &[u8], e: &TensorEntry) -> Result<Vec<f64>> {
    if e.dtype != "f64" {
        return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
    }
    let n: usize = e.shape.iter().product();
    let start = e.offset as usize;
    let end = start
        .checked_add(n * 8)
        .filter(|&x| x <= data.len())
        .ok_or_else(|| bad(format!("{}: data out of range", e.name)))?;
    Ok(data[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Checks a manifest section against the names and shapes the rebuilt model expects.
fn match_entries(kind: &str, entries: &[TensorEntry], expected: &[(String, Vec<usize>)]) -> Result<()> {
    let mut problems = Vec::new();
    for (name, shape) in expected {
        match entries.iter().find(|e| &e.name == name) {
            None => problems.push(format!("missing {kind} {name}")),
            Some(e) if &e.shape != shape => {
                problems.push(format!("{kind} {name} has shape {:?}, model expects {shape:?}", e.shape))
            }
            Some(_) => {}
        }
    }
    for e in entries {
        if !expected.iter().any(|(n, _)| n == &e.name) {
            problems.push(format!("unexpected {kind} {}", e.name));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(bad(problems.join("; ")))
    }
}

/// Rebuilds the model from its stored configuration and restores every tensor.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Normalization)> {
    let (manifest, data) = read_manifest(bytes)?;
    let mut model = Model::new(&manifest.model, 0).map_err(|e| bad(format!("stored config is invalid: {e}")))?;
    let mut want_p = Vec::new();
    model.visit_params("", &mut |n, p| want_p.push((n.to_string(), p.shape().to_vec())));
    let mut want_b = Vec::new();
    model.visit_buffers("", &mut |n, b| want_b.push((n.to_string(), b.shape().to_vec())));
    match_entries("parameter", &manifest.params, &want_p)?;
    match_entries("buffer", &manifest.buffers, &want_b)?;
    let mut failure = None;
    model.visit_params_mut("", &mut |n, p| {
        let e = manifest.params.iter().find(|e| e.name == n).expect("matched above");
        match read_tensor(data, e) {
            Ok(v) => p.data_mut().copy_from_slice(&v),
            Err(err) => failure = failure.take().or(Some(err)),
        }
    });
    model.visit_buffers_mut("", &mut |n, b| {
        let e = manifest.buffers.iter().find(|e| e.name == n).expect("matched above");
        match read_tensor(data, e) {
            Ok(v) => b.as_slice_mut().expect("contiguous buffer").copy_from_slice(&v),
            Err(err) => failure = failure.take().or(Some(err)),
        }
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if model.num_params() != manifest.params.iter().map(|e| e.shape.iter().product::<usize>()).sum::<usize>() {
        return Err(bad("parameter element count mismatch"));
    }
    Ok((model, manifest.normalization))
}

pub fn save_checkpoint(path: &Path, model: &Model, norm: &Normalization) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model, norm)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Normalization)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// FNV-1a hash over the bit patterns of every parameter and buffer, in registry order.
pub fn fingerprint(model: &Model) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |a: &ArrayD<f64>| {
        for v in a.iter() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    };
    model.visit_params("", &mut |_, p| feed(&p.value));
    model.visit_buffers("", &mut |_, b| feed(b));
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::SkipScaleMode;

    #[test]
    fn round_trip_is_exact() {
        let mut m = Model::new(&ModelConfig::tiny(), 5).unwrap();
        m.enc_conv[0].bn.running_mean.fill(0.25);
        let norm = Normalization {
            mean: [0.1, 0.2, 0.3],
            std: [0.4, 0.5, 0.6],
        };
        let bytes = to_bytes(&m, &norm).unwrap();
        let (back, n2) = from_bytes(&bytes).unwrap();
        assert_eq!(n2, norm);
        assert_eq!(fingerprint(&back), fingerprint(&m));
        assert_eq!(back.config, m.config);
        let (manifest, data) = read_manifest(&bytes).unwrap();
        let elems: usize = manifest.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        assert_eq!(elems, m.num_params());
        let buf: usize = manifest.buffers.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        assert_eq!(data.len(), 8 * (elems + buf));
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let m = Model::new(&ModelConfig::tiny(), 0).unwrap();
        let bytes = to_bytes(&m, &Normalization::default()).unwrap();
        assert!(matches!(from_bytes(&bytes[..10]), Err(Error::Checkpoint(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(from_bytes(&bad_magic), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Checkpoint(_))));

        // A manifest claiming stage-wise skips no longer matches the stored tensors.
        let (mut manifest, data) = read_manifest(&bytes).unwrap();
        manifest.model.skip_scale_mode = SkipScaleMode::StageWise;
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut forged = Vec::new();
        forged.extend_from_slice(MAGIC);
        forged.extend_from_slice(&VERSION.to_le_bytes());
        forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(data);
        let err = from_bytes(&forged).unwrap_err().to_string();
        assert!(err.contains("skip_scale"), "{err}");
    }
}
