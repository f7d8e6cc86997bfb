//! Flat named-tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0          8 bytes   magic b"GCDTNSR1"
//! offset 8          u64       header length H in bytes
//! offset 16         H bytes   UTF-8 JSON header
//! offset 16 + H     ...       payload: f64 values (IEEE 754, little-endian)
//! ```
//!
//! The header is a JSON object
//! `{"metadata": {string: string}, "tensors": [{"name", "shape", "offset"}]}` where
//! `offset` counts f64 elements from the payload start and each tensor holds
//! `product(shape)` elements in row-major order. Tensors are stored in header order
//! back to back; the payload length must match exactly. Metadata keys are sorted,
//! so equal contents always serialize to equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::lstm::LstmParams;
use crate::selector::{LagMode, SelectorParams};
use crate::slstm::SlstmParams;
use crate::train::{ComponentModel, Forecaster};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GCDTNSR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// An ordered collection of named f64 tensors plus string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub metadata: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if self.tensors.iter().any(|(n, _, _)| *n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        self.tensors.push((name, shape.to_vec(), data.to_vec()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata {key}")))
    }

    fn shaped(&self, name: &str, rank: usize) -> Result<(&[usize], &[f64])> {
        let (shape, data) = self.get(name)?;
        if shape.len() != rank {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {}, expected {rank}", shape.len())));
        }
        Ok((shape, data))
    }

    fn array1(&self, name: &str) -> Result<Array1<f64>> {
        Ok(Array1::from(self.shaped(name, 1)?.1.to_vec()))
    }

    fn array2(&self, name: &str) -> Result<Array2<f64>> {
        let (s, d) = self.shaped(name, 2)?;
        Array2::from_shape_vec((s[0], s[1]), d.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn array3(&self, name: &str) -> Result<Array3<f64>> {
        let (s, d) = self.shaped(name, 3)?;
        Array3::from_shape_vec((s[0], s[1], s[2]), d.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let (shape, data) = self.get(name)?;
        match (shape, data) {
            ([], [x]) => Ok(*x),
            _ => Err(Error::Checkpoint(format!("tensor {name} is not a scalar"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.tensors {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a tensor file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[16 + len..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut file = TensorFile {
            metadata: header.metadata,
            tensors: Vec::with_capacity(header.tensors.len()),
        };
        let mut expected = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > values.len() {
                return Err(Error::Checkpoint(format!("tensor {} has a bad offset", e.name)));
            }
            file.insert(e.name, &e.shape, &values[e.offset..e.offset + n])?;
            expected += n;
        }
        if expected != values.len() {
            return Err(bad("payload has trailing values"));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl ComponentModel {
    /// Selector tensors under `selector.*`, forecaster tensors under `forecaster.*`.
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        let sel = &self.selector;
        f.metadata.insert("variate".into(), self.variate.to_string());
        f.metadata.insert("lag_mode".into(), sel.lag_mode.as_str().into());
        f.metadata.insert("forecaster".into(), self.forecaster.kind().into());
        if let Forecaster::Slstm(p) = &self.forecaster {
            f.metadata.insert("heads".into(), p.heads.to_string());
        }
        f.insert("selector.w", sel.w.shape(), sel.w.as_slice().expect("standard layout"))?;
        f.insert("selector.b", sel.b.shape(), sel.b.as_slice().expect("standard layout"))?;
        f.insert("selector.beta", sel.beta.shape(), sel.beta.as_slice().expect("standard layout"))?;
        let d = self.forecaster.hidden();
        for (name, data) in self.forecaster.tensors() {
            let shape: &[usize] = match name {
                "w" | "r" => &[d, 4 * d],
                "bias" => &[4 * d],
                "head_w" => &[d],
                _ => &[],
            };
            f.insert(format!("forecaster.{name}"), shape, data)?;
        }
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let variate = f
            .meta("variate")?
            .parse()
            .map_err(|_| Error::Checkpoint("variate is not an integer".into()))?;
        let lag_mode: LagMode = f.meta("lag_mode")?.parse()?;
        let selector = SelectorParams {
            w: f.array3("selector.w")?,
            b: f.array1("selector.b")?,
            beta: f.array2("selector.beta")?,
            lag_mode,
        };
        let (l, d, v) = selector.w.dim();
        if selector.b.len() != d || selector.beta.dim() != (l, v) {
            return Err(Error::Checkpoint("selector tensors disagree on shape".into()));
        }
        let (w, r) = (f.array2("forecaster.w")?, f.array2("forecaster.r")?);
        let (bias, head_w, head_b) = (
            f.array1("forecaster.bias")?,
            f.array1("forecaster.head_w")?,
            f.scalar("forecaster.head_b")?,
        );
        if w.dim() != (d, 4 * d) || r.dim() != (d, 4 * d) || bias.len() != 4 * d || head_w.len() != d {
            return Err(Error::Checkpoint("forecaster tensors do not match the selector width".into()));
        }
        let forecaster = match f.meta("forecaster")? {
            "slstm" => {
                let heads: usize = f
                    .meta("heads")?
                    .parse()
                    .map_err(|_| Error::Checkpoint("heads is not an integer".into()))?;
                if heads == 0 || d % heads != 0 {
                    return Err(Error::Checkpoint(format!("{heads} heads do not divide width {d}")));
                }
                Forecaster::Slstm(SlstmParams {
                    w,
                    r,
                    bias,
                    head_w,
                    head_b,
                    heads,
                })
            }
            "lstm" => Forecaster::Lstm(LstmParams {
                w,
                r,
                bias,
                head_w,
                head_b,
            }),
            other => return Err(Error::Checkpoint(format!("unknown forecaster kind {other:?}"))),
        };
        Ok(Self {
            variate,
            selector,
            forecaster,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;

    #[test]
    fn byte_layout_is_exact() {
        let mut f = TensorFile::new();
        f.insert("a", &[2], &[1.0, -2.0]).unwrap();
        f.insert("s", &[], &[0.5]).unwrap();
        let bytes = f.to_bytes().unwrap();
        let header = br#"{"metadata":{},"tensors":[{"name":"a","shape":[2],"offset":0},{"name":"s","shape":[],"offset":2}]}"#;
        let mut expected = b"GCDTNSR1".to_vec();
        expected.extend_from_slice(&(header.len() as u64).to_le_bytes());
        expected.extend_from_slice(header);
        for x in [1.0f64, -2.0, 0.5] {
            expected.extend_from_slice(&x.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        assert_eq!(TensorFile::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut f = TensorFile::new();
        f.insert("a", &[2], &[1.0, 2.0]).unwrap();
        let bytes = f.to_bytes().unwrap();
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(TensorFile::from_bytes(b"nonsense-file-contents").is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&0f64.to_le_bytes());
        assert!(TensorFile::from_bytes(&extra).is_err());
        assert!(f.insert("b", &[3], &[1.0]).is_err());
    }

    #[test]
    fn component_round_trip_bit_exact() {
        for (ablation, lag_mode) in [
            (crate::train::Ablation::None, LagMode::Shared),
            (crate::train::Ablation::Lstm, LagMode::PerLag),
        ] {
            let cfg = TrainConfig {
                hidden: 8,
                heads: 2,
                context: 3,
                ablation,
                lag_mode,
                ..Default::default()
            };
            let m = ComponentModel::init(2, 5, &cfg, 9).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.bin");
            m.save(&path).unwrap();
            let back = ComponentModel::load(&path).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_tensor_file().unwrap().to_bytes().unwrap(), std::fs::read(&path).unwrap());
        }
    }
}
