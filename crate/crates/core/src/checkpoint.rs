//! Training checkpoints.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SCK1"
//! 4       4     u32 header length N
//! 8       N     JSON header: version, training config, step, Adam step,
//!               tensor manifest [{name, shape, offset}]
//! 8+N     ...   f64 little-endian payload; manifest offsets are relative
//!               to its start
//! ```
//!
//! The payload holds every model parameter followed by the Adam first and
//! second moments (`adam.m.<name>`, `adam.v.<name>`), so training resumes
//! exactly where it stopped.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"SCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: String,
    config: TrainConfig,
    step: usize,
    adam_step: u64,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub model: Model,
    pub adam: AdamState,
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let names = self.model.params.names();
        let params = self.model.params.tensors();
        let mut out: Vec<(String, &Tensor)> = names.iter().cloned().zip(params).collect();
        out.extend(names.iter().zip(&self.adam.m).map(|(n, t)| (format!("adam.m.{n}"), t)));
        out.extend(names.iter().zip(&self.adam.v).map(|(n, t)| (format!("adam.v.{n}"), t)));
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in self.named_tensors() {
            tensors.push(Entry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += 8 * t.len() as u64;
        }
        let header = Header {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            step: self.step,
            adam_step: self.adam.t,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format(8, e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| Error::format(4, "header too large"))?;
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"SCK1\""));
        }
        if bytes.len() < 8 {
            return Err(Error::format(bytes.len() as u64, "truncated header length"));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
        let start = 8 + len;
        if bytes.len() < start {
            return Err(Error::format(
                bytes.len() as u64,
                format!("header needs {start} bytes, file has {}", bytes.len()),
            ));
        }
        let header: Header =
            serde_json::from_slice(&bytes[8..start]).map_err(|e| Error::format(8, format!("header: {e}")))?;
        let payload = &bytes[start..];

        let mut model = Model::new(header.config.model)?;
        let n = model.params.len();
        if header.tensors.len() != 3 * n {
            return Err(Error::format(8, format!("expected {} tensors, manifest lists {}", 3 * n, header.tensors.len())));
        }
        let mut read = Vec::with_capacity(3 * n);
        let mut end = 0u64;
        for e in &header.tensors {
            let count: usize = e.shape.iter().product();
            let stop = e.offset + 8 * count as u64;
            if stop > payload.len() as u64 {
                return Err(Error::format(
                    start as u64 + payload.len() as u64,
                    format!("tensor {} needs payload bytes up to {stop}, found {}", e.name, payload.len()),
                ));
            }
            let data = payload[e.offset as usize..stop as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| Error::format(start as u64 + e.offset, format!("tensor {}: {err}", e.name)))?;
            read.push((e.name.as_str(), t));
            end = end.max(stop);
        }
        if end != payload.len() as u64 {
            return Err(Error::format(start as u64 + end, "trailing bytes after payload"));
        }

        let names = model.params.names().to_vec();
        let mut adam = AdamState::new(model.params.tensors());
        adam.t = header.adam_step;
        for (i, name) in names.iter().enumerate() {
            let expect = [name.clone(), format!("adam.m.{name}"), format!("adam.v.{name}")];
            let slots = [i, n + i, 2 * n + i];
            for (want, slot) in expect.iter().zip(slots) {
                let (got, t) = &read[slot];
                if got != want || t.shape() != model.params.tensors()[i].shape() {
                    return Err(Error::format(8, format!("manifest entry {slot} is {got:?}, expected {want:?} with matching shape")));
                }
            }
            model.params.tensors_mut()[i] = read[i].1.clone();
            adam.m[i] = read[n + i].1.clone();
            adam.v[i] = read[2 * n + i].1.clone();
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            model,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelKind;
    use crate::scene::{Dataset, DatasetConfig};
    use crate::training::Trainer;

    fn trained(kind: ModelKind) -> Checkpoint {
        let mut cfg = TrainConfig::default();
        cfg.model.kind = kind;
        cfg.model.sinr.encoder = EncoderConfig {
            channels: 4,
            blocks: 1,
        };
        cfg.model.sinr.fce_dim = 2;
        cfg.dataset = DatasetConfig {
            train: 2,
            test: 1,
            height: 6,
            width: 6,
            bands: 3,
            ..Default::default()
        };
        cfg.batch = 1;
        let data = Dataset::synthetic(&cfg.dataset);
        let mut t = Trainer::new(cfg.clone(), &data, 1).unwrap();
        t.step().unwrap();
        t.step().unwrap();
        Checkpoint {
            config: cfg,
            step: t.steps_done(),
            model: t.model().clone(),
            adam: t.adam().clone(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [ModelKind::Sinr, ModelKind::Trilinear] {
            let ck = trained(kind);
            let bytes = ck.encode().unwrap();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.encode().unwrap(), bytes);
        }
    }

    #[test]
    fn file_round_trip_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sck");
        let ck = trained(ModelKind::Sinr);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("nope.sck")),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = trained(ModelKind::Trilinear).encode().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'Z';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::decode(&bytes[..10]).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(Checkpoint::decode(&longer).is_err());
    }
}
