use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRGE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters, optional optimizer moments and free-form metadata. Values are
/// stored as 64-bit floats regardless of the training scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub metadata: BTreeMap<String, String>,
    pub params: ParamStore<f64>,
    pub adam: Option<AdamState<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &Model<S>, adam: Option<&AdamState<S>>, metadata: BTreeMap<String, String>) -> Self {
        let cast = |g: &Vec<Vec<S>>| g.iter().map(|v| v.iter().map(|x| x.f64()).collect()).collect();
        Checkpoint {
            config: model.config.clone(),
            metadata,
            params: model.params.cast(),
            adam: adam.map(|a| AdamState { m: cast(&a.m), v: cast(&a.v), t: a.t }),
        }
    }

    pub fn model<S: Scalar>(&self) -> Result<Model<S>> {
        Model::from_params(self.config.clone(), self.params.cast())
    }

    pub fn adam_state<S: Scalar>(&self) -> Option<AdamState<S>> {
        let cast = |g: &Vec<Vec<f64>>| g.iter().map(|v| v.iter().map(|&x| S::of(x)).collect()).collect();
        self.adam.as_ref().map(|a| AdamState { m: cast(&a.m), v: cast(&a.v), t: a.t })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.metadata.clone();
        if let Some(a) = &self.adam {
            meta.insert("adam.t".into(), a.t.to_string());
        }
        let header = toml::to_string(&Header { model: self.config.clone(), meta })
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

        let mut records: Vec<(String, &Tensor<f64>)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        let mut moment_tensors = Vec::new();
        if let Some(a) = &self.adam {
            for (prefix, moments) in [("adam.m.", &a.m), ("adam.v.", &a.v)] {
                for (i, (name, t)) in self.params.iter().enumerate() {
                    moment_tensors.push((format!("{prefix}{name}"), Tensor::new(t.shape().to_vec(), moments[i].clone())?));
                }
            }
        }
        records.extend(moment_tensors.iter().map(|(n, t)| (n.clone(), t)));

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = r.u64()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let Header { model, mut meta } = toml::from_str(header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let adam_t = meta.remove("adam.t").map(|s| s.parse::<u64>()).transpose().map_err(|e| Error::Checkpoint(e.to_string()))?;

        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut moments: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..n {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * 8)?;
            let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if name.starts_with("adam.") {
                moments.insert(name, data);
            } else {
                if params.index_of(&name).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate record {name}")));
                }
                params.insert(name, Tensor::new(shape, data)?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let adam = match adam_t {
            None if moments.is_empty() => None,
            None => return Err(Error::Checkpoint("optimizer moments without step counter".into())),
            Some(t) => {
                let mut take = |prefix: &str| -> Result<Vec<Vec<f64>>> {
                    params
                        .names()
                        .iter()
                        .map(|name| {
                            moments
                                .remove(&format!("{prefix}{name}"))
                                .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}{name}")))
                        })
                        .collect()
                };
                let m = take("adam.m.")?;
                let v = take("adam.v.")?;
                Some(AdamState { m, v, t })
            }
        };
        if let Some(extra) = moments.keys().next() {
            return Err(Error::Checkpoint(format!("unmatched record {extra}")));
        }
        Ok(Checkpoint { config: model, metadata: meta, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
