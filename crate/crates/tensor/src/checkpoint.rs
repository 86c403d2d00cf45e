//! Checkpoint file: one JSON header line, then little-endian f32 blobs in
//! header order.
//!
//! ```text
//! {"format_version":1,"meta":{..},"params":[{"name":..,"shape":[..],"offset":0,"step":12},..]}\n
//! <f32 LE blob 0><f32 LE blob 1>...
//! ```
//!
//! `offset` is the byte position of a blob relative to the first byte after
//! the header line. Optimizer moments are stored as extra entries named
//! `optim.exp_avg.<param>` and `optim.exp_avg_sq.<param>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const EXP_AVG: &str = "optim.exp_avg.";
const EXP_AVG_SQ: &str = "optim.exp_avg_sq.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(default)]
    meta: serde_json::Value,
    params: Vec<EntryHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub header: EntryHeader,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    /// Snapshot of every parameter of `store`, with optimizer state when
    /// `with_optimizer` is set.
    pub fn from_store(store: &ParamStore, meta: serde_json::Value, with_optimizer: bool) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        let mut push = |name: String, shape: &[usize], step: Option<u64>, data: &[f64]| {
            let data: Vec<f32> = data.iter().map(|&v| v as f32).collect();
            let len = data.len() as u64 * 4;
            entries.push(Entry {
                header: EntryHeader {
                    name,
                    shape: shape.to_vec(),
                    offset,
                    step,
                },
                data,
            });
            offset += len;
        };
        for (_, p) in store.iter() {
            push(
                p.name.clone(),
                p.shape(),
                with_optimizer.then_some(p.step),
                p.value.data(),
            );
        }
        if with_optimizer {
            for (_, p) in store.iter() {
                push(format!("{EXP_AVG}{}", p.name), p.shape(), None, &p.exp_avg);
                push(format!("{EXP_AVG_SQ}{}", p.name), p.shape(), None, &p.exp_avg_sq);
            }
        }
        Self { meta, entries }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            params: self.entries.iter().map(|e| e.header.clone()).collect(),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        out.push(b'\n');
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| TensorError::Checkpoint("missing header terminator".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| TensorError::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let blobs = &bytes[nl + 1..];
        let mut entries = Vec::with_capacity(header.params.len());
        for h in header.params {
            let n: usize = h.shape.iter().product();
            let start = h.offset as usize;
            let end = start + 4 * n;
            let raw = blobs
                .get(start..end)
                .ok_or_else(|| TensorError::Checkpoint(format!("blob for `{}` out of bounds", h.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { header: h, data });
        }
        Ok(Self {
            meta: header.meta,
            entries,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.header.name == name)
    }

    /// Parameter entries, excluding optimizer state.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .map(|e| e.header.name.as_str())
            .filter(|n| !n.starts_with(EXP_AVG) && !n.starts_with(EXP_AVG_SQ))
    }

    /// Copies every parameter present in both the checkpoint and `store`
    /// whose name passes `filter`; with `with_optimizer`, stored optimizer
    /// state and step counts follow. Returns the loaded names. Any shape
    /// disagreement aborts the load before `store` is touched.
    pub fn restore_into(
        &self,
        store: &mut ParamStore,
        filter: impl Fn(&str) -> bool,
        with_optimizer: bool,
    ) -> Result<Vec<String>> {
        let mut matched = Vec::new();
        let mut bad = Vec::new();
        for name in self.param_names() {
            if !filter(name) {
                continue;
            }
            let Some(id) = store.id(name) else { continue };
            let e = self.entry(name).expect("listed above");
            if e.header.shape != store.get(id).shape() {
                bad.push(format!(
                    "{name} (checkpoint {:?}, model {:?})",
                    e.header.shape,
                    store.get(id).shape()
                ));
            } else {
                matched.push((id, e));
            }
        }
        if !bad.is_empty() {
            return Err(TensorError::CheckpointShapes(bad));
        }
        let mut loaded = Vec::with_capacity(matched.len());
        for (id, e) in matched {
            let p = store.get_mut(id);
            p.value
                .data_mut()
                .iter_mut()
                .zip(&e.data)
                .for_each(|(d, &s)| *d = s as f64);
            if !with_optimizer {
                loaded.push(p.name.clone());
                continue;
            }
            if let Some(step) = e.header.step {
                p.step = step;
            }
            if let Some(m) = self.entry(&format!("{EXP_AVG}{}", p.name)) {
                p.exp_avg = m.data.iter().map(|&v| v as f64).collect();
            }
            if let Some(v) = self.entry(&format!("{EXP_AVG_SQ}{}", p.name)) {
                p.exp_avg_sq = v.data.iter().map(|&v| v as f64).collect();
            }
            loaded.push(p.name.clone());
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Init, Precision};
    use crate::rng::seeded;

    fn store() -> ParamStore {
        let mut rng = seeded(3, 0);
        let mut s = ParamStore::new(Precision::F32);
        s.add("enc.w", &[3, 4], Init::Xavier { fan_in: 3, fan_out: 4 }, &mut rng)
            .unwrap();
        s.add("enc.b", &[4], Init::Zeros, &mut rng).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint::from_store(&store(), serde_json::json!({"k": 1}), false);
        let bytes = ck.to_bytes().unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(header["params"][1]["offset"], 48);
        assert_eq!(bytes.len() - nl - 1, 16 * 4);
    }

    #[test]
    fn bit_exact_round_trip() {
        let ck = Checkpoint::from_store(&store(), serde_json::Value::Null, true);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn shape_mismatch_lists_names() {
        let ck = Checkpoint::from_store(&store(), serde_json::Value::Null, false);
        let mut rng = seeded(0, 0);
        let mut other = ParamStore::new(Precision::F32);
        other.add("enc.w", &[4, 4], Init::Zeros, &mut rng).unwrap();
        other.add("enc.b", &[4], Init::Ones, &mut rng).unwrap();
        let err = ck.restore_into(&mut other, |_| true, true).unwrap_err();
        assert!(matches!(&err, TensorError::CheckpointShapes(n) if n.len() == 1 && n[0].starts_with("enc.w")));
        // nothing was written
        assert_eq!(other.by_name("enc.b").unwrap().value.data(), &[1.0; 4]);
    }

    #[test]
    fn restores_values_exactly() {
        let src = store();
        let ck = Checkpoint::from_store(&src, serde_json::Value::Null, true);
        let mut rng = seeded(9, 9);
        let mut dst = ParamStore::new(Precision::F32);
        dst.add("enc.w", &[3, 4], Init::Xavier { fan_in: 3, fan_out: 4 }, &mut rng)
            .unwrap();
        let loaded = ck.restore_into(&mut dst, |_| true, true).unwrap();
        assert_eq!(loaded, vec!["enc.w".to_string()]);
        assert_eq!(dst.by_name("enc.w").unwrap().value, src.by_name("enc.w").unwrap().value);
    }
}
