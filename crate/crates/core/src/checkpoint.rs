//! Binary checkpoint container.
//!
//! Layout (little endian): magic `RSTC1`, a `u32`-length UTF-8 TOML header
//! (configuration and run metadata), a `u32` record count, then records of
//! `u32` name length, name, `u32` rank, `u64` extents, and `f64` values.

use std::fs;
use std::path::Path;

use restc_tensor::{Adam, CsrMatrix, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{RestcError, Result};
use crate::model::Restc;
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 5] = b"RSTC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub n_items: usize,
    pub max_len: usize,
    /// Epochs completed.
    pub epoch: usize,
    pub steps: u64,
    pub adam_step: u64,
    pub config_hash: String,
    pub config: TrainConfig,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    push_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    push_u32(buf, shape.len() as u32);
    for &s in shape {
        buf.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(trainer: &Trainer) -> Vec<u8> {
    let model = &trainer.model;
    let header = Header {
        format_version: FORMAT_VERSION,
        n_items: model.n_items,
        max_len: model.max_len,
        epoch: trainer.epoch,
        steps: trainer.steps,
        adam_step: trainer.adam.step_count(),
        config_hash: model.config.architecture_hash(),
        config: model.config.clone(),
    };
    let text = toml::to_string(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());
    let (m, v) = trainer.adam.moments();
    push_u32(&mut buf, (3 * model.store.len()) as u32);
    for (i, (_, p)) in model.store.iter().enumerate() {
        push_record(&mut buf, &format!("param/{}", p.name), p.value.shape(), p.value.data());
        push_record(&mut buf, &format!("adam.m/{}", p.name), p.value.shape(), &m[i]);
        push_record(&mut buf, &format!("adam.v/{}", p.name), p.value.shape(), &v[i]);
    }
    buf
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, encode(trainer)).map_err(|e| RestcError::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| RestcError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| RestcError::Checkpoint("record name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| RestcError::Checkpoint("oversized record".into()))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| RestcError::Checkpoint(format!("record {name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(RestcError::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| RestcError::Checkpoint("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| RestcError::Checkpoint(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(RestcError::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.config.architecture_hash() != header.config_hash {
        return Err(RestcError::Checkpoint("embedded configuration does not match its hash".into()));
    }
    Ok(header)
}

/// Rebuilds a trainer from checkpoint bytes. `propagation` comes from the
/// dataset the checkpoint was trained on.
pub fn decode(bytes: &[u8], propagation: CsrMatrix) -> Result<Trainer> {
    let header = read_header(bytes)?;
    let mut r = Reader { buf: bytes, pos: MAGIC.len() };
    let len = r.u32()? as usize;
    r.take(len)?;
    if propagation.rows() != header.n_items + 1 {
        return Err(RestcError::Checkpoint(format!(
            "checkpoint has {} items but the dataset has {}",
            header.n_items,
            propagation.rows().saturating_sub(1)
        )));
    }
    let mut model = Restc::new(header.config.clone(), header.n_items, header.max_len, propagation)?;
    let count = r.u32()? as usize;
    let mut records = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.record()?;
        records.insert(name, t);
    }
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    let mut m = Vec::with_capacity(ids.len());
    let mut v = Vec::with_capacity(ids.len());
    for (id, name) in ids {
        let mut get = |kind: &str| {
            records
                .remove(&format!("{kind}/{name}"))
                .ok_or_else(|| RestcError::Checkpoint(format!("missing record {kind}/{name}")))
        };
        let value = get("param")?;
        let (mt, vt) = (get("adam.m")?, get("adam.v")?);
        model
            .store
            .set(id, value)
            .map_err(|e| RestcError::Checkpoint(format!("parameter {name}: {e}")))?;
        m.push(mt.into_data());
        v.push(vt.into_data());
    }
    if let Some(extra) = records.keys().next() {
        return Err(RestcError::Checkpoint(format!("unexpected record {extra}")));
    }
    let mut adam = Adam::new(&model.store, header.config.lr);
    adam.restore(header.adam_step, m, v)
        .map_err(|e| RestcError::Checkpoint(format!("optimizer state: {e}")))?;
    Ok(Trainer::from_parts(model, adam, header.epoch, header.steps))
}

pub fn load(path: &Path, propagation: CsrMatrix) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| RestcError::io(path, e))?;
    decode(&bytes, propagation).map_err(|e| match e {
        RestcError::Checkpoint(m) => RestcError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Session;
    use crate::graphs::Cfg;

    fn trainer() -> (Trainer, CsrMatrix) {
        let sessions = vec![Session { id: "a".into(), items: vec![1, 2, 3] }];
        let p = Cfg::build(&sessions, 3).unwrap().propagation_matrix().unwrap();
        let cfg = TrainConfig { dim: 4, ..TrainConfig::default() };
        (Trainer::new(Restc::new(cfg, 3, 4, p.clone()).unwrap()), p)
    }

    #[test]
    fn round_trip_preserves_everything() {
        let (mut t, p) = trainer();
        t.epoch = 3;
        t.steps = 17;
        let bytes = encode(&t);
        assert_eq!(&bytes[..5], b"RSTC1");
        let back = decode(&bytes, p).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.steps, 17);
        assert_eq!(back.model.config, t.model.config);
        for ((_, a), (_, b)) in back.model.store.iter().zip(t.model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (t, p) = trainer();
        let bytes = encode(&t);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p.clone()), Err(RestcError::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 3], p.clone()), Err(RestcError::Checkpoint(_))));
        let other = Cfg::build(&[], 5).unwrap().propagation_matrix().unwrap();
        assert!(matches!(decode(&bytes, other), Err(RestcError::Checkpoint(_))));
    }
}
