//! Binary checkpoints of a [`Learner`].
//!
//! Layout: the magic `CILF`, a little-endian `u32` format version, a `u32`
//! record count, then records of
//!
//! ```text
//! u32 name length | name (utf-8) | u8 dtype | u32 ndim | u64 dims... | payload
//! ```
//!
//! where dtype 0 is little-endian `f64`, 1 is little-endian `u64` and 2 is
//! raw utf-8 (shape `[byte length]`). Records are written in a fixed order,
//! so equal learners serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, ClassifierHead, FeatureExtractor, IncrementalModel};
use crate::prototype::{ClassCovariance, CovarianceMode, PrototypeMemory};
use crate::tensor::Tensor;
use crate::trainer::{Learner, TrainConfig};

pub const MAGIC: &[u8; 4] = b"CILF";
pub const VERSION: u32 = 1;

enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Text(String),
}

struct Record {
    shape: Vec<usize>,
    payload: Payload,
}

#[derive(Default)]
struct Writer {
    records: Vec<(String, Record)>,
}

impl Writer {
    fn f64(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        self.push(name, shape.to_vec(), Payload::F64(data.to_vec()));
    }

    fn u64(&mut self, name: impl Into<String>, data: &[u64]) {
        self.push(name, vec![data.len()], Payload::U64(data.to_vec()));
    }

    fn text(&mut self, name: impl Into<String>, s: String) {
        self.push(name, vec![s.len()], Payload::Text(s));
    }

    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, payload: Payload) {
        self.records.push((name.into(), Record { shape, payload }));
    }

    fn finish(self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, rec) in self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let tag: u8 = match rec.payload {
                Payload::F64(_) => 0,
                Payload::U64(_) => 1,
                Payload::Text(_) => 2,
            };
            out.push(tag);
            out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for d in &rec.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match rec.payload {
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::Text(s) => out.extend_from_slice(s.as_bytes()),
            }
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint reading {what} at byte offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn parse(bytes: &[u8]) -> Result<BTreeMap<String, Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad checkpoint magic at byte offset 0".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} at byte offset 4, expected {VERSION}"
        )));
    }
    let count = r.u32("record count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("record name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| Error::Format(format!("record name at byte offset {start} is not utf-8")))?
            .to_string();
        let tag_pos = r.pos;
        let tag = r.take(1, "dtype")?[0];
        let ndim = r.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("record {name:?} has {ndim} dims at byte offset {tag_pos}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= bytes.len())
            .ok_or_else(|| Error::Format(format!("record {name:?} has implausible shape {shape:?}")))?;
        let payload = match tag {
            0 => Payload::F64(
                r.take(8 * n, &name)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            1 => Payload::U64(
                r.take(8 * n, &name)?
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            2 => Payload::Text(
                String::from_utf8(r.take(n, &name)?.to_vec())
                    .map_err(|_| Error::Format(format!("record {name:?} is not utf-8")))?,
            ),
            t => return Err(Error::Format(format!("unknown dtype {t} at byte offset {tag_pos}"))),
        };
        if out.insert(name.clone(), Record { shape, payload }).is_some() {
            return Err(Error::Format(format!("duplicate record {name:?} at byte offset {start}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("trailing bytes after byte offset {}", r.pos)));
    }
    Ok(out)
}

pub fn to_bytes(learner: &Learner) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.text("meta/config", json(&learner.config)?);
    w.u64("meta/seed", &[learner.seed]);
    w.u64("meta/stage", &[learner.stage as u64]);
    w.text("model/arch", json(learner.model.extractor.arch())?);
    for (i, p) in learner.model.extractor.params().iter().enumerate() {
        w.f64(format!("extractor/{i:02}"), p.shape(), p.data());
    }
    let head = &learner.model.head;
    w.u64("head/meta", &[head.dim() as u64, head.views() as u64]);
    w.u64("head/class_ids", &head.class_ids().iter().map(|&c| c as u64).collect::<Vec<_>>());
    w.f64("head/weight", &[head.nodes(), head.dim()], head.weight());
    w.f64("head/bias", &[head.nodes()], head.bias());
    let mem = &learner.memory;
    w.text("memory/mode", json(&mem.mode())?);
    w.u64("memory/dim", &[mem.dim() as u64]);
    w.f64("memory/radius", &[1], &[mem.radius()]);
    let nodes = mem.nodes();
    w.u64("memory/nodes", &nodes.iter().map(|&k| k as u64).collect::<Vec<_>>());
    let protos: Vec<f64> = mem.prototypes().values().flatten().copied().collect();
    w.f64("memory/prototypes", &[nodes.len(), mem.dim()], &protos);
    for (k, c) in mem.covariances() {
        match c {
            ClassCovariance::Diag(v) => w.f64(format!("memory/cov/{k:06}"), &[v.len()], v),
            ClassCovariance::Full(m) => w.f64(format!("memory/cov/{k:06}"), &[mem.dim(), mem.dim()], m),
        }
    }
    Ok(w.finish())
}

fn json<T: serde::Serialize + ?Sized>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

fn get<'m>(map: &'m BTreeMap<String, Record>, name: &str) -> Result<&'m Record> {
    map.get(name)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks record {name:?}")))
}

fn f64s<'m>(map: &'m BTreeMap<String, Record>, name: &str) -> Result<(&'m [usize], &'m [f64])> {
    let r = get(map, name)?;
    match &r.payload {
        Payload::F64(v) => Ok((&r.shape, v)),
        _ => Err(Error::Format(format!("record {name:?} is not f64"))),
    }
}

fn u64s<'m>(map: &'m BTreeMap<String, Record>, name: &str) -> Result<&'m [u64]> {
    match &get(map, name)?.payload {
        Payload::U64(v) => Ok(v),
        _ => Err(Error::Format(format!("record {name:?} is not u64"))),
    }
}

fn text<'m>(map: &'m BTreeMap<String, Record>, name: &str) -> Result<&'m str> {
    match &get(map, name)?.payload {
        Payload::Text(s) => Ok(s),
        _ => Err(Error::Format(format!("record {name:?} is not text"))),
    }
}

fn from_json<T: serde::de::DeserializeOwned>(s: &str, name: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Format(format!("record {name:?}: {e}")))
}

fn scalar_u64(map: &BTreeMap<String, Record>, name: &str, len: usize) -> Result<Vec<usize>> {
    let v = u64s(map, name)?;
    if v.len() != len {
        return Err(Error::Format(format!("record {name:?} should hold {len} values")));
    }
    Ok(v.iter().map(|&x| x as usize).collect())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Learner> {
    let map = parse(bytes)?;
    let config: TrainConfig = from_json(text(&map, "meta/config")?, "meta/config")?;
    let seed = u64s(&map, "meta/seed")?.first().copied().unwrap_or_default();
    let stage = scalar_u64(&map, "meta/stage", 1)?[0];
    let arch: Architecture = from_json(text(&map, "model/arch")?, "model/arch")?;

    let n_params = arch.param_shapes().len();
    let params = (0..n_params)
        .map(|i| {
            let (shape, data) = f64s(&map, &format!("extractor/{i:02}"))?;
            Tensor::new(shape.to_vec(), data.to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let extractor = FeatureExtractor::from_params(arch, params)?;

    let hm = scalar_u64(&map, "head/meta", 2)?;
    let class_ids = u64s(&map, "head/class_ids")?.iter().map(|&c| c as usize).collect();
    let head = ClassifierHead::from_parts(
        hm[0],
        hm[1],
        class_ids,
        f64s(&map, "head/weight")?.1.to_vec(),
        f64s(&map, "head/bias")?.1.to_vec(),
    )?;

    let mode: CovarianceMode = from_json(text(&map, "memory/mode")?, "memory/mode")?;
    let dim = scalar_u64(&map, "memory/dim", 1)?[0];
    let mut memory = PrototypeMemory::new(dim, mode);
    memory.set_radius(f64s(&map, "memory/radius")?.1.first().copied().unwrap_or_default())?;
    let nodes = u64s(&map, "memory/nodes")?;
    let (_, protos) = f64s(&map, "memory/prototypes")?;
    if protos.len() != nodes.len() * dim {
        return Err(Error::Format("prototype record does not match node list".into()));
    }
    for (i, &k) in nodes.iter().enumerate() {
        let name = format!("memory/cov/{k:06}");
        let cov = match map.get(&name) {
            None => None,
            Some(_) => {
                let (shape, data) = f64s(&map, &name)?;
                Some(if shape.len() == 2 {
                    ClassCovariance::Full(data.to_vec())
                } else {
                    ClassCovariance::Diag(data.to_vec())
                })
            }
        };
        memory.insert(k as usize, protos[i * dim..(i + 1) * dim].to_vec(), cov)?;
    }

    Ok(Learner {
        config,
        seed,
        model: IncrementalModel { extractor, head },
        memory,
        stage,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save(learner: &Learner, path: &Path) -> Result<()> {
    let bytes = to_bytes(learner)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Learner> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn learner(mode: CovarianceMode) -> Learner {
        let arch = Architecture::Mlp {
            channels: 1,
            size: 4,
            hidden: vec![5],
            out_dim: 3,
        };
        let config = TrainConfig {
            covariance: mode,
            ..TrainConfig::default()
        };
        let mut l = Learner::new(arch, config, 9).unwrap();
        let mut rng = seeded(1);
        l.model.head.expand(&[4, 1], &mut rng).unwrap();
        let f = Tensor::randn(vec![16, 3], 1.0, &mut rng);
        let labels: Vec<usize> = (0..16).map(|i| i % 8).collect();
        l.memory.commit(&f, &labels).unwrap();
        l.memory.set_radius(0.7).unwrap();
        l.stage = 1;
        l
    }

    #[test]
    fn round_trip_every_mode() {
        for mode in [CovarianceMode::Radius, CovarianceMode::Diag, CovarianceMode::Full] {
            let l = learner(mode);
            let bytes = to_bytes(&l).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, l);
            assert_eq!(to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&learner(CovarianceMode::Radius)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(m)) if m.contains("offset 0")));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(from_bytes(&bad), Err(Error::Format(m)) if m.contains("version 2")));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(m)) if m.contains("truncated")));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.ckpt");
        let l = learner(CovarianceMode::Diag);
        save(&l, &path).unwrap();
        assert_eq!(load(&path).unwrap(), l);
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
