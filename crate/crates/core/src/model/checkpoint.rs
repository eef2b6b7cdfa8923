use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CheckpointMeta, ModelCheckpoint};
use crate::numerics::{Real, Tensor};

const MAGIC: &[u8; 4] = b"MMRL";
const VERSION: u32 = 1;

/// `MMRL`, version, length-prefixed JSON metadata, then one record per
/// parameter in name order: u16 name length, name, u8 dtype, u8 rank,
/// u32 extents, little-endian payload.
pub fn encode_checkpoint<T: Real>(ck: &ModelCheckpoint<T>) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ck.meta)?;
    let mut out = Vec::with_capacity(12 + meta.len() + ck.params.values().map(|t| t.numel() * T::size() + 32).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for (name, t) in &ck.params {
        let n = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.to_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
}

pub fn decode_checkpoint<T: Real>(buf: &[u8]) -> Result<ModelCheckpoint<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let mut params = BTreeMap::new();
    while r.pos < buf.len() {
        let n = u16::from_le_bytes(r.take(2)?.try_into().expect("2")) as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "`{name}` stored with dtype {dtype}, expected {} ({})",
                T::DTYPE,
                T::NAME
            )));
        }
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * T::size())?;
        let data = bytes.chunks_exact(T::size()).map(T::from_le).collect();
        if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
    }
    let ck = ModelCheckpoint { meta, params };
    ck.validate()?;
    Ok(ck)
}

pub fn save<T: Real>(ck: &ModelCheckpoint<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<ModelCheckpoint<T>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

fn lineage_check(a: &CheckpointMeta, b: &CheckpointMeta) -> Result<()> {
    let mismatch = |what: &str| {
        Err(Error::ParamMismatch {
            name: format!("meta.{what}"),
            detail: "checkpoints come from different backbones".into(),
        })
    };
    if a.universe != b.universe {
        return mismatch("universe");
    }
    if a.task != b.task {
        return mismatch("task");
    }
    if a.dims != b.dims {
        return mismatch("dims");
    }
    if a.pretrain != b.pretrain {
        return mismatch("pretrain");
    }
    if a.seeds.get("pretrain") != b.seeds.get("pretrain") {
        return mismatch("seeds.pretrain");
    }
    Ok(())
}

/// `alpha * a + (1 - alpha) * b` for every tensor. Endpoints and equal
/// entries are copied, so `alpha` in {0, 1} returns a parent bit for bit.
pub fn interpolate<T: Real>(a: &ModelCheckpoint<T>, b: &ModelCheckpoint<T>, alpha: f64) -> Result<ModelCheckpoint<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    lineage_check(&a.meta, &b.meta)?;
    let names = a.params.keys().chain(b.params.keys());
    let mut first_bad = None;
    for name in names {
        match (a.params.get(name), b.params.get(name)) {
            (Some(x), Some(y)) if x.shape() == y.shape() => {}
            (Some(x), Some(y)) => {
                first_bad.get_or_insert((name.clone(), format!("shape {:?} vs {:?}", x.shape(), y.shape())));
            }
            (Some(_), None) => {
                first_bad.get_or_insert((name.clone(), "missing in second checkpoint".to_string()));
            }
            (None, _) => {
                first_bad.get_or_insert((name.clone(), "missing in first checkpoint".to_string()));
            }
        }
    }
    if let Some((name, detail)) = first_bad.into_iter().min_by(|x, y| x.0.cmp(&y.0)) {
        return Err(Error::ParamMismatch { name, detail });
    }
    let (wa, wb) = (T::of(alpha), T::of(1.0 - alpha));
    let params = a
        .params
        .iter()
        .map(|(name, x)| {
            let y = &b.params[name];
            let t = if alpha == 1.0 {
                x.clone()
            } else if alpha == 0.0 {
                y.clone()
            } else {
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| if p.f64().to_bits() == q.f64().to_bits() { p } else { wa * p + wb * q })
                    .collect();
                Tensor::new(x.shape().to_vec(), data).expect("shape")
            };
            (name.clone(), t)
        })
        .collect();
    let mut meta = a.meta.clone();
    meta.parents = vec![a.meta.label(), b.meta.label()];
    meta.alpha = Some(alpha);
    Ok(ModelCheckpoint { meta, params })
}
