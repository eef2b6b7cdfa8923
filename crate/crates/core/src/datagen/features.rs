//! Feature files (CSV and the binary `MMFD` format), manifest-driven
//! ingestion and on-disk bundles.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::generate::sample_indices;
use crate::datagen::{DatasetBundle, GenConfig, Label, ModalityUniverse, MultimodalExample, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

const MMFD_MAGIC: &[u8; 4] = b"MMFD";
const MMFD_VERSION: u32 = 1;

// ---------------------------------------------------------------- CSV

/// Writes pooled features: `example_id,label,<modality>_<dim>...`.
pub fn write_csv(path: &Path, universe: &ModalityUniverse, xs: &[MultimodalExample]) -> Result<()> {
    let dims = pooled_dims(universe, xs)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["example_id".to_string(), "label".to_string()];
    for (m, &d) in dims.iter().enumerate() {
        header.extend((0..d).map(|i| format!("{}_{i}", universe.name(m))));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for x in xs {
        let p = x.pooled();
        let mut rec = vec![x.id.to_string(), format_label(x.label.as_ref())];
        for m in 0..universe.len() {
            let t = p
                .tokens(m)
                .ok_or_else(|| Error::MissingModality(universe.name(m).into()))?;
            rec.extend(t.data().iter().map(|v| v.to_string()));
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV feature file; each modality becomes a single `1 x dim` token.
/// Row numbers in errors count data rows from 1.
pub fn read_csv(path: &Path, manifest: &FeatureManifest, labeled: bool) -> Result<Vec<MultimodalExample>> {
    let universe = manifest.universe()?;
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut expected = vec!["example_id".to_string(), "label".to_string()];
    for m in &manifest.modalities {
        expected.extend((0..m.dim).map(|i| format!("{}_{i}", m.name)));
    }
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Ingest {
            row: 0,
            detail: format!("header does not match manifest (expected {} columns)", expected.len()),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Ingest {
            row,
            detail: e.to_string(),
        })?;
        if rec.len() != expected.len() {
            return Err(Error::Ingest {
                row,
                detail: format!("{} columns, expected {}", rec.len(), expected.len()),
            });
        }
        let id: u64 = rec[0].trim().parse().map_err(|_| Error::Ingest {
            row,
            detail: format!("bad example_id `{}`", &rec[0]),
        })?;
        let label = if labeled {
            Some(parse_label(&rec[1], &manifest.task).map_err(|d| Error::Ingest { row, detail: d })?)
        } else {
            None
        };
        let mut col = 2;
        let mut tokens = Vec::with_capacity(universe.len());
        for m in &manifest.modalities {
            let mut v = Vec::with_capacity(m.dim);
            for c in col..col + m.dim {
                let f: f32 = rec[c].trim().parse().map_err(|_| Error::Ingest {
                    row,
                    detail: format!("column `{}`: bad value `{}`", expected[c], &rec[c]),
                })?;
                if !f.is_finite() {
                    return Err(Error::Ingest {
                        row,
                        detail: format!("column `{}`: non-finite value", expected[c]),
                    });
                }
                v.push(f);
            }
            col += m.dim;
            tokens.push(Some(Tensor::matrix(1, m.dim, v)?));
        }
        out.push(MultimodalExample::new(id, tokens, label));
    }
    Ok(out)
}

fn format_label(l: Option<&Label>) -> String {
    match l {
        None => String::new(),
        Some(Label::Class(c)) => c.to_string(),
        Some(l @ Label::Multi(_)) => l
            .positives()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";"),
    }
}

fn parse_label(s: &str, task: &TaskSpec) -> std::result::Result<Label, String> {
    let s = s.trim();
    let idx = |p: &str| -> std::result::Result<usize, String> {
        let c: usize = p.trim().parse().map_err(|_| format!("bad label `{s}`"))?;
        if c >= task.classes {
            return Err(format!("label {c} out of range for {} classes", task.classes));
        }
        Ok(c)
    };
    match task.kind {
        TaskKind::SingleLabel => idx(s).map(Label::Class),
        TaskKind::MultiLabel => {
            let mut v = vec![false; task.classes];
            if !s.is_empty() {
                for p in s.split(';') {
                    v[idx(p)?] = true;
                }
            }
            Ok(Label::Multi(v))
        }
    }
}

fn pooled_dims(universe: &ModalityUniverse, xs: &[MultimodalExample]) -> Result<Vec<usize>> {
    let first = xs.first().ok_or(Error::EmptyDataset("feature export"))?;
    (0..universe.len())
        .map(|m| {
            first
                .tokens(m)
                .map(|t| t.cols())
                .ok_or_else(|| Error::MissingModality(universe.name(m).into()))
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

// ---------------------------------------------------------------- MMFD

/// Serializes examples: magic, version, record count, then records each
/// prefixed with a u32 byte length.
pub fn encode_mmfd(xs: &[MultimodalExample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MMFD_MAGIC);
    out.extend_from_slice(&MMFD_VERSION.to_le_bytes());
    out.extend_from_slice(&(xs.len() as u32).to_le_bytes());
    let mut rec = Vec::new();
    for x in xs {
        rec.clear();
        rec.extend_from_slice(&x.id.to_le_bytes());
        match &x.label {
            None => rec.push(0),
            Some(Label::Class(c)) => {
                rec.push(1);
                rec.extend_from_slice(&(*c as u32).to_le_bytes());
            }
            Some(Label::Multi(v)) => {
                rec.push(2);
                rec.extend_from_slice(&(v.len() as u32).to_le_bytes());
                rec.extend(v.iter().map(|&b| b as u8));
            }
        }
        rec.push(x.universe_len() as u8);
        for m in 0..x.universe_len() {
            match x.tokens(m) {
                None => rec.push(0),
                Some(t) => {
                    rec.push(1);
                    rec.extend_from_slice(&(t.rows() as u32).to_le_bytes());
                    rec.extend_from_slice(&(t.cols() as u32).to_le_bytes());
                    for v in t.data() {
                        rec.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Ingest {
            row: self.record,
            detail: "truncated record".into(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}

pub fn decode_mmfd(buf: &[u8]) -> Result<Vec<MultimodalExample>> {
    if buf.len() < 12 || &buf[..4] != MMFD_MAGIC {
        return Err(Error::Format("not an MMFD feature file".into()));
    }
    let mut c = Cursor { buf, pos: 4, record: 0 };
    let version = c.u32()?;
    if version != MMFD_VERSION {
        return Err(Error::Format(format!("unsupported MMFD version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for r in 1..=count {
        c.record = r;
        let len = c.u32()? as usize;
        let body = c.take(len)?;
        let mut rc = Cursor { buf: body, pos: 0, record: r };
        let id = rc.u64()?;
        let label = match rc.u8()? {
            0 => None,
            1 => Some(Label::Class(rc.u32()? as usize)),
            2 => {
                let n = rc.u32()? as usize;
                Some(Label::Multi(rc.take(n)?.iter().map(|&b| b != 0).collect()))
            }
            t => {
                return Err(Error::Ingest {
                    row: r,
                    detail: format!("unknown label tag {t}"),
                })
            }
        };
        let n = rc.u8()? as usize;
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            if rc.u8()? == 0 {
                tokens.push(None);
                continue;
            }
            let rows = rc.u32()? as usize;
            let cols = rc.u32()? as usize;
            let bytes = rc.take(rows * cols * 4)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4")))
                .collect();
            tokens.push(Some(Tensor::matrix(rows, cols, data)?));
        }
        if rc.pos != body.len() {
            return Err(Error::Ingest {
                row: r,
                detail: "trailing bytes in record".into(),
            });
        }
        out.push(MultimodalExample::new(id, tokens, label));
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(out)
}

pub fn write_mmfd(path: &Path, xs: &[MultimodalExample]) -> Result<()> {
    fs::write(path, encode_mmfd(xs)).map_err(|e| Error::io(path, e))
}

pub fn read_mmfd(path: &Path) -> Result<Vec<MultimodalExample>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_mmfd(&buf)
}

// ---------------------------------------------------------------- ingestion

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureModality {
    pub name: String,
    pub dim: usize,
}

/// Describes a directory of precomputed feature files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    pub modalities: Vec<FeatureModality>,
    pub task: TaskSpec,
    /// File names, relative to the manifest directory. `.csv` or `.mmfd`.
    pub pretrain: String,
    pub train: String,
    pub eval: String,
    pub self_distill_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl FeatureManifest {
    pub fn universe(&self) -> Result<ModalityUniverse> {
        ModalityUniverse::new(self.modalities.iter().map(|m| m.name.clone()))
    }

    fn check_example(&self, x: &MultimodalExample, row: usize) -> Result<()> {
        if x.universe_len() != self.modalities.len() {
            return Err(Error::Ingest {
                row,
                detail: format!("{} modalities, manifest declares {}", x.universe_len(), self.modalities.len()),
            });
        }
        for (m, spec) in self.modalities.iter().enumerate() {
            match x.tokens(m) {
                None => {
                    return Err(Error::Ingest {
                        row,
                        detail: format!("missing modality `{}`", spec.name),
                    })
                }
                Some(t) if t.cols() != spec.dim => {
                    return Err(Error::Ingest {
                        row,
                        detail: format!("`{}` has dim {}, manifest declares {}", spec.name, t.cols(), spec.dim),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn load_split(dir: &Path, file: &str, manifest: &FeatureManifest, labeled: bool) -> Result<Vec<MultimodalExample>> {
    let path = dir.join(file);
    let xs = if file.ends_with(".csv") {
        read_csv(&path, manifest, labeled)?
    } else {
        read_mmfd(&path)?
            .into_iter()
            .map(|x| x.pooled())
            .collect()
    };
    for (i, x) in xs.iter().enumerate() {
        manifest.check_example(x, i + 1)?;
        if labeled {
            let l = x.label.as_ref().ok_or_else(|| Error::Ingest {
                row: i + 1,
                detail: "missing label".into(),
            })?;
            l.check(&manifest.task).map_err(|e| Error::Ingest {
                row: i + 1,
                detail: e.to_string(),
            })?;
        }
    }
    Ok(xs)
}

/// Builds a bundle from precomputed features; every modality is carried as
/// a single pre-pooled token.
pub fn ingest_features(dir: &Path, manifest: &FeatureManifest) -> Result<DatasetBundle> {
    let universe = manifest.universe()?;
    let pretrain: Vec<MultimodalExample> = load_split(dir, &manifest.pretrain, manifest, false)?
        .into_iter()
        .map(|mut x| {
            x.label = None;
            x
        })
        .collect();
    let train = load_split(dir, &manifest.train, manifest, true)?;
    let eval = load_split(dir, &manifest.eval, manifest, true)?;
    if manifest.self_distill_size > pretrain.len() {
        return Err(Error::Config(format!(
            "`self_distill_size` ({}) exceeds pretrain rows ({})",
            manifest.self_distill_size,
            pretrain.len()
        )));
    }
    let mut r = rng::stream(manifest.seed, &["datagen", "self_distill"]);
    let sd_indices = sample_indices(&mut r, pretrain.len(), manifest.self_distill_size);
    let self_distill = sd_indices.iter().map(|&i| pretrain[i].clone()).collect();
    Ok(DatasetBundle {
        universe,
        task: manifest.task,
        config: None,
        seed: manifest.seed,
        pretrain,
        train,
        eval,
        self_distill,
        sd_indices,
    })
}

// ---------------------------------------------------------------- bundles

pub const BUNDLE_FILES: [&str; 4] = ["D.mmfd", "D_T.mmfd", "D_E.mmfd", "D_SD.mmfd"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleMeta {
    pub universe: ModalityUniverse,
    pub task: TaskSpec,
    pub config: Option<GenConfig>,
    pub seed: u64,
    pub sd_indices: Vec<usize>,
    /// sha256 over the four split files, in `BUNDLE_FILES` order.
    pub hash: String,
}

fn split_bytes(b: &DatasetBundle) -> [Vec<u8>; 4] {
    [
        encode_mmfd(&b.pretrain),
        encode_mmfd(&b.train),
        encode_mmfd(&b.eval),
        encode_mmfd(&b.self_distill),
    ]
}

fn hash_parts(parts: &[Vec<u8>]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Content hash of a bundle; equal bundles hash equal.
pub fn bundle_hash(b: &DatasetBundle) -> String {
    hash_parts(&split_bytes(b))
}

/// Writes `bundle.json` plus one `.mmfd` file per split. Returns the hash.
pub fn save_bundle(b: &DatasetBundle, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let parts = split_bytes(b);
    let hash = hash_parts(&parts);
    for (name, bytes) in BUNDLE_FILES.iter().zip(&parts) {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let meta = BundleMeta {
        universe: b.universe.clone(),
        task: b.task,
        config: b.config.clone(),
        seed: b.seed,
        sd_indices: b.sd_indices.clone(),
        hash: hash.clone(),
    };
    let p = dir.join("bundle.json");
    let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n").map_err(|e| Error::io(&p, e))?;
    Ok(hash)
}

pub fn load_bundle(dir: &Path) -> Result<(DatasetBundle, String)> {
    let meta_path = dir.join("bundle.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&text)?;
    let mut parts = Vec::with_capacity(4);
    for name in BUNDLE_FILES {
        let p: PathBuf = dir.join(name);
        parts.push(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    let hash = hash_parts(&parts);
    if hash != meta.hash {
        return Err(Error::Format(format!(
            "bundle hash mismatch in {}: recorded {}, found {hash}",
            dir.display(),
            meta.hash
        )));
    }
    let mut splits = parts.iter().map(|p| decode_mmfd(p));
    let mut next = || splits.next().expect("four splits");
    let bundle = DatasetBundle {
        universe: meta.universe,
        task: meta.task,
        config: meta.config,
        seed: meta.seed,
        pretrain: next()?,
        train: next()?,
        eval: next()?,
        self_distill: next()?,
        sd_indices: meta.sd_indices,
    };
    bundle.check()?;
    Ok((bundle, hash))
}
