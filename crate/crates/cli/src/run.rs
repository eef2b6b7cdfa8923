use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use modrobe::datagen::DatasetBundle;
use modrobe::metrics::ScoreKind;
use modrobe::model::{self, DownstreamMethod, ModelCheckpoint};
use modrobe::numerics::{Precision, Real};
use modrobe::trainer::{checkpoint_path, pretrain, run_sweep, SweepOptions, SweepPlan, TrainConfig};

use crate::config::to_json;
use crate::{load_train_config, open_bundle, usage, ConfigArgs, RUNS_DIR_ENV};

pub const MANIFEST: &str = "manifest.json";

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Bundle directory written by `gen-data`.
    #[arg(long)]
    bundle: PathBuf,
    /// Pretrained checkpoint; pretrains inside the run when omitted.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Comma-separated downstream methods.
    #[arg(long, default_value = "probe,finetune,masd,wiseft")]
    methods: String,
    /// Worker threads for training-set jobs.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Run id; derived from the inputs when omitted.
    #[arg(long)]
    run_id: Option<String>,
    /// Exit 1 if any job fails.
    #[arg(long)]
    strict: bool,
    /// Replace an existing run with the same id.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Partial,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Ok,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobRecord {
    pub method: DownstreamMethod,
    pub train_set: String,
    pub status: JobStatus,
    /// Relative to the run directory.
    pub checkpoint: String,
    pub checkpoint_sha256: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneRecord {
    pub path: String,
    pub sha256: Option<String>,
    pub pretrained_here: bool,
}

/// Everything needed to locate and interpret the artifacts of one sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub status: RunStatus,
    pub bundle: String,
    pub bundle_hash: String,
    pub universe: Vec<String>,
    pub score_kind: ScoreKind,
    pub config: TrainConfig,
    pub methods: Vec<DownstreamMethod>,
    pub backbone: BackboneRecord,
    pub jobs: Vec<JobRecord>,
    /// Score-matrix CSV per method, relative to the run directory.
    pub matrices: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join(MANIFEST);
        let text = std::fs::read_to_string(&p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    }

    fn write(&self, run_dir: &Path) -> Result<()> {
        let p = run_dir.join(MANIFEST);
        let tmp = run_dir.join(".manifest.json.tmp");
        std::fs::write(&tmp, to_json(self)?).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &p).with_context(|| format!("writing {}", p.display()))
    }
}

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn parse_methods(s: &str) -> Result<Vec<DownstreamMethod>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m = DownstreamMethod::parse(part)?;
        if m == DownstreamMethod::None {
            return Err(usage("`none` is not a downstream method"));
        }
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(usage("--methods is empty"));
    }
    Ok(out)
}

fn sha256_file(p: &Path) -> Result<String> {
    let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn derive_run_id(bundle_hash: &str, cfg: &TrainConfig, methods: &[DownstreamMethod], backbone: Option<&str>) -> Result<String> {
    let mut h = Sha256::new();
    h.update(bundle_hash.as_bytes());
    h.update(serde_json::to_vec(cfg)?);
    h.update(serde_json::to_vec(methods)?);
    h.update(backbone.unwrap_or("").as_bytes());
    Ok(hex::encode(h.finalize())[..12].to_string())
}

fn rel(run_dir: &Path, p: &Path) -> String {
    p.strip_prefix(run_dir).unwrap_or(p).to_string_lossy().into_owned()
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let cfg = load_train_config(&a.cfg)?;
    let methods = parse_methods(&a.methods)?;
    let (bundle, bundle_hash) = open_bundle(&a.bundle)?;
    if let Some(b) = &a.backbone {
        if !b.is_file() {
            return Err(usage(format!("no backbone at {}", b.display())));
        }
    }
    let backbone_hash = a.backbone.as_deref().map(sha256_file).transpose()?;
    let run_id = match &a.run_id {
        Some(id) if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') => {
            return Err(usage(format!("bad run id `{id}`")));
        }
        Some(id) => id.clone(),
        None => derive_run_id(&bundle_hash, &cfg, &methods, backbone_hash.as_deref())?,
    };
    let run_dir = runs_root().join(&run_id);
    if run_dir.exists() {
        if !a.force {
            return Err(usage(format!("run {} already exists; pass --force to replace it", run_dir.display())));
        }
        std::fs::remove_dir_all(&run_dir).with_context(|| format!("removing {}", run_dir.display()))?;
    }
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    match cfg.precision {
        Precision::F32 => sweep_typed::<f32>(a, cfg, methods, &bundle, bundle_hash, backbone_hash, run_id, &run_dir),
        Precision::F64 => sweep_typed::<f64>(a, cfg, methods, &bundle, bundle_hash, backbone_hash, run_id, &run_dir),
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep_typed<T: Real>(
    a: &SweepArgs,
    cfg: TrainConfig,
    methods: Vec<DownstreamMethod>,
    bundle: &DatasetBundle,
    bundle_hash: String,
    backbone_hash: Option<String>,
    run_id: String,
    run_dir: &Path,
) -> Result<()> {
    let plan = SweepPlan::full(&bundle.universe, &methods);
    let score_kind = match bundle.task.kind {
        modrobe::datagen::TaskKind::SingleLabel => ScoreKind::Accuracy,
        modrobe::datagen::TaskKind::MultiLabel => ScoreKind::Map,
    };
    let mut jobs = Vec::new();
    for &m in &methods {
        for &t in &plan.train_sets {
            let name = bundle.universe.format(t);
            jobs.push(JobRecord {
                method: m,
                train_set: name.clone(),
                status: JobStatus::Pending,
                checkpoint: rel(run_dir, &checkpoint_path(run_dir, m, &name)),
                checkpoint_sha256: None,
                error: None,
            });
        }
    }
    let backbone_path = a.backbone.clone().unwrap_or_else(|| run_dir.join("backbone.mmrl"));
    let mut manifest = RunManifest {
        run_id,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        status: RunStatus::Running,
        bundle: a.bundle.to_string_lossy().into_owned(),
        bundle_hash,
        universe: bundle.universe.names().to_vec(),
        score_kind,
        config: cfg.clone(),
        methods: methods.clone(),
        backbone: BackboneRecord {
            path: rel(run_dir, &backbone_path),
            sha256: backbone_hash,
            pretrained_here: a.backbone.is_none(),
        },
        jobs,
        matrices: methods.iter().map(|m| (m.name().to_string(), format!("{}.csv", m.name()))).collect(),
    };
    manifest.write(run_dir)?;

    let result = (|| -> Result<Vec<String>> {
        let backbone: ModelCheckpoint<T> = match &a.backbone {
            Some(p) => model::load(p).with_context(|| format!("loading backbone {}", p.display()))?,
            None => {
                eprintln!("pretraining backbone ({} examples)", bundle.pretrain.len());
                let (ck, _) = pretrain::<T>(bundle, &cfg)?;
                model::save(&ck, &backbone_path)?;
                manifest.backbone.sha256 = Some(sha256_file(&backbone_path)?);
                ck
            }
        };
        eprintln!(
            "sweeping {} training sets x {} methods on {} thread(s)",
            plan.train_sets.len(),
            methods.len(),
            a.parallel.max(1)
        );
        let out = run_sweep(
            &plan,
            bundle,
            &backbone,
            &cfg,
            &SweepOptions {
                parallel: a.parallel,
                store: Some(run_dir.to_path_buf()),
            },
        )?;
        for (m, mat) in &out.matrices {
            mat.write_csv(&run_dir.join(format!("{}.csv", m.name())))?;
        }
        std::fs::write(run_dir.join("logs.json"), to_json(&out.logs)?).context("writing logs.json")?;
        let mut warnings = Vec::new();
        for job in &mut manifest.jobs {
            let key = format!("{}/{}", job.method.name(), job.train_set);
            let failure = out
                .failures
                .iter()
                .find(|f| f.method == job.method.name() && f.train_set == job.train_set);
            match (failure, out.checkpoint_hashes.get(&key)) {
                (None, Some(h)) => {
                    job.status = JobStatus::Ok;
                    job.checkpoint_sha256 = Some(h.clone());
                }
                (f, _) => {
                    let msg = f.map_or_else(|| "no checkpoint produced".to_string(), |f| f.error.clone());
                    warnings.push(format!("{key}: {msg}"));
                    job.status = JobStatus::Failed;
                    job.error = Some(msg);
                }
            }
        }
        Ok(warnings)
    })();

    match result {
        Ok(warnings) => {
            let failed = warnings.len();
            manifest.status = if failed == 0 {
                RunStatus::Complete
            } else if failed == manifest.jobs.len() {
                RunStatus::Failed
            } else {
                RunStatus::Partial
            };
            manifest.write(run_dir)?;
            for w in &warnings {
                eprintln!("warning: job failed: {w}");
            }
            println!("{}", run_dir.display());
            if failed > 0 && a.strict {
                anyhow::bail!("{failed} of {} jobs failed (--strict)", manifest.jobs.len());
            }
            Ok(())
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            for job in &mut manifest.jobs {
                job.status = JobStatus::Failed;
                job.error = Some(format!("{e:#}"));
            }
            manifest.write(run_dir)?;
            Err(e)
        }
    }
}
