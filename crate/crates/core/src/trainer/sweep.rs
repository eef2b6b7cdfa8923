use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{DatasetBundle, ModalitySet, ModalityUniverse, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_sets, ScoreKind, ScoreMatrix};
use crate::model::{self, DownstreamMethod, ModelCheckpoint};
use crate::numerics::Real;
use crate::trainer::{finetune, linear_probe, masd_train, wiseft_assemble, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub universe: ModalityUniverse,
    pub train_sets: Vec<ModalitySet>,
    pub eval_sets: Vec<ModalitySet>,
    pub methods: Vec<DownstreamMethod>,
}

impl SweepPlan {
    /// Every nonempty training set against every nonempty evaluation set.
    pub fn full(universe: &ModalityUniverse, methods: &[DownstreamMethod]) -> Self {
        let sets = universe.nonempty_subsets();
        Self {
            universe: universe.clone(),
            train_sets: sets.clone(),
            eval_sets: sets,
            methods: methods.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &s in self.train_sets.iter().chain(&self.eval_sets) {
            if s.is_empty() {
                return Err(Error::EmptyModalitySet);
            }
            if !self.universe.contains_set(s) {
                return Err(Error::Config(format!("plan set {s:?} outside universe")));
            }
        }
        if self.methods.is_empty() {
            return Err(Error::Config("sweep plan lists no methods".into()));
        }
        if let Some(m) = self.methods.iter().find(|m| **m == DownstreamMethod::None) {
            return Err(Error::Config(format!("`{}` is not a downstream method", m.name())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Worker threads; 0 or 1 runs jobs one after another.
    pub parallel: usize,
    /// Directory receiving `<method>/<train_set>/model.mmrl`.
    pub store: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub method: String,
    pub train_set: String,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub matrices: BTreeMap<DownstreamMethod, ScoreMatrix>,
    pub failures: Vec<JobFailure>,
    /// sha256 of each encoded checkpoint, keyed `<method>/<train_set>`.
    pub checkpoint_hashes: BTreeMap<String, String>,
    pub logs: BTreeMap<String, TrainLog>,
}

pub fn checkpoint_path(store: &Path, method: DownstreamMethod, set_name: &str) -> PathBuf {
    store.join(method.name()).join(set_name).join("model.mmrl")
}

struct JobOutput {
    cells: Vec<(DownstreamMethod, Vec<f64>)>,
    failures: Vec<JobFailure>,
    hashes: Vec<(String, String)>,
    logs: Vec<(String, TrainLog)>,
}

struct Job<'a, T> {
    plan: &'a SweepPlan,
    bundle: &'a DatasetBundle,
    backbone: &'a ModelCheckpoint<T>,
    cfg: &'a TrainConfig,
    store: Option<&'a Path>,
    set: ModalitySet,
    name: String,
    out: JobOutput,
}

impl<T: Real> Job<'_, T> {
    fn wants(&self, m: DownstreamMethod) -> bool {
        self.plan.methods.contains(&m)
    }

    fn fail(&mut self, method: DownstreamMethod, e: &Error) {
        self.out.failures.push(JobFailure {
            method: method.name().into(),
            train_set: self.name.clone(),
            error: e.to_string(),
        });
    }

    /// Evaluates and stores a finished checkpoint if `method` was requested.
    fn emit(&mut self, method: DownstreamMethod, ck: &ModelCheckpoint<T>, log: Option<TrainLog>) {
        if !self.wants(method) {
            return;
        }
        let key = format!("{}/{}", method.name(), self.name);
        let res = (|| -> Result<(Vec<f64>, String)> {
            let bytes = model::encode_checkpoint(ck)?;
            if let Some(store) = self.store {
                let p = checkpoint_path(store, method, &self.name);
                let dir = p.parent().expect("has parent");
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                std::fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
            }
            let scores = evaluate_sets(ck, &self.bundle.eval, &self.plan.eval_sets)?;
            Ok((scores, hex::encode(Sha256::digest(&bytes))))
        })();
        match res {
            Ok((scores, hash)) => {
                self.out.cells.push((method, scores));
                self.out.hashes.push((key.clone(), hash));
                if let Some(log) = log {
                    self.out.logs.push((key, log));
                }
            }
            Err(e) => self.fail(method, &e),
        }
    }

    fn run(mut self) -> JobOutput {
        use DownstreamMethod::*;
        let (bb, cfg, set) = (self.backbone, self.cfg, self.set);
        let train = &self.bundle.train;
        let probe = match linear_probe(bb, train, set, cfg) {
            Ok((ck, log)) => ck_with(&mut self, Probe, ck, log),
            Err(e) => {
                for m in self.plan.methods.clone() {
                    self.fail(m, &e);
                }
                return self.out;
            }
        };
        if self.wants(Finetune) {
            match finetune(bb, &probe, train, set, cfg) {
                Ok((ck, log)) => self.emit(Finetune, &ck, Some(log)),
                Err(e) => self.fail(Finetune, &e),
            }
        }
        if self.wants(Masd) || self.wants(Wiseft) {
            match masd_train(bb, &probe, train, set, &self.bundle.self_distill, cfg) {
                Ok((ck, log)) => {
                    self.emit(Masd, &ck, Some(log));
                    if self.wants(Wiseft) {
                        match wiseft_assemble(&ck, &probe, cfg.wiseft_alpha) {
                            Ok(w) => self.emit(Wiseft, &w, Option::None),
                            Err(e) => self.fail(Wiseft, &e),
                        }
                    }
                }
                Err(e) => {
                    for m in [Masd, Wiseft] {
                        if self.wants(m) {
                            self.fail(m, &e);
                        }
                    }
                }
            }
        }
        self.out
    }
}

fn ck_with<T: Real>(job: &mut Job<'_, T>, method: DownstreamMethod, ck: ModelCheckpoint<T>, log: TrainLog) -> ModelCheckpoint<T> {
    job.emit(method, &ck, Some(log));
    ck
}

/// Runs every requested downstream method for every training set of the
/// plan and scores each result on every evaluation set. Jobs for different
/// training sets run concurrently; results do not depend on scheduling.
pub fn run_sweep<T: Real>(
    plan: &SweepPlan,
    bundle: &DatasetBundle,
    backbone: &ModelCheckpoint<T>,
    cfg: &TrainConfig,
    opts: &SweepOptions,
) -> Result<SweepOutput> {
    plan.validate()?;
    cfg.validate()?;
    if plan.universe != backbone.meta.universe || plan.universe != bundle.universe {
        return Err(Error::Config("plan, bundle and backbone disagree on the modality universe".into()));
    }
    let run = |set: &ModalitySet| {
        Job {
            plan,
            bundle,
            backbone,
            cfg,
            store: opts.store.as_deref(),
            set: *set,
            name: plan.universe.format(*set),
            out: JobOutput {
                cells: Vec::new(),
                failures: Vec::new(),
                hashes: Vec::new(),
                logs: Vec::new(),
            },
        }
        .run()
    };
    let outputs: Vec<JobOutput> = if opts.parallel <= 1 {
        plan.train_sets.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| plan.train_sets.par_iter().map(run).collect())
    };

    let kind = match bundle.task.kind {
        TaskKind::SingleLabel => ScoreKind::Accuracy,
        TaskKind::MultiLabel => ScoreKind::Map,
    };
    let mut matrices: BTreeMap<DownstreamMethod, ScoreMatrix> = plan
        .methods
        .iter()
        .map(|&m| (m, ScoreMatrix::new(plan.universe.clone(), kind)))
        .collect();
    let mut failures = Vec::new();
    let mut checkpoint_hashes = BTreeMap::new();
    let mut logs = BTreeMap::new();
    for (set, out) in plan.train_sets.iter().zip(outputs) {
        for (method, scores) in out.cells {
            let m = matrices.get_mut(&method).expect("requested method");
            for (&e, s) in plan.eval_sets.iter().zip(scores) {
                m.insert(*set, e, s)?;
            }
        }
        failures.extend(out.failures);
        checkpoint_hashes.extend(out.hashes);
        logs.extend(out.logs);
    }
    Ok(SweepOutput {
        matrices,
        failures,
        checkpoint_hashes,
        logs,
    })
}
