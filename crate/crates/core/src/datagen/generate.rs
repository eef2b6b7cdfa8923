use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{Label, ModalityUniverse, MultimodalExample, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub tokens: usize,
    pub token_dim: usize,
    pub noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub pretrain: usize,
    pub train: usize,
    pub eval: usize,
    pub self_distill: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            pretrain: 8000,
            train: 1000,
            eval: 2000,
            self_distill: 800,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub latent_dim: usize,
    pub classes: usize,
    pub task: TaskKind,
    pub modalities: Vec<ModalitySpec>,
    pub splits: SplitSizes,
    pub nonlinear: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        let m = |name: &str, noise| ModalitySpec {
            name: name.into(),
            tokens: 8,
            token_dim: 16,
            noise,
        };
        Self {
            latent_dim: 8,
            classes: 5,
            task: TaskKind::SingleLabel,
            modalities: vec![m("m0", 0.1), m("m1", 0.3), m("m2", 0.5)],
            splits: SplitSizes::default(),
            nonlinear: true,
        }
    }
}

impl GenConfig {
    pub fn universe(&self) -> Result<ModalityUniverse> {
        ModalityUniverse::new(self.modalities.iter().map(|m| m.name.clone()))
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            classes: self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("`{field}` must be positive")))
            } else {
                Ok(())
            }
        };
        positive("latent_dim", self.latent_dim)?;
        positive("classes", self.classes)?;
        positive("splits.pretrain", self.splits.pretrain)?;
        positive("splits.train", self.splits.train)?;
        positive("splits.eval", self.splits.eval)?;
        positive("splits.self_distill", self.splits.self_distill)?;
        if self.splits.self_distill > self.splits.pretrain {
            return Err(Error::Config(format!(
                "`splits.self_distill` ({}) exceeds `splits.pretrain` ({})",
                self.splits.self_distill, self.splits.pretrain
            )));
        }
        self.universe()?;
        for (i, m) in self.modalities.iter().enumerate() {
            positive(&format!("modalities[{i}].tokens"), m.tokens)?;
            positive(&format!("modalities[{i}].token_dim"), m.token_dim)?;
            if !(m.noise.is_finite() && m.noise >= 0.0) {
                return Err(Error::Config(format!(
                    "`modalities[{i}].noise` must be finite and >= 0, got {}",
                    m.noise
                )));
            }
        }
        Ok(())
    }
}

/// Pretraining pool `D`, downstream train/eval splits and the
/// self-distillation pool `D_SD`, which is a subset of `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub universe: ModalityUniverse,
    pub task: TaskSpec,
    pub config: Option<GenConfig>,
    pub seed: u64,
    pub pretrain: Vec<MultimodalExample>,
    pub train: Vec<MultimodalExample>,
    pub eval: Vec<MultimodalExample>,
    pub self_distill: Vec<MultimodalExample>,
    /// Positions in `pretrain` that make up `self_distill`.
    pub sd_indices: Vec<usize>,
}

impl DatasetBundle {
    /// Tokens per modality and token width, taken from the first pretraining example.
    pub fn token_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let x = self
            .pretrain
            .first()
            .ok_or(Error::EmptyDataset("pretrain"))?;
        (0..self.universe.len())
            .map(|m| {
                x.tokens(m)
                    .map(|t| (t.rows(), t.cols()))
                    .ok_or_else(|| Error::MissingModality(self.universe.name(m).into()))
            })
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        let full = self.universe.full();
        for (split, xs) in [("pretrain", &self.pretrain), ("self_distill", &self.self_distill)] {
            if let Some(x) = xs.iter().find(|x| x.modalities() != full) {
                return Err(Error::Invalid(format!(
                    "{split} example {} lacks modalities",
                    x.id
                )));
            }
        }
        for x in self.train.iter().chain(&self.eval) {
            match &x.label {
                Some(l) => l.check(&self.task)?,
                None => return Err(Error::Label(format!("example {} unlabeled", x.id))),
            }
        }
        Ok(())
    }
}

struct World {
    /// C x k label directions.
    label_w: Vec<Vec<f64>>,
    /// Per modality, per token: token_dim x k projection.
    proj: Vec<Vec<Vec<Vec<f64>>>>,
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Label directions. For single-label tasks with `C <= k` the rows are the
/// centred vertices of a randomly rotated regular simplex, so each class has
/// probability exactly `1/C` under an isotropic latent.
fn label_directions(cfg: &GenConfig, rng: &mut Rng) -> Vec<Vec<f64>> {
    let (k, c) = (cfg.latent_dim, cfg.classes);
    let mut rows: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..k).map(|_| normal(rng)).collect())
        .collect();
    if cfg.task == TaskKind::SingleLabel && c <= k {
        for i in 0..c {
            for j in 0..i {
                let p = dot(&rows[i], &rows[j]);
                let (head, tail) = rows.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= p * b;
                }
            }
            let n = dot(&rows[i], &rows[i]).sqrt();
            rows[i].iter_mut().for_each(|v| *v /= n);
        }
        let mean: Vec<f64> = (0..k)
            .map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / c as f64)
            .collect();
        for r in &mut rows {
            r.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
    }
    rows
}

impl World {
    fn new(cfg: &GenConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &["datagen", "world"]);
        let label_w = label_directions(cfg, &mut rng);
        let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
        let proj = cfg
            .modalities
            .iter()
            .map(|m| {
                (0..m.tokens)
                    .map(|_| {
                        (0..m.token_dim)
                            .map(|_| {
                                (0..cfg.latent_dim)
                                    .map(|_| normal(&mut rng) * scale)
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { label_w, proj }
    }

    fn label(&self, cfg: &GenConfig, z: &[f64]) -> Label {
        let scores: Vec<f64> = self.label_w.iter().map(|w| dot(w, z)).collect();
        match cfg.task {
            TaskKind::SingleLabel => {
                let mut best = 0;
                for (i, &s) in scores.iter().enumerate() {
                    if s > scores[best] {
                        best = i;
                    }
                }
                Label::Class(best)
            }
            TaskKind::MultiLabel => Label::Multi(scores.iter().map(|&s| s > 0.0).collect()),
        }
    }

    fn example(&self, cfg: &GenConfig, id: u64, labeled: bool, rng: &mut Rng) -> MultimodalExample {
        let z: Vec<f64> = (0..cfg.latent_dim).map(|_| normal(rng)).collect();
        let tokens = cfg
            .modalities
            .iter()
            .zip(&self.proj)
            .map(|(spec, proj)| {
                let mut data = Vec::with_capacity(spec.tokens * spec.token_dim);
                for b_t in proj {
                    for row in b_t {
                        let s = dot(row, &z);
                        let clean = if cfg.nonlinear { s.tanh() } else { s };
                        data.push((clean + spec.noise * normal(rng)) as f32);
                    }
                }
                Some(Tensor::matrix(spec.tokens, spec.token_dim, data).expect("shape"))
            })
            .collect();
        let label = labeled.then(|| self.label(cfg, &z));
        MultimodalExample::new(id, tokens, label)
    }

    fn split(&self, cfg: &GenConfig, seed: u64, name: &str, n: usize, first_id: u64, labeled: bool) -> Vec<MultimodalExample> {
        let mut rng = rng::stream(seed, &["datagen", name]);
        (0..n)
            .map(|i| self.example(cfg, first_id + i as u64, labeled, &mut rng))
            .collect()
    }
}

/// Samples a synthetic bundle. Pure function of `(cfg, seed)`.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<DatasetBundle> {
    cfg.validate()?;
    let world = World::new(cfg, seed);
    let s = cfg.splits;
    let pretrain = world.split(cfg, seed, "pretrain", s.pretrain, 0, false);
    let train = world.split(cfg, seed, "train", s.train, s.pretrain as u64, true);
    let eval = world.split(cfg, seed, "eval", s.eval, (s.pretrain + s.train) as u64, true);
    let mut sd_rng = rng::stream(seed, &["datagen", "self_distill"]);
    let sd_indices = sample_indices(&mut sd_rng, s.pretrain, s.self_distill);
    let self_distill = sd_indices.iter().map(|&i| pretrain[i].clone()).collect();
    Ok(DatasetBundle {
        universe: cfg.universe()?,
        task: cfg.task_spec(),
        config: Some(cfg.clone()),
        seed,
        pretrain,
        train,
        eval,
        self_distill,
        sd_indices,
    })
}

/// `amount` distinct indices below `n`, sorted ascending.
pub(crate) fn sample_indices(rng: &mut Rng, n: usize, amount: usize) -> Vec<usize> {
    let mut v = index::sample(rng, n, amount).into_vec();
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            splits: SplitSizes {
                pretrain: 60,
                train: 20,
                eval: 30,
                self_distill: 10,
            },
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small(), 3).unwrap();
        let b = generate(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(), 4).unwrap();
        assert_ne!(a.pretrain, c.pretrain);
    }

    #[test]
    fn split_structure() {
        let b = generate(&small(), 1).unwrap();
        b.check().unwrap();
        assert_eq!(b.self_distill.len(), 10);
        for (&i, x) in b.sd_indices.iter().zip(&b.self_distill) {
            assert_eq!(&b.pretrain[i], x);
        }
        assert!(b.pretrain.iter().all(|x| x.label.is_none()));
        let shapes = b.token_shapes().unwrap();
        assert_eq!(shapes, vec![(8, 16); 3]);
        let mut ids: Vec<u64> = b.train.iter().chain(&b.eval).map(|x| x.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 50);
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = small();
        cfg.splits.self_distill = 100;
        let e = generate(&cfg, 0).unwrap_err().to_string();
        assert!(e.contains("splits.self_distill"), "{e}");
        let mut cfg = small();
        cfg.modalities[1].noise = -1.0;
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("modalities[1].noise"), "{e}");
        let mut cfg = small();
        cfg.splits.train = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("splits.train"));
    }

    #[test]
    fn simplex_directions_are_centred_and_equal_norm() {
        let cfg = GenConfig::default();
        let mut r = rng::stream(0, &["t"]);
        let w = label_directions(&cfg, &mut r);
        let norms: Vec<f64> = w.iter().map(|r| dot(r, r)).collect();
        for n in &norms {
            assert!((n - norms[0]).abs() < 1e-12);
        }
        for d in 0..cfg.latent_dim {
            assert!(w.iter().map(|r| r[d]).sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn noise_changes_values_not_shapes() {
        let mut cfg = small();
        let a = generate(&cfg, 9).unwrap();
        cfg.modalities[0].noise = 2.0;
        let b = generate(&cfg, 9).unwrap();
        assert_eq!(a.token_shapes().unwrap(), b.token_shapes().unwrap());
        assert_ne!(a.pretrain[0].tokens(0), b.pretrain[0].tokens(0));
        assert_eq!(a.pretrain[0].tokens(1), b.pretrain[0].tokens(1));
    }
}
