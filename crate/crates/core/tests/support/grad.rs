//! Analytic gradients against central finite differences, 64-bit. Every
//! suite returns the worst relative error per check so callers decide how
//! to report it.

use std::collections::{BTreeMap, BTreeSet};

use modrobe::datagen::{generate, DatasetBundle, GenConfig, ModalitySet, ModalitySpec, SplitSizes, TaskKind};
use modrobe::datagen::{Label, TaskSpec};
use modrobe::model::{self, Batch, Binder, CheckpointMeta, DownstreamMethod, ModelCheckpoint, ModelDims, PretrainMethod};
use modrobe::numerics::{Graph, Tensor, Var};
use modrobe::objectives::{
    contrastive_total, distill_loss, infonce_pair, mae_loss, masd_loss, task_loss, ContrastiveConfig, MaeTerm,
    MasdConfig,
};
use modrobe::rng::{self, Rng};
use modrobe::Result;
use rand::Rng as _;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-5;
pub const INSTANCES: u64 = 20;
/// Denominator floor: entries whose true gradient is ~0 are compared absolutely.
const FLOOR: f64 = 1e-4;

/// Frozen statistics enter the graph as constants and carry no gradient.
const FROZEN: [&str; 2] = ["bn_mean", "bn_var"];

type Params = BTreeMap<String, Tensor<f64>>;

fn normal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Normal entries kept at least `gap` away from zero (for relu and log).
fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() > gap {
            break v;
        }
    })
}

fn inputs(ts: Vec<Tensor<f64>>) -> Params {
    ts.into_iter().enumerate().map(|(i, t)| (format!("x{i}"), t)).collect()
}

fn eval(params: &Params, trainable: &BTreeSet<String>, f: &impl Fn(&mut Graph<f64>, &mut Binder<f64>) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let mut b = Binder::new(params, trainable);
    let l = f(&mut g, &mut b).unwrap();
    g.value(l).item()
}

/// Max relative error between backprop and central differences over every
/// entry of every parameter.
fn max_rel_err(params: &Params, f: impl Fn(&mut Graph<f64>, &mut Binder<f64>) -> Result<Var>) -> f64 {
    let all: BTreeSet<String> = params.keys().cloned().collect();
    let grads = {
        let mut g = Graph::new();
        let mut b = Binder::new(params, &all);
        let l = f(&mut g, &mut b).unwrap();
        g.backward(l).unwrap()
    };
    let none = BTreeSet::new();
    let mut worst = 0.0f64;
    let mut p = params.clone();
    for (name, t) in params {
        if FROZEN.iter().any(|f| name.ends_with(f)) {
            continue;
        }
        let analytic = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros_like(t));
        assert_eq!(analytic.shape(), t.shape(), "{name}");
        for i in 0..t.numel() {
            let x = t.data()[i];
            p.get_mut(name).unwrap().data_mut()[i] = x + STEP;
            let up = eval(&p, &none, &f);
            p.get_mut(name).unwrap().data_mut()[i] = x - STEP;
            let down = eval(&p, &none, &f);
            p.get_mut(name).unwrap().data_mut()[i] = x;
            let num = (up - down) / (2.0 * STEP);
            let a = analytic.data()[i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Reduces any output to a scalar through fixed random weights.
fn weigh(g: &mut Graph<f64>, out: Var, rng_seed: u64) -> Result<Var> {
    let (r, c) = (g.value(out).rows(), g.value(out).cols());
    let mut rng = rng::stream(rng_seed, &["weights"]);
    let w = g.constant(normal(&mut rng, r, c));
    let m = g.mul(out, w)?;
    g.sum(m)
}

fn check_kernel(
    name: &str,
    make: impl Fn(&mut Rng) -> Vec<Tensor<f64>>,
    apply: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> (String, f64) {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = rng::stream(seed, &["gradcheck", name]);
        let params = inputs(make(&mut rng));
        let n = params.len();
        let err = max_rel_err(&params, |g, b| {
            let xs: Vec<Var> = (0..n).map(|i| b.get(g, &format!("x{i}"))).collect::<Result<_>>()?;
            let out = apply(g, &xs)?;
            if g.value(out).is_scalar() {
                Ok(out)
            } else {
                weigh(g, out, seed)
            }
        });
        worst = worst.max(err);
    }
    (name.to_string(), worst)
}

pub fn elementwise_kernels() -> Vec<(String, f64)> {
    vec![
        check_kernel("add", |r| vec![normal(r, 3, 4), normal(r, 3, 4)], |g, x| g.add(x[0], x[1])),
        check_kernel("sub", |r| vec![normal(r, 3, 4), normal(r, 3, 4)], |g, x| g.sub(x[0], x[1])),
        check_kernel("mul", |r| vec![normal(r, 3, 4), normal(r, 3, 4)], |g, x| g.mul(x[0], x[1])),
        check_kernel("add_row", |r| vec![normal(r, 3, 4), normal(r, 1, 4)], |g, x| g.add_row(x[0], x[1])),
        check_kernel("scale", |r| vec![normal(r, 2, 5)], |g, x| g.scale(x[0], -1.7)),
        check_kernel("exp", |r| vec![normal(r, 3, 3)], |g, x| g.exp(x[0])),
        check_kernel(
            "log",
            |r| vec![normal(r, 3, 3).map(|v| v.abs() + 0.2)],
            |g, x| g.log(x[0]),
        ),
        check_kernel("tanh", |r| vec![normal(r, 3, 3)], |g, x| g.tanh(x[0])),
        check_kernel("relu", |r| vec![away_from_zero(r, 4, 4, 1e-3)], |g, x| g.relu(x[0])),
        check_kernel("sigmoid", |r| vec![normal(r, 3, 3)], |g, x| g.sigmoid(x[0])),
        check_kernel("softplus", |r| vec![normal(r, 3, 3).map(|v| 4.0 * v)], |g, x| g.softplus(x[0])),
    ]
}

pub fn structural_kernels() -> Vec<(String, f64)> {
    vec![
        check_kernel("matmul", |r| vec![normal(r, 3, 4), normal(r, 4, 2)], |g, x| g.matmul(x[0], x[1])),
        check_kernel("transpose", |r| vec![normal(r, 3, 4)], |g, x| g.transpose(x[0])),
        check_kernel("sum", |r| vec![normal(r, 3, 4)], |g, x| g.sum(x[0])),
        check_kernel("mean", |r| vec![normal(r, 3, 4)], |g, x| g.mean(x[0])),
        check_kernel("mean_row_groups", |r| vec![normal(r, 6, 3)], |g, x| g.mean_row_groups(x[0], 3)),
        check_kernel("concat_rows", |r| vec![normal(r, 2, 3), normal(r, 1, 3)], |g, x| g.concat(&[x[0], x[1]], 0)),
        check_kernel("concat_cols", |r| vec![normal(r, 2, 3), normal(r, 2, 1)], |g, x| g.concat(&[x[0], x[1]], 1)),
        check_kernel("gather_rows", |r| vec![normal(r, 4, 3)], |g, x| g.gather_rows(x[0], vec![2, 0, 2, 3])),
        check_kernel("slice_rows", |r| vec![normal(r, 5, 2)], |g, x| g.slice_rows(x[0], 1, 4)),
    ]
}

pub fn row_kernels() -> Vec<(String, f64)> {
    vec![
        check_kernel("softmax_rows", |r| vec![normal(r, 3, 5)], |g, x| g.softmax_rows(x[0])),
        check_kernel("log_softmax_rows", |r| vec![normal(r, 3, 5)], |g, x| g.log_softmax_rows(x[0])),
        check_kernel("l2_normalize_rows", |r| vec![normal(r, 3, 4)], |g, x| g.l2_normalize_rows(x[0])),
        check_kernel("standardize_rows", |r| vec![normal(r, 3, 5)], |g, x| g.standardize_rows(x[0])),
    ]
}

/// `stop_grad` passes values through and contributes no gradient: the
/// gradient of `sum(stop(w) * w)` is exactly `w`, and of `sum(stop(w))` is
/// exactly zero.
pub fn stop_grad_is_exact() -> bool {
    let mut g = Graph::new();
    let w = Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap();
    let v = g.param("w", &w);
    let s = g.stop_grad(v).unwrap();
    let m = g.mul(s, v).unwrap();
    let l = g.sum(m).unwrap();
    let grads = g.backward(l).unwrap();
    let through = grads.get("w").unwrap().bitwise_eq(&w);
    let only: Tensor<f64> = {
        let mut g = Graph::new();
        let v = g.param("w", &w);
        let s = g.stop_grad(v).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap().get("w").cloned().unwrap_or_else(|| Tensor::zeros_like(&w))
    };
    through && only.data().iter().all(|v| v.to_bits() == 0)
}

pub fn two_layer_mlp() -> (String, f64) {
    check_kernel(
        "mlp",
        |r| vec![normal(r, 5, 4), normal(r, 4, 6), normal(r, 1, 6), normal(r, 6, 3), normal(r, 1, 3)],
        |g, x| {
            let h = g.matmul(x[0], x[1])?;
            let h = g.add_row(h, x[2])?;
            let h = g.tanh(h)?;
            let o = g.matmul(h, x[3])?;
            let o = g.add_row(o, x[4])?;
            let lp = g.log_softmax_rows(o)?;
            g.mean(lp)
        },
    )
}

pub fn infonce_losses() -> Vec<(String, f64)> {
    let cfg = ContrastiveConfig::default();
    vec![
        check_kernel("infonce_pair", |r| vec![normal(r, 4, 3), normal(r, 4, 3)], |g, x| infonce_pair(g, x[0], x[1], &cfg)),
        check_kernel(
            "infonce_pair_raw",
            |r| vec![normal(r, 3, 3).map(|v| 0.2 * v), normal(r, 3, 3).map(|v| 0.2 * v)],
            |g, x| {
                let raw = ContrastiveConfig {
                    temperature: 0.5,
                    normalize: false,
                };
                infonce_pair(g, x[0], x[1], &raw)
            },
        ),
        check_kernel(
            "contrastive_total",
            |r| vec![normal(r, 4, 3), normal(r, 4, 3), normal(r, 4, 3)],
            |g, x| contrastive_total(g, x, &cfg),
        ),
    ]
}

pub fn mae_loss_gradient() -> (String, f64) {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = rng::stream(seed, &["gradcheck", "mae"]);
        let (b, t, d) = (3, 4, 2);
        let targets = [normal(&mut rng, b, t * d), normal(&mut rng, b, t * d)];
        let masked: Vec<Vec<Vec<usize>>> = (0..2)
            .map(|_| (0..b).map(|_| rand::seq::index::sample(&mut rng, t, 2).into_vec()).collect())
            .collect();
        let params = inputs(vec![normal(&mut rng, b, t * d), normal(&mut rng, b, t * d)]);
        let err = max_rel_err(&params, |g, bd| {
            let r0 = bd.get(g, "x0")?;
            let r1 = bd.get(g, "x1")?;
            let terms = [
                MaeTerm {
                    recon: r0,
                    target: &targets[0],
                    masked: &masked[0],
                    token_dim: d,
                },
                MaeTerm {
                    recon: r1,
                    target: &targets[1],
                    masked: &masked[1],
                    token_dim: d,
                },
            ];
            mae_loss(g, &terms)
        });
        worst = worst.max(err);
    }
    ("mae_loss".into(), worst)
}

fn random_labels(rng: &mut Rng, n: usize, task: &TaskSpec) -> Vec<Option<Label>> {
    (0..n)
        .map(|_| {
            Some(match task.kind {
                TaskKind::SingleLabel => Label::Class(rng.random_range(0..task.classes)),
                TaskKind::MultiLabel => Label::Multi((0..task.classes).map(|_| rng.random_bool(0.4)).collect()),
            })
        })
        .collect()
}

pub fn task_and_distill_losses() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for kind in [TaskKind::SingleLabel, TaskKind::MultiLabel] {
        let task = TaskSpec { kind, classes: 4 };
        let mut task_worst = 0.0f64;
        let mut distill_worst = [0.0f64; 2];
        for seed in 0..INSTANCES {
            let mut rng = rng::stream(seed, &["gradcheck", "task"]);
            let labels = random_labels(&mut rng, 5, &task);
            let params = inputs(vec![normal(&mut rng, 5, 4).map(|v| 2.0 * v)]);
            let err = max_rel_err(&params, |g, b| {
                let x = b.get(g, "x0")?;
                task_loss(g, x, &labels, &task)
            });
            task_worst = task_worst.max(err);

            let params = inputs(vec![normal(&mut rng, 5, 4), normal(&mut rng, 5, 4)]);
            for (i, temp) in [1.0, 2.5].into_iter().enumerate() {
                let err = max_rel_err(&params, |g, b| {
                    let s = b.get(g, "x0")?;
                    let t = b.get(g, "x1")?;
                    distill_loss(g, s, t, kind, temp)
                });
                distill_worst[i] = distill_worst[i].max(err);
            }
        }
        out.push((format!("task_loss {kind:?}"), task_worst));
        out.push((format!("distill_loss {kind:?} T=1"), distill_worst[0]));
        out.push((format!("distill_loss {kind:?} T=2.5"), distill_worst[1]));
    }
    out
}

fn tiny_bundle(kind: TaskKind, seed: u64) -> DatasetBundle {
    let m = |name: &str| ModalitySpec {
        name: name.into(),
        tokens: 2,
        token_dim: 3,
        noise: 0.2,
    };
    let cfg = GenConfig {
        latent_dim: 3,
        classes: 3,
        task: kind,
        modalities: vec![m("m0"), m("m1"), m("m2")],
        splits: SplitSizes {
            pretrain: 8,
            train: 4,
            eval: 2,
            self_distill: 4,
        },
        ..GenConfig::default()
    };
    generate(&cfg, seed).unwrap()
}

fn tiny_checkpoint(bundle: &DatasetBundle, pretrain: PretrainMethod, seed: u64) -> ModelCheckpoint<f64> {
    let meta = CheckpointMeta {
        universe: bundle.universe.clone(),
        task: bundle.task,
        dims: ModelDims::for_bundle(bundle, 4, 3).unwrap(),
        pretrain,
        downstream: DownstreamMethod::None,
        train_set: None,
        seeds: BTreeMap::new(),
        parents: Vec::new(),
        alpha: None,
    };
    let mut ck = ModelCheckpoint::<f64>::init(meta, seed);
    // Nonzero biases and non-trivial BN statistics exercise every path.
    let mut rng = rng::stream(seed, &["gradcheck", "bias"]);
    for (name, t) in ck.params.iter_mut() {
        if name.ends_with(".b") || name.ends_with("bn_mean") {
            *t = normal(&mut rng, 1, t.cols()).map(|v| 0.3 * v);
        } else if name.ends_with("bn_var") {
            *t = normal(&mut rng, 1, t.cols()).map(|v| 0.5 + v.abs());
        }
    }
    ck
}

/// Encoder weights near a relu kink would make finite differences unreliable.
fn relu_margin_ok(ck: &ModelCheckpoint<f64>, batches: &[(&Batch<f64>, ModalitySet)]) -> bool {
    let none = BTreeSet::new();
    for &(batch, set) in batches {
        for m in set.indices() {
            let mut g = Graph::new();
            let mut b = Binder::new(&ck.params, &none);
            let (tok, group) = batch.tokens(m).unwrap();
            let x = g.constant(tok.clone());
            let u = &ck.meta.universe;
            let we = b.get(&mut g, &model::enc_param(u, m, "embed.w")).unwrap();
            let e = g.matmul(x, we).unwrap();
            let p = g.mean_row_groups(e, group).unwrap();
            let w1 = b.get(&mut g, &model::enc_param(u, m, "fc1.w")).unwrap();
            let b1 = b.get(&mut g, &model::enc_param(u, m, "fc1.b")).unwrap();
            let h = g.matmul(p, w1).unwrap();
            let h = g.add_row(h, b1).unwrap();
            if g.value(h).data().iter().any(|v| v.abs() < 1e-3) {
                return false;
            }
        }
    }
    true
}

pub struct MasdCheck {
    pub name: String,
    /// Worst finite-difference error with the teacher held constant.
    pub worst: f64,
    /// Backprop through `masd_loss` equals backprop with a constant teacher, bit for bit.
    pub bitwise: bool,
    pub instances: u64,
}

/// `masd_loss` for both task kinds and both pretraining methods.
pub fn masd_loss_gradient_with_frozen_teacher() -> Vec<MasdCheck> {
    let cfg = MasdConfig {
        lambda: 0.7,
        temperature: 1.5,
    };
    let mut out = Vec::new();
    for kind in [TaskKind::SingleLabel, TaskKind::MultiLabel] {
        for pretrain in [PretrainMethod::Contrastive, PretrainMethod::Mae] {
            let mut check = MasdCheck {
                name: format!("masd_loss {kind:?} {pretrain:?}"),
                worst: 0.0,
                bitwise: true,
                instances: 0,
            };
            let mut seed = 0;
            while check.instances < INSTANCES {
                seed += 1;
                let bundle = tiny_bundle(kind, seed);
                let ck = tiny_checkpoint(&bundle, pretrain, seed);
                let set = ModalitySet::from_indices([(seed % 3) as usize]);
                let full = bundle.universe.full();
                let t_refs: Vec<_> = bundle.train.iter().collect();
                let sd_refs: Vec<_> = bundle.self_distill.iter().collect();
                let bt = Batch::<f64>::new(&t_refs, set, 3).unwrap();
                let bsd = Batch::<f64>::new(&sd_refs, full, 3).unwrap();
                if !relu_margin_ok(&ck, &[(&bt, set), (&bsd, full)]) {
                    continue;
                }
                let meta = ck.meta.clone();
                let teacher0 = {
                    let none = BTreeSet::new();
                    let mut g = Graph::new();
                    let mut b = Binder::new(&ck.params, &none);
                    let l = model::logits(&mut g, &mut b, &meta, &bsd, set).unwrap();
                    g.value(l).clone()
                };
                // Analytic gradient of the real loss; numeric gradient of the
                // same expression with the teacher held at its current value.
                let all: BTreeSet<String> = ck.params.keys().cloned().collect();
                let analytic = {
                    let mut g = Graph::new();
                    let mut b = Binder::new(&ck.params, &all);
                    let l = masd_loss(&mut g, &mut b, &meta, &bt, &bsd, set, &cfg).unwrap();
                    g.backward(l).unwrap()
                };
                let frozen = |g: &mut Graph<f64>, b: &mut Binder<f64>| -> Result<Var> {
                    let tl = model::logits(g, b, &meta, &bt, set)?;
                    let task = task_loss(g, tl, &bt.labels, &meta.task)?;
                    let teacher = g.constant(teacher0.clone());
                    let student = model::logits(g, b, &meta, &bsd, full.difference(set))?;
                    let d = distill_loss(g, student, teacher, kind, cfg.temperature)?;
                    let d = g.scale(d, cfg.lambda)?;
                    g.add(task, d)
                };
                let frozen_grads = {
                    let mut g = Graph::new();
                    let mut b = Binder::new(&ck.params, &all);
                    let l = frozen(&mut g, &mut b).unwrap();
                    g.backward(l).unwrap()
                };
                check.bitwise &= analytic.iter().count() == frozen_grads.iter().count()
                    && analytic
                        .iter()
                        .all(|(name, t)| frozen_grads.get(name).is_some_and(|f| t.bitwise_eq(f)));
                check.worst = check.worst.max(max_rel_err(&ck.params, frozen));
                check.instances += 1;
            }
            out.push(check);
        }
    }
    out
}
