//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the test harness so the lines always print. Exits nonzero
//! when a criterion's outcome differs from the expected outcome: every
//! criterion passes except those in `KNOWN_RED`, which must still fail.

mod support;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use modrobe::datagen::{generate, DatasetBundle, GenConfig};
use modrobe::metrics::{aggregate, best_eval_sets, mean_average_precision, performance, robustness, ScoreKind, ScoreMatrix, Stratum};
use modrobe::model::{self, interpolate, DownstreamMethod, ModelCheckpoint};
use modrobe::rng;
use modrobe::trainer::{
    checkpoint_path, finetune, linear_probe, masd_train, pretrain, run_sweep, SweepOptions, SweepOutput, SweepPlan,
    TrainConfig, TrainLog,
};
use rand::Rng as _;
use support::{grad, oracle};

/// Criteria that do not hold and are expected to fail; the README explains why.
const KNOWN_RED: [u32; 2] = [2, 8];

const FIXTURE_TOL: f64 = 0.1 + 1e-9;

struct Outcome {
    pass: bool,
    details: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self {
            pass: true,
            details: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, detail: impl Into<String>) {
        self.pass &= ok;
        let mark = if ok { "ok" } else { "MISMATCH" };
        self.details.push(format!("{mark}: {}", detail.into()));
    }

    fn note(&mut self, detail: impl Into<String>) {
        self.details.push(detail.into());
    }
}

fn fixture(rel: &str) -> ScoreMatrix {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel);
    ScoreMatrix::read_csv(&p, None, ScoreKind::Map).unwrap()
}

/// `[P_best, R_best, P, R, MissP, MissR, AddP, AddR, TrP, TrR]` in percent.
fn table_row(m: &ScoreMatrix) -> [f64; 10] {
    let mut out = [f64::NAN; 10];
    for (i, s) in Stratum::SUMMARY.iter().enumerate() {
        let Some(a) = aggregate(m, *s) else { continue };
        if i == 0 {
            out[..4].copy_from_slice(&[a.p_best, a.r_best, a.p, a.r]);
        } else {
            out[2 + 2 * i] = a.p;
            out[3 + 2 * i] = a.r;
        }
    }
    out.map(|v| 100.0 * v)
}

fn fmt_row(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" ")
}

fn check_row(o: &mut Outcome, rel: &str, published: &[f64]) {
    let got = table_row(&fixture(rel));
    let ok = got.iter().zip(published).all(|(g, p)| (g - p).abs() <= FIXTURE_TOL);
    o.check(ok, format!("{rel}: got [{}], published [{}]", fmt_row(&got[..published.len()]), fmt_row(published)));
}

fn criterion_1() -> Outcome {
    let mut o = Outcome::new();
    let t = Instant::now();
    let rows: [(&str, [f64; 10]); 9] = [
        ("audioset/contrastive_probe.csv", [33.7, 22.1, 28.0, 15.0, 29.6, 24.0, 34.2, 33.5, 16.0, 13.9]),
        ("audioset/contrastive_finetune.csv", [36.5, 20.8, 29.9, 13.8, 31.2, 23.6, 38.1, 37.4, 15.1, 13.0]),
        ("audioset/contrastive_wiseft.csv", [37.3, 22.3, 29.5, 13.5, 31.4, 24.5, 37.6, 36.9, 14.0, 12.0]),
        ("audioset/contrastive_masd.csv", [37.4, 24.1, 33.5, 21.9, 30.5, 22.4, 40.4, 39.7, 26.1, 24.1]),
        ("audioset/contrastive_masd_wiseft.csv", [37.3, 24.8, 33.9, 22.8, 31.3, 24.1, 40.2, 39.5, 26.3, 24.3]),
        ("audioset/contrastive_finetune_2m.csv", [37.0, 21.8, 32.7, 18.2, 30.5, 23.5, 41.3, 40.3, 20.3, 18.2]),
        ("audioset/mae_probe.csv", [23.4, 5.5, 14.0, 1.8, 17.2, 7.7, 17.8, 17.0, 1.5, 1.2]),
        ("audioset/mae_finetune.csv", [28.9, 3.8, 20.0, 1.3, 21.4, 10.0, 30.8, 30.3, 1.1, 0.9]),
        ("audioset/mae_masd.csv", [30.6, 15.1, 26.6, 9.5, 21.6, 10.3, 35.4, 34.4, 18.5, 15.1]),
    ];
    for (rel, published) in rows {
        check_row(&mut o, rel, &published);
    }
    let secs = t.elapsed().as_secs_f64();
    o.check(secs < 1.0, format!("runtime {secs:.3} s (< 1 s)"));
    o
}

fn criterion_2() -> Outcome {
    let mut o = Outcome::new();
    let t = Instant::now();
    check_row(
        &mut o,
        "kinetics/contrastive_probe.csv",
        &[42.2, 21.7, 34.7, 17.0, 34.4, 18.5, 36.8, 36.8, 16.2, 16.2],
    );
    check_row(
        &mut o,
        "kinetics/contrastive_finetune.csv",
        &[45.5, 11.1, 36.2, 6.1, 29.1, 11.1, 47.8, 47.8, 3.6, 3.6],
    );
    for (file, published) in [
        ("contrastive_probe.csv", [70.5, 68.4, 66.0, 48.8]),
        ("contrastive_finetune.csv", [78.7, 66.7, 75.4, 58.7]),
        ("contrastive_masd.csv", [84.3, 80.8, 82.4, 76.0]),
    ] {
        check_row(&mut o, &format!("imagenet_captions/{file}"), &published);
    }
    let mut identity = true;
    let mut cells = 0;
    for rel in [
        "kinetics/contrastive_probe.csv",
        "kinetics/contrastive_finetune.csv",
        "kinetics/contrastive_masd.csv",
        "imagenet_captions/contrastive_probe.csv",
        "imagenet_captions/contrastive_finetune.csv",
        "imagenet_captions/contrastive_masd.csv",
    ] {
        let m = fixture(rel);
        for s in [Stratum::Added, Stratum::Transfer] {
            for t in m.train_sets() {
                if let (Some(p), Some(r)) = (performance(&m, t, s), robustness(&m, t, s)) {
                    identity &= p.to_bits() == r.to_bits();
                    cells += 1;
                }
            }
            let a = aggregate(&m, s).unwrap();
            identity &= a.p.to_bits() == a.r.to_bits() && a.p_best.to_bits() == a.r_best.to_bits();
        }
    }
    o.check(identity, format!("P = R bit for bit on added / transfer ({cells} training-set values, 6 matrices)"));
    let secs = t.elapsed().as_secs_f64();
    o.check(secs < 1.0, format!("runtime {secs:.3} s (< 1 s)"));
    o
}

/// Best evaluation set of each training set as `AVT`-style initials.
fn best_row(rel: &str, train: &[&str]) -> Vec<String> {
    let m = fixture(rel);
    let best = best_eval_sets(&m);
    train
        .iter()
        .map(|t| {
            let (e, _) = best[&m.universe.parse(t).unwrap()];
            let mut letters: Vec<char> = m
                .universe
                .sorted_names(e)
                .iter()
                .map(|n| n.chars().next().unwrap().to_ascii_uppercase())
                .collect();
            letters.sort_by_key(|c| "AVT".find(*c));
            letters.into_iter().collect()
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut o = Outcome::new();
    let six = ["video", "audio", "text", "audio+video", "audio+text", "text+video"];
    let seven: Vec<&str> = six.iter().copied().chain(["audio+text+video"]).collect();
    let masd = best_row("audioset/contrastive_masd.csv", &seven);
    o.check(masd.iter().all(|s| s == "AVT"), format!("masd: {masd:?}"));
    let ft = best_row("audioset/contrastive_finetune.csv", &six);
    o.check(ft == ["AVT", "A", "AVT", "AVT", "AT", "AVT"], format!("finetune: {ft:?}"));
    o
}

fn criterion_4() -> Outcome {
    let mut o = Outcome::new();
    let t = Instant::now();
    let mut checks = grad::elementwise_kernels();
    checks.extend(grad::structural_kernels());
    checks.extend(grad::row_kernels());
    checks.push(grad::two_layer_mlp());
    checks.extend(grad::infonce_losses());
    checks.push(grad::mae_loss_gradient());
    checks.extend(grad::task_and_distill_losses());
    for c in grad::masd_loss_gradient_with_frozen_teacher() {
        checks.push((c.name, c.worst));
    }
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    for (name, err) in &checks {
        if *err >= grad::TOL {
            o.check(false, format!("{name}: {err:.2e}"));
        }
    }
    o.check(
        worst < grad::TOL,
        format!(
            "{} checks x {} instances, worst relative error {worst:.2e} (< {:.0e})",
            checks.len(),
            grad::INSTANCES,
            grad::TOL
        ),
    );
    let secs = t.elapsed().as_secs_f64();
    o.check(secs < 60.0, format!("runtime {secs:.1} s (< 60 s)"));
    o
}

fn same_params<T: modrobe::numerics::Real>(a: &ModelCheckpoint<T>, b: &ModelCheckpoint<T>) -> bool {
    a.params.len() == b.params.len()
        && a.params
            .iter()
            .all(|(k, t)| b.params.get(k).is_some_and(|u| t.bitwise_eq(u)))
}

fn same_log(a: &TrainLog, b: &TrainLog) -> bool {
    a.losses.len() == b.losses.len() && a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits())
}

struct Shared {
    bundle: DatasetBundle,
    cfg: TrainConfig,
    backbone: ModelCheckpoint<f32>,
    sweep: SweepOutput,
    store: tempfile::TempDir,
}

fn criterion_5(s: &Shared) -> Outcome {
    let mut o = Outcome::new();
    let cg = grad::masd_loss_gradient_with_frozen_teacher();
    let n: u64 = cg.iter().map(|c| c.instances).sum();
    o.check(
        cg.iter().all(|c| c.bitwise),
        format!("d masd_loss / d theta equals the frozen-teacher gradient bit for bit ({n} instances)"),
    );
    o.check(grad::stop_grad_is_exact(), "stop_grad: values pass, gradient exactly zero");

    let u = &s.bundle.universe;
    let zero = TrainConfig {
        masd: modrobe::objectives::MasdConfig {
            lambda: 0.0,
            ..s.cfg.masd
        },
        ..s.cfg.clone()
    };
    for (label, set, cfg) in [
        ("M_T = M", u.full(), &s.cfg),
        ("lambda = 0, M_T = {m0}", u.parse("m0").unwrap(), &zero),
        ("lambda = 0, M_T = {m1, m2}", u.parse("m1+m2").unwrap(), &zero),
    ] {
        let (probe, _) = linear_probe(&s.backbone, &s.bundle.train, set, cfg).unwrap();
        let (ft, lf) = finetune(&s.backbone, &probe, &s.bundle.train, set, cfg).unwrap();
        let (md, lm) = masd_train(&s.backbone, &probe, &s.bundle.train, set, &s.bundle.self_distill, cfg).unwrap();
        o.check(
            same_log(&lf, &lm) && same_params(&ft, &md),
            format!("{label}: masd and finetune share all {} losses and every parameter bit", lf.losses.len()),
        );
    }
    let name = u.format(u.full());
    let load = |m| model::load::<f32>(&checkpoint_path(s.store.path(), m, &name)).unwrap();
    o.check(
        same_params(&load(DownstreamMethod::Finetune), &load(DownstreamMethod::Masd)),
        "inside the sweep, masd and finetune checkpoints for M_T = M are identical",
    );
    o
}

fn criterion_6() -> Outcome {
    let mut o = Outcome::new();
    let mut rng = rng::stream(0, &["acceptance", "map"]);
    let mut worst = 0.0f64;
    let mut agree = true;
    let mut max_n = 0;
    let mut max_c = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=50);
        let c = rng.random_range(1..=10);
        max_n = max_n.max(n);
        max_c = max_c.max(c);
        // Coarse scores so ties occur.
        let coarse = rng.random_bool(0.5);
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..c)
                    .map(|_| if coarse { rng.random_range(0..6) as f64 / 5.0 } else { rng.random::<f64>() })
                    .collect()
            })
            .collect();
        let labels: Vec<Vec<bool>> = (0..n).map(|_| (0..c).map(|_| rng.random_bool(0.3)).collect()).collect();
        match (mean_average_precision(&scores, &labels), oracle::map(&scores, &labels)) {
            (Ok(a), Some(b)) => worst = worst.max((a - b).abs()),
            (Err(_), None) => {}
            _ => agree = false,
        }
    }
    o.check(
        agree && worst <= 1e-12,
        format!("200 instances (N <= {max_n}, C <= {max_c}), max |difference| {worst:.1e} (<= 1e-12)"),
    );
    o
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const ALL_METHODS: [DownstreamMethod; 4] = [
    DownstreamMethod::Probe,
    DownstreamMethod::Finetune,
    DownstreamMethod::Masd,
    DownstreamMethod::Wiseft,
];

fn sweep_into(bundle: &DatasetBundle, bb: &ModelCheckpoint<f32>, cfg: &TrainConfig, parallel: usize) -> (SweepOutput, tempfile::TempDir) {
    let store = tempfile::tempdir().unwrap();
    let plan = SweepPlan::full(&bundle.universe, &ALL_METHODS);
    let opts = SweepOptions {
        parallel,
        store: Some(store.path().to_path_buf()),
    };
    (run_sweep(&plan, bundle, bb, cfg, &opts).unwrap(), store)
}

fn criterion_7() -> (Outcome, Shared) {
    let mut o = Outcome::new();
    let t = Instant::now();
    let bundle = generate(&GenConfig::default(), 0).unwrap();
    let cfg = TrainConfig::default();
    let (backbone, _) = pretrain::<f32>(&bundle, &cfg).unwrap();
    let (one, store1) = sweep_into(&bundle, &backbone, &cfg, 1);
    let (four, store4) = sweep_into(&bundle, &backbone, &cfg, 4);
    let csv = |s: &SweepOutput| s.matrices.values().map(ScoreMatrix::to_csv).collect::<Vec<_>>();
    let rows: Vec<usize> = one.matrices.values().map(ScoreMatrix::len).collect();
    o.check(
        one.failures.is_empty() && rows == [49; 4],
        format!("default bundle, 4 methods, 7 training sets: cells per matrix {rows:?}"),
    );
    o.check(csv(&one) == csv(&four), "score-matrix CSVs identical for --parallel 1 and 4");
    let (f1, f4) = (files_under(store1.path()), files_under(store4.path()));
    o.check(
        f1.len() == 28 && f1 == f4,
        format!("{} checkpoint files, byte-identical across thread counts", f1.len()),
    );
    o.note(format!("two sweeps in {:.0} s", t.elapsed().as_secs_f64()));
    drop(store4);
    (
        o,
        Shared {
            bundle,
            cfg,
            backbone,
            sweep: one,
            store: store1,
        },
    )
}

fn agg(m: &ScoreMatrix, s: Stratum) -> f64 {
    aggregate(m, s).unwrap().p
}

fn criterion_8(shared: &Shared) -> Outcome {
    let mut o = Outcome::new();
    let t = Instant::now();
    let methods = [DownstreamMethod::Probe, DownstreamMethod::Finetune, DownstreamMethod::Masd];
    let mut per_seed: Vec<BTreeMap<DownstreamMethod, ScoreMatrix>> = vec![shared.sweep.matrices.clone()];
    for seed in 1..3u64 {
        let bundle = generate(&GenConfig::default(), seed).unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (bb, _) = pretrain::<f32>(&bundle, &cfg).unwrap();
        let plan = SweepPlan::full(&bundle.universe, &methods);
        per_seed.push(run_sweep(&plan, &bundle, &bb, &cfg, &SweepOptions::default()).unwrap().matrices);
    }
    let seeds = per_seed.len() as f64;
    let mean = |m: DownstreamMethod, f: &dyn Fn(&ScoreMatrix) -> f64| per_seed.iter().map(|s| f(&s[&m])).sum::<f64>() / seeds;
    let list = |m: DownstreamMethod, f: &dyn Fn(&ScoreMatrix) -> f64| {
        per_seed.iter().map(|s| format!("{:.1}", 100.0 * f(&s[&m]))).collect::<Vec<_>>().join("/")
    };
    use DownstreamMethod::{Finetune, Masd, Probe};

    let overall_p = |m: &ScoreMatrix| agg(m, Stratum::Overall);
    let (ft, pr) = (mean(Finetune, &overall_p), mean(Probe, &overall_p));
    o.check(
        ft >= pr,
        format!(
            "(a) overall P, mean of 3 seeds, needs finetune >= probe: finetune {:.2}, probe {:.2} (per seed {} vs {})",
            100.0 * ft,
            100.0 * pr,
            list(Finetune, &overall_p),
            list(Probe, &overall_p)
        ),
    );

    let transfer_r = |m: &ScoreMatrix| aggregate(m, Stratum::Transfer).unwrap().r;
    let (md, ft) = (mean(Masd, &transfer_r), mean(Finetune, &transfer_r));
    o.check(
        md > ft,
        format!(
            "(b) transfer R, mean of 3 seeds, needs masd > finetune: masd {:.2}, finetune {:.2} (per seed {} vs {})",
            100.0 * md,
            100.0 * ft,
            list(Masd, &transfer_r),
            list(Finetune, &transfer_r)
        ),
    );

    for m in methods {
        let rising = per_seed
            .iter()
            .filter(|s| {
                let v: Vec<f64> = (1..=3).map(|k| agg(&s[&m], Stratum::Matched(k))).collect();
                v.windows(2).all(|w| w[1] >= w[0])
            })
            .count();
        let trend = |k| move |x: &ScoreMatrix| agg(x, Stratum::Matched(k));
        o.check(
            2 * rising > per_seed.len(),
            format!(
                "(c) {}: matched-k P nondecreasing in k on {rising}/3 seeds (k=1: {}, k=2: {}, k=3: {})",
                m.name(),
                list(m, &trend(1)),
                list(m, &trend(2)),
                list(m, &trend(3))
            ),
        );
    }
    o.note(format!("two further seeds in {:.0} s", t.elapsed().as_secs_f64()));
    o
}

fn criterion_9(s: &Shared) -> Outcome {
    let mut o = Outcome::new();
    let dir = tempfile::tempdir().unwrap();
    let name = s.bundle.universe.format(s.bundle.universe.parse("m0").unwrap());
    let read = |m| model::load::<f32>(&checkpoint_path(s.store.path(), m, &name)).unwrap();
    let (masd, probe) = (read(DownstreamMethod::Masd), read(DownstreamMethod::Probe));

    let mut exact = true;
    for ck in [&s.backbone, &masd, &probe] {
        let p = dir.path().join("ck.mmrl");
        model::save(ck, &p).unwrap();
        let back = model::load::<f32>(&p).unwrap();
        exact &= back.meta == ck.meta && same_params(&back, ck);
        exact &= model::encode_checkpoint(&back).unwrap() == std::fs::read(&p).unwrap();
        let wide: ModelCheckpoint<f64> = ck.cast();
        model::save(&wide, &p).unwrap();
        let back = model::load::<f64>(&p).unwrap();
        exact &= back.meta == wide.meta && same_params(&back, &wide);
    }
    o.check(exact, "save -> load bit-exact for backbone, probe and masd checkpoints (f32 and f64)");

    let one = interpolate(&masd, &probe, 1.0).unwrap();
    let zero = interpolate(&masd, &probe, 0.0).unwrap();
    o.check(
        same_params(&one, &masd) && same_params(&zero, &probe),
        "interpolate at alpha = 1 and 0 returns the parents bit for bit",
    );
    o
}

fn report(n: u32, title: &str, o: &Outcome) {
    println!("criterion {n} {}: {title}", if o.pass { "PASS" } else { "FAIL" });
    for d in &o.details {
        println!("    {d}");
    }
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, bool)> = Vec::new();
    let mut run = |n: u32, title: &str, o: Outcome| {
        report(n, title, &o);
        results.push((n, o.pass));
    };
    run(1, "fixture reproduction", criterion_1());
    run(2, "two-modality fixtures", criterion_2());
    run(3, "best evaluation sets", criterion_3());
    run(4, "gradient suite", criterion_4());
    run(6, "mAP oracle", criterion_6());
    let (o7, shared) = criterion_7();
    run(7, "sweep determinism", o7);
    run(5, "stop-gradient oracle", criterion_5(&shared));
    run(8, "desk-scale direction", criterion_8(&shared));
    run(9, "checkpoint round trip", criterion_9(&shared));
    results.sort();

    let passed = results.iter().filter(|r| r.1).count();
    println!(
        "acceptance: {passed}/{} criteria pass in {:.0} s; expected red: {KNOWN_RED:?}",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    let unexpected: Vec<u32> = results
        .iter()
        .filter(|(n, pass)| *pass == KNOWN_RED.contains(n))
        .map(|r| r.0)
        .collect();
    if !unexpected.is_empty() {
        println!("acceptance: unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
