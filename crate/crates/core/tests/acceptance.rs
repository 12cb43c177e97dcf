//! Acceptance suite: one test per criterion, each printing a PASS line when
//! its assertions hold. Tests share trained desk-scale models through a
//! per-seed cache and run serially behind a global gate so the stated
//! runtime budgets are honest.

use ndarray::{arr1, arr2, Array1, Array2};
use rand::Rng;
use rand_distr::Distribution;
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, LazyLock, Mutex, MutexGuard};
use std::time::Instant;

use hsidiff::autodiff::{ConvGeom, Tape, Var};
use hsidiff::classifier::{ClassifierConfig, ClassifierModel, FeatureSource, HeadKind};
use hsidiff::data::{SplitStrategy, SynthSpec};
use hsidiff::denoiser::{
    ssa, sgsa, ContrastiveEncoder, DenoiserConfig, DenoiserModel, DenoiserPredictor,
};
use hsidiff::diffusion::{
    make_schedule, posterior_variance, predict_x0, q_sample, sample_loop, NoisePredictor,
};
use hsidiff::evaluation::{
    compute_metrics, metrics_by_loops, ConfusionMatrix, Metrics,
};
use hsidiff::nn::{check_param_grads, Binding, ParamStore};
use hsidiff::objectives::{
    compound_loss, compound_on_tape, info_nce, lae_loss, rec_loss, UncertaintyWeights,
};
use hsidiff::pipeline::{
    cmd_evaluate, cmd_predict_map, cmd_pretrain, cmd_rank_timesteps, cmd_train_classifier,
    DataSource, LossRecord, RunConfig,
};
use hsidiff::rng::{substream, StreamId};
use hsidiff::timesteps::{sam_map, write_ranking_report, TimestepRanking};

/// Serializes the criterion tests (they share two cores and a model cache).
static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------------------
// Desk-scale benchmark fixtures
// ---------------------------------------------------------------------------

/// The synthetic benchmark configuration pinned by the acceptance criteria:
/// 48x48x16 scene with 4 classes at sigma = 0.02, P = 7, T = 50, 2000
/// pretraining steps, top-5 selection, 20 labels per class, 100 classifier
/// epochs. Free knobs (batch, learning rates, schedule end, LayerScale init)
/// carry the calibrated desk-scale values from `configs/synth-desk.toml`.
fn desk_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.source = DataSource::Synth {
        spec: SynthSpec {
            height: 48,
            width: 48,
            bands: 16,
            classes: 4,
            noise_sigma: 0.02,
        },
    };
    cfg.data.patch = 7;
    cfg.data.split = SplitStrategy::PerClassCount { count: 20 };
    cfg.diffusion.t_total = 50;
    cfg.diffusion.beta_start = 1e-4;
    cfg.diffusion.beta_end = 0.1;
    cfg.model.layer_scale_init = 0.1;
    cfg.pretrain.steps = 2000;
    cfg.pretrain.batch = 8;
    cfg.pretrain.lr = 3e-3;
    cfg.pretrain.grad_clip = 1.0;
    cfg.classify.epochs = 100;
    cfg.classify.lr = 1e-2;
    cfg.classify.batch = 40;
    cfg.classify.grad_clip = 1.0;
    cfg
}

struct DeskRun {
    cfg: RunConfig,
    dir: tempfile::TempDir,
    pretrain_ckpt: PathBuf,
    ranking_report: PathBuf,
    selected: Vec<usize>,
    records: Vec<LossRecord>,
}

static DESK_RUNS: LazyLock<Mutex<HashMap<u64, Arc<DeskRun>>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

/// Pretrain + rank once per seed; later criteria reuse the artifacts.
fn desk_run(seed: u64) -> Arc<DeskRun> {
    let mut cache = DESK_RUNS.lock().unwrap();
    if let Some(run) = cache.get(&seed) {
        return Arc::clone(run);
    }
    let cfg = desk_config(seed);
    let dir = tempfile::tempdir().expect("tempdir");
    let pre = cmd_pretrain(&cfg, dir.path()).expect("pretraining succeeds");
    let rank = cmd_rank_timesteps(&cfg, dir.path(), &pre.checkpoint).expect("ranking succeeds");
    let run = Arc::new(DeskRun {
        cfg,
        dir,
        pretrain_ckpt: pre.checkpoint,
        ranking_report: rank.report,
        selected: rank.ranking.selected.clone(),
        records: pre.records,
    });
    cache.insert(seed, Arc::clone(&run));
    run
}

/// Train a classifier variant and evaluate it; returns (train_acc, metrics).
/// Variants are cached by tag so criteria sharing a configuration reuse one
/// training run.
fn classify_variant(
    run: &DeskRun,
    tag: &str,
    features: FeatureSource,
    head: HeadKind,
    ranking: Option<&PathBuf>,
) -> (f64, Metrics) {
    let mut cfg = run.cfg.clone();
    cfg.classify.features = features;
    cfg.classify.head = head;
    let dir = run.dir.path().join(tag);
    let memo = dir.join("variant.json");
    if let Ok(text) = std::fs::read_to_string(&memo) {
        let (train_acc, metrics): (f64, Metrics) =
            serde_json::from_str(&text).expect("cached variant record parses");
        return (train_acc, metrics);
    }
    let cls = cmd_train_classifier(
        &cfg,
        &dir,
        &run.pretrain_ckpt,
        ranking.map(|p| p.as_path()),
    )
    .expect("classifier training succeeds");
    let ev = cmd_evaluate(
        &cfg,
        &dir,
        &run.pretrain_ckpt,
        &cls.checkpoint,
        ranking.map(|p| p.as_path()),
    )
    .expect("evaluation succeeds");
    let record = (cls.final_train_accuracy, ev.metrics);
    std::fs::write(&memo, serde_json::to_string(&record).unwrap()).unwrap();
    record
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// Criterion 1: closed-form diffusion
// ---------------------------------------------------------------------------

#[test]
fn c1_diffusion_closed_form_suite() {
    let _g = gate();
    let t0 = Instant::now();

    // exact schedule product identity on the default and desk schedules
    for sched in [
        make_schedule(1000, 1e-4, 0.02).unwrap(),
        make_schedule(50, 1e-4, 0.1).unwrap(),
    ] {
        for t in 1..=sched.t_max() {
            assert_eq!(sched.alpha_bar(t), sched.alpha_bar(t - 1) * sched.alpha(t));
        }
    }

    // Monte-Carlo moments of the forward marginal over 1e5 draws
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let normal = rand_distr::StandardNormal;
    for (t, seed) in [(1usize, 7u64), (350, 8), (1000, 9)] {
        let x0 = 0.63;
        let mut rng = substream(seed, StreamId(31 << 48));
        let (mut sum, mut sumsq) = (0.0f64, 0.0f64);
        let n = 100_000;
        for _ in 0..n {
            let eps: f64 = Distribution::sample(&normal, &mut rng);
            let x = q_sample(&arr1(&[x0]), t, &arr1(&[eps]), &sched).unwrap().x_t[0];
            sum += x;
            sumsq += x * x;
        }
        let m = sum / n as f64;
        let v = sumsq / n as f64 - m * m;
        let ab = sched.alpha_bar(t);
        assert!(
            (m - ab.sqrt() * x0).abs() < 0.01,
            "t={t}: mean {m} vs {}",
            ab.sqrt() * x0
        );
        assert!((v - (1.0 - ab)).abs() < 0.01, "t={t}: var {v} vs {}", 1.0 - ab);
    }

    // one-shot inversion to 1e-10 at every t of the desk schedule
    let sched = make_schedule(50, 1e-4, 0.1).unwrap();
    let mut rng = substream(10, StreamId(31 << 48));
    for t in 1..=50 {
        let x0 = Array1::from_shape_fn(64, |_| rng.gen_range(0.0..1.0));
        let eps = Array1::from_shape_fn(64, |_| Distribution::sample(&normal, &mut rng));
        let noisy = q_sample(&x0, t, &eps, &sched).unwrap();
        let rec = predict_x0(&noisy.x_t, &eps, t, &sched).unwrap();
        let worst = rec
            .iter()
            .zip(x0.iter())
            .map(|(a, b): (&f64, &f64)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "t={t}: inversion error {worst}");
    }

    // sigma_1^2 is exactly zero under the alpha_bar(0) = 1 convention
    assert_eq!(posterior_variance(1, &sched).unwrap(), 0.0);

    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 30.0, "criterion 1 runtime {dt:.1}s exceeds 30s");
    println!("PASS criterion 1: diffusion closed-form suite ({dt:.1}s)");
}

// ---------------------------------------------------------------------------
// Criterion 2: finite-difference gradient suite
// ---------------------------------------------------------------------------

fn rand2(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = substream(seed, StreamId(32 << 48));
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// FD-check every parameter-dependent loss in one harness: build the loss on
/// a fresh tape from the store, compare tape gradients against central
/// differences on >= 20 sampled parameters.
fn fd_suite_case(
    name: &str,
    store: &mut ParamStore<f64>,
    candidates: &[hsidiff::nn::ParamId],
    loss: &dyn Fn(&ParamStore<f64>) -> f64,
    build: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &mut Binding) -> Var,
) {
    let mut tape = Tape::<f64>::new();
    let mut bind = Binding::new();
    let l = build(&mut tape, store, &mut bind);
    let mut grads = tape.backward(l);
    let analytic: HashMap<_, _> = bind.take_grads(&mut grads).into_iter().collect();
    let report = check_param_grads(store, candidates, &analytic, 20, 1e-6, 1e-4, 71, loss)
        .unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(report.checked >= 20);
}

#[test]
fn c2_gradient_suite() {
    let _g = gate();
    let t0 = Instant::now();

    // shared tiny geometry
    let (p, c) = (3usize, 4usize);
    let geom = ConvGeom::new(p, p, 3);
    let spatial = p * p;

    // lae_loss / rec_loss / info_nce / compound_loss with inputs produced by
    // a parameterized linear map, so parameters receive loss gradients
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(1, StreamId(33 << 48));
        let w = store.add("probe.weight", hsidiff::nn::randn_scaled(&mut rng, &[c, c], 0.5));
        let x = rand2(spatial, c, 2);
        let target = rand2(spatial, c, 3);
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &mut Binding) -> Var>)> = vec![
            (
                "lae_loss",
                Box::new({
                    let (x, target) = (x.clone(), target.clone());
                    move |tape, store, bind| {
                        let wv = bind.var(tape, store, store.id("probe.weight").unwrap());
                        let xv = tape.constant(x.clone().into_dyn());
                        let y = tape.matmul(xv, wv);
                        let tv = tape.constant(target.clone().into_dyn());
                        let r = tape.sub(y, tv);
                        tape.lae(r)
                    }
                }),
            ),
            (
                "rec_loss",
                Box::new({
                    let (x, target) = (x.clone(), target.clone());
                    move |tape, store, bind| {
                        let wv = bind.var(tape, store, store.id("probe.weight").unwrap());
                        let xv = tape.constant(x.clone().into_dyn());
                        let x0_hat = tape.matmul(xv, wv);
                        let x0 = tape.constant(target.clone().into_dyn());
                        let r = tape.sub(x0_hat, x0);
                        tape.lae(r)
                    }
                }),
            ),
            (
                "info_nce",
                Box::new({
                    let x = x.clone();
                    move |tape, store, bind| {
                        let wv = bind.var(tape, store, store.id("probe.weight").unwrap());
                        let xv = tape.constant(x.clone().into_dyn());
                        let z = tape.matmul(xv, wv); // rows as embeddings
                        let z_raw = tape.slice_rows(z, 0, 4);
                        let z_fake = tape.slice_rows(z, 4, 4);
                        hsidiff::objectives::info_nce_on_tape(tape, z_raw, z_fake, 0.5)
                    }
                }),
            ),
            (
                "compound_loss",
                Box::new({
                    let (x, target) = (x.clone(), target.clone());
                    move |tape, store, bind| {
                        let wv = bind.var(tape, store, store.id("probe.weight").unwrap());
                        let xv = tape.constant(x.clone().into_dyn());
                        let y = tape.matmul(xv, wv);
                        let tv = tape.constant(target.clone().into_dyn());
                        let r = tape.sub(y, tv);
                        let l_diff = tape.lae(r);
                        let sq = tape.mul(y, y);
                        let l_rec = tape.mean_all(sq);
                        let l_con = tape.constant(ndarray::arr0(0.4).into_dyn());
                        let wd = tape.leaf(ndarray::arr0(0.2).into_dyn());
                        let wr = tape.leaf(ndarray::arr0(-0.1).into_dyn());
                        compound_on_tape(tape, l_diff, l_rec, l_con, wd, wr)
                    }
                }),
            ),
        ];
        for (name, build) in cases {
            let loss = |s: &ParamStore<f64>| {
                let mut tape = Tape::<f64>::new();
                let mut bind = Binding::new();
                let l = build(&mut tape, s, &mut bind);
                tape.scalar(l)
            };
            fd_suite_case(name, &mut store, &[w], &loss, &build);
        }
    }

    // denoiser_forward via mean(eps_hat^2)
    {
        let cfg = DenoiserConfig {
            patch: p,
            channels: c,
            width: 8,
            groups: 2,
            time_dim: 8,
            layer_scale_init: 1e-2,
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(4, StreamId(33 << 48));
        let model = DenoiserModel::init(cfg, &mut store, &mut rng).unwrap();
        let x = rand2(spatial, c, 5);
        let geom2 = geom.clone();
        let build = move |tape: &mut Tape<f64>, store: &ParamStore<f64>, bind: &mut Binding| {
            let xv = tape.constant(x.clone().into_dyn());
            let (eps, _) = model.forward(tape, store, bind, xv, &[7], &geom2);
            let sq = tape.mul(eps, eps);
            tape.mean_all(sq)
        };
        let loss = |s: &ParamStore<f64>| {
            let mut tape = Tape::<f64>::new();
            let mut bind = Binding::new();
            let l = build(&mut tape, s, &mut bind);
            tape.scalar(l)
        };
        let candidates: Vec<_> = store.ids().collect();
        fd_suite_case("denoiser_forward", &mut store, &candidates, &loss, &build);
    }

    // contrastive_encode via mean(z^2)
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(6, StreamId(33 << 48));
        let enc = ContrastiveEncoder::init(&mut store, &mut rng, c);
        let x = rand2(spatial, c, 7);
        let geom2 = geom.clone();
        let build = move |tape: &mut Tape<f64>, store: &ParamStore<f64>, bind: &mut Binding| {
            let xv = tape.constant(x.clone().into_dyn());
            let z = enc.forward(tape, store, bind, xv, &geom2);
            let sq = tape.mul(z, z);
            tape.mean_all(sq)
        };
        let loss = |s: &ParamStore<f64>| {
            let mut tape = Tape::<f64>::new();
            let mut bind = Binding::new();
            let l = build(&mut tape, s, &mut bind);
            tape.scalar(l)
        };
        let candidates: Vec<_> = store.ids().collect();
        fd_suite_case("contrastive_encode", &mut store, &candidates, &loss, &build);
    }

    // classify via cross-entropy
    {
        let cfg = ClassifierConfig {
            num_classes: 3,
            d_cls: 8,
            reduction: 4,
            gn_groups: 2,
            patch: p,
            feature_width: 6,
            times: 2,
            stages: 2,
            head: HeadKind::Full,
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(8, StreamId(33 << 48));
        let model = ClassifierModel::init(cfg.clone(), &mut store, &mut rng).unwrap();
        let feats: Vec<Array2<f64>> = (0..4).map(|i| rand2(2 * spatial, 6, 20 + i)).collect();
        let labels = vec![1usize, 2];
        let geom2 = geom.clone();
        let build = move |tape: &mut Tape<f64>, store: &ParamStore<f64>, bind: &mut Binding| {
            let vars: Vec<Var> = feats
                .iter()
                .map(|f| tape.constant(f.clone().into_dyn()))
                .collect();
            let logits = model.classify(tape, store, bind, &vars, &geom2);
            tape.cross_entropy(logits, &labels)
        };
        let loss = |s: &ParamStore<f64>| {
            let mut tape = Tape::<f64>::new();
            let mut bind = Binding::new();
            let l = build(&mut tape, s, &mut bind);
            tape.scalar(l)
        };
        let candidates: Vec<_> = store.ids().collect();
        fd_suite_case("classify", &mut store, &candidates, &loss, &build);
    }

    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 300.0, "criterion 2 runtime {dt:.1}s exceeds 5 min");
    println!("PASS criterion 2: gradient suite ({dt:.1}s)");
}

// ---------------------------------------------------------------------------
// Criterion 3: attention and metric oracles
// ---------------------------------------------------------------------------

#[test]
fn c3_attention_and_metric_oracles() {
    let _g = gate();
    let t0 = Instant::now();

    // SSA against a brute-force softmax-matmul oracle, P in {1..3}
    let mut rng = substream(1, StreamId(34 << 48));
    for p in 1..=3usize {
        let s = p * p;
        let width = 4;
        let x = rand2(s, width, 40 + p as u64);
        let wq = rand2(width, width, 41);
        let wk = rand2(width, width, 42);
        let wv = rand2(width, width, 43);
        let mut tape = Tape::<f64>::new();
        let (xv, wqv, wkv, wvv) = (
            tape.constant(x.clone().into_dyn()),
            tape.constant(wq.clone().into_dyn()),
            tape.constant(wk.clone().into_dyn()),
            tape.constant(wv.clone().into_dyn()),
        );
        let got = ssa(&mut tape, xv, wqv, wkv, wvv, s);
        let (q, k, v) = (x.dot(&wq), x.dot(&wk), x.dot(&wv));
        let mut scores = q.dot(&k.t());
        scores.mapv_inplace(|e| e / (width as f64).sqrt());
        let mut probs = scores.mapv(f64::exp);
        for mut row in probs.rows_mut() {
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let want = probs.dot(&v);
        for (a, b) in tape.value(got).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6, "SSA P={p}");
        }
    }

    // SGSA against a per-group dense oracle
    for groups in [1usize, 2] {
        let s = 9;
        let width = 4;
        let x = rand2(s, width, 50 + groups as u64);
        let wq = rand2(s, s, 51);
        let wk = rand2(s, s, 52);
        let wv = rand2(s, s, 53);
        let mut tape = Tape::<f64>::new();
        let (xv, wqv, wkv, wvv) = (
            tape.constant(x.clone().into_dyn()),
            tape.constant(wq.clone().into_dyn()),
            tape.constant(wk.clone().into_dyn()),
            tape.constant(wv.clone().into_dyn()),
        );
        let got = sgsa(&mut tape, xv, wqv, wkv, wvv, s, groups);
        let tokens = x.t().to_owned();
        let (q, k, v) = (tokens.dot(&wq), tokens.dot(&wk), tokens.dot(&wv));
        let gw = width / groups;
        let mut want_t = Array2::<f64>::zeros((width, s));
        for g in 0..groups {
            let rows = ndarray::s![g * gw..(g + 1) * gw, ..];
            let (qg, kg, vg) = (q.slice(rows), k.slice(rows), v.slice(rows));
            let mut scores = qg.dot(&kg.t());
            scores.mapv_inplace(|e| e / (gw as f64).sqrt());
            let mut probs = scores.mapv(f64::exp);
            for mut row in probs.rows_mut() {
                let sum = row.sum();
                row.mapv_inplace(|e| e / sum);
            }
            want_t.slice_mut(rows).assign(&probs.dot(&vg));
        }
        for r in 0..s {
            for c in 0..width {
                let a = tape.value(got).as_slice().unwrap()[r * width + c];
                assert!((a - want_t[[c, r]]).abs() < 1e-6, "SGSA groups={groups}");
            }
        }
    }

    // metrics against the independent loop implementation on 1e4 matrices
    for i in 0..10_000 {
        let k = rng.gen_range(2..=5);
        let counts = Array2::from_shape_fn((k, k), |_| rng.gen_range(0..30u64));
        if counts.iter().all(|&v| v == 0) {
            continue;
        }
        let conf = ConfusionMatrix { counts };
        let a = compute_metrics(&conf).unwrap();
        let b = metrics_by_loops(&conf);
        for (x, y, name) in [
            (a.oa, b.oa, "oa"),
            (a.aa, b.aa, "aa"),
            (a.kappa, b.kappa, "kappa"),
            (a.fwiou, b.fwiou, "fwiou"),
            (a.miou, b.miou, "miou"),
        ] {
            assert!((x - y).abs() < 1e-12, "matrix {i}: {name} {x} vs {y}");
        }
    }

    // the hand-computed two-class case, exactly
    let conf = ConfusionMatrix {
        counts: arr2(&[[5u64, 1], [2, 4]]),
    };
    let m = compute_metrics(&conf).unwrap();
    assert_eq!(m.oa, 0.75);
    assert_eq!(m.kappa, 0.5);
    assert!((m.miou - 67.0 / 112.0).abs() < 1e-15);
    assert!((m.miou - 0.59821).abs() < 1e-5);

    let dt = t0.elapsed().as_secs_f64();
    println!("PASS criterion 3: attention and metric oracles ({dt:.1}s)");
}

// ---------------------------------------------------------------------------
// Criterion 4: loss exactness
// ---------------------------------------------------------------------------

#[test]
fn c4_loss_exactness() {
    let _g = gate();
    let zero = Array1::<f64>::zeros(1);

    let same = arr1(&[0.37, -0.12]);
    assert_eq!(lae_loss(&same, &same).unwrap(), 0.0);
    assert!((lae_loss(&arr1(&[0.5]), &zero).unwrap() - 0.693147).abs() < 1e-4);
    assert!((lae_loss(&arr1(&[3.0]), &zero).unwrap() - 9.21034).abs() < 1e-4);
    assert!((rec_loss(&arr1(&[0.1]), &zero).unwrap() - 0.10536).abs() < 1e-4);

    let weights = UncertaintyWeights {
        w_diff: 2.0f64.ln(),
        w_rec: 0.0,
    };
    let got = compound_loss(1.0, 2.0, 0.4, &weights).unwrap();
    assert!((got - 3.3931).abs() < 1e-4);

    let z_raw = arr2(&[[0.6, -0.3, 0.2]]);
    let z_fake = arr2(&[[0.1, 0.9, -0.4]]);
    assert_eq!(info_nce(&z_raw, &z_fake, 0.5).unwrap(), 0.0);

    println!("PASS criterion 4: loss exactness");
}

// ---------------------------------------------------------------------------
// Criterion 5: synthetic end-to-end benchmark
// ---------------------------------------------------------------------------

#[test]
fn c5_synthetic_end_to_end() {
    let _g = gate();
    let t0 = Instant::now();
    let seeds = [1u64, 2, 3];
    let mut diffusion_oa = Vec::new();
    let mut baseline_oa = Vec::new();
    for &seed in &seeds {
        let run = desk_run(seed);
        assert_eq!(run.selected.len(), 5, "top-5 selection");
        let (train_acc, metrics) = classify_variant(
            &run,
            "full",
            FeatureSource::Diffusion,
            HeadKind::Full,
            Some(&run.ranking_report),
        );
        assert!(
            train_acc >= 0.99,
            "seed {seed}: train accuracy {train_acc} below the overfit oracle"
        );
        let (_, raw) = classify_variant(&run, "raw", FeatureSource::Raw, HeadKind::Linear, None);
        println!(
            "  seed {seed}: diffusion OA {:.4}, raw baseline OA {:.4}",
            metrics.oa, raw.oa
        );
        diffusion_oa.push(metrics.oa);
        baseline_oa.push(raw.oa);
    }
    let diff_mean = mean(&diffusion_oa);
    let base_mean = mean(&baseline_oa);
    assert!(
        diff_mean >= 0.90,
        "mean diffusion OA {diff_mean:.4} below 0.90"
    );
    assert!(
        diff_mean >= base_mean,
        "diffusion features (OA {diff_mean:.4}) must not trail the raw baseline ({base_mean:.4})"
    );
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt <= 1200.0, "criterion 5 runtime {dt:.0}s exceeds 20 min");
    println!(
        "PASS criterion 5: synthetic end-to-end (diffusion {diff_mean:.4} >= baseline {base_mean:.4}, {dt:.0}s)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: ablation directions
// ---------------------------------------------------------------------------

#[test]
fn c6_ablation_directions() {
    let _g = gate();
    let t0 = Instant::now();
    let seeds = [1u64, 2, 3, 4, 5];
    let mut full_oa = Vec::new();
    let mut linear_oa = Vec::new();
    let mut sam_oa = Vec::new();
    let mut high_oa = Vec::new();
    let mut final_w_diff = Vec::new();
    let mut final_w_rec = Vec::new();
    for &seed in &seeds {
        let run = desk_run(seed);
        let (_, full) = classify_variant(
            &run,
            "full",
            FeatureSource::Diffusion,
            HeadKind::Full,
            Some(&run.ranking_report),
        );
        let (_, linear) = classify_variant(
            &run,
            "linear",
            FeatureSource::Diffusion,
            HeadKind::Linear,
            Some(&run.ranking_report),
        );

        // manual high-noise set at the top of the schedule
        let t_max = run.cfg.diffusion.t_total;
        let high_set: Vec<usize> = (t_max - 4..=t_max).collect();
        let high_ranking = TimestepRanking {
            candidates: high_set.clone(),
            mean_sam: vec![0.0; 5],
            selected: high_set,
        };
        let high_report = run.dir.path().join(format!("c6-high-{seed}.tsv"));
        write_ranking_report(&high_ranking, &high_report).unwrap();
        let (_, high) = classify_variant(
            &run,
            "high",
            FeatureSource::Diffusion,
            HeadKind::Full,
            Some(&high_report),
        );

        let last = run.records.last().expect("nonempty training log");
        println!(
            "  seed {seed}: full {:.4}, linear {:.4}, sam-top5 {:.4}, high-t {:.4}, w_diff {:+.3}, w_rec {:+.3}",
            full.oa, linear.oa, full.oa, high.oa, last.w_diff, last.w_rec
        );
        sam_oa.push(full.oa);
        high_oa.push(high.oa);
        full_oa.push(full.oa);
        linear_oa.push(linear.oa);
        final_w_diff.push(last.w_diff);
        final_w_rec.push(last.w_rec);
    }
    let (full_m, linear_m) = (mean(&full_oa), mean(&linear_oa));
    assert!(
        full_m >= linear_m,
        "(a) AWAM+CTSSFM mean OA {full_m:.4} must not trail the linear head {linear_m:.4}"
    );
    let (sam_m, high_m) = (mean(&sam_oa), mean(&high_oa));
    assert!(
        sam_m >= high_m,
        "(b) SAM-selected mean OA {sam_m:.4} must not trail the near-T set {high_m:.4}"
    );
    let (wd_m, wr_m) = (mean(&final_w_diff), mean(&final_w_rec));
    assert!(
        wd_m < 0.0 && wr_m < 0.0,
        "(c) uncertainty weights must finish below 0 (w_diff {wd_m:+.3}, w_rec {wr_m:+.3})"
    );
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "PASS criterion 6: ablations (full {full_m:.4} >= linear {linear_m:.4}; sam {sam_m:.4} >= high-t {high_m:.4}; w_diff {wd_m:+.3}, w_rec {wr_m:+.3}) ({dt:.0}s)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: determinism and persistence
// ---------------------------------------------------------------------------

#[test]
fn c7_determinism_and_persistence() {
    let _g = gate();
    let t0 = Instant::now();

    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.data.source = DataSource::Synth {
        spec: SynthSpec {
            height: 14,
            width: 14,
            bands: 6,
            classes: 3,
            noise_sigma: 0.02,
        },
    };
    cfg.data.patch = 3;
    cfg.data.split = SplitStrategy::PerClassCount { count: 5 };
    cfg.diffusion.t_total = 10;
    cfg.diffusion.beta_end = 0.2;
    cfg.model.width = 16;
    cfg.model.groups = 2;
    cfg.model.time_dim = 8;
    cfg.model.d_cls = 16;
    cfg.model.gn_groups = 4;
    cfg.pretrain.steps = 25;
    cfg.pretrain.batch = 4;
    cfg.pretrain.lr = 1e-3;
    cfg.classify.epochs = 4;
    cfg.classify.batch = 8;

    let run = |root: &std::path::Path| {
        let pre = cmd_pretrain(&cfg, root).unwrap();
        let rank = cmd_rank_timesteps(&cfg, root, &pre.checkpoint).unwrap();
        let cls = cmd_train_classifier(&cfg, root, &pre.checkpoint, Some(&rank.report)).unwrap();
        let map = cmd_predict_map(
            &cfg,
            root,
            &pre.checkpoint,
            &cls.checkpoint,
            Some(&rank.report),
            false,
        )
        .unwrap();
        (
            std::fs::read(root.join("pretrain_log.tsv")).unwrap(),
            std::fs::read(&rank.report).unwrap(),
            std::fs::read(&map.image).unwrap(),
            pre.checkpoint,
        )
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (log_a, rank_a, img_a, ckpt_a) = run(dir_a.path());
    let (log_b, rank_b, img_b, _) = run(dir_b.path());
    assert_eq!(log_a, log_b, "loss logs must be byte-identical");
    assert_eq!(rank_a, rank_b, "ranking reports must be byte-identical");
    assert_eq!(img_a, img_b, "prediction images must be byte-identical");

    // checkpoint round-trip preserves forward outputs bit-exactly on 100
    // random inputs
    let bundle = hsidiff::pipeline::load_pretrained(&cfg, 6, &ckpt_a).unwrap();
    let reloaded = hsidiff::pipeline::load_pretrained(&cfg, 6, &ckpt_a).unwrap();
    let geom = ConvGeom::new(3, 3, 3);
    let mut rng = substream(3, StreamId(35 << 48));
    for i in 0..100 {
        let x = Array2::<f32>::from_shape_fn((9, 6), |_| rng.gen_range(-1.0..1.0));
        let pred_a = DenoiserPredictor {
            model: &bundle.denoiser,
            store: &bundle.store,
            geom: &geom,
        }
        .predict_batch(&x, &[3], 9);
        let pred_b = DenoiserPredictor {
            model: &reloaded.denoiser,
            store: &reloaded.store,
            geom: &geom,
        }
        .predict_batch(&x, &[3], 9);
        assert_eq!(pred_a, pred_b, "input {i}");
    }

    let dt = t0.elapsed().as_secs_f64();
    println!("PASS criterion 7: determinism and persistence ({dt:.1}s)");
}

// ---------------------------------------------------------------------------
// Trained-sampler quality (spec example, not a numbered criterion)
// ---------------------------------------------------------------------------

#[test]
fn c8_sampling_improves_over_untrained_model() {
    let _g = gate();
    let run = desk_run(1);
    let dataset = hsidiff::pipeline::load_dataset(&run.cfg).unwrap();
    let trained =
        hsidiff::pipeline::load_pretrained(&run.cfg, dataset.cube.bands(), &run.pretrain_ckpt)
            .unwrap();
    let fresh = hsidiff::pipeline::build_pretrain_bundle(&run.cfg, dataset.cube.bands()).unwrap();

    // nearest-training-patch spectral angle of ancestral samples
    let pool_ids: Vec<usize> = (0..dataset.num_pixels()).step_by(97).collect();
    let pool = hsidiff::pipeline::stack_patches::<f32>(&dataset, &pool_ids).unwrap();
    let spatial = run.cfg.data.patch * run.cfg.data.patch;
    let mean_min_sam = |bundle: &hsidiff::pipeline::PretrainBundle| -> f64 {
        let predictor = DenoiserPredictor {
            model: &bundle.denoiser,
            store: &bundle.store,
            geom: &bundle.geom,
        };
        let mut total = 0.0;
        let n_draws = 6;
        for draw in 0..n_draws {
            let sample =
                sample_loop(&predictor, spatial, dataset.cube.bands(), &bundle.sched, draw as u64)
                    .unwrap();
            let mut best = f64::INFINITY;
            for i in 0..pool_ids.len() {
                let patch = pool
                    .slice(ndarray::s![i * spatial..(i + 1) * spatial, ..])
                    .to_owned();
                let angles = sam_map(&sample, &patch).unwrap();
                let mean_angle = angles.mean().unwrap();
                if mean_angle < best {
                    best = mean_angle;
                }
            }
            total += best;
        }
        total / n_draws as f64
    };
    let trained_sam = mean_min_sam(&trained);
    let untrained_sam = mean_min_sam(&fresh);
    println!(
        "  trained sample SAM {trained_sam:.4} vs untrained {untrained_sam:.4}"
    );
    assert!(
        trained_sam < untrained_sam,
        "training should pull samples toward the data manifold"
    );
    println!("PASS sampling-quality check (trained {trained_sam:.4} < untrained {untrained_sam:.4})");
}
