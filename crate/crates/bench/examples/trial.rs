use hsidiff::classifier::{FeatureSource, HeadKind};
use hsidiff::data::{SplitStrategy, SynthSpec};
use hsidiff::pipeline::{
    cmd_evaluate, cmd_pretrain, cmd_rank_timesteps, cmd_train_classifier, DataSource, RunConfig,
};
use hsidiff::timesteps::TimestepRanking;
use std::time::Instant;

fn desk_config(seed: u64, lr: f64, batch: usize) -> RunConfig {
    // settings fixed by calibration; see the acceptance config

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
    cfg.pretrain.batch = batch;
    cfg.pretrain.lr = lr;
    cfg.pretrain.grad_clip = 1.0;
    cfg.classify.epochs = 100;
    cfg.classify.lr = 1e-3;
    cfg.classify.grad_clip = 1.0;
    cfg
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let cfg = desk_config(seed, lr, batch);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let t0 = Instant::now();
    let pre = cmd_pretrain(&cfg, out).unwrap();
    println!("pretrain: {:.1}s", t0.elapsed().as_secs_f64());
    for r in pre.records.iter().step_by(200) {
        println!(
            "  step {:4}  l_diff {:.3}  l_rec {:.3}  l_con {:.3}  w_diff {:+.3}  w_rec {:+.3}",
            r.step, r.l_diff, r.l_rec, r.l_con, r.w_diff, r.w_rec
        );
    }
    let last = pre.records.last().unwrap();
    println!("  final: {last:?}");
    let early: f64 = pre.records[5..15].iter().map(|r| r.l_diff).sum::<f64>() / 10.0;
    let late: f64 = pre.records[1990..].iter().map(|r| r.l_diff).sum::<f64>() / 10.0;
    println!("  l_diff step10 {early:.3} -> step2000 {late:.3}");

    let t1 = Instant::now();
    let rank = cmd_rank_timesteps(&cfg, out, &pre.checkpoint).unwrap();
    println!("rank: {:.1}s  selected {:?}", t1.elapsed().as_secs_f64(), rank.ranking.selected);
    let TimestepRanking {
        candidates,
        mean_sam,
        ..
    } = &rank.ranking;
    for (t, s) in candidates.iter().zip(mean_sam).step_by(5) {
        println!("  t {t:3}  sam {s:.4}");
    }

    let t2 = Instant::now();
    let cls = cmd_train_classifier(&cfg, out, &pre.checkpoint, Some(&rank.report)).unwrap();
    println!(
        "classifier: {:.1}s  train acc {:.4}",
        t2.elapsed().as_secs_f64(),
        cls.final_train_accuracy
    );

    let t3 = Instant::now();
    let ev = cmd_evaluate(&cfg, out, &pre.checkpoint, &cls.checkpoint, Some(&rank.report)).unwrap();
    println!(
        "evaluate: {:.1}s  OA {:.4}  AA {:.4}  kappa {:.4}  MIoU {:.4}",
        t3.elapsed().as_secs_f64(),
        ev.metrics.oa,
        ev.metrics.aa,
        ev.metrics.kappa,
        ev.metrics.miou
    );

    // raw-patch linear baseline
    let mut raw_cfg = cfg.clone();
    raw_cfg.classify.features = FeatureSource::Raw;
    raw_cfg.classify.head = HeadKind::Linear;
    let raw_dir = dir.path().join("raw");
    let t4 = Instant::now();
    let raw_cls = cmd_train_classifier(&raw_cfg, &raw_dir, &pre.checkpoint, None).unwrap();
    let raw_ev =
        cmd_evaluate(&raw_cfg, &raw_dir, &pre.checkpoint, &raw_cls.checkpoint, None).unwrap();
    println!(
        "raw baseline: {:.1}s  train acc {:.4}  OA {:.4}",
        t4.elapsed().as_secs_f64(),
        raw_cls.final_train_accuracy,
        raw_ev.metrics.oa
    );

    // linear head on diffusion features
    let mut lin_cfg = cfg.clone();
    lin_cfg.classify.head = HeadKind::Linear;
    let lin_dir = dir.path().join("linear");
    let lin_cls =
        cmd_train_classifier(&lin_cfg, &lin_dir, &pre.checkpoint, Some(&rank.report)).unwrap();
    let lin_ev = cmd_evaluate(
        &lin_cfg,
        &lin_dir,
        &pre.checkpoint,
        &lin_cls.checkpoint,
        Some(&rank.report),
    )
    .unwrap();
    println!("linear head: OA {:.4}", lin_ev.metrics.oa);

    // manual high-t timestep set near T
    let high_dir = dir.path().join("hight");
    std::fs::create_dir_all(&high_dir).unwrap();
    let high_ranking = TimestepRanking {
        candidates: (46..=50).collect(),
        mean_sam: vec![0.0; 5],
        selected: (46..=50).collect(),
    };
    let high_report = high_dir.join("ranking.tsv");
    hsidiff::timesteps::write_ranking_report(&high_ranking, &high_report).unwrap();
    let high_cls =
        cmd_train_classifier(&cfg, &high_dir, &pre.checkpoint, Some(&high_report)).unwrap();
    let high_ev = cmd_evaluate(
        &cfg,
        &high_dir,
        &pre.checkpoint,
        &high_cls.checkpoint,
        Some(&high_report),
    )
    .unwrap();
    println!("high-t set: OA {:.4}", high_ev.metrics.oa);

    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
