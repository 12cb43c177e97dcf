use hsidiff::classifier::{FeatureSource, HeadKind};
use hsidiff::data::{SplitStrategy, SynthSpec};
use hsidiff::pipeline::{
    cmd_evaluate, cmd_pretrain, cmd_rank_timesteps, cmd_train_classifier, DataSource, RunConfig,
};
use std::path::PathBuf;

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
    cfg.classify.lr = 1e-3;
    cfg.classify.grad_clip = 1.0;
    cfg
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = desk_config(seed);
    let base = PathBuf::from(format!("/tmp/sweep_seed{seed}"));
    std::fs::create_dir_all(&base).unwrap();
    let ckpt = base.join("pretrain.ckpt");
    if !ckpt.exists() {
        let t = std::time::Instant::now();
        cmd_pretrain(&cfg, &base).unwrap();
        println!("pretrain {:.0}s", t.elapsed().as_secs_f64());
    }
    let ranking = base.join("ranking.tsv");
    if !ranking.exists() {
        cmd_rank_timesteps(&cfg, &base, &ckpt).unwrap();
    }

    for (tag, lr, batch) in [("lr1e-2_b40", 1e-2, 40)] {
        let mut c = cfg.clone();
        c.classify.lr = lr;
        c.classify.batch = batch;
        let dir = base.join(format!("diff_{tag}"));
        if dir.join(".lock").exists() {
            std::fs::remove_file(dir.join(".lock")).unwrap();
        }
        let cls = cmd_train_classifier(&c, &dir, &ckpt, Some(&ranking)).unwrap();
        let ev = cmd_evaluate(&c, &dir, &ckpt, &cls.checkpoint, Some(&ranking)).unwrap();

        let mut r = c.clone();
        r.classify.features = FeatureSource::Raw;
        r.classify.head = HeadKind::Linear;
        let rdir = base.join(format!("raw_{tag}"));
        if rdir.join(".lock").exists() {
            std::fs::remove_file(rdir.join(".lock")).unwrap();
        }
        let rcls = cmd_train_classifier(&r, &rdir, &ckpt, None).unwrap();
        let rev = cmd_evaluate(&r, &rdir, &ckpt, &rcls.checkpoint, None).unwrap();
        println!(
            "{tag}: diffusion OA {:.4} (train {:.3})   raw OA {:.4} (train {:.3})   gap {:+.4}",
            ev.metrics.oa,
            cls.final_train_accuracy,
            rev.metrics.oa,
            rcls.final_train_accuracy,
            ev.metrics.oa - rev.metrics.oa
        );
    }
}
