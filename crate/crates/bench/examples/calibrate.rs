use hsidiff::data::{SplitStrategy, SynthSpec};
use hsidiff::pipeline::{cmd_pretrain, DataSource, RunConfig};
use std::time::Instant;

// args: steps batch lr beta_end tau [mse]
fn main() {
    let arg = |i: usize| std::env::args().nth(i);
    let steps: usize = arg(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let batch: usize = arg(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr: f64 = arg(3).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let beta_end: f64 = arg(4).and_then(|s| s.parse().ok()).unwrap_or(0.35);
    let tau: f64 = arg(5).and_then(|s| s.parse().ok()).unwrap_or(0.5);

    let mut cfg = RunConfig::default();
    cfg.seed = 1;
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
    cfg.diffusion.beta_end = beta_end;
    cfg.pretrain.steps = steps;
    cfg.pretrain.batch = batch;
    cfg.pretrain.lr = lr;
    cfg.pretrain.tau = tau;
    if let Some(ls) = std::env::args().nth(7).and_then(|s| s.parse::<f64>().ok()) {
        cfg.model.layer_scale_init = ls;
    }
    if let Some(clip) = std::env::args().nth(8).and_then(|s| s.parse::<f64>().ok()) {
        cfg.pretrain.grad_clip = clip;
    }
    if std::env::args().nth(9).as_deref() == Some("std") {
        cfg.data.normalize = hsidiff::data::NormalizeMode::Standardize;
    }
    if arg(6).as_deref() == Some("mse") {
        cfg.pretrain.loss = hsidiff::objectives::DiffusionLossKind::Mse;
    }

    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let outcome = cmd_pretrain(&cfg, dir.path()).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "steps={steps} batch={batch} lr={lr} beta_end={beta_end} tau={tau}: {:.1}s ({:.0} ms/step)",
        dt,
        1000.0 * dt / steps as f64
    );
    for r in outcome.records.iter().step_by((steps / 10).max(1)) {
        println!(
            "  step {:4}  l_diff {:.3}  l_rec {:.3}  l_con {:.3}  w_diff {:+.3}  w_rec {:+.3}",
            r.step, r.l_diff, r.l_rec, r.l_con, r.w_diff, r.w_rec
        );
    }
    let tail = &outcome.records[outcome.records.len().saturating_sub(50)..];
    let avg = |f: &dyn Fn(&hsidiff::pipeline::LossRecord) -> f64| {
        tail.iter().map(|r| f(r)).sum::<f64>() / tail.len() as f64
    };
    println!(
        "  tail50: l_diff {:.3}  l_rec {:.3}  l_con {:.3}  w_diff {:+.3}  w_rec {:+.3}",
        avg(&|r| r.l_diff),
        avg(&|r| r.l_rec),
        avg(&|r| r.l_con),
        avg(&|r| r.w_diff),
        avg(&|r| r.w_rec)
    );

    // per-timestep loss decomposition on fresh probes
    use hsidiff::diffusion::{predict_x0, q_sample, NoisePredictor};
    use hsidiff::denoiser::DenoiserPredictor;
    use hsidiff::objectives::{lae_loss, rec_loss};
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::Distribution;

    let dataset = hsidiff::pipeline::load_dataset(&cfg).unwrap();
    let bundle = hsidiff::pipeline::load_pretrained(&cfg, 16, &outcome.checkpoint).unwrap();
    let predictor = DenoiserPredictor {
        model: &bundle.denoiser,
        store: &bundle.store,
        geom: &bundle.geom,
    };
    let mut rng = hsidiff::rng::substream(99, hsidiff::rng::EVAL_NOISE);
    let ids: Vec<usize> = (0..16).map(|_| rng.gen_range(0..48 * 48)).collect();
    let x0 = hsidiff::pipeline::stack_patches::<f32>(&dataset, &ids).unwrap();
    let normal = rand_distr::StandardNormal;
    println!("  per-t:  t      l_diff    l_rec    |eps_hat|/|eps|");
    for t in [1usize, 2, 3, 5, 8, 12, 20, 35, 50] {
        let eps = Array2::<f32>::from_shape_fn(x0.raw_dim(), |_| {
            Distribution::<f64>::sample(&normal, &mut rng) as f32
        });
        let noisy = q_sample(&x0, t, &eps, &bundle.sched).unwrap();
        let ts: Vec<usize> = vec![t; 16];
        let eps_hat = predictor.predict_batch(&noisy.x_t, &ts, 49);
        let x0_hat = predict_x0(&noisy.x_t, &eps_hat, t, &bundle.sched).unwrap();
        let ld = lae_loss(&eps, &eps_hat).unwrap();
        let lr_ = rec_loss(&x0_hat, &x0).unwrap();
        let ne: f32 = eps_hat.iter().map(|v| v * v).sum::<f32>().sqrt();
        let de: f32 = eps.iter().map(|v| v * v).sum::<f32>().sqrt();
        println!("      {t:3}   {ld:8.3}  {lr_:8.3}   {:.3}", ne / de);
    }
}
