//! Classification head over frozen multi-timestep diffusion features:
//! per-stage 1x1 alignment, channel-attention fusion of same-stage features
//! (AWAM), sequential channel/spatial refinement of the cross-stage sum
//! (CTSSFM), and a linear head on the pooled result.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::denoiser::DenoiserModel;
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::elem::Elem;
use crate::nn::{Binding, Conv2d, Linear, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("logit batch {logits} vs {labels} labels")]
    BatchMismatch { logits: usize, labels: usize },
    #[error("non-finite logits")]
    NonFinite,
    #[error("reduction {reduction} must divide head width {d_cls}")]
    BadReduction { d_cls: usize, reduction: usize },
    #[error("group-norm groups {groups} must divide head width {d_cls}")]
    BadGroups { d_cls: usize, groups: usize },
    #[error("expected {expected} feature tensors, got {got}")]
    MissingFeatures { expected: usize, got: usize },
}

/// Whether the head fuses with AWAM + CTSSFM or goes straight to the linear
/// classifier (the ablation baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Full,
    Linear,
}

/// What feeds the classifier: frozen diffusion stage features at the
/// selected timesteps, or the raw patch (comparison baselines).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Diffusion,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub d_cls: usize,
    pub reduction: usize,
    pub gn_groups: usize,
    pub patch: usize,
    /// Channel width of each incoming feature tensor (stage width for
    /// diffusion features, band count for raw patches).
    pub feature_width: usize,
    /// Feature tensors per stage position (selected timesteps, or 1 for raw).
    pub times: usize,
    /// Distinct stage positions (5 denoiser stages, or 1 for raw).
    pub stages: usize,
    pub head: HeadKind,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.d_cls % self.reduction != 0 {
            return Err(ClassifierError::BadReduction {
                d_cls: self.d_cls,
                reduction: self.reduction,
            });
        }
        if self.d_cls % self.gn_groups != 0 {
            return Err(ClassifierError::BadGroups {
                d_cls: self.d_cls,
                groups: self.gn_groups,
            });
        }
        Ok(())
    }

    pub fn spatial(&self) -> usize {
        self.patch * self.patch
    }
}

#[derive(Debug, Clone)]
struct AwamParams {
    mlp1: Linear,
    mlp2: Linear,
    post: Conv2d,
}

#[derive(Debug, Clone)]
struct CtssfmParams {
    spe: Conv2d,
    spa: Conv2d,
    gn_gamma: ParamId,
    gn_beta: ParamId,
}

/// All classifier parameters. The denoiser is never part of this store's
/// "classifier." namespace, so freezing is checked by name prefix.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub cfg: ClassifierConfig,
    align: Vec<Conv2d>,
    awam: Vec<AwamParams>,
    ctssfm: Option<CtssfmParams>,
    fc: Linear,
}

impl ClassifierModel {
    pub fn init<E: Elem>(
        cfg: ClassifierConfig,
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ClassifierError> {
        cfg.validate()?;
        let d = cfg.d_cls;
        let mut align = Vec::new();
        for s in 0..cfg.stages {
            align.push(Conv2d::init(
                store,
                rng,
                &format!("classifier.align.stage{}", s + 1),
                1,
                cfg.feature_width,
                d,
            ));
        }
        let mut awam = Vec::new();
        let mut ctssfm = None;
        if cfg.head == HeadKind::Full {
            for s in 0..cfg.stages {
                let name = format!("classifier.awam.stage{}", s + 1);
                awam.push(AwamParams {
                    mlp1: Linear::init(store, rng, &format!("{name}.mlp1"), d, d / cfg.reduction),
                    mlp2: Linear::init(store, rng, &format!("{name}.mlp2"), d / cfg.reduction, d),
                    post: Conv2d::init(store, rng, &format!("{name}.post"), 1, d, d),
                });
            }
            ctssfm = Some(CtssfmParams {
                spe: Conv2d::init(store, rng, "classifier.ctssfm.spe", 1, d, d),
                spa: Conv2d::init(store, rng, "classifier.ctssfm.spa", 3, d, d),
                gn_gamma: store.add("classifier.ctssfm.gn.gamma", crate::nn::ones(&[d])),
                gn_beta: store.add("classifier.ctssfm.gn.beta", crate::nn::zeros(&[d])),
            });
        }
        let fc = Linear::init(store, rng, "classifier.fc", d, cfg.num_classes);
        Ok(ClassifierModel {
            cfg,
            align,
            awam,
            ctssfm,
            fc,
        })
    }

    /// Channel-attention gate: sigmoid(MLP(avg-pool) + MLP(max-pool)),
    /// one gate vector per instance.
    fn awam_gate<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        bind: &mut Binding,
        stage: usize,
        f: Var,
        spatial: usize,
    ) -> Var {
        let p = &self.awam[stage];
        let avg = tape.mean_blocks(f, spatial);
        let mx = tape.max_blocks(f, spatial);
        let mut shared = |tape: &mut Tape<E>, x: Var| {
            let h = p.mlp1.apply(tape, store, bind, x);
            let h = tape.relu(h);
            p.mlp2.apply(tape, store, bind, h)
        };
        let a = shared(tape, avg);
        let m = shared(tape, mx);
        let sum = tape.add(a, m);
        tape.sigmoid(sum)
    }

    /// AWAM refinement: F' = (F (x) M(F)) (x) Conv1x1(F (x) M(F)).
    fn awam_apply<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        bind: &mut Binding,
        stage: usize,
        f: Var,
        geom: &ConvGeom,
    ) -> Var {
        let spatial = geom.spatial();
        let gate = self.awam_gate(tape, store, bind, stage, f, spatial);
        let gated = tape.mul_blocks(f, gate, spatial);
        let conv = self.awam[stage].post.apply(tape, store, bind, gated, geom);
        tape.mul(gated, conv)
    }

    /// CTSSFM refinement: GELU(GroupNorm(Conv3x3(F + sigmoid(GAP(Conv1x1(F))) (x) F))).
    fn ctssfm_apply<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        bind: &mut Binding,
        f: Var,
        geom: &ConvGeom,
    ) -> Var {
        let p = self.ctssfm.as_ref().expect("full head");
        let spatial = geom.spatial();
        let c = p.spe.apply(tape, store, bind, f, geom);
        let gap = tape.mean_blocks(c, spatial);
        let gate = tape.sigmoid(gap);
        let gated = tape.mul_blocks(f, gate, spatial);
        let mixed = tape.add(f, gated);
        let conv = p.spa.apply(tape, store, bind, mixed, geom);
        let gamma = bind.var(tape, store, p.gn_gamma);
        let beta = bind.var(tape, store, p.gn_beta);
        let gn = tape.group_norm(conv, gamma, beta, self.cfg.gn_groups, spatial, 1e-5);
        tape.gelu(gn)
    }

    /// Full head over `stages x times` feature tensors laid out
    /// stage-major: features[s * times + j]. Returns [B, N] logits.
    pub fn classify<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        bind: &mut Binding,
        features: &[Var],
        geom: &ConvGeom,
    ) -> Var {
        let cfg = &self.cfg;
        assert_eq!(
            features.len(),
            cfg.stages * cfg.times,
            "feature tensor count"
        );
        let spatial = geom.spatial();
        let mut per_stage = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            let aligned: Vec<Var> = (0..cfg.times)
                .map(|j| {
                    self.align[s].apply(tape, store, bind, features[s * cfg.times + j], geom)
                })
                .collect();
            let summed = tape.add_n(&aligned);
            let fused = match cfg.head {
                HeadKind::Full => self.awam_apply(tape, store, bind, s, summed, geom),
                HeadKind::Linear => summed,
            };
            per_stage.push(fused);
        }
        let total = tape.add_n(&per_stage);
        let refined = match cfg.head {
            HeadKind::Full => self.ctssfm_apply(tape, store, bind, total, geom),
            HeadKind::Linear => total,
        };
        let pooled = tape.mean_blocks(refined, spatial);
        self.fc.apply(tape, store, bind, pooled)
    }

    pub fn param_ids(&self, store: &ParamStore<impl Elem>) -> Vec<ParamId> {
        store
            .ids()
            .filter(|id| store.name(*id).starts_with("classifier."))
            .collect()
    }
}

/// Mean cross-entropy of a logit batch against integer labels.
pub fn ce_loss<E: Elem>(logits: &Array2<E>, labels: &[usize]) -> Result<f64, ClassifierError> {
    if logits.nrows() != labels.len() {
        return Err(ClassifierError::BatchMismatch {
            logits: logits.nrows(),
            labels: labels.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ClassifierError::NonFinite);
    }
    let n = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(ClassifierError::LabelOutOfRange {
            label: bad,
            num_classes: n,
        });
    }
    let mut tape = Tape::<E>::new();
    let l = tape.constant(logits.clone().into_dyn());
    let loss = tape.cross_entropy(l, labels);
    Ok(tape.scalar(loss).as_f64())
}

/// How the forward-noise draw for feature extraction is seeded.
#[derive(Debug, Clone, Copy)]
pub enum NoisePolicy {
    /// Fresh draw per epoch (training-time augmentation).
    PerEpoch { seed: u64, epoch: u64 },
    /// Fixed evaluation stream, independent of batch composition.
    Eval { seed: u64 },
}

/// Extract frozen per-stage features of one instance batch at the selected
/// timesteps. Output is stage-major: `out[s * times + j]` holds stage s of
/// timestep `ts[j]`, shape [B*S, width]. Noise is seeded per (instance,
/// timestep) so results do not depend on batch composition.
pub fn extract_stage_features<E: Elem>(
    denoiser: &DenoiserModel,
    store: &ParamStore<E>,
    geom: &ConvGeom,
    sched: &NoiseSchedule,
    x0: &Array2<E>,
    instance_ids: &[u64],
    ts: &[usize],
    policy: NoisePolicy,
) -> Vec<Array2<E>> {
    let spatial = geom.spatial();
    let b = instance_ids.len();
    assert_eq!(x0.nrows(), b * spatial, "x0 rows");
    let normal = rand_distr::StandardNormal;
    let mut out: Vec<Array2<E>> = Vec::with_capacity(5 * ts.len());
    for _ in 0..5 * ts.len() {
        out.push(Array2::zeros((x0.nrows(), denoiser.cfg.width)));
    }
    for (j, &t) in ts.iter().enumerate() {
        // per-instance seeded noise
        let mut eps = Array2::<E>::zeros(x0.raw_dim());
        for (i, &inst) in instance_ids.iter().enumerate() {
            let stream = match policy {
                NoisePolicy::PerEpoch { epoch, .. } => crate::rng::CLASSIFY_EPOCH
                    .with(epoch.wrapping_mul(0x1_0000_0000) ^ inst ^ ((t as u64) << 20)),
                NoisePolicy::Eval { .. } => {
                    crate::rng::EVAL_NOISE.with(inst ^ ((t as u64) << 20))
                }
            };
            let seed = match policy {
                NoisePolicy::PerEpoch { seed, .. } | NoisePolicy::Eval { seed } => seed,
            };
            let mut rng = crate::rng::substream(seed, stream);
            let mut block = eps.slice_mut(ndarray::s![i * spatial..(i + 1) * spatial, ..]);
            block.mapv_inplace(|_| E::from_f64(normal.sample(&mut rng)));
        }
        let noisy = q_sample(x0, t, &eps, sched).expect("validated timestep");
        let mut tape = Tape::<E>::new();
        let mut bind = Binding::new();
        let x = tape.constant(noisy.x_t.into_dyn());
        let ts_batch = vec![t; b];
        let (_, stages) = denoiser.forward(&mut tape, store, &mut bind, x, &ts_batch, geom);
        for (s, var) in stages.all().into_iter().enumerate() {
            out[s * ts.len() + j] = tape
                .value(var)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2-d stage feature");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::diffusion::make_schedule;
    use crate::nn::{check_param_grads, zeros};
    use crate::rng::{substream, CLASSIFIER_INIT, DENOISER_INIT};
    use ndarray::arr2;
    use rand::Rng;
    use std::collections::HashMap;

    fn tiny_cfg(head: HeadKind) -> ClassifierConfig {
        ClassifierConfig {
            num_classes: 3,
            d_cls: 8,
            reduction: 4,
            gn_groups: 2,
            patch: 3,
            feature_width: 6,
            times: 2,
            stages: 2,
            head,
        }
    }

    fn rand2(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = substream(seed, CLASSIFIER_INIT.with(3));
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg(HeadKind::Full);
        cfg.reduction = 3;
        assert!(matches!(
            cfg.validate(),
            Err(ClassifierError::BadReduction { .. })
        ));
        let mut cfg = tiny_cfg(HeadKind::Full);
        cfg.gn_groups = 3;
        assert!(matches!(
            cfg.validate(),
            Err(ClassifierError::BadGroups { .. })
        ));
    }

    #[test]
    fn logits_have_class_count_and_eval_is_deterministic() {
        for head in [HeadKind::Full, HeadKind::Linear] {
            let cfg = tiny_cfg(head);
            let mut store = ParamStore::<f64>::new();
            let mut rng = substream(1, CLASSIFIER_INIT);
            let model = ClassifierModel::init(cfg.clone(), &mut store, &mut rng).unwrap();
            let geom = ConvGeom::new(cfg.patch, cfg.patch, 3);
            let feats: Vec<Array2<f64>> = (0..cfg.stages * cfg.times)
                .map(|i| rand2(2 * cfg.spatial(), cfg.feature_width, 50 + i as u64))
                .collect();
            let run = || {
                let mut tape = Tape::<f64>::new();
                let mut bind = Binding::new();
                let vars: Vec<Var> = feats
                    .iter()
                    .map(|f| tape.constant(f.clone().into_dyn()))
                    .collect();
                let logits = model.classify(&mut tape, &store, &mut bind, &vars, &geom);
                tape.value(logits).clone()
            };
            let a = run();
            assert_eq!(a.shape(), &[2, cfg.num_classes]);
            assert_eq!(a, run());
        }
    }

    #[test]
    fn awam_zero_input_gives_zero_output() {
        let cfg = tiny_cfg(HeadKind::Full);
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(2, CLASSIFIER_INIT);
        let model = ClassifierModel::init(cfg.clone(), &mut store, &mut rng).unwrap();
        let geom = ConvGeom::new(cfg.patch, cfg.patch, 3);
        let mut tape = Tape::<f64>::new();
        let mut bind = Binding::new();
        let f = tape.constant(Array2::<f64>::zeros((cfg.spatial(), cfg.d_cls)).into_dyn());
        let out = model.awam_apply(&mut tape, &store, &mut bind, 0, f, &geom);
        let max = tape.value(out).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert_eq!(max, 0.0);
    }

    #[test]
    fn awam_zero_mlp_fixed_weight_oracle() {
        // MLP == 0 -> gate is exactly 0.5; with an identity post conv the
        // output is (0.5 F) * (0.5 F)
        let cfg = tiny_cfg(HeadKind::Full);
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(3, CLASSIFIER_INIT);
        let model = ClassifierModel::init(cfg.clone(), &mut store, &mut rng).unwrap();
        for name in [
            "classifier.awam.stage1.mlp1.weight",
            "classifier.awam.stage1.mlp2.weight",
        ] {
            let id = store.id(name).unwrap();
            let shape = store.value(id).shape().to_vec();
            store.set(id, zeros(&shape));
        }
        let eye_id = store.id("classifier.awam.stage1.post.weight").unwrap();
        store.set(eye_id, Array2::<f64>::eye(cfg.d_cls).into_dyn());

        let geom = ConvGeom::new(cfg.patch, cfg.patch, 3);
        let f0 = rand2(cfg.spatial(), cfg.d_cls, 60);
        let mut tape = Tape::<f64>::new();
        let mut bind = Binding::new();
        let f = tape.constant(f0.clone().into_dyn());
        let gate = model.awam_gate(&mut tape, &store, &mut bind, 0, f, cfg.spatial());
        for v in tape.value(gate).iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let out = model.awam_apply(&mut tape, &store, &mut bind, 0, f, &geom);
        let want = f0.mapv(|v| 0.25 * v * v);
        let got = tape
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn awam_gate_in_unit_interval_and_spatially_invariant() {
        let cfg = tiny_cfg(HeadKind::Full);
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(4, CLASSIFIER_INIT);
        let model = ClassifierModel::init(cfg.clone(), &mut store, &mut rng).unwrap();
        let f0 = rand2(cfg.spatial(), cfg.d_cls, 61);
        let gate_of = |f: Array2<f64>| {
            let mut tape = Tape::<f64>::new();
            let mut bind = Binding::new();
            let fv = tape.constant(f.into_dyn());
            let g = model.awam_gate(&mut tape, &store, &mut bind, 0, fv, cfg.spatial());
            tape.value(g).clone()
        };
        let base = gate_of(f0.clone());
        for v in base.iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }
        // permute spatial rows: both pools are permutation-invariant
        let mut rng = substream(5, CLASSIFIER_INIT);
        let mut perm: Vec<usize> = (0..cfg.spatial()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let mut permuted = Array2::<f64>::zeros(f0.raw_dim());
        for (i, &p) in perm.iter().enumerate() {
            permuted.row_mut(i).assign(&f0.row(p));
        }
        let shuffled = gate_of(permuted);
        for (a, b) in base.iter().zip(shuffled.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ctssfm_zero_propagation_and_composition_oracle() {
        let cfg = tiny_cfg(HeadKind::Full);
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(6, CLASSIFIER_INIT);
        let model = ClassifierModel::init(cfg.clone(), &mut store, &mut rng).unwrap();
        let geom = ConvGeom::new(cfg.patch, cfg.patch, 3);

        // zero input propagates to zero (biases and GN beta are zero)
        let mut tape = Tape::<f64>::new();
        let mut bind = Binding::new();
        let f = tape.constant(Array2::<f64>::zeros((cfg.spatial(), cfg.d_cls)).into_dyn());
        let out = model.ctssfm_apply(&mut tape, &store, &mut bind, f, &geom);
        let max = tape.value(out).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert_eq!(max, 0.0);

        // step-by-step composition oracle on random input
        let f0 = rand2(cfg.spatial(), cfg.d_cls, 62);
        let mut tape = Tape::<f64>::new();
        let mut bind = Binding::new();
        let f = tape.constant(f0.clone().into_dyn());
        let got_var = model.ctssfm_apply(&mut tape, &store, &mut bind, f, &geom);
        let got = tape.value(got_var).clone();

        let oracle = {
            let mut tape = Tape::<f64>::new();
            let mut bind = Binding::new();
            let p = model.ctssfm.as_ref().unwrap();
            let f = tape.constant(f0.clone().into_dyn());
            let c = p.spe.apply(&mut tape, &store, &mut bind, f, &geom);
            let gap = tape.mean_blocks(c, cfg.spatial());
            let gate = tape.sigmoid(gap);
            let gated = tape.mul_blocks(f, gate, cfg.spatial());
            let mixed = tape.add(f, gated);
            let conv = p.spa.apply(&mut tape, &store, &mut bind, mixed, &geom);
            let gamma = bind.var(&mut tape, &store, p.gn_gamma);
            let beta = bind.var(&mut tape, &store, p.gn_beta);
            let gn = tape.group_norm(conv, gamma, beta, cfg.gn_groups, cfg.spatial(), 1e-5);
            let out = tape.gelu(gn);
            tape.value(out).clone()
        };
        for (a, b) in got.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ctssfm_saturated_gate_doubles_features() {
        let cfg = tiny_cfg(HeadKind::Full);
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(7, CLASSIFIER_INIT);
        let model = ClassifierModel::init(cfg.clone(), &mut store, &mut rng).unwrap();
        // push the spectral gate to sigmoid(large) ~= 1
        let bias = store.id("classifier.ctssfm.spe.bias").unwrap();
        store.set(bias, crate::nn::full(&[cfg.d_cls], 50.0));
        let geom = ConvGeom::new(cfg.patch, cfg.patch, 3);
        let f0 = rand2(cfg.spatial(), cfg.d_cls, 63);
        let p = model.ctssfm.as_ref().unwrap();
        let mut tape = Tape::<f64>::new();
        let mut bind = Binding::new();
        let f = tape.constant(f0.clone().into_dyn());
        let c = p.spe.apply(&mut tape, &store, &mut bind, f, &geom);
        let gap = tape.mean_blocks(c, cfg.spatial());
        let gate = tape.sigmoid(gap);
        let gated = tape.mul_blocks(f, gate, cfg.spatial());
        let mixed = tape.add(f, gated);
        let got = tape
            .value(mixed)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for (a, b) in got.iter().zip(f0.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_timestep_features_scale_the_stage_sum() {
        let cfg = tiny_cfg(HeadKind::Full);
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(8, CLASSIFIER_INIT);
        let model = ClassifierModel::init(cfg.clone(), &mut store, &mut rng).unwrap();
        let geom = ConvGeom::new(cfg.patch, cfg.patch, 3);
        let f0 = rand2(cfg.spatial(), cfg.feature_width, 64);

        // sum of `times` aligned copies == times * one aligned copy
        let mut tape = Tape::<f64>::new();
        let mut bind = Binding::new();
        let f = tape.constant(f0.clone().into_dyn());
        let aligned: Vec<Var> = (0..cfg.times)
            .map(|_| model.align[0].apply(&mut tape, &store, &mut bind, f, &geom))
            .collect();
        let summed = tape.add_n(&aligned);
        let single = model.align[0].apply(&mut tape, &store, &mut bind, f, &geom);
        let scaled = tape.scale(single, cfg.times as f64);
        let (a, b) = (tape.value(summed), tape.value(scaled));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let cfg = tiny_cfg(HeadKind::Full);
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(9, CLASSIFIER_INIT);
        let model = ClassifierModel::init(cfg.clone(), &mut store, &mut rng).unwrap();
        let geom = ConvGeom::new(cfg.patch, cfg.patch, 3);
        let feats: Vec<Array2<f64>> = (0..cfg.stages * cfg.times)
            .map(|i| rand2(2 * cfg.spatial(), cfg.feature_width, 70 + i as u64))
            .collect();
        let labels = vec![0usize, 2];

        let loss_fn = {
            let model = model.clone();
            let geom = geom.clone();
            let feats = feats.clone();
            let labels = labels.clone();
            move |s: &ParamStore<f64>| {
                let mut tape = Tape::<f64>::new();
                let mut bind = Binding::new();
                let vars: Vec<Var> = feats
                    .iter()
                    .map(|f| tape.constant(f.clone().into_dyn()))
                    .collect();
                let logits = model.classify(&mut tape, s, &mut bind, &vars, &geom);
                let l = tape.cross_entropy(logits, &labels);
                tape.scalar(l)
            }
        };
        let mut tape = Tape::<f64>::new();
        let mut bind = Binding::new();
        let vars: Vec<Var> = feats
            .iter()
            .map(|f| tape.constant(f.clone().into_dyn()))
            .collect();
        let logits = model.classify(&mut tape, &store, &mut bind, &vars, &geom);
        let l = tape.cross_entropy(logits, &labels);
        let mut grads = tape.backward(l);
        let analytic: HashMap<_, _> = bind.take_grads(&mut grads).into_iter().collect();
        let candidates = model.param_ids(&store);
        let report = check_param_grads(
            &mut store,
            &candidates,
            &analytic,
            24,
            1e-6,
            1e-4,
            13,
            &loss_fn,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4);
    }

    #[test]
    fn ce_loss_examples() {
        let logits = arr2(&[[1.0, 1.0, 1.0, 1.0]]);
        assert!((ce_loss(&logits, &[2]).unwrap() - 4.0f64.ln()).abs() < 1e-12);

        // one-hot-correct with margin 10 against one competitor
        let logits = arr2(&[[10.0, 0.0]]);
        assert!(ce_loss(&logits, &[0]).unwrap() < 1e-4);

        // class permutation symmetry
        let logits = arr2(&[[0.3, -0.2, 1.1], [0.9, 0.4, -0.7]]);
        let base = ce_loss(&logits, &[2, 0]).unwrap();
        let permuted = arr2(&[[1.1, -0.2, 0.3], [-0.7, 0.4, 0.9]]);
        let got = ce_loss(&permuted, &[0, 2]).unwrap();
        assert!((base - got).abs() < 1e-12);

        assert!(matches!(
            ce_loss(&logits, &[3, 0]),
            Err(ClassifierError::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn feature_extraction_counts_and_eval_determinism() {
        let dcfg = DenoiserConfig {
            patch: 3,
            channels: 4,
            width: 8,
            groups: 2,
            time_dim: 8,
            layer_scale_init: 1e-4,
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(10, DENOISER_INIT);
        let den = DenoiserModel::init(dcfg.clone(), &mut store, &mut rng).unwrap();
        let geom = ConvGeom::new(3, 3, 3);
        let sched = make_schedule(10, 0.01, 0.3).unwrap();
        let x0 = rand2(2 * 9, 4, 80).mapv(f64::abs);
        let ts = [1usize, 3, 5, 7, 9];

        let run = |policy: NoisePolicy| {
            extract_stage_features(&den, &store, &geom, &sched, &x0, &[11, 12], &ts, policy)
        };
        let a = run(NoisePolicy::Eval { seed: 5 });
        assert_eq!(a.len(), 25);
        for f in &a {
            assert_eq!(f.dim(), (2 * 9, dcfg.width));
        }
        let b = run(NoisePolicy::Eval { seed: 5 });
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        // per-epoch noise differs across epochs
        let c = run(NoisePolicy::PerEpoch { seed: 5, epoch: 0 });
        let d = run(NoisePolicy::PerEpoch { seed: 5, epoch: 1 });
        assert_ne!(c[0], d[0]);

        // batch composition does not change eval features
        let solo = extract_stage_features(
            &den,
            &store,
            &geom,
            &sched,
            &x0.slice(ndarray::s![9..18, ..]).to_owned(),
            &[12],
            &ts,
            NoisePolicy::Eval { seed: 5 },
        );
        let from_batch = a[0].slice(ndarray::s![9..18, ..]).to_owned();
        assert_eq!(solo[0], from_batch);
    }
}
