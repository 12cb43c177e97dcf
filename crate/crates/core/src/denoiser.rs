//! The staged noise-prediction network: an embedding convolution, two
//! spatial self-attention denoising blocks, a bridge convolution, two
//! spectral-group self-attention denoising blocks, and a 1x1 output head.
//! Also hosts the six-layer contrastive encoder used during pretraining.
//!
//! Activations are `[B*S, width]` matrices (S = P*P spatial tokens per
//! instance); every stage keeps the full spatial extent.

use ndarray::{Array2, ArrayD};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::diffusion::NoisePredictor;
use crate::elem::Elem;
use crate::nn::{full, randn_scaled, zeros, Binding, Conv2d, LayerNorm, Linear, ParamStore};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("time embedding dimension {d} must be even")]
    OddTimeDim { d: usize },
    #[error("width {width} not divisible by group count {groups}")]
    BadGroups { width: usize, groups: usize },
    #[error("patch size {p} must be odd and >= 1")]
    BadPatch { p: usize },
}

/// Architecture knobs. The paper fixes the block layout; widths, group count
/// and time-embedding size are configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub patch: usize,
    pub channels: usize,
    pub width: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub layer_scale_init: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            patch: 7,
            channels: 16,
            width: 64,
            groups: 4,
            time_dim: 64,
            layer_scale_init: 1e-4,
        }
    }
}

impl DenoiserConfig {
    pub fn spatial(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.patch % 2 == 0 || self.patch == 0 {
            return Err(DenoiserError::BadPatch { p: self.patch });
        }
        if self.time_dim % 2 != 0 {
            return Err(DenoiserError::OddTimeDim { d: self.time_dim });
        }
        if self.width % self.groups != 0 {
            return Err(DenoiserError::BadGroups {
                width: self.width,
                groups: self.groups,
            });
        }
        Ok(())
    }
}

/// Sinusoidal timestep embedding: d/2 cosines followed by d/2 sines of
/// t / 10000^(2i/d). Values lie in [-1, 1].
pub fn time_embedding(ts: &[usize], d: usize) -> Result<Array2<f64>, DenoiserError> {
    if d % 2 != 0 {
        return Err(DenoiserError::OddTimeDim { d });
    }
    let half = d / 2;
    let mut out = Array2::<f64>::zeros((ts.len(), d));
    for (row, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let arg = t as f64 * freq;
            out[[row, i]] = arg.cos();
            out[[row, half + i]] = arg.sin();
        }
    }
    Ok(out)
}

/// Timestep modulation: a * (1 + gamma) + kappa, broadcast per channel over
/// each instance's rows.
pub fn scale_shift<E: Elem>(
    tape: &mut Tape<E>,
    a: Var,
    gamma: Var,
    kappa: Var,
    block: usize,
) -> Var {
    let ones = ArrayD::ones(tape.value(gamma).raw_dim());
    let one_plus = tape.add_const(gamma, &ones);
    let scaled = tape.mul_blocks(a, one_plus, block);
    tape.add_blocks(scaled, kappa, block)
}

/// Spatial self-attention over the P*P tokens of each instance; the softmax
/// scale is 1/sqrt(channel width).
pub fn ssa<E: Elem>(
    tape: &mut Tape<E>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    spatial: usize,
) -> Var {
    let width = tape.value(x).shape()[1];
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = tape.matmul(x, wv);
    tape.attention_blocks(q, k, v, spatial, 1.0 / (width as f64).sqrt())
}

/// Spectral group self-attention: tokens are transposed so each channel is a
/// token of dimension P*P, projections are shared across groups, and
/// attention runs within consecutive groups of C_g = width/groups channels
/// with softmax scale 1/sqrt(C_g).
pub fn sgsa<E: Elem>(
    tape: &mut Tape<E>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    spatial: usize,
    groups: usize,
) -> Var {
    let width = tape.value(x).shape()[1];
    assert!(width % groups == 0, "width {width} vs groups {groups}");
    let group_width = width / groups;
    let tokens = tape.transpose_blocks(x, spatial); // [B*width, spatial]
    let q = tape.matmul(tokens, wq);
    let k = tape.matmul(tokens, wk);
    let v = tape.matmul(tokens, wv);
    let attended = tape.attention_blocks(q, k, v, group_width, 1.0 / (group_width as f64).sqrt());
    tape.transpose_blocks(attended, width) // back to [B*spatial, width]
}

/// One denoising block: local mixing (depthwise or pointwise convolution),
/// layer norm, timestep modulation, attention, LayerScale, residual add.
#[derive(Debug, Clone)]
struct DenoiseBlock {
    mix_w: crate::nn::ParamId,
    mix_b: crate::nn::ParamId,
    norm: LayerNorm,
    time: Linear,
    wq: crate::nn::ParamId,
    wk: crate::nn::ParamId,
    wv: crate::nn::ParamId,
    layer_scale: crate::nn::ParamId,
    spatial_attention: bool,
}

impl DenoiseBlock {
    fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &DenoiserConfig,
        spatial_attention: bool,
    ) -> Self {
        let d = cfg.width;
        let (mix_w, mix_b) = if spatial_attention {
            // depthwise 3x3
            let std = (2.0 / 9.0f64).sqrt();
            (
                store.add(&format!("{name}.dwconv.weight"), randn_scaled(rng, &[9, d], std)),
                store.add(&format!("{name}.dwconv.bias"), zeros(&[d])),
            )
        } else {
            // pointwise 1x1
            let std = (2.0 / d as f64).sqrt();
            (
                store.add(&format!("{name}.pwconv.weight"), randn_scaled(rng, &[d, d], std)),
                store.add(&format!("{name}.pwconv.bias"), zeros(&[d])),
            )
        };
        let norm = LayerNorm::init(store, &format!("{name}.norm"), d);
        let time = Linear::init(store, rng, &format!("{name}.time"), cfg.time_dim, 2 * d);
        let token_dim = if spatial_attention { d } else { cfg.spatial() };
        let std = (1.0 / token_dim as f64).sqrt();
        let wq = store.add(&format!("{name}.attn.wq"), randn_scaled(rng, &[token_dim, token_dim], std));
        let wk = store.add(&format!("{name}.attn.wk"), randn_scaled(rng, &[token_dim, token_dim], std));
        let wv = store.add(&format!("{name}.attn.wv"), randn_scaled(rng, &[token_dim, token_dim], std));
        let layer_scale = store.add(
            &format!("{name}.layer_scale"),
            full(&[d], cfg.layer_scale_init),
        );
        DenoiseBlock {
            mix_w,
            mix_b,
            norm,
            time,
            wq,
            wk,
            wv,
            layer_scale,
            spatial_attention,
        }
    }

    fn apply<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        bind: &mut Binding,
        x: Var,
        t_emb: Var,
        geom: &ConvGeom,
        cfg: &DenoiserConfig,
    ) -> Var {
        let spatial = cfg.spatial();
        let mixed = if self.spatial_attention {
            let w = bind.var(tape, store, self.mix_w);
            let y = tape.depthwise(x, w, geom);
            let b = bind.var(tape, store, self.mix_b);
            tape.add_bias(y, b)
        } else {
            let w = bind.var(tape, store, self.mix_w);
            let y = tape.matmul(x, w);
            let b = bind.var(tape, store, self.mix_b);
            tape.add_bias(y, b)
        };
        let normed = self.norm.apply(tape, store, bind, mixed);

        // (gamma, kappa) from the timestep MLP: SiLU then linear, chunked
        let activated = tape.silu(t_emb);
        let cond = self.time.apply(tape, store, bind, activated);
        let gamma = tape.slice_cols(cond, 0, cfg.width);
        let kappa = tape.slice_cols(cond, cfg.width, cfg.width);
        let modulated = scale_shift(tape, normed, gamma, kappa, spatial);

        let wq = bind.var(tape, store, self.wq);
        let wk = bind.var(tape, store, self.wk);
        let wv = bind.var(tape, store, self.wv);
        let attended = if self.spatial_attention {
            ssa(tape, modulated, wq, wk, wv, spatial)
        } else {
            sgsa(tape, modulated, wq, wk, wv, spatial, cfg.groups)
        };
        let ls = bind.var(tape, store, self.layer_scale);
        let scaled = tape.scale_channels(attended, ls);
        tape.add(x, scaled)
    }
}

/// Per-stage activations exposed for the classifier. `final_` is the
/// pre-head activation.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    pub stage1: Var,
    pub stage2: Var,
    pub stage3: Var,
    pub stage4: Var,
    pub final_: Var,
}

impl StageVars {
    pub fn all(&self) -> [Var; 5] {
        [self.stage1, self.stage2, self.stage3, self.stage4, self.final_]
    }

    pub fn names() -> [&'static str; 5] {
        ["stage1", "stage2", "stage3", "stage4", "final"]
    }
}

/// The staged noise-prediction network.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub cfg: DenoiserConfig,
    embed: Conv2d,
    embed_norm: LayerNorm,
    ssad1: DenoiseBlock,
    ssad2: DenoiseBlock,
    bridge: Conv2d,
    bridge_norm: LayerNorm,
    sgsad1: DenoiseBlock,
    sgsad2: DenoiseBlock,
    head: Conv2d,
}

impl DenoiserModel {
    pub fn init<E: Elem>(
        cfg: DenoiserConfig,
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, DenoiserError> {
        cfg.validate()?;
        let d = cfg.width;
        let embed = Conv2d::init(store, rng, "denoiser.embed", 3, cfg.channels, d);
        let embed_norm = LayerNorm::init(store, "denoiser.embed.norm", d);
        let ssad1 = DenoiseBlock::init(store, rng, "denoiser.ssad1", &cfg, true);
        let ssad2 = DenoiseBlock::init(store, rng, "denoiser.ssad2", &cfg, true);
        let bridge = Conv2d::init(store, rng, "denoiser.bridge", 3, d, d);
        let bridge_norm = LayerNorm::init(store, "denoiser.bridge.norm", d);
        let sgsad1 = DenoiseBlock::init(store, rng, "denoiser.sgsad1", &cfg, false);
        let sgsad2 = DenoiseBlock::init(store, rng, "denoiser.sgsad2", &cfg, false);
        let head = Conv2d::init(store, rng, "denoiser.head", 1, d, cfg.channels);
        Ok(DenoiserModel {
            cfg,
            embed,
            embed_norm,
            ssad1,
            ssad2,
            bridge,
            bridge_norm,
            sgsad1,
            sgsad2,
            head,
        })
    }

    /// Forward pass over a row-stacked batch. `x_t` is `[B*S, C]`, `ts` has
    /// one timestep per instance. Returns the noise prediction (same shape as
    /// the input) and the five stage activations.
    pub fn forward<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        bind: &mut Binding,
        x_t: Var,
        ts: &[usize],
        geom: &ConvGeom,
    ) -> (Var, StageVars) {
        let cfg = &self.cfg;
        let rows = tape.value(x_t).shape()[0];
        assert_eq!(
            rows,
            ts.len() * cfg.spatial(),
            "rows {rows} != {} instances x {} spatial",
            ts.len(),
            cfg.spatial()
        );
        let emb64 = time_embedding(ts, cfg.time_dim).expect("config validated");
        let t_emb = tape.constant(emb64.mapv(E::from_f64).into_dyn());

        let e = self.embed.apply(tape, store, bind, x_t, geom);
        let e = self.embed_norm.apply(tape, store, bind, e);
        let e = tape.gelu(e);

        let s1 = self.ssad1.apply(tape, store, bind, e, t_emb, geom, cfg);
        let s2 = self.ssad2.apply(tape, store, bind, s1, t_emb, geom, cfg);

        let b = self.bridge.apply(tape, store, bind, s2, geom);
        let b = self.bridge_norm.apply(tape, store, bind, b);
        let b = tape.gelu(b);

        let s3 = self.sgsad1.apply(tape, store, bind, b, t_emb, geom, cfg);
        let s4 = self.sgsad2.apply(tape, store, bind, s3, t_emb, geom, cfg);

        let eps_hat = self.head.apply(tape, store, bind, s4, geom);
        (
            eps_hat,
            StageVars {
                stage1: s1,
                stage2: s2,
                stage3: s3,
                stage4: s4,
                final_: s4,
            },
        )
    }

    pub fn param_ids(&self, store: &ParamStore<impl Elem>) -> Vec<crate::nn::ParamId> {
        store
            .ids()
            .filter(|id| store.name(*id).starts_with("denoiser."))
            .collect()
    }
}

/// Forward-only adapter implementing [`NoisePredictor`] for a frozen model.
pub struct DenoiserPredictor<'a, E: Elem> {
    pub model: &'a DenoiserModel,
    pub store: &'a ParamStore<E>,
    pub geom: &'a ConvGeom,
}

impl<E: Elem> NoisePredictor<E> for DenoiserPredictor<'_, E> {
    fn predict_batch(&self, x_t: &Array2<E>, ts: &[usize], spatial: usize) -> Array2<E> {
        assert_eq!(spatial, self.model.cfg.spatial());
        let mut tape = Tape::<E>::new();
        let mut bind = Binding::new();
        let x = tape.constant(x_t.clone().into_dyn());
        let (eps_hat, _) = self
            .model
            .forward(&mut tape, self.store, &mut bind, x, ts, self.geom);
        tape.value(eps_hat)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d prediction")
    }
}

/// Contrastive-encoder convolution widths, first to sixth layer.
pub const ENCODER_WIDTHS: [usize; 6] = [96, 96, 128, 128, 256, 256];
/// Embedding dimension produced by the encoder head.
pub const ENCODER_EMBED_DIM: usize = 256;

/// Six conv(3x3)-layernorm-GELU layers, spatial average pooling, and a final
/// linear layer onto a 256-dimensional embedding.
#[derive(Debug, Clone)]
pub struct ContrastiveEncoder {
    convs: Vec<Conv2d>,
    norms: Vec<LayerNorm>,
    fc: Linear,
}

impl ContrastiveEncoder {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        channels: usize,
    ) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = channels;
        for (i, &cout) in ENCODER_WIDTHS.iter().enumerate() {
            convs.push(Conv2d::init(
                store,
                rng,
                &format!("encoder.conv{}", i + 1),
                3,
                cin,
                cout,
            ));
            norms.push(LayerNorm::init(
                store,
                &format!("encoder.conv{}.norm", i + 1),
                cout,
            ));
            cin = cout;
        }
        let fc = Linear::init(
            store,
            rng,
            "encoder.fc",
            ENCODER_WIDTHS[5],
            ENCODER_EMBED_DIM,
        );
        ContrastiveEncoder { convs, norms, fc }
    }

    /// `x` is `[B*S, C]`; returns `[B, 256]` embeddings.
    pub fn forward<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        bind: &mut Binding,
        x: Var,
        geom: &ConvGeom,
    ) -> Var {
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.apply(tape, store, bind, h, geom);
            h = norm.apply(tape, store, bind, h);
            h = tape.gelu(h);
        }
        let pooled = tape.mean_blocks(h, geom.spatial());
        self.fc.apply(tape, store, bind, pooled)
    }

    pub fn param_ids(&self, store: &ParamStore<impl Elem>) -> Vec<crate::nn::ParamId> {
        store
            .ids()
            .filter(|id| store.name(*id).starts_with("encoder."))
            .collect()
    }
}
