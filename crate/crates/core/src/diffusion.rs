//! Closed-form diffusion machinery: the beta schedule, forward q-sampling,
//! posterior variance, ancestral reverse steps, and the one-shot clean-signal
//! estimate from a noise prediction.

use ndarray::{Array, Array2, Dimension};
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::elem::Elem;
use crate::rng::{substream, StreamId, SAMPLE_LOOP};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("total timesteps {t_total} must be >= 1")]
    BadTotal { t_total: usize },
    #[error("beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1")]
    BadBetaRange { beta_start: f64, beta_end: f64 },
    #[error("timestep {t} outside [1, {t_max}]")]
    TimestepOutOfRange { t: usize, t_max: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("final reverse step (t = 1) requires z = 0")]
    NonzeroFinalNoise,
    #[error("denoiser output shape {got:?} does not match input {want:?}")]
    PredictorShape { got: Vec<usize>, want: Vec<usize> },
}

/// Per-timestep β, α = 1−β, and ᾱ = ∏ α tables, 1-based timesteps. The
/// convention ᾱ₀ = 1 makes the t = 1 posterior variance exactly zero.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.t_max() {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                t_max: self.t_max(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t with ᾱ₀ = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// Linear β schedule from `beta_start` to `beta_end` over `t_total` steps.
pub fn make_schedule(
    t_total: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if t_total < 1 {
        return Err(DiffusionError::BadTotal { t_total });
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadBetaRange {
            beta_start,
            beta_end,
        });
    }
    let beta: Vec<f64> = if t_total == 1 {
        vec![beta_start]
    } else {
        (0..t_total)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_total - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_total);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

/// A forward-noised instance together with the Gaussian draw that produced it.
#[derive(Debug, Clone)]
pub struct NoisyInstance<E: Elem, D: Dimension> {
    pub x_t: Array<E, D>,
    pub t: usize,
    pub eps: Array<E, D>,
}

fn shape_err<E: Elem, D: Dimension>(
    a: &Array<E, D>,
    b: &Array<E, D>,
) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε.
pub fn q_sample<E: Elem, D: Dimension>(
    x0: &Array<E, D>,
    t: usize,
    eps: &Array<E, D>,
    sched: &NoiseSchedule,
) -> Result<NoisyInstance<E, D>, DiffusionError> {
    sched.check(t)?;
    shape_err(x0, eps)?;
    let ab = sched.alpha_bar(t);
    let c0 = E::from_f64(ab.sqrt());
    let c1 = E::from_f64((1.0 - ab).sqrt());
    let mut x_t = x0.mapv(|v| v * c0);
    x_t.zip_mut_with(eps, |x, &e| *x = *x + c1 * e);
    Ok(NoisyInstance {
        x_t,
        t,
        eps: eps.clone(),
    })
}

/// σ_t² = ((1−ᾱ_{t−1}) / (1−ᾱ_t)) · β_t, zero at t = 1.
pub fn posterior_variance(t: usize, sched: &NoiseSchedule) -> Result<f64, DiffusionError> {
    sched.check(t)?;
    let num = 1.0 - sched.alpha_bar(t - 1);
    let den = 1.0 - sched.alpha_bar(t);
    Ok(num / den * sched.beta(t))
}

/// One ancestral reverse step:
/// x_{t−1} = (x_t − (β_t/√(1−ᾱ_t))·ε̂)/√α_t + σ_t·z.
pub fn p_sample_step<E: Elem, D: Dimension>(
    x_t: &Array<E, D>,
    eps_hat: &Array<E, D>,
    t: usize,
    z: &Array<E, D>,
    sched: &NoiseSchedule,
) -> Result<Array<E, D>, DiffusionError> {
    sched.check(t)?;
    shape_err(x_t, eps_hat)?;
    shape_err(x_t, z)?;
    if t == 1 && z.iter().any(|&v| v != E::zero()) {
        return Err(DiffusionError::NonzeroFinalNoise);
    }
    let ab = sched.alpha_bar(t);
    let inv_sqrt_alpha = E::from_f64(1.0 / sched.alpha(t).sqrt());
    let eps_coef = E::from_f64(sched.beta(t) / (1.0 - ab).sqrt());
    let sigma = E::from_f64(posterior_variance(t, sched)?.sqrt());
    let mut out = x_t.clone();
    ndarray::Zip::from(&mut out)
        .and(eps_hat)
        .and(z)
        .for_each(|o, &e, &n| {
            *o = (*o - eps_coef * e) * inv_sqrt_alpha + sigma * n;
        });
    Ok(out)
}

/// Tweedie-style one-shot estimate x̂₀ = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t; exact
/// inverse of `q_sample` when ε̂ is the true draw.
pub fn predict_x0<E: Elem, D: Dimension>(
    x_t: &Array<E, D>,
    eps_hat: &Array<E, D>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array<E, D>, DiffusionError> {
    sched.check(t)?;
    shape_err(x_t, eps_hat)?;
    let ab = sched.alpha_bar(t);
    let c1 = E::from_f64((1.0 - ab).sqrt());
    let inv = E::from_f64(1.0 / ab.sqrt());
    let mut out = x_t.clone();
    out.zip_mut_with(eps_hat, |x, &e| *x = (*x - c1 * e) * inv);
    Ok(out)
}

/// Noise predictor abstraction: the trained network, or a stub in tests.
/// `x_t` stacks instances row-wise (`spatial` rows each); `ts` gives the
/// timestep per instance.
pub trait NoisePredictor<E: Elem> {
    fn predict_batch(&self, x_t: &Array2<E>, ts: &[usize], spatial: usize) -> Array2<E>;
}

/// Ancestral sampling from pure noise down to t = 1 for a single instance of
/// `spatial` rows by `channels` columns. All Gaussian draws come from the
/// (seed, SAMPLE_LOOP) substream.
pub fn sample_loop<E: Elem>(
    denoiser: &dyn NoisePredictor<E>,
    spatial: usize,
    channels: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<E>, DiffusionError> {
    let mut rng = substream(seed, SAMPLE_LOOP);
    let normal = StandardNormal;
    let mut draw = |rows: usize| {
        Array2::<E>::from_shape_fn((rows, channels), |_| {
            E::from_f64(normal.sample(&mut rng))
        })
    };
    let mut x = draw(spatial);
    for t in (1..=sched.t_max()).rev() {
        let eps_hat = denoiser.predict_batch(&x, &[t], spatial);
        if eps_hat.shape() != x.shape() {
            return Err(DiffusionError::PredictorShape {
                got: eps_hat.shape().to_vec(),
                want: x.shape().to_vec(),
            });
        }
        let z = if t > 1 {
            draw(spatial)
        } else {
            Array2::<E>::zeros((spatial, channels))
        };
        x = p_sample_step(&x, &eps_hat, t, &z, sched)?;
    }
    Ok(x)
}

/// Substream used by `sample_loop`, exposed so callers can reproduce draws.
pub const SAMPLE_STREAM: StreamId = SAMPLE_LOOP;
