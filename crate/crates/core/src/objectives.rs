//! Pretraining losses: logarithmic absolute error on the noise prediction,
//! the same form on the one-shot reconstruction, InfoNCE over paired
//! embeddings, and the homoscedastic-uncertainty compound loss with learnable
//! log-variance weights.

use ndarray::{Array, Array2, Dimension};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::elem::Elem;
use crate::nn::{zeros, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite input")]
    NonFinite,
    #[error("temperature {tau} must be positive")]
    BadTau { tau: f64 },
    #[error("embedding row {row} has zero norm; cosine similarity undefined")]
    ZeroNormRow { row: usize },
    #[error("empty batch")]
    EmptyBatch,
}

/// Learnable log-variance weights of the two reconstruction-style tasks,
/// initialized to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyWeights {
    pub w_diff: f64,
    pub w_rec: f64,
}

impl Default for UncertaintyWeights {
    fn default() -> Self {
        UncertaintyWeights {
            w_diff: 0.0,
            w_rec: 0.0,
        }
    }
}

/// Store-backed uncertainty weights (0-d parameters) for training.
#[derive(Debug, Clone, Copy)]
pub struct UncertaintyParams {
    pub w_diff: ParamId,
    pub w_rec: ParamId,
}

impl UncertaintyParams {
    pub fn init<E: Elem>(store: &mut ParamStore<E>) -> Self {
        UncertaintyParams {
            w_diff: store.add("uncertainty.w_diff", zeros(&[])),
            w_rec: store.add("uncertainty.w_rec", zeros(&[])),
        }
    }

    pub fn current<E: Elem>(&self, store: &ParamStore<E>) -> UncertaintyWeights {
        UncertaintyWeights {
            w_diff: store.value(self.w_diff).iter().next().unwrap().as_f64(),
            w_rec: store.value(self.w_rec).iter().next().unwrap().as_f64(),
        }
    }
}

/// Which diffusion objective drives pretraining; `Mse` exists as the
/// ablation alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionLossKind {
    Lae,
    Mse,
}

fn validate_pair<E: Elem, D: Dimension>(
    a: &Array<E, D>,
    b: &Array<E, D>,
) -> Result<(), ObjectiveError> {
    if a.shape() != b.shape() {
        return Err(ObjectiveError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(ObjectiveError::NonFinite);
    }
    Ok(())
}

/// Mean of −ln(1 − min(|ε − ε̂|, 0.9999)); zero iff the prediction is exact.
pub fn lae_loss<E: Elem, D: Dimension>(
    eps: &Array<E, D>,
    eps_hat: &Array<E, D>,
) -> Result<f64, ObjectiveError> {
    validate_pair(eps, eps_hat)?;
    let mut tape = Tape::<E>::new();
    let residual = tape.constant((eps - eps_hat).into_dyn());
    let loss = tape.lae(residual);
    Ok(tape.scalar(loss).as_f64())
}

/// LAE applied to the reconstruction pair.
pub fn rec_loss<E: Elem, D: Dimension>(
    x0_hat: &Array<E, D>,
    x0: &Array<E, D>,
) -> Result<f64, ObjectiveError> {
    lae_loss(x0_hat, x0)
}

/// InfoNCE over B paired embeddings under cosine similarity; the two views
/// interleave into a 2B stack so pair indices are (2k-1, 2k).
pub fn info_nce<E: Elem>(
    z_raw: &Array2<E>,
    z_fake: &Array2<E>,
    tau: f64,
) -> Result<f64, ObjectiveError> {
    if z_raw.nrows() == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    if tau <= 0.0 {
        return Err(ObjectiveError::BadTau { tau });
    }
    validate_pair(z_raw, z_fake)?;
    for (row, r) in z_raw.rows().into_iter().enumerate() {
        if r.iter().all(|v| *v == E::zero()) {
            return Err(ObjectiveError::ZeroNormRow { row: 2 * row });
        }
    }
    for (row, r) in z_fake.rows().into_iter().enumerate() {
        if r.iter().all(|v| *v == E::zero()) {
            return Err(ObjectiveError::ZeroNormRow { row: 2 * row + 1 });
        }
    }
    let mut tape = Tape::<E>::new();
    let raw = tape.constant(z_raw.clone().into_dyn());
    let fake = tape.constant(z_fake.clone().into_dyn());
    let loss = info_nce_on_tape(&mut tape, raw, fake, tau);
    Ok(tape.scalar(loss).as_f64())
}

/// Tape form used during training: interleave, cosine-normalize, NT-Xent.
pub fn info_nce_on_tape<E: Elem>(tape: &mut Tape<E>, z_raw: Var, z_fake: Var, tau: f64) -> Var {
    let stacked = tape.interleave_rows(z_raw, z_fake);
    let unit = tape.l2_normalize_rows(stacked);
    tape.nt_xent(unit, tau)
}

/// e^{−w_diff}·L_diff + e^{−w_rec}·L_rec + 0.5·L_con + w_diff + w_rec.
pub fn compound_loss(
    l_diff: f64,
    l_rec: f64,
    l_con: f64,
    weights: &UncertaintyWeights,
) -> Result<f64, ObjectiveError> {
    let out = (-weights.w_diff).exp() * l_diff
        + (-weights.w_rec).exp() * l_rec
        + 0.5 * l_con
        + weights.w_diff
        + weights.w_rec;
    if !out.is_finite() {
        return Err(ObjectiveError::NonFinite);
    }
    Ok(out)
}

/// Tape form of the compound loss; gradients flow into the 0-d weight vars.
pub fn compound_on_tape<E: Elem>(
    tape: &mut Tape<E>,
    l_diff: Var,
    l_rec: Var,
    l_con: Var,
    w_diff: Var,
    w_rec: Var,
) -> Var {
    let neg_wd = tape.scale(w_diff, -1.0);
    let exp_wd = tape.exp(neg_wd);
    let term_diff = tape.mul(exp_wd, l_diff);
    let neg_wr = tape.scale(w_rec, -1.0);
    let exp_wr = tape.exp(neg_wr);
    let term_rec = tape.mul(exp_wr, l_rec);
    let half_con = tape.scale(l_con, 0.5);
    tape.add_n(&[term_diff, term_rec, half_con, w_diff, w_rec])
}
