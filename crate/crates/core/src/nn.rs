//! Parameter storage, initialization, the Adam optimizer, small layer
//! helpers, and finite-difference gradient verification.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{ConvGeom, Gradients, Tape, Var};
use crate::elem::{lit, Elem};

/// Handle to one named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rebuild a handle from a store index (checkpoint loading).
pub fn param_id_for_index(i: usize) -> ParamId {
    ParamId(i)
}

/// All learnable tensors of a model, keyed by canonical dotted names.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Elem> {
    names: Vec<String>,
    values: Vec<Arc<ArrayD<E>>>,
    index: HashMap<String, usize>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<E>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.index.insert(name.to_string(), self.values.len() - 1);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<E> {
        &self.values[id.0]
    }

    pub fn value_arc(&self, id: ParamId) -> Arc<ArrayD<E>> {
        Arc::clone(&self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<E>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "shape change for {}",
            self.names[id.0]
        );
        self.values[id.0] = Arc::new(value);
    }

    pub fn set_scalar(&mut self, id: ParamId, flat: usize, v: E) {
        let arr = Arc::make_mut(&mut self.values[id.0]);
        arr.as_slice_mut().expect("contiguous")[flat] = v;
    }

    pub fn get_scalar(&self, id: ParamId, flat: usize) -> E {
        self.values[id.0].as_slice().expect("contiguous")[flat]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes, and little-endian payloads; used to detect
    /// any mutation of frozen parameters.
    pub fn checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let mut bytes = Vec::with_capacity(value.len() * E::DTYPE.size());
            for &v in value.iter() {
                v.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        }
        hasher.finalize().into()
    }
}

/// Per-tape memo of leased parameters, so a parameter used twice in one
/// forward pass maps to a single tape leaf and its gradients accumulate.
#[derive(Debug, Default)]
pub struct Binding {
    map: HashMap<ParamId, Var>,
}

impl Binding {
    pub fn new() -> Self {
        Binding::default()
    }

    pub fn var<E: Elem>(&mut self, tape: &mut Tape<E>, store: &ParamStore<E>, id: ParamId) -> Var {
        *self
            .map
            .entry(id)
            .or_insert_with(|| tape.leaf_shared(store.value_arc(id)))
    }

    /// Pull leased-parameter gradients out of a backward pass, sorted by id.
    pub fn take_grads<E: Elem>(&self, grads: &mut Gradients<E>) -> Vec<(ParamId, ArrayD<E>)> {
        let mut out: Vec<(ParamId, ArrayD<E>)> = self
            .map
            .iter()
            .filter_map(|(&pid, &var)| grads.take(var).map(|g| (pid, g)))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

pub fn zeros<E: Elem>(shape: &[usize]) -> ArrayD<E> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<E: Elem>(shape: &[usize]) -> ArrayD<E> {
    ArrayD::ones(IxDyn(shape))
}

pub fn full<E: Elem>(shape: &[usize], v: f64) -> ArrayD<E> {
    ArrayD::from_elem(IxDyn(shape), lit::<E>(v))
}

/// Standard normal draws converted from f64 so f32/f64 models see identical
/// streams.
pub fn randn<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<E> {
    let normal = StandardNormal;
    ArrayD::from_shape_fn(IxDyn(shape), |_| E::from_f64(normal.sample(rng)))
}

pub fn randn_scaled<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<E> {
    let normal = StandardNormal;
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        E::from_f64(std * Distribution::<f64>::sample(&normal, rng))
    })
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Same-padding 2-D convolution over row-stacked instances. Weights are
/// [taps*cin, cout]; a 1x1 kernel reduces to a plain channel matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl Conv2d {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        let fan_in = k * k * cin;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = store.add(
            &format!("{name}.weight"),
            randn_scaled(rng, &[fan_in, cout], std),
        );
        let b = store.add(&format!("{name}.bias"), zeros(&[cout]));
        Conv2d { w, b, k }
    }

    pub fn apply<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        bind: &mut Binding,
        x: Var,
        geom: &ConvGeom,
    ) -> Var {
        let w = bind.var(tape, store, self.w);
        let b = bind.var(tape, store, self.b);
        let y = if self.k == 1 {
            tape.matmul(x, w)
        } else {
            debug_assert_eq!(self.k, geom.ksize);
            let cols = tape.im2col(x, geom);
            tape.matmul(cols, w)
        };
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = store.add(
            &format!("{name}.weight"),
            randn_scaled(rng, &[fan_in, fan_out], std),
        );
        let b = store.add(&format!("{name}.bias"), zeros(&[fan_out]));
        Linear { w, b }
    }

    pub fn apply<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        bind: &mut Binding,
        x: Var,
    ) -> Var {
        let w = bind.var(tape, store, self.w);
        let b = bind.var(tape, store, self.b);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn init<E: Elem>(store: &mut ParamStore<E>, name: &str, width: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), ones(&[width]));
        let beta = store.add(&format!("{name}.beta"), zeros(&[width]));
        LayerNorm { gamma, beta }
    }

    pub fn apply<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        bind: &mut Binding,
        x: Var,
    ) -> Var {
        let gamma = bind.var(tape, store, self.gamma);
        let beta = bind.var(tape, store, self.beta);
        tape.layer_norm(x, gamma, beta, LN_EPS)
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with the usual (0.9, 0.999, 1e-8) moment settings.
#[derive(Debug, Clone)]
pub struct Adam<E: Elem> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<ArrayD<E>>,
    v: Vec<ArrayD<E>>,
}

impl<E: Elem> Adam<E> {
    pub fn new(store: &ParamStore<E>, lr: f64) -> Self {
        let m = store
            .ids()
            .map(|id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the given (parameter, gradient) pairs; parameters not
    /// present keep their moments untouched.
    pub fn apply(&mut self, store: &mut ParamStore<E>, grads: &[(ParamId, ArrayD<E>)]) {
        self.step += 1;
        let b1 = lit::<E>(self.beta1);
        let b2 = lit::<E>(self.beta2);
        let one = E::one();
        let corr1 = lit::<E>(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = lit::<E>(1.0 - self.beta2.powi(self.step as i32));
        let lr = lit::<E>(self.lr);
        let eps = lit::<E>(self.eps);
        for (id, g) in grads {
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            assert_eq!(m.shape(), g.shape(), "gradient shape for {}", id.index());
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let param = Arc::make_mut(&mut store.values[id.index()]);
            ndarray::Zip::from(param).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / corr1;
                let vhat = v / corr2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }

    pub fn moments(&self, id: ParamId) -> (&ArrayD<E>, &ArrayD<E>) {
        (&self.m[id.index()], &self.v[id.index()])
    }

    pub fn restore_state(&mut self, step: u64, m: Vec<ArrayD<E>>, v: Vec<ArrayD<E>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compare analytic parameter gradients against central finite differences on
/// `samples` randomly chosen scalar parameters (uniform over all scalars of
/// the candidate tensors). `loss` must be a deterministic function of the
/// store.
pub fn check_param_grads(
    store: &mut ParamStore<f64>,
    candidates: &[ParamId],
    analytic: &HashMap<ParamId, ArrayD<f64>>,
    samples: usize,
    h: f64,
    rtol: f64,
    seed: u64,
    loss: &dyn Fn(&ParamStore<f64>) -> f64,
) -> Result<GradCheckReport, String> {
    let sizes: Vec<usize> = candidates.iter().map(|id| store.value(*id).len()).collect();
    let total: usize = sizes.iter().sum();
    assert!(total > 0, "no scalars to check");
    let mut rng = crate::rng::substream(seed, crate::rng::StreamId(12 << 48));
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let id = candidates[which];
        let orig = store.get_scalar(id, flat);
        store.set_scalar(id, flat, orig + h);
        let up = loss(store);
        store.set_scalar(id, flat, orig - h);
        let down = loss(store);
        store.set_scalar(id, flat, orig);
        let fd = (up - down) / (2.0 * h);
        let an = analytic
            .get(&id)
            .map(|g| g.as_slice().expect("contiguous")[flat])
            .unwrap_or(0.0);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
        if rel > max_rel {
            max_rel = rel;
        }
        if rel > rtol {
            return Err(format!(
                "gradient mismatch on {}[{}]: fd {:.6e} vs analytic {:.6e} (rel {:.3e})",
                store.name(id),
                flat,
                fd,
                an,
                rel
            ));
        }
    }
    Ok(GradCheckReport {
        checked: samples,
        max_rel_err: max_rel,
    })
}
