//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks the recording once and accumulates gradients. Activations stack
//! instances row-wise: a batch of B patches with S spatial positions and D
//! channels is one `[B*S, D]` matrix, and the `*_blocks` ops treat each
//! consecutive `S`-row block as one instance. All internal parallelism writes
//! disjoint output regions, so results are bit-reproducible regardless of
//! thread count.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix2};
use rayon::prelude::*;
use std::sync::Arc;

use crate::elem::{lit, Elem};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<E> = Box<dyn FnOnce(&ArrayD<E>, &mut GradSink<E>)>;

/// Gradient accumulator passed to backward closures.
pub struct GradSink<'a, E: Elem> {
    slots: &'a mut [Option<ArrayD<E>>],
}

impl<E: Elem> GradSink<'_, E> {
    pub fn add(&mut self, var: Var, grad: ArrayD<E>) {
        match &mut self.slots[var.0] {
            slot @ None => *slot = Some(grad),
            Some(acc) => {
                debug_assert_eq!(acc.shape(), grad.shape());
                *acc += &grad;
            }
        }
    }
}

/// Gradients left after a backward pass; leaf slots survive, interior slots
/// are consumed as the walk passes them.
pub struct Gradients<E: Elem> {
    slots: Vec<Option<ArrayD<E>>>,
}

impl<E: Elem> Gradients<E> {
    pub fn take(&mut self, var: Var) -> Option<ArrayD<E>> {
        self.slots[var.0].take()
    }

    pub fn get(&self, var: Var) -> Option<&ArrayD<E>> {
        self.slots[var.0].as_ref()
    }
}

/// Same-padding convolution geometry for one spatial extent: for every output
/// position, the flattened input index of each kernel tap, or -1 outside.
#[derive(Debug, Clone)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub ksize: usize,
    idx: Vec<i32>,
}

impl ConvGeom {
    pub fn new(height: usize, width: usize, ksize: usize) -> Self {
        assert!(ksize % 2 == 1, "kernel size {ksize} must be odd");
        let half = (ksize / 2) as isize;
        let mut idx = Vec::with_capacity(height * width * ksize * ksize);
        for y in 0..height as isize {
            for x in 0..width as isize {
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (sy, sx) = (y + dy, x + dx);
                        let ok = sy >= 0 && sy < height as isize && sx >= 0 && sx < width as isize;
                        idx.push(if ok { (sy * width as isize + sx) as i32 } else { -1 });
                    }
                }
            }
        }
        ConvGeom {
            height,
            width,
            ksize,
            idx,
        }
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn taps(&self) -> usize {
        self.ksize * self.ksize
    }
}

/// Parallel GEMM helper: row-chunked when large enough to matter; every chunk
/// writes its own output rows, keeping results thread-count independent.
pub fn gemm<E: Elem>(a: ArrayView2<E>, b: ArrayView2<E>) -> Array2<E> {
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "gemm inner dims {ka} vs {kb}");
    let mut out = Array2::<E>::zeros((m, n));
    let threads = rayon::current_num_threads().max(1);
    let chunks = threads.min(m / 96).max(1);
    if chunks <= 1 {
        ndarray::linalg::general_mat_mul(E::one(), &a, &b, E::zero(), &mut out);
    } else {
        let rows = m.div_ceil(chunks);
        let a_parts: Vec<_> = a.axis_chunks_iter(Axis(0), rows).collect();
        let o_parts: Vec<_> = out.axis_chunks_iter_mut(Axis(0), rows).collect();
        a_parts
            .into_par_iter()
            .zip(o_parts)
            .for_each(|(ac, mut oc)| {
                ndarray::linalg::general_mat_mul(E::one(), &ac, &b, E::zero(), &mut oc);
            });
    }
    out
}

fn as2<E: Elem>(a: &ArrayD<E>) -> ArrayView2<'_, E> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

/// Recording of one forward pass.
pub struct Tape<E: Elem> {
    values: Vec<Arc<ArrayD<E>>>,
    backs: Vec<Option<BackFn<E>>>,
    needs: Vec<bool>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
            needs: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<E>, needs: bool, back: Option<BackFn<E>>) -> Var {
        self.push_arc(Arc::new(value), needs, back)
    }

    fn push_arc(&mut self, value: Arc<ArrayD<E>>, needs: bool, back: Option<BackFn<E>>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        self.needs.push(needs);
        Var(self.values.len() - 1)
    }

    /// Input that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<E>) -> Var {
        self.push(value, false, None)
    }

    /// Differentiable leaf (parameters, or test inputs).
    pub fn leaf(&mut self, value: ArrayD<E>) -> Var {
        self.push(value, true, None)
    }

    /// Zero-copy leaf backed by shared storage (parameter leases).
    pub fn leaf_shared(&mut self, value: Arc<ArrayD<E>>) -> Var {
        self.push_arc(value, true, None)
    }

    /// Zero-copy constant backed by shared storage.
    pub fn constant_shared(&mut self, value: Arc<ArrayD<E>>) -> Var {
        self.push_arc(value, false, None)
    }

    pub fn value(&self, var: Var) -> &ArrayD<E> {
        &self.values[var.0]
    }

    pub fn value_arc(&self, var: Var) -> Arc<ArrayD<E>> {
        Arc::clone(&self.values[var.0])
    }

    pub fn scalar(&self, var: Var) -> E {
        let v = self.value(var);
        assert_eq!(v.len(), 1, "scalar() on tensor of {} elements", v.len());
        *v.iter().next().unwrap()
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.needs[var.0]
    }

    /// Reverse pass from a scalar loss. Leaf gradients remain in the result.
    pub fn backward(&mut self, loss: Var) -> Gradients<E> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut slots: Vec<Option<ArrayD<E>>> = vec![None; self.values.len()];
        slots[loss.0] = Some(ArrayD::ones(self.value(loss).raw_dim()));
        for id in (0..=loss.0).rev() {
            if slots[id].is_none() {
                continue;
            }
            let Some(back) = self.backs[id].take() else {
                continue;
            };
            let grad = slots[id].take().unwrap();
            let mut sink = GradSink { slots: &mut slots };
            back(&grad, &mut sink);
        }
        Gradients { slots }
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let va = self.value_arc(a);
        let vb = self.value_arc(b);
        let out = &*va + &*vb;
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink.add(a, g.clone());
                }
                if nb {
                    sink.add(b, g.clone());
                }
            })),
        )
    }

    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut out = self.value(vars[0]).clone();
        for v in &vars[1..] {
            out += self.value(*v);
        }
        let needs: Vec<(Var, bool)> = vars.iter().map(|v| (*v, self.needs[v.0])).collect();
        let any = needs.iter().any(|(_, n)| *n);
        self.push(
            out,
            any,
            Some(Box::new(move |g, sink| {
                for (v, n) in needs {
                    if n {
                        sink.add(v, g.clone());
                    }
                }
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let va = self.value_arc(a);
        let vb = self.value_arc(b);
        let out = &*va - &*vb;
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink.add(a, g.clone());
                }
                if nb {
                    sink.add(b, g.mapv(|v| -v));
                }
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let va = self.value_arc(a);
        let vb = self.value_arc(b);
        let out = &*va * &*vb;
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink.add(a, g * &*vb);
                }
                if nb {
                    sink.add(b, g * &*va);
                }
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = lit::<E>(c);
        let out = self.value(a).mapv(|v| v * cc);
        let na = self.needs[a.0];
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    sink.add(a, g.mapv(|v| v * cc));
                }
            })),
        )
    }

    /// a + fixed array (gradient passes through unchanged).
    pub fn add_const(&mut self, a: Var, arr: &ArrayD<E>) -> Var {
        assert_eq!(self.value(a).shape(), arr.shape(), "add_const shapes");
        let out = self.value(a) + arr;
        let na = self.needs[a.0];
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    sink.add(a, g.clone());
                }
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.exp());
        let na = self.needs[a.0];
        let saved = Arc::new(out.clone());
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    sink.add(a, g * &*saved);
                }
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let out = va.mapv(|v| if v > E::zero() { v } else { E::zero() });
        let na = self.needs[a.0];
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&va, |d, &x| {
                        if x <= E::zero() {
                            *d = E::zero();
                        }
                    });
                    sink.add(a, dx);
                }
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = E::one();
        let out = self.value(a).mapv(|v| one / (one + (-v).exp()));
        let saved = Arc::new(out.clone());
        let na = self.needs[a.0];
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&saved, |d, &y| *d = *d * y * (one - y));
                    sink.add(a, dx);
                }
            })),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let c = lit::<E>(0.7978845608028654); // sqrt(2/pi)
        let k = lit::<E>(0.044715);
        let half = lit::<E>(0.5);
        let one = E::one();
        let three = lit::<E>(3.0);
        let out = va.mapv(|x| half * x * (one + (c * (x + k * x * x * x)).tanh()));
        let na = self.needs[a.0];
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&va, |d, &x| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (one - t * t) * c * (one + three * k * x * x);
                        *d = *d * (half * (one + t) + half * x * dt);
                    });
                    sink.add(a, dx);
                }
            })),
        )
    }

    /// SiLU: x * sigmoid(x).
    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let one = E::one();
        let out = va.mapv(|x| x / (one + (-x).exp()));
        let na = self.needs[a.0];
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&va, |d, &x| {
                        let s = one / (one + (-x).exp());
                        *d = *d * s * (one + x * (one - s));
                    });
                    sink.add(a, dx);
                }
            })),
        )
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value_arc(a);
        let vb = self.value_arc(b);
        let out = gemm(as2(&va), as2(&vb)).into_dyn();
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                if na {
                    sink.add(a, gemm(g2, as2(&vb).reversed_axes()).into_dyn());
                }
                if nb {
                    sink.add(b, gemm(as2(&va).reversed_axes(), g2).into_dyn());
                }
            })),
        )
    }

    /// [m,n] + bias[n] broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let va = self.value_arc(a);
        let vb = self.value_arc(bias);
        let b1 = vb
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias is 1-d");
        let mut out = as2(&va).to_owned();
        out += &b1;
        let (na, nb) = (self.needs[a.0], self.needs[bias.0]);
        self.push(
            out.into_dyn(),
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink.add(a, g.clone());
                }
                if nb {
                    sink.add(bias, as2(g).sum_axis(Axis(0)).into_dyn());
                }
            })),
        )
    }

    /// [m,n] * s[n]: per-channel scaling (LayerScale and friends).
    pub fn scale_channels(&mut self, a: Var, s: Var) -> Var {
        let va = self.value_arc(a);
        let vs = self.value_arc(s);
        let s1 = vs
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("scale is 1-d");
        let mut out = as2(&va).to_owned();
        out *= &s1;
        let (na, ns) = (self.needs[a.0], self.needs[s.0]);
        self.push(
            out.into_dyn(),
            na || ns,
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                if na {
                    let mut dx = g2.to_owned();
                    dx *= &vs.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    sink.add(a, dx.into_dyn());
                }
                if ns {
                    let prod = &g2.to_owned() * &as2(&va);
                    sink.add(s, prod.sum_axis(Axis(0)).into_dyn());
                }
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = as2(self.value(a)).t().to_owned().into_dyn();
        let na = self.needs[a.0];
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    sink.add(a, as2(g).t().to_owned().into_dyn());
                }
            })),
        )
    }

    // -- per-instance block ops ----------------------------------------------

    fn block_count(&self, a: Var, block: usize) -> usize {
        let m = as2(self.value(a)).nrows();
        assert!(block > 0 && m % block == 0, "rows {m} not divisible by block {block}");
        m / block
    }

    /// [B*S,n] * gate[B,n], gate broadcast over each instance's rows.
    pub fn mul_blocks(&mut self, a: Var, gate: Var, block: usize) -> Var {
        let nb = self.block_count(a, block);
        let va = self.value_arc(a);
        let vg = self.value_arc(gate);
        let a2 = as2(&va);
        let g2 = as2(&vg);
        assert_eq!(g2.dim(), (nb, a2.ncols()), "gate shape");
        let mut out = a2.to_owned();
        for b in 0..nb {
            let gr = g2.row(b);
            for r in b * block..(b + 1) * block {
                let mut row = out.row_mut(r);
                row *= &gr;
            }
        }
        let (na, ng) = (self.needs[a.0], self.needs[gate.0]);
        self.push(
            out.into_dyn(),
            na || ng,
            Some(Box::new(move |g, sink| {
                let gy = as2(g);
                let a2 = as2(&va);
                let g2 = as2(&vg);
                if na {
                    let mut dx = gy.to_owned();
                    for b in 0..nb {
                        let gr = g2.row(b);
                        for r in b * block..(b + 1) * block {
                            let mut row = dx.row_mut(r);
                            row *= &gr;
                        }
                    }
                    sink.add(a, dx.into_dyn());
                }
                if ng {
                    let mut dg = Array2::<E>::zeros(g2.dim());
                    for b in 0..nb {
                        let mut acc = Array1::<E>::zeros(a2.ncols());
                        for r in b * block..(b + 1) * block {
                            acc += &(&gy.row(r).to_owned() * &a2.row(r));
                        }
                        dg.row_mut(b).assign(&acc);
                    }
                    sink.add(gate, dg.into_dyn());
                }
            })),
        )
    }

    /// [B*S,n] + shift[B,n] broadcast over each instance's rows.
    pub fn add_blocks(&mut self, a: Var, shift: Var, block: usize) -> Var {
        let nb = self.block_count(a, block);
        let va = self.value_arc(a);
        let vs = self.value_arc(shift);
        let a2 = as2(&va);
        let s2 = as2(&vs);
        assert_eq!(s2.dim(), (nb, a2.ncols()), "shift shape");
        let mut out = a2.to_owned();
        for b in 0..nb {
            let sr = s2.row(b);
            for r in b * block..(b + 1) * block {
                let mut row = out.row_mut(r);
                row += &sr;
            }
        }
        let (na, ns) = (self.needs[a.0], self.needs[shift.0]);
        self.push(
            out.into_dyn(),
            na || ns,
            Some(Box::new(move |g, sink| {
                let gy = as2(g);
                if na {
                    sink.add(a, g.clone());
                }
                if ns {
                    let mut ds = Array2::<E>::zeros((nb, gy.ncols()));
                    for b in 0..nb {
                        let mut acc = Array1::<E>::zeros(gy.ncols());
                        for r in b * block..(b + 1) * block {
                            acc += &gy.row(r);
                        }
                        ds.row_mut(b).assign(&acc);
                    }
                    sink.add(shift, ds.into_dyn());
                }
            })),
        )
    }

    /// [B*S,n] scaled by one scalar per instance block, s: [B].
    pub fn scale_blocks(&mut self, a: Var, s: &[E], block: usize) -> Var {
        let nb = self.block_count(a, block);
        assert_eq!(s.len(), nb, "one scalar per block");
        let va = self.value_arc(a);
        let mut out = as2(&va).to_owned();
        for b in 0..nb {
            let c = s[b];
            for r in b * block..(b + 1) * block {
                out.row_mut(r).mapv_inplace(|v| v * c);
            }
        }
        let na = self.needs[a.0];
        let coefs = s.to_vec();
        self.push(
            out.into_dyn(),
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let mut dx = as2(g).to_owned();
                    for b in 0..nb {
                        let c = coefs[b];
                        for r in b * block..(b + 1) * block {
                            dx.row_mut(r).mapv_inplace(|v| v * c);
                        }
                    }
                    sink.add(a, dx.into_dyn());
                }
            })),
        )
    }

    /// Mean over each instance's rows: [B*S,n] -> [B,n].
    pub fn mean_blocks(&mut self, a: Var, block: usize) -> Var {
        let nb = self.block_count(a, block);
        let a2 = as2(self.value(a));
        let n = a2.ncols();
        let inv = lit::<E>(1.0 / block as f64);
        let mut out = Array2::<E>::zeros((nb, n));
        for b in 0..nb {
            let mut acc = Array1::<E>::zeros(n);
            for r in b * block..(b + 1) * block {
                acc += &a2.row(r);
            }
            out.row_mut(b).assign(&acc.mapv(|v| v * inv));
        }
        let na = self.needs[a.0];
        let rows = a2.nrows();
        self.push(
            out.into_dyn(),
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let g2 = as2(g);
                    let mut dx = Array2::<E>::zeros((rows, n));
                    for b in 0..nb {
                        let gr = g2.row(b).mapv(|v| v * inv);
                        for r in b * block..(b + 1) * block {
                            dx.row_mut(r).assign(&gr);
                        }
                    }
                    sink.add(a, dx.into_dyn());
                }
            })),
        )
    }

    /// Column-wise max over each instance's rows: [B*S,n] -> [B,n]. Ties go to
    /// the first maximal row.
    pub fn max_blocks(&mut self, a: Var, block: usize) -> Var {
        let nb = self.block_count(a, block);
        let a2 = as2(self.value(a));
        let n = a2.ncols();
        let mut out = Array2::<E>::zeros((nb, n));
        let mut argmax = vec![0usize; nb * n];
        for b in 0..nb {
            for c in 0..n {
                let mut best = a2[[b * block, c]];
                let mut best_r = b * block;
                for r in b * block + 1..(b + 1) * block {
                    if a2[[r, c]] > best {
                        best = a2[[r, c]];
                        best_r = r;
                    }
                }
                out[[b, c]] = best;
                argmax[b * n + c] = best_r;
            }
        }
        let na = self.needs[a.0];
        let rows = a2.nrows();
        self.push(
            out.into_dyn(),
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let g2 = as2(g);
                    let mut dx = Array2::<E>::zeros((rows, n));
                    for b in 0..nb {
                        for c in 0..n {
                            dx[[argmax[b * n + c], c]] += g2[[b, c]];
                        }
                    }
                    sink.add(a, dx.into_dyn());
                }
            })),
        )
    }

    /// Per-block matrix transpose: [B*block, n] -> [B*n, block].
    pub fn transpose_blocks(&mut self, a: Var, block: usize) -> Var {
        let nb = self.block_count(a, block);
        let a2 = as2(self.value(a));
        let n = a2.ncols();
        let mut out = Array2::<E>::zeros((nb * n, block));
        for b in 0..nb {
            for s in 0..block {
                for c in 0..n {
                    out[[b * n + c, s]] = a2[[b * block + s, c]];
                }
            }
        }
        let na = self.needs[a.0];
        self.push(
            out.into_dyn(),
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let g2 = as2(g);
                    let mut dx = Array2::<E>::zeros((nb * block, n));
                    for b in 0..nb {
                        for s in 0..block {
                            for c in 0..n {
                                dx[[b * block + s, c]] = g2[[b * n + c, s]];
                            }
                        }
                    }
                    sink.add(a, dx.into_dyn());
                }
            })),
        )
    }

    // -- structure -----------------------------------------------------------

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let a2 = as2(self.value(a));
        let (rows, cols) = a2.dim();
        assert!(start + len <= cols, "slice_cols out of range");
        let out = a2.slice(ndarray::s![.., start..start + len]).to_owned();
        let na = self.needs[a.0];
        self.push(
            out.into_dyn(),
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let mut dx = Array2::<E>::zeros((rows, cols));
                    dx.slice_mut(ndarray::s![.., start..start + len])
                        .assign(&as2(g));
                    sink.add(a, dx.into_dyn());
                }
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = as2(self.value(parts[0])).nrows();
        let widths: Vec<usize> = parts.iter().map(|p| as2(self.value(*p)).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Array2::<E>::zeros((rows, total));
        let mut at = 0;
        for (p, w) in parts.iter().zip(&widths) {
            out.slice_mut(ndarray::s![.., at..at + w])
                .assign(&as2(self.value(*p)));
            at += w;
        }
        let needs: Vec<(Var, bool)> = parts.iter().map(|p| (*p, self.needs[p.0])).collect();
        let any = needs.iter().any(|(_, n)| *n);
        let widths2 = widths.clone();
        self.push(
            out.into_dyn(),
            any,
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                let mut at = 0;
                for ((v, n), w) in needs.iter().zip(&widths2) {
                    if *n {
                        sink.add(*v, g2.slice(ndarray::s![.., at..at + w]).to_owned().into_dyn());
                    }
                    at += w;
                }
            })),
        )
    }

    /// Stack two row matrices vertically: [m1+m2, n].
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let a2 = as2(self.value(a));
        let b2 = as2(self.value(b));
        assert_eq!(a2.ncols(), b2.ncols(), "concat_rows widths");
        let (ra, rb) = (a2.nrows(), b2.nrows());
        let out = ndarray::concatenate(Axis(0), &[a2, b2]).expect("same widths");
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        self.push(
            out.into_dyn(),
            na || nb,
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                if na {
                    sink.add(a, g2.slice(ndarray::s![..ra, ..]).to_owned().into_dyn());
                }
                if nb {
                    sink.add(b, g2.slice(ndarray::s![ra..ra + rb, ..]).to_owned().into_dyn());
                }
            })),
        )
    }

    /// Contiguous row slice [start, start+len).
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let a2 = as2(self.value(a));
        let (rows, cols) = a2.dim();
        assert!(start + len <= rows, "slice_rows out of range");
        let out = a2.slice(ndarray::s![start..start + len, ..]).to_owned();
        let na = self.needs[a.0];
        self.push(
            out.into_dyn(),
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let mut dx = Array2::<E>::zeros((rows, cols));
                    dx.slice_mut(ndarray::s![start..start + len, ..]).assign(&as2(g));
                    sink.add(a, dx.into_dyn());
                }
            })),
        )
    }

    /// Interleave rows of two equal [B,d] matrices into [2B,d]:
    /// rows a0, b0, a1, b1, ...
    pub fn interleave_rows(&mut self, a: Var, b: Var) -> Var {
        let a2 = as2(self.value(a));
        let b2 = as2(self.value(b));
        assert_eq!(a2.dim(), b2.dim(), "interleave shapes");
        let (rows, cols) = a2.dim();
        let mut out = Array2::<E>::zeros((2 * rows, cols));
        for i in 0..rows {
            out.row_mut(2 * i).assign(&a2.row(i));
            out.row_mut(2 * i + 1).assign(&b2.row(i));
        }
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        self.push(
            out.into_dyn(),
            na || nb,
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                if na {
                    let mut da = Array2::<E>::zeros((rows, cols));
                    for i in 0..rows {
                        da.row_mut(i).assign(&g2.row(2 * i));
                    }
                    sink.add(a, da.into_dyn());
                }
                if nb {
                    let mut db = Array2::<E>::zeros((rows, cols));
                    for i in 0..rows {
                        db.row_mut(i).assign(&g2.row(2 * i + 1));
                    }
                    sink.add(b, db.into_dyn());
                }
            })),
        )
    }

    // -- normalization -------------------------------------------------------

    /// Row-wise layer norm with learned per-channel gamma/beta.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let va = self.value_arc(a);
        let a2 = as2(&va);
        let (rows, n) = a2.dim();
        let inv_n = 1.0 / n as f64;
        let mut xhat = Array2::<E>::zeros((rows, n));
        let mut inv_std = Array1::<E>::zeros(rows);
        for r in 0..rows {
            let row = a2.row(r);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() * inv_n;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                * inv_n;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = lit::<E>(istd);
            let (m, s) = (lit::<E>(mean), lit::<E>(istd));
            for c in 0..n {
                xhat[[r, c]] = (row[c] - m) * s;
            }
        }
        let g1 = self
            .value(gamma)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("gamma 1-d")
            .to_owned();
        let b1 = self
            .value(beta)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("beta 1-d")
            .to_owned();
        let mut out = xhat.clone();
        out *= &g1;
        out += &b1;
        let xhat = Arc::new(xhat);
        let (na, ng, nbta) = (self.needs[a.0], self.needs[gamma.0], self.needs[beta.0]);
        self.push(
            out.into_dyn(),
            na || ng || nbta,
            Some(Box::new(move |g, sink| {
                let gy = as2(g);
                if ng {
                    let prod = &gy.to_owned() * &*xhat;
                    sink.add(gamma, prod.sum_axis(Axis(0)).into_dyn());
                }
                if nbta {
                    sink.add(beta, gy.sum_axis(Axis(0)).into_dyn());
                }
                if na {
                    let mut dx = Array2::<E>::zeros((rows, n));
                    let inv_n_e = lit::<E>(inv_n);
                    for r in 0..rows {
                        // dxhat = gy * gamma
                        let mut dxh = gy.row(r).to_owned();
                        dxh *= &g1;
                        let mean_dxh = dxh.iter().copied().sum::<E>() * inv_n_e;
                        let mean_dxh_xh = dxh
                            .iter()
                            .zip(xhat.row(r))
                            .map(|(d, x)| *d * *x)
                            .sum::<E>()
                            * inv_n_e;
                        let istd = inv_std[r];
                        for c in 0..n {
                            dx[[r, c]] =
                                (dxh[c] - mean_dxh - xhat[[r, c]] * mean_dxh_xh) * istd;
                        }
                    }
                    sink.add(a, dx.into_dyn());
                }
            })),
        )
    }

    /// Group norm over (channel-group x instance rows) with per-channel
    /// gamma/beta; `block` rows form one instance.
    pub fn group_norm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        block: usize,
        eps: f64,
    ) -> Var {
        let nb = self.block_count(a, block);
        let va = self.value_arc(a);
        let a2 = as2(&va);
        let n = a2.ncols();
        assert!(n % groups == 0, "channels {n} not divisible by groups {groups}");
        let gw = n / groups;
        let cnt = (block * gw) as f64;
        let mut xhat = Array2::<E>::zeros(a2.dim());
        let mut inv_std = Array2::<f64>::zeros((nb, groups));
        for b in 0..nb {
            for g in 0..groups {
                let mut mean = 0.0;
                for r in b * block..(b + 1) * block {
                    for c in g * gw..(g + 1) * gw {
                        mean += a2[[r, c]].as_f64();
                    }
                }
                mean /= cnt;
                let mut var = 0.0;
                for r in b * block..(b + 1) * block {
                    for c in g * gw..(g + 1) * gw {
                        let d = a2[[r, c]].as_f64() - mean;
                        var += d * d;
                    }
                }
                var /= cnt;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[[b, g]] = istd;
                let (m, s) = (lit::<E>(mean), lit::<E>(istd));
                for r in b * block..(b + 1) * block {
                    for c in g * gw..(g + 1) * gw {
                        xhat[[r, c]] = (a2[[r, c]] - m) * s;
                    }
                }
            }
        }
        let g1 = self
            .value(gamma)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("gamma 1-d")
            .to_owned();
        let b1 = self
            .value(beta)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("beta 1-d")
            .to_owned();
        let mut out = xhat.clone();
        out *= &g1;
        out += &b1;
        let xhat = Arc::new(xhat);
        let (na, ng, nbta) = (self.needs[a.0], self.needs[gamma.0], self.needs[beta.0]);
        self.push(
            out.into_dyn(),
            na || ng || nbta,
            Some(Box::new(move |g, sink| {
                let gy = as2(g);
                if ng {
                    let prod = &gy.to_owned() * &*xhat;
                    sink.add(gamma, prod.sum_axis(Axis(0)).into_dyn());
                }
                if nbta {
                    sink.add(beta, gy.sum_axis(Axis(0)).into_dyn());
                }
                if na {
                    let mut dx = Array2::<E>::zeros(gy.dim());
                    let inv_cnt = lit::<E>(1.0 / cnt);
                    for b in 0..nb {
                        for grp in 0..groups {
                            let mut mean_dxh = E::zero();
                            let mut mean_dxh_xh = E::zero();
                            for r in b * block..(b + 1) * block {
                                for c in grp * gw..(grp + 1) * gw {
                                    let dxh = gy[[r, c]] * g1[c];
                                    mean_dxh += dxh;
                                    mean_dxh_xh += dxh * xhat[[r, c]];
                                }
                            }
                            mean_dxh *= inv_cnt;
                            mean_dxh_xh *= inv_cnt;
                            let istd = lit::<E>(inv_std[[b, grp]]);
                            for r in b * block..(b + 1) * block {
                                for c in grp * gw..(grp + 1) * gw {
                                    let dxh = gy[[r, c]] * g1[c];
                                    dx[[r, c]] =
                                        (dxh - mean_dxh - xhat[[r, c]] * mean_dxh_xh) * istd;
                                }
                            }
                        }
                    }
                    sink.add(a, dx.into_dyn());
                }
            })),
        )
    }

    // -- attention and convolution -------------------------------------------

    /// Scaled dot-product attention within consecutive row blocks of `block`
    /// tokens: per block, softmax(scale * Q Kᵀ) V. Softmax rows sum to one.
    pub fn attention_blocks(&mut self, q: Var, k: Var, v: Var, block: usize, scale: f64) -> Var {
        let nb = self.block_count(q, block);
        assert_eq!(self.value(q).shape(), self.value(k).shape(), "q/k shapes");
        assert_eq!(nb, self.block_count(v, block), "v blocks");
        let vq = self.value_arc(q);
        let vk = self.value_arc(k);
        let vv = self.value_arc(v);
        let q2 = as2(&vq);
        let v2 = as2(&vv);
        let dv = v2.ncols();
        let sc = lit::<E>(scale);

        let mut out = Array2::<E>::zeros((nb * block, dv));
        let mut probs = Array2::<E>::zeros((nb * block, block));
        {
            let out_parts: Vec<_> = out.axis_chunks_iter_mut(Axis(0), block).collect();
            let probs_parts: Vec<_> = probs.axis_chunks_iter_mut(Axis(0), block).collect();
            out_parts
                .into_par_iter()
                .zip(probs_parts)
                .enumerate()
                .for_each(|(b, (mut ob, mut pb))| {
                    let qb = as2(&vq).slice(ndarray::s![b * block..(b + 1) * block, ..]).to_owned();
                    let kb = as2(&vk).slice(ndarray::s![b * block..(b + 1) * block, ..]).to_owned();
                    let vb = as2(&vv).slice(ndarray::s![b * block..(b + 1) * block, ..]).to_owned();
                    let mut scores = qb.dot(&kb.t());
                    scores.mapv_inplace(|s| s * sc);
                    for mut row in scores.rows_mut() {
                        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
                        row.mapv_inplace(|s| (s - max).exp());
                        let sum = row.iter().copied().sum::<E>();
                        row.mapv_inplace(|s| s / sum);
                    }
                    pb.assign(&scores);
                    ob.assign(&scores.dot(&vb));
                });
        }
        let _ = (q2, dv);
        let probs = Arc::new(probs);
        let (nq, nk, nv) = (self.needs[q.0], self.needs[k.0], self.needs[v.0]);
        self.push(
            out.into_dyn(),
            nq || nk || nv,
            Some(Box::new(move |g, sink| {
                let gy = as2(g);
                let dk = as2(&vq).ncols();
                let dvc = as2(&vv).ncols();
                let mut dq = Array2::<E>::zeros((nb * block, dk));
                let mut dkm = Array2::<E>::zeros((nb * block, dk));
                let mut dvm = Array2::<E>::zeros((nb * block, dvc));
                {
                    let dq_parts: Vec<_> = dq.axis_chunks_iter_mut(Axis(0), block).collect();
                    let dk_parts: Vec<_> = dkm.axis_chunks_iter_mut(Axis(0), block).collect();
                    let dv_parts: Vec<_> = dvm.axis_chunks_iter_mut(Axis(0), block).collect();
                    dq_parts
                        .into_par_iter()
                        .zip(dk_parts)
                        .zip(dv_parts)
                        .enumerate()
                        .for_each(|(b, ((mut dqb, mut dkb), mut dvb))| {
                            let rows = ndarray::s![b * block..(b + 1) * block, ..];
                            let qb = as2(&vq).slice(rows).to_owned();
                            let kb = as2(&vk).slice(rows).to_owned();
                            let vb = as2(&vv).slice(rows).to_owned();
                            let pb = probs.slice(rows).to_owned();
                            let gb = gy.slice(rows).to_owned();
                            // dV = Pᵀ g
                            dvb.assign(&pb.t().dot(&gb));
                            // dP = g Vᵀ ; dS = P ⊙ (dP − rowsum(dP⊙P))
                            let dp = gb.dot(&vb.t());
                            let mut ds = dp.clone();
                            for i in 0..block {
                                let dot = dp
                                    .row(i)
                                    .iter()
                                    .zip(pb.row(i))
                                    .map(|(a, b)| *a * *b)
                                    .sum::<E>();
                                for j in 0..block {
                                    ds[[i, j]] = pb[[i, j]] * (dp[[i, j]] - dot);
                                }
                            }
                            ds.mapv_inplace(|s| s * sc);
                            dqb.assign(&ds.dot(&kb));
                            dkb.assign(&ds.t().dot(&qb));
                        });
                }
                if nq {
                    sink.add(q, dq.into_dyn());
                }
                if nk {
                    sink.add(k, dkm.into_dyn());
                }
                if nv {
                    sink.add(v, dvm.into_dyn());
                }
            })),
        )
    }

    /// Zero-padded im2col. Input [B*S, C] -> [B*S, taps*C]; column layout is
    /// tap-major so weights are [taps*C_in, C_out].
    pub fn im2col(&mut self, a: Var, geom: &ConvGeom) -> Var {
        let s = geom.spatial();
        let nb = self.block_count(a, s);
        let va = self.value_arc(a);
        let a2 = as2(&va);
        let c = a2.ncols();
        let taps = geom.taps();
        let idx = geom.idx.clone();
        let mut out = Array2::<E>::zeros((nb * s, taps * c));
        {
            let parts: Vec<_> = out.axis_chunks_iter_mut(Axis(0), s).collect();
            parts.into_par_iter().enumerate().for_each(|(b, mut ob)| {
                let a2 = as2(&va);
                for pos in 0..s {
                    for tap in 0..taps {
                        let src = idx[pos * taps + tap];
                        if src >= 0 {
                            let row = a2.row(b * s + src as usize);
                            ob.slice_mut(ndarray::s![pos, tap * c..(tap + 1) * c]).assign(&row);
                        }
                    }
                }
            });
        }
        let na = self.needs[a.0];
        let idx2 = geom.idx.clone();
        self.push(
            out.into_dyn(),
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let g2 = as2(g);
                    let mut dx = Array2::<E>::zeros((nb * s, c));
                    let parts: Vec<_> = dx.axis_chunks_iter_mut(Axis(0), s).collect();
                    parts.into_par_iter().enumerate().for_each(|(b, mut db)| {
                        let dslice = db.as_slice_mut().expect("contiguous");
                        for pos in 0..s {
                            let grow = g2.row(b * s + pos);
                            let gslice = grow.to_slice().expect("contiguous");
                            for tap in 0..taps {
                                let src = idx2[pos * taps + tap];
                                if src >= 0 {
                                    let dst = &mut dslice[src as usize * c..(src as usize + 1) * c];
                                    let from = &gslice[tap * c..(tap + 1) * c];
                                    for (d, g) in dst.iter_mut().zip(from) {
                                        *d += *g;
                                    }
                                }
                            }
                        }
                    });
                    sink.add(a, dx.into_dyn());
                }
            })),
        )
    }

    /// Depthwise convolution: input [B*S, D], weights [taps, D].
    pub fn depthwise(&mut self, a: Var, w: Var, geom: &ConvGeom) -> Var {
        let s = geom.spatial();
        let nb = self.block_count(a, s);
        let va = self.value_arc(a);
        let vw = self.value_arc(w);
        let a2 = as2(&va);
        let w2 = as2(&vw);
        let d = a2.ncols();
        let taps = geom.taps();
        assert_eq!(w2.dim(), (taps, d), "depthwise weight shape");
        let idx = geom.idx.clone();
        let mut out = Array2::<E>::zeros((nb * s, d));
        {
            let parts: Vec<_> = out.axis_chunks_iter_mut(Axis(0), s).collect();
            parts.into_par_iter().enumerate().for_each(|(b, mut ob)| {
                let a2 = as2(&va);
                let w2 = as2(&vw);
                for pos in 0..s {
                    for tap in 0..taps {
                        let src = idx[pos * taps + tap];
                        if src >= 0 {
                            let xrow = a2.row(b * s + src as usize);
                            let wrow = w2.row(tap);
                            let mut orow = ob.row_mut(pos);
                            for ch in 0..d {
                                orow[ch] += xrow[ch] * wrow[ch];
                            }
                        }
                    }
                }
            });
        }
        let (na, nw) = (self.needs[a.0], self.needs[w.0]);
        let idx2 = geom.idx.clone();
        self.push(
            out.into_dyn(),
            na || nw,
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                let a2 = as2(&va);
                let w2 = as2(&vw);
                if na {
                    let mut dx = Array2::<E>::zeros((nb * s, d));
                    let parts: Vec<_> = dx.axis_chunks_iter_mut(Axis(0), s).collect();
                    parts.into_par_iter().enumerate().for_each(|(b, mut db)| {
                        for pos in 0..s {
                            let grow = g2.row(b * s + pos);
                            for tap in 0..taps {
                                let src = idx2[pos * taps + tap];
                                if src >= 0 {
                                    let wrow = w2.row(tap);
                                    let mut drow = db.row_mut(src as usize);
                                    for ch in 0..d {
                                        drow[ch] += grow[ch] * wrow[ch];
                                    }
                                }
                            }
                        }
                    });
                    sink.add(a, dx.into_dyn());
                }
                if nw {
                    let mut dw = Array2::<E>::zeros((taps, d));
                    for b in 0..nb {
                        for pos in 0..s {
                            let grow = g2.row(b * s + pos);
                            for tap in 0..taps {
                                let src = idx2[pos * taps + tap];
                                if src >= 0 {
                                    let xrow = a2.row(b * s + src as usize);
                                    let mut wrow = dw.row_mut(tap);
                                    for ch in 0..d {
                                        wrow[ch] += grow[ch] * xrow[ch];
                                    }
                                }
                            }
                        }
                    }
                    sink.add(w, dw.into_dyn());
                }
            })),
        )
    }

    // -- reductions and losses -------------------------------------------------

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let inv = lit::<E>(1.0 / n as f64);
        let sum: E = self.value(a).iter().copied().sum();
        let out = ndarray::arr0(sum * inv).into_dyn();
        let na = self.needs[a.0];
        let shape = self.value(a).raw_dim();
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let gv = *g.iter().next().unwrap() * inv;
                    sink.add(a, ArrayD::from_elem(shape, gv));
                }
            })),
        )
    }

    /// Logarithmic absolute error: mean of −ln(1 − min(|r|, 0.9999)).
    pub fn lae(&mut self, residual: Var) -> Var {
        let clip = lit::<E>(0.9999);
        let one = E::one();
        let va = self.value_arc(residual);
        let n = va.len();
        let inv_n = lit::<E>(1.0 / n as f64);
        let mut sum = E::zero();
        for &r in va.iter() {
            let e = r.abs();
            let c = if e < clip { e } else { clip };
            sum += -(one - c).ln();
        }
        let out = ndarray::arr0(sum * inv_n).into_dyn();
        let na = self.needs[residual.0];
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let gv = *g.iter().next().unwrap() * inv_n;
                    let dx = va.mapv(|r| {
                        let e = r.abs();
                        if e >= clip || e == E::zero() {
                            E::zero()
                        } else {
                            let sign = if r > E::zero() { one } else { -one };
                            gv * sign / (one - e)
                        }
                    });
                    sink.add(residual, dx);
                }
            })),
        )
    }

    /// Row-wise L2 normalization (rows must be nonzero).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value_arc(a);
        let a2 = as2(&va);
        let (rows, cols) = a2.dim();
        let mut out = Array2::<E>::zeros((rows, cols));
        let mut norms = Array1::<E>::zeros(rows);
        for r in 0..rows {
            let norm = a2.row(r).iter().map(|v| *v * *v).sum::<E>().sqrt();
            norms[r] = norm;
            let inv = E::one() / norm;
            out.row_mut(r).assign(&a2.row(r).mapv(|v| v * inv));
        }
        let saved = Arc::new(out.clone());
        let na = self.needs[a.0];
        self.push(
            out.into_dyn(),
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let g2 = as2(g);
                    let mut dx = Array2::<E>::zeros((rows, cols));
                    for r in 0..rows {
                        let y = saved.row(r);
                        let dot = g2.row(r).iter().zip(y).map(|(a, b)| *a * *b).sum::<E>();
                        let inv = E::one() / norms[r];
                        for c in 0..cols {
                            dx[[r, c]] = (g2[[r, c]] - y[c] * dot) * inv;
                        }
                    }
                    sink.add(a, dx.into_dyn());
                }
            })),
        )
    }

    /// NT-Xent over an interleaved stack of unit-norm embeddings [2B, d]:
    /// row 2k pairs with row 2k+1. The softmax denominator excludes the
    /// diagonal. Returns the mean of the 2B per-row losses.
    pub fn nt_xent(&mut self, zhat: Var, tau: f64) -> Var {
        assert!(tau > 0.0, "temperature must be positive");
        let vz = self.value_arc(zhat);
        let z2 = as2(&vz);
        let (rows, _) = z2.dim();
        assert!(rows >= 2 && rows % 2 == 0, "need an even stack of embeddings");
        let inv_tau = lit::<E>(1.0 / tau);
        let sim = gemm(z2, z2.reversed_axes()).mapv(|v| v * inv_tau);
        let pair = |i: usize| if i % 2 == 0 { i + 1 } else { i - 1 };

        // masked softmax per row (diagonal excluded)
        let mut q = Array2::<E>::zeros((rows, rows));
        let mut loss = E::zero();
        for i in 0..rows {
            let mut max = E::neg_infinity();
            for j in 0..rows {
                if j != i && sim[[i, j]] > max {
                    max = sim[[i, j]];
                }
            }
            let mut denom = E::zero();
            for j in 0..rows {
                if j != i {
                    let e = (sim[[i, j]] - max).exp();
                    q[[i, j]] = e;
                    denom += e;
                }
            }
            for j in 0..rows {
                q[[i, j]] /= denom;
            }
            let lse = max + denom.ln();
            loss += lse - sim[[i, pair(i)]];
        }
        let inv_rows = lit::<E>(1.0 / rows as f64);
        let out = ndarray::arr0(loss * inv_rows).into_dyn();
        let na = self.needs[zhat.0];
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let gv = *g.iter().next().unwrap() * inv_rows;
                    let mut ds = Array2::<E>::zeros((rows, rows));
                    for i in 0..rows {
                        for j in 0..rows {
                            if j == i {
                                continue;
                            }
                            let ind = if j == pair(i) { E::one() } else { E::zero() };
                            ds[[i, j]] = gv * (q[[i, j]] - ind);
                        }
                    }
                    // sim is ZẐᵀ/τ: dz = (dS + dSᵀ) ẑ / τ
                    let sym = &ds + &ds.t();
                    let dz = gemm(sym.view(), as2(&vz)).mapv(|v| v * inv_tau);
                    sink.add(zhat, dz.into_dyn());
                }
            })),
        )
    }

    /// Mean cross-entropy of logits [B,N] against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let vl = self.value_arc(logits);
        let l2 = as2(&vl);
        let (rows, n) = l2.dim();
        assert_eq!(rows, labels.len(), "one label per row");
        assert!(labels.iter().all(|&y| y < n), "label out of range");
        let mut probs = Array2::<E>::zeros((rows, n));
        let mut loss = E::zero();
        for r in 0..rows {
            let row = l2.row(r);
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut denom = E::zero();
            for c in 0..n {
                let e = (row[c] - max).exp();
                probs[[r, c]] = e;
                denom += e;
            }
            for c in 0..n {
                probs[[r, c]] /= denom;
            }
            loss += max + denom.ln() - row[labels[r]];
        }
        let inv_rows = lit::<E>(1.0 / rows as f64);
        let out = ndarray::arr0(loss * inv_rows).into_dyn();
        let na = self.needs[logits.0];
        let labels = labels.to_vec();
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let gv = *g.iter().next().unwrap() * inv_rows;
                    let mut dl = probs;
                    for (r, &y) in labels.iter().enumerate() {
                        dl[[r, y]] -= E::one();
                    }
                    dl.mapv_inplace(|v| v * gv);
                    sink.add(logits, dl.into_dyn());
                }
            })),
        )
    }
}
