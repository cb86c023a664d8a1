//! Tape-based reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records one computation; [`Var`] is an index into it. Ops push a
//! node holding the forward value (behind `Arc`, so closures capture it
//! cheaply) and a backward closure that scatters vector-Jacobian products into
//! a [`GradStore`]. Nodes that no gradient-requiring input feeds skip closure
//! construction entirely, which is what makes `Tape::new_inference` free.
//!
//! Every node value is kept in standard (row-major, contiguous) layout; ops
//! that would produce a strided view materialize it. That invariant lets the
//! elementwise kernels run on flat slices.
//!
//! Parallelism: large matrix products are row-chunked and batched products
//! batch-chunked across rayon threads. Each output element is produced by
//! exactly one task with a thread-count-independent accumulation order, so
//! results are bitwise identical for any `UREPA_THREADS` setting.

use crate::numerics::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array3, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn, Zip};
use std::cell::RefCell;
use std::sync::Arc;

type BackFn<T> = Box<dyn Fn(&ArrayD<T>, &mut GradStore<T>)>;

struct Node<T: Scalar> {
    value: Arc<ArrayD<T>>,
    needs_grad: bool,
    back: Option<BackFn<T>>,
}

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients keyed by tape index, populated by [`Tape::backward`].
pub struct GradStore<T: Scalar> {
    slots: Vec<Option<ArrayD<T>>>,
    needs: Vec<bool>,
}

impl<T: Scalar> GradStore<T> {
    fn accum(&mut self, idx: usize, g: ArrayD<T>) {
        if !self.needs[idx] {
            return;
        }
        match &mut self.slots[idx] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulate a lazily-built contribution; the builder runs only when the
    /// target participates in differentiation.
    fn accum_with(&mut self, idx: usize, build: impl FnOnce() -> ArrayD<T>) {
        if self.needs[idx] {
            let g = build();
            self.accum(idx, g);
        }
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.slots[v.0].take()
    }
}

/// Records a single forward computation for reverse-mode differentiation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::with_capacity(256)), grad_enabled: true }
    }

    /// A tape that records values only: no backward closures, no gradients.
    pub fn new_inference() -> Self {
        Tape { nodes: RefCell::new(Vec::with_capacity(256)), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, value: ArrayD<T>, needs: bool, back: Option<BackFn<T>>) -> Var {
        debug_assert!(value.is_standard_layout(), "tape values must be standard layout");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), needs_grad: needs, back });
        Var(nodes.len() - 1)
    }

    /// Differentiable input. Gradient flows to it unless the tape is inference-only.
    pub fn leaf(&self, value: ArrayD<T>) -> Var {
        let needs = self.grad_enabled;
        self.push(value, needs, None)
    }

    /// Non-differentiable input (targets, tables, frozen features).
    pub fn constant(&self, value: ArrayD<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn constant_arc(&self, value: Arc<ArrayD<T>>) -> Var {
        debug_assert!(value.is_standard_layout());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, needs_grad: false, back: None });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Arc<ArrayD<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on node with {} elements", val.len());
        *val.iter().next().unwrap()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// gradient-requiring node reachable from `root`.
    pub fn backward(&self, root: Var) -> GradStore<T> {
        let nodes = self.nodes.borrow();
        assert!(self.grad_enabled, "backward on an inference tape");
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut store = GradStore {
            slots: (0..nodes.len()).map(|_| None).collect(),
            needs: nodes.iter().map(|n| n.needs_grad).collect(),
        };
        store.slots[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(back) = nodes[i].back.as_ref() else { continue };
            // Intermediate grads are dropped after propagation; leaves keep theirs.
            let Some(g) = store.slots[i].take() else { continue };
            back(&g, &mut store);
        }
        store
    }

    // ---- elementwise binary ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = &*va + &*vb;
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = if na || nb {
            Some(Box::new(move |g, store| {
                if na {
                    store.accum(a.0, g.clone());
                }
                if nb {
                    store.accum(b.0, g.clone());
                }
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = &*va - &*vb;
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = if na || nb {
            Some(Box::new(move |g, store| {
                if na {
                    store.accum(a.0, g.clone());
                }
                if nb {
                    store.accum_with(b.0, || g.mapv(|x| -x));
                }
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = &*va * &*vb;
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = if na || nb {
            let (va, vb) = (va.clone(), vb.clone());
            Some(Box::new(move |g, store| {
                if na {
                    store.accum_with(a.0, || g * &*vb);
                }
                if nb {
                    store.accum_with(b.0, || g * &*va);
                }
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    pub fn neg(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| -x);
        let na = self.needs(a);
        let back: Option<BackFn<T>> = if na {
            Some(Box::new(move |g, store| store.accum_with(a.0, || g.mapv(|x| -x))))
        } else {
            None
        };
        self.push(out, na, back)
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x * c);
        let na = self.needs(a);
        let back: Option<BackFn<T>> = if na {
            Some(Box::new(move |g, store| store.accum_with(a.0, || g.mapv(|x| x * c))))
        } else {
            None
        };
        self.push(out, na, back)
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x + c);
        let na = self.needs(a);
        let back: Option<BackFn<T>> = if na {
            Some(Box::new(move |g, store| store.accum(a.0, g.clone())))
        } else {
            None
        };
        self.push(out, na, back)
    }

    /// Add a broadcast constant shaped like one trailing-sample of `x`
    /// (e.g. positional tables of shape `[N, C]` added to `[B, N, C]`).
    pub fn offset_tokens(&self, x: Var, c: Arc<ArrayD<T>>) -> Var {
        let vx = self.value(x);
        let inner = c.len();
        assert_eq!(vx.len() % inner, 0, "offset_tokens size mismatch");
        assert_eq!(&vx.shape()[vx.ndim() - c.ndim()..], c.shape(), "offset_tokens shape mismatch");
        let mut out = (*vx).clone();
        {
            let os = out.as_slice_mut().unwrap();
            let cs = c.as_slice().unwrap();
            for (i, v) in os.iter_mut().enumerate() {
                *v = *v + cs[i % inner];
            }
        }
        let nx = self.needs(x);
        let back: Option<BackFn<T>> = if nx {
            Some(Box::new(move |g, store| store.accum(x.0, g.clone())))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    // ---- matrix products ----

    /// 2D matrix product `a @ b`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = va.view().into_dimensionality::<Ix2>().expect("matmul lhs must be rank 2");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("matmul rhs must be rank 2");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dim mismatch");
        let out = par_mat_mul(&a2, &b2, T::one());
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = if na || nb {
            let (va, vb) = (va.clone(), vb.clone());
            Some(Box::new(move |g, store| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                if na {
                    let bv = vb.view().into_dimensionality::<Ix2>().unwrap();
                    store.accum_with(a.0, || par_mat_mul(&g2, &bv.t(), T::one()).into_dyn());
                }
                if nb {
                    let av = va.view().into_dimensionality::<Ix2>().unwrap();
                    store.accum_with(b.0, || par_mat_mul(&av.t(), &g2, T::one()).into_dyn());
                }
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), na || nb, back)
    }

    /// Batched matrix product `alpha · opA(a[i]) @ opB(b[i])` over rank-3
    /// inputs; `ta`/`tb` transpose each batch matrix.
    pub fn bmm(&self, a: Var, b: Var, ta: bool, tb: bool, alpha: T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = bmm_raw(&va, ta, &vb, tb, alpha);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = if na || nb {
            let (va, vb) = (va.clone(), vb.clone());
            Some(Box::new(move |g, store| {
                if na {
                    store.accum_with(a.0, || {
                        if !ta {
                            bmm_raw(g, false, &vb, !tb, alpha).into_dyn()
                        } else {
                            bmm_raw(&vb, tb, g, true, alpha).into_dyn()
                        }
                    });
                }
                if nb {
                    store.accum_with(b.0, || {
                        if !tb {
                            bmm_raw(&va, !ta, g, false, alpha).into_dyn()
                        } else {
                            bmm_raw(g, true, &va, ta, alpha).into_dyn()
                        }
                    });
                }
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), na || nb, back)
    }

    /// Affine map over the last axis: `x` of shape `[.., in]` times `w` of
    /// shape `[in, out]`, plus optional bias `[out]`. Leading axes are
    /// flattened for the product without copying.
    pub fn linear(&self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("linear weight must be rank 2");
        let xsh = vx.shape().to_vec();
        let d_in = *xsh.last().expect("linear input must have rank >= 1");
        assert_eq!(d_in, w2.nrows(), "linear input dim mismatch");
        let rows: usize = xsh[..xsh.len() - 1].iter().product();
        let x2 = flat2(&vx, rows, d_in);
        let mut out2 = par_mat_mul(&x2, &w2, T::one());
        if let Some(bv) = bias {
            let vb = self.value(bv);
            let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().expect("bias rank 1");
            assert_eq!(b1.len(), w2.ncols(), "bias dim mismatch");
            out2 += &b1;
        }
        let mut out_shape = xsh.clone();
        *out_shape.last_mut().unwrap() = w2.ncols();
        let out = out2.into_shape_with_order(IxDyn(&out_shape)).unwrap();

        let nx = self.needs(x);
        let nw = self.needs(w);
        let nb = bias.map(|b| self.needs(b)).unwrap_or(false);
        let back: Option<BackFn<T>> = if nx || nw || nb {
            let (vx, vw) = (vx.clone(), vw.clone());
            Some(Box::new(move |g, store| {
                let d_out = *g.shape().last().unwrap();
                let g2 = flat2(g, rows, d_out);
                if nx {
                    let w2 = vw.view().into_dimensionality::<Ix2>().unwrap();
                    store.accum_with(x.0, || {
                        par_mat_mul(&g2, &w2.t(), T::one())
                            .into_shape_with_order(IxDyn(&xsh))
                            .unwrap()
                    });
                }
                if nw {
                    let x2 = flat2(&vx, rows, d_in);
                    store.accum_with(w.0, || par_mat_mul(&x2.t(), &g2, T::one()).into_dyn());
                }
                if nb {
                    store.accum_with(bias.unwrap().0, || {
                        g2.sum_axis(Axis(0)).into_dyn()
                    });
                }
            }))
        } else {
            None
        };
        self.push(out, nx || nw || nb, back)
    }

    // ---- shape ops ----

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let old_shape = vx.shape().to_vec();
        assert_eq!(
            vx.len(),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        let out = (*vx).clone().into_shape_with_order(IxDyn(shape)).unwrap();
        let nx = self.needs(x);
        let back: Option<BackFn<T>> = if nx {
            Some(Box::new(move |g, store| {
                store.accum_with(x.0, || {
                    g.clone().into_shape_with_order(IxDyn(&old_shape)).unwrap()
                })
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(axes.len(), vx.ndim(), "permute rank mismatch");
        let axes_owned = axes.to_vec();
        let out = vx
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let nx = self.needs(x);
        let back: Option<BackFn<T>> = if nx {
            let mut inverse = vec![0usize; axes_owned.len()];
            for (i, &a) in axes_owned.iter().enumerate() {
                inverse[a] = i;
            }
            Some(Box::new(move |g, store| {
                store.accum_with(x.0, || {
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned()
                })
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// Per-sample index remap. `x` has shape `[B, ..]` with `in_inner`
    /// trailing elements per sample; output sample `j` takes
    /// `x[b, idx[j]]` (flat indexing). Backward scatter-adds, so duplicate
    /// indices (e.g. nearest-neighbor upsampling) accumulate correctly.
    pub fn gather(&self, x: Var, idx: Arc<Vec<usize>>, out_inner_shape: &[usize]) -> Var {
        let vx = self.value(x);
        let xsh = vx.shape().to_vec();
        let b = xsh[0];
        let in_inner: usize = xsh[1..].iter().product();
        let out_inner: usize = out_inner_shape.iter().product();
        assert_eq!(idx.len(), out_inner, "gather index map size mismatch");
        debug_assert!(idx.iter().all(|&i| i < in_inner), "gather index out of range");
        let mut out_shape = vec![b];
        out_shape.extend_from_slice(out_inner_shape);
        let mut out = ArrayD::zeros(IxDyn(&out_shape));
        {
            let xs = vx.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                let src = &xs[bi * in_inner..(bi + 1) * in_inner];
                let dst = &mut os[bi * out_inner..(bi + 1) * out_inner];
                for (j, &s) in idx.iter().enumerate() {
                    dst[j] = src[s];
                }
            }
        }
        let nx = self.needs(x);
        let back: Option<BackFn<T>> = if nx {
            let idx = idx.clone();
            Some(Box::new(move |g, store| {
                store.accum_with(x.0, || {
                    let mut gx = ArrayD::zeros(IxDyn(&xsh));
                    let gs = g.as_slice().unwrap();
                    let gxs = gx.as_slice_mut().unwrap();
                    for bi in 0..b {
                        let src = &gs[bi * out_inner..(bi + 1) * out_inner];
                        let dst = &mut gxs[bi * in_inner..(bi + 1) * in_inner];
                        for (j, &s) in idx.iter().enumerate() {
                            dst[s] = dst[s] + src[j];
                        }
                    }
                    gx
                })
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    pub fn concat_last(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ndim(), vb.ndim(), "concat rank mismatch");
        let ra = va.ndim();
        assert_eq!(&va.shape()[..ra - 1], &vb.shape()[..ra - 1], "concat leading dims mismatch");
        let (ca, cb) = (va.shape()[ra - 1], vb.shape()[ra - 1]);
        let rows: usize = va.shape()[..ra - 1].iter().product();
        let mut out_shape = va.shape().to_vec();
        out_shape[ra - 1] = ca + cb;
        let mut out = ArrayD::zeros(IxDyn(&out_shape));
        {
            let os = out.as_slice_mut().unwrap();
            let asl = va.as_slice().unwrap();
            let bsl = vb.as_slice().unwrap();
            for r in 0..rows {
                os[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(&asl[r * ca..(r + 1) * ca]);
                os[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                    .copy_from_slice(&bsl[r * cb..(r + 1) * cb]);
            }
        }
        let (na, nb) = (self.needs(a), self.needs(b));
        let ash = va.shape().to_vec();
        let bsh = vb.shape().to_vec();
        let back: Option<BackFn<T>> = if na || nb {
            Some(Box::new(move |g, store| {
                let gs = g.as_slice().unwrap();
                if na {
                    store.accum_with(a.0, || {
                        let mut ga = ArrayD::zeros(IxDyn(&ash));
                        let gas = ga.as_slice_mut().unwrap();
                        for r in 0..rows {
                            gas[r * ca..(r + 1) * ca]
                                .copy_from_slice(&gs[r * (ca + cb)..r * (ca + cb) + ca]);
                        }
                        ga
                    });
                }
                if nb {
                    store.accum_with(b.0, || {
                        let mut gb = ArrayD::zeros(IxDyn(&bsh));
                        let gbs = gb.as_slice_mut().unwrap();
                        for r in 0..rows {
                            gbs[r * cb..(r + 1) * cb]
                                .copy_from_slice(&gs[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                        }
                        gb
                    });
                }
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    /// Contiguous slice `[start, start+len)` of the last axis.
    pub fn slice_last(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let r = vx.ndim();
        let c = vx.shape()[r - 1];
        assert!(start + len <= c, "slice_last out of range");
        let rows: usize = vx.shape()[..r - 1].iter().product();
        let mut out_shape = vx.shape().to_vec();
        out_shape[r - 1] = len;
        let mut out = ArrayD::zeros(IxDyn(&out_shape));
        {
            let os = out.as_slice_mut().unwrap();
            let xs = vx.as_slice().unwrap();
            for row in 0..rows {
                os[row * len..(row + 1) * len]
                    .copy_from_slice(&xs[row * c + start..row * c + start + len]);
            }
        }
        let nx = self.needs(x);
        let xsh = vx.shape().to_vec();
        let back: Option<BackFn<T>> = if nx {
            Some(Box::new(move |g, store| {
                store.accum_with(x.0, || {
                    let mut gx = ArrayD::zeros(IxDyn(&xsh));
                    let gxs = gx.as_slice_mut().unwrap();
                    let gs = g.as_slice().unwrap();
                    for row in 0..rows {
                        gxs[row * c + start..row * c + start + len]
                            .copy_from_slice(&gs[row * len..(row + 1) * len]);
                    }
                    gx
                })
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    // ---- per-token broadcast (conditioning) ----

    /// `out[b, n, c] = x[b, n, c] · s[b, c]` — per-sample channel scaling.
    pub fn scale_tokens(&self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        let (b, n, c) = dims3(&vx, "scale_tokens input");
        assert_eq!(vs.shape(), &[b, c], "scale_tokens scale must be [B, C]");
        let mut out = (*vx).clone();
        broadcast_rows_apply(&mut out, &vs, b, n, c, |x, s| x * s);
        let (nx, ns) = (self.needs(x), self.needs(s));
        let back: Option<BackFn<T>> = if nx || ns {
            let (vx, vs) = (vx.clone(), vs.clone());
            Some(Box::new(move |g, store| {
                if nx {
                    store.accum_with(x.0, || {
                        let mut gx = g.clone();
                        broadcast_rows_apply(&mut gx, &vs, b, n, c, |g, s| g * s);
                        gx
                    });
                }
                if ns {
                    store.accum_with(s.0, || {
                        let mut gs = ArrayD::zeros(IxDyn(&[b, c]));
                        let gss = gs.as_slice_mut().unwrap();
                        let gsl = g.as_slice().unwrap();
                        let xsl = vx.as_slice().unwrap();
                        for bi in 0..b {
                            for ni in 0..n {
                                let base = (bi * n + ni) * c;
                                for ci in 0..c {
                                    gss[bi * c + ci] =
                                        gss[bi * c + ci] + gsl[base + ci] * xsl[base + ci];
                                }
                            }
                        }
                        gs
                    });
                }
            }))
        } else {
            None
        };
        self.push(out, nx || ns, back)
    }

    /// `out[b, n, c] = x[b, n, c] + s[b, c]` — per-sample channel shift.
    pub fn shift_tokens(&self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        let (b, n, c) = dims3(&vx, "shift_tokens input");
        assert_eq!(vs.shape(), &[b, c], "shift_tokens shift must be [B, C]");
        let mut out = (*vx).clone();
        broadcast_rows_apply(&mut out, &vs, b, n, c, |x, s| x + s);
        let (nx, ns) = (self.needs(x), self.needs(s));
        let back: Option<BackFn<T>> = if nx || ns {
            Some(Box::new(move |g, store| {
                if nx {
                    store.accum(x.0, g.clone());
                }
                if ns {
                    store.accum_with(s.0, || {
                        let mut gs = ArrayD::zeros(IxDyn(&[b, c]));
                        let gss = gs.as_slice_mut().unwrap();
                        let gsl = g.as_slice().unwrap();
                        for bi in 0..b {
                            for ni in 0..n {
                                let base = (bi * n + ni) * c;
                                for ci in 0..c {
                                    gss[bi * c + ci] = gss[bi * c + ci] + gsl[base + ci];
                                }
                            }
                        }
                        gs
                    });
                }
            }))
        } else {
            None
        };
        self.push(out, nx || ns, back)
    }

    // ---- nonlinearities & normalizers ----

    pub fn silu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let mut sig = (*vx).clone();
        for v in sig.iter_mut() {
            *v = T::one() / (T::one() + (-*v).exp());
        }
        let out = &*vx * &sig;
        let nx = self.needs(x);
        let back: Option<BackFn<T>> = if nx {
            let vx = vx.clone();
            Some(Box::new(move |g, store| {
                store.accum_with(x.0, || {
                    let mut gx = g.clone();
                    let gs = gx.as_slice_mut().unwrap();
                    let xs = vx.as_slice().unwrap();
                    let ss = sig.as_slice().unwrap();
                    for i in 0..gs.len() {
                        let s = ss[i];
                        gs[i] = gs[i] * s * (T::one() + xs[i] * (T::one() - s));
                    }
                    gx
                })
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let c0 = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let c1 = T::from_f64(0.044_715);
        let half = T::from_f64(0.5);
        let out = vx.mapv(|v| {
            let u = c0 * (v + c1 * v * v * v);
            half * v * (T::one() + u.tanh())
        });
        let nx = self.needs(x);
        let back: Option<BackFn<T>> = if nx {
            let vx = vx.clone();
            Some(Box::new(move |g, store| {
                store.accum_with(x.0, || {
                    let mut gx = g.clone();
                    let gs = gx.as_slice_mut().unwrap();
                    let xs = vx.as_slice().unwrap();
                    let three = T::from_f64(3.0);
                    for i in 0..gs.len() {
                        let v = xs[i];
                        let u = c0 * (v + c1 * v * v * v);
                        let t = u.tanh();
                        let du = c0 * (T::one() + three * c1 * v * v);
                        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                        gs[i] = gs[i] * d;
                    }
                    gx
                })
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    pub fn softmax_last(&self, x: Var) -> Var {
        let vx = self.value(x);
        let r = vx.ndim();
        let c = vx.shape()[r - 1];
        let rows: usize = vx.shape()[..r - 1].iter().product();
        let mut out = (*vx).clone();
        {
            let os = out.as_slice_mut().unwrap();
            for row in 0..rows {
                let s = &mut os[row * c..(row + 1) * c];
                let mut mx = s[0];
                for &v in s.iter() {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for v in s.iter_mut() {
                    *v = (*v - mx).exp();
                    sum = sum + *v;
                }
                let inv = T::one() / sum;
                for v in s.iter_mut() {
                    *v = *v * inv;
                }
            }
        }
        let nx = self.needs(x);
        let out_var = self.push(out, nx, None);
        if nx {
            let vy = self.value(out_var);
            let back: BackFn<T> = Box::new(move |g, store| {
                store.accum_with(x.0, || {
                    let mut gx = g.clone();
                    let gs = gx.as_slice_mut().unwrap();
                    let ys = vy.as_slice().unwrap();
                    for row in 0..rows {
                        let gr = &mut gs[row * c..(row + 1) * c];
                        let yr = &ys[row * c..(row + 1) * c];
                        let mut dot = T::zero();
                        for i in 0..c {
                            dot = dot + gr[i] * yr[i];
                        }
                        for i in 0..c {
                            gr[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    gx
                })
            });
            self.nodes.borrow_mut()[out_var.0].back = Some(back);
        }
        out_var
    }

    /// Layer normalization over the last axis, no learned affine:
    /// `y = (x − mean) / sqrt(var + eps)`.
    pub fn layer_norm_last(&self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let r = vx.ndim();
        let c = vx.shape()[r - 1];
        let rows: usize = vx.shape()[..r - 1].iter().product();
        let epst = T::from_f64(eps);
        let inv_c = T::one() / T::from_f64(c as f64);
        let mut out = (*vx).clone();
        let mut inv_std = vec![T::zero(); rows];
        {
            let os = out.as_slice_mut().unwrap();
            for row in 0..rows {
                let s = &mut os[row * c..(row + 1) * c];
                let mut mean = T::zero();
                for &v in s.iter() {
                    mean = mean + v;
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for v in s.iter_mut() {
                    *v = *v - mean;
                    var = var + *v * *v;
                }
                var = var * inv_c;
                let is = T::one() / (var + epst).sqrt();
                inv_std[row] = is;
                for v in s.iter_mut() {
                    *v = *v * is;
                }
            }
        }
        let nx = self.needs(x);
        let out_var = self.push(out, nx, None);
        if nx {
            let vy = self.value(out_var);
            let back: BackFn<T> = Box::new(move |g, store| {
                store.accum_with(x.0, || {
                    let mut gx = g.clone();
                    let gs = gx.as_slice_mut().unwrap();
                    let ys = vy.as_slice().unwrap();
                    for row in 0..rows {
                        let gr = &mut gs[row * c..(row + 1) * c];
                        let yr = &ys[row * c..(row + 1) * c];
                        let mut mg = T::zero();
                        let mut mgy = T::zero();
                        for i in 0..c {
                            mg = mg + gr[i];
                            mgy = mgy + gr[i] * yr[i];
                        }
                        mg = mg * inv_c;
                        mgy = mgy * inv_c;
                        let is = inv_std[row];
                        for i in 0..c {
                            gr[i] = is * (gr[i] - mg - yr[i] * mgy);
                        }
                    }
                    gx
                })
            });
            self.nodes.borrow_mut()[out_var.0].back = Some(back);
        }
        out_var
    }

    /// Row-wise L2 normalization over the last axis with an epsilon-clamped
    /// denominator: `y = x / max(‖x‖₂, eps)`.
    pub fn l2_normalize_last(&self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let r = vx.ndim();
        let c = vx.shape()[r - 1];
        let rows: usize = vx.shape()[..r - 1].iter().product();
        let epst = T::from_f64(eps);
        let mut out = (*vx).clone();
        let mut denom = vec![T::zero(); rows];
        let mut clamped = vec![false; rows];
        {
            let os = out.as_slice_mut().unwrap();
            for row in 0..rows {
                let s = &mut os[row * c..(row + 1) * c];
                let mut sq = T::zero();
                for &v in s.iter() {
                    sq = sq + v * v;
                }
                let norm = sq.sqrt();
                let (d, cl) = if norm > epst { (norm, false) } else { (epst, true) };
                denom[row] = d;
                clamped[row] = cl;
                let inv = T::one() / d;
                for v in s.iter_mut() {
                    *v = *v * inv;
                }
            }
        }
        let nx = self.needs(x);
        let out_var = self.push(out, nx, None);
        if nx {
            let vy = self.value(out_var);
            let back: BackFn<T> = Box::new(move |g, store| {
                store.accum_with(x.0, || {
                    let mut gx = g.clone();
                    let gs = gx.as_slice_mut().unwrap();
                    let ys = vy.as_slice().unwrap();
                    for row in 0..rows {
                        let gr = &mut gs[row * c..(row + 1) * c];
                        let inv = T::one() / denom[row];
                        if clamped[row] {
                            // Constant denominator: plain scaling.
                            for v in gr.iter_mut() {
                                *v = *v * inv;
                            }
                        } else {
                            let yr = &ys[row * c..(row + 1) * c];
                            let mut dot = T::zero();
                            for i in 0..c {
                                dot = dot + gr[i] * yr[i];
                            }
                            for i in 0..c {
                                gr[i] = (gr[i] - yr[i] * dot) * inv;
                            }
                        }
                    }
                    gx
                })
            });
            self.nodes.borrow_mut()[out_var.0].back = Some(back);
        }
        out_var
    }

    // ---- reductions ----

    /// Sum over the last axis: `[.., C] -> [..]`.
    pub fn sum_last(&self, x: Var) -> Var {
        let vx = self.value(x);
        let r = vx.ndim();
        assert!(r >= 1, "sum_last needs rank >= 1");
        let c = vx.shape()[r - 1];
        let rows: usize = vx.shape()[..r - 1].iter().product();
        let out_shape = vx.shape()[..r - 1].to_vec();
        let mut out = ArrayD::zeros(IxDyn(&out_shape));
        {
            let os = out.as_slice_mut().unwrap();
            let xs = vx.as_slice().unwrap();
            for row in 0..rows {
                let mut s = T::zero();
                for &v in &xs[row * c..(row + 1) * c] {
                    s = s + v;
                }
                os[row] = s;
            }
        }
        let nx = self.needs(x);
        let xsh = vx.shape().to_vec();
        let back: Option<BackFn<T>> = if nx {
            Some(Box::new(move |g, store| {
                store.accum_with(x.0, || {
                    let mut gx = ArrayD::zeros(IxDyn(&xsh));
                    let gxs = gx.as_slice_mut().unwrap();
                    let gs = g.as_slice().unwrap();
                    for row in 0..rows {
                        let gv = gs[row];
                        for v in &mut gxs[row * c..(row + 1) * c] {
                            *v = gv;
                        }
                    }
                    gx
                })
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// Mean over all elements, producing a rank-0 scalar node.
    pub fn mean_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.len();
        let inv = T::one() / T::from_f64(n as f64);
        let mut s = T::zero();
        for &v in vx.iter() {
            s = s + v;
        }
        let out = ArrayD::from_elem(IxDyn(&[]), s * inv);
        let nx = self.needs(x);
        let xsh = vx.shape().to_vec();
        let back: Option<BackFn<T>> = if nx {
            Some(Box::new(move |g, store| {
                let gv = *g.iter().next().unwrap() * inv;
                store.accum_with(x.0, || ArrayD::from_elem(IxDyn(&xsh), gv));
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// Mean squared error between two same-shape nodes (composite).
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- lookups and positional ops ----

    /// Row lookup: `table[V, C]` gathered by per-sample ids into `[B, C]`.
    pub fn embedding(&self, table: Var, ids: Arc<Vec<usize>>) -> Var {
        let vt = self.value(table);
        let t2 = vt.view().into_dimensionality::<Ix2>().expect("embedding table rank 2");
        let (v, cdim) = t2.dim();
        assert!(ids.iter().all(|&i| i < v), "embedding id out of range");
        let b = ids.len();
        let mut out = Array2::<T>::zeros((b, cdim));
        for (bi, &id) in ids.iter().enumerate() {
            out.row_mut(bi).assign(&t2.row(id));
        }
        let nt = self.needs(table);
        let back: Option<BackFn<T>> = if nt {
            let ids = ids.clone();
            Some(Box::new(move |g, store| {
                store.accum_with(table.0, || {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut gt = Array2::<T>::zeros((v, cdim));
                    for (bi, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g2.row(bi);
                    }
                    gt.into_dyn()
                })
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), nt, back)
    }

    /// 2D axial rotary embedding over `[M, N, Dh]` (leading dim is any
    /// batch·heads product; `N = h·w` tokens in row-major order). The first
    /// half of the head dim rotates by row angle, the second by column angle;
    /// within each half, pairs are split NeoX-style at distance `Dh/4`.
    pub fn rope(
        &self,
        x: Var,
        cos: Arc<Array2<T>>,
        sin: Arc<Array2<T>>,
        h: usize,
        w: usize,
    ) -> Var {
        let vx = self.value(x);
        let out = rope_rotate_raw(&vx, &cos, &sin, h, w, false);
        let nx = self.needs(x);
        let back: Option<BackFn<T>> = if nx {
            let (cos, sin) = (cos.clone(), sin.clone());
            Some(Box::new(move |g, store| {
                store.accum_with(x.0, || rope_rotate_raw(g, &cos, &sin, h, w, true));
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// `[B, N, H·Dh] -> [B·H, N, Dh]` head split for attention.
    pub fn split_heads(&self, x: Var, heads: usize) -> Var {
        let vx = self.value(x);
        let (b, n, c) = dims3(&vx, "split_heads input");
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        let dh = c / heads;
        let mut out = ArrayD::zeros(IxDyn(&[b * heads, n, dh]));
        {
            let xs = vx.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for hi in 0..heads {
                    for ni in 0..n {
                        let src = (bi * n + ni) * c + hi * dh;
                        let dst = ((bi * heads + hi) * n + ni) * dh;
                        os[dst..dst + dh].copy_from_slice(&xs[src..src + dh]);
                    }
                }
            }
        }
        let nx = self.needs(x);
        let back: Option<BackFn<T>> = if nx {
            Some(Box::new(move |g, store| {
                store.accum_with(x.0, || {
                    let mut gx = ArrayD::zeros(IxDyn(&[b, n, c]));
                    let gs = g.as_slice().unwrap();
                    let gxs = gx.as_slice_mut().unwrap();
                    for bi in 0..b {
                        for hi in 0..heads {
                            for ni in 0..n {
                                let dst = (bi * n + ni) * c + hi * dh;
                                let src = ((bi * heads + hi) * n + ni) * dh;
                                gxs[dst..dst + dh].copy_from_slice(&gs[src..src + dh]);
                            }
                        }
                    }
                    gx
                })
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// Inverse of [`Tape::split_heads`]: `[B·H, N, Dh] -> [B, N, H·Dh]`.
    pub fn merge_heads(&self, x: Var, heads: usize) -> Var {
        let vx = self.value(x);
        let (bh, n, dh) = dims3(&vx, "merge_heads input");
        assert_eq!(bh % heads, 0, "leading dim not divisible by heads");
        let b = bh / heads;
        let c = heads * dh;
        let mut out = ArrayD::zeros(IxDyn(&[b, n, c]));
        {
            let xs = vx.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for hi in 0..heads {
                    for ni in 0..n {
                        let dst = (bi * n + ni) * c + hi * dh;
                        let src = ((bi * heads + hi) * n + ni) * dh;
                        os[dst..dst + dh].copy_from_slice(&xs[src..src + dh]);
                    }
                }
            }
        }
        let nx = self.needs(x);
        let back: Option<BackFn<T>> = if nx {
            Some(Box::new(move |g, store| {
                store.accum_with(x.0, || {
                    let mut gx = ArrayD::zeros(IxDyn(&[bh, n, dh]));
                    let gs = g.as_slice().unwrap();
                    let gxs = gx.as_slice_mut().unwrap();
                    for bi in 0..b {
                        for hi in 0..heads {
                            for ni in 0..n {
                                let src = (bi * n + ni) * c + hi * dh;
                                let dst = ((bi * heads + hi) * n + ni) * dh;
                                gxs[dst..dst + dh].copy_from_slice(&gs[src..src + dh]);
                            }
                        }
                    }
                    gx
                })
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }
}

// ---- raw kernels shared by forward and backward ----

fn dims3<T: Scalar>(v: &ArrayD<T>, what: &str) -> (usize, usize, usize) {
    assert_eq!(v.ndim(), 3, "{what} must be rank 3, got {:?}", v.shape());
    (v.shape()[0], v.shape()[1], v.shape()[2])
}

/// Flat rank-2 view of a standard-layout array.
fn flat2<T: Scalar>(v: &ArrayD<T>, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    v.view()
        .into_shape_with_order((rows, cols))
        .expect("flat2 requires standard layout")
}

/// Row-chunked parallel `alpha · a @ b`. Each output row is produced by one
/// task with a fixed accumulation order, so the result does not depend on
/// thread count.
pub fn par_mat_mul<T: Scalar>(a: &ArrayView2<T>, b: &ArrayView2<T>, alpha: T) -> Array2<T> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul inner dim mismatch");
    let mut out = Array2::<T>::zeros((m, n));
    let threads = rayon::current_num_threads();
    let work = 2usize.saturating_mul(m).saturating_mul(k).saturating_mul(n);
    if threads <= 1 || work < (1 << 21) || m < 2 * threads {
        general_mat_mul(alpha, a, b, T::zero(), &mut out.view_mut());
        return out;
    }
    let chunk = m.div_ceil(threads * 2).max(8);
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .zip(a.axis_chunks_iter(Axis(0), chunk).into_par_iter())
        .for_each(|(mut oc, ac)| {
            general_mat_mul(alpha, &ac, b, T::zero(), &mut oc);
        });
    out
}

/// Batched `alpha · opA(a[i]) @ opB(b[i])` over rank-3 arrays; batches run in
/// parallel, each batch entry computed independently.
pub fn bmm_raw<T: Scalar>(
    a: &ArrayD<T>,
    ta: bool,
    b: &ArrayD<T>,
    tb: bool,
    alpha: T,
) -> Array3<T> {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs must be rank 3");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs must be rank 3");
    let (ba, ra, ca) = a3.dim();
    let (bb, rb, cb) = b3.dim();
    assert_eq!(ba, bb, "bmm batch mismatch");
    let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
    let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
    assert_eq!(ka, kb, "bmm inner dim mismatch");
    let mut out = Array3::<T>::zeros((ba, m, n));
    let body = |mut o: ndarray::ArrayViewMut2<T>, av: ArrayView2<T>, bv: ArrayView2<T>| {
        let av = if ta { av.reversed_axes() } else { av };
        let bv = if tb { bv.reversed_axes() } else { bv };
        general_mat_mul(alpha, &av, &bv, T::zero(), &mut o);
    };
    if rayon::current_num_threads() <= 1 || ba == 1 {
        Zip::from(out.axis_iter_mut(Axis(0)))
            .and(a3.axis_iter(Axis(0)))
            .and(b3.axis_iter(Axis(0)))
            .for_each(body);
    } else {
        Zip::from(out.axis_iter_mut(Axis(0)))
            .and(a3.axis_iter(Axis(0)))
            .and(b3.axis_iter(Axis(0)))
            .par_for_each(body);
    }
    out
}

fn broadcast_rows_apply<T: Scalar>(
    x: &mut ArrayD<T>,
    s: &ArrayD<T>,
    b: usize,
    n: usize,
    c: usize,
    f: impl Fn(T, T) -> T,
) {
    let xs = x.as_slice_mut().unwrap();
    let ss = s.as_slice().unwrap();
    for bi in 0..b {
        let srow = &ss[bi * c..(bi + 1) * c];
        for ni in 0..n {
            let base = (bi * n + ni) * c;
            for ci in 0..c {
                xs[base + ci] = f(xs[base + ci], srow[ci]);
            }
        }
    }
}

/// Rotate feature pairs of `x` (`[M, N, Dh]`, `N = h·w` row-major tokens) by
/// the tabulated angles; `invert` applies the transpose rotation (angle
/// negation), which is the VJP of the forward rotation.
pub fn rope_rotate_raw<T: Scalar>(
    x: &ArrayD<T>,
    cos: &Array2<T>,
    sin: &Array2<T>,
    h: usize,
    w: usize,
    invert: bool,
) -> ArrayD<T> {
    let (m, n, dh) = dims3(x, "rope input");
    assert_eq!(n, h * w, "rope token count must equal h·w");
    assert_eq!(dh % 4, 0, "rope head dim must be divisible by 4");
    let quarter = dh / 4;
    assert!(cos.nrows() >= h.max(w), "rope table too small for grid");
    assert_eq!(cos.ncols(), quarter, "rope table frequency count mismatch");
    let mut out = x.clone();
    let os = out.as_slice_mut().unwrap();
    let flip = if invert { -T::one() } else { T::one() };
    for mi in 0..m {
        for ni in 0..n {
            let (row, col) = (ni / w, ni % w);
            let base = (mi * n + ni) * dh;
            for (seg, pos) in [(0usize, row), (dh / 2, col)] {
                for k in 0..quarter {
                    let cth = cos[[pos, k]];
                    let sth = sin[[pos, k]] * flip;
                    let i = base + seg + k;
                    let j = i + quarter;
                    let (a, b) = (os[i], os[j]);
                    os[i] = a * cth - b * sth;
                    os[j] = a * sth + b * cth;
                }
            }
        }
    }
    out
}
