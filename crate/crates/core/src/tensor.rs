//! Dense f64 tensors with tape-free reverse-mode differentiation.
//!
//! Every operation that sees a gradient-tracked input records its parents and
//! a backward closure on the output node. `backward` walks the graph in
//! reverse topological order and accumulates gradients into the leaves.
//! Gradients accumulate across calls until `zero_grad` resets them.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    InvalidParameter {
        what: &'static str,
        value: f64,
    },
    NotScalar {
        shape: Vec<usize>,
    },
    NonFinite {
        context: String,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::InvalidParameter { what, value } => {
                write!(f, "invalid parameter {what}: {value}")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "expected scalar tensor, got shape {shape:?}")
            }
            TensorError::NonFinite { context } => {
                write!(f, "non-finite values in {context}")
            }
        }
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct BackwardOp {
    parents: Vec<Tensor>,
    apply: BackwardFn,
}

struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Option<BackwardOp>,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_node(data: Vec<f64>, shape: Vec<usize>, op: Option<BackwardOp>) -> Tensor {
        let requires_grad = op.is_some();
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                requires_grad,
                grad: None,
                op,
            })),
        }
    }

    /// Constant tensor (not tracked for gradients).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        if data.len() != numel_of(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                lhs: vec![data.len()],
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::new_node(data, shape.to_vec(), None))
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        let t = Tensor::from_vec(data, shape)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_node(vec![v], vec![1], None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_node(vec![0.0; numel_of(shape)], shape.to_vec(), None)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.inner.borrow_mut().requires_grad = on;
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar extraction; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        let d = self.inner.borrow();
        assert_eq!(d.data.len(), 1, "item() on non-scalar tensor");
        d.data[0]
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// In-place mutation of leaf data (optimizer updates). Any recorded
    /// graph below this node becomes stale, so only call between steps.
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.inner.borrow_mut().data)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<(), TensorError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite {
                context: String::from(context),
            })
        }
    }

    /// Detached copy: same values, no graph, no grad tracking.
    pub fn detach(&self) -> Tensor {
        Tensor::new_node(self.to_vec(), self.shape(), None)
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut d = self.inner.borrow_mut();
        let n = d.data.len();
        let g = d.grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += *ci;
        }
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// tracked leaf reachable from `self`; leaf gradients accumulate
    /// across calls, interior gradients are reset per sweep.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape() });
        }

        // Topological order via iterative post-order DFS.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: BTreeSet<usize> = BTreeSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            let d = node.inner.borrow();
            if let Some(op) = &d.op {
                for p in &op.parents {
                    if p.requires_grad() {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        // Interior grads from a previous sweep must not leak into this one.
        for node in &order {
            let mut d = node.inner.borrow_mut();
            if d.op.is_some() {
                d.grad = None;
            }
        }
        self.accumulate_grad(&[1.0]);

        for node in order.iter().rev() {
            let (grad, has_op) = {
                let d = node.inner.borrow();
                (d.grad.clone(), d.op.is_some())
            };
            if !has_op {
                continue;
            }
            let Some(grad) = grad else { continue };
            let d = node.inner.borrow();
            let op = d.op.as_ref().unwrap();
            (op.apply)(&grad, &op.parents);
        }
        Ok(())
    }

    fn make(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        apply: impl Fn(&[f64], &[Tensor]) + 'static,
    ) -> Tensor {
        let tracked = parents.iter().any(|p| p.requires_grad());
        let op = if tracked {
            Some(BackwardOp {
                parents,
                apply: Box::new(apply),
            })
        } else {
            None
        };
        Tensor::new_node(data, shape, op)
    }

    // ── elementwise ──────────────────────────────────────────────────

    /// Elementwise add. The rhs shape may be a trailing suffix of the lhs
    /// shape (broadcast over leading dims) or a single scalar.
    pub fn add(&self, other: &Tensor) -> Tensor {
        let (ls, rs) = (self.shape(), other.shape());
        let a = self.to_vec();
        let b = other.to_vec();
        if ls == rs {
            let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            return Tensor::make(out, ls, vec![self.clone(), other.clone()], |g, ps| {
                if ps[0].requires_grad() {
                    ps[0].accumulate_grad(g);
                }
                if ps[1].requires_grad() {
                    ps[1].accumulate_grad(g);
                }
            });
        }
        if other.numel() == 1 {
            let c = b[0];
            let out: Vec<f64> = a.iter().map(|x| x + c).collect();
            return Tensor::make(out, ls, vec![self.clone(), other.clone()], |g, ps| {
                if ps[0].requires_grad() {
                    ps[0].accumulate_grad(g);
                }
                if ps[1].requires_grad() {
                    ps[1].accumulate_grad(&[g.iter().sum()]);
                }
            });
        }
        assert!(
            ls.len() > rs.len() && ls[ls.len() - rs.len()..] == rs[..],
            "add: rhs shape {rs:?} is not a suffix of lhs shape {ls:?}"
        );
        let block = numel_of(&rs);
        let out: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % block])
            .collect();
        Tensor::make(out, ls, vec![self.clone(), other.clone()], move |g, ps| {
            if ps[0].requires_grad() {
                ps[0].accumulate_grad(g);
            }
            if ps[1].requires_grad() {
                let mut gb = vec![0.0; block];
                for (i, gi) in g.iter().enumerate() {
                    gb[i % block] += gi;
                }
                ps[1].accumulate_grad(&gb);
            }
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.add(&other.scale(-1.0))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (ls, rs) = (self.shape(), other.shape());
        assert_eq!(ls, rs, "mul: shape mismatch {ls:?} vs {rs:?}");
        let a = self.to_vec();
        let b = other.to_vec();
        let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        Tensor::make(out, ls, vec![self.clone(), other.clone()], move |g, ps| {
            if ps[0].requires_grad() {
                let ga: Vec<f64> = g.iter().zip(&b).map(|(gi, y)| gi * y).collect();
                ps[0].accumulate_grad(&ga);
            }
            if ps[1].requires_grad() {
                let gb: Vec<f64> = g.iter().zip(&a).map(|(gi, x)| gi * x).collect();
                ps[1].accumulate_grad(&gb);
            }
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.to_vec().iter().map(|x| x * c).collect();
        Tensor::make(out, self.shape(), vec![self.clone()], move |g, ps| {
            if ps[0].requires_grad() {
                let ga: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                ps[0].accumulate_grad(&ga);
            }
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.to_vec().iter().map(|x| x + c).collect();
        Tensor::make(out, self.shape(), vec![self.clone()], move |g, ps| {
            if ps[0].requires_grad() {
                ps[0].accumulate_grad(g);
            }
        })
    }

    pub fn gelu(&self) -> Tensor {
        const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
        let inv_sqrt_2pi = 1.0 / libm::sqrt(2.0 * core::f64::consts::PI);
        let a = self.to_vec();
        let out: Vec<f64> = a
            .iter()
            .map(|&x| 0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2)))
            .collect();
        Tensor::make(out, self.shape(), vec![self.clone()], move |g, ps| {
            if ps[0].requires_grad() {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&a)
                    .map(|(gi, &x)| {
                        let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
                        let pdf = inv_sqrt_2pi * libm::exp(-0.5 * x * x);
                        gi * (cdf + x * pdf)
                    })
                    .collect();
                ps[0].accumulate_grad(&ga);
            }
        })
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.to_vec().iter().sum();
        let n = self.numel();
        Tensor::make(vec![s], vec![1], vec![self.clone()], move |g, ps| {
            if ps[0].requires_grad() {
                ps[0].accumulate_grad(&vec![g[0]; n]);
            }
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    // ── shape ────────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            self.numel(),
            numel_of(shape),
            "reshape: element count mismatch {:?} -> {:?}",
            self.shape(),
            shape
        );
        Tensor::make(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            move |g, ps| {
                if ps[0].requires_grad() {
                    ps[0].accumulate_grad(g);
                }
            },
        )
    }

    /// Permute axes. `axes` is the source axis for each output axis.
    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let shape = self.shape();
        assert_eq!(axes.len(), shape.len(), "permute: rank mismatch");
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = self.to_vec();
        let out = permute_raw(&data, &shape, axes);
        let inverse: Vec<usize> = {
            let mut inv = vec![0usize; axes.len()];
            for (o, &a) in axes.iter().enumerate() {
                inv[a] = o;
            }
            inv
        };
        let out_shape_for_bw = out_shape.clone();
        Tensor::make(out, out_shape, vec![self.clone()], move |g, ps| {
            if ps[0].requires_grad() {
                let gp = permute_raw(g, &out_shape_for_bw, &inverse);
                ps[0].accumulate_grad(&gp);
            }
        })
    }

    /// First-axis slice `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let shape = self.shape();
        assert!(!shape.is_empty() && start <= end && end <= shape[0]);
        let row: usize = shape[1..].iter().product();
        let data = self.to_vec();
        let out = data[start * row..end * row].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = end - start;
        let total = data.len();
        Tensor::make(out, out_shape, vec![self.clone()], move |g, ps| {
            if ps[0].requires_grad() {
                let mut full = vec![0.0; total];
                full[start * row..end * row].copy_from_slice(g);
                ps[0].accumulate_grad(&full);
            }
        })
    }

    /// For a 2-D tensor `[N, V]`, select element `idx[i]` from each row,
    /// yielding `[N]`.
    pub fn take_per_row(&self, indices: &[usize]) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "take_per_row expects a 2-D tensor");
        let (n, v) = (shape[0], shape[1]);
        assert_eq!(indices.len(), n, "take_per_row: one index per row");
        let data = self.to_vec();
        let out: Vec<f64> = indices.iter().enumerate().map(|(i, &j)| data[i * v + j]).collect();
        let idx = indices.to_vec();
        Tensor::make(out, vec![n], vec![self.clone()], move |g, ps| {
            if ps[0].requires_grad() {
                let mut full = vec![0.0; n * v];
                for (i, &j) in idx.iter().enumerate() {
                    full[i * v + j] = g[i];
                }
                ps[0].accumulate_grad(&full);
            }
        })
    }

    /// Row gather from an embedding table `[V, d]` by token id.
    pub fn embedding(&self, ids: &[usize]) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "embedding expects a 2-D table");
        let (v, d) = (shape[0], shape[1]);
        let data = self.to_vec();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding: id {id} out of table size {v}");
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        let ids = ids.to_vec();
        Tensor::make(out, vec![ids.len(), d], vec![self.clone()], move |g, ps| {
            if ps[0].requires_grad() {
                let mut full = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for k in 0..d {
                        full[id * d + k] += g[i * d + k];
                    }
                }
                ps[0].accumulate_grad(&full);
            }
        })
    }

    // ── matmul ───────────────────────────────────────────────────────

    /// Matrix product. Supports `[m,k]x[k,n]`, batched `[b,m,k]x[b,k,n]`,
    /// and `[b,m,k]x[k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let ls = self.shape();
        let rs = other.shape();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ls.clone(),
            rhs: rs.clone(),
        };
        match (ls.len(), rs.len()) {
            (2, 2) => {
                let (m, k) = (ls[0], ls[1]);
                let (k2, n) = (rs[0], rs[1]);
                if k != k2 {
                    return Err(mismatch());
                }
                let a = self.to_vec();
                let b = other.to_vec();
                let mut out = vec![0.0; m * n];
                matmul_raw(&a, &b, m, k, n, &mut out);
                Ok(Tensor::make(
                    out,
                    vec![m, n],
                    vec![self.clone(), other.clone()],
                    move |g, ps| {
                        if ps[0].requires_grad() {
                            // dA = G · Bᵀ
                            let mut ga = vec![0.0; m * k];
                            matmul_nt(g, &b, m, n, k, &mut ga);
                            ps[0].accumulate_grad(&ga);
                        }
                        if ps[1].requires_grad() {
                            // dB = Aᵀ · G
                            let mut gb = vec![0.0; k * n];
                            matmul_tn(&a, g, m, k, n, &mut gb);
                            ps[1].accumulate_grad(&gb);
                        }
                    },
                ))
            }
            (3, 3) => {
                let (bsz, m, k) = (ls[0], ls[1], ls[2]);
                let (b2, k2, n) = (rs[0], rs[1], rs[2]);
                if bsz != b2 || k != k2 {
                    return Err(mismatch());
                }
                let a = self.to_vec();
                let b = other.to_vec();
                let mut out = vec![0.0; bsz * m * n];
                for i in 0..bsz {
                    matmul_raw(
                        &a[i * m * k..(i + 1) * m * k],
                        &b[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                Ok(Tensor::make(
                    out,
                    vec![bsz, m, n],
                    vec![self.clone(), other.clone()],
                    move |g, ps| {
                        if ps[0].requires_grad() {
                            let mut ga = vec![0.0; bsz * m * k];
                            for i in 0..bsz {
                                matmul_nt(
                                    &g[i * m * n..(i + 1) * m * n],
                                    &b[i * k * n..(i + 1) * k * n],
                                    m,
                                    n,
                                    k,
                                    &mut ga[i * m * k..(i + 1) * m * k],
                                );
                            }
                            ps[0].accumulate_grad(&ga);
                        }
                        if ps[1].requires_grad() {
                            let mut gb = vec![0.0; bsz * k * n];
                            for i in 0..bsz {
                                matmul_tn(
                                    &a[i * m * k..(i + 1) * m * k],
                                    &g[i * m * n..(i + 1) * m * n],
                                    m,
                                    k,
                                    n,
                                    &mut gb[i * k * n..(i + 1) * k * n],
                                );
                            }
                            ps[1].accumulate_grad(&gb);
                        }
                    },
                ))
            }
            (3, 2) => {
                let (bsz, m, k) = (ls[0], ls[1], ls[2]);
                let flat = self.reshape(&[bsz * m, k]);
                let out = flat.matmul(other)?;
                Ok(out.reshape(&[bsz, m, rs[1]]))
            }
            _ => Err(mismatch()),
        }
    }

    // ── softmax family ───────────────────────────────────────────────

    /// Temperature softmax along `axis`, max-shifted for overflow safety.
    pub fn softmax(&self, axis: usize, temperature: f64) -> Result<Tensor, TensorError> {
        if temperature <= 0.0 || temperature.is_nan() {
            return Err(TensorError::InvalidParameter {
                what: "softmax temperature",
                value: temperature,
            });
        }
        let shape = self.shape();
        assert!(axis < shape.len(), "softmax: axis out of range");
        let data = self.to_vec();
        let mut out = vec![0.0; data.len()];
        for_each_lane(&shape, axis, |lane| {
            let mut mx = f64::NEG_INFINITY;
            for &i in lane {
                let v = data[i] / temperature;
                if v > mx {
                    mx = v;
                }
            }
            let mut z = 0.0;
            for &i in lane {
                let e = libm::exp(data[i] / temperature - mx);
                out[i] = e;
                z += e;
            }
            for &i in lane {
                out[i] /= z;
            }
        });
        let y = out.clone();
        let shape_bw = shape.clone();
        Ok(Tensor::make(
            out,
            shape,
            vec![self.clone()],
            move |g, ps| {
                if ps[0].requires_grad() {
                    let mut gx = vec![0.0; g.len()];
                    for_each_lane(&shape_bw, axis, |lane| {
                        let mut dot = 0.0;
                        for &i in lane {
                            dot += g[i] * y[i];
                        }
                        for &i in lane {
                            gx[i] = y[i] * (g[i] - dot) / temperature;
                        }
                    });
                    ps[0].accumulate_grad(&gx);
                }
            },
        ))
    }

    /// Fused temperature log-softmax along `axis` (shifted log-sum-exp).
    pub fn log_softmax(&self, axis: usize, temperature: f64) -> Result<Tensor, TensorError> {
        if temperature <= 0.0 || temperature.is_nan() {
            return Err(TensorError::InvalidParameter {
                what: "log_softmax temperature",
                value: temperature,
            });
        }
        let shape = self.shape();
        assert!(axis < shape.len(), "log_softmax: axis out of range");
        let data = self.to_vec();
        let mut out = vec![0.0; data.len()];
        for_each_lane(&shape, axis, |lane| {
            let mut mx = f64::NEG_INFINITY;
            for &i in lane {
                let v = data[i] / temperature;
                if v > mx {
                    mx = v;
                }
            }
            let mut z = 0.0;
            for &i in lane {
                z += libm::exp(data[i] / temperature - mx);
            }
            let lse = mx + libm::log(z);
            for &i in lane {
                out[i] = data[i] / temperature - lse;
            }
        });
        let y = out.clone();
        let shape_bw = shape.clone();
        Ok(Tensor::make(
            out,
            shape,
            vec![self.clone()],
            move |g, ps| {
                if ps[0].requires_grad() {
                    let mut gx = vec![0.0; g.len()];
                    for_each_lane(&shape_bw, axis, |lane| {
                        let mut gsum = 0.0;
                        for &i in lane {
                            gsum += g[i];
                        }
                        for &i in lane {
                            gx[i] = (g[i] - libm::exp(y[i]) * gsum) / temperature;
                        }
                    });
                    ps[0].accumulate_grad(&gx);
                }
            },
        ))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let shape = self.shape();
        let d = *shape.last().expect("layer_norm on 0-rank tensor");
        assert_eq!(gamma.shape(), vec![d], "layer_norm: gamma shape");
        assert_eq!(beta.shape(), vec![d], "layer_norm: beta shape");
        let x = self.to_vec();
        let gm = gamma.to_vec();
        let bt = beta.to_vec();
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_sigma = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_sigma[r] = is;
            for k in 0..d {
                let xh = (row[k] - mu) * is;
                xhat[r * d + k] = xh;
                out[r * d + k] = xh * gm[k] + bt[k];
            }
        }
        Tensor::make(
            out,
            shape,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, ps| {
                if ps[0].requires_grad() {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let is = inv_sigma[r];
                        let mut mean_gy = 0.0;
                        let mut mean_gy_xh = 0.0;
                        for k in 0..d {
                            let gy = g[r * d + k] * gm[k];
                            mean_gy += gy;
                            mean_gy_xh += gy * xhat[r * d + k];
                        }
                        mean_gy /= d as f64;
                        mean_gy_xh /= d as f64;
                        for k in 0..d {
                            let gy = g[r * d + k] * gm[k];
                            gx[r * d + k] =
                                is * (gy - mean_gy - xhat[r * d + k] * mean_gy_xh);
                        }
                    }
                    ps[0].accumulate_grad(&gx);
                }
                if ps[1].requires_grad() {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for k in 0..d {
                            gg[k] += g[r * d + k] * xhat[r * d + k];
                        }
                    }
                    ps[1].accumulate_grad(&gg);
                }
                if ps[2].requires_grad() {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for k in 0..d {
                            gb[k] += g[r * d + k];
                        }
                    }
                    ps[2].accumulate_grad(&gb);
                }
            },
        )
    }

}

/// Cache-friendly `C[m,n] += A[m,k] · B[k,n]` (out assumed zeroed).
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `C[m,k] += A[m,n] · B[k,n]ᵀ` (B indexed transposed).
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for p in 0..n {
                s += arow[p] * brow[p];
            }
            orow[j] += s;
        }
    }
}

/// `C[k,n] += A[m,k]ᵀ · B[m,n]` (A indexed transposed).
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn permute_raw(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (o, &a) in axes.iter().enumerate() {
            src += idx[o] * in_strides[a];
        }
        *slot = data[src];
        for o in (0..rank).rev() {
            idx[o] += 1;
            if idx[o] < out_shape[o] {
                break;
            }
            idx[o] = 0;
        }
    }
    out
}

/// Visit index lanes along `axis`: calls `f` once per lane with the flat
/// indices of that lane's elements in order.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let axis_len = shape[axis];
    let axis_stride = strides[axis];
    let total: usize = shape.iter().product();
    let n_lanes = total / axis_len;
    let mut lane = vec![0usize; axis_len];
    // Enumerate lane bases: all indices with axis coordinate 0.
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    debug_assert_eq!(outer * inner, n_lanes);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            for (t, slot) in lane.iter_mut().enumerate() {
                *slot = base + t * axis_stride;
            }
            f(&lane);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    fn p(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = t(&[3.0, 4.0, 5.0, 6.0], &[2, 2]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_oracle() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let a = t(&[1.0, 2.0], &[1, 2]);
        let b = t(&[3.0, 4.0], &[2, 1]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_zero_absorbs() {
        let z = Tensor::zeros(&[2, 3]);
        let b = t(&[1.0, -2.0, 0.5, 3.0, 7.0, -1.0], &[3, 2]);
        assert!(z.matmul(&b).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = t(&[1.0, 2.0], &[1, 2]);
        let b = t(&[1.0, 2.0, 3.0], &[3, 1]);
        match a.matmul(&b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![1, 2]);
                assert_eq!(rhs, vec![3, 1]);
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|t| t.shape())),
        }
    }

    #[test]
    fn softmax_symmetry() {
        let x = t(&[0.0, 0.0, 0.0], &[3]);
        let y = x.softmax(0, 1.0).unwrap().to_vec();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_two_logits() {
        let x = t(&[1.0, 0.0], &[2]);
        let y = x.softmax(0, 1.0).unwrap().to_vec();
        assert!((y[0] - 0.7311).abs() < 1e-4);
        assert!((y[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_temperature_division_identity() {
        let x = t(&[10.0, 0.0], &[2]);
        let y = x.softmax(0, 10.0).unwrap().to_vec();
        let z = t(&[1.0, 0.0], &[2]).softmax(0, 1.0).unwrap().to_vec();
        assert!((y[0] - z[0]).abs() < 1e-12);
        assert!((y[1] - z[1]).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let x = t(&[1.0, 0.0], &[2]);
        assert!(matches!(
            x.softmax(0, 0.0),
            Err(TensorError::InvalidParameter { .. })
        ));
        assert!(matches!(
            x.log_softmax(0, -2.0),
            Err(TensorError::InvalidParameter { .. })
        ));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = t(&[1.0, 0.0, -2.0, 0.3], &[4]);
        let ls = x.log_softmax(0, 1.7).unwrap().to_vec();
        let s = x.softmax(0, 1.7).unwrap().to_vec();
        for (a, b) in ls.iter().zip(&s) {
            assert!((a - libm::log(*b)).abs() < 1e-12);
        }
        // exp of output sums to 1
        let total: f64 = ls.iter().map(|&v| libm::exp(v)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_hand_values() {
        let x = t(&[0.0, 0.0], &[2]);
        let y = x.log_softmax(0, 1.0).unwrap().to_vec();
        let ln2 = core::f64::consts::LN_2;
        assert!((y[0] + ln2).abs() < 1e-15);
        let x = t(&[1.0, 0.0], &[2]);
        let y = x.log_softmax(0, 1.0).unwrap().to_vec();
        assert!((y[0] + 0.3133).abs() < 1e-4);
        assert!((y[1] + 1.3133).abs() < 1e-4);
    }

    #[test]
    fn backward_sum_is_ones() {
        let x = p(&[1.0, 2.0, 3.0], &[3]);
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_sum() {
        let x = p(&[1.0, 2.0, 3.0], &[3]);
        let loss = x.mul(&x).sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = p(&[1.0, 2.0], &[2]);
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let x = p(&[1.0, 2.0], &[2]);
        let loss = x.sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn shared_subexpression_gradient() {
        // loss = sum(x * x) via two uses of the same node
        let x = p(&[3.0], &[1]);
        let y = x.add(&x); // 2x
        let loss = y.mul(&y).sum_all(); // 4x^2 -> d/dx = 8x = 24
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![24.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = x.permute(&[1, 0]);
        assert_eq!(y.shape(), vec![3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let z = y.permute(&[1, 0]);
        assert_eq!(z.to_vec(), x.to_vec());
    }

    #[test]
    fn take_per_row_and_grad() {
        let x = p(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = x.take_per_row(&[1, 0]);
        assert_eq!(y.to_vec(), vec![2.0, 3.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn embedding_grad_accumulates_repeated_ids() {
        let table = p(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let e = table.embedding(&[1, 1, 0]);
        e.sum_all().backward().unwrap();
        assert_eq!(table.grad_vec().unwrap(), vec![1.0, 1.0, 2.0, 2.0]);
    }

    // Central finite differences as the independent gradient oracle.
    fn finite_diff_check(build: impl Fn(&Tensor) -> Tensor, x0: &[f64], shape: &[usize]) {
        let h = 1e-5;
        let x = p(x0, shape);
        let loss = build(&x);
        loss.backward().unwrap();
        let grad = x.grad_vec().unwrap();
        for i in 0..x0.len() {
            let mut plus = x0.to_vec();
            plus[i] += h;
            let mut minus = x0.to_vec();
            minus[i] -= h;
            let fp = build(&t(&plus, shape)).item();
            let fm = build(&t(&minus, shape)).item();
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1.0);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-6,
                "grad mismatch at {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn gradcheck_composite_graph() {
        let x0 = [0.5, -1.2, 2.0, 0.1, -0.7, 1.5];
        finite_diff_check(
            |x| {
                let w = t(&[0.3, -0.2, 0.8, 0.5, -1.0, 0.4, 0.9, -0.3, 0.2], &[3, 3]);
                let y = x.reshape(&[2, 3]).matmul(&w).unwrap().gelu();
                let s = y.log_softmax(1, 2.3).unwrap();
                s.mul(&s).mean_all()
            },
            &x0,
            &[6],
        );
    }

    #[test]
    fn gradcheck_layer_norm() {
        let x0 = [0.5, -1.2, 2.0, 0.1, -0.7, 1.5, 0.2, 0.9];
        finite_diff_check(
            |x| {
                let g = t(&[1.1, 0.9, 1.0, 1.2], &[4]);
                let b = t(&[0.0, 0.1, -0.1, 0.2], &[4]);
                x.reshape(&[2, 4]).layer_norm(&g, &b, 1e-5).mul(&x.reshape(&[2, 4])).mean_all()
            },
            &x0,
            &[8],
        );
    }

    #[test]
    fn gradcheck_softmax_attention_shape() {
        // 3-D batched matmul + softmax path, the attention core.
        let x0 = [0.5, -0.2, 0.3, 0.8, -0.5, 0.1, 0.4, -0.9, 0.2, 0.6, -0.1, 0.7];
        finite_diff_check(
            |x| {
                let q = x.reshape(&[2, 3, 2]);
                let k = q.permute(&[0, 2, 1]);
                let scores = q.matmul(&k).unwrap().scale(0.5);
                let attn = scores.softmax(2, 1.0).unwrap();
                attn.matmul(&q).unwrap().mean_all()
            },
            &x0,
            &[12],
        );
    }
}
