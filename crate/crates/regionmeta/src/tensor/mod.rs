//! N-dimensional `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable operation records its parents and a backward rule.
//! Backward rules are themselves built from these same operations, so the
//! graphs produced during a backward pass are differentiable again — that
//! is what makes second-order meta-gradients possible.
//!
//! Tensors are immutable once built and cheap to clone (shared storage).
//! A graph is confined to the execution context that built it; tensors
//! without a gradient record can be shared freely.

mod autodiff;
mod nn;
mod params;

pub use autodiff::grad;
pub use nn::{
    batchnorm2d, concat_channels, conv2d, conv2d_1x1, linear, maxpool2d, softmax_cross_entropy,
    upsample_nearest2,
};
pub use params::{gradient, gradient_at_adapted, gradient_through_update, ParamSet};

use crate::error::TensorError;
use crate::rng::Rng;
use std::fmt;
use std::sync::Arc;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor> + Send + Sync>;

/// Differentiation record attached to the result of a differentiable op.
pub(crate) struct GradRecord {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    record: Option<GradRecord>,
    requires_grad: bool,
}

/// An n-dimensional array of 64-bit floats in row-major order.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data();
        let head: Vec<f64> = d.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor{:?}{}{:?}{}",
            self.shape(),
            if self.tracked() { " tracked " } else { " " },
            head,
            if d.len() > 8 { "…" } else { "" }
        )
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f64>>, record: Option<GradRecord>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                record,
                requires_grad: false,
            }),
        }
    }

    /// Builds a tensor from row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor::build(shape.to_vec(), Arc::new(data), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::build(shape.to_vec(), Arc::new(vec![value; n]), None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(Vec::new(), Arc::new(vec![value]), None)
    }

    /// Standard-normal entries.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        Tensor::build(shape.to_vec(), Arc::new(data), None)
    }

    /// Uniform entries in [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(lo, hi)).collect();
        Tensor::build(shape.to_vec(), Arc::new(data), None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.inner.data[0]
    }

    /// True when this tensor participates in differentiation.
    pub fn tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.record.is_some()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Same values, no gradient record. Storage is shared.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), Arc::clone(&self.inner.data), None)
    }

    /// Marks this tensor as a differentiable leaf. Any existing record is
    /// dropped, so the result is a fresh root of its own graph.
    pub fn with_grad(&self) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                record: None,
                requires_grad: true,
            }),
        }
    }

    /// Stable identity for graph traversal.
    pub(crate) fn id(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    pub(crate) fn record(&self) -> Option<&GradRecord> {
        self.inner.record.as_ref()
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn unary(
        &self,
        out_data: Vec<f64>,
        out_shape: Vec<usize>,
        backward: impl Fn(&Tensor) -> Vec<Tensor> + Send + Sync + 'static,
    ) -> Tensor {
        let record = if self.tracked() {
            Some(GradRecord {
                parents: vec![self.clone()],
                backward: Box::new(backward),
            })
        } else {
            None
        };
        Tensor::build(out_shape, Arc::new(out_data), record)
    }

    fn binary(
        &self,
        other: &Tensor,
        out_data: Vec<f64>,
        out_shape: Vec<usize>,
        backward: impl Fn(&Tensor) -> Vec<Tensor> + Send + Sync + 'static,
    ) -> Tensor {
        let record = if self.tracked() || other.tracked() {
            Some(GradRecord {
                parents: vec![self.clone(), other.clone()],
                backward: Box::new(backward),
            })
        } else {
            None
        };
        Tensor::build(out_shape, Arc::new(out_data), record)
    }

    // ── Elementwise arithmetic ───────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "add")?;
        let data = zip_map(self.data(), other.data(), |a, b| a + b);
        Ok(self.binary(other, data, self.shape().to_vec(), move |g| {
            vec![g.clone(), g.clone()]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "sub")?;
        let data = zip_map(self.data(), other.data(), |a, b| a - b);
        Ok(self.binary(other, data, self.shape().to_vec(), move |g| {
            vec![g.clone(), g.neg()]
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "mul")?;
        let data = zip_map(self.data(), other.data(), |a, b| a * b);
        let (a, b) = (self.clone(), other.clone());
        Ok(self.binary(other, data, self.shape().to_vec(), move |g| {
            vec![
                g.mul(&b).expect("mul backward shape"),
                g.mul(&a).expect("mul backward shape"),
            ]
        }))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "div")?;
        let data = zip_map(self.data(), other.data(), |a, b| a / b);
        let (a, b) = (self.clone(), other.clone());
        Ok(self.binary(other, data, self.shape().to_vec(), move |g| {
            let ga = g.div(&b).expect("div backward shape");
            let bb = b.mul(&b).expect("div backward shape");
            let gb = g
                .mul(&a)
                .and_then(|t| t.div(&bb))
                .expect("div backward shape")
                .neg();
            vec![ga, gb]
        }))
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|x| -x).collect();
        self.unary(data, self.shape().to_vec(), |g| vec![g.neg()])
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        self.unary(data, self.shape().to_vec(), move |g| vec![g.scale(c)])
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + c).collect();
        self.unary(data, self.shape().to_vec(), |g| vec![g.clone()])
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.exp()).collect();
        let x = self.clone();
        // Recomputing exp(x) in the rule keeps the record cycle-free while
        // staying differentiable.
        self.unary(data, self.shape().to_vec(), move |g| {
            vec![g.mul(&x.exp()).expect("exp backward shape")]
        })
    }

    pub fn ln(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.ln()).collect();
        let x = self.clone();
        self.unary(data, self.shape().to_vec(), move |g| {
            vec![g.div(&x).expect("ln backward shape")]
        })
    }

    /// Elementwise x^p. The subgradient convention at kinks follows powf.
    pub fn powf(&self, p: f64) -> Tensor {
        let data = self.data().iter().map(|x| x.powf(p)).collect();
        let x = self.clone();
        self.unary(data, self.shape().to_vec(), move |g| {
            vec![g
                .mul(&x.powf(p - 1.0))
                .expect("powf backward shape")
                .scale(p)]
        })
    }

    /// Elementwise max(0, x); subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.max(0.0)).collect();
        let mask: Vec<f64> = self
            .data()
            .iter()
            .map(|x| if *x > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(self.shape(), mask).expect("relu mask shape");
        self.unary(data, self.shape().to_vec(), move |g| {
            vec![g.mul(&mask).expect("relu backward shape")]
        })
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    /// 2-D matrix product [M,K] x [K,N] -> [M,N].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(
            self.binary(other, data, vec![m, n], move |g| {
                let ga = g
                    .matmul(&b.transpose().expect("matmul backward"))
                    .expect("matmul backward");
                let gb = a
                    .transpose()
                    .and_then(|at| at.matmul(g))
                    .expect("matmul backward");
                vec![ga, gb]
            }),
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                expected: "a 2-D tensor".into(),
                got: s.to_vec(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.unary(data, vec![c, r], |g| {
            vec![g.transpose().expect("transpose backward")]
        }))
    }

    // ── Shape manipulation ───────────────────────────────────────────────

    /// Row-major reshape; storage is shared, no copy.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                expected,
                got: self.numel(),
            });
        }
        let old_shape = self.shape().to_vec();
        let record = if self.tracked() {
            let back_shape = old_shape.clone();
            Some(GradRecord {
                parents: vec![self.clone()],
                backward: Box::new(move |g: &Tensor| {
                    vec![g.reshape(&back_shape).expect("reshape backward")]
                }),
            })
        } else {
            None
        };
        Ok(Tensor::build(
            shape.to_vec(),
            Arc::clone(&self.inner.data),
            record,
        ))
    }

    /// Axis permutation; materializes the rearranged data.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let s = self.shape();
        let nd = s.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::BadShape {
                op: "permute",
                expected: format!("a permutation of 0..{nd}"),
                got: axes.to_vec(),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let in_strides = row_major_strides(s);
        let out_strides = row_major_strides(&out_shape);
        let src = self.data();
        let mut data = vec![0.0; self.numel()];
        let mut coord = vec![0usize; nd];
        for (flat_out, slot) in data.iter_mut().enumerate() {
            let mut rem = flat_out;
            for d in 0..nd {
                coord[d] = rem / out_strides[d];
                rem %= out_strides[d];
            }
            let mut flat_in = 0;
            for d in 0..nd {
                flat_in += coord[d] * in_strides[axes[d]];
            }
            *slot = src[flat_in];
        }
        let mut inverse = vec![0usize; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.unary(data, out_shape, move |g| {
            vec![g.permute(&inverse).expect("permute backward")]
        }))
    }

    // ── Gather / scatter ─────────────────────────────────────────────────

    /// Gathers `map.len()` values: out[i] = self[map[i]], with map entries of
    /// -1 producing 0. This is the workhorse behind padding, pooling,
    /// upsampling, and broadcasting-by-index; it is linear, so gradients of
    /// gradients pass through it exactly.
    pub fn gather(&self, map: &Arc<Vec<i64>>, out_shape: &[usize]) -> Result<Tensor, TensorError> {
        let expected: usize = out_shape.iter().product();
        if expected != map.len() {
            return Err(TensorError::ElementCount {
                shape: out_shape.to_vec(),
                expected,
                got: map.len(),
            });
        }
        let src = self.data();
        let n = src.len() as i64;
        let mut data = vec![0.0; map.len()];
        for (slot, &ix) in data.iter_mut().zip(map.iter()) {
            if ix >= 0 {
                debug_assert!(ix < n);
                *slot = src[ix as usize];
            }
        }
        let in_shape = self.shape().to_vec();
        let back_map = Arc::clone(map);
        Ok(self.unary(data, out_shape.to_vec(), move |g| {
            vec![g
                .scatter_sum(&back_map, &in_shape)
                .expect("gather backward")]
        }))
    }

    /// Adjoint of [`Tensor::gather`]: out[map[i]] += self[i], skipping -1.
    pub fn scatter_sum(
        &self,
        map: &Arc<Vec<i64>>,
        out_shape: &[usize],
    ) -> Result<Tensor, TensorError> {
        if map.len() != self.numel() {
            return Err(TensorError::ElementCount {
                shape: self.shape().to_vec(),
                expected: self.numel(),
                got: map.len(),
            });
        }
        let out_n: usize = out_shape.iter().product();
        let src = self.data();
        let mut data = vec![0.0; out_n];
        for (&v, &ix) in src.iter().zip(map.iter()) {
            if ix >= 0 {
                debug_assert!((ix as usize) < out_n);
                data[ix as usize] += v;
            }
        }
        let in_shape = self.shape().to_vec();
        let back_map = Arc::clone(map);
        Ok(self.unary(data, out_shape.to_vec(), move |g| {
            vec![g.gather(&back_map, &in_shape).expect("scatter backward")]
        }))
    }

    // ── Reductions ───────────────────────────────────────────────────────

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let in_shape = self.shape().to_vec();
        let n = self.numel();
        self.unary(vec![total], Vec::new(), move |g| {
            let map = Arc::new(vec![0i64; n]);
            vec![g.gather(&map, &in_shape).expect("sum backward")]
        })
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect()
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
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
    out
}
