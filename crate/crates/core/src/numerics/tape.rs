//! Reverse-mode differentiation over the fixed operation set the network uses.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! gradients for every node that (transitively) depends on a leaf created with
//! `needs_grad = true`. Nodes that do not need gradients are skipped, so a frozen
//! sub-network costs nothing in the backward pass.

use super::conv::{conv2d_backward, conv2d_forward};
use super::norm::{norm_backward, norm_forward, BatchStats, ChannelMode, NormSaved};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: NormSaved<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    SqrtClamp {
        x: Var,
        floor: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulChannel {
        x: Var,
        gate: Var,
    },
    MulSpatial {
        x: Var,
        gate: Var,
    },
    Gap(Var),
    GlobalMax {
        x: Var,
        arg: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        arg: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        /// Smoothed target distribution per row; all-zero rows are masked.
        q: Vec<T>,
        probs: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    PairwiseSqDist {
        x: Var,
        /// Entries clamped to zero receive no gradient.
        active: Vec<bool>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        w: Vec<T>,
    },
    Combine {
        terms: Vec<(Var, T)>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Gap(x)
            | Op::ChannelMean(x)
            | Op::Softmax(x) => vec![*x],
            Op::SqrtClamp { x, .. }
            | Op::GlobalMax { x, .. }
            | Op::ChannelMax { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::PairwiseSqDist { x, .. }
            | Op::Gather { x, .. }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MulChannel { x, gate } | Op::MulSpatial { x, gate } => vec![*x, *gate],
            Op::Concat { parts } => parts.clone(),
            Op::Combine { terms } => terms.iter().map(|(v, _)| *v).collect(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn rows(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n, d] => (*n, *d),
        [n] => (*n, 1),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` computed as `max(x, 0) + ln(1 + e^-|x|)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First element of a (scalar) node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- convolution and normalization ----

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Per-channel normalization; returns the output and the batch statistics of
    /// batch-normalized channels (empty in eval mode).
    pub fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        modes: &[ChannelMode],
        train: bool,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, BatchStats<T>)> {
        let (y, saved, stats) = norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            modes,
            train,
            running,
        )?;
        let v = self.push(
            y,
            Op::Norm {
                x,
                gamma,
                beta,
                saved,
            },
        );
        Ok((v, stats))
    }

    // ---- elementwise ----

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(softplus);
        self.push(y, Op::Softplus(x))
    }

    /// `sqrt(max(x, floor))`; no gradient flows where `x <= floor`.
    pub fn sqrt_clamped(&mut self, x: Var, floor: T) -> Var {
        let y = self.value(x).map(|v| v.max(floor).sqrt());
        self.push(y, Op::SqrtClamp { x, floor })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q);
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q);
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::AddScalar(x))
    }

    // ---- broadcasting gates ----

    /// `x[n,c,h,w] * gate[n,c]`.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gate);
        if xs.len() != 4 || gs != [xs[0], xs[1]] {
            return Err(Error::shape("mul_channel", &xs, gs));
        }
        let hw = xs[2] * xs[3];
        let g = self.value(gate).data().to_vec();
        let y = Tensor::from_fn(&xs, |i| self.value(x).data()[i] * g[i / hw]);
        Ok(self.push(y, Op::MulChannel { x, gate }))
    }

    /// `x[n,c,h,w] * gate[n,0,h,w]`.
    pub fn mul_spatial(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gate);
        if xs.len() != 4 || gs != [xs[0], 1, xs[2], xs[3]] {
            return Err(Error::shape("mul_spatial", &xs, gs));
        }
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        let g = self.value(gate).data();
        let xd = self.value(x).data();
        let y = Tensor::from_fn(&xs, |i| {
            let (s, p) = (i / (c * hw), i % hw);
            xd[i] * g[s * hw + p]
        });
        Ok(self.push(y, Op::MulSpatial { x, gate }))
    }

    // ---- pooling ----

    /// Spatial global average pooling `n x c x h x w -> n x c`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("gap", &s, &[0, 0, 0, 0]));
        }
        let hw = s[2] * s[3];
        let xd = self.value(x).data();
        let y = Tensor::from_fn(&[s[0], s[1]], |i| {
            xd[i * hw..(i + 1) * hw].iter().copied().sum::<T>() / T::of(hw as f64)
        });
        Ok(self.push(y, Op::Gap(x)))
    }

    /// Spatial global max pooling `n x c x h x w -> n x c`.
    pub fn global_max(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_max", &s, &[0, 0, 0, 0]));
        }
        let hw = s[2] * s[3];
        let xd = self.value(x).data();
        let mut arg = Vec::with_capacity(s[0] * s[1]);
        let mut out = Vec::with_capacity(s[0] * s[1]);
        for i in 0..s[0] * s[1] {
            let seg = &xd[i * hw..(i + 1) * hw];
            let mut best = 0;
            for (j, &v) in seg.iter().enumerate() {
                if v > seg[best] {
                    best = j;
                }
            }
            arg.push(i * hw + best);
            out.push(seg[best]);
        }
        let y = Tensor::new(&[s[0], s[1]], out);
        Ok(self.push(y, Op::GlobalMax { x, arg }))
    }

    /// Mean over channels `n x c x h x w -> n x 1 x h x w`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("channel_mean", &s, &[0, 0, 0, 0]));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = self.value(x).data();
        let y = Tensor::from_fn(&[n, 1, s[2], s[3]], |i| {
            let (b, p) = (i / hw, i % hw);
            (0..c).map(|ch| xd[(b * c + ch) * hw + p]).sum::<T>() / T::of(c as f64)
        });
        Ok(self.push(y, Op::ChannelMean(x)))
    }

    /// Max over channels `n x c x h x w -> n x 1 x h x w`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("channel_max", &s, &[0, 0, 0, 0]));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = self.value(x).data();
        let mut arg = Vec::with_capacity(n * hw);
        let mut out = Vec::with_capacity(n * hw);
        for b in 0..n {
            for p in 0..hw {
                let mut best = b * c * hw + p;
                for ch in 1..c {
                    let i = (b * c + ch) * hw + p;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                arg.push(best);
                out.push(xd[best]);
            }
        }
        let y = Tensor::new(&[n, 1, s[2], s[3]], out);
        Ok(self.push(y, Op::ChannelMax { x, arg }))
    }

    // ---- dense ----

    /// `y = x w^T + b` for `x: n x in`, `w: out x in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("linear bias", self.shape(b), &[ws[0]]));
            }
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut y = Tensor::zeros(&[n, dout]);
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            1,
            din as isize,
            T::zero(),
            y.data_mut(),
            dout as isize,
            1,
        );
        if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            for r in 0..n {
                for (o, &bv) in y.data_mut()[r * dout..(r + 1) * dout].iter_mut().zip(&bd) {
                    *o = *o + bv;
                }
            }
        }
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    /// Concatenate along axis 1; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat", &first, &[0, 0]));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(Error::shape("concat", &first, s));
            }
            total_c += s[1];
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let mut data = Vec::with_capacity(n * total_c * inner);
        for b in 0..n {
            for &p in parts {
                let s = self.shape(p);
                let chunk = s[1] * inner;
                data.extend_from_slice(&self.value(p).data()[b * chunk..(b + 1) * chunk]);
            }
        }
        Ok(self.push(
            Tensor::new(&shape, data),
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Row-wise softmax of an `n x m` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("softmax", &s, &[0, 0]));
        }
        let y = Tensor::new(&s, softmax_rows(self.value(x).data(), s[0], s[1]));
        Ok(self.push(y, Op::Softmax(x)))
    }

    /// Per-row label-smoothed cross-entropy `n x m -> n`.
    ///
    /// Rows whose target is `None` yield 0 and receive no gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: T,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &s, &[targets.len()]));
        }
        let (n, m) = (s[0], s[1]);
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy needs at least 2 classes, got {m}"
            )));
        }
        let off = smoothing / T::of(m as f64);
        let mut q = vec![T::zero(); n * m];
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= m {
                    return Err(Error::InvalidArgument(format!(
                        "target {t} out of range for {m} classes"
                    )));
                }
                for k in 0..m {
                    q[r * m + k] = if k == t { T::one() - smoothing + off } else { off };
                }
            }
        }
        let xd = self.value(logits).data();
        let probs = softmax_rows(xd, n, m);
        let mut losses = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xd[r * m..(r + 1) * m];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            let l = (0..m)
                .map(|k| q[r * m + k] * (lse - row[k]))
                .fold(T::zero(), |a, b| a + b);
            losses.push(l);
        }
        Ok(self.push(
            Tensor::new(&[n], losses),
            Op::CrossEntropy { logits, q, probs },
        ))
    }

    /// Row-wise L2 normalization of an `n x d` matrix.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("l2_normalize", &s, &[0, 0]));
        }
        let (n, d) = (s[0], s[1]);
        let xd = self.value(x).data();
        let norms: Vec<T> = (0..n)
            .map(|r| {
                xd[r * d..(r + 1) * d]
                    .iter()
                    .map(|&v| v * v)
                    .sum::<T>()
                    .sqrt()
                    .max(T::of(1e-12))
            })
            .collect();
        let y = Tensor::from_fn(&s, |i| xd[i] / norms[i / d]);
        Ok(self.push(y, Op::L2Normalize { x, norms }))
    }

    /// Squared Euclidean distances between all rows, `n x d -> n x n`.
    ///
    /// Computed as `|a|^2 + |b|^2 - 2 a.b`, clamped at zero, exactly symmetric.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("pairwise_sq_dist", &s, &[0, 0]));
        }
        let (n, d) = (s[0], s[1]);
        let (out, active) = pairwise_sq_dist_values(self.value(x).data(), n, d);
        Ok(self.push(Tensor::new(&[n, n], out), Op::PairwiseSqDist { x, active }))
    }

    /// Flat-index gather into a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let len = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {len} elements"
            )));
        }
        let xd = self.value(x).data();
        let y = Tensor::new(&[idx.len()], idx.iter().map(|&i| xd[i]).collect());
        Ok(self.push(
            y,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Scalar `sum_k w_k x_k` over the flattened input.
    pub fn weighted_sum(&mut self, x: Var, w: &[T]) -> Result<Var> {
        if self.value(x).len() != w.len() {
            return Err(Error::shape("weighted_sum", self.shape(x), &[w.len()]));
        }
        let y = self
            .value(x)
            .data()
            .iter()
            .zip(w)
            .fold(T::zero(), |a, (&v, &c)| a + v * c);
        Ok(self.push(Tensor::scalar(y), Op::WeightedSum { x, w: w.to_vec() }))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, &vec![T::one(); n])
            .expect("weights sized to input")
    }

    /// Scalar mean of all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let w = T::one() / T::of(n.max(1) as f64);
        self.weighted_sum(x, &vec![w; n])
            .expect("weights sized to input")
    }

    /// Mean over the entries where `mask` is set; `None` if no entry is set.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Option<Var>> {
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Ok(None);
        }
        let w: Vec<T> = mask
            .iter()
            .map(|&m| {
                if m {
                    T::one() / T::of(count as f64)
                } else {
                    T::zero()
                }
            })
            .collect();
        self.weighted_sum(x, &w).map(Some)
    }

    /// Scalar `sum_i c_i s_i` over scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("combine", self.shape(v), &[1]));
            }
            acc = acc + c * self.scalar(v);
        }
        Ok(self.push(
            Tensor::scalar(acc),
            Op::Combine {
                terms: terms.to_vec(),
            },
        ))
    }

    // ---- reverse pass ----

    /// Back-propagate from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar, got {:?}",
            self.shape(root)
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape for node {}", v.0);
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.value(v);
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let want = (ng(*x), ng(*w), b.is_some_and(ng));
                let cg = conv2d_backward(val(*x), val(*w), g, *stride, *pad, want);
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.weight {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.bias) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) = norm_backward(val(*x).shape(), val(*gamma), saved, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu(x) => {
                let d = g.zip_map(y, |gv, yv| if yv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(y, |gv, s| gv * s * (T::one() - s));
                self.accumulate(grads, *x, d);
            }
            Op::Softplus(x) => {
                let d = g.zip_map(val(*x), |gv, xv| gv * sigmoid(xv));
                self.accumulate(grads, *x, d);
            }
            Op::SqrtClamp { x, floor } => {
                let xd = val(*x).data();
                let d = Tensor::from_fn(g.shape(), |i| {
                    if xd[i] > *floor {
                        g.data()[i] * T::of(0.5) / y.data()[i]
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |p, q| p * q));
                }
                if ng(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |p, q| p * q));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * *c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulChannel { x, gate } => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let gd = val(*gate).data();
                if ng(*x) {
                    let d = Tensor::from_fn(s, |i| g.data()[i] * gd[i / hw]);
                    self.accumulate(grads, *x, d);
                }
                if ng(*gate) {
                    let xd = val(*x).data();
                    let d = Tensor::from_fn(val(*gate).shape(), |j| {
                        (j * hw..(j + 1) * hw)
                            .map(|i| g.data()[i] * xd[i])
                            .sum::<T>()
                    });
                    self.accumulate(grads, *gate, d);
                }
            }
            Op::MulSpatial { x, gate } => {
                let s = val(*x).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let gd = val(*gate).data();
                if ng(*x) {
                    let d = Tensor::from_fn(s, |i| {
                        let (b, p) = (i / (c * hw), i % hw);
                        g.data()[i] * gd[b * hw + p]
                    });
                    self.accumulate(grads, *x, d);
                }
                if ng(*gate) {
                    let xd = val(*x).data();
                    let d = Tensor::from_fn(val(*gate).shape(), |j| {
                        let (b, p) = (j / hw, j % hw);
                        (0..c)
                            .map(|ch| {
                                let i = (b * c + ch) * hw + p;
                                g.data()[i] * xd[i]
                            })
                            .sum::<T>()
                    });
                    self.accumulate(grads, *gate, d);
                }
            }
            Op::Gap(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                let d = Tensor::from_fn(s, |i| g.data()[i / hw] * inv);
                self.accumulate(grads, *x, d);
            }
            Op::GlobalMax { x, arg } | Op::ChannelMax { x, arg } => {
                let mut d = Tensor::zeros(val(*x).shape());
                for (k, &i) in arg.iter().enumerate() {
                    d.data_mut()[i] = d.data()[i] + g.data()[k];
                }
                self.accumulate(grads, *x, d);
            }
            Op::ChannelMean(x) => {
                let s = val(*x).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let inv = T::one() / T::of(c as f64);
                let d = Tensor::from_fn(s, |i| {
                    let (b, p) = (i / (c * hw), i % hw);
                    g.data()[b * hw + p] * inv
                });
                self.accumulate(grads, *x, d);
            }
            Op::Linear { x, w, b } => {
                let (n, din) = rows(val(*x).shape());
                let dout = val(*w).dim(0);
                if ng(*x) {
                    let mut dx = Tensor::zeros(val(*x).shape());
                    T::gemm(
                        n,
                        dout,
                        din,
                        T::one(),
                        g.data(),
                        dout as isize,
                        1,
                        val(*w).data(),
                        din as isize,
                        1,
                        T::zero(),
                        dx.data_mut(),
                        din as isize,
                        1,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if ng(*w) {
                    let mut dw = Tensor::zeros(val(*w).shape());
                    T::gemm(
                        dout,
                        n,
                        din,
                        T::one(),
                        g.data(),
                        1,
                        dout as isize,
                        val(*x).data(),
                        din as isize,
                        1,
                        T::zero(),
                        dw.data_mut(),
                        din as isize,
                        1,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if ng(*b) {
                        let db = Tensor::from_fn(&[dout], |o| {
                            (0..n).map(|r| g.data()[r * dout + o]).sum::<T>()
                        });
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Concat { parts } => {
                let n = y.dim(0);
                let inner: usize = y.shape()[2..].iter().product();
                let total = y.dim(1) * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = val(p).dim(1) * inner;
                    if ng(p) {
                        let mut d = Vec::with_capacity(n * chunk);
                        for b in 0..n {
                            let start = b * total + offset;
                            d.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        self.accumulate(grads, p, Tensor::new(val(p).shape(), d));
                    }
                    offset += chunk;
                }
            }
            Op::Softmax(x) => {
                let (n, m) = rows(y.shape());
                let mut d = Tensor::zeros(y.shape());
                for r in 0..n {
                    let yr = &y.data()[r * m..(r + 1) * m];
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..m {
                        d.data_mut()[r * m + k] = yr[k] * (gr[k] - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::CrossEntropy { logits, q, probs } => {
                let (_, m) = rows(val(*logits).shape());
                let d = Tensor::from_fn(val(*logits).shape(), |i| {
                    let r = i / m;
                    // Masked rows have an all-zero q and contribute nothing.
                    let row_live = q[r * m..(r + 1) * m].iter().any(|&v| v != T::zero());
                    if row_live {
                        g.data()[r] * (probs[i] - q[i])
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *logits, d);
            }
            Op::L2Normalize { x, norms } => {
                let (n, dd) = rows(y.shape());
                let mut d = Tensor::zeros(y.shape());
                for r in 0..n {
                    let yr = &y.data()[r * dd..(r + 1) * dd];
                    let gr = &g.data()[r * dd..(r + 1) * dd];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..dd {
                        d.data_mut()[r * dd + k] = (gr[k] - yr[k] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::PairwiseSqDist { x, active } => {
                let (n, dd) = rows(val(*x).shape());
                let xd = val(*x).data();
                let mut d = Tensor::zeros(val(*x).shape());
                for i in 0..n {
                    for j in 0..n {
                        if i == j || !active[i * n + j] {
                            continue;
                        }
                        let coef = T::of(2.0) * (g.data()[i * n + j] + g.data()[j * n + i]);
                        if coef == T::zero() {
                            continue;
                        }
                        for k in 0..dd {
                            let diff = xd[i * dd + k] - xd[j * dd + k];
                            d.data_mut()[i * dd + k] = d.data()[i * dd + k] + coef * diff;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Gather { x, idx } => {
                let mut d = Tensor::zeros(val(*x).shape());
                for (k, &i) in idx.iter().enumerate() {
                    d.data_mut()[i] = d.data()[i] + g.data()[k];
                }
                self.accumulate(grads, *x, d);
            }
            Op::WeightedSum { x, w } => {
                let gv = g.data()[0];
                let d = Tensor::new(val(*x).shape(), w.iter().map(|&c| gv * c).collect());
                self.accumulate(grads, *x, d);
            }
            Op::Combine { terms } => {
                let gv = g.data()[0];
                for &(v, c) in terms {
                    self.accumulate(grads, v, Tensor::full(val(v).shape(), gv * c));
                }
            }
        }
    }
}

fn softmax_rows<T: Scalar>(x: &[T], n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for r in 0..n {
        let row = &x[r * m..(r + 1) * m];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for k in 0..m {
            let e = (row[k] - mx).exp();
            out[r * m + k] = e;
            z = z + e;
        }
        for v in &mut out[r * m..(r + 1) * m] {
            *v = *v / z;
        }
    }
    out
}

/// Squared distances via the norm expansion; returns values and the mask of
/// unclamped off-diagonal entries.
pub fn pairwise_sq_dist_values<T: Scalar>(x: &[T], n: usize, d: usize) -> (Vec<T>, Vec<bool>) {
    let sq: Vec<T> = (0..n)
        .map(|i| x[i * d..(i + 1) * d].iter().map(|&v| v * v).sum())
        .collect();
    let mut out = vec![T::zero(); n * n];
    let mut active = vec![false; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dot: T = x[i * d..(i + 1) * d]
                .iter()
                .zip(&x[j * d..(j + 1) * d])
                .map(|(&a, &b)| a * b)
                .sum();
            let raw = sq[i] + sq[j] - T::of(2.0) * dot;
            let (v, live) = if raw > T::zero() {
                (raw, true)
            } else {
                (T::zero(), false)
            };
            out[i * n + j] = v;
            out[j * n + i] = v;
            active[i * n + j] = live;
            active[j * n + i] = live;
        }
    }
    (out, active)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0 && softplus(-1000.0f64) < 1e-300);
        assert!(softplus(-800.0f32).is_finite());
    }

    #[test]
    fn sigmoid_and_softmax_ranges() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[2, 3], vec![-20.0, 0.0, 20.0, 1.0, 2.0, 3.0]));
        let s = t.sigmoid(x);
        assert!(t.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let p = t.softmax(x).unwrap();
        for r in 0..2 {
            let sum: f64 = t.value(p).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::new(&[2], vec![1.0, 2.0]), true);
        let b = t.constant(Tensor::new(&[2], vec![3.0, 4.0]));
        let p = t.mul(a, b).unwrap();
        let s = t.sum(p);
        let g = t.backward(s);
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn masked_cross_entropy_rows_are_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(&[2, 2], vec![0.3, -0.1, 2.0, 1.0]), true);
        let ce = t.cross_entropy(x, &[None, Some(1)], 0.1).unwrap();
        assert_eq!(t.value(ce).data()[0], 0.0);
        let s = t.sum(ce);
        let g = t.backward(s);
        let d = g.get(x).unwrap().data();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!(d[2] != 0.0);
    }

    #[test]
    fn pairwise_is_symmetric_with_zero_diagonal() {
        let x = [0.1f64, 0.7, -0.3, 0.2, 0.9, -1.1];
        let (d, _) = pairwise_sq_dist_values(&x, 3, 2);
        for i in 0..3 {
            assert_eq!(d[i * 3 + i], 0.0);
            for j in 0..3 {
                assert_eq!(d[i * 3 + j], d[j * 3 + i]);
                assert!(d[i * 3 + j] >= 0.0);
            }
        }
    }

    #[test]
    fn combine_rejects_non_scalars() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[2]));
        assert!(t.combine(&[(x, 1.0)]).is_err());
    }
}
