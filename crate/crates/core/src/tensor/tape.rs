use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    L1 {
        a: Var,
        b: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Cosine {
        a: Var,
        b: Var,
        a_hat: Vec<T>,
        b_hat: Vec<T>,
        a_norm: Vec<T>,
        b_norm: Vec<T>,
        eps: T,
    },
    Log {
        x: Var,
        eps: T,
    },
    ClampMin {
        x: Var,
        min: T,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(_) => "upsample2x",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::L1 { .. } => "l1_distance",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding { .. } => "embedding",
            Op::Cosine { .. } => "cosine_similarity",
            Op::Log { .. } => "log",
            Op::ClampMin { .. } => "clamp_min",
            Op::Gather { .. } => "gather",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records operations in creation order and replays them backwards.
///
/// Operations can only reference earlier handles, so the node order is a
/// topological order and a single reverse sweep visits each node once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite output from {} (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.node(v).value.item()
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let n = self.node(v);
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = kernels::broadcast_shape(sa, sb).ok_or_else(|| {
            Error::shape(format!(
                "{}: cannot broadcast {sa:?} with {sb:?}",
                op.name()
            ))
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = kernels::broadcast_index_map(sa, &out_shape);
            let mb = kernels::broadcast_index_map(sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&out_shape, data)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    /// Natural log of `max(x, eps)`.
    pub fn log(&mut self, x: Var, eps: T) -> Result<Var> {
        self.unary(x, |v| v.max(eps).ln(), Op::Log { x, eps })
    }

    pub fn clamp_min(&mut self, x: Var, min: T) -> Result<Var> {
        self.unary(x, |v| v.max(min), Op::ClampMin { x, min })
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// Transpose of a rank-2 node.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose2()?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Cross-correlation of a `C×H×W` input with a `O×C×k×k` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (value, geom) = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(value, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Nearest-neighbour 2× upsampling of a `C×H×W` node.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [c, h, w] = self.value(x).dims3()?;
        let data = kernels::upsample2x(self.value(x).data(), c, h, w);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(&[c, 2 * h, 2 * w], data)?,
            Op::Upsample2x(x),
            rg,
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let data = kernels::softmax(self.value(x).data(), &shape, axis);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, data)?, Op::Softmax { x, axis }, rg)
    }

    /// Normalises over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let e = *shape.last().unwrap_or(&0);
        if e == 0 {
            return Err(Error::shape("layer_norm over an empty axis"));
        }
        if self.shape(gamma) != [e] || self.shape(beta) != [e] {
            return Err(Error::shape(format!(
                "layer_norm affine shapes {:?}/{:?} do not match last extent {e}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (out, xhat, rstd) = kernels::layer_norm(
            self.value(x).data(),
            e,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        if mean {
            let l = T::from_usize(len).unwrap();
            out.iter_mut().for_each(|v| *v /= l);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        self.push(Tensor::new(&out_shape, out)?, op, rg)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Mean absolute difference.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "l1_distance shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s = va.iter().zip(vb).map(|(&x, &y)| (x - y).abs()).sum::<T>()
            / T::from_usize(va.len()).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s), Op::L1 { a, b }, rg)
    }

    // ---- structural -------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{end} on axis {axis} invalid for {shape:?}"
            )));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(&out_shape, data)?,
            Op::Slice { x, axis, start },
            rg,
        )
    }

    /// Row lookup into a `V×e` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [v, e] = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup with no ids"));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::shape(format!(
                    "token id {id} out of range for vocab {v}"
                )));
            }
            data.extend_from_slice(&src[id * e..(id + 1) * e]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::new(&[ids.len(), e], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Pairwise row cosine similarity: `out[i][j] = cos(a_i, b_j)`, norms
    /// clamped below at `eps`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let [l, e] = self.value(a).dims2()?;
        let [n, e2] = self.value(b).dims2()?;
        if e != e2 {
            return Err(Error::shape(format!(
                "cosine_similarity width mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let normalize = |x: &[T], rows: usize| {
            let mut hat = x.to_vec();
            let mut norms = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &mut hat[r * e..(r + 1) * e];
                let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                row.iter_mut().for_each(|v| *v /= nrm);
                norms.push(nrm);
            }
            (hat, norms)
        };
        let (a_hat, a_norm) = normalize(self.value(a).data(), l);
        let (b_hat, b_norm) = normalize(self.value(b).data(), n);
        let mut out = vec![T::zero(); l * n];
        T::gemm(l, e, n, &a_hat, false, &b_hat, true, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new(&[l, n], out)?,
            Op::Cosine {
                a,
                b,
                a_hat,
                b_hat,
                a_norm,
                b_norm,
                eps,
            },
            rg,
        )
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, data)?,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `∂loss/∂v` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| nodes[v.0].value.data();
        // Gradient buffer for an input, allocated lazily; `None` when the
        // input does not need a gradient.
        fn buf<'g, T: Scalar>(
            nodes: &[Node<T>],
            grads: &'g mut [Option<Vec<T>>],
            v: Var,
        ) -> Option<&'g mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
        }
        let bcast = |v: Var| -> Option<Vec<usize>> {
            let s = nodes[v.0].value.shape();
            (s != out.shape()).then(|| kernels::broadcast_index_map(s, out.shape()))
        };
        // dst[map[k]] += f(k) for every output element k.
        fn scatter<T: Scalar>(dst: &mut [T], map: &Option<Vec<usize>>, f: impl Fn(usize) -> T) {
            match map {
                None => dst.iter_mut().enumerate().for_each(|(k, d)| *d += f(k)),
                Some(m) => m.iter().enumerate().for_each(|(k, &j)| dst[j] += f(k)),
            }
        }
        let at = |map: &Option<Vec<usize>>, data: &[T], k: usize| match map {
            None => data[k],
            Some(m) => data[m[k]],
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(d) = buf(nodes, grads, *a) {
                    scatter(d, &bcast(*a), |k| g[k]);
                }
                if let Some(d) = buf(nodes, grads, *b) {
                    scatter(d, &bcast(*b), |k| sign * g[k]);
                }
            }
            Op::Mul(a, b) => {
                let (ma, mb) = (bcast(*a), bcast(*b));
                let (va, vb) = (val(*a), val(*b));
                if let Some(d) = buf(nodes, grads, *a) {
                    scatter(d, &ma, |k| g[k] * at(&mb, vb, k));
                }
                if let Some(d) = buf(nodes, grads, *b) {
                    scatter(d, &mb, |k| g[k] * at(&ma, va, k));
                }
            }
            Op::Div(a, b) => {
                let (ma, mb) = (bcast(*a), bcast(*b));
                let (va, vb) = (val(*a), val(*b));
                if let Some(d) = buf(nodes, grads, *a) {
                    scatter(d, &ma, |k| g[k] / at(&mb, vb, k));
                }
                if let Some(d) = buf(nodes, grads, *b) {
                    scatter(d, &mb, |k| {
                        let y = at(&mb, vb, k);
                        -g[k] * at(&ma, va, k) / (y * y)
                    });
                }
            }
            Op::Neg(x) => {
                if let Some(d) = buf(nodes, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = buf(nodes, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(d) = buf(nodes, grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::MatMul(a, b) => {
                let [m, k] = nodes[a.0].value.dims2().unwrap();
                let n = out.shape()[1];
                let (va, vb) = (val(*a), val(*b));
                if let Some(d) = buf(nodes, grads, *a) {
                    T::gemm(m, n, k, g, false, vb, true, d, true);
                }
                if let Some(d) = buf(nodes, grads, *b) {
                    T::gemm(k, m, n, va, true, g, false, d, true);
                }
            }
            Op::Transpose(x) => {
                let [r, c] = nodes[x.0].value.dims2().unwrap();
                if let Some(d) = buf(nodes, grads, *x) {
                    for a in 0..r {
                        for b in 0..c {
                            d[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let mut dx = buf(nodes, grads, *x).map(std::mem::take);
                let mut dw = buf(nodes, grads, *w).map(std::mem::take);
                let mut db = b.and_then(|b| buf(nodes, grads, b)).map(std::mem::take);
                kernels::conv2d_backward(
                    vx,
                    vw,
                    g,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    grads[w.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    grads[b.0] = Some(d);
                }
            }
            Op::Upsample2x(x) => {
                let [c, h, w] = nodes[x.0].value.dims3().unwrap();
                if let Some(d) = buf(nodes, grads, *x) {
                    kernels::upsample2x_backward(g, c, h, w, d);
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                if let Some(d) = buf(nodes, grads, *x) {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                if let Some(d) = buf(nodes, grads, *x) {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        *d += g * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                if let Some(d) = buf(nodes, grads, *x) {
                    for ((d, &g), &s) in d.iter_mut().zip(g).zip(y) {
                        *d += g * s * (T::one() - s);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(d) = buf(nodes, grads, *x) {
                    kernels::softmax_backward(out.data(), g, out.shape(), *axis, d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let e = *out.shape().last().unwrap();
                let vg = val(*gamma);
                let mut dx = buf(nodes, grads, *x).map(std::mem::take);
                let mut dg = buf(nodes, grads, *gamma).map(std::mem::take);
                let mut dbeta = buf(nodes, grads, *beta).map(std::mem::take);
                kernels::layer_norm_backward(
                    g,
                    xhat,
                    rstd,
                    vg,
                    e,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    dbeta.as_deref_mut(),
                );
                for (v, d) in [(x, dx), (gamma, dg), (beta, dbeta)] {
                    if let Some(d) = d {
                        grads[v.0] = Some(d);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = buf(nodes, grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::from_usize(nodes[x.0].value.len()).unwrap();
                if let Some(d) = buf(nodes, grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(nodes[x.0].value.shape(), *axis);
                let scale = if matches!(nodes[i].op, Op::MeanAxis { .. }) {
                    T::one() / T::from_usize(len).unwrap()
                } else {
                    T::one()
                };
                if let Some(d) = buf(nodes, grads, *x) {
                    for o in 0..outer {
                        for a in 0..len {
                            for j in 0..inner {
                                d[(o * len + a) * inner + j] += g[o * inner + j] * scale;
                            }
                        }
                    }
                }
            }
            Op::L1 { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let n = T::from_usize(va.len()).unwrap();
                let sign = |k: usize| {
                    let diff = va[k] - vb[k];
                    if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                if let Some(d) = buf(nodes, grads, *a) {
                    d.iter_mut()
                        .enumerate()
                        .for_each(|(k, d)| *d += g[0] * sign(k) / n);
                }
                if let Some(d) = buf(nodes, grads, *b) {
                    d.iter_mut()
                        .enumerate()
                        .for_each(|(k, d)| *d -= g[0] * sign(k) / n);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::axis_split(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if let Some(d) = buf(nodes, grads, *v) {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = kernels::axis_split(nodes[x.0].value.shape(), *axis);
                let width = out.shape()[*axis];
                if let Some(d) = buf(nodes, grads, *x) {
                    for o in 0..outer {
                        let dst =
                            &mut d[(o * len + start) * inner..(o * len + start + width) * inner];
                        let src = &g[o * width * inner..(o + 1) * width * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let e = nodes[table.0].value.shape()[1];
                if let Some(d) = buf(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * e..(r + 1) * e];
                        d[id * e..(id + 1) * e]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Cosine {
                a,
                b,
                a_hat,
                b_hat,
                a_norm,
                b_norm,
                eps,
            } => {
                let [l, n] = out.dims2().unwrap();
                let e = nodes[a.0].value.shape()[1];
                // Gradient w.r.t. the normalised rows, then through x/‖x‖.
                let through_norm = |ghat: &[T], hat: &[T], norms: &[T], d: &mut [T]| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let gh = &ghat[r * e..(r + 1) * e];
                        let h = &hat[r * e..(r + 1) * e];
                        let clamped = nrm <= *eps;
                        let dot = if clamped {
                            T::zero()
                        } else {
                            gh.iter().zip(h).map(|(&x, &y)| x * y).sum::<T>()
                        };
                        for j in 0..e {
                            d[r * e + j] += (gh[j] - h[j] * dot) / nrm;
                        }
                    }
                };
                if let Some(d) = buf(nodes, grads, *a) {
                    let mut ghat = vec![T::zero(); l * e];
                    T::gemm(l, n, e, g, false, b_hat, false, &mut ghat, false);
                    through_norm(&ghat, a_hat, a_norm, d);
                }
                if let Some(d) = buf(nodes, grads, *b) {
                    let mut ghat = vec![T::zero(); n * e];
                    T::gemm(n, l, e, g, true, a_hat, false, &mut ghat, false);
                    through_norm(&ghat, b_hat, b_norm, d);
                }
            }
            Op::Log { x, eps } => {
                let vx = val(*x);
                if let Some(d) = buf(nodes, grads, *x) {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v > *eps {
                            *d += g / v;
                        }
                    }
                }
            }
            Op::ClampMin { x, min } => {
                let vx = val(*x);
                if let Some(d) = buf(nodes, grads, *x) {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v > *min {
                            *d += g;
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(d) = buf(nodes, grads, *x) {
                    for (&j, &g) in index.iter().zip(g) {
                        d[j] += g;
                    }
                }
            }
        }
    }
}
