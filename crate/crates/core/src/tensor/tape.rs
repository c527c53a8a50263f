//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its forward value; `backward` replays the
//! adjoints in reverse record order. A tape is meant to live for a single
//! forward/backward pass and then be dropped.

use super::conv::{conv_backward, conv_forward, dot, Conv2dSpec, Conv3dSpec, ConvGeometry};
use super::dense::{axis_split, log_softmax_kernel, softmax_kernel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norm floor used by `l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var, axis: usize },
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute { x: Var, perm: Vec<usize> },
    Relu(Var),
    LeakyRelu { x: Var, slope: f64 },
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanTrailing { x: Var, count: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    L2Normalize { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Conv { x: Var, w: Var, geom: ConvGeometry },
    Upsample { x: Var, factors: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// `max(x, 0) + slope·min(x, 0)`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, Op::LeakyRelu { x, slope }, move |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    /// Adds a vector along `axis`, broadcasting over every other axis.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis, "add_bias")?;
        if self.shape(bias) != [len] {
            return Err(Error::shape(
                "add_bias",
                format!(
                    "bias {:?} does not match axis {} of {:?}",
                    self.shape(bias),
                    axis,
                    self.shape(x)
                ),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for v in &mut data[base..base + inner] {
                    *v += b[k];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias, axis }, rg))
    }

    /// `M×K · K×N -> M×N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Batched `B×M×K · B×K×N -> B×M×N`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{:?} · {:?}", sa, sb)));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            out.extend(gemm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Bmm(a, b), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{:?} is not a permutation of the axes of {:?}", perm, shape),
            ));
        }
        let value = permute_tensor(self.value(x), perm);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::shape("transpose_last", "needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 1, n - 2);
        self.permute(x, &perm)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis, "sum_axis")?;
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {} out of range", axis)))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Averages over the last `count` axes (spatial pooling for `count = 2`,
    /// spatio-temporal pooling for `count = 3` on N×C×T×H×W).
    pub fn mean_trailing(&mut self, x: Var, count: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if count == 0 || count > shape.len() {
            return Err(Error::shape(
                "mean_trailing",
                format!("cannot pool {} trailing axes of {:?}", count, shape),
            ));
        }
        let keep = shape.len() - count;
        let block: usize = shape[keep..].iter().product();
        let d = self.value(x).data();
        let out: Vec<f64> = d
            .chunks(block.max(1))
            .map(|c| c.iter().sum::<f64>() / block as f64)
            .collect();
        let value = Tensor::new(shape[..keep].to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MeanTrailing { x, count }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis, "log_softmax")?;
        let mut out = vec![0.0; self.value(x).numel()];
        log_softmax_kernel(self.value(x).data(), &mut out, outer, len, inner);
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::LogSoftmax { x, axis }, rg))
    }

    /// Divides each fiber along `axis` by its Euclidean norm (floored at [`NORM_EPS`]).
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis, "l2_normalize")?;
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let norm = (0..len)
                    .map(|k| d[base + k * inner].powi(2))
                    .sum::<f64>()
                    .sqrt()
                    .max(NORM_EPS);
                for k in 0..len {
                    out[base + k * inner] = d[base + k * inner] / norm;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::L2Normalize { x, axis }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {} out of range for {:?}", axis, base_shape),
            ));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} along axis {}", s, base_shape, axis),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(xs);
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = axis_split(&shape, axis, "narrow")?;
        if start + len > full {
            return Err(Error::shape(
                "narrow",
                format!("range {}..{} exceeds extent {} on axis {}", start, start + len, full, axis),
            ));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape).map_err(|_| {
            Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(x), shape),
            )
        })?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Cross-correlation of N×C×T×H×W input with a C'×C×kt×kh×kw kernel.
    pub fn conv3d(&mut self, x: Var, w: Var, spec: Conv3dSpec) -> Result<Var> {
        let geom = ConvGeometry::resolve(self.shape(x), self.shape(w), spec)?;
        let out = conv_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(geom.output_shape(), out)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(value, Op::Conv { x, w, geom }, rg))
    }

    /// Cross-correlation of N×C×H×W input with a C'×C×kh×kw kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "expected N×C×H×W input and C'×C×kh×kw kernel, got {:?} and {:?}",
                    sx, sw
                ),
            ));
        }
        let x5 = self.reshape(x, &[sx[0], sx[1], 1, sx[2], sx[3]])?;
        let w5 = self.reshape(w, &[sw[0], sw[1], 1, sw[2], sw[3]])?;
        let y5 = self.conv3d(x5, w5, spec.lift()).map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape("conv2d", detail),
            other => other,
        })?;
        let s = self.shape(y5).to_vec();
        self.reshape(y5, &[s[0], s[1], s[3], s[4]])
    }

    /// Nearest-neighbour upsampling by an integer factor per axis.
    pub fn upsample_nearest(&mut self, x: Var, factors: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if factors.len() != shape.len() || factors.contains(&0) {
            return Err(Error::shape(
                "upsample_nearest",
                format!("factors {:?} do not fit shape {:?}", factors, shape),
            ));
        }
        let out_shape: Vec<usize> = shape.iter().zip(factors).map(|(s, f)| s * f).collect();
        let src = self.value(x);
        let map = upsample_source_map(&shape, &out_shape, factors);
        let out: Vec<f64> = map.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::new(out_shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::Upsample {
                x,
                factors: factors.to_vec(),
            },
            rg,
        ))
    }

    /// Runs reverse-mode accumulation from a scalar `root`.
    ///
    /// Gradients of earlier backward passes are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root).to_vec();
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for node in &mut self.nodes {
            node.grad = None;
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].requires_grad {
                    let shape = self.nodes[i].value.shape().to_vec();
                    self.nodes[i].grad = Some(Tensor::new(shape, g)?);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddBias { x, bias, axis } => {
                acc(*x, g.to_vec());
                if wants(*bias) {
                    let (outer, len, inner) =
                        axis_split(node.value.shape(), *axis, "add_bias").expect("checked");
                    let mut db = vec![0.0; len];
                    for o in 0..outer {
                        for (k, d) in db.iter_mut().enumerate() {
                            let base = (o * len + k) * inner;
                            *d += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    acc(*a, gemm_nt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    acc(*b, gemm_tn(val(*a), g, m, k, n));
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (val(*a), val(*b));
                if wants(*a) {
                    let mut out = Vec::with_capacity(bs * m * k);
                    for i in 0..bs {
                        out.extend(gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &db[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                        ));
                    }
                    acc(*a, out);
                }
                if wants(*b) {
                    let mut out = Vec::with_capacity(bs * k * n);
                    for i in 0..bs {
                        out.extend(gemm_tn(
                            &da[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    acc(*b, out);
                }
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("shape");
                acc(*x, permute_tensor(&gt, &inverse).into_data());
            }
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::LeakyRelu { x, slope } => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, x)| if *x > 0.0 { *g } else { slope * g })
                    .collect(),
            ),
            Op::Exp(x) => acc(*x, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(x) => acc(*x, g.iter().zip(val(*x)).map(|(g, x)| g / x).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) =
                    axis_split(self.nodes[x.0].value.shape(), *axis, "sum_axis").expect("checked");
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        dx[(o * len + k) * inner..(o * len + k + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, dx);
            }
            Op::MeanTrailing { x, count } => {
                let shape = self.nodes[x.0].value.shape();
                let block: usize = shape[shape.len() - count..].iter().product();
                let mut dx = Vec::with_capacity(val(*x).len());
                for gv in g {
                    dx.extend(std::iter::repeat(gv / block as f64).take(block));
                }
                acc(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) =
                    axis_split(node.value.shape(), *axis, "softmax").expect("checked");
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let s: f64 = (0..len)
                            .map(|k| g[base + k * inner] * y[base + k * inner])
                            .sum();
                        for k in 0..len {
                            let j = base + k * inner;
                            dx[j] = y[j] * (g[j] - s);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) =
                    axis_split(node.value.shape(), *axis, "log_softmax").expect("checked");
                let mut sm = vec![0.0; y.len()];
                softmax_kernel(val(*x), &mut sm, outer, len, inner);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let s: f64 = (0..len).map(|k| g[base + k * inner]).sum();
                        for k in 0..len {
                            let j = base + k * inner;
                            dx[j] = g[j] - sm[j] * s;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::L2Normalize { x, axis } => {
                let xd = val(*x);
                let (outer, len, inner) =
                    axis_split(node.value.shape(), *axis, "l2_normalize").expect("checked");
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let raw = (0..len)
                            .map(|k| xd[base + k * inner].powi(2))
                            .sum::<f64>()
                            .sqrt();
                        let norm = raw.max(NORM_EPS);
                        let proj: f64 = if raw > NORM_EPS {
                            (0..len)
                                .map(|k| y[base + k * inner] * g[base + k * inner])
                                .sum()
                        } else {
                            0.0
                        };
                        for k in 0..len {
                            let j = base + k * inner;
                            dx[j] = (g[j] - y[j] * proj) / norm;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for v in xs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if wants(*v) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[start..start + len * inner]);
                        }
                        acc(*v, dx);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) =
                    axis_split(self.nodes[x.0].value.shape(), *axis, "narrow").expect("checked");
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    dx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Conv { x, w, geom } => {
                let (dx, dw) = conv_backward(geom, val(*x), val(*w), g, wants(*x), wants(*w));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::Upsample { x, factors } => {
                let in_shape = self.nodes[x.0].value.shape();
                let map = upsample_source_map(in_shape, node.value.shape(), factors);
                let mut dx = vec![0.0; val(*x).len()];
                for (gv, &src) in g.iter().zip(&map) {
                    dx[src] += gv;
                }
                acc(*x, dx);
            }
        }
    }
}

/// Row-major `M×K · K×N`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `G · Bᵀ` where G is M×N and B is K×N; result M×K.
fn gemm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            out[i * k + p] = dot(&g[i * n..(i + 1) * n], &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `Aᵀ · G` where A is M×K and G is M×N; result K×N.
fn gemm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let d = t.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(d[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves size")
}

fn upsample_source_map(in_shape: &[usize], out_shape: &[usize], factors: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx
            .iter()
            .zip(factors)
            .zip(&in_strides)
            .map(|((i, f), s)| (i / f) * s)
            .sum();
        map.push(off);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}
