//! Dense tensors with a reverse-mode tape.
//!
//! Only the operators the CRNN needs are provided. Every operator checks its
//! output for NaN/Inf and records what its backward rule needs. Vars index
//! into the tape, which is append-only and therefore topologically ordered.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many multiply-adds the serial path is used.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics are taken over `outer` and `inner`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl BnLayout {
    fn count(&self) -> usize {
        self.outer * self.inner
    }

    fn channel_of(&self, i: usize) -> usize {
        (i / self.inner) % self.channels
    }
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
    },
    MaxPoolH {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale {
        x: Var,
        factors: Vec<f64>,
    },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ConcatCols(Var, Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    InterleaveSteps {
        parts: Vec<Var>,
    },
    Reshape(Var),
    TransposeLast2(Var),
    Sum(Var),
    Custom {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn mismatch(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        s => Err(mismatch(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape.as_slice() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(mismatch(format!("{what}: expected rank 4, got {s:?}"))),
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Valid output/input ranges for one kernel tap along an axis of size `n`.
#[inline]
fn tap_range(offset: isize, n: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset).min(n as isize).max(0) as usize;
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        check_finite(&value.data, what)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "leaf")
    }

    /// Zero-padded stride-1 cross-correlation.
    /// x `[B, Ci, H, W]`, k `[Co, Ci, K, K]` with odd K, b `[Co]`.
    pub fn conv2d_same(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let [batch, ci, h, w] = dims4(self.value(x), "conv2d input")?;
        let [co, kci, kh, kw] = dims4(self.value(k), "conv2d kernel")?;
        if kci != ci || kh != kw || kh % 2 == 0 {
            return Err(mismatch(format!(
                "conv2d kernel {:?} incompatible with input {:?}",
                self.value(k).shape,
                self.value(x).shape
            )));
        }
        if self.value(b).shape != [co] {
            return Err(mismatch(format!("conv2d bias must be [{co}]")));
        }
        let ksz = kh;
        let pad = (ksz / 2) as isize;
        let plane = h * w;
        let xd = &self.value(x).data;
        let kd = &self.value(k).data;
        let bd = &self.value(b).data;
        let mut out = vec![0.0; batch * co * plane];
        let work = batch * co * ci * ksz * ksz * plane;
        let fill = |(idx, o): (usize, &mut [f64])| {
            let (bi, c_out) = (idx / co, idx % co);
            o.fill(bd[c_out]);
            for c_in in 0..ci {
                let inp = &xd[(bi * ci + c_in) * plane..][..plane];
                let ker = &kd[(c_out * ci + c_in) * ksz * ksz..][..ksz * ksz];
                for ky in 0..ksz {
                    let dy = ky as isize - pad;
                    let (y0, y1) = tap_range(dy, h);
                    for kx in 0..ksz {
                        let dx = kx as isize - pad;
                        let (x0, x1) = tap_range(dx, w);
                        if x0 == x1 {
                            continue;
                        }
                        let wv = ker[ky * ksz + kx];
                        for yy in y0..y1 {
                            let src = ((yy as isize + dy) as usize) * w;
                            let xs = (x0 as isize + dx) as usize;
                            axpy(
                                &mut o[yy * w + x0..yy * w + x1],
                                wv,
                                &inp[src + xs..src + xs + (x1 - x0)],
                            );
                        }
                    }
                }
            }
        };
        if work > PAR_THRESHOLD {
            out.par_chunks_mut(plane).enumerate().for_each(fill);
        } else {
            out.chunks_mut(plane).enumerate().for_each(fill);
        }
        let value = Tensor::new(vec![batch, co, h, w], out)?;
        self.push(value, Op::Conv2d { x, k, b }, "conv2d")
    }

    /// Max over `k` consecutive rows of the third axis with stride `k`.
    /// Ties go to the first maximal row.
    pub fn maxpool_spectral(&mut self, x: Var, k: usize) -> Result<Var> {
        let [batch, c, h, w] = dims4(self.value(x), "maxpool input")?;
        if k == 0 || h % k != 0 {
            return Err(mismatch(format!(
                "pool size {k} does not divide height {h}"
            )));
        }
        let oh = h / k;
        let xd = &self.value(x).data;
        let mut out = vec![0.0; batch * c * oh * w];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..batch * c {
            for r in 0..oh {
                for col in 0..w {
                    let mut best = (plane * h + r * k) * w + col;
                    for j in 1..k {
                        let idx = (plane * h + r * k + j) * w + col;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * oh + r) * w + col;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new(vec![batch, c, oh, w], out)?;
        self.push(value, Op::MaxPoolH { x, argmax }, "maxpool")
    }

    /// Normalizes with statistics of the current batch and returns them.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
    ) -> Result<(Var, BatchStats)> {
        self.check_bn(x, gamma, beta, layout)?;
        let xd = &self.value(x).data;
        let n = layout.count() as f64;
        let mut mean = vec![0.0; layout.channels];
        for (i, v) in xd.iter().enumerate() {
            mean[layout.channel_of(i)] += v;
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; layout.channels];
        for (i, v) in xd.iter().enumerate() {
            let d = v - mean[layout.channel_of(i)];
            var[layout.channel_of(i)] += d * d;
        }
        var.iter_mut().for_each(|v| *v /= n);
        let stats = BatchStats { mean, var };
        let out = self.bn_apply(x, gamma, beta, layout, &stats, true)?;
        Ok((out, stats))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        stats: &BatchStats,
    ) -> Result<Var> {
        self.check_bn(x, gamma, beta, layout)?;
        if stats.mean.len() != layout.channels || stats.var.len() != layout.channels {
            return Err(mismatch("running statistics have the wrong length".into()));
        }
        self.bn_apply(x, gamma, beta, layout, stats, false)
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var, layout: BnLayout) -> Result<()> {
        let n = layout.outer * layout.channels * layout.inner;
        if self.value(x).len() != n
            || self.value(gamma).len() != layout.channels
            || self.value(beta).len() != layout.channels
        {
            return Err(mismatch(format!(
                "batch norm layout {layout:?} does not fit input {:?}",
                self.value(x).shape
            )));
        }
        Ok(())
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        stats: &BatchStats,
        batch_stats: bool,
    ) -> Result<Var> {
        let inv_std: Vec<f64> = stats
            .var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let xv = self.value(x);
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, v) in xv.data.iter().enumerate() {
            let c = layout.channel_of(i);
            let h = (v - stats.mean[c]) * inv_std[c];
            xhat.push(h);
            out.push(g[c] * h + b[c]);
        }
        let value = Tensor::new(xv.shape.clone(), out)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            },
            "batchnorm",
        )
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, what: &str) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op, what)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    /// Elementwise multiplication by constants (dropout masks).
    pub fn scale(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(mismatch("scale factors length".into()));
        }
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().zip(&factors).map(|(a, b)| a * b).collect(),
        };
        self.push(value, Op::Scale { x, factors }, "scale")
    }

    /// Inverted dropout. Rate 0 and inference are the identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        match rng {
            Some(rng) if rate > 0.0 => {
                let mask = dropout_mask(self.value(x).len(), rate, rng);
                self.scale(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// `[n, k] × [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(self.value(a), "matmul lhs")?;
        let (k2, m) = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(mismatch(format!("matmul [{n}x{k}] x [{k2}x{m}]")));
        }
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, n, k, m);
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), "matmul")
    }

    /// Adds a `[m]` bias to every row of `[n, m]`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, m) = dims2(self.value(a), "add_bias")?;
        if self.value(b).len() != m {
            return Err(mismatch(format!(
                "bias length {} vs {m} columns",
                self.value(b).len()
            )));
        }
        let bd = &self.value(b).data;
        let av = self.value(a);
        let data = av
            .data
            .chunks_exact(m)
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(av.shape.clone(), data)?;
        self.push(value, Op::AddBias(a, b), "add_bias")
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        what: &str,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(mismatch(format!(
                "{what}: {:?} vs {:?}",
                av.shape, bv.shape
            )));
        }
        let value = Tensor {
            shape: av.shape.clone(),
            data: av
                .data
                .iter()
                .zip(&bv.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        };
        self.push(value, op, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// `[n, p] ⊕ [n, q] -> [n, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = dims2(self.value(a), "concat lhs")?;
        let (n2, q) = dims2(self.value(b), "concat rhs")?;
        if n != n2 {
            return Err(mismatch(format!("concat rows {n} vs {n2}")));
        }
        let (ad, bd) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            data.extend_from_slice(&ad[r * p..(r + 1) * p]);
            data.extend_from_slice(&bd[r * q..(r + 1) * q]);
        }
        self.push(
            Tensor::new(vec![n, p + q], data)?,
            Op::ConcatCols(a, b),
            "concat",
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, m) = dims2(self.value(x), "gather_rows")?;
        if rows.iter().any(|&r| r >= n) {
            return Err(mismatch(format!("row index out of range for {n} rows")));
        }
        let xd = &self.value(x).data;
        let data = rows
            .iter()
            .flat_map(|&r| xd[r * m..(r + 1) * m].iter().copied())
            .collect();
        let value = Tensor::new(vec![rows.len(), m], data)?;
        self.push(value, Op::GatherRows { x, rows }, "gather_rows")
    }

    /// Stacks per-step `[B, H]` states into `[B * T, H]` with row `b * T + t`.
    pub fn interleave_steps(&mut self, parts: Vec<Var>) -> Result<Var> {
        let steps = parts.len();
        if steps == 0 {
            return Err(mismatch("interleave of zero steps".into()));
        }
        let (batch, h) = dims2(self.value(parts[0]), "interleave")?;
        for p in &parts {
            if self.value(*p).shape != [batch, h] {
                return Err(mismatch("interleave parts differ in shape".into()));
            }
        }
        let mut data = vec![0.0; batch * steps * h];
        for (t, p) in parts.iter().enumerate() {
            let pd = &self.value(*p).data;
            for b in 0..batch {
                data[(b * steps + t) * h..][..h].copy_from_slice(&pd[b * h..(b + 1) * h]);
            }
        }
        let value = Tensor::new(vec![batch * steps, h], data)?;
        self.push(value, Op::InterleaveSteps { parts }, "interleave")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = Tensor::new(shape, self.value(x).data.clone())?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// Swaps the last two axes of a rank ≥ 2 tensor.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.shape.len();
        if rank < 2 {
            return Err(mismatch("transpose needs rank >= 2".into()));
        }
        let (r, c) = (xv.shape[rank - 2], xv.shape[rank - 1]);
        let data = transpose_blocks(&xv.data, r, c);
        let mut shape = xv.shape.clone();
        shape.swap(rank - 2, rank - 1);
        self.push(
            Tensor::new(shape, data)?,
            Op::TransposeLast2(x),
            "transpose",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// A scalar computed outside the tape, with its gradient w.r.t. `x`.
    pub fn custom_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(mismatch("custom gradient length".into()));
        }
        check_finite(&grad, "custom gradient")?;
        self.push(Tensor::scalar(value), Op::Custom { x, grad }, "custom")
    }

    /// Reverse sweep from a scalar node. The tape is left untouched, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n_el = self.value(loss).len();
        if n_el != 1 {
            return Err(Error::NotScalar(n_el));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        check_finite(
            &grads
                .iter()
                .flatten()
                .flatten()
                .copied()
                .collect::<Vec<_>>(),
            "backward",
        )?;
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b } => self.conv2d_backward(*x, *k, *b, g, grads),
            Op::MaxPoolH { x, argmax } => {
                let dx = slot(grads, *x, self.value(*x).len());
                for (j, &src) in argmax.iter().enumerate() {
                    dx[src] += g[j];
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gam = &self.value(*gamma).data;
                let mut dgamma = vec![0.0; layout.channels];
                let mut dbeta = vec![0.0; layout.channels];
                for (idx, gv) in g.iter().enumerate() {
                    let c = layout.channel_of(idx);
                    dgamma[c] += gv * xhat[idx];
                    dbeta[c] += gv;
                }
                let dx = slot(grads, *x, g.len());
                if *batch_stats {
                    let n = layout.count() as f64;
                    // with dxhat = g·γ: dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                    for (idx, gv) in g.iter().enumerate() {
                        let c = layout.channel_of(idx);
                        let dxhat = gv * gam[c];
                        dx[idx] += inv_std[c] / n
                            * (n * dxhat - gam[c] * dbeta[c] - xhat[idx] * gam[c] * dgamma[c]);
                    }
                } else {
                    for (idx, gv) in g.iter().enumerate() {
                        let c = layout.channel_of(idx);
                        dx[idx] += gv * gam[c] * inv_std[c];
                    }
                }
                add_into(slot(grads, *gamma, layout.channels), &dgamma);
                add_into(slot(grads, *beta, layout.channels), &dbeta);
            }
            Op::Relu(x) => {
                let dx = slot(grads, *x, g.len());
                for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                    if *yv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let dx = slot(grads, *x, g.len());
                for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
            Op::Tanh(x) => {
                let dx = slot(grads, *x, g.len());
                for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - yv * yv);
                }
            }
            Op::Scale { x, factors } => {
                let dx = slot(grads, *x, g.len());
                for ((d, gv), f) in dx.iter_mut().zip(g).zip(factors) {
                    *d += gv * f;
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.value(*a), "").unwrap();
                let m = self.value(*b).shape[1];
                let (ad, bd) = (&self.value(*a).data, &self.value(*b).data);
                // dA = G·Bᵀ
                let da = slot(grads, *a, n * k);
                let row_a = |(r, dar): (usize, &mut [f64])| {
                    let gr = &g[r * m..(r + 1) * m];
                    for (kk, d) in dar.iter_mut().enumerate() {
                        *d += dot(gr, &bd[kk * m..(kk + 1) * m]);
                    }
                };
                if n * k * m > PAR_THRESHOLD {
                    da.par_chunks_mut(k).enumerate().for_each(row_a);
                } else {
                    da.chunks_mut(k).enumerate().for_each(row_a);
                }
                // dB = Aᵀ·G
                let db = slot(grads, *b, k * m);
                let row_b = |(kk, dbr): (usize, &mut [f64])| {
                    for r in 0..n {
                        let av = ad[r * k + kk];
                        if av != 0.0 {
                            axpy(dbr, av, &g[r * m..(r + 1) * m]);
                        }
                    }
                };
                if n * k * m > PAR_THRESHOLD {
                    db.par_chunks_mut(m).enumerate().for_each(row_b);
                } else {
                    db.chunks_mut(m).enumerate().for_each(row_b);
                }
            }
            Op::AddBias(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                let m = self.value(*b).len();
                let db = slot(grads, *b, m);
                for row in g.chunks_exact(m) {
                    add_into(db, row);
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                let db = slot(grads, *b, g.len());
                for (d, gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&self.value(*a).data, &self.value(*b).data);
                let da = slot(grads, *a, g.len());
                for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                    *d += gv * bv;
                }
                let db = slot(grads, *b, g.len());
                for ((d, gv), av) in db.iter_mut().zip(g).zip(ad) {
                    *d += gv * av;
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).shape[1];
                let q = self.value(*b).shape[1];
                let da = slot(grads, *a, self.value(*a).len());
                for (r, row) in g.chunks_exact(p + q).enumerate() {
                    add_into(&mut da[r * p..(r + 1) * p], &row[..p]);
                }
                let db = slot(grads, *b, self.value(*b).len());
                for (r, row) in g.chunks_exact(p + q).enumerate() {
                    add_into(&mut db[r * q..(r + 1) * q], &row[p..]);
                }
            }
            Op::GatherRows { x, rows } => {
                let m = self.value(*x).shape[1];
                let dx = slot(grads, *x, self.value(*x).len());
                for (j, &r) in rows.iter().enumerate() {
                    add_into(&mut dx[r * m..(r + 1) * m], &g[j * m..(j + 1) * m]);
                }
            }
            Op::InterleaveSteps { parts } => {
                let steps = parts.len();
                let (batch, h) = dims2(self.value(parts[0]), "").unwrap();
                for (t, p) in parts.iter().enumerate() {
                    let dp = slot(grads, *p, batch * h);
                    for b in 0..batch {
                        add_into(&mut dp[b * h..(b + 1) * h], &g[(b * steps + t) * h..][..h]);
                    }
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::TransposeLast2(x) => {
                let shape = &self.value(*x).shape;
                let rank = shape.len();
                let back = transpose_blocks(g, shape[rank - 1], shape[rank - 2]);
                add_into(slot(grads, *x, g.len()), &back);
            }
            Op::Sum(x) => {
                let dx = slot(grads, *x, self.value(*x).len());
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Custom { x, grad } => {
                let dx = slot(grads, *x, grad.len());
                for (d, gv) in dx.iter_mut().zip(grad) {
                    *d += g[0] * gv;
                }
            }
        }
    }

    fn conv2d_backward(&self, x: Var, k: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let [batch, ci, h, w] = dims4(self.value(x), "").unwrap();
        let [co, _, ksz, _] = dims4(self.value(k), "").unwrap();
        let pad = (ksz / 2) as isize;
        let plane = h * w;
        let xd = &self.value(x).data;
        let kd = &self.value(k).data;
        let parallel = batch * co * ci * ksz * ksz * plane > PAR_THRESHOLD;

        let db = slot(grads, b, co);
        for bi in 0..batch {
            for (c, d) in db.iter_mut().enumerate() {
                *d += g[(bi * co + c) * plane..][..plane].iter().sum::<f64>();
            }
        }

        let dk = slot(grads, k, co * ci * ksz * ksz);
        let kernel_grad = |(idx, dker): (usize, &mut [f64])| {
            let (c_out, c_in) = (idx / ci, idx % ci);
            for bi in 0..batch {
                let gp = &g[(bi * co + c_out) * plane..][..plane];
                let inp = &xd[(bi * ci + c_in) * plane..][..plane];
                for ky in 0..ksz {
                    let dy = ky as isize - pad;
                    let (y0, y1) = tap_range(dy, h);
                    for kx in 0..ksz {
                        let dx = kx as isize - pad;
                        let (x0, x1) = tap_range(dx, w);
                        if x0 == x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for yy in y0..y1 {
                            let src = ((yy as isize + dy) as usize) * w;
                            let xs = (x0 as isize + dx) as usize;
                            acc += dot(
                                &gp[yy * w + x0..yy * w + x1],
                                &inp[src + xs..src + xs + (x1 - x0)],
                            );
                        }
                        dker[ky * ksz + kx] += acc;
                    }
                }
            }
        };
        if parallel {
            dk.par_chunks_mut(ksz * ksz)
                .enumerate()
                .for_each(kernel_grad);
        } else {
            dk.chunks_mut(ksz * ksz).enumerate().for_each(kernel_grad);
        }

        let dxs = slot(grads, x, batch * ci * plane);
        let input_grad = |(idx, dplane): (usize, &mut [f64])| {
            let (bi, c_in) = (idx / ci, idx % ci);
            for c_out in 0..co {
                let gp = &g[(bi * co + c_out) * plane..][..plane];
                let ker = &kd[(c_out * ci + c_in) * ksz * ksz..][..ksz * ksz];
                for ky in 0..ksz {
                    let dy = ky as isize - pad;
                    let (y0, y1) = tap_range(dy, h);
                    for kx in 0..ksz {
                        let dx = kx as isize - pad;
                        let (x0, x1) = tap_range(dx, w);
                        if x0 == x1 {
                            continue;
                        }
                        let wv = ker[ky * ksz + kx];
                        for yy in y0..y1 {
                            let src = ((yy as isize + dy) as usize) * w;
                            let xs = (x0 as isize + dx) as usize;
                            axpy(
                                &mut dplane[src + xs..src + xs + (x1 - x0)],
                                wv,
                                &gp[yy * w + x0..yy * w + x1],
                            );
                        }
                    }
                }
            }
        };
        if parallel {
            dxs.par_chunks_mut(plane).enumerate().for_each(input_grad);
        } else {
            dxs.chunks_mut(plane).enumerate().for_each(input_grad);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_blocks(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (blk_in, blk_out) in data.chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                blk_out[j * r + i] = blk_in[i * c + j];
            }
        }
    }
    out
}

pub fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    let row = |(r, o): (usize, &mut [f64])| {
        for kk in 0..k {
            let av = a[r * k + kk];
            if av != 0.0 {
                axpy(o, av, &b[kk * m..(kk + 1) * m]);
            }
        }
    };
    if n * k * m > PAR_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.chunks_mut(m).enumerate().for_each(row);
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Keep-mask scaled by 1/(1 − rate).
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
