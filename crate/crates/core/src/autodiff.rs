//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order, which is a topological order by construction. [`Graph::backward`]
//! walks the nodes once in reverse and accumulates gradients. Values are
//! stored and accumulated in `f64`; every reduction runs in a fixed
//! sequential order, so identical inputs give bitwise-identical results.

use crate::error::{invalid, Error, Result};
use crate::relmatrix::{shape_params, RelationshipMatrix, ShapeParams};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a trainable parameter in a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    SignSte(Var),
    Sum(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, stride: usize, padding: usize },
    TransposeConv2d { x: Var, w: Var, stride: usize },
    MaskWeight { w: Var, mask: Var },
    GatedMask { gates: Var, params: ShapeParams, base: Option<Vec<f64>> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Concat { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    BiasAdd { x: Var, b: Var },
    GlobalAvgPool(Var),
    WeightedCe { logits: Var, probs: Vec<f64>, targets: Vec<Option<usize>>, weights: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of parameter leaves, in registration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }
}

fn check_same(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return invalid("stride must be positive");
    }
    if size + 2 * padding < k {
        return invalid(format!("kernel {k} larger than padded input {}", size + 2 * padding));
    }
    Ok((size + 2 * padding - k) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn q(&self) -> usize {
        self.c * self.k * self.k
    }
    fn l(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let l = g.l();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for m in 0..g.k {
            for n in 0..g.k {
                let row = &mut cols[((ci * g.k + m) * g.k + n) * l..][..l];
                for i in 0..g.ho {
                    let y = (i * g.stride + m) as isize - g.padding as isize;
                    let out = &mut row[i * g.wo..(i + 1) * g.wo];
                    if y < 0 || y >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (j, o) in out.iter_mut().enumerate() {
                        let xx = (j * g.stride + n) as isize - g.padding as isize;
                        *o = if xx < 0 || xx >= g.w as isize { 0.0 } else { src[xx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let l = g.l();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for m in 0..g.k {
            for n in 0..g.k {
                let row = &cols[((ci * g.k + m) * g.k + n) * l..][..l];
                for i in 0..g.ho {
                    let y = (i * g.stride + m) as isize - g.padding as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for j in 0..g.wo {
                        let xx = (j * g.stride + n) as isize - g.padding as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dst[xx as usize] += row[i * g.wo + j];
                        }
                    }
                }
            }
        }
    }
}

/// `out[o, :] += sum_q a[o, q] * b[q, :]`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for o in 0..rows {
        let dst = &mut out[o * cols..(o + 1) * cols];
        for q in 0..inner {
            let av = a[o * inner + q];
            if av == 0.0 {
                continue;
            }
            let src = &b[q * cols..(q + 1) * cols];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += av * s;
            }
        }
    }
}

/// `out[o, q] += sum_l a[o, l] * b[q, l]`.
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for o in 0..rows {
        let ar = &a[o * inner..(o + 1) * inner];
        for q in 0..cols {
            let br = &b[q * inner..(q + 1) * inner];
            out[o * cols + q] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[q, :] += sum_o a[o, q] * b[o, :]`.
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], inner: usize, rows: usize, cols: usize) {
    for o in 0..inner {
        let src = &b[o * cols..(o + 1) * cols];
        for q in 0..rows {
            let av = a[o * rows + q];
            if av == 0.0 {
                continue;
            }
            let dst = &mut out[q * cols..(q + 1) * cols];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += av * s;
            }
        }
    }
}

/// Product `prod_{k : bit k of a != bit k of b} g_k`, factor 1 outermost.
fn gated_entry(g: &[f64], a: usize, b: usize) -> f64 {
    let k = g.len();
    let diff = a ^ b;
    let mut v = 1.0;
    for (i, gi) in g.iter().enumerate() {
        if diff >> (k - 1 - i) & 1 == 1 {
            v *= gi;
        }
    }
    v
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A gradient-receiving leaf bound to a stored parameter.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(ta, tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v.max(0.0)).collect()).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Forward: sign binarization. Backward: the gradient passes where
    /// `|x| <= 1` and is zero elsewhere.
    pub fn sign_ste(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect())
            .unwrap();
        let rg = self.rg(x);
        self.push(t, Op::SignSte(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.value(a).dims2()?;
        let [k2, n] = self.value(b).dims2()?;
        if k != k2 {
            return invalid(format!("matmul: inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `y = x w^T + b` with `x: (N, I)`, `w: (O, I)`, `b: (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, i] = self.value(x).dims2()?;
        let [o, i2] = self.value(w).dims2()?;
        if i != i2 || self.value(b).shape() != [o] {
            return invalid(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(self.value(b).data());
        }
        gemm_nt_acc(self.value(x).data(), self.value(w).data(), &mut out, n, i, o);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, o], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Cross-correlation of `x: (N, C, H, W)` with `w: (O, C, k, k)` and
    /// zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [o, c2, k, k2] = self.value(w).dims4()?;
        if c != c2 || k != k2 {
            return invalid(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            ));
        }
        let g = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            padding,
            ho: conv_out(h, k, stride, padding)?,
            wo: conv_out(wd, k, stride, padding)?,
        };
        let (q, l) = (g.q(), g.l());
        let mut out = vec![0.0; n * o * l];
        let mut cols = vec![0.0; q * l];
        let (tx, tw) = (self.value(x).data(), self.value(w).data());
        for s in 0..n {
            im2col(&tx[s * c * h * wd..(s + 1) * c * h * wd], &g, &mut cols);
            gemm_acc(tw, &cols, &mut out[s * o * l..(s + 1) * o * l], o, q, l);
        }
        let t = Tensor::new(vec![n, o, g.ho, g.wo], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv2d { x, w, stride, padding }, rg))
    }

    /// Convolution with a constant relationship mask on the kernel. No
    /// gradient reaches the mask; the kernel gradient is masked.
    pub fn masked_conv2d(
        &mut self,
        x: Var,
        w: Var,
        mask: &RelationshipMatrix,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let m = self.constant(Tensor::new(vec![mask.rows(), mask.cols()], mask.to_f64())?);
        let wm = self.mask_weight(w, m)?;
        self.conv2d(x, wm, stride, padding)
    }

    /// `w'[o, c, ..] = mask[o, c] * w[o, c, ..]` for `w: (O, C, k, k)` and
    /// `mask: (O, C)`.
    pub fn mask_weight(&mut self, w: Var, mask: Var) -> Result<Var> {
        let [o, c, kh, kw] = self.value(w).dims4()?;
        if self.value(mask).shape() != [o, c] {
            return invalid(format!(
                "mask {:?} does not match kernel {:?}",
                self.value(mask).shape(),
                self.value(w).shape()
            ));
        }
        let kk = kh * kw;
        let (tw, tm) = (self.value(w).data(), self.value(mask).data());
        let data = tw.iter().enumerate().map(|(idx, &v)| v * tm[idx / kk]).collect();
        let t = Tensor::new(vec![o, c, kh, kw], data)?;
        let rg = self.rg(w) || self.rg(mask);
        Ok(self.push(t, Op::MaskWeight { w, mask }, rg))
    }

    /// Relationship matrix of a `c_in -> c_out` layer from gate values,
    /// optionally multiplied entrywise by a fixed base mask.
    ///
    /// Each base entry is the product of the gates at which the row and
    /// column indices differ, which equals the Kronecker construction for
    /// binary gates and extends it smoothly to real ones. When every gate
    /// is binary the result must have a 1 in every row.
    pub fn gated_mask(
        &mut self,
        gates: Var,
        c_in: usize,
        c_out: usize,
        base: Option<&RelationshipMatrix>,
    ) -> Result<Var> {
        let params = shape_params(c_in, c_out)?;
        let g = self.value(gates).data().to_vec();
        if g.len() != params.k || self.value(gates).shape().len() != 1 {
            return invalid(format!(
                "{c_in} -> {c_out} layer needs {} gates, got {:?}",
                params.k,
                self.value(gates).shape()
            ));
        }
        if let Some(b) = base {
            if (b.rows(), b.cols()) != (c_out, c_in) {
                return invalid(format!("base mask {}x{} does not match {c_out}x{c_in}", b.rows(), b.cols()));
            }
        }
        let base = base.map(RelationshipMatrix::to_f64);
        let mut data = vec![0.0; c_out * c_in];
        for o in 0..c_out {
            for i in 0..c_in {
                let (a, b) = params.source(o, i);
                let f = base.as_ref().map_or(1.0, |bm| bm[o * c_in + i]);
                data[o * c_in + i] = f * gated_entry(&g, a, b);
            }
        }
        if g.iter().all(|&v| v == 0.0 || v == 1.0) {
            if let Some(row) = (0..c_out).find(|&o| data[o * c_in..(o + 1) * c_in].iter().all(|&v| v == 0.0)) {
                return Err(Error::DegenerateMask { row, rows: c_out, cols: c_in });
            }
        }
        let rg = self.rg(gates);
        Ok(self.push(Tensor::new(vec![c_out, c_in], data)?, Op::GatedMask { gates, params, base }, rg))
    }

    /// Transposed convolution, `x: (N, C, H, W)`, `w: (O, C, k, k)`, no
    /// padding; output is `((H-1)s + k, (W-1)s + k)`.
    pub fn transpose_conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [o, c2, k, k2] = self.value(w).dims4()?;
        if c != c2 || k != k2 || stride == 0 {
            return invalid(format!(
                "transpose_conv2d: input {:?} incompatible with kernel {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            ));
        }
        let (ho, wo) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        let (tx, tw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; n * o * ho * wo];
        for s in 0..n {
            for oc in 0..o {
                let dst = &mut out[(s * o + oc) * ho * wo..(s * o + oc + 1) * ho * wo];
                for ic in 0..c {
                    let src = &tx[(s * c + ic) * h * wd..(s * c + ic + 1) * h * wd];
                    for m in 0..k {
                        for q in 0..k {
                            let wv = tw[((oc * c + ic) * k + m) * k + q];
                            if wv == 0.0 {
                                continue;
                            }
                            for i in 0..h {
                                let row = (i * stride + m) * wo;
                                for j in 0..wd {
                                    dst[row + j * stride + q] += wv * src[i * wd + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(vec![n, o, ho, wo], out)?, Op::TransposeConv2d { x, w, stride }, rg))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let d = self.value(x).dims4()?;
        if self.value(gamma).shape() != [d[1]] || self.value(beta).shape() != [d[1]] {
            return invalid(format!("batch_norm: {} channels, affine {:?}", d[1], self.value(gamma).shape()));
        }
        Ok(d)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let (tx, tg, tb) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.len()];
        let mut out = vec![0.0; tx.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for p in base..base + hw {
                    let z = (tx[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = z;
                    out[p] = tg[ch] * z + tb[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, rg))
    }

    /// Batch norm over `(N, H, W)` using the statistics of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let [n, c, h, w] = self.bn_check(x, gamma, beta)?;
        let m = n * h * w;
        if m == 0 {
            return invalid("batch_norm: empty batch");
        }
        let tx = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += tx[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].iter().sum::<f64>();
            }
            mean[ch] = s / m as f64;
            let mut ss = 0.0;
            for b in 0..n {
                ss += tx[(b * c + ch) * h * w..(b * c + ch + 1) * h * w]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = ss / m as f64;
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let y = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        let unbiased = if m > 1 { var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect() } else { var };
        Ok((y, BatchStats { mean, var: unbiased }))
    }

    /// Batch norm with fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let [_, c, _, _] = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return invalid("batch_norm: running statistics do not match channels");
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return invalid(format!("max_pool2d: input {h}x{w} too small"));
        }
        let tx = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0; out.len()];
        for plane in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = plane * h * w + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let p = plane * h * w + (2 * i + di) * w + 2 * j + dj;
                        if tx[p] > tx[best] {
                            best = p;
                        }
                    }
                    let o = (plane * ho + i) * wo + j;
                    out[o] = tx[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, ho, wo], out)?, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Concatenation along the channel axis of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [n2, cb, h2, w2] = self.value(b).dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return invalid(format!("concat: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&ta[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&tb[s * cb * hw..(s + 1) * cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, ca + cb, h, w], out)?, Op::Concat { a, b }, rg))
    }

    /// Adds `b[c]` to every element of channel `c` of an NCHW tensor.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.value(b).shape() != [c] {
            return invalid(format!("bias {:?} for {c} channels", self.value(b).shape()));
        }
        let hw = h * w;
        let tb = self.value(b).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| v + tb[i / hw % c]).collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, c, h, w], data)?, Op::BiasAdd { x, b }, rg))
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if len == 0 || start + len > c {
            return invalid(format!("channel slice {start}..{} of {c} channels", start + len));
        }
        let hw = h * w;
        let tx = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&tx[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, len, h, w], out)?, Op::SliceChannels { x, start }, rg))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let tx = self.value(x).data();
        let out = (0..n * c).map(|p| tx[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// Mean over non-ignored positions of `w_y * -log softmax(logits)_y`.
    ///
    /// `logits` is `(N, C)` or `(N, C, H, W)`; `targets` holds one label per
    /// position (`N` or `N*H*W`), negative labels are ignored, as are
    /// positions flagged in `ignore`. With nothing left the loss is 0.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[i64],
        weights: &[f64],
        ignore: Option<&[bool]>,
    ) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return invalid(format!("cross entropy expects (N,C) or (N,C,H,W) logits, got {shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if targets.len() != n * spatial || weights.len() != c {
            return invalid(format!(
                "cross entropy: {} targets / {} weights for logits {shape:?}",
                targets.len(),
                weights.len()
            ));
        }
        if ignore.is_some_and(|m| m.len() != targets.len()) {
            return invalid("cross entropy: ignore mask length differs from targets");
        }
        let tl = self.value(logits).data();
        let mut probs = vec![0.0; tl.len()];
        let mut labels = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        let mut count = 0;
        for (pos, &t) in targets.iter().enumerate() {
            let (s, sp) = (pos / spatial, pos % spatial);
            let at = |ch: usize| (s * c + ch) * spatial + sp;
            let mx = (0..c).map(|ch| tl[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (tl[at(ch)] - mx).exp()).sum();
            for ch in 0..c {
                probs[at(ch)] = (tl[at(ch)] - mx).exp() / z;
            }
            let skip = t < 0 || ignore.is_some_and(|m| m[pos]);
            if skip {
                labels.push(None);
                continue;
            }
            let y = t as usize;
            if y >= c {
                return invalid(format!("label {t} out of range for {c} classes"));
            }
            total += weights[y] * -(tl[at(y)] - mx - z.ln());
            count += 1;
            labels.push(Some(y));
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        let op = Op::WeightedCe { logits, probs, targets: labels, weights: weights.to_vec(), count };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return invalid(format!("backward needs a scalar root, got shape {:?}", self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            self.backprop(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        let params = self.nodes.iter().enumerate().filter_map(|(i, n)| n.param.map(|p| (p, i))).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let go = gout.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| (0..g.len()).for_each(|i| g[i] += go[i] * tb[i]));
                acc(*b, &mut |g| (0..g.len()).for_each(|i| g[i] += go[i] * ta[i]));
            }
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                acc(*x, &mut |g| {
                    (0..g.len()).for_each(|i| {
                        if tx[i] > 0.0 {
                            g[i] += go[i]
                        }
                    })
                });
            }
            Op::SignSte(x) => {
                let tx = self.value(*x).data();
                acc(*x, &mut |g| {
                    (0..g.len()).for_each(|i| {
                        if tx[i].abs() <= 1.0 {
                            g[i] += go[i]
                        }
                    })
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += go[0]));
            }
            Op::MatMul(a, b) => {
                let [m, k] = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| gemm_nt_acc(go, tb, g, m, n, k));
                acc(*b, &mut |g| gemm_tn_acc(ta, go, g, m, k, n));
            }
            Op::Linear { x, w, b } => {
                let [n, i] = self.value(*x).dims2().unwrap();
                let o = self.value(*w).shape()[0];
                let (tx, tw) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |g| gemm_acc(go, tw, g, n, o, i));
                acc(*w, &mut |g| gemm_tn_acc(go, tx, g, n, o, i));
                acc(*b, &mut |g| {
                    for r in 0..n {
                        g.iter_mut().zip(&go[r * o..(r + 1) * o]).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Conv2d { x, w, stride, padding } => {
                let [n, c, h, wd] = self.value(*x).dims4().unwrap();
                let [o, _, k, _] = self.value(*w).dims4().unwrap();
                let [_, _, ho, wo] = node.value.dims4().unwrap();
                let geom = ConvGeom { c, h, w: wd, k, stride: *stride, padding: *padding, ho, wo };
                let (q, l) = (geom.q(), geom.l());
                let (tx, tw) = (self.value(*x).data(), self.value(*w).data());
                let mut cols = vec![0.0; q * l];
                if self.rg(*w) {
                    acc(*w, &mut |g| {
                        for s in 0..n {
                            im2col(&tx[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut cols);
                            gemm_nt_acc(&go[s * o * l..(s + 1) * o * l], &cols, g, o, l, q);
                        }
                    });
                }
                if self.rg(*x) {
                    acc(*x, &mut |g| {
                        for s in 0..n {
                            cols.fill(0.0);
                            gemm_tn_acc(tw, &go[s * o * l..(s + 1) * o * l], &mut cols, o, q, l);
                            col2im(&cols, &geom, &mut g[s * c * h * wd..(s + 1) * c * h * wd]);
                        }
                    });
                }
            }
            Op::TransposeConv2d { x, w, stride } => {
                let [n, c, h, wd] = self.value(*x).dims4().unwrap();
                let [o, _, k, _] = self.value(*w).dims4().unwrap();
                let [_, _, ho, wo] = node.value.dims4().unwrap();
                let (tx, tw) = (self.value(*x).data(), self.value(*w).data());
                let s = *stride;
                acc(*x, &mut |g| {
                    for b in 0..n {
                        for oc in 0..o {
                            let src = &go[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo];
                            for ic in 0..c {
                                let dst = &mut g[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                                for m in 0..k {
                                    for q in 0..k {
                                        let wv = tw[((oc * c + ic) * k + m) * k + q];
                                        for i in 0..h {
                                            for j in 0..wd {
                                                dst[i * wd + j] += wv * src[(i * s + m) * wo + j * s + q];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for b in 0..n {
                        for oc in 0..o {
                            let src = &go[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo];
                            for ic in 0..c {
                                let xin = &tx[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                                for m in 0..k {
                                    for q in 0..k {
                                        let mut sacc = 0.0;
                                        for i in 0..h {
                                            for j in 0..wd {
                                                sacc += xin[i * wd + j] * src[(i * s + m) * wo + j * s + q];
                                            }
                                        }
                                        g[((oc * c + ic) * k + m) * k + q] += sacc;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaskWeight { w, mask } => {
                let [_, _, kh, kw] = self.value(*w).dims4().unwrap();
                let kk = kh * kw;
                let (tw, tm) = (self.value(*w).data(), self.value(*mask).data());
                acc(*w, &mut |g| (0..g.len()).for_each(|i| g[i] += go[i] * tm[i / kk]));
                acc(*mask, &mut |g| {
                    for (j, gm) in g.iter_mut().enumerate() {
                        *gm += (0..kk).map(|t| go[j * kk + t] * tw[j * kk + t]).sum::<f64>();
                    }
                });
            }
            Op::GatedMask { gates, params, base } => {
                let g = self.value(*gates).data().to_vec();
                let kf = g.len();
                let (c_out, c_in) = (params.c_out, params.c_in);
                acc(*gates, &mut |gg| {
                    for o in 0..c_out {
                        for i in 0..c_in {
                            let up = go[o * c_in + i] * base.as_ref().map_or(1.0, |b| b[o * c_in + i]);
                            if up == 0.0 {
                                continue;
                            }
                            let (a, b) = params.source(o, i);
                            let diff = a ^ b;
                            for t in 0..kf {
                                if diff >> (kf - 1 - t) & 1 == 0 {
                                    continue;
                                }
                                let mut prod = 1.0;
                                for (u, gu) in g.iter().enumerate() {
                                    if u != t && diff >> (kf - 1 - u) & 1 == 1 {
                                        prod *= gu;
                                    }
                                }
                                gg[t] += up * prod;
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let [n, c, h, w] = self.value(*x).dims4().unwrap();
                let hw = h * w;
                let m = (n * hw) as f64;
                let tg = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for p in base..base + hw {
                            sum_dy[ch] += go[p];
                            sum_dy_xhat[ch] += go[p] * xhat[p];
                        }
                    }
                }
                acc(*gamma, &mut |g| g.iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += b));
                acc(*beta, &mut |g| g.iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += b));
                acc(*x, &mut |g| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let scale = tg[ch] * inv_std[ch];
                            for p in base..base + hw {
                                g[p] += if *batch_stats {
                                    scale * (go[p] - sum_dy[ch] / m - xhat[p] * sum_dy_xhat[ch] / m)
                                } else {
                                    scale * go[p]
                                };
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                acc(*x, &mut |g| argmax.iter().zip(go).for_each(|(&src, d)| g[src] += d));
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(*a).dims4().unwrap();
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let ct = ca + cb;
                acc(*a, &mut |g| {
                    for s in 0..n {
                        for (d, v) in g[s * ca * hw..(s + 1) * ca * hw].iter_mut().zip(&go[s * ct * hw..]) {
                            *d += v;
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for s in 0..n {
                        for (d, v) in g[s * cb * hw..(s + 1) * cb * hw].iter_mut().zip(&go[(s * ct + ca) * hw..]) {
                            *d += v;
                        }
                    }
                });
            }
            Op::BiasAdd { x, b } => {
                let [_, c, h, w] = self.value(*x).dims4().unwrap();
                let hw = h * w;
                acc(*x, &mut |g| g.iter_mut().zip(go).for_each(|(d, v)| *d += v));
                acc(*b, &mut |g| go.iter().enumerate().for_each(|(i, v)| g[i / hw % c] += v));
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.value(*x).dims4().unwrap();
                let len = node.value.shape()[1];
                let hw = h * w;
                acc(*x, &mut |g| {
                    for s in 0..n {
                        let dst = &mut g[(s * c + start) * hw..(s * c + start + len) * hw];
                        dst.iter_mut().zip(&go[s * len * hw..(s + 1) * len * hw]).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.value(*x).dims4().unwrap();
                let hw = h * w;
                acc(*x, &mut |g| (0..g.len()).for_each(|i| g[i] += go[i / hw] / hw as f64));
            }
            Op::WeightedCe { logits, probs, targets, weights, count } => {
                if *count == 0 {
                    return;
                }
                let shape = self.value(*logits).shape();
                let (c, spatial) = (shape[1], shape[2..].iter().product::<usize>());
                let scale = go[0] / *count as f64;
                acc(*logits, &mut |g| {
                    for (pos, t) in targets.iter().enumerate() {
                        let Some(y) = *t else { continue };
                        let (s, sp) = (pos / spatial, pos % spatial);
                        let f = weights[y] * scale;
                        for ch in 0..c {
                            let at = (s * c + ch) * spatial + sp;
                            g[at] += f * (probs[at] - if ch == y { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
        }
    }
}

/// Index of the largest value along the class axis, per position.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let shape = logits.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let d = logits.data();
    let mut out = Vec::with_capacity(n * spatial);
    for s in 0..n {
        for sp in 0..spatial {
            let mut best = 0;
            for ch in 1..c {
                if d[(s * c + ch) * spatial + sp] > d[(s * c + best) * spatial + sp] {
                    best = ch;
                }
            }
            out.push(best);
        }
    }
    out
}
