//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass in creation order.
//! [`Tape::backward`] walks the records once in reverse and accumulates
//! gradients into every node that requires them. Tapes are built per forward
//! pass and dropped afterwards.

use crate::error::{Error, Result};
use crate::tensor::{permute_data, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fault injection for exercising the gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// GELU backward drops the `x·φ(x)` term.
    GeluDerivative,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    DepthwiseConv { x: Var, kernels: Var },
    MeanTokens(Var),
    Sum(Var),
    Reshape(Var),
    Transpose(Var, usize, usize),
    Patchify { x: Var, patch: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Tape { nodes: Vec::new(), fault: Some(fault) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A trainable leaf; its gradient is populated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise ----------------------------------------------------

    /// `a + b`, where `b` may broadcast over leading axes of `a` (its shape
    /// must be a suffix of `a`'s shape; a rank-0 `b` adds everywhere).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.broadcast_len(a, b, "add")?;
        let bd = self.data(b);
        let out: Vec<f64> = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i % m]).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.broadcast_len(a, b, "mul")?;
        let bd = self.data(b);
        let out: Vec<f64> = self.data(a).iter().enumerate().map(|(i, &x)| x * bd[i % m]).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Scale(a, c))
    }

    fn broadcast_len(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!(
                "{what}: cannot broadcast {sb:?} over {sa:?} (only leading-axis expansion)"
            )));
        }
        Ok(self.nodes[b.0].value.numel())
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * normal_cdf(x));
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Gelu(a))
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product. `a` is `[.., m, k]`; `b` is either `[k, q]` (shared
    /// across the batch axes of `a`) or `[.., k, q]` with identical batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, q) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb || (sb.len() > 2 && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(bad());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * q];
        let (ad, bd) = (self.data(a), self.data(b));
        if sb.len() == 2 {
            mm_acc(ad, bd, &mut out, batch * m, k, q);
        } else {
            for i in 0..batch {
                mm_acc(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * q..(i + 1) * k * q],
                    &mut out[i * m * q..(i + 1) * m * q],
                    m,
                    k,
                    q,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, q]);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// `x · wᵀ + bias` for `x: [.., in]`, `w: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let wt = self.transpose(w, 0, 1)?;
        let y = self.matmul(x, wt)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- normalization --------------------------------------------------

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::Shape("layernorm on a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layernorm: gamma {:?} / beta {:?} must be [{d}] for input {sx:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layernorm eps must be positive, got {eps}")));
        }
        let (xd, g, bt) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or_else(|| Error::Shape("softmax on a scalar".into()))?;
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(sa, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Softmax(a)))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::Shape(format!("cross_entropy: logits {sl:?} vs {} labels", labels.len())));
        }
        let (batch, classes) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / batch as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(value, rg, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    // ---- spatial --------------------------------------------------------

    /// Channel-wise 2-D cross-correlation with zero "same" padding.
    ///
    /// `x` is `[c, h, w]` or `[b, c, h, w]`; `kernels` is `[c, f, f]` with `f` odd.
    pub fn depthwise_conv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernels).to_vec();
        if sk.len() != 3 || sk[1] != sk[2] {
            return Err(Error::Shape(format!("depthwise_conv2d: kernels must be [c,f,f], got {sk:?}")));
        }
        let f = sk[1];
        if f.is_multiple_of(2) {
            return Err(Error::Config(format!("depthwise_conv2d: filter size {f} must be odd")));
        }
        let (c, h, w) = match sx.len() {
            3 => (sx[0], sx[1], sx[2]),
            4 => (sx[1], sx[2], sx[3]),
            _ => return Err(Error::Shape(format!("depthwise_conv2d: input {sx:?} must be rank 3 or 4"))),
        };
        if c != sk[0] {
            return Err(Error::Shape(format!("depthwise_conv2d: input {sx:?} vs kernels {sk:?}")));
        }
        let xd = self.data(x);
        let kd = self.data(kernels);
        let mut out = vec![0.0; xd.len()];
        let r = (f / 2) as isize;
        for (plane, (src, out_plane)) in xd.chunks(h * w).zip(out.chunks_mut(h * w)).enumerate() {
            let ch = plane % c;
            let k = &kd[ch * f * f..(ch + 1) * f * f];
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = 0.0;
                    for dy in 0..f as isize {
                        let sy = y + dy - r;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..f as isize {
                            let sx_ = xx + dx - r;
                            if sx_ < 0 || sx_ >= w as isize {
                                continue;
                            }
                            acc += k[(dy * f as isize + dx) as usize] * src[(sy * w as isize + sx_) as usize];
                        }
                    }
                    out_plane[(y * w as isize + xx) as usize] = acc;
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(&[x, kernels]);
        Ok(self.push(value, rg, Op::DepthwiseConv { x, kernels }))
    }

    /// Splits `[b, c, h, w]` images into non-overlapping `patch×patch` tiles,
    /// giving `[b, (h/patch)·(w/patch), c·patch·patch]`. Tokens are in row-major
    /// grid order; features are ordered (channel, row, column).
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || patch == 0 || !sx[2].is_multiple_of(patch) || !sx[3].is_multiple_of(patch) {
            return Err(Error::Shape(format!("patchify: {sx:?} not divisible into {patch}x{patch} patches")));
        }
        let out = patchify_map(&sx, patch, self.data(x), false);
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let value = Tensor::new(vec![b, (h / patch) * (w / patch), c * patch * patch], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Patchify { x, patch }))
    }

    // ---- reductions and layout -------------------------------------------

    /// Mean over the token axis: `[.., t, n] -> [.., n]`.
    pub fn mean_tokens(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::Shape(format!("mean_tokens needs rank >= 2, got {sa:?}")));
        }
        let (t, n) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let ad = self.data(a);
        let groups = ad.len() / (t * n);
        let mut out = vec![0.0; groups * n];
        for g in 0..groups {
            for ti in 0..t {
                let row = &ad[(g * t + ti) * n..(g * t + ti + 1) * n];
                for (o, v) in out[g * n..(g + 1) * n].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o /= t as f64;
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::MeanTokens(a)))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.data(a).iter().sum());
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if d0 >= sa.len() || d1 >= sa.len() {
            return Err(Error::Shape(format!("transpose({d0},{d1}) on shape {sa:?}")));
        }
        let data = permute_data(self.data(a), &sa, d0, d1);
        let mut shape = sa;
        shape.swap(d0, d1);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Transpose(a, d0, d1)))
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that
    /// requires them. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            self.backward_node(i, &gout);
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn backward_node(&mut self, i: usize, gout: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        self.backward_op(i, &op, gout);
        self.nodes[i].op = op;
    }

    fn backward_op(&mut self, i: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                let m = self.nodes[b.0].value.numel();
                let mut gb = vec![0.0; m];
                if self.requires_grad(b) {
                    for (j, g) in gout.iter().enumerate() {
                        gb[j % m] += g;
                    }
                }
                self.accumulate(a, gout.to_vec());
                self.accumulate(b, gb);
            }
            &Op::Mul(a, b) => {
                let m = self.nodes[b.0].value.numel();
                let (ad, bd) = (self.data(a), self.data(b));
                let ga: Vec<f64> = gout.iter().enumerate().map(|(j, g)| g * bd[j % m]).collect();
                let mut gb = vec![0.0; m];
                for (j, g) in gout.iter().enumerate() {
                    gb[j % m] += g * ad[j];
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            &Op::Scale(a, c) => {
                self.accumulate(a, gout.iter().map(|g| g * c).collect());
            }
            &Op::Gelu(a) => {
                let broken = self.fault == Some(Fault::GeluDerivative);
                let ga = self
                    .data(a)
                    .iter()
                    .zip(gout)
                    .map(|(&x, g)| {
                        let d = if broken { normal_cdf(x) } else { normal_cdf(x) + x * normal_pdf(x) };
                        g * d
                    })
                    .collect();
                self.accumulate(a, ga);
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let q = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (ad, bd) = (self.data(a), self.data(b));
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                if sb.len() == 2 {
                    if self.requires_grad(a) {
                        mm_nt_acc(gout, bd, &mut ga, batch * m, k, q);
                    }
                    if self.requires_grad(b) {
                        mm_tn_acc(ad, gout, &mut gb, batch * m, k, q);
                    }
                } else {
                    for bi in 0..batch {
                        let go = &gout[bi * m * q..(bi + 1) * m * q];
                        mm_nt_acc(
                            go,
                            &bd[bi * k * q..(bi + 1) * k * q],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            q,
                        );
                        mm_tn_acc(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            go,
                            &mut gb[bi * k * q..(bi + 1) * k * q],
                            m,
                            k,
                            q,
                        );
                    }
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = rstd.len().max(1);
                let d = xhat.len() / d;
                let g = self.data(gamma);
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let base = r * d;
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let go = gout[base + j];
                        let h = xhat[base + j];
                        gg[j] += go * h;
                        gbeta[j] += go;
                        let dh = go * g[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h;
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gout[base + j] * g[j];
                        gx[base + j] = rs * (dh - mean_dh - xhat[base + j] * mean_dh_h);
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(gamma, gg);
                self.accumulate(beta, gbeta);
            }
            &Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let d = *self.nodes[i].value.shape().last().unwrap();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(d).zip(gout.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(a, ga);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = gout[0] / batch as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * classes + l] -= scale;
                }
                self.accumulate(logits, gl);
            }
            &Op::DepthwiseConv { x, kernels } => {
                let sx = self.shape(x).to_vec();
                let f = self.shape(kernels)[1];
                let (c, h, w) = if sx.len() == 3 { (sx[0], sx[1], sx[2]) } else { (sx[1], sx[2], sx[3]) };
                let (xd, kd) = (self.data(x), self.data(kernels));
                let mut gx = vec![0.0; xd.len()];
                let mut gk = vec![0.0; kd.len()];
                let r = (f / 2) as isize;
                for plane in 0..xd.len() / (h * w) {
                    let ch = plane % c;
                    let src = &xd[plane * h * w..(plane + 1) * h * w];
                    let go = &gout[plane * h * w..(plane + 1) * h * w];
                    let k = &kd[ch * f * f..(ch + 1) * f * f];
                    let gxp = &mut gx[plane * h * w..(plane + 1) * h * w];
                    let gkc = &mut gk[ch * f * f..(ch + 1) * f * f];
                    for y in 0..h as isize {
                        for xx in 0..w as isize {
                            let g = go[(y * w as isize + xx) as usize];
                            for dy in 0..f as isize {
                                let sy = y + dy - r;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for dx in 0..f as isize {
                                    let sx_ = xx + dx - r;
                                    if sx_ < 0 || sx_ >= w as isize {
                                        continue;
                                    }
                                    let si = (sy * w as isize + sx_) as usize;
                                    let ki = (dy * f as isize + dx) as usize;
                                    gxp[si] += g * k[ki];
                                    gkc[ki] += g * src[si];
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(kernels, gk);
            }
            &Op::MeanTokens(a) => {
                let sa = self.shape(a);
                let (t, n) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let numel = self.nodes[a.0].value.numel();
                let mut ga = vec![0.0; numel];
                for (j, slot) in ga.iter_mut().enumerate() {
                    let g = j / (t * n);
                    *slot = gout[g * n + j % n] / t as f64;
                }
                self.accumulate(a, ga);
            }
            &Op::Sum(a) => {
                let numel = self.nodes[a.0].value.numel();
                self.accumulate(a, vec![gout[0]; numel]);
            }
            &Op::Reshape(a) => {
                self.accumulate(a, gout.to_vec());
            }
            &Op::Transpose(a, d0, d1) => {
                let ga = permute_data(gout, self.nodes[i].value.shape(), d0, d1);
                self.accumulate(a, ga);
            }
            &Op::Patchify { x, patch } => {
                let sx = self.shape(x).to_vec();
                let ga = patchify_map(&sx, patch, gout, true);
                self.accumulate(x, ga);
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Forward (`inverse == false`) maps image data to patch-token layout;
/// inverse maps token-layout data back to image layout.
fn patchify_map(shape: &[usize], patch: usize, src: &[f64], inverse: bool) -> Vec<f64> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (gh, gw) = (h / patch, w / patch);
    let feat = c * patch * patch;
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let img = ((bi * c + ch) * h + y) * w + x;
                    let token = (y / patch) * gw + x / patch;
                    let f = (ch * patch + y % patch) * patch + x % patch;
                    let tok = (bi * gh * gw + token) * feat + f;
                    if inverse {
                        out[img] = src[tok];
                    } else {
                        out[tok] = src[img];
                    }
                }
            }
        }
    }
    out
}

/// `c += a·b` for row-major `a: [m,k]`, `b: [k,q]`.
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, q: usize) {
    for i in 0..m {
        let crow = &mut c[i * q..(i + 1) * q];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[kk * q..(kk + 1) * q]) {
                *cv += av * bv;
            }
        }
    }
}

/// `ga += gc·bᵀ`.
fn mm_nt_acc(gc: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, q: usize) {
    for i in 0..m {
        let grow = &gc[i * q..(i + 1) * q];
        for kk in 0..k {
            let brow = &b[kk * q..(kk + 1) * q];
            ga[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `gb += aᵀ·gc`.
fn mm_tn_acc(a: &[f64], gc: &[f64], gb: &mut [f64], m: usize, k: usize, q: usize) {
    for i in 0..m {
        let grow = &gc[i * q..(i + 1) * q];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (g, gv) in gb[kk * q..(kk + 1) * q].iter_mut().zip(grow) {
                *g += av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = tape.constant(Tensor::identity(3));
        let y = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));

        let z = tape.constant(Tensor::zeros(&[3, 3]));
        let y = tape.matmul(z, a).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let lhs = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rhs = tape.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let y = tape.matmul(lhs, rhs).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("and [2, 3]"), "{err}");
    }

    #[test]
    fn gelu_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.0, 10.0, 1.0]));
        let y = tape.gelu(x);
        let out = tape.value(y).data().to_vec();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 10.0).abs() < 1e-9);
        // Φ(1) = 0.841344746...
        assert!((out[2] - 0.841345).abs() < 1e-5);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data()[0], 0.5);
    }

    #[test]
    fn layernorm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let c = tape.constant(Tensor::full(&[4], 3.7));
        let y = tape.layernorm(c, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g2 = tape.constant(Tensor::ones(&[2]));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        let y = tape.layernorm(x, g2, b2, 1e-300).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);

        let x = tape.constant(t(&[4], &[0.3, -1.2, 2.5, 0.9]));
        let eps = 1e-5;
        let y = tape.layernorm(x, g, b, eps).unwrap();
        let out = tape.value(y).data();
        let mean = out.iter().sum::<f64>() / 4.0;
        let var = out.iter().map(|v| v * v).sum::<f64>() / 4.0;
        // direct recomputation of the population variance of the input
        let xs = [0.3, -1.2, 2.5, 0.9];
        let m = xs.iter().sum::<f64>() / 4.0;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - v / (v + eps)).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4], 0.7));
        let y = tape.softmax(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-12 && out[1].abs() < 1e-12);

        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.25).abs() < 1e-15 && (out[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn depthwise_conv_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let mut center = Tensor::zeros(&[1, 3, 3]);
        center.set(&[0, 1, 1], 1.0);
        let k = tape.constant(center);
        let y = tape.depthwise_conv2d(x, k).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let k0 = tape.constant(Tensor::zeros(&[1, 3, 3]));
        let y = tape.depthwise_conv2d(x, k0).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let ones = tape.constant(Tensor::ones(&[1, 3, 3]));
        let k1 = tape.constant(Tensor::ones(&[1, 3, 3]));
        let y = tape.depthwise_conv2d(ones, k1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.at(&[0, 1, 1]), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.at(&[0, r, c]), 4.0);
        }

        let even = tape.constant(Tensor::ones(&[1, 2, 2]));
        assert!(matches!(tape.depthwise_conv2d(ones, even), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 10]));
        let l = tape.cross_entropy(x, &[3]).unwrap();
        assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);

        let x = tape.constant(t(&[1, 2], &[50.0, 0.0]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-9);

        let x = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

        assert!(matches!(tape.cross_entropy(x, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 2], &[0.1, -2.0, 3.0, 0.4]));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 3]);

        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn elementwise_suite_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let z = tape.constant(Tensor::zeros(&[3]));
        let y = tape.add(a, z).unwrap();
        assert_eq!(tape.value(y), tape.value(a));

        let tt = tape.transpose(a, 0, 1).unwrap();
        let back = tape.transpose(tt, 0, 1).unwrap();
        assert_eq!(tape.value(back), tape.value(a));

        let tok = tape.constant(t(&[4, 3], &[0.5, -1.0, 2.0].repeat(4)));
        let p = tape.mean_tokens(tok).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, -1.0, 2.0]);

        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.add(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn inputs_are_not_mutated() {
        let mut tape = Tape::new();
        let x0 = t(&[2, 3], &[0.1, -0.2, 0.3, 1.4, -2.5, 0.6]);
        let x = tape.param(x0.clone());
        let g = tape.param(Tensor::ones(&[3]));
        let b = tape.param(Tensor::zeros(&[3]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        let y = tape.gelu(y);
        let y = tape.softmax(y).unwrap();
        let l = tape.cross_entropy(y, &[0, 2]).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.value(x), &x0);
    }

    #[test]
    fn patchify_layout() {
        let mut tape = Tape::new();
        // one 1-channel 4x4 image holding its own flat index
        let x = tape.constant(t(&[1, 1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>()));
        let p = tape.patchify(x, 2).unwrap();
        let v = tape.value(p);
        assert_eq!(v.shape(), &[1, 4, 4]);
        assert_eq!(&v.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&v.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    }
}
