//! Reverse-mode tape for the small set of layers the models need.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for the backward pass.

use super::real::{matmul, Real};
use super::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;
/// Teacher probabilities are clamped to this floor inside the log.
pub const PROB_FLOOR: f64 = 1e-8;

/// Objective used by [`Graph::soft_target_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    /// `-sum t log p`
    CrossEntropy,
    /// `KL(t || p)`, teacher to student.
    ForwardKl,
    /// `KL(p || t)`, student to teacher.
    ReverseKl,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, cols: Vec<T> },
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Clamp01 { x: Var },
    AvgPool2 { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Upsample2 { x: Var },
    Add { a: Var, b: Var },
    MeanRows { x: Var },
    SqDist { x: Var, target: Tensor<T> },
    RowSqDist { x: Var, target: Tensor<T> },
    Mse { x: Var, target: Tensor<T> },
    SoftTarget { logits: Var, probs: Vec<T>, targets: Tensor<T>, mode: Divergence, row_loss: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-use computation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, k, k2) = self.value(w).dims4();
        assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
        assert_eq!(k, k2, "conv2d: only square kernels");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let ckk = c * k * k;
        let hw = ho * wo;
        let mut cols = vec![T::zero(); n * ckk * hw];
        let mut out = vec![T::zero(); n * o * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..n {
                let col = &mut cols[s * ckk * hw..(s + 1) * ckk * hw];
                im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, k, stride, pad, ho, wo, col);
                let dst = &mut out[s * o * hw..(s + 1) * o * hw];
                matmul(wv, false, col, false, dst, o, ckk, hw, false);
                for (oc, row) in dst.chunks_mut(hw).enumerate() {
                    let bias = bv[oc];
                    row.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::from_vec(&[n, o, ho, wo], out);
        self.push(value, Op::Conv2d { x, w, b, stride, pad, cols }, &[x, w, b])
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let m = h * w;
        let eps = T::from_f64(NORM_EPS);
        let mut xhat = vec![T::zero(); n * c * m];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); n * c * m];
        {
            let xv = self.value(x).data();
            let g = self.value(gamma).data();
            let bt = self.value(beta).data();
            let mf = T::from_f64(m as f64);
            for nc in 0..n * c {
                let ch = nc % c;
                let src = &xv[nc * m..(nc + 1) * m];
                let mean = src.iter().copied().sum::<T>() / mf;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[nc] = is;
                for i in 0..m {
                    let xh = (src[i] - mean) * is;
                    xhat[nc * m + i] = xh;
                    out[nc * m + i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out);
        self.push(value, Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::from_vec(xv.shape(), data);
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_vec(xv.shape(), data);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    /// Clips to `[0, 1]`; gradient passes only inside the interval.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero()).min(T::one())).collect();
        let value = Tensor::from_vec(xv.shape(), data);
        self.push(value, Op::Clamp01 { x }, &[x])
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    out[nc * ho * wo + i * wo + j] = s * quarter;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out);
        self.push(value, Op::AvgPool2 { x }, &[x])
    }

    /// `[N, C, H, W] -> [N, C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let m = T::from_f64((h * w) as f64);
        let xv = self.value(x).data();
        let out = xv.chunks(h * w).map(|ch| ch.iter().copied().sum::<T>() / m).collect();
        let value = Tensor::from_vec(&[n, c], out);
        self.push(value, Op::GlobalAvgPool { x }, &[x])
    }

    /// `x [N, D] * w[O, D]^T + b[O]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        let (o, wd) = self.value(w).dims2();
        assert_eq!(d, wd, "linear: input width {d}, weight expects {wd}");
        let mut out = vec![T::zero(); n * o];
        matmul(self.value(x).data(), false, self.value(w).data(), true, &mut out, n, d, o, false);
        let bv = self.value(b).data();
        for row in out.chunks_mut(o) {
            for (v, &bias) in row.iter_mut().zip(bv) {
                *v += bias;
            }
        }
        let value = Tensor::from_vec(&[n, o], out);
        self.push(value, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    out[nc * ho * wo + i * wo + j] = xv[nc * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out);
        self.push(value, Op::Upsample2 { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(av.shape(), data);
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    /// Mean over the leading axis: `[N, D] -> [D]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        let mut out = vec![T::zero(); d];
        for row in self.value(x).data().chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let nf = T::from_f64(n.max(1) as f64);
        out.iter_mut().for_each(|v| *v = *v / nf);
        let value = Tensor::from_vec(&[d], out);
        self.push(value, Op::MeanRows { x }, &[x])
    }

    /// `sum (x - target)^2`
    pub fn sq_dist(&mut self, x: Var, target: Tensor<T>) -> Var {
        assert_eq!(self.value(x).numel(), target.numel(), "sq_dist: size mismatch");
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>();
        self.push(Tensor::scalar(s), Op::SqDist { x, target }, &[x])
    }

    /// `(1/N) sum_j ||x_j - target_j||^2` over rows of `[N, D]`.
    pub fn row_sq_dist(&mut self, x: Var, target: Tensor<T>) -> Var {
        let (n, _) = self.value(x).dims2();
        assert_eq!(self.value(x).shape(), target.shape(), "row_sq_dist: shape mismatch");
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / T::from_f64(n.max(1) as f64);
        self.push(Tensor::scalar(s), Op::RowSqDist { x, target }, &[x])
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Var {
        let n = self.value(x).numel();
        assert_eq!(n, target.numel(), "mse: size mismatch");
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / T::from_f64(n.max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mse { x, target }, &[x])
    }

    /// Batch-mean loss between student logits `[N, C]` and teacher
    /// probabilities `[N, C]`.
    pub fn soft_target_loss(&mut self, logits: Var, targets: Tensor<T>, mode: Divergence) -> Var {
        let (n, c) = self.value(logits).dims2();
        assert_eq!(targets.shape(), &[n, c], "soft_target_loss: target shape mismatch");
        let floor = T::from_f64(PROB_FLOOR);
        let mut probs = vec![T::zero(); n * c];
        let mut row_loss = vec![T::zero(); n];
        let lv = self.value(logits).data();
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            let t = &targets.data()[i * c..(i + 1) * c];
            let mut loss = T::zero();
            for j in 0..c {
                let logp = row[j] - lse;
                let p = logp.exp();
                probs[i * c + j] = p;
                loss += match mode {
                    Divergence::CrossEntropy => -t[j] * logp,
                    Divergence::ForwardKl => {
                        if t[j] > T::zero() {
                            t[j] * (t[j].max(floor).ln() - logp)
                        } else {
                            T::zero()
                        }
                    }
                    Divergence::ReverseKl => p * (logp - t[j].max(floor).ln()),
                };
            }
            row_loss[i] = loss;
        }
        let total = row_loss.iter().copied().sum::<T>() / T::from_f64(n.max(1) as f64);
        self.push(
            Tensor::scalar(total),
            Op::SoftTarget { logits, probs, targets, mode, row_loss },
            &[logits],
        )
    }

    /// Backpropagates from the scalar `loss`, returning gradients of every
    /// leaf created with [`Graph::leaf`].
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let (n, c, h, wd) = self.value(*x).dims4();
                let (o, _, k, _) = self.value(*w).dims4();
                let (_, _, ho, wo) = node.value.dims4();
                let ckk = c * k * k;
                let hw = ho * wo;
                let wv = self.value(*w).data();
                let need_x = self.needs(*x);
                let mut dw = vec![T::zero(); o * ckk];
                let mut db = vec![T::zero(); o];
                let mut dx = if need_x { vec![T::zero(); n * c * h * wd] } else { Vec::new() };
                let mut dcols = if need_x { vec![T::zero(); ckk * hw] } else { Vec::new() };
                for s in 0..n {
                    let dout = &gd[s * o * hw..(s + 1) * o * hw];
                    let col = &cols[s * ckk * hw..(s + 1) * ckk * hw];
                    matmul(dout, false, col, true, &mut dw, o, hw, ckk, true);
                    for (oc, row) in dout.chunks(hw).enumerate() {
                        db[oc] += row.iter().copied().sum::<T>();
                    }
                    if need_x {
                        matmul(wv, true, dout, false, &mut dcols, ckk, o, hw, false);
                        col2im(&dcols, c, h, wd, k, *stride, *pad, ho, wo, &mut dx[s * c * h * wd..(s + 1) * c * h * wd]);
                    }
                }
                if self.needs(*w) {
                    accumulate(grads, *w, Tensor::from_vec(self.value(*w).shape(), dw));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, Tensor::from_vec(&[o], db));
                }
                if need_x {
                    accumulate(grads, *x, Tensor::from_vec(&[n, c, h, wd], dx));
                }
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let m = h * w;
                let mf = T::from_f64(m as f64);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let need_x = self.needs(*x);
                let mut dx = if need_x { vec![T::zero(); n * c * m] } else { Vec::new() };
                for nc in 0..n * c {
                    let ch = nc % c;
                    let dy = &gd[nc * m..(nc + 1) * m];
                    let xh = &xhat[nc * m..(nc + 1) * m];
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xh = T::zero();
                    for i in 0..m {
                        sum_dy += dy[i];
                        sum_dy_xh += dy[i] * xh[i];
                    }
                    dgamma[ch] += sum_dy_xh;
                    dbeta[ch] += sum_dy;
                    if need_x {
                        // dxhat = dy * gamma
                        let scale = gam[ch] * inv_std[nc] / mf;
                        for i in 0..m {
                            dx[nc * m + i] = scale * (mf * dy[i] - sum_dy - xh[i] * sum_dy_xh);
                        }
                    }
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta));
                }
                if need_x {
                    accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
            }
            Op::Relu { x } => {
                let out = node.value.data();
                let dx = gd.iter().zip(out).map(|(&d, &y)| if y > T::zero() { d } else { T::zero() }).collect();
                accumulate(grads, *x, Tensor::from_vec(node.value.shape(), dx));
            }
            Op::Sigmoid { x } => {
                let out = node.value.data();
                let dx = gd.iter().zip(out).map(|(&d, &y)| d * y * (T::one() - y)).collect();
                accumulate(grads, *x, Tensor::from_vec(node.value.shape(), dx));
            }
            Op::Clamp01 { x } => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| if v >= T::zero() && v <= T::one() { d } else { T::zero() })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(node.value.shape(), dx));
            }
            Op::AvgPool2 { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    for i in 0..h.min(2 * ho) {
                        for j in 0..w.min(2 * wo) {
                            dx[nc * h * w + i * w + j] = gd[nc * ho * wo + (i / 2) * wo + j / 2] * quarter;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let m = h * w;
                let inv = T::one() / T::from_f64(m as f64);
                let mut dx = vec![T::zero(); n * c * m];
                for nc in 0..n * c {
                    let v = gd[nc] * inv;
                    dx[nc * m..(nc + 1) * m].iter_mut().for_each(|d| *d = v);
                }
                accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::Linear { x, w, b } => {
                let (n, d) = self.value(*x).dims2();
                let (o, _) = self.value(*w).dims2();
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * d];
                    matmul(gd, true, self.value(*x).data(), false, &mut dw, o, n, d, false);
                    accumulate(grads, *w, Tensor::from_vec(&[o, d], dw));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in gd.chunks(o) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::from_vec(&[o], db));
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    matmul(gd, false, self.value(*w).data(), false, &mut dx, n, o, d, false);
                    accumulate(grads, *x, Tensor::from_vec(&[n, d], dx));
                }
            }
            Op::Upsample2 { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (ho, wo) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            dx[nc * h * w + (i / 2) * w + j / 2] += gd[nc * ho * wo + i * wo + j];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::MeanRows { x } => {
                let (n, d) = self.value(*x).dims2();
                let inv = T::one() / T::from_f64(n.max(1) as f64);
                let mut dx = vec![T::zero(); n * d];
                for row in dx.chunks_mut(d) {
                    for (v, &gv) in row.iter_mut().zip(gd) {
                        *v = gv * inv;
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&[n, d], dx));
            }
            Op::SqDist { x, target } => {
                let two = T::from_f64(2.0) * gd[0];
                let xv = self.value(*x);
                let dx = xv.data().iter().zip(target.data()).map(|(&a, &b)| two * (a - b)).collect();
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::RowSqDist { x, target } => {
                let xv = self.value(*x);
                let (n, _) = xv.dims2();
                let scale = T::from_f64(2.0) * gd[0] / T::from_f64(n.max(1) as f64);
                let dx = xv.data().iter().zip(target.data()).map(|(&a, &b)| scale * (a - b)).collect();
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let scale = T::from_f64(2.0) * gd[0] / T::from_f64(xv.numel().max(1) as f64);
                let dx = xv.data().iter().zip(target.data()).map(|(&a, &b)| scale * (a - b)).collect();
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::SoftTarget { logits, probs, targets, mode, row_loss } => {
                let (n, c) = self.value(*logits).dims2();
                let scale = gd[0] / T::from_f64(n.max(1) as f64);
                let floor = T::from_f64(PROB_FLOOR);
                let mut dx = vec![T::zero(); n * c];
                for i in 0..n {
                    let p = &probs[i * c..(i + 1) * c];
                    let t = &targets.data()[i * c..(i + 1) * c];
                    match mode {
                        Divergence::CrossEntropy | Divergence::ForwardKl => {
                            let tsum = t.iter().copied().sum::<T>();
                            for j in 0..c {
                                dx[i * c + j] = scale * (p[j] * tsum - t[j]);
                            }
                        }
                        Divergence::ReverseKl => {
                            // d/dl_j sum_k p_k (log p_k - log t_k) = p_j (log p_j - log t_j - L)
                            for j in 0..c {
                                let logp = p[j].max(T::min_positive_value()).ln();
                                dx[i * c + j] = scale * p[j] * (logp - t[j].max(floor).ln() - row_loss[i]);
                            }
                        }
                    }
                }
                accumulate(grads, *logits, Tensor::from_vec(&[n, c], dx));
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[oy * wo..(oy + 1) * wo].iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..ch * h * w + (iy as usize + 1) * w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        // valid output columns map onto one contiguous input run
                        let lo = pad.saturating_sub(kj).min(wo);
                        let hi = (w + pad).saturating_sub(kj).min(wo).max(lo);
                        out[..lo].iter_mut().for_each(|v| *v = T::zero());
                        out[hi..].iter_mut().for_each(|v| *v = T::zero());
                        let start = lo + kj - pad;
                        out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        continue;
                    }
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    if stride == 1 {
                        let lo = pad.saturating_sub(kj).min(wo);
                        let hi = (w + pad).saturating_sub(kj).min(wo).max(lo);
                        let start = base + lo + kj - pad;
                        for (d, &g) in dx[start..start + hi - lo].iter_mut().zip(&src[oy * wo + lo..oy * wo + hi]) {
                            *d += g;
                        }
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check_input_grad(shape: &[usize], build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_tensor(shape, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("input gradient").clone();
        let eps = 1e-6;
        for i in (0..x0.numel()).step_by((x0.numel() / 17).max(1)) {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(xp);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let an = analytic.data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / denom < 1e-4, "elem {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn conv_stride_pad_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let t = rand_tensor(&[2 * 3 * 3 * 3], &mut rng);
        check_input_grad(&[2, 2, 6, 6], |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let y = g.conv2d(x, w, b, 2, 1);
            g.sq_dist(y, t.clone())
        });
    }

    #[test]
    fn conv_weight_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let t = rand_tensor(&[2 * 4 * 5 * 5], &mut rng);
        check_input_grad(&[4, 2, 3, 3], |g, w| {
            let x = g.constant(x.clone());
            let b = g.constant(b.clone());
            let y = g.conv2d(x, w, b, 1, 1);
            g.sq_dist(y, t.clone())
        });
    }

    #[test]
    fn norm_pool_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = rand_tensor(&[3], &mut rng);
        let beta = rand_tensor(&[3], &mut rng);
        let t = rand_tensor(&[2 * 3], &mut rng);
        check_input_grad(&[2, 3, 4, 4], |g, x| {
            let ga = g.constant(gamma.clone());
            let be = g.constant(beta.clone());
            let y = g.instance_norm(x, ga, be);
            let y = g.sigmoid(y);
            let y = g.avg_pool2(y);
            let y = g.upsample2(y);
            let y = g.avg_pool2(y);
            let y = g.global_avg_pool(y);
            g.sq_dist(y, t.clone())
        });
    }

    #[test]
    fn linear_and_divergences_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_tensor(&[4, 5], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let mut t = Tensor::zeros(&[3, 4]);
        for i in 0..3 {
            let row: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            for j in 0..4 {
                t.data_mut()[i * 4 + j] = row[j] / s;
            }
        }
        for mode in [Divergence::CrossEntropy, Divergence::ForwardKl, Divergence::ReverseKl] {
            check_input_grad(&[3, 5], |g, x| {
                let w = g.constant(w.clone());
                let b = g.constant(b.clone());
                let y = g.linear(x, w, b);
                g.soft_target_loss(y, t.clone(), mode)
            });
        }
    }

    #[test]
    fn mean_rows_and_residual_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rand_tensor(&[6], &mut rng);
        let t2 = rand_tensor(&[4, 6], &mut rng);
        check_input_grad(&[4, 6], |g, x| {
            let r = g.relu(x);
            let s = g.add(r, x);
            let m = g.mean_rows(s);
            let a = g.sq_dist(m, t.clone());
            let b = g.row_sq_dist(s, t2.clone());
            let c = g.add(a, b);
            let d = g.mse(x, t2.clone());
            g.add(c, d)
        });
    }

    #[test]
    fn forward_kl_is_cross_entropy_minus_teacher_entropy() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.2, -1.0, 0.7, 1.5, 0.0, -0.3]);
        let t = Tensor::from_vec(&[2, 3], vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]);
        let mut g = Graph::<f64>::new();
        let l = g.constant(logits);
        let ce = g.soft_target_loss(l, t.clone(), Divergence::CrossEntropy);
        let kl = g.soft_target_loss(l, t.clone(), Divergence::ForwardKl);
        let ent: f64 = -t.data().iter().map(|p| p * p.ln()).sum::<f64>() / 2.0;
        assert!((g.value(ce).item() - ent - g.value(kl).item()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_forward_kl_equals_cross_entropy() {
        let logits = Tensor::from_vec(&[1, 3], vec![0.3, 0.1, -2.0]);
        let t = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]);
        let mut g = Graph::<f64>::new();
        let l = g.constant(logits);
        let ce = g.soft_target_loss(l, t.clone(), Divergence::CrossEntropy);
        let kl = g.soft_target_loss(l, t, Divergence::ForwardKl);
        assert_eq!(g.value(ce).item(), g.value(kl).item());
    }
}
