use rand::Rng;

use super::tensor::{Float, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    /// `out[i] = x[index[i]]`; max pooling, ROI pooling, and layout
    /// permutations all reduce to this.
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    /// Weighted sum of per-row softmax cross-entropies.
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize, T)>,
        probs: Vec<T>,
    },
    /// Weighted elementwise smooth-L1 against a constant target.
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
        weight: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive applications in execution order so that gradients can
/// be propagated back from a scalar loss.
///
/// Every input of a node is recorded before the node itself, so the node
/// list is always a topological order.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Output extent of a sliding window.
pub fn window_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Cross-correlation of `x: [C_in,H,W]` with `w: [C_out,C_in,k,k]` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        ensure!(xs.len() == 3, "conv2d input must be [C,H,W], got {xs:?}");
        ensure!(ws.len() == 4, "conv2d weight must be [C_out,C_in,k,k], got {ws:?}");
        ensure!(
            ws[1] == xs[0],
            "conv2d input channels: weight expects {}, input has {}",
            ws[1],
            xs[0]
        );
        ensure!(ws[2] == ws[3], "conv2d kernel must be square, got {}x{}", ws[2], ws[3]);
        ensure!(
            bs == [ws[0]],
            "conv2d bias length {:?} does not match output channels {}",
            bs,
            ws[0]
        );
        ensure!(stride >= 1, "conv2d stride must be at least 1");
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        ensure!(k <= h + 2 * pad, "conv2d kernel {k} exceeds padded height {}", h + 2 * pad);
        ensure!(k <= wd + 2 * pad, "conv2d kernel {k} exceeds padded width {}", wd + 2 * pad);
        let (ho, wo) = (window_out(h, k, stride, pad), window_out(wd, k, stride, pad));
        let ckk = c * k * k;
        let hw = ho * wo;

        let mut cols = vec![T::zero(); ckk * hw];
        im2col(self.value(x).data(), c, h, wd, k, stride, pad, ho, wo, &mut cols);
        let mut out = vec![T::zero(); co * hw];
        let wdata = self.value(w).data();
        T::gemm(
            co,
            ckk,
            hw,
            T::one(),
            wdata,
            ckk as isize,
            1,
            &cols,
            hw as isize,
            1,
            T::zero(),
            &mut out,
            hw as isize,
            1,
        );
        for (row, &bias) in out.chunks_mut(hw).zip(self.value(b).data()) {
            row.iter_mut().for_each(|v| *v += bias);
        }
        let rg = self.needs(&[x, w, b]);
        let value = Tensor::new(vec![co, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::new(value.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Gathers `x` elements (flat row-major indices) into a tensor of `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let src = self.value(x).data();
        let n = src.len();
        ensure!(
            index.iter().all(|&i| i < n),
            "gather index out of range for {} elements",
            n
        );
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    /// Windowed max over each channel of `x: [C,H,W]`. Ties go to the first
    /// element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        ensure!(xs.len() == 3, "max_pool2d input must be [C,H,W], got {xs:?}");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        ensure!(k >= 1 && k <= h && k <= w, "pool window {k} does not fit {h}x{w}");
        ensure!(stride >= 1, "pool stride must be at least 1");
        let (ho, wo) = (window_out(h, k, stride, 0), window_out(w, k, stride, 0));
        let data = self.value(x).data();
        let mut index = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..k {
                            if data[row + kx] > data[best] {
                                best = row + kx;
                            }
                        }
                    }
                    index.push(best);
                }
            }
        }
        self.gather(x, index, vec![c, ho, wo])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `x W^T + b` for `x: [n]` or a batch of rows `x: [N,n]`, with `W: [m,n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        ensure!(ws.len() == 2, "linear weight must be [m,n], got {ws:?}");
        let (m, n) = (ws[0], ws[1]);
        let (rows, out_shape) = match *xs {
            [len] => {
                ensure!(len == n, "linear input length {len} does not match weight columns {n}");
                (1, vec![m])
            }
            [rows, len] => {
                ensure!(len == n, "linear input width {len} does not match weight columns {n}");
                (rows, vec![rows, m])
            }
            _ => return Err(Error::contract(format!("linear input must be [n] or [N,n], got {xs:?}"))),
        };
        ensure!(bs == [m], "linear bias {bs:?} does not match {m} outputs");
        let mut out = vec![T::zero(); rows * m];
        for row in out.chunks_mut(m) {
            row.copy_from_slice(self.value(b).data());
        }
        T::gemm(
            rows,
            n,
            m,
            T::one(),
            self.value(x).data(),
            n as isize,
            1,
            self.value(w).data(),
            1,
            n as isize,
            T::one(),
            &mut out,
            m as isize,
            1,
        );
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// `-log softmax(logits)[label]` for a single logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let k = self.value(logits).numel();
        ensure!(label < k, "label {label} out of range for {k} classes");
        self.weighted_cross_entropy(logits, &[(0, label, T::one())])
    }

    /// `sum_i weight_i * CE(logits[row_i], label_i)` over rows of `logits: [N,K]`
    /// (a rank-1 tensor is one row).
    pub fn weighted_cross_entropy(&mut self, logits: Var, rows: &[(usize, usize, T)]) -> Result<Var> {
        let shape = self.shape(logits);
        let (n, k) = match *shape {
            [k] => (1, k),
            [n, k] => (n, k),
            _ => return Err(Error::contract(format!("logits must be [K] or [N,K], got {shape:?}"))),
        };
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        for (row, p) in data.chunks(k).zip(probs.chunks_mut(k)) {
            softmax_into(row, p);
        }
        let mut loss = T::zero();
        for &(r, label, weight) in rows {
            ensure!(r < n, "cross-entropy row {r} out of range for {n} rows");
            ensure!(label < k, "label {label} out of range for {k} classes");
            loss += weight * neg_log_softmax(&data[r * k..(r + 1) * k], label);
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum of smooth-L1 over all elements of `pred - target`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        ensure!(
            self.shape(pred) == target.shape(),
            "smooth_l1 shapes differ: {:?} vs {:?}",
            self.shape(pred),
            target.shape()
        );
        let weight = vec![T::one(); target.numel()];
        self.weighted_smooth_l1(pred, target.data(), &weight)
    }

    /// Sum of `weight_j * smooth_l1(pred_j - target_j)`.
    pub fn weighted_smooth_l1(&mut self, pred: Var, target: &[T], weight: &[T]) -> Result<Var> {
        let n = self.value(pred).numel();
        ensure!(
            target.len() == n && weight.len() == n,
            "smooth_l1 expects {n} targets and weights, got {} and {}",
            target.len(),
            weight.len()
        );
        let half = T::from_f64(0.5);
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .zip(weight)
            .fold(T::zero(), |acc, ((&p, &t), &w)| {
                let d = (p - t).abs();
                let l = if d < T::one() { half * d * d } else { d - half };
                acc + w * l
            });
        let rg = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                weight: weight.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    /// Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, train: bool) -> Result<Var> {
        ensure!((0.0..1.0).contains(&p), "dropout rate {p} outside [0,1)");
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let value = self.value(x);
        let mask: Vec<T> = (0..value.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = value.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(value.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Concatenates along the leading dimension; trailing dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        ensure!(!xs.is_empty(), "concat of zero tensors");
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            ensure!(s[1..] == tail[..], "concat trailing shapes differ: {:?} vs {tail:?}", &s[1..]);
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.needs(xs);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            "add shapes differ: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| v * s).collect();
        let out = Tensor::new(value.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.value(x).numel() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Sums scalar terms; an empty list yields a constant zero.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Tensor::scalar(T::zero())));
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.value(loss).numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, g, grads);
            }
            Op::Relu(x) => {
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(self.value(*x).data()) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for (&i, &gi) in index.iter().zip(g) {
                        dx[i] += gi;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.grad_buf(*x, grads) {
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
            }
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, g, grads),
            Op::CrossEntropy { logits, rows, probs } => {
                let k = *self.shape(*logits).last().expect("rank >= 1");
                if let Some(dx) = self.grad_buf(*logits, grads) {
                    for &(r, label, weight) in rows {
                        let s = g[0] * weight;
                        for j in 0..k {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            dx[r * k + j] += s * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, target, weight } => {
                let p = self.value(*pred).data();
                if let Some(dx) = self.grad_buf(*pred, grads) {
                    for j in 0..dx.len() {
                        let d = p[j] - target[j];
                        let dl = if d.abs() < T::one() { d } else { d.signum() };
                        dx[j] += g[0] * weight[j] * dl;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.grad_buf(*x, grads) {
                    for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    if let Some(dx) = self.grad_buf(x, grads) {
                        dx.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, &gi)| *d += gi);
                    }
                    offset += n;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(dx) = self.grad_buf(v, grads) {
                        dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.grad_buf(*x, grads) {
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *s);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.grad_buf(*x, grads) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }

    /// Accumulation buffer for `v`, or `None` when `v` needs no gradient.
    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Vec<T>>]) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        let (ho, wo) = (window_out(h, k, stride, pad), window_out(wd, k, stride, pad));
        let (ckk, hw) = (c * k * k, ho * wo);

        if let Some(db) = self.grad_buf(b, grads) {
            for (d, row) in db.iter_mut().zip(g.chunks(hw)) {
                *d += row.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        let need_w = self.nodes[w.0].requires_grad;
        let need_x = self.nodes[x.0].requires_grad;
        if need_w {
            let mut cols = vec![T::zero(); ckk * hw];
            im2col(self.value(x).data(), c, h, wd, k, stride, pad, ho, wo, &mut cols);
            let dw = self.grad_buf(w, grads).expect("weight requires grad");
            T::gemm(
                co,
                hw,
                ckk,
                T::one(),
                g,
                hw as isize,
                1,
                &cols,
                1,
                hw as isize,
                T::one(),
                dw,
                ckk as isize,
                1,
            );
        }
        if need_x {
            let mut dcols = vec![T::zero(); ckk * hw];
            T::gemm(
                ckk,
                co,
                hw,
                T::one(),
                self.value(w).data(),
                1,
                ckk as isize,
                g,
                hw as isize,
                1,
                T::zero(),
                &mut dcols,
                hw as isize,
                1,
            );
            let dx = self.grad_buf(x, grads).expect("input requires grad");
            col2im_add(&dcols, c, h, wd, k, stride, pad, ho, wo, dx);
        }
    }

    fn linear_backward(&self, x: Var, w: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let ws = self.shape(w);
        let (m, n) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / n;
        if let Some(db) = self.grad_buf(b, grads) {
            for row in g.chunks(m) {
                db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
        }
        if self.nodes[w.0].requires_grad {
            let xdata = self.value(x).data();
            let dw = self.grad_buf(w, grads).expect("weight requires grad");
            T::gemm(
                m,
                rows,
                n,
                T::one(),
                g,
                1,
                m as isize,
                xdata,
                n as isize,
                1,
                T::one(),
                dw,
                n as isize,
                1,
            );
        }
        if self.nodes[x.0].requires_grad {
            let wdata = self.value(w).data();
            let dx = self.grad_buf(x, grads).expect("input requires grad");
            T::gemm(
                rows,
                m,
                n,
                T::one(),
                g,
                m as isize,
                1,
                wdata,
                n as isize,
                1,
                T::one(),
                dx,
                n as isize,
                1,
            );
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient for a leaf; zeros when the loss does not depend on it.
    pub fn of(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.shape(v).to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Takes ownership of the raw gradient buffer for `v`, if one was produced.
    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

fn softmax_into<T: Float>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o = *o / total);
}

fn neg_log_softmax<T: Float>(logits: &[T], label: usize) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = logits.iter().fold(T::zero(), |a, &l| a + (l - max).exp()).ln();
    lse - (logits[label] - max)
}

/// Valid output columns `ox` for kernel offset `kx` with stride 1:
/// `0 <= ox + kx - pad < w`.
fn valid_span(w: usize, wo: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(wo);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
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
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let (lo, hi) = valid_span(w, wo, kx, pad);
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        if hi > lo {
                            let start = lo + kx - pad;
                            out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *o = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Float>(
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
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let seg = &src[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let (lo, hi) = valid_span(w, wo, kx, pad);
                        if hi > lo {
                            let start = lo + kx - pad;
                            dst[start..start + (hi - lo)]
                                .iter_mut()
                                .zip(&seg[lo..hi])
                                .for_each(|(d, &v)| *d += v);
                        }
                    } else {
                        for (ox, &v) in seg.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
