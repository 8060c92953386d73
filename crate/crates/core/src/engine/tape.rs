//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape in reverse. Shape errors inside the tape are programming errors and
//! panic; the network layer validates user-facing shapes first.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::tensor::{matmul, Float, Tensor};

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
    Scale(Var, T),
    AddScalar(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Upsample2x(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    LogClamp(Var, T),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Replicate(Var),
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    EmbedMean {
        table: Var,
        lists: Vec<Vec<usize>>,
    },
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Output of a training-mode normalization: the batch statistics, for the
/// caller to fold into running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
}

/// Splits a shape into `(outer, axis1, inner)` extents.
fn split_axis1(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "axis-1 op needs rank >= 2, got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_vec(src.shape(), data);
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// `1 - x`, as used by the discriminator losses.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.unary(x, |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// `ln(max(x, eps))`; zero gradient where the clamp is active.
    pub fn log_clamp(&mut self, x: Var, eps: f64) -> Var {
        let e = T::lit(eps);
        self.unary(x, |v| v.max(e).ln(), Op::LogClamp(x, e))
    }

    /// `y = x W^T + b` with `x: (N, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        assert_eq!(vx.shape().len(), 2, "linear input must be 2-D");
        let (n, fin) = (vx.shape()[0], vx.shape()[1]);
        let (fout, win) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(fin, win, "linear inner dimension mismatch");
        let mut out = vec![T::zero(); n * fout];
        matmul(n, fin, fout, vx.data(), false, vw.data(), true, &mut out, false);
        if let Some(b) = b {
            let vb = self.nodes[b.0].value.data();
            assert_eq!(vb.len(), fout, "linear bias size mismatch");
            for row in out.chunks_mut(fout) {
                for (o, bo) in row.iter_mut().zip(vb) {
                    *o = *o + *bo;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::from_vec(&[n, fout], out), Op::Linear { x, w, b }, needs)
    }

    /// 2-D convolution, `x: (N, C, H, W)`, `w: (O, C, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let xs = vx.shape();
        let ws = vw.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        assert!(
            xs[2] + 2 * pad >= ws[2] && xs[3] + 2 * pad >= ws[2],
            "conv2d kernel larger than input"
        );
        let bias = b.map(|b| self.nodes[b.0].value.data());
        let (out, cols) = conv2d_forward(vx.data(), vw.data(), bias, &geom);
        let shape = [geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::from_vec(&shape, out), Op::Conv2d { x, w, b, geom, cols }, needs)
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let s = vx.shape();
        assert_eq!(s.len(), 4, "upsample input must be NCHW");
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            let src = &vx.data()[p * h * w..][..h * w];
            let dst = &mut out[p * 4 * h * w..][..4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let shape = [s[0], s[1], 2 * h, 2 * w];
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&shape, out), Op::Upsample2x(x), needs)
    }

    /// Per-channel normalization over every axis except 1. With `stats =
    /// None` the batch statistics are used and returned; otherwise the given
    /// `(mean, var)` are treated as constants.
    pub fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
    ) -> (Var, Option<BatchStats<T>>) {
        let vx = &self.nodes[x.0].value;
        let (outer, ch, inner) = split_axis1(vx.shape());
        let count = outer * inner;
        let eps = T::lit(NORM_EPS);
        let (mean, var, batch) = match stats {
            Some((m, v)) => {
                assert_eq!(m.len(), ch, "running mean size mismatch");
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                assert!(count >= 2, "batch statistics need at least two values per channel");
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let s: T = vx.data()[(o * ch + c) * inner..][..inner].iter().copied().sum();
                        mean[c] = mean[c] + s;
                    }
                }
                let cnt = T::from_usize(count).unwrap();
                for m in &mut mean {
                    *m = *m / cnt;
                }
                for o in 0..outer {
                    for c in 0..ch {
                        for &v in &vx.data()[(o * ch + c) * inner..][..inner] {
                            let d = v - mean[c];
                            var[c] = var[c] + d * d;
                        }
                    }
                }
                let unbiased = var.iter().map(|&v| v / T::from_usize(count - 1).unwrap()).collect();
                for v in &mut var {
                    *v = *v / cnt;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        assert_eq!(g.len(), ch, "gamma size mismatch");
        let mut xhat = vec![T::zero(); vx.len()];
        let mut out = vec![T::zero(); vx.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    let h = (vx.data()[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = h * g[c] + bt[c];
                }
            }
        }
        let shape = vx.shape().to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let batch_stats = batch.is_some();
        let var_out = self.push(
            Tensor::from_vec(&shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        );
        (var_out, batch)
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let (outer, _, inner) = split_axis1(&first);
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let (o, c, i) = split_axis1(s);
            assert!(
                o == outer && i == inner && s[2..] == first[2..],
                "concat shape mismatch"
            );
            total += c;
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[o * c * inner..][..c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(Tensor::from_vec(&shape, out), Op::Concat(parts.to_vec()), needs)
    }

    /// Takes `len` entries of axis 1 starting at `start`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let (outer, ch, inner) = split_axis1(vx.shape());
        assert!(start + len <= ch, "slice out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&vx.data()[(o * ch + start) * inner..][..len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[1] = len;
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&shape, out), Op::Slice { x, start }, needs)
    }

    /// `(N, C)` to `(N, C, M, M)` by copying each vector to every site.
    pub fn replicate(&mut self, x: Var, m: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.shape().len(), 2, "replicate expects (N, C)");
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        let mut out = Vec::with_capacity(n * c * m * m);
        for &v in vx.data() {
            out.extend(std::iter::repeat(v).take(m * m));
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[n, c, m, m], out), Op::Replicate(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.nodes[x.0].value.clone().reshape(shape);
        let needs = self.needs(x);
        self.push(value, Op::Reshape(x), needs)
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = &self.nodes[x.0].value;
        let rows = vx.shape()[0];
        let stride = vx.len() / rows.max(1);
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            assert!(i < rows, "gather index out of range");
            out.extend_from_slice(&vx.data()[i * stride..][..stride]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = idx.len();
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::GatherRows { x, idx: idx.to_vec() },
            needs,
        )
    }

    /// Mean of embedding rows per list. Index 0 (padding) is skipped; an
    /// empty list yields the zero vector.
    pub fn embed_mean(&mut self, table: Var, lists: &[Vec<usize>]) -> Var {
        let vt = &self.nodes[table.0].value;
        assert_eq!(vt.shape().len(), 2, "embedding table must be 2-D");
        let (vocab, dim) = (vt.shape()[0], vt.shape()[1]);
        let mut out = vec![T::zero(); lists.len() * dim];
        let kept: Vec<Vec<usize>> = lists
            .iter()
            .map(|l| l.iter().copied().filter(|&t| t != 0).collect())
            .collect();
        for (b, list) in kept.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let dst = &mut out[b * dim..][..dim];
            for &t in list {
                assert!(t < vocab, "token index {t} outside vocabulary of {vocab}");
                for (d, v) in dst.iter_mut().zip(&vt.data()[t * dim..][..dim]) {
                    *d = *d + *v;
                }
            }
            let inv = T::one() / T::from_usize(list.len()).unwrap();
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
        let needs = self.needs(table);
        self.push(
            Tensor::from_vec(&[lists.len(), dim], out),
            Op::EmbedMean { table, lists: kept },
            needs,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].value.data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_usize(v.len()).unwrap();
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), needs)
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let v = &self.nodes[logits.0].value;
        assert_eq!(v.shape().len(), 2, "logits must be (N, K)");
        let (n, k) = (v.shape()[0], v.shape()[1]);
        assert_eq!(labels.len(), n, "label count mismatch");
        let probs = softmax_rows(v.data(), k);
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < k, "label out of range");
            loss = loss - probs[i * k + y].max(T::lit(1e-30)).ln();
        }
        loss = loss / T::from_usize(n).unwrap();
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// Gradients of scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| {
                    for (x, y) in d.iter_mut().zip(gd) {
                        *x = *x - *y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.acc(grads, *a, |d| {
                    for ((x, y), w) in d.iter_mut().zip(gd).zip(vb) {
                        *x = *x + *y * *w;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((x, y), w) in d.iter_mut().zip(gd).zip(va) {
                        *x = *x + *y * *w;
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |d| {
                for (a, y) in d.iter_mut().zip(gd) {
                    *a = *a + *y * *s;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, gd)),
            Op::Linear { x, w, b } => {
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                let (n, fin) = (vx.shape()[0], vx.shape()[1]);
                let fout = vw.shape()[0];
                self.acc(grads, *x, |d| {
                    matmul(n, fout, fin, gd, false, vw.data(), false, d, true)
                });
                self.acc(grads, *w, |d| matmul(fout, n, fin, gd, true, vx.data(), false, d, true));
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for row in gd.chunks(fout) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let vw = self.nodes[w.0].value.data();
                let mut dx = self.take_grad(grads, *x);
                let mut dw = self.take_grad(grads, *w);
                let mut db = b.and_then(|b| self.take_grad(grads, b));
                conv2d_backward(
                    gd,
                    vw,
                    cols,
                    geom,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                self.put_grad(grads, *x, dx);
                self.put_grad(grads, *w, dw);
                if let Some(b) = b {
                    self.put_grad(grads, *b, db);
                }
            }
            Op::Upsample2x(x) => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                self.acc(grads, *x, |d| {
                    for p in 0..nc {
                        let src = &gd[p * 4 * h * w..][..4 * h * w];
                        let dst = &mut d[p * h * w..][..h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let t = &mut dst[(y / 2) * w + xx / 2];
                                *t = *t + src[y * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (outer, ch, inner) = split_axis1(node.value.shape());
                let gm = self.nodes[gamma.0].value.data();
                let mut sum_dy = vec![T::zero(); ch];
                let mut sum_dy_xhat = vec![T::zero(); ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for j in base..base + inner {
                            sum_dy[c] = sum_dy[c] + gd[j];
                            sum_dy_xhat[c] = sum_dy_xhat[c] + gd[j] * xhat[j];
                        }
                    }
                }
                self.acc(grads, *gamma, |d| add_into(d, &sum_dy_xhat));
                self.acc(grads, *beta, |d| add_into(d, &sum_dy));
                let count = T::from_usize(outer * inner).unwrap();
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * inner;
                            let k = gm[c] * inv_std[c];
                            for j in base..base + inner {
                                let v = if *batch_stats {
                                    k * (gd[j] - sum_dy[c] / count - xhat[j] * sum_dy_xhat[c] / count)
                                } else {
                                    k * gd[j]
                                };
                                d[j] = d[j] + v;
                            }
                        }
                    }
                });
            }
            Op::LeakyRelu(x, s) => {
                let vx = self.nodes[x.0].value.data();
                self.acc(grads, *x, |d| {
                    for ((a, y), xv) in d.iter_mut().zip(gd).zip(vx) {
                        *a = *a + if *xv > T::zero() { *y } else { *y * *s };
                    }
                });
            }
            Op::Tanh(x) => {
                let out = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((a, y), o) in d.iter_mut().zip(gd).zip(out) {
                        *a = *a + *y * (T::one() - *o * *o);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((a, y), o) in d.iter_mut().zip(gd).zip(out) {
                        *a = *a + *y * *o * (T::one() - *o);
                    }
                });
            }
            Op::Exp(x) => {
                let out = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((a, y), o) in d.iter_mut().zip(gd).zip(out) {
                        *a = *a + *y * *o;
                    }
                });
            }
            Op::LogClamp(x, eps) => {
                let vx = self.nodes[x.0].value.data();
                self.acc(grads, *x, |d| {
                    for ((a, y), xv) in d.iter_mut().zip(gd).zip(vx) {
                        if *xv >= *eps {
                            *a = *a + *y / *xv;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let (outer, total, inner) = split_axis1(node.value.shape());
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    self.acc(grads, *p, |d| {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..][..c * inner];
                            add_into(&mut d[o * c * inner..][..c * inner], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let (outer, len, inner) = split_axis1(node.value.shape());
                let ch = self.nodes[x.0].value.shape()[1];
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * ch + start) * inner..][..len * inner];
                        add_into(dst, &gd[o * len * inner..][..len * inner]);
                    }
                });
            }
            Op::Replicate(x) => {
                let s = node.value.shape();
                let sites = s[2] * s[3];
                self.acc(grads, *x, |d| {
                    for (k, a) in d.iter_mut().enumerate() {
                        let part: T = gd[k * sites..][..sites].iter().copied().sum();
                        *a = *a + part;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let rows = self.nodes[x.0].value.shape()[0];
                let stride = self.nodes[x.0].value.len() / rows.max(1);
                self.acc(grads, *x, |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut d[src * stride..][..stride], &gd[r * stride..][..stride]);
                    }
                });
            }
            Op::EmbedMean { table, lists } => {
                let dim = self.nodes[table.0].value.shape()[1];
                self.acc(grads, *table, |d| {
                    for (b, list) in lists.iter().enumerate() {
                        if list.is_empty() {
                            continue;
                        }
                        let inv = T::one() / T::from_usize(list.len()).unwrap();
                        let src = &gd[b * dim..][..dim];
                        for &t in list {
                            for (a, y) in d[t * dim..][..dim].iter_mut().zip(src) {
                                *a = *a + *y * inv;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let s = gd[0];
                self.acc(grads, *x, |d| {
                    for a in d.iter_mut() {
                        *a = *a + s;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = T::from_usize(self.nodes[x.0].value.len()).unwrap();
                let s = gd[0] / n;
                self.acc(grads, *x, |d| {
                    for a in d.iter_mut() {
                        *a = *a + s;
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.nodes[logits.0].value.shape()[1];
                let n = T::from_usize(labels.len()).unwrap();
                let s = gd[0] / n;
                self.acc(grads, *logits, |d| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let t = if j == y { T::one() } else { T::zero() };
                            d[i * k + j] = d[i * k + j] + s * (probs[i * k + j] - t);
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }

    fn take_grad(&self, grads: &mut [Option<Tensor<T>>], v: Var) -> Option<Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape())),
        )
    }

    fn put_grad(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) {
        if let Some(g) = g {
            grads[v.0] = Some(g);
        }
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a = *a + *b;
    }
}

pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax of an `(N, K)` buffer.
pub fn softmax_rows<T: Float>(data: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(k).zip(out.chunks_mut(k)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (*s - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
