//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one evaluation. Leaves
//! are either trainable ([`Graph::param`]) or constant ([`Graph::constant`]);
//! gradients are only propagated along paths that reach a trainable leaf, so
//! frozen networks cost nothing on the backward pass beyond their input
//! gradients.

use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;
use std::cell::RefCell;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-5;
const DICE_EPS: f64 = 1.0;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatChannels(Var, Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Compose {
        x: Var,
        a: Var,
        c: Var,
    },
    MeanAbsDiff(Var, Var),
    MeanSqDiff(Var, Var),
    MeanSqToConst(Var, f64),
    MeanSoftplus(Var, f64),
    BceWithLogits {
        x: Var,
        target: Tensor,
    },
    SoftDice {
        p: Var,
        target: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn scalar(v: f64) -> Tensor {
    Tensor::full(&[1], v)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies a node's value into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        ta.zip_map(tb, f).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        record_switches(self.value(a).data().iter().map(|&x| (x > 0.0) as u64));
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        record_switches(self.value(a).data().iter().map(|&x| (x > 0.0) as u64));
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// 2-d convolution with zero padding. `w` is `Cout x Cin x k x k`,
    /// `b` (if any) has `Cout` elements.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4().expect("conv2d input");
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-d");
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        let (cout, k) = (ws[0], ws[2]);
        let geom = ConvGeom {
            channels: cin,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let l = ho * wo;
        let mut out = vec![0.0; n * cout * l];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; geom.col_rows() * l]
        };
        for s in 0..n {
            let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
            let col: &[f64] = if geom.is_pointwise() {
                xs
            } else {
                im2col(xs, &geom, &mut cols);
                &cols
            };
            let dst = &mut out[s * cout * l..(s + 1) * cout * l];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (co, chunk) in dst.chunks_mut(l).enumerate() {
                    chunk.fill(bv[co]);
                }
                gemm(cout, geom.col_rows(), l, 1.0, wv, false, col, false, 1.0, dst);
            } else {
                gemm(cout, geom.col_rows(), l, 1.0, wv, false, col, false, 0.0, dst);
            }
        }
        let t = Tensor::new(&[n, cout, ho, wo], out).expect("conv2d output");
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Transposed 2-d convolution. `w` is `Cin x Cout x k x k`; the output
    /// size is `(in - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let (n, cin, hin, win) = self.value(x).dims4().expect("conv_transpose2d input");
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv_transpose2d weight must be 4-d");
        assert_eq!(ws[0], cin, "conv_transpose2d channel mismatch");
        let (cout, k) = (ws[1], ws[2]);
        let ho = (hin - 1) * stride + k + out_pad - 2 * pad;
        let wo = (win - 1) * stride + k + out_pad - 2 * pad;
        let geom = ConvGeom {
            channels: cout,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_height(), hin);
        debug_assert_eq!(geom.out_width(), win);
        let l = hin * win;
        let rows = geom.col_rows();
        let mut cols = vec![0.0; rows * l];
        let mut out = vec![0.0; n * cout * ho * wo];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let xs = &xv[s * cin * l..(s + 1) * cin * l];
            gemm(rows, cin, l, 1.0, wv, true, xs, false, 0.0, &mut cols);
            let dst = &mut out[s * cout * ho * wo..(s + 1) * cout * ho * wo];
            col2im(&cols, &geom, dst);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (co, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                    for v in chunk {
                        *v += bv[co];
                    }
                }
            }
        }
        let t = Tensor::new(&[n, cout, ho, wo], out).expect("conv_transpose2d output");
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            t,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4().expect("reflect_pad input");
        assert!(pad < h && pad < w, "reflection pad must be smaller than the input");
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * hp * wp];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * hp * wp..(p + 1) * hp * wp];
            for oy in 0..hp {
                let iy = reflect(oy as isize - pad as isize, h);
                for ox in 0..wp {
                    let ix = reflect(ox as isize - pad as isize, w);
                    dst[oy * wp + ox] = src[iy * w + ix];
                }
            }
        }
        let t = Tensor::new(&[n, c, hp, wp], out).expect("reflect_pad output");
        let rg = self.rg(&[x]);
        self.push(t, Op::ReflectPad { x, pad }, rg)
    }

    /// Instance normalization with per-channel affine parameters.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4().expect("instance_norm input");
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), c);
        let mut xhat = vec![0.0; n * c * hw];
        let mut inv_std = vec![0.0; n * c];
        let mut out = vec![0.0; n * c * hw];
        for p in 0..n * c {
            let ch = p % c;
            let src = &xv[p * hw..(p + 1) * hw];
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[p] = is;
            for i in 0..hw {
                let xh = (src[i] - mean) * is;
                xhat[p * hw + i] = xh;
                out[p * hw + i] = gv[ch] * xh + bv[ch];
            }
        }
        let t = Tensor::new(&[n, c, h, w], out).expect("instance_norm output");
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            t,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4().expect("concat input");
        let (nb, cb, hb, wb) = self.value(b).dims4().expect("concat input");
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
        }
        let t = Tensor::new(&[n, ca + cb, h, w], out).expect("concat output");
        let rg = self.rg(&[a, b]);
        self.push(t, Op::ConcatChannels(a, b), rg)
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4().expect("max_pool2 input");
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0; n * c * ho * wo];
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = p * ho * wo + oy * wo + ox;
                    record_switches(std::iter::once(best as u64));
                    out[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        let t = Tensor::new(&[n, c, ho, wo], out).expect("max_pool2 output");
        let rg = self.rg(&[x]);
        self.push(t, Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4().expect("global_avg_pool input");
        let hw = h * w;
        let xv = self.value(x).data();
        let out = (0..n * c)
            .map(|p| xv[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(&[n, c, 1, 1], out).expect("pool output");
        let rg = self.rg(&[x]);
        self.push(t, Op::GlobalAvgPool(x), rg)
    }

    /// `x * (1 - a) + c * a` with the single-channel gate `a` broadcast over
    /// the channels of `x` and `c`.
    pub fn compose(&mut self, x: Var, a: Var, c: Var) -> Var {
        let (n, ch, h, w) = self.value(x).dims4().expect("compose input");
        assert_eq!(self.value(a).shape(), &[n, 1, h, w], "compose gate shape");
        assert_eq!(self.value(c).shape(), self.value(x).shape(), "compose context shape");
        let out = compose_values(
            self.value(x).data(),
            self.value(a).data(),
            self.value(c).data(),
            n,
            ch,
            h * w,
        );
        let t = Tensor::new(&[n, ch, h, w], out).expect("compose output");
        let rg = self.rg(&[x, a, c]);
        self.push(t, Op::Compose { x, a, c }, rg)
    }

    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        record_switches(self.value(a).data().iter().zip(self.value(b).data()).map(|(p, q)| (p > q) as u64));
        let v = self
            .value(a)
            .mean_abs_diff(self.value(b))
            .expect("mean_abs_diff shapes");
        let rg = self.rg(&[a, b]);
        self.push(scalar(v), Op::MeanAbsDiff(a, b), rg)
    }

    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mean_sq_diff shapes");
        let v = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.len() as f64;
        let rg = self.rg(&[a, b]);
        self.push(scalar(v), Op::MeanSqDiff(a, b), rg)
    }

    /// `mean((a - target)^2)` for a scalar target.
    pub fn mean_sq_to(&mut self, a: Var, target: f64) -> Var {
        let t = self.value(a);
        let v = t.data().iter().map(|x| (x - target) * (x - target)).sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(scalar(v), Op::MeanSqToConst(a, target), rg)
    }

    /// `mean(softplus(sign * a))`; `sign = -1` gives `mean(-log sigmoid(a))`.
    pub fn mean_softplus(&mut self, a: Var, sign: f64) -> Var {
        let t = self.value(a);
        let v = t.data().iter().map(|&x| softplus(sign * x)).sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(scalar(v), Op::MeanSoftplus(a, sign), rg)
    }

    /// Mean binary cross-entropy between `sigmoid(x)` and `target`.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), target.shape(), "bce shapes");
        let v = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(
            scalar(v),
            Op::BceWithLogits {
                x,
                target: target.clone(),
            },
            rg,
        )
    }

    /// Soft Dice loss `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)` over the
    /// whole tensor.
    pub fn soft_dice(&mut self, p: Var, target: &Tensor) -> Var {
        let t = self.value(p);
        assert_eq!(t.shape(), target.shape(), "dice shapes");
        let (inter, sp, st) = dice_sums(t.data(), target.data());
        let v = 1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS);
        let rg = self.rg(&[p]);
        self.push(
            scalar(v),
            Op::SoftDice {
                p,
                target: target.clone(),
            },
            rg,
        )
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut v = 0.0;
        for &(t, w) in terms {
            assert_eq!(self.value(t).len(), 1, "weighted_sum takes scalars");
            v += w * self.item(t);
        }
        let deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&deps);
        self.push(scalar(v), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.zip_map(self.value(*b), |x, y| x * y).unwrap();
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.zip_map(self.value(*a), |x, y| x * y).unwrap();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Relu(a) => {
                let d = g
                    .zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let d = g
                    .zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { slope * gv })
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y)).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(*x, *w, *b, *stride, *pad, g, grads),
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_transpose2d_backward(*x, *w, *b, *stride, *pad, g, grads),
            Op::ReflectPad { x, pad } => {
                let (n, c, h, w) = self.value(*x).dims4().unwrap();
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &gd[p * hp * wp..(p + 1) * hp * wp];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for oy in 0..hp {
                        let iy = reflect(oy as isize - *pad as isize, h);
                        for ox in 0..wp {
                            let ix = reflect(ox as isize - *pad as isize, w);
                            dst[iy * w + ix] += src[oy * wp + ox];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx).unwrap());
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.value(*x).dims4().unwrap();
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; n * c * hw];
                for p in 0..n * c {
                    let ch = p % c;
                    let gp = &gd[p * hw..(p + 1) * hw];
                    let xh = &xhat[p * hw..(p + 1) * hw];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for i in 0..hw {
                        sum_g += gp[i];
                        sum_gx += gp[i] * xh[i];
                    }
                    dgamma[ch] += sum_gx;
                    dbeta[ch] += sum_g;
                    let k = gv[ch] * inv_std[p] / hw as f64;
                    for i in 0..hw {
                        dx[p * hw + i] = k * (hw as f64 * gp[i] - sum_g - xh[i] * sum_gx);
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx).unwrap());
                }
                let gshape = self.value(*gamma).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(&gshape, dgamma).unwrap());
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *beta, Tensor::new(&bshape, dbeta).unwrap());
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().unwrap();
                let cb = self.value(*b).dims4().unwrap().1;
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&gd[base..base + ca * hw]);
                    db.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, *a, Tensor::new(&[n, ca, h, w], da).unwrap());
                self.accumulate(grads, *b, Tensor::new(&[n, cb, h, w], db).unwrap());
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += gd[o];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4().unwrap();
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for p in 0..n * c {
                    let v = gd[p] / hw as f64;
                    dx[p * hw..(p + 1) * hw].fill(v);
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx).unwrap());
            }
            Op::Compose { x, a, c } => {
                let (n, ch, h, w) = self.value(*x).dims4().unwrap();
                let hw = h * w;
                let (xv, av, cv) = (
                    self.value(*x).data(),
                    self.value(*a).data(),
                    self.value(*c).data(),
                );
                let mut dx = vec![0.0; n * ch * hw];
                let mut dc = vec![0.0; n * ch * hw];
                let mut da = vec![0.0; n * hw];
                for s in 0..n {
                    for k in 0..ch {
                        for i in 0..hw {
                            let idx = (s * ch + k) * hw + i;
                            let ai = av[s * hw + i];
                            dx[idx] = gd[idx] * (1.0 - ai);
                            dc[idx] = gd[idx] * ai;
                            da[s * hw + i] += gd[idx] * (cv[idx] - xv[idx]);
                        }
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, Tensor::new(&[n, ch, h, w], dx).unwrap());
                }
                if self.wants(*c) {
                    self.accumulate(grads, *c, Tensor::new(&[n, ch, h, w], dc).unwrap());
                }
                if self.wants(*a) {
                    self.accumulate(grads, *a, Tensor::new(&[n, 1, h, w], da).unwrap());
                }
            }
            Op::MeanAbsDiff(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = gd[0] / ta.len() as f64;
                let d = ta.zip_map(tb, |x, y| k * sign(x - y)).unwrap();
                if self.wants(*b) {
                    self.accumulate(grads, *b, d.map(|v| -v));
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanSqDiff(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * gd[0] / ta.len() as f64;
                let d = ta.zip_map(tb, |x, y| k * (x - y)).unwrap();
                if self.wants(*b) {
                    self.accumulate(grads, *b, d.map(|v| -v));
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanSqToConst(a, target) => {
                let ta = self.value(*a);
                let k = 2.0 * gd[0] / ta.len() as f64;
                let t = *target;
                self.accumulate(grads, *a, ta.map(|x| k * (x - t)));
            }
            Op::MeanSoftplus(a, s) => {
                let ta = self.value(*a);
                let k = gd[0] / ta.len() as f64;
                let s = *s;
                self.accumulate(grads, *a, ta.map(|x| k * s * sigmoid(s * x)));
            }
            Op::BceWithLogits { x, target } => {
                let tx = self.value(*x);
                let k = gd[0] / tx.len() as f64;
                let d = tx.zip_map(target, |z, y| k * (sigmoid(z) - y)).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::SoftDice { p, target } => {
                let tp = self.value(*p);
                let (inter, sp, st) = dice_sums(tp.data(), target.data());
                let num = 2.0 * inter + DICE_EPS;
                let den = sp + st + DICE_EPS;
                // d/dp_i of -(num/den) = -(2 t_i den - num) / den^2
                let d = target.map(|t| -gd[0] * (2.0 * t * den - num) / (den * den));
                self.accumulate(grads, *p, d);
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    self.accumulate(grads, t, scalar(gd[0] * w));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (n, cin, h, wd) = self.value(x).dims4().unwrap();
        let wt = self.value(w);
        let (cout, k) = (wt.shape()[0], wt.shape()[2]);
        let geom = ConvGeom {
            channels: cin,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let l = geom.col_len();
        let rows = geom.col_rows();
        let gd = g.data();
        let xv = self.value(x).data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dw = vec![0.0; if want_w { cout * rows } else { 0 }];
        let mut dx = vec![0.0; if want_x { n * cin * h * wd } else { 0 }];
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * l }];
        let mut dcols = vec![0.0; if want_x && !geom.is_pointwise() { rows * l } else { 0 }];
        for s in 0..n {
            let gs = &gd[s * cout * l..(s + 1) * cout * l];
            let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
            if want_w {
                let col: &[f64] = if geom.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &geom, &mut cols);
                    &cols
                };
                gemm(cout, l, rows, 1.0, gs, false, col, true, 1.0, &mut dw);
            }
            if want_x {
                let dxs = &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd];
                if geom.is_pointwise() {
                    gemm(rows, cout, l, 1.0, wt.data(), true, gs, false, 0.0, dxs);
                } else {
                    gemm(rows, cout, l, 1.0, wt.data(), true, gs, false, 0.0, &mut dcols);
                    col2im(&dcols, &geom, dxs);
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::new(&[n, cin, h, wd], dx).unwrap());
        }
        if want_w {
            self.accumulate(grads, w, Tensor::new(wt.shape(), dw).unwrap());
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut db = vec![0.0; cout];
                for s in 0..n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let off = (s * cout + co) * l;
                        *d += gd[off..off + l].iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, b, Tensor::new(&[cout], db).unwrap());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (n, cin, hin, win) = self.value(x).dims4().unwrap();
        let wt = self.value(w);
        let (cout, k) = (wt.shape()[1], wt.shape()[2]);
        let (_, _, ho, wo) = g.dims4().unwrap();
        let geom = ConvGeom {
            channels: cout,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            pad,
        };
        let l = hin * win;
        let rows = geom.col_rows();
        let gd = g.data();
        let xv = self.value(x).data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dw = vec![0.0; if want_w { cin * rows } else { 0 }];
        let mut dx = vec![0.0; if want_x { n * cin * l } else { 0 }];
        let mut dcols = vec![0.0; rows * l];
        for s in 0..n {
            let gs = &gd[s * cout * ho * wo..(s + 1) * cout * ho * wo];
            im2col(gs, &geom, &mut dcols);
            if want_x {
                let dxs = &mut dx[s * cin * l..(s + 1) * cin * l];
                gemm(cin, rows, l, 1.0, wt.data(), false, &dcols, false, 0.0, dxs);
            }
            if want_w {
                let xs = &xv[s * cin * l..(s + 1) * cin * l];
                gemm(cin, l, rows, 1.0, xs, false, &dcols, true, 1.0, &mut dw);
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::new(&[n, cin, hin, win], dx).unwrap());
        }
        if want_w {
            self.accumulate(grads, w, Tensor::new(wt.shape(), dw).unwrap());
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut db = vec![0.0; cout];
                let hw = ho * wo;
                for s in 0..n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let off = (s * cout + co) * hw;
                        *d += gd[off..off + hw].iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, b, Tensor::new(&[cout], db).unwrap());
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn dice_sums(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (a, b) in p.iter().zip(t) {
        inter += a * b;
        sp += a;
        st += b;
    }
    (inter, sp, st)
}

/// Elementwise `x * (1 - a) + c * a` over `n` samples of `ch` channels,
/// broadcasting the `n x hw` gate over channels.
pub fn compose_values(x: &[f64], a: &[f64], c: &[f64], n: usize, ch: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * ch * hw];
    for s in 0..n {
        for k in 0..ch {
            for i in 0..hw {
                let idx = (s * ch + k) * hw + i;
                let ai = a[s * hw + i];
                out[idx] = x[idx] * (1.0 - ai) + c[idx] * ai;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of d(loss)/d(leaf) for every element of
    /// every trainable leaf.
    fn check_grads(build: impl Fn(&mut Graph, &[Var]) -> Var, leaves: &[Tensor]) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let an = grads.get(vars[li]).expect("leaf gradient");
            for e in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == li {
                                t.data_mut()[e] += delta;
                            }
                            g.param(t)
                        })
                        .collect();
                    let l = build(&mut g, &vs);
                    g.item(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = an.data()[e];
                let tol = 1e-6 * (1.0 + fd.abs().max(a.abs()));
                assert!(
                    (fd - a).abs() <= tol,
                    "leaf {li} elem {e}: finite diff {fd} vs analytic {a}"
                );
            }
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn conv2d_gradients() {
        let leaves = [
            rand_t(&[2, 2, 5, 5], 1),
            rand_t(&[3, 2, 3, 3], 2),
            rand_t(&[3], 3),
        ];
        check_grads(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
                let t = g.tanh(y);
                g.mean_sq_to(t, 0.3)
            },
            &leaves,
        );
    }

    #[test]
    fn pointwise_conv_gradients() {
        let leaves = [rand_t(&[1, 4, 3, 3], 4), rand_t(&[2, 4, 1, 1], 5), rand_t(&[2], 6)];
        check_grads(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0);
                g.mean_sq_to(y, 0.1)
            },
            &leaves,
        );
    }

    #[test]
    fn conv_transpose2d_gradients() {
        let leaves = [
            rand_t(&[2, 3, 3, 3], 7),
            rand_t(&[3, 2, 3, 3], 8),
            rand_t(&[2], 9),
        ];
        check_grads(
            |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1);
                assert_eq!(g.value(y).shape(), &[2, 2, 6, 6]);
                let t = g.sigmoid(y);
                g.mean_sq_to(t, 0.2)
            },
            &leaves,
        );
    }

    #[test]
    fn norm_pad_pool_gradients() {
        let leaves = [
            rand_t(&[2, 2, 4, 4], 10),
            Tensor::new(&[2], vec![1.2, 0.7]).unwrap(),
            Tensor::new(&[2], vec![0.1, -0.3]).unwrap(),
            rand_t(&[2, 2, 6, 6], 22),
        ];
        check_grads(
            |g, v| {
                let p = g.reflect_pad(v[0], 1);
                let n = g.instance_norm(p, v[1], v[2]);
                let m = g.mul(n, v[3]);
                let q = g.max_pool2(m);
                let r = g.leaky_relu(q, 0.2);
                let s = g.global_avg_pool(r);
                g.mean_sq_to(s, 0.5)
            },
            &leaves,
        );
    }

    #[test]
    fn compose_and_losses_gradients() {
        let leaves = [
            rand_t(&[1, 2, 3, 3], 11),
            rand_t(&[1, 1, 3, 3], 12),
            rand_t(&[1, 2, 3, 3], 13),
            rand_t(&[1, 2, 3, 3], 14),
        ];
        let target = Tensor::new(&[1, 1, 3, 3], vec![0., 1., 0., 1., 1., 0., 0., 0., 1.]).unwrap();
        check_grads(
            |g, v| {
                let a = g.sigmoid(v[1]);
                let y = g.compose(v[0], a, v[2]);
                let cat = g.concat_channels(y, v[3]);
                let cat2 = g.concat_channels(v[3], v[0]);
                let l1 = g.mean_abs_diff(cat, cat2);
                let l2 = g.mean_sq_diff(y, v[3]);
                let l3 = g.mean_softplus(v[2], -1.0);
                let l4 = g.bce_with_logits(v[1], &target);
                let l5 = g.soft_dice(a, &target);
                let d = g.sub(y, v[0]);
                let e = g.scale(d, 0.5);
                let l6 = g.mean_sq_to(e, 0.0);
                let tot = g.add(l1, l2);
                g.weighted_sum(&[(tot, 1.0), (l3, 0.5), (l4, 2.0), (l5, 1.5), (l6, 3.0)])
            },
            &leaves,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(rand_t(&[1, 1, 4, 4], 1));
        let w = g.param(rand_t(&[1, 1, 3, 3], 2));
        let frozen = g.constant(rand_t(&[1, 1, 3, 3], 3));
        let y = g.conv2d(x, w, None, 1, 1);
        let z = g.conv2d(y, frozen, None, 1, 1);
        let l = g.mean_sq_to(z, 0.0);
        let grads = g.backward(l);
        assert!(grads.get(w).is_some());
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(x).is_none());
    }
}

thread_local! {
    static SWITCHES: RefCell<Option<Vec<u64>>> = const { RefCell::new(None) };
}

fn record_switches(it: impl Iterator<Item = u64>) {
    SWITCHES.with(|s| {
        if let Some(s) = s.borrow_mut().as_mut() {
            s.extend(it);
        }
    });
}

/// State of every non-differentiable op (ReLU sides, L1 signs, max-pool
/// winners) evaluated while running `f`. Two traces are equal exactly when
/// the same smooth piece of the function was used.
pub fn switch_trace<T>(f: impl FnOnce() -> T) -> (T, Vec<u64>) {
    let prev = SWITCHES.with(|s| s.borrow_mut().replace(Vec::new()));
    let out = f();
    let trace = SWITCHES.with(|s| std::mem::replace(&mut *s.borrow_mut(), prev)).unwrap_or_default();
    (out, trace)
}
