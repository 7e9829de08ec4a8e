//! Reverse-mode automatic differentiation over dynamically shaped arrays.
//!
//! A [`Graph`] is a tape of operations built during a forward pass; calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! accumulates gradients for every node that requires them. The op set is
//! exactly what the networks here need: dense/conv linear algebra, group
//! normalization, smooth activations, softmax, and a few small batched
//! contractions used by the attention layers.
//!
//! Values are kept in standard (row-major, contiguous) layout throughout so
//! reshapes are free and the im2col kernels can work on raw slices.

use std::cell::RefCell;

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Tanh(Var),
    /// `[m, k] x [k, n]`
    Matmul(Var, Var),
    /// `[m, n] + [n]` broadcast over rows.
    AddRowBias(Var, Var),
    /// `[n, c, h, w] + [c]` broadcast per channel.
    AddChanBias(Var, Var),
    /// `[n, c, h, w] + [n, c]` broadcast over the spatial axes.
    AddChanVec(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest2x(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Mean(Var),
    Sum(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    /// `[n, q, d] . [n, d] -> [n, q]`
    DotLast(Var, Var),
    /// `[n, q] x [n, d] -> [n, q, d]`
    OuterLast(Var, Var),
    /// `[n, k] . [n, k, d] -> [n, d]`
    WeightedSum(Var, Var),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T: Scalar> {
    by_node: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: ArrayD<T>, needs_grad: bool, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn val<R>(&self, v: Var, f: impl FnOnce(&ArrayD<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Differentiable leaf (parameter).
    pub fn param(&self, value: ArrayD<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable leaf (input data, constants).
    pub fn constant(&self, value: ArrayD<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> ArrayD<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.val(a, |x| self.val(b, |y| x + y));
        self.push(v, self.needs(a) || self.needs(b), Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.val(a, |x| self.val(b, |y| x - y));
        self.push(v, self.needs(a) || self.needs(b), Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.val(a, |x| self.val(b, |y| x * y));
        self.push(v, self.needs(a) || self.needs(b), Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let v = self.val(a, |x| x.mapv(|e| e * c));
        self.push(v, self.needs(a), Op::Scale(a, c))
    }

    pub fn silu(&self, a: Var) -> Var {
        let v = self.val(a, |x| x.mapv(silu));
        self.push(v, self.needs(a), Op::Silu(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.val(a, |x| x.mapv(|e| e.tanh()));
        self.push(v, self.needs(a), Op::Tanh(a))
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.val(a, |x| {
            self.val(b, |y| {
                let x2 = as_2d(x);
                let y2 = as_2d(y);
                assert_eq!(x2.shape()[1], y2.shape()[0], "matmul inner dims");
                x2.dot(&y2).into_dyn()
            })
        });
        self.push(v, self.needs(a) || self.needs(b), Op::Matmul(a, b))
    }

    pub fn add_row_bias(&self, x: Var, b: Var) -> Var {
        let v = self.val(x, |xv| {
            self.val(b, |bv| {
                assert_eq!(xv.shape()[xv.ndim() - 1], bv.len(), "row bias width");
                let mut out = xv.clone();
                let width = bv.len();
                let bslice = bv.as_slice().expect("bias layout");
                for row in out.as_slice_mut().expect("layout").chunks_mut(width) {
                    for (o, &bb) in row.iter_mut().zip(bslice) {
                        *o += bb;
                    }
                }
                out
            })
        });
        self.push(v, self.needs(x) || self.needs(b), Op::AddRowBias(x, b))
    }

    pub fn add_chan_bias(&self, x: Var, b: Var) -> Var {
        let v = self.val(x, |xv| {
            self.val(b, |bv| {
                let (c, hw) = (xv.shape()[1], xv.shape()[2] * xv.shape()[3]);
                assert_eq!(c, bv.len(), "channel bias width");
                let mut out = xv.clone();
                let bslice = bv.as_slice().expect("bias layout");
                for img in out.as_slice_mut().expect("layout").chunks_mut(c * hw) {
                    for (cc, plane) in img.chunks_mut(hw).enumerate() {
                        let bb = bslice[cc];
                        for o in plane {
                            *o += bb;
                        }
                    }
                }
                out
            })
        });
        self.push(v, self.needs(x) || self.needs(b), Op::AddChanBias(x, b))
    }

    /// Adds a per-sample channel vector `[n, c]` to a `[n, c, h, w]` map.
    pub fn add_chan_vec(&self, x: Var, v: Var) -> Var {
        let out = self.val(x, |xv| {
            self.val(v, |vv| {
                let (n, c, hw) = (xv.shape()[0], xv.shape()[1], xv.shape()[2] * xv.shape()[3]);
                assert_eq!(vv.shape(), &[n, c], "chan vec shape");
                let mut out = xv.clone();
                let vs = vv.as_slice().expect("layout");
                for (ni, img) in out.as_slice_mut().expect("layout").chunks_mut(c * hw).enumerate() {
                    for (cc, plane) in img.chunks_mut(hw).enumerate() {
                        let bb = vs[ni * c + cc];
                        for o in plane {
                            *o += bb;
                        }
                    }
                }
                out
            })
        });
        self.push(out, self.needs(x) || self.needs(v), Op::AddChanVec(x, v))
    }

    /// NCHW convolution with square kernel, zero padding.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let v = self.val(x, |xv| self.val(w, |wv| conv2d_forward(xv, wv, stride, pad)));
        self.push(
            v,
            self.needs(x) || self.needs(w),
            Op::Conv2d { x, w, stride, pad },
        )
    }

    pub fn upsample_nearest_2x(&self, x: Var) -> Var {
        let v = self.val(x, |xv| {
            let (n, c, h, w) = dims4(xv);
            let xs = xv.as_slice().expect("layout");
            let mut out = vec![T::zero(); n * c * 4 * h * w];
            let (oh, ow) = (2 * h, 2 * w);
            for nc in 0..n * c {
                let src = &xs[nc * h * w..(nc + 1) * h * w];
                let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
                for y in 0..oh {
                    for x2 in 0..ow {
                        dst[y * ow + x2] = src[(y / 2) * w + x2 / 2];
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap()
        });
        self.push(v, self.needs(x), Op::UpsampleNearest2x(x))
    }

    /// Group normalization over `[n, c, h, w]` with learned per-channel
    /// scale `gamma` and shift `beta`.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let eps = 1e-5;
        let v = self.val(x, |xv| {
            self.val(gamma, |gv| {
                self.val(beta, |bv| group_norm_forward(xv, gv, bv, groups, eps))
            })
        });
        self.push(
            v,
            self.needs(x) || self.needs(gamma) || self.needs(beta),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
        )
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Var {
        let v = self.val(x, |xv| softmax_forward(xv, axis));
        self.push(v, self.needs(x), Op::Softmax { x, axis })
    }

    /// Mean over all elements; result has shape `[]`.
    pub fn mean(&self, x: Var) -> Var {
        let v = self.val(x, |xv| {
            let n = T::from_f64c(xv.len() as f64);
            let s = xv.iter().fold(T::zero(), |acc, &e| acc + e);
            ArrayD::from_elem(IxDyn(&[]), s / n)
        });
        self.push(v, self.needs(x), Op::Mean(x))
    }

    /// Sum over all elements; result has shape `[]`.
    pub fn sum(&self, x: Var) -> Var {
        let v = self.val(x, |xv| {
            let s = xv.iter().fold(T::zero(), |acc, &e| acc + e);
            ArrayD::from_elem(IxDyn(&[]), s)
        });
        self.push(v, self.needs(x), Op::Sum(x))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of nothing");
        let nodes = self.nodes.borrow();
        let views: Vec<_> = inputs.iter().map(|v| nodes[v.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shapes")
            .as_standard_layout()
            .to_owned();
        let needs = inputs.iter().any(|v| nodes[v.0].needs_grad);
        drop(nodes);
        self.push(
            v,
            needs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let v = self.val(x, |xv| {
            assert_eq!(
                xv.len(),
                shape.iter().product::<usize>(),
                "reshape element count"
            );
            xv.clone().into_shape_with_order(IxDyn(shape)).expect("reshape")
        });
        self.push(v, self.needs(x), Op::Reshape(x))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Var {
        let v = self.val(x, |xv| {
            xv.view()
                .permuted_axes(IxDyn(perm))
                .as_standard_layout()
                .to_owned()
        });
        self.push(
            v,
            self.needs(x),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    /// `out[n, q] = sum_d a[n, q, d] * b[n, d]`
    pub fn dot_last(&self, a: Var, b: Var) -> Var {
        let v = self.val(a, |av| {
            self.val(b, |bv| {
                let (n, q, d) = dims3(av);
                assert_eq!(bv.shape(), &[n, d], "dot_last rhs shape");
                let asl = av.as_slice().unwrap();
                let bsl = bv.as_slice().unwrap();
                let mut out = vec![T::zero(); n * q];
                for ni in 0..n {
                    for qi in 0..q {
                        let mut acc = T::zero();
                        let row = &asl[(ni * q + qi) * d..(ni * q + qi + 1) * d];
                        let ctx = &bsl[ni * d..(ni + 1) * d];
                        for (x, y) in row.iter().zip(ctx) {
                            acc += *x * *y;
                        }
                        out[ni * q + qi] = acc;
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[n, q]), out).unwrap()
            })
        });
        self.push(v, self.needs(a) || self.needs(b), Op::DotLast(a, b))
    }

    /// `out[n, q, d] = w[n, q] * v[n, d]`
    pub fn outer_last(&self, w: Var, v: Var) -> Var {
        let out = self.val(w, |wv| {
            self.val(v, |vv| {
                let (n, q) = dims2(wv);
                let d = vv.shape()[1];
                assert_eq!(vv.shape(), &[n, d], "outer_last rhs shape");
                let ws = wv.as_slice().unwrap();
                let vs = vv.as_slice().unwrap();
                let mut o = vec![T::zero(); n * q * d];
                for ni in 0..n {
                    for qi in 0..q {
                        let scale = ws[ni * q + qi];
                        let dst = &mut o[(ni * q + qi) * d..(ni * q + qi + 1) * d];
                        for (oo, &vvv) in dst.iter_mut().zip(&vs[ni * d..(ni + 1) * d]) {
                            *oo = scale * vvv;
                        }
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[n, q, d]), o).unwrap()
            })
        });
        self.push(out, self.needs(w) || self.needs(v), Op::OuterLast(w, v))
    }

    /// `out[n, d] = sum_k w[n, k] * v[n, k, d]`
    pub fn weighted_sum(&self, w: Var, v: Var) -> Var {
        let out = self.val(w, |wv| {
            self.val(v, |vv| {
                let (n, k, d) = dims3(vv);
                assert_eq!(wv.shape(), &[n, k], "weighted_sum lhs shape");
                let ws = wv.as_slice().unwrap();
                let vs = vv.as_slice().unwrap();
                let mut o = vec![T::zero(); n * d];
                for ni in 0..n {
                    for ki in 0..k {
                        let scale = ws[ni * k + ki];
                        let src = &vs[(ni * k + ki) * d..(ni * k + ki + 1) * d];
                        let dst = &mut o[ni * d..(ni + 1) * d];
                        for (oo, &vvv) in dst.iter_mut().zip(src) {
                            *oo += scale * vvv;
                        }
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[n, d]), o).unwrap()
            })
        });
        self.push(out, self.needs(w) || self.needs(v), Op::WeightedSum(w, v))
    }

    /// Backpropagate from a scalar output node.
    pub fn backward(&self, out: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.0].value.len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; nodes.len()];
        grads[out.0] = Some(ArrayD::from_elem(nodes[out.0].value.raw_dim(), T::one()));

        for i in (0..=out.0).rev() {
            if !nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let mut sends: Vec<(Var, ArrayD<T>)> = Vec::new();
            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    sends.push((*a, gy.clone()));
                    sends.push((*b, gy));
                }
                Op::Sub(a, b) => {
                    sends.push((*a, gy.clone()));
                    sends.push((*b, gy.mapv(|e| -e)));
                }
                Op::Mul(a, b) => {
                    sends.push((*a, &gy * &nodes[b.0].value));
                    sends.push((*b, &gy * &nodes[a.0].value));
                }
                Op::Scale(a, c) => sends.push((*a, gy.mapv(|e| e * *c))),
                Op::Silu(a) => {
                    let x = &nodes[a.0].value;
                    let mut gx = gy;
                    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &xv| {
                        let s = sigmoid(xv);
                        *g = *g * (s * (T::one() + xv * (T::one() - s)));
                    });
                    sends.push((*a, gx));
                }
                Op::Tanh(a) => {
                    let y = &nodes[i].value;
                    let mut gx = gy;
                    ndarray::Zip::from(&mut gx).and(y).for_each(|g, &yv| {
                        *g = *g * (T::one() - yv * yv);
                    });
                    sends.push((*a, gx));
                }
                Op::Matmul(a, b) => {
                    let gy2 = as_2d(&gy);
                    let av = as_2d(&nodes[a.0].value);
                    let bv = as_2d(&nodes[b.0].value);
                    sends.push((*a, gy2.dot(&bv.t()).into_dyn()));
                    sends.push((*b, av.t().dot(&gy2).into_dyn()));
                }
                Op::AddRowBias(x, b) => {
                    let width = nodes[b.0].value.len();
                    let mut gb = vec![T::zero(); width];
                    for row in gy.as_slice().unwrap().chunks(width) {
                        for (g, &r) in gb.iter_mut().zip(row) {
                            *g += r;
                        }
                    }
                    sends.push((*x, gy));
                    sends.push((*b, ArrayD::from_shape_vec(IxDyn(&[width]), gb).unwrap()));
                }
                Op::AddChanBias(x, b) => {
                    let sh = nodes[x.0].value.shape().to_vec();
                    let (c, hw) = (sh[1], sh[2] * sh[3]);
                    let mut gb = vec![T::zero(); c];
                    for img in gy.as_slice().unwrap().chunks(c * hw) {
                        for (cc, plane) in img.chunks(hw).enumerate() {
                            let mut acc = T::zero();
                            for &p in plane {
                                acc += p;
                            }
                            gb[cc] += acc;
                        }
                    }
                    sends.push((*x, gy));
                    sends.push((*b, ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap()));
                }
                Op::AddChanVec(x, v) => {
                    let sh = nodes[x.0].value.shape().to_vec();
                    let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
                    let mut gv = vec![T::zero(); n * c];
                    for (ni, img) in gy.as_slice().unwrap().chunks(c * hw).enumerate() {
                        for (cc, plane) in img.chunks(hw).enumerate() {
                            let mut acc = T::zero();
                            for &p in plane {
                                acc += p;
                            }
                            gv[ni * c + cc] += acc;
                        }
                    }
                    sends.push((*x, gy));
                    sends.push((*v, ArrayD::from_shape_vec(IxDyn(&[n, c]), gv).unwrap()));
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (gx, gw) =
                        conv2d_backward(&nodes[x.0].value, &nodes[w.0].value, &gy, *stride, *pad);
                    sends.push((*x, gx));
                    sends.push((*w, gw));
                }
                Op::UpsampleNearest2x(x) => {
                    let (n, c, h, w) = dims4(&nodes[x.0].value);
                    let gys = gy.as_slice().unwrap();
                    let mut gx = vec![T::zero(); n * c * h * w];
                    let (oh, ow) = (2 * h, 2 * w);
                    for nc in 0..n * c {
                        let src = &gys[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
                        for y in 0..oh {
                            for x2 in 0..ow {
                                dst[(y / 2) * w + x2 / 2] += src[y * ow + x2];
                            }
                        }
                    }
                    sends.push((
                        *x,
                        ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gx).unwrap(),
                    ));
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    eps,
                } => {
                    let (gx, gg, gb) = group_norm_backward(
                        &nodes[x.0].value,
                        &nodes[gamma.0].value,
                        &gy,
                        *groups,
                        *eps,
                    );
                    sends.push((*x, gx));
                    sends.push((*gamma, gg));
                    sends.push((*beta, gb));
                }
                Op::Softmax { x, axis } => {
                    let y = &nodes[i].value;
                    let gx = softmax_backward(y, &gy, *axis);
                    sends.push((*x, gx));
                }
                Op::Mean(x) => {
                    let len = nodes[x.0].value.len();
                    let g = gy.first().copied().unwrap() / T::from_f64c(len as f64);
                    sends.push((*x, ArrayD::from_elem(nodes[x.0].value.raw_dim(), g)));
                }
                Op::Sum(x) => {
                    let g = gy.first().copied().unwrap();
                    sends.push((*x, ArrayD::from_elem(nodes[x.0].value.raw_dim(), g)));
                }
                Op::Concat { inputs, axis } => {
                    let mut offset = 0;
                    for v in inputs {
                        let w = nodes[v.0].value.shape()[*axis];
                        let part = gy
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + w))
                            .as_standard_layout()
                            .to_owned();
                        sends.push((*v, part));
                        offset += w;
                    }
                }
                Op::Reshape(x) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    sends.push((*x, gy.into_shape_with_order(IxDyn(&shape)).unwrap()));
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0usize; perm.len()];
                    for (k, &p) in perm.iter().enumerate() {
                        inv[p] = k;
                    }
                    let g = gy
                        .view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .to_owned();
                    sends.push((*x, g));
                }
                Op::DotLast(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let (n, q, d) = dims3(av);
                    let gys = gy.as_slice().unwrap();
                    let asl = av.as_slice().unwrap();
                    let bsl = bv.as_slice().unwrap();
                    let mut ga = vec![T::zero(); n * q * d];
                    let mut gb = vec![T::zero(); n * d];
                    for ni in 0..n {
                        for qi in 0..q {
                            let g = gys[ni * q + qi];
                            let arow = &asl[(ni * q + qi) * d..(ni * q + qi + 1) * d];
                            let garow = &mut ga[(ni * q + qi) * d..(ni * q + qi + 1) * d];
                            for di in 0..d {
                                garow[di] = g * bsl[ni * d + di];
                                gb[ni * d + di] += g * arow[di];
                            }
                        }
                    }
                    sends.push((*a, ArrayD::from_shape_vec(IxDyn(&[n, q, d]), ga).unwrap()));
                    sends.push((*b, ArrayD::from_shape_vec(IxDyn(&[n, d]), gb).unwrap()));
                }
                Op::OuterLast(w, v) => {
                    let wv = &nodes[w.0].value;
                    let vv = &nodes[v.0].value;
                    let (n, q) = dims2(wv);
                    let d = vv.shape()[1];
                    let gys = gy.as_slice().unwrap();
                    let ws = wv.as_slice().unwrap();
                    let vs = vv.as_slice().unwrap();
                    let mut gw = vec![T::zero(); n * q];
                    let mut gv = vec![T::zero(); n * d];
                    for ni in 0..n {
                        for qi in 0..q {
                            let grow = &gys[(ni * q + qi) * d..(ni * q + qi + 1) * d];
                            let mut acc = T::zero();
                            for di in 0..d {
                                acc += grow[di] * vs[ni * d + di];
                                gv[ni * d + di] += grow[di] * ws[ni * q + qi];
                            }
                            gw[ni * q + qi] = acc;
                        }
                    }
                    sends.push((*w, ArrayD::from_shape_vec(IxDyn(&[n, q]), gw).unwrap()));
                    sends.push((*v, ArrayD::from_shape_vec(IxDyn(&[n, d]), gv).unwrap()));
                }
                Op::WeightedSum(w, v) => {
                    let wv = &nodes[w.0].value;
                    let vv = &nodes[v.0].value;
                    let (n, k, d) = dims3(vv);
                    let gys = gy.as_slice().unwrap();
                    let ws = wv.as_slice().unwrap();
                    let vs = vv.as_slice().unwrap();
                    let mut gw = vec![T::zero(); n * k];
                    let mut gv = vec![T::zero(); n * k * d];
                    for ni in 0..n {
                        let grow = &gys[ni * d..(ni + 1) * d];
                        for ki in 0..k {
                            let vrow = &vs[(ni * k + ki) * d..(ni * k + ki + 1) * d];
                            let gvrow = &mut gv[(ni * k + ki) * d..(ni * k + ki + 1) * d];
                            let mut acc = T::zero();
                            for di in 0..d {
                                acc += grow[di] * vrow[di];
                                gvrow[di] = grow[di] * ws[ni * k + ki];
                            }
                            gw[ni * k + ki] = acc;
                        }
                    }
                    sends.push((*w, ArrayD::from_shape_vec(IxDyn(&[n, k]), gw).unwrap()));
                    sends.push((*v, ArrayD::from_shape_vec(IxDyn(&[n, k, d]), gv).unwrap()));
                }
            }
            for (dst, g) in sends {
                if !nodes[dst.0].needs_grad {
                    continue;
                }
                match &mut grads[dst.0] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
        Grads { by_node: grads }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

fn as_2d<T: Scalar>(a: &ArrayD<T>) -> Array2<T> {
    assert_eq!(a.ndim(), 2, "expected 2-d array, got {:?}", a.shape());
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned()
}

fn dims2<T: Scalar>(a: &ArrayD<T>) -> (usize, usize) {
    assert_eq!(a.ndim(), 2, "expected 2-d array, got {:?}", a.shape());
    (a.shape()[0], a.shape()[1])
}

fn dims3<T: Scalar>(a: &ArrayD<T>) -> (usize, usize, usize) {
    assert_eq!(a.ndim(), 3, "expected 3-d array, got {:?}", a.shape());
    (a.shape()[0], a.shape()[1], a.shape()[2])
}

fn dims4<T: Scalar>(a: &ArrayD<T>) -> (usize, usize, usize, usize) {
    assert_eq!(a.ndim(), 4, "expected 4-d array, got {:?}", a.shape());
    (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3])
}

fn out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Unfold `[n, c, h, w]` into patch rows `[n*oh*ow, c*k*k]`.
fn im2col<T: Scalar>(
    x: &ArrayD<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<T>, usize, usize) {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let xs = x.as_slice().expect("layout");
    let mut cols = vec![T::zero(); n * oh * ow * c * k * k];
    let row_w = c * k * k;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[((ni * oh + oy) * ow + ox) * row_w
                    ..((ni * oh + oy) * ow + ox + 1) * row_w];
                for cc in 0..c {
                    let plane = &xs[(ni * c + cc) * h * w..(ni * c + cc + 1) * h * w];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[(cc * k + ky) * k + kx] = plane[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (
        Array2::from_shape_vec((n * oh * ow, row_w), cols).unwrap(),
        oh,
        ow,
    )
}

/// Fold patch-row gradients back onto the input (transpose of [`im2col`]).
fn col2im<T: Scalar>(
    cols: &Array2<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let (oh, ow) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let cs = cols.as_slice().expect("layout");
    let row_w = c * k * k;
    let mut out = vec![T::zero(); n * c * h * w];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cs[((ni * oh + oy) * ow + ox) * row_w
                    ..((ni * oh + oy) * ow + ox + 1) * row_w];
                for cc in 0..c {
                    let plane = &mut out[(ni * c + cc) * h * w..(ni * c + cc + 1) * h * w];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            plane[iy as usize * w + ix as usize] += row[(cc * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap()
}

fn conv2d_forward<T: Scalar>(x: &ArrayD<T>, w: &ArrayD<T>, stride: usize, pad: usize) -> ArrayD<T> {
    let (n, c, _, _) = dims4(x);
    let (cout, cin, k, k2) = dims4(w);
    assert_eq!(c, cin, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d expects square kernels");
    let (cols, oh, ow) = im2col(x, k, stride, pad);
    let w2 = w
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .unwrap()
        .to_owned();
    // [n*oh*ow, cout]
    let y = cols.dot(&w2.t());
    let y = y
        .into_shape_with_order((n, oh, ow, cout))
        .unwrap()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned();
    y.into_dyn()
}

fn conv2d_backward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    gy: &ArrayD<T>,
    stride: usize,
    pad: usize,
) -> (ArrayD<T>, ArrayD<T>) {
    let (n, c, h, wd) = dims4(x);
    let (cout, cin, k, _) = dims4(w);
    let (oh, ow) = (out_size(h, k, stride, pad), out_size(wd, k, stride, pad));
    let gy2 = gy
        .view()
        .permuted_axes(IxDyn(&[0, 2, 3, 1]))
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((n * oh * ow, cout))
        .unwrap();
    let (cols, _, _) = im2col(x, k, stride, pad);
    let w2 = w
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .unwrap()
        .to_owned();
    let gw = gy2.t().dot(&cols); // [cout, c*k*k]
    let gcols = gy2.dot(&w2); // [n*oh*ow, c*k*k]
    let gx = col2im(&gcols, n, c, h, wd, k, stride, pad);
    let gw = gw
        .into_shape_with_order((cout, cin, k, k))
        .unwrap()
        .into_dyn();
    (gx, gw)
}

fn group_norm_forward<T: Scalar>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    groups: usize,
    eps: f64,
) -> ArrayD<T> {
    let (n, c, h, w) = dims4(x);
    assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
    assert_eq!(gamma.len(), c, "gamma width");
    assert_eq!(beta.len(), c, "beta width");
    let cg = c / groups;
    let m = cg * h * w;
    let xs = x.as_slice().unwrap();
    let gs = gamma.as_slice().unwrap();
    let bs = beta.as_slice().unwrap();
    let mut out = vec![T::zero(); n * c * h * w];
    let epsv = T::from_f64c(eps);
    let mf = T::from_f64c(m as f64);
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * cg) * h * w;
            let chunk = &xs[start..start + m];
            let mut mean = T::zero();
            for &v in chunk {
                mean += v;
            }
            mean /= mf;
            let mut var = T::zero();
            for &v in chunk {
                var += (v - mean) * (v - mean);
            }
            var /= mf;
            let inv_std = T::one() / (var + epsv).sqrt();
            let dst = &mut out[start..start + m];
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let (ga, be) = (gs[ch], bs[ch]);
                for p in 0..h * w {
                    let idx = cc * h * w + p;
                    dst[idx] = (chunk[idx] - mean) * inv_std * ga + be;
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap()
}

fn group_norm_backward<T: Scalar>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    gy: &ArrayD<T>,
    groups: usize,
    eps: f64,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let (n, c, h, w) = dims4(x);
    let cg = c / groups;
    let m = cg * h * w;
    let xs = x.as_slice().unwrap();
    let gs = gamma.as_slice().unwrap();
    let gys = gy.as_slice().unwrap();
    let mut gx = vec![T::zero(); n * c * h * w];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let epsv = T::from_f64c(eps);
    let mf = T::from_f64c(m as f64);
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * cg) * h * w;
            let xc = &xs[start..start + m];
            let gyc = &gys[start..start + m];
            let mut mean = T::zero();
            for &v in xc {
                mean += v;
            }
            mean /= mf;
            let mut var = T::zero();
            for &v in xc {
                var += (v - mean) * (v - mean);
            }
            var /= mf;
            let inv_std = T::one() / (var + epsv).sqrt();

            // g = gy * gamma (per channel); accumulate the two group means.
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let ga = gs[ch];
                for p in 0..h * w {
                    let idx = cc * h * w + p;
                    let xhat = (xc[idx] - mean) * inv_std;
                    let g = gyc[idx] * ga;
                    mean_g += g;
                    mean_gx += g * xhat;
                    gg[ch] += gyc[idx] * xhat;
                    gb[ch] += gyc[idx];
                }
            }
            mean_g /= mf;
            mean_gx /= mf;
            let dst = &mut gx[start..start + m];
            for cc in 0..cg {
                let ch = gi * cg + cc;
                let ga = gs[ch];
                for p in 0..h * w {
                    let idx = cc * h * w + p;
                    let xhat = (xc[idx] - mean) * inv_std;
                    let g = gyc[idx] * ga;
                    dst[idx] = inv_std * (g - mean_g - xhat * mean_gx);
                }
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gx).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[c]), gg).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap(),
    )
}

fn softmax_forward<T: Scalar>(x: &ArrayD<T>, axis: usize) -> ArrayD<T> {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let mx = lane.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in lane.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn softmax_backward<T: Scalar>(y: &ArrayD<T>, gy: &ArrayD<T>, axis: usize) -> ArrayD<T> {
    let mut gx = gy.clone();
    let yv = y.view();
    for (mut glane, ylane) in gx.lanes_mut(Axis(axis)).into_iter().zip(yv.lanes(Axis(axis))) {
        let mut dot = T::zero();
        for (g, &yy) in glane.iter().zip(ylane.iter()) {
            dot += *g * yy;
        }
        for (g, &yy) in glane.iter_mut().zip(ylane.iter()) {
            *g = yy * (*g - dot);
        }
    }
    gx
}
