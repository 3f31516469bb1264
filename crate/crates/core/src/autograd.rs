//! A small define-by-run reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological order for backpropagation. Only the ops
//! the network needs are provided; losses with hand-derived gradients enter
//! the tape through [`Graph::custom_scalar`].

use std::rc::Rc;

use crate::conv::{conv2d, conv2d_backward, gemm, ConvSpec};
use crate::spatial::SpatialMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    /// `[.., C] + [C]`
    AddRow(Var, Var),
    /// `[.., C] * [.., 1]`
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxLast(Var),
    ConcatLast(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Spatial(Var, Rc<SpatialMap>),
    Reshape(Var),
    LinComb(Vec<(Var, f64)>),
    /// Scalar whose gradient with respect to `x` was computed in the forward pass.
    Custom {
        x: Var,
        local_grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        let c = self.value(x).last_dim();
        assert_eq!(r.len(), c, "row length {} vs last dim {c}", r.len());
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(c) {
            for (a, b) in chunk.iter_mut().zip(r.data()) {
                *a += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(v, Op::AddRow(x, row), ng)
    }

    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let xv = self.value(x);
        let cv = self.value(col);
        let c = xv.last_dim();
        assert_eq!(cv.last_dim(), 1);
        assert_eq!(cv.len(), xv.rows(), "column length mismatch");
        let mut v = xv.clone();
        for (chunk, s) in v.data_mut().chunks_mut(c).zip(cv.data()) {
            for a in chunk {
                *a *= s;
            }
        }
        let ng = self.ng(x) || self.ng(col);
        self.push(v, Op::MulCol(x, col), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scaled(s);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let v = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(v, Op::Conv { x, w, b, spec }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape().len(), 2);
        assert_eq!(bv.shape().len(), 2);
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let n = bv.shape()[1];
        assert_eq!(bv.shape()[0], k, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[n, m], out), Op::Transpose(a), ng)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let v = softmax_last(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::SoftmaxLast(x), ng)
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let lead: Vec<usize> = {
            let s = self.value(parts[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat row mismatch");
            for (r, chunk) in pv.data().chunks(wd).enumerate() {
                out[r * total + off..r * total + off + wd].copy_from_slice(chunk);
            }
            off += wd;
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(&shape, out), Op::ConcatLast(parts.to_vec()), ng)
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        assert!(start + len <= c);
        let mut out = Vec::with_capacity(xv.rows() * len);
        for chunk in xv.data().chunks(c) {
            out.extend_from_slice(&chunk[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, out), Op::SliceLast { x, start }, ng)
    }

    pub fn spatial(&mut self, x: Var, map: Rc<SpatialMap>) -> Var {
        let v = map.apply(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::Spatial(x, map), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// `Σ coeff·term` over same-shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut v = Tensor::zeros(self.value(terms[0].0).shape());
        for &(t, c) in terms {
            let tv = self.value(t);
            assert_eq!(tv.shape(), v.shape(), "lin_comb shape mismatch");
            for (a, b) in v.data_mut().iter_mut().zip(tv.data()) {
                *a += c * b;
            }
        }
        let ng = terms.iter().any(|&(t, _)| self.ng(t));
        self.push(v, Op::LinComb(terms.to_vec()), ng)
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let t: Vec<(Var, f64)> = terms.iter().map(|&v| (v, 1.0)).collect();
        self.lin_comb(&t)
    }

    pub fn custom_scalar(&mut self, x: Var, value: f64, local_grad: Tensor) -> Var {
        assert_eq!(local_grad.shape(), self.value(x).shape());
        let ng = self.ng(x);
        self.push(Tensor::scalar(value), Op::Custom { x, local_grad }, ng)
    }

    /// Backpropagate from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.ng(*row) {
                        let c = g.last_dim();
                        let mut gr = vec![0.0; c];
                        for chunk in g.data().chunks(c) {
                            for (a, b) in gr.iter_mut().zip(chunk) {
                                *a += b;
                            }
                        }
                        let shape = self.value(*row).shape().to_vec();
                        acc(&mut grads, *row, Tensor::from_vec(&shape, gr));
                    }
                    if self.ng(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::MulCol(x, col) => {
                    let xv = self.value(*x);
                    let cv = self.value(*col);
                    let c = xv.last_dim();
                    if self.ng(*col) {
                        let gc: Vec<f64> = g
                            .data()
                            .chunks(c)
                            .zip(xv.data().chunks(c))
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                            .collect();
                        acc(&mut grads, *col, Tensor::from_vec(cv.shape(), gc));
                    }
                    if self.ng(*x) {
                        let mut gx = g.clone();
                        for (chunk, s) in gx.data_mut().chunks_mut(c).zip(cv.data()) {
                            for a in chunk {
                                *a *= s;
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.scaled(*s)),
                Op::Relu(x) => {
                    let gx = g.zip_map(&node.value, |gv, y| if y > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *x, gx);
                }
                Op::Conv { x, w, b, spec } => {
                    let (gx, gw, gb) =
                        conv2d_backward(self.value(*x), self.value(*w), &g, *spec, self.ng(*x));
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    if self.ng(*w) {
                        acc(&mut grads, *w, gw);
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            acc(&mut grads, *b, gb);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if self.ng(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, bv.data(), true, 0.0, &mut ga);
                        acc(&mut grads, *a, Tensor::from_vec(&[m, k], ga));
                    }
                    if self.ng(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, 0.0, &mut gb);
                        acc(&mut grads, *b, Tensor::from_vec(&[k, n], gb));
                    }
                }
                Op::Transpose(a) => {
                    let (n, m) = (g.shape()[0], g.shape()[1]);
                    let mut ga = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            ga[i * n + j] = g.data()[j * m + i];
                        }
                    }
                    acc(&mut grads, *a, Tensor::from_vec(&[m, n], ga));
                }
                Op::SoftmaxLast(x) => {
                    let c = g.last_dim();
                    let mut gx = vec![0.0; g.len()];
                    for ((out, gr), yr) in gx
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(node.value.data().chunks(c))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), y) in out.iter_mut().zip(gr).zip(yr) {
                            *o = y * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(g.shape(), gx));
                }
                Op::ConcatLast(parts) => {
                    let total = g.last_dim();
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let wd = pv.last_dim();
                        if self.ng(p) {
                            let mut gp = Vec::with_capacity(pv.len());
                            for chunk in g.data().chunks(total) {
                                gp.extend_from_slice(&chunk[off..off + wd]);
                            }
                            acc(&mut grads, p, Tensor::from_vec(pv.shape(), gp));
                        }
                        off += wd;
                    }
                }
                Op::SliceLast { x, start } => {
                    let xv = self.value(*x);
                    let c = xv.last_dim();
                    let len = g.last_dim();
                    let mut gx = vec![0.0; xv.len()];
                    for (dst, src) in gx.chunks_mut(c).zip(g.data().chunks(len)) {
                        dst[*start..start + len].copy_from_slice(src);
                    }
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), gx));
                }
                Op::Spatial(x, map) => acc(&mut grads, *x, map.apply_transpose(&g)),
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshape(&shape));
                }
                Op::LinComb(terms) => {
                    for &(t, c) in terms {
                        if self.ng(t) {
                            acc(&mut grads, t, g.scaled(c));
                        }
                    }
                }
                Op::Custom { x, local_grad } => {
                    acc(&mut grads, *x, local_grad.scaled(g.item()));
                }
            }
        }
        Gradients { grads }
    }
}

/// Numerically stable softmax along the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let c = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(out * probe))/d(input) through `build`.
    fn check(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::randn(shape, 1.0, &mut rng);
        let run = |x: &Tensor, probe: Option<&Tensor>| -> (f64, Option<Tensor>, Tensor) {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let out = build(&mut g, xv);
            let outv = g.value(out).clone();
            let p = probe.cloned().unwrap_or_else(|| Tensor::full(outv.shape(), 1.0));
            let val: f64 = outv.data().iter().zip(p.data()).map(|(a, b)| a * b).sum();
            let grad = p.clone();
            let s = g.custom_scalar(out, val, grad);
            let grads = g.backward(s);
            (val, grads.get(xv).cloned(), outv)
        };
        let (_, _, out0) = run(&x0, None);
        let probe = Tensor::randn(out0.shape(), 1.0, &mut rng);
        let (_, gx, _) = run(&x0, Some(&probe));
        let gx = gx.expect("input gradient");
        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += eps;
            let mut m = x0.clone();
            m.data_mut()[i] -= eps;
            let fd = (run(&p, Some(&probe)).0 - run(&m, Some(&probe)).0) / (2.0 * eps);
            let an = gx.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "element {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn softmax_grad() {
        check(&[3, 4], |g, x| g.softmax_last(x));
    }

    #[test]
    fn matmul_transpose_grad() {
        check(&[3, 4], |g, x| {
            let t = g.transpose(x);
            g.matmul(x, t)
        });
    }

    #[test]
    fn concat_slice_mulcol_grad() {
        check(&[2, 3, 4], |g, x| {
            let a = g.slice_last(x, 1, 1);
            let b = g.mul_col(x, a);
            let c = g.concat_last(&[b, x, a]);
            g.relu(c)
        });
    }

    #[test]
    fn spatial_and_addrow_grad() {
        check(&[3, 3, 2], |g, x| {
            let m = Rc::new(SpatialMap::bilinear(3, 3, 5, 4));
            let up = g.spatial(x, m);
            let row = g.slice_last(x, 0, 2);
            let row = g.reshape(row, &[9, 2]);
            let r0 = g.slice_last(row, 0, 2);
            let r0 = g.transpose(r0);
            let r0 = g.slice_last(r0, 0, 1);
            let r0 = g.reshape(r0, &[2]);
            g.add_row(up, r0)
        });
    }

    #[test]
    fn conv_lincomb_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[3, 3, 2, 2], 0.5, &mut rng);
        check(&[4, 4, 2], move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.conv(x, wv, None, ConvSpec::SAME3);
            let s = g.scale(x, 0.5);
            g.lin_comb(&[(y, 2.0), (s, -1.0)])
        });
    }
}
