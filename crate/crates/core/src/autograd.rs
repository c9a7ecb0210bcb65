//! Reverse-mode autodiff over [`ops`] kernels.
//!
//! A [`Graph`] is an append-only tape: node inputs always have smaller ids
//! than the node itself, so a single reverse scan is a valid topological
//! order for backprop. Forward values are computed eagerly with the exact
//! same kernel functions the inference path calls, which keeps "model under
//! training" and "model being deployed" bit-identical.
//!
//! The op set is closed (an enum): each variant stores its input ids plus the
//! hyperparameters needed to replay the backward kernel.

use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize, groups: usize },
    Up2 { x: NodeId },
    AvgPool2 { x: NodeId },
    Warp { src: NodeId, flow: NodeId },
    Shift { x: NodeId, dx: isize, dy: isize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    ScalarMul { x: NodeId, k: f64 },
    ScalarAdd { x: NodeId },
    LeakyRelu { x: NodeId, alpha: f64 },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Abs { x: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    MaxConst { x: NodeId, k: f64 },
    MeanCh { x: NodeId },
    Concat { a: NodeId, b: NodeId },
    SliceCh { x: NodeId, c0: usize },
    BroadcastCh { p: NodeId },
    MulBcast1 { x: NodeId, m: NodeId },
    LayerNormCh { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    MatmulNT { a: NodeId, b: NodeId },
    MatmulNN { a: NodeId, b: NodeId },
    SoftmaxRows { x: NodeId },
    L2NormRows { x: NodeId, eps: f64 },
    GaussianRate { y: NodeId, mu: NodeId, s: NodeId },
    MeanAll { x: NodeId },
    MulScalarT { x: NodeId, t: NodeId },
    Reshape { x: NodeId },
}

pub struct Graph<S: Scalar> {
    vals: Vec<Tensor<S>>,
    op_of: Vec<Op>,
    needs: Vec<bool>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { vals: Vec::new(), op_of: Vec::new(), needs: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs: bool) -> NodeId {
        self.vals.push(value);
        self.op_of.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        NodeId(self.vals.len() - 1)
    }

    fn needs_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.needs[id.0])
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.vals[id.0]
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn num_nodes(&self) -> usize {
        self.vals.len()
    }

    // Leaves ---------------------------------------------------------------

    /// Constant input: no gradient flows into it.
    pub fn input(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf: gradient is accumulated.
    pub fn param(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    // Ops ------------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> NodeId {
        let v = ops::conv2d(
            &self.vals[x.0],
            &self.vals[w.0],
            b.map(|b| &self.vals[b.0]),
            stride,
            pad,
            groups,
        );
        let mut ins = vec![x, w];
        if let Some(b) = b {
            ins.push(b);
        }
        let needs = self.needs_any(&ins);
        self.push(v, Op::Conv2d { x, w, b, stride, pad, groups }, needs)
    }

    pub fn up2(&mut self, x: NodeId) -> NodeId {
        let v = ops::up2_bilinear(&self.vals[x.0]);
        let needs = self.needs[x.0];
        self.push(v, Op::Up2 { x }, needs)
    }

    pub fn avgpool2(&mut self, x: NodeId) -> NodeId {
        let v = ops::avgpool2(&self.vals[x.0]);
        let needs = self.needs[x.0];
        self.push(v, Op::AvgPool2 { x }, needs)
    }

    pub fn warp(&mut self, src: NodeId, flow: NodeId) -> NodeId {
        let v = ops::warp_bilinear(&self.vals[src.0], &self.vals[flow.0]);
        let needs = self.needs_any(&[src, flow]);
        self.push(v, Op::Warp { src, flow }, needs)
    }

    pub fn shift(&mut self, x: NodeId, dx: isize, dy: isize) -> NodeId {
        let v = ops::shift2d(&self.vals[x.0], dx, dy);
        let needs = self.needs[x.0];
        self.push(v, Op::Shift { x, dx, dy }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.0].zip_map(&self.vals[b.0], |x, y| x + y).expect("add shapes");
        let needs = self.needs_any(&[a, b]);
        self.push(v, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.0].zip_map(&self.vals[b.0], |x, y| x - y).expect("sub shapes");
        let needs = self.needs_any(&[a, b]);
        self.push(v, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.0].zip_map(&self.vals[b.0], |x, y| x * y).expect("mul shapes");
        let needs = self.needs_any(&[a, b]);
        self.push(v, Op::Mul { a, b }, needs)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.0].zip_map(&self.vals[b.0], |x, y| x / y).expect("div shapes");
        let needs = self.needs_any(&[a, b]);
        self.push(v, Op::Div { a, b }, needs)
    }

    pub fn scalar_mul(&mut self, x: NodeId, k: f64) -> NodeId {
        let kk = S::from_f64(k);
        let v = self.vals[x.0].map(|v| v * kk);
        let needs = self.needs[x.0];
        self.push(v, Op::ScalarMul { x, k }, needs)
    }

    pub fn scalar_add(&mut self, x: NodeId, k: f64) -> NodeId {
        let kk = S::from_f64(k);
        let v = self.vals[x.0].map(|v| v + kk);
        let needs = self.needs[x.0];
        self.push(v, Op::ScalarAdd { x }, needs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let a = S::from_f64(alpha);
        let v = self.vals[x.0].map(|v| if v > S::ZERO { v } else { v * a });
        let needs = self.needs[x.0];
        self.push(v, Op::LeakyRelu { x, alpha }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x.0].map(|v| v.sigmoid());
        let needs = self.needs[x.0];
        self.push(v, Op::Sigmoid { x }, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x.0].map(|v| v.tanh());
        let needs = self.needs[x.0];
        self.push(v, Op::Tanh { x }, needs)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x.0].map(|v| v.abs());
        let needs = self.needs[x.0];
        self.push(v, Op::Abs { x }, needs)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x.0].map(|v| v.exp());
        let needs = self.needs[x.0];
        self.push(v, Op::Exp { x }, needs)
    }

    /// Natural log; caller must keep arguments positive (pair with
    /// [`Graph::max_const`]).
    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x.0].map(|v| v.ln());
        let needs = self.needs[x.0];
        self.push(v, Op::Ln { x }, needs)
    }

    pub fn max_const(&mut self, x: NodeId, k: f64) -> NodeId {
        let kk = S::from_f64(k);
        let v = self.vals[x.0].map(|v| v.max_s(kk));
        let needs = self.needs[x.0];
        self.push(v, Op::MaxConst { x, k }, needs)
    }

    pub fn mean_channels(&mut self, x: NodeId) -> NodeId {
        let v = ops::mean_channels(&self.vals[x.0]);
        let needs = self.needs[x.0];
        self.push(v, Op::MeanCh { x }, needs)
    }

    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ops::concat_ch(&self.vals[a.0], &self.vals[b.0]);
        let needs = self.needs_any(&[a, b]);
        self.push(v, Op::Concat { a, b }, needs)
    }

    pub fn slice_ch(&mut self, x: NodeId, c0: usize, c1: usize) -> NodeId {
        let v = ops::slice_ch(&self.vals[x.0], c0, c1);
        let needs = self.needs[x.0];
        self.push(v, Op::SliceCh { x, c0 }, needs)
    }

    pub fn broadcast_ch(&mut self, p: NodeId, n: usize, h: usize, w: usize) -> NodeId {
        let v = ops::broadcast_ch(&self.vals[p.0], n, h, w);
        let needs = self.needs[p.0];
        self.push(v, Op::BroadcastCh { p }, needs)
    }

    pub fn mul_bcast1(&mut self, x: NodeId, m: NodeId) -> NodeId {
        let v = ops::mul_bcast1(&self.vals[x.0], &self.vals[m.0]);
        let needs = self.needs_any(&[x, m]);
        self.push(v, Op::MulBcast1 { x, m }, needs)
    }

    pub fn layer_norm_ch(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let v = ops::layer_norm_ch(
            &self.vals[x.0],
            &self.vals[gamma.0],
            &self.vals[beta.0],
            S::from_f64(eps),
        );
        let needs = self.needs_any(&[x, gamma, beta]);
        self.push(v, Op::LayerNormCh { x, gamma, beta, eps }, needs)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ops::matmul_nt(&self.vals[a.0], &self.vals[b.0]);
        let needs = self.needs_any(&[a, b]);
        self.push(v, Op::MatmulNT { a, b }, needs)
    }

    pub fn matmul_nn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ops::matmul_nn(&self.vals[a.0], &self.vals[b.0]);
        let needs = self.needs_any(&[a, b]);
        self.push(v, Op::MatmulNN { a, b }, needs)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = ops::softmax_rows(&self.vals[x.0]);
        let needs = self.needs[x.0];
        self.push(v, Op::SoftmaxRows { x }, needs)
    }

    pub fn l2norm_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let v = ops::l2norm_rows(&self.vals[x.0], S::from_f64(eps));
        let needs = self.needs[x.0];
        self.push(v, Op::L2NormRows { x, eps }, needs)
    }

    pub fn gaussian_rate(&mut self, y: NodeId, mu: NodeId, s: NodeId) -> NodeId {
        let v = ops::gaussian_rate(&self.vals[y.0], &self.vals[mu.0], &self.vals[s.0]);
        let needs = self.needs_any(&[y, mu, s]);
        self.push(v, Op::GaussianRate { y, mu, s }, needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let m = self.vals[x.0].mean();
        let v = Tensor::from_vec([1, 1, 1, 1], vec![m]).unwrap();
        let needs = self.needs[x.0];
        self.push(v, Op::MeanAll { x }, needs)
    }

    /// Multiply a tensor by a learned scalar `t` of shape `[1,1,1,1]`.
    pub fn mul_scalar_t(&mut self, x: NodeId, t: NodeId) -> NodeId {
        assert_eq!(self.vals[t.0].shape(), [1, 1, 1, 1]);
        let tv = self.vals[t.0].data()[0];
        let v = self.vals[x.0].map(|v| v * tv);
        let needs = self.needs_any(&[x, t]);
        self.push(v, Op::MulScalarT { x, t }, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: [usize; 4]) -> NodeId {
        let v = self.vals[x.0].clone().reshape(shape).expect("reshape numel");
        let needs = self.needs[x.0];
        self.push(v, Op::Reshape { x }, needs)
    }

    // Convenience compositions --------------------------------------------

    /// Mean squared error as a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Mean absolute error as a scalar node.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.mean_all(ad)
    }

    // Backward -------------------------------------------------------------

    fn acc(&mut self, id: NodeId, g: Tensor<S>) {
        if !self.needs[id.0] {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(&g).expect("grad shape"),
            slot @ None => *slot = Some(g),
        }
    }

    /// Backprop from a scalar node. Clears previous gradients.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.vals[loss.0].numel(), 1, "backward needs a scalar loss");
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::full([1, 1, 1, 1], S::ONE));

        for i in (0..self.vals.len()).rev() {
            if !self.needs[i] || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            let op = self.op_of[i].clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad, groups } => {
                    if self.needs[x.0] {
                        let gx = ops::conv2d_bwd_input(
                            &g,
                            &self.vals[w.0],
                            stride,
                            pad,
                            groups,
                            self.vals[x.0].shape(),
                        );
                        self.acc(x, gx);
                    }
                    if self.needs[w.0] {
                        let gw = ops::conv2d_bwd_weight(
                            &g,
                            &self.vals[x.0],
                            stride,
                            pad,
                            groups,
                            self.vals[w.0].shape(),
                        );
                        self.acc(w, gw);
                    }
                    if let Some(b) = b {
                        if self.needs[b.0] {
                            let gb = ops::conv2d_bwd_bias(&g);
                            self.acc(b, gb);
                        }
                    }
                }
                Op::Up2 { x } => {
                    let gx = ops::up2_bilinear_bwd(&g);
                    self.acc(x, gx);
                }
                Op::AvgPool2 { x } => {
                    let gx = ops::avgpool2_bwd(&g);
                    self.acc(x, gx);
                }
                Op::Warp { src, flow } => {
                    let (gs, gf) = ops::warp_bilinear_bwd(&g, &self.vals[src.0], &self.vals[flow.0]);
                    self.acc(src, gs);
                    self.acc(flow, gf);
                }
                Op::Shift { x, dx, dy } => {
                    let gx = ops::shift2d_bwd(&g, dx, dy);
                    self.acc(x, gx);
                }
                Op::Add { a, b } => {
                    self.acc(a, g.clone());
                    self.acc(b, g.clone());
                }
                Op::Sub { a, b } => {
                    self.acc(a, g.clone());
                    let gb = g.map(|v| -v);
                    self.acc(b, gb);
                }
                Op::Mul { a, b } => {
                    let ga = g.zip_map(&self.vals[b.0], |g, b| g * b).unwrap();
                    let gb = g.zip_map(&self.vals[a.0], |g, a| g * a).unwrap();
                    self.acc(a, ga);
                    self.acc(b, gb);
                }
                Op::Div { a, b } => {
                    let ga = g.zip_map(&self.vals[b.0], |g, b| g / b).unwrap();
                    let gb_t = {
                        let av = &self.vals[a.0];
                        let bv = &self.vals[b.0];
                        let mut out = Tensor::zeros(g.shape());
                        for j in 0..g.numel() {
                            let bj = bv.data()[j];
                            out.data_mut()[j] = -g.data()[j] * av.data()[j] / (bj * bj);
                        }
                        out
                    };
                    self.acc(a, ga);
                    self.acc(b, gb_t);
                }
                Op::ScalarMul { x, k } => {
                    let kk = S::from_f64(k);
                    self.acc(x, g.map(|v| v * kk));
                }
                Op::ScalarAdd { x } => {
                    self.acc(x, g.clone());
                }
                Op::LeakyRelu { x, alpha } => {
                    let a = S::from_f64(alpha);
                    let gx = g
                        .zip_map(&self.vals[x.0], |g, x| if x > S::ZERO { g } else { g * a })
                        .unwrap();
                    self.acc(x, gx);
                }
                Op::Sigmoid { x } => {
                    let gx = g.zip_map(&self.vals[i], |g, y| g * y * (S::ONE - y)).unwrap();
                    self.acc(x, gx);
                }
                Op::Tanh { x } => {
                    let gx = g.zip_map(&self.vals[i], |g, y| g * (S::ONE - y * y)).unwrap();
                    self.acc(x, gx);
                }
                Op::Abs { x } => {
                    let gx = g
                        .zip_map(&self.vals[x.0], |g, x| {
                            if x > S::ZERO {
                                g
                            } else if x < S::ZERO {
                                -g
                            } else {
                                S::ZERO
                            }
                        })
                        .unwrap();
                    self.acc(x, gx);
                }
                Op::Exp { x } => {
                    let gx = g.zip_map(&self.vals[i], |g, y| g * y).unwrap();
                    self.acc(x, gx);
                }
                Op::Ln { x } => {
                    let gx = g.zip_map(&self.vals[x.0], |g, x| g / x).unwrap();
                    self.acc(x, gx);
                }
                Op::MaxConst { x, k } => {
                    let kk = S::from_f64(k);
                    let gx = g
                        .zip_map(&self.vals[x.0], |g, x| if x >= kk { g } else { S::ZERO })
                        .unwrap();
                    self.acc(x, gx);
                }
                Op::MeanCh { x } => {
                    let c = self.vals[x.0].c();
                    let gx = ops::mean_channels_bwd(&g, c);
                    self.acc(x, gx);
                }
                Op::Concat { a, b } => {
                    let ca = self.vals[a.0].c();
                    let cb = self.vals[b.0].c();
                    let ga = ops::slice_ch(&g, 0, ca);
                    let gb = ops::slice_ch(&g, ca, ca + cb);
                    self.acc(a, ga);
                    self.acc(b, gb);
                }
                Op::SliceCh { x, c0 } => {
                    let gx = ops::slice_ch_bwd(&g, c0, self.vals[x.0].c());
                    self.acc(x, gx);
                }
                Op::BroadcastCh { p, .. } => {
                    let gp = ops::broadcast_ch_bwd(&g);
                    self.acc(p, gp);
                }
                Op::MulBcast1 { x, m } => {
                    let (gx, gm) = ops::mul_bcast1_bwd(&g, &self.vals[x.0], &self.vals[m.0]);
                    self.acc(x, gx);
                    self.acc(m, gm);
                }
                Op::LayerNormCh { x, gamma, beta, eps } => {
                    let (gx, gg, gb) = ops::layer_norm_ch_bwd(
                        &g,
                        &self.vals[x.0],
                        &self.vals[gamma.0],
                        S::from_f64(eps),
                    );
                    self.acc(x, gx);
                    self.acc(gamma, gg);
                    self.acc(beta, gb);
                }
                Op::MatmulNT { a, b } => {
                    // y = a b^T: ga = g b, gb = g^T a.
                    let ga = ops::matmul_nn(&g, &self.vals[b.0]);
                    let gb = ops::matmul_tn(&g, &self.vals[a.0]);
                    self.acc(a, ga);
                    self.acc(b, gb);
                }
                Op::MatmulNN { a, b } => {
                    // y = a b: ga = g b^T, gb = a^T g.
                    let ga = ops::matmul_nt(&g, &self.vals[b.0]);
                    let gb = ops::matmul_tn(&self.vals[a.0], &g);
                    self.acc(a, ga);
                    self.acc(b, gb);
                }
                Op::SoftmaxRows { x } => {
                    let gx = ops::softmax_rows_bwd(&g, &self.vals[i]);
                    self.acc(x, gx);
                }
                Op::L2NormRows { x, eps } => {
                    let gx = ops::l2norm_rows_bwd(&g, &self.vals[x.0], S::from_f64(eps));
                    self.acc(x, gx);
                }
                Op::GaussianRate { y, mu, s } => {
                    let (gy, gmu, gs) =
                        ops::gaussian_rate_bwd(&g, &self.vals[y.0], &self.vals[mu.0], &self.vals[s.0]);
                    self.acc(y, gy);
                    self.acc(mu, gmu);
                    self.acc(s, gs);
                }
                Op::MeanAll { x } => {
                    let n = self.vals[x.0].numel();
                    let gv = g.data()[0] / S::from_usize(n);
                    self.acc(x, Tensor::full(self.vals[x.0].shape(), gv));
                }
                Op::MulScalarT { x, t } => {
                    let tv = self.vals[t.0].data()[0];
                    self.acc(x, g.map(|v| v * tv));
                    if self.needs[t.0] {
                        let mut dot = S::ZERO;
                        for (gv, xv) in g.data().iter().zip(self.vals[x.0].data()) {
                            dot += *gv * *xv;
                        }
                        self.acc(t, Tensor::full([1, 1, 1, 1], dot));
                    }
                }
                Op::Reshape { x } => {
                    let gx = g.clone().reshape(self.vals[x.0].shape()).unwrap();
                    self.acc(x, gx);
                }
            }
            self.grads[i] = Some(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Checks d(loss)/d(param) for every element of the parameter tensor.
    /// `build` must create the whole graph from the supplied param node.
    fn check(build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId, p0: &Tensor<f64>, tol: f64) {
        let mut g = Graph::new();
        let p = g.param(p0.clone());
        let loss = build(&mut g, p);
        assert_eq!(g.value(loss).numel(), 1);
        g.backward(loss);
        let analytic = g.grad(p).expect("param grad").clone();

        let eps = 1e-5;
        for i in 0..p0.numel() {
            let eval = |v: f64| {
                let mut t = p0.clone();
                t.data_mut()[i] = v;
                let mut g2 = Graph::new();
                let p2 = g2.param(t);
                let l2 = build(&mut g2, p2);
                g2.value(l2).data()[0]
            };
            let x = p0.data()[i];
            let fd = (eval(x + eps) - eval(x - eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = fd.abs().max(a.abs()).max(1e-6);
            let rel = (fd - a).abs() / denom;
            assert!(rel < tol, "element {i}: fd {fd:e} vs analytic {a:e} (rel {rel:e})");
        }
    }

    fn seeded(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        // Cheap deterministic pseudo-random fill, enough for FD probes.
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect();
        Tensor::from_f64(shape, &vals).unwrap()
    }

    #[test]
    fn conv_chain_gradients() {
        let x = seeded([1, 2, 6, 6], 1);
        let w0 = seeded([3, 2, 3, 3], 2);
        check(
            move |g, p| {
                let x = g.input(x.clone());
                let y = g.conv2d(x, p, None, 1, 1, 1);
                let y = g.leaky_relu(y, 0.1);
                let y = g.avgpool2(y);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            &w0,
            1e-6,
        );
    }

    #[test]
    fn conv_input_and_bias_gradients() {
        let w = seeded([2, 2, 3, 3], 3);
        let x0 = seeded([1, 2, 4, 4], 4);
        check(
            move |g, p| {
                let w = g.input(w.clone());
                let y = g.conv2d(p, w, None, 2, 1, 1);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            &x0,
            1e-6,
        );
        let b0 = seeded([1, 2, 1, 1], 5);
        let w2 = seeded([2, 3, 3, 3], 6);
        let x2 = seeded([1, 3, 4, 4], 7);
        check(
            move |g, p| {
                let x = g.input(x2.clone());
                let w = g.input(w2.clone());
                let y = g.conv2d(x, w, Some(p), 1, 1, 1);
                let t = g.tanh(y);
                let sq = g.mul(t, t);
                g.mean_all(sq)
            },
            &b0,
            1e-6,
        );
    }

    #[test]
    fn warp_flow_gradients() {
        let src = seeded([1, 2, 5, 5], 8);
        let f0 = seeded([1, 2, 5, 5], 9); // fractional flows, no integer hits
        check(
            move |g, p| {
                let s = g.input(src.clone());
                let wped = g.warp(s, p);
                let sq = g.mul(wped, wped);
                g.mean_all(sq)
            },
            &f0,
            1e-5,
        );
    }

    #[test]
    fn attention_block_gradients() {
        // l2norm -> nt matmul -> softmax -> nn matmul, grad wrt Q.
        let k = seeded([1, 1, 4, 6], 10);
        let v = seeded([1, 1, 4, 6], 11);
        let q0 = seeded([1, 1, 4, 6], 12);
        check(
            move |g, p| {
                let kk = g.input(k.clone());
                let vv = g.input(v.clone());
                let qn = g.l2norm_rows(p, 1e-8);
                let kn = g.l2norm_rows(kk, 1e-8);
                let s = g.matmul_nt(qn, kn);
                let s = g.scalar_mul(s, 3.0);
                let a = g.softmax_rows(s);
                let o = g.matmul_nn(a, vv);
                let sq = g.mul(o, o);
                g.mean_all(sq)
            },
            &q0,
            1e-5,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let gamma = seeded([1, 3, 1, 1], 13);
        let beta = seeded([1, 3, 1, 1], 14);
        let x0 = seeded([1, 3, 3, 3], 15);
        check(
            move |g, p| {
                let ga = g.input(gamma.clone());
                let be = g.input(beta.clone());
                let y = g.layer_norm_ch(p, ga, be, 1e-6);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            &x0,
            1e-5,
        );
        let x1 = seeded([1, 3, 2, 2], 16);
        let beta2 = seeded([1, 3, 1, 1], 17);
        check(
            move |g, p| {
                let x = g.input(x1.clone());
                let be = g.input(beta2.clone());
                let y = g.layer_norm_ch(x, p, be, 1e-6);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            &seeded([1, 3, 1, 1], 18),
            1e-6,
        );
    }

    #[test]
    fn rate_op_gradients_through_graph() {
        let y = seeded([1, 2, 3, 3], 19);
        let s = seeded([1, 2, 3, 3], 20);
        check(
            move |g, p| {
                let yv = g.input(y.clone());
                let sv = g.input(s.clone());
                let bits = g.gaussian_rate(yv, p, sv);
                g.mean_all(bits)
            },
            &seeded([1, 2, 3, 3], 21),
            1e-5,
        );
    }

    #[test]
    fn broadcast_and_mask_gradients() {
        let x = seeded([2, 3, 4, 4], 22);
        check(
            move |g, p| {
                let x = g.input(x.clone());
                let b = g.broadcast_ch(p, 2, 4, 4);
                let y = g.mul(x, b);
                let m = g.mean_channels(y);
                let sg = g.sigmoid(m);
                let z = g.mul_bcast1(y, sg);
                let sq = g.mul(z, z);
                g.mean_all(sq)
            },
            &seeded([1, 3, 1, 1], 23),
            1e-5,
        );
    }

    #[test]
    fn composite_elementwise_gradients() {
        // exp/ln/div/max/shift/up2/concat/slice in one chain.
        let a = seeded([1, 2, 4, 4], 24);
        check(
            move |g, p| {
                let a = g.input(a.clone());
                let e = g.exp(p);
                let q = g.div(e, a);
                let q = g.abs(q);
                let q = g.max_const(q, 0.05);
                let l = g.ln(q);
                let sh = g.shift(l, 1, -1);
                let u = g.up2(sh);
                let c = g.concat_ch(u, u);
                let s = g.slice_ch(c, 1, 3);
                let sq = g.mul(s, s);
                g.mean_all(sq)
            },
            &seeded([1, 2, 4, 4], 25),
            1e-5,
        );
    }

    #[test]
    fn grad_accumulates_across_reuse() {
        // p used twice: gradient must be the sum of both paths.
        let p0: Tensor<f64> = Tensor::from_f64([1, 1, 1, 1], &[2.0]).unwrap();
        let mut g = Graph::new();
        let p = g.param(p0);
        let sq = g.mul(p, p); // p^2
        let tr = g.mul(sq, p); // p^3
        g.backward(tr);
        // d(p^3)/dp = 3 p^2 = 12.
        assert!((g.grad(p).unwrap().data()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn no_grad_for_inputs() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(Tensor::from_f64([1, 1, 1, 1], &[1.0]).unwrap());
        let p = g.param(Tensor::from_f64([1, 1, 1, 1], &[3.0]).unwrap());
        let y = g.mul(a, p);
        g.backward(y);
        assert!(g.grad(a).is_none());
        assert!(g.grad(p).is_some());
    }

    #[test]
    fn forward_matches_direct_kernel_call() {
        // The tape must not perturb values: graph conv == direct ops conv,
        // bit for bit.
        let x = seeded([1, 3, 8, 8], 26);
        let w = seeded([4, 3, 3, 3], 27);
        let b = seeded([1, 4, 1, 1], 28);
        let direct = crate::ops::conv2d(&x, &w, Some(&b), 2, 1, 1);
        let mut g = Graph::new();
        let xi = g.input(x);
        let wi = g.param(w);
        let bi = g.param(b);
        let y = g.conv2d(xi, wi, Some(bi), 2, 1, 1);
        assert_eq!(g.value(y).data(), direct.data());
    }
}
