//! Network plumbing: parameter store, initialization, the [`Ctx`] execution
//! trait, and Adam.
//!
//! Model forwards are written once as generic functions over [`Ctx`]. The
//! [`InferCtx`] implementation executes kernels eagerly on plain tensors; the
//! [`TrainCtx`] implementation records the same kernels on an autograd
//! [`Graph`]. Both paths call identical code in [`crate::ops`], so a model
//! produces bit-identical outputs whichever way it is run.

use std::collections::HashMap;

use rand_chacha::rand_core::RngCore;

use crate::autograd::{Graph, NodeId};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Parameters

/// Ordered name -> tensor map. Iteration order is insertion order, which
/// fixes the checkpoint layout and makes optimizer sweeps deterministic.
#[derive(Clone)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    map: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), map: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) {
        if !self.map.contains_key(name) {
            self.names.push(name.to_string());
        }
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(move |n| (n.as_str(), &self.map[n]))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// Merge `other` under a name prefix (`prefix.name`).
    pub fn adopt(&mut self, prefix: &str, other: &ParamStore<S>) {
        for (n, t) in other.iter() {
            self.insert(&format!("{prefix}.{n}"), t.clone());
        }
    }

    /// Split out the parameters under `prefix.`, stripping the prefix.
    pub fn extract(&self, prefix: &str) -> ParamStore<S> {
        let mut out = ParamStore::new();
        let pat = format!("{prefix}.");
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(&pat) {
                out.insert(rest, t.clone());
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Initialization

/// Standard normal sample by the Marsaglia polar method. Uses only sqrt and
/// the deterministic ln, so initialization is reproducible everywhere.
fn randn(rng: &mut impl RngCore) -> f64 {
    loop {
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        let v = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * crate::scalar::det::ln(s) / s).sqrt();
        }
    }
}

/// He-style init scaled by fan-in for a conv weight `[cout, cin, kh, kw]`.
pub fn init_conv_weight<S: Scalar>(
    shape: [usize; 4],
    rng: &mut impl RngCore,
) -> Tensor<S> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let std = (2.0 / fan_in).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_f64(randn(rng) * std)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Insert `name.w` / `name.b` for a conv layer.
pub fn init_conv<S: Scalar>(
    ps: &mut ParamStore<S>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut impl RngCore,
) {
    ps.insert(&format!("{name}.w"), init_conv_weight([cout, cin, k, k], rng));
    ps.insert(&format!("{name}.b"), Tensor::zeros([1, cout, 1, 1]));
}

/// Insert LayerNorm gamma/beta for `c` channels.
pub fn init_layer_norm<S: Scalar>(ps: &mut ParamStore<S>, name: &str, c: usize) {
    ps.insert(&format!("{name}.g"), Tensor::full([1, c, 1, 1], S::ONE));
    ps.insert(&format!("{name}.b"), Tensor::zeros([1, c, 1, 1]));
}

// ---------------------------------------------------------------------------
// Execution contexts

/// Handle-based execution surface shared by inference and training.
///
/// `bind` resolves a named parameter; calling it twice with one name must
/// return the same handle (that is what makes weight sharing work).
pub trait Ctx<S: Scalar> {
    type H: Copy;

    fn input(&mut self, t: Tensor<S>) -> Self::H;
    fn bind(&mut self, name: &str) -> Self::H;
    fn value(&self, h: Self::H) -> &Tensor<S>;
    fn shape(&self, h: Self::H) -> [usize; 4];

    fn conv2d(
        &mut self,
        x: Self::H,
        w: Self::H,
        b: Option<Self::H>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self::H;
    fn up2(&mut self, x: Self::H) -> Self::H;
    fn avgpool2(&mut self, x: Self::H) -> Self::H;
    fn warp(&mut self, src: Self::H, flow: Self::H) -> Self::H;
    fn shift(&mut self, x: Self::H, dx: isize, dy: isize) -> Self::H;
    fn add(&mut self, a: Self::H, b: Self::H) -> Self::H;
    fn sub(&mut self, a: Self::H, b: Self::H) -> Self::H;
    fn mul(&mut self, a: Self::H, b: Self::H) -> Self::H;
    fn div(&mut self, a: Self::H, b: Self::H) -> Self::H;
    fn scalar_mul(&mut self, x: Self::H, k: f64) -> Self::H;
    fn scalar_add(&mut self, x: Self::H, k: f64) -> Self::H;
    fn leaky_relu(&mut self, x: Self::H, alpha: f64) -> Self::H;
    fn sigmoid(&mut self, x: Self::H) -> Self::H;
    fn tanh(&mut self, x: Self::H) -> Self::H;
    fn abs(&mut self, x: Self::H) -> Self::H;
    fn exp(&mut self, x: Self::H) -> Self::H;
    fn ln(&mut self, x: Self::H) -> Self::H;
    fn max_const(&mut self, x: Self::H, k: f64) -> Self::H;
    fn mean_channels(&mut self, x: Self::H) -> Self::H;
    fn concat_ch(&mut self, a: Self::H, b: Self::H) -> Self::H;
    fn slice_ch(&mut self, x: Self::H, c0: usize, c1: usize) -> Self::H;
    fn broadcast_ch(&mut self, p: Self::H, n: usize, h: usize, w: usize) -> Self::H;
    fn mul_bcast1(&mut self, x: Self::H, m: Self::H) -> Self::H;
    fn layer_norm_ch(&mut self, x: Self::H, gamma: Self::H, beta: Self::H, eps: f64) -> Self::H;
    fn matmul_nt(&mut self, a: Self::H, b: Self::H) -> Self::H;
    fn matmul_nn(&mut self, a: Self::H, b: Self::H) -> Self::H;
    fn softmax_rows(&mut self, x: Self::H) -> Self::H;
    fn l2norm_rows(&mut self, x: Self::H, eps: f64) -> Self::H;
    fn gaussian_rate(&mut self, y: Self::H, mu: Self::H, s: Self::H) -> Self::H;
    fn mean_all(&mut self, x: Self::H) -> Self::H;
    fn mul_scalar_t(&mut self, x: Self::H, t: Self::H) -> Self::H;
    fn reshape(&mut self, x: Self::H, shape: [usize; 4]) -> Self::H;
}

/// Eager execution on plain tensors (the deployment path).
pub struct InferCtx<'p, S: Scalar> {
    ps: &'p ParamStore<S>,
    arena: Vec<Tensor<S>>,
    bound: HashMap<String, usize>,
}

impl<'p, S: Scalar> InferCtx<'p, S> {
    pub fn new(ps: &'p ParamStore<S>) -> Self {
        InferCtx { ps, arena: Vec::new(), bound: HashMap::new() }
    }

    pub fn take(&mut self, h: usize) -> Tensor<S> {
        std::mem::replace(&mut self.arena[h], Tensor::zeros([1, 1, 1, 1]))
    }

    fn push(&mut self, t: Tensor<S>) -> usize {
        self.arena.push(t);
        self.arena.len() - 1
    }
}

impl<'p, S: Scalar> Ctx<S> for InferCtx<'p, S> {
    type H = usize;

    fn input(&mut self, t: Tensor<S>) -> usize {
        self.push(t)
    }

    fn bind(&mut self, name: &str) -> usize {
        if let Some(&h) = self.bound.get(name) {
            return h;
        }
        let h = self.push(self.ps.get(name).clone());
        self.bound.insert(name.to_string(), h);
        h
    }

    fn value(&self, h: usize) -> &Tensor<S> {
        &self.arena[h]
    }

    fn shape(&self, h: usize) -> [usize; 4] {
        self.arena[h].shape()
    }

    fn conv2d(
        &mut self,
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> usize {
        let v = ops::conv2d(
            &self.arena[x],
            &self.arena[w],
            b.map(|b| &self.arena[b]),
            stride,
            pad,
            groups,
        );
        self.push(v)
    }

    fn up2(&mut self, x: usize) -> usize {
        let v = ops::up2_bilinear(&self.arena[x]);
        self.push(v)
    }
    fn avgpool2(&mut self, x: usize) -> usize {
        let v = ops::avgpool2(&self.arena[x]);
        self.push(v)
    }
    fn warp(&mut self, src: usize, flow: usize) -> usize {
        let v = ops::warp_bilinear(&self.arena[src], &self.arena[flow]);
        self.push(v)
    }
    fn shift(&mut self, x: usize, dx: isize, dy: isize) -> usize {
        let v = ops::shift2d(&self.arena[x], dx, dy);
        self.push(v)
    }
    fn add(&mut self, a: usize, b: usize) -> usize {
        let v = self.arena[a].zip_map(&self.arena[b], |x, y| x + y).expect("add");
        self.push(v)
    }
    fn sub(&mut self, a: usize, b: usize) -> usize {
        let v = self.arena[a].zip_map(&self.arena[b], |x, y| x - y).expect("sub");
        self.push(v)
    }
    fn mul(&mut self, a: usize, b: usize) -> usize {
        let v = self.arena[a].zip_map(&self.arena[b], |x, y| x * y).expect("mul");
        self.push(v)
    }
    fn div(&mut self, a: usize, b: usize) -> usize {
        let v = self.arena[a].zip_map(&self.arena[b], |x, y| x / y).expect("div");
        self.push(v)
    }
    fn scalar_mul(&mut self, x: usize, k: f64) -> usize {
        let kk = S::from_f64(k);
        let v = self.arena[x].map(|v| v * kk);
        self.push(v)
    }
    fn scalar_add(&mut self, x: usize, k: f64) -> usize {
        let kk = S::from_f64(k);
        let v = self.arena[x].map(|v| v + kk);
        self.push(v)
    }
    fn leaky_relu(&mut self, x: usize, alpha: f64) -> usize {
        let a = S::from_f64(alpha);
        let v = self.arena[x].map(|v| if v > S::ZERO { v } else { v * a });
        self.push(v)
    }
    fn sigmoid(&mut self, x: usize) -> usize {
        let v = self.arena[x].map(|v| v.sigmoid());
        self.push(v)
    }
    fn tanh(&mut self, x: usize) -> usize {
        let v = self.arena[x].map(|v| v.tanh());
        self.push(v)
    }
    fn abs(&mut self, x: usize) -> usize {
        let v = self.arena[x].map(|v| v.abs());
        self.push(v)
    }
    fn exp(&mut self, x: usize) -> usize {
        let v = self.arena[x].map(|v| v.exp());
        self.push(v)
    }
    fn ln(&mut self, x: usize) -> usize {
        let v = self.arena[x].map(|v| v.ln());
        self.push(v)
    }
    fn max_const(&mut self, x: usize, k: f64) -> usize {
        let kk = S::from_f64(k);
        let v = self.arena[x].map(|v| v.max_s(kk));
        self.push(v)
    }
    fn mean_channels(&mut self, x: usize) -> usize {
        let v = ops::mean_channels(&self.arena[x]);
        self.push(v)
    }
    fn concat_ch(&mut self, a: usize, b: usize) -> usize {
        let v = ops::concat_ch(&self.arena[a], &self.arena[b]);
        self.push(v)
    }
    fn slice_ch(&mut self, x: usize, c0: usize, c1: usize) -> usize {
        let v = ops::slice_ch(&self.arena[x], c0, c1);
        self.push(v)
    }
    fn broadcast_ch(&mut self, p: usize, n: usize, h: usize, w: usize) -> usize {
        let v = ops::broadcast_ch(&self.arena[p], n, h, w);
        self.push(v)
    }
    fn mul_bcast1(&mut self, x: usize, m: usize) -> usize {
        let v = ops::mul_bcast1(&self.arena[x], &self.arena[m]);
        self.push(v)
    }
    fn layer_norm_ch(&mut self, x: usize, gamma: usize, beta: usize, eps: f64) -> usize {
        let v = ops::layer_norm_ch(
            &self.arena[x],
            &self.arena[gamma],
            &self.arena[beta],
            S::from_f64(eps),
        );
        self.push(v)
    }
    fn matmul_nt(&mut self, a: usize, b: usize) -> usize {
        let v = ops::matmul_nt(&self.arena[a], &self.arena[b]);
        self.push(v)
    }
    fn matmul_nn(&mut self, a: usize, b: usize) -> usize {
        let v = ops::matmul_nn(&self.arena[a], &self.arena[b]);
        self.push(v)
    }
    fn softmax_rows(&mut self, x: usize) -> usize {
        let v = ops::softmax_rows(&self.arena[x]);
        self.push(v)
    }
    fn l2norm_rows(&mut self, x: usize, eps: f64) -> usize {
        let v = ops::l2norm_rows(&self.arena[x], S::from_f64(eps));
        self.push(v)
    }
    fn gaussian_rate(&mut self, y: usize, mu: usize, s: usize) -> usize {
        let v = ops::gaussian_rate(&self.arena[y], &self.arena[mu], &self.arena[s]);
        self.push(v)
    }
    fn mean_all(&mut self, x: usize) -> usize {
        let m = self.arena[x].mean();
        self.push(Tensor::from_vec([1, 1, 1, 1], vec![m]).unwrap())
    }
    fn mul_scalar_t(&mut self, x: usize, t: usize) -> usize {
        let tv = self.arena[t].data()[0];
        let v = self.arena[x].map(|v| v * tv);
        self.push(v)
    }
    fn reshape(&mut self, x: usize, shape: [usize; 4]) -> usize {
        let v = self.arena[x].clone().reshape(shape).expect("reshape");
        self.push(v)
    }
}

/// Tape-backed execution (the training path). Parameters bound through this
/// context become gradient leaves unless their name starts with a frozen
/// prefix.
pub struct TrainCtx<'g, 'p, S: Scalar> {
    pub graph: &'g mut Graph<S>,
    ps: &'p ParamStore<S>,
    bound: HashMap<String, NodeId>,
    frozen_prefixes: Vec<String>,
}

impl<'g, 'p, S: Scalar> TrainCtx<'g, 'p, S> {
    pub fn new(graph: &'g mut Graph<S>, ps: &'p ParamStore<S>) -> Self {
        TrainCtx { graph, ps, bound: HashMap::new(), frozen_prefixes: Vec::new() }
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen_prefixes.push(prefix.to_string());
    }

    /// Node ids of every non-frozen bound parameter, for gradient readout.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.bound.iter().map(|(n, &id)| (n.as_str(), id))
    }
}

impl<'g, 'p, S: Scalar> Ctx<S> for TrainCtx<'g, 'p, S> {
    type H = NodeId;

    fn input(&mut self, t: Tensor<S>) -> NodeId {
        self.graph.input(t)
    }

    fn bind(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let t = self.ps.get(name).clone();
        let frozen = self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let id = if frozen { self.graph.input(t) } else { self.graph.param(t) };
        self.bound.insert(name.to_string(), id);
        id
    }

    fn value(&self, h: NodeId) -> &Tensor<S> {
        self.graph.value(h)
    }

    fn shape(&self, h: NodeId) -> [usize; 4] {
        self.graph.value(h).shape()
    }

    fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> NodeId {
        self.graph.conv2d(x, w, b, stride, pad, groups)
    }
    fn up2(&mut self, x: NodeId) -> NodeId {
        self.graph.up2(x)
    }
    fn avgpool2(&mut self, x: NodeId) -> NodeId {
        self.graph.avgpool2(x)
    }
    fn warp(&mut self, src: NodeId, flow: NodeId) -> NodeId {
        self.graph.warp(src, flow)
    }
    fn shift(&mut self, x: NodeId, dx: isize, dy: isize) -> NodeId {
        self.graph.shift(x, dx, dy)
    }
    fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.graph.add(a, b)
    }
    fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.graph.sub(a, b)
    }
    fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.graph.mul(a, b)
    }
    fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.graph.div(a, b)
    }
    fn scalar_mul(&mut self, x: NodeId, k: f64) -> NodeId {
        self.graph.scalar_mul(x, k)
    }
    fn scalar_add(&mut self, x: NodeId, k: f64) -> NodeId {
        self.graph.scalar_add(x, k)
    }
    fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        self.graph.leaky_relu(x, alpha)
    }
    fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.graph.sigmoid(x)
    }
    fn tanh(&mut self, x: NodeId) -> NodeId {
        self.graph.tanh(x)
    }
    fn abs(&mut self, x: NodeId) -> NodeId {
        self.graph.abs(x)
    }
    fn exp(&mut self, x: NodeId) -> NodeId {
        self.graph.exp(x)
    }
    fn ln(&mut self, x: NodeId) -> NodeId {
        self.graph.ln(x)
    }
    fn max_const(&mut self, x: NodeId, k: f64) -> NodeId {
        self.graph.max_const(x, k)
    }
    fn mean_channels(&mut self, x: NodeId) -> NodeId {
        self.graph.mean_channels(x)
    }
    fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.graph.concat_ch(a, b)
    }
    fn slice_ch(&mut self, x: NodeId, c0: usize, c1: usize) -> NodeId {
        self.graph.slice_ch(x, c0, c1)
    }
    fn broadcast_ch(&mut self, p: NodeId, n: usize, h: usize, w: usize) -> NodeId {
        self.graph.broadcast_ch(p, n, h, w)
    }
    fn mul_bcast1(&mut self, x: NodeId, m: NodeId) -> NodeId {
        self.graph.mul_bcast1(x, m)
    }
    fn layer_norm_ch(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        self.graph.layer_norm_ch(x, gamma, beta, eps)
    }
    fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.graph.matmul_nt(a, b)
    }
    fn matmul_nn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.graph.matmul_nn(a, b)
    }
    fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        self.graph.softmax_rows(x)
    }
    fn l2norm_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.graph.l2norm_rows(x, eps)
    }
    fn gaussian_rate(&mut self, y: NodeId, mu: NodeId, s: NodeId) -> NodeId {
        self.graph.gaussian_rate(y, mu, s)
    }
    fn mean_all(&mut self, x: NodeId) -> NodeId {
        self.graph.mean_all(x)
    }
    fn mul_scalar_t(&mut self, x: NodeId, t: NodeId) -> NodeId {
        self.graph.mul_scalar_t(x, t)
    }
    fn reshape(&mut self, x: NodeId, shape: [usize; 4]) -> NodeId {
        self.graph.reshape(x, shape)
    }
}

// ---------------------------------------------------------------------------
// Layer helpers

/// Convolution through bound parameters `name.w` / `name.b`.
pub fn conv<S: Scalar, C: Ctx<S>>(
    ctx: &mut C,
    name: &str,
    x: C::H,
    stride: usize,
    pad: usize,
) -> C::H {
    let w = ctx.bind(&format!("{name}.w"));
    let b = ctx.bind(&format!("{name}.b"));
    ctx.conv2d(x, w, Some(b), stride, pad, 1)
}

/// Conv + LeakyReLU(0.1).
pub fn conv_act<S: Scalar, C: Ctx<S>>(
    ctx: &mut C,
    name: &str,
    x: C::H,
    stride: usize,
    pad: usize,
) -> C::H {
    let y = conv(ctx, name, x, stride, pad);
    ctx.leaky_relu(y, 0.1)
}

/// LayerNorm through `name.g` / `name.b`.
pub fn layer_norm<S: Scalar, C: Ctx<S>>(ctx: &mut C, name: &str, x: C::H) -> C::H {
    let g = ctx.bind(&format!("{name}.g"));
    let b = ctx.bind(&format!("{name}.b"));
    ctx.layer_norm_ch(x, g, b, 1e-6)
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction and optional global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    t: u64,
    m: HashMap<String, Tensor<f32>>,
    v: HashMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update from named gradients. Missing gradients leave the
    /// parameter untouched (frozen submodules).
    pub fn step(&mut self, ps: &mut ParamStore<f32>, grads: &HashMap<String, Tensor<f32>>) {
        self.t += 1;
        let scale = match self.clip_norm {
            Some(maxn) => {
                let mut ss = 0.0f64;
                for g in grads.values() {
                    for &v in g.data() {
                        ss += (v as f64) * (v as f64);
                    }
                }
                let norm = ss.sqrt();
                if norm > maxn {
                    maxn / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        // Deterministic order: parameter store order, not HashMap order.
        for name in ps.names().to_vec() {
            let Some(g) = grads.get(&name) else { continue };
            let p = ps.get_mut(&name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for i in 0..p.numel() {
                let gi = g.data()[i] as f64 * scale;
                let mi = self.beta1 * m.data()[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let upd = self.lr * mhat / (vhat.sqrt() + self.eps);
                p.data_mut()[i] = (p.data()[i] as f64 - upd) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_store(seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        init_conv(&mut ps, "c0", 4, 3, 3, &mut rng);
        init_conv(&mut ps, "c1", 3, 4, 3, &mut rng);
        init_layer_norm(&mut ps, "n0", 4);
        ps
    }

    fn small_forward<S: Scalar, C: Ctx<S>>(ctx: &mut C, x: Tensor<S>) -> C::H {
        let x = ctx.input(x);
        let h = conv_act(ctx, "c0", x, 1, 1);
        let h = layer_norm(ctx, "n0", h);
        conv(ctx, "c1", h, 1, 1)
    }

    #[test]
    fn infer_and_train_paths_are_bit_identical() {
        let ps = tiny_store(7);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = init_conv_weight::<f32>([1, 3, 8, 8], &mut rng);

        let mut ic = InferCtx::new(&ps);
        let hi = small_forward(&mut ic, x.clone());
        let infer_out = ic.value(hi).clone();

        let mut g = Graph::new();
        let mut tc = TrainCtx::new(&mut g, &ps);
        let ht = small_forward(&mut tc, x);
        let train_out = tc.value(ht).clone();

        assert_eq!(infer_out.data(), train_out.data(), "paths diverged");
    }

    #[test]
    fn init_is_deterministic() {
        let a = tiny_store(3);
        let b = tiny_store(3);
        for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        let c = tiny_store(4);
        assert_ne!(a.get("c0.w").data(), c.get("c0.w").data());
    }

    #[test]
    fn randn_moments_reasonable() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let n = 20000;
        let mut sum = 0.0;
        let mut ss = 0.0;
        for _ in 0..n {
            let v = randn(&mut rng);
            sum += v;
            ss += v * v;
        }
        let mean = sum / n as f64;
        let var = ss / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn adam_fits_a_line() {
        // Single weight w, loss (w*x - 2x)^2 averaged over x in {1,2}: the
        // minimum is w = 2.
        let mut ps = ParamStore::<f32>::new();
        ps.insert("w", Tensor::zeros([1, 1, 1, 1]));
        let mut opt = Adam::new(0.05);
        for _ in 0..400 {
            let w = ps.get("w").data()[0] as f64;
            // d/dw mean_x (w x - 2 x)^2 = mean_x 2 (w - 2) x^2
            let grad = (2.0 * (w - 2.0) * 1.0 + 2.0 * (w - 2.0) * 4.0) / 2.0;
            let mut gs = HashMap::new();
            gs.insert(
                "w".to_string(),
                Tensor::from_f64([1, 1, 1, 1], &[grad]).unwrap(),
            );
            opt.step(&mut ps, &gs);
        }
        let w = ps.get("w").data()[0];
        assert!((w - 2.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn frozen_prefix_blocks_gradients() {
        let ps = tiny_store(11);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = init_conv_weight::<f32>([1, 3, 8, 8], &mut rng);
        let mut g = Graph::new();
        let mut tc = TrainCtx::new(&mut g, &ps);
        tc.freeze_prefix("c0.");
        let h = small_forward(&mut tc, x);
        let sq = tc.graph.mul(h, h);
        let loss = tc.graph.mean_all(sq);
        let params: Vec<(String, crate::autograd::NodeId)> =
            tc.bound_params().map(|(n, i)| (n.to_string(), i)).collect();
        tc.graph.backward(loss);
        for (name, id) in params {
            if name.starts_with("c0.") {
                assert!(g.grad(id).is_none(), "{name} should be frozen");
            } else {
                assert!(g.grad(id).is_some(), "{name} should have a gradient");
            }
        }
    }

    #[test]
    fn store_adopt_extract_round_trip() {
        let a = tiny_store(1);
        let mut top = ParamStore::<f32>::new();
        top.adopt("sub", &a);
        assert!(top.contains("sub.c0.w"));
        let back = top.extract("sub");
        assert_eq!(back.names(), a.names());
        assert_eq!(back.get("c1.b").data(), a.get("c1.b").data());
    }
}
