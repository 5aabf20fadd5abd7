use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, Activation, AttnArgs, AttnGeom, ConvGeom};
use super::{numel, ParamStore, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    shape: Shape,
}

impl Var {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

/// Static description of a batched window attention call.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub window: usize,
    pub scale: f64,
    /// `M^2 x M^2` lookup into a head's `(2M-1)^2` bias table row.
    pub rel_index: Arc<Vec<usize>>,
    /// Region id per `(window-in-image, token)`; attention is restricted to
    /// equal ids. `None` means unmasked.
    pub regions: Option<Arc<Vec<u32>>>,
    pub windows_per_image: usize,
}

/// One multiply-accumulate bearing op executed under a scope path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRecord {
    pub scope: String,
    pub op: &'static str,
    pub macs: u64,
}

enum Op {
    Leaf,
    Conv {
        geom: ConvGeom,
        bias: bool,
    },
    Add,
    Mul,
    Scale(f64),
    ScaleChannels,
    Act(Activation),
    Softmax,
    LayerNorm {
        stats: Vec<(f64, f64)>,
    },
    BatchNorm {
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    Gap,
    Concat,
    Slice {
        start: usize,
    },
    Gather {
        index: Arc<Vec<usize>>,
    },
    Attention {
        spec: AttentionSpec,
        probs: Vec<f64>,
        table: bool,
    },
    Sum,
    CrossEntropy {
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Option<Tensor>,
    param: Option<String>,
}

pub const LAYERNORM_EPS: f64 = 1e-10;
pub const BATCHNORM_EPS: f64 = 1e-5;

/// Tape of ops recorded in forward order. Reverse traversal in
/// [`Graph::backward`] produces gradients for every recorded value.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
    param_cache: HashMap<String, Var>,
    scope: String,
    costs: Option<Vec<CostRecord>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            param_cache: HashMap::new(),
            scope: String::new(),
            costs: None,
        }
    }

    /// A graph that will never run `backward`; intermediate values may be
    /// dropped with [`Graph::retain`].
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_cost_tracking(mut self) -> Self {
        self.costs = Some(Vec::new());
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn costs(&self) -> &[CostRecord] {
        self.costs.as_deref().unwrap_or(&[])
    }

    pub fn take_costs(&mut self) -> Vec<CostRecord> {
        self.costs.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// Runs `f` with the cost scope set to `path`.
    pub fn with_scope<T>(&mut self, path: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = std::mem::replace(&mut self.scope, path.to_string());
        let out = f(self);
        self.scope = prev;
        out
    }

    fn record_cost(&mut self, op: &'static str, macs: u64) {
        if let Some(c) = &mut self.costs {
            c.push(CostRecord {
                scope: self.scope.clone(),
                op,
                macs,
            });
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let shape = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            value: Some(value),
            param: None,
        });
        Var { id, shape }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, vec![], t)
    }

    /// Leaf bound to a named parameter. Repeated calls with the same path
    /// return the same node, so gradients accumulate across uses.
    pub fn param(&mut self, store: &ParamStore, path: &str) -> Result<Var> {
        if let Some(v) = self.param_cache.get(path) {
            return Ok(*v);
        }
        let mut t = store.expect(path)?.clone();
        t.clear_grad();
        let v = self.push(Op::Leaf, vec![], t);
        self.nodes[v.id].param = Some(path.to_string());
        self.param_cache.insert(path.to_string(), v);
        Ok(v)
    }

    /// Value of a recorded node.
    ///
    /// Panics if the value was dropped by [`Graph::retain`].
    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.id]
            .value
            .as_ref()
            .expect("graph value was released")
    }

    fn val(&self, id: usize) -> &Tensor {
        self.nodes[id]
            .value
            .as_ref()
            .expect("graph value was released")
    }

    /// Drops every stored value except `keep`. Only meaningful on an
    /// inference graph; a no-op when gradients are enabled.
    pub fn retain(&mut self, keep: &[Var]) {
        if self.grad_enabled {
            return;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !keep.iter().any(|k| k.id == i) {
                node.value = None;
            }
        }
        self.param_cache.clear();
    }

    // -----------------------------------------------------------------------
    // ops

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = conv_geom("conv2d", x.shape, w.shape, stride, pad, groups)?;
        self.conv_like(x, w, b, geom, "conv")
    }

    /// Per-token affine map on `(n, c_in, h, w)` with weight `(c_out, c_in, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        if w.shape[2] != 1 || w.shape[3] != 1 {
            return Err(Error::dim(
                "linear",
                format!("weight must be (c_out, c_in, 1, 1), got {:?}", w.shape),
            ));
        }
        if w.shape[1] != x.shape[1] {
            return Err(Error::dim(
                "linear",
                format!(
                    "input features (axis 1) = {} but weight in-features (axis 1) = {}",
                    x.shape[1], w.shape[1]
                ),
            ));
        }
        let geom = conv_geom("linear", x.shape, w.shape, 1, 0, 1)?;
        self.conv_like(x, w, b, geom, "fc")
    }

    fn conv_like(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        label: &'static str,
    ) -> Result<Var> {
        if let Some(b) = b {
            if numel(&b.shape) != geom.c_out {
                return Err(Error::dim(
                    "conv2d",
                    format!(
                        "bias has {} entries for {} output channels",
                        numel(&b.shape),
                        geom.c_out
                    ),
                ));
            }
        }
        let mut out = vec![0.0; geom.n * geom.c_out * geom.oh * geom.ow];
        kernels::conv2d_forward(
            &geom,
            self.val(x.id).data(),
            self.val(w.id).data(),
            b.map(|b| self.val(b.id).data()),
            &mut out,
        );
        self.record_cost(label, geom.macs());
        let t = Tensor::new([geom.n, geom.c_out, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x.id, w.id];
        if let Some(b) = b {
            inputs.push(b.id);
        }
        Ok(self.push(
            Op::Conv {
                geom,
                bias: b.is_some(),
            },
            inputs,
            t,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", a, b)?;
        let data = self
            .val(a.id)
            .data()
            .iter()
            .zip(self.val(b.id).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(a.shape, data)?;
        Ok(self.push(Op::Add, vec![a.id, b.id], t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", a, b)?;
        let data = self
            .val(a.id)
            .data()
            .iter()
            .zip(self.val(b.id).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(a.shape, data)?;
        Ok(self.push(Op::Mul, vec![a.id, b.id], t))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.val(x.id).data().iter().map(|v| v * s).collect();
        let t = Tensor::new(x.shape, data).expect("same length");
        self.push(Op::Scale(s), vec![x.id], t)
    }

    /// `x (n,c,h,w) * gate (n,c,1,1)`, broadcast over space.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [n, c, h, w] = x.shape;
        if gate.shape != [n, c, 1, 1] {
            return Err(Error::dim(
                "scale_channels",
                format!(
                    "gate {:?} must be (n, c, 1, 1) for input {:?}",
                    gate.shape, x.shape
                ),
            ));
        }
        let hw = h * w;
        let xv = self.val(x.id).data();
        let gv = self.val(gate.id).data();
        let data = xv.iter().enumerate().map(|(i, v)| v * gv[i / hw]).collect();
        let t = Tensor::new(x.shape, data)?;
        Ok(self.push(Op::ScaleChannels, vec![x.id, gate.id], t))
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let data = self
            .val(x.id)
            .data()
            .iter()
            .map(|&v| kind.apply(v))
            .collect();
        let t = Tensor::new(x.shape, data).expect("same length");
        self.push(Op::Act(kind), vec![x.id], t)
    }

    /// Softmax over the last axis, treating the tensor as `(n*c*h, w)` rows.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let cols = x.shape[3];
        if cols == 0 {
            return Err(Error::dim("softmax", "last axis is empty"));
        }
        let mut data = self.val(x.id).data().to_vec();
        for row in data.chunks_mut(cols) {
            kernels::softmax_row(row);
        }
        let t = Tensor::new(x.shape, data)?;
        Ok(self.push(Op::Softmax, vec![x.id], t))
    }

    /// Normalizes over channels at each spatial position, then applies the
    /// per-channel affine `gamma, beta` (each `c` elements).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = x.shape[1];
        if numel(&gamma.shape) != c || numel(&beta.shape) != c {
            return Err(Error::dim(
                "layernorm",
                format!("affine params must have {c} entries (axis 1)"),
            ));
        }
        let mut out = vec![0.0; numel(&x.shape)];
        let stats = kernels::layernorm_forward(
            x.shape,
            self.val(x.id).data(),
            self.val(gamma.id).data(),
            self.val(beta.id).data(),
            LAYERNORM_EPS,
            &mut out,
        );
        let t = Tensor::new(x.shape, out)?;
        let stats = if self.grad_enabled { stats } else { Vec::new() };
        Ok(self.push(Op::LayerNorm { stats }, vec![x.id, gamma.id, beta.id], t))
    }

    /// Inference-style batch norm with fixed statistics and learnable affine.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        mean: &[f64],
        var: &[f64],
        gamma: Var,
        beta: Var,
    ) -> Result<Var> {
        let [_, c, h, w] = x.shape;
        if mean.len() != c || var.len() != c || numel(&gamma.shape) != c || numel(&beta.shape) != c
        {
            return Err(Error::dim(
                "batchnorm",
                format!("statistics and affine must have {c} entries (axis 1)"),
            ));
        }
        let hw = h * w;
        let gv = self.val(gamma.id).data();
        let bv = self.val(beta.id).data();
        let data = self
            .val(x.id)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / hw) % c;
                (v - mean[ch]) / (var[ch] + BATCHNORM_EPS).sqrt() * gv[ch] + bv[ch]
            })
            .collect();
        let t = Tensor::new(x.shape, data)?;
        Ok(self.push(
            Op::BatchNorm {
                mean: mean.to_vec(),
                var: var.to_vec(),
                eps: BATCHNORM_EPS,
            },
            vec![x.id, gamma.id, beta.id],
            t,
        ))
    }

    /// Global average pool to `(n, c, 1, 1)`.
    pub fn gap(&mut self, x: Var) -> Var {
        let [n, c, h, w] = x.shape;
        let hw = (h * w) as f64;
        let data = self
            .val(x.id)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let t = Tensor::new([n, c, 1, 1], data).expect("pooled length");
        self.push(Op::Gap, vec![x.id], t)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let [n, _, h, w] = first.shape;
        for v in xs {
            if v.shape[0] != n || v.shape[2] != h || v.shape[3] != w {
                return Err(Error::dim(
                    "concat",
                    format!(
                        "inputs must agree on axes 0, 2, 3: {:?} vs {:?}",
                        first.shape, v.shape
                    ),
                ));
            }
        }
        let c_total: usize = xs.iter().map(|v| v.shape[1]).sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c_total * hw);
        for b in 0..n {
            for v in xs {
                let c = v.shape[1];
                data.extend_from_slice(&self.val(v.id).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let t = Tensor::new([n, c_total, h, w], data)?;
        Ok(self.push(Op::Concat, xs.iter().map(|v| v.id).collect(), t))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = x.shape;
        if start + len > c {
            return Err(Error::dim(
                "slice_channels",
                format!("channels {start}..{} out of 0..{c}", start + len),
            ));
        }
        let hw = h * w;
        let src = self.val(x.id).data();
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            data.extend_from_slice(&src[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let t = Tensor::new([n, len, h, w], data)?;
        Ok(self.push(Op::Slice { start }, vec![x.id], t))
    }

    /// Splits into `parts` equal channel groups.
    pub fn split_channels(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let c = x.shape[1];
        if parts == 0 || !c.is_multiple_of(parts) {
            return Err(Error::config(
                "branches",
                format!("{c} channels cannot be split into {parts} equal parts"),
            ));
        }
        let per = c / parts;
        (0..parts)
            .map(|i| self.slice_channels(x, i * per, per))
            .collect()
    }

    /// `out[i] = x[index[i]]`, reshaped to `out_shape`.
    pub fn gather(&mut self, x: Var, out_shape: Shape, index: Arc<Vec<usize>>) -> Result<Var> {
        if index.len() != numel(&out_shape) {
            return Err(Error::dim(
                "gather",
                format!("{} indices for output {:?}", index.len(), out_shape),
            ));
        }
        let src = self.val(x.id).data();
        if let Some(bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim(
                "gather",
                format!("index {bad} outside input of {} elements", src.len()),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(Op::Gather { index }, vec![x.id], t))
    }

    /// Batched window attention. `q`, `k` are `(windows, heads*dk, M, M)`,
    /// `v` is `(windows, heads*dv, M, M)`; `table` is the `(1, heads, 2M-1, 2M-1)`
    /// relative position bias.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        table: Option<Var>,
        spec: &AttentionSpec,
    ) -> Result<Var> {
        let geom = attn_geom(q.shape, k.shape, v.shape, spec)?;
        if let Some(t) = table {
            let m = 2 * spec.window - 1;
            if t.shape != [1, spec.heads, m, m] {
                return Err(Error::dim(
                    "window_attention",
                    format!(
                        "bias table {:?} must be [1, {}, {m}, {m}]",
                        t.shape, spec.heads
                    ),
                ));
            }
        }
        let args = attn_args(spec, geom, table.map(|t| self.val(t.id).data()));
        let (out, probs) = kernels::window_attention_forward(
            &args,
            self.val(q.id).data(),
            self.val(k.id).data(),
            self.val(v.id).data(),
        );
        let macs =
            (geom.windows * geom.heads * geom.tokens * geom.tokens * (geom.dk + geom.dv)) as u64;
        self.record_cost("attn", macs);
        let tensor = Tensor::new(v.shape, out)?;
        let mut inputs = vec![q.id, k.id, v.id];
        if let Some(t) = table {
            inputs.push(t.id);
        }
        let probs = if self.grad_enabled { probs } else { Vec::new() };
        Ok(self.push(
            Op::Attention {
                spec: spec.clone(),
                probs,
                table: table.is_some(),
            },
            inputs,
            tensor,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x.id).sum();
        self.push(Op::Sum, vec![x.id], Tensor::full([1, 1, 1, 1], s))
    }

    /// Mean softmax cross-entropy of `(n, classes, 1, 1)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k, h, w] = logits.shape;
        if h != 1 || w != 1 || labels.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {:?} with {} labels", logits.shape, labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let raw = self.val(logits.id).data();
        let mut probs = raw.to_vec();
        let mut loss = 0.0;
        // log-sum-exp form: no clamping, so NaN logits surface as a NaN loss
        for ((row, z), &l) in probs.chunks_mut(k).zip(raw.chunks(k)).zip(labels) {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - z[l];
            kernels::softmax_row(row);
        }
        loss /= n as f64;
        Ok(self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits.id],
            Tensor::full([1, 1, 1, 1], loss),
        ))
    }

    // -----------------------------------------------------------------------
    // reverse pass

    /// Seeds `d loss = 1` and propagates to every recorded node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with_seed(loss, vec![1.0])
    }

    /// Reverse pass from an arbitrary output cotangent.
    pub fn backward_with_seed(&mut self, out: Var, seed: Vec<f64>) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        if seed.len() != numel(&out.shape) {
            return Err(Error::dim(
                "backward",
                format!("seed of {} elements for output {:?}", seed.len(), out.shape),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[out.id] = Some(seed);
        for i in (0..=out.id).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, dy: &[f64]) {
        let node = &self.nodes[i];
        let inputs = node.inputs.clone();
        let grads = &mut self.grads;
        let nodes = &self.nodes;
        let val = |id: usize| nodes[id].value.as_ref().expect("graph value was released");
        match &node.op {
            Op::Leaf => {}
            Op::Conv { geom, bias } => {
                let x = val(inputs[0]);
                let w = val(inputs[1]);
                let mut dx = vec![0.0; x.numel()];
                let mut dw = vec![0.0; w.numel()];
                let mut db = if *bias {
                    Some(vec![0.0; geom.c_out])
                } else {
                    None
                };
                kernels::conv2d_backward(
                    geom,
                    x.data(),
                    w.data(),
                    dy,
                    &mut dx,
                    &mut dw,
                    db.as_deref_mut(),
                );
                accumulate(grads, inputs[0], &dx);
                accumulate(grads, inputs[1], &dw);
                if let Some(db) = db {
                    accumulate(grads, inputs[2], &db);
                }
            }
            Op::Add => {
                accumulate(grads, inputs[0], dy);
                accumulate(grads, inputs[1], dy);
            }
            Op::Mul => {
                let a = val(inputs[0]).data();
                let b = val(inputs[1]).data();
                let da: Vec<f64> = dy.iter().zip(b).map(|(g, v)| g * v).collect();
                let db: Vec<f64> = dy.iter().zip(a).map(|(g, v)| g * v).collect();
                accumulate(grads, inputs[0], &da);
                accumulate(grads, inputs[1], &db);
            }
            Op::Scale(s) => {
                let dx: Vec<f64> = dy.iter().map(|g| g * s).collect();
                accumulate(grads, inputs[0], &dx);
            }
            Op::ScaleChannels => {
                let x = val(inputs[0]);
                let gate = val(inputs[1]).data();
                let hw = x.shape()[2] * x.shape()[3];
                let dx: Vec<f64> = dy
                    .iter()
                    .enumerate()
                    .map(|(j, g)| g * gate[j / hw])
                    .collect();
                let mut dg = vec![0.0; gate.len()];
                for (j, (g, xv)) in dy.iter().zip(x.data()).enumerate() {
                    dg[j / hw] += g * xv;
                }
                accumulate(grads, inputs[0], &dx);
                accumulate(grads, inputs[1], &dg);
            }
            Op::Act(kind) => {
                let x = val(inputs[0]).data();
                let y = node.value.as_ref().expect("activation output").data();
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&xv, &yv))| g * kind.derivative(xv, yv))
                    .collect();
                accumulate(grads, inputs[0], &dx);
            }
            Op::Softmax => {
                let y = node.value.as_ref().expect("softmax output");
                let cols = y.shape()[3];
                let mut dx = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(cols)
                    .zip(dy.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, inputs[0], &dx);
            }
            Op::LayerNorm { stats } => {
                let x = val(inputs[0]);
                let gamma = val(inputs[1]).data();
                let c = x.shape()[1];
                let mut dx = vec![0.0; x.numel()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                kernels::layernorm_backward(
                    x.shape(),
                    x.data(),
                    gamma,
                    stats,
                    dy,
                    &mut dx,
                    &mut dg,
                    &mut db,
                );
                accumulate(grads, inputs[0], &dx);
                accumulate(grads, inputs[1], &dg);
                accumulate(grads, inputs[2], &db);
            }
            Op::BatchNorm { mean, var, eps } => {
                let x = val(inputs[0]);
                let gamma = val(inputs[1]).data();
                let [_, c, h, w] = x.shape();
                let hw = h * w;
                let mut dx = vec![0.0; x.numel()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (j, (g, xv)) in dy.iter().zip(x.data()).enumerate() {
                    let ch = (j / hw) % c;
                    let rstd = 1.0 / (var[ch] + eps).sqrt();
                    dx[j] = g * gamma[ch] * rstd;
                    dg[ch] += g * (xv - mean[ch]) * rstd;
                    db[ch] += g;
                }
                accumulate(grads, inputs[0], &dx);
                accumulate(grads, inputs[1], &dg);
                accumulate(grads, inputs[2], &db);
            }
            Op::Gap => {
                let [_, _, h, w] = val(inputs[0]).shape();
                let hw = h * w;
                let dx: Vec<f64> = (0..dy.len() * hw).map(|j| dy[j / hw] / hw as f64).collect();
                accumulate(grads, inputs[0], &dx);
            }
            Op::Concat => {
                let [n, _, h, w] = node.value.as_ref().expect("concat output").shape();
                let hw = h * w;
                let mut offset = 0;
                let c_total: usize = inputs.iter().map(|&id| val(id).shape()[1]).sum();
                for &id in &inputs {
                    let c = val(id).shape()[1];
                    let mut dx = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        dx.extend_from_slice(
                            &dy[(b * c_total + offset) * hw..(b * c_total + offset + c) * hw],
                        );
                    }
                    accumulate(grads, id, &dx);
                    offset += c;
                }
            }
            Op::Slice { start } => {
                let x = val(inputs[0]);
                let [n, c, h, w] = x.shape();
                let hw = h * w;
                let len = dy.len() / (n * hw);
                let g = grads[inputs[0]].get_or_insert_with(|| vec![0.0; n * c * hw]);
                for b in 0..n {
                    let dst = &mut g[(b * c + start) * hw..(b * c + start + len) * hw];
                    for (d, s) in dst.iter_mut().zip(&dy[b * len * hw..(b + 1) * len * hw]) {
                        *d += s;
                    }
                }
            }
            Op::Gather { index } => {
                let len = val(inputs[0]).numel();
                let g = grads[inputs[0]].get_or_insert_with(|| vec![0.0; len]);
                for (&src, d) in index.iter().zip(dy) {
                    g[src] += d;
                }
            }
            Op::Attention { spec, probs, table } => {
                let q = val(inputs[0]);
                let k = val(inputs[1]);
                let v = val(inputs[2]);
                let geom =
                    attn_geom(q.shape(), k.shape(), v.shape(), spec).expect("validated in forward");
                let tab = if *table {
                    Some(val(inputs[3]).data())
                } else {
                    None
                };
                let args = attn_args(spec, geom, tab);
                let mut dq = vec![0.0; q.numel()];
                let mut dk = vec![0.0; k.numel()];
                let mut dv = vec![0.0; v.numel()];
                let mut dt = tab.map(|t| vec![0.0; t.len()]);
                kernels::window_attention_backward(
                    &args,
                    q.data(),
                    k.data(),
                    v.data(),
                    probs,
                    dy,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                    dt.as_deref_mut(),
                );
                accumulate(grads, inputs[0], &dq);
                accumulate(grads, inputs[1], &dk);
                accumulate(grads, inputs[2], &dv);
                if let Some(dt) = dt {
                    accumulate(grads, inputs[3], &dt);
                }
            }
            Op::Sum => {
                let len = val(inputs[0]).numel();
                let dx = vec![dy[0]; len];
                accumulate(grads, inputs[0], &dx);
            }
            Op::CrossEntropy { labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let mut dx = probs.clone();
                for (b, &l) in labels.iter().enumerate() {
                    dx[b * k + l] -= 1.0;
                }
                let s = dy[0] / n as f64;
                for d in dx.iter_mut() {
                    *d *= s;
                }
                accumulate(grads, inputs[0], &dx);
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// `(path, gradient)` for every parameter leaf; unreachable parameters
    /// get zeros.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let path = n.param.as_ref()?;
                let len = n.value.as_ref().map_or(0, Tensor::numel);
                let g = self
                    .grads
                    .get(i)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; len]);
                Some((path.clone(), g))
            })
            .collect()
    }

    /// Stores gradients into the `grad` slot of every parameter in `store`.
    /// Parameters the graph never touched receive zeros.
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<()> {
        let mut by_path: HashMap<String, Vec<f64>> = self.param_grads().into_iter().collect();
        for (path, t) in store.iter_mut() {
            let g = by_path.remove(path).unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(g)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn same_shape(op: &'static str, a: Var, b: Var) -> Result<()> {
    if a.shape != b.shape {
        let axes: Vec<usize> = (0..4).filter(|&i| a.shape[i] != b.shape[i]).collect();
        return Err(Error::dim(
            op,
            format!(
                "shapes {:?} and {:?} differ on axes {axes:?}",
                a.shape, b.shape
            ),
        ));
    }
    Ok(())
}

pub(crate) fn conv_geom(
    op: &'static str,
    x: Shape,
    w: Shape,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let [n, c_in, h, wd] = x;
    let [c_out, cpg, kh, kw] = w;
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::dim(
            op,
            format!("groups {groups} must divide input channels (axis 1) {c_in} and output channels {c_out}"),
        ));
    }
    if cpg != c_in / groups {
        return Err(Error::dim(
            op,
            format!(
                "weight in-channels (axis 1) = {cpg} but input channels (axis 1) / groups = {}",
                c_in / groups
            ),
        ));
    }
    if kh != kw {
        return Err(Error::dim(
            op,
            format!("kernel must be square, got {kh}x{kw} (axes 2, 3)"),
        ));
    }
    if stride == 0 {
        return Err(Error::dim(op, "stride must be positive"));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::dim(
            op,
            format!("kernel {kh} larger than padded input {h}x{wd} (axes 2, 3)"),
        ));
    }
    Ok(ConvGeom {
        n,
        c_in,
        h,
        w: wd,
        c_out,
        k: kh,
        stride,
        pad,
        groups,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (wd + 2 * pad - kw) / stride + 1,
    })
}

fn attn_geom(q: Shape, k: Shape, v: Shape, spec: &AttentionSpec) -> Result<AttnGeom> {
    let m = spec.window;
    if q != k {
        return Err(Error::dim(
            "window_attention",
            format!("query {q:?} and key {k:?} differ"),
        ));
    }
    if q[2] != m || q[3] != m || v[2] != m || v[3] != m || v[0] != q[0] {
        return Err(Error::dim(
            "window_attention",
            format!("q {q:?} / v {v:?} must be (windows, c, {m}, {m}) with equal window counts"),
        ));
    }
    if spec.heads == 0 || !q[1].is_multiple_of(spec.heads) || !v[1].is_multiple_of(spec.heads) {
        return Err(Error::dim(
            "window_attention",
            format!(
                "{} heads must divide channels {} and {}",
                spec.heads, q[1], v[1]
            ),
        ));
    }
    let tokens = m * m;
    if spec.rel_index.len() != tokens * tokens {
        return Err(Error::dim(
            "window_attention",
            "relative index must be tokens x tokens",
        ));
    }
    if let Some(r) = &spec.regions {
        if spec.windows_per_image == 0
            || r.len() != spec.windows_per_image * tokens
            || !q[0].is_multiple_of(spec.windows_per_image)
        {
            return Err(Error::dim(
                "window_attention",
                "region map does not match window count",
            ));
        }
    }
    Ok(AttnGeom {
        windows: q[0],
        heads: spec.heads,
        tokens,
        dk: q[1] / spec.heads,
        dv: v[1] / spec.heads,
    })
}

fn attn_args<'a>(
    spec: &'a AttentionSpec,
    geom: AttnGeom,
    table: Option<&'a [f64]>,
) -> AttnArgs<'a> {
    AttnArgs {
        geom,
        scale: spec.scale,
        table,
        rel_index: &spec.rel_index,
        regions: spec.regions.as_deref().map(|r| r.as_slice()),
        windows_per_image: spec.windows_per_image.max(1),
    }
}
