//! Convolutional blocks of the early stages: the three-conv stem, the
//! MobileNetV2 inverted residual with squeeze-and-excitation, and the 2x2
//! strided downsample.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, Linear};
use crate::tensor::{Activation, Graph, ParamStore, Var};

fn check_even(op: &str, path: &str, x: Var) -> Result<()> {
    let [_, _, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(
            path.to_string(),
            format!("{op}: stride-2 stage needs even spatial dims, got {h}x{w}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StemConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Stride of the first conv; the other two are stride 1.
    pub stride: usize,
}

impl Default for StemConfig {
    fn default() -> Self {
        StemConfig {
            c_in: 3,
            c_out: 36,
            stride: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stem {
    pub path: String,
    pub cfg: StemConfig,
    pub convs: Vec<Conv>,
    pub norms: Vec<BatchNorm>,
}

impl Stem {
    pub fn new(path: impl Into<String>, cfg: StemConfig) -> Self {
        let path = path.into();
        let convs = (0..3)
            .map(|i| {
                let (cin, stride) = if i == 0 {
                    (cfg.c_in, cfg.stride)
                } else {
                    (cfg.c_out, 1)
                };
                Conv::new(
                    format!("{path}.conv{i}"),
                    cin,
                    cfg.c_out,
                    3,
                    stride,
                    1,
                    1,
                    false,
                )
            })
            .collect();
        let norms = (0..3)
            .map(|i| BatchNorm::new(format!("{path}.bn{i}"), cfg.c_out))
            .collect();
        Stem {
            path,
            cfg,
            convs,
            norms,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for (c, n) in self.convs.iter().zip(&self.norms) {
            c.init(store, rng)?;
            n.init(store)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if self.cfg.stride == 2 {
            check_even("stem", &self.path, x)?;
        }
        let mut h = x;
        for (c, n) in self.convs.iter().zip(&self.norms) {
            h = c.forward(g, store, h)?;
            h = n.forward(g, store, h)?;
            h = g.act(h, Activation::Relu);
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mbv2Config {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub expansion_ratio: f64,
    pub se_reduction: usize,
    pub se: bool,
}

impl Mbv2Config {
    pub fn new(c_in: usize, c_out: usize, stride: usize) -> Self {
        Mbv2Config {
            c_in,
            c_out,
            stride,
            expansion_ratio: 4.0,
            se_reduction: 4,
            se: true,
        }
    }

    pub fn expanded(&self) -> usize {
        ((self.c_in as f64 * self.expansion_ratio).round() as usize).max(1)
    }

    /// SE hidden width, measured against the block input.
    pub fn se_hidden(&self) -> usize {
        (self.c_in / self.se_reduction.max(1)).max(1)
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }
}

#[derive(Clone, Debug)]
pub struct Mbv2Block {
    pub path: String,
    pub cfg: Mbv2Config,
    pub expand: Conv,
    pub expand_bn: BatchNorm,
    pub dw: Conv,
    pub dw_bn: BatchNorm,
    pub se: Option<(Linear, Linear)>,
    pub project: Conv,
    pub project_bn: BatchNorm,
}

impl Mbv2Block {
    pub fn new(path: impl Into<String>, cfg: Mbv2Config) -> Result<Self> {
        let path = path.into();
        if !(cfg.stride == 1 || cfg.stride == 2) {
            return Err(Error::config(
                format!("{path}.stride"),
                format!("stride must be 1 or 2, got {}", cfg.stride),
            ));
        }
        if !(cfg.expansion_ratio > 0.0) {
            return Err(Error::config(
                "mbv2.expansion",
                "expansion ratio must be positive",
            ));
        }
        let e = cfg.expanded();
        let se = cfg.se.then(|| {
            (
                Linear::new(format!("{path}.se.fc1"), e, cfg.se_hidden(), true),
                Linear::new(format!("{path}.se.fc2"), cfg.se_hidden(), e, true),
            )
        });
        Ok(Mbv2Block {
            expand: Conv::pointwise(format!("{path}.expand"), cfg.c_in, e, false),
            expand_bn: BatchNorm::new(format!("{path}.expand_bn"), e),
            dw: Conv::depthwise(format!("{path}.dw"), e, cfg.stride, false),
            dw_bn: BatchNorm::new(format!("{path}.dw_bn"), e),
            se,
            project: Conv::pointwise(format!("{path}.project"), e, cfg.c_out, false),
            project_bn: BatchNorm::new(format!("{path}.project_bn"), cfg.c_out),
            path,
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.expand.init(store, rng)?;
        self.expand_bn.init(store)?;
        self.dw.init(store, rng)?;
        self.dw_bn.init(store)?;
        if let Some((a, b)) = &self.se {
            a.init(store, rng)?;
            b.init(store, rng)?;
        }
        self.project.init(store, rng)?;
        self.project_bn.init(store)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if x.shape()[1] != self.cfg.c_in {
            return Err(Error::dim(
                "mbv2",
                format!(
                    "{}: input channels (axis 1) = {}, expected {}",
                    self.path,
                    x.shape()[1],
                    self.cfg.c_in
                ),
            ));
        }
        if self.cfg.stride == 2 {
            check_even("mbv2", &self.path, x)?;
        }
        let mut h = self.expand.forward(g, store, x)?;
        h = self.expand_bn.forward(g, store, h)?;
        h = g.act(h, Activation::Relu);
        h = self.dw.forward(g, store, h)?;
        h = self.dw_bn.forward(g, store, h)?;
        h = g.act(h, Activation::Relu);
        if let Some((fc1, fc2)) = &self.se {
            let gate = self.se_gate(g, store, h, fc1, fc2)?;
            h = g.scale_channels(h, gate)?;
        }
        h = self.project.forward(g, store, h)?;
        h = self.project_bn.forward(g, store, h)?;
        if self.cfg.has_residual() {
            h = g.add(x, h)?;
        }
        Ok(h)
    }

    fn se_gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        fc1: &Linear,
        fc2: &Linear,
    ) -> Result<Var> {
        let pooled = g.gap(h);
        let s = fc1.forward(g, store, pooled)?;
        let s = g.act(s, Activation::Relu);
        let s = fc2.forward(g, store, s)?;
        Ok(g.act(s, Activation::Sigmoid))
    }

    /// Gate values for input `x`, shape `(n, expanded, 1, 1)`.
    pub fn gate_values(
        &self,
        store: &ParamStore,
        x: &crate::Tensor,
    ) -> Result<Option<crate::Tensor>> {
        let Some((fc1, fc2)) = &self.se else {
            return Ok(None);
        };
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let mut h = self.expand.forward(&mut g, store, xv)?;
        h = self.expand_bn.forward(&mut g, store, h)?;
        h = g.act(h, Activation::Relu);
        h = self.dw.forward(&mut g, store, h)?;
        h = self.dw_bn.forward(&mut g, store, h)?;
        h = g.act(h, Activation::Relu);
        let gate = self.se_gate(&mut g, store, h, fc1, fc2)?;
        Ok(Some(g.value(gate).clone()))
    }
}

/// Strided `k x k` conv (k = 2) with bias that halves the map and sets the
/// channel count.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv,
}

impl Downsample {
    pub fn new(path: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let path = path.into();
        if k != 2 {
            return Err(Error::config(
                format!("{path}.kernel"),
                format!("downsample kernel must be 2, got {k}"),
            ));
        }
        Ok(Downsample {
            conv: Conv::new(path, c_in, c_out, k, 2, 0, 1, true),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.conv.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        check_even("downsample", &self.conv.path, x)?;
        self.conv.forward(g, store, x)
    }
}
