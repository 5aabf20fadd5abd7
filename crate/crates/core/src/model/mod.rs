//! The full network: stem, two convolutional stages, two ladder stages,
//! global pooling and a linear classifier.

pub mod config;
pub mod io;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DownsampleKind, ModelConfig, StageKind, StageSpec};

use crate::blocks::{Downsample, Mbv2Block, Mbv2Config, Stem};
use crate::error::{Error, Result};
use crate::ladder::LadderBlock;
use crate::layers::Linear;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub enum Unit {
    Mbv2(Mbv2Block),
    Ladder(LadderBlock),
    Down(Downsample),
}

impl Unit {
    pub fn path(&self) -> &str {
        match self {
            Unit::Mbv2(b) => &b.path,
            Unit::Ladder(b) => &b.path,
            Unit::Down(d) => &d.conv.path,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Unit::Mbv2(b) if b.cfg.stride == 2 => "MBV2Block+SE (down)".into(),
            Unit::Mbv2(_) => "MBV2Block+SE".into(),
            Unit::Ladder(_) => "Ladder SA block".into(),
            Unit::Down(_) => "2x2 conv2d (down)".into(),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Unit::Mbv2(b) => b.forward(g, store, x),
            Unit::Ladder(b) => b.forward(g, store, x),
            Unit::Down(d) => d.forward(g, store, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub name: String,
    pub units: Vec<Unit>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub head: Linear,
    pub params: ParamStore,
}

impl Model {
    /// Builds the network and initializes every parameter from `cfg.seed`.
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let stem = Stem::new("stem", cfg.stem());
        stem.init(&mut params, &mut rng)?;
        let mut c = cfg.stem_channels;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (i, st) in cfg.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let mut units = Vec::new();
            let mbv2 = |path: String, cin: usize, cout: usize, stride: usize| {
                let mut m = Mbv2Config::new(cin, cout, stride);
                m.expansion_ratio = cfg.mbv2_expansion;
                m.se_reduction = cfg.mbv2_se_reduction;
                Mbv2Block::new(path, m)
            };
            match st.downsample {
                DownsampleKind::Mbv2 => {
                    units.push(Unit::Mbv2(mbv2(format!("{name}.down"), c, st.channels, 2)?))
                }
                DownsampleKind::Conv2x2 => units.push(Unit::Down(Downsample::new(
                    format!("{name}.down"),
                    c,
                    st.channels,
                    2,
                )?)),
                DownsampleKind::None => {}
            }
            for b in 0..st.depth {
                let path = format!("{name}.block{b}");
                units.push(match st.kind {
                    StageKind::Conv => Unit::Mbv2(mbv2(path, st.channels, st.channels, 1)?),
                    StageKind::Ladder => {
                        Unit::Ladder(LadderBlock::new(path, cfg.ladder_block(i)?)?)
                    }
                });
            }
            c = st.channels;
            if let Some(e) = st.exit_channels {
                units.push(Unit::Mbv2(mbv2(format!("{name}.exit"), c, e, 2)?));
                c = e;
            }
            for u in &units {
                match u {
                    Unit::Mbv2(b) => b.init(&mut params, &mut rng)?,
                    Unit::Ladder(b) => b.init(&mut params, &mut rng)?,
                    Unit::Down(d) => d.init(&mut params, &mut rng)?,
                }
            }
            stages.push(Stage { name, units });
        }
        let head = Linear::new("head.fc", c, cfg.classes, true);
        head.init(&mut params, &mut rng)?;
        Ok(Model {
            cfg,
            stem,
            stages,
            head,
            params,
        })
    }

    pub fn classes(&self) -> usize {
        self.cfg.classes
    }

    /// Records the forward pass on `g` reading parameters from `store`;
    /// returns logits of shape `(n, classes, 1, 1)`.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_graph_with(g, store, x, |_, _, _| {})
    }

    /// As [`Model::forward_graph`], calling `visit(graph, section, output)`
    /// after the stem, each stage, and the head.
    pub fn forward_graph_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mut visit: impl FnMut(&mut Graph, &str, Var),
    ) -> Result<Var> {
        let [_, c, _, _] = x.shape();
        if c != self.cfg.input_channels {
            return Err(Error::dim(
                "model",
                format!(
                    "image channels (axis 1) = {c}, expected {}",
                    self.cfg.input_channels
                ),
            ));
        }
        let mut h = self.stem.forward(g, store, x)?;
        visit(g, "stem", h);
        for st in &self.stages {
            for u in &st.units {
                h = u.forward(g, store, h)?;
            }
            visit(g, &st.name, h);
        }
        let pooled = g.gap(h);
        let logits = self.head.forward(g, store, pooled)?;
        visit(g, "head", logits);
        Ok(logits)
    }

    /// Inference forward with the model's own parameters.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let out = self.forward_graph(&mut g, &self.params, xv)?;
        Ok(g.value(out).clone())
    }

    /// Output shape after the stem and each stage for input `x_shape`.
    pub fn section_shapes(&self, x_shape: [usize; 4]) -> Result<Vec<(String, [usize; 4])>> {
        let [n, _, h, w] = x_shape;
        let mut out = Vec::new();
        let (mut c, mut hh, mut ww) = (
            self.cfg.stem_channels,
            h / self.cfg.stem_stride,
            w / self.cfg.stem_stride,
        );
        out.push(("stem".to_string(), [n, c, hh, ww]));
        for (st, spec) in self.stages.iter().zip(&self.cfg.stages) {
            if spec.downsample != DownsampleKind::None {
                hh /= 2;
                ww /= 2;
            }
            c = spec.channels;
            if let Some(e) = spec.exit_channels {
                hh /= 2;
                ww /= 2;
                c = e;
            }
            out.push((st.name.clone(), [n, c, hh, ww]));
        }
        out.push(("head".to_string(), [n, self.cfg.classes, 1, 1]));
        Ok(out)
    }

    pub fn ladder_blocks(&self) -> impl Iterator<Item = &LadderBlock> {
        self.stages
            .iter()
            .flat_map(|s| &s.units)
            .filter_map(|u| match u {
                Unit::Ladder(b) => Some(b),
                _ => None,
            })
    }

    pub fn units(&self) -> impl Iterator<Item = (&Stage, &Unit)> {
        self.stages
            .iter()
            .flat_map(|s| s.units.iter().map(move |u| (s, u)))
    }
}
