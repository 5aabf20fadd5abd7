//! Parameterized building blocks. A layer holds its dotted path and
//! hyperparameters; tensors live in the [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv {
    pub path: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        path: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        Conv {
            path: path.into(),
            c_in,
            c_out,
            k,
            stride,
            pad,
            groups,
            bias,
        }
    }

    pub fn pointwise(path: impl Into<String>, c_in: usize, c_out: usize, bias: bool) -> Self {
        Self::new(path, c_in, c_out, 1, 1, 0, 1, bias)
    }

    pub fn depthwise(path: impl Into<String>, c: usize, stride: usize, bias: bool) -> Self {
        Self::new(path, c, c, 3, stride, 1, c, bias)
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.path)
    }

    fn fan_in(&self) -> usize {
        self.c_in / self.groups * self.k * self.k
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let shape = [self.c_out, self.c_in / self.groups, self.k, self.k];
        store.init_fan_in(self.weight_path(), shape, self.fan_in(), rng)?;
        if self.bias {
            store.init_fan_in(self.bias_path(), [1, self.c_out, 1, 1], self.fan_in(), rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_path())?;
        let b = if self.bias {
            Some(g.param(store, &self.bias_path())?)
        } else {
            None
        };
        g.with_scope(&self.path, |g| {
            g.conv2d(x, w, b, self.stride, self.pad, self.groups)
        })
    }

    pub fn weight_count(&self) -> usize {
        self.c_out * self.fan_in()
    }
}

/// Per-token fully connected layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub path: String,
    pub c_in: usize,
    pub c_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(path: impl Into<String>, c_in: usize, c_out: usize, bias: bool) -> Self {
        Linear {
            path: path.into(),
            c_in,
            c_out,
            bias,
        }
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.path)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        store.init_fan_in(
            self.weight_path(),
            [self.c_out, self.c_in, 1, 1],
            self.c_in,
            rng,
        )?;
        if self.bias {
            store.init_fan_in(self.bias_path(), [1, self.c_out, 1, 1], self.c_in, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_path())?;
        let b = if self.bias {
            Some(g.param(store, &self.bias_path())?)
        } else {
            None
        };
        g.with_scope(&self.path, |g| g.linear(x, w, b))
    }

    /// Overwrites weight with identity (requires square) and bias with zeros.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        assert_eq!(self.c_in, self.c_out, "identity needs a square layer");
        let eye = Tensor::from_fn([self.c_out, self.c_in, 1, 1], |[o, i, _, _]| {
            if o == i {
                1.0
            } else {
                0.0
            }
        });
        *store.expect_mut(&self.weight_path())? = eye;
        if self.bias {
            *store.expect_mut(&self.bias_path())? = Tensor::zeros([1, self.c_out, 1, 1]);
        }
        Ok(())
    }

    /// Zero weight, constant bias: the layer outputs `value` everywhere.
    pub fn set_constant(&self, store: &mut ParamStore, value: f64) -> Result<()> {
        *store.expect_mut(&self.weight_path())? = Tensor::zeros([self.c_out, self.c_in, 1, 1]);
        *store.expect_mut(&self.bias_path())? = Tensor::full([1, self.c_out, 1, 1], value);
        Ok(())
    }
}

/// Inference-style batch norm: fixed statistics (mean 0, var 1) with a
/// learnable per-channel affine.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub path: String,
    pub c: usize,
}

impl BatchNorm {
    pub fn new(path: impl Into<String>, c: usize) -> Self {
        BatchNorm {
            path: path.into(),
            c,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(
            format!("{}.gamma", self.path),
            Tensor::full([1, self.c, 1, 1], 1.0),
        )?;
        store.insert(
            format!("{}.beta", self.path),
            Tensor::zeros([1, self.c, 1, 1]),
        )
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.path))?;
        let beta = g.param(store, &format!("{}.beta", self.path))?;
        let mean = vec![0.0; self.c];
        let var = vec![1.0; self.c];
        g.batchnorm_infer(x, &mean, &var, gamma, beta)
    }
}

/// Layer norm over channels at each position.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub path: String,
    pub c: usize,
}

impl LayerNorm {
    pub fn new(path: impl Into<String>, c: usize) -> Self {
        LayerNorm {
            path: path.into(),
            c,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(
            format!("{}.gamma", self.path),
            Tensor::full([1, self.c, 1, 1], 1.0),
        )?;
        store.insert(
            format!("{}.beta", self.path),
            Tensor::zeros([1, self.c, 1, 1]),
        )
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.path))?;
        let beta = g.param(store, &format!("{}.beta", self.path))?;
        g.layernorm(x, gamma, beta)
    }
}

/// Sets every parameter under `prefix` to zero.
pub fn zero_under(store: &mut ParamStore, prefix: &str) {
    for (path, t) in store.iter_mut() {
        if crate::tensor::params_path_is_under(path, prefix) {
            t.data_mut().fill(0.0);
        }
    }
}
