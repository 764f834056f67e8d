//! Parameterized layers built on the autodiff graph.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Conv2dSpec, Graph, ParamId, ParamStore, Tensor, Var};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with variance `2 / fan_in`.
    He,
    Normal(f64),
    Zeros,
}

impl Init {
    fn tensor(self, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
        let std = match self {
            Init::He => (2.0 / fan_in.max(1) as f64).sqrt(),
            Init::Normal(s) => s,
            Init::Zeros => return Tensor::zeros(shape),
        };
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }
}

/// Convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
    pub c_out: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (kh, kw): (usize, usize),
        c_in: usize,
        c_out: usize,
        spec: Conv2dSpec,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kernel = store.register(
            format!("{name}.kernel"),
            init.tensor(&[kh, kw, c_in, c_out], kh * kw * c_in, rng),
        )?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Conv {
            kernel,
            bias,
            spec,
            c_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        let y = g.conv2d(x, k, self.spec)?;
        g.add(y, b)
    }

    pub fn forward_relu(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        Ok(g.relu(y))
    }
}

/// Affine map applied to the rows of an `N x in` matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), init.tensor(&[n_in, n_out], n_in, rng))?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[n_out]))?;
        Ok(Linear {
            weight,
            bias,
            out: n_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}
