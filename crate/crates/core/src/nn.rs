//! Parameterized layers built on [`Graph`].

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::kernels::{ConvGeometry, ConvKind};
use crate::params::{BufferId, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Result<Self> {
        let geom = kind.geometry(c_in, c_out, k)?;
        let fan_in = geom.c_in / geom.groups * k * k;
        let weight = store.add(format!("{name}/weight"), geom.weight_shape(), Init::HeNormal { fan_in });
        let bias = store.add(format!("{name}/bias"), [1, c_out, 1, 1], Init::Zeros);
        Ok(Self { weight, bias, geom })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}/weight"), [1, 1, fan_in, fan_out], Init::HeNormal { fan_in });
        let bias = store.add(format!("{name}/bias"), [1, fan_out, 1, 1], Init::Zeros);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.dense(x, w, b)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            gamma: store.add(format!("{name}/gamma"), shape, Init::Ones),
            beta: store.add(format!("{name}/beta"), shape, Init::Zeros),
            running_mean: store.add_buffer(format!("{name}/running_mean"), Tensor::zeros(shape)),
            running_var: store.add_buffer(format!("{name}/running_var"), Tensor::ones(shape)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            T::of(BN_EPS),
            T::of(BN_MOMENTUM),
        )
    }
}

/// Token-wise two-layer perceptron `C → C → C` with a ReLU hidden layer,
/// realized as pointwise convolutions so it applies to feature maps, packed
/// window tokens and pooled channel vectors alike.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            fc1: Conv2d::new(store, &format!("{name}/fc1"), ConvKind::Pc, channels, channels, 1)?,
            fc2: Conv2d::new(store, &format!("{name}/fc2"), ConvKind::Pc, channels, channels, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

/// Learnable per-channel multiplier, initialized to one.
#[derive(Clone, Debug)]
pub struct ChannelWeights {
    pub omega: ParamId,
}

impl ChannelWeights {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            omega: store.add(format!("{name}/omega"), [1, channels, 1, 1], Init::Ones),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.omega);
        g.mul(x, w)
    }
}
