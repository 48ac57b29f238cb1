//! Networks: the two-layer net (ReLU or Ramp, optional mean-field scaling)
//! and a fully connected ReLU MLP.
//!
//! Every network keeps its parameters in one flat vector. A
//! [`GradientBundle`] uses the same layout as the parameter vector of the
//! network that produced it, so optimizers and masks work on index ranges.

mod mlp;
mod two_layer;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mlp::MlpNet;
pub use two_layer::{
    b_lm, init_curriculum_net, init_mean_field_net, init_one_step_net, init_one_step_net_with_grid,
    one_step_bias_grid, one_step_grid_size, recommended_one_step_width, TwoLayerNet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Ramp,
}

impl Activation {
    #[inline]
    pub fn apply(self, y: f64) -> f64 {
        match self {
            Activation::Relu => y.max(0.0),
            Activation::Ramp => {
                if y <= 0.0 {
                    0.0
                } else if y <= 1.0 {
                    y
                } else {
                    1.0
                }
            }
        }
    }

    /// Derivative with the kinks assigned slope 0.
    #[inline]
    pub fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Ramp => {
                if y > 0.0 && y < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Points where the derivative jumps.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            Activation::Relu => &[0.0],
            Activation::Ramp => &[0.0, 1.0],
        }
    }
}

pub fn activation(kind: Activation, y: f64) -> f64 {
    kind.apply(y)
}

/// Gradient values laid out exactly like the owning network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    values: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// A scalar-output network over `d` real inputs.
pub trait Network {
    fn input_dim(&self) -> usize;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn forward(&self, x: &[f64]) -> f64;

    /// `upstream * dNN(x)/dtheta`.
    fn gradient(&self, x: &[f64], upstream: f64) -> GradientBundle;

    fn count_parameters(&self) -> usize {
        self.params().len()
    }

    /// Predictions for the rows of `xs` (row-major, `input_dim` columns).
    fn forward_batch(&self, xs: &[f64]) -> Vec<f64> {
        xs.chunks_exact(self.input_dim()).map(|x| self.forward(x)).collect()
    }

    /// Runs the batch forward, asks `coeff(row, prediction)` for each row's
    /// upstream derivative, and adds `sum_row coeff * dNN(x_row)/dtheta`
    /// into `grad_out`. Returns the predictions.
    fn accumulate_gradient(
        &self,
        xs: &[f64],
        coeff: &mut dyn FnMut(usize, f64) -> f64,
        grad_out: &mut [f64],
    ) -> Vec<f64> {
        let preds = self.forward_batch(xs);
        for (row, (x, &p)) in xs.chunks_exact(self.input_dim()).zip(&preds).enumerate() {
            let c = coeff(row, p);
            if c != 0.0 {
                let g = self.gradient(x, c);
                for (o, v) in grad_out.iter_mut().zip(g.as_slice()) {
                    *o += v;
                }
            }
        }
        preds
    }
}

/// Shape of a network, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    TwoLayer { n: usize, d: usize },
    Mlp { layer_dims: Vec<usize> },
}

/// JSON checkpoint: architecture, flat parameters, activation, scaling flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub params: Vec<f64>,
    pub activation: Activation,
    pub mean_field: bool,
}

/// Either network, for config-driven runs.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyNet {
    TwoLayer(TwoLayerNet),
    Mlp(MlpNet),
}

impl AnyNet {
    pub fn checkpoint(&self) -> Checkpoint {
        match self {
            AnyNet::TwoLayer(net) => Checkpoint {
                architecture: Architecture::TwoLayer { n: net.width(), d: net.input_dim() },
                params: net.params().to_vec(),
                activation: net.activation(),
                mean_field: net.mean_field(),
            },
            AnyNet::Mlp(net) => Checkpoint {
                architecture: Architecture::Mlp { layer_dims: net.layer_dims().to_vec() },
                params: net.params().to_vec(),
                activation: Activation::Relu,
                mean_field: false,
            },
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let net = match &c.architecture {
            Architecture::TwoLayer { n, d } => {
                let mut net = TwoLayerNet::zeros(*n, *d, c.activation)?;
                net.set_mean_field(c.mean_field);
                AnyNet::TwoLayer(net)
            }
            Architecture::Mlp { layer_dims } => {
                if c.activation != Activation::Relu || c.mean_field {
                    return Err(Error::InvalidParams("MLP checkpoints are plain ReLU".into()));
                }
                AnyNet::Mlp(MlpNet::zeros(layer_dims)?)
            }
        };
        let mut net = net;
        if net.params().len() != c.params.len() {
            return Err(Error::InvalidParams(format!(
                "checkpoint has {} parameters, architecture needs {}",
                c.params.len(),
                net.params().len()
            )));
        }
        if c.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("checkpoint parameters must be finite".into()));
        }
        net.params_mut().copy_from_slice(&c.params);
        Ok(net)
    }

    /// Ranges of every parameter (the "train everything" mask).
    pub fn all_params(&self) -> Range<usize> {
        0..self.params().len()
    }
}

impl Network for AnyNet {
    fn input_dim(&self) -> usize {
        match self {
            AnyNet::TwoLayer(n) => n.input_dim(),
            AnyNet::Mlp(n) => n.input_dim(),
        }
    }

    fn params(&self) -> &[f64] {
        match self {
            AnyNet::TwoLayer(n) => n.params(),
            AnyNet::Mlp(n) => n.params(),
        }
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            AnyNet::TwoLayer(n) => n.params_mut(),
            AnyNet::Mlp(n) => n.params_mut(),
        }
    }

    fn forward(&self, x: &[f64]) -> f64 {
        match self {
            AnyNet::TwoLayer(n) => n.forward(x),
            AnyNet::Mlp(n) => n.forward(x),
        }
    }

    fn gradient(&self, x: &[f64], upstream: f64) -> GradientBundle {
        match self {
            AnyNet::TwoLayer(n) => n.gradient(x, upstream),
            AnyNet::Mlp(n) => n.gradient(x, upstream),
        }
    }

    fn forward_batch(&self, xs: &[f64]) -> Vec<f64> {
        match self {
            AnyNet::TwoLayer(n) => n.forward_batch(xs),
            AnyNet::Mlp(n) => n.forward_batch(xs),
        }
    }

    fn accumulate_gradient(
        &self,
        xs: &[f64],
        coeff: &mut dyn FnMut(usize, f64) -> f64,
        grad_out: &mut [f64],
    ) -> Vec<f64> {
        match self {
            AnyNet::TwoLayer(n) => n.accumulate_gradient(xs, coeff, grad_out),
            AnyNet::Mlp(n) => n.accumulate_gradient(xs, coeff, grad_out),
        }
    }
}

/// Total trainable scalars.
pub fn count_parameters(net: &dyn Network) -> usize {
    net.count_parameters()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations() {
        assert_eq!(activation(Activation::Relu, -3.0), 0.0);
        assert_eq!(activation(Activation::Relu, 2.5), 2.5);
        assert_eq!(activation(Activation::Ramp, 0.4), 0.4);
        assert_eq!(activation(Activation::Ramp, 7.0), 1.0);
        assert_eq!(activation(Activation::Ramp, 0.0), 0.0);
        assert_eq!(activation(Activation::Ramp, 1.0), 1.0);
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::Ramp.derivative(0.0), 0.0);
        assert_eq!(Activation::Ramp.derivative(1.0), 0.0);
        assert_eq!(Activation::Ramp.derivative(0.5), 1.0);
    }

    #[test]
    fn parameter_counts() {
        let net = TwoLayerNet::zeros(3, 5, Activation::Relu).unwrap();
        assert_eq!(count_parameters(&net), 21);
        let single = TwoLayerNet::zeros(1, 1, Activation::Relu).unwrap();
        assert_eq!(count_parameters(&single), 3);
        let dims = [100, 512, 1024, 512, 64, 1];
        let mlp = MlpNet::zeros(&dims).unwrap();
        let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(count_parameters(&mlp), expected);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = crate::rng::seeded(4);
        let nets = [
            AnyNet::TwoLayer(init_mean_field_net(16, 7, &mut rng)),
            AnyNet::Mlp(MlpNet::pytorch_init(&[7, 5, 3, 1], &mut rng).unwrap()),
        ];
        for net in nets {
            let json = serde_json::to_string(&net.checkpoint()).unwrap();
            let back = AnyNet::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
            assert_eq!(back, net);
        }
    }

    #[test]
    fn checkpoint_rejects_wrong_length() {
        let c = Checkpoint {
            architecture: Architecture::TwoLayer { n: 2, d: 3 },
            params: vec![0.0; 5],
            activation: Activation::Relu,
            mean_field: false,
        };
        assert!(AnyNet::from_checkpoint(&c).is_err());
    }
}
