use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::params::{prefixed, Parameters};
use super::tensor::{axpy, Tensor2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            // subgradient at exactly 0 is 0, matching `derivative`
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Identity => v,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::shape(format!("unknown activation {other:?}"))),
        }
    }
}

/// Affine layer `activation(W x + b)` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: Tensor2, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "layer bias has {} entries for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Variance-preserving uniform weights (He for ReLU, LeCun otherwise),
    /// zero bias.
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let gain = match activation {
            Activation::Relu => 6.0,
            _ => 3.0,
        };
        let limit = (gain / input.max(1) as f64).sqrt();
        Self {
            weight: Tensor2::uniform(output, input, limit, rng),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn pre_activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut pre = self.weight.matvec(x)?;
        axpy(1.0, &self.bias, &mut pre);
        Ok(pre)
    }
}

impl Parameters for Dense {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![
            ("weight".to_string(), self.weight.data()),
            ("bias".to_string(), self.bias.as_slice()),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("weight".to_string(), self.weight.data_mut()),
            ("bias".to_string(), self.bias.as_mut_slice()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

/// Intermediate values of one forward pass, needed for backprop.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl MlpCache {
    /// On/off state of every ReLU unit; two inputs with equal patterns lie on
    /// the same linear piece of the network.
    pub fn relu_pattern(&self, p: &MlpParams) -> Vec<bool> {
        p.layers
            .iter()
            .zip(&self.pre)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, pre)| pre.iter().map(|v| *v > 0.0))
            .collect()
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Builds `dims[0] → dims[1] → … → dims[n]` with `hidden` activation on
    /// all but the final layer.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::shape("an MLP needs at least input and output widths"));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                Dense::init(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        self.forward_impl::<rand_chacha::ChaCha8Rng>(x, None)
    }

    /// Forward pass with inverted dropout on every hidden layer output.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        dropout: f64,
        rng: &mut R,
    ) -> Result<(Vec<f64>, MlpCache)> {
        if dropout > 0.0 {
            self.forward_impl(x, Some((dropout, rng)))
        } else {
            self.forward(x)
        }
    }

    fn forward_impl<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<(Vec<f64>, MlpCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "MLP expects input width {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let n = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.pre_activation(&current)?;
            let mut out: Vec<f64> = pre.iter().map(|v| layer.activation.apply(*v)).collect();
            let mask = match dropout.as_mut() {
                Some((rate, rng)) if i + 1 < n => {
                    let keep = 1.0 / (1.0 - *rate);
                    let mask: Vec<f64> = (0..out.len())
                        .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep })
                        .collect();
                    out.iter_mut().zip(&mask).for_each(|(o, m)| *o *= m);
                    Some(mask)
                }
                _ => None,
            };
            cache.inputs.push(std::mem::replace(&mut current, out));
            cache.pre.push(pre);
            cache.masks.push(mask);
        }
        Ok((current, cache))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: &[f64],
        grads: &mut MlpParams,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "upstream gradient has {} entries, MLP outputs {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let mut g = upstream.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(mask) = &cache.masks[i] {
                g.iter_mut().zip(mask).for_each(|(gi, m)| *gi *= m);
            }
            for (gi, pre) in g.iter_mut().zip(&cache.pre[i]) {
                *gi *= layer.activation.derivative(*pre);
            }
            let input = &cache.inputs[i];
            let gl = &mut grads.layers[i];
            for (r, gr) in g.iter().enumerate() {
                if *gr != 0.0 {
                    axpy(*gr, input, gl.weight.row_mut(r));
                }
            }
            axpy(1.0, &g, &mut gl.bias);
            let mut gin = vec![0.0; layer.input_dim()];
            for (r, gr) in g.iter().enumerate() {
                if *gr != 0.0 {
                    axpy(*gr, layer.weight.row(r), &mut gin);
                }
            }
            g = gin;
        }
        Ok(g)
    }
}

impl Parameters for MlpParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.blocks()))
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.blocks_mut()))
            .collect()
    }
}

/// Forward pass through all layers.
pub fn mlp_apply(x: &[f64], p: &MlpParams) -> Result<Vec<f64>> {
    p.forward(x).map(|(y, _)| y)
}

/// Analytic gradients of `upstream · mlp(x)` with respect to every weight,
/// bias and the input.
pub fn mlp_gradient(x: &[f64], p: &MlpParams, upstream: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
    let (_, cache) = p.forward(x)?;
    let mut grads = p.zeros_like();
    let dx = p.backward(&cache, upstream, &mut grads)?;
    Ok((grads, dx))
}
