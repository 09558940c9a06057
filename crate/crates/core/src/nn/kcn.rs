//! Keypoint classification network: a small fully connected classifier
//! shared across keypoints, mapping a representation `z_i` to `K` logits.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KcnConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Empty means a single linear layer.
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
}

impl KcnConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            num_classes,
            hidden_dims: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kcn {
    pub config: KcnConfig,
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KcnGrads {
    pub layers: Vec<Linear>,
}

impl KcnGrads {
    pub fn add_assign(&mut self, other: &KcnGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct KcnTape {
    inputs: Vec<Array1<f64>>,
}

impl Kcn {
    fn dims(config: &KcnConfig) -> Vec<usize> {
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden_dims);
        dims.push(config.num_classes);
        dims
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(config: KcnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = Self::dims(&config);
        let layers = dims
            .windows(2)
            .map(|d| {
                let limit = (6.0 / (d[0] + d[1]) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                Linear {
                    weight: Array2::from_shape_simple_fn((d[1], d[0]), || dist.sample(&mut rng)),
                    bias: Array1::zeros(d[1]),
                }
            })
            .collect();
        Self { config, layers }
    }

    pub fn zeros(config: KcnConfig) -> Self {
        let dims = Self::dims(&config);
        let layers = dims
            .windows(2)
            .map(|d| Linear {
                weight: Array2::zeros((d[1], d[0])),
                bias: Array1::zeros(d[1]),
            })
            .collect();
        Self { config, layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn zero_grads(&self) -> KcnGrads {
        KcnGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn forward_tape(&self, z: &Array1<f64>) -> Result<(Array1<f64>, KcnTape)> {
        if z.len() != self.config.input_dim {
            return Err(Error::Shape {
                expected: format!("representation of length {}", self.config.input_dim),
                actual: format!("length {}", z.len()),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = z.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = layer.weight.dot(&a) + &layer.bias;
            if i + 1 < self.layers.len() {
                next.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(a);
            a = next;
        }
        Ok((a, KcnTape { inputs }))
    }

    pub fn forward(&self, z: &Array1<f64>) -> Result<Array1<f64>> {
        self.forward_tape(z).map(|(logits, _)| logits)
    }

    /// Accumulates parameter gradients and returns `dL/dz`.
    pub fn backward(
        &self,
        tape: &KcnTape,
        d_logits: &Array1<f64>,
        grads: &mut KcnGrads,
    ) -> Array1<f64> {
        let mut d = d_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[i];
            let g = &mut grads.layers[i];
            for (r, &dr) in d.iter().enumerate() {
                if dr != 0.0 {
                    g.weight.row_mut(r).scaled_add(dr, input);
                }
            }
            g.bias += &d;
            let mut d_in = layer.weight.t().dot(&d);
            if i > 0 {
                // The input of layer i is a ReLU output.
                d_in.zip_mut_with(input, |dv, &a| {
                    if a <= 0.0 {
                        *dv = 0.0;
                    }
                });
            }
            d = d_in;
        }
        d
    }
}

/// Logits for one representation.
pub fn kcn_forward(z: &Array1<f64>, kcn: &Kcn) -> Result<Array1<f64>> {
    kcn.forward(z)
}
