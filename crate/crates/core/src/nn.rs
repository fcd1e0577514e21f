//! Small dense networks used for coefficient mapping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Affine layer `y = W x + b`, `W` stored row-major (out × in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(input: usize, output: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_len("dense weights", input * output, weights.len())?;
        check_len("dense bias", output, bias.len())?;
        if weights.iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dense layer".into()));
        }
        Ok(Self {
            input,
            output,
            weights,
            bias,
        })
    }

    /// Weights and biases drawn from uniform(−0.1, 0.1).
    pub fn seeded<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let weights = (0..input * output).map(|_| rng.random_range(-0.1..0.1)).collect();
        let bias = (0..output).map(|_| rng.random_range(-0.1..0.1)).collect();
        Self {
            input,
            output,
            weights,
            bias,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("dense input", self.input, x.len())?;
        Ok((0..self.output)
            .map(|o| {
                let row = &self.weights[o * self.input..(o + 1) * self.input];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect())
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub(crate) fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weights);
        out.extend_from_slice(&self.bias);
    }

    pub(crate) fn read_flat(input: usize, output: usize, flat: &[f64]) -> Result<(Self, &[f64])> {
        let n = input * output + output;
        if flat.len() < n {
            return Err(Error::Bundle("network parameter file too short".into()));
        }
        let (head, rest) = flat.split_at(n);
        let layer = Dense::new(
            input,
            output,
            head[..input * output].to_vec(),
            head[input * output..].to_vec(),
        )?;
        Ok((layer, rest))
    }
}

/// Dense layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("empty network".into()));
        }
        for w in layers.windows(2) {
            check_len("layer chaining", w[0].output, w[1].input)?;
        }
        Ok(Self { layers })
    }

    pub fn seeded<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense::seeded(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].input)
            .chain(self.layers.iter().map(|l| l.output))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                for v in &mut h {
                    *v = v.max(0.0);
                }
            }
        }
        Ok(h)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.write_flat(&mut out);
        }
        out
    }

    pub fn from_flat(sizes: &[usize], flat: &[f64]) -> Result<Self> {
        let mut rest = flat;
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            let (layer, r) = Dense::read_flat(w[0], w[1], rest)?;
            layers.push(layer);
            rest = r;
        }
        if !rest.is_empty() {
            return Err(Error::Bundle("network parameter file too long".into()));
        }
        Self::new(layers)
    }
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}
