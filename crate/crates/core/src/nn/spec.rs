use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::engine::LayerValues;
use super::model::{AffineNorm, Conv2d, Dense, Layer, QuantizedModel};
use super::tensor::QuantizedTensor;
use crate::error::{Error, Result};
use crate::rng;

/// Architecture description without parameter values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, padding: usize },
    Dense { outputs: usize },
    Relu,
    MaxPool { size: usize },
    Norm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub bits: u8,
    pub layers: Vec<LayerSpec>,
}

/// Full-precision parameters matching a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatParams {
    pub weights: LayerValues,
    pub biases: LayerValues,
    /// `(gain, shift)` for each norm layer in order.
    pub norms: Vec<(Vec<f64>, Vec<f64>)>,
}

struct Dims {
    /// `(weight shape, bias len, fan_in)` per parametric layer.
    params: Vec<(Vec<usize>, usize, usize)>,
    norms: Vec<usize>,
}

impl ModelSpec {
    /// Small CNN used for desk-scale experiments: two conv blocks with frozen
    /// norms and two dense layers.
    pub fn desk_cnn(input_shape: [usize; 3], num_classes: usize, bits: u8) -> Self {
        ModelSpec {
            input_shape,
            num_classes,
            bits,
            layers: vec![
                LayerSpec::Conv { out_channels: 8, kernel: 3, padding: 1 },
                LayerSpec::Norm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv { out_channels: 16, kernel: 3, padding: 1 },
                LayerSpec::Norm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense { outputs: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { outputs: num_classes },
            ],
        }
    }

    fn dims(&self) -> Result<Dims> {
        let [mut c, mut h, mut w] = self.input_shape;
        let mut params = Vec::new();
        let mut norms = Vec::new();
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv { out_channels, kernel, padding } => {
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(Error::input("convolution kernel larger than input"));
                    }
                    params.push((vec![out_channels, c, kernel, kernel], out_channels, c * kernel * kernel));
                    h = h + 2 * padding - kernel + 1;
                    w = w + 2 * padding - kernel + 1;
                    c = out_channels;
                }
                LayerSpec::Dense { outputs } => {
                    let inputs = c * h * w;
                    params.push((vec![outputs, inputs], outputs, inputs));
                    (c, h, w) = (outputs, 1, 1);
                }
                LayerSpec::MaxPool { size } => {
                    if size == 0 || h < size || w < size {
                        return Err(Error::input("pooling window larger than input"));
                    }
                    h /= size;
                    w /= size;
                }
                LayerSpec::Relu => {}
                LayerSpec::Norm => norms.push(c),
            }
        }
        Ok(Dims { params, norms })
    }

    /// He-normal weights, zero biases, identity norms.
    pub fn init_params(&self, seed: u64) -> Result<FloatParams> {
        let dims = self.dims()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, (shape, bias_len, fan_in)) in dims.params.iter().enumerate() {
            let mut rng = rng::stream(seed, &[0x696e_6974, l as u64]);
            let normal = Normal::new(0.0, (2.0 / *fan_in as f64).sqrt()).expect("finite std");
            let n: usize = shape.iter().product();
            weights.push((0..n).map(|_| normal.sample(&mut rng)).collect());
            biases.push(vec![0.0; *bias_len]);
        }
        let norms = dims.norms.iter().map(|&c| (vec![1.0; c], vec![0.0; c])).collect();
        Ok(FloatParams { weights, biases, norms })
    }

    /// Quantize full-precision parameters into a model.
    pub fn assemble(&self, params: &FloatParams) -> Result<QuantizedModel> {
        let dims = self.dims()?;
        if params.weights.len() != dims.params.len() || params.norms.len() != dims.norms.len() {
            return Err(Error::input("parameter set does not match model spec"));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut l = 0;
        let mut k = 0;
        let mut channels = self.input_shape[0];
        for spec in &self.layers {
            match *spec {
                LayerSpec::Conv { out_channels, kernel, padding } => {
                    let shape = dims.params[l].0.clone();
                    let weights = QuantizedTensor::quantize(shape, &params.weights[l], self.bits)?;
                    layers.push(Layer::Conv2d(Conv2d {
                        in_channels: channels,
                        out_channels,
                        kernel,
                        padding,
                        weights,
                        bias: params.biases[l].clone(),
                    }));
                    channels = out_channels;
                    l += 1;
                }
                LayerSpec::Dense { outputs } => {
                    let shape = dims.params[l].0.clone();
                    let inputs = shape[1];
                    let weights = QuantizedTensor::quantize(shape, &params.weights[l], self.bits)?;
                    layers.push(Layer::Dense(Dense {
                        inputs,
                        outputs,
                        weights,
                        bias: params.biases[l].clone(),
                    }));
                    channels = outputs;
                    l += 1;
                }
                LayerSpec::Relu => layers.push(Layer::Relu),
                LayerSpec::MaxPool { size } => layers.push(Layer::MaxPool2d { size }),
                LayerSpec::Norm => {
                    let (gain, shift) = params.norms[k].clone();
                    layers.push(Layer::AffineNorm(AffineNorm { gain, shift }));
                    k += 1;
                }
            }
        }
        QuantizedModel::new(self.input_shape, self.num_classes, layers)
    }

    pub fn init(&self, seed: u64) -> Result<QuantizedModel> {
        self.assemble(&self.init_params(seed)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_cnn_shapes_compose() {
        let spec = ModelSpec::desk_cnn([1, 16, 16], 10, 8);
        let model = spec.init(3).unwrap();
        assert_eq!(model.num_param_layers(), 4);
        assert_eq!(model.layer_sizes(), vec![72, 1152, 16384, 640]);
        assert_eq!(model.bits(), 8);
    }

    #[test]
    fn init_is_seeded() {
        let spec = ModelSpec::desk_cnn([1, 8, 8], 4, 6);
        assert_eq!(spec.init(1).unwrap(), spec.init(1).unwrap());
        assert_ne!(spec.init(1).unwrap(), spec.init(2).unwrap());
    }
}
