use serde::{Deserialize, Serialize};

use super::tensor::QuantizedTensor;
use crate::error::{Error, Result};

/// Checkpoint format version written by [`QuantizedModel::to_json`].
pub const FORMAT_VERSION: u32 = 1;

/// Stride-1 square convolution with zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// Shape `[out_channels, in_channels, kernel, kernel]`.
    pub weights: QuantizedTensor,
    pub bias: Vec<f64>,
}

/// Fully connected layer over the flattened input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Shape `[outputs, inputs]`.
    pub weights: QuantizedTensor,
    pub bias: Vec<f64>,
}

/// Per-channel affine transform standing in for a frozen batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineNorm {
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    MaxPool2d { size: usize },
    AffineNorm(AffineNorm),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::AffineNorm(_) => "affine_norm",
        }
    }

    pub fn weights(&self) -> Option<&QuantizedTensor> {
        match self {
            Layer::Conv2d(c) => Some(&c.weights),
            Layer::Dense(d) => Some(&d.weights),
            _ => None,
        }
    }

    fn weights_mut(&mut self) -> Option<&mut QuantizedTensor> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.weights),
            Layer::Dense(d) => Some(&mut d.weights),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&[f64]> {
        match self {
            Layer::Conv2d(c) => Some(&c.bias),
            Layer::Dense(d) => Some(&d.bias),
            _ => None,
        }
    }

    /// Output shape `[c, h, w]` for an input of the given shape.
    fn output_shape(&self, input: [usize; 3], position: usize) -> Result<[usize; 3]> {
        let mismatch = |expected: Vec<usize>| Error::Shape {
            context: format!("layer {position} ({})", self.name()),
            expected,
            got: input.to_vec(),
        };
        match self {
            Layer::Conv2d(c) => {
                if c.weights.shape() != [c.out_channels, c.in_channels, c.kernel, c.kernel]
                    || c.bias.len() != c.out_channels
                {
                    return Err(mismatch(vec![c.out_channels, c.in_channels, c.kernel, c.kernel]));
                }
                if input[0] != c.in_channels
                    || input[1] + 2 * c.padding < c.kernel
                    || input[2] + 2 * c.padding < c.kernel
                {
                    return Err(mismatch(vec![c.in_channels, input[1], input[2]]));
                }
                Ok([
                    c.out_channels,
                    input[1] + 2 * c.padding - c.kernel + 1,
                    input[2] + 2 * c.padding - c.kernel + 1,
                ])
            }
            Layer::Dense(d) => {
                if d.weights.shape() != [d.outputs, d.inputs] || d.bias.len() != d.outputs {
                    return Err(mismatch(vec![d.outputs, d.inputs]));
                }
                if input.iter().product::<usize>() != d.inputs {
                    return Err(mismatch(vec![d.inputs, 1, 1]));
                }
                Ok([d.outputs, 1, 1])
            }
            Layer::Relu => Ok(input),
            Layer::MaxPool2d { size } => {
                if *size == 0 || input[1] < *size || input[2] < *size {
                    return Err(mismatch(vec![input[0], *size, *size]));
                }
                Ok([input[0], input[1] / size, input[2] / size])
            }
            Layer::AffineNorm(n) => {
                if n.gain.len() != input[0] || n.shift.len() != input[0] {
                    return Err(mismatch(vec![n.gain.len(), input[1], input[2]]));
                }
                Ok(input)
            }
        }
    }
}

/// Ordered layer stack with quantized weights and a softmax cross-entropy head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct QuantizedModel {
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<Layer>,
    shapes: Vec<[usize; 3]>,
    param_positions: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<Layer>,
}

impl TryFrom<Checkpoint> for QuantizedModel {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
                c.format_version
            )));
        }
        QuantizedModel::new(c.input_shape, c.num_classes, c.layers)
    }
}

impl From<QuantizedModel> for Checkpoint {
    fn from(m: QuantizedModel) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            input_shape: m.input_shape,
            num_classes: m.num_classes,
            layers: m.layers,
        }
    }
}

impl QuantizedModel {
    pub fn new(input_shape: [usize; 3], num_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::input("model needs at least two classes"));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape);
        let mut shape = input_shape;
        for (position, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(shape, position)?;
            shapes.push(shape);
        }
        if shape.iter().product::<usize>() != num_classes {
            return Err(Error::Shape {
                context: "model output".into(),
                expected: vec![num_classes],
                got: shape.to_vec(),
            });
        }
        let param_positions: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weights().is_some())
            .map(|(i, _)| i)
            .collect();
        if param_positions.is_empty() {
            return Err(Error::input("model has no parametric layer"));
        }
        let bits = layers[param_positions[0]].weights().map(|w| w.bits());
        if param_positions
            .iter()
            .any(|&p| layers[p].weights().map(|w| w.bits()) != bits)
        {
            return Err(Error::input("all parametric layers must share one bitwidth"));
        }
        Ok(QuantizedModel {
            input_shape,
            num_classes,
            layers,
            shapes,
            param_positions,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Input shape of layer `position` (index `layers().len()` gives the output).
    pub(crate) fn shape_at(&self, position: usize) -> [usize; 3] {
        self.shapes[position]
    }

    /// Number of parametric (conv/dense) layers.
    pub fn num_param_layers(&self) -> usize {
        self.param_positions.len()
    }

    /// Position in `layers()` of parametric layer `l`.
    pub fn param_position(&self, l: usize) -> usize {
        self.param_positions[l]
    }

    pub(crate) fn param_index_of(&self, position: usize) -> Option<usize> {
        self.param_positions.binary_search(&position).ok()
    }

    pub fn weights(&self, l: usize) -> &QuantizedTensor {
        self.layers[self.param_positions[l]]
            .weights()
            .expect("parametric layer")
    }

    /// Mutable weights of parametric layer `l`. Biases and norm parameters are
    /// never exposed mutably.
    pub fn weights_mut(&mut self, l: usize) -> &mut QuantizedTensor {
        let p = self.param_positions[l];
        self.layers[p].weights_mut().expect("parametric layer")
    }

    pub fn bits(&self) -> u8 {
        self.weights(0).bits()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        (0..self.num_param_layers()).map(|l| self.weights(l).len()).collect()
    }

    pub fn total_weights(&self) -> usize {
        self.layer_sizes().iter().sum()
    }

    /// Dequantized weights of every parametric layer.
    pub fn dequantized(&self) -> Vec<Vec<f64>> {
        (0..self.num_param_layers())
            .map(|l| self.weights(l).dequantize())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}
