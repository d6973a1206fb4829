//! Hand-built dense models for examples and tests.

use super::model::{Dense, Layer, QuantizedModel};
use super::tensor::QuantizedTensor;
use crate::error::{Error, Result};

/// Dense stack with ReLU between layers and zero biases. `widths` lists the
/// input width followed by each layer's output width; `codes[l]` is row-major
/// `[widths[l + 1], widths[l]]`.
pub fn dense(codes: &[Vec<i32>], widths: &[usize], scale: f64, bits: u8) -> Result<QuantizedModel> {
    if widths.len() != codes.len() + 1 {
        return Err(Error::input("need one width per layer plus the input width"));
    }
    let mut layers = Vec::new();
    for (l, c) in codes.iter().enumerate() {
        if l > 0 {
            layers.push(Layer::Relu);
        }
        let (inputs, outputs) = (widths[l], widths[l + 1]);
        layers.push(Layer::Dense(Dense {
            inputs,
            outputs,
            weights: QuantizedTensor::new(vec![outputs, inputs], c.clone(), scale, bits)?,
            bias: vec![0.0; outputs],
        }));
    }
    QuantizedModel::new([1, 1, widths[0]], widths[widths.len() - 1], layers)
}
