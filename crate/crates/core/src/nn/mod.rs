//! Deterministic fixed-point network engine: inference, per-weight gradients
//! through the dequantized weights, diagonal curvature and accuracy.

mod engine;
mod model;
mod spec;
mod tensor;
pub mod toy;

pub use engine::{
    accuracy_with, backward, curvature_diag, evaluate, forward, forward_with, loss_and_grad_with,
    predict_with, realize_weights, softmax, Batch, Dataset, ForwardOutput, FullGradients,
    LayerValues, NoiseSpec,
};
pub(crate) use engine::backward_with_loss;
pub use model::{AffineNorm, Conv2d, Dense, Layer, QuantizedModel, FORMAT_VERSION};
pub use spec::{FloatParams, LayerSpec, ModelSpec};
pub use tensor::QuantizedTensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::stats;
    use rand::Rng;

    fn random_batch(model: &QuantizedModel, n: usize, seed: u64) -> Batch {
        let mut r = rng::stream(seed, &[]);
        let inputs = (0..n)
            .map(|_| (0..model.input_len()).map(|_| r.random::<f64>()).collect())
            .collect();
        let labels = (0..n).map(|_| r.random_range(0..model.num_classes())).collect();
        Batch::new(inputs, labels).unwrap()
    }

    /// conv(pad) -> norm -> relu -> maxpool -> dense -> relu -> dense
    fn every_layer_model(seed: u64) -> QuantizedModel {
        let spec = ModelSpec {
            input_shape: [2, 6, 6],
            num_classes: 3,
            bits: 8,
            layers: vec![
                LayerSpec::Conv { out_channels: 3, kernel: 3, padding: 1 },
                LayerSpec::Norm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense { outputs: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { outputs: 3 },
            ],
        };
        let mut params = spec.init_params(seed).unwrap();
        let mut r = rng::stream(seed, &[99]);
        for b in params.biases.iter_mut().flatten() {
            *b = r.random_range(-0.2..0.2);
        }
        for (g, s) in &mut params.norms {
            g.iter_mut().for_each(|v| *v = r.random_range(0.5..1.5));
            s.iter_mut().for_each(|v| *v = r.random_range(-0.1..0.1));
        }
        spec.assemble(&params).unwrap()
    }

    fn central_difference(model: &QuantizedModel, batch: &Batch, l: usize, i: usize, eps: f64) -> f64 {
        let mut w = model.dequantized();
        w[l][i] += eps;
        let (_, up) = forward_with(model, &w, batch).unwrap();
        w[l][i] -= 2.0 * eps;
        let (_, down) = forward_with(model, &w, batch).unwrap();
        (up - down) / (2.0 * eps)
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let model = toy::dense(&[vec![0; 12]], &[4, 3], 0.1, 4).unwrap();
        let batch = random_batch(&model, 5, 1);
        let out = forward(&model, &batch, NoiseSpec::CLEAN, 0).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_weight_logit() {
        // w = 2 at scale 0.5 times input 0.6 (exact on the 8-bit grid).
        let model = toy::dense(&[vec![2, 0]], &[1, 2], 0.5, 4).unwrap();
        let batch = Batch::new(vec![vec![0.6]], vec![0]).unwrap();
        let out = forward(&model, &batch, NoiseSpec::CLEAN, 0).unwrap();
        assert!((out.logits[0][0] - 0.6).abs() < 1e-12);
        assert_eq!(out.logits[0][1], 0.0);
    }

    #[test]
    fn clean_passes_are_deterministic_and_noise_is_fresh() {
        let model = every_layer_model(4);
        let batch = random_batch(&model, 6, 2);
        let a = forward(&model, &batch, NoiseSpec::CLEAN, 1).unwrap();
        let b = forward(&model, &batch, NoiseSpec::CLEAN, 2).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        let noisy = NoiseSpec::new(0.05, 1).unwrap();
        let c = forward(&model, &batch, noisy, 1).unwrap();
        let d = forward(&model, &batch, noisy, 2).unwrap();
        let e = forward(&model, &batch, noisy, 1).unwrap();
        assert_ne!(c.loss, d.loss);
        assert_eq!(c.loss.to_bits(), e.loss.to_bits());
    }

    #[test]
    fn rejects_bad_batches() {
        let model = every_layer_model(1);
        let short = Batch::new(vec![vec![0.0; 3]], vec![0]).unwrap();
        assert!(matches!(forward(&model, &short, NoiseSpec::CLEAN, 0), Err(crate::Error::Shape { .. })));
        let empty = Batch::new(vec![], vec![]).unwrap();
        assert!(forward(&model, &empty, NoiseSpec::CLEAN, 0).is_err());
        assert!(curvature_diag(&model, &empty).is_err());
        let bad_label = Batch::new(vec![vec![0.0; 72]], vec![7]).unwrap();
        assert!(backward(&model, &bad_label, NoiseSpec::CLEAN, 0).is_err());
        assert!(NoiseSpec::new(-1.0, 1).is_err());
        assert!(NoiseSpec::new(0.1, 0).is_err());
    }

    #[test]
    fn non_finite_loss_names_layer() {
        let mut params = ModelSpec {
            input_shape: [1, 1, 2],
            num_classes: 2,
            bits: 8,
            layers: vec![LayerSpec::Dense { outputs: 2 }],
        };
        params.layers.push(LayerSpec::Relu);
        let mut p = params.init_params(0).unwrap();
        p.biases[0][0] = f64::INFINITY;
        let model = params.assemble(&p).unwrap();
        let batch = Batch::new(vec![vec![0.5, 0.5]], vec![0]).unwrap();
        match forward(&model, &batch, NoiseSpec::CLEAN, 0) {
            Err(crate::Error::Numeric { layer: 0, kind: "dense" }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gradients_match_central_differences_on_every_layer_type() {
        for seed in 0..3 {
            let model = every_layer_model(seed);
            let batch = random_batch(&model, 4, 10 + seed);
            let g = backward(&model, &batch, NoiseSpec::CLEAN, 0).unwrap();
            for l in 0..model.num_param_layers() {
                for i in 0..model.weights(l).len() {
                    let fd = central_difference(&model, &batch, l, i, 1e-3);
                    let err = (g[l][i] - fd).abs();
                    assert!(err <= 1e-4 * fd.abs().max(1.0), "layer {l} weight {i}: {} vs {fd}", g[l][i]);
                }
            }
        }
    }

    #[test]
    fn converged_batch_has_vanishing_gradient() {
        // Huge margin for the correct class drives the softmax residual to ~0.
        let model = toy::dense(&[vec![127, -127, -127, 127]], &[2, 2], 1.0, 8).unwrap();
        let batch = Batch::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]).unwrap();
        let g = backward(&model, &batch, NoiseSpec::CLEAN, 0).unwrap();
        assert!(g.iter().flatten().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn averaging_noisy_gradients_reduces_variance() {
        let model = every_layer_model(7);
        let batch = random_batch(&model, 4, 3);
        let spread = |samples: usize| {
            let noise = NoiseSpec::new(0.05, samples).unwrap();
            let draws: Vec<f64> = (0..100)
                .map(|s| backward(&model, &batch, noise, s).unwrap()[2][0])
                .collect();
            stats::variance(&draws)
        };
        let one = spread(1);
        let four = spread(4);
        assert!(four < one, "N_S=4 variance {four} not below N_S=1 variance {one}");
    }

    #[test]
    fn curvature_is_exact_for_linear_softmax() {
        // Single dense layer: d2L/dw_{c,j}^2 = mean_n x_{n,j}^2 p_c (1 - p_c).
        let model = toy::dense(&[vec![3, -1, 2, 0, -2, 1]], &[2, 3], 0.25, 4).unwrap();
        let batch = random_batch(&model, 5, 8);
        let h = curvature_diag(&model, &batch).unwrap();
        let w = model.dequantized();
        for c in 0..3 {
            for j in 0..2 {
                let mut expect = 0.0;
                for n in 0..batch.len() {
                    let x = batch.input(n);
                    let z: Vec<f64> = (0..3).map(|k| w[0][k * 2] * x[0] + w[0][k * 2 + 1] * x[1]).collect();
                    let p = softmax(&z);
                    expect += x[j] * x[j] * p[c] * (1.0 - p[c]);
                }
                expect /= batch.len() as f64;
                assert!((h[0][c * 2 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn curvature_is_nonnegative_and_zero_for_zero_model() {
        let model = every_layer_model(5);
        let batch = random_batch(&model, 6, 4);
        let h = curvature_diag(&model, &batch).unwrap();
        assert!(h.iter().flatten().all(|&v| v >= 0.0));
        let zero = toy::dense(&[vec![0; 8], vec![0; 8]], &[4, 2, 4], 0.1, 4).unwrap();
        let batch = random_batch(&zero, 3, 1);
        let h = curvature_diag(&zero, &batch).unwrap();
        assert!(h.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn curvature_rank_correlates_with_finite_difference_hessian() {
        let spec = ModelSpec {
            input_shape: [1, 1, 4],
            num_classes: 3,
            bits: 8,
            layers: vec![
                LayerSpec::Dense { outputs: 6 },
                LayerSpec::Relu,
                LayerSpec::Dense { outputs: 3 },
            ],
        };
        let model = spec.init(11).unwrap();
        let batch = random_batch(&model, 16, 12);
        let h = curvature_diag(&model, &batch).unwrap();
        let base = model.dequantized();
        let (_, l0) = forward_with(&model, &base, &batch).unwrap();
        // Small step keeps the stencil from straddling ReLU kinks.
        let eps = 1e-5;
        let mut approx = Vec::new();
        let mut fd = Vec::new();
        for l in 0..model.num_param_layers() {
            for i in 0..model.weights(l).len() {
                let mut w = base.clone();
                w[l][i] += eps;
                let (_, up) = forward_with(&model, &w, &batch).unwrap();
                w[l][i] -= 2.0 * eps;
                let (_, down) = forward_with(&model, &w, &batch).unwrap();
                fd.push((up - 2.0 * l0 + down) / (eps * eps));
                approx.push(h[l][i]);
            }
        }
        let rho = stats::spearman(&approx, &fd);
        assert!(rho >= 0.8, "spearman {rho}");
    }

    #[test]
    fn evaluate_examples() {
        // Bias-free model whose second logit always dominates on positive inputs.
        let model = toy::dense(&[vec![0, 0, 5, 5]], &[2, 2], 0.1, 4).unwrap();
        let inputs = (0..20).map(|i| vec![0.1 + i as f64 / 40.0, 0.5]).collect();
        let data = Batch::new(inputs, vec![1; 20]).unwrap();
        assert_eq!(evaluate(&model, &data, NoiseSpec::CLEAN, 0).unwrap(), 1.0);

        let model = every_layer_model(2);
        let mut data = random_batch(&model, 1000, 77);
        let mut r = rng::stream(5, &[]);
        let labels: Vec<usize> = (0..1000).map(|_| r.random_range(0..3)).collect();
        data = Batch::new(data.inputs().to_vec(), labels).unwrap();
        let acc = evaluate(&model, &data, NoiseSpec::CLEAN, 0).unwrap();
        // Three classes: chance 1/3, binomial sd ~0.015.
        assert!((acc - 1.0 / 3.0).abs() < 0.05, "accuracy {acc}");
        let noisy = NoiseSpec::new(0.01, 1).unwrap();
        assert_eq!(
            evaluate(&model, &data, noisy, 3).unwrap(),
            evaluate(&model, &data, noisy, 3).unwrap()
        );
    }

    #[test]
    fn random_labels_on_ten_classes_sit_near_chance() {
        let spec = ModelSpec {
            input_shape: [1, 4, 4],
            num_classes: 10,
            bits: 8,
            layers: vec![LayerSpec::Dense { outputs: 10 }],
        };
        let model = spec.init(3).unwrap();
        let mut r = rng::stream(21, &[]);
        let inputs = (0..1000).map(|_| (0..16).map(|_| r.random::<f64>()).collect()).collect();
        let labels = (0..1000).map(|_| r.random_range(0..10)).collect();
        let data = Batch::new(inputs, labels).unwrap();
        let acc = evaluate(&model, &data, NoiseSpec::CLEAN, 0).unwrap();
        assert!((acc - 0.1).abs() <= 0.03, "accuracy {acc}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut model = every_layer_model(9);
        model.weights_mut(1).protect(3).unwrap();
        let text = model.to_json().unwrap();
        let back = QuantizedModel::from_json(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_json().unwrap(), text);
        let wrong = text.replace("\"format_version\":1", "\"format_version\":9");
        assert!(matches!(QuantizedModel::from_json(&wrong), Err(crate::Error::Format(_))));
    }
}
