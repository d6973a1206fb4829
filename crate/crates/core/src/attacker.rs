//! Budgeted gradient-guided bit-flip attack (BFA) on stored weight bits.
//!
//! Each step recomputes the gradient on the attack batch, then flips the
//! stored bit whose first-order loss change `g_i * scale * Δcode` is largest
//! and positive. A step costs three inference units per gradient sample. Once
//! the inference budget runs out, the attacker spends whatever Hamming
//! distance is left on MSB flips of the highest-|g| weights it has not
//! touched yet, so every attack performs exactly `HD` flips.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::bitcodec;
use crate::error::{Error, Result};
use crate::nn::{self, Batch, LayerValues, NoiseSpec, QuantizedModel};
use crate::rng;

/// Inference units charged for one forward + backward pass.
pub const UNITS_PER_PASS: usize = 3;

/// One stored bit. For BCD weights `bit` is the two's-complement position
/// (`b - 1` is the sign); for TCU weights it indexes the codeword.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BitAddress {
    pub layer: usize,
    pub weight: usize,
    pub bit: usize,
}

/// Attacker resources. The gradient sample count `N_S` comes from the
/// [`NoiseSpec`] passed alongside.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackBudget {
    /// Maximum number of bit flips (HD).
    pub hamming_distance: usize,
    /// Inference units available (T_inf).
    pub inference_budget: usize,
    /// Size of the attack batch (BS).
    pub batch_size: usize,
}

impl AttackBudget {
    pub fn new(hamming_distance: usize, inference_budget: usize, batch_size: usize) -> Self {
        AttackBudget {
            hamming_distance,
            inference_budget,
            batch_size,
        }
    }

    /// Units consumed by one gradient step.
    pub fn step_cost(noise: &NoiseSpec) -> usize {
        UNITS_PER_PASS * noise.samples
    }

    pub fn validate(&self, noise: &NoiseSpec) -> Result<()> {
        noise.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("attack batch size must be >= 1"));
        }
        if self.inference_budget < Self::step_cost(noise) {
            return Err(Error::config(format!(
                "inference budget {} cannot pay for one step ({} units at N_S = {})",
                self.inference_budget,
                Self::step_cost(noise),
                noise.samples
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub address: BitAddress,
    pub pre_code: i32,
    pub post_code: i32,
    /// Whether the weight was held in TCU storage.
    pub tcu: bool,
    /// Chosen by the budget-exhaustion fallback rather than a gradient step.
    pub fallback: bool,
    /// Loss of the pass that selected this flip (absent for fallback flips).
    pub loss_before: Option<f64>,
    /// First-order estimate of the loss change.
    pub estimated_gain: f64,
    /// Loss observed after the flip, by the next pass or the final check.
    pub measured_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub flips: Vec<FlipRecord>,
    pub units_consumed: usize,
    pub gradient_flips: usize,
    pub fallback_flips: usize,
    /// Noise-free loss of the attacked model on the attack batch.
    pub final_loss: f64,
}

impl AttackTrace {
    pub fn addresses(&self) -> impl Iterator<Item = BitAddress> + '_ {
        self.flips.iter().map(|f| f.address)
    }

    pub fn flips_on_tcu(&self) -> usize {
        self.flips.iter().filter(|f| f.tcu).count()
    }
}

/// Best positive first-order candidate, scanning in `(layer, weight, bit)`
/// order so ties resolve to the lexicographically smallest address.
pub(crate) fn best_candidate(
    model: &QuantizedModel,
    grads: &LayerValues,
    flipped: &HashSet<BitAddress>,
) -> Option<(BitAddress, i32, f64)> {
    let mut best: Option<(BitAddress, i32, f64)> = None;
    let mut best_score = 0.0;
    for (layer, g_layer) in grads.iter().enumerate() {
        let tensor = model.weights(layer);
        let bits = tensor.bits();
        let scale = tensor.scale();
        for (weight, &g) in g_layer.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let code = tensor.code(weight);
            match tensor.codeword(weight) {
                None => {
                    for j in 0..bits {
                        let post = bitcodec::flip_bit(code, j, bits).expect("valid code");
                        let score = g * scale * (post - code) as f64;
                        if score > best_score {
                            let address = BitAddress { layer, weight, bit: j as usize };
                            if !flipped.contains(&address) {
                                best_score = score;
                                best = Some((address, post, score));
                            }
                        }
                    }
                }
                Some(word) => {
                    for k in 0..word.width() {
                        let post = bitcodec::tcu_decode(&word.flipped(k).expect("in range"), bits)
                            .expect("valid width");
                        let score = g * scale * (post - code) as f64;
                        if score > best_score {
                            let address = BitAddress { layer, weight, bit: k };
                            if !flipped.contains(&address) {
                                best_score = score;
                                best = Some((address, post, score));
                            }
                        }
                    }
                }
            }
        }
    }
    best
}

/// Addresses for the budget-exhaustion fallback, in priority order.
///
/// MSBs of untouched BCD weights come first (those whose flip raises the
/// estimated loss or whose gradient is zero, then the rest), each group by
/// descending |g|. Then one loss-raising codeword bit per untouched TCU
/// weight, then any remaining bit in address order.
fn fallback_order(
    model: &QuantizedModel,
    grads: &LayerValues,
    flipped: &HashSet<BitAddress>,
    need: usize,
) -> Vec<(BitAddress, f64)> {
    let touched: HashSet<(usize, usize)> = flipped.iter().map(|a| (a.layer, a.weight)).collect();
    let mut aligned = Vec::new();
    let mut opposed = Vec::new();
    let mut tcu = Vec::new();
    for (layer, g_layer) in grads.iter().enumerate() {
        let tensor = model.weights(layer);
        let bits = tensor.bits();
        for (weight, &g) in g_layer.iter().enumerate() {
            if touched.contains(&(layer, weight)) {
                continue;
            }
            let code = tensor.code(weight);
            match tensor.codeword(weight) {
                None => {
                    let msb = bits - 1;
                    let post = bitcodec::flip_bit(code, msb, bits).expect("valid code");
                    let gain = g * tensor.scale() * (post - code) as f64;
                    let address = BitAddress { layer, weight, bit: msb as usize };
                    if g == 0.0 || gain > 0.0 {
                        aligned.push((address, gain, g.abs()));
                    } else {
                        opposed.push((address, gain, g.abs()));
                    }
                }
                Some(word) => {
                    let pick = (0..word.width())
                        .map(|k| {
                            let post = bitcodec::tcu_decode(&word.flipped(k).expect("in range"), bits)
                                .expect("valid width");
                            (k, g * tensor.scale() * (post - code) as f64)
                        })
                        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                    if let Some((k, gain)) = pick {
                        tcu.push((BitAddress { layer, weight, bit: k }, gain, g.abs()));
                    }
                }
            }
        }
    }
    let by_magnitude = |a: &(BitAddress, f64, f64), b: &(BitAddress, f64, f64)| {
        b.2.total_cmp(&a.2).then(a.0.cmp(&b.0))
    };
    aligned.sort_by(by_magnitude);
    opposed.sort_by(by_magnitude);
    tcu.sort_by(by_magnitude);
    let mut order: Vec<(BitAddress, f64)> = aligned
        .into_iter()
        .chain(opposed)
        .chain(tcu)
        .map(|(a, gain, _)| (a, gain))
        .collect();
    if order.len() < need {
        let chosen: HashSet<BitAddress> = order.iter().map(|(a, _)| *a).collect();
        'outer: for layer in 0..model.num_param_layers() {
            let tensor = model.weights(layer);
            for weight in 0..tensor.len() {
                for bit in 0..tensor.stored_width(weight) {
                    let address = BitAddress { layer, weight, bit };
                    if !flipped.contains(&address) && !chosen.contains(&address) {
                        order.push((address, 0.0));
                        if order.len() >= need {
                            break 'outer;
                        }
                    }
                }
            }
        }
    }
    order.truncate(need);
    order
}

/// Run the attack on a private copy of `model`.
pub fn bfa_attack(
    model: &QuantizedModel,
    attack_set: &Batch,
    budget: &AttackBudget,
    noise: NoiseSpec,
    seed: u64,
) -> Result<(QuantizedModel, AttackTrace)> {
    budget.validate(&noise)?;
    if attack_set.len() != budget.batch_size {
        return Err(Error::config(format!(
            "attack set holds {} samples, budget expects {}",
            attack_set.len(),
            budget.batch_size
        )));
    }
    let mut attacked = model.clone();
    let mut flips: Vec<FlipRecord> = Vec::with_capacity(budget.hamming_distance);
    let mut flipped: HashSet<BitAddress> = HashSet::new();
    let mut units = 0;
    let step_cost = AttackBudget::step_cost(&noise);
    let mut last_grads: Option<LayerValues> = None;

    while flips.len() < budget.hamming_distance && units + step_cost <= budget.inference_budget {
        let step = flips.len() as u64;
        let (loss, grads) = nn::backward_with_loss(&attacked, attack_set, noise, rng::derive(seed, &[step]))?;
        units += step_cost;
        if let Some(prev) = flips.last_mut() {
            prev.measured_loss = Some(loss);
        }
        let choice = best_candidate(&attacked, &grads, &flipped);
        last_grads = Some(grads);
        let Some((address, post, gain)) = choice else {
            break;
        };
        let tensor = attacked.weights_mut(address.layer);
        let pre = tensor.code(address.weight);
        let tcu = tensor.is_protected(address.weight);
        let applied = tensor.flip(address.weight, address.bit)?;
        debug_assert_eq!(applied, post);
        flipped.insert(address);
        flips.push(FlipRecord {
            address,
            pre_code: pre,
            post_code: applied,
            tcu,
            fallback: false,
            loss_before: Some(loss),
            estimated_gain: gain,
            measured_loss: None,
        });
    }
    let gradient_flips = flips.len();

    let remaining = budget.hamming_distance - flips.len();
    if remaining > 0 {
        let grads = match last_grads {
            Some(g) => g,
            None => nn::backward(&attacked, attack_set, noise, rng::derive(seed, &[u64::MAX]))?,
        };
        let order = fallback_order(&attacked, &grads, &flipped, remaining);
        if order.len() < remaining {
            return Err(Error::config(format!(
                "Hamming distance {} exceeds the {} stored bits available",
                budget.hamming_distance,
                flips.len() + order.len()
            )));
        }
        for (address, gain) in order {
            let tensor = attacked.weights_mut(address.layer);
            let pre = tensor.code(address.weight);
            let tcu = tensor.is_protected(address.weight);
            let post = tensor.flip(address.weight, address.bit)?;
            flipped.insert(address);
            flips.push(FlipRecord {
                address,
                pre_code: pre,
                post_code: post,
                tcu,
                fallback: true,
                loss_before: None,
                estimated_gain: gain,
                measured_loss: None,
            });
        }
    }

    let final_loss = nn::forward(&attacked, attack_set, NoiseSpec::CLEAN, 0)?.loss;
    if let Some(last) = flips.last_mut() {
        if last.measured_loss.is_none() {
            last.measured_loss = Some(final_loss);
        }
    }
    let fallback_flips = flips.len() - gradient_flips;
    Ok((
        attacked,
        AttackTrace {
            flips,
            units_consumed: units,
            gradient_flips,
            fallback_flips,
            final_loss,
        },
    ))
}

/// Attacker resources plus the hardware noise the attack runs under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub budget: AttackBudget,
    pub noise: NoiseSpec,
}

/// Outcome of one emulated attack against a defender-held dataset.
#[derive(Debug, Clone)]
pub struct Emulation {
    pub attacked: QuantizedModel,
    pub trace: AttackTrace,
    /// Post-attack accuracy on the whole dataset, under the threat's noise.
    pub accuracy: f64,
}

/// Draw `size` distinct samples of `data` as an attack batch.
pub fn sample_attack_batch(data: &Batch, size: usize, seed: u64) -> Result<Batch> {
    if size > data.len() {
        return Err(Error::config(format!(
            "attack batch of {size} requested from {} samples",
            data.len()
        )));
    }
    let mut rng = rng::stream(seed, &[0x6261_7463]);
    let mut picked = rand::seq::index::sample(&mut rng, data.len(), size).into_vec();
    picked.sort_unstable();
    Ok(data.select(&picked))
}

/// Attack `model` with a batch drawn from `data`, then score it on `data`.
pub fn emulate_attack(model: &QuantizedModel, data: &Batch, threat: &ThreatModel, seed: u64) -> Result<Emulation> {
    let batch = sample_attack_batch(data, threat.budget.batch_size, seed)?;
    let (attacked, trace) = bfa_attack(model, &batch, &threat.budget, threat.noise, rng::derive(seed, &[1]))?;
    let accuracy = nn::evaluate(&attacked, data, threat.noise, rng::derive(seed, &[2]))?;
    Ok(Emulation {
        attacked,
        trace,
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::toy;

    fn two_weight_model() -> QuantizedModel {
        // Two classes, one input feature: logits = (w0 x, w1 x).
        toy::dense(&[vec![3, -2]], &[1, 2], 0.25, 4).unwrap()
    }

    fn batch() -> Batch {
        Batch::new(vec![vec![0.8], vec![0.4], vec![1.0], vec![0.6]], vec![0, 1, 0, 0]).unwrap()
    }

    #[test]
    fn budget_validation() {
        let noise = NoiseSpec::new(0.01, 2).unwrap();
        assert!(AttackBudget::new(1, 5, 4).validate(&noise).is_err());
        assert!(AttackBudget::new(1, 6, 4).validate(&noise).is_ok());
        assert!(AttackBudget::new(1, 6, 0).validate(&noise).is_err());
        let model = two_weight_model();
        let err = bfa_attack(&model, &batch(), &AttackBudget::new(1, 2, 4), NoiseSpec::CLEAN, 0);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = bfa_attack(&model, &batch(), &AttackBudget::new(1, 30, 3), NoiseSpec::CLEAN, 0);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn exhaustive_hamming_distance_uses_every_bit() {
        let model = two_weight_model();
        let (_, trace) = bfa_attack(&model, &batch(), &AttackBudget::new(8, 1000, 4), NoiseSpec::CLEAN, 0).unwrap();
        assert_eq!(trace.flips.len(), 8);
        let unique: HashSet<_> = trace.addresses().collect();
        assert_eq!(unique.len(), 8);
        let too_many = bfa_attack(&model, &batch(), &AttackBudget::new(9, 1000, 4), NoiseSpec::CLEAN, 0);
        assert!(matches!(too_many, Err(Error::Config(_))));
    }

    #[test]
    fn fallback_fills_hamming_distance() {
        let model = two_weight_model();
        let (attacked, trace) =
            bfa_attack(&model, &batch(), &AttackBudget::new(2, 3, 4), NoiseSpec::CLEAN, 0).unwrap();
        assert_eq!(trace.flips.len(), 2);
        assert_eq!(trace.gradient_flips, 1);
        assert_eq!(trace.fallback_flips, 1);
        assert_eq!(trace.units_consumed, 3);
        let fb = &trace.flips[1];
        assert!(fb.fallback);
        assert_eq!(fb.address.bit, 3);
        assert_ne!(fb.address.weight, trace.flips[0].address.weight);
        assert_eq!(attacked.weights(0).code(fb.address.weight), fb.post_code);
    }

    #[test]
    fn zero_gradient_model_uses_fallback_only() {
        let model = toy::dense(&[vec![0, 0, 0, 0]], &[2, 2], 0.1, 4).unwrap();
        let data = Batch::new(vec![vec![0.0, 0.0]; 3], vec![0, 1, 0]).unwrap();
        let (_, trace) = bfa_attack(&model, &data, &AttackBudget::new(3, 300, 3), NoiseSpec::CLEAN, 0).unwrap();
        assert_eq!(trace.gradient_flips, 0);
        assert_eq!(trace.fallback_flips, 3);
        assert!(trace.flips.iter().take(3).all(|f| f.address.bit == 3 || f.fallback));
    }

    #[test]
    fn each_step_maximizes_first_order_gain() {
        let spec = crate::nn::ModelSpec {
            input_shape: [1, 1, 3],
            num_classes: 3,
            bits: 4,
            layers: vec![
                crate::nn::LayerSpec::Dense { outputs: 4 },
                crate::nn::LayerSpec::Relu,
                crate::nn::LayerSpec::Dense { outputs: 3 },
            ],
        };
        let model = spec.init(5).unwrap();
        let data = Batch::new(
            vec![vec![0.2, 0.9, 0.4], vec![0.7, 0.1, 0.5], vec![0.3, 0.3, 0.8]],
            vec![0, 1, 2],
        )
        .unwrap();
        let (_, trace) = bfa_attack(&model, &data, &AttackBudget::new(6, 1000, 3), NoiseSpec::CLEAN, 0).unwrap();
        let mut replay = model.clone();
        let mut seen = HashSet::new();
        for f in trace.flips.iter().filter(|f| !f.fallback) {
            let g = nn::backward(&replay, &data, NoiseSpec::CLEAN, 0).unwrap();
            let mut best = 0.0;
            for l in 0..replay.num_param_layers() {
                let t = replay.weights(l);
                for i in 0..t.len() {
                    for j in 0..t.bits() {
                        let a = BitAddress { layer: l, weight: i, bit: j as usize };
                        if seen.contains(&a) {
                            continue;
                        }
                        let d = bitcodec::flip_bit(t.code(i), j, t.bits()).unwrap() - t.code(i);
                        best = f64::max(best, g[l][i] * t.scale() * d as f64);
                    }
                }
            }
            assert!(f.estimated_gain > 0.0);
            assert_eq!(f.estimated_gain, best);
            replay.weights_mut(f.address.layer).flip(f.address.weight, f.address.bit).unwrap();
            seen.insert(f.address);
        }
    }

    #[test]
    fn tcu_weights_only_lose_one_lsb_per_flip() {
        let mut model = two_weight_model();
        model.weights_mut(0).protect(0).unwrap();
        model.weights_mut(0).protect(1).unwrap();
        let (attacked, trace) =
            bfa_attack(&model, &batch(), &AttackBudget::new(3, 1000, 4), NoiseSpec::CLEAN, 0).unwrap();
        assert_eq!(trace.flips_on_tcu(), 3);
        for f in &trace.flips {
            assert!((f.post_code - f.pre_code).abs() <= 1);
        }
        let drift: i32 = (0..2)
            .map(|i| (attacked.weights(0).code(i) - model.weights(0).code(i)).abs())
            .sum();
        assert!(drift <= 3);
    }

    #[test]
    fn trace_serializes() {
        let model = two_weight_model();
        let (_, trace) = bfa_attack(&model, &batch(), &AttackBudget::new(2, 6, 4), NoiseSpec::CLEAN, 0).unwrap();
        let json = serde_json::to_value(&trace).unwrap();
        assert_eq!(json["flips"].as_array().unwrap().len(), 2);
        assert!(json["flips"][0]["address"]["bit"].is_u64());
        assert!(json["flips"][0]["measured_loss"].is_f64());
    }
}
