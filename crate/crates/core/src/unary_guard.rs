//! Attack-aware selection of weights to hold in TCU storage.
//!
//! For every layer that receives a protection budget the search draws `T`
//! candidate index sets, sampling without replacement with probability
//! `softmax(standardized S)`, and keeps the set whose worst accuracy over
//! `T_a` emulated attacks is highest. Layers are searched in isolation; the
//! union of the winners is then attacked again and both figures are kept.

use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, Gumbel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacker::{self, ThreatModel};
use crate::bitcodec::{self, Accounting, MemoryLedger, ProtectedLayer, TcuCodeword};
use crate::error::{Error, Result};
use crate::nn::{Batch, QuantizedModel};
use crate::rng;
use crate::sensitivity::{self, SensitivityMap};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub alpha: f64,
    /// Candidate index sets per layer (T).
    pub trials: usize,
    /// Emulated attacks per candidate (T_a).
    pub emulations: usize,
    pub threat: ThreatModel,
    /// Stop drawing new trials once this much time has passed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_cap: Option<Duration>,
}

impl SearchConfig {
    pub fn new(alpha: f64, trials: usize, emulations: usize, threat: ThreatModel) -> Self {
        SearchConfig {
            alpha,
            trials,
            emulations,
            threat,
            wall_clock_cap: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::input(format!("protection rate {} outside (0, 1]", self.alpha)));
        }
        if self.trials == 0 || self.emulations == 0 {
            return Err(Error::config("search needs T >= 1 and T_a >= 1"));
        }
        self.threat.budget.validate(&self.threat.noise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProtection {
    pub layer: usize,
    /// Sorted, unique.
    pub indices: Vec<usize>,
    pub codewords: Vec<TcuCodeword>,
    /// Worst emulated accuracy of the winning trial (layer in isolation).
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub worst_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub layer: usize,
    pub trial: usize,
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub worst_acc: f64,
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub mean_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnaryPlan {
    pub alpha: f64,
    pub bits: u8,
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<LayerProtection>,
    pub m_tcu: f64,
    /// Worst and mean accuracy over `T_a` attacks on the union plan.
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub worst_acc: f64,
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub mean_acc: f64,
    pub trials: Vec<TrialLog>,
    /// Set when the wall-clock cap cut the search short.
    pub partial: bool,
}

impl UnaryPlan {
    /// A plan protecting nothing.
    pub fn empty(model: &QuantizedModel) -> Self {
        UnaryPlan {
            alpha: 0.0,
            bits: model.bits(),
            layer_sizes: model.layer_sizes(),
            layers: Vec::new(),
            m_tcu: 0.0,
            worst_acc: f64::NAN,
            mean_acc: f64::NAN,
            trials: Vec::new(),
            partial: false,
        }
    }

    /// A plan from explicit per-layer index lists, without search.
    pub fn from_indices(model: &QuantizedModel, alpha: f64, per_layer: Vec<(usize, Vec<usize>)>) -> Result<Self> {
        let mut plan = UnaryPlan::empty(model);
        plan.alpha = alpha;
        for (layer, mut indices) in per_layer {
            if indices.is_empty() {
                continue;
            }
            plan.layers.push(layer_protection(model, layer, &mut indices, f64::NAN)?);
        }
        plan.layers.sort_by_key(|p| p.layer);
        plan.m_tcu = plan.ledger(model, Accounting::Formula).protection_ratio();
        Ok(plan)
    }

    pub fn protected_count(&self) -> usize {
        self.layers.iter().map(|l| l.indices.len()).sum()
    }

    pub fn indices(&self, layer: usize) -> &[usize] {
        self.layers
            .iter()
            .find(|p| p.layer == layer)
            .map_or(&[], |p| p.indices.as_slice())
    }

    /// TCU memory of the plan, measured on `model`'s current codes.
    pub fn ledger(&self, model: &QuantizedModel, mode: Accounting) -> MemoryLedger {
        let codes: Vec<Vec<i32>> = self
            .layers
            .iter()
            .map(|p| p.indices.iter().map(|&i| model.weights(p.layer).code(i)).collect())
            .collect();
        let mut layers: Vec<ProtectedLayer<'_>> = self
            .layer_sizes
            .iter()
            .map(|&size| ProtectedLayer { layer_size: size, codes: &[] })
            .collect();
        for (p, c) in self.layers.iter().zip(&codes) {
            layers[p.layer].codes = c;
        }
        bitcodec::ledger_tcu(&layers, self.bits, mode)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn layer_protection(model: &QuantizedModel, layer: usize, indices: &mut [usize], worst_acc: f64) -> Result<LayerProtection> {
    if layer >= model.num_param_layers() {
        return Err(Error::plan(format!("layer {layer} does not exist")));
    }
    let tensor = model.weights(layer);
    indices.sort_unstable();
    if indices.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::plan(format!("duplicate index in layer {layer}")));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= tensor.len()) {
        return Err(Error::plan(format!("index {i} out of range for layer {layer}")));
    }
    let codewords = indices
        .iter()
        .map(|&i| bitcodec::tcu_encode(tensor.code(i), tensor.bits()))
        .collect::<Result<_>>()?;
    Ok(LayerProtection {
        layer,
        indices: indices.to_vec(),
        codewords,
        worst_acc,
    })
}

/// Switch every planned weight to TCU storage. Values are unchanged.
pub fn apply_protection(model: &QuantizedModel, plan: &UnaryPlan) -> Result<QuantizedModel> {
    let mut out = model.clone();
    for p in &plan.layers {
        if p.layer >= out.num_param_layers() {
            return Err(Error::plan(format!("layer {} does not exist", p.layer)));
        }
        let tensor = out.weights_mut(p.layer);
        for &i in &p.indices {
            if i >= tensor.len() {
                return Err(Error::plan(format!("index {i} out of range for layer {}", p.layer)));
            }
            tensor.protect(i)?;
        }
    }
    Ok(out)
}

/// `n` distinct indices, drawn without replacement with probability
/// proportional to `exp(z_i)` where `z` is the standardized score.
pub fn sample_indices(scores: &[f64], n: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let n = n.min(scores.len());
    let mean = stats::mean(scores);
    let sd = stats::variance(scores).sqrt();
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale");
    // Gumbel-top-k is equivalent to sequential softmax sampling without
    // replacement.
    let mut keys: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let z = if sd > 0.0 { (s - mean) / sd } else { 0.0 };
            (z + gumbel.sample(rng), i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = keys[..n].iter().map(|&(_, i)| i).collect();
    out.sort_unstable();
    out
}

/// Worst and mean accuracy over `count` emulated attacks.
pub(crate) fn emulate_many(
    model: &QuantizedModel,
    val_set: &Batch,
    threat: &ThreatModel,
    count: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let accs = (0..count)
        .into_par_iter()
        .map(|e| attacker::emulate_attack(model, val_set, threat, rng::derive(seed, &[e as u64])).map(|r| r.accuracy))
        .collect::<Result<Vec<f64>>>()?;
    let worst = accs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((worst, stats::mean(&accs)))
}

/// Run the protection search on a precomputed sensitivity map.
pub fn search_with_sensitivity(
    model: &QuantizedModel,
    map: &SensitivityMap,
    layer_budgets: &[usize],
    config: &SearchConfig,
    val_set: &Batch,
    seed: u64,
) -> Result<UnaryPlan> {
    config.validate()?;
    let sizes = model.layer_sizes();
    if layer_budgets.len() != sizes.len() {
        return Err(Error::plan("one budget per layer required"));
    }
    let started = Instant::now();
    let mut plan = UnaryPlan::empty(model);
    plan.alpha = config.alpha;
    for (layer, &n) in layer_budgets.iter().enumerate() {
        if n == 0 {
            continue;
        }
        if n > sizes[layer] {
            return Err(Error::plan(format!("budget {n} exceeds layer {layer} size {}", sizes[layer])));
        }
        let mut best: Option<(f64, Vec<usize>)> = None;
        for trial in 0..config.trials {
            if let Some(cap) = config.wall_clock_cap {
                if best.is_some() && started.elapsed() > cap {
                    plan.partial = true;
                    break;
                }
            }
            let mut rng = rng::stream(seed, &[layer as u64, trial as u64]);
            let indices = sample_indices(&map.layers[layer].score, n, &mut rng);
            let mut trial_model = model.clone();
            for &i in &indices {
                trial_model.weights_mut(layer).protect(i)?;
            }
            let emu_seed = rng.random();
            let (worst, mean) = emulate_many(&trial_model, val_set, &config.threat, config.emulations, emu_seed)?;
            plan.trials.push(TrialLog {
                layer,
                trial,
                worst_acc: worst,
                mean_acc: mean,
            });
            if best.as_ref().is_none_or(|(w, _)| worst > *w) {
                best = Some((worst, indices));
            }
        }
        let (worst, mut indices) = best.expect("at least one trial");
        plan.layers.push(layer_protection(model, layer, &mut indices, worst)?);
    }
    let protected = apply_protection(model, &plan)?;
    let (worst, mean) = emulate_many(
        &protected,
        val_set,
        &config.threat,
        config.emulations,
        rng::derive(seed, &[u64::MAX]),
    )?;
    plan.worst_acc = worst;
    plan.mean_acc = mean;
    plan.m_tcu = plan.ledger(model, Accounting::Formula).protection_ratio();
    Ok(plan)
}

/// Sensitivity, top-layer budget assignment and attack-aware sampling.
pub fn search_protection(model: &QuantizedModel, config: &SearchConfig, val_set: &Batch, seed: u64) -> Result<UnaryPlan> {
    config.validate()?;
    let map = sensitivity::weight_sensitivity(model, val_set)?;
    let budgets = sensitivity::assign_budget(config.alpha, &map.layer_scores(), &model.layer_sizes())?;
    search_with_sensitivity(model, &map, &budgets, config, val_set, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacker::AttackBudget;
    use crate::nn::{self, toy, LayerSpec, ModelSpec, NoiseSpec};
    use rand::SeedableRng;

    fn toy_setup() -> (QuantizedModel, Batch) {
        let spec = ModelSpec {
            input_shape: [1, 1, 4],
            num_classes: 3,
            bits: 4,
            layers: vec![LayerSpec::Dense { outputs: 6 }, LayerSpec::Relu, LayerSpec::Dense { outputs: 3 }],
        };
        let model = spec.init(2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let inputs: Vec<Vec<f64>> = (0..24).map(|_| (0..4).map(|_| rng.random()).collect()).collect();
        let logits = nn::forward(&model, &Batch::new(inputs.clone(), vec![0; 24]).unwrap(), NoiseSpec::CLEAN, 0)
            .unwrap()
            .logits;
        // Label by the model's own prediction so clean accuracy is 100%.
        let labels = logits
            .iter()
            .map(|l| (0..3).max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a))).unwrap())
            .collect();
        (model, Batch::new(inputs, labels).unwrap())
    }

    fn threat(hd: usize) -> ThreatModel {
        ThreatModel {
            budget: AttackBudget::new(hd, 30, 8),
            noise: NoiseSpec::CLEAN,
        }
    }

    #[test]
    fn sampling_is_unique_and_sized() {
        let scores: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let mut rng = rng::stream(4, &[]);
        let picked = sample_indices(&scores, 20, &mut rng);
        assert_eq!(picked.len(), 20);
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_indices(&scores, 80, &mut rng).len(), 50);
    }

    #[test]
    fn sampling_prefers_high_scores() {
        let scores: Vec<f64> = (0..100).map(|i| if i < 10 { 5.0 } else { 0.0 }).collect();
        let mut hits = 0;
        for s in 0..50 {
            let picked = sample_indices(&scores, 10, &mut rng::stream(s, &[]));
            hits += picked.iter().filter(|&&i| i < 10).count();
        }
        assert!(hits > 250, "{hits} of 500 draws hit the top decile");
    }

    #[test]
    fn protection_preserves_values_and_roundtrips() {
        let (model, data) = toy_setup();
        let plan = UnaryPlan::from_indices(&model, 0.5, vec![(0, vec![3, 0, 7, 11]), (1, vec![2])]).unwrap();
        let protected = apply_protection(&model, &plan).unwrap();
        assert_eq!(protected.dequantized(), model.dequantized());
        assert_eq!(
            nn::evaluate(&protected, &data, NoiseSpec::CLEAN, 0).unwrap(),
            nn::evaluate(&model, &data, NoiseSpec::CLEAN, 0).unwrap()
        );
        for p in &plan.layers {
            for (&i, word) in p.indices.iter().zip(&p.codewords) {
                assert_eq!(bitcodec::tcu_decode(word, 4).unwrap(), model.weights(p.layer).code(i));
                assert_eq!(protected.weights(p.layer).codeword(i), Some(word));
            }
        }
        let again = apply_protection(&protected, &plan);
        assert!(matches!(again, Err(Error::Plan(_))));
        let empty = apply_protection(&model, &UnaryPlan::empty(&model)).unwrap();
        assert_eq!(empty.to_json().unwrap(), model.to_json().unwrap());
        assert!(UnaryPlan::from_indices(&model, 0.1, vec![(0, vec![1, 1])]).is_err());
    }

    #[test]
    fn full_protection_limits_damage_to_single_lsbs() {
        let model = toy::dense(&[vec![5, -3, 2, -6, 1, 4]], &[3, 2], 0.125, 4).unwrap();
        let data = Batch::new(
            vec![vec![0.9, 0.1, 0.4], vec![0.2, 0.8, 0.6], vec![0.5, 0.5, 0.1], vec![0.3, 0.9, 0.9]],
            vec![0, 1, 0, 1],
        )
        .unwrap();
        let all: Vec<usize> = (0..6).collect();
        let plan = UnaryPlan::from_indices(&model, 1.0, vec![(0, all)]).unwrap();
        let protected = apply_protection(&model, &plan).unwrap();
        let budget = AttackBudget::new(10, 1000, 4);
        let (attacked, trace) = attacker::bfa_attack(&protected, &data, &budget, NoiseSpec::CLEAN, 0).unwrap();
        assert_eq!(trace.flips.len(), 10);
        assert!(trace.flips.iter().all(|f| f.tcu && (f.post_code - f.pre_code).abs() <= 1));
        let moved: i32 = (0..6)
            .map(|i| (attacked.weights(0).code(i) - model.weights(0).code(i)).abs())
            .sum();
        assert!(moved <= 10);
        // An unprotected copy loses far more loss per flip.
        let (_, open) = attacker::bfa_attack(&model, &data, &budget, NoiseSpec::CLEAN, 0).unwrap();
        assert!(open.final_loss > trace.final_loss);
    }

    #[test]
    fn search_is_deterministic_and_keeps_best_trial() {
        let (model, data) = toy_setup();
        let config = SearchConfig::new(0.2, 3, 2, threat(4));
        let a = search_protection(&model, &config, &data, 17).unwrap();
        let b = search_protection(&model, &config, &data, 17).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let total: usize = model.layer_sizes().iter().sum();
        assert_eq!(a.protected_count(), sensitivity::protected_count(0.2, total).unwrap());
        for p in &a.layers {
            let best = a
                .trials
                .iter()
                .filter(|t| t.layer == p.layer)
                .map(|t| t.worst_acc)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(p.worst_acc, best);
        }
        assert!(a.m_tcu > 0.0);
        let json: serde_json::Value = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert!(json["layers"][0]["codewords"][0]["bits"].is_string());
    }

    #[test]
    fn invalid_configs() {
        let (model, data) = toy_setup();
        assert!(search_protection(&model, &SearchConfig::new(0.0, 1, 1, threat(1)), &data, 0).is_err());
        assert!(search_protection(&model, &SearchConfig::new(1.2, 1, 1, threat(1)), &data, 0).is_err());
        assert!(search_protection(&model, &SearchConfig::new(0.1, 0, 1, threat(1)), &data, 0).is_err());
    }
}
