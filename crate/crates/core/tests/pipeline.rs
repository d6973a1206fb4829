use std::collections::HashSet;

use bitlock_core::attacker::{bfa_attack, AttackBudget, UNITS_PER_PASS};
use bitlock_core::lockdown::{self, build_layer_lock, LockPlan};
use bitlock_core::nn::{self, toy, Batch, NoiseSpec, QuantizedModel};
use bitlock_core::unary_guard::{apply_protection, UnaryPlan};

fn model() -> QuantizedModel {
    let first: Vec<i32> = (0..24).map(|i| (i * 37 % 61) - 30).collect();
    let second: Vec<i32> = (0..18).map(|i| (i * 53 % 71) - 35).collect();
    toy::dense(&[first, second], &[4, 6, 3], 1.0 / 64.0, 8).unwrap()
}

fn batch(n: usize) -> Batch {
    let inputs = (0..n).map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 11) as f64 / 10.0).collect()).collect();
    Batch::new(inputs, (0..n).map(|i| i % 3).collect()).unwrap()
}

#[test]
fn attack_respects_budgets_and_raises_loss() {
    let model = model();
    let data = batch(8);
    let budget = AttackBudget::new(6, 9, 8);
    let (attacked, trace) = bfa_attack(&model, &data, &budget, NoiseSpec::CLEAN, 1).unwrap();
    assert_eq!(trace.flips.len(), 6);
    assert_eq!(trace.gradient_flips, 9 / UNITS_PER_PASS);
    assert!(trace.units_consumed <= budget.inference_budget);
    let unique: HashSet<_> = trace.addresses().collect();
    assert_eq!(unique.len(), trace.flips.len());
    let before = nn::forward(&model, &data, NoiseSpec::CLEAN, 0).unwrap().loss;
    let after = nn::forward(&attacked, &data, NoiseSpec::CLEAN, 0).unwrap().loss;
    assert!(after > before, "{after} <= {before}");
    assert_eq!(trace.final_loss, after);
}

#[test]
fn protected_weights_move_by_one_level() {
    let model = model();
    let all: Vec<usize> = (0..model.weights(0).len()).collect();
    let plan = UnaryPlan::from_indices(&model, 0.5, vec![(0, all), (1, vec![])]).unwrap();
    let protected = apply_protection(&model, &plan).unwrap();
    let data = batch(8);
    let (attacked, trace) = bfa_attack(&protected, &data, &AttackBudget::new(10, 300, 8), NoiseSpec::CLEAN, 2).unwrap();
    for flip in trace.flips.iter().filter(|f| f.tcu) {
        assert_eq!(flip.address.layer, 0);
        assert!((flip.post_code - flip.pre_code).abs() <= 1, "{flip:?}");
    }
    let changed: usize = (0..attacked.weights(0).len())
        .map(|i| (attacked.weights(0).code(i) - model.weights(0).code(i)).unsigned_abs() as usize)
        .sum();
    assert!(changed <= trace.flips_on_tcu());
}

#[test]
fn locking_restores_flagged_groups() {
    let model = model();
    let layers = (0..model.num_param_layers())
        .map(|l| {
            let n = model.weights(l).len();
            Some(build_layer_lock(&model, l, 2, 4, &vec![0.0; n], &vec![1.0; n], 3).unwrap())
        })
        .collect();
    let plan = LockPlan {
        eta: 0.01,
        bits: model.bits(),
        layer_sizes: model.layer_sizes(),
        layers,
    };
    let mut attacked = model.clone();
    attacked.weights_mut(0).flip(5, 7).unwrap();
    attacked.weights_mut(1).flip(0, 7).unwrap();

    let (recovered, report) = lockdown::recover(&attacked, &plan).unwrap();
    assert_eq!(report.flagged(0), &[2]);
    assert_eq!(report.flagged(1), &[0]);
    assert_eq!(report.total_flagged(), 2);
    let lock = plan.layers[0].as_ref().unwrap();
    let centroid = lock.centroid_codes[lock.group_cluster_ids[2] as usize];
    assert_eq!(recovered.weights(0).code(4), centroid);
    assert_eq!(recovered.weights(0).code(5), centroid);
    for i in (0..24).filter(|i| !(4..6).contains(i)) {
        assert_eq!(recovered.weights(0).code(i), model.weights(0).code(i));
    }

    let pruned = lockdown::prune_baseline(&attacked, &report, &plan).unwrap();
    assert_eq!(pruned.weights(0).code(4), 0);
    assert_eq!(pruned.weights(1).code(1), 0);
    assert!(lockdown::detect(&model, &plan).unwrap().total_flagged() == 0);
}

#[test]
fn plans_survive_json() {
    let model = model();
    let plan = UnaryPlan::from_indices(&model, 0.1, vec![(0, vec![1, 4]), (1, vec![2])]).unwrap();
    // Searchless plans carry NaN accuracies, so compare the serialized forms.
    let json = plan.to_json().unwrap();
    let back: UnaryPlan = serde_json::from_str(&json).unwrap();
    assert_eq!(back.to_json().unwrap(), json);
    assert!(back.worst_acc.is_nan());
    for (a, b) in back.layers.iter().zip(&plan.layers) {
        assert_eq!((a.layer, &a.indices, &a.codewords), (b.layer, &b.indices, &b.codewords));
    }
    let restored = QuantizedModel::from_json(&model.to_json().unwrap()).unwrap();
    assert_eq!(restored, model);
}
