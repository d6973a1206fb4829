//! Combined defense: TCU protection before deployment, detection and locking
//! after an attack, and the greedy `(α, η)` search that trades one against
//! the other.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacker::{self, AttackBudget, ThreatModel};
use crate::bitcodec::{Accounting, LedgerSummary, MemoryLedger};
use crate::error::{Error, Result};
use crate::lockdown::{self, CentroidRule, Feasibility, LockPlan, LockSearchConfig};
use crate::nn::{self, Batch, NoiseSpec, QuantizedModel};
use crate::rng;
use crate::sensitivity::{self, SensitivityMap};
use crate::stats;
use crate::unary_guard::{self, SearchConfig, UnaryPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefensePlan {
    pub alpha: f64,
    /// `None` when locking is disabled.
    pub eta: Option<f64>,
    pub unary: UnaryPlan,
    pub lock: Option<LockPlan>,
    pub ledger: LedgerSummary,
}

impl DefensePlan {
    pub fn new(model: &QuantizedModel, unary: UnaryPlan, lock: Option<LockPlan>) -> Self {
        let protection = unary.ledger(model, Accounting::Formula);
        let locking = lock.as_ref().map_or_else(|| MemoryLedger::with_baseline(protection.baseline_bits), |l| l.ledger());
        DefensePlan {
            alpha: unary.alpha,
            eta: lock.as_ref().map(|l| l.eta),
            unary,
            lock,
            ledger: protection.combine(&locking).summary(),
        }
    }

    /// No protection and no locking.
    pub fn undefended(model: &QuantizedModel) -> Self {
        DefensePlan::new(model, UnaryPlan::empty(model), None)
    }

    pub fn m_tcu(&self) -> f64 {
        self.ledger.protection_ratio
    }

    pub fn m_l(&self) -> f64 {
        self.ledger.lock_ratio
    }

    pub fn total_overhead(&self) -> f64 {
        self.ledger.total_ratio
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Data and noise shared by every evaluated run.
#[derive(Debug, Clone, Copy)]
pub struct EvalSetup<'a> {
    /// Attack batches are drawn from here.
    pub attack_pool: &'a Batch,
    /// Accuracy is measured here.
    pub eval_set: &'a Batch,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub budget: usize,
    pub hamming_distance: usize,
    pub inference_budget: usize,
    pub batch_size: usize,
    pub run: usize,
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub attacked_acc: f64,
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub resumed_acc: f64,
    pub gradient_flips: usize,
    pub flips_on_protected: usize,
    pub flagged_groups: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean_acc: f64,
    pub rows: Vec<EvalRow>,
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub best_acc: f64,
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub worst_acc: f64,
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub mean_acc: f64,
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub attacked_mean_acc: f64,
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub attacked_worst_acc: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub flips_on_protected: usize,
    pub ledger: LedgerSummary,
}

fn run_once(
    protected: &QuantizedModel,
    plan: &DefensePlan,
    budget: &AttackBudget,
    setup: &EvalSetup<'_>,
    seed: u64,
) -> Result<(f64, f64, attacker::AttackTrace, Option<lockdown::DetectionReport>)> {
    let batch = attacker::sample_attack_batch(setup.attack_pool, budget.batch_size, seed)?;
    let (attacked, trace) = attacker::bfa_attack(protected, &batch, budget, setup.noise, rng::derive(seed, &[1]))?;
    let eval_seed = rng::derive(seed, &[2]);
    let attacked_acc = nn::evaluate(&attacked, setup.eval_set, setup.noise, eval_seed)?;
    match &plan.lock {
        None => Ok((attacked_acc, attacked_acc, trace, None)),
        Some(lock_plan) => {
            let (recovered, mut report) = lockdown::recover(&attacked, lock_plan)?;
            report.score(lock_plan, protected, &attacked);
            let resumed = nn::evaluate(&recovered, setup.eval_set, setup.noise, eval_seed)?;
            Ok((attacked_acc, resumed, trace, Some(report)))
        }
    }
}

/// Protect, attack `runs` times per budget, detect, lock and score.
pub fn end_to_end_eval(
    model: &QuantizedModel,
    plan: &DefensePlan,
    budgets: &[AttackBudget],
    runs: usize,
    setup: &EvalSetup<'_>,
    seed: u64,
) -> Result<EvalReport> {
    if budgets.is_empty() || runs == 0 {
        return Err(Error::config("evaluation needs at least one budget and one run"));
    }
    let clean_acc = nn::evaluate(model, setup.eval_set, setup.noise, rng::derive(seed, &[u64::MAX]))?;
    let protected = unary_guard::apply_protection(model, &plan.unary)?;
    let jobs: Vec<(usize, usize)> = (0..budgets.len()).flat_map(|b| (0..runs).map(move |r| (b, r))).collect();
    let rows: Vec<EvalRow> = jobs
        .par_iter()
        .map(|&(b, r)| {
            let budget = &budgets[b];
            // Attack datasets depend on the run index only, so every budget
            // faces the same T_a attack batches.
            let run_seed = rng::derive(seed, &[r as u64]);
            let mut row = EvalRow {
                budget: b,
                hamming_distance: budget.hamming_distance,
                inference_budget: budget.inference_budget,
                batch_size: budget.batch_size,
                run: r,
                attacked_acc: f64::NAN,
                resumed_acc: f64::NAN,
                gradient_flips: 0,
                flips_on_protected: 0,
                flagged_groups: 0,
                precision: None,
                recall: None,
                error: None,
            };
            match run_once(&protected, plan, budget, setup, run_seed) {
                Ok((attacked, resumed, trace, report)) => {
                    row.attacked_acc = attacked;
                    row.resumed_acc = resumed;
                    row.gradient_flips = trace.gradient_flips;
                    row.flips_on_protected = trace.flips_on_tcu();
                    if let Some(report) = report {
                        row.flagged_groups = report.total_flagged();
                        (row.precision, row.recall) = report.precision_recall();
                    }
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let resumed: Vec<f64> = ok.iter().map(|r| r.resumed_acc).collect();
    let attacked: Vec<f64> = ok.iter().map(|r| r.attacked_acc).collect();
    let pooled = |f: fn(&EvalRow) -> Option<f64>| {
        let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
        (!v.is_empty()).then(|| stats::mean(&v))
    };
    Ok(EvalReport {
        clean_acc,
        best_acc: resumed.iter().copied().fold(f64::NAN, f64::max),
        worst_acc: resumed.iter().copied().fold(f64::NAN, f64::min),
        mean_acc: if resumed.is_empty() { f64::NAN } else { stats::mean(&resumed) },
        attacked_mean_acc: if attacked.is_empty() { f64::NAN } else { stats::mean(&attacked) },
        attacked_worst_acc: attacked.iter().copied().fold(f64::NAN, f64::min),
        precision: pooled(|r| r.precision),
        recall: pooled(|r| r.recall),
        flips_on_protected: ok.iter().map(|r| r.flips_on_protected).sum(),
        ledger: plan.ledger,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyConfig {
    /// Descending. A zero entry means no TCU protection.
    pub alpha_grid: Vec<f64>,
    /// `None` disables locking.
    pub eta_grid: Vec<Option<f64>>,
    pub trials: usize,
    pub emulations: usize,
    /// Attacker emulated during the protection search.
    pub threat: ThreatModel,
    /// Budgets each candidate plan is scored against.
    pub eval_budgets: Vec<AttackBudget>,
    pub eval_runs: usize,
    /// Allowed drop of mean resumed accuracy below clean.
    pub target_drop: f64,
    pub lock_feasibility: Feasibility,
    #[serde(default)]
    pub lock_centroid: CentroidRule,
}

impl SynergyConfig {
    pub fn new(threat: ThreatModel) -> Self {
        SynergyConfig {
            alpha_grid: vec![0.02, 0.01, 0.005, 0.0025],
            eta_grid: vec![Some(0.01), Some(0.015), Some(0.02)],
            trials: 3,
            emulations: 2,
            threat,
            eval_budgets: vec![threat.budget],
            eval_runs: 2,
            target_drop: 0.03,
            lock_feasibility: Feasibility::FullLock,
            lock_centroid: CentroidRule::ClosedForm,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() || self.eta_grid.is_empty() {
            return Err(Error::config("α and η grids must be nonempty"));
        }
        if self.alpha_grid.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::config("α grid must be descending"));
        }
        if self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::config("α values must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub alpha: f64,
    pub eta: Option<f64>,
    pub total_overhead: f64,
    pub m_tcu: f64,
    pub m_l: f64,
    pub mean_acc: f64,
    pub worst_acc: f64,
    pub meets_target: bool,
    pub unlockable_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyResult {
    pub plan: DefensePlan,
    pub evaluation: EvalReport,
    /// False when no candidate met the accuracy target; `plan` is then the
    /// most accurate candidate.
    pub feasible: bool,
    pub target_acc: f64,
    pub candidates: Vec<Candidate>,
    /// Indices into `candidates` not dominated in (memory, mean accuracy).
    pub pareto: Vec<usize>,
}

/// Shared inputs for building plans on one clean model.
pub struct Planner<'a> {
    pub model: &'a QuantizedModel,
    pub val_set: &'a Batch,
    pub sensitivity: SensitivityMap,
    pub feasibility: Feasibility,
    pub centroid: CentroidRule,
    pub seed: u64,
}

impl<'a> Planner<'a> {
    pub fn new(model: &'a QuantizedModel, val_set: &'a Batch, seed: u64) -> Result<Self> {
        Ok(Planner {
            model,
            val_set,
            sensitivity: sensitivity::weight_sensitivity(model, val_set)?,
            feasibility: Feasibility::FullLock,
            centroid: CentroidRule::ClosedForm,
            seed,
        })
    }

    /// Protection with the top-sensitive-layer budget assignment.
    pub fn unary(&self, alpha: f64, trials: usize, emulations: usize, threat: ThreatModel) -> Result<UnaryPlan> {
        let budgets = sensitivity::assign_budget(alpha, &self.sensitivity.layer_scores(), &self.model.layer_sizes())?;
        self.unary_with_budgets(alpha, &budgets, trials, emulations, threat)
    }

    pub fn unary_with_budgets(
        &self,
        alpha: f64,
        budgets: &[usize],
        trials: usize,
        emulations: usize,
        threat: ThreatModel,
    ) -> Result<UnaryPlan> {
        if alpha == 0.0 || budgets.iter().all(|&b| b == 0) {
            return Ok(UnaryPlan::empty(self.model));
        }
        let config = SearchConfig::new(alpha, trials, emulations, threat);
        let seed = rng::derive(self.seed, &[alpha.to_bits()]);
        unary_guard::search_with_sensitivity(self.model, &self.sensitivity, budgets, &config, self.val_set, seed)
    }

    /// Lock plan for the model as protected by `unary`.
    pub fn lock(&self, unary: &UnaryPlan, config: &LockSearchConfig) -> Result<LockPlan> {
        let protected = unary_guard::apply_protection(self.model, unary)?;
        let g: Vec<Vec<f64>> = self.sensitivity.layers.iter().map(|l| l.g.clone()).collect();
        let h: Vec<Vec<f64>> = self.sensitivity.layers.iter().map(|l| l.h.clone()).collect();
        let seed = rng::derive(self.seed, &[config.eta.to_bits(), 0x6c6f_636b]);
        lockdown::search_lock_plan(&protected, config, self.val_set, &g, &h, seed)
    }

    pub fn plan(&self, unary: UnaryPlan, eta: Option<f64>) -> Result<DefensePlan> {
        let lock = eta
            .map(|eta| {
                let config = LockSearchConfig {
                    feasibility: self.feasibility,
                    centroid: self.centroid,
                    ..LockSearchConfig::new(eta)
                };
                self.lock(&unary, &config)
            })
            .transpose()?;
        Ok(DefensePlan::new(self.model, unary, lock))
    }
}

fn pareto_front(candidates: &[Candidate]) -> Vec<usize> {
    (0..candidates.len())
        .filter(|&i| {
            let a = &candidates[i];
            !candidates.iter().any(|b| {
                b.total_overhead <= a.total_overhead
                    && b.mean_acc >= a.mean_acc
                    && (b.total_overhead < a.total_overhead || b.mean_acc > a.mean_acc)
            })
        })
        .collect()
}

/// Greedy descent over `α`: for each `α` try every `η`; stop once the
/// cheapest plan meeting the target costs more than at the previous `α`.
pub fn synergy_search(
    model: &QuantizedModel,
    config: &SynergyConfig,
    val_set: &Batch,
    setup: &EvalSetup<'_>,
    seed: u64,
) -> Result<SynergyResult> {
    config.validate()?;
    let mut planner = Planner::new(model, val_set, seed)?;
    planner.feasibility = config.lock_feasibility;
    planner.centroid = config.lock_centroid;
    let clean = nn::evaluate(model, setup.eval_set, setup.noise, rng::derive(seed, &[u64::MAX]))?;
    let target_acc = clean - config.target_drop;
    let mut candidates = Vec::new();
    let mut evaluated: Vec<(DefensePlan, EvalReport)> = Vec::new();
    let mut previous_best = f64::INFINITY;
    for &alpha in &config.alpha_grid {
        let unary = planner.unary(alpha, config.trials, config.emulations, config.threat)?;
        let mut best_here = f64::INFINITY;
        for &eta in &config.eta_grid {
            let plan = planner.plan(unary.clone(), eta)?;
            let report = end_to_end_eval(
                model,
                &plan,
                &config.eval_budgets,
                config.eval_runs,
                setup,
                rng::derive(seed, &[0x6576_616c]),
            )?;
            let meets = report.mean_acc >= target_acc;
            if meets {
                best_here = best_here.min(plan.total_overhead());
            }
            candidates.push(Candidate {
                alpha,
                eta,
                total_overhead: plan.total_overhead(),
                m_tcu: plan.m_tcu(),
                m_l: plan.m_l(),
                mean_acc: report.mean_acc,
                worst_acc: report.worst_acc,
                meets_target: meets,
                unlockable_layers: plan.lock.as_ref().map_or_else(Vec::new, |l| l.unlockable()),
            });
            evaluated.push((plan, report));
        }
        if best_here > previous_best {
            break;
        }
        previous_best = best_here;
    }
    let feasible = candidates.iter().any(|c| c.meets_target);
    let chosen = if feasible {
        (0..candidates.len())
            .filter(|&i| candidates[i].meets_target)
            .min_by(|&a, &b| candidates[a].total_overhead.total_cmp(&candidates[b].total_overhead))
    } else {
        (0..candidates.len()).max_by(|&a, &b| candidates[a].mean_acc.total_cmp(&candidates[b].mean_acc).then(b.cmp(&a)))
    }
    .expect("at least one candidate");
    let pareto = pareto_front(&candidates);
    let (plan, evaluation) = evaluated.swap_remove(chosen);
    Ok(SynergyResult {
        plan,
        evaluation,
        feasible,
        target_acc,
        candidates,
        pareto,
    })
}

/// One line of the method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub bits: u8,
    pub prior_acc: f64,
    pub best_acc: f64,
    pub worst_acc: f64,
    pub mean_acc: f64,
    pub pre_overhead: f64,
    pub post_overhead: f64,
    pub total_overhead: f64,
}

impl SummaryRow {
    pub fn from_report(method: &str, bits: u8, report: &EvalReport) -> Self {
        SummaryRow {
            method: method.to_owned(),
            bits,
            prior_acc: report.clean_acc,
            best_acc: report.best_acc,
            worst_acc: report.worst_acc,
            mean_acc: report.mean_acc,
            pre_overhead: report.ledger.protection_ratio,
            post_overhead: report.ledger.lock_ratio,
            total_overhead: report.ledger.total_ratio,
        }
    }
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{toy, LayerSpec, ModelSpec};
    use rand::{Rng, SeedableRng};

    fn setup_model() -> (QuantizedModel, Batch) {
        let spec = ModelSpec {
            input_shape: [1, 1, 6],
            num_classes: 3,
            bits: 4,
            layers: vec![LayerSpec::Dense { outputs: 8 }, LayerSpec::Relu, LayerSpec::Dense { outputs: 3 }],
        };
        let model = spec.init(4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let inputs: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.random()).collect()).collect();
        let probe = Batch::new(inputs.clone(), vec![0; 40]).unwrap();
        let preds = nn::predict_with(&model, &model.dequantized(), &probe).unwrap();
        (model, Batch::new(inputs, preds).unwrap())
    }

    fn threat(hd: usize, t_inf: usize) -> ThreatModel {
        ThreatModel {
            budget: AttackBudget::new(hd, t_inf, 8),
            noise: NoiseSpec::CLEAN,
        }
    }

    #[test]
    fn empty_plan_zero_flips_keeps_clean_accuracy() {
        let (model, data) = setup_model();
        let plan = DefensePlan::undefended(&model);
        let setup = EvalSetup {
            attack_pool: &data,
            eval_set: &data,
            noise: NoiseSpec::CLEAN,
        };
        let report = end_to_end_eval(&model, &plan, &[AttackBudget::new(0, 3, 8)], 2, &setup, 1).unwrap();
        assert_eq!(report.mean_acc, report.clean_acc);
        assert_eq!(report.total_overhead(), 0.0);
    }

    impl EvalReport {
        fn total_overhead(&self) -> f64 {
            self.ledger.total_ratio
        }
    }

    #[test]
    fn fully_protected_toy_degrades_by_lsb_steps_only() {
        let model = toy::dense(&[vec![5, -3, 2, -6, 1, 4]], &[3, 2], 0.125, 4).unwrap();
        let data = Batch::new(
            vec![vec![0.9, 0.1, 0.4], vec![0.2, 0.8, 0.6], vec![0.5, 0.5, 0.1], vec![0.3, 0.9, 0.9]],
            vec![0, 1, 0, 1],
        )
        .unwrap();
        let unary = UnaryPlan::from_indices(&model, 1.0, vec![(0, (0..6).collect())]).unwrap();
        let plan = DefensePlan::new(&model, unary, None);
        let setup = EvalSetup {
            attack_pool: &data,
            eval_set: &data,
            noise: NoiseSpec::CLEAN,
        };
        let budget = AttackBudget::new(6, 1000, 4);
        let report = end_to_end_eval(&model, &plan, &[budget], 1, &setup, 0).unwrap();
        assert_eq!(report.flips_on_protected, 6);
        // Oracle: the worst accuracy over every model within 6 LSB steps of
        // total movement is a lower bound; enumerate all code vectors whose
        // L1 distance from the original is at most 6.
        let base = model.weights(0).codes().to_vec();
        let mut worst = 1.0f64;
        let mut codes = base.clone();
        fn walk(i: usize, left: i32, codes: &mut Vec<i32>, base: &[i32], model: &QuantizedModel, data: &Batch, worst: &mut f64) {
            if i == codes.len() {
                let mut m = model.clone();
                for (k, &c) in codes.iter().enumerate() {
                    m.weights_mut(0).set_code(k, c).unwrap();
                }
                *worst = worst.min(nn::evaluate(&m, data, NoiseSpec::CLEAN, 0).unwrap());
                return;
            }
            for d in -left.min(base[i] + 8)..=left.min(7 - base[i]) {
                codes[i] = base[i] + d;
                walk(i + 1, left - d.abs(), codes, base, model, data, worst);
            }
            codes[i] = base[i];
        }
        walk(0, 6, &mut codes, &base, &model, &data, &mut worst);
        assert!(report.mean_acc >= worst);
        assert!(plan.m_tcu() > 0.0);
    }

    #[test]
    fn ledger_is_additive() {
        let (model, data) = setup_model();
        let planner = Planner::new(&model, &data, 3).unwrap();
        let unary = UnaryPlan::from_indices(&model, 0.1, vec![(0, vec![1, 4, 9]), (1, vec![0])]).unwrap();
        let plan = planner.plan(unary, Some(1.0)).unwrap();
        let lock = plan.lock.as_ref().unwrap();
        assert_eq!(plan.m_tcu() + plan.m_l(), plan.total_overhead());
        assert_eq!(plan.m_l(), lock.ledger().lock_ratio());
        assert_eq!(plan.m_tcu(), plan.unary.ledger(&model, Accounting::Formula).protection_ratio());
        // Locking excludes the protected weights.
        assert_eq!(lock.layers[0].as_ref().unwrap().excluded, vec![1, 4, 9]);
    }

    #[test]
    fn degenerate_grids() {
        let (model, data) = setup_model();
        let setup = EvalSetup {
            attack_pool: &data,
            eval_set: &data,
            noise: NoiseSpec::CLEAN,
        };
        let mut config = SynergyConfig::new(threat(3, 9));
        config.alpha_grid = vec![0.1];
        config.eta_grid = vec![None];
        config.trials = 1;
        config.emulations = 1;
        config.eval_runs = 1;
        let pure_unary = synergy_search(&model, &config, &data, &setup, 0).unwrap();
        assert_eq!(pure_unary.plan.m_l(), 0.0);
        assert!(pure_unary.plan.lock.is_none());
        assert_eq!(pure_unary.plan.total_overhead(), pure_unary.plan.m_tcu());

        config.alpha_grid = vec![0.0];
        config.eta_grid = vec![Some(1.0)];
        let pure_lock = synergy_search(&model, &config, &data, &setup, 0).unwrap();
        assert_eq!(pure_lock.plan.m_tcu(), 0.0);
        assert_eq!(pure_lock.plan.total_overhead(), pure_lock.plan.m_l());
        assert!(pure_lock.plan.m_l() > 0.0);
    }

    #[test]
    fn search_is_deterministic() {
        let (model, data) = setup_model();
        let setup = EvalSetup {
            attack_pool: &data,
            eval_set: &data,
            noise: NoiseSpec::CLEAN,
        };
        let mut config = SynergyConfig::new(threat(4, 12));
        config.alpha_grid = vec![0.2, 0.1];
        config.eta_grid = vec![Some(0.05), Some(0.2)];
        config.trials = 2;
        config.emulations = 1;
        let a = synergy_search(&model, &config, &data, &setup, 9).unwrap();
        let b = synergy_search(&model, &config, &data, &setup, 9).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(!a.pareto.is_empty());
        if a.feasible {
            let chosen = a.plan.total_overhead();
            assert!(a.candidates.iter().filter(|c| c.meets_target).all(|c| c.total_overhead >= chosen));
        }
        let mut buf = Vec::new();
        write_summary_csv(&[SummaryRow::from_report("ours", 4, &a.evaluation)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,bits,prior_acc,best_acc,worst_acc,mean_acc,pre_overhead,post_overhead,total_overhead\n"));
    }

    #[test]
    fn bad_grids_rejected() {
        let (model, data) = setup_model();
        let setup = EvalSetup {
            attack_pool: &data,
            eval_set: &data,
            noise: NoiseSpec::CLEAN,
        };
        let mut config = SynergyConfig::new(threat(3, 9));
        config.alpha_grid = vec![0.01, 0.02];
        assert!(matches!(synergy_search(&model, &config, &data, &setup, 0), Err(Error::Config(_))));
    }
}
