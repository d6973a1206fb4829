//! Experiment stages. Each stage reads the artifacts of earlier stages from
//! the output directory and writes its own; nothing in the outputs depends
//! on wall time or thread count except `timings.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use bitlock_core::attacker::{self, AttackBudget};
use bitlock_core::lockdown::{self, build_layer_lock, CentroidRule, LockPlan, LockSearchConfig};
use bitlock_core::nn::{self, NoiseSpec, QuantizedModel};
use bitlock_core::planner::{self, DefensePlan, EvalReport, EvalSetup, Planner, SummaryRow};
use bitlock_core::rng;
use bitlock_core::sensitivity;
use bitlock_core::unary_guard::{self, UnaryPlan};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{make_dataset, Splits};
use crate::error::{HarnessError, Result};
use crate::report::{
    self, AssignmentRow, AttackRow, CandidateRow, EvalCsvRow, LockPruneRow, NoiseRow, ReportSchema, SeriesRow,
    SummaryCsvRow,
};
use crate::train::{pretrain, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Attack,
    Protect,
    Lock,
    Plan,
    Eval,
    Report,
    All,
}

impl Stage {
    pub const PIPELINE: [Stage; 7] = [
        Stage::Train,
        Stage::Attack,
        Stage::Protect,
        Stage::Lock,
        Stage::Plan,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Attack => "attack",
            Stage::Protect => "protect",
            Stage::Lock => "lock",
            Stage::Plan => "plan",
            Stage::Eval => "eval",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

// Seed tags of the stages.
const TRAIN: u64 = 1;
const ATTACK: u64 = 2;
const NOISE: u64 = 3;
const PROTECT: u64 = 4;
const LOCK: u64 = 6;
const PLAN: u64 = 8;
pub const EVAL: u64 = 9;

pub mod files {
    pub const MODEL: &str = "model.json";
    pub const TRAIN: &str = "train.json";
    pub const ATTACK_GRID: &str = "attack_grid.csv";
    pub const NOISE_SWEEP: &str = "noise_sweep.csv";
    pub const UNARY_PLAN: &str = "unary_plan.json";
    pub const ASSIGNMENT: &str = "assignment.csv";
    pub const LOCK_PLAN: &str = "lock_plan.json";
    pub const LOCK_VS_PRUNE: &str = "lock_vs_prune.csv";
    pub const DEFENSE_PLAN: &str = "defense_plan.json";
    pub const SYNERGY: &str = "synergy.csv";
    pub const EVAL_CSV: &str = "eval.csv";
    pub const EVAL_JSON: &str = "eval.json";
    pub const SUMMARY: &str = "summary.csv";
    pub const SERIES: &str = "series/accuracy_vs_budget.csv";
    pub const REPORT: &str = "report.json";
    pub const TIMINGS: &str = "timings.json";
    pub const CONFIG: &str = "config.toml";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub report: TrainReport,
    pub test_acc: f64,
    pub split_hashes: BTreeMap<String, String>,
}

/// Outcome of the eval stage, one entry per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub methods: BTreeMap<String, EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportArtifact {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub bits: u8,
    /// Output file to hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    out: PathBuf,
    splits: OnceLock<Splits>,
    warnings: Mutex<Vec<String>>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let out = config.output_dir.clone();
        std::fs::create_dir_all(out.join("series")).map_err(|e| HarnessError::io(&out, e))?;
        Ok(Experiment {
            hash: config.hash(),
            config,
            out,
            splits: OnceLock::new(),
            warnings: Mutex::new(Vec::new()),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Non-fatal problems met so far.
    pub fn warnings(&self) -> Vec<String> {
        self.warnings.lock().expect("warning list").clone()
    }

    fn warn(&self, message: String) {
        self.warnings.lock().expect("warning list").push(message);
    }

    pub fn splits(&self) -> Result<&Splits> {
        if let Some(s) = self.splits.get() {
            return Ok(s);
        }
        let s = make_dataset(&self.config.dataset, self.config.attack_pool_size())?;
        Ok(self.splits.get_or_init(|| s))
    }

    fn seed(&self, tag: u64) -> u64 {
        rng::derive(self.config.seed, &[tag])
    }

    /// Run `stage` (or the whole pipeline) and record wall times.
    pub fn run(&self, stage: Stage) -> Result<()> {
        let stages: Vec<Stage> = if stage == Stage::All { Stage::PIPELINE.to_vec() } else { vec![stage] };
        let config_text = self.config.portable().to_toml()?;
        std::fs::write(self.path(files::CONFIG), config_text).map_err(|e| HarnessError::io(self.path(files::CONFIG), e))?;
        let timings_path = self.path(files::TIMINGS);
        let mut timings: BTreeMap<String, f64> = report::read_json(&timings_path).unwrap_or_default();
        for s in stages {
            let start = Instant::now();
            match s {
                Stage::Train => self.train().map(|_| ())?,
                Stage::Attack => self.attack()?,
                Stage::Protect => self.protect()?,
                Stage::Lock => self.lock()?,
                Stage::Plan => self.plan()?,
                Stage::Eval => self.eval()?,
                Stage::Report => self.report().map(|_| ())?,
                Stage::All => unreachable!(),
            }
            timings.insert(s.name().to_owned(), start.elapsed().as_secs_f64());
            report::write_json(&timings_path, &timings)?;
        }
        Ok(())
    }

    pub fn train(&self) -> Result<QuantizedModel> {
        let spec = self.config.model_spec()?;
        let splits = self.splits()?;
        let (model, train_report) = pretrain(&spec, &splits.train, &splits.val, &self.config.training, self.seed(TRAIN))?;
        if !train_report.reached_floor {
            self.warn(format!(
                "validation accuracy {:.3} is below the floor {:.3}",
                train_report.val_acc, self.config.training.accuracy_floor
            ));
        }
        let split_hashes = [
            ("train", &splits.train),
            ("val", &splits.val),
            ("test", &splits.test),
            ("attack", &splits.attack),
        ]
        .into_iter()
        .map(|(k, b)| (k.to_owned(), Splits::hash(b)))
        .collect();
        let artifact = TrainArtifact {
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            test_acc: nn::evaluate(&model, &splits.test, NoiseSpec::CLEAN, 0)?,
            report: train_report,
            split_hashes,
        };
        let path = self.path(files::MODEL);
        std::fs::write(&path, model.to_json()?).map_err(|e| HarnessError::io(&path, e))?;
        report::write_json(&self.path(files::TRAIN), &artifact)?;
        Ok(model)
    }

    pub fn model(&self) -> Result<QuantizedModel> {
        let path = self.path(files::MODEL);
        if !path.exists() {
            return Err(HarnessError::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        let model = QuantizedModel::from_json(&text)?;
        if model.bits() != self.config.model.bits {
            return Err(HarnessError::Config(format!(
                "checkpoint has {} bits but the config asks for {}; rerun train",
                model.bits(),
                self.config.model.bits
            )));
        }
        Ok(model)
    }

    fn setup<'a>(&self, splits: &'a Splits, noise: NoiseSpec) -> EvalSetup<'a> {
        EvalSetup {
            attack_pool: &splits.attack,
            eval_set: &splits.test,
            noise,
        }
    }

    /// Undefended attacks over the batch-size × inference-budget grid and
    /// the noise sweep.
    pub fn attack(&self) -> Result<()> {
        let model = self.model()?;
        let splits = self.splits()?;
        let a = &self.config.attack;
        let noise = a.noise()?;
        let budgets: Vec<AttackBudget> = self
            .config
            .sweeps
            .batch_sizes
            .iter()
            .flat_map(|&bs| a.inference_budgets.iter().map(move |&t| AttackBudget::new(a.hamming_distance, t, bs)))
            .collect();
        let plan = DefensePlan::undefended(&model);
        let eval = planner::end_to_end_eval(&model, &plan, &budgets, a.runs, &self.setup(splits, noise), self.seed(ATTACK))?;
        fail_on_errors(&eval)?;
        let rows: Vec<AttackRow> = eval
            .rows
            .iter()
            .map(|r| AttackRow {
                config_hash: self.hash.clone(),
                seed: self.config.seed,
                bits: model.bits(),
                batch_size: r.batch_size,
                inference_budget: r.inference_budget,
                hamming_distance: r.hamming_distance,
                run: r.run,
                clean_acc: eval.clean_acc,
                attacked_acc: r.attacked_acc,
                gradient_flips: r.gradient_flips,
            })
            .collect();
        report::write_csv(&self.path(files::ATTACK_GRID), &rows)?;

        let s = &self.config.sweeps;
        let budget = AttackBudget::new(a.hamming_distance, s.noise_inference_budget, a.batch_size);
        let mut noise_rows = Vec::new();
        for &std in &s.noise_stds {
            for &samples in &s.noise_samples {
                let noise = NoiseSpec::new(std, samples)?;
                let seed = rng::derive(self.seed(NOISE), &[std.to_bits(), samples as u64]);
                let eval = planner::end_to_end_eval(&model, &plan, &[budget], a.runs, &self.setup(splits, noise), seed)?;
                fail_on_errors(&eval)?;
                noise_rows.extend(eval.rows.iter().map(|r| NoiseRow {
                    config_hash: self.hash.clone(),
                    seed: self.config.seed,
                    bits: model.bits(),
                    noise_std: std,
                    noise_samples: samples,
                    inference_budget: r.inference_budget,
                    run: r.run,
                    clean_acc: eval.clean_acc,
                    attacked_acc: r.attacked_acc,
                    gradient_flips: r.gradient_flips,
                }));
            }
        }
        report::write_csv(&self.path(files::NOISE_SWEEP), &noise_rows)
    }

    fn planner<'a>(&self, model: &'a QuantizedModel, splits: &'a Splits, tag: u64) -> Result<Planner<'a>> {
        let mut p = Planner::new(model, &splits.val, self.seed(tag))?;
        p.feasibility = self.config.feasibility()?;
        p.centroid = self.config.defense.centroid;
        Ok(p)
    }

    /// TCU protection at the configured α, compared with even assignment.
    pub fn protect(&self) -> Result<()> {
        let model = self.model()?;
        let splits = self.splits()?;
        let d = &self.config.defense;
        let planner = self.planner(&model, splits, PROTECT)?;
        let threat = self.config.search_threat()?;
        let top = planner.unary(d.alpha, d.trials, d.emulations, threat)?;
        let even_budgets = sensitivity::even_assign_budget(d.alpha, &model.layer_sizes())?;
        let even = planner.unary_with_budgets(d.alpha, &even_budgets, d.trials, d.emulations, threat)?;
        report::write_json(&self.path(files::UNARY_PLAN), &top)?;

        let noise = self.config.attack.noise()?;
        let mut rows = Vec::new();
        for (method, unary) in [("top_sensitive", top), ("even", even)] {
            let plan = DefensePlan::new(&model, unary, None);
            let eval = planner::end_to_end_eval(
                &model,
                &plan,
                &self.config.attack.budgets(),
                self.config.attack.runs,
                &self.setup(splits, noise),
                self.seed(EVAL),
            )?;
            fail_on_errors(&eval)?;
            rows.extend(eval.rows.iter().map(|r| AssignmentRow {
                config_hash: self.hash.clone(),
                seed: self.config.seed,
                method: method.to_owned(),
                alpha: d.alpha,
                m_tcu: plan.m_tcu(),
                inference_budget: r.inference_budget,
                run: r.run,
                attacked_acc: r.attacked_acc,
                flips_on_protected: r.flips_on_protected,
            }));
        }
        report::write_csv(&self.path(files::ASSIGNMENT), &rows)
    }

    fn unary_plan(&self) -> Result<UnaryPlan> {
        report::read_json(&self.path(files::UNARY_PLAN))
    }

    /// Lock plan at the configured η, and locking against pruning over a
    /// range of fixed detection group sizes.
    pub fn lock(&self) -> Result<()> {
        let model = self.model()?;
        let splits = self.splits()?;
        let unary = self.unary_plan()?;
        let planner = self.planner(&model, splits, LOCK)?;
        let config = LockSearchConfig {
            feasibility: planner.feasibility,
            centroid: planner.centroid,
            ..LockSearchConfig::new(self.config.defense.eta)
        };
        report::write_json(&self.path(files::LOCK_PLAN), &planner.lock(&unary, &config)?)?;

        let protected = unary_guard::apply_protection(&model, &unary)?;
        let s = &self.config.sweeps;
        let plans: Vec<LockPlan> = s
            .group_sizes
            .iter()
            .map(|&g| fixed_lock_plan(&protected, &planner, g, s.clusters, self.seed(LOCK)))
            .collect::<Result<_>>()?;
        let rows = lock_vs_prune(&protected, &plans, &self.config.attack.budgets(), self.config.attack.runs, &self.setup(splits, self.config.attack.noise()?), self.seed(EVAL))?;
        let rows: Vec<LockPruneRow> = rows
            .into_iter()
            .map(|mut r| {
                r.config_hash = self.hash.clone();
                r.seed = self.config.seed;
                r
            })
            .collect();
        report::write_csv(&self.path(files::LOCK_VS_PRUNE), &rows)
    }

    /// Planner search over the (α, η) grids, scored on the validation split.
    pub fn plan(&self) -> Result<()> {
        let model = self.model()?;
        let splits = self.splits()?;
        let setup = EvalSetup {
            attack_pool: &splits.attack,
            eval_set: &splits.val,
            noise: self.config.attack.noise()?,
        };
        let result = planner::synergy_search(&model, &self.config.synergy()?, &splits.val, &setup, self.seed(PLAN))?;
        if !result.feasible {
            self.warn(format!(
                "no plan reached the accuracy target {:.3}; keeping the most accurate one",
                result.target_acc
            ));
        }
        let chosen = result
            .candidates
            .iter()
            .position(|c| c.alpha == result.plan.alpha && c.eta == result.plan.eta);
        let rows: Vec<CandidateRow> = result
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| CandidateRow {
                config_hash: self.hash.clone(),
                seed: self.config.seed,
                alpha: c.alpha,
                eta: c.eta,
                m_tcu: c.m_tcu,
                m_l: c.m_l,
                total_overhead: c.total_overhead,
                mean_acc: c.mean_acc,
                worst_acc: c.worst_acc,
                meets_target: c.meets_target,
                pareto: result.pareto.contains(&i),
                selected: Some(i) == chosen,
            })
            .collect();
        report::write_csv(&self.path(files::SYNERGY), &rows)?;
        report::write_json(&self.path(files::DEFENSE_PLAN), &result.plan)
    }

    /// The defended plan available in the output directory, if any.
    pub fn defense_plan(&self, model: &QuantizedModel) -> Result<Option<(String, DefensePlan)>> {
        let plan_path = self.path(files::DEFENSE_PLAN);
        if plan_path.exists() {
            return Ok(Some(("planned".to_owned(), report::read_json(&plan_path)?)));
        }
        let unary_path = self.path(files::UNARY_PLAN);
        if !unary_path.exists() {
            return Ok(None);
        }
        let unary = self.unary_plan()?;
        let lock_path = self.path(files::LOCK_PLAN);
        if lock_path.exists() {
            let lock: LockPlan = report::read_json(&lock_path)?;
            Ok(Some(("tcu_lock".to_owned(), DefensePlan::new(model, unary, Some(lock)))))
        } else {
            Ok(Some(("tcu".to_owned(), DefensePlan::new(model, unary, None))))
        }
    }

    /// Undefended and defended pipelines over the configured budgets.
    pub fn eval(&self) -> Result<()> {
        let model = self.model()?;
        let splits = self.splits()?;
        let setup = self.setup(splits, self.config.attack.noise()?);
        let mut methods = vec![("undefended".to_owned(), DefensePlan::undefended(&model))];
        methods.extend(self.defense_plan(&model)?);
        let mut reports = BTreeMap::new();
        let mut rows = Vec::new();
        for (method, plan) in methods {
            let eval = planner::end_to_end_eval(
                &model,
                &plan,
                &self.config.attack.budgets(),
                self.config.attack.runs,
                &setup,
                self.seed(EVAL),
            )?;
            rows.extend(eval.rows.iter().map(|r| EvalCsvRow {
                config_hash: self.hash.clone(),
                seed: self.config.seed,
                method: method.clone(),
                hamming_distance: r.hamming_distance,
                inference_budget: r.inference_budget,
                batch_size: r.batch_size,
                run: r.run,
                attacked_acc: r.attacked_acc,
                resumed_acc: r.resumed_acc,
                gradient_flips: r.gradient_flips,
                flips_on_protected: r.flips_on_protected,
                flagged_groups: r.flagged_groups,
                precision: r.precision,
                recall: r.recall,
                error: r.error.clone(),
            }));
            reports.insert(method, eval);
        }
        report::write_csv(&self.path(files::EVAL_CSV), &rows)?;
        report::write_json(
            &self.path(files::EVAL_JSON),
            &EvalArtifact {
                config_hash: self.hash.clone(),
                seed: self.config.seed,
                methods: reports,
            },
        )
    }

    /// Summary table, plot series and an artifact manifest. Every CSV in the
    /// output directory is checked against the bundled schema.
    pub fn report(&self) -> Result<ReportArtifact> {
        let eval: EvalArtifact = report::read_json(&self.path(files::EVAL_JSON))?;
        let bits = self.config.model.bits;
        let summary: Vec<SummaryCsvRow> = eval
            .methods
            .iter()
            .map(|(method, r)| {
                let s = SummaryRow::from_report(method, bits, r);
                SummaryCsvRow {
                    config_hash: self.hash.clone(),
                    seed: self.config.seed,
                    method: s.method,
                    bits: s.bits,
                    prior_acc: s.prior_acc,
                    best_acc: s.best_acc,
                    worst_acc: s.worst_acc,
                    mean_acc: s.mean_acc,
                    pre_overhead: s.pre_overhead,
                    post_overhead: s.post_overhead,
                    total_overhead: s.total_overhead,
                }
            })
            .collect();
        report::write_csv(&self.path(files::SUMMARY), &summary)?;

        let mut series = Vec::new();
        for (method, r) in &eval.methods {
            for &t in &self.config.attack.inference_budgets {
                let cell: Vec<_> = r.rows.iter().filter(|row| row.inference_budget == t && row.error.is_none()).collect();
                if cell.is_empty() {
                    continue;
                }
                let n = cell.len() as f64;
                series.push(SeriesRow {
                    config_hash: self.hash.clone(),
                    seed: self.config.seed,
                    method: method.clone(),
                    inference_budget: t,
                    mean_attacked_acc: cell.iter().map(|r| r.attacked_acc).sum::<f64>() / n,
                    mean_resumed_acc: cell.iter().map(|r| r.resumed_acc).sum::<f64>() / n,
                });
            }
        }
        report::write_csv(&self.path(files::SERIES), &series)?;

        let schema = ReportSchema::bundled();
        let mut artifacts = BTreeMap::new();
        for name in [
            files::CONFIG,
            files::MODEL,
            files::TRAIN,
            files::ATTACK_GRID,
            files::NOISE_SWEEP,
            files::UNARY_PLAN,
            files::ASSIGNMENT,
            files::LOCK_PLAN,
            files::LOCK_VS_PRUNE,
            files::DEFENSE_PLAN,
            files::SYNERGY,
            files::EVAL_CSV,
            files::EVAL_JSON,
            files::SUMMARY,
            files::SERIES,
        ] {
            let path = self.path(name);
            if !path.exists() {
                continue;
            }
            if name.ends_with(".csv") {
                schema.validate(name, &path)?;
            }
            artifacts.insert(name.to_owned(), report::file_sha256(&path)?);
        }
        let artifact = ReportArtifact {
            name: self.config.name.clone(),
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            bits,
            artifacts,
        };
        report::write_json(&self.path(files::REPORT), &artifact)?;
        Ok(artifact)
    }
}

fn fail_on_errors(eval: &EvalReport) -> Result<()> {
    match eval.rows.iter().find_map(|r| r.error.as_ref()) {
        Some(e) => Err(HarnessError::Config(format!("attack run failed: {e}"))),
        None => Ok(()),
    }
}

/// Lock every layer at a fixed group size with up to `clusters` centroids.
pub fn fixed_lock_plan(model: &QuantizedModel, planner: &Planner<'_>, group: usize, clusters: usize, seed: u64) -> Result<LockPlan> {
    let layers = (0..model.num_param_layers())
        .map(|l| {
            let lockable = lockdown::lockable_indices(model.weights(l)).len();
            if lockable == 0 {
                return Ok(None);
            }
            let groups = lockable.div_ceil(group);
            // Largest power of two not above the group count.
            let k = clusters.min(1 << groups.ilog2());
            let sens = &planner.sensitivity.layers[l];
            let g = match planner.centroid {
                CentroidRule::ClosedForm => sens.g.clone(),
                CentroidRule::CurvatureMean => vec![0.0; sens.g.len()],
            };
            let lock = build_layer_lock(model, l, group, k, &g, &sens.h, rng::derive(seed, &[l as u64, group as u64]))?;
            Ok(Some(lock))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LockPlan {
        eta: f64::NAN,
        bits: model.bits(),
        layer_sizes: model.layer_sizes(),
        layers,
    })
}

/// Attack `protected` once per (budget, run) and recover every attacked copy
/// with each plan, by locking and by pruning. Rows are ordered by plan, then
/// budget, then run; hash and seed are left empty.
pub fn lock_vs_prune(
    protected: &QuantizedModel,
    plans: &[LockPlan],
    budgets: &[AttackBudget],
    runs: usize,
    setup: &EvalSetup<'_>,
    seed: u64,
) -> Result<Vec<LockPruneRow>> {
    let jobs: Vec<(usize, usize)> = (0..budgets.len()).flat_map(|b| (0..runs).map(move |r| (b, r))).collect();
    let per_job: Vec<Vec<LockPruneRow>> = jobs
        .par_iter()
        .map(|&(b, r)| {
            let budget = &budgets[b];
            let run_seed = rng::derive(seed, &[r as u64]);
            let batch = attacker::sample_attack_batch(setup.attack_pool, budget.batch_size, run_seed)?;
            let (attacked, _) = attacker::bfa_attack(protected, &batch, budget, setup.noise, rng::derive(run_seed, &[1]))?;
            let eval_seed = rng::derive(run_seed, &[2]);
            let attacked_acc = nn::evaluate(&attacked, setup.eval_set, setup.noise, eval_seed)?;
            plans
                .iter()
                .map(|plan| {
                    let (locked, mut det) = lockdown::recover(&attacked, plan)?;
                    let pruned = lockdown::prune_baseline(&attacked, &det, plan)?;
                    det.score(plan, protected, &attacked);
                    let (precision, recall) = det.precision_recall();
                    let first = plan.layers.iter().flatten().next();
                    Ok(LockPruneRow {
                        config_hash: String::new(),
                        seed: 0,
                        group: first.map_or(0, |l| l.group),
                        clusters: plan.layers.iter().flatten().map(|l| l.clusters).max().unwrap_or(0),
                        m_l: plan.ledger().lock_ratio(),
                        inference_budget: budget.inference_budget,
                        run: r,
                        attacked_acc,
                        locked_acc: nn::evaluate(&locked, setup.eval_set, setup.noise, eval_seed)?,
                        pruned_acc: nn::evaluate(&pruned, setup.eval_set, setup.noise, eval_seed)?,
                        flagged_groups: det.total_flagged(),
                        precision,
                        recall,
                    })
                })
                .collect::<bitlock_core::Result<Vec<_>>>()
        })
        .collect::<bitlock_core::Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(plans.len() * jobs.len());
    for p in 0..plans.len() {
        rows.extend(per_job.iter().map(|job| job[p].clone()));
    }
    Ok(rows)
}
