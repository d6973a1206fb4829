//! Checksum detection of victim groups and recovery by locking them to
//! precomputed cluster centroids.
//!
//! Each layer's BCD-stored weights are split, in index order, into groups of
//! `G`. Before deployment every group gets a signature (parity of its MSBs
//! and parity of its second MSBs; the MSB itself when `G = 1`), a locking
//! centroid chosen with the loss curvature in mind, and the ID of the global
//! cluster nearest to that centroid. After an attack, groups whose signature
//! no longer matches are overwritten with their cluster's centroid code.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacker::{self, AttackTrace, ThreatModel};
use crate::bitcodec::{self, LockedLayer, MemoryLedger};
use crate::error::{Error, Result};
use crate::nn::{self, Batch, LayerValues, NoiseSpec, QuantizedModel, QuantizedTensor};
use crate::rng;
use crate::stats;

/// Group sizes tried by the search, largest first.
pub const GROUP_SIZES: [usize; 10] = [512, 256, 128, 64, 32, 16, 8, 4, 2, 1];
pub const MAX_CLUSTERS: usize = 256;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_EPS: f64 = 1e-8;
pub const KMEANS_RESTARTS: usize = 10;

/// Indices of the weights that take part in grouping (TCU weights do not).
pub fn lockable_indices(tensor: &QuantizedTensor) -> Vec<usize> {
    (0..tensor.len()).filter(|&i| !tensor.is_protected(i)).collect()
}

/// One signature per group of `members`. Bit 0 holds the MSB parity and
/// bit 1 the second-MSB parity; with `G = 1` only bit 0 is used.
pub fn compute_signatures(tensor: &QuantizedTensor, members: &[usize], group: usize) -> Vec<u8> {
    let bits = tensor.bits();
    members
        .chunks(group)
        .map(|chunk| {
            let mut msb = false;
            let mut second = false;
            for &i in chunk {
                let code = tensor.code(i);
                msb ^= bitcodec::bit_of(code, bits - 1, bits);
                if group > 1 && bits >= 2 {
                    second ^= bitcodec::bit_of(code, bits - 2, bits);
                }
            }
            msb as u8 | (second as u8) << 1
        })
        .collect()
}

/// Groups whose recomputed signature differs from the stored one.
pub fn detect_groups(tensor: &QuantizedTensor, members: &[usize], signatures: &[u8], group: usize) -> Result<Vec<usize>> {
    if group == 0 || members.len().div_ceil(group) != signatures.len() {
        return Err(Error::config(format!(
            "signature table holds {} groups, layer has {} at G = {group}",
            signatures.len(),
            members.len().div_ceil(group.max(1))
        )));
    }
    Ok(compute_signatures(tensor, members, group)
        .iter()
        .zip(signatures)
        .enumerate()
        .filter(|(_, (now, golden))| now != golden)
        .map(|(n, _)| n)
        .collect())
}

/// Curvature-aware centroid of one group: the minimiser of
/// `Σ g_i (W_i − c) + ½ h_i (W_i − c)²`, or the plain mean when `Σ h = 0`.
pub fn group_centroid(weights: &[f64], g: &[f64], h: &[f64]) -> f64 {
    let sum_h: f64 = h.iter().sum();
    if sum_h == 0.0 {
        return stats::mean(weights);
    }
    let weighted: f64 = weights.iter().zip(h).map(|(w, h)| w * h).sum();
    (weighted + g.iter().sum::<f64>()) / sum_h
}

/// Centroids of consecutive groups of `G` (the last one may be short).
pub fn group_centroids(weights: &[f64], g: &[f64], h: &[f64], group: usize) -> Vec<f64> {
    weights
        .chunks(group)
        .zip(g.chunks(group))
        .zip(h.chunks(group))
        .map(|((w, g), h)| group_centroid(w, g, h))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    pub objective: f64,
}

fn nearest(sorted: &[f64], x: f64) -> usize {
    let p = sorted.partition_point(|&c| c < x);
    if p == 0 {
        0
    } else if p == sorted.len() || x - sorted[p - 1] <= sorted[p] - x {
        p - 1
    } else {
        p
    }
}

fn kmeans_once(points: &[f64], k: usize, rng: &mut rng::Rng) -> KMeans {
    // k-means++ seeding.
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next];
        centroids.push(c);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - c).powi(2));
        }
    }
    let mut assignment = vec![0; points.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        centroids.sort_by(f64::total_cmp);
        for (a, &p) in assignment.iter_mut().zip(points) {
            *a = nearest(&centroids, p);
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&a, &p) in assignment.iter().zip(points) {
            sums[a] += p;
            counts[a] += 1;
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let updated = if counts[c] > 0 {
                sums[c] / counts[c] as f64
            } else {
                // Re-seed an empty cluster at the worst-served point.
                let far = points
                    .iter()
                    .zip(&assignment)
                    .map(|(p, &a)| (p - centroids[a]).powi(2))
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map_or(0, |(i, _)| i);
                points[far]
            };
            shift = shift.max((updated - centroids[c]).abs());
            centroids[c] = updated;
        }
        if shift < KMEANS_EPS {
            break;
        }
    }
    centroids.sort_by(f64::total_cmp);
    for (a, &p) in assignment.iter_mut().zip(points) {
        *a = nearest(&centroids, p);
    }
    let objective = points.iter().zip(&assignment).map(|(p, &a)| (p - centroids[a]).powi(2)).sum();
    KMeans {
        centroids,
        assignment,
        objective,
    }
}

/// 1-D k-means with k-means++ seeding; the best of `restarts` runs wins.
pub fn kmeans_1d(points: &[f64], k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::plan(format!("{k} clusters requested for {} points", points.len())));
    }
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans_once(points, k, &mut rng::stream(seed, &[r as u64]));
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Cluster group centroids into `K` codes (b-bit, same scale as the layer)
/// and assign each group the ID of its nearest real-valued cluster centre.
pub fn global_kmeans(group_centroids: &[f64], clusters: usize, tensor: &QuantizedTensor, seed: u64) -> Result<(Vec<i32>, Vec<u32>)> {
    let fit = kmeans_1d(group_centroids, clusters, KMEANS_RESTARTS, seed)?;
    let codes = fit.centroids.iter().map(|&c| tensor.code_for(c)).collect();
    let ids = fit.assignment.iter().map(|&a| a as u32).collect();
    Ok((codes, ids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLock {
    pub layer: usize,
    #[serde(rename = "G")]
    pub group: usize,
    #[serde(rename = "K")]
    pub clusters: usize,
    /// TCU-protected weights left out of grouping.
    pub excluded: Vec<usize>,
    pub centroid_codes: Vec<i32>,
    pub group_cluster_ids: Vec<u32>,
    pub signatures: Vec<u8>,
    pub signature_bits: u32,
    pub m_l: f64,
    /// Accuracy drop measured when the whole layer was locked.
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub locked_drop: f64,
}

impl LayerLock {
    pub fn members(&self, tensor: &QuantizedTensor) -> Vec<usize> {
        let mut skip = self.excluded.iter().peekable();
        (0..tensor.len())
            .filter(|i| {
                if skip.peek() == Some(&i) {
                    skip.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }

    pub fn num_groups(&self) -> usize {
        self.group_cluster_ids.len()
    }
}

/// Build the lock of one layer for a given `(G, K)`.
pub fn build_layer_lock(
    model: &QuantizedModel,
    layer: usize,
    group: usize,
    clusters: usize,
    g: &[f64],
    h: &[f64],
    seed: u64,
) -> Result<LayerLock> {
    if !group.is_power_of_two() || !clusters.is_power_of_two() || clusters > MAX_CLUSTERS {
        return Err(Error::plan(format!("unsupported (G, K) = ({group}, {clusters})")));
    }
    let tensor = model.weights(layer);
    let members = lockable_indices(tensor);
    if members.is_empty() {
        return Err(Error::plan(format!("layer {layer} has no lockable weights")));
    }
    let w: Vec<f64> = members.iter().map(|&i| tensor.value(i)).collect();
    let gm: Vec<f64> = members.iter().map(|&i| g[i]).collect();
    let hm: Vec<f64> = members.iter().map(|&i| h[i]).collect();
    let centres = group_centroids(&w, &gm, &hm, group);
    let (centroid_codes, group_cluster_ids) = global_kmeans(&centres, clusters, tensor, seed)?;
    Ok(LayerLock {
        layer,
        group,
        clusters,
        excluded: (0..tensor.len()).filter(|&i| tensor.is_protected(i)).collect(),
        centroid_codes,
        group_cluster_ids,
        signatures: compute_signatures(tensor, &members, group),
        signature_bits: bitcodec::signature_width(group),
        m_l: bitcodec::lock_overhead(group, clusters, tensor.bits()),
        locked_drop: f64::NAN,
    })
}

/// Overwrite every member of the flagged groups with its centroid code.
pub fn lock_layer(tensor: &mut QuantizedTensor, lock: &LayerLock, flagged: &[usize]) -> Result<()> {
    let members = lock.members(tensor);
    for &n in flagged {
        let code = lock.centroid_codes[lock.group_cluster_ids[n] as usize];
        for &i in members.iter().skip(n * lock.group).take(lock.group) {
            tensor.set_code(i, code)?;
        }
    }
    Ok(())
}

/// Per-layer plans; `None` marks a layer no candidate could lock within `η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockPlan {
    #[serde(deserialize_with = "crate::nan::or_null")]
    pub eta: f64,
    pub bits: u8,
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Option<LayerLock>>,
}

impl LockPlan {
    pub fn ledger(&self) -> MemoryLedger {
        let layers: Vec<LockedLayer> = self
            .layer_sizes
            .iter()
            .zip(&self.layers)
            .map(|(&size, lock)| LockedLayer {
                layer_size: size,
                lockable: size - lock.as_ref().map_or(0, |l| l.excluded.len()),
                group_and_clusters: lock.as_ref().map(|l| (l.group, l.clusters)),
            })
            .collect();
        bitcodec::ledger_lock(&layers, self.bits)
    }

    pub fn unlockable(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| self.layers[l].is_none()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerDetection {
    pub layer: usize,
    pub flagged: Vec<usize>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub layers: Vec<LayerDetection>,
}

impl DetectionReport {
    pub fn flagged(&self, layer: usize) -> &[usize] {
        self.layers
            .iter()
            .find(|d| d.layer == layer)
            .map_or(&[], |d| d.flagged.as_slice())
    }

    pub fn total_flagged(&self) -> usize {
        self.layers.iter().map(|d| d.flagged.len()).sum()
    }

    /// Fill TP/FP/FN against the groups whose stored value the attack changed.
    pub fn score(&mut self, plan: &LockPlan, clean: &QuantizedModel, attacked: &QuantizedModel) {
        for d in &mut self.layers {
            let Some(lock) = &plan.layers[d.layer] else { continue };
            let members = lock.members(clean.weights(d.layer));
            let hit: Vec<usize> = members
                .chunks(lock.group)
                .enumerate()
                .filter(|(_, c)| {
                    c.iter()
                        .any(|&i| clean.weights(d.layer).code(i) != attacked.weights(d.layer).code(i))
                })
                .map(|(n, _)| n)
                .collect();
            d.true_positives = d.flagged.iter().filter(|n| hit.binary_search(n).is_ok()).count();
            d.false_positives = d.flagged.len() - d.true_positives;
            d.false_negatives = hit.len() - d.true_positives;
        }
    }

    /// Pooled precision and recall; `None` when undefined.
    pub fn precision_recall(&self) -> (Option<f64>, Option<f64>) {
        let tp: usize = self.layers.iter().map(|d| d.true_positives).sum();
        let fp: usize = self.layers.iter().map(|d| d.false_positives).sum();
        let fnn: usize = self.layers.iter().map(|d| d.false_negatives).sum();
        let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
        (ratio(tp, fp), ratio(tp, fnn))
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["layer", "flagged", "true_positives", "false_positives", "false_negatives"])
            .map_err(io)?;
        for d in &self.layers {
            w.write_record([
                d.layer.to_string(),
                d.flagged.len().to_string(),
                d.true_positives.to_string(),
                d.false_positives.to_string(),
                d.false_negatives.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

/// Compare every locked layer of `model` against its golden signatures.
pub fn detect(model: &QuantizedModel, plan: &LockPlan) -> Result<DetectionReport> {
    let mut report = DetectionReport::default();
    for lock in plan.layers.iter().flatten() {
        let tensor = model.weights(lock.layer);
        let flagged = detect_groups(tensor, &lock.members(tensor), &lock.signatures, lock.group)?;
        report.layers.push(LayerDetection {
            layer: lock.layer,
            flagged,
            ..LayerDetection::default()
        });
    }
    Ok(report)
}

/// Lock every flagged group of every locked layer.
pub fn lock(model: &QuantizedModel, report: &DetectionReport, plan: &LockPlan) -> Result<QuantizedModel> {
    let mut out = model.clone();
    for d in &report.layers {
        let lock = plan.layers[d.layer]
            .as_ref()
            .ok_or_else(|| Error::plan(format!("layer {} has no lock plan", d.layer)))?;
        lock_layer(out.weights_mut(d.layer), lock, &d.flagged)?;
    }
    Ok(out)
}

/// Pruning baseline: flagged groups are forced to zero.
pub fn prune_baseline(model: &QuantizedModel, report: &DetectionReport, plan: &LockPlan) -> Result<QuantizedModel> {
    let zeroed = LockPlan {
        layers: plan
            .layers
            .iter()
            .map(|l| {
                l.as_ref().map(|l| LayerLock {
                    centroid_codes: vec![0; l.centroid_codes.len()],
                    ..l.clone()
                })
            })
            .collect(),
        ..plan.clone()
    };
    lock(model, report, &zeroed)
}

/// How a candidate `(G, K)` is judged during the search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Feasibility {
    /// Lock every group of the layer (worst case) and measure the drop.
    FullLock,
    /// Attack the model, restore all other layers, then detect and lock this
    /// layer; the worst drop over the emulations counts.
    AttackEmulated { threat: ThreatModel, emulations: usize },
}

/// Which group centroid the lock stores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidRule {
    /// The curvature-aware minimiser including the gradient term.
    #[default]
    ClosedForm,
    /// Curvature-weighted mean; the gradient term is dropped. Useful when
    /// `|g / h|` is large compared to the weight step.
    CurvatureMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockSearchConfig {
    pub eta: f64,
    pub feasibility: Feasibility,
    pub max_clusters: usize,
    #[serde(default)]
    pub centroid: CentroidRule,
}

impl LockSearchConfig {
    pub fn new(eta: f64) -> Self {
        LockSearchConfig {
            eta,
            feasibility: Feasibility::FullLock,
            max_clusters: MAX_CLUSTERS,
            centroid: CentroidRule::ClosedForm,
        }
    }
}

/// `(G, K)` candidates of a layer with `lockable` weights, cheapest first.
/// Equal overheads prefer the larger `G`, then the smaller `K`.
pub fn candidates(lockable: usize, max_clusters: usize, bits: u8) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &g in &GROUP_SIZES {
        let groups = lockable.div_ceil(g);
        let mut k = 1;
        while k <= groups && k <= max_clusters.min(MAX_CLUSTERS) {
            out.push((g, k));
            k *= 2;
        }
    }
    out.sort_by(|a, b| {
        bitcodec::lock_overhead(a.0, a.1, bits)
            .total_cmp(&bitcodec::lock_overhead(b.0, b.1, bits))
            .then(b.0.cmp(&a.0))
            .then(a.1.cmp(&b.1))
    });
    out
}

/// Accuracy drop of `candidate` under the configured feasibility test.
pub fn candidate_drop(
    model: &QuantizedModel,
    candidate: &LayerLock,
    val_set: &Batch,
    clean_acc: f64,
    feasibility: &Feasibility,
    seed: u64,
) -> Result<f64> {
    let layer = candidate.layer;
    match feasibility {
        Feasibility::FullLock => {
            let mut locked = model.clone();
            let all: Vec<usize> = (0..candidate.num_groups()).collect();
            lock_layer(locked.weights_mut(layer), candidate, &all)?;
            Ok(clean_acc - nn::evaluate(&locked, val_set, NoiseSpec::CLEAN, 0)?)
        }
        Feasibility::AttackEmulated { threat, emulations } => {
            let mut worst: f64 = f64::NEG_INFINITY;
            for e in 0..*emulations {
                let emu = attacker::emulate_attack(model, val_set, threat, rng::derive(seed, &[e as u64]))?;
                let mut hybrid = model.clone();
                *hybrid.weights_mut(layer) = emu.attacked.weights(layer).clone();
                let tensor = hybrid.weights(layer);
                let flagged = detect_groups(tensor, &candidate.members(tensor), &candidate.signatures, candidate.group)?;
                lock_layer(hybrid.weights_mut(layer), candidate, &flagged)?;
                worst = worst.max(clean_acc - nn::evaluate(&hybrid, val_set, NoiseSpec::CLEAN, 0)?);
            }
            Ok(worst)
        }
    }
}

/// Cheapest feasible `(G, K)` per layer, searched independently.
pub fn search_layer(
    model: &QuantizedModel,
    layer: usize,
    config: &LockSearchConfig,
    val_set: &Batch,
    g: &[f64],
    h: &[f64],
    clean_acc: f64,
    seed: u64,
) -> Result<Option<LayerLock>> {
    let tensor = model.weights(layer);
    let lockable = lockable_indices(tensor).len();
    if lockable == 0 {
        return Ok(None);
    }
    let zeros;
    let g = match config.centroid {
        CentroidRule::ClosedForm => g,
        CentroidRule::CurvatureMean => {
            zeros = vec![0.0; g.len()];
            &zeros[..]
        }
    };
    for (g_size, k) in candidates(lockable, config.max_clusters, tensor.bits()) {
        let cand_seed = rng::derive(seed, &[layer as u64, g_size as u64, k as u64]);
        let mut lock = build_layer_lock(model, layer, g_size, k, g, h, cand_seed)?;
        let drop = candidate_drop(model, &lock, val_set, clean_acc, &config.feasibility, cand_seed)?;
        if drop < config.eta {
            lock.locked_drop = drop;
            return Ok(Some(lock));
        }
    }
    Ok(None)
}

/// Search every layer with clean-model gradients `g` and curvature `h`.
pub fn search_lock_plan(
    model: &QuantizedModel,
    config: &LockSearchConfig,
    val_set: &Batch,
    g: &LayerValues,
    h: &LayerValues,
    seed: u64,
) -> Result<LockPlan> {
    if config.eta.is_nan() || config.eta <= 0.0 {
        return Err(Error::input(format!("accuracy-drop threshold must be > 0, got {}", config.eta)));
    }
    let clean_acc = nn::evaluate(model, val_set, NoiseSpec::CLEAN, 0)?;
    let layers = (0..model.num_param_layers())
        .into_par_iter()
        .map(|l| search_layer(model, l, config, val_set, &g[l], &h[l], clean_acc, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(LockPlan {
        eta: config.eta,
        bits: model.bits(),
        layer_sizes: model.layer_sizes(),
        layers,
    })
}

/// Detect, then lock: the full post-attack recovery step.
pub fn recover(attacked: &QuantizedModel, plan: &LockPlan) -> Result<(QuantizedModel, DetectionReport)> {
    let report = detect(attacked, plan)?;
    Ok((lock(attacked, &report, plan)?, report))
}

/// Convenience for tests and experiments: which groups an attack trace hit.
pub fn attacked_groups(trace: &AttackTrace, plan: &LockPlan, clean: &QuantizedModel) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for f in trace.flips.iter().filter(|f| !f.tcu) {
        let Some(lock) = &plan.layers[f.address.layer] else { continue };
        let members = lock.members(clean.weights(f.address.layer));
        if let Ok(pos) = members.binary_search(&f.address.weight) {
            out.push((f.address.layer, pos / lock.group));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}
