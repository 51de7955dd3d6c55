//! Training loop, tiled evaluation, ablation runner and K-sweep.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{class_frequencies, PointCloud};
use crate::error::{Error, Result};
use crate::knn::{self, knn_grid};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{build_model, Model, ModelConfig, PatchInput};
use crate::sampler::{self, ClassWeights};
use crate::tensor::Tape;
use crate::voting::{argmax_baseline, vote, VoteInputs, VoteResult};

/// Outcome of one training run. The wall clock is informational and never
/// serialized into comparable artifacts (checkpoints and metric reports
/// must be byte-identical across same-seed runs).
#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_hash: String,
    pub epoch_loss: Vec<f64>,
    pub final_metrics: MetricsReport,
    pub wall_clock_seconds: f64,
}

/// FNV-1a over the canonical config JSON.
pub fn config_hash(config: &ModelConfig) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in text.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

/// Default Gaussian width of the weighted sampler: the expected patch
/// radius, `(P/N)^(1/3)` of the bounding-box diagonal.
pub fn default_sigma(cloud: &PointCloud, patch_size: usize) -> f64 {
    let ratio = patch_size as f64 / cloud.len() as f64;
    let sigma = ratio.cbrt() * cloud.bbox_diagonal();
    if sigma > 0.0 {
        sigma
    } else {
        1.0
    }
}

/// Train in place. Per epoch: draw `batch_size` patches (semantically
/// weighted unless ablated), run them through one shared tape, average the
/// two head losses, backprop once and take one SGD step.
pub fn train(model: &mut Model, cloud: &PointCloud) -> Result<RunReport> {
    let start = Instant::now();
    let config = model.config.clone();
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::Contract("train: dataset has no labels".into()))?;
    if cloud.num_classes() > config.num_classes {
        return Err(Error::Contract(format!(
            "train: cloud has {} classes, model expects {}",
            cloud.num_classes(),
            config.num_classes
        )));
    }
    if cloud.len() < config.patch_size {
        return Err(Error::Contract(format!(
            "train: cloud of {} points is smaller than patch_size {}",
            cloud.len(),
            config.patch_size
        )));
    }
    let mut freq = class_frequencies(cloud)?;
    freq.resize(config.num_classes, 0.0);
    let weights = ClassWeights::from_frequencies(&freq)?;
    let sigma = config.sampler_sigma.unwrap_or_else(|| default_sigma(cloud, config.patch_size));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epoch_loss = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let mut batch_losses = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let draw = if config.ablation.sws {
                sampler::draw_patch(cloud, &weights, config.patch_size, sigma, &mut rng)?
            } else {
                sampler::draw_patch_uniform(cloud, config.patch_size, &mut rng)?
            };
            let patch = PatchInput::from_cloud(cloud, &draw.point_ids);
            let truth: Vec<usize> = draw.point_ids.iter().map(|&i| labels[i]).collect();
            let out = model.forward(&mut tape, &binding, &patch, true, &mut rng)?;
            let loss_point = tape.weighted_cross_entropy(out.logits_point, &truth, weights.as_slice())?;
            let loss_nei = tape.weighted_cross_entropy(out.logits_nei, &truth, weights.as_slice())?;
            let combined = tape.add(loss_point, loss_nei)?;
            batch_losses.push(tape.scale(combined, 0.5)?);
        }
        let mut total = batch_losses[0];
        for &l in &batch_losses[1..] {
            total = tape.add(total, l)?;
        }
        let total = tape.scale(total, 1.0 / config.batch_size as f64)?;
        let loss_value = tape.value(total).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "train: non-finite loss {loss_value} at epoch {epoch}"
            )));
        }
        let grads = tape.backward(total)?;
        model.apply_sgd(&binding, &grads, config.learning_rate)?;
        epoch_loss.push(loss_value);
    }

    let final_metrics = evaluate(model, cloud, None)?;
    Ok(RunReport {
        config_hash: config_hash(&config),
        epoch_loss,
        final_metrics,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Deterministic patch cover: a grid of centers with 25% overlap, then a
/// sweep that patches any point the grid missed. Later patches overwrite
/// earlier predictions (last write).
pub fn tile_patches(cloud: &PointCloud, patch_size: usize) -> Result<Vec<Vec<usize>>> {
    let n = cloud.len();
    let p = patch_size.min(n);
    if p == n {
        return Ok(vec![(0..n).collect()]);
    }
    let (lo, hi) = cloud.bounding_box();
    let diag = cloud.bbox_diagonal();
    let radius = ((p as f64 / n as f64).cbrt() * diag / 2.0).max(diag * 1e-3);
    let spacing = radius * 0.75;
    let positions = cloud.positions();
    let cell = knn::default_cell_size(positions);
    let mut patches = Vec::new();
    let mut covered = vec![false; n];
    let mut centers = Vec::new();
    let mut z = lo[2];
    while z <= hi[2] + spacing / 2.0 {
        let mut y = lo[1];
        while y <= hi[1] + spacing / 2.0 {
            let mut x = lo[0];
            while x <= hi[0] + spacing / 2.0 {
                centers.push([x, y, z]);
                x += spacing;
            }
            y += spacing;
        }
        z += spacing;
    }
    for center in centers {
        let nn = knn_grid(&[center], positions, p, cell)?;
        let ids = nn.indices().to_vec();
        for &i in &ids {
            covered[i] = true;
        }
        patches.push(ids);
    }
    // Guarantee coverage: patch every point the grid missed, lowest id first.
    for i in 0..n {
        if !covered[i] {
            let nn = knn_grid(&positions[i..=i], positions, p, cell)?;
            let ids = nn.indices().to_vec();
            for &j in &ids {
                covered[j] = true;
            }
            patches.push(ids);
        }
    }
    Ok(patches)
}

/// Per-point predictions over a whole cloud: tile, infer per patch with
/// frozen statistics, resolve overlaps by last write, then refine by
/// neighborhood voting (or plain argmax when ablated).
pub fn predict(model: &mut Model, cloud: &PointCloud) -> Result<Vec<usize>> {
    let config = model.config.clone();
    let n = cloud.len();
    let c = config.num_classes;
    let patches = tile_patches(cloud, config.patch_size)?;
    let mut logits_point = vec![0.0; n * c];
    let mut logits_nei = vec![0.0; n * c];
    for (pi, ids) in patches.iter().enumerate() {
        let patch = PatchInput::from_cloud(cloud, ids);
        // Frozen stats make inference deterministic; the decimation stream
        // is seeded per patch.
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (pi as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let out = model.forward(&mut tape, &binding, &patch, false, &mut rng)?;
        let lp = tape.value(out.logits_point);
        let ln = tape.value(out.logits_nei);
        for (row, &point) in ids.iter().enumerate() {
            logits_point[point * c..(point + 1) * c].copy_from_slice(lp.row(row));
            logits_nei[point * c..(point + 1) * c].copy_from_slice(ln.row(row));
        }
    }
    let lp = crate::tensor::NDArray::new(vec![n, c], logits_point)?;
    let ln = crate::tensor::NDArray::new(vec![n, c], logits_nei)?;
    if config.ablation.nv {
        let neighbors = knn::self_index(cloud.positions(), config.k_neighbors)?;
        let VoteResult { final_labels, .. } = vote(
            &VoteInputs { logits_point: &lp, logits_nei: &ln, neighbors: &neighbors },
            config.vote_match_mode,
        )?;
        Ok(final_labels)
    } else {
        Ok(argmax_baseline(&lp))
    }
}

/// Predict and score against the cloud's labels.
pub fn evaluate(
    model: &mut Model,
    cloud: &PointCloud,
    class_names: Option<&[String]>,
) -> Result<MetricsReport> {
    let truth = cloud
        .labels()
        .ok_or_else(|| Error::Contract("evaluate: cloud has no labels".into()))?
        .to_vec();
    let pred = predict(model, cloud)?;
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    cm.accumulate(&truth, &pred)?;
    let names: Vec<String> = match class_names {
        Some(n) => n.to_vec(),
        None => (0..model.config.num_classes).map(|i| format!("class_{i}")).collect(),
    };
    cm.report(&names)
}

// ── ablation and K sweep ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub sws: bool,
    pub mcae: bool,
    pub pcsp: bool,
    pub nv: bool,
    pub oa: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// The five standard configurations: one module off per row A-D, everything
/// on for E. All runs share the base seed.
pub fn ablation_configs(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut out = Vec::new();
    for (label, off) in [("A", 0), ("B", 1), ("C", 2), ("D", 3), ("E", 4)] {
        let mut cfg = base.clone();
        cfg.ablation = crate::model::AblationToggles::default();
        match off {
            0 => cfg.ablation.sws = false,
            1 => cfg.ablation.mcae = false,
            2 => cfg.ablation.pcsp = false,
            3 => cfg.ablation.nv = false,
            _ => {}
        }
        out.push((label.to_string(), cfg));
    }
    out
}

/// Train and evaluate every ablation row on the same dataset and seed.
pub fn ablate(cloud: &PointCloud, base: &ModelConfig) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(5);
    for (label, cfg) in ablation_configs(base) {
        let mut model = build_model(&cfg)?;
        let report = train(&mut model, cloud)?;
        rows.push(AblationRow {
            model: label,
            sws: cfg.ablation.sws,
            mcae: cfg.ablation.mcae,
            pcsp: cfg.ablation.pcsp,
            nv: cfg.ablation.nv,
            oa: report.final_metrics.oa,
            miou: report.final_metrics.miou,
        });
    }
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub oa: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KSweepTable {
    pub rows: Vec<KSweepRow>,
}

/// Train and evaluate once per neighborhood size.
pub fn ksweep(cloud: &PointCloud, base: &ModelConfig, ks: &[usize]) -> Result<KSweepTable> {
    if ks.is_empty() {
        return Err(Error::Contract("ksweep: no K values given".into()));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut cfg = base.clone();
        cfg.k_neighbors = k;
        let mut model = build_model(&cfg)?;
        let report = train(&mut model, cloud)?;
        rows.push(KSweepRow { k, oa: report.final_metrics.oa, miou: report.final_metrics.miou });
    }
    Ok(KSweepTable { rows })
}
