//! Semantic-weighted patch sampling and inter-scale decimation.
//!
//! Patch draws bias point selection toward rare classes (inverse-sqrt
//! frequency weights) and toward the patch center (Gaussian distance
//! kernel); the two factors multiply into one unnormalized probability per
//! point. Selection without replacement uses exponential keys, so scaling
//! all probabilities by a constant leaves every draw unchanged.

use rand::Rng;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Frequency floor for the inverse-sqrt weighting.
pub const FREQ_EPSILON: f64 = 1e-4;

/// Per-class sampling weights, normalized to mean one.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights { weights: vec![1.0; num_classes] }
    }

    /// `w_c ∝ 1/sqrt(max(freq_c, ε))`, then normalized to mean one. The
    /// sqrt tempers the boost so near-zero-frequency classes are not
    /// oversampled into degeneracy.
    pub fn from_frequencies(freq: &[f64]) -> Result<Self> {
        if freq.is_empty() || freq.iter().all(|&f| f == 0.0) {
            return Err(Error::Contract("class weights: all frequencies are zero".into()));
        }
        if freq.iter().any(|&f| f < 0.0) {
            return Err(Error::Contract("class weights: negative frequency".into()));
        }
        let mut w: Vec<f64> = freq.iter().map(|&f| 1.0 / f.max(FREQ_EPSILON).sqrt()).collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        for v in w.iter_mut() {
            *v /= mean;
        }
        Ok(ClassWeights { weights: w })
    }

    pub fn get(&self, class: usize) -> f64 {
        self.weights[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// One training patch: which points were taken and at what unnormalized
/// probability.
#[derive(Debug, Clone)]
pub struct PatchDraw {
    pub center_id: usize,
    pub point_ids: Vec<usize>,
    pub probabilities_used: Vec<f64>,
}

/// Weighted selection of `patch_size` distinct points without replacement,
/// by exponential keys: point i gets key `-ln(U_i)/p_i` and the smallest
/// keys win. Deterministic for a given rng state.
fn weighted_take(probs: &[f64], take: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (-u.ln() / p, i)
        })
        .collect();
    keyed.select_nth_unstable_by(take - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.truncate(take);
    let mut ids: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    ids.sort_unstable();
    ids
}

/// Draw a semantically weighted patch around a uniformly chosen center.
pub fn draw_patch(
    cloud: &PointCloud,
    weights: &ClassWeights,
    patch_size: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<PatchDraw> {
    let n = cloud.len();
    if patch_size > n {
        return Err(Error::Contract(format!(
            "draw_patch: patch size {patch_size} exceeds cloud size {n}"
        )));
    }
    if patch_size == 0 {
        return Err(Error::Contract("draw_patch: patch size must be positive".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Contract(format!("draw_patch: sigma must be positive, got {sigma}")));
    }
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::Contract("draw_patch: cloud has no labels".into()))?;
    if weights.len() != cloud.num_classes() {
        return Err(Error::Contract(format!(
            "draw_patch: {} weights for {} classes",
            weights.len(),
            cloud.num_classes()
        )));
    }
    let center_id = rng.random_range(0..n);
    let center = cloud.positions()[center_id];
    let probs: Vec<f64> = (0..n)
        .map(|i| {
            let p = cloud.positions()[i];
            let d2 = (p[0] - center[0]).powi(2)
                + (p[1] - center[1]).powi(2)
                + (p[2] - center[2]).powi(2);
            weights.get(labels[i]) * (-d2 / (sigma * sigma)).exp()
        })
        .collect();
    let point_ids = if patch_size == n {
        (0..n).collect()
    } else {
        weighted_take(&probs, patch_size, rng)
    };
    let probabilities_used = point_ids.iter().map(|&i| probs[i]).collect();
    Ok(PatchDraw { center_id, point_ids, probabilities_used })
}

/// Unweighted random patch: every point equally likely, no distance kernel.
/// This is the sampling used when the semantic-weighted module is ablated.
pub fn draw_patch_uniform(
    cloud: &PointCloud,
    patch_size: usize,
    rng: &mut impl Rng,
) -> Result<PatchDraw> {
    let n = cloud.len();
    if patch_size > n || patch_size == 0 {
        return Err(Error::Contract(format!(
            "draw_patch: patch size {patch_size} invalid for cloud size {n}"
        )));
    }
    let center_id = rng.random_range(0..n);
    let probs = vec![1.0; n];
    let point_ids = if patch_size == n {
        (0..n).collect()
    } else {
        weighted_take(&probs, patch_size, rng)
    };
    let probabilities_used = vec![1.0; point_ids.len()];
    Ok(PatchDraw { center_id, point_ids, probabilities_used })
}

/// Uniform subset of `ceil(len/ratio)` elements, ascending input order,
/// deterministic per rng state. `ratio == 1` is the identity.
pub fn decimate(point_ids: &[usize], ratio: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if ratio < 1 {
        return Err(Error::Contract("decimate: ratio must be at least 1".into()));
    }
    let n = point_ids.len();
    let keep = n.div_ceil(ratio);
    if keep == n {
        return Ok(point_ids.to_vec());
    }
    // Partial Fisher-Yates over positions, then restore input order.
    let mut slots: Vec<usize> = (0..n).collect();
    for i in 0..keep {
        let j = rng.random_range(i..n);
        slots.swap(i, j);
    }
    let mut chosen = slots[..keep].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|s| point_ids[s]).collect())
}
