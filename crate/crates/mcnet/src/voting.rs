//! Neighborhood-voting output refinement.
//!
//! The network ends in two heads: a per-point one and a neighbor-pooled
//! one. Per point, the head with the higher confidence (max softmax
//! probability) nominates a candidate label; neighbors whose own candidate
//! agrees then pool their probability vectors, and the argmax of the pooled
//! vector is the final label.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::NeighborIndex;
use crate::parallel::map_indexed;
use crate::tensor::{NDArray, Tape, ValueId};

/// Which per-neighbor label the agreement test in step (3) compares against
/// the center's candidate. `Candidate` uses each neighbor's own
/// head-selected candidate; `NeighborHead` uses the neighbor head's argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VoteMatchMode {
    #[default]
    Candidate,
    NeighborHead,
}

/// Inputs to one voting pass: both heads' logits plus the neighbor table
/// over the same points.
pub struct VoteInputs<'a> {
    pub logits_point: &'a NDArray,
    pub logits_nei: &'a NDArray,
    pub neighbors: &'a NeighborIndex,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteResult {
    pub final_labels: Vec<usize>,
    pub candidate_labels: Vec<usize>,
    pub support_counts: Vec<usize>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows(logits: &NDArray) -> Vec<f64> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let src = logits.data();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &src[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            out[i * c + j] /= z;
        }
    }
    out
}

/// Per-point argmax of the point head; ties go to the lowest class index.
/// This is the refinement-off baseline.
pub fn argmax_baseline(logits_point: &NDArray) -> Vec<usize> {
    let (n, c) = (logits_point.shape()[0], logits_point.shape()[1]);
    let d = logits_point.data();
    (0..n).map(|i| argmax(&d[i * c..(i + 1) * c])).collect()
}

/// Run the vote. Deterministic, pure, and trivially parallel over points.
pub fn vote(inputs: &VoteInputs<'_>, mode: VoteMatchMode) -> Result<VoteResult> {
    let lp = inputs.logits_point;
    let ln = inputs.logits_nei;
    if lp.shape() != ln.shape() || lp.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "vote: head shapes {:?} and {:?} must match as [N,C]",
            lp.shape(),
            ln.shape()
        )));
    }
    let (n, c) = (lp.shape()[0], lp.shape()[1]);
    if inputs.neighbors.n() != n {
        return Err(Error::Contract(format!(
            "vote: neighbor table covers {} points, logits have {}",
            inputs.neighbors.n(),
            n
        )));
    }
    if lp.data().iter().chain(ln.data()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("vote: logits contain NaN or Inf".into()));
    }
    let p_point = softmax_rows(lp);
    let p_nei = softmax_rows(ln);

    // Candidate per point: the higher-confidence head's argmax, point head
    // on ties.
    let candidates: Vec<usize> = (0..n)
        .map(|i| {
            let pp = &p_point[i * c..(i + 1) * c];
            let pn = &p_nei[i * c..(i + 1) * c];
            let conf_p = pp[argmax(pp)];
            let conf_n = pn[argmax(pn)];
            if conf_p >= conf_n {
                argmax(pp)
            } else {
                argmax(pn)
            }
        })
        .collect();

    // The agreement label each point exposes to its neighbors.
    let match_labels: Vec<usize> = match mode {
        VoteMatchMode::Candidate => candidates.clone(),
        VoteMatchMode::NeighborHead => {
            (0..n).map(|i| argmax(&p_nei[i * c..(i + 1) * c])).collect()
        }
    };

    let k = inputs.neighbors.k();
    let idx = inputs.neighbors.indices();
    let resolved: Vec<(usize, usize)> = map_indexed(n, |i| {
        let cand = candidates[i];
        let mut pooled = vec![0.0; c];
        let mut support = 0usize;
        let mut support_beyond_self = 0usize;
        for &j in &idx[i * k..(i + 1) * k] {
            if match_labels[j] == cand {
                support += 1;
                if j != i {
                    support_beyond_self += 1;
                }
                for ch in 0..c {
                    pooled[ch] += p_point[j * c + ch];
                }
            }
        }
        let label = if support_beyond_self == 0 { cand } else { argmax(&pooled) };
        (label, support)
    });

    let final_labels = resolved.iter().map(|r| r.0).collect();
    let support_counts = resolved.iter().map(|r| r.1).collect();
    Ok(VoteResult { final_labels, candidate_labels: candidates, support_counts })
}

/// Neighbor-pooled prediction head: mean features over the K-neighborhood,
/// then a pointwise linear map to class logits.
pub fn head_nei(
    tape: &mut Tape,
    features: ValueId,
    neighbors: &NeighborIndex,
    weight: ValueId,
    bias: ValueId,
) -> Result<ValueId> {
    let n = tape.value(features).shape()[0];
    if neighbors.n() != n {
        return Err(Error::Contract(format!(
            "head_nei: neighbor table covers {} points, features have {}",
            neighbors.n(),
            n
        )));
    }
    let gathered = tape.gather_neighbors(features, neighbors.indices(), neighbors.k())?;
    let pooled = tape.mean_over_neighbors(gathered)?;
    let logits = tape.matmul(pooled, weight)?;
    tape.add_row_bias(logits, bias)
}

/// Per-point prediction head: a pointwise linear map to class logits.
pub fn head_point(
    tape: &mut Tape,
    features: ValueId,
    weight: ValueId,
    bias: ValueId,
) -> Result<ValueId> {
    let logits = tape.matmul(features, weight)?;
    tape.add_row_bias(logits, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::self_index;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_positions(n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|i| [i as f64, 0.0, 0.0]).collect()
    }

    fn logits_for(labels: &[usize], c: usize, margin: f64) -> NDArray {
        let n = labels.len();
        let mut data = vec![0.0; n * c];
        for (i, &l) in labels.iter().enumerate() {
            data[i * c + l] = margin;
        }
        NDArray::new(vec![n, c], data).unwrap()
    }

    #[test]
    fn unanimous_scene_keeps_argmax_with_full_support() {
        let n = 12;
        let positions = line_positions(n);
        let neighbors = self_index(&positions, 3).unwrap();
        let labels = vec![1usize; n];
        let lp = logits_for(&labels, 3, 5.0);
        let ln = logits_for(&labels, 3, 5.0);
        let out = vote(
            &VoteInputs { logits_point: &lp, logits_nei: &ln, neighbors: &neighbors },
            VoteMatchMode::Candidate,
        )
        .unwrap();
        assert_eq!(out.final_labels, labels);
        assert_eq!(out.candidate_labels, labels);
        assert!(out.support_counts.iter().all(|&s| s == 3));
    }

    #[test]
    fn single_point_self_neighborhood_keeps_candidate() {
        let positions = vec![[0.0; 3]];
        let neighbors = self_index(&positions, 1).unwrap();
        let lp = NDArray::new(vec![1, 2], vec![0.2, 0.9]).unwrap();
        let ln = NDArray::new(vec![1, 2], vec![0.1, 0.3]).unwrap();
        let out = vote(
            &VoteInputs { logits_point: &lp, logits_nei: &ln, neighbors: &neighbors },
            VoteMatchMode::Candidate,
        )
        .unwrap();
        assert_eq!(out.final_labels, vec![1]);
        assert_eq!(out.candidate_labels, vec![1]);
    }

    #[test]
    fn higher_confidence_head_nominates() {
        let positions = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        let neighbors = self_index(&positions, 1).unwrap();
        // Point head weakly says class 0; neighbor head strongly says 1.
        let lp = NDArray::new(vec![2, 2], vec![0.1, 0.0, 0.1, 0.0]).unwrap();
        let ln = NDArray::new(vec![2, 2], vec![0.0, 4.0, 0.0, 4.0]).unwrap();
        let out = vote(
            &VoteInputs { logits_point: &lp, logits_nei: &ln, neighbors: &neighbors },
            VoteMatchMode::Candidate,
        )
        .unwrap();
        assert_eq!(out.candidate_labels, vec![1, 1]);
    }

    #[test]
    fn vote_is_shift_invariant_per_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let c = 4;
        let positions = line_positions(n);
        let neighbors = self_index(&positions, 5).unwrap();
        let data: Vec<f64> = (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data_n: Vec<f64> = (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lp = NDArray::new(vec![n, c], data.clone()).unwrap();
        let ln = NDArray::new(vec![n, c], data_n.clone()).unwrap();
        // Add a per-point constant to every logit of that point.
        let mut shifted = data;
        let mut shifted_n = data_n;
        for i in 0..n {
            let s = (i as f64) * 0.37 - 3.0;
            for j in 0..c {
                shifted[i * c + j] += s;
                shifted_n[i * c + j] += s * 0.5 + 1.0;
            }
        }
        let lp2 = NDArray::new(vec![n, c], shifted).unwrap();
        let ln2 = NDArray::new(vec![n, c], shifted_n).unwrap();
        let a = vote(
            &VoteInputs { logits_point: &lp, logits_nei: &ln, neighbors: &neighbors },
            VoteMatchMode::Candidate,
        )
        .unwrap();
        let b = vote(
            &VoteInputs { logits_point: &lp2, logits_nei: &ln2, neighbors: &neighbors },
            VoteMatchMode::Candidate,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_on_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let positions = line_positions(n);
        let neighbors = self_index(&positions, 7).unwrap();
        let data: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data_n: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lp = NDArray::new(vec![n, 3], data).unwrap();
        let ln = NDArray::new(vec![n, 3], data_n).unwrap();
        let inputs = VoteInputs { logits_point: &lp, logits_nei: &ln, neighbors: &neighbors };
        let a = vote(&inputs, VoteMatchMode::Candidate).unwrap();
        let b = vote(&inputs, VoteMatchMode::Candidate).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_baseline_rules() {
        let l = NDArray::new(vec![2, 2], vec![0.1, 0.9, 0.5, 0.5]).unwrap();
        assert_eq!(argmax_baseline(&l), vec![1, 0]);
    }

    #[test]
    fn baseline_equals_vote_on_unanimous_neighborhoods() {
        let n = 20;
        let positions = line_positions(n);
        let neighbors = self_index(&positions, 4).unwrap();
        // Two spatially separated blocks of agreeing labels; neighborhoods
        // near the boundary still agree because logits are strong.
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= 10)).collect();
        let lp = logits_for(&labels, 2, 8.0);
        let ln = logits_for(&labels, 2, 8.0);
        let voted = vote(
            &VoteInputs { logits_point: &lp, logits_nei: &ln, neighbors: &neighbors },
            VoteMatchMode::Candidate,
        )
        .unwrap();
        // Unanimity only holds away from the block boundary; check the
        // interior where every neighbor carries the same label.
        let base = argmax_baseline(&lp);
        for i in 0..n {
            let row = neighbors.row(i);
            if row.iter().all(|&j| labels[j] == labels[i]) {
                assert_eq!(voted.final_labels[i], base[i], "point {i}");
            }
        }
    }

    #[test]
    fn flipped_logits_recovered_by_neighbors() {
        // 100 points in a dense line, all truly class 0; 10 points get
        // flipped point-head logits. The neighbor-pooled head stays right
        // and more confident than the corrupted point head, so it
        // nominates the correct candidate and the agreeing neighbors'
        // probability mass settles it.
        let n = 100;
        let positions: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
        let neighbors = self_index(&positions, 9).unwrap();
        let mut lp = logits_for(&vec![0usize; n], 2, 4.0);
        let flipped: Vec<usize> = (0..10).map(|t| t * 10 + 3).collect();
        for &i in &flipped {
            let row = &mut lp.data_mut()[i * 2..(i + 1) * 2];
            row[0] = 0.0;
            row[1] = 2.0;
        }
        let ln = logits_for(&vec![0usize; n], 2, 4.0);
        let out = vote(
            &VoteInputs { logits_point: &lp, logits_nei: &ln, neighbors: &neighbors },
            VoteMatchMode::Candidate,
        )
        .unwrap();
        // Every flipped point is wrong under the plain argmax baseline.
        let base = argmax_baseline(&lp);
        assert!(flipped.iter().all(|&i| base[i] == 1));
        let recovered = flipped.iter().filter(|&&i| out.final_labels[i] == 0).count();
        assert!(recovered >= 8, "recovered only {recovered} of 10 flips");
    }

    #[test]
    fn head_nei_with_self_only_equals_direct_fc() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let positions = line_positions(6);
        let neighbors = self_index(&positions, 1).unwrap();
        let mut tape = Tape::new();
        let feats: Vec<f64> = (0..6 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = tape.constant(NDArray::new(vec![6, 4], feats).unwrap());
        let wdat: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = tape.leaf(NDArray::new(vec![4, 3], wdat).unwrap());
        let b = tape.leaf(NDArray::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap());
        let pooled = head_nei(&mut tape, f, &neighbors, w, b).unwrap();
        let direct = head_point(&mut tape, f, w, b).unwrap();
        assert_eq!(tape.value(pooled).data(), tape.value(direct).data());
    }

    #[test]
    fn head_nei_constant_features_give_constant_logits() {
        let positions = line_positions(8);
        let neighbors = self_index(&positions, 3).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(NDArray::filled(vec![8, 2], 0.7));
        let w = tape.leaf(NDArray::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap());
        let b = tape.leaf(NDArray::zeros(vec![2]));
        let logits = head_nei(&mut tape, f, &neighbors, w, b).unwrap();
        let d = tape.value(logits);
        for i in 1..8 {
            assert_eq!(d.row(i), d.row(0));
        }
    }
}
