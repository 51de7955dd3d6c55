//! Multilateral cascading attention encoder.
//!
//! Each level runs dual streams over a point's K-neighborhood — relative
//! position vectors `[P_k, P_i - P_k, |P_i - P_k|]` (7 wide) and relative
//! color vectors `[F_k, F_i - F_k]` (6 wide) — fuses them with the gathered
//! features through CBL and residual stacks, attention-pools over neighbors,
//! reattaches the raw coordinates/colors, and max-pools down to the next
//! scale. The raw P/F arrays cascade across scales by id selection, never
//! through the network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::knn::{self, NeighborIndex};
use crate::parallel::for_each_row_mut;
use crate::sampler;
use crate::tensor::{
    cbl, residual_block, CBLBound, CBLParams, NDArray, ResidualBound, ResidualParams, Tape,
    ValueId,
};

/// Per-scale working set: ids into the patch, raw positions and colors,
/// current features on the tape, and the K-neighbor table of this scale.
#[derive(Debug)]
pub struct LevelState {
    pub point_ids: Vec<usize>,
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub features: ValueId,
    pub neighbors: NeighborIndex,
}

impl LevelState {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Parameters of one encoder level with output width `C`.
#[derive(Debug, Clone)]
pub struct McaeParams {
    /// Initial pointwise lift of the incoming features, C_in -> C/2.
    pub pre: CBLParams,
    /// Relative-position stream, 7 -> C/2.
    pub pos_fc: CBLParams,
    /// Relative-color stream, 6 -> C/2.
    pub col_fc: CBLParams,
    /// Fusion of the three per-neighbor streams, 3C/2 -> C.
    pub post: CBLParams,
    /// Residual stack at width C.
    pub residuals: Vec<ResidualParams>,
    /// Attention scoring transform, C -> C.
    pub attn_weight: NDArray,
    pub attn_bias: NDArray,
    /// Reattachment of raw P and F, C + 6 -> C.
    pub fuse: CBLParams,
}

impl McaeParams {
    pub fn init(
        c_in: usize,
        c_out: usize,
        blocks: usize,
        leaky_slope: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if c_out % 2 != 0 || c_out < 2 {
            return Err(Error::Config(format!(
                "encoder level width {c_out} must be even and at least 2"
            )));
        }
        let half = c_out / 2;
        let bound = (1.0 / c_out as f64).sqrt();
        let attn: Vec<f64> = (0..c_out * c_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(McaeParams {
            pre: CBLParams::init(c_in, half, leaky_slope, rng),
            pos_fc: CBLParams::init(7, half, leaky_slope, rng),
            col_fc: CBLParams::init(6, half, leaky_slope, rng),
            post: CBLParams::init(half * 3, c_out, leaky_slope, rng),
            residuals: (0..blocks)
                .map(|_| ResidualParams::init(c_out, leaky_slope, rng))
                .collect(),
            attn_weight: NDArray::new(vec![c_out, c_out], attn).unwrap().with_grad(),
            attn_bias: NDArray::zeros(vec![c_out]).with_grad(),
            fuse: CBLParams::init(c_out + 6, c_out, leaky_slope, rng),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.post.out_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> McaeBound {
        McaeBound {
            pre: self.pre.bind(tape),
            pos_fc: self.pos_fc.bind(tape),
            col_fc: self.col_fc.bind(tape),
            post: self.post.bind(tape),
            residuals: self.residuals.iter().map(|r| r.bind(tape)).collect(),
            attn_weight: tape.leaf(self.attn_weight.clone()),
            attn_bias: tape.leaf(self.attn_bias.clone()),
            fuse: self.fuse.bind(tape),
        }
    }
}

#[derive(Debug, Clone)]
pub struct McaeBound {
    pub pre: CBLBound,
    pub pos_fc: CBLBound,
    pub col_fc: CBLBound,
    pub post: CBLBound,
    pub residuals: Vec<ResidualBound>,
    pub attn_weight: ValueId,
    pub attn_bias: ValueId,
    pub fuse: CBLBound,
}

/// Raw per-neighbor position encoding `[P_k ⊕ (P_i - P_k) ⊕ |P_i - P_k|]`,
/// shape `[N,K,7]`. The difference and norm entries are translation
/// invariant; only the absolute block shifts with the cloud.
pub fn relative_position_raw(positions: &[[f64; 3]], neighbors: &NeighborIndex) -> NDArray {
    let (n, k) = (neighbors.n(), neighbors.k());
    debug_assert_eq!(n, positions.len());
    let idx = neighbors.indices();
    let mut data = vec![0.0; n * k * 7];
    for_each_row_mut(&mut data, k * 7, |i, row| {
        let pi = positions[i];
        for j in 0..k {
            let pk = positions[idx[i * k + j]];
            let d = [pi[0] - pk[0], pi[1] - pk[1], pi[2] - pk[2]];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let o = j * 7;
            row[o..o + 3].copy_from_slice(&pk);
            row[o + 3..o + 6].copy_from_slice(&d);
            row[o + 6] = norm;
        }
    });
    NDArray::new(vec![n, k, 7], data).unwrap()
}

/// Raw per-neighbor color encoding `[F_k ⊕ (F_i - F_k)]`, shape `[N,K,6]`.
pub fn relative_color_raw(colors: &[[f64; 3]], neighbors: &NeighborIndex) -> NDArray {
    let (n, k) = (neighbors.n(), neighbors.k());
    debug_assert_eq!(n, colors.len());
    let idx = neighbors.indices();
    let mut data = vec![0.0; n * k * 6];
    for_each_row_mut(&mut data, k * 6, |i, row| {
        let fi = colors[i];
        for j in 0..k {
            let fk = colors[idx[i * k + j]];
            let o = j * 6;
            row[o..o + 3].copy_from_slice(&fk);
            row[o + 3] = fi[0] - fk[0];
            row[o + 4] = fi[1] - fk[1];
            row[o + 5] = fi[2] - fk[2];
        }
    });
    NDArray::new(vec![n, k, 6], data).unwrap()
}

fn pointwise_over_neighbors(
    tape: &mut Tape,
    raw: NDArray,
    params: &mut CBLParams,
    bound: &CBLBound,
    training: bool,
) -> Result<ValueId> {
    let (n, k, w) = (raw.shape()[0], raw.shape()[1], raw.shape()[2]);
    let c_out = params.out_dim();
    let flat = tape.constant(raw);
    let flat = tape.reshape(flat, vec![n * k, w])?;
    let out = cbl(tape, flat, params, bound, training)?;
    tape.reshape(out, vec![n, k, c_out])
}

/// Position stream of one level: raw 7-vectors through the pointwise CBL,
/// producing `[N,K,C/2]`.
pub fn encode_relative_position(
    tape: &mut Tape,
    positions: &[[f64; 3]],
    neighbors: &NeighborIndex,
    params: &mut CBLParams,
    bound: &CBLBound,
    training: bool,
) -> Result<ValueId> {
    if neighbors.n() != positions.len() {
        return Err(Error::Contract(format!(
            "encode_relative_position: neighbor table covers {} points, positions have {}",
            neighbors.n(),
            positions.len()
        )));
    }
    let raw = relative_position_raw(positions, neighbors);
    pointwise_over_neighbors(tape, raw, params, bound, training)
}

/// Color stream of one level: raw 6-vectors through the pointwise CBL,
/// producing `[N,K,C/2]`.
pub fn encode_relative_color(
    tape: &mut Tape,
    colors: &[[f64; 3]],
    neighbors: &NeighborIndex,
    params: &mut CBLParams,
    bound: &CBLBound,
    training: bool,
) -> Result<ValueId> {
    if neighbors.n() != colors.len() {
        return Err(Error::Contract(format!(
            "encode_relative_color: neighbor table covers {} points, colors have {}",
            neighbors.n(),
            colors.len()
        )));
    }
    let raw = relative_color_raw(colors, neighbors);
    pointwise_over_neighbors(tape, raw, params, bound, training)
}

/// Attention pooling over the neighbor axis: scores are a softmax (along K,
/// per channel) of a learned pointwise transform of the neighbor features;
/// the output is the score-weighted sum over neighbors.
pub fn attention_pool(
    tape: &mut Tape,
    neighbor_features: ValueId,
    attn_weight: ValueId,
    attn_bias: ValueId,
) -> Result<ValueId> {
    let shape = tape.value(neighbor_features).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "attention_pool: expected [N,K,C], got {shape:?}"
        )));
    }
    let (n, k, c) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(neighbor_features, vec![n * k, c])?;
    let logits = tape.matmul(flat, attn_weight)?;
    let logits = tape.add_row_bias(logits, attn_bias)?;
    let logits = tape.reshape(logits, vec![n, k, c])?;
    let scores = tape.softmax(logits, 1)?;
    tape.weighted_sum_over_neighbors(neighbor_features, scores)
}

/// Feature transform of one encoder level (everything before downsampling).
pub fn mcae_features(
    tape: &mut Tape,
    state: &LevelState,
    params: &mut McaeParams,
    bound: &McaeBound,
    training: bool,
) -> Result<ValueId> {
    let n = state.len();
    let k = state.neighbors.k();
    let half = params.pre.out_dim();
    let c = params.out_dim();

    // (a) initial pointwise lift
    let lifted = cbl(tape, state.features, &mut params.pre, &bound.pre, training)?;
    // (b) gathered neighbor features
    let gathered = tape.gather_neighbors(lifted, state.neighbors.indices(), k)?;
    // (c) dual relative streams
    let geo = encode_relative_position(
        tape,
        &state.positions,
        &state.neighbors,
        &mut params.pos_fc,
        &bound.pos_fc,
        training,
    )?;
    let col = encode_relative_color(
        tape,
        &state.colors,
        &state.neighbors,
        &mut params.col_fc,
        &bound.col_fc,
        training,
    )?;
    // (d) per-neighbor fusion and residual learning
    let merged = tape.concat(&[gathered, geo, col], 2)?;
    let merged = tape.reshape(merged, vec![n * k, half * 3])?;
    let mut fea = cbl(tape, merged, &mut params.post, &bound.post, training)?;
    for (r, rb) in params.residuals.iter_mut().zip(&bound.residuals) {
        fea = residual_block(tape, fea, r, rb, training)?;
    }
    let fea = tape.reshape(fea, vec![n, k, c])?;
    // (e) attention pooling over the neighborhood
    let pooled = attention_pool(tape, fea, bound.attn_weight, bound.attn_bias)?;
    // (f) reattach raw coordinates and colors, then fuse to the level width
    let raw = raw_pf(&state.positions, &state.colors);
    let raw = tape.constant(raw);
    let with_raw = tape.concat(&[pooled, raw], 1)?;
    cbl(tape, with_raw, &mut params.fuse, &bound.fuse, training)
}

/// `[N,6]` of raw positions and colors, used for the cascade reattachment
/// and as the level-0 input features.
pub fn raw_pf(positions: &[[f64; 3]], colors: &[[f64; 3]]) -> NDArray {
    let n = positions.len();
    let mut data = Vec::with_capacity(n * 6);
    for i in 0..n {
        data.extend_from_slice(&positions[i]);
        data.extend_from_slice(&colors[i]);
    }
    NDArray::new(vec![n, 6], data).unwrap()
}

/// Decimate to the next scale and max-pool each kept point's fine-level
/// neighborhood. Raw positions/colors carry over by id selection, bitwise.
/// Returns the next level state plus the fine-to-coarse map used later for
/// upsampling.
pub fn downsample_level(
    tape: &mut Tape,
    state: &LevelState,
    features: ValueId,
    decimation: usize,
    k_next: usize,
    rng: &mut impl Rng,
) -> Result<(LevelState, Vec<usize>)> {
    let n = state.len();
    let local_ids: Vec<usize> = (0..n).collect();
    let sampled = sampler::decimate(&local_ids, decimation, rng)?;
    if sampled.len() < k_next {
        return Err(Error::Contract(format!(
            "downsample_level: {} sampled points cannot support k={}",
            sampled.len(),
            k_next
        )));
    }
    // Max-pool each kept point over its own fine-level K-neighborhood.
    let rows = state.neighbors.rows_for(&sampled);
    let gathered = tape.gather_neighbors(features, &rows, state.neighbors.k())?;
    let pooled = tape.max_over_neighbors(gathered)?;

    let positions: Vec<[f64; 3]> = sampled.iter().map(|&i| state.positions[i]).collect();
    let colors: Vec<[f64; 3]> = sampled.iter().map(|&i| state.colors[i]).collect();
    let point_ids: Vec<usize> = sampled.iter().map(|&i| state.point_ids[i]).collect();
    let neighbors = knn::self_index(&positions, k_next)?;
    let fine_to_coarse = knn::subsample_index(&state.positions, &sampled)?;
    Ok((
        LevelState { point_ids, positions, colors, features: pooled, neighbors },
        fine_to_coarse,
    ))
}

/// Full encoder level: feature transform plus pooled next-scale state.
pub fn mcae_block(
    tape: &mut Tape,
    state: &LevelState,
    params: &mut McaeParams,
    bound: &McaeBound,
    training: bool,
    decimation: usize,
    rng: &mut impl Rng,
) -> Result<(ValueId, LevelState)> {
    let features = mcae_features(tape, state, params, bound, training)?;
    let (next, _) =
        downsample_level(tape, state, features, decimation, state.neighbors.k(), rng)?;
    Ok((features, next))
}

/// Ablation substitute for the MCAE level: shared pointwise CBL, neighbor
/// max-pool, pointwise output CBL. Same level interface, none of the
/// cascading machinery.
#[derive(Debug, Clone)]
pub struct SubstituteParams {
    pub pointwise: CBLParams,
    pub out: CBLParams,
}

impl SubstituteParams {
    pub fn init(c_in: usize, c_out: usize, leaky_slope: f64, rng: &mut impl Rng) -> Self {
        SubstituteParams {
            pointwise: CBLParams::init(c_in, c_out, leaky_slope, rng),
            out: CBLParams::init(c_out, c_out, leaky_slope, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> SubstituteBound {
        SubstituteBound { pointwise: self.pointwise.bind(tape), out: self.out.bind(tape) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SubstituteBound {
    pub pointwise: CBLBound,
    pub out: CBLBound,
}

pub fn substitute_features(
    tape: &mut Tape,
    state: &LevelState,
    params: &mut SubstituteParams,
    bound: &SubstituteBound,
    training: bool,
) -> Result<ValueId> {
    let k = state.neighbors.k();
    let lifted = cbl(tape, state.features, &mut params.pointwise, &bound.pointwise, training)?;
    let gathered = tape.gather_neighbors(lifted, state.neighbors.indices(), k)?;
    let pooled = tape.max_over_neighbors(gathered)?;
    cbl(tape, pooled, &mut params.out, &bound.out, training)
}
