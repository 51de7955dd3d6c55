//! Cross-stage-partial decoder.
//!
//! Coarse features are copied up to the finer scale by nearest-coarse-point
//! mapping plus a pointwise CBL, concatenated channel-wise with the
//! same-scale encoder skip, and integrated by a block that splits into two
//! half-width branches — one plain CBL shortcut, one CBL plus residual
//! stack — re-merges them, reinjects local context through a neighbor
//! max-pool, and finishes with a pointwise CBL.

use rand::Rng;

use crate::error::{Error, Result};
use crate::knn::NeighborIndex;
use crate::tensor::{
    cbl, residual_block, CBLBound, CBLParams, ResidualBound, ResidualParams, Tape, ValueId,
};

/// Parameters of one decoder integration block over input width `C`.
#[derive(Debug, Clone)]
pub struct PcspParams {
    /// Shortcut branch, C -> C/2.
    pub branch_a: CBLParams,
    /// Learned branch entry, C -> C/2.
    pub branch_b: CBLParams,
    /// Residual stack of the learned branch at C/2.
    pub branch_b_residual: ResidualParams,
    /// Output transform after local re-aggregation, C -> C_out.
    pub merge: CBLParams,
}

impl PcspParams {
    pub fn init(c_in: usize, c_out: usize, leaky_slope: f64, rng: &mut impl Rng) -> Result<Self> {
        if c_in % 2 != 0 || c_in < 2 {
            return Err(Error::Config(format!(
                "decoder block width {c_in} must be even to halve into branches"
            )));
        }
        let half = c_in / 2;
        Ok(PcspParams {
            branch_a: CBLParams::init(c_in, half, leaky_slope, rng),
            branch_b: CBLParams::init(c_in, half, leaky_slope, rng),
            branch_b_residual: ResidualParams::init(half, leaky_slope, rng),
            merge: CBLParams::init(c_in, c_out, leaky_slope, rng),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> PcspBound {
        PcspBound {
            branch_a: self.branch_a.bind(tape),
            branch_b: self.branch_b.bind(tape),
            branch_b_residual: self.branch_b_residual.bind(tape),
            merge: self.merge.bind(tape),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PcspBound {
    pub branch_a: CBLBound,
    pub branch_b: CBLBound,
    pub branch_b_residual: ResidualBound,
    pub merge: CBLBound,
}

/// Copy each fine point's nearest-coarse feature row, then transform
/// pointwise. Fine points mapped to the same coarse point share identical
/// pre-CBL rows bitwise.
pub fn upsample(
    tape: &mut Tape,
    coarse_features: ValueId,
    fine_to_coarse: &[usize],
    params: &mut CBLParams,
    bound: &CBLBound,
    training: bool,
) -> Result<ValueId> {
    let copied = tape.select_rows(coarse_features, fine_to_coarse)?;
    cbl(tape, copied, params, bound, training)
}

/// Two-branch split/merge integration with local re-aggregation.
pub fn pcsp_block(
    tape: &mut Tape,
    x: ValueId,
    neighbors: &NeighborIndex,
    params: &mut PcspParams,
    bound: &PcspBound,
    training: bool,
) -> Result<ValueId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != params.branch_a.in_dim() {
        return Err(Error::Dimension(format!(
            "pcsp_block: input {:?} does not match block width {}",
            shape,
            params.branch_a.in_dim()
        )));
    }
    if neighbors.n() != shape[0] {
        return Err(Error::Contract(format!(
            "pcsp_block: neighbor table covers {} points, features have {}",
            neighbors.n(),
            shape[0]
        )));
    }
    let a = cbl(tape, x, &mut params.branch_a, &bound.branch_a, training)?;
    let b = cbl(tape, x, &mut params.branch_b, &bound.branch_b, training)?;
    let b = residual_block(tape, b, &mut params.branch_b_residual, &bound.branch_b_residual, training)?;
    let merged = tape.concat(&[a, b], 1)?;
    let gathered = tape.gather_neighbors(merged, neighbors.indices(), neighbors.k())?;
    let local = tape.max_over_neighbors(gathered)?;
    cbl(tape, local, &mut params.merge, &bound.merge, training)
}

/// Per-level decoder parameters: the upsample transform is absent at the
/// coarsest level, which integrates its skip directly.
#[derive(Debug, Clone)]
pub struct DecoderLevelParams {
    pub up: Option<CBLParams>,
    pub block: DecoderBlockParams,
}

/// Either the split/merge block or its pointwise-MLP ablation substitute.
#[derive(Debug, Clone)]
pub enum DecoderBlockParams {
    Pcsp(PcspParams),
    Mlp(CBLParams),
}

impl DecoderLevelParams {
    pub fn bind(&self, tape: &mut Tape) -> DecoderLevelBound {
        DecoderLevelBound {
            up: self.up.as_ref().map(|u| u.bind(tape)),
            block: match &self.block {
                DecoderBlockParams::Pcsp(p) => DecoderBlockBound::Pcsp(p.bind(tape)),
                DecoderBlockParams::Mlp(m) => DecoderBlockBound::Mlp(m.bind(tape)),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLevelBound {
    pub up: Option<CBLBound>,
    pub block: DecoderBlockBound,
}

#[derive(Debug, Clone, Copy)]
pub enum DecoderBlockBound {
    Pcsp(PcspBound),
    Mlp(CBLBound),
}

/// Walk the levels coarsest to finest: upsample the running features,
/// concatenate the same-scale skip, integrate. The coarsest level has no
/// coarser input and integrates its skip alone. Returns the finest
/// per-point features for the heads (width = deepest level's channels via
/// the trailing stem in the model).
#[allow(clippy::too_many_arguments)]
pub fn decode(
    tape: &mut Tape,
    skips: &[ValueId],
    level_neighbors: &[NeighborIndex],
    fine_to_coarse: &[Vec<usize>],
    params: &mut [DecoderLevelParams],
    bounds: &[DecoderLevelBound],
    training: bool,
) -> Result<ValueId> {
    let levels = skips.len();
    if levels == 0 {
        return Err(Error::Contract("decode: no levels".into()));
    }
    if level_neighbors.len() != levels
        || params.len() != levels
        || bounds.len() != levels
        || fine_to_coarse.len() != levels - 1
    {
        return Err(Error::Contract(format!(
            "decode: inconsistent level counts (skips {}, neighbors {}, params {}, maps {})",
            levels,
            level_neighbors.len(),
            params.len(),
            fine_to_coarse.len()
        )));
    }
    let mut current: Option<ValueId> = None;
    for l in (0..levels).rev() {
        let x = match current {
            None => skips[l],
            Some(coarse) => {
                let up_params = params[l].up.as_mut().ok_or_else(|| {
                    Error::Contract(format!("decode: level {l} is missing its upsample transform"))
                })?;
                let up_bound = bounds[l].up.as_ref().unwrap();
                let up = upsample(tape, coarse, &fine_to_coarse[l], up_params, up_bound, training)?;
                tape.concat(&[up, skips[l]], 1)?
            }
        };
        let y = match (&mut params[l].block, &bounds[l].block) {
            (DecoderBlockParams::Pcsp(p), DecoderBlockBound::Pcsp(b)) => {
                pcsp_block(tape, x, &level_neighbors[l], p, b, training)?
            }
            (DecoderBlockParams::Mlp(m), DecoderBlockBound::Mlp(b)) => {
                cbl(tape, x, m, b, training)?
            }
            _ => return Err(Error::Contract("decode: parameter/binding kind mismatch".into())),
        };
        current = Some(y);
    }
    Ok(current.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::self_index;
    use crate::tensor::NDArray;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_positions(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.0..1.0)])
            .collect()
    }

    #[test]
    fn upsample_identity_mapping_is_pointwise_cbl() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coarse = tape.constant(NDArray::new(vec![6, 4], data).unwrap());
        let mapping: Vec<usize> = (0..6).collect();
        let mut up = CBLParams::init(4, 4, 0.2, &mut rng);
        let ub = up.bind(&mut tape);
        let out = upsample(&mut tape, coarse, &mapping, &mut up, &ub, true).unwrap();
        // Same thing without the copy.
        let mut tape2 = Tape::new();
        let data2 = tape.value(coarse).clone();
        let c2 = tape2.constant(data2);
        let mut up2 = up.clone();
        up2.bn_running_mean = vec![0.0; 4];
        up2.bn_running_var = vec![1.0; 4];
        let ub2 = up2.bind(&mut tape2);
        let direct = cbl(&mut tape2, c2, &mut up2, &ub2, true).unwrap();
        assert_eq!(tape.value(out).data(), tape2.value(direct).data());
    }

    #[test]
    fn single_coarse_point_shares_rows_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coarse = tape.constant(NDArray::new(vec![1, 4], data).unwrap());
        let mapping = vec![0usize; 10];
        let copied = tape.select_rows(coarse, &mapping).unwrap();
        let rows = tape.value(copied);
        for i in 1..10 {
            assert_eq!(rows.row(i), rows.row(0));
        }
    }

    #[test]
    fn pcsp_shapes_halve_and_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let positions = random_positions(128, &mut rng);
        let neighbors = self_index(&positions, 5).unwrap();
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..128 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = tape.constant(NDArray::new(vec![128, 64], data).unwrap());
        let mut params = PcspParams::init(64, 16, 0.2, &mut rng).unwrap();
        assert_eq!(params.branch_a.out_dim(), 32);
        assert_eq!(params.branch_b.out_dim(), 32);
        let bound = params.bind(&mut tape);
        let out = pcsp_block(&mut tape, x, &neighbors, &mut params, &bound, true).unwrap();
        assert_eq!(tape.value(out).shape(), &[128, 16]);
    }

    #[test]
    fn zero_residual_weights_keep_block_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let positions = random_positions(32, &mut rng);
        let neighbors = self_index(&positions, 4).unwrap();
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..32 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = tape.constant(NDArray::new(vec![32, 8], data).unwrap());
        let mut params = PcspParams::init(8, 8, 0.2, &mut rng).unwrap();
        params.branch_b_residual = ResidualParams {
            cbl1: CBLParams::zeroed(4, 4, 0.2),
            cbl2: CBLParams::zeroed(4, 4, 0.2),
        };
        let bound = params.bind(&mut tape);
        let out = pcsp_block(&mut tape, x, &neighbors, &mut params, &bound, true).unwrap();
        assert!(tape.value(out).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn odd_width_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            PcspParams::init(7, 8, 0.2, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn one_level_decode_is_single_block_on_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let positions = random_positions(40, &mut rng);
        let neighbors = self_index(&positions, 4).unwrap();
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..40 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let skip = tape.constant(NDArray::new(vec![40, 8], data).unwrap());
        let mut params = vec![DecoderLevelParams {
            up: None,
            block: DecoderBlockParams::Pcsp(PcspParams::init(8, 8, 0.2, &mut rng).unwrap()),
        }];
        let bounds: Vec<DecoderLevelBound> = params.iter().map(|p| p.bind(&mut tape)).collect();
        let out = decode(&mut tape, &[skip], &[neighbors], &[], &mut params, &bounds, true).unwrap();
        assert_eq!(tape.value(out).shape(), &[40, 8]);
    }

    #[test]
    fn level_count_mismatch_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let positions = random_positions(10, &mut rng);
        let neighbors = self_index(&positions, 2).unwrap();
        let mut tape = Tape::new();
        let skip = tape.constant(NDArray::zeros(vec![10, 4]));
        let mut params: Vec<DecoderLevelParams> = vec![];
        let err = decode(&mut tape, &[skip], &[neighbors], &[], &mut params, &[], true).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
