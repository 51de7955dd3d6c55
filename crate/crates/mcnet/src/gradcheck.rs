//! Finite-difference gradient checks.
//!
//! Every differentiable kernel is rebuilt as a scalar function of its
//! differentiable inputs (loss = sum of a random projection of the output)
//! and the tape gradient is compared entrywise against central finite
//! differences, `(f(x+h) - f(x-h)) / 2h` with `h = 1e-5`. The FD side never
//! touches the backward pass, so it stays an independent oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{pcsp_block, upsample, PcspBound, PcspParams};
use crate::encoder::{attention_pool, mcae_features, LevelState, McaeParams};
use crate::error::Result;
use crate::knn::{self, NeighborIndex};
use crate::model::{build_model, Model, ModelConfig, PatchInput};
use crate::tensor::{
    cbl, residual_block, CBLBound, CBLParams, NDArray, ResidualBound, ResidualParams, Tape,
    ValueId,
};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const SOFTMAX_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub seeds: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// A forward builder: registers the given inputs as leaves (in order) and
/// returns their ids plus a scalar loss.
type ForwardFn<'a> = dyn Fn(&mut Tape, &[NDArray]) -> Result<(Vec<ValueId>, ValueId)> + 'a;

fn eval_loss(forward: &ForwardFn<'_>, inputs: &[NDArray]) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, loss) = forward(&mut tape, inputs)?;
    Ok(tape.value(loss).data()[0])
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Max relative error between tape and FD gradients over the probed
/// entries of every `requires_grad` input. `entry_budget` caps the number
/// of probed entries (random subset) for large parameter sets.
pub fn fd_max_rel_err(
    inputs: &[NDArray],
    forward: &ForwardFn<'_>,
    entry_budget: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (ids, loss) = forward(&mut tape, inputs)?;
    let grads = tape.backward(loss)?;
    let mut entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(_, a)| a.requires_grad())
        .flat_map(|(t, a)| (0..a.numel()).map(move |e| (t, e)))
        .collect();
    if let Some(budget) = entry_budget {
        if entries.len() > budget {
            for i in 0..budget {
                let j = rng.random_range(i..entries.len());
                entries.swap(i, j);
            }
            entries.truncate(budget);
        }
    }
    let mut max_err: f64 = 0.0;
    let mut scratch = inputs.to_vec();
    for (t, e) in entries {
        let original = scratch[t].data()[e];
        scratch[t].data_mut()[e] = original + FD_STEP;
        let fp = eval_loss(forward, &scratch)?;
        scratch[t].data_mut()[e] = original - FD_STEP;
        let fm = eval_loss(forward, &scratch)?;
        scratch[t].data_mut()[e] = original;
        let fd = (fp - fm) / (2.0 * FD_STEP);
        let ad = grads
            .get(ids[t])
            .map(|g| g.data()[e])
            .unwrap_or(0.0);
        max_err = max_err.max(rel_err(ad, fd));
    }
    Ok(max_err)
}

fn random_array(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> NDArray {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    NDArray::new(shape, data).unwrap().with_grad()
}

fn projection(shape: &[usize], rng: &mut ChaCha8Rng) -> NDArray {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    NDArray::new(shape.to_vec(), data).unwrap()
}

/// loss = sum(out ⊙ R) for a fixed random projection R.
fn project_loss(tape: &mut Tape, out: ValueId, r: &NDArray) -> Result<ValueId> {
    let rc = tape.constant(r.clone());
    let prod = tape.mul(out, rc)?;
    tape.sum(prod)
}

fn run_seeds(
    module: &'static str,
    name: &'static str,
    tolerance: f64,
    seeds: usize,
    entry_budget: Option<usize>,
    build: impl Fn(&mut ChaCha8Rng) -> Result<(Vec<NDArray>, Box<ForwardFn<'static>>)>,
) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ seed);
        let (inputs, forward) = build(&mut rng)?;
        let err = fd_max_rel_err(&inputs, forward.as_ref(), entry_budget, &mut rng)?;
        worst = worst.max(err);
    }
    Ok(CheckOutcome { module, name, max_rel_err: worst, tolerance, seeds })
}

fn line_index(n: usize, k: usize) -> NeighborIndex {
    let positions: Vec<[f64; 3]> = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
    knn::self_index(&positions, k).unwrap()
}

// ── per-op checks ───────────────────────────────────────────────────

fn check_matmul() -> Result<CheckOutcome> {
    run_seeds("tensor", "matmul", OP_TOLERANCE, 10, None, |rng| {
        let a = random_array(vec![4, 5], rng);
        let b = random_array(vec![5, 3], rng);
        let r = projection(&[4, 3], rng);
        Ok((vec![a, b], Box::new(move |tape, inputs| {
            let ia = tape.leaf(inputs[0].clone());
            let ib = tape.leaf(inputs[1].clone());
            let out = tape.matmul(ia, ib)?;
            let loss = project_loss(tape, out, &r)?;
            Ok((vec![ia, ib], loss))
        })))
    })
}

fn check_concat() -> Result<CheckOutcome> {
    run_seeds("tensor", "concat", OP_TOLERANCE, 10, None, |rng| {
        let w0 = rng.random_range(1..4);
        let w1 = rng.random_range(1..4);
        let n = rng.random_range(2..5);
        let a = random_array(vec![n, w0], rng);
        let b = random_array(vec![n, w1], rng);
        let r = projection(&[n, w0 + w1], rng);
        Ok((vec![a, b], Box::new(move |tape, inputs| {
            let ia = tape.leaf(inputs[0].clone());
            let ib = tape.leaf(inputs[1].clone());
            let out = tape.concat(&[ia, ib], 1)?;
            let loss = project_loss(tape, out, &r)?;
            Ok((vec![ia, ib], loss))
        })))
    })
}

fn check_gather() -> Result<CheckOutcome> {
    run_seeds("tensor", "gather_neighbors", OP_TOLERANCE, 10, None, |rng| {
        let (n, k, c) = (6, 3, 2);
        let feats = random_array(vec![n, c], rng);
        let idx: Vec<usize> = (0..n * k).map(|_| rng.random_range(0..n)).collect();
        let r = projection(&[n, k, c], rng);
        Ok((vec![feats], Box::new(move |tape, inputs| {
            let f = tape.leaf(inputs[0].clone());
            let out = tape.gather_neighbors(f, &idx, k)?;
            let loss = project_loss(tape, out, &r)?;
            Ok((vec![f], loss))
        })))
    })
}

fn check_max_pool() -> Result<CheckOutcome> {
    // Continuous random values: ties have probability zero, so FD is valid.
    run_seeds("tensor", "max_over_neighbors", OP_TOLERANCE, 10, None, |rng| {
        let (n, k, c) = (4, 5, 3);
        let x = random_array(vec![n, k, c], rng);
        let r = projection(&[n, c], rng);
        Ok((vec![x], Box::new(move |tape, inputs| {
            let ix = tape.leaf(inputs[0].clone());
            let out = tape.max_over_neighbors(ix)?;
            let loss = project_loss(tape, out, &r)?;
            Ok((vec![ix], loss))
        })))
    })
}

fn check_softmax() -> Result<CheckOutcome> {
    run_seeds("tensor", "softmax", SOFTMAX_TOLERANCE, 10, None, |rng| {
        let x = random_array(vec![7], rng);
        let r = projection(&[7], rng);
        Ok((vec![x], Box::new(move |tape, inputs| {
            let ix = tape.leaf(inputs[0].clone());
            let out = tape.softmax(ix, 0)?;
            let loss = project_loss(tape, out, &r)?;
            Ok((vec![ix], loss))
        })))
    })
}

fn check_weighted_sum() -> Result<CheckOutcome> {
    run_seeds("tensor", "weighted_sum_over_neighbors", OP_TOLERANCE, 10, None, |rng| {
        let (n, k, c) = (3, 4, 2);
        let x = random_array(vec![n, k, c], rng);
        let s = random_array(vec![n, k, c], rng);
        let r = projection(&[n, c], rng);
        Ok((vec![x, s], Box::new(move |tape, inputs| {
            let ix = tape.leaf(inputs[0].clone());
            let is = tape.leaf(inputs[1].clone());
            let out = tape.weighted_sum_over_neighbors(ix, is)?;
            let loss = project_loss(tape, out, &r)?;
            Ok((vec![ix, is], loss))
        })))
    })
}

fn cbl_inputs(c_in: usize, c_out: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<NDArray> {
    vec![
        random_array(vec![n, c_in], rng),
        random_array(vec![c_in, c_out], rng),
        random_array(vec![c_out], rng),
        random_array(vec![c_out], rng),
        random_array(vec![c_out], rng),
    ]
}

fn cbl_from(inputs: &[NDArray], off: usize, slope: f64) -> (CBLParams, usize) {
    let c_out = inputs[off + 1].shape()[1];
    (
        CBLParams {
            weight: inputs[off + 1].clone(),
            bias: inputs[off + 2].clone(),
            bn_gamma: inputs[off + 3].clone(),
            bn_beta: inputs[off + 4].clone(),
            bn_running_mean: vec![0.0; c_out],
            bn_running_var: vec![1.0; c_out],
            leaky_slope: slope,
        },
        off + 5,
    )
}

fn bind_cbl(tape: &mut Tape, inputs: &[NDArray], off: usize) -> (CBLBound, Vec<ValueId>) {
    let ids: Vec<ValueId> = inputs[off..off + 5].iter().map(|a| tape.leaf(a.clone())).collect();
    (CBLBound { weight: ids[1], bias: ids[2], gamma: ids[3], beta: ids[4] }, ids)
}

fn check_cbl() -> Result<CheckOutcome> {
    // N=8, 4 -> 6, training mode (batch statistics in the graph).
    run_seeds("tensor", "cbl", OP_TOLERANCE, 10, None, |rng| {
        let inputs = cbl_inputs(4, 6, 8, rng);
        let r = projection(&[8, 6], rng);
        Ok((inputs, Box::new(move |tape, inputs| {
            let (bound, ids) = bind_cbl(tape, inputs, 0);
            let (mut params, _) = cbl_from(inputs, 0, 0.2);
            let out = cbl(tape, ids[0], &mut params, &bound, true)?;
            let loss = project_loss(tape, out, &r)?;
            Ok((ids, loss))
        })))
    })
}

fn check_residual() -> Result<CheckOutcome> {
    // 6x8 input through the identity-shortcut block.
    run_seeds("tensor", "residual_block", OP_TOLERANCE, 10, None, |rng| {
        let x = random_array(vec![6, 8], rng);
        let mut inputs = vec![x];
        inputs.extend(cbl_inputs(8, 8, 6, rng).into_iter().skip(1));
        inputs.extend(cbl_inputs(8, 8, 6, rng).into_iter().skip(1));
        let r = projection(&[6, 8], rng);
        Ok((inputs, Box::new(move |tape, inputs| {
            let ix = tape.leaf(inputs[0].clone());
            let ids1: Vec<ValueId> =
                inputs[1..5].iter().map(|a| tape.leaf(a.clone())).collect();
            let ids2: Vec<ValueId> =
                inputs[5..9].iter().map(|a| tape.leaf(a.clone())).collect();
            let make = |off: usize| CBLParams {
                weight: inputs[off].clone(),
                bias: inputs[off + 1].clone(),
                bn_gamma: inputs[off + 2].clone(),
                bn_beta: inputs[off + 3].clone(),
                bn_running_mean: vec![0.0; 8],
                bn_running_var: vec![1.0; 8],
                leaky_slope: 0.2,
            };
            let mut params = ResidualParams { cbl1: make(1), cbl2: make(5) };
            let bound = ResidualBound {
                cbl1: CBLBound { weight: ids1[0], bias: ids1[1], gamma: ids1[2], beta: ids1[3] },
                cbl2: CBLBound { weight: ids2[0], bias: ids2[1], gamma: ids2[2], beta: ids2[3] },
            };
            let out = residual_block(tape, ix, &mut params, &bound, true)?;
            let loss = project_loss(tape, out, &r)?;
            let mut all = vec![ix];
            all.extend(ids1);
            all.extend(ids2);
            Ok((all, loss))
        })))
    })
}

fn check_loss() -> Result<CheckOutcome> {
    // Weighted cross entropy, N=6, C=4, nonuniform class weights.
    run_seeds("harness", "weighted_cross_entropy", OP_TOLERANCE, 10, None, |rng| {
        let logits = random_array(vec![6, 4], rng);
        let truth: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let weights: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..2.0)).collect();
        Ok((vec![logits], Box::new(move |tape, inputs| {
            let il = tape.leaf(inputs[0].clone());
            let loss = tape.weighted_cross_entropy(il, &truth, &weights)?;
            Ok((vec![il], loss))
        })))
    })
}

fn check_attention_pool() -> Result<CheckOutcome> {
    // N=4, K=3, C=5 through the scoring transform, softmax and weighted sum.
    run_seeds("encoder", "attention_pool", OP_TOLERANCE, 10, None, |rng| {
        let feak = random_array(vec![4, 3, 5], rng);
        let w = random_array(vec![5, 5], rng);
        let b = random_array(vec![5], rng);
        let r = projection(&[4, 5], rng);
        Ok((vec![feak, w, b], Box::new(move |tape, inputs| {
            let f = tape.leaf(inputs[0].clone());
            let iw = tape.leaf(inputs[1].clone());
            let ib = tape.leaf(inputs[2].clone());
            let out = attention_pool(tape, f, iw, ib)?;
            let loss = project_loss(tape, out, &r)?;
            Ok((vec![f, iw, ib], loss))
        })))
    })
}

fn mcae_tensor_list(p: &McaeParams) -> Vec<NDArray> {
    let mut out = Vec::new();
    for c in [&p.pre, &p.pos_fc, &p.col_fc, &p.post] {
        out.extend([c.weight.clone(), c.bias.clone(), c.bn_gamma.clone(), c.bn_beta.clone()]);
    }
    for r in &p.residuals {
        for c in [&r.cbl1, &r.cbl2] {
            out.extend([c.weight.clone(), c.bias.clone(), c.bn_gamma.clone(), c.bn_beta.clone()]);
        }
    }
    out.push(p.attn_weight.clone());
    out.push(p.attn_bias.clone());
    let c = &p.fuse;
    out.extend([c.weight.clone(), c.bias.clone(), c.bn_gamma.clone(), c.bn_beta.clone()]);
    out
}

fn set_cbl_from(c: &mut CBLParams, inputs: &[NDArray], i: &mut usize) {
    c.weight = inputs[*i].clone();
    c.bias = inputs[*i + 1].clone();
    c.bn_gamma = inputs[*i + 2].clone();
    c.bn_beta = inputs[*i + 3].clone();
    *i += 4;
}

fn cbl_bound_at(ids: &[ValueId], i: &mut usize) -> CBLBound {
    let b = CBLBound { weight: ids[*i], bias: ids[*i + 1], gamma: ids[*i + 2], beta: ids[*i + 3] };
    *i += 4;
    b
}

fn mcae_from_tensors(template: &McaeParams, inputs: &[NDArray]) -> McaeParams {
    let mut p = template.clone();
    let mut i = 0;
    set_cbl_from(&mut p.pre, inputs, &mut i);
    set_cbl_from(&mut p.pos_fc, inputs, &mut i);
    set_cbl_from(&mut p.col_fc, inputs, &mut i);
    set_cbl_from(&mut p.post, inputs, &mut i);
    for r in &mut p.residuals {
        set_cbl_from(&mut r.cbl1, inputs, &mut i);
        set_cbl_from(&mut r.cbl2, inputs, &mut i);
    }
    p.attn_weight = inputs[i].clone();
    p.attn_bias = inputs[i + 1].clone();
    i += 2;
    set_cbl_from(&mut p.fuse, inputs, &mut i);
    p
}

fn check_mcae_block() -> Result<CheckOutcome> {
    // One full encoder level, N=32, K=9, 6 -> 8 channels.
    run_seeds("encoder", "mcae_block", OP_TOLERANCE, 3, Some(160), |rng| {
        let n = 32;
        let k = 9;
        let template = McaeParams::init(6, 8, 1, 0.2, rng)?;
        let inputs = mcae_tensor_list(&template);
        let positions: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..0.5)])
            .collect();
        let colors: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let neighbors = knn::self_index(&positions, k)?;
        let r = projection(&[n, 8], rng);
        Ok((inputs, Box::new(move |tape, inputs| {
            let ids: Vec<ValueId> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
            let mut params = mcae_from_tensors(&template, inputs);
            let bound = {
                let mut i = 0;
                let pre = cbl_bound_at(&ids, &mut i);
                let pos_fc = cbl_bound_at(&ids, &mut i);
                let col_fc = cbl_bound_at(&ids, &mut i);
                let post = cbl_bound_at(&ids, &mut i);
                let residuals = (0..params.residuals.len())
                    .map(|_| ResidualBound {
                        cbl1: cbl_bound_at(&ids, &mut i),
                        cbl2: cbl_bound_at(&ids, &mut i),
                    })
                    .collect();
                let attn_weight = ids[i];
                let attn_bias = ids[i + 1];
                i += 2;
                let fuse = cbl_bound_at(&ids, &mut i);
                crate::encoder::McaeBound {
                    pre,
                    pos_fc,
                    col_fc,
                    post,
                    residuals,
                    attn_weight,
                    attn_bias,
                    fuse,
                }
            };
            let features = tape.constant(crate::encoder::raw_pf(&positions, &colors));
            let state = LevelState {
                point_ids: (0..positions.len()).collect(),
                positions: positions.clone(),
                colors: colors.clone(),
                features,
                neighbors: neighbors.clone(),
            };
            let out = mcae_features(tape, &state, &mut params, &bound, true)?;
            let loss = project_loss(tape, out, &r)?;
            Ok((ids, loss))
        })))
    })
}

fn check_upsample() -> Result<CheckOutcome> {
    // Copy from 4 coarse to 10 fine points, then the pointwise transform.
    run_seeds("decoder", "upsample", OP_TOLERANCE, 10, None, |rng| {
        let mut inputs = vec![random_array(vec![4, 4], rng)];
        inputs.extend(cbl_inputs(4, 4, 10, rng).into_iter().skip(1));
        let mapping: Vec<usize> = (0..10).map(|_| rng.random_range(0..4)).collect();
        let r = projection(&[10, 4], rng);
        Ok((inputs, Box::new(move |tape, inputs| {
            let coarse = tape.leaf(inputs[0].clone());
            let ids: Vec<ValueId> = inputs[1..5].iter().map(|a| tape.leaf(a.clone())).collect();
            let mut params = CBLParams {
                weight: inputs[1].clone(),
                bias: inputs[2].clone(),
                bn_gamma: inputs[3].clone(),
                bn_beta: inputs[4].clone(),
                bn_running_mean: vec![0.0; 4],
                bn_running_var: vec![1.0; 4],
                leaky_slope: 0.2,
            };
            let bound = CBLBound { weight: ids[0], bias: ids[1], gamma: ids[2], beta: ids[3] };
            let out = upsample(tape, coarse, &mapping, &mut params, &bound, true)?;
            let loss = project_loss(tape, out, &r)?;
            let mut all = vec![coarse];
            all.extend(ids);
            Ok((all, loss))
        })))
    })
}

fn pcsp_tensor_list(p: &PcspParams) -> Vec<NDArray> {
    let mut out = Vec::new();
    for c in [
        &p.branch_a,
        &p.branch_b,
        &p.branch_b_residual.cbl1,
        &p.branch_b_residual.cbl2,
        &p.merge,
    ] {
        out.extend([c.weight.clone(), c.bias.clone(), c.bn_gamma.clone(), c.bn_beta.clone()]);
    }
    out
}

fn check_pcsp_block() -> Result<CheckOutcome> {
    // N=16, C=8, K=5.
    run_seeds("decoder", "pcsp_block", OP_TOLERANCE, 3, Some(160), |rng| {
        let template = PcspParams::init(8, 8, 0.2, rng)?;
        let mut inputs = vec![random_array(vec![16, 8], rng)];
        inputs.extend(pcsp_tensor_list(&template));
        let neighbors = line_index(16, 5);
        let r = projection(&[16, 8], rng);
        Ok((inputs, Box::new(move |tape, inputs| {
            let ix = tape.leaf(inputs[0].clone());
            let ids: Vec<ValueId> =
                inputs[1..].iter().map(|a| tape.leaf(a.clone())).collect();
            let mut params = template.clone();
            let mut i = 0;
            set_cbl_from(&mut params.branch_a, &inputs[1..], &mut i);
            set_cbl_from(&mut params.branch_b, &inputs[1..], &mut i);
            set_cbl_from(&mut params.branch_b_residual.cbl1, &inputs[1..], &mut i);
            set_cbl_from(&mut params.branch_b_residual.cbl2, &inputs[1..], &mut i);
            set_cbl_from(&mut params.merge, &inputs[1..], &mut i);
            let mut j = 0;
            let bound = PcspBound {
                branch_a: cbl_bound_at(&ids, &mut j),
                branch_b: cbl_bound_at(&ids, &mut j),
                branch_b_residual: ResidualBound {
                    cbl1: cbl_bound_at(&ids, &mut j),
                    cbl2: cbl_bound_at(&ids, &mut j),
                },
                merge: cbl_bound_at(&ids, &mut j),
            };
            let out = pcsp_block(tape, ix, &neighbors, &mut params, &bound, true)?;
            let loss = project_loss(tape, out, &r)?;
            let mut all = vec![ix];
            all.extend(ids);
            Ok((all, loss))
        })))
    })
}

fn model_tensor_list(model: &Model) -> Vec<NDArray> {
    let mut out = Vec::new();
    let mut m = model.clone();
    m.for_each_tensor(&mut |_, t| out.push(t.clone()));
    out
}

fn model_with_tensors(template: &Model, inputs: &[NDArray]) -> Model {
    let mut m = template.clone();
    let mut i = 0;
    m.for_each_tensor(&mut |_, t| {
        *t = inputs[i].clone();
        i += 1;
    });
    m
}

/// Composed-network check at the small profile: the whole forward pass
/// (patch sampling structure frozen) against FD on a random subset of
/// parameter entries.
fn check_full_network() -> Result<CheckOutcome> {
    run_seeds("model", "full_network", NETWORK_TOLERANCE, 2, Some(120), |rng| {
        let mut cfg = ModelConfig::test_profile(64, 3);
        cfg.k_neighbors = 5;
        cfg.seed = rng.random();
        let template = build_model(&cfg)?;
        let inputs = model_tensor_list(&template);
        let positions: Vec<[f64; 3]> = (0..64)
            .map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..1.0)])
            .collect();
        let colors: Vec<[f64; 3]> = (0..64)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let truth: Vec<usize> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let class_weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
        let forward_seed: u64 = rng.random();
        Ok((inputs, Box::new(move |tape, inputs| {
            let mut model = model_with_tensors(&template, inputs);
            let binding = model.bind(tape);
            let ids: Vec<ValueId> = binding.named.iter().map(|(_, id)| *id).collect();
            let patch =
                PatchInput { positions: positions.clone(), colors: colors.clone() };
            // Same decimation stream every evaluation: the function stays
            // a fixed smooth map of the parameters.
            let mut rng = ChaCha8Rng::seed_from_u64(forward_seed);
            let out = model.forward(tape, &binding, &patch, true, &mut rng)?;
            let lp = tape.weighted_cross_entropy(out.logits_point, &truth, &class_weights)?;
            let ln = tape.weighted_cross_entropy(out.logits_nei, &truth, &class_weights)?;
            let loss = tape.add(lp, ln)?;
            Ok((ids, loss))
        })))
    })
}

/// Run all checks, or those of one module (`tensor`, `encoder`, `decoder`,
/// `harness`, `model`).
pub fn run(module_filter: Option<&str>) -> Result<Vec<CheckOutcome>> {
    let checks: Vec<fn() -> Result<CheckOutcome>> = vec![
        check_matmul,
        check_concat,
        check_gather,
        check_max_pool,
        check_softmax,
        check_weighted_sum,
        check_cbl,
        check_residual,
        check_loss,
        check_attention_pool,
        check_mcae_block,
        check_upsample,
        check_pcsp_block,
        check_full_network,
    ];
    let mut out = Vec::new();
    for check in checks {
        let outcome = check()?;
        if module_filter.is_none_or(|m| m == outcome.module) {
            out.push(outcome);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_driver_catches_a_wrong_gradient() {
        // sum(2x) forward with a deliberately wrong backward would fail;
        // emulate by comparing sum(x^2) against the gradient of sum(x).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_array(vec![4], &mut rng);
        let forward = |tape: &mut Tape, inputs: &[NDArray]| {
            let ix = tape.leaf(inputs[0].clone());
            // loss computed as sum(x ⊙ x), so d/dx = 2x, but we probe the
            // gradient of a *different* scalar: sum(x). The driver must
            // report a large error.
            let sq = tape.mul(ix, ix)?;
            let _ = tape.sum(sq)?;
            let wrong = tape.sum(ix)?;
            Ok((vec![ix], wrong))
        };
        // The AD gradient of sum(x) is all ones, FD of sum(x) matches, so
        // this passes; now check mismatch detection with the squared loss.
        let err = fd_max_rel_err(&[x.clone()], &forward, None, &mut rng).unwrap();
        assert!(err < 1e-8);
        let forward_bad = |tape: &mut Tape, inputs: &[NDArray]| {
            let ix = tape.leaf(inputs[0].clone());
            let sq = tape.mul(ix, ix)?;
            let loss = tape.sum(sq)?;
            // Report the id of a *fresh* unrelated leaf as if it were the
            // input, so the "gradient" is zeros.
            let decoy = tape.leaf(NDArray::zeros(vec![4]).with_grad());
            let _ = decoy;
            Ok((vec![decoy], loss))
        };
        let err_bad = fd_max_rel_err(&[x], &forward_bad, None, &mut rng).unwrap();
        assert!(err_bad > 1e-2, "driver failed to flag a broken gradient: {err_bad}");
    }

    #[test]
    fn small_op_checks_pass() {
        for outcome in [check_matmul().unwrap(), check_softmax().unwrap(), check_loss().unwrap()] {
            assert!(
                outcome.passed(),
                "{}/{}: {} >= {}",
                outcome.module,
                outcome.name,
                outcome.max_rel_err,
                outcome.tolerance
            );
        }
    }
}
