//! Model configuration, assembly, forward pass and checkpointing.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::decoder::{
    decode, DecoderBlockBound, DecoderBlockParams, DecoderLevelBound, DecoderLevelParams,
    PcspParams,
};
use crate::encoder::{
    downsample_level, mcae_features, raw_pf, substitute_features, LevelState, McaeBound,
    McaeParams, SubstituteBound, SubstituteParams,
};
use crate::error::{Error, Result};
use crate::knn::{self, NeighborIndex};
use crate::tensor::{cbl, CBLBound, CBLParams, GradientMap, NDArray, Tape, ValueId};
use crate::voting::{head_nei, head_point, VoteMatchMode};

/// Which modules are active. Every toggle is independent; all on is the
/// reference configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    /// Semantic-weighted patch sampling (off: unweighted random patches).
    #[serde(default = "default_true")]
    pub sws: bool,
    /// Cascading attention encoder levels (off: pointwise FC + neighbor max-pool).
    #[serde(default = "default_true")]
    pub mcae: bool,
    /// Split/merge decoder blocks (off: pointwise MLP).
    #[serde(default = "default_true")]
    pub pcsp: bool,
    /// Neighborhood voting at inference (off: point-head argmax).
    #[serde(default = "default_true")]
    pub nv: bool,
}

fn default_true() -> bool {
    true
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles { sws: true, mcae: true, pcsp: true, nv: true }
    }
}

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_levels: usize,
    /// Strictly increasing, even, per-level feature widths.
    pub channels: Vec<usize>,
    #[serde(default = "default_k")]
    pub k_neighbors: usize,
    #[serde(default = "default_decimation")]
    pub decimation: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    #[serde(default = "default_blocks")]
    pub blocks_per_level: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ablation: AblationToggles,
    #[serde(default)]
    pub vote_match_mode: VoteMatchMode,
    /// Distance-kernel width of the weighted sampler; derived from the
    /// cloud when absent.
    #[serde(default)]
    pub sampler_sigma: Option<f64>,
}

fn default_k() -> usize {
    25
}
fn default_decimation() -> usize {
    4
}
fn default_blocks() -> usize {
    1
}
fn default_slope() -> f64 {
    0.2
}
fn default_lr() -> f64 {
    1e-2
}
fn default_batch() -> usize {
    4
}
fn default_epochs() -> usize {
    100
}

impl ModelConfig {
    /// Reference architecture: 4 levels, widths 16..256, K=25, decimation 4.
    pub fn default_profile(patch_size: usize, num_classes: usize) -> Self {
        ModelConfig {
            num_levels: 4,
            channels: vec![16, 64, 128, 256],
            k_neighbors: 25,
            decimation: 4,
            patch_size,
            num_classes,
            blocks_per_level: 1,
            leaky_slope: 0.2,
            learning_rate: 1e-2,
            batch_size: 4,
            epochs: 100,
            seed: 0,
            ablation: AblationToggles::default(),
            vote_match_mode: VoteMatchMode::Candidate,
            sampler_sigma: None,
        }
    }

    /// Small profile used throughout the test suite: 3 levels, widths
    /// 8/16/32, K=9.
    pub fn test_profile(patch_size: usize, num_classes: usize) -> Self {
        ModelConfig {
            num_levels: 3,
            channels: vec![8, 16, 32],
            k_neighbors: 9,
            ..ModelConfig::default_profile(patch_size, num_classes)
        }
    }

    /// Point counts per level for a patch of `n0` points.
    pub fn level_sizes_for(&self, n0: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.num_levels);
        let mut n = n0;
        for _ in 0..self.num_levels {
            sizes.push(n);
            n = n.div_ceil(self.decimation);
        }
        sizes
    }

    /// Width of the features handed to the heads.
    pub fn head_width(&self) -> usize {
        *self.channels.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 {
            return Err(Error::Config("at least one encoder level is required".into()));
        }
        if self.channels.len() != self.num_levels {
            return Err(Error::Config(format!(
                "{} channel widths for {} levels",
                self.channels.len(),
                self.num_levels
            )));
        }
        for w in self.channels.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(format!(
                    "channel widths must be strictly increasing, got {:?}",
                    self.channels
                )));
            }
        }
        for &c in &self.channels {
            if c < 2 || c % 2 != 0 {
                return Err(Error::Config(format!(
                    "channel width {c} must be even and at least 2"
                )));
            }
        }
        if self.k_neighbors < 1 {
            return Err(Error::Config("k_neighbors must be at least 1".into()));
        }
        if self.decimation < 1 {
            return Err(Error::Config("decimation must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.blocks_per_level < 1 {
            return Err(Error::Config("blocks_per_level must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        let sizes = self.level_sizes_for(self.patch_size);
        for (l, &n) in sizes.iter().enumerate() {
            if n < self.k_neighbors.max(2) {
                return Err(Error::Config(format!(
                    "patch of {} points leaves only {n} at level {l}, below k={} (raise patch_size or lower decimation/levels)",
                    self.patch_size, self.k_neighbors
                )));
            }
        }
        Ok(())
    }
}

/// One encoder level's parameters, full or ablation-substitute.
#[derive(Debug, Clone)]
pub enum EncoderLevel {
    Mcae(McaeParams),
    Substitute(SubstituteParams),
}

/// The assembled network.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    levels: Vec<EncoderLevel>,
    decoder: Vec<DecoderLevelParams>,
    /// Lift of the finest decoder output to the head width.
    stem: CBLParams,
    head_point_weight: NDArray,
    head_point_bias: NDArray,
    head_nei_weight: NDArray,
    head_nei_bias: NDArray,
}

fn head_init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> (NDArray, NDArray) {
    let bound = (1.0 / c_in as f64).sqrt();
    let data: Vec<f64> = (0..c_in * c_out).map(|_| rng.random_range(-bound..bound)).collect();
    (
        NDArray::new(vec![c_in, c_out], data).unwrap().with_grad(),
        NDArray::zeros(vec![c_out]).with_grad(),
    )
}

/// Assemble a network from a validated config; initialization is a pure
/// function of the seed.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let slope = config.leaky_slope;
    let mut levels = Vec::with_capacity(config.num_levels);
    for l in 0..config.num_levels {
        let c_in = if l == 0 { 6 } else { config.channels[l - 1] };
        let c_out = config.channels[l];
        levels.push(if config.ablation.mcae {
            EncoderLevel::Mcae(McaeParams::init(
                c_in,
                c_out,
                config.blocks_per_level,
                slope,
                &mut rng,
            )?)
        } else {
            EncoderLevel::Substitute(SubstituteParams::init(c_in, c_out, slope, &mut rng))
        });
    }
    let last = config.num_levels - 1;
    let mut decoder = Vec::with_capacity(config.num_levels);
    for l in 0..config.num_levels {
        let c_here = config.channels[l];
        let (up, block_in) = if l == last {
            (None, c_here)
        } else {
            (Some(CBLParams::init(config.channels[l + 1], c_here, slope, &mut rng)), 2 * c_here)
        };
        let block = if config.ablation.pcsp {
            DecoderBlockParams::Pcsp(PcspParams::init(block_in, c_here, slope, &mut rng)?)
        } else {
            DecoderBlockParams::Mlp(CBLParams::init(block_in, c_here, slope, &mut rng))
        };
        decoder.push(DecoderLevelParams { up, block });
    }
    let stem = CBLParams::init(config.channels[0], config.head_width(), slope, &mut rng);
    let (hp_w, hp_b) = head_init(config.head_width(), config.num_classes, &mut rng);
    let (hn_w, hn_b) = head_init(config.head_width(), config.num_classes, &mut rng);
    Ok(Model {
        config: config.clone(),
        levels,
        decoder,
        stem,
        head_point_weight: hp_w,
        head_point_bias: hp_b,
        head_nei_weight: hn_w,
        head_nei_bias: hn_b,
    })
}

// ── parameter traversal ─────────────────────────────────────────────

fn walk_cbl(prefix: &str, p: &mut CBLParams, f: &mut dyn FnMut(String, &mut NDArray)) {
    f(format!("{prefix}.weight"), &mut p.weight);
    f(format!("{prefix}.bias"), &mut p.bias);
    f(format!("{prefix}.bn_gamma"), &mut p.bn_gamma);
    f(format!("{prefix}.bn_beta"), &mut p.bn_beta);
}

fn walk_cbl_state(prefix: &str, p: &mut CBLParams, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
    f(format!("{prefix}.bn_running_mean"), &mut p.bn_running_mean);
    f(format!("{prefix}.bn_running_var"), &mut p.bn_running_var);
}

impl Model {
    /// Visit every trainable tensor with a stable name, in the same order
    /// `bind` registers them.
    pub fn for_each_tensor(&mut self, f: &mut dyn FnMut(String, &mut NDArray)) {
        for (l, level) in self.levels.iter_mut().enumerate() {
            match level {
                EncoderLevel::Mcae(p) => {
                    walk_cbl(&format!("enc{l}.pre"), &mut p.pre, f);
                    walk_cbl(&format!("enc{l}.pos_fc"), &mut p.pos_fc, f);
                    walk_cbl(&format!("enc{l}.col_fc"), &mut p.col_fc, f);
                    walk_cbl(&format!("enc{l}.post"), &mut p.post, f);
                    for (r, res) in p.residuals.iter_mut().enumerate() {
                        walk_cbl(&format!("enc{l}.res{r}.cbl1"), &mut res.cbl1, f);
                        walk_cbl(&format!("enc{l}.res{r}.cbl2"), &mut res.cbl2, f);
                    }
                    f(format!("enc{l}.attn.weight"), &mut p.attn_weight);
                    f(format!("enc{l}.attn.bias"), &mut p.attn_bias);
                    walk_cbl(&format!("enc{l}.fuse"), &mut p.fuse, f);
                }
                EncoderLevel::Substitute(p) => {
                    walk_cbl(&format!("enc{l}.pointwise"), &mut p.pointwise, f);
                    walk_cbl(&format!("enc{l}.out"), &mut p.out, f);
                }
            }
        }
        for (l, level) in self.decoder.iter_mut().enumerate() {
            if let Some(up) = &mut level.up {
                walk_cbl(&format!("dec{l}.up"), up, f);
            }
            match &mut level.block {
                DecoderBlockParams::Pcsp(p) => {
                    walk_cbl(&format!("dec{l}.branch_a"), &mut p.branch_a, f);
                    walk_cbl(&format!("dec{l}.branch_b"), &mut p.branch_b, f);
                    walk_cbl(&format!("dec{l}.branch_b_res.cbl1"), &mut p.branch_b_residual.cbl1, f);
                    walk_cbl(&format!("dec{l}.branch_b_res.cbl2"), &mut p.branch_b_residual.cbl2, f);
                    walk_cbl(&format!("dec{l}.merge"), &mut p.merge, f);
                }
                DecoderBlockParams::Mlp(p) => walk_cbl(&format!("dec{l}.mlp"), p, f),
            }
        }
        walk_cbl("stem", &mut self.stem, f);
        f("head_point.weight".into(), &mut self.head_point_weight);
        f("head_point.bias".into(), &mut self.head_point_bias);
        f("head_nei.weight".into(), &mut self.head_nei_weight);
        f("head_nei.bias".into(), &mut self.head_nei_bias);
    }

    /// Visit every piece of non-trainable state (batch-norm running stats).
    pub fn for_each_state(&mut self, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        for (l, level) in self.levels.iter_mut().enumerate() {
            match level {
                EncoderLevel::Mcae(p) => {
                    walk_cbl_state(&format!("enc{l}.pre"), &mut p.pre, f);
                    walk_cbl_state(&format!("enc{l}.pos_fc"), &mut p.pos_fc, f);
                    walk_cbl_state(&format!("enc{l}.col_fc"), &mut p.col_fc, f);
                    walk_cbl_state(&format!("enc{l}.post"), &mut p.post, f);
                    for (r, res) in p.residuals.iter_mut().enumerate() {
                        walk_cbl_state(&format!("enc{l}.res{r}.cbl1"), &mut res.cbl1, f);
                        walk_cbl_state(&format!("enc{l}.res{r}.cbl2"), &mut res.cbl2, f);
                    }
                    walk_cbl_state(&format!("enc{l}.fuse"), &mut p.fuse, f);
                }
                EncoderLevel::Substitute(p) => {
                    walk_cbl_state(&format!("enc{l}.pointwise"), &mut p.pointwise, f);
                    walk_cbl_state(&format!("enc{l}.out"), &mut p.out, f);
                }
            }
        }
        for (l, level) in self.decoder.iter_mut().enumerate() {
            if let Some(up) = &mut level.up {
                walk_cbl_state(&format!("dec{l}.up"), up, f);
            }
            match &mut level.block {
                DecoderBlockParams::Pcsp(p) => {
                    walk_cbl_state(&format!("dec{l}.branch_a"), &mut p.branch_a, f);
                    walk_cbl_state(&format!("dec{l}.branch_b"), &mut p.branch_b, f);
                    walk_cbl_state(&format!("dec{l}.branch_b_res.cbl1"), &mut p.branch_b_residual.cbl1, f);
                    walk_cbl_state(&format!("dec{l}.branch_b_res.cbl2"), &mut p.branch_b_residual.cbl2, f);
                    walk_cbl_state(&format!("dec{l}.merge"), &mut p.merge, f);
                }
                DecoderBlockParams::Mlp(p) => walk_cbl_state(&format!("dec{l}.mlp"), p, f),
            }
        }
        walk_cbl_state("stem", &mut self.stem, f);
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut m = self.clone();
        m.for_each_tensor(&mut |_, t| total += t.numel());
        total
    }

    /// Register every trainable tensor on a tape. The returned binding is
    /// reused across all patches of one step so gradients accumulate.
    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        // Structured bindings mirror the parameter walk order exactly.
        let levels: Vec<EncoderLevelBound> = self
            .levels
            .iter()
            .map(|level| match level {
                EncoderLevel::Mcae(p) => EncoderLevelBound::Mcae(p.bind(tape)),
                EncoderLevel::Substitute(p) => EncoderLevelBound::Substitute(p.bind(tape)),
            })
            .collect();
        let decoder: Vec<DecoderLevelBound> = self.decoder.iter().map(|d| d.bind(tape)).collect();
        let stem = self.stem.bind(tape);
        let head_point_weight = tape.leaf(self.head_point_weight.clone());
        let head_point_bias = tape.leaf(self.head_point_bias.clone());
        let head_nei_weight = tape.leaf(self.head_nei_weight.clone());
        let head_nei_bias = tape.leaf(self.head_nei_bias.clone());
        // Named ids for gradient lookup: the binding walk above and
        // for_each_tensor visit parameters in the same order.
        let mut ids = Vec::new();
        collect_binding_ids(&levels, &decoder, &stem, head_point_weight, head_point_bias, head_nei_weight, head_nei_bias, &mut ids);
        let mut named = Vec::new();
        let mut m = self.clone();
        m.for_each_tensor(&mut |name, _| named.push(name));
        debug_assert_eq!(named.len(), ids.len());
        ModelBinding {
            levels,
            decoder,
            stem,
            head_point_weight,
            head_point_bias,
            head_nei_weight,
            head_nei_bias,
            named: named.into_iter().zip(ids).collect(),
        }
    }

    /// One SGD step from a gradient map; a zero learning rate is a no-op.
    /// NaN gradients abort before any parameter changes.
    pub fn apply_sgd(&mut self, binding: &ModelBinding, grads: &GradientMap, lr: f64) -> Result<()> {
        if lr == 0.0 {
            return Ok(());
        }
        if lr < 0.0 {
            return Err(Error::Contract(format!("apply_sgd: negative learning rate {lr}")));
        }
        let mut by_name: BTreeMap<&str, &NDArray> = BTreeMap::new();
        for (name, id) in &binding.named {
            let g = grads.get(*id).ok_or_else(|| {
                Error::Contract(format!("apply_sgd: no gradient recorded for `{name}`"))
            })?;
            if g.data().iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric(format!("apply_sgd: NaN gradient in `{name}`")));
            }
            by_name.insert(name.as_str(), g);
        }
        let mut missing = None;
        self.for_each_tensor(&mut |name, p| {
            if let Some(g) = by_name.get(name.as_str()) {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            } else if missing.is_none() {
                missing = Some(name);
            }
        });
        match missing {
            Some(name) => Err(Error::Contract(format!("apply_sgd: binding lacks `{name}`"))),
            None => Ok(()),
        }
    }

    /// Full forward pass over one patch.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binding: &ModelBinding,
        patch: &PatchInput,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<ForwardOutput> {
        let n0 = patch.positions.len();
        let k = self.config.k_neighbors;
        let sizes = self.config.level_sizes_for(n0);
        for (l, &n) in sizes.iter().enumerate() {
            if n < k.max(2) {
                return Err(Error::Contract(format!(
                    "forward: patch of {n0} points leaves only {n} at level {l}, below k={k}"
                )));
            }
        }
        let neighbors0 = knn::self_index(&patch.positions, k)?;
        let features0 = tape.constant(raw_pf(&patch.positions, &patch.colors));
        let mut state = LevelState {
            point_ids: (0..n0).collect(),
            positions: patch.positions.clone(),
            colors: patch.colors.clone(),
            features: features0,
            neighbors: neighbors0.clone(),
        };

        let num_levels = self.config.num_levels;
        let decimation = self.config.decimation;
        let mut skips: Vec<ValueId> = Vec::with_capacity(num_levels);
        let mut level_neighbors: Vec<NeighborIndex> = Vec::with_capacity(num_levels);
        let mut up_maps: Vec<Vec<usize>> = Vec::with_capacity(num_levels.saturating_sub(1));
        for l in 0..num_levels {
            let features = match (&mut self.levels[l], &binding.levels[l]) {
                (EncoderLevel::Mcae(p), EncoderLevelBound::Mcae(b)) => {
                    mcae_features(tape, &state, p, b, training)?
                }
                (EncoderLevel::Substitute(p), EncoderLevelBound::Substitute(b)) => {
                    substitute_features(tape, &state, p, b, training)?
                }
                _ => return Err(Error::Contract("forward: level binding kind mismatch".into())),
            };
            skips.push(features);
            level_neighbors.push(state.neighbors.clone());
            if l + 1 < num_levels {
                let (next, map) = downsample_level(tape, &state, features, decimation, k, rng)?;
                up_maps.push(map);
                state = next;
            }
        }

        let decoded = decode(
            tape,
            &skips,
            &level_neighbors,
            &up_maps,
            &mut self.decoder,
            &binding.decoder,
            training,
        )?;
        let features = cbl(tape, decoded, &mut self.stem, &binding.stem, training)?;
        let logits_point =
            head_point(tape, features, binding.head_point_weight, binding.head_point_bias)?;
        let logits_nei = head_nei(
            tape,
            features,
            &neighbors0,
            binding.head_nei_weight,
            binding.head_nei_bias,
        )?;
        Ok(ForwardOutput { logits_point, logits_nei })
    }
}

#[allow(clippy::too_many_arguments)]
fn collect_binding_ids(
    levels: &[EncoderLevelBound],
    decoder: &[DecoderLevelBound],
    stem: &CBLBound,
    hp_w: ValueId,
    hp_b: ValueId,
    hn_w: ValueId,
    hn_b: ValueId,
    out: &mut Vec<ValueId>,
) {
    let push_cbl = |b: &CBLBound, out: &mut Vec<ValueId>| {
        out.extend([b.weight, b.bias, b.gamma, b.beta]);
    };
    for level in levels {
        match level {
            EncoderLevelBound::Mcae(b) => {
                push_cbl(&b.pre, out);
                push_cbl(&b.pos_fc, out);
                push_cbl(&b.col_fc, out);
                push_cbl(&b.post, out);
                for r in &b.residuals {
                    push_cbl(&r.cbl1, out);
                    push_cbl(&r.cbl2, out);
                }
                out.push(b.attn_weight);
                out.push(b.attn_bias);
                push_cbl(&b.fuse, out);
            }
            EncoderLevelBound::Substitute(b) => {
                push_cbl(&b.pointwise, out);
                push_cbl(&b.out, out);
            }
        }
    }
    for level in decoder {
        if let Some(up) = &level.up {
            push_cbl(up, out);
        }
        match &level.block {
            DecoderBlockBound::Pcsp(b) => {
                push_cbl(&b.branch_a, out);
                push_cbl(&b.branch_b, out);
                push_cbl(&b.branch_b_residual.cbl1, out);
                push_cbl(&b.branch_b_residual.cbl2, out);
                push_cbl(&b.merge, out);
            }
            DecoderBlockBound::Mlp(b) => push_cbl(b, out),
        }
    }
    push_cbl(stem, out);
    out.extend([hp_w, hp_b, hn_w, hn_b]);
}

#[derive(Debug, Clone)]
pub enum EncoderLevelBound {
    Mcae(McaeBound),
    Substitute(SubstituteBound),
}

/// Tape handles for every trainable tensor, plus name -> id pairs in
/// parameter-walk order.
#[derive(Debug, Clone)]
pub struct ModelBinding {
    pub levels: Vec<EncoderLevelBound>,
    pub decoder: Vec<DecoderLevelBound>,
    pub stem: CBLBound,
    pub head_point_weight: ValueId,
    pub head_point_bias: ValueId,
    pub head_nei_weight: ValueId,
    pub head_nei_bias: ValueId,
    pub named: Vec<(String, ValueId)>,
}

/// The raw per-point inputs of one patch.
#[derive(Debug, Clone)]
pub struct PatchInput {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
}

impl PatchInput {
    pub fn from_cloud(cloud: &PointCloud, ids: &[usize]) -> Self {
        PatchInput {
            positions: ids.iter().map(|&i| cloud.positions()[i]).collect(),
            colors: ids.iter().map(|&i| cloud.colors()[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits_point: ValueId,
    pub logits_nei: ValueId,
}

// ── checkpointing ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk model state: config, every tensor (trainables plus running
/// statistics) by name, and the seed it was trained under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub parameters: BTreeMap<String, ParamEntry>,
    pub rng_seed: u64,
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut parameters = BTreeMap::new();
        let mut m = self.clone();
        m.for_each_tensor(&mut |name, t| {
            parameters.insert(
                name,
                ParamEntry { shape: t.shape().to_vec(), data: t.data().to_vec() },
            );
        });
        m.for_each_state(&mut |name, v| {
            parameters.insert(name, ParamEntry { shape: vec![v.len()], data: v.clone() });
        });
        Checkpoint { config: self.config.clone(), parameters, rng_seed: self.config.seed }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let mut model = build_model(&ckpt.config)?;
        let mut err: Option<Error> = None;
        model.for_each_tensor(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match ckpt.parameters.get(&name) {
                Some(entry) if entry.shape == t.shape() => {
                    t.data_mut().copy_from_slice(&entry.data);
                }
                Some(entry) => {
                    err = Some(Error::Format(format!(
                        "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                        entry.shape,
                        t.shape()
                    )));
                }
                None => err = Some(Error::Format(format!("checkpoint is missing tensor `{name}`"))),
            }
        });
        model.for_each_state(&mut |name, v| {
            if err.is_some() {
                return;
            }
            match ckpt.parameters.get(&name) {
                Some(entry) if entry.data.len() == v.len() => v.copy_from_slice(&entry.data),
                Some(_) => {
                    err = Some(Error::Format(format!("checkpoint state `{name}` has wrong length")))
                }
                None => err = Some(Error::Format(format!("checkpoint is missing state `{name}`"))),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let ckpt = model.to_checkpoint();
    let text = serde_json::to_string(&ckpt)
        .map_err(|e| Error::Format(format!("checkpoint serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("checkpoint parse failed: {e}")))?;
    Model::from_checkpoint(&ckpt)
}
