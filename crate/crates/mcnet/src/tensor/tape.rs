//! Reverse-mode gradient tape.
//!
//! Operations record a backward closure as they execute; `backward` replays
//! the records in reverse topological order (which is just reverse insertion
//! order) and accumulates gradients into every differentiable leaf.
//!
//! The op set is exactly what the segmentation network needs: matmul,
//! row bias, elementwise add/mul, leaky ReLU, batch norm, concat, reshape,
//! row selection, neighbor gather/max/mean/weighted-sum, softmax, sum,
//! scale and a fused weighted cross-entropy.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::parallel::{for_each_elem_mut, for_each_row_mut};
use crate::tensor::NDArray;

/// Handle to a value recorded on a tape. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient accumulator used while sweeping the tape backwards.
struct GradStore {
    slots: Vec<Option<Vec<f64>>>,
    numels: Vec<usize>,
}

impl GradStore {
    fn new(numels: Vec<usize>) -> Self {
        let slots = vec![None; numels.len()];
        GradStore { slots, numels }
    }

    /// Mutable gradient buffer for `id`, zero-initialised on first access.
    fn acc(&mut self, id: ValueId) -> &mut [f64] {
        let slot = &mut self.slots[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.numels[id.0]]);
        }
        slot.as_mut().unwrap()
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct Node {
    backward: Option<BackwardFn>,
}

/// Gradients of the differentiable leaves after a backward pass.
#[derive(Debug)]
pub struct GradientMap {
    grads: BTreeMap<usize, NDArray>,
}

impl GradientMap {
    pub fn get(&self, id: ValueId) -> Option<&NDArray> {
        self.grads.get(&id.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Batch statistics produced by a training-mode batch norm, used by the
/// caller to update running statistics.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Single-writer operation record for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    values: Vec<NDArray>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Register a leaf. Its `requires_grad` flag decides whether it shows up
    /// in the gradient map.
    pub fn leaf(&mut self, value: NDArray) -> ValueId {
        self.push(value, None)
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, value: NDArray) -> ValueId {
        let mut v = value;
        if v.requires_grad() {
            v = NDArray::new(v.shape().to_vec(), v.data().to_vec()).unwrap();
        }
        self.push(v, None)
    }

    pub fn value(&self, id: ValueId) -> &NDArray {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: NDArray, backward: Option<BackwardFn>) -> ValueId {
        self.values.push(value);
        self.nodes.push(Node { backward });
        ValueId(self.values.len() - 1)
    }

    fn any_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.values[id.0].requires_grad())
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[ValueId], backward: BackwardFn) -> ValueId {
        let rg = self.any_grad(inputs);
        let mut out = NDArray::new(shape, data).expect("op produced inconsistent shape");
        if rg {
            out = out.with_grad();
            self.push(out, Some(backward))
        } else {
            self.push(out, None)
        }
    }

    // ── matrix product ──────────────────────────────────────────────

    /// `[M,K] x [K,N] -> [M,N]`, gradients into both operands.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::Dimension(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                ash, bsh
            )));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let (ad, bd) = (av.data().to_vec(), bv.data().to_vec());
        let mut out = vec![0.0; m * n];
        {
            let (ar, br) = (&ad, &bd);
            for_each_row_mut(&mut out, n.max(1), |i, row| {
                for p in 0..k {
                    let av = ar[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &br[p * n..(p + 1) * n];
                    for (j, bj) in brow.iter().enumerate() {
                        row[j] += av * bj;
                    }
                }
            });
        }
        Ok(self.push_op(vec![m, n], out, &[a, b], Box::new(move |g, store| {
            {
                let da = store.acc(a);
                for_each_row_mut(da, k.max(1), |i, row| {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bd[p * n + j];
                        }
                        row[p] += s;
                    }
                });
            }
            {
                let db = store.acc(b);
                for_each_row_mut(db, n.max(1), |p, row| {
                    for i in 0..m {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            row[j] += av * g[i * n + j];
                        }
                    }
                });
            }
        })))
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "add: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let shape = av.shape().to_vec();
        let mut out = av.data().to_vec();
        let bd = bv.data();
        for (o, x) in out.iter_mut().zip(bd) {
            *o += x;
        }
        Ok(self.push_op(shape, out, &[a, b], Box::new(move |g, store| {
            for (d, gi) in store.acc(a).iter_mut().zip(g) {
                *d += gi;
            }
            for (d, gi) in store.acc(b).iter_mut().zip(g) {
                *d += gi;
            }
        })))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "mul: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let shape = av.shape().to_vec();
        let (ad, bd) = (av.data().to_vec(), bv.data().to_vec());
        let out: Vec<f64> = ad.iter().zip(&bd).map(|(x, y)| x * y).collect();
        Ok(self.push_op(shape, out, &[a, b], Box::new(move |g, store| {
            {
                let da = store.acc(a);
                for i in 0..g.len() {
                    da[i] += g[i] * bd[i];
                }
            }
            let db = store.acc(b);
            for i in 0..g.len() {
                db[i] += g[i] * ad[i];
            }
        })))
    }

    /// `[N,C] + [C]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (xv, bv) = (&self.values[x.0], &self.values[bias.0]);
        if xv.shape().len() != 2 || bv.shape().len() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(Error::Dimension(format!(
                "add_row_bias: shapes {:?} and {:?} incompatible",
                xv.shape(),
                bv.shape()
            )));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let bd = bv.data().to_vec();
        let mut out = xv.data().to_vec();
        {
            let bref = &bd;
            for_each_row_mut(&mut out, c.max(1), |_, row| {
                for (o, b) in row.iter_mut().zip(bref) {
                    *o += b;
                }
            });
        }
        Ok(self.push_op(vec![n, c], out, &[x, bias], Box::new(move |g, store| {
            for (d, gi) in store.acc(x).iter_mut().zip(g) {
                *d += gi;
            }
            let db = store.acc(bias);
            for i in 0..n {
                for j in 0..c {
                    db[j] += g[i * c + j];
                }
            }
        })))
    }

    pub fn leaky_relu(&mut self, x: ValueId, slope: f64) -> Result<ValueId> {
        let xv = &self.values[x.0];
        let shape = xv.shape().to_vec();
        let xd = xv.data().to_vec();
        let mut out = xd.clone();
        for_each_elem_mut(&mut out, |_, v| {
            if *v < 0.0 {
                *v *= slope;
            }
        });
        Ok(self.push_op(shape, out, &[x], Box::new(move |g, store| {
            let dx = store.acc(x);
            for i in 0..g.len() {
                dx[i] += if xd[i] < 0.0 { g[i] * slope } else { g[i] };
            }
        })))
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> Result<ValueId> {
        let xv = &self.values[x.0];
        let shape = xv.shape().to_vec();
        let out: Vec<f64> = xv.data().iter().map(|v| v * factor).collect();
        Ok(self.push_op(shape, out, &[x], Box::new(move |g, store| {
            let dx = store.acc(x);
            for i in 0..g.len() {
                dx[i] += g[i] * factor;
            }
        })))
    }

    // ── shape ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let xv = &self.values[x.0];
        let numel: usize = shape.iter().product();
        if numel != xv.numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} has {} elements, target {:?} needs {}",
                xv.shape(),
                xv.numel(),
                shape,
                numel
            )));
        }
        let out = xv.data().to_vec();
        Ok(self.push_op(shape, out, &[x], Box::new(move |g, store| {
            for (d, gi) in store.acc(x).iter_mut().zip(g) {
                *d += gi;
            }
        })))
    }

    /// Concatenate along `axis`; the backward pass splits the gradient at
    /// the same offsets.
    pub fn concat(&mut self, inputs: &[ValueId], axis: usize) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat: no inputs".into()));
        }
        let first = self.values[inputs[0].0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat: axis {} out of range for shape {:?}",
                axis, first
            )));
        }
        let mut axis_sizes = Vec::with_capacity(inputs.len());
        for id in inputs {
            let sh = self.values[id.0].shape();
            if sh.len() != first.len()
                || sh.iter().enumerate().any(|(d, &s)| d != axis && s != first[d])
            {
                return Err(Error::Dimension(format!(
                    "concat: shape {:?} incompatible with {:?} along axis {}",
                    sh, first, axis
                )));
            }
            axis_sizes.push(sh[axis]);
        }
        let out_axis: usize = axis_sizes.iter().sum();
        let mut shape = first.clone();
        shape[axis] = out_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * out_axis * inner);
        for o in 0..outer {
            for (idx, id) in inputs.iter().enumerate() {
                let block = axis_sizes[idx] * inner;
                let src = self.values[id.0].data();
                data.extend_from_slice(&src[o * block..(o + 1) * block]);
            }
        }
        let ids: Vec<ValueId> = inputs.to_vec();
        let sizes = axis_sizes.clone();
        Ok(self.push_op(shape, data, inputs, Box::new(move |g, store| {
            let out_block = out_axis * inner;
            let mut axis_off = 0usize;
            for (idx, id) in ids.iter().enumerate() {
                let block = sizes[idx] * inner;
                let dx = store.acc(*id);
                for o in 0..outer {
                    let gs = o * out_block + axis_off * inner;
                    let ds = o * block;
                    for t in 0..block {
                        dx[ds + t] += g[gs + t];
                    }
                }
                axis_off += sizes[idx];
            }
        })))
    }

    // ── point-set ops ───────────────────────────────────────────────

    /// Select rows: `out[i,:] = x[ids[i],:]`. Backward scatter-adds.
    pub fn select_rows(&mut self, x: ValueId, ids: &[usize]) -> Result<ValueId> {
        let xv = &self.values[x.0];
        if xv.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "select_rows: expected 2-d input, got {:?}",
                xv.shape()
            )));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        for &id in ids {
            if id >= n {
                return Err(Error::Index(format!(
                    "select_rows: row {id} out of range for {n} rows"
                )));
            }
        }
        let xd = xv.data();
        let mut out = vec![0.0; ids.len() * c];
        {
            let idr = ids;
            for_each_row_mut(&mut out, c.max(1), |i, row| {
                row.copy_from_slice(&xd[idr[i] * c..(idr[i] + 1) * c]);
            });
        }
        let ids_owned = ids.to_vec();
        Ok(self.push_op(vec![ids.len(), c], out, &[x], Box::new(move |g, store| {
            let dx = store.acc(x);
            for (i, &src) in ids_owned.iter().enumerate() {
                for j in 0..c {
                    dx[src * c + j] += g[i * c + j];
                }
            }
        })))
    }

    /// Gather `k` neighbor feature rows per point:
    /// `out[i,j,:] = features[index[i*k+j],:]`. Backward scatter-adds into
    /// the feature rows (fixed order, so gradient mass is conserved exactly).
    pub fn gather_neighbors(&mut self, features: ValueId, index: &[usize], k: usize) -> Result<ValueId> {
        let fv = &self.values[features.0];
        if fv.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "gather_neighbors: expected 2-d features, got {:?}",
                fv.shape()
            )));
        }
        if k == 0 || index.len() % k != 0 {
            return Err(Error::Contract(format!(
                "gather_neighbors: index length {} not divisible by k={}",
                index.len(),
                k
            )));
        }
        let (n, c) = (fv.shape()[0], fv.shape()[1]);
        for &id in index {
            if id >= n {
                return Err(Error::Index(format!(
                    "gather_neighbors: neighbor id {id} out of range for {n} points"
                )));
            }
        }
        let rows = index.len() / k;
        let fd = fv.data();
        let mut out = vec![0.0; rows * k * c];
        {
            let idr = index;
            for_each_row_mut(&mut out, (k * c).max(1), |i, row| {
                for j in 0..k {
                    let src = idr[i * k + j];
                    row[j * c..(j + 1) * c].copy_from_slice(&fd[src * c..(src + 1) * c]);
                }
            });
        }
        let ids_owned = index.to_vec();
        Ok(self.push_op(vec![rows, k, c], out, &[features], Box::new(move |g, store| {
            let dx = store.acc(features);
            for (r, &src) in ids_owned.iter().enumerate() {
                for j in 0..c {
                    dx[src * c + j] += g[r * c + j];
                }
            }
        })))
    }

    /// Max over the neighbor axis of `[N,K,C]`; gradient routed to the
    /// first (lowest-k) argmax on ties.
    pub fn max_over_neighbors(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = &self.values[x.0];
        if xv.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "max_over_neighbors: expected [N,K,C], got {:?}",
                xv.shape()
            )));
        }
        let (n, k, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if k == 0 {
            return Err(Error::Contract("max_over_neighbors: empty neighborhood (k = 0)".into()));
        }
        let xd = xv.data();
        let mut out = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for ch in 0..c {
                let mut best = xd[i * k * c + ch];
                let mut best_j = 0usize;
                for j in 1..k {
                    let v = xd[(i * k + j) * c + ch];
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out[i * c + ch] = best;
                argmax[i * c + ch] = best_j;
            }
        }
        Ok(self.push_op(vec![n, c], out, &[x], Box::new(move |g, store| {
            let dx = store.acc(x);
            for i in 0..n {
                for ch in 0..c {
                    let j = argmax[i * c + ch];
                    dx[(i * k + j) * c + ch] += g[i * c + ch];
                }
            }
        })))
    }

    /// Mean over the neighbor axis of `[N,K,C]`.
    pub fn mean_over_neighbors(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = &self.values[x.0];
        if xv.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "mean_over_neighbors: expected [N,K,C], got {:?}",
                xv.shape()
            )));
        }
        let (n, k, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if k == 0 {
            return Err(Error::Contract("mean_over_neighbors: empty neighborhood (k = 0)".into()));
        }
        let xd = xv.data();
        let inv = 1.0 / k as f64;
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..k {
                for ch in 0..c {
                    out[i * c + ch] += xd[(i * k + j) * c + ch];
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        Ok(self.push_op(vec![n, c], out, &[x], Box::new(move |g, store| {
            let dx = store.acc(x);
            for i in 0..n {
                for j in 0..k {
                    for ch in 0..c {
                        dx[(i * k + j) * c + ch] += g[i * c + ch] * inv;
                    }
                }
            }
        })))
    }

    /// `out[i,c] = sum_k x[i,k,c] * s[i,k,c]`, differentiable in both.
    pub fn weighted_sum_over_neighbors(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        let (xv, sv) = (&self.values[x.0], &self.values[s.0]);
        if xv.shape() != sv.shape() || xv.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "weighted_sum_over_neighbors: shapes {:?} and {:?} must match as [N,K,C]",
                xv.shape(),
                sv.shape()
            )));
        }
        let (n, k, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let xd = xv.data().to_vec();
        let sd = sv.data().to_vec();
        let mut out = vec![0.0; n * c];
        {
            let (xr, sr) = (&xd, &sd);
            for_each_row_mut(&mut out, c.max(1), |i, row| {
                for j in 0..k {
                    let base = (i * k + j) * c;
                    for ch in 0..c {
                        row[ch] += xr[base + ch] * sr[base + ch];
                    }
                }
            });
        }
        Ok(self.push_op(vec![n, c], out, &[x, s], Box::new(move |g, store| {
            {
                let dx = store.acc(x);
                for_each_row_mut(dx, (k * c).max(1), |i, row| {
                    for j in 0..k {
                        for ch in 0..c {
                            row[j * c + ch] += g[i * c + ch] * sd[(i * k + j) * c + ch];
                        }
                    }
                });
            }
            let ds = store.acc(s);
            for_each_row_mut(ds, (k * c).max(1), |i, row| {
                for j in 0..k {
                    for ch in 0..c {
                        row[j * c + ch] += g[i * c + ch] * xd[(i * k + j) * c + ch];
                    }
                }
            });
        })))
    }

    // ── softmax ─────────────────────────────────────────────────────

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let xv = &self.values[x.0];
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {} out of range for {:?}",
                axis, shape
            )));
        }
        if xv.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax: input contains NaN or Inf".into()));
        }
        let lanes = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * lanes * inner + j * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..lanes {
                    m = m.max(xd[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..lanes {
                    let e = (xd[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..lanes {
                    out[at(j)] /= z;
                }
            }
        }
        let saved = out.clone();
        Ok(self.push_op(shape, out, &[x], Box::new(move |g, store| {
            let dx = store.acc(x);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * lanes * inner + j * inner + i;
                    let mut dot = 0.0;
                    for j in 0..lanes {
                        dot += g[at(j)] * saved[at(j)];
                    }
                    for j in 0..lanes {
                        dx[at(j)] += saved[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
        })))
    }

    // ── batch norm ──────────────────────────────────────────────────

    /// Training-mode batch norm over the rows of `[N,C]` using biased batch
    /// statistics; returns those statistics so the caller can fold them into
    /// running estimates. A single-row batch has undefined variance.
    pub fn batch_norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<(ValueId, BatchStats)> {
        let xv = &self.values[x.0];
        if xv.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "batch_norm: expected [N,C], got {:?}",
                xv.shape()
            )));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        if n < 2 {
            return Err(Error::Contract(
                "batch_norm: training mode needs at least 2 rows (variance undefined)".into(),
            ));
        }
        self.check_vec(gamma, c, "batch_norm gamma")?;
        self.check_vec(beta, c, "batch_norm beta")?;
        let xd = self.values[x.0].data().to_vec();
        let gd = self.values[gamma.0].data().to_vec();
        let bd = self.values[beta.0].data().to_vec();
        let inv_n = 1.0 / n as f64;
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                mean[j] += xd[i * c + j];
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_n;
        }
        let mut var = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                let d = xd[i * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v *= inv_n;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let h = (xd[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = gd[j] * h + bd[j];
            }
        }
        let stats = BatchStats { mean: mean.clone(), var: var.clone() };
        let id = self.push_op(vec![n, c], out, &[x, gamma, beta], Box::new(move |g, store| {
            // Standard batch-norm backward through the batch statistics.
            let mut sum_g = vec![0.0; c];
            let mut sum_gh = vec![0.0; c];
            for i in 0..n {
                for j in 0..c {
                    sum_g[j] += g[i * c + j];
                    sum_gh[j] += g[i * c + j] * xhat[i * c + j];
                }
            }
            {
                let dx = store.acc(x);
                for i in 0..n {
                    for j in 0..c {
                        let gh = g[i * c + j];
                        dx[i * c + j] += gd[j] * inv_std[j]
                            * (gh - inv_n * sum_g[j] - xhat[i * c + j] * inv_n * sum_gh[j]);
                    }
                }
            }
            {
                let dg = store.acc(gamma);
                for j in 0..c {
                    dg[j] += sum_gh[j];
                }
            }
            let db = store.acc(beta);
            for j in 0..c {
                db[j] += sum_g[j];
            }
        }));
        Ok((id, stats))
    }

    /// Inference-mode batch norm using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<ValueId> {
        let xv = &self.values[x.0];
        if xv.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "batch_norm: expected [N,C], got {:?}",
                xv.shape()
            )));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension(format!(
                "batch_norm: running stats width {} does not match {} channels",
                running_mean.len(),
                c
            )));
        }
        if running_var.iter().any(|v| *v < 0.0) {
            return Err(Error::Numeric("batch_norm: negative running variance".into()));
        }
        self.check_vec(gamma, c, "batch_norm gamma")?;
        self.check_vec(beta, c, "batch_norm beta")?;
        let xd = self.values[x.0].data().to_vec();
        let gd = self.values[gamma.0].data().to_vec();
        let bd = self.values[beta.0].data().to_vec();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let rm = running_mean.to_vec();
        let mut out = vec![0.0; n * c];
        {
            let (xr, gr, br, ir, mr) = (&xd, &gd, &bd, &inv_std, &rm);
            for_each_row_mut(&mut out, c.max(1), |i, row| {
                for j in 0..c {
                    row[j] = gr[j] * (xr[i * c + j] - mr[j]) * ir[j] + br[j];
                }
            });
        }
        Ok(self.push_op(vec![n, c], out, &[x, gamma, beta], Box::new(move |g, store| {
            {
                let dx = store.acc(x);
                for i in 0..n {
                    for j in 0..c {
                        dx[i * c + j] += g[i * c + j] * gd[j] * inv_std[j];
                    }
                }
            }
            {
                let dg = store.acc(gamma);
                for i in 0..n {
                    for j in 0..c {
                        dg[j] += g[i * c + j] * (xd[i * c + j] - rm[j]) * inv_std[j];
                    }
                }
            }
            let db = store.acc(beta);
            for i in 0..n {
                for j in 0..c {
                    db[j] += g[i * c + j];
                }
            }
        })))
    }

    fn check_vec(&self, id: ValueId, len: usize, what: &str) -> Result<()> {
        let v = &self.values[id.0];
        if v.shape().len() != 1 || v.shape()[0] != len {
            return Err(Error::Dimension(format!(
                "{what}: expected [{len}], got {:?}",
                v.shape()
            )));
        }
        Ok(())
    }

    // ── reductions and loss ─────────────────────────────────────────

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = &self.values[x.0];
        let total: f64 = xv.data().iter().sum();
        let n = xv.numel();
        Ok(self.push_op(vec![1], vec![total], &[x], Box::new(move |g, store| {
            let dx = store.acc(x);
            for i in 0..n {
                dx[i] += g[0];
            }
        })))
    }

    /// Class-weighted cross entropy, averaged over rows:
    /// `mean_i w[t_i] * (logsumexp(logits_i) - logits_i[t_i])`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: ValueId,
        truth: &[usize],
        class_weights: &[f64],
    ) -> Result<ValueId> {
        let lv = &self.values[logits.0];
        if lv.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "weighted_cross_entropy: expected [N,C] logits, got {:?}",
                lv.shape()
            )));
        }
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        if truth.len() != n {
            return Err(Error::Contract(format!(
                "weighted_cross_entropy: {} labels for {} rows",
                truth.len(),
                n
            )));
        }
        if class_weights.len() != c {
            return Err(Error::Contract(format!(
                "weighted_cross_entropy: {} class weights for {} classes",
                class_weights.len(),
                c
            )));
        }
        for &t in truth {
            if t >= c {
                return Err(Error::Contract(format!(
                    "weighted_cross_entropy: label {t} out of range for {c} classes"
                )));
            }
        }
        let ld = lv.data();
        let inv_n = 1.0 / n as f64;
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &ld[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            let t = truth[i];
            loss += class_weights[t] * (z.ln() + m - row[t]);
        }
        loss *= inv_n;
        let truth_owned = truth.to_vec();
        let w_owned = class_weights.to_vec();
        Ok(self.push_op(vec![1], vec![loss], &[logits], Box::new(move |g, store| {
            let dl = store.acc(logits);
            for i in 0..n {
                let t = truth_owned[i];
                let w = w_owned[t] * inv_n * g[0];
                for j in 0..c {
                    let ind = if j == t { 1.0 } else { 0.0 };
                    dl[i * c + j] += w * (probs[i * c + j] - ind);
                }
            }
        })))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Run the reverse sweep from a scalar loss. Each invocation starts from
    /// a fresh gradient store, so repeated calls return identical maps.
    pub fn backward(&self, loss: ValueId) -> Result<GradientMap> {
        let lv = &self.values[loss.0];
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut store = GradStore::new(self.values.iter().map(NDArray::numel).collect());
        store.slots[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if let Some(back) = &self.nodes[id].backward {
                if let Some(g) = store.slots[id].take() {
                    back(&g, &mut store);
                }
            }
        }
        let mut grads = BTreeMap::new();
        for (id, value) in self.values.iter().enumerate() {
            if self.nodes[id].backward.is_none() && value.requires_grad() {
                let data = store.slots[id].take().unwrap_or_else(|| vec![0.0; value.numel()]);
                grads.insert(id, NDArray::new(value.shape().to_vec(), data)?);
            }
        }
        Ok(GradientMap { grads })
    }
}
