//! Exact k-nearest-neighbor queries.
//!
//! Two interchangeable paths: a brute-force scan (the reference oracle) and
//! a uniform-grid accelerated search that must return identical indices and
//! distances. Ties are broken by lower point id in both.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::parallel::map_indexed;

/// Per-point neighbor table: `k` ids and ascending Euclidean distances per
/// row. When built over a point set against itself, each point is its own
/// first neighbor at distance zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    n: usize,
    k: usize,
    indices: Vec<usize>,
    distances: Vec<f64>,
}

impl NeighborIndex {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn distance_row(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    /// Neighbor rows for a subset of points, flattened for gathering.
    pub fn rows_for(&self, ids: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(ids.len() * self.k);
        for &i in ids {
            out.extend_from_slice(self.row(i));
        }
        out
    }
}

#[inline]
fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Contract("knn: k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Contract(format!("knn: k={k} exceeds base size {n}")));
    }
    Ok(())
}

/// Select the k smallest (distance, id) candidates in tie-stable order.
fn take_k(mut cand: Vec<(f64, usize)>, k: usize) -> (Vec<usize>, Vec<f64>) {
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, |a, b| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        });
        cand.truncate(k);
    }
    cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let ids = cand.iter().map(|c| c.1).collect();
    let dists = cand.iter().map(|c| c.0.sqrt()).collect();
    (ids, dists)
}

/// Exact KNN by exhaustive scan. This is the oracle the grid index is
/// validated against.
pub fn knn_bruteforce(
    query_positions: &[[f64; 3]],
    base_positions: &[[f64; 3]],
    k: usize,
) -> Result<NeighborIndex> {
    check_k(k, base_positions.len())?;
    let rows: Vec<(Vec<usize>, Vec<f64>)> = map_indexed(query_positions.len(), |qi| {
        let q = &query_positions[qi];
        let cand: Vec<(f64, usize)> = base_positions
            .iter()
            .enumerate()
            .map(|(i, p)| (dist_sq(q, p), i))
            .collect();
        take_k(cand, k)
    });
    Ok(collect_rows(rows, k))
}

fn collect_rows(rows: Vec<(Vec<usize>, Vec<f64>)>, k: usize) -> NeighborIndex {
    let n = rows.len();
    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for (ids, dists) in rows {
        indices.extend_from_slice(&ids);
        distances.extend_from_slice(&dists);
    }
    NeighborIndex { n, k, indices, distances }
}

/// Heuristic cell edge: bounding-box diagonal over the cube root of the
/// point count. Only affects speed, never results.
pub fn default_cell_size(positions: &[[f64; 3]]) -> f64 {
    if positions.is_empty() {
        return 1.0;
    }
    let mut lo = positions[0];
    let mut hi = positions[0];
    for p in positions {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let diag = dist_sq(&lo, &hi).sqrt();
    let cell = diag / (positions.len() as f64).cbrt();
    if cell > 0.0 {
        cell
    } else {
        1.0
    }
}

struct UniformGrid {
    cell: f64,
    origin: [f64; 3],
    lo_cell: [i64; 3],
    hi_cell: [i64; 3],
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl UniformGrid {
    fn build(positions: &[[f64; 3]], cell: f64) -> Self {
        let mut origin = positions[0];
        let mut top = positions[0];
        for p in positions {
            for d in 0..3 {
                origin[d] = origin[d].min(p[d]);
                top[d] = top[d].max(p[d]);
            }
        }
        // The requested cell size is a performance knob, never a
        // correctness one; clamp it so the grid stays at most 64 cells per
        // axis and absurdly small cells cannot blow up the ring walk.
        let extent = (top[0] - origin[0]).max(top[1] - origin[1]).max(top[2] - origin[2]);
        let cell = cell.max(extent / 64.0);
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut lo_cell = [i64::MAX; 3];
        let mut hi_cell = [i64::MIN; 3];
        for (i, p) in positions.iter().enumerate() {
            let c = Self::cell_of(p, &origin, cell);
            for d in 0..3 {
                lo_cell[d] = lo_cell[d].min(c[d]);
                hi_cell[d] = hi_cell[d].max(c[d]);
            }
            buckets.entry(c).or_default().push(i);
        }
        UniformGrid { cell, origin, lo_cell, hi_cell, buckets }
    }

    fn cell_of(p: &[f64; 3], origin: &[f64; 3], cell: f64) -> [i64; 3] {
        let mut c = [0i64; 3];
        for d in 0..3 {
            c[d] = ((p[d] - origin[d]) / cell).floor() as i64;
        }
        c
    }

    /// Largest Chebyshev ring around `qc` that can still contain grid cells.
    fn max_ring(&self, qc: &[i64; 3]) -> i64 {
        let mut r = 0i64;
        for d in 0..3 {
            r = r.max((qc[d] - self.lo_cell[d]).abs());
            r = r.max((self.hi_cell[d] - qc[d]).abs());
        }
        r
    }

    fn scan_bucket(&self, cell: [i64; 3], q: &[f64; 3], positions: &[[f64; 3]], out: &mut Vec<(f64, usize)>) {
        if let Some(ids) = self.buckets.get(&cell) {
            for &i in ids {
                out.push((dist_sq(q, &positions[i]), i));
            }
        }
    }

    /// Visit exactly the cells of the Chebyshev shell at `ring`, clipped to
    /// the grid extent, by walking its six faces.
    fn scan_shell(&self, qc: &[i64; 3], ring: i64, q: &[f64; 3], positions: &[[f64; 3]], out: &mut Vec<(f64, usize)>) {
        let clip = |lo: i64, hi: i64, d: usize| -> std::ops::RangeInclusive<i64> {
            lo.max(self.lo_cell[d])..=hi.min(self.hi_cell[d])
        };
        if ring == 0 {
            self.scan_bucket(*qc, q, positions, out);
            return;
        }
        for x in [qc[0] - ring, qc[0] + ring] {
            if x < self.lo_cell[0] || x > self.hi_cell[0] {
                continue;
            }
            for y in clip(qc[1] - ring, qc[1] + ring, 1) {
                for z in clip(qc[2] - ring, qc[2] + ring, 2) {
                    self.scan_bucket([x, y, z], q, positions, out);
                }
            }
        }
        for y in [qc[1] - ring, qc[1] + ring] {
            if y < self.lo_cell[1] || y > self.hi_cell[1] {
                continue;
            }
            for x in clip(qc[0] - ring + 1, qc[0] + ring - 1, 0) {
                for z in clip(qc[2] - ring, qc[2] + ring, 2) {
                    self.scan_bucket([x, y, z], q, positions, out);
                }
            }
        }
        for z in [qc[2] - ring, qc[2] + ring] {
            if z < self.lo_cell[2] || z > self.hi_cell[2] {
                continue;
            }
            for x in clip(qc[0] - ring + 1, qc[0] + ring - 1, 0) {
                for y in clip(qc[1] - ring + 1, qc[1] + ring - 1, 1) {
                    self.scan_bucket([x, y, z], q, positions, out);
                }
            }
        }
    }
}

/// Exact KNN through a uniform grid. Identical output to `knn_bruteforce`
/// for every input (same distance arithmetic, same tie-break).
pub fn knn_grid(
    query_positions: &[[f64; 3]],
    base_positions: &[[f64; 3]],
    k: usize,
    cell_size: f64,
) -> Result<NeighborIndex> {
    check_k(k, base_positions.len())?;
    if !(cell_size > 0.0) {
        return Err(Error::Contract(format!("knn_grid: cell_size must be positive, got {cell_size}")));
    }
    let grid = UniformGrid::build(base_positions, cell_size);
    let rows: Vec<(Vec<usize>, Vec<f64>)> = map_indexed(query_positions.len(), |qi| {
        let q = &query_positions[qi];
        let qc = UniformGrid::cell_of(q, &grid.origin, grid.cell);
        let max_ring = grid.max_ring(&qc);
        let mut cand: Vec<(f64, usize)> = Vec::new();
        let mut ring = 0i64;
        loop {
            grid.scan_shell(&qc, ring, q, base_positions, &mut cand);
            // A point in any unvisited cell lies at least `ring * cell`
            // away; once the current k-th candidate is strictly closer
            // than that, no later ring can change the answer.
            if cand.len() >= k {
                let mut kth: Vec<f64> = cand.iter().map(|c| c.0).collect();
                let (_, kth_val, _) = kth.select_nth_unstable_by(k - 1, f64::total_cmp);
                let bound = ring as f64 * grid.cell;
                if *kth_val < bound * bound {
                    break;
                }
            }
            if ring >= max_ring {
                break;
            }
            ring += 1;
        }
        take_k(cand, k)
    });
    Ok(collect_rows(rows, k))
}

/// Neighbor table of a point set against itself, with the self-neighbor
/// forced into the first slot even among coincident duplicates.
pub fn self_index(positions: &[[f64; 3]], k: usize) -> Result<NeighborIndex> {
    let mut index = knn_grid(positions, positions, k, default_cell_size(positions))?;
    for i in 0..index.n {
        let row_start = i * k;
        let row = &index.indices[row_start..row_start + k];
        match row.iter().position(|&id| id == i) {
            Some(0) => {}
            Some(j) => {
                index.indices[row_start..row_start + j + 1].rotate_right(1);
                index.distances[row_start..row_start + j + 1].rotate_right(1);
            }
            None => {
                // Only reachable with >= k coincident duplicates of point i.
                index.indices[row_start + k - 1] = i;
                index.distances[row_start + k - 1] = 0.0;
                index.indices[row_start..row_start + k].rotate_right(1);
                index.distances[row_start..row_start + k].rotate_right(1);
            }
        }
    }
    Ok(index)
}

/// For every fine point, the slot (into `sampled_ids`) of its nearest
/// sampled point. Used to pool down to the coarse scale and to copy
/// features back up.
pub fn subsample_index(fine_positions: &[[f64; 3]], sampled_ids: &[usize]) -> Result<Vec<usize>> {
    if sampled_ids.is_empty() {
        return Err(Error::Contract("subsample_index: empty sampled set".into()));
    }
    let n = fine_positions.len();
    let mut seen = vec![false; n];
    for &id in sampled_ids {
        if id >= n {
            return Err(Error::Index(format!(
                "subsample_index: sampled id {id} out of range for {n} points"
            )));
        }
        if seen[id] {
            return Err(Error::Contract(format!("subsample_index: duplicate sampled id {id}")));
        }
        seen[id] = true;
    }
    let coarse: Vec<[f64; 3]> = sampled_ids.iter().map(|&i| fine_positions[i]).collect();
    let nn = knn_grid(fine_positions, &coarse, 1, default_cell_size(&coarse))?;
    Ok(nn.indices().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn collinear_points_query_origin() {
        let base: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let nn = knn_bruteforce(&base[..1], &base, 2).unwrap();
        assert_eq!(nn.row(0), &[0, 1]);
        assert_eq!(nn.distance_row(0), &[0.0, 1.0]);
    }

    #[test]
    fn k1_self_query_returns_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_cloud(40, &mut rng);
        let nn = knn_bruteforce(&pts, &pts, 1).unwrap();
        for i in 0..40 {
            assert_eq!(nn.row(i), &[i]);
            assert_eq!(nn.distance_row(i), &[0.0]);
        }
    }

    #[test]
    fn k_larger_than_base_is_contract_error() {
        let pts = vec![[0.0, 0.0, 0.0]];
        let err = knn_bruteforce(&pts, &pts, 2).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn grid_matches_bruteforce_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = rng.random_range(5..400);
            let pts = random_cloud(n, &mut rng);
            let k = [1usize, 3, 9, 16].into_iter().find(|&k| k <= n).unwrap();
            let cell = default_cell_size(&pts);
            let bf = knn_bruteforce(&pts, &pts, k).unwrap();
            let gr = knn_grid(&pts, &pts, k, cell).unwrap();
            assert_eq!(bf, gr, "trial {trial}, n={n}, k={k}");
        }
    }

    #[test]
    fn degenerate_cell_size_still_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_cloud(150, &mut rng);
        let bf = knn_bruteforce(&pts, &pts, 7).unwrap();
        // Cell larger than the whole cloud: everything lands in one bucket.
        let gr = knn_grid(&pts, &pts, 7, 1e6).unwrap();
        assert_eq!(bf, gr);
        // Tiny cell: many rings.
        let gr2 = knn_grid(&pts, &pts, 7, 1e-3).unwrap();
        assert_eq!(bf, gr2);
    }

    #[test]
    fn duplicate_points_tie_break_by_id() {
        let pts = vec![
            [1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0],
            [4.0, 4.0, 4.0],
        ];
        let bf = knn_bruteforce(&pts, &pts, 3).unwrap();
        let gr = knn_grid(&pts, &pts, 3, default_cell_size(&pts)).unwrap();
        assert_eq!(bf, gr);
        // Query 2 ties with ids 0,1,2 at distance 0; lower ids win.
        assert_eq!(bf.row(2), &[0, 1, 2]);
    }

    #[test]
    fn self_index_puts_self_first_even_among_duplicates() {
        let pts = vec![
            [1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0],
            [4.0, 4.0, 4.0],
        ];
        let idx = self_index(&pts, 2).unwrap();
        for i in 0..3 {
            assert_eq!(idx.row(i)[0], i, "row {i}");
            assert_eq!(idx.distance_row(i)[0], 0.0);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts = random_cloud(120, &mut rng);
        let k = 6;
        let nn = knn_bruteforce(&pts, &pts, k).unwrap();
        // Random permutation of the base set.
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let permuted: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let mut inv = vec![0usize; perm.len()];
        for (new_id, &old_id) in perm.iter().enumerate() {
            inv[old_id] = new_id;
        }
        let nn_p = knn_bruteforce(&pts, &permuted, k).unwrap();
        for q in 0..pts.len() {
            let expected: Vec<usize> = nn.row(q).iter().map(|&id| inv[id]).collect();
            assert_eq!(nn_p.row(q), expected.as_slice(), "query {q}");
            assert_eq!(nn_p.distance_row(q), nn.distance_row(q));
        }
    }

    #[test]
    fn distances_match_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = random_cloud(200, &mut rng);
        let nn = knn_grid(&pts, &pts, 9, default_cell_size(&pts)).unwrap();
        for i in 0..pts.len() {
            for (j, &id) in nn.row(i).iter().enumerate() {
                let d = nn.distance_row(i)[j];
                let expect = dist_sq(&pts[i], &pts[id]);
                assert!((d * d - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn distance_rows_ascend() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts = random_cloud(300, &mut rng);
        let nn = self_index(&pts, 12).unwrap();
        for i in 0..pts.len() {
            let row = nn.distance_row(i);
            assert_eq!(row[0], 0.0);
            for w in row.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn subsample_identity_and_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pts = random_cloud(50, &mut rng);
        let all: Vec<usize> = (0..50).collect();
        assert_eq!(subsample_index(&pts, &all).unwrap(), all);
        let one = subsample_index(&pts, &[7]).unwrap();
        assert!(one.iter().all(|&s| s == 0));
    }

    #[test]
    fn subsample_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let pts = random_cloud(240, &mut rng);
        let sampled: Vec<usize> = (0..240).step_by(4).collect();
        let mapping = subsample_index(&pts, &sampled).unwrap();
        for (i, &slot) in mapping.iter().enumerate() {
            let best = sampled
                .iter()
                .enumerate()
                .map(|(s, &id)| (dist_sq(&pts[i], &pts[id]), s))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap()
                .1;
            assert_eq!(slot, best, "fine point {i}");
        }
    }

    #[test]
    fn subsample_empty_is_contract_error() {
        let pts = vec![[0.0; 3]];
        assert!(matches!(subsample_index(&pts, &[]), Err(Error::Contract(_))));
    }
}
