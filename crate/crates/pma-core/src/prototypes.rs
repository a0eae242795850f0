//! Distill a bank snapshot into m prototype key/value pairs.
//!
//! Keys are K-Means centroids over the stored keys. Values are built per
//! prototype as an exp(-L2-distance)-weighted sum of the values paired with
//! the prototype's k nearest stored keys. L2 is the distance everywhere;
//! weight normalization is off by default and available as a mode.

use crate::error::{Error, Result};
use crate::membank::MemoryBank;
use crate::numerics::Tensor;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMemory {
    /// Prototype keys, m x head_dim.
    pub keys: Tensor,
    /// Prototype values, m x head_dim.
    pub values: Tensor,
    pub built_at_step: u64,
    pub k_used: usize,
}

impl PrototypeMemory {
    pub fn slots(&self) -> usize {
        self.keys.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.keys.cols()
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations_run: usize,
}

/// Knobs for prototype construction; `m` is the number of memory slots.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PrototypeSpec {
    pub m: usize,
    pub k: usize,
    pub normalize: bool,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PrototypeSpec {
    fn default() -> Self {
        PrototypeSpec {
            m: 64,
            k: 32,
            normalize: false,
            max_iters: 20,
            tol: 1e-4,
        }
    }
}

fn squared_row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v * v).sum())
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
}

/// Lloyd iterations from k-means++ seeding. Deterministic given `seed`;
/// inertia is non-increasing across iterations (checked).
pub fn kmeans(
    points: &Tensor,
    m: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<KMeansResult> {
    let n = points.rows();
    let d = points.cols();
    if m == 0 || n < m {
        return Err(Error::Size(format!(
            "kmeans needs N >= m >= 1, got N={n}, m={m}"
        )));
    }
    let mut rng = Rng::new(seed);

    // k-means++ seeding over the transposed index.
    let index = NnIndex::fit(points);
    let mut centroid_rows: Vec<usize> = Vec::with_capacity(m);
    centroid_rows.push(rng.below(n));
    let mut min_d2 = vec![0.0; n];
    index.squared_distances_into(points.row(centroid_rows[0]), &mut min_d2);
    let mut scratch_d2 = vec![0.0; n];
    while centroid_rows.len() < m {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.next_f64() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            // All remaining mass is zero (duplicate points); take the first
            // row not already used so m centroids still come back.
            (0..n)
                .find(|i| !centroid_rows.contains(i))
                .unwrap_or(0)
        };
        centroid_rows.push(pick);
        index.squared_distances_into(points.row(pick), &mut scratch_d2);
        for (dst, &d2) in min_d2.iter_mut().zip(&scratch_d2) {
            if d2 < *dst {
                *dst = d2;
            }
        }
    }
    let mut centroids = Tensor::zeros(vec![m, d]);
    for (j, &row) in centroid_rows.iter().enumerate() {
        centroids.data_mut()[j * d..(j + 1) * d].copy_from_slice(points.row(row));
    }

    let point_norms = squared_row_norms(points);
    let mut assignments = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    let mut iterations_run = 0;
    let mut dots_scratch = Vec::new();

    for iter in 1..=max_iters {
        let (new_assignments, new_inertia) =
            assign_points(points, &centroids, &point_norms, &mut dots_scratch);
        let mut assignments_iter = new_assignments;
        let mut inertia_iter = new_inertia;

        let repaired = repair_empty_clusters(
            points,
            &mut centroids,
            &mut assignments_iter,
            &point_norms,
        );
        if repaired {
            inertia_iter = recompute_inertia(points, &centroids, &assignments_iter);
        }

        // Lloyd's guarantee, up to float noise from the partial-distance trick.
        debug_assert!(
            inertia_iter <= inertia * (1.0 + 1e-12) + 1e-9,
            "inertia increased: {inertia} -> {inertia_iter}"
        );
        inertia = inertia_iter;
        assignments = assignments_iter;
        iterations_run = iter;

        // Update step: centroids move to assigned means.
        let mut sums = vec![0.0f64; m * d];
        let mut counts = vec![0usize; m];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            let row = points.row(i);
            let dst = &mut sums[a * d..(a + 1) * d];
            for (o, &x) in dst.iter_mut().zip(row) {
                *o += x;
            }
        }
        let mut movement: f64 = 0.0;
        for j in 0..m {
            if counts[j] == 0 {
                continue;
            }
            let inv = 1.0 / counts[j] as f64;
            let old = centroids.row(j).to_vec();
            let dst = &mut centroids.data_mut()[j * d..(j + 1) * d];
            for (c, s) in dst.iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                *c = s * inv;
            }
            movement = movement.max(dist2(&old, &centroids.row(j)).sqrt());
        }
        if movement < tol {
            break;
        }
    }

    // Sync assignments with the final centroids.
    let (mut final_assignments, mut final_inertia) =
        assign_points(points, &centroids, &point_norms, &mut dots_scratch);
    if repair_empty_clusters(points, &mut centroids, &mut final_assignments, &point_norms) {
        final_inertia = recompute_inertia(points, &centroids, &final_assignments);
    }
    debug_assert!(final_inertia <= inertia * (1.0 + 1e-12) + 1e-9);

    Ok(KMeansResult {
        centroids,
        assignments: final_assignments,
        inertia: final_inertia,
        iterations_run,
    })
}

/// Nearest-centroid assignment via the partial-distance trick; ties break
/// toward the lower centroid index. Returns (assignments, inertia).
/// Scores stream point-by-point against the cache-resident centroid block,
/// fused with the argmin, so the n-by-m score matrix never materializes.
fn assign_points(
    points: &Tensor,
    centroids: &Tensor,
    point_norms: &[f64],
    dots: &mut Vec<f64>,
) -> (Vec<usize>, f64) {
    let n = points.rows();
    let m = centroids.rows();
    let d = points.cols();
    let centroid_norms = squared_row_norms(centroids);
    let ct = centroids.transpose();
    dots.clear();
    dots.resize(n * m, 0.0);
    crate::numerics::tensor::matmul_raw(points.data(), ct.data(), n, d, m, dots);
    let mut assignments = vec![0usize; n];
    let mut inertia = 0.0;
    for i in 0..n {
        let row = &dots[i * m..(i + 1) * m];
        let mut best = 0usize;
        let mut best_score = f64::INFINITY;
        for (j, &dot) in row.iter().enumerate() {
            let score = centroid_norms[j] - 2.0 * dot;
            if score < best_score {
                best_score = score;
                best = j;
            }
        }
        assignments[i] = best;
        inertia += (point_norms[i] + best_score).max(0.0);
    }
    (assignments, inertia)
}

fn recompute_inertia(points: &Tensor, centroids: &Tensor, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| dist2(points.row(i), centroids.row(a)))
        .sum()
}

/// Reseed each empty cluster at the point farthest from its current
/// centroid and force-assign that point to it. Returns true if any repair
/// happened.
fn repair_empty_clusters(
    points: &Tensor,
    centroids: &mut Tensor,
    assignments: &mut [usize],
    _point_norms: &[f64],
) -> bool {
    let m = centroids.rows();
    let d = centroids.cols();
    let mut counts = vec![0usize; m];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let mut claimed: Vec<usize> = Vec::new();
    let mut repaired = false;
    for j in 0..m {
        if counts[j] > 0 {
            continue;
        }
        let mut far_idx = usize::MAX;
        let mut far_d2 = -1.0;
        for i in 0..points.rows() {
            if claimed.contains(&i) || counts[assignments[i]] <= 1 {
                continue;
            }
            let d2 = dist2(points.row(i), centroids.row(j));
            if d2 > far_d2 {
                far_d2 = d2;
                far_idx = i;
            }
        }
        if far_idx == usize::MAX {
            continue;
        }
        centroids.data_mut()[j * d..(j + 1) * d].copy_from_slice(points.row(far_idx));
        counts[assignments[far_idx]] -= 1;
        assignments[far_idx] = j;
        counts[j] = 1;
        claimed.push(far_idx);
        repaired = true;
    }
    repaired
}

/// Exact nearest-neighbour index over a fixed point set. Coordinates are
/// stored dimension-major so squared distances accumulate across all points
/// at once; the per-point sum runs in the same ascending-dimension order as
/// a plain scalar loop, so results are bit-identical to one.
pub struct NnIndex {
    /// d x N, dimension-major.
    transposed: Vec<f64>,
    n: usize,
    d: usize,
}

impl NnIndex {
    pub fn fit(points: &Tensor) -> Self {
        let (n, d) = (points.rows(), points.cols());
        let mut transposed = vec![0.0; n * d];
        for i in 0..n {
            let row = points.row(i);
            for (k, &v) in row.iter().enumerate() {
                transposed[k * n + i] = v;
            }
        }
        NnIndex { transposed, n, d }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Squared L2 distances from `query` to every indexed point.
    pub fn squared_distances_into(&self, query: &[f64], out: &mut [f64]) {
        debug_assert_eq!(query.len(), self.d);
        debug_assert_eq!(out.len(), self.n);
        out.fill(0.0);
        for (k, &qk) in query.iter().enumerate() {
            let col = &self.transposed[k * self.n..(k + 1) * self.n];
            for (o, &x) in out.iter_mut().zip(col) {
                let diff = x - qk;
                *o += diff * diff;
            }
        }
    }

    /// Exact k nearest neighbours, ascending by L2 distance, ties broken by
    /// lower index.
    pub fn query(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.n {
            return Err(Error::Size(format!(
                "knn_topk needs 1 <= k <= N, got k={k}, N={}",
                self.n
            )));
        }
        if query.len() != self.d {
            return Err(Error::DimMismatch {
                op: "knn_topk",
                left: vec![self.n, self.d],
                right: vec![query.len()],
            });
        }
        let mut d2 = vec![0.0; self.n];
        self.squared_distances_into(query, &mut d2);
        // Bounded insertion keeps the k best in sorted order; ties resolve
        // to the lower index because later equal distances never displace
        // earlier ones.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (i, &dist) in d2.iter().enumerate() {
            if best.len() == k && dist >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(d, _)| d <= dist);
            best.insert(pos, (dist, i));
            if best.len() > k {
                best.pop();
            }
        }
        Ok(best.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect())
    }
}

/// Exact k nearest neighbours of `query` under L2, ascending by distance,
/// ties broken by lower index.
pub fn knn_topk(index_points: &Tensor, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if query.len() != index_points.cols() {
        return Err(Error::DimMismatch {
            op: "knn_topk",
            left: index_points.shape().to_vec(),
            right: vec![query.len()],
        });
    }
    NnIndex::fit(index_points).query(query, k)
}

/// Value prototypes: for each prototype key, sum exp(-L2-distance)-weighted
/// bank values over its k nearest bank keys.
pub fn build_value_prototypes(
    proto_keys: &Tensor,
    bank_keys: &Tensor,
    bank_values: &Tensor,
    k: usize,
    normalize: bool,
) -> Result<Tensor> {
    if bank_keys.rows() != bank_values.rows() {
        return Err(Error::DimMismatch {
            op: "build_value_prototypes",
            left: bank_keys.shape().to_vec(),
            right: bank_values.shape().to_vec(),
        });
    }
    let m = proto_keys.rows();
    let dv = bank_values.cols();
    let index = NnIndex::fit(bank_keys);
    let mut out = vec![0.0f64; m * dv];
    for i in 0..m {
        let neighbours = index.query(proto_keys.row(i), k)?;
        let mut weight_sum = 0.0;
        let acc = &mut out[i * dv..(i + 1) * dv];
        for (idx, dist) in neighbours {
            let w = (-dist).exp();
            weight_sum += w;
            for (o, &v) in acc.iter_mut().zip(bank_values.row(idx)) {
                *o += w * v;
            }
        }
        if normalize {
            for o in acc.iter_mut() {
                *o /= weight_sum;
            }
        }
    }
    Tensor::new(vec![m, dv], out)
}

/// Full distillation of one bank: K-Means keys, interpolated values.
/// Deterministic given (snapshot, spec, seed).
pub fn compute_prototypes(
    bank: &MemoryBank,
    spec: &PrototypeSpec,
    seed: u64,
) -> Result<PrototypeMemory> {
    let (keys, values) = bank.snapshot()?;
    let n = keys.rows();
    if n < spec.m {
        return Err(Error::Size(format!(
            "bank snapshot has {n} rows, fewer than m={}",
            spec.m
        )));
    }
    let k_used = spec.k.min(n).max(1);
    let km = kmeans(&keys, spec.m, spec.max_iters, spec.tol, seed)?;
    let proto_values =
        build_value_prototypes(&km.centroids, &keys, &values, k_used, spec.normalize)?;
    Ok(PrototypeMemory {
        keys: km.centroids,
        values: proto_values,
        built_at_step: bank.last_step().unwrap_or(0),
        k_used,
    })
}
