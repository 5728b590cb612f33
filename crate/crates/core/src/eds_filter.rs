//! Dataset reduction by error-distribution smoothing.
//!
//! The standardized input space is tiled into regions. Each region is scored
//! by its complexity-to-density ratio (CDR) `rho = g_c * g_s / |region|`, where
//! `g_c` is the largest local Hessian norm among its members and `g_s` the
//! largest squared pairwise distance. Samples are removed greedily from the
//! region with the most headroom while the upper quantile `mu + z * sigma` of
//! `ln rho` across regions stays below a threshold `epsilon`.
//!
//! The greedy removal sequence itself does not depend on `epsilon`; only the
//! stopping point does. [`RemovalPath`] records the whole sequence once so an
//! `epsilon` sweep costs a single pass.

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::dataset::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;

/// Number of coefficients of a full quadratic in three variables.
const QUADRATIC_TERMS: usize = 10;
/// Relative singular-value threshold below which a local fit is degenerate.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Standard-deviation multiplier of the log-CDR quantile.
    pub z: f64,
    pub epsilon: f64,
    /// Largest region size before a split.
    pub n_max: usize,
    /// Neighbourhood size of the local quadratic fits; also the smallest
    /// size a region may be pruned to.
    pub knn: usize,
    pub cdr_floor: f64,
    /// Most neighbours a single trajectory may contribute to a local fit.
    pub neighbors_per_trajectory: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            z: 1.645,
            epsilon: 0.01,
            n_max: 256,
            knn: 20,
            cdr_floor: 1e-12,
            neighbors_per_trajectory: 4,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.z >= 0.0) || !self.z.is_finite() {
            return bad("z must be finite and non-negative");
        }
        if !self.epsilon.is_finite() {
            return bad("epsilon must be finite");
        }
        if self.knn < 10 {
            return bad("knn must be at least 10");
        }
        if self.n_max < 2 * self.knn {
            return bad("n_max must be at least 2 * knn");
        }
        if !(self.cdr_floor > 0.0) {
            return bad("cdr_floor must be positive");
        }
        if self.neighbors_per_trajectory == 0 {
            return bad("neighbors_per_trajectory must be positive");
        }
        Ok(())
    }
}

/// Axis-aligned cell of the partition in standardized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub indices: Vec<usize>,
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl Region {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|d| p[d] >= self.lower[d] && p[d] <= self.upper[d])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdrStats {
    pub mu_rho: f64,
    pub sigma_rho: f64,
    pub k: usize,
}

impl CdrStats {
    pub fn statistic(&self, z: f64) -> f64 {
        self.mu_rho + z * self.sigma_rho
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn bounding_box(points: &[[f64; 3]], indices: &[usize]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in indices {
        for d in 0..3 {
            lo[d] = lo[d].min(points[i][d]);
            hi[d] = hi[d].max(points[i][d]);
        }
    }
    (lo, hi)
}

/// Recursive median splits along the widest axis until every region holds at
/// most `n_max` points. Expects standardized coordinates.
pub fn partition(points: &[[f64; 3]], n_max: usize) -> Vec<Region> {
    let mut out = Vec::new();
    if points.is_empty() {
        return out;
    }
    let n_max = n_max.max(1);
    let mut stack = vec![(0..points.len()).collect::<Vec<usize>>()];
    while let Some(mut indices) = stack.pop() {
        let (lower, upper) = bounding_box(points, &indices);
        if indices.len() <= n_max {
            indices.sort_unstable();
            out.push(Region { indices, lower, upper });
            continue;
        }
        let dim = (0..3)
            .max_by(|&a, &b| (upper[a] - lower[a]).total_cmp(&(upper[b] - lower[b])))
            .unwrap_or(0);
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            points[a][dim].total_cmp(&points[b][dim]).then(a.cmp(&b))
        });
        let right = indices.split_off(mid);
        // Depth-first, left before right, so regions come out in spatial order.
        stack.push(right);
        stack.push(indices);
    }
    out
}

/// Local quadratic least-squares fits of the target over standardized inputs.
pub struct LocalQuadratic<'a> {
    points: &'a [[f64; 3]],
    targets: &'a [f64],
    groups: &'a [usize],
    tree: KdTree,
    knn: usize,
    cap: usize,
}

impl<'a> LocalQuadratic<'a> {
    /// `groups` labels the trajectory of each sample; at most `cap` neighbours
    /// are drawn from any one trajectory so that fits are not confined to a
    /// single curve.
    pub fn new(
        points: &'a [[f64; 3]],
        targets: &'a [f64],
        groups: &'a [usize],
        knn: usize,
        cap: usize,
    ) -> Result<Self> {
        if points.len() != targets.len() || points.len() != groups.len() {
            return Err(Error::InvalidConfig("inputs, targets and groups differ in length".into()));
        }
        if knn < QUADRATIC_TERMS || points.len() < knn + 10 {
            return Err(Error::InvalidConfig(format!(
                "local fits need knn >= {QUADRATIC_TERMS} and at least knn + 10 samples (knn = {knn}, n = {})",
                points.len()
            )));
        }
        Ok(Self { points, targets, groups, tree: KdTree::build(points), knn, cap: cap.max(1) })
    }

    /// Frobenius norm of the fitted Hessian at sample `index`.
    pub fn hessian_frobenius(&self, index: usize) -> Result<f64> {
        let center = self.points[index];
        let neighbors =
            self.tree.nearest_capped(self.points, self.groups, &center, self.knn, self.cap);
        if neighbors.len() < QUADRATIC_TERMS {
            return Err(Error::DegenerateNeighborhood(index));
        }
        let m = neighbors.len();
        let mut a = DMatrix::<f64>::zeros(m, QUADRATIC_TERMS);
        let mut b = DVector::<f64>::zeros(m);
        for (row, &(j, _)) in neighbors.iter().enumerate() {
            let p = self.points[j];
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            let terms = [
                1.0,
                d[0],
                d[1],
                d[2],
                d[0] * d[0],
                d[1] * d[1],
                d[2] * d[2],
                d[0] * d[1],
                d[0] * d[2],
                d[1] * d[2],
            ];
            for (col, t) in terms.iter().enumerate() {
                a[(row, col)] = *t;
            }
            b[row] = self.targets[j];
        }
        let mut scale = [1.0; QUADRATIC_TERMS];
        for (col, s) in scale.iter_mut().enumerate() {
            let norm = a.column(col).norm();
            if norm > 0.0 {
                *s = norm;
                a.column_mut(col).scale_mut(1.0 / norm);
            }
        }
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smax > 0.0) || smin < RANK_TOL * smax {
            return Err(Error::DegenerateNeighborhood(index));
        }
        let coef = svd
            .solve(&b, 0.0)
            .map_err(|_| Error::DegenerateNeighborhood(index))?;
        let c = |k: usize| coef[k] / scale[k];
        let diag = (4..7).map(|k| (2.0 * c(k)).powi(2)).sum::<f64>();
        let off = (7..10).map(|k| 2.0 * c(k).powi(2)).sum::<f64>();
        Ok((diag + off).sqrt())
    }

    /// Hessian norms for every sample. Rank-deficient neighbourhoods get
    /// complexity zero; their count is returned alongside.
    pub fn all_norms(&self) -> (Vec<f64>, usize) {
        let mut degenerate = 0;
        let norms = (0..self.points.len())
            .map(|i| match self.hessian_frobenius(i) {
                Ok(h) => h,
                Err(_) => {
                    degenerate += 1;
                    0.0
                }
            })
            .collect();
        if degenerate > 0 {
            warn!("{degenerate} rank-deficient neighbourhoods assigned zero curvature");
        }
        (norms, degenerate)
    }
}

/// Per-sample curvature from fits on a thinned copy of the data.
///
/// Samples along a trajectory are usually far denser than the spacing between
/// trajectories, which makes neighbourhoods look like short parallel segments
/// and the quadratic fits ill-conditioned. Each trajectory (a run of equal
/// `groups` labels, in dataset order) is therefore thinned with a stride that
/// matches its along-track spacing to the median distance to the nearest
/// other trajectory. Fits are made at the thinned samples only and every
/// sample inherits the value of the nearest thinned sample of its own
/// trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Curvature {
    pub norms: Vec<f64>,
    pub degenerate: usize,
    pub stride: usize,
}

impl Curvature {
    pub fn estimate(
        points: &[[f64; 3]],
        targets: &[f64],
        groups: &[usize],
        knn: usize,
        cap: usize,
    ) -> Result<Self> {
        let n = points.len();
        let mut tracks: Vec<Vec<usize>> = Vec::new();
        let mut slot = std::collections::HashMap::new();
        for (i, g) in groups.iter().enumerate() {
            let k = *slot.entry(*g).or_insert_with(|| {
                tracks.push(Vec::new());
                tracks.len() - 1
            });
            tracks[k].push(i);
        }
        let stride = Self::stride(points, groups, &tracks);
        let mut thinned = Vec::new();
        for track in &tracks {
            let mut pos: Vec<usize> = (0..track.len()).step_by(stride).collect();
            if pos.last() != Some(&(track.len() - 1)) {
                pos.push(track.len() - 1);
            }
            thinned.extend(pos.iter().map(|&p| track[p]));
        }
        let sub_points: Vec<[f64; 3]> = thinned.iter().map(|&i| points[i]).collect();
        let sub_targets: Vec<f64> = thinned.iter().map(|&i| targets[i]).collect();
        let sub_groups: Vec<usize> = thinned.iter().map(|&i| groups[i]).collect();
        let fits = LocalQuadratic::new(&sub_points, &sub_targets, &sub_groups, knn, cap)?;
        let (sub_norms, degenerate) = fits.all_norms();
        let mut at = vec![f64::NAN; n];
        for (k, &i) in thinned.iter().enumerate() {
            at[i] = sub_norms[k];
        }
        let mut norms = vec![0.0; n];
        for track in &tracks {
            let last = track.len() - 1;
            for (p, &i) in track.iter().enumerate() {
                let down = p / stride * stride;
                let up = (down + stride).min(last);
                let q = if p - down <= up - p { down } else { up };
                norms[i] = at[track[q]];
            }
        }
        debug!("curvature: stride {stride}, {} fits, {degenerate} degenerate", thinned.len());
        Ok(Self { norms, degenerate, stride })
    }

    fn stride(points: &[[f64; 3]], groups: &[usize], tracks: &[Vec<usize>]) -> usize {
        let mut steps: Vec<f64> = tracks
            .iter()
            .flat_map(|t| t.windows(2).map(|w| dist2(&points[w[0]], &points[w[1]]).sqrt()))
            .filter(|d| *d > 0.0)
            .collect();
        if steps.is_empty() || tracks.len() < 2 {
            return 1;
        }
        let tree = KdTree::build(points);
        let probe = (points.len() / 2000).max(1);
        let mut gaps: Vec<f64> = (0..points.len())
            .step_by(probe)
            .filter_map(|i| {
                tree.nearest_capped(points, groups, &points[i], 2, 1)
                    .into_iter()
                    .find(|(j, _)| groups[*j] != groups[i])
                    .map(|(_, d2)| d2.sqrt())
            })
            .collect();
        if gaps.is_empty() {
            return 1;
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.total_cmp(b));
            v[v.len() / 2]
        };
        let step = median(&mut steps);
        let gap = median(&mut gaps);
        ((gap / step).round() as usize).max(1)
    }
}

fn max_pair(points: &[[f64; 3]], members: &[usize]) -> (f64, (usize, usize)) {
    let mut best = (0.0, (usize::MAX, usize::MAX));
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            let d = dist2(&points[i], &points[j]);
            if d > best.0 {
                best = (d, (i, j));
            }
        }
    }
    best
}

/// CDR of a set of samples: largest curvature times largest squared spread,
/// divided by the member count, floored at `floor`.
pub fn region_cdr(members: &[usize], points: &[[f64; 3]], hessian: &[f64], floor: f64) -> f64 {
    if members.is_empty() {
        return floor;
    }
    let gc = members.iter().map(|&i| hessian[i]).fold(0.0, f64::max);
    let (gs, _) = max_pair(points, members);
    (gc * gs / members.len() as f64).max(floor)
}

/// Mean and sample standard deviation of `ln rho`.
pub fn log_cdr_stats(cdrs: &[f64]) -> CdrStats {
    let k = cdrs.len();
    if k == 0 {
        return CdrStats { mu_rho: 0.0, sigma_rho: 0.0, k };
    }
    let logs: Vec<f64> = cdrs.iter().map(|r| r.ln()).collect();
    let mu = logs.iter().sum::<f64>() / k as f64;
    let sigma = if k < 2 {
        0.0
    } else {
        (logs.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    };
    CdrStats { mu_rho: mu, sigma_rho: sigma, k }
}

/// Standardized inputs, per-sample curvature and the partition of a dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub standardizer: Standardizer,
    pub points: Vec<[f64; 3]>,
    pub hessian: Vec<f64>,
    pub regions: Vec<Region>,
    pub degenerate: usize,
    pub curvature_stride: usize,
}

impl Prepared {
    pub fn new(dataset: &Dataset, cfg: &FilterConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let raw = dataset.inputs();
        let standardizer = Standardizer::fit(&raw);
        let points = standardizer.apply_all(&raw);
        let targets = dataset.targets();
        let groups: Vec<usize> = dataset.samples.iter().map(|s| s.traj_id).collect();
        let curvature =
            Curvature::estimate(&points, &targets, &groups, cfg.knn, cfg.neighbors_per_trajectory)?;
        let regions = partition(&points, cfg.n_max);
        info!(
            "prepared {} samples: {} regions, curvature stride {}, {} degenerate fits",
            points.len(),
            regions.len(),
            curvature.stride,
            curvature.degenerate
        );
        Ok(Self {
            standardizer,
            points,
            hessian: curvature.norms,
            regions,
            degenerate: curvature.degenerate,
            curvature_stride: curvature.stride,
        })
    }

    pub fn region_cdrs(&self, floor: f64) -> Vec<f64> {
        self.regions
            .iter()
            .map(|r| region_cdr(&r.indices, &self.points, &self.hessian, floor))
            .collect()
    }

    /// Statistics of a retained subset, recomputed from scratch.
    pub fn stats_of(&self, retained: &[usize], floor: f64) -> CdrStats {
        let mut keep = vec![false; self.points.len()];
        for &i in retained {
            keep[i] = true;
        }
        let cdrs: Vec<f64> = self
            .regions
            .iter()
            .map(|r| {
                let members: Vec<usize> = r.indices.iter().copied().filter(|&i| keep[i]).collect();
                region_cdr(&members, &self.points, &self.hessian, floor)
            })
            .collect();
        log_cdr_stats(&cdrs)
    }
}

/// One greedy removal and the statistics right after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub index: usize,
    pub region: usize,
    pub mu_rho: f64,
    pub sigma_rho: f64,
}

struct RegionState {
    members: Vec<usize>,
    nn_dist: Vec<f64>,
    nn_index: Vec<usize>,
    gc: f64,
    gs: f64,
    gs_pair: (usize, usize),
    rho: f64,
    version: usize,
}

impl RegionState {
    fn new(members: &[usize], points: &[[f64; 3]], hessian: &[f64], floor: f64) -> Self {
        let members = members.to_vec();
        let mut nn_dist = vec![f64::INFINITY; members.len()];
        let mut nn_index = vec![usize::MAX; members.len()];
        for (a, &i) in members.iter().enumerate() {
            for (b, &j) in members.iter().enumerate() {
                if a != b {
                    let d = dist2(&points[i], &points[j]);
                    if d < nn_dist[a] || (d == nn_dist[a] && j < nn_index[a]) {
                        nn_dist[a] = d;
                        nn_index[a] = j;
                    }
                }
            }
        }
        let gc = members.iter().map(|&i| hessian[i]).fold(0.0, f64::max);
        let (gs, gs_pair) = max_pair(points, &members);
        let mut s = Self { members, nn_dist, nn_index, gc, gs, gs_pair, rho: 0.0, version: 0 };
        s.rho = s.cdr(floor);
        s
    }

    fn cdr(&self, floor: f64) -> f64 {
        (self.gc * self.gs / self.members.len() as f64).max(floor)
    }

    /// Member with the smallest nearest-neighbour distance; ties go to the
    /// lower sample index.
    fn most_redundant(&self) -> usize {
        let mut best = 0;
        for p in 1..self.members.len() {
            let (d, i) = (self.nn_dist[p], self.members[p]);
            let (bd, bi) = (self.nn_dist[best], self.members[best]);
            if d < bd || (d == bd && i < bi) {
                best = p;
            }
        }
        best
    }

    fn remove(&mut self, pos: usize, points: &[[f64; 3]], hessian: &[f64], floor: f64) -> usize {
        let removed = self.members.swap_remove(pos);
        self.nn_dist.swap_remove(pos);
        self.nn_index.swap_remove(pos);
        for a in 0..self.members.len() {
            if self.nn_index[a] != removed {
                continue;
            }
            let i = self.members[a];
            let (mut bd, mut bj) = (f64::INFINITY, usize::MAX);
            for &j in &self.members {
                if j != i {
                    let d = dist2(&points[i], &points[j]);
                    if d < bd || (d == bd && j < bj) {
                        bd = d;
                        bj = j;
                    }
                }
            }
            self.nn_dist[a] = bd;
            self.nn_index[a] = bj;
        }
        if hessian[removed] >= self.gc {
            self.gc = self.members.iter().map(|&i| hessian[i]).fold(0.0, f64::max);
        }
        if removed == self.gs_pair.0 || removed == self.gs_pair.1 {
            let (gs, pair) = max_pair(points, &self.members);
            self.gs = gs;
            self.gs_pair = pair;
        }
        self.rho = self.cdr(floor);
        self.version += 1;
        removed
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapKey {
    rho: f64,
    region: usize,
    version: usize,
}

impl Eq for HeapKey {}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rho
            .total_cmp(&other.rho)
            .then(self.region.cmp(&other.region))
            .then(self.version.cmp(&other.version))
    }
}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Running sums of `ln rho - shift` for incremental mean and variance.
struct LogSums {
    shift: f64,
    s1: f64,
    s2: f64,
    k: usize,
}

impl LogSums {
    fn new(logs: &[f64]) -> Self {
        let k = logs.len();
        let shift = if k > 0 { logs.iter().sum::<f64>() / k as f64 } else { 0.0 };
        let s1 = logs.iter().map(|l| l - shift).sum();
        let s2 = logs.iter().map(|l| (l - shift).powi(2)).sum();
        Self { shift, s1, s2, k }
    }

    fn replace(&mut self, old: f64, new: f64) {
        let (o, n) = (old - self.shift, new - self.shift);
        self.s1 += n - o;
        self.s2 += n * n - o * o;
    }

    fn stats(&self) -> CdrStats {
        let k = self.k as f64;
        let mean = self.s1 / k;
        let sigma = if self.k < 2 {
            0.0
        } else {
            ((self.s2 - k * mean * mean) / (k - 1.0)).max(0.0).sqrt()
        };
        CdrStats { mu_rho: self.shift + mean, sigma_rho: sigma, k: self.k }
    }
}

/// The complete greedy removal sequence, run until every region is pruned to
/// `knn` members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalPath {
    pub initial: CdrStats,
    pub z: f64,
    pub steps: Vec<Removal>,
}

impl RemovalPath {
    pub fn compute(prep: &Prepared, cfg: &FilterConfig) -> Self {
        let floor = cfg.cdr_floor;
        let mut states: Vec<RegionState> = prep
            .regions
            .iter()
            .map(|r| RegionState::new(&r.indices, &prep.points, &prep.hessian, floor))
            .collect();
        let logs: Vec<f64> = states.iter().map(|s| s.rho.ln()).collect();
        let mut sums = LogSums::new(&logs);
        let initial = sums.stats();
        let mut heap: BinaryHeap<Reverse<HeapKey>> = states
            .iter()
            .enumerate()
            .filter(|(_, s)| s.members.len() > cfg.knn)
            .map(|(region, s)| Reverse(HeapKey { rho: s.rho, region, version: s.version }))
            .collect();
        let mut steps = Vec::new();
        while let Some(Reverse(key)) = heap.pop() {
            let state = &mut states[key.region];
            if key.version != state.version {
                continue;
            }
            let old = state.rho.ln();
            let pos = state.most_redundant();
            let index = state.remove(pos, &prep.points, &prep.hessian, floor);
            sums.replace(old, state.rho.ln());
            let stats = sums.stats();
            steps.push(Removal {
                index,
                region: key.region,
                mu_rho: stats.mu_rho,
                sigma_rho: stats.sigma_rho,
            });
            if state.members.len() > cfg.knn {
                heap.push(Reverse(HeapKey { rho: state.rho, region: key.region, version: state.version }));
            }
        }
        debug!("removal path: {} steps", steps.len());
        Self { initial, z: cfg.z, steps }
    }

    pub fn statistic_after(&self, step: usize) -> f64 {
        let s = &self.steps[step];
        s.mu_rho + self.z * s.sigma_rho
    }

    /// Number of removals accepted at threshold `epsilon`: the path stops
    /// before the first removal that pushes the statistic above it. `None`
    /// when the full dataset already violates the threshold.
    pub fn cut(&self, epsilon: f64) -> Option<usize> {
        if self.initial.statistic(self.z) > epsilon {
            return None;
        }
        Some(
            (0..self.steps.len())
                .find(|&j| self.statistic_after(j) > epsilon)
                .unwrap_or(self.steps.len()),
        )
    }

    /// Statistic range spanned by the path; thresholds outside it either
    /// keep everything or prune maximally.
    pub fn statistic_range(&self) -> (f64, f64) {
        let init = self.initial.statistic(self.z);
        (0..self.steps.len())
            .map(|j| self.statistic_after(j))
            .fold((init, init), |(lo, hi), s| (lo.min(s), hi.max(s)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub initial_size: usize,
    pub final_size: usize,
    pub epsilon: f64,
    pub z: f64,
    pub knn: usize,
    pub n_max: usize,
    pub region_count: usize,
    pub mu_rho_before: f64,
    pub sigma_rho_before: f64,
    pub mu_rho_after: f64,
    pub sigma_rho_after: f64,
    /// Samples removed from each region, in partition order.
    pub removals_per_region: Vec<usize>,
    /// The threshold was below the initial statistic; nothing was removed.
    pub infeasible: bool,
    pub degenerate_neighborhoods: usize,
    pub curvature_stride: usize,
}

impl FilterReport {
    pub fn reduction(&self) -> f64 {
        1.0 - self.final_size as f64 / self.initial_size.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Retained sample indices in ascending order.
    pub retained: Vec<usize>,
    pub report: FilterReport,
}

/// Applies a threshold to a precomputed removal path.
pub fn select(prep: &Prepared, path: &RemovalPath, cfg: &FilterConfig, epsilon: f64) -> FilterOutcome {
    let n = prep.points.len();
    let cut = path.cut(epsilon);
    let infeasible = cut.is_none();
    if infeasible {
        warn!(
            "epsilon {epsilon} is below the initial statistic {:.4}; keeping all samples",
            path.initial.statistic(path.z)
        );
    }
    let accepted = &path.steps[..cut.unwrap_or(0)];
    let mut keep = vec![true; n];
    let mut removals_per_region = vec![0; prep.regions.len()];
    for r in accepted {
        keep[r.index] = false;
        removals_per_region[r.region] += 1;
    }
    let retained: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let after = accepted
        .last()
        .map(|r| CdrStats { mu_rho: r.mu_rho, sigma_rho: r.sigma_rho, k: path.initial.k })
        .unwrap_or(path.initial);
    let report = FilterReport {
        initial_size: n,
        final_size: retained.len(),
        epsilon,
        z: cfg.z,
        knn: cfg.knn,
        n_max: cfg.n_max,
        region_count: prep.regions.len(),
        mu_rho_before: path.initial.mu_rho,
        sigma_rho_before: path.initial.sigma_rho,
        mu_rho_after: after.mu_rho,
        sigma_rho_after: after.sigma_rho,
        removals_per_region,
        infeasible,
        degenerate_neighborhoods: prep.degenerate,
        curvature_stride: prep.curvature_stride,
    };
    FilterOutcome { retained, report }
}

/// Filters at `cfg.epsilon`.
pub fn filter(dataset: &Dataset, cfg: &FilterConfig) -> Result<FilterOutcome> {
    let prep = Prepared::new(dataset, cfg)?;
    let path = RemovalPath::compute(&prep, cfg);
    Ok(select(&prep, &path, cfg, cfg.epsilon))
}

/// Filters at every threshold in `epsilons` from a single removal pass.
pub fn sweep(dataset: &Dataset, cfg: &FilterConfig, epsilons: &[f64]) -> Result<Vec<FilterOutcome>> {
    let prep = Prepared::new(dataset, cfg)?;
    let path = RemovalPath::compute(&prep, cfg);
    Ok(epsilons.iter().map(|&e| select(&prep, &path, cfg, e)).collect())
}

/// `count` thresholds spread evenly from the initial statistic (the smallest
/// feasible threshold) to the largest statistic on `path`.
pub fn sweep_thresholds(path: &RemovalPath, count: usize) -> Vec<f64> {
    let lo = path.initial.statistic(path.z);
    let hi = path.statistic_range().1;
    match count {
        0 => vec![],
        1 => vec![hi],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}
