//! Clustering, ranking and quota allocation of per-class patch candidates.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::rng_for;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    /// Number of k-means centers `M`.
    pub n_centers: usize,
    /// Number of top-ranked clusters `N` patches are drawn from.
    pub n_top: usize,
    pub max_iters: usize,
    /// Relative inertia change below which Lloyd iterations stop.
    pub tol: f64,
    /// Independent seeded initializations; the lowest inertia wins.
    pub restarts: usize,
    pub rng_seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            n_centers: 32,
            n_top: 10,
            max_iters: 100,
            tol: 1e-6,
            restarts: 3,
            rng_seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_centers == 0 || self.n_top == 0 {
            return Err(Error::Config("n_centers and n_top must be >= 1".into()));
        }
        if self.n_top > self.n_centers {
            return Err(Error::Config(format!(
                "n_top ({}) must not exceed n_centers ({})",
                self.n_top, self.n_centers
            )));
        }
        if self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::Config("max_iters and restarts must be >= 1".into()));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::Config("tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

impl KMeansFit {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k()];
        for (i, &c) in self.assignment.iter().enumerate() {
            m[c].push(i);
        }
        m
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Probabilistic farthest-point seeding (k-means++). Stops early once every
/// point coincides with a chosen center, so duplicated inputs yield fewer
/// centers.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        if d2[pick] <= 0.0 {
            // rounding pushed us past the last positive weight
            pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
        }
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, f64) {
    let mut assignment = Vec::with_capacity(points.len());
    let mut dists = Vec::with_capacity(points.len());
    let mut inertia = 0.0;
    for p in points {
        let (c, d) = nearest(p, centroids);
        assignment.push(c);
        dists.push(d);
        inertia += d;
    }
    (assignment, dists, inertia)
}

fn lloyd(points: &[Vec<f64>], k: usize, cfg: &ClusterConfig, rng: &mut impl Rng) -> KMeansFit {
    let dim = points[0].len();
    let mut centroids = seed_centroids(points, k, rng);
    let (mut assignment, mut dists, mut inertia) = assign(points, &centroids);
    let mut trace = vec![inertia];

    for _ in 0..cfg.max_iters {
        let kk = centroids.len();
        let mut sums = vec![vec![0.0; dim]; kk];
        let mut counts = vec![0usize; kk];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        let mut taken = HashSet::new();
        for c in 0..kk {
            if counts[c] > 0 {
                next[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // empty cluster: move it onto the point farthest from its centroid
                let far = (0..points.len())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    taken.insert(i);
                    next[c] = points[i].clone();
                }
            }
        }
        let (a2, d2, i2) = assign(points, &next);
        if i2 > inertia {
            // only rounding can make Lloyd worse; treat as converged
            break;
        }
        let rel = if inertia > 0.0 { (inertia - i2) / inertia } else { 0.0 };
        centroids = next;
        assignment = a2;
        dists = d2;
        inertia = i2;
        trace.push(inertia);
        if rel <= cfg.tol {
            break;
        }
    }
    KMeansFit {
        centroids,
        assignment,
        inertia,
        inertia_trace: trace,
    }
}

/// Seeded k-means with best-of-`restarts` selection. Effective `k` is
/// `min(n_centers, #points)`.
pub fn kmeans_cluster(points: &[Vec<f64>], cfg: &ClusterConfig) -> Result<KMeansFit> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(Error::InvalidInput("k-means needs at least one point".into()));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidInput("feature vectors must share a non-zero dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("feature vectors must be finite".into()));
    }
    let k = cfg.n_centers.min(points.len());
    let mut best: Option<KMeansFit> = None;
    for r in 0..cfg.restarts {
        let mut rng = rng_for(cfg.rng_seed, &format!("kmeans-restart-{r}"));
        let fit = lloyd(points, k, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Per cluster, member indices sorted by ascending distance to the centroid;
/// ties by `rho` descending, then `ids` ascending.
pub fn rank_intra_cluster(
    fit: &KMeansFit,
    points: &[Vec<f64>],
    rho: &[f64],
    ids: &[String],
) -> Vec<Vec<usize>> {
    fit.members()
        .into_iter()
        .enumerate()
        .map(|(c, mut members)| {
            let centroid = &fit.centroids[c];
            members.sort_by(|&a, &b| {
                sq_dist(&points[a], centroid)
                    .total_cmp(&sq_dist(&points[b], centroid))
                    .then(rho[b].total_cmp(&rho[a]))
                    .then(ids[a].cmp(&ids[b]))
                    .then(a.cmp(&b))
            });
            members
        })
        .collect()
}

/// Median with the even-size rule (mean of the two central values).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Non-empty cluster ids by descending median `rho`; ties by size
/// descending, then id.
pub fn rank_clusters(fit: &KMeansFit, rho: &[f64]) -> Vec<usize> {
    let members = fit.members();
    let mut stats: Vec<(usize, f64, usize)> = members
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(c, m)| {
            let vals: Vec<f64> = m.iter().map(|&i| rho[i]).collect();
            (c, median(&vals).expect("non-empty"), m.len())
        })
        .collect();
    stats.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)));
    stats.into_iter().map(|(c, _, _)| c).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub fit: KMeansFit,
    /// Indexed by cluster id; empty clusters have empty lists.
    pub intra_order: Vec<Vec<usize>>,
    pub inter_order: Vec<usize>,
}

impl ClusterReport {
    pub fn build(points: &[Vec<f64>], rho: &[f64], ids: &[String], cfg: &ClusterConfig) -> Result<Self> {
        if rho.len() != points.len() || ids.len() != points.len() {
            return Err(Error::InvalidInput("points, rho and ids must have equal length".into()));
        }
        let fit = kmeans_cluster(points, cfg)?;
        let intra_order = rank_intra_cluster(&fit, points, rho, ids);
        let inter_order = rank_clusters(&fit, rho);
        Ok(Self {
            fit,
            intra_order,
            inter_order,
        })
    }

    pub fn len(&self) -> usize {
        self.fit.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fit.assignment.is_empty()
    }

    /// Position of each cluster in `inter_order` (None for empty clusters).
    pub fn inter_rank(&self) -> Vec<Option<usize>> {
        let mut r = vec![None; self.fit.k()];
        for (pos, &c) in self.inter_order.iter().enumerate() {
            r[c] = Some(pos);
        }
        r
    }

    /// Position of each candidate inside its cluster's intra order.
    pub fn intra_rank(&self) -> Vec<usize> {
        let mut r = vec![0; self.len()];
        for list in &self.intra_order {
            for (pos, &i) in list.iter().enumerate() {
                r[i] = pos;
            }
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Four patches resized into one image.
    Mosaic,
    /// One patch per image.
    Single,
}

impl Mode {
    pub fn tiles(self) -> usize {
        match self {
            Mode::Mosaic => 4,
            Mode::Single => 1,
        }
    }

    /// Default rule: mosaic for IPC <= 10, single patches otherwise.
    pub fn for_ipc(ipc: usize) -> Mode {
        if ipc <= 10 {
            Mode::Mosaic
        } else {
            Mode::Single
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mosaic" => Ok(Mode::Mosaic),
            "single" => Ok(Mode::Single),
            other => Err(format!("unknown mode {other:?} (expected mosaic|single)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quota {
    pub needed: usize,
    pub per_cluster: usize,
    pub remainder: usize,
}

pub fn allocate_quota(ipc: usize, n_top: usize, mode: Mode) -> Result<Quota> {
    if ipc == 0 || n_top == 0 {
        return Err(Error::InvalidInput("ipc and n_top must be >= 1".into()));
    }
    let needed = ipc * mode.tiles();
    let per_cluster = needed / n_top;
    Ok(Quota {
        needed,
        per_cluster,
        remainder: needed - n_top * per_cluster,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemainderOrder {
    /// Most representative first.
    Descending,
    Ascending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PickSource {
    Cluster { inter_rank: usize, intra_rank: usize },
    Remainder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pick {
    pub candidate: usize,
    pub source: PickSource,
}

/// Takes `per_cluster` members from each of the top `n_top` clusters (in intra
/// order) and fills the remainder, plus any cluster shortfall, from unused
/// candidates ordered by `rho`.
pub fn select_final_patches(
    report: &ClusterReport,
    quota: &Quota,
    n_top: usize,
    rho: &[f64],
    order: RemainderOrder,
) -> Result<Vec<Pick>> {
    if rho.len() != report.len() {
        return Err(Error::InvalidInput("rho length must match clustered candidates".into()));
    }
    if quota.needed > report.len() {
        return Err(Error::Infeasible(format!(
            "{} patches needed but only {} candidates available",
            quota.needed,
            report.len()
        )));
    }
    let mut picks = Vec::with_capacity(quota.needed);
    let mut used = vec![false; report.len()];
    for (inter_rank, &c) in report.inter_order.iter().take(n_top).enumerate() {
        for (intra_rank, &i) in report.intra_order[c].iter().take(quota.per_cluster).enumerate() {
            used[i] = true;
            picks.push(Pick {
                candidate: i,
                source: PickSource::Cluster { inter_rank, intra_rank },
            });
        }
    }
    let mut pool: Vec<usize> = (0..report.len()).filter(|&i| !used[i]).collect();
    pool.sort_by(|&a, &b| {
        let by_rho = match order {
            RemainderOrder::Descending => rho[b].total_cmp(&rho[a]),
            RemainderOrder::Ascending => rho[a].total_cmp(&rho[b]),
        };
        by_rho.then(a.cmp(&b))
    });
    let missing = quota.needed - picks.len();
    picks.extend(pool.into_iter().take(missing).map(|i| Pick {
        candidate: i,
        source: PickSource::Remainder,
    }));
    debug_assert_eq!(picks.len(), quota.needed);
    Ok(picks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    fn cfg(k: usize) -> ClusterConfig {
        ClusterConfig { n_centers: k, n_top: 1, ..Default::default() }
    }

    #[test]
    fn two_clusters_on_the_line() {
        let fit = kmeans_cluster(&pts(&[0.0, 1.0, 9.0, 10.0]), &cfg(2)).unwrap();
        assert!((fit.inertia - 1.0).abs() < 1e-12);
        let mut cents: Vec<f64> = fit.centroids.iter().map(|c| c[0]).collect();
        cents.sort_by(f64::total_cmp);
        assert_eq!(cents, vec![0.5, 9.5]);
        assert_eq!(fit.assignment[0], fit.assignment[1]);
        assert_eq!(fit.assignment[2], fit.assignment[3]);
        assert_ne!(fit.assignment[0], fit.assignment[2]);
    }

    #[test]
    fn degenerate_k_gives_singletons() {
        let fit = kmeans_cluster(&pts(&[3.0, -1.0, 7.5]), &cfg(8)).unwrap();
        assert_eq!(fit.inertia, 0.0);
        let mut a = fit.assignment.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn duplicates_collapse_to_one_centroid() {
        let fit = kmeans_cluster(&vec![vec![2.0, 5.0]; 6], &cfg(4)).unwrap();
        assert_eq!(fit.inertia, 0.0);
        assert_eq!(fit.k(), 1);
        assert_eq!(fit.centroids[0], vec![2.0, 5.0]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(kmeans_cluster(&[], &cfg(2)).is_err());
    }

    #[test]
    fn intra_tie_resolved_by_rho() {
        let points = pts(&[0.0, 1.0, 9.0, 10.0]);
        let fit = kmeans_cluster(&points, &cfg(2)).unwrap();
        let rho = [0.2, 0.9, 0.0, 0.0];
        let ids: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let intra = rank_intra_cluster(&fit, &points, &rho, &ids);
        let low = fit.assignment[0];
        assert_eq!(intra[low], vec![1, 0]);
        let high = fit.assignment[2];
        assert_eq!(intra[high], vec![2, 3], "equal rho falls back to id");
    }

    #[test]
    fn singleton_cluster_first_at_distance_zero() {
        let points = pts(&[0.0, 100.0]);
        let fit = kmeans_cluster(&points, &cfg(2)).unwrap();
        let intra = rank_intra_cluster(&fit, &points, &[1.0, 2.0], &["a".into(), "b".into()]);
        for list in intra {
            assert_eq!(list.len(), 1);
        }
    }

    #[test]
    fn cluster_median_tie_broken_by_size() {
        let fit = KMeansFit {
            centroids: vec![vec![0.0], vec![1.0]],
            assignment: vec![0, 0, 1, 1, 1],
            inertia: 0.0,
            inertia_trace: vec![0.0],
        };
        let rho = [3.0, 1.0, 2.0, 2.0, 2.0];
        assert_eq!(median(&[3.0, 1.0]), Some(2.0));
        assert_eq!(rank_clusters(&fit, &rho), vec![1, 0]);
        let shifted: Vec<f64> = rho.iter().map(|r| r + 10.0).collect();
        assert_eq!(rank_clusters(&fit, &shifted), vec![1, 0]);
    }

    #[test]
    fn quota_rule() {
        assert_eq!(allocate_quota(50, 10, Mode::Single).unwrap(), Quota { needed: 50, per_cluster: 5, remainder: 0 });
        assert_eq!(allocate_quota(10, 10, Mode::Mosaic).unwrap(), Quota { needed: 40, per_cluster: 4, remainder: 0 });
        assert_eq!(allocate_quota(7, 10, Mode::Single).unwrap(), Quota { needed: 7, per_cluster: 0, remainder: 7 });
        assert_eq!(allocate_quota(100, 10, Mode::Single).unwrap().per_cluster, 10);
        assert_eq!(allocate_quota(13, 10, Mode::Mosaic).unwrap(), Quota { needed: 52, per_cluster: 5, remainder: 2 });
    }

    fn synthetic_report(sizes: &[usize]) -> (ClusterReport, Vec<f64>) {
        let mut assignment = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            assignment.extend(std::iter::repeat_n(c, s));
        }
        let n = assignment.len();
        let rho: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
        let fit = KMeansFit {
            centroids: vec![vec![0.0]; sizes.len()],
            assignment,
            inertia: 0.0,
            inertia_trace: vec![0.0],
        };
        let members = fit.members();
        let inter_order = rank_clusters(&fit, &rho);
        (ClusterReport { intra_order: members, inter_order, fit }, rho)
    }

    #[test]
    fn fifty_from_ten_clusters() {
        let (mut report, rho) = synthetic_report(&[6, 7, 5, 9, 5, 8, 5, 6, 10, 5, 3, 2]);
        report.inter_order = vec![3, 1, 0, 2, 4, 5, 6, 7, 8, 9, 10, 11];
        let quota = allocate_quota(50, 10, Mode::Single).unwrap();
        let picks = select_final_patches(&report, &quota, 10, &rho, RemainderOrder::Descending).unwrap();
        assert_eq!(picks.len(), 50);
        let mut per = std::collections::HashMap::new();
        for p in &picks {
            match p.source {
                PickSource::Cluster { inter_rank, .. } => *per.entry(inter_rank).or_insert(0) += 1,
                PickSource::Remainder => panic!("no remainder expected"),
            }
        }
        assert_eq!(per.len(), 10);
        assert!(per.values().all(|&v| v == 5));
    }

    #[test]
    fn shortfall_moves_to_remainder() {
        // cluster 0 has only 3 members, everything else plenty
        let (mut report, rho) = synthetic_report(&[3, 8, 8, 8, 8, 8, 8, 8, 8, 8]);
        report.inter_order = (0..10).collect();
        let quota = allocate_quota(50, 10, Mode::Single).unwrap();
        let picks = select_final_patches(&report, &quota, 10, &rho, RemainderOrder::Descending).unwrap();
        let extra: Vec<&Pick> = picks.iter().filter(|p| p.source == PickSource::Remainder).collect();
        assert_eq!(extra.len(), 2);
        assert_eq!(picks.len(), 50);
        // remainder is the two highest-rho unused candidates
        let used: HashSet<usize> = picks.iter().filter(|p| p.source != PickSource::Remainder).map(|p| p.candidate).collect();
        let mut unused: Vec<usize> = (0..rho.len()).filter(|i| !used.contains(i)).collect();
        unused.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
        assert_eq!(vec![extra[0].candidate, extra[1].candidate], unused[..2].to_vec());
    }

    #[test]
    fn too_few_candidates_is_infeasible() {
        let (report, rho) = synthetic_report(&[2, 2]);
        let quota = allocate_quota(5, 2, Mode::Single).unwrap();
        assert!(matches!(
            select_final_patches(&report, &quota, 2, &rho, RemainderOrder::Descending),
            Err(Error::Infeasible(_))
        ));
    }

    proptest! {
        #[test]
        fn lloyd_inertia_never_increases(seed in any::<u64>(), n in 2usize..40, k in 1usize..6) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let points: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect();
            let fit = kmeans_cluster(&points, &ClusterConfig { n_centers: k, n_top: 1, rng_seed: seed, ..Default::default() }).unwrap();
            for w in fit.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert_eq!(fit.inertia, *fit.inertia_trace.last().unwrap());
        }

        #[test]
        fn intra_order_invariant_to_power_of_two_scaling(seed in any::<u64>(), e in -4i32..5) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let points: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect();
            let rho: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
            let ids: Vec<String> = (0..20).map(|i| format!("{i:02}")).collect();
            let cfg = ClusterConfig { n_centers: 4, n_top: 1, rng_seed: seed, ..Default::default() };
            let fit = kmeans_cluster(&points, &cfg).unwrap();
            let lambda = 2f64.powi(e);
            let scaled: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|v| v * lambda).collect()).collect();
            let mut scaled_fit = fit.clone();
            scaled_fit.centroids = fit.centroids.iter().map(|c| c.iter().map(|v| v * lambda).collect()).collect();
            prop_assert_eq!(
                rank_intra_cluster(&fit, &points, &rho, &ids),
                rank_intra_cluster(&scaled_fit, &scaled, &rho, &ids)
            );
        }

        #[test]
        fn selection_is_exact_and_unique(seed in any::<u64>(), ipc in 1usize..30, n_top in 1usize..8) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let sizes: Vec<usize> = (0..rng.random_range(1..12)).map(|_| rng.random_range(1..10)).collect();
            let (report, rho) = synthetic_report(&sizes);
            let quota = allocate_quota(ipc, n_top, Mode::Single).unwrap();
            match select_final_patches(&report, &quota, n_top, &rho, RemainderOrder::Descending) {
                Ok(picks) => {
                    prop_assert_eq!(picks.len(), quota.needed);
                    let uniq: HashSet<usize> = picks.iter().map(|p| p.candidate).collect();
                    prop_assert_eq!(uniq.len(), picks.len());
                }
                Err(Error::Infeasible(_)) => prop_assert!(quota.needed > report.len()),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
