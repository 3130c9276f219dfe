//! Complete-linkage agglomerative clustering and the threshold cut.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelProfile, SortedSeries};
use crate::multiscale::DistanceMatrix;
use crate::panel::TransformedPanel;

/// One merge. Node ids `0..n` are leaves, merge `r` creates node `n + r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n: usize,
    pub leaves: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Structural check for dendrograms read from disk.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::MalformedDendrogram(m));
        if self.n < 1 {
            return bad("no leaves".into());
        }
        if self.leaves.len() != self.n {
            return bad(format!("{} labels for {} leaves", self.leaves.len(), self.n));
        }
        if self.merges.len() + 1 != self.n {
            return bad(format!("{} merges for {} leaves", self.merges.len(), self.n));
        }
        let mut used = vec![false; 2 * self.n - 1];
        let mut prev = f64::NEG_INFINITY;
        for (r, m) in self.merges.iter().enumerate() {
            let id = self.n + r;
            if m.id != id {
                return bad(format!("merge {r} has id {} instead of {id}", m.id));
            }
            for child in [m.left, m.right] {
                if child >= id {
                    return bad(format!("merge {r} refers to node {child} not yet created"));
                }
                if used[child] {
                    return bad(format!("node {child} merged twice"));
                }
                used[child] = true;
            }
            if m.left == m.right {
                return bad(format!("merge {r} joins node {} with itself", m.left));
            }
            if !m.height.is_finite() {
                return bad(format!("merge {r} has non-finite height"));
            }
            if m.height < prev {
                return bad(format!("merge {r} height decreases"));
            }
            prev = m.height;
        }
        Ok(())
    }

    pub fn heights(&self) -> Vec<f64> {
        self.merges.iter().map(|m| m.height).collect()
    }

    /// Partition after executing the first `count` merges.
    pub fn partition_after(&self, count: usize) -> Partition {
        let mut uf = UnionFind::new(2 * self.n);
        for m in &self.merges[..count.min(self.merges.len())] {
            uf.union(m.left, m.id);
            uf.union(m.right, m.id);
        }
        Partition::from_labels(&(0..self.n).map(|i| uf.find(i)).collect::<Vec<_>>())
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
    }
}

/// Disjoint index sets, sorted internally and ordered by smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    clusters: Vec<Vec<usize>>,
}

impl Partition {
    /// Builds the canonical partition from arbitrary per-item labels.
    pub fn from_labels<L: Eq + Copy>(labels: &[L]) -> Self {
        let mut clusters: Vec<(L, Vec<usize>)> = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            match clusters.iter_mut().find(|(k, _)| *k == l) {
                Some((_, members)) => members.push(i),
                None => clusters.push((l, vec![i])),
            }
        }
        Self {
            clusters: clusters.into_iter().map(|(_, m)| m).collect(),
        }
    }

    pub fn from_clusters(mut clusters: Vec<Vec<usize>>) -> Self {
        clusters.retain(|c| !c.is_empty());
        clusters.iter_mut().for_each(|c| c.sort_unstable());
        clusters.sort_by_key(|c| c[0]);
        Self { clusters }
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    /// Number of items covered.
    pub fn n(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// Cluster index (0-based, in canonical order) of every item.
    pub fn labels(&self) -> Vec<usize> {
        let mut out = vec![0; self.n()];
        for (k, c) in self.clusters.iter().enumerate() {
            for &i in c {
                out[i] = k;
            }
        }
        out
    }

    /// Whether every cluster of `self` lies inside a cluster of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        let labels = coarser.labels();
        self.clusters
            .iter()
            .all(|c| c.iter().all(|&i| labels[i] == labels[c[0]]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub k_hat: usize,
    pub partition: Partition,
    pub threshold: f64,
    /// `criterion_values[K − 1]` is the largest within-cluster dissimilarity
    /// of the `K`-cluster partition, for `K = 1..=n`.
    pub criterion_values: Vec<f64>,
}

/// Complete-linkage clustering with labels `"0".."n-1"`.
pub fn hac_complete_linkage(dm: &DistanceMatrix) -> Result<Dendrogram> {
    let labels = (0..dm.n()).map(|i| i.to_string()).collect();
    hac_complete_linkage_labeled(dm, labels)
}

/// Complete-linkage clustering. Ties are broken by the smallest leaf index of
/// the first cluster, then of the second.
pub fn hac_complete_linkage_labeled(dm: &DistanceMatrix, leaves: Vec<String>) -> Result<Dendrogram> {
    let n = dm.n();
    if n < 2 {
        return Err(Error::TooFewSeries { n });
    }
    if leaves.len() != n {
        return Err(Error::Format(format!("{} labels for {n} series", leaves.len())));
    }
    for (i, j, d) in dm.pairs() {
        if !d.is_finite() {
            return Err(Error::NonFiniteDistance { i, j });
        }
    }

    // Clusters are indexed by their smallest leaf; `dist` keeps the current
    // linkage between active clusters.
    let mut dist: Vec<f64> = dm.values().to_vec();
    let mut active = vec![true; n];
    let mut node = (0..n).collect::<Vec<_>>();
    let mut merges = Vec::with_capacity(n - 1);

    for r in 0..n - 1 {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..n {
            if !active[a] {
                continue;
            }
            for b in (a + 1)..n {
                if !active[b] {
                    continue;
                }
                let d = dist[a * n + b];
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((a, b, d));
                }
            }
        }
        let (a, b, height) = best.expect("at least two active clusters");
        let id = n + r;
        merges.push(Merge {
            left: node[a],
            right: node[b],
            height,
            id,
        });
        active[b] = false;
        node[a] = id;
        for c in 0..n {
            if active[c] && c != a {
                let v = dist[a * n + c].max(dist[b * n + c]);
                dist[a * n + c] = v;
                dist[c * n + a] = v;
            }
        }
    }

    Ok(Dendrogram { n, leaves, merges })
}

/// Executes every merge with height at or below `threshold`.
pub fn cut_dendrogram(dend: &Dendrogram, threshold: f64) -> Partition {
    let count = dend.merges.iter().filter(|m| m.height <= threshold).count();
    dend.partition_after(count)
}

/// The partition with exactly `k` clusters, `1 ≤ k ≤ n`.
pub fn partition_with_k(dend: &Dendrogram, k: usize) -> Result<Partition> {
    if k == 0 || k > dend.n {
        return Err(Error::BadGroup { k });
    }
    Ok(dend.partition_after(dend.n - k))
}

/// Smallest `K` whose partition has all within-cluster dissimilarities at or
/// below `threshold`. Falls back to `K = n` when even singletons exceed it.
pub fn estimate_k0(dend: &Dendrogram, dm: &DistanceMatrix, threshold: f64) -> Result<ClusteringResult> {
    if !threshold.is_finite() {
        return Err(Error::Format(format!("threshold must be finite, got {threshold}")));
    }
    if dend.n != dm.n() {
        return Err(Error::MalformedDendrogram(format!(
            "dendrogram has {} leaves, distance matrix {} series",
            dend.n,
            dm.n()
        )));
    }
    let n = dend.n;
    let criterion_values: Vec<f64> = (1..=n)
        .map(|k| if k == n { dm.floor() } else { dend.merges[n - k - 1].height })
        .collect();
    let k_hat = (1..=n).find(|&k| criterion_values[k - 1] <= threshold).unwrap_or(n);
    let partition = dend.partition_after(n - k_hat);

    debug_assert_eq!(
        partition,
        if threshold < dm.floor() { dend.partition_after(0) } else { cut_dendrogram(dend, threshold) }
    );
    Ok(ClusteringResult {
        k_hat,
        partition,
        threshold,
        criterion_values,
    })
}

/// Largest complete-linkage dissimilarity inside any cluster of `partition`.
pub fn max_within_dissimilarity(dm: &DistanceMatrix, partition: &Partition) -> f64 {
    partition
        .clusters()
        .iter()
        .flat_map(|c| c.iter().flat_map(move |&i| c.iter().map(move |&j| dm.get(i, j))))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `ĝ_k(x) = |G_k|⁻¹ Σ_{i ∈ G_k} m̂_i(x)` at each evaluation point; one row per
/// cluster.
pub fn group_mean_curves(
    tp: &TransformedPanel,
    partition: &Partition,
    h: f64,
    kern: &KernelProfile,
    eval_points: &[f64],
) -> Result<Vec<Vec<f64>>> {
    crate::kernel::check_bandwidth(h)?;
    for &x in eval_points {
        crate::kernel::check_location(x)?;
    }
    if partition.n() != tp.n() {
        return Err(Error::Format(format!(
            "partition covers {} series, panel has {}",
            partition.n(),
            tp.n()
        )));
    }
    let mut failures = Vec::new();
    let mut curves = Vec::with_capacity(partition.k());
    for cluster in partition.clusters() {
        let mut sum = vec![0.0; eval_points.len()];
        for &i in cluster {
            let s = SortedSeries::new(tp.x_row(i), tp.ystar_row(i));
            for (acc, &x) in sum.iter_mut().zip(eval_points) {
                match s.fit(kern, x, h) {
                    Ok(m) => *acc += m,
                    Err(f) => failures.push(f.for_series(i)),
                }
            }
        }
        let size = cluster.len() as f64;
        curves.push(sum.into_iter().map(|v| v / size).collect());
    }
    if !failures.is_empty() {
        return Err(Error::InsufficientLocalData { failures });
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(n: usize, upper: &[f64], floor: f64) -> DistanceMatrix {
        let mut v = vec![floor; n * n];
        let mut it = upper.iter();
        for i in 0..n {
            for j in (i + 1)..n {
                let d = *it.next().unwrap();
                v[i * n + j] = d;
                v[j * n + i] = d;
            }
        }
        DistanceMatrix::from_values(n, v, floor).unwrap()
    }

    fn random_matrix(n: usize, rng: &mut impl Rng) -> DistanceMatrix {
        let upper: Vec<f64> = (0..n * (n - 1) / 2).map(|_| rng.random_range(-1.0..5.0)).collect();
        matrix(n, &upper, -2.0)
    }

    fn three() -> DistanceMatrix {
        matrix(3, &[0.1, 5.0, 6.0], -1.5)
    }

    /// Textbook agglomeration that recomputes every cluster-pair linkage from
    /// the raw distances at each step.
    fn naive_hac(dm: &DistanceMatrix) -> Vec<(Vec<usize>, Vec<usize>, f64)> {
        let mut clusters: Vec<Vec<usize>> = (0..dm.n()).map(|i| vec![i]).collect();
        let mut out = Vec::new();
        while clusters.len() > 1 {
            let mut best = (0, 1, f64::INFINITY);
            for a in 0..clusters.len() {
                for b in (a + 1)..clusters.len() {
                    let d = clusters[a]
                        .iter()
                        .flat_map(|&i| clusters[b].iter().map(move |&j| (i, j)))
                        .map(|(i, j)| dm.get(i, j))
                        .fold(f64::NEG_INFINITY, f64::max);
                    if d < best.2 {
                        best = (a, b, d);
                    }
                }
            }
            let right = clusters.remove(best.1);
            let left = clusters[best.0].clone();
            out.push((left.clone(), right.clone(), best.2));
            clusters[best.0].extend(right);
            clusters[best.0].sort_unstable();
            clusters.sort_by_key(|c| c[0]);
        }
        out
    }

    fn leaves_of(d: &Dendrogram, node: usize) -> Vec<usize> {
        if node < d.n {
            return vec![node];
        }
        let m = d.merges[node - d.n];
        let mut v = leaves_of(d, m.left);
        v.extend(leaves_of(d, m.right));
        v.sort_unstable();
        v
    }

    #[test]
    fn three_series_example() {
        let dm = three();
        let d = hac_complete_linkage(&dm).unwrap();
        assert_eq!(d.merges[0], Merge { left: 0, right: 1, height: 0.1, id: 3 });
        assert_eq!(d.merges[1], Merge { left: 3, right: 2, height: 6.0, id: 4 });
        d.validate().unwrap();

        let p = cut_dendrogram(&d, 1.0);
        assert_eq!(p.clusters(), &[vec![0, 1], vec![2]]);
        let r = estimate_k0(&d, &dm, 1.0).unwrap();
        assert_eq!(r.k_hat, 2);
        assert_eq!(r.partition, p);
        assert_eq!(r.criterion_values, vec![6.0, 0.1, -1.5]);
    }

    #[test]
    fn trivial_cuts() {
        let dm = three();
        let d = hac_complete_linkage(&dm).unwrap();
        assert_eq!(cut_dendrogram(&d, 0.0).k(), 3);
        assert_eq!(cut_dendrogram(&d, 6.0).k(), 1);
        assert_eq!(estimate_k0(&d, &dm, 100.0).unwrap().k_hat, 1);
        assert_eq!(estimate_k0(&d, &dm, -10.0).unwrap().k_hat, 3);
        assert!(estimate_k0(&d, &dm, f64::NAN).is_err());

        let two = matrix(2, &[0.7], -1.0);
        let d2 = hac_complete_linkage(&two).unwrap();
        assert_eq!(d2.merges, vec![Merge { left: 0, right: 1, height: 0.7, id: 2 }]);
    }

    #[test]
    fn ties_break_on_smallest_leaves() {
        let dm = matrix(4, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0], -1.0);
        let d = hac_complete_linkage(&dm).unwrap();
        assert_eq!((d.merges[0].left, d.merges[0].right), (0, 1));
        assert_eq!((d.merges[1].left, d.merges[1].right), (4, 2));
        assert_eq!((d.merges[2].left, d.merges[2].right), (5, 3));
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.random_range(2..=12);
            let dm = random_matrix(n, &mut rng);
            let d = hac_complete_linkage(&dm).unwrap();
            d.validate().unwrap();
            let oracle = naive_hac(&dm);
            for (m, (l, r, h)) in d.merges.iter().zip(&oracle) {
                assert_eq!(m.height, *h);
                assert_eq!(&leaves_of(&d, m.left), l);
                assert_eq!(&leaves_of(&d, m.right), r);
            }
        }
    }

    #[test]
    fn criterion_equals_rescanned_dissimilarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(2..=15);
            let dm = random_matrix(n, &mut rng);
            let d = hac_complete_linkage(&dm).unwrap();
            let r = estimate_k0(&d, &dm, 0.0).unwrap();
            for k in 1..=n {
                let p = partition_with_k(&d, k).unwrap();
                assert_eq!(p.k(), k);
                assert_eq!(r.criterion_values[k - 1], max_within_dissimilarity(&dm, &p));
            }
        }
    }

    #[test]
    fn estimate_matches_cut_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let n = rng.random_range(2..=20);
            let dm = random_matrix(n, &mut rng);
            let d = hac_complete_linkage(&dm).unwrap();
            let q = rng.random_range(-1.0..5.0);
            let r = estimate_k0(&d, &dm, q).unwrap();
            let cut = cut_dendrogram(&d, q);
            assert_eq!(r.partition, cut);
            assert_eq!(r.k_hat, cut.k());
            assert!(max_within_dissimilarity(&dm, &r.partition) <= q);
            for k in 1..r.k_hat {
                assert!(r.criterion_values[k - 1] > q);
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut v = vec![0.0; 4];
        v[1] = f64::NAN;
        v[2] = f64::NAN;
        let dm = DistanceMatrix::from_values(2, v, 0.0).unwrap();
        assert_eq!(hac_complete_linkage(&dm).unwrap_err(), Error::NonFiniteDistance { i: 0, j: 1 });
    }

    #[test]
    fn malformed_dendrograms_are_rejected() {
        let d = hac_complete_linkage(&three()).unwrap();
        let mut bad = d.clone();
        bad.merges[1].height = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = d.clone();
        bad.merges[1].left = 0;
        assert!(bad.validate().is_err());
        let mut bad = d.clone();
        bad.merges.pop();
        assert!(bad.validate().is_err());
        let mut bad = d;
        bad.leaves.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn group_means() {
        let t = 60;
        let x: Vec<f64> = (0..t).map(|k| k as f64 / (t - 1) as f64).collect();
        let rows: Vec<Vec<f64>> = (1..=3).map(|s| x.iter().map(|v| s as f64 * v).collect()).collect();
        let tp = TransformedPanel::from_parts(
            vec!["a".into(), "b".into(), "c".into()],
            rows.clone(),
            vec![x.clone(); 3],
        )
        .unwrap();
        let k = KernelProfile::epanechnikov();
        let pts = [0.1, 0.5, 0.9];
        let all = Partition::from_clusters(vec![vec![0, 1, 2]]);
        let g = group_mean_curves(&tp, &all, 0.1, &k, &pts).unwrap();
        for (v, x) in g[0].iter().zip(pts) {
            assert!((v - 2.0 * x).abs() < 1e-12);
        }
        let single = Partition::from_clusters(vec![vec![0], vec![1], vec![2]]);
        let g = group_mean_curves(&tp, &single, 0.1, &k, &pts).unwrap();
        for (s, curve) in g.iter().enumerate() {
            let own = crate::kernel::local_linear_fit(&rows[s], &x, 0.5, 0.1, &k).unwrap();
            assert!((curve[1] - own).abs() < 1e-15);
        }
        assert!(matches!(
            group_mean_curves(&tp, &all, 0.001, &k, &[0.505]),
            Err(Error::InsufficientLocalData { .. })
        ));
    }

    proptest! {
        #[test]
        fn cuts_are_nested(seed in 0u64..10_000, n in 2usize..14) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dm = random_matrix(n, &mut rng);
            let d = hac_complete_linkage(&dm).unwrap();
            let hs = d.heights();
            prop_assert!(hs.windows(2).all(|w| w[0] <= w[1]));
            for k in 1..n {
                let coarse = partition_with_k(&d, k).unwrap();
                let fine = partition_with_k(&d, k + 1).unwrap();
                prop_assert!(fine.refines(&coarse));
            }
            prop_assert_eq!(cut_dendrogram(&d, hs[n - 2]).k(), 1);
        }

        #[test]
        fn permutation_equivariance(seed in 0u64..10_000, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dm = random_matrix(n, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut pv = vec![dm.floor(); n * n];
            for i in 0..n {
                for j in 0..n {
                    pv[perm[i] * n + perm[j]] = dm.get(i, j);
                }
            }
            let pdm = DistanceMatrix::from_values(n, pv, dm.floor()).unwrap();
            let d = hac_complete_linkage(&dm).unwrap();
            let pd = hac_complete_linkage(&pdm).unwrap();
            prop_assert_eq!(d.heights(), pd.heights());
            for k in 1..=n {
                let p = partition_with_k(&d, k).unwrap();
                let mapped = Partition::from_clusters(
                    p.clusters().iter().map(|c| c.iter().map(|&i| perm[i]).collect()).collect(),
                );
                prop_assert_eq!(mapped, partition_with_k(&pd, k).unwrap());
            }
        }
    }
}
