//! Regionalisation: k-means and Ward clustering of standardised zone
//! features, scored by the Calinski-Harabasz index over a range of k.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::SpatialWeights;
use crate::warning::Warning;

/// Column-wise z-scores using the population standard deviation.
pub fn standardize(x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = x.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = x[0].len();
    let mut out = x.to_vec();
    for j in 0..d {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::DegenerateColumn(j));
        }
        for row in out.iter_mut() {
            row[j] = (row[j] - mean) / sd;
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Relabels so that clusters are numbered by first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub n_restarts: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            n_restarts: 10,
            tol: 1e-6,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after every assignment step, one trace per restart.
    pub traces: Vec<Vec<f64>>,
}

/// Lloyd iterations from greedy D² seeding; best of `n_restarts` by inertia.
pub fn kmeans(x: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = x.len();
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, n });
    }
    let runs: Vec<(Vec<usize>, f64, Vec<Vec<f64>>, Vec<f64>)> = (0..cfg.n_restarts.max(1))
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            lloyd(x, seeds_greedy_dsq(x, k, &mut rng), cfg)
        })
        .collect();
    let mut best = 0;
    for (r, run) in runs.iter().enumerate() {
        if run.1 < runs[best].1 {
            best = r;
        }
    }
    let traces = runs.iter().map(|r| r.3.clone()).collect();
    let (labels, inertia, centroids, _) = runs.into_iter().nth(best).unwrap();
    Ok(KMeansResult {
        labels: canonical_labels(&labels),
        inertia,
        centroids,
        traces,
    })
}

fn seeds_greedy_dsq(x: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = vec![x[rng.random_range(0..n)].clone()];
    let mut closest: Vec<f64> = x.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &d) in closest.iter().enumerate() {
                    if target < d {
                        pick = i;
                        break;
                    }
                    target -= d;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let updated: Vec<f64> = x
                .iter()
                .zip(&closest)
                .map(|(p, &d)| d.min(sq_dist(p, &x[cand])))
                .collect();
            let pot: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.0) {
                best = Some((pot, cand, updated));
            }
        }
        let (_, cand, updated) = best.unwrap();
        centers.push(x[cand].clone());
        closest = updated;
    }
    centers
}

fn assign(x: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    x.iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn lloyd(
    x: &[Vec<f64>],
    mut centers: Vec<Vec<f64>>,
    cfg: &KMeansConfig,
) -> (Vec<usize>, f64, Vec<Vec<f64>>, Vec<f64>) {
    let k = centers.len();
    let dim = x[0].len();
    let mut trace = Vec::new();
    let (mut labels, mut dists) = assign(x, &centers);
    let mut inertia: f64 = dists.iter().sum();
    trace.push(inertia);
    for _ in 0..cfg.max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in x.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // empty clusters take the point farthest from its centre
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..x.len())
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    counts[c] = 1;
                    labels[i] = c;
                    dists[i] = 0.0;
                    centers[c] = x[i].clone();
                }
            }
        }
        let (new_labels, new_dists) = assign(x, &centers);
        let new_inertia: f64 = new_dists.iter().sum();
        debug_assert!(
            new_inertia <= inertia * (1.0 + 1e-12) + 1e-12,
            "k-means inertia increased: {inertia} -> {new_inertia}"
        );
        trace.push(new_inertia);
        let unchanged = new_labels == labels;
        let small = inertia - new_inertia <= cfg.tol * inertia.max(f64::MIN_POSITIVE);
        labels = new_labels;
        dists = new_dists;
        inertia = new_inertia;
        if unchanged || small {
            break;
        }
    }
    (labels, inertia, centers, trace)
}

/// Dense agglomerative Ward clustering with Lance-Williams updates,
/// no connectivity constraint. O(n³); intended for small inputs.
pub fn ward_unconstrained(x: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let n = x.len();
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, n });
    }
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(&x[i], &x[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    let mut size = vec![1.0; n];
    let mut active = vec![true; n];
    let mut parent: Vec<usize> = (0..n).collect();
    for _ in 0..(n - k) {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if active[j] && d[i][j] < best.0 {
                    best = (d[i][j], i, j);
                }
            }
        }
        let (dij, a, b) = best;
        for c in 0..n {
            if active[c] && c != a && c != b {
                let nc = size[c];
                let v = ((size[a] + nc) * d[c][a] + (size[b] + nc) * d[c][b] - nc * dij)
                    / (size[a] + size[b] + nc);
                d[a][c] = v;
                d[c][a] = v;
            }
        }
        size[a] += size[b];
        active[b] = false;
        for p in parent.iter_mut() {
            if *p == b {
                *p = a;
            }
        }
    }
    Ok(canonical_labels(&parent))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    cost: f64,
    a: usize,
    b: usize,
    va: u32,
    vb: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // reversed so the BinaryHeap pops the smallest (cost, a, b)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then(other.a.cmp(&self.a))
            .then(other.b.cmp(&self.b))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct WardState {
    centroid: Vec<Vec<f64>>,
    size: Vec<f64>,
    version: Vec<u32>,
    active: Vec<bool>,
    adj: Vec<BTreeSet<usize>>,
    parent: Vec<usize>,
    heap: BinaryHeap<Candidate>,
    clusters: usize,
}

impl WardState {
    // Ward linkage written from centroids: 2·nₐn_b/(nₐ+n_b)·‖cₐ − c_b‖²,
    // the closed form of the Lance-Williams recurrence.
    fn cost(&self, a: usize, b: usize) -> f64 {
        let (na, nb) = (self.size[a], self.size[b]);
        2.0 * na * nb / (na + nb) * sq_dist(&self.centroid[a], &self.centroid[b])
    }

    fn push(&mut self, a: usize, b: usize) {
        let (a, b) = (a.min(b), a.max(b));
        self.heap.push(Candidate {
            cost: self.cost(a, b),
            a,
            b,
            va: self.version[a],
            vb: self.version[b],
        });
    }

    fn pop_valid(&mut self) -> Option<Candidate> {
        while let Some(c) = self.heap.pop() {
            if self.active[c.a]
                && self.active[c.b]
                && self.version[c.a] == c.va
                && self.version[c.b] == c.vb
            {
                return Some(c);
            }
        }
        None
    }

    fn merge(&mut self, a: usize, b: usize) {
        let (na, nb) = (self.size[a], self.size[b]);
        let merged: Vec<f64> = self.centroid[a]
            .iter()
            .zip(&self.centroid[b])
            .map(|(x, y)| (na * x + nb * y) / (na + nb))
            .collect();
        self.centroid[a] = merged;
        self.size[a] = na + nb;
        self.active[b] = false;
        self.version[a] += 1;
        self.clusters -= 1;
        let nb_b = std::mem::take(&mut self.adj[b]);
        for c in nb_b {
            self.adj[c].remove(&b);
            if c != a {
                self.adj[c].insert(a);
                self.adj[a].insert(c);
            }
        }
        self.adj[a].remove(&b);
        self.adj[a].remove(&a);
        for p in self.parent.iter_mut() {
            if *p == b {
                *p = a;
            }
        }
        let neighbours: Vec<usize> = self.adj[a].iter().copied().collect();
        for c in neighbours {
            self.push(a, c);
        }
    }
}

/// Ward clustering with merges restricted to connectivity-adjacent
/// clusters. Returns labels for each requested k (descending merge order),
/// so a whole range shares one hierarchy.
pub fn ward_constrained_levels(
    x: &[Vec<f64>],
    connectivity: &SpatialWeights,
    ks: &[usize],
) -> Result<(BTreeMap<usize, Vec<usize>>, Vec<Warning>)> {
    let n = x.len();
    if connectivity.n() != n {
        return Err(Error::InvalidInput(format!(
            "connectivity has {} nodes for {} rows",
            connectivity.n(),
            n
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::KTooLarge { k, n });
    }
    let mut warnings = Vec::new();
    let mut adj = vec![BTreeSet::new(); n];
    for (i, j, _) in connectivity.entries() {
        adj[i].insert(j);
        adj[j].insert(i);
    }
    let mut st = WardState {
        centroid: x.to_vec(),
        size: vec![1.0; n],
        version: vec![0; n],
        active: vec![true; n],
        adj,
        parent: (0..n).collect(),
        heap: BinaryHeap::new(),
        clusters: n,
    };
    for i in 0..n {
        let js: Vec<usize> = st.adj[i].iter().copied().filter(|&j| j > i).collect();
        for j in js {
            st.push(i, j);
        }
    }
    let mut wanted: Vec<usize> = ks.to_vec();
    wanted.sort_unstable_by(|a, b| b.cmp(a));
    wanted.dedup();
    let mut out = BTreeMap::new();
    let mut bridged = false;
    for k in wanted {
        while st.clusters > k {
            match st.pop_valid() {
                Some(c) => st.merge(c.a, c.b),
                None => {
                    if !bridged {
                        warnings.push(Warning::DisconnectedGraph {
                            components: st.clusters,
                        });
                        bridged = true;
                    }
                    // components exhausted: allow merges between any remaining clusters
                    let live: Vec<usize> = (0..n).filter(|&i| st.active[i]).collect();
                    for (p, &i) in live.iter().enumerate() {
                        for &j in &live[p + 1..] {
                            st.adj[i].insert(j);
                            st.adj[j].insert(i);
                            st.push(i, j);
                        }
                    }
                }
            }
        }
        out.insert(k, canonical_labels(&st.parent));
    }
    Ok((out, warnings))
}

/// Ward clustering, constrained to a connectivity graph when one is given.
pub fn ward_cluster(
    x: &[Vec<f64>],
    k: usize,
    connectivity: Option<&SpatialWeights>,
) -> Result<(Vec<usize>, Vec<Warning>)> {
    match connectivity {
        None => Ok((ward_unconstrained(x, k)?, Vec::new())),
        Some(w) => {
            let (mut levels, warnings) = ward_constrained_levels(x, w, &[k])?;
            Ok((levels.remove(&k).unwrap(), warnings))
        }
    }
}

/// `CH = [B/(k−1)] / [W/(n−k)]`.
pub fn calinski_harabasz(x: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let n = x.len();
    if labels.len() != n {
        return Err(Error::InvalidInput(
            "labels length differs from rows".into(),
        ));
    }
    if n == 0 {
        return Err(Error::UndefinedScore("no observations"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let dim = x[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in x.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    if counts.contains(&0) {
        return Err(Error::InvalidInput(
            "cluster labels must be contiguous and non-empty".into(),
        ));
    }
    if k < 2 {
        return Err(Error::UndefinedScore("k = 1"));
    }
    if k >= n {
        return Err(Error::UndefinedScore("k = n"));
    }
    let grand: Vec<f64> = (0..dim)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
        .collect();
    let between: f64 = centroids
        .iter()
        .zip(&counts)
        .map(|(c, &m)| m as f64 * sq_dist(c, &grand))
        .sum();
    let within: f64 = x
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum();
    if !(within > 0.0) {
        return Err(Error::UndefinedScore("zero within-cluster dispersion"));
    }
    Ok((between / (k as f64 - 1.0)) / (within / (n as f64 - k as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "kmeans")]
    KMeans,
    WardKnn,
    WardSparse,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::KMeans, Method::WardKnn, Method::WardSparse];

    pub fn label(self) -> &'static str {
        match self {
            Method::KMeans => "kmeans",
            Method::WardKnn => "ward_knn",
            Method::WardSparse => "ward_sparse",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    pub method: Method,
    pub ch_score: f64,
    pub seed: u64,
    pub region_names: Option<BTreeMap<usize, String>>,
}

impl RegionAssignment {
    pub fn name(&self, label: usize) -> String {
        self.region_names
            .as_ref()
            .and_then(|m| m.get(&label).cloned())
            .unwrap_or_else(|| format!("region_{label}"))
    }

    /// Orders regions by mean distance of their members from the overall
    /// centre and names them Central / Intermediate / Peripheral for k = 3,
    /// `ring_1..ring_k` otherwise.
    pub fn name_by_radius(&mut self, centroids: &[geo::Coord<f64>]) {
        let n = centroids.len() as f64;
        let cx = centroids.iter().map(|c| c.x).sum::<f64>() / n;
        let cy = centroids.iter().map(|c| c.y).sum::<f64>() / n;
        let mut radius = vec![(0.0, 0usize); self.k];
        for (c, &l) in centroids.iter().zip(&self.labels) {
            radius[l].0 += (c.x - cx).hypot(c.y - cy);
            radius[l].1 += 1;
        }
        let mut order: Vec<usize> = (0..self.k).collect();
        order.sort_by(|&a, &b| {
            let ra = radius[a].0 / radius[a].1 as f64;
            let rb = radius[b].0 / radius[b].1 as f64;
            ra.total_cmp(&rb).then(a.cmp(&b))
        });
        let names: BTreeMap<usize, String> = order
            .iter()
            .enumerate()
            .map(|(rank, &label)| {
                let name = if self.k == 3 {
                    ["Central", "Intermediate", "Peripheral"][rank].to_string()
                } else {
                    format!("ring_{}", rank + 1)
                };
                (label, name)
            })
            .collect();
        self.region_names = Some(names);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreCell {
    pub method: Method,
    pub k: usize,
    pub ch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionalizeConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub knn_k: usize,
    pub standardize: bool,
    pub kmeans: KMeansConfig,
    pub methods: Vec<Method>,
}

impl Default for RegionalizeConfig {
    fn default() -> Self {
        RegionalizeConfig {
            k_min: 3,
            k_max: 10,
            knn_k: 6,
            standardize: true,
            kmeans: KMeansConfig::default(),
            methods: Method::ALL.to_vec(),
        }
    }
}

/// Evaluates every (method, k) cell and keeps the highest CH score; ties
/// go to the smaller k, then to the earlier method.
pub fn select_regionalization(
    x: &[Vec<f64>],
    knn: &SpatialWeights,
    sparse: &SpatialWeights,
    cfg: &RegionalizeConfig,
    seed: u64,
) -> Result<(RegionAssignment, Vec<ScoreCell>, Vec<Warning>)> {
    if cfg.k_min < 2 || cfg.k_min > cfg.k_max {
        return Err(Error::InvalidInput(format!(
            "bad k range {}..={}",
            cfg.k_min, cfg.k_max
        )));
    }
    let ks: Vec<usize> = (cfg.k_min..=cfg.k_max).collect();
    let methods = cfg.methods.clone();

    type Level = (Method, usize, Vec<usize>);
    let per_method: Vec<Result<(Vec<Level>, Vec<Warning>)>> = methods
        .par_iter()
        .map(|&m| -> Result<(Vec<Level>, Vec<Warning>)> {
            match m {
                Method::KMeans => {
                    let levels = ks
                        .par_iter()
                        .map(|&k| kmeans(x, k, seed, &cfg.kmeans).map(|r| (m, k, r.labels)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((levels, Vec::new()))
                }
                Method::WardKnn | Method::WardSparse => {
                    let w = if m == Method::WardKnn { knn } else { sparse };
                    let (levels, warnings) = ward_constrained_levels(x, w, &ks)?;
                    Ok((
                        levels.into_iter().map(|(k, l)| (m, k, l)).collect(),
                        warnings,
                    ))
                }
            }
        })
        .collect();

    let mut warnings = Vec::new();
    let mut cells = Vec::new();
    let mut candidates = Vec::new();
    for r in per_method {
        let (levels, w) = r?;
        warnings.extend(w);
        for (m, k, labels) in levels {
            let ch = calinski_harabasz(x, &labels)?;
            cells.push(ScoreCell { method: m, k, ch });
            candidates.push((m, k, labels, ch));
        }
    }
    cells.sort_by(|a, b| a.method.cmp(&b.method).then(a.k.cmp(&b.k)));
    let best = candidates
        .into_iter()
        .max_by(|a, b| a.3.total_cmp(&b.3).then(b.1.cmp(&a.1)).then(b.0.cmp(&a.0)))
        .ok_or_else(|| Error::InvalidInput("no regionalisation methods configured".into()))?;
    Ok((
        RegionAssignment {
            labels: best.2,
            k: best.1,
            method: best.0,
            ch_score: best.3,
            seed,
            region_names: None,
        },
        cells,
        warnings,
    ))
}
