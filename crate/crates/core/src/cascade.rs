//! Truncated Ruelle probability cascades.
//!
//! The infinitary tree `N^0 ∪ N ∪ … ∪ N^r` is cut to `M` children per
//! vertex. Vertices at level `p` are addressed either by a [`VertexPath`]
//! (1-based child indices from the root) or by their flat 0-based index
//! `Σ_j (n_j - 1) M^{p-j}` among the `M^p` vertices of that level.
//!
//! Per non-leaf vertex the `M` largest points of a Poisson process with
//! mean measure `ζ_p x^{-1-ζ_p} dx` are generated as `Γ_n^{-1/ζ_p}`, with
//! `Γ_n` the arrival times of a unit-rate process. Leaf weights are the
//! normalized products of points along the path and are kept in log form.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::stats::{self, Estimate};

/// Largest number of leaves a cascade may have.
pub const DEFAULT_LEAF_CAP: usize = 1 << 22;

/// Default expected untracked leaf mass used when choosing `M` automatically.
pub const DEFAULT_TRUNCATION_TARGET: f64 = 0.02;

/// A vertex of the tree as its sequence of 1-based child indices. The empty
/// path is the root.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VertexPath(Vec<usize>);

impl VertexPath {
    pub fn root() -> Self {
        VertexPath(Vec::new())
    }

    /// Validates that all indices are positive.
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.contains(&0) {
            return Err(Error::param("indices", "child indices start at 1"));
        }
        Ok(VertexPath(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child(&self, n: usize) -> Self {
        assert!(n >= 1);
        let mut v = self.0.clone();
        v.push(n);
        VertexPath(v)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.0.is_empty() {
            None
        } else {
            Some(VertexPath(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    /// Ancestor at depth `p` (the vertex itself when `p == len`).
    pub fn ancestor(&self, p: usize) -> Self {
        VertexPath(self.0[..p].to_vec())
    }

    /// Flat 0-based index among the vertices of the same level.
    pub fn flat_index(&self, m: usize) -> usize {
        self.0.iter().fold(0, |acc, &n| acc * m + (n - 1))
    }

    pub fn from_flat(level: usize, mut index: usize, m: usize) -> Self {
        let mut v = vec![0; level];
        for slot in v.iter_mut().rev() {
            *slot = index % m + 1;
            index /= m;
        }
        VertexPath(v)
    }

    /// Base-`M` digit string of the flat index: zero-based digits, most
    /// significant first, separated by dots. The root encodes as `""`.
    pub fn to_key(&self) -> String {
        self.0
            .iter()
            .map(|n| (n - 1).to_string())
            .collect::<Vec<_>>()
            .join(".")
    }

    pub fn from_key(key: &str) -> Result<Self> {
        if key.is_empty() {
            return Ok(VertexPath::root());
        }
        key.split('.')
            .map(|d| {
                d.parse::<usize>()
                    .map(|x| x + 1)
                    .map_err(|_| Error::param("key", format!("bad digit `{d}` in `{key}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(VertexPath)
    }
}

impl fmt::Display for VertexPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "*");
        }
        write!(f, "(")?;
        for (i, n) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{n}")?;
        }
        write!(f, ")")
    }
}

/// Depth of the lowest common ancestor of two vertices.
pub fn wedge(a: &VertexPath, b: &VertexPath) -> usize {
    a.0.iter().zip(&b.0).take_while(|(x, y)| x == y).count()
}

/// Same as [`wedge`] for two flat indices of vertices at level `r`.
pub fn wedge_flat(a: usize, b: usize, r: usize, m: usize) -> usize {
    let (mut a, mut b) = (a, b);
    let mut differing = 0;
    for level in 0..r {
        if a != b {
            differing = level + 1;
        }
        a /= m;
        b /= m;
    }
    r - differing
}

/// Cascade parameters `0 < ζ_0 < … < ζ_{r-1} < 1`, with optional overlap
/// values `q_0 < … < q_r` used only for reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeParams {
    pub zetas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlaps: Option<Vec<f64>>,
}

impl CascadeParams {
    pub fn new(zetas: Vec<f64>) -> Result<Self> {
        let p = CascadeParams {
            zetas,
            overlaps: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_overlaps(mut self, overlaps: Vec<f64>) -> Result<Self> {
        self.overlaps = Some(overlaps);
        self.validate()?;
        Ok(self)
    }

    pub fn depth(&self) -> usize {
        self.zetas.len()
    }

    /// `ζ_p` for `p = 0..=r`, with `ζ_r = 1`.
    pub fn zeta(&self, p: usize) -> f64 {
        if p >= self.zetas.len() {
            1.0
        } else {
            self.zetas[p]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.zetas.is_empty() {
            return Err(Error::param("zetas", "depth r must be at least 1"));
        }
        let mut prev = 0.0;
        for &z in &self.zetas {
            if !(z > prev && z < 1.0) {
                return Err(Error::param(
                    "zetas",
                    format!("need 0 < ζ_0 < … < ζ_(r-1) < 1, got {:?}", self.zetas),
                ));
            }
            prev = z;
        }
        if let Some(q) = &self.overlaps {
            if q.len() != self.zetas.len() + 1 {
                return Err(Error::DimensionMismatch {
                    expected: self.zetas.len() + 1,
                    got: q.len(),
                });
            }
            let ok = q.windows(2).all(|w| w[0] < w[1]) && q[0] >= 0.0 && q[q.len() - 1] <= 1.0;
            if !ok {
                return Err(Error::param(
                    "overlaps",
                    format!("need 0 ≤ q_0 < … < q_r ≤ 1, got {q:?}"),
                ));
            }
        }
        Ok(())
    }
}

fn check_zeta(zeta: f64) -> Result<()> {
    if zeta > 0.0 && zeta < 1.0 {
        Ok(())
    } else {
        Err(Error::param("zeta", format!("must lie in (0,1), got {zeta}")))
    }
}

/// Points `u_n = Γ_n^{-1/ζ}` for given arrival times `Γ_1 < Γ_2 < …`.
pub fn points_from_arrivals(zeta: f64, arrivals: &[f64]) -> Result<Vec<f64>> {
    check_zeta(zeta)?;
    Ok(arrivals.iter().map(|g| g.powf(-1.0 / zeta)).collect())
}

/// Logs of the `m` largest points of the process with mean measure
/// `ζ x^{-1-ζ} dx`, in decreasing order.
pub fn sample_log_poisson_points<R: Rng + ?Sized>(
    zeta: f64,
    m: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_zeta(zeta)?;
    let mut gamma = 0.0;
    Ok((0..m)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            gamma += e;
            -gamma.ln() / zeta
        })
        .collect())
}

/// The `m` largest points `u_1 > … > u_m` of the process with mean measure
/// `ζ x^{-1-ζ} dx`.
pub fn sample_poisson_points<R: Rng + ?Sized>(zeta: f64, m: usize, rng: &mut R) -> Result<Vec<f64>> {
    Ok(sample_log_poisson_points(zeta, m, rng)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// A finitely truncated cascade. Weights are stored for the original
/// labels (`v`) together with the sorting bijection `π` producing `V`.
#[derive(Clone, Debug)]
pub struct TruncatedCascade {
    params: CascadeParams,
    m: usize,
    /// `log_points[p][j]`: log of the point attached to vertex `j` of level
    /// `p + 1`. Absent for cascades restored from a dump.
    log_points: Option<Vec<Vec<f64>>>,
    log_leaf: Vec<f64>,
    /// `cluster[p][j] = v` of vertex `j` at level `p` (original labels).
    cluster: Vec<Vec<f64>>,
    /// `sort_map[p][s]`: original index of the vertex with sorted index `s`.
    sort_map: Vec<Vec<usize>>,
    /// `sorted[p][s] = V` of sorted vertex `s` at level `p`.
    sorted: Vec<Vec<f64>>,
}

fn level_sizes(r: usize, m: usize, cap: usize) -> Result<Vec<usize>> {
    let leaves = (m as u128).checked_pow(r as u32).unwrap_or(u128::MAX);
    if leaves > cap as u128 {
        return Err(Error::TooManyLeaves { leaves, cap });
    }
    Ok((0..=r).map(|p| m.pow(p as u32)).collect())
}

/// Sums leaf weights up the tree: `cluster[p][j] = Σ_n cluster[p+1][j M + n]`.
pub(crate) fn cluster_sums(leaf: Vec<f64>, r: usize, m: usize) -> Vec<Vec<f64>> {
    let mut levels = vec![Vec::new(); r + 1];
    levels[r] = leaf;
    for p in (0..r).rev() {
        let below = &levels[p + 1];
        levels[p] = below.chunks(m).map(|c| c.iter().sum()).collect();
    }
    levels
}

/// Recursive sort of children by decreasing weight, ties broken by the
/// original child index. Returns `sort_map[p][sorted] = original`.
pub(crate) fn sort_tree(cluster: &[Vec<f64>], m: usize) -> Vec<Vec<usize>> {
    let r = cluster.len() - 1;
    let mut map = vec![vec![0usize]];
    let mut order: Vec<usize> = (0..m).collect();
    for p in 0..r {
        let parents = &map[p];
        let mut next = vec![0usize; parents.len() * m];
        for (s, &o) in parents.iter().enumerate() {
            let kids = &cluster[p + 1][o * m..(o + 1) * m];
            order.iter_mut().enumerate().for_each(|(i, x)| *x = i);
            order.sort_by(|&a, &b| kids[b].total_cmp(&kids[a]).then(a.cmp(&b)));
            for (k, &j) in order.iter().enumerate() {
                next[s * m + k] = o * m + j;
            }
        }
        map.push(next);
    }
    map
}

pub(crate) fn permute_levels(cluster: &[Vec<f64>], map: &[Vec<usize>]) -> Vec<Vec<f64>> {
    cluster
        .iter()
        .zip(map)
        .map(|(c, mp)| mp.iter().map(|&o| c[o]).collect())
        .collect()
}

impl TruncatedCascade {
    /// Builds a cascade with `m` children per vertex.
    pub fn build<R: Rng + ?Sized>(params: &CascadeParams, m: usize, rng: &mut R) -> Result<Self> {
        Self::build_with_cap(params, m, DEFAULT_LEAF_CAP, rng)
    }

    pub fn build_with_cap<R: Rng + ?Sized>(
        params: &CascadeParams,
        m: usize,
        leaf_cap: usize,
        rng: &mut R,
    ) -> Result<Self> {
        params.validate()?;
        if m == 0 {
            return Err(Error::param("m", "branching must be at least 1"));
        }
        let r = params.depth();
        let sizes = level_sizes(r, m, leaf_cap)?;
        let mut log_points = Vec::with_capacity(r);
        let mut log_w = vec![0.0];
        for p in 0..r {
            let mut pts = Vec::with_capacity(sizes[p + 1]);
            let mut next = Vec::with_capacity(sizes[p + 1]);
            for &base in &log_w {
                for lu in sample_log_poisson_points(params.zetas[p], m, rng)? {
                    pts.push(lu);
                    next.push(base + lu);
                }
            }
            log_points.push(pts);
            log_w = next;
        }
        let mut c = Self::from_log_weights(params.clone(), m, log_w)?;
        c.log_points = Some(log_points);
        Ok(c)
    }

    /// Builds the cascade structure from unnormalized leaf log-weights in
    /// original labels.
    pub fn from_log_weights(params: CascadeParams, m: usize, mut log_w: Vec<f64>) -> Result<Self> {
        params.validate()?;
        let r = params.depth();
        let expected = m.checked_pow(r as u32).unwrap_or(usize::MAX);
        if log_w.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: log_w.len(),
            });
        }
        let norm = stats::log_sum_exp(&log_w);
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "build_cascade" });
        }
        log_w.iter_mut().for_each(|x| *x -= norm);
        let leaf: Vec<f64> = log_w.iter().map(|x| x.exp()).collect();
        let cluster = cluster_sums(leaf, r, m);
        let sort_map = sort_tree(&cluster, m);
        let sorted = permute_levels(&cluster, &sort_map);
        Ok(TruncatedCascade {
            params,
            m,
            log_points: None,
            log_leaf: log_w,
            cluster,
            sort_map,
            sorted,
        })
    }

    pub fn params(&self) -> &CascadeParams {
        &self.params
    }

    pub fn depth(&self) -> usize {
        self.params.depth()
    }

    pub fn branching(&self) -> usize {
        self.m
    }

    pub fn n_leaves(&self) -> usize {
        self.log_leaf.len()
    }

    /// Points `u_{αn}` of vertex `alpha` (decreasing), if the cascade was
    /// built from sampled points.
    pub fn points(&self, alpha: &VertexPath) -> Option<Vec<f64>> {
        let p = alpha.len();
        let lp = self.log_points.as_ref()?;
        if p >= self.depth() {
            return None;
        }
        let j = alpha.flat_index(self.m);
        Some(lp[p][j * self.m..(j + 1) * self.m].iter().map(|x| x.exp()).collect())
    }

    /// Normalized leaf log-weights `log v_α`, original labels.
    pub fn log_leaf_weights(&self) -> &[f64] {
        &self.log_leaf
    }

    /// Leaf weights `v_α`, original labels.
    pub fn leaf_weights(&self) -> &[f64] {
        &self.cluster[self.depth()]
    }

    /// Leaf weights `V_α = v_{π(α)}`, sorted labels.
    pub fn sorted_leaf_weights(&self) -> &[f64] {
        &self.sorted[self.depth()]
    }

    /// Cluster weights `v` of all vertices of level `p`, original labels.
    pub fn cluster_weights(&self, p: usize) -> &[f64] {
        &self.cluster[p]
    }

    /// Cluster weights `V` of all vertices of level `p`, sorted labels.
    pub fn sorted_cluster_weights(&self, p: usize) -> &[f64] {
        &self.sorted[p]
    }

    pub fn weight(&self, alpha: &VertexPath) -> f64 {
        self.cluster[alpha.len()][alpha.flat_index(self.m)]
    }

    pub fn sorted_weight(&self, alpha: &VertexPath) -> f64 {
        self.sorted[alpha.len()][alpha.flat_index(self.m)]
    }

    /// Flat sorting map of level `p`: `sort_map(p)[s]` is the original
    /// index of sorted vertex `s`.
    pub fn sort_map(&self, p: usize) -> &[usize] {
        &self.sort_map[p]
    }

    /// The bijection `π` on paths.
    pub fn pi(&self, alpha: &VertexPath) -> VertexPath {
        let p = alpha.len();
        VertexPath::from_flat(p, self.sort_map[p][alpha.flat_index(self.m)], self.m)
    }

    /// Estimated leaf mass lost to truncation, extrapolated from the tail of
    /// each vertex's sorted children weights assuming the power-law decay
    /// `c_n ∝ n^{-1/ζ}` of the ranked points.
    pub fn untracked_mass(&self) -> f64 {
        let m = self.m;
        let r = self.depth();
        let mut lost = 0.0;
        for p in 0..r {
            let zeta = self.params.zetas[p];
            let factor = m as f64 * zeta / (1.0 - zeta);
            for (s, &total) in self.sorted[p].iter().enumerate() {
                if total <= 0.0 {
                    continue;
                }
                let smallest = self.sorted[p + 1][(s + 1) * m - 1];
                let tail = smallest * factor;
                lost += total * tail / (total + tail);
            }
        }
        lost.min(1.0)
    }

    /// Draws a leaf with probability `V_α` (`sorted = true`) or `v_α`.
    pub fn sample_leaf<R: Rng + ?Sized>(&self, sorted: bool, rng: &mut R) -> VertexPath {
        let levels = if sorted { &self.sorted } else { &self.cluster };
        let m = self.m;
        let mut idx = 0;
        let mut path = Vec::with_capacity(self.depth());
        for p in 0..self.depth() {
            let kids = &levels[p + 1][idx * m..(idx + 1) * m];
            let total: f64 = kids.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = m - 1;
            for (j, &w) in kids.iter().enumerate() {
                if u < w {
                    pick = j;
                    break;
                }
                u -= w;
            }
            path.push(pick + 1);
            idx = idx * m + pick;
        }
        VertexPath(path)
    }

    /// Log of the sorted leaf weights `V_α`.
    pub fn sorted_log_leaf_weights(&self) -> Vec<f64> {
        let r = self.depth();
        self.sort_map[r].iter().map(|&o| self.log_leaf[o]).collect()
    }

    /// The same cascade with the children of every vertex shuffled before
    /// sorting. The sorted weights are unchanged; only the original labels
    /// move.
    pub fn relabeled<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        let r = self.depth();
        let m = self.m;
        // perm[p][j]: new label of original vertex j at level p.
        let mut perm = vec![vec![0usize]];
        for p in 0..r {
            let mut next = vec![0usize; m.pow(p as u32 + 1)];
            for (j, &pj) in perm[p].iter().enumerate() {
                let mut kids: Vec<usize> = (0..m).collect();
                kids.shuffle(rng);
                for (n, &k) in kids.iter().enumerate() {
                    next[j * m + n] = pj * m + k;
                }
            }
            perm.push(next);
        }
        let mut log_w = vec![0.0; self.log_leaf.len()];
        for (j, &lw) in self.log_leaf.iter().enumerate() {
            log_w[perm[r][j]] = lw;
        }
        Self::from_log_weights(self.params.clone(), m, log_w)
    }

    pub fn to_dump(&self) -> CascadeDump {
        let r = self.depth();
        let m = self.m;
        let log_weights = self
            .log_leaf
            .iter()
            .enumerate()
            .map(|(j, &w)| (VertexPath::from_flat(r, j, m).to_key(), w))
            .collect();
        let sort_map = self.sort_map[r]
            .iter()
            .enumerate()
            .map(|(s, &o)| {
                (
                    VertexPath::from_flat(r, s, m).to_key(),
                    VertexPath::from_flat(r, o, m).to_key(),
                )
            })
            .collect();
        CascadeDump {
            params: self.params.clone(),
            m,
            log_weights,
            sort_map,
        }
    }
}

/// JSON record of a cascade. Keys are base-`M` digit strings of leaf
/// indices (see [`VertexPath::to_key`]); `sort_map` maps sorted leaves to
/// original leaves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeDump {
    pub params: CascadeParams,
    #[serde(rename = "M")]
    pub m: usize,
    pub log_weights: BTreeMap<String, f64>,
    pub sort_map: BTreeMap<String, String>,
}

impl CascadeDump {
    /// Restores the cascade. The stored sort map is checked against the one
    /// recomputed from the weights.
    pub fn into_cascade(self) -> Result<TruncatedCascade> {
        let r = self.params.depth();
        let n = self.m.checked_pow(r as u32).unwrap_or(usize::MAX);
        let mut log_w = vec![f64::NAN; n];
        for (k, w) in &self.log_weights {
            let path = VertexPath::from_key(k)?;
            if path.len() != r || path.indices().iter().any(|&i| i > self.m) {
                return Err(Error::param("log_weights", format!("bad leaf key `{k}`")));
            }
            log_w[path.flat_index(self.m)] = *w;
        }
        if log_w.iter().any(|w| w.is_nan()) {
            return Err(Error::param("log_weights", "missing leaves"));
        }
        let c = TruncatedCascade::from_log_weights(self.params, self.m, log_w)?;
        for (s, o) in &self.sort_map {
            let s = VertexPath::from_key(s)?;
            let o = VertexPath::from_key(o)?;
            if s.len() != r || c.pi(&s) != o {
                return Err(Error::param("sort_map", "inconsistent with weights"));
            }
        }
        Ok(c)
    }
}

/// Analytic approximation of the expected untracked mass for branching `m`,
/// using `Γ_n ≈ n` in the point sequence of every level.
pub fn analytic_truncation_budget(zetas: &[f64], m: usize) -> f64 {
    let kept: f64 = zetas
        .iter()
        .map(|&z| {
            let a = 1.0 / z;
            let head: f64 = (1..=m).map(|n| (n as f64).powf(-a)).sum();
            let tail = z / (1.0 - z) * (m as f64).powf(1.0 - a);
            1.0 - tail / (head + tail)
        })
        .product();
    1.0 - kept
}

/// Smallest branching whose analytic truncation budget is below `target`,
/// limited so the tree has at most `leaf_cap` leaves.
pub fn default_branching(zetas: &[f64], target: f64, leaf_cap: usize) -> usize {
    let r = zetas.len().max(1) as u32;
    let max_m = (leaf_cap as f64).powf(1.0 / r as f64).floor().max(2.0) as usize;
    // Running head sums keep the scan linear in `max_m`.
    let mut heads: Vec<f64> = zetas.iter().map(|_| 1.0).collect();
    for m in 2..=max_m {
        let mut kept = 1.0;
        for (head, &z) in heads.iter_mut().zip(zetas) {
            let a = 1.0 / z;
            *head += (m as f64).powf(-a);
            let tail = z / (1.0 - z) * (m as f64).powf(1.0 - a);
            kept *= 1.0 - tail / (*head + tail);
        }
        if 1.0 - kept <= target {
            return m;
        }
    }
    max_m
}

/// A lazily generated ensemble of independent cascades; replicate `i` uses
/// random stream `i`, so results do not depend on the thread count.
#[derive(Clone, Debug)]
pub struct CascadeEnsemble {
    pub params: CascadeParams,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
}

impl CascadeEnsemble {
    pub fn new(params: CascadeParams, m: usize, n: usize, seed: u64) -> Self {
        CascadeEnsemble { params, m, n, seed }
    }

    pub fn build(&self, i: usize) -> Result<TruncatedCascade> {
        let mut rng = rng::stream(self.seed, tags::CASCADE, i as u64);
        TruncatedCascade::build(&self.params, self.m, &mut rng)
    }

    /// Maps every replicate in parallel, returning results in index order.
    pub fn par_map<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, &TruncatedCascade) -> T + Sync,
    {
        (0..self.n)
            .into_par_iter()
            .map(|i| self.build(i).map(|c| f(i, &c)))
            .collect()
    }
}

/// `Σ_{α∧β ≤ p} V_α V_β` for one cascade.
pub fn pair_mass_up_to(c: &TruncatedCascade, p: usize) -> f64 {
    if p >= c.depth() {
        return 1.0;
    }
    1.0 - c.sorted_cluster_weights(p + 1).iter().map(|v| v * v).sum::<f64>()
}

/// Result of an overlap-law check at one level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverlapLawCheck {
    pub level: usize,
    pub estimate: Estimate,
    pub target: f64,
    pub truncation_budget: f64,
}

impl OverlapLawCheck {
    /// `|estimate - ζ_p| ≤ 3 SE + budget`.
    pub fn passes(&self, n_se: f64) -> bool {
        (self.estimate.value - self.target).abs()
            <= n_se * self.estimate.std_error + self.truncation_budget
    }
}

/// Estimates `E Σ_{α∧β ≤ p} V_α V_β` over an ensemble; the target is `ζ_p`.
/// The truncation budget is twice the mean untracked mass, which bounds the
/// shift of `Σ V²` caused by renormalizing the truncated weights.
pub fn overlap_cdf_check(ensemble: &CascadeEnsemble, p: usize) -> Result<OverlapLawCheck> {
    let rows = ensemble.par_map(|_, c| (pair_mass_up_to(c, p), c.untracked_mass()))?;
    let (vals, lost): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    Ok(OverlapLawCheck {
        level: p,
        estimate: Estimate::from_samples(&vals),
        target: ensemble.params.zeta(p),
        truncation_budget: if p >= ensemble.params.depth() {
            0.0
        } else {
            2.0 * stats::mean(&lost)
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn wedge_examples() {
        let p = |v: &[usize]| VertexPath::new(v.to_vec()).unwrap();
        assert_eq!(wedge(&p(&[1, 2]), &p(&[1, 3])), 1);
        assert_eq!(wedge(&p(&[2, 2]), &p(&[2, 2])), 2);
        assert_eq!(wedge(&p(&[1, 1]), &p(&[2, 1])), 0);
    }

    #[test]
    fn wedge_flat_agrees_with_paths() {
        let (r, m) = (3, 3);
        for a in 0..27 {
            for b in 0..27 {
                let pa = VertexPath::from_flat(r, a, m);
                let pb = VertexPath::from_flat(r, b, m);
                assert_eq!(wedge_flat(a, b, r, m), wedge(&pa, &pb));
            }
        }
    }

    #[test]
    fn path_keys_round_trip() {
        let p = VertexPath::new(vec![3, 12, 1]).unwrap();
        assert_eq!(p.to_key(), "2.11.0");
        assert_eq!(VertexPath::from_key(&p.to_key()).unwrap(), p);
        assert_eq!(VertexPath::from_flat(3, p.flat_index(20), 20), p);
        assert!(VertexPath::new(vec![0]).is_err());
    }

    #[test]
    fn forced_arrival_gives_unit_point() {
        let u = points_from_arrivals(0.5, &[1.0, 2.0]).unwrap();
        assert_eq!(u[0], 1.0);
        assert_eq!(u[1], 0.25);
    }

    #[test]
    fn rejects_zeta_outside_unit_interval() {
        let mut rng = stream(1, 0, 0);
        assert!(sample_poisson_points(0.0, 5, &mut rng).is_err());
        assert!(sample_poisson_points(1.0, 5, &mut rng).is_err());
        assert!(CascadeParams::new(vec![0.5, 0.4]).is_err());
        assert!(CascadeParams::new(vec![]).is_err());
        assert!(CascadeParams::new(vec![0.2, 0.6])
            .unwrap()
            .with_overlaps(vec![0.0, 0.5, 0.4])
            .is_err());
    }

    #[test]
    fn points_strictly_decrease() {
        let mut rng = stream(2, 0, 0);
        for zeta in [0.1, 0.5, 0.9] {
            let u = sample_poisson_points(zeta, 200, &mut rng).unwrap();
            assert!(u.windows(2).all(|w| w[0] > w[1]));
            assert!(u.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn single_leaf_cascade() {
        let params = CascadeParams::new(vec![0.5]).unwrap();
        let c = TruncatedCascade::build(&params, 1, &mut stream(3, 0, 0)).unwrap();
        assert_eq!(c.leaf_weights(), &[1.0]);
        assert_eq!(c.sorted_leaf_weights(), &[1.0]);
        let mut rng = stream(3, 1, 0);
        for _ in 0..10 {
            assert_eq!(c.sample_leaf(true, &mut rng), VertexPath::new(vec![1]).unwrap());
        }
    }

    #[test]
    fn normalization_and_consistency() {
        let params = CascadeParams::new(vec![0.3, 0.6]).unwrap();
        let c = TruncatedCascade::build(&params, 3, &mut stream(4, 0, 0)).unwrap();
        let total: f64 = c.leaf_weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (j, &v) in c.cluster_weights(1).iter().enumerate() {
            let kids: f64 = c.leaf_weights()[3 * j..3 * j + 3].iter().sum();
            assert!((v - kids).abs() < 1e-12);
        }
    }

    #[test]
    fn sorting_orders_children_and_preserves_wedge() {
        let params = CascadeParams::new(vec![0.2, 0.5, 0.8]).unwrap();
        let m = 4;
        let c = TruncatedCascade::build(&params, m, &mut stream(5, 0, 0)).unwrap();
        for p in 0..3 {
            for kids in c.sorted_cluster_weights(p + 1).chunks(m) {
                assert!(kids.windows(2).all(|w| w[0] >= w[1]));
            }
        }
        for a in 0..64 {
            for b in 0..64 {
                let pa = VertexPath::from_flat(3, a, m);
                let pb = VertexPath::from_flat(3, b, m);
                assert_eq!(wedge(&c.pi(&pa), &c.pi(&pb)), wedge(&pa, &pb));
            }
        }
        // V_α = v_{π(α)} on every level.
        for p in 0..=3 {
            for s in 0..m.pow(p as u32) {
                let path = VertexPath::from_flat(p, s, m);
                assert_eq!(c.sorted_weight(&path), c.weight(&c.pi(&path)));
            }
        }
    }

    #[test]
    fn ties_break_by_original_index() {
        let params = CascadeParams::new(vec![0.5]).unwrap();
        let c = TruncatedCascade::from_log_weights(params, 3, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(c.sort_map(1), &[1, 0, 2]);
    }

    #[test]
    fn dump_round_trip() {
        let params = CascadeParams::new(vec![0.4, 0.7]).unwrap();
        let c = TruncatedCascade::build(&params, 3, &mut stream(6, 0, 0)).unwrap();
        let json = serde_json::to_string(&c.to_dump()).unwrap();
        let back: CascadeDump = serde_json::from_str(&json).unwrap();
        let c2 = back.into_cascade().unwrap();
        for (a, b) in c.sorted_leaf_weights().iter().zip(c2.sorted_leaf_weights()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(c.sort_map(2), c2.sort_map(2));
    }

    #[test]
    fn leaf_cap_is_enforced() {
        let params = CascadeParams::new(vec![0.2, 0.4, 0.6]).unwrap();
        let err = TruncatedCascade::build_with_cap(&params, 100, 1000, &mut stream(7, 0, 0));
        assert!(matches!(err, Err(Error::TooManyLeaves { .. })));
    }

    #[test]
    fn default_branching_meets_target() {
        let m = default_branching(&[0.3], 0.01, DEFAULT_LEAF_CAP);
        assert!(analytic_truncation_budget(&[0.3], m) <= 0.01);
        assert!(analytic_truncation_budget(&[0.3], m - 1) > 0.01 || m == 2);
        // Larger ζ has a heavier tail and needs more children.
        assert!(default_branching(&[0.8], 0.01, DEFAULT_LEAF_CAP) > m);
    }

    #[test]
    fn full_level_pair_mass_is_one() {
        let ens = CascadeEnsemble::new(CascadeParams::new(vec![0.3, 0.6]).unwrap(), 4, 10, 1);
        let chk = overlap_cdf_check(&ens, 2).unwrap();
        assert_eq!(chk.estimate.value, 1.0);
        assert_eq!(chk.estimate.std_error, 0.0);
        assert_eq!(chk.target, 1.0);
    }
}
