//! Exact ground truth for small instances.
//!
//! Exhaustive enumeration records, for every value of a statistic, the number
//! of configurations with `k` occupied sites. Probabilities are then the
//! polynomials `sum_k count_k p^k (1-p)^(N-k)`, evaluated either in `f64` or
//! exactly over the rationals. Identities that hold for all `p` can be checked
//! on the integer counts directly.

use std::collections::BTreeMap;
use std::io::Write;

use num_bigint::BigInt;
use num_rational::BigRational;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{Boundary, BoxGeometry, SiteIndex};

/// Largest box that may be enumerated.
pub const ENUMERATION_CAP: usize = 25;

/// Probability law on integer values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactDistribution {
    pub support: Vec<i64>,
    pub prob: Vec<f64>,
}

impl ExactDistribution {
    pub fn total(&self) -> f64 {
        neumaier_sum(self.prob.iter().copied())
    }

    /// `P(value)`; 0 off the support.
    pub fn pmf(&self, value: i64) -> f64 {
        self.support
            .binary_search(&value)
            .map(|i| self.prob[i])
            .unwrap_or(0.0)
    }

    /// `P(V <= value)`.
    pub fn cdf(&self, value: i64) -> f64 {
        neumaier_sum(
            self.support
                .iter()
                .zip(&self.prob)
                .take_while(|(&v, _)| v <= value)
                .map(|(_, &p)| p),
        )
    }

    /// Smallest value with `P(V <= value) >= 1/2`.
    pub fn median(&self) -> i64 {
        let mut acc = 0.0;
        for (&v, &p) in self.support.iter().zip(&self.prob) {
            acc += p;
            if acc >= 0.5 {
                return v;
            }
        }
        *self.support.last().unwrap_or(&0)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "value,probability")?;
        for (v, p) in self.support.iter().zip(&self.prob) {
            writeln!(out, "{v},{p:.17e}")?;
        }
        Ok(())
    }
}

pub(crate) fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// `P(|C_le(0)| >= x)` for one-dimensional percolation: the origin starts a
/// run of at least `x` occupied sites and site `-1` is vacant.
pub fn run_tail_1d(p: f64, x: u64) -> f64 {
    if x == 0 {
        1.0
    } else {
        (1.0 - p) * p.powi(x as i32)
    }
}

/// The same tail conditioned on site `-1` being vacant: `p^x`.
pub fn run_tail_1d_conditional(p: f64, x: u64) -> f64 {
    p.powi(x as i32)
}

/// `P(longest run of successes among N Bernoulli(p) trials <= m)` by dynamic
/// programming over the length of the current run.
pub fn longest_run_cdf(len: u64, p: f64, m: u64) -> f64 {
    if m >= len {
        return 1.0;
    }
    let m = m as usize;
    // state[j] = P(no run above m so far, current run has length j)
    let mut state = vec![0.0f64; m + 1];
    let mut next = vec![0.0f64; m + 1];
    state[0] = 1.0;
    for _ in 0..len {
        let alive = neumaier_sum(state.iter().copied());
        next[0] = (1.0 - p) * alive;
        for j in 0..m {
            next[j + 1] = p * state[j];
        }
        std::mem::swap(&mut state, &mut next);
    }
    neumaier_sum(state.iter().copied())
}

/// Law of the longest run among `len` trials.
pub fn longest_run_law(len: u64, p: f64) -> ExactDistribution {
    let cdf: Vec<f64> = (0..=len).map(|m| longest_run_cdf(len, p, m)).collect();
    let mut support = Vec::new();
    let mut prob = Vec::new();
    let mut prev = 0.0;
    for (m, &c) in cdf.iter().enumerate() {
        support.push(m as i64);
        prob.push((c - prev).max(0.0));
        prev = c;
    }
    ExactDistribution { support, prob }
}

/// A configuration of a small graph encoded as a bit mask (bit `i` = site `i`).
#[derive(Debug, Clone, Copy)]
pub struct MaskConfig<'a> {
    pub mask: u32,
    graph: &'a SmallGraph,
}

impl MaskConfig<'_> {
    pub fn occupied_count(&self) -> u32 {
        self.mask.count_ones()
    }

    pub fn is_occupied(&self, i: usize) -> bool {
        self.mask >> i & 1 == 1
    }

    /// Bit mask of the cluster containing site `i` (0 if vacant).
    pub fn cluster_of(&self, i: usize) -> u32 {
        if !self.is_occupied(i) {
            return 0;
        }
        self.graph.flood(1 << i, self.mask)
    }

    pub fn cluster_size(&self, i: usize) -> u32 {
        self.cluster_of(i).count_ones()
    }

    /// `|C_le(i)|`: the cluster size if `i` is its lowest (lexicographically
    /// smallest) site.
    pub fn le_size(&self, i: usize) -> u32 {
        let c = self.cluster_of(i);
        if c != 0 && c.trailing_zeros() as usize == i {
            c.count_ones()
        } else {
            0
        }
    }

    /// Masks of all clusters, in left-endpoint order.
    pub fn clusters(&self) -> impl Iterator<Item = u32> + '_ {
        let mut rest = self.mask;
        std::iter::from_fn(move || {
            if rest == 0 {
                return None;
            }
            let c = self.graph.flood(rest & rest.wrapping_neg(), self.mask);
            rest &= !c;
            Some(c)
        })
    }

    pub fn max_cluster(&self) -> u32 {
        self.clusters().map(u32::count_ones).max().unwrap_or(0)
    }
}

/// Neighbor masks of a graph on at most 25 vertices.
#[derive(Debug, Clone)]
pub struct SmallGraph {
    neighbors: Vec<u32>,
}

impl SmallGraph {
    pub fn from_geometry(g: &BoxGeometry) -> Result<Self> {
        let n = g.site_count();
        if n > ENUMERATION_CAP {
            return Err(Error::EnumerationCap {
                sites: n,
                cap: ENUMERATION_CAP,
            });
        }
        let neighbors = (0..n)
            .map(|i| {
                let mut m = 0u32;
                g.for_each_neighbor(i, |j| {
                    if j != i {
                        m |= 1 << j;
                    }
                });
                m
            })
            .collect();
        Ok(SmallGraph { neighbors })
    }

    /// `L^d` torus, sites in row-major order.
    fn torus(side: usize, dim: usize) -> Result<Self> {
        let n = side.checked_pow(dim as u32).unwrap_or(usize::MAX);
        if n > ENUMERATION_CAP {
            return Err(Error::EnumerationCap {
                sites: n,
                cap: ENUMERATION_CAP,
            });
        }
        let neighbors = (0..n)
            .map(|i| {
                let mut m = 0u32;
                for (_, j) in torus_steps(side, dim, i) {
                    if j != i {
                        m |= 1 << j;
                    }
                }
                m
            })
            .collect();
        Ok(SmallGraph { neighbors })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    #[inline]
    fn flood(&self, seed: u32, mask: u32) -> u32 {
        let mut cluster = seed;
        let mut frontier = seed;
        while frontier != 0 {
            let mut grow = 0u32;
            let mut f = frontier;
            while f != 0 {
                let j = f.trailing_zeros() as usize;
                f &= f - 1;
                grow |= self.neighbors[j];
            }
            frontier = grow & mask & !cluster;
            cluster |= frontier;
        }
        cluster
    }

    fn config(&self, mask: u32) -> MaskConfig<'_> {
        MaskConfig { mask, graph: self }
    }
}

/// `(axis step, neighbor index)` pairs on the `L^d` torus; step is `±(axis+1)`.
fn torus_steps(side: usize, dim: usize, i: usize) -> Vec<(i64, usize)> {
    let mut out = Vec::with_capacity(2 * dim);
    let mut stride = 1usize;
    let mut strides = vec![0usize; dim];
    for k in (0..dim).rev() {
        strides[k] = stride;
        stride *= side;
    }
    for (k, &s) in strides.iter().enumerate() {
        let off = (i / s) % side;
        let up = if off + 1 == side { i - off * s } else { i + s };
        let down = if off == 0 { i + (side - 1) * s } else { i - s };
        out.push((k as i64 + 1, up));
        out.push((-(k as i64 + 1), down));
    }
    out
}

/// Per-value configuration counts by number of occupied sites.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnumeratedLaw {
    sites: usize,
    counts: BTreeMap<i64, Vec<u64>>,
}

impl EnumeratedLaw {
    pub fn sites(&self) -> usize {
        self.sites
    }

    /// Count polynomial of `value`: entry `k` is the number of configurations
    /// with `k` occupied sites on which the statistic equals `value`.
    pub fn counts(&self, value: i64) -> Option<&[u64]> {
        self.counts.get(&value).map(Vec::as_slice)
    }

    pub fn values(&self) -> impl Iterator<Item = i64> + '_ {
        self.counts.keys().copied()
    }

    pub fn probability(&self, value: i64, p: f64) -> f64 {
        self.counts(value)
            .map_or(0.0, |c| eval_counts(c, self.sites, p))
    }

    /// Exact probability of `value` at the rational occupation probability `p`.
    pub fn probability_exact(&self, value: i64, p: &BigRational) -> BigRational {
        self.counts(value).map_or_else(zero, |c| eval_counts_exact(c, self.sites, p))
    }

    pub fn distribution(&self, p: f64) -> ExactDistribution {
        let (support, prob) = self
            .counts
            .iter()
            .map(|(&v, c)| (v, eval_counts(c, self.sites, p)))
            .unzip();
        ExactDistribution { support, prob }
    }
}

fn zero() -> BigRational {
    BigRational::from_integer(BigInt::from(0))
}

fn eval_counts(counts: &[u64], sites: usize, p: f64) -> f64 {
    neumaier_sum(counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(k, &c)| {
        c as f64 * p.powi(k as i32) * (1.0 - p).powi((sites - k) as i32)
    }))
}

fn eval_counts_exact(counts: &[u64], sites: usize, p: &BigRational) -> BigRational {
    let one = BigRational::from_integer(BigInt::from(1));
    let q = &one - p;
    let mut total = zero();
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let term = BigRational::from_integer(BigInt::from(c))
            * num_traits_pow(p, k)
            * num_traits_pow(&q, sites - k);
        total += term;
    }
    total
}

fn num_traits_pow(x: &BigRational, e: usize) -> BigRational {
    let mut acc = BigRational::from_integer(BigInt::from(1));
    for _ in 0..e {
        acc *= x;
    }
    acc
}

/// Exact rational value of an `f64` probability.
pub fn rational(p: f64) -> BigRational {
    BigRational::from_float(p).expect("finite probability")
}

/// Enumerates all `2^N` configurations of `g` and tabulates `statistic`.
pub fn enumerate_counts<F>(g: &BoxGeometry, statistic: F) -> Result<EnumeratedLaw>
where
    F: Fn(&MaskConfig<'_>) -> i64 + Sync,
{
    let graph = SmallGraph::from_geometry(g)?;
    Ok(enumerate_graph(&graph, statistic))
}

fn enumerate_graph<F>(graph: &SmallGraph, statistic: F) -> EnumeratedLaw
where
    F: Fn(&MaskConfig<'_>) -> i64 + Sync,
{
    let sites = graph.len();
    let total: u64 = 1u64 << sites;
    let chunk: u64 = 1 << 14;
    let chunks = total.div_ceil(chunk);
    let counts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut local: BTreeMap<i64, Vec<u64>> = BTreeMap::new();
            for mask in c * chunk..((c + 1) * chunk).min(total) {
                let cfg = graph.config(mask as u32);
                let v = statistic(&cfg);
                local.entry(v).or_insert_with(|| vec![0; sites + 1])[cfg.occupied_count() as usize] += 1;
            }
            local
        })
        .reduce(BTreeMap::new, merge_counts);
    EnumeratedLaw { sites, counts }
}

fn merge_counts(
    mut a: BTreeMap<i64, Vec<u64>>,
    b: BTreeMap<i64, Vec<u64>>,
) -> BTreeMap<i64, Vec<u64>> {
    for (v, cb) in b {
        match a.get_mut(&v) {
            Some(ca) => ca.iter_mut().zip(&cb).for_each(|(x, y)| *x += y),
            None => {
                a.insert(v, cb);
            }
        }
    }
    a
}

/// Count polynomial of a single event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventCounts {
    sites: usize,
    counts: Vec<u64>,
}

impl EventCounts {
    /// Entry `k` is the number of configurations with `k` occupied sites on
    /// which the event holds.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn probability(&self, p: f64) -> f64 {
        eval_counts(&self.counts, self.sites, p)
    }

    pub fn probability_exact(&self, p: &BigRational) -> BigRational {
        eval_counts_exact(&self.counts, self.sites, p)
    }
}

/// One pass over all configurations of `g`, tabulating `events` indicator
/// events at once. `mark(cfg, hit)` calls `hit(j)` for each event `j` that
/// holds on `cfg`.
pub fn enumerate_events<F>(g: &BoxGeometry, events: usize, mark: F) -> Result<Vec<EventCounts>>
where
    F: Fn(&MaskConfig<'_>, &mut dyn FnMut(usize)) + Sync,
{
    let graph = SmallGraph::from_geometry(g)?;
    let sites = graph.len();
    let total: u64 = 1u64 << sites;
    let chunk: u64 = 1 << 14;
    let table = (0..total.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut local = vec![vec![0u64; sites + 1]; events];
            for mask in c * chunk..((c + 1) * chunk).min(total) {
                let cfg = graph.config(mask as u32);
                let k = cfg.occupied_count() as usize;
                mark(&cfg, &mut |j| local[j][k] += 1);
            }
            local
        })
        .reduce(
            || vec![vec![0u64; sites + 1]; events],
            |mut a, b| {
                for (ra, rb) in a.iter_mut().zip(&b) {
                    ra.iter_mut().zip(rb).for_each(|(x, y)| *x += y);
                }
                a
            },
        );
    Ok(table
        .into_iter()
        .map(|counts| EventCounts { sites, counts })
        .collect())
}

/// Exact law of `statistic` at occupation probability `p`.
pub fn enumerate_box<F>(g: &BoxGeometry, p: f64, statistic: F) -> Result<ExactDistribution>
where
    F: Fn(&MaskConfig<'_>) -> i64 + Sync,
{
    Ok(enumerate_counts(g, statistic)?.distribution(p))
}

/// Statistic: `M_n`, the largest cluster.
pub fn stat_max_cluster(c: &MaskConfig<'_>) -> i64 {
    c.max_cluster() as i64
}

/// Statistic: number of occupied sites.
pub fn stat_occupied(c: &MaskConfig<'_>) -> i64 {
    c.occupied_count() as i64
}

/// Exact laws of `|C(0)|` and `|C_le(0)|` on the `L^d` torus, restricted to
/// sizes `1..=kmax < L` so that counted clusters never wrap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TorusClusterLaw {
    pub side: usize,
    pub dim: usize,
    pub kmax: usize,
    /// `cluster_counts[k-1]`: count polynomial of `{|C(0)| = k}`.
    pub cluster_counts: Vec<Vec<u64>>,
    /// `le_counts[k-1]`: count polynomial of `{|C_le(0)| = k}`.
    pub le_counts: Vec<Vec<u64>>,
}

impl TorusClusterLaw {
    fn sites(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    pub fn p_cluster(&self, k: usize, p: f64) -> f64 {
        eval_counts(&self.cluster_counts[k - 1], self.sites(), p)
    }

    pub fn p_le(&self, k: usize, p: f64) -> f64 {
        eval_counts(&self.le_counts[k - 1], self.sites(), p)
    }

    pub fn p_cluster_exact(&self, k: usize, p: &BigRational) -> BigRational {
        eval_counts_exact(&self.cluster_counts[k - 1], self.sites(), p)
    }

    pub fn p_le_exact(&self, k: usize, p: &BigRational) -> BigRational {
        eval_counts_exact(&self.le_counts[k - 1], self.sites(), p)
    }

    /// Whether `count(|C(0)| = k) = k * count(|C_le(0)| = k)` holds
    /// coefficientwise, i.e. for every `p`.
    pub fn identity_holds(&self, k: usize) -> bool {
        self.cluster_counts[k - 1]
            .iter()
            .zip(&self.le_counts[k - 1])
            .all(|(&c, &l)| c == k as u64 * l)
    }
}

/// Enumerates the `L^d` torus and tabulates the origin's cluster laws.
pub fn exact_cluster_law_torus(side: usize, dim: usize, kmax: usize) -> Result<TorusClusterLaw> {
    if dim == 0 || side < 2 {
        return Err(Error::param("side", "torus needs dim >= 1 and side >= 2"));
    }
    if kmax == 0 || kmax >= side {
        return Err(Error::param(
            "kmax",
            format!("kmax = {kmax} must satisfy 1 <= kmax < L = {side}"),
        ));
    }
    let graph = SmallGraph::torus(side, dim)?;
    let sites = graph.len();
    let steps: Vec<Vec<(i64, usize)>> = (0..sites).map(|i| torus_steps(side, dim, i)).collect();

    // Value encodes (k, is_le) as 2k + le for k <= kmax, -1 otherwise.
    let law = enumerate_graph(&graph, |cfg| {
        let c = cfg.cluster_of(0);
        let k = c.count_ones() as usize;
        if k == 0 || k > kmax {
            return -1;
        }
        let le = origin_is_unwrapped_minimum(c, dim, &steps);
        2 * k as i64 + le as i64
    });
    let mut cluster_counts = vec![vec![0u64; sites + 1]; kmax];
    let mut le_counts = vec![vec![0u64; sites + 1]; kmax];
    for v in law.values() {
        if v < 0 {
            continue;
        }
        let k = (v / 2) as usize;
        let counts = law.counts(v).unwrap();
        cluster_counts[k - 1].iter_mut().zip(counts).for_each(|(a, b)| *a += b);
        if v % 2 == 1 {
            le_counts[k - 1].iter_mut().zip(counts).for_each(|(a, b)| *a += b);
        }
    }
    Ok(TorusClusterLaw {
        side,
        dim,
        kmax,
        cluster_counts,
        le_counts,
    })
}

/// Unwraps a non-wrapping torus cluster around the origin (site 0) and tests
/// whether the origin is its lexicographic minimum.
fn origin_is_unwrapped_minimum(cluster: u32, dim: usize, steps: &[Vec<(i64, usize)>]) -> bool {
    let mut coords: Vec<Option<Vec<i64>>> = vec![None; steps.len()];
    coords[0] = Some(vec![0; dim]);
    let mut stack = vec![0usize];
    let origin = vec![0i64; dim];
    while let Some(i) = stack.pop() {
        let here = coords[i].clone().unwrap();
        if here < origin {
            return false;
        }
        for &(step, j) in &steps[i] {
            if cluster >> j & 1 == 1 && coords[j].is_none() {
                let mut c = here.clone();
                let axis = (step.unsigned_abs() - 1) as usize;
                c[axis] += step.signum();
                coords[j] = Some(c);
                stack.push(j);
            }
        }
    }
    true
}

/// Both sides of the cluster-repulsion inequality on a finite box.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTail {
    /// `P(|C_le(0)| >= n, |C_le(x)| >= n)`.
    pub joint: f64,
    /// `P(|C_le(0)| >= n) * P(|C(0)| >= n)`.
    pub bound: f64,
    /// `P(|C_le(0)| >= n) * P(|C(x)| >= n)`.
    pub bound_at_x: f64,
    /// `joint <= bound` evaluated in exact rational arithmetic.
    pub holds_exactly: bool,
    /// `joint <= bound_at_x` evaluated in exact rational arithmetic.
    pub holds_at_x_exactly: bool,
}

/// Exact joint tail of two left-endpoint clusters at `0` and `x` and its
/// product bound on the box `g` (zero boundary).
pub fn exact_pair_tail(g: &BoxGeometry, p: f64, n: usize, x: &SiteIndex) -> Result<PairTail> {
    let graph = SmallGraph::from_geometry(g)?;
    let o = g.origin_index();
    let xi = g
        .index_of(x)
        .ok_or_else(|| Error::param("x", format!("{x} lies outside the box")))?;
    if xi == o {
        return Err(Error::param("x", "x must differ from the origin"));
    }
    let n32 = n as u32;
    // Bits: 1 joint, 2 le(0) >= n, 4 |C(0)| >= n, 8 |C(x)| >= n.
    let law = enumerate_graph(&graph, |cfg| {
        let le0 = cfg.le_size(o) >= n32;
        let lex = cfg.le_size(xi) >= n32;
        let c0 = cfg.cluster_size(o) >= n32;
        let cx = cfg.cluster_size(xi) >= n32;
        (le0 && lex) as i64 | (le0 as i64) << 1 | (c0 as i64) << 2 | (cx as i64) << 3
    });
    let marginal = |bit: i64| -> (f64, BigRational) {
        let pr = rational(p);
        let mut f = 0.0;
        let mut e = zero();
        for v in law.values().filter(|v| v & bit != 0) {
            f += law.probability(v, p);
            e += law.probability_exact(v, &pr);
        }
        (f, e)
    };
    let (joint, joint_e) = marginal(1);
    let (le0, le0_e) = marginal(2);
    let (c0, c0_e) = marginal(4);
    let (cx, cx_e) = marginal(8);
    Ok(PairTail {
        joint,
        bound: le0 * c0,
        bound_at_x: le0 * cx,
        holds_exactly: joint_e <= &le0_e * &c0_e,
        holds_at_x_exactly: joint_e <= le0_e * cx_e,
    })
}

/// Ratios `P(X >= k+1) / P(X >= k)` for `X = |C_le(0)|` on the box, for
/// `k = 0..=kmax`, stopping where the denominator vanishes.
pub fn exact_ratio_sequence(g: &BoxGeometry, p: f64, kmax: usize) -> Result<Vec<f64>> {
    exact_ratio_sequence_at(g, p, kmax, &SiteIndex::origin(g.dim()))
}

/// [`exact_ratio_sequence`] with `X = |C_le(anchor)|`.
pub fn exact_ratio_sequence_at(
    g: &BoxGeometry,
    p: f64,
    kmax: usize,
    anchor: &SiteIndex,
) -> Result<Vec<f64>> {
    let o = g
        .index_of(anchor)
        .ok_or_else(|| Error::param("anchor", format!("{anchor} lies outside the box")))?;
    let law = enumerate_box(g, p, |cfg| cfg.le_size(o) as i64)?;
    let tail = |k: i64| -> f64 {
        neumaier_sum(
            law.support
                .iter()
                .zip(&law.prob)
                .filter(|(&v, _)| v >= k)
                .map(|(_, &q)| q),
        )
    };
    let mut out = Vec::new();
    for k in 0..=kmax as i64 {
        let den = tail(k);
        if den <= 0.0 {
            break;
        }
        out.push(tail(k + 1) / den);
    }
    Ok(out)
}

/// Law of the systematic-scan heat-bath chain after `sweeps` sweeps from the
/// all-vacant state, indexed by configuration mask. Exterior sites are vacant.
pub fn heat_bath_law(g: &BoxGeometry, conditional: &[f64], sweeps: usize) -> Result<Vec<f64>> {
    let graph = heat_bath_graph(g, conditional)?;
    let mut v = vec![0.0; 1 << graph.len()];
    v[0] = 1.0;
    for _ in 0..sweeps {
        v = heat_bath_sweep(&graph, conditional, &v);
    }
    Ok(v)
}

/// Stationary law of the systematic-scan heat-bath chain by power iteration.
pub fn heat_bath_stationary(g: &BoxGeometry, conditional: &[f64], tol: f64) -> Result<Vec<f64>> {
    let graph = heat_bath_graph(g, conditional)?;
    let states = 1usize << graph.len();
    let mut v = vec![1.0 / states as f64; states];
    for _ in 0..100_000 {
        let next = heat_bath_sweep(&graph, conditional, &v);
        let diff: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if diff < tol {
            return Ok(v);
        }
    }
    Err(Error::Degenerate("power iteration did not converge".into()))
}

fn heat_bath_graph(g: &BoxGeometry, conditional: &[f64]) -> Result<SmallGraph> {
    if g.site_count() > 12 {
        return Err(Error::EnumerationCap {
            sites: g.site_count(),
            cap: 12,
        });
    }
    if conditional.len() != 2 * g.dim() + 1 {
        return Err(Error::param("conditional_table", "length must be 2d + 1"));
    }
    SmallGraph::from_geometry(&g.with_bc(match g.bc() {
        Boundary::Periodic => Boundary::Periodic,
        _ => Boundary::Zero,
    }))
}

fn heat_bath_sweep(graph: &SmallGraph, conditional: &[f64], v: &[f64]) -> Vec<f64> {
    let mut cur = v.to_vec();
    for i in 0..graph.len() {
        let bit = 1u32 << i;
        let mut next = vec![0.0; cur.len()];
        for (s, &w) in cur.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let k = (graph.neighbors[i] & s as u32).count_ones() as usize;
            let q = conditional[k];
            next[(s as u32 | bit) as usize] += w * q;
            next[(s as u32 & !bit) as usize] += w * (1.0 - q);
        }
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(d: usize, n: usize) -> BoxGeometry {
        BoxGeometry::new(d, n, Boundary::Zero).unwrap()
    }

    /// Longest run of ones in the low `len` bits, by direct scanning.
    fn brute_longest_run(mask: u32, len: u32) -> u32 {
        let (mut best, mut cur) = (0, 0);
        for i in 0..len {
            if mask >> i & 1 == 1 {
                cur += 1;
                best = best.max(cur);
            } else {
                cur = 0;
            }
        }
        best
    }

    #[test]
    fn run_tail_examples() {
        assert!((run_tail_1d(0.5, 3) - 0.0625).abs() < 1e-15);
        assert_eq!(run_tail_1d(0.0, 1), 0.0);
        assert_eq!(run_tail_1d(0.5, 0), 1.0);
        assert!((run_tail_1d_conditional(0.5, 3) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn longest_run_examples() {
        assert!((longest_run_cdf(2, 0.5, 1) - 0.75).abs() < 1e-15);
        assert_eq!(longest_run_cdf(5, 0.0, 0), 1.0);
        assert_eq!(longest_run_cdf(3, 0.5, 3), 1.0);
    }

    #[test]
    fn longest_run_matches_bit_brute_force() {
        for len in 1..=12u32 {
            for &p in &[0.3f64, 0.5, 0.77] {
                for m in 0..=len {
                    let brute: f64 = (0u32..1 << len)
                        .filter(|&mask| brute_longest_run(mask, len) <= m)
                        .map(|mask| {
                            let k = mask.count_ones() as i32;
                            p.powi(k) * (1.0 - p).powi(len as i32 - k)
                        })
                        .sum();
                    let dp = longest_run_cdf(len as u64, p, m as u64);
                    assert!((brute - dp).abs() < 1e-13, "len {len} m {m}");
                }
            }
        }
    }

    #[test]
    fn enumerate_max_cluster_small_line() {
        let law = enumerate_box(&geom(1, 1), 0.5, stat_max_cluster).unwrap();
        assert_eq!(law.support, vec![0, 1, 2, 3]);
        // {101} has two singleton clusters, so P(M=1) = 4/8.
        let want = [0.125, 0.5, 0.25, 0.125];
        for (a, b) in law.prob.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn enumerate_degenerate_and_binomial() {
        let g = geom(2, 1);
        let law = enumerate_box(&g, 1.0, stat_max_cluster).unwrap();
        assert_eq!(law.pmf(9), 1.0);
        assert_eq!(law.total(), 1.0);

        let occ = enumerate_box(&g, 0.5, stat_occupied).unwrap();
        let mut binom = 1.0f64;
        for k in 0..=9i64 {
            if k > 0 {
                binom = binom * (10 - k) as f64 / k as f64;
            }
            assert!((occ.pmf(k) - binom / 512.0).abs() < 1e-15);
        }
    }

    #[test]
    fn enumeration_cap() {
        assert!(matches!(
            enumerate_box(&geom(2, 3), 0.5, stat_max_cluster),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn rational_total_is_one() {
        let law = enumerate_counts(&geom(2, 1), stat_max_cluster).unwrap();
        let p = rational(0.3);
        let mut total = zero();
        for v in law.values() {
            total += law.probability_exact(v, &p);
        }
        assert_eq!(total, BigRational::from_integer(BigInt::from(1)));
    }

    #[test]
    fn torus_isolated_site() {
        let law = exact_cluster_law_torus(4, 2, 3).unwrap();
        for &p in &[0.2f64, 0.3, 0.6] {
            let want = p * (1.0 - p).powi(4);
            assert!((law.p_cluster(1, p) - want).abs() < 1e-15);
            assert!((law.p_le(1, p) - want).abs() < 1e-15);
        }
        for k in 1..=3 {
            assert!(law.identity_holds(k));
        }
        assert!(exact_cluster_law_torus(4, 2, 4).is_err());
    }

    #[test]
    fn torus_identity_in_one_dimension() {
        // On a ring of 5 sites a run of k < 5 at the origin has the origin as
        // its left endpoint with conditional probability 1/k.
        let law = exact_cluster_law_torus(5, 1, 4).unwrap();
        for k in 1..=4 {
            assert!(law.identity_holds(k));
            let p: f64 = 0.4;
            // For k = 4 the two bounding vacant sites coincide.
            let bounding = if k == 4 { 1 } else { 2 };
            let want_le = (1.0 - p).powi(bounding) * p.powi(k as i32);
            assert!((law.p_le(k, p) - want_le).abs() < 1e-15, "k {k}");
        }
    }

    #[test]
    fn pair_tail_trivial_and_line() {
        let g = geom(1, 2);
        let r = exact_pair_tail(&g, 0.0, 1, &SiteIndex(vec![2])).unwrap();
        assert_eq!((r.joint, r.bound), (0.0, 0.0));
        let r = exact_pair_tail(&g, 0.5, 1, &SiteIndex(vec![2])).unwrap();
        assert!(r.joint <= r.bound && r.holds_exactly);
        assert!(exact_pair_tail(&g, 0.5, 1, &SiteIndex(vec![0])).is_err());
    }

    #[test]
    fn ratio_sequences() {
        // At p = 1 the centre is never a left endpoint; the corner always is.
        assert_eq!(exact_ratio_sequence(&geom(2, 1), 1.0, 9).unwrap(), vec![0.0]);
        let corner = SiteIndex(vec![-1, -1]);
        let r = exact_ratio_sequence_at(&geom(2, 1), 1.0, 12, &corner).unwrap();
        assert_eq!(r.len(), 10);
        assert!(r[..9].iter().all(|&x| x == 1.0));
        assert_eq!(r[9], 0.0);
        let p: f64 = 0.3;
        let floor = p * (1.0 - p).powi(8);
        // From the centre of B_1 a left-endpoint cluster has at most 5 sites.
        let r = exact_ratio_sequence(&geom(2, 1), p, 8).unwrap();
        assert_eq!(r.len(), 6);
        assert!(r[..5].iter().all(|&x| x >= floor), "{r:?}");
        // The closed-form one-dimensional tail has ratio exactly p beyond 0.
        for k in 1..10 {
            let ratio = run_tail_1d(0.37, k + 1) / run_tail_1d(0.37, k);
            assert!((ratio - 0.37).abs() < 1e-14);
        }
    }

    #[test]
    fn heat_bath_with_constant_conditional_is_bernoulli() {
        let g = geom(1, 1);
        let law = heat_bath_law(&g, &[0.3, 0.3, 0.3], 1).unwrap();
        for (s, &w) in law.iter().enumerate() {
            let k = (s as u32).count_ones() as i32;
            assert!((w - 0.3f64.powi(k) * 0.7f64.powi(3 - k)).abs() < 1e-15);
        }
        let st = heat_bath_stationary(&g, &[0.2, 0.4, 0.6], 1e-15).unwrap();
        let after = heat_bath_law(&g, &[0.2, 0.4, 0.6], 64).unwrap();
        for (a, b) in st.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
