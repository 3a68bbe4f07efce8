//! Occurrence times of the rare events `E_m = {m <= |C_le(0)| < inf}`.
//!
//! A scan grows the box `B_k` one shell at a time and stops at the first
//! radius where some site of `B_k` witnesses the event. Three rules decide
//! what counts as a witness:
//!
//! * [`Rule::Box`]: a left endpoint of a cluster of `omega_{B_k}` (zero
//!   boundary) with admissible size. This is the time that matches the box
//!   maximum exactly: `M_n >= m` iff `tau <= (2n+1)^d`.
//! * [`Rule::Interior`]: as `Box`, but the cluster must not touch the outer
//!   shell of `B_k`, so the whole pattern (cluster plus vacant boundary) lies
//!   inside the box.
//! * [`Rule::Ambient`]: the site `x` in `B_k` is the left endpoint of an
//!   admissible cluster of the full configuration on `Z^d`. Occurrences are
//!   then a stationary family indexed by sites.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{site_count, Boundary, BoxGeometry, SiteIndex};
use crate::oracles::{enumerate_events, rational, MaskConfig};
use crate::sampler::{child_seed, splitmix64, SeedSpec, SiteConfig, Threshold};
use crate::stats::{wilson_interval, Z95};
use crate::tails::sample_origin_clusters;
use crate::unionfind::UnionFind;

/// Default exploration cap: clusters larger than this count as infinite.
pub const DEFAULT_SIZE_CAP: u64 = 256;

/// `E_m`, optionally localized to `E'_m = {m <= |C_le(0)| < m^theta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub m: u64,
    pub theta: Option<f64>,
    /// Only clusters known to be finite count (supercritical mode).
    #[serde(default)]
    pub finite_only: bool,
    /// Ambient explorations and origin samples larger than this are treated
    /// as infinite.
    #[serde(default = "default_cap")]
    pub size_cap: u64,
}

fn default_cap() -> u64 {
    DEFAULT_SIZE_CAP
}

impl EventSpec {
    pub fn new(m: u64) -> Result<Self> {
        let ev = EventSpec {
            m,
            theta: None,
            finite_only: false,
            size_cap: DEFAULT_SIZE_CAP,
        };
        ev.validate()?;
        Ok(ev)
    }

    pub fn localized(mut self, theta: f64) -> Result<Self> {
        self.theta = Some(theta);
        self.validate()?;
        Ok(self)
    }

    pub fn finite(mut self) -> Self {
        self.finite_only = true;
        self
    }

    pub fn with_size_cap(mut self, cap: u64) -> Result<Self> {
        self.size_cap = cap;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::param("m", "must be at least 1"));
        }
        if let Some(t) = self.theta {
            if !(t > 1.0 && t.is_finite()) {
                return Err(Error::param("theta", "must be a finite number above 1"));
            }
            if self.box_max() < self.m {
                return Err(Error::param(
                    "theta",
                    format!("m^theta = {} leaves no admissible size", (self.m as f64).powf(t)),
                ));
            }
        }
        if self.size_cap < self.m {
            return Err(Error::param("size_cap", "must be at least m"));
        }
        Ok(())
    }

    /// Largest admissible size under the localization alone.
    pub fn box_max(&self) -> u64 {
        match self.theta {
            Some(t) => ((self.m as f64).powf(t) - 1e-9).ceil() as u64 - 1,
            None => u64::MAX,
        }
    }

    /// Largest admissible size once the exploration cap applies.
    pub fn max_size(&self) -> u64 {
        self.box_max().min(self.size_cap)
    }

    fn admits(&self, size: u64, max: u64) -> bool {
        size >= self.m && size <= max
    }
}

/// Which clusters witness an occurrence in `B_k`; see the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Box,
    Interior,
    Ambient,
}

/// First occurrence of an event along the boxes `B_0, B_1, ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingRecord {
    /// `(2k+1)^d` at the first hit, or at `k_max` when censored.
    pub tau: u64,
    pub radius: u64,
    pub censored: bool,
    /// Left endpoint of the witnessing cluster (smallest one on ties).
    pub hit_site: Option<SiteIndex>,
}

impl HittingRecord {
    fn hit(dim: usize, k: u64, site: SiteIndex) -> Self {
        HittingRecord {
            tau: volume(dim, k),
            radius: k,
            censored: false,
            hit_site: Some(site),
        }
    }

    fn censored(dim: usize, k_max: u64) -> Self {
        HittingRecord {
            tau: volume(dim, k_max),
            radius: k_max,
            censored: true,
            hit_site: None,
        }
    }

    /// `tau <= v`, with censored records counted as not yet hit.
    pub fn hit_by(&self, v: u64) -> bool {
        !self.censored && self.tau <= v
    }
}

fn volume(dim: usize, k: u64) -> u64 {
    (2 * k + 1).pow(dim as u32)
}

/// Occupation field on `Z^d`.
pub trait Field {
    fn dim(&self) -> usize;
    fn occupied(&self, site: &[i64]) -> bool;
}

/// Bernoulli field whose sites are drawn on demand from a keyed hash of
/// their coordinates, so any finite region can be revisited in any order.
#[derive(Debug, Clone, Copy)]
pub struct LazyBernoulli {
    dim: usize,
    threshold: Threshold,
    key: u64,
}

impl LazyBernoulli {
    pub fn new(dim: usize, p: f64, seed: SeedSpec) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::param("p", "must lie in [0, 1]"));
        }
        let key = splitmix64(child_seed(seed.master_seed, "lazy-field") ^ splitmix64(seed.replica_index));
        Ok(LazyBernoulli {
            dim,
            threshold: Threshold::new(p),
            key,
        })
    }
}

impl Field for LazyBernoulli {
    fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn occupied(&self, site: &[i64]) -> bool {
        let mut h = self.key;
        for &c in site {
            h = splitmix64(h ^ c as u64);
        }
        self.threshold.accepts(h)
    }
}

/// A box configuration seen as a field that is vacant outside the box.
#[derive(Debug, Clone, Copy)]
pub struct ConfigField<'a>(pub &'a SiteConfig);

impl Field for ConfigField<'_> {
    fn dim(&self) -> usize {
        self.0.geometry().dim()
    }

    fn occupied(&self, site: &[i64]) -> bool {
        let g = self.0.geometry();
        let r = g.radius() as i64;
        if site.iter().any(|c| c.abs() > r) {
            return false;
        }
        let idx: usize = site
            .iter()
            .zip(g.strides())
            .map(|(&c, &s)| (c + r) as usize * s)
            .sum();
        self.0.is_occupied(idx)
    }
}

/// Restriction of `field` to `B_radius`.
pub fn materialize(field: &impl Field, radius: usize) -> Result<SiteConfig> {
    let g = BoxGeometry::new(field.dim(), radius, Boundary::Zero)?;
    let occ = (0..g.site_count())
        .map(|i| field.occupied(&g.site_at(i).0))
        .collect();
    SiteConfig::new(g, occ)
}

/// Calls `f` on every site of sup-norm exactly `k`, in lexicographic order.
pub fn for_each_shell_site(dim: usize, k: u64, mut f: impl FnMut(&[i64])) {
    let mut coords = vec![0i64; dim];
    shell_rec(&mut coords, 0, k as i64, false, &mut f);
}

fn shell_rec(c: &mut [i64], axis: usize, k: i64, on_shell: bool, f: &mut impl FnMut(&[i64])) {
    if axis == c.len() {
        if on_shell || k == 0 {
            f(c);
        }
        return;
    }
    if !on_shell && axis + 1 == c.len() {
        c[axis] = -k;
        f(c);
        if k > 0 {
            c[axis] = k;
            f(c);
        }
        return;
    }
    for v in -k..=k {
        c[axis] = v;
        shell_rec(c, axis + 1, k, on_shell || v.abs() == k, f);
    }
}

/// Incremental shell-by-shell cluster labeling on `B_{k_max}`.
struct ShellScan {
    geom: BoxGeometry,
    occ: Vec<bool>,
    uf: UnionFind,
    min_site: Vec<usize>,
    max_shell: Vec<u64>,
    prev: Vec<usize>,
    cur: Vec<usize>,
}

impl ShellScan {
    fn new(dim: usize, k_max: u64) -> Result<Self> {
        let geom = BoxGeometry::new(dim, k_max as usize, Boundary::Zero)?;
        let n = geom.site_count();
        Ok(ShellScan {
            geom,
            occ: vec![false; n],
            uf: UnionFind::new(n),
            min_site: (0..n).collect(),
            max_shell: vec![0; n],
            prev: Vec::new(),
            cur: Vec::new(),
        })
    }

    fn index(&self, site: &[i64]) -> usize {
        let r = self.geom.radius() as i64;
        site.iter()
            .zip(self.geom.strides())
            .map(|(&c, &s)| (c + r) as usize * s)
            .sum()
    }

    fn add_shell(&mut self, field: &impl Field, k: u64) {
        std::mem::swap(&mut self.prev, &mut self.cur);
        self.cur.clear();
        let mut fresh = Vec::new();
        for_each_shell_site(self.geom.dim(), k, |s| {
            if field.occupied(s) {
                fresh.push(self.index(s));
            }
        });
        for &i in &fresh {
            self.occ[i] = true;
            self.max_shell[i] = k;
        }
        for &i in &fresh {
            let mut nbrs = [0usize; 16];
            let mut count = 0;
            self.geom.for_each_neighbor(i, |j| {
                if count < nbrs.len() {
                    nbrs[count] = j;
                    count += 1;
                }
            });
            for &j in &nbrs[..count] {
                if self.occ[j] {
                    if let Some((big, small)) = self.uf.union(i, j) {
                        self.min_site[big] = self.min_site[big].min(self.min_site[small]);
                        self.max_shell[big] = self.max_shell[big].max(self.max_shell[small]);
                    }
                }
            }
        }
        self.cur = fresh;
    }

    /// Smallest left endpoint among admissible clusters that changed state
    /// at shell `k`.
    fn witness(&mut self, ev: &EventSpec, k: u64, interior: bool) -> Option<usize> {
        let max = ev.box_max();
        let mut best: Option<usize> = None;
        for t in 0..self.prev.len() + self.cur.len() {
            let i = if t < self.prev.len() {
                self.prev[t]
            } else {
                self.cur[t - self.prev.len()]
            };
            let r = self.uf.find(i);
            let size = self.uf.root_size(r) as u64;
            if !ev.admits(size, max) || (interior && self.max_shell[r] >= k) {
                continue;
            }
            let le = self.min_site[r];
            best = Some(best.map_or(le, |b| b.min(le)));
        }
        best
    }
}

fn scan_box(
    field: &impl Field,
    ev: &EventSpec,
    k_max: u64,
    want_box: bool,
    want_interior: bool,
) -> Result<(Option<HittingRecord>, Option<HittingRecord>)> {
    let dim = field.dim();
    site_count(dim, k_max as usize)?;
    let mut scan = ShellScan::new(dim, k_max)?;
    let mut boxed = None;
    let mut interior = None;
    for k in 0..=k_max {
        scan.add_shell(field, k);
        if want_box && boxed.is_none() {
            if let Some(le) = scan.witness(ev, k, false) {
                boxed = Some(HittingRecord::hit(dim, k, scan.geom.site_at(le)));
            }
        }
        if want_interior && interior.is_none() {
            if let Some(le) = scan.witness(ev, k, true) {
                interior = Some(HittingRecord::hit(dim, k, scan.geom.site_at(le)));
            }
        }
        if (!want_box || boxed.is_some()) && (!want_interior || interior.is_some()) {
            break;
        }
    }
    let fill = |r: Option<HittingRecord>, wanted: bool| {
        wanted.then(|| r.unwrap_or_else(|| HittingRecord::censored(dim, k_max)))
    };
    Ok((fill(boxed, want_box), fill(interior, want_interior)))
}

/// Breadth-first test of "`x` is the left endpoint of an admissible cluster
/// of the full field", with buffers reused across calls.
pub struct AmbientProbe {
    dim: usize,
    side: i64,
    strides: Vec<i64>,
    seen: HashSet<i64>,
    queue: Vec<i64>,
    coords: Vec<i64>,
}

impl AmbientProbe {
    pub fn new(dim: usize, max_size: u64) -> Result<Self> {
        let side = 2 * (max_size as i64 + 1) + 1;
        let mut strides = vec![1i64; dim];
        for k in (0..dim.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1]
                .checked_mul(side)
                .ok_or_else(|| Error::param("size_cap", "exploration window overflows"))?;
        }
        strides[0]
            .checked_mul(side)
            .ok_or_else(|| Error::param("size_cap", "exploration window overflows"))?;
        Ok(AmbientProbe {
            dim,
            side,
            strides,
            seen: HashSet::new(),
            queue: Vec::new(),
            coords: vec![0; dim],
        })
    }

    fn unpack(&mut self, x: &[i64], cell: i64) {
        let half = self.side / 2;
        for k in 0..self.dim {
            self.coords[k] = x[k] + (cell / self.strides[k]) % self.side - half;
        }
    }

    /// Whether `x` witnesses `ev`: occupied, lexicographically smallest in its
    /// cluster, cluster size in `[m, ev.max_size()]`.
    pub fn witnesses(&mut self, field: &impl Field, x: &[i64], ev: &EventSpec) -> bool {
        if !field.occupied(x) {
            return false;
        }
        let max = ev.max_size();
        let half = self.side / 2;
        let origin: i64 = self.strides.iter().map(|s| s * half).sum();
        self.seen.clear();
        self.queue.clear();
        self.seen.insert(origin);
        self.queue.push(origin);
        let mut head = 0;
        let mut size = 1u64;
        while head < self.queue.len() {
            let cell = self.queue[head];
            head += 1;
            for k in 0..self.dim {
                let s = self.strides[k];
                for nb in [cell - s, cell + s] {
                    if self.seen.contains(&nb) {
                        continue;
                    }
                    self.unpack(x, nb);
                    let coords = std::mem::take(&mut self.coords);
                    let occ = field.occupied(&coords);
                    self.coords = coords;
                    self.seen.insert(nb);
                    if !occ {
                        continue;
                    }
                    if nb < origin {
                        return false;
                    }
                    size += 1;
                    if size > max {
                        return false;
                    }
                    self.queue.push(nb);
                }
            }
        }
        size >= ev.m
    }
}

fn scan_ambient(field: &impl Field, ev: &EventSpec, k_max: u64) -> Result<HittingRecord> {
    let dim = field.dim();
    let mut probe = AmbientProbe::new(dim, ev.max_size())?;
    for k in 0..=k_max {
        let mut hit: Option<Vec<i64>> = None;
        for_each_shell_site(dim, k, |s| {
            if hit.is_none() && probe.witnesses(field, s, ev) {
                hit = Some(s.to_vec());
            }
        });
        if let Some(s) = hit {
            return Ok(HittingRecord::hit(dim, k, SiteIndex(s)));
        }
    }
    Ok(HittingRecord::censored(dim, k_max))
}

/// `tau_E` for one realization, scanning radii `0..=k_max`. In finite-only
/// mode the box rule becomes the interior rule.
pub fn tau_event(field: &impl Field, ev: &EventSpec, k_max: u64, rule: Rule) -> Result<HittingRecord> {
    ev.validate()?;
    let rule = match rule {
        Rule::Box if ev.finite_only => Rule::Interior,
        r => r,
    };
    match rule {
        Rule::Box => Ok(scan_box(field, ev, k_max, true, false)?.0.unwrap()),
        Rule::Interior => Ok(scan_box(field, ev, k_max, false, true)?.1.unwrap()),
        Rule::Ambient => scan_ambient(field, ev, k_max),
    }
}

/// `(tau, t)` on one realization: the box-rule time and the interior-rule
/// time, from a single scan.
pub fn tau_pair(field: &impl Field, ev: &EventSpec, k_max: u64) -> Result<(HittingRecord, HittingRecord)> {
    ev.validate()?;
    let (b, i) = scan_box(field, ev, k_max, true, true)?;
    Ok((b.unwrap(), i.unwrap()))
}

/// Hitting records for `replicas` independent lazy Bernoulli fields.
pub fn run_hitting(
    dim: usize,
    p: f64,
    ev: &EventSpec,
    rule: Rule,
    k_max: u64,
    replicas: u64,
    master_seed: u64,
) -> Result<Vec<HittingRecord>> {
    ev.validate()?;
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let f = LazyBernoulli::new(dim, p, SeedSpec::new(master_seed, r))?;
            tau_event(&f, ev, k_max, rule)
        })
        .collect()
}

/// `(tau, t)` pairs for `replicas` independent lazy Bernoulli fields.
pub fn run_hitting_pairs(
    dim: usize,
    p: f64,
    ev: &EventSpec,
    k_max: u64,
    replicas: u64,
    master_seed: u64,
) -> Result<Vec<(HittingRecord, HittingRecord)>> {
    ev.validate()?;
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let f = LazyBernoulli::new(dim, p, SeedSpec::new(master_seed, r))?;
            tau_pair(&f, ev, k_max)
        })
        .collect()
}

/// Estimate of `P(E)` with a 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventProb {
    pub estimate: f64,
    pub ci: (f64, f64),
    pub hits: u64,
    pub total: u64,
}

impl EventProb {
    fn from_counts(hits: u64, total: u64) -> Self {
        EventProb {
            estimate: hits as f64 / total as f64,
            ci: wilson_interval(hits, total, Z95),
            hits,
            total,
        }
    }
}

/// Monte Carlo `P(E)` from independent origin clusters on `Z^d`, explored up
/// to `ev.max_size()`. With no hits the interval is one-sided.
pub fn event_prob(dim: usize, p: f64, ev: &EventSpec, count: u64, seed: u64) -> Result<EventProb> {
    ev.validate()?;
    if count == 0 {
        return Err(Error::param("replicas", "must be at least 1"));
    }
    let s = sample_origin_clusters(dim, p, count, ev.max_size(), seed)?;
    Ok(EventProb::from_counts(s.le.finite_count_ge(ev.m), s.le.total()))
}

/// `P(E)` at the centre of the zero-boundary box `g`, by enumeration. Exact
/// for the infinite lattice once the box radius reaches `m^theta`.
pub fn event_prob_exact(g: &BoxGeometry, p: f64, ev: &EventSpec) -> Result<f64> {
    ev.validate()?;
    let o = g.origin_index();
    let max = ev.box_max();
    let c = enumerate_events(g, 1, |cfg, hit| {
        if box_event(cfg, o, ev, max) {
            hit(0)
        }
    })?;
    Ok(c[0].probability(p))
}

fn box_event(cfg: &MaskConfig<'_>, i: usize, ev: &EventSpec, max: u64) -> bool {
    ev.admits(cfg.le_size(i) as u64, max)
}

/// `lambda_E` from the survival of `tau` at the largest box volume not above
/// `f_E = floor(P(E)^-gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaEstimate {
    pub lambda: f64,
    pub ci: (f64, f64),
    pub f_e: u64,
    /// `(2k+1)^d <= f_E` actually used.
    pub volume: u64,
    pub survivors: u64,
    pub total: u64,
}

pub fn lambda_estimate(
    records: &[HittingRecord],
    dim: usize,
    pe: &EventProb,
    gamma: f64,
) -> Result<LambdaEstimate> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::param("gamma", "must lie in (0, 1)"));
    }
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(pe.estimate > 0.0) {
        return Err(Error::param("pE", "estimated event probability is zero"));
    }
    let f = pe.estimate.powf(-gamma).floor();
    if f < 1.0 {
        return Err(Error::param("gamma", "f_E < 1: the event is too likely"));
    }
    let f_e = f as u64;
    let mut k = 0u64;
    while volume(dim, k + 1) <= f_e {
        k += 1;
    }
    let v = volume(dim, k);
    let undetermined = records.iter().filter(|r| r.censored && r.tau <= v).count();
    if undetermined > 0 {
        return Err(Error::ExcessiveCensoring {
            censored: undetermined,
            total: records.len(),
            hint: k + 1,
        });
    }
    let n = records.len() as u64;
    let survivors = records.iter().filter(|r| !r.hit_by(v)).count() as u64;
    if survivors == 0 {
        return Err(Error::Degenerate("every record hit before f_E".into()));
    }
    let s = survivors as f64 / n as f64;
    let denom = v as f64 * pe.estimate;
    let lambda = -s.ln() / denom;
    let var_log_s = (1.0 - s) / (s * n as f64);
    let se_p = (pe.ci.1 - pe.ci.0) / (2.0 * Z95);
    let rel = (var_log_s / (s.ln() * s.ln()).max(f64::MIN_POSITIVE) + (se_p / pe.estimate).powi(2)).sqrt();
    let half = Z95 * lambda * rel;
    Ok(LambdaEstimate {
        lambda,
        ci: (lambda - half, lambda + half),
        f_e,
        volume: v,
        survivors,
        total: n,
    })
}

/// One grid point of the exponential-law comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpLawRow {
    pub volume: u64,
    /// `lambda pE volume`.
    pub t: f64,
    pub empirical: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpLawTest {
    pub ks: f64,
    pub table: Vec<ExpLawRow>,
    pub censored: usize,
    pub total: usize,
}

/// Compares the survival of `lambda pE tau` with `e^{-t}` at every attainable
/// box volume below the censoring horizon.
pub fn exponential_law_test(
    records: &[HittingRecord],
    dim: usize,
    pe: f64,
    lambda: f64,
) -> Result<ExpLawTest> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(pe > 0.0 && lambda > 0.0) {
        return Err(Error::param("pE", "pE and lambda must be positive"));
    }
    let total = records.len();
    let censored = records.iter().filter(|r| r.censored).count();
    if censored as f64 > 0.05 * total as f64 {
        let v = (100f64).ln() / (lambda * pe);
        let hint = ((v.powf(1.0 / dim as f64) - 1.0) / 2.0).ceil().max(1.0) as u64;
        return Err(Error::ExcessiveCensoring {
            censored,
            total,
            hint,
        });
    }
    let horizon = records
        .iter()
        .filter(|r| r.censored)
        .map(|r| r.tau)
        .min()
        .unwrap_or_else(|| records.iter().map(|r| r.tau).max().unwrap_or(1));
    let mut taus: Vec<u64> = records.iter().filter(|r| !r.censored).map(|r| r.tau).collect();
    taus.sort_unstable();
    let mut table = Vec::new();
    let mut k = 0u64;
    loop {
        let v = volume(dim, k);
        if v >= horizon {
            break;
        }
        let hit = taus.partition_point(|&t| t <= v);
        let t = lambda * pe * v as f64;
        table.push(ExpLawRow {
            volume: v,
            t,
            empirical: (total - hit) as f64 / total as f64,
            predicted: (-t).exp(),
        });
        k += 1;
    }
    let ks = table
        .iter()
        .map(|r| (r.empirical - r.predicted).abs())
        .fold(0.0, f64::max);
    Ok(ExpLawTest {
        ks,
        table,
        censored,
        total,
    })
}

/// How often the box-rule and interior-rule occurrence times disagree at
/// level `(2n+1)^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauDiscrepancy {
    pub n: u64,
    pub m: u64,
    pub differ: u64,
    pub total: u64,
    pub fraction: f64,
    pub ci: (f64, f64),
    /// `m / n`, the scale of the predicted bound.
    pub scale: f64,
}

pub fn tau_vs_t_discrepancy(
    pairs: &[(HittingRecord, HittingRecord)],
    dim: usize,
    n: u64,
    m: u64,
) -> Result<TauDiscrepancy> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let v = volume(dim, n);
    if pairs.iter().any(|(a, b)| {
        (a.censored && a.tau < v) || (b.censored && b.tau < v)
    }) {
        return Err(Error::param("n", "records are censored below (2n+1)^d"));
    }
    let differ = pairs
        .iter()
        .filter(|(tau, t)| tau.hit_by(v) != t.hit_by(v))
        .count() as u64;
    let total = pairs.len() as u64;
    Ok(TauDiscrepancy {
        n,
        m,
        differ,
        total,
        fraction: differ as f64 / total as f64,
        ci: wilson_interval(differ, total, Z95),
        scale: m as f64 / n as f64,
    })
}

/// `sum_{0 < |x| <= m^alpha} P(E_m and theta_x E_m) / P(E_m)`, `|x|` the
/// sup norm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondMoment {
    pub mode: String,
    pub m: u64,
    pub alpha: f64,
    pub radius: u64,
    pub p_event: f64,
    pub sum: f64,
    pub stderr: Option<f64>,
    /// Contribution of each sup-norm ring `|x| = r`, `r = 1..=radius`.
    pub rings: Vec<f64>,
    /// `(2 m^alpha + 1)^d P(|C(0)| >= m)` (exact mode).
    pub majorant: Option<f64>,
    /// `sum <= majorant` decided in rational arithmetic.
    pub within_majorant: Option<bool>,
    /// False when the budget ran out before all windows were processed.
    pub complete: bool,
    pub events: u64,
    pub pairs: u64,
}

fn offset_radius(m: u64, alpha: f64) -> Result<u64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param("alpha", "must be positive"));
    }
    Ok(((m as f64).powf(alpha) + 1e-9).floor() as u64)
}

/// Exact second-moment sum on the zero-boundary box `g`, with the event
/// evaluated on `omega_g` at the centre and at every offset inside `g`.
pub fn second_moment_exact(g: &BoxGeometry, p: f64, ev: &EventSpec, alpha: f64) -> Result<SecondMoment> {
    ev.validate()?;
    let r = offset_radius(ev.m, alpha)?;
    let o = g.origin_index();
    let max = ev.box_max();
    let dim = g.dim();
    let offsets: Vec<usize> = (0..g.site_count())
        .filter(|&i| {
            let n = g.site_at(i).sup_norm() as u64;
            n > 0 && n <= r
        })
        .collect();
    // Events: 0 = E at the centre, 1 = |C(0)| >= m, 2 + j = E at 0 and at offsets[j].
    let counts = enumerate_events(g, 2 + offsets.len(), |cfg, hit| {
        if cfg.cluster_size(o) as u64 >= ev.m {
            hit(1);
        }
        if !box_event(cfg, o, ev, max) {
            return;
        }
        hit(0);
        for (j, &x) in offsets.iter().enumerate() {
            if box_event(cfg, x, ev, max) {
                hit(2 + j);
            }
        }
    })?;
    let pe = counts[0].probability(p);
    let pc = counts[1].probability(p);
    let n_off = ((2 * r + 1) as f64).powi(dim as i32);
    let mut rings = vec![0.0; r as usize];
    let mut sum = 0.0;
    if pe > 0.0 {
        for (j, &x) in offsets.iter().enumerate() {
            let v = counts[2 + j].probability(p) / pe;
            rings[g.site_at(x).sup_norm() as usize - 1] += v;
            sum += v;
        }
    }
    let pr = rational(p);
    let lhs = counts[2..]
        .iter()
        .fold(rational(0.0), |acc, c| acc + c.probability_exact(&pr));
    let bound = rational(n_off) * counts[1].probability_exact(&pr) * counts[0].probability_exact(&pr);
    Ok(SecondMoment {
        mode: "exact".into(),
        m: ev.m,
        alpha,
        radius: r,
        p_event: pe,
        sum,
        stderr: None,
        rings,
        majorant: Some(n_off * pc),
        within_majorant: Some(lhs <= bound),
        complete: true,
        events: 0,
        pairs: 0,
    })
}

/// Parameters of the Monte Carlo second-moment estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondMomentMc {
    /// Independent fields, each scanned on the window `B_window`.
    pub windows: u64,
    pub window: u64,
    /// Maximum number of site probes over all windows.
    pub budget: u64,
}

/// Monte Carlo second-moment sum by stationarity: on each window, every
/// witness `y` of the ambient event is paired with the witnesses `z` at
/// `0 < |z - y| <= m^alpha`; the estimate is pairs per witness.
pub fn second_moment_mc(
    dim: usize,
    p: f64,
    ev: &EventSpec,
    alpha: f64,
    mc: SecondMomentMc,
    seed: u64,
) -> Result<SecondMoment> {
    ev.validate()?;
    if mc.windows == 0 {
        return Err(Error::param("windows", "must be at least 1"));
    }
    let r = offset_radius(ev.m, alpha)?;
    let outer = mc.window + r;
    let per_window = site_count(dim, outer as usize)? as u64;
    let allowed = (mc.budget / per_window).min(mc.windows);
    if allowed == 0 {
        return Err(Error::BudgetExhausted {
            completed: 0,
            requested: mc.windows,
        });
    }
    let master = child_seed(seed, "second-moment");
    let per: Vec<(u64, Vec<u64>)> = (0..allowed)
        .into_par_iter()
        .map(|w| -> Result<(u64, Vec<u64>)> {
            let field = LazyBernoulli::new(dim, p, SeedSpec::new(master, w))?;
            window_pairs(&field, ev, mc.window, r)
        })
        .collect::<Result<_>>()?;
    let events: u64 = per.iter().map(|(e, _)| e).sum();
    let mut ring_pairs = vec![0u64; r as usize];
    for (_, rp) in &per {
        ring_pairs.iter_mut().zip(rp).for_each(|(a, b)| *a += b);
    }
    let pairs: u64 = ring_pairs.iter().sum();
    let inner = site_count(dim, mc.window as usize)? as f64;
    let (sum, rings) = if events > 0 {
        let e = events as f64;
        (pairs as f64 / e, ring_pairs.iter().map(|&c| c as f64 / e).collect())
    } else {
        (0.0, vec![0.0; r as usize])
    };
    let stderr = (per.len() >= 2 && events > 0).then(|| {
        let w = per.len() as f64;
        let mean_e = events as f64 / w;
        let ss: f64 = per
            .iter()
            .map(|(e, rp)| {
                let d = rp.iter().sum::<u64>() as f64 - sum * *e as f64;
                d * d
            })
            .sum();
        (ss / (w * (w - 1.0))).sqrt() / mean_e
    });
    Ok(SecondMoment {
        mode: "mc".into(),
        m: ev.m,
        alpha,
        radius: r,
        p_event: events as f64 / (inner * allowed as f64),
        sum,
        stderr,
        rings,
        majorant: None,
        within_majorant: None,
        complete: allowed == mc.windows,
        events,
        pairs,
    })
}

/// Witnesses in `B_window` and their witness pairs by ring, scanning
/// `B_{window + r}`.
fn window_pairs(field: &impl Field, ev: &EventSpec, window: u64, r: u64) -> Result<(u64, Vec<u64>)> {
    let dim = field.dim();
    let outer = BoxGeometry::new(dim, (window + r) as usize, Boundary::Zero)?;
    let mut probe = AmbientProbe::new(dim, ev.max_size())?;
    let cell = (r.max(1)) as i64;
    let mut grid: HashMap<Vec<i64>, Vec<Vec<i64>>> = HashMap::new();
    let mut inside = Vec::new();
    for i in 0..outer.site_count() {
        let s = outer.site_at(i).0;
        if probe.witnesses(field, &s, ev) {
            let key: Vec<i64> = s.iter().map(|c| c.div_euclid(cell)).collect();
            if s.iter().all(|c| c.unsigned_abs() <= window) {
                inside.push(s.clone());
            }
            grid.entry(key).or_default().push(s);
        }
    }
    let mut rings = vec![0u64; r as usize];
    for y in &inside {
        let key: Vec<i64> = y.iter().map(|c| c.div_euclid(cell)).collect();
        for_each_neighbor_cell(&key, |k| {
            if let Some(list) = grid.get(k) {
                for z in list {
                    let d = y.iter().zip(z).map(|(a, b)| (a - b).unsigned_abs()).max().unwrap_or(0);
                    if d > 0 && d <= r {
                        rings[d as usize - 1] += 1;
                    }
                }
            }
        });
    }
    Ok((inside.len() as u64, rings))
}

fn for_each_neighbor_cell(key: &[i64], mut f: impl FnMut(&[i64])) {
    let d = key.len();
    let mut k = key.to_vec();
    let total = 3usize.pow(d as u32);
    for code in 0..total {
        let mut c = code;
        for a in 0..d {
            k[a] = key[a] + (c % 3) as i64 - 1;
            c /= 3;
        }
        f(&k);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clusters::max_cluster;

    fn line(bits: &[u8]) -> SiteConfig {
        let r = bits.len() / 2;
        let g = BoxGeometry::new(1, r, Boundary::Zero).unwrap();
        SiteConfig::new(g, bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn shells_partition_the_box_in_order() {
        for dim in 1..=3 {
            let mut all = Vec::new();
            for k in 0..=3 {
                let mut shell = Vec::new();
                for_each_shell_site(dim, k, |s| shell.push(s.to_vec()));
                assert!(shell.windows(2).all(|w| w[0] < w[1]));
                assert!(shell.iter().all(|s| s.iter().map(|c| c.abs()).max() == Some(k as i64)));
                all.extend(shell);
            }
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 7usize.pow(dim as u32));
        }
    }

    #[test]
    fn tau_examples() {
        let vacant = SiteConfig::vacant(BoxGeometry::new(2, 3, Boundary::Zero).unwrap());
        let ev = EventSpec::new(1).unwrap();
        for rule in [Rule::Box, Rule::Interior, Rule::Ambient] {
            let r = tau_event(&ConfigField(&vacant), &ev, 3, rule).unwrap();
            assert!(r.censored);
            assert_eq!(r.tau, 49);
        }
        // m = 1: first box containing an occupied site.
        let cfg = line(&[0, 0, 1, 0, 0]);
        let r = tau_event(&ConfigField(&line(&[0, 0, 0, 0, 1])), &ev, 2, Rule::Box).unwrap();
        assert_eq!((r.tau, r.hit_site.unwrap().0), (5, vec![2]));
        let r = tau_event(&ConfigField(&cfg), &ev, 2, Rule::Box).unwrap();
        assert_eq!(r.tau, 1);
    }

    #[test]
    fn tau_one_dimensional_run_of_two() {
        // d=1, m=2, p=1/2: P(tau <= 3) = 3/8 over the configurations of B_1.
        let ev = EventSpec::new(2).unwrap();
        let mut hits = 0;
        for mask in 0..8u8 {
            let bits = [mask & 1, mask >> 1 & 1, mask >> 2 & 1];
            let r = tau_event(&ConfigField(&line(&bits)), &ev, 1, Rule::Box).unwrap();
            if r.hit_by(3) {
                hits += 1;
            }
        }
        assert_eq!(hits, 3);
    }

    #[test]
    fn box_rule_matches_box_maximum() {
        for seed in 0..20 {
            let f = LazyBernoulli::new(2, 0.5, SeedSpec::new(3, seed)).unwrap();
            let n = 6;
            let cfg = materialize(&f, n).unwrap();
            let mn = max_cluster(&crate::clusters::label_clusters(&cfg)) as u64;
            for m in 1..=mn + 1 {
                let ev = EventSpec::new(m).unwrap().with_size_cap(u64::MAX).unwrap();
                let r = tau_event(&f, &ev, n as u64, Rule::Box).unwrap();
                assert_eq!(r.hit_by(volume(2, n as u64)), mn >= m, "seed {seed} m {m}");
                let r2 = tau_event(&ConfigField(&cfg), &ev, n as u64, Rule::Box).unwrap();
                assert_eq!(r, r2);
            }
        }
    }

    #[test]
    fn interior_never_precedes_box_and_ambient_is_exact() {
        let ev = EventSpec::new(3).unwrap();
        for seed in 0..30 {
            let f = LazyBernoulli::new(2, 0.45, SeedSpec::new(9, seed)).unwrap();
            let (tau, t) = tau_pair(&f, &ev, 8).unwrap();
            if t.hit_by(volume(2, 8)) {
                assert!(tau.hit_by(t.tau));
            }
            // Ambient hit: verified on a box large enough to contain the cluster.
            let a = tau_event(&f, &ev, 8, Rule::Ambient).unwrap();
            if let Some(site) = &a.hit_site {
                let big = materialize(&f, 8 + DEFAULT_SIZE_CAP as usize / 8).unwrap();
                let census = crate::clusters::label_clusters(&big);
                let idx = big.geometry().index_of(site).unwrap();
                let le = census.le_size_at(idx) as u64;
                assert!(le >= 3, "seed {seed}: {le}");
            }
        }
    }

    #[test]
    fn tau_monotone_in_m_and_stable_in_k_max() {
        for seed in 0..10 {
            let f = LazyBernoulli::new(2, 0.5, SeedSpec::new(4, seed)).unwrap();
            let mut last = 0;
            for m in 1..8 {
                let ev = EventSpec::new(m).unwrap();
                let r = tau_event(&f, &ev, 6, Rule::Box).unwrap();
                let t = if r.censored { u64::MAX } else { r.tau };
                assert!(t >= last);
                last = t;
                let wide = tau_event(&f, &ev, 10, Rule::Box).unwrap();
                if !r.censored {
                    assert_eq!(r, wide);
                }
            }
        }
    }

    #[test]
    fn event_probability_examples() {
        let g = BoxGeometry::new(1, 3, Boundary::Zero).unwrap();
        let ev = EventSpec::new(2).unwrap();
        assert!((event_prob_exact(&g, 0.5, &ev).unwrap() - 0.125).abs() < 1e-15);
        let ev1 = EventSpec::new(1).unwrap();
        // P(|C_le(0)| >= 1) = p (1 - p) in d = 1.
        assert!((event_prob_exact(&g, 0.3, &ev1).unwrap() - 0.21).abs() < 1e-15);
        let zero = event_prob(2, 0.0, &ev, 1000, 1).unwrap();
        assert_eq!(zero.estimate, 0.0);
        assert_eq!(zero.ci.0, 0.0);
        assert!(zero.ci.1 > 0.0);
        let mc = event_prob(1, 0.5, &ev, 200_000, 2).unwrap();
        assert!(mc.ci.0 < 0.125 && 0.125 < mc.ci.1, "{mc:?}");
    }

    #[test]
    fn localized_event_bounds() {
        let ev = EventSpec::new(3).unwrap().localized(2.0).unwrap();
        assert_eq!(ev.box_max(), 8);
        assert!(EventSpec::new(1).unwrap().localized(2.0).is_err());
        assert!(EventSpec::new(2).unwrap().localized(1.0).is_err());
        assert!(EventSpec::new(0).is_err());
    }

    #[test]
    fn lambda_for_independent_trials() {
        // Per-site occurrences i.i.d. Bernoulli(q): P(tau > V) = (1 - q)^V.
        use rand::{Rng, SeedableRng};
        let q = 1e-3;
        let dim = 2;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let records: Vec<HittingRecord> = (0..20_000)
            .map(|_| {
                let first: u64 = (1..).find(|_| rng.random::<f64>() < q).unwrap();
                let mut k = 0;
                while volume(dim, k) < first {
                    k += 1;
                }
                HittingRecord::hit(dim, k, SiteIndex::origin(dim))
            })
            .collect();
        let pe = EventProb {
            estimate: q,
            ci: (q, q),
            hits: 0,
            total: 0,
        };
        let l = lambda_estimate(&records, dim, &pe, 0.5).unwrap();
        assert_eq!((l.f_e, l.volume), (31, 25));
        assert!(l.ci.0 < 1.0 && 1.0 < l.ci.1, "{l:?}");
        let t = exponential_law_test(&records, dim, q, 1.0).unwrap();
        assert!(t.ks < 0.02, "{}", t.ks);
    }

    #[test]
    fn exponential_test_rejects_censoring() {
        let recs: Vec<HittingRecord> = (0..10).map(|_| HittingRecord::censored(2, 3)).collect();
        match exponential_law_test(&recs, 2, 1e-3, 1.0) {
            Err(Error::ExcessiveCensoring { censored, hint, .. }) => {
                assert_eq!(censored, 10);
                assert!(hint > 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn discrepancy_trivial_cases() {
        let pairs = run_hitting_pairs(2, 0.0, &EventSpec::new(2).unwrap(), 8, 50, 1).unwrap();
        assert_eq!(tau_vs_t_discrepancy(&pairs, 2, 8, 2).unwrap().differ, 0);
        let pairs = run_hitting_pairs(2, 0.3, &EventSpec::new(1).unwrap(), 8, 200, 1).unwrap();
        let d = tau_vs_t_discrepancy(&pairs, 2, 8, 1).unwrap();
        assert_eq!(d.fraction, 0.0);
    }

    #[test]
    fn second_moment_exact_examples() {
        let g = BoxGeometry::new(1, 4, Boundary::Zero).unwrap();
        let ev = EventSpec::new(2).unwrap();
        let s = second_moment_exact(&g, 0.3, &ev, 1.0).unwrap();
        assert_eq!(s.radius, 2);
        assert!(s.majorant.unwrap() > 0.0);
        assert_eq!(s.within_majorant, Some(true));
        assert!(s.sum <= s.majorant.unwrap());
        let z = second_moment_exact(&g, 0.0, &ev, 1.0).unwrap();
        assert_eq!(z.sum, 0.0);
        // 2^1.6 > 3: second witnesses appear at distance 3 only.
        let s = second_moment_exact(&g, 0.5, &ev, 1.6).unwrap();
        assert_eq!(s.radius, 3);
        assert!(s.rings[2] > 0.0 && s.rings[0] == 0.0 && s.rings[1] == 0.0);
        assert!((s.sum - 2.0 * 0.125).abs() < 1e-12);
        assert_eq!(s.within_majorant, Some(true));
    }

    #[test]
    fn second_moment_mc_matches_exact_on_the_line() {
        // d = 1, m = 1, radius 1: neighbouring sites cannot both be left ends.
        let ev = EventSpec::new(1).unwrap();
        let p: f64 = 0.4;
        let mc = SecondMomentMc {
            windows: 8,
            window: 20_000,
            budget: u64::MAX,
        };
        let s = second_moment_mc(1, p, &ev, 2.0, mc, 1).unwrap();
        assert_eq!(s.radius, 1);
        assert_eq!(s.sum, 0.0);
        let ev2 = EventSpec::new(2).unwrap();
        let s = second_moment_mc(1, p, &ev2, 2.0, mc, 1).unwrap();
        // Given -1 vacant and 0, 1 occupied, a second witness within distance
        // 4 sits at x in {-4, -3, 3, 4}, each with probability (1-p) p^2.
        let expect = 4.0 * (1.0 - p) * p * p;
        let se = s.stderr.unwrap();
        assert!((s.sum - expect).abs() < 4.0 * se, "{s:?} {expect}");
        assert!(s.rings[0] == 0.0 && s.rings[1] == 0.0);
        let tight = SecondMomentMc { budget: 10, ..mc };
        assert!(matches!(
            second_moment_mc(1, p, &ev2, 2.0, tight, 1),
            Err(Error::BudgetExhausted { .. })
        ));
    }
}
