//! Replica experiments for the maximal cluster `M_n` and their comparison
//! with Gumbel-type limit laws.

use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::clusters::{
    label_clusters, max_cluster, max_cluster_all_bc, max_finite_cluster, FiniteRule,
    MaxClusterResult,
};
use crate::error::{Error, Result};
use crate::lattice::{Boundary, BoxGeometry};
use crate::sampler::{child_seed, derive_stream, Model, SeedSpec, SiteConfig, Stream};
use crate::stats::{median_u64, quantile_sorted, wilson_interval, wls, Z95};

/// Which boundary variants a replica experiment computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BcMode {
    /// Only `M_n` with zero boundary; the field is sampled on `B_n` itself.
    ZeroOnly,
    /// Every variant, from a field sampled on the ambient box `B_{n+margin}`.
    All { margin: usize },
}

/// One row per replica; the free and periodic variants are present only in
/// [`BcMode::All`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExtremeRecord {
    pub replica: u64,
    pub m_zb: usize,
    pub m_fb: Option<usize>,
    pub m_pb: Option<usize>,
    pub m_finite: usize,
    pub m_fb_finite: Option<usize>,
}

impl ExtremeRecord {
    fn all(replica: u64, r: MaxClusterResult) -> Self {
        ExtremeRecord {
            replica,
            m_zb: r.m_zb,
            m_fb: Some(r.m_fb),
            m_pb: Some(r.m_pb),
            m_finite: r.m_finite,
            m_fb_finite: Some(r.m_fb_finite),
        }
    }

    /// All variants, when they were computed.
    pub fn result(&self) -> Option<MaxClusterResult> {
        Some(MaxClusterResult {
            m_zb: self.m_zb,
            m_fb: self.m_fb?,
            m_pb: self.m_pb?,
            m_finite: self.m_finite,
            m_fb_finite: self.m_fb_finite?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtremeSample {
    pub dim: usize,
    pub n: usize,
    pub model: Model,
    pub bc_mode: BcMode,
    pub master_seed: u64,
    pub records: Vec<ExtremeRecord>,
}

impl ExtremeSample {
    pub fn m_zb(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.m_zb as u64).collect()
    }

    pub fn m_finite(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.m_finite as u64).collect()
    }

    /// Per-replica results with every boundary variant; empty in
    /// [`BcMode::ZeroOnly`].
    pub fn results(&self) -> Vec<MaxClusterResult> {
        self.records.iter().filter_map(ExtremeRecord::result).collect()
    }
}

/// Master seed of the field realizations used by replica experiments; shared
/// with the hitting-time module so both can analyse the same configurations.
pub fn field_seed(master_seed: u64) -> u64 {
    child_seed(master_seed, "field")
}

/// The field of replica `replica` on `B_radius` (zero boundary).
pub fn replica_field(
    dim: usize,
    radius: usize,
    model: &Model,
    master_seed: u64,
    replica: u64,
) -> Result<SiteConfig> {
    let g = BoxGeometry::new(dim, radius, Boundary::Zero)?;
    model.sample(&g, SeedSpec::new(field_seed(master_seed), replica))
}

/// Computes `M_n` (and its variants) for `replicas` independent fields.
pub fn run_extremes(
    dim: usize,
    n: usize,
    model: &Model,
    replicas: u64,
    master_seed: u64,
    bc_mode: BcMode,
) -> Result<ExtremeSample> {
    model.validate(dim)?;
    let radius = match bc_mode {
        BcMode::ZeroOnly => n,
        BcMode::All { margin } => {
            if margin == 0 {
                return Err(Error::param("margin", "must be at least 1"));
            }
            n + margin
        }
    };
    BoxGeometry::new(dim, radius, Boundary::Zero)?;
    let records = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let field = replica_field(dim, radius, model, master_seed, r)?;
            Ok(match bc_mode {
                BcMode::ZeroOnly => {
                    let census = label_clusters(&field);
                    ExtremeRecord {
                        replica: r,
                        m_zb: max_cluster(&census),
                        m_fb: None,
                        m_pb: None,
                        m_finite: max_finite_cluster(&census, FiniteRule::BoxBoundary)?,
                        m_fb_finite: None,
                    }
                }
                BcMode::All { .. } => ExtremeRecord::all(r, max_cluster_all_bc(&field, n)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExtremeSample {
        dim,
        n,
        model: model.clone(),
        bc_mode,
        master_seed,
        records,
    })
}

/// One grid point of a Gumbel comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GumbelRow {
    pub x: f64,
    pub threshold: f64,
    pub empirical: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GumbelComparison {
    pub u_n: u64,
    pub a_n: f64,
    /// `zeta` subcritically, `eta (d-1)/d` supercritically.
    pub rate: f64,
    /// 1 subcritically, `u_n^{1/d}` supercritically.
    pub scale: f64,
    pub sup_distance: f64,
    pub table: Vec<GumbelRow>,
    /// `(P(M < u_n), P(M <= u_n))`: the two one-sided readings at `x = 0`.
    pub at_zero: (f64, f64),
}

/// Empirical CDF of a sorted sample.
fn ecdf(sorted: &[u64]) -> impl Fn(f64) -> f64 + '_ {
    let n = sorted.len() as f64;
    move |t: f64| sorted.partition_point(|&v| (v as f64) <= t) as f64 / n
}

fn at_zero(sorted: &[u64], u: u64) -> (f64, f64) {
    let n = sorted.len() as f64;
    let lt = sorted.partition_point(|&v| v < u) as f64 / n;
    let le = sorted.partition_point(|&v| v <= u) as f64 / n;
    (lt, le)
}

/// Default subcritical window: integers `-5..=10`.
pub fn default_sub_window() -> Vec<f64> {
    (-5..=10).map(f64::from).collect()
}

/// Default supercritical grid: `-3..=5` in steps of 1/4.
pub fn default_sup_window() -> Vec<f64> {
    (-12..=20).map(|k| k as f64 * 0.25).collect()
}

/// Compares `P(M <= u_n + x)` with `exp(-a_n e^{-zeta x})` over integer `x`.
pub fn gumbel_compare_sub(
    values: &[u64],
    u_n: u64,
    a_n: f64,
    zeta: f64,
    window: Option<&[f64]>,
) -> Result<GumbelComparison> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let default = default_sub_window();
    let window = match window {
        Some(w) if !w.is_empty() => w,
        _ => &default,
    };
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let f = ecdf(&sorted);
    let table: Vec<GumbelRow> = window
        .iter()
        .map(|&x| {
            let t = u_n as f64 + x;
            GumbelRow {
                x,
                threshold: t,
                empirical: f(t),
                predicted: (-a_n * (-x * zeta).exp()).exp(),
            }
        })
        .collect();
    Ok(GumbelComparison {
        u_n,
        a_n,
        rate: zeta,
        scale: 1.0,
        sup_distance: sup_distance(&table),
        at_zero: at_zero(&sorted, u_n),
        table,
    })
}

/// Compares `P(M <= u_n + x u_n^{1/d})` with `exp(-e^{-x eta (d-1)/d})`.
pub fn gumbel_compare_sup(
    values: &[u64],
    u_n: u64,
    eta: f64,
    dim: usize,
    window: Option<&[f64]>,
) -> Result<GumbelComparison> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if dim < 2 {
        return Err(Error::param("dim", "supercritical comparison needs d >= 2"));
    }
    let default = default_sup_window();
    let window = match window {
        Some(w) if !w.is_empty() => w,
        _ => &default,
    };
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let f = ecdf(&sorted);
    let d = dim as f64;
    let rate = eta * (d - 1.0) / d;
    let scale = (u_n as f64).powf(1.0 / d);
    let table: Vec<GumbelRow> = window
        .iter()
        .map(|&x| {
            let t = u_n as f64 + x * scale;
            GumbelRow {
                x,
                threshold: t,
                empirical: f(t),
                predicted: (-(-x * rate).exp()).exp(),
            }
        })
        .collect();
    Ok(GumbelComparison {
        u_n,
        a_n: 1.0,
        rate,
        scale,
        sup_distance: sup_distance(&table),
        at_zero: at_zero(&sorted, u_n),
        table,
    })
}

fn sup_distance(table: &[GumbelRow]) -> f64 {
    table
        .iter()
        .map(|r| (r.empirical - r.predicted).abs())
        .fold(0.0, f64::max)
}

/// Regime and fitted rate used for reference scaling constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Regime {
    Subcritical { zeta: f64 },
    Supercritical { eta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    /// Normalization exponent: ratios are `M_n / (log n)^{1/delta}`.
    pub delta: f64,
    pub rows: Vec<ScalingRow>,
    /// Intercept of the mean ratio against `1 / log n`.
    pub extrapolated: f64,
    /// `d zeta` or `d^{(d-1)/d} eta`.
    pub stated_constant: Option<f64>,
    /// `d / zeta` or `(d / eta)^{d/(d-1)}`, from
    /// `P(|C(0)| > C (log n)^{1/delta}) = n^{-d(1+o(1))}`.
    pub derived_constant: Option<f64>,
    /// All observations were 0.
    pub degenerate: bool,
}

/// Per-`n` ratios `M_n / (log n)^{1/delta}` over a grid of radii, with the
/// stated and derived reference constants side by side.
pub fn scaling_constant(
    grid: &[(usize, Vec<u64>)],
    dim: usize,
    delta: f64,
    regime: Option<Regime>,
) -> Result<ScalingReport> {
    if grid.len() < 3 {
        return Err(Error::param("grid", "need at least 3 radii"));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::param("delta", "must lie in (0, 1]"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    let mut degenerate = true;
    for (n, values) in grid {
        if *n < 2 || values.is_empty() {
            return Err(Error::param("grid", "radii must be >= 2 with nonempty samples"));
        }
        let norm = (*n as f64).ln().powf(1.0 / delta);
        let mut r: Vec<f64> = values.iter().map(|&v| v as f64 / norm).collect();
        r.sort_by(f64::total_cmp);
        degenerate &= values.iter().all(|&v| v == 0);
        rows.push(ScalingRow {
            n: *n,
            mean: r.iter().sum::<f64>() / r.len() as f64,
            median: median_u64(values) / norm,
            q10: quantile_sorted(&r, 0.1),
            q90: quantile_sorted(&r, 0.9),
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| 1.0 / (r.n as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let extrapolated = wls(&x, &y, &vec![1.0; x.len()]).map_or(f64::NAN, |f| f.intercept);
    let d = dim as f64;
    let (stated, derived) = match regime {
        None => (None, None),
        Some(Regime::Subcritical { zeta }) => (Some(d * zeta), Some(d / zeta)),
        Some(Regime::Supercritical { eta }) => (
            Some(d.powf((d - 1.0) / d) * eta),
            (dim > 1).then(|| (d / eta).powf(d / (d - 1.0))),
        ),
    };
    Ok(ScalingReport {
        delta,
        rows,
        extrapolated,
        stated_constant: if degenerate { None } else { stated },
        derived_constant: if degenerate { None } else { derived },
        degenerate,
    })
}

/// Disagreement fraction with a 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Disagreement {
    pub count: u64,
    pub total: u64,
    pub fraction: f64,
    pub ci: (f64, f64),
}

impl Disagreement {
    fn new(count: u64, total: u64) -> Self {
        Disagreement {
            count,
            total,
            fraction: if total == 0 { 0.0 } else { count as f64 / total as f64 },
            ci: wilson_interval(count, total, Z95),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BcDiscrepancy {
    pub n: usize,
    pub zb_vs_fb: Disagreement,
    pub zb_vs_pb: Disagreement,
    /// Whether the comparison used the finite-cluster variants.
    pub finite: bool,
}

/// Fractions of replicas where the boundary variants of `M_n` disagree.
/// With `finite`, zero and free boundary are compared through their
/// finite-cluster variants (the supercritical reading); the periodic
/// comparison stays on the plain maxima and is advisory there.
pub fn bc_discrepancy(n: usize, results: &[MaxClusterResult], finite: bool) -> BcDiscrepancy {
    let total = results.len() as u64;
    let fb = results
        .iter()
        .filter(|r| {
            if finite {
                r.m_finite != r.m_fb_finite
            } else {
                r.m_zb != r.m_fb
            }
        })
        .count() as u64;
    let pb = results.iter().filter(|r| r.m_zb != r.m_pb).count() as u64;
    BcDiscrepancy {
        n,
        zb_vs_fb: Disagreement::new(fb, total),
        zb_vs_pb: Disagreement::new(pb, total),
        finite,
    }
}

/// Whether a sequence of fractions (ordered by increasing `n`) is
/// non-increasing up to sampling error: no later lower confidence bound
/// exceeds an earlier upper bound.
pub fn non_increasing_within_ci(seq: &[Disagreement]) -> bool {
    seq.iter()
        .enumerate()
        .all(|(i, a)| seq[i + 1..].iter().all(|b| b.ci.0 <= a.ci.1))
}

/// Maxima of `volume` independent draws, one per replica.
pub fn iid_maxima<F>(volume: u64, replicas: u64, master_seed: u64, draw: F) -> Vec<u64>
where
    F: Fn(&mut Stream) -> u64 + Sync,
{
    let master = child_seed(master_seed, "iid-maxima");
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = derive_stream(SeedSpec::new(master, r));
            (0..volume).map(|_| draw(&mut rng)).max().unwrap_or(0)
        })
        .collect()
}

/// Draw with `P(X >= n) = r^n` by inversion.
pub fn geometric_draw(r: f64) -> impl Fn(&mut Stream) -> u64 + Sync {
    let lr = r.ln();
    move |rng: &mut Stream| {
        // Uniform on (0, 1].
        let u = ((rng.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64;
        (u.ln() / lr).floor() as u64
    }
}
