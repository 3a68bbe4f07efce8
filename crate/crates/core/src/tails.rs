//! Cluster-size tails: sampling `|C(0)|` on the infinite lattice, rate fits,
//! and the quantile sequences `v_n`, `u_n(x)` used to center maxima.

use std::collections::BTreeMap;
use std::io::Write;

use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampler::{child_seed, derive_stream, SeedSpec, Threshold};
use crate::stats::{wls, LinearFit};

/// Observed sizes with right-censoring: a censored observation records only a
/// lower bound on the size.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TailSample {
    exact: BTreeMap<u64, u64>,
    censored: BTreeMap<u64, u64>,
    total: u64,
}

impl TailSample {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(values: impl IntoIterator<Item = u64>) -> Self {
        let mut s = Self::new();
        for v in values {
            s.push(v);
        }
        s
    }

    pub fn push(&mut self, value: u64) {
        self.push_n(value, 1);
    }

    pub fn push_n(&mut self, value: u64, count: u64) {
        *self.exact.entry(value).or_insert(0) += count;
        self.total += count;
    }

    /// Records an observation known only to be `>= bound`.
    pub fn push_censored(&mut self, bound: u64) {
        *self.censored.entry(bound).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &TailSample) {
        for (&v, &c) in &other.exact {
            *self.exact.entry(v).or_insert(0) += c;
        }
        for (&v, &c) in &other.censored {
            *self.censored.entry(v).or_insert(0) += c;
        }
        self.total += other.total;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn censored_count(&self) -> u64 {
        self.censored.values().sum()
    }

    /// Smallest censoring bound, if any observation is censored.
    pub fn censoring_horizon(&self) -> Option<u64> {
        self.censored.keys().next().copied()
    }

    pub fn max_value(&self) -> u64 {
        let a = self.exact.keys().next_back().copied().unwrap_or(0);
        let b = self.censored.keys().next_back().copied().unwrap_or(0);
        a.max(b)
    }

    /// Observations `>= n`, counting a censored one when its bound is `>= n`.
    pub fn count_ge(&self, n: u64) -> u64 {
        self.exact.range(n..).map(|(_, c)| c).sum::<u64>()
            + self.censored.range(n..).map(|(_, c)| c).sum::<u64>()
    }

    /// Uncensored observations `>= n`.
    pub fn finite_count_ge(&self, n: u64) -> u64 {
        self.exact.range(n..).map(|(_, c)| c).sum()
    }

    /// Censored observations whose bound is at most `n`.
    pub fn censored_at_most(&self, n: u64) -> u64 {
        self.censored.range(..=n).map(|(_, c)| c).sum()
    }

    /// Lower empirical quantile, censored observations placed at their bound.
    pub fn quantile(&self, q: f64) -> u64 {
        let target = ((q * self.total as f64).ceil() as u64).max(1);
        let mut merged: BTreeMap<u64, u64> = self.exact.clone();
        for (&v, &c) in &self.censored {
            *merged.entry(v).or_insert(0) += c;
        }
        let mut acc = 0;
        for (v, c) in merged {
            acc += c;
            if acc >= target {
                return v;
            }
        }
        self.max_value()
    }

    /// Lower quantile among uncensored observations only.
    pub fn finite_quantile(&self, q: f64) -> u64 {
        let finite: u64 = self.exact.values().sum();
        let target = ((q * finite as f64).ceil() as u64).max(1);
        let mut acc = 0;
        for (&v, &c) in &self.exact {
            acc += c;
            if acc >= target {
                return v;
            }
        }
        0
    }

    /// Cumulative counts for fast tail queries.
    pub fn empirical(&self) -> EmpiricalTail {
        let top = self.max_value() as usize + 2;
        let mut ge = vec![0u64; top];
        let mut finite_ge = vec![0u64; top];
        for (&v, &c) in &self.exact {
            ge[v as usize] += c;
            finite_ge[v as usize] += c;
        }
        for (&v, &c) in &self.censored {
            ge[v as usize] += c;
        }
        for i in (0..top - 1).rev() {
            ge[i] += ge[i + 1];
            finite_ge[i] += finite_ge[i + 1];
        }
        EmpiricalTail {
            ge,
            finite_ge,
            total: self.total,
            finite_only: false,
        }
    }

    /// CSV rows `n,tail,count,censored_count` for `n = 0..=max`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "n,tail,count,censored_count")?;
        let e = self.empirical();
        for n in 0..=self.max_value() {
            let c = e.count_ge(n);
            writeln!(
                out,
                "{n},{:.17e},{c},{}",
                c as f64 / self.total.max(1) as f64,
                self.censored_at_most(n)
            )?;
        }
        Ok(())
    }
}

/// A non-increasing function `x -> P(X >= x)` on the naturals.
pub trait Tail {
    fn tail(&self, x: u64) -> f64;
}

impl<F: Fn(u64) -> f64> Tail for F {
    fn tail(&self, x: u64) -> f64 {
        self(x)
    }
}

/// Empirical tail with O(1) lookups.
#[derive(Debug, Clone)]
pub struct EmpiricalTail {
    ge: Vec<u64>,
    finite_ge: Vec<u64>,
    total: u64,
    finite_only: bool,
}

impl EmpiricalTail {
    /// The tail `P(x <= X < infinity)` that drops censored observations from
    /// the numerator but keeps them in the denominator.
    pub fn finite(mut self) -> Self {
        self.finite_only = true;
        self
    }

    pub fn count_ge(&self, x: u64) -> u64 {
        let v = if self.finite_only {
            &self.finite_ge
        } else {
            &self.ge
        };
        v.get(x as usize).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

impl Tail for EmpiricalTail {
    fn tail(&self, x: u64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.count_ge(x) as f64 / self.total as f64
    }
}

/// Fitted tail parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailEstimate {
    pub mode: String,
    /// `zeta` for exponential fits, `eta` for stretched-exponential fits.
    pub rate: f64,
    pub delta: f64,
    pub prefactor_exponent: Option<f64>,
    /// Fitted `log C` in `P(n <= X < infinity) ~ C exp(-eta n^delta)`.
    pub log_prefactor: Option<f64>,
    pub stderr_rate: f64,
    pub stderr_delta: f64,
    pub window: (u64, u64),
    pub r2: f64,
    /// Rate from the mean log ratio `log[P(X >= n+1) / P(X >= n)]`.
    pub ratio_rate: Option<f64>,
    pub ratio_stderr: Option<f64>,
    /// More than 10% of the in-window observations are censored.
    pub bias_warning: bool,
    /// A stretch exponent near 1 was fitted in supercritical mode.
    pub regime_mismatch: bool,
}

/// Window of consecutive `n` with positive tail counts and the derived
/// quantities used by the fits.
struct TailWindow {
    ns: Vec<u64>,
    counts: Vec<u64>,
    total: u64,
}

impl TailWindow {
    fn new(t: &EmpiricalTail, lo: u64, hi: u64) -> Result<Self> {
        if t.count_ge(lo) == 0 {
            return Err(Error::EmptyTailWindow { start: lo });
        }
        let ns: Vec<u64> = (lo..=hi).take_while(|&n| t.count_ge(n) > 0).collect();
        if ns.len() < 2 {
            return Err(Error::EmptyTailWindow { start: lo });
        }
        let counts = ns.iter().map(|&n| t.count_ge(n)).collect();
        Ok(TailWindow {
            ns,
            counts,
            total: t.total(),
        })
    }

    fn log_tail(&self, i: usize) -> f64 {
        -(self.counts[i] as f64 / self.total as f64).ln()
    }

    /// Delta-method variance of `sum_i a_i g'(L_i) L_i` where `L_i = -log T(n_i)`
    /// and `deriv[i] = a_i g'(L_i)`. The log tail at the window start has
    /// binomial variance and successive log ratios are conditionally
    /// independent binomial thinnings.
    fn linear_variance(&self, deriv: &[f64]) -> f64 {
        let t0 = self.counts[0] as f64 / self.total as f64;
        let s0: f64 = deriv.iter().sum();
        let mut var = if t0 < 1.0 {
            s0 * s0 * (1.0 - t0) / (t0 * self.total as f64)
        } else {
            0.0
        };
        for j in 0..self.ns.len() - 1 {
            let r = self.counts[j + 1] as f64 / self.counts[j] as f64;
            let tail_sum: f64 = deriv[j + 1..].iter().sum();
            if r > 0.0 {
                var += tail_sum * tail_sum * (1.0 - r) / (r * self.counts[j] as f64);
            }
        }
        var
    }
}

/// WLS fit of `y_i = g(L_i)` against `x_i`, with coefficient-level stderr.
fn fit_window(
    w: &TailWindow,
    x: &[f64],
    g: impl Fn(f64) -> f64,
    dg: impl Fn(f64) -> f64,
) -> Result<(f64, f64, f64, f64, f64)> {
    let y: Vec<f64> = (0..w.ns.len()).map(|i| g(w.log_tail(i))).collect();
    let wt: Vec<f64> = w.counts.iter().map(|&c| c as f64).collect();
    let fit = wls(x, &y, &wt).ok_or_else(|| Error::Degenerate("degenerate fit window".into()))?;
    let sw: f64 = wt.iter().sum();
    let xm = x.iter().zip(&wt).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(&wt).map(|(a, b)| b * (a - xm) * (a - xm)).sum();
    let slope_coef: Vec<f64> = (0..x.len())
        .map(|i| wt[i] * (x[i] - xm) / sxx * dg(w.log_tail(i)))
        .collect();
    let icpt_coef: Vec<f64> = (0..x.len())
        .map(|i| (wt[i] / sw - xm * wt[i] * (x[i] - xm) / sxx) * dg(w.log_tail(i)))
        .collect();
    Ok((
        fit.slope,
        fit.intercept,
        w.linear_variance(&slope_coef).sqrt(),
        w.linear_variance(&icpt_coef).sqrt(),
        fit.r2,
    ))
}

fn window_bias(sample: &TailSample, lo: u64, hi: u64) -> bool {
    let inside = sample.count_ge(lo);
    let censored = sample.censored_at_most(hi) - sample.censored_at_most(lo.saturating_sub(1));
    let beyond = sample.censored.range(hi + 1..).map(|(_, c)| c).sum::<u64>();
    inside > 0 && (censored + beyond) as f64 > 0.1 * inside as f64 && censored > 0
}

/// Exponential tail fit: least-squares slope of `-log P(X >= n)` against `n`.
/// The default window is the empirical `[q(0.9), q(0.999)]`.
pub fn estimate_zeta(sample: &TailSample, window: Option<(u64, u64)>) -> Result<TailEstimate> {
    if sample.total() == 0 {
        return Err(Error::EmptyInput);
    }
    let (lo, hi) = window.unwrap_or_else(|| (sample.quantile(0.9), sample.quantile(0.999)));
    let t = sample.empirical();
    let w = TailWindow::new(&t, lo, hi)?;
    if w.counts[0] < 100 {
        return Err(Error::Degenerate(format!(
            "only {} observations at or above the window start {lo}",
            w.counts[0]
        )));
    }
    let x: Vec<f64> = w.ns.iter().map(|&n| n as f64).collect();
    let (slope, _, se, _, r2) = fit_window(&w, &x, |l| l, |_| 1.0)?;

    // Companion estimator: count-weighted mean of the log ratios.
    let k = w.ns.len() - 1;
    let sw: f64 = w.counts[..k].iter().map(|&c| c as f64).sum();
    let mut ratio = 0.0;
    let mut var = 0.0;
    for j in 0..k {
        let c = w.counts[j] as f64;
        let r = w.counts[j + 1] as f64 / c;
        ratio += c / sw * -(r.ln());
        var += (c / sw).powi(2) * (1.0 - r) / (r * c);
    }
    if slope <= 0.0 {
        return Err(Error::Degenerate(format!("non-positive fitted rate {slope}")));
    }
    Ok(TailEstimate {
        mode: "zeta".into(),
        rate: slope,
        delta: 1.0,
        prefactor_exponent: None,
        log_prefactor: None,
        stderr_rate: se,
        stderr_delta: 0.0,
        window: (w.ns[0], *w.ns.last().unwrap()),
        r2,
        ratio_rate: Some(ratio),
        ratio_stderr: Some(var.sqrt()),
        bias_warning: window_bias(sample, lo, hi),
        regime_mismatch: false,
    })
}

/// Default supercritical window: from the first `n` where the finite tail
/// drops to `10^-3` up to the last `n` with at least 100 finite observations.
pub fn default_eta_window(sample: &TailSample) -> (u64, u64) {
    let t = sample.empirical().finite();
    let total = t.total() as f64;
    let lo = (1..)
        .find(|&n| (t.count_ge(n) as f64) <= 1e-3 * total)
        .unwrap_or(1);
    let hi = (lo..).take_while(|&n| t.count_ge(n) >= 100).last().unwrap_or(lo);
    (lo, hi)
}

/// Stretched-exponential fit of the finite tail
/// `P(n <= X < infinity) ~ C exp(-eta n^delta)`, i.e. `log(-log F(n) + log C)`
/// linear in `log n`. The constant `C` is fitted jointly; `fixed_delta`
/// imposes the stretch exponent.
pub fn estimate_eta_delta(
    sample: &TailSample,
    window: Option<(u64, u64)>,
    fixed_delta: Option<f64>,
) -> Result<TailEstimate> {
    if sample.total() == 0 {
        return Err(Error::EmptyInput);
    }
    let (lo, hi) = window.unwrap_or_else(|| default_eta_window(sample));
    let lo = lo.max(1);
    let t = sample.empirical().finite();
    let w = TailWindow::new(&t, lo, hi)?;
    if w.counts[0] == w.total {
        return Err(Error::Degenerate("finite tail equals 1 at the window start".into()));
    }
    let bias_warning = window_bias(sample, lo, hi);
    let window = (w.ns[0], *w.ns.last().unwrap());
    match fixed_delta {
        Some(delta) => {
            if !(delta > 0.0 && delta <= 1.0) {
                return Err(Error::param("delta", "must lie in (0, 1]"));
            }
            let x: Vec<f64> = w.ns.iter().map(|&n| (n as f64).powf(delta)).collect();
            let (eta, c, se, _, r2) = fit_window(&w, &x, |l| l, |_| 1.0)?;
            if eta <= 0.0 {
                return Err(Error::Degenerate(format!("non-positive fitted rate {eta}")));
            }
            Ok(TailEstimate {
                mode: "eta-fixed-delta".into(),
                rate: eta,
                delta,
                prefactor_exponent: None,
                log_prefactor: Some(-c),
                stderr_rate: se,
                stderr_delta: 0.0,
                window,
                r2,
                ratio_rate: None,
                ratio_stderr: None,
                bias_warning,
                regime_mismatch: false,
            })
        }
        None => {
            let fit = profile_stretched_fit(&w)?;
            Ok(TailEstimate {
                mode: "eta-delta".into(),
                rate: fit.eta,
                delta: fit.delta.min(1.0),
                prefactor_exponent: None,
                log_prefactor: Some(-fit.c),
                stderr_rate: fit.se_eta,
                stderr_delta: fit.se_delta,
                window,
                r2: fit.r2,
                ratio_rate: None,
                ratio_stderr: None,
                bias_warning,
                regime_mismatch: fit.delta > 0.9,
            })
        }
    }
}

struct StretchedFit {
    c: f64,
    eta: f64,
    delta: f64,
    se_eta: f64,
    se_delta: f64,
    r2: f64,
}

/// Weighted least squares of `-log F(n) = c + eta n^delta`, profiling out the
/// linear parameters `(c, eta)` over a grid of `delta` refined by golden
/// section. Standard errors linearize the model at the optimum.
fn profile_stretched_fit(w: &TailWindow) -> Result<StretchedFit> {
    let k = w.ns.len();
    if k < 3 {
        return Err(Error::EmptyTailWindow { start: w.ns[0] });
    }
    let y: Vec<f64> = (0..k).map(|i| w.log_tail(i)).collect();
    let wt: Vec<f64> = w.counts.iter().map(|&c| c as f64).collect();
    let logn: Vec<f64> = w.ns.iter().map(|&n| (n as f64).ln()).collect();
    let sse_at = |delta: f64| -> Option<(f64, LinearFit)> {
        let x: Vec<f64> = logn.iter().map(|l| (delta * l).exp()).collect();
        let f = wls(&x, &y, &wt)?;
        let sse = (0..k)
            .map(|i| wt[i] * (y[i] - f.intercept - f.slope * x[i]).powi(2))
            .sum();
        Some((sse, f))
    };
    let (mut best, mut best_sse) = (f64::NAN, f64::INFINITY);
    for j in 1..=400 {
        let d = j as f64 * 0.005;
        if let Some((sse, _)) = sse_at(d) {
            if sse < best_sse {
                best_sse = sse;
                best = d;
            }
        }
    }
    if best.is_nan() {
        return Err(Error::Degenerate("degenerate fit window".into()));
    }
    let (mut a, mut b) = ((best - 0.005).max(1e-4), best + 0.005);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let m1 = b - g * (b - a);
        let m2 = a + g * (b - a);
        let s1 = sse_at(m1).map_or(f64::INFINITY, |v| v.0);
        let s2 = sse_at(m2).map_or(f64::INFINITY, |v| v.0);
        if s1 <= s2 {
            b = m2;
        } else {
            a = m1;
        }
    }
    let delta = 0.5 * (a + b);
    let (sse, lin) = sse_at(delta).ok_or_else(|| Error::Degenerate("degenerate fit".into()))?;
    let (c, eta) = (lin.intercept, lin.slope);
    if eta <= 0.0 || delta <= 0.0 {
        return Err(Error::Degenerate(format!(
            "non-positive fitted parameters eta = {eta}, delta = {delta}"
        )));
    }

    // Linearized estimator: theta = (J^T W J)^{-1} J^T W y.
    let jac: Vec<[f64; 3]> = logn
        .iter()
        .map(|&l| {
            let nd = (delta * l).exp();
            [1.0, nd, eta * nd * l]
        })
        .collect();
    let mut m = [[0.0; 3]; 3];
    for (row, &wi) in jac.iter().zip(&wt) {
        for r in 0..3 {
            for s in 0..3 {
                m[r][s] += wi * row[r] * row[s];
            }
        }
    }
    let inv = invert3(&m).ok_or_else(|| Error::Degenerate("singular fit".into()))?;
    let coef = |r: usize| -> Vec<f64> {
        (0..k)
            .map(|i| wt[i] * (0..3).map(|s| inv[r][s] * jac[i][s]).sum::<f64>())
            .collect()
    };
    let ym = y.iter().zip(&wt).map(|(a, b)| a * b).sum::<f64>() / wt.iter().sum::<f64>();
    let sst: f64 = y.iter().zip(&wt).map(|(a, b)| b * (a - ym).powi(2)).sum();
    Ok(StretchedFit {
        c,
        eta,
        delta,
        se_eta: w.linear_variance(&coef(1)).sqrt(),
        se_delta: w.linear_variance(&coef(2)).sqrt(),
        r2: if sst > 0.0 { 1.0 - sse / sst } else { 1.0 },
    })
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-300 {
        return None;
    }
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (s, v) in row.iter_mut().enumerate() {
            let (r1, r2) = ((s + 1) % 3, (s + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    Some(out)
}

/// Threshold and prefactor of a tail quantile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantile {
    /// Scale (box volume) the quantile refers to.
    pub scale: f64,
    pub v: u64,
    /// `scale * tail(v)`, in `(0, 1]`.
    pub b: f64,
}

/// Smallest `x` with `tail(x) <= target`, by galloping then bisection.
fn first_below(tail: &impl Tail, target: f64) -> Result<u64> {
    if tail.tail(0) <= target {
        return Ok(0);
    }
    let mut hi = 1u64;
    while tail.tail(hi) > target {
        if hi >= 1 << 40 {
            return Err(Error::Degenerate(format!(
                "tail never drops to {target:e}"
            )));
        }
        hi *= 2;
    }
    let mut lo = hi / 2;
    // tail(lo) > target >= tail(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if tail.tail(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// `v_n = inf{x : tail(x) <= 1/n}` and `b_n = n tail(v_n)`.
pub fn compute_vn(tail: &impl Tail, n: f64) -> Result<Quantile> {
    if !(n >= 1.0) {
        return Err(Error::param("n", "scale must be at least 1"));
    }
    let v = first_below(tail, 1.0 / n)?;
    let tv = tail.tail(v);
    if tv <= 0.0 {
        return Err(Error::BelowResolution {
            target: 1.0 / n,
            floor: tail.tail(v.saturating_sub(1)),
        });
    }
    Ok(Quantile {
        scale: n,
        v,
        b: n * tv,
    })
}

/// `u_n(x)`: smallest `u` with `tail(u) <= e^{-x} / volume`, and
/// `a_n = volume * e^x * tail(u)`.
pub fn compute_unx(tail: &impl Tail, volume: f64, x: f64) -> Result<(u64, f64)> {
    if !(volume >= 1.0) {
        return Err(Error::param("volume", "must be at least 1"));
    }
    let target = (-x).exp() / volume;
    let u = first_below(tail, target)?;
    let tu = tail.tail(u);
    if tu <= 0.0 {
        return Err(Error::BelowResolution {
            target,
            floor: tail.tail(u.saturating_sub(1)),
        });
    }
    Ok((u, (tu / target).min(1.0)))
}

/// Prefactor for comparing `P(M <= u + x)` with `exp(-a e^{-zeta x})`.
///
/// `M <= u + x` means no attributed cluster reaches `u + x + 1`, so the
/// Poisson approximation is `exp(-volume * tail(u + x + 1))`; the matching
/// prefactor at `x = 0` is `volume * tail(u + 1)`.
pub fn gumbel_prefactor(tail: &impl Tail, u: u64, volume: f64) -> f64 {
    volume * tail.tail(u + 1)
}

/// Gumbel centering read off a measured tail near the volume quantile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalCentering {
    /// `u_n = inf{x : tail(x) <= 1/volume}`.
    pub u: u64,
    /// `volume * tail(u + 1)` straight from the empirical tail.
    pub a_raw: f64,
    /// Same prefactor from the local exponential fit.
    pub a: f64,
    /// Local decay rate of the tail around `u`.
    pub zeta: f64,
    pub stderr_zeta: f64,
    pub window: (u64, u64),
}

/// Fit `-log tail(n) = c + zeta n` on `[u - below, u + above]` and return
/// the smoothed prefactor `volume * exp(-c - zeta (u + 1))` with the local
/// rate. A handful of counts sit at `u` itself, so the raw prefactor is noisy.
pub fn local_centering(
    sample: &TailSample,
    volume: f64,
    below: u64,
    above: u64,
) -> Result<LocalCentering> {
    if sample.total() == 0 {
        return Err(Error::EmptyInput);
    }
    let t = sample.empirical();
    let q = compute_vn(&t, volume)?;
    let u = q.v;
    let w = TailWindow::new(&t, u.saturating_sub(below), u + above)?;
    let x: Vec<f64> = w.ns.iter().map(|&n| n as f64).collect();
    let (zeta, c, se, _, _) = fit_window(&w, &x, |l| l, |_| 1.0)?;
    if zeta <= 0.0 {
        return Err(Error::Degenerate(format!("non-positive local rate {zeta}")));
    }
    Ok(LocalCentering {
        u,
        a_raw: gumbel_prefactor(&t, u, volume),
        a: volume * (-c - zeta * (u + 1) as f64).exp(),
        zeta,
        stderr_zeta: se,
        window: (w.ns[0], *w.ns.last().unwrap()),
    })
}

/// `(2n+1)^d` as a float.
pub fn box_volume(dim: usize, radius: usize) -> f64 {
    ((2 * radius + 1) as f64).powi(dim as i32)
}

/// Floor that treats values within `1e-9` (relative) of an integer as that
/// integer.
fn tolerant_floor(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= 1e-9 * v.abs().max(1.0) {
        r
    } else {
        v.floor()
    }
}

/// `floor(log n / zeta + alpha log log n / zeta)`.
pub fn classical_un_sub(zeta: f64, alpha: f64, n: f64) -> Result<u64> {
    if !(zeta > 0.0) {
        return Err(Error::param("zeta", "must be positive"));
    }
    if !(n >= 3.0) {
        return Err(Error::param("n", "must be at least 3"));
    }
    let l = n.ln();
    let v = tolerant_floor(l / zeta + alpha * l.ln() / zeta);
    if v < 0.0 {
        return Err(Error::param("alpha", format!("threshold {v} is negative")));
    }
    Ok(v as u64)
}

/// `floor((log n / eta + alpha log log n / (eta delta) + x)^(1/delta))`.
pub fn classical_un_sup(eta: f64, alpha: f64, delta: f64, n: f64, x: f64) -> Result<u64> {
    if !(eta > 0.0) {
        return Err(Error::param("eta", "must be positive"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param("delta", "must lie in (0, 1)"));
    }
    if !(n >= 3.0) {
        return Err(Error::param("n", "must be at least 3"));
    }
    let l = n.ln();
    let arg = l / eta + alpha * l.ln() / (eta * delta) + x;
    if arg < 0.0 {
        return Err(Error::param(
            "x",
            format!("power argument log n/eta + alpha loglog n/(eta delta) + x = {arg} is negative"),
        ));
    }
    Ok(tolerant_floor(arg.powf(1.0 / delta)) as u64)
}

/// Sizes of the origin's cluster on the infinite lattice.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OriginSample {
    /// `|C(0)|`, censored when the exploration exceeded the cap.
    pub cluster: TailSample,
    /// `|C_le(0)|`, censored alongside `cluster`.
    pub le: TailSample,
}

impl OriginSample {
    fn merge(mut self, other: OriginSample) -> Self {
        self.cluster.merge(&other.cluster);
        self.le.merge(&other.le);
        self
    }
}

const ORIGIN_BLOCK: u64 = 4096;

/// Samples `count` independent origin clusters of Bernoulli(`p`) site
/// percolation on `Z^d` by lazy breadth-first exploration. Clusters larger
/// than `cap` are censored at `cap + 1`; in the supercritical phase these are
/// the proxy for the infinite cluster.
pub fn sample_origin_clusters(
    dim: usize,
    p: f64,
    count: u64,
    cap: u64,
    seed: u64,
) -> Result<OriginSample> {
    if dim == 0 {
        return Err(Error::param("dim", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param("p", "must lie in [0, 1]"));
    }
    if cap == 0 {
        return Err(Error::param("cap", "must be at least 1"));
    }
    let master = child_seed(seed, "origin-clusters");
    let blocks = count.div_ceil(ORIGIN_BLOCK);
    let out = (0..blocks)
        .into_par_iter()
        .map_init(
            || OriginExplorer::new(dim, cap),
            |ex, b| {
                let mut rng = derive_stream(SeedSpec::new(master, b));
                let n = ORIGIN_BLOCK.min(count - b * ORIGIN_BLOCK);
                let mut s = OriginSample::default();
                let th = Threshold::new(p);
                for _ in 0..n {
                    match ex.explore(&mut rng, th) {
                        Explored::Finite { size, le } => {
                            s.cluster.push(size);
                            s.le.push(if le { size } else { 0 });
                        }
                        Explored::Censored => {
                            s.cluster.push_censored(cap + 1);
                            s.le.push_censored(cap + 1);
                        }
                    }
                }
                s
            },
        )
        .reduce(OriginSample::default, OriginSample::merge);
    Ok(out)
}

enum Explored {
    Finite { size: u64, le: bool },
    Censored,
}

/// Breadth-first explorer over a stamped grid (or a hash map when the grid
/// would be too large), reused across samples.
struct OriginExplorer {
    dim: usize,
    cap: u64,
    side: i64,
    strides: Vec<i64>,
    store: Store,
    stamp: u32,
    queue: Vec<i64>,
}

enum Store {
    Grid { seen: Vec<u32>, occ: Vec<bool> },
    Map(std::collections::HashMap<i64, bool>),
}

impl OriginExplorer {
    fn new(dim: usize, cap: u64) -> Self {
        let side = 2 * (cap as i64 + 1) + 1;
        let mut strides = vec![1i64; dim];
        for k in (0..dim.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1].saturating_mul(side);
        }
        let cells = (side as f64).powi(dim as i32);
        let store = if cells <= (1u64 << 26) as f64 {
            let n = cells as usize;
            Store::Grid {
                seen: vec![0; n],
                occ: vec![false; n],
            }
        } else {
            Store::Map(Default::default())
        };
        OriginExplorer {
            dim,
            cap,
            side,
            strides,
            store,
            stamp: 0,
            queue: Vec::new(),
        }
    }

    fn origin(&self) -> i64 {
        let half = self.side / 2;
        self.strides.iter().map(|s| s * half).sum()
    }

    /// Occupation of `cell`, drawing it on first visit. Returns `None` when
    /// the cell was already visited in this sample.
    #[inline]
    fn visit(&mut self, cell: i64, rng: &mut impl RngCore, th: Threshold) -> Option<bool> {
        match &mut self.store {
            Store::Grid { seen, occ } => {
                let c = cell as usize;
                if seen[c] == self.stamp {
                    return None;
                }
                seen[c] = self.stamp;
                let o = th.accepts(rng.next_u64());
                occ[c] = o;
                Some(o)
            }
            Store::Map(m) => {
                if m.contains_key(&cell) {
                    return None;
                }
                let o = th.accepts(rng.next_u64());
                m.insert(cell, o);
                Some(o)
            }
        }
    }

    fn explore(&mut self, rng: &mut impl RngCore, th: Threshold) -> Explored {
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            if let Store::Grid { seen, .. } = &mut self.store {
                seen.iter_mut().for_each(|s| *s = 0);
            }
            self.stamp = 1;
        }
        if let Store::Map(m) = &mut self.store {
            m.clear();
        }
        let origin = self.origin();
        if self.visit(origin, rng, th) != Some(true) {
            return Explored::Finite { size: 0, le: false };
        }
        self.queue.clear();
        self.queue.push(origin);
        let mut head = 0;
        let mut size = 1u64;
        let mut min_cell = origin;
        while head < self.queue.len() {
            let cell = self.queue[head];
            head += 1;
            for k in 0..self.dim {
                let s = self.strides[k];
                for nb in [cell - s, cell + s] {
                    if self.visit(nb, rng, th) == Some(true) {
                        size += 1;
                        if size > self.cap {
                            return Explored::Censored;
                        }
                        min_cell = min_cell.min(nb);
                        self.queue.push(nb);
                    }
                }
            }
        }
        Explored::Finite {
            size,
            le: min_cell == origin,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn geometric_sample(r: f64, count: u64, seed: u64) -> TailSample {
        // X = number of successes before the first failure: P(X >= n) = r^n.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let th = Threshold::new(r);
        TailSample::from_values((0..count).map(|_| {
            let mut n = 0;
            while th.accepts(rng.next_u64()) {
                n += 1;
            }
            n
        }))
    }

    #[test]
    fn sample_counts_and_censoring() {
        let mut s = TailSample::from_values([0, 1, 1, 3]);
        s.push_censored(5);
        assert_eq!(s.total(), 5);
        assert_eq!(s.count_ge(1), 4);
        assert_eq!(s.count_ge(4), 1);
        assert_eq!(s.finite_count_ge(4), 0);
        let e = s.empirical();
        assert_eq!(e.tail(1), 0.8);
        assert_eq!(e.clone().finite().tail(1), 0.6);
        assert_eq!(s.quantile(0.5), 1);
        assert_eq!(s.censoring_horizon(), Some(5));
    }

    #[test]
    fn zeta_on_geometric_data() {
        let s = geometric_sample(0.5, 200_000, 7);
        let est = estimate_zeta(&s, None).unwrap();
        let z = 2f64.ln();
        assert!((est.rate - z).abs() < 2.0 * est.stderr_rate, "{est:?}");
        let (rr, rs) = (est.ratio_rate.unwrap(), est.ratio_stderr.unwrap());
        assert!((rr - z).abs() < 2.0 * rs, "{est:?}");
        assert!((rr - est.rate).abs() < 2.0 * (rs + est.stderr_rate));
        assert!(!est.bias_warning);
    }

    #[test]
    fn local_centering_on_geometric_data() {
        let s = geometric_sample(0.5, 1 << 20, 11);
        let c = local_centering(&s, 1000.0, 4, 2).unwrap();
        // 2^-10 <= 1/1000 < 2^-9, and 1000 * 2^-11 = 0.488
        assert_eq!(c.u, 10);
        assert!((c.zeta - 2f64.ln()).abs() < 3.0 * c.stderr_zeta, "{c:?}");
        assert!((c.a - 0.488).abs() < 0.05, "{c:?}");
        assert!((c.a_raw - 0.488).abs() < 0.1, "{c:?}");
    }

    #[test]
    fn zeta_one_dimensional_percolation() {
        let s = sample_origin_clusters(1, 0.4, 200_000, 1000, 1).unwrap();
        let est = estimate_zeta(&s.le, None).unwrap();
        let z = -(0.4f64.ln());
        assert!((est.rate - z).abs() < 2.0 * est.stderr_rate, "{est:?}");
    }

    #[test]
    fn zeta_constant_sample_is_rejected() {
        let s = TailSample::from_values(std::iter::repeat_n(4, 500));
        assert!(matches!(
            estimate_zeta(&s, None),
            Err(Error::EmptyTailWindow { .. })
        ));
    }

    fn weibull_sample(eta: f64, delta: f64, count: u64, seed: u64) -> TailSample {
        // Inverse transform of P(X >= n) = exp(-eta n^delta) for n >= 1.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        TailSample::from_values((0..count).map(|_| {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let y = -(1.0 - u).ln() / eta;
            y.powf(1.0 / delta).floor() as u64
        }))
    }

    #[test]
    fn eta_delta_on_weibull_data() {
        let s = weibull_sample(2.0, 0.5, 400_000, 11);
        let est = estimate_eta_delta(&s, Some((1, 40)), None).unwrap();
        assert!((est.delta - 0.5).abs() < 3.0 * est.stderr_delta, "{est:?}");
        assert!((est.rate - 2.0).abs() < 3.0 * est.stderr_rate, "{est:?}");
        let fixed = estimate_eta_delta(&s, Some((1, 40)), Some(0.5)).unwrap();
        assert_eq!(fixed.delta, 0.5);
        assert!((fixed.rate - 2.0).abs() < 3.0 * fixed.stderr_rate + 0.02, "{fixed:?}");
    }

    #[test]
    fn eta_delta_flags_exponential_input() {
        let s = geometric_sample(0.5, 200_000, 5);
        let est = estimate_eta_delta(&s, Some((2, 12)), None).unwrap();
        assert!(est.regime_mismatch, "{est:?}");
    }

    #[test]
    fn censored_observations_leave_the_finite_tail() {
        let mut s = TailSample::from_values([1, 2, 2, 3]);
        for _ in 0..4 {
            s.push_censored(10);
        }
        let e = s.empirical();
        assert_eq!(e.tail(2), 7.0 / 8.0);
        assert_eq!(e.clone().finite().tail(2), 3.0 / 8.0);
    }

    #[test]
    fn vn_examples() {
        let geo = |x: u64| 0.5f64.powi(x as i32);
        let q = compute_vn(&geo, 8.0).unwrap();
        assert_eq!((q.v, q.b), (3, 1.0));
        let one_d = |x: u64| if x == 0 { 1.0 } else { 0.5 * 0.5f64.powi(x as i32) };
        let q = compute_vn(&one_d, 8.0).unwrap();
        assert_eq!((q.v, q.b), (2, 1.0));
        let step = |x: u64| match x {
            0 => 1.0,
            1 => 0.6,
            2 => 0.3,
            3 => 0.05,
            _ => 0.01,
        };
        let q = compute_vn(&step, 10.0).unwrap();
        assert_eq!(q.v, 3);
        assert!((q.b - 0.5).abs() < 1e-15);
        assert!(compute_vn(&|_: u64| 1.0, 10.0).is_err());
    }

    #[test]
    fn unx_examples() {
        let geo = |x: u64| 0.5f64.powi(x as i32);
        let (u, a) = compute_unx(&geo, 3.0, 2f64.ln()).unwrap();
        assert_eq!(u, 3);
        assert!((a - 0.75).abs() < 1e-12);
        let q = compute_vn(&geo, 27.0).unwrap();
        let (u0, a0) = compute_unx(&geo, 27.0, 0.0).unwrap();
        assert_eq!((u0, a0), (q.v, q.b));
        let mut prev = 0;
        for x in 0..20 {
            let (u, _) = compute_unx(&geo, 27.0, x as f64).unwrap();
            assert!(u >= prev);
            prev = u;
        }
        assert!(prev > 20);
    }

    #[test]
    fn unx_below_resolution() {
        let s = TailSample::from_values(0..10);
        let e = s.empirical();
        assert!(matches!(
            compute_unx(&e, 1000.0, 0.0),
            Err(Error::BelowResolution { .. })
        ));
    }

    #[test]
    fn vn_prefactor_lower_bound_on_dyadic_n() {
        // Closed-form one-dimensional tail: liminf b_n >= e^{-zeta} = p.
        for &p in &[0.3f64, 0.5, 0.7] {
            let tail = |x: u64| if x == 0 { 1.0 } else { (1.0 - p) * p.powi(x as i32) };
            for k in 1..40 {
                let q = compute_vn(&tail, 2f64.powi(k)).unwrap();
                assert!(q.b > 0.0 && q.b <= 1.0);
                if k > 5 {
                    assert!(q.b >= p - 1e-12, "p {p} k {k} b {}", q.b);
                }
            }
        }
    }

    #[test]
    fn one_dimensional_sandwich_is_exact_for_dyadic_p() {
        // tail(u + x) = tail(u) p^x exactly, so volume * tail(u_n + x) equals
        // the unshifted prefactor times e^{-zeta x}.
        let p = 0.5f64;
        let tail = |x: u64| if x == 0 { 1.0 } else { (1.0 - p) * p.powi(x as i32) };
        for n in [10usize, 100, 1000] {
            let vol = box_volume(1, n);
            let (u, a) = compute_unx(&tail, vol, 0.0).unwrap();
            for x in 0..6u64 {
                let lhs = vol * tail(u + x);
                let rhs = a * (-(x as f64) * -(p.ln())).exp();
                assert!((lhs - rhs).abs() <= 1e-12 * rhs);
            }
        }
    }

    #[test]
    fn classical_thresholds() {
        let n = 10f64.exp();
        assert_eq!(classical_un_sub(1.0, 0.0, n).unwrap(), 10);
        assert_eq!(classical_un_sub(2.0, 0.0, n).unwrap(), 5);
        assert_eq!(classical_un_sub(1.0, 1.0, 22026.0).unwrap(), 12);
        assert!(classical_un_sub(1.0, 0.0, 2.0).is_err());
        let n4 = 4f64.exp();
        assert_eq!(classical_un_sup(1.0, 0.0, 0.5, n4, 0.0).unwrap(), 16);
        assert_eq!(classical_un_sup(2.0, 0.0, 0.5, n4, 0.0).unwrap(), 4);
        assert!(classical_un_sup(1.0, 0.0, 0.5, n4, -10.0).is_err());
    }

    #[test]
    fn classical_sup_first_order_shift() {
        let n = 1e6f64;
        let (eta, h) = (1.5, 1e-4);
        let base = (n.ln() / eta).powi(2);
        let shifted = (n.ln() / eta + h).powi(2);
        let slope = (shifted - base) / h;
        assert!((slope - 2.0 * n.ln() / eta).abs() < 1e-2);
        let a = classical_un_sup(eta, 0.0, 0.5, n, 0.0).unwrap();
        let b = classical_un_sup(eta, 0.0, 0.5, n, 1.0).unwrap();
        assert!(((b - a) as f64 - 2.0 * n.ln() / eta).abs() <= 2.0);
    }

    #[test]
    fn origin_clusters_degenerate_and_small() {
        let s = sample_origin_clusters(2, 0.0, 5000, 10, 1).unwrap();
        assert_eq!(s.cluster.count_ge(1), 0);
        let s = sample_origin_clusters(2, 1.0, 100, 50, 1).unwrap();
        assert_eq!(s.cluster.censored_count(), 100);
        // P(|C(0)| = 1) = p (1-p)^4 in two dimensions.
        let p = 0.3;
        let s = sample_origin_clusters(2, p, 200_000, 1000, 2).unwrap();
        let f = (s.cluster.count_ge(1) - s.cluster.count_ge(2)) as f64 / 200_000.0;
        let want = p * (1.0 - p).powi(4);
        let se = (want * (1.0 - want) / 200_000.0).sqrt();
        assert!((f - want).abs() < 4.0 * se);
        // The left-endpoint identity: P(|C_le(0)| = k) = P(|C(0)| = k) / k.
        let k = 3;
        let c = (s.cluster.count_ge(k) - s.cluster.count_ge(k + 1)) as f64;
        let l = (s.le.count_ge(k) - s.le.count_ge(k + 1)) as f64;
        assert!((c / 3.0 - l).abs() < 4.0 * (c / 3.0).sqrt());
    }

    #[test]
    fn origin_clusters_deterministic() {
        let a = sample_origin_clusters(2, 0.5, 10_000, 200, 9).unwrap();
        let b = sample_origin_clusters(2, 0.5, 10_000, 200, 9).unwrap();
        assert_eq!(a, b);
    }
}
