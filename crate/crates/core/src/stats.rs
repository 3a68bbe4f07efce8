//! Small statistical helpers shared by the estimators.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

/// Weighted least-squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard errors under the model `Var(y_i) = 1 / w_i`.
    pub se_slope: f64,
    pub se_intercept: f64,
    pub r2: f64,
}

/// Weighted least squares; `None` when fewer than two distinct abscissae
/// carry positive weight.
pub fn wls(x: &[f64], y: &[f64], w: &[f64]) -> Option<LinearFit> {
    let sw: f64 = w.iter().sum();
    if sw <= 0.0 {
        return None;
    }
    let xm = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for ((&xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        sxx += wi * (xi - xm) * (xi - xm);
        sxy += wi * (xi - xm) * (yi - ym);
        syy += wi * (yi - ym) * (yi - ym);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Some(LinearFit {
        slope,
        intercept,
        se_slope: (1.0 / sxx).sqrt(),
        se_intercept: (1.0 / sw + xm * xm / sxx).sqrt(),
        r2,
    })
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let ph = k as f64 / n;
    let z2 = z * z;
    let den = 1.0 + z2 / n;
    let centre = (ph + z2 / (2.0 * n)) / den;
    let half = z * (ph * (1.0 - ph) / n + z2 / (4.0 * n * n)).sqrt() / den;
    let lo = if k == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if k as f64 == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Average ranks (ties share the mean rank), 1-based.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - xm) * (b - ym);
        sxx += (a - xm) * (a - xm);
        syy += (b - ym) * (b - ym);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Spearman test for an increasing trend of `values` against their position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrendTest {
    pub rho: f64,
    /// One-sided permutation p-value of `rho` under exchangeability.
    pub p_increasing: f64,
}

/// Exact permutation distribution for up to 8 points, otherwise 20000
/// permutations from a fixed stream.
pub fn spearman_trend(values: &[f64]) -> TrendTest {
    let pos: Vec<f64> = (0..values.len()).map(|i| i as f64).collect();
    let rho = spearman(&pos, values);
    if values.len() < 3 {
        return TrendTest {
            rho,
            p_increasing: 1.0,
        };
    }
    let ry = ranks(values);
    let eps = 1e-12;
    let (mut hits, mut total) = (0u64, 0u64);
    let mut count = |perm: &[f64]| {
        total += 1;
        if pearson(&pos, perm) >= rho - eps {
            hits += 1;
        }
    };
    if values.len() <= 8 {
        let mut perm = ry.clone();
        for_each_permutation(&mut perm, 0, &mut count);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_7e57);
        let mut perm = ry.clone();
        for _ in 0..20_000 {
            perm.shuffle(&mut rng);
            count(&perm);
        }
    }
    TrendTest {
        rho,
        p_increasing: hits as f64 / total as f64,
    }
}

fn for_each_permutation(v: &mut [f64], k: usize, f: &mut impl FnMut(&[f64])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        for_each_permutation(v, k + 1, f);
        v.swap(k, i);
    }
}

/// Kolmogorov-Smirnov distance between the empirical law of `data` and a
/// continuous CDF.
pub fn ks_distance(data: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = data.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Empirical quantile (lower) of a sorted slice.
pub fn quantile_sorted<T: Copy>(sorted: &[T], q: f64) -> T {
    let i = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[i]
}

pub fn median_u64(values: &[u64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wls_recovers_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let f = wls(&x, &y, &[1.0; 4]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(wls(&[1.0, 1.0], &[0.0, 1.0], &[1.0, 1.0]).is_none());
    }

    #[test]
    fn wilson_contains_estimate() {
        let (lo, hi) = wilson_interval(30, 100, Z95);
        assert!(lo < 0.3 && 0.3 < hi);
        let (lo, hi) = wilson_interval(0, 100, Z95);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.05);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn trend_test_detects_monotone_sequences() {
        let up: Vec<f64> = (0..6).map(f64::from).collect();
        let t = spearman_trend(&up);
        assert!((t.rho - 1.0).abs() < 1e-12);
        assert!((t.p_increasing - 1.0 / 720.0).abs() < 1e-12);
        let down: Vec<f64> = up.iter().rev().copied().collect();
        assert!(spearman_trend(&down).p_increasing > 0.99);
        let long: Vec<f64> = (0..12).map(f64::from).collect();
        assert!(spearman_trend(&long).p_increasing < 0.001);
    }

    #[test]
    fn ks_of_uniform_grid() {
        let data: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        let d = ks_distance(&data, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.005).abs() < 1e-12);
    }

    #[test]
    fn quantiles_and_medians() {
        let v = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        assert_eq!(quantile_sorted(&v, 0.9), 9);
        assert_eq!(quantile_sorted(&v, 0.0), 1);
        assert_eq!(median_u64(&[5, 1, 3]), 3.0);
        assert_eq!(median_u64(&[4, 1, 3, 2]), 2.5);
    }
}
