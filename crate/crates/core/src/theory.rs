//! Cross-predictability of parities under the mixture, the resulting accuracy
//! bound for noisy SGD, and exact second-layer constructions.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::model::{b_lm, Activation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum CpMethod {
    Exact,
    BruteForce,
    MonteCarlo { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpResult {
    pub value: f64,
    #[serde(flatten)]
    pub method: CpMethod,
}

/// `E[chi_S chi_S']` under the mixture for `|S delta S'| = s`.
pub fn pair_correlation(sym_diff: usize, rho: f64, mu: f64) -> f64 {
    if sym_diff == 0 {
        1.0
    } else {
        rho * mu.powi(sym_diff as i32)
    }
}

fn check_dk(d: usize, k: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::InvalidParams(format!("need 0 < k <= d, got d = {d}, k = {k}")));
    }
    Ok(())
}

/// `P(|S cap S'| = l)` for independent uniform `k`-subsets of `[d]`.
pub fn overlap_probability(d: usize, k: usize, l: usize) -> f64 {
    if l > k || k - l > d - k {
        return 0.0;
    }
    match (exact_binomial(k, l), exact_binomial(d - k, k - l), exact_binomial(d, k)) {
        (Some(a), Some(b), Some(c)) if a.checked_mul(b).is_some() => (a * b) as f64 / c as f64,
        _ => {
            let (d, k, l) = (d as u64, k as u64, l as u64);
            (ln_binomial(k, l) + ln_binomial(d - k, k - l) - ln_binomial(d, k)).exp()
        }
    }
}

fn exact_binomial(n: usize, r: usize) -> Option<u128> {
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Cross-predictability of uniform `k`-parities, summed over the overlap law.
pub fn cp_exact(d: usize, k: usize, rho: f64, mu: f64) -> Result<CpResult> {
    check_dk(d, k)?;
    let value = (0..=k)
        .map(|l| overlap_probability(d, k, l) * pair_correlation(2 * (k - l), rho, mu).powi(2))
        .sum::<f64>()
        .clamp(0.0, 1.0);
    Ok(CpResult { value, method: CpMethod::Exact })
}

/// Largest number of subsets [`cp_bruteforce`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000;

fn k_subsets(d: usize, k: usize) -> Vec<u64> {
    let mut out = Vec::new();
    let mut stack = vec![(0usize, 0u64, 0usize)];
    while let Some((start, mask, size)) = stack.pop() {
        if size == k {
            out.push(mask);
            continue;
        }
        for j in (start..d).rev() {
            if d - j >= k - size {
                stack.push((j + 1, mask | 1 << j, size + 1));
            }
        }
    }
    out
}

/// Average over all ordered pairs of `k`-subsets of the squared correlation.
pub fn cp_bruteforce(d: usize, k: usize, rho: f64, mu: f64) -> Result<CpResult> {
    check_dk(d, k)?;
    let count = statrs::function::factorial::binomial(d as u64, k as u64).round() as u128;
    if d > 64 || count > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge { count, limit: BRUTE_FORCE_LIMIT });
    }
    let subsets = k_subsets(d, k);
    // Pair counts per symmetric-difference size are exact integers.
    let mut counts = vec![0u64; 2 * k + 1];
    for &s in &subsets {
        for &t in &subsets {
            counts[(s ^ t).count_ones() as usize] += 1;
        }
    }
    let n = subsets.len() as f64;
    let value = counts
        .iter()
        .enumerate()
        .map(|(sd, &c)| c as f64 / (n * n) * pair_correlation(sd, rho, mu).powi(2))
        .sum();
    Ok(CpResult { value, method: CpMethod::BruteForce })
}

/// Monte Carlo estimate over `n_pairs` independent subset pairs, with its
/// standard error.
pub fn cp_monte_carlo<R: Rng + ?Sized>(
    d: usize,
    k: usize,
    rho: f64,
    mu: f64,
    n_pairs: usize,
    rng: &mut R,
) -> Result<CpResult> {
    check_dk(d, k)?;
    if n_pairs < 100 {
        return Err(Error::InvalidParams("cp_monte_carlo needs at least 100 pairs".into()));
    }
    let mut in_s = vec![false; d];
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n_pairs {
        let s = sample(rng, d, k);
        in_s.iter_mut().for_each(|v| *v = false);
        s.iter().for_each(|j| in_s[j] = true);
        let common = sample(rng, d, k).iter().filter(|&j| in_s[j]).count();
        let v = pair_correlation(2 * (k - common), rho, mu).powi(2);
        sum += v;
        sum2 += v * v;
    }
    let n = n_pairs as f64;
    let mean = sum / n;
    let var = ((sum2 / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(CpResult { value: mean, method: CpMethod::MonteCarlo { sigma: (var / n).sqrt() } })
}

/// `C_k' = max_l C(k,l) k!/(k-l)! / (1 - 1/(d mu^4))`; infinite when `d mu^4 <= 1`.
pub fn lemma_cp_constant(d: usize, k: usize, mu: f64) -> f64 {
    let dm4 = d as f64 * mu.powi(4);
    if dm4 <= 1.0 {
        return f64::INFINITY;
    }
    let k64 = k as u64;
    let best = (0..=k64)
        .map(|l| {
            let ln_falling: f64 = ((k64 - l + 1)..=k64).map(|v| (v as f64).ln()).sum();
            (ln_binomial(k64, l) + ln_falling).exp()
        })
        .fold(0.0, f64::max);
    best / (1.0 - 1.0 / dm4)
}

/// `C(d,k)^{-1} + C_k' rho^2 mu^{4k}`.
pub fn lemma_cp_bound(d: usize, k: usize, rho: f64, mu: f64) -> f64 {
    let inv = (-ln_binomial(d as u64, k as u64)).exp();
    inv + lemma_cp_constant(d, k, mu) * rho * rho * mu.powi(4 * k as i32)
}

/// `min(1, 1/2 + (T P A / tau) sqrt(cp + 1/B))`.
pub fn negative_bound(t: f64, p: f64, a: f64, tau: f64, b: f64, cp: f64) -> Result<f64> {
    if !(tau > 0.0) || !(b >= 1.0) {
        return Err(Error::InvalidParams("negative_bound needs tau > 0 and B >= 1".into()));
    }
    Ok((0.5 + t * p * a / tau * (cp + 1.0 / b).sqrt()).min(1.0))
}

/// Second-layer weights and biases with
/// `sum_i a_i relu(Delta sum_j x_j + b_i) = 2 chi(x)` on `{-1,1}^k`, `k` even.
pub fn build_explicit_second_layer(k: usize, delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if k % 2 == 1 {
        return Err(Error::KOdd(k));
    }
    if k < 2 || !(delta > 0.0) {
        return Err(Error::InvalidParams("need k >= 2 and Delta > 0".into()));
    }
    let sgn = |i: usize| if i.is_multiple_of(2) { 1.0 } else { -1.0 };
    let a = (0..=k)
        .map(|i| {
            let mag = if i + 1 < k {
                4.0
            } else if i + 1 == k {
                3.0
            } else {
                1.0
            };
            sgn(i) * mag / delta
        })
        .collect();
    let b = (0..=k).map(|i| -delta * k as f64 + 2.0 * (i + 1) as f64 * delta).collect();
    Ok((a, b))
}

/// `sum_i a_i relu(Delta sum_j x_j + b_i)`.
pub fn explicit_layer_output(a: &[f64], b: &[f64], delta: f64, x: &[f64]) -> f64 {
    let s: f64 = x.iter().sum();
    a.iter().zip(b).map(|(ai, bi)| ai * (delta * s + bi).max(0.0)).sum()
}

/// Index of `(l, m)` in the `l`-major grid, `m in -1..=d-k`.
pub fn span_index(d: usize, k: usize, l: usize, m: i64) -> usize {
    l * (d - k + 2) + (m + 1) as usize
}

/// `Ramp(sum_j x_j - (1/(2(d-k))) sum_{j>=k} x_j + b_lm)`, zero-based support `0..k`.
pub fn span_feature(d: usize, k: usize, l: usize, m: i64, x: &[f64]) -> f64 {
    let head: f64 = x[..k].iter().sum();
    let tail: f64 = x[k..].iter().sum();
    let pre = head + tail * (1.0 - 1.0 / (2.0 * (d - k) as f64)) + b_lm(d, k, l, m);
    Activation::Ramp.apply(pre)
}

/// The same feature as a function of `p` negatives in the support and `q`
/// outside it.
pub fn span_feature_pq(d: usize, k: usize, l: usize, m: i64, p: usize, q: usize) -> f64 {
    let pre = 2.0 * (l as f64 - p as f64 - q as f64) - 1.0 + (q as f64 + m as f64 + 1.0) / (d - k) as f64;
    Activation::Ramp.apply(pre)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanSolution {
    pub d: usize,
    pub k: usize,
    /// `a*_{lm}` in [`span_index`] order.
    pub coefficients: Vec<f64>,
    /// Largest error over the `(p, q)` states.
    pub residual: f64,
    pub max_abs: f64,
}

impl SpanSolution {
    pub fn coefficient(&self, l: usize, m: i64) -> f64 {
        self.coefficients[span_index(self.d, self.k, l, m)]
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for l in 0..=self.d {
            for m in -1..=(self.d - self.k) as i64 {
                s += self.coefficient(l, m) * span_feature(self.d, self.k, l, m, x);
            }
        }
        s
    }
}

/// Residual tolerance of [`solve_span_coefficients`].
pub const SPAN_TOLERANCE: f64 = 1e-8;
/// Largest `d` at which the identity is re-checked on the full cube.
pub const SPAN_CUBE_LIMIT: usize = 14;

/// Minimum-norm least-squares coefficients with
/// `sum_lm a*_{lm} sigma_lm(x) = chi_{[k]}(x)`, checked on every `(p, q)`
/// state, on the whole cube for `d <= 14`, and against `|a*|_inf <= 4(d-k)`.
pub fn solve_span_coefficients(d: usize, k: usize) -> Result<SpanSolution> {
    if k < 2 || k >= d {
        return Err(Error::InvalidParams(format!("need 2 <= k < d, got d = {d}, k = {k}")));
    }
    let dk = d - k;
    let cols = (d + 1) * (dk + 2);
    let rows = (k + 1) * (dk + 1);
    let mut mat = DMatrix::<f64>::zeros(rows, cols);
    let mut rhs = DVector::<f64>::zeros(rows);
    for p in 0..=k {
        for q in 0..=dk {
            let r = p * (dk + 1) + q;
            let w = (0.5 * (ln_binomial(k as u64, p as u64) + ln_binomial(dk as u64, q as u64))).exp();
            rhs[r] = w * if p % 2 == 0 { 1.0 } else { -1.0 };
            for l in 0..=d {
                for m in -1..=dk as i64 {
                    mat[(r, span_index(d, k, l, m))] = w * span_feature_pq(d, k, l, m, p, q);
                }
            }
        }
    }
    let svd = mat.clone().svd(true, true);
    let sol = svd.solve(&rhs, 1e-10).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let coefficients: Vec<f64> = sol.iter().copied().collect();

    let mut residual = 0.0f64;
    for p in 0..=k {
        for q in 0..=dk {
            let chi = if p % 2 == 0 { 1.0 } else { -1.0 };
            let mut v = 0.0;
            for l in 0..=d {
                for m in -1..=dk as i64 {
                    v += coefficients[span_index(d, k, l, m)] * span_feature_pq(d, k, l, m, p, q);
                }
            }
            residual = residual.max((v - chi).abs());
        }
    }
    let max_abs = coefficients.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let out = SpanSolution { d, k, coefficients, residual, max_abs };
    if d <= SPAN_CUBE_LIMIT {
        for mask in 0u32..1 << d {
            let x: Vec<f64> = (0..d).map(|j| if mask >> j & 1 == 1 { -1.0 } else { 1.0 }).collect();
            let chi: f64 = x[..k].iter().product();
            residual = residual.max((out.eval(&x) - chi).abs());
        }
    }
    if !(residual < SPAN_TOLERANCE) {
        return Err(Error::NoSolution { residual });
    }
    let bound = 4.0 * dk as f64;
    if max_abs > bound * (1.0 + 1e-9) {
        return Err(Error::NormBound { max_abs, bound });
    }
    Ok(SpanSolution { residual, ..out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn pair_correlations() {
        assert_eq!(pair_correlation(0, 0.3, 0.2), 1.0);
        assert_eq!(pair_correlation(2, 0.5, 1.0), 0.5);
        assert!((pair_correlation(4, 0.01, 0.9) - 0.006561).abs() < 1e-15);
    }

    #[test]
    fn cp_small_cases() {
        assert!((cp_exact(2, 1, 0.5, 1.0).unwrap().value - 0.625).abs() < 1e-15);
        assert!((cp_bruteforce(2, 1, 0.5, 1.0).unwrap().value - 0.625).abs() < 1e-15);
        assert!((cp_exact(10, 3, 0.0, 0.9).unwrap().value - 1.0 / 120.0).abs() < 1e-15);
        assert_eq!(cp_bruteforce(5, 5, 0.3, 0.5).unwrap().value, 1.0);
        let a = cp_bruteforce(9, 3, 0.2, 0.7).unwrap().value;
        let b = cp_bruteforce(9, 3, 0.2, -0.7).unwrap().value;
        assert_eq!(a, b);
    }

    #[test]
    fn cp_guards() {
        assert!(matches!(cp_bruteforce(30, 10, 0.1, 0.9), Err(Error::TooLarge { .. })));
        assert!(cp_exact(4, 0, 0.1, 0.9).is_err());
        assert!(cp_exact(1000, 5, 0.01, 0.98).unwrap().value.is_finite());
    }

    #[test]
    fn monte_carlo_with_rho_zero_counts_coincidences() {
        let r = cp_monte_carlo(4, 2, 0.0, 0.9, 2000, &mut seeded(1)).unwrap();
        let exact = cp_exact(4, 2, 0.0, 0.9).unwrap().value;
        let CpMethod::MonteCarlo { sigma } = r.method else { panic!() };
        assert!((r.value - exact).abs() < 4.0 * sigma);
        let again = cp_monte_carlo(4, 2, 0.0, 0.9, 2000, &mut seeded(1)).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn bound_examples() {
        assert_eq!(negative_bound(0.0, 10.0, 1.0, 0.1, 10.0, 0.3).unwrap(), 0.5);
        assert_eq!(negative_bound(1e3, 1e4, 1.0, 0.01, 1e6, 1e-18).unwrap(), 1.0);
        assert!(negative_bound(1.0, 1.0, 1.0, 0.0, 1.0, 0.1).is_err());
        let small = negative_bound(1.0, 1.0, 1.0, 1e9, 1.0, 0.1).unwrap();
        assert!(small > 0.5 && small < 0.5 + 1e-8);
    }

    #[test]
    fn explicit_layer_k2() {
        let (a, b) = build_explicit_second_layer(2, 1.0).unwrap();
        assert_eq!(a, vec![4.0, -3.0, 1.0]);
        assert_eq!(b, vec![0.0, 2.0, 4.0]);
        assert_eq!(explicit_layer_output(&a, &b, 1.0, &[1.0, -1.0]), -2.0);
        assert_eq!(explicit_layer_output(&a, &b, 1.0, &[-1.0, -1.0]), 2.0);
        assert!(matches!(build_explicit_second_layer(3, 1.0), Err(Error::KOdd(3))));
    }

    #[test]
    fn span_pq_matches_definition() {
        let (d, k) = (7, 3);
        let x = [1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0];
        for l in 0..=d {
            for m in -1..=(d - k) as i64 {
                let a = span_feature(d, k, l, m, &x);
                let b = span_feature_pq(d, k, l, m, 1, 2);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn span_solve_small() {
        let sol = solve_span_coefficients(5, 2).unwrap();
        assert!(sol.residual < 1e-8);
        assert!(sol.max_abs <= 4.0 * 3.0 * (1.0 + 1e-9));
        assert!(solve_span_coefficients(5, 1).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn cp_is_even_in_mu_and_bounded(d in 2usize..40, k in 1usize..6, rho in 0.0..=1.0f64, mu in -1.0..=1.0f64) {
            prop_assume!(k <= d);
            let a = cp_exact(d, k, rho, mu).unwrap().value;
            let b = cp_exact(d, k, rho, -mu).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-15 * a.max(1e-300));
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn negative_bound_monotone(
            t in 0.0..1e3f64,
            p in 1.0..1e3f64,
            a in 1e-3..10.0f64,
            tau in 1e-3..10.0f64,
            b in 1.0..1e4f64,
            cp in 0.0..1e-6f64,
            scale in 1.0..10.0f64,
        ) {
            let base = negative_bound(t, p, a, tau, b, cp).unwrap();
            prop_assert!(negative_bound(t * scale, p, a, tau, b, cp).unwrap() >= base);
            prop_assert!(negative_bound(t, p * scale, a, tau, b, cp).unwrap() >= base);
            prop_assert!(negative_bound(t, p, a * scale, tau, b, cp).unwrap() >= base);
            prop_assert!(negative_bound(t, p, a, tau * scale, b, cp).unwrap() <= base);
            prop_assert!(negative_bound(t, p, a, tau, b * scale, cp).unwrap() <= base);
        }
    }
}
