//! Boolean inputs from the two-component mixture, monomial targets,
//! Hamming-weight sparse selection and datasets.
//!
//! Coordinates are zero-based throughout: the parity on the first `k`
//! coordinates is the monomial over `{0, .., k-1}`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// A point of `{+1, -1}^d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignVector(Vec<i8>);

impl SignVector {
    pub fn new(entries: Vec<i8>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidParams("sign vector must be non-empty".into()));
        }
        if let Some(bad) = entries.iter().find(|&&v| v != 1 && v != -1) {
            return Err(Error::InvalidParams(format!("entry {bad} is not +1 or -1")));
        }
        Ok(Self(entries))
    }

    pub fn constant(d: usize, value: i8) -> Self {
        assert!(value == 1 || value == -1);
        Self(vec![value; d])
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn hamming_weight(&self) -> usize {
        hamming_weight(&self.0)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    /// Applies a coordinate permutation: entry `j` of the result is entry `perm[j]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(perm.iter().map(|&j| self.0[j]).collect())
    }
}

/// Parameters `(rho, mu, d)` of the mixture `rho * D_mu + (1 - rho) * D_u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub rho: f64,
    pub mu: f64,
    pub d: usize,
}

impl MixtureParams {
    pub fn new(rho: f64, mu: f64, d: usize) -> Result<Self> {
        let p = Self { rho, mu, d };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidParams(format!("rho = {} not in [0, 1]", self.rho)));
        }
        if !(-1.0..=1.0).contains(&self.mu) {
            return Err(Error::InvalidParams(format!("mu = {} not in [-1, 1]", self.mu)));
        }
        if self.d == 0 {
            return Err(Error::InvalidParams("d must be positive".into()));
        }
        Ok(())
    }

    /// The sparse component `D_mu` on its own.
    pub fn sparse_component(&self) -> Self {
        Self { rho: 1.0, ..*self }
    }

    /// Probability that a coordinate is +1 in the sparse component.
    pub fn plus_probability(&self) -> f64 {
        (1.0 + self.mu) / 2.0
    }
}

/// Fills `out` with one draw from the mixture.
pub fn sample_into<R: Rng + ?Sized>(params: &MixtureParams, rng: &mut R, out: &mut [i8]) {
    let p = if rng.gen_bool(params.rho) { params.plus_probability() } else { 0.5 };
    for v in out.iter_mut() {
        *v = if rng.gen_bool(p) { 1 } else { -1 };
    }
}

pub fn sample_input<R: Rng + ?Sized>(params: &MixtureParams, rng: &mut R) -> SignVector {
    let mut v = vec![0i8; params.d];
    sample_into(params, rng, &mut v);
    SignVector(v)
}

/// Number of `-1` entries.
pub fn hamming_weight(x: &[i8]) -> usize {
    x.iter().filter(|&&v| v < 0).count()
}

/// Hamming-weight cutoff `d (1/2 - mu/4)` below which an input counts as sparse.
pub fn sparse_threshold(d: usize, mu: f64) -> f64 {
    d as f64 * (0.5 - mu / 4.0)
}

pub fn is_sparse(x: &[i8], mu: f64) -> bool {
    (hamming_weight(x) as f64) < sparse_threshold(x.len(), mu)
}

/// One signed monomial `coeff * prod_{j in subset} x_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coeff: f64,
    pub subset: Vec<usize>,
}

/// A sum of signed monomials; a k-parity is a single unit-coefficient term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonomialTarget {
    terms: Vec<Monomial>,
}

impl MonomialTarget {
    pub fn new(terms: Vec<Monomial>, d: usize) -> Result<Self> {
        let mut seen: Vec<Vec<usize>> = Vec::with_capacity(terms.len());
        let mut normalized = Vec::with_capacity(terms.len());
        for mut term in terms {
            term.subset.sort_unstable();
            if term.subset.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidParams(format!(
                    "monomial {:?} repeats an index",
                    term.subset
                )));
            }
            if let Some(&j) = term.subset.iter().find(|&&j| j >= d) {
                return Err(Error::InvalidParams(format!("index {j} out of range for d = {d}")));
            }
            if seen.contains(&term.subset) {
                return Err(Error::InvalidParams(format!(
                    "subset {:?} appears twice",
                    term.subset
                )));
            }
            seen.push(term.subset.clone());
            normalized.push(term);
        }
        Ok(Self { terms: normalized })
    }

    /// The parity on the first `k` coordinates.
    pub fn parity(k: usize, d: usize) -> Result<Self> {
        Self::new(vec![Monomial { coeff: 1.0, subset: (0..k).collect() }], d)
    }

    pub fn parity_on(subset: Vec<usize>, d: usize) -> Result<Self> {
        Self::new(vec![Monomial { coeff: 1.0, subset }], d)
    }

    /// `x1..x5 + 1/2 x1..x6`
    pub fn f_left(d: usize) -> Result<Self> {
        Self::new(
            vec![
                Monomial { coeff: 1.0, subset: (0..5).collect() },
                Monomial { coeff: 0.5, subset: (0..6).collect() },
            ],
            d,
        )
    }

    /// `x1..x5 + 1/2 x6..x11`
    pub fn f_middle(d: usize) -> Result<Self> {
        Self::new(
            vec![
                Monomial { coeff: 1.0, subset: (0..5).collect() },
                Monomial { coeff: 0.5, subset: (5..11).collect() },
            ],
            d,
        )
    }

    /// `1/2 (x1 x2 + x1..x6)`
    pub fn f_right(d: usize) -> Result<Self> {
        Self::new(
            vec![
                Monomial { coeff: 0.5, subset: vec![0, 1] },
                Monomial { coeff: 0.5, subset: (0..6).collect() },
            ],
            d,
        )
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    /// Degree of a single-term parity target, if that is what this is.
    pub fn parity_degree(&self) -> Option<usize> {
        match self.terms.as_slice() {
            [t] if t.coeff == 1.0 => Some(t.subset.len()),
            _ => None,
        }
    }

    pub fn max_degree(&self) -> usize {
        self.terms.iter().map(|t| t.subset.len()).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[i8]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let negatives = t.subset.iter().filter(|&&j| x[j] < 0).count();
                if negatives % 2 == 0 {
                    t.coeff
                } else {
                    -t.coeff
                }
            })
            .sum()
    }

    pub fn eval_f64(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coeff * t.subset.iter().map(|&j| x[j]).product::<f64>())
            .sum()
    }

    /// Exact expectation under the mixture.
    pub fn expectation(&self, params: &MixtureParams) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coeff * expected_monomial(params, t.subset.len()))
            .sum()
    }
}

/// `E[chi_S]` under the mixture for `|S| = k`: 1 for the empty set, else `rho * mu^k`.
pub fn expected_monomial(params: &MixtureParams, k: usize) -> f64 {
    if k == 0 {
        1.0
    } else {
        params.rho * params.mu.powi(k as i32)
    }
}

/// Labelled inputs stored row-major in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    bits: Vec<i8>,
    labels: Vec<f64>,
    label_mean: f64,
    seed: Option<u64>,
}

impl Dataset {
    pub fn from_parts(d: usize, bits: Vec<i8>, labels: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParams("d must be positive".into()));
        }
        if bits.len() != d * labels.len() {
            return Err(Error::InvalidParams(format!(
                "{} bits do not fit {} samples of dimension {d}",
                bits.len(),
                labels.len()
            )));
        }
        if bits.iter().any(|&v| v != 1 && v != -1) {
            return Err(Error::InvalidParams("inputs must be +1 or -1".into()));
        }
        let label_mean = mean(&labels);
        Ok(Self { d, bits, labels, label_mean, seed: None })
    }

    pub fn from_vectors(inputs: &[SignVector], labels: Vec<f64>) -> Result<Self> {
        let d = inputs.first().map(SignVector::len).unwrap_or(1);
        if inputs.iter().any(|x| x.len() != d) {
            return Err(Error::InvalidParams("inputs have mixed dimensions".into()));
        }
        let bits = inputs.iter().flat_map(|x| x.as_slice().iter().copied()).collect();
        Self::from_parts(d, bits, labels)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[i8] {
        &self.bits[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn label_mean(&self) -> f64 {
        self.label_mean
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[i8], f64)> + '_ {
        self.bits.chunks_exact(self.d).zip(self.labels.iter().copied())
    }

    pub fn push(&mut self, x: &[i8], y: f64) -> Result<()> {
        if x.len() != self.d || x.iter().any(|&v| v != 1 && v != -1) {
            return Err(Error::InvalidParams("input does not match dataset".into()));
        }
        self.bits.extend_from_slice(x);
        self.labels.push(y);
        self.label_mean = mean(&self.labels);
        Ok(())
    }

    /// New dataset holding the listed rows, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut bits = Vec::with_capacity(indices.len() * self.d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            bits.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        let label_mean = mean(&labels);
        Dataset { d: self.d, bits, labels, label_mean, seed: self.seed }
    }

    /// Indices of the rows below the sparse threshold.
    pub fn sparse_indices(&self, mu: f64) -> Vec<usize> {
        (0..self.len()).filter(|&i| is_sparse(self.input(i), mu)).collect()
    }

    /// Writes one `+1-1...,label` line per sample.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = String::with_capacity(2 * self.d + 24);
        for (x, y) in self.iter() {
            line.clear();
            for &v in x {
                line.push_str(if v > 0 { "+1" } else { "-1" });
            }
            write!(line, ",{y}").expect("writing to a String");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut d = None;
        let mut bits = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (xs, y) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("line {}: missing label", lineno + 1)))?;
            let raw = xs.as_bytes();
            if raw.len() % 2 != 0 {
                return Err(Error::Parse(format!("line {}: malformed input", lineno + 1)));
            }
            let start = bits.len();
            for pair in raw.chunks_exact(2) {
                match pair {
                    b"+1" => bits.push(1),
                    b"-1" => bits.push(-1),
                    _ => return Err(Error::Parse(format!("line {}: bad entry", lineno + 1))),
                }
            }
            let width = bits.len() - start;
            match d {
                None => d = Some(width),
                Some(w) if w != width => {
                    return Err(Error::Parse(format!("line {}: dimension changed", lineno + 1)))
                }
                _ => {}
            }
            let y: f64 = y
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad label {y:?}", lineno + 1)))?;
            labels.push(y);
        }
        Self::from_parts(d.unwrap_or(1), bits, labels)
    }

    pub fn metadata(&self, params: &MixtureParams, target: &MonomialTarget) -> DatasetMeta {
        DatasetMeta {
            seed: self.seed,
            rho: params.rho,
            mu: params.mu,
            d: self.d,
            m: self.len(),
            target: target.clone(),
        }
    }
}

/// JSON sidecar describing how a dataset was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: Option<u64>,
    pub rho: f64,
    pub mu: f64,
    pub d: usize,
    pub m: usize,
    pub target: MonomialTarget,
}

impl DatasetMeta {
    /// Regenerates the dataset bit for bit when a seed was recorded.
    pub fn regenerate(&self) -> Result<Dataset> {
        let seed = self
            .seed
            .ok_or_else(|| Error::InvalidParams("no seed recorded for this dataset".into()))?;
        let params = MixtureParams::new(self.rho, self.mu, self.d)?;
        generate_dataset(&params, &self.target, self.m, seed)
    }
}

/// Draws `m` labelled samples from a generator seeded with `seed`, which is recorded.
pub fn generate_dataset(
    params: &MixtureParams,
    target: &MonomialTarget,
    m: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = seeded(seed);
    let mut ds = generate_dataset_with(params, target, m, &mut rng)?;
    ds.seed = Some(seed);
    Ok(ds)
}

pub fn generate_dataset_with<R: Rng + ?Sized>(
    params: &MixtureParams,
    target: &MonomialTarget,
    m: usize,
    rng: &mut R,
) -> Result<Dataset> {
    params.validate()?;
    if m == 0 {
        return Err(Error::InvalidParams("m must be at least 1".into()));
    }
    if target.terms().iter().flat_map(|t| &t.subset).any(|&j| j >= params.d) {
        return Err(Error::InvalidParams("target index exceeds d".into()));
    }
    let d = params.d;
    let mut bits = vec![0i8; m * d];
    let mut labels = Vec::with_capacity(m);
    for row in bits.chunks_exact_mut(d) {
        sample_into(params, rng, row);
        labels.push(target.eval(row));
    }
    let label_mean = mean(&labels);
    Ok(Dataset { d, bits, labels, label_mean, seed: None })
}

/// Splits off the sparse rows. Returns `(sparse, full)` with `full` an untouched copy.
pub fn split_sparse(ds: &Dataset, mu: f64) -> Result<(Dataset, Dataset)> {
    let idx = ds.sparse_indices(mu);
    if idx.is_empty() {
        return Err(Error::SparseSetEmpty);
    }
    Ok((ds.select(&idx), ds.clone()))
}

/// Probability of `x` under the mixture.
pub fn mixture_probability(params: &MixtureParams, x: &[i8]) -> f64 {
    let neg = hamming_weight(x) as i32;
    let pos = x.len() as i32 - neg;
    let p = params.plus_probability();
    params.rho * p.powi(pos) * (1.0 - p).powi(neg) + (1.0 - params.rho) * 0.5f64.powi(x.len() as i32)
}

/// Every point of `{-1,1}^d`; bit `j` of the counter set means `x_j = -1`.
pub fn cube(d: usize) -> impl Iterator<Item = Vec<i8>> {
    assert!(d < 32, "cube enumeration is limited to d < 32");
    (0u32..1 << d).map(move |mask| (0..d).map(|j| if mask >> j & 1 == 1 { -1 } else { 1 }).collect())
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn samples_are_signs(rho in 0.0..=1.0f64, mu in -1.0..=1.0f64, d in 1usize..64, seed: u64) {
            let params = MixtureParams::new(rho, mu, d).unwrap();
            let x = sample_input(&params, &mut seeded(seed));
            prop_assert_eq!(x.len(), d);
            prop_assert!(x.as_slice().iter().all(|&v| v == 1 || v == -1));
        }

        #[test]
        fn split_is_a_threshold_filter(rho in 0.2..=1.0f64, mu in 0.3..0.95f64, d in 4usize..20, seed: u64) {
            let params = MixtureParams::new(rho, mu, d).unwrap();
            let target = MonomialTarget::parity(2, d).unwrap();
            let ds = generate_dataset(&params, &target, 200, seed).unwrap();
            let Ok((sparse, full)) = split_sparse(&ds, mu) else {
                prop_assert!(ds.iter().all(|(x, _)| !is_sparse(x, mu)));
                return Ok(());
            };
            prop_assert_eq!(&full, &ds);
            let expected: Vec<usize> = (0..ds.len()).filter(|&i| is_sparse(ds.input(i), mu)).collect();
            let selected = ds.select(&expected);
            prop_assert_eq!(&sparse, &selected);
            let (again, _) = split_sparse(&sparse, mu).unwrap();
            prop_assert_eq!(&again, &selected);
        }
    }

    #[test]
    fn monte_carlo_monomial_means() {
        const DRAWS: usize = 1_000_000;
        let d = 5;
        let mut rng = seeded(41);
        let mut x = vec![0i8; d];
        for rho in [0.0, 0.01, 0.5, 1.0] {
            for mu in [0.5, 0.9, 0.98] {
                let params = MixtureParams::new(rho, mu, d).unwrap();
                let mut sums = [0.0f64; 3];
                for _ in 0..DRAWS {
                    sample_into(&params, &mut rng, &mut x);
                    for (s, k) in sums.iter_mut().zip([1, 3, 5]) {
                        *s += x[..k].iter().map(|&v| v as f64).product::<f64>();
                    }
                }
                for (s, k) in sums.iter().zip([1, 3, 5]) {
                    let e = expected_monomial(&params, k);
                    let se = ((1.0 - e * e) / DRAWS as f64).sqrt();
                    let got = s / DRAWS as f64;
                    assert!((got - e).abs() <= 4.0 * se, "rho {rho} mu {mu} k {k}: {got} vs {e}");
                }
            }
        }
    }

    #[test]
    fn biased_hamming_weight_mean() {
        let (d, mu, n) = (50, 0.9, 100_000);
        let params = MixtureParams::new(1.0, mu, d).unwrap();
        let mut rng = seeded(42);
        let mut x = vec![0i8; d];
        let total: usize = (0..n)
            .map(|_| {
                sample_into(&params, &mut rng, &mut x);
                hamming_weight(&x)
            })
            .sum();
        let expected = d as f64 * (1.0 - mu) / 2.0;
        let got = total as f64 / n as f64;
        assert!((got / expected - 1.0).abs() < 0.01, "{got} vs {expected}");
    }
}
