//! Noisy SGD: per-sample clipping, batch averaging, uniform noise, and an
//! optional box projection on the updated group.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::{GradientBundle, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearningRate {
    Constant { gamma: f64 },
    /// `gamma1` for `t < switch_at`, `gamma2` afterwards.
    TwoPhase { gamma1: f64, gamma2: f64, switch_at: usize },
    /// Piecewise constant: the last `(start, gamma)` with `start <= t` wins;
    /// zero before the first entry.
    Table { entries: Vec<(usize, f64)> },
}

impl LearningRate {
    pub fn constant(gamma: f64) -> Self {
        LearningRate::Constant { gamma }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LearningRate::Constant { gamma } => *gamma >= 0.0,
            LearningRate::TwoPhase { gamma1, gamma2, .. } => *gamma1 >= 0.0 && *gamma2 >= 0.0,
            LearningRate::Table { entries } => entries.iter().all(|(_, g)| *g >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams("learning rates must be nonnegative".into()))
        }
    }
}

pub fn schedule_eval(schedule: &LearningRate, t: usize) -> f64 {
    match schedule {
        LearningRate::Constant { gamma } => *gamma,
        LearningRate::TwoPhase { gamma1, gamma2, switch_at } => {
            if t < *switch_at {
                *gamma1
            } else {
                *gamma2
            }
        }
        LearningRate::Table { entries } => entries
            .iter()
            .filter(|(start, _)| *start <= t)
            .max_by_key(|(start, _)| *start)
            .map_or(0.0, |(_, g)| *g),
    }
}

/// Clamps to `[-A, A]`; `None` is unbounded.
#[inline]
pub fn clip(g: f64, a: Option<f64>) -> f64 {
    match a {
        Some(a) => g.clamp(-a, a),
        None => g,
    }
}

/// A set of parameter index ranges that an update may touch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamMask {
    ranges: Vec<Range<usize>>,
}

impl ParamMask {
    pub fn new(ranges: Vec<Range<usize>>) -> Self {
        Self { ranges }
    }

    pub fn all(len: usize) -> Self {
        Self { ranges: vec![0..len] }
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn contains(&self, i: usize) -> bool {
        self.ranges.iter().any(|r| r.contains(&i))
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }

    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisySgdConfig {
    pub schedule: LearningRate,
    /// `A`; `None` disables clipping.
    #[serde(default)]
    pub clip_range: Option<f64>,
    /// `tau`; noise is `Unif[-tau, tau]` per updated coordinate.
    #[serde(default)]
    pub noise_level: f64,
    pub batch_size: usize,
    /// Box half-width applied to the updated coordinates after the step.
    #[serde(default)]
    pub projection: Option<f64>,
}

impl NoisySgdConfig {
    pub fn plain(gamma: f64, batch_size: usize) -> Self {
        Self {
            schedule: LearningRate::constant(gamma),
            clip_range: None,
            noise_level: 0.0,
            batch_size,
            projection: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidParams("batch size must be at least 1".into()));
        }
        if matches!(self.clip_range, Some(a) if !(a > 0.0)) {
            return Err(Error::InvalidParams("clip range must be positive".into()));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::InvalidParams("noise level must be nonnegative".into()));
        }
        if matches!(self.projection, Some(p) if !(p > 0.0)) {
            return Err(Error::InvalidParams("projection half-width must be positive".into()));
        }
        Ok(())
    }
}

/// One update from per-sample gradients:
/// `theta <- theta - gamma_t (mean_s clip(g_s) + Z)` on masked coordinates,
/// then projection onto `[-Delta, Delta]` if configured.
pub fn noisy_step<R: Rng + ?Sized>(
    params: &mut [f64],
    per_sample_grads: &[GradientBundle],
    cfg: &NoisySgdConfig,
    t: usize,
    rng: &mut R,
    mask: &ParamMask,
) -> Result<()> {
    if per_sample_grads.len() != cfg.batch_size {
        return Err(Error::BatchSizeMismatch { expected: cfg.batch_size, got: per_sample_grads.len() });
    }
    let inv_b = 1.0 / cfg.batch_size as f64;
    let mut mean = vec![0.0; params.len()];
    for g in per_sample_grads {
        for i in mask.indices() {
            mean[i] += clip(g.as_slice()[i], cfg.clip_range);
        }
    }
    for v in &mut mean {
        *v *= inv_b;
    }
    apply_mean_gradient(params, &mean, cfg, t, rng, mask);
    Ok(())
}

/// The update given an already clipped and averaged gradient.
pub fn apply_mean_gradient<R: Rng + ?Sized>(
    params: &mut [f64],
    mean_grad: &[f64],
    cfg: &NoisySgdConfig,
    t: usize,
    rng: &mut R,
    mask: &ParamMask,
) {
    let gamma = schedule_eval(&cfg.schedule, t);
    let tau = cfg.noise_level;
    for i in mask.indices() {
        let z = if tau > 0.0 { rng.gen_range(-tau..=tau) } else { 0.0 };
        let mut v = params[i] - gamma * (mean_grad[i] + z);
        if let Some(delta) = cfg.projection {
            v = v.clamp(-delta, delta);
        }
        params[i] = v;
    }
}

/// Mean batch loss and the clipped, averaged gradient of `loss` on `(xs, ys)`.
/// Only masked coordinates are filled when clipping is on.
pub fn batch_gradient<N: Network + ?Sized>(
    net: &N,
    xs: &[f64],
    ys: &[f64],
    loss: LossKind,
    clip_range: Option<f64>,
    mask: &ParamMask,
) -> (f64, Vec<f64>) {
    let d = net.input_dim();
    let mut total = 0.0;
    let mut mean = vec![0.0; net.params().len()];
    if clip_range.is_none() {
        net.accumulate_gradient(
            xs,
            &mut |row, pred| {
                total += loss.value(pred, ys[row]);
                loss.derivative(pred, ys[row])
            },
            &mut mean,
        );
    } else {
        for (row, x) in xs.chunks_exact(d).enumerate() {
            let pred = net.forward(x);
            total += loss.value(pred, ys[row]);
            let c = loss.derivative(pred, ys[row]);
            if c != 0.0 {
                let g = net.gradient(x, c);
                for i in mask.indices() {
                    mean[i] += clip(g.as_slice()[i], clip_range);
                }
            }
        }
    }
    let inv_b = 1.0 / ys.len().max(1) as f64;
    for v in &mut mean {
        *v *= inv_b;
    }
    (total * inv_b, mean)
}

/// One noisy step on the batch `(xs, ys)`; returns the batch loss measured
/// before the step.
#[allow(clippy::too_many_arguments)]
pub fn batch_step<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &mut N,
    xs: &[f64],
    ys: &[f64],
    loss: LossKind,
    cfg: &NoisySgdConfig,
    t: usize,
    rng: &mut R,
    mask: &ParamMask,
) -> Result<f64> {
    if ys.len() != cfg.batch_size {
        return Err(Error::BatchSizeMismatch { expected: cfg.batch_size, got: ys.len() });
    }
    let (value, grad) = batch_gradient(net, xs, ys, loss, cfg.clip_range, mask);
    apply_mean_gradient(net.params_mut(), &grad, cfg, t, rng, mask);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn clipping() {
        assert_eq!(clip(5.0, Some(1.0)), 1.0);
        assert_eq!(clip(-0.3, Some(1.0)), -0.3);
        assert_eq!(clip(1e9, None), 1e9);
    }

    #[test]
    fn schedules() {
        assert_eq!(schedule_eval(&LearningRate::constant(0.003), 12345), 0.003);
        let two = LearningRate::TwoPhase { gamma1: 1.0, gamma2: 0.5, switch_at: 10 };
        assert_eq!(schedule_eval(&two, 9), 1.0);
        assert_eq!(schedule_eval(&two, 10), 0.5);
        assert_eq!(schedule_eval(&LearningRate::constant(0.0), 3), 0.0);
        let table = LearningRate::Table { entries: vec![(5, 0.1), (0, 1.0), (20, 0.01)] };
        assert_eq!(schedule_eval(&table, 4), 1.0);
        assert_eq!(schedule_eval(&table, 19), 0.1);
        assert_eq!(schedule_eval(&table, 20), 0.01);
    }

    fn g(v: &[f64]) -> GradientBundle {
        GradientBundle::from_vec(v.to_vec())
    }

    #[test]
    fn plain_sgd_step() {
        let cfg = NoisySgdConfig::plain(0.5, 2);
        let mut p = vec![1.0, 2.0];
        noisy_step(&mut p, &[g(&[1.0, 0.0]), g(&[3.0, 2.0])], &cfg, 0, &mut seeded(0), &ParamMask::all(2))
            .unwrap();
        assert_eq!(p, vec![0.0, 1.5]);
    }

    #[test]
    fn zero_rate_and_mask() {
        let mut cfg = NoisySgdConfig::plain(0.0, 1);
        cfg.noise_level = 1.0;
        let mut p = vec![1.0, 2.0];
        noisy_step(&mut p, &[g(&[5.0, 5.0])], &cfg, 0, &mut seeded(0), &ParamMask::all(2)).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        let cfg = NoisySgdConfig::plain(1.0, 1);
        noisy_step(&mut p, &[g(&[5.0, 5.0])], &cfg, 0, &mut seeded(0), &ParamMask::new(vec![1..2]))
            .unwrap();
        assert_eq!(p, vec![1.0, -3.0]);
    }

    #[test]
    fn projection_example() {
        let mut cfg = NoisySgdConfig::plain(1.0, 1);
        cfg.projection = Some(1.0);
        let mut p = vec![0.95];
        noisy_step(&mut p, &[g(&[-0.2])], &cfg, 0, &mut seeded(0), &ParamMask::all(1)).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn batch_size_checked() {
        let cfg = NoisySgdConfig::plain(1.0, 3);
        let mut p = vec![0.0];
        let err = noisy_step(&mut p, &[g(&[1.0])], &cfg, 0, &mut seeded(0), &ParamMask::all(1));
        assert!(matches!(err, Err(Error::BatchSizeMismatch { expected: 3, got: 1 })));
    }

    #[test]
    fn clipped_step_bounded_by_gamma_a() {
        let mut cfg = NoisySgdConfig::plain(0.1, 2);
        cfg.clip_range = Some(0.5);
        let mut p = vec![0.0, 0.0];
        noisy_step(&mut p, &[g(&[10.0, -7.0]), g(&[3.0, -0.1])], &cfg, 0, &mut seeded(0), &ParamMask::all(2))
            .unwrap();
        assert!((p[0] + 0.05).abs() < 1e-15);
        assert!((p[1] - 0.03).abs() < 1e-15);
    }

    #[test]
    fn noise_statistics() {
        let tau = 0.3;
        let mut cfg = NoisySgdConfig::plain(1.0, 1);
        cfg.noise_level = tau;
        let mut rng = seeded(11);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        let zero = g(&[0.0]);
        for t in 0..n {
            let mut p = vec![0.0];
            noisy_step(&mut p, std::slice::from_ref(&zero), &cfg, t, &mut rng, &ParamMask::all(1)).unwrap();
            s += p[0];
            s2 += p[0] * p[0];
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        let sigma = (tau * tau / 3.0 / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * sigma);
        assert!((var / (tau * tau / 3.0) - 1.0).abs() < 0.02);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::rng::seeded;
    use proptest::collection::vec;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn clipped_values_stay_in_range(g in -1e6..1e6f64, a in 1e-6..1e3f64) {
            prop_assert!(clip(g, Some(a)).abs() <= a);
        }

        #[test]
        fn noiseless_update_is_at_most_gamma_a(
            params in vec(-5.0..5.0f64, 6),
            grads in vec(vec(-50.0..50.0f64, 6), 4),
            gamma in 0.0..2.0f64,
            a in 0.01..10.0f64,
        ) {
            let cfg = NoisySgdConfig { clip_range: Some(a), ..NoisySgdConfig::plain(gamma, 4) };
            let bundles: Vec<_> = grads.into_iter().map(GradientBundle::from_vec).collect();
            let mut next = params.clone();
            noisy_step(&mut next, &bundles, &cfg, 0, &mut seeded(0), &ParamMask::all(6)).unwrap();
            for (p, q) in params.iter().zip(&next) {
                prop_assert!((p - q).abs() <= gamma * a * (1.0 + 1e-12));
            }
        }

        #[test]
        fn projection_keeps_box(
            params in vec(-5.0..5.0f64, 8),
            grads in vec(vec(-50.0..50.0f64, 8), 2),
            delta in 0.01..3.0f64,
            tau in 0.0..5.0f64,
            seed: u64,
        ) {
            let cfg = NoisySgdConfig { noise_level: tau, projection: Some(delta), ..NoisySgdConfig::plain(0.5, 2) };
            let bundles: Vec<_> = grads.into_iter().map(GradientBundle::from_vec).collect();
            let mask = ParamMask::new(vec![0..3, 5..8]);
            let mut next = params.clone();
            noisy_step(&mut next, &bundles, &cfg, 0, &mut seeded(seed), &mask).unwrap();
            for i in 0..8 {
                if mask.contains(i) {
                    prop_assert!(next[i].abs() <= delta);
                } else {
                    prop_assert_eq!(next[i], params[i]);
                }
            }
        }

        #[test]
        fn same_seed_same_parameters(params in vec(-1.0..1.0f64, 5), tau in 0.0..1.0f64, seed: u64) {
            let cfg = NoisySgdConfig { noise_level: tau, ..NoisySgdConfig::plain(0.1, 1) };
            let run = || {
                let mut p = params.clone();
                let mut rng = seeded(seed);
                for t in 0..10 {
                    let g = GradientBundle::from_vec(p.iter().map(|v| 2.0 * v).collect());
                    noisy_step(&mut p, &[g], &cfg, t, &mut rng, &ParamMask::all(5)).unwrap();
                }
                p
            };
            prop_assert_eq!(run(), run());
        }
    }
}
