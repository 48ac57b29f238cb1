//! Training procedures: the layer-wise curriculum with its theorem-derived
//! schedule, joint standard and curriculum training with stopping rules, and
//! the one-step hinge procedure on a Ramp network.

use std::collections::VecDeque;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    hamming_weight, mixture_probability, sample_into, Dataset, MixtureParams, MonomialTarget,
};
use crate::error::{Error, Result};
use crate::loss::{label_mean_estimate, loss_value, misclassification_rate, sign, LossKind};
use crate::model::{init_one_step_net, recommended_one_step_width, Network, TwoLayerNet};
use crate::optimizer::{apply_mean_gradient, batch_gradient, LearningRate, NoisySgdConfig, ParamMask};
use crate::rng::seeded;

/// Bias rule applied at the phase switch of the layer-wise curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasReset {
    /// `b_i = -Delta k + 2(i+1) Delta`.
    #[default]
    Centered,
    /// `b_i = -1 + 2(i+1) Delta`.
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub t1: usize,
    pub t2: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub batch_size: usize,
    /// Batch used once to estimate the sparse label mean.
    pub b1: usize,
    pub delta: f64,
    pub kappa: f64,
    pub tau: f64,
    #[serde(default)]
    pub clip_range: Option<f64>,
    /// Support size `k` used by the bias reset.
    pub k: usize,
    #[serde(default)]
    pub bias_reset: BiasReset,
    #[serde(default = "default_true")]
    pub second_layer_reset: bool,
}

fn default_true() -> bool {
    true
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !(self.kappa > 0.0) {
            return Err(Error::InvalidParams("Delta and kappa must be positive".into()));
        }
        if self.batch_size == 0 || self.b1 == 0 {
            return Err(Error::InvalidParams("batch sizes must be positive".into()));
        }
        if !(self.gamma1 >= 0.0) || !(self.gamma2 >= 0.0) || !(self.tau >= 0.0) {
            return Err(Error::InvalidParams("rates and noise must be nonnegative".into()));
        }
        Ok(())
    }

    /// Distinct samples one run consumes: `B1 + T1 B + T2 B`.
    pub fn samples_needed(&self) -> usize {
        self.b1 + (self.t1 + self.t2) * self.batch_size
    }

    pub fn reset_bias(&self, i: usize) -> f64 {
        let step = 2.0 * (i + 1) as f64 * self.delta;
        match self.bias_reset {
            BiasReset::Centered => -self.delta * self.k as f64 + step,
            BiasReset::Shifted => -1.0 + step,
        }
    }
}

/// Free proof constants. `c = None` means `100 Delta^2 / L^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    #[serde(default)]
    pub c: Option<f64>,
    pub c1: f64,
    pub c_star: f64,
}

impl Default for TheoremConstants {
    fn default() -> Self {
        Self { c: None, c1: 1.0, c_star: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Inputs {
    pub d: usize,
    pub k: usize,
    pub mu: f64,
    pub kappa: f64,
    pub delta: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub n: usize,
    pub batch_size: usize,
    /// Accuracy of the sparse label-mean estimate; sets `B1`.
    pub zeta: f64,
    #[serde(default)]
    pub constants: TheoremConstants,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Schedule {
    pub schedule: CurriculumSchedule,
    pub l_mu: f64,
    /// `4 C* ln(3d) d B / rho` without the `1/rho` factor.
    pub dataset_floor: f64,
}

/// `L = mu^{k-1} - mu^{k+1}`.
pub fn drift_constant(mu: f64, k: usize) -> f64 {
    mu.powi(k as i32 - 1) - mu.powi(k as i32 + 1)
}

/// Evaluates the step counts and learning rates of the layer-wise curriculum.
pub fn theorem2_hyperparams(inp: &Theorem2Inputs) -> Result<Theorem2Schedule> {
    if !(inp.mu > 0.0 && inp.mu < 1.0) || inp.d < 3 || inp.k == 0 || inp.k > inp.d {
        return Err(Error::InvalidParams("need mu in (0,1), d >= 3, 0 < k <= d".into()));
    }
    if !(inp.epsilon > 0.0) || !(inp.zeta > 0.0) || inp.n == 0 {
        return Err(Error::InvalidParams("need epsilon, zeta > 0 and N >= 1".into()));
    }
    let d = inp.d as f64;
    let ln_d = d.ln();
    let l = drift_constant(inp.mu, inp.k);
    let (delta, kappa, tau) = (inp.delta, inp.kappa, inp.tau);
    let c = inp.constants.c.unwrap_or(100.0 * delta * delta / (l * l));
    let t1 = c * d * l * l * kappa * kappa * ln_d.powi(3) / (4.0 * delta * delta * (4.0 * kappa + tau).powi(2));
    let gamma1 = 2.0 * delta / (kappa * l * d * ln_d.powi(3));
    let spread = inp.constants.c1 + 2.0 * delta * inp.k as f64 + tau;
    let n = inp.n as f64;
    let t2 = 64.0 * spread * spread * n * n * d / (inp.epsilon.powi(2) * delta * delta * ln_d);
    let gamma2 = inp.epsilon * ln_d / (2.0 * spread * spread * d * n * delta);
    let schedule = CurriculumSchedule {
        t1: t1.ceil() as usize,
        t2: t2.ceil() as usize,
        gamma1,
        gamma2,
        batch_size: inp.batch_size,
        b1: crate::loss::required_b1(inp.d, inp.zeta, inp.constants.c_star),
        delta,
        kappa,
        tau,
        clip_range: None,
        k: inp.k,
        bias_reset: BiasReset::Centered,
        second_layer_reset: true,
    };
    let dataset_floor = 4.0 * inp.constants.c_star * (3.0 * d).ln() * d * inp.batch_size as f64;
    Ok(Theorem2Schedule { schedule, l_mu: l, dataset_floor })
}

/// Loss-threshold stopping with a step cap. The threshold is compared with
/// the mean of the last `window` batch losses, measured before each update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub loss_threshold: f64,
    pub max_steps: usize,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_window() -> usize {
    10
}

impl StopRule {
    pub fn new(loss_threshold: f64, max_steps: usize) -> Self {
        Self { loss_threshold, max_steps, window: default_window() }
    }

    /// Run exactly `steps` updates.
    pub fn fixed(steps: usize) -> Self {
        Self { loss_threshold: f64::NEG_INFINITY, max_steps: steps, window: 1 }
    }
}

/// Held-out evaluation: `samples` fresh draws from `params`, fixed by `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    d: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Evaluate every this many steps during training.
    pub every: Option<usize>,
}

impl TestSet {
    pub fn generate(params: &MixtureParams, target: &MonomialTarget, samples: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let d = params.d;
        let mut row = vec![0i8; d];
        let mut xs = Vec::with_capacity(samples * d);
        let mut ys = Vec::with_capacity(samples);
        for _ in 0..samples {
            sample_into(params, &mut rng, &mut row);
            xs.extend(row.iter().map(|&v| v as f64));
            ys.push(target.eval(&row));
        }
        Self { d, xs, ys, every: None }
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    /// `(sign accuracy, mean loss)`.
    pub fn evaluate<N: Network + ?Sized>(&self, net: &N, loss: LossKind) -> (f64, f64) {
        assert_eq!(net.input_dim(), self.d);
        let mut preds = Vec::with_capacity(self.ys.len());
        for chunk in self.xs.chunks(4096 * self.d) {
            preds.extend(net.forward_batch(chunk));
        }
        let acc = 1.0 - misclassification_rate(&preds, &self.ys);
        (acc, crate::loss::mean_loss(loss, &preds, &self.ys))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps_phase1: usize,
    pub steps_total: usize,
    /// Whether the final phase met its loss threshold.
    pub converged: bool,
    pub final_train_loss: f64,
    /// Batch loss at every measured step.
    pub train_losses: Vec<f64>,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    /// `(step, accuracy)` from periodic evaluation.
    pub evals: Vec<(usize, f64)>,
}

/// Where training batches come from.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// A fixed dataset. `passes = Some(p)` allows `p` shuffled passes (each
    /// sample at most once per pass); `None` cycles forever.
    Offline { data: &'a Dataset, passes: Option<usize> },
    /// A new batch from the mixture at every step.
    Fresh { params: MixtureParams, target: &'a MonomialTarget },
}

enum Batcher<'a> {
    Offline {
        data: &'a Dataset,
        pool: Vec<usize>,
        order: Vec<usize>,
        pos: usize,
        passes_left: Option<usize>,
        used: Vec<usize>,
    },
    Fresh {
        params: MixtureParams,
        target: &'a MonomialTarget,
        row: Vec<i8>,
    },
}

impl<'a> Batcher<'a> {
    fn offline<R: Rng + ?Sized>(data: &'a Dataset, pool: Vec<usize>, passes: Option<usize>, rng: &mut R) -> Self {
        let mut order = pool.clone();
        order.shuffle(rng);
        Batcher::Offline { data, pool, order, pos: 0, passes_left: passes, used: Vec::new() }
    }

    fn fresh(params: MixtureParams, target: &'a MonomialTarget) -> Self {
        let row = vec![0i8; params.d];
        Batcher::Fresh { params, target, row }
    }

    fn next<R: Rng + ?Sized>(&mut self, b: usize, rng: &mut R, xs: &mut Vec<f64>, ys: &mut Vec<f64>) -> Result<()> {
        xs.clear();
        ys.clear();
        match self {
            Batcher::Offline { data, pool, order, pos, passes_left, used } => {
                if *pos + b > order.len() {
                    let more = match passes_left {
                        None => true,
                        Some(p) => *p > 1,
                    };
                    if !more || pool.len() < b {
                        return Err(Error::DataExhausted { needed: b, available: order.len() - *pos });
                    }
                    if let Some(p) = passes_left {
                        *p -= 1;
                    }
                    order.clone_from(pool);
                    order.shuffle(rng);
                    *pos = 0;
                }
                for &i in &order[*pos..*pos + b] {
                    xs.extend(data.input(i).iter().map(|&v| v as f64));
                    ys.push(data.label(i));
                }
                if matches!(passes_left, Some(1)) {
                    used.extend_from_slice(&order[*pos..*pos + b]);
                }
                *pos += b;
            }
            Batcher::Fresh { params, target, row } => {
                for _ in 0..b {
                    sample_into(params, rng, row);
                    xs.extend(row.iter().map(|&v| v as f64));
                    ys.push(target.eval(row));
                }
            }
        }
        Ok(())
    }

    /// Indices consumed in single-pass mode.
    fn used(&self) -> &[usize] {
        match self {
            Batcher::Offline { used, .. } => used,
            Batcher::Fresh { .. } => &[],
        }
    }
}

struct PhaseOutcome {
    steps: usize,
    converged: bool,
    final_loss: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_phase<N: Network + ?Sized, R: Rng + ?Sized>(
    net: &mut N,
    batcher: &mut Batcher<'_>,
    cfg: &NoisySgdConfig,
    loss: LossKind,
    stop: &StopRule,
    mask: &ParamMask,
    t_offset: usize,
    test: Option<&TestSet>,
    metrics: &mut RunMetrics,
    rng: &mut R,
) -> Result<PhaseOutcome> {
    let mut out = PhaseOutcome { steps: 0, converged: false, final_loss: f64::NAN };
    if stop.max_steps == 0 {
        return Ok(out);
    }
    let window = stop.window.max(1);
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(window);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    loop {
        match batcher.next(cfg.batch_size, rng, &mut xs, &mut ys) {
            Err(Error::DataExhausted { .. }) if out.steps == stop.max_steps => return Ok(out),
            other => other?,
        }
        let (value, grad) = batch_gradient(net, &xs, &ys, loss, cfg.clip_range, mask);
        if !value.is_finite() {
            return Err(Error::InvalidParams(format!("training diverged at step {}", t_offset + out.steps)));
        }
        metrics.train_losses.push(value);
        if recent.len() == window {
            recent.pop_front();
        }
        recent.push_back(value);
        out.final_loss = recent.iter().sum::<f64>() / recent.len() as f64;
        if out.final_loss < stop.loss_threshold {
            out.converged = true;
            return Ok(out);
        }
        if out.steps == stop.max_steps {
            return Ok(out);
        }
        apply_mean_gradient(net.params_mut(), &grad, cfg, t_offset + out.steps, rng, mask);
        out.steps += 1;
        let t = t_offset + out.steps;
        if let Some(test) = test {
            if test.every.is_some_and(|e| e > 0 && t.is_multiple_of(e)) {
                let (acc, _) = test.evaluate(net, loss);
                debug!("step {t}: test accuracy {acc:.4}");
                metrics.evals.push((t, acc));
            }
        }
    }
}

fn with_label_mean(loss: LossKind, ybar: f64) -> Result<LossKind> {
    match loss {
        LossKind::Covariance { .. } => LossKind::covariance(ybar),
        other => Ok(other),
    }
}

fn finish<N: Network + ?Sized>(net: &N, loss: LossKind, test: Option<&TestSet>, metrics: &mut RunMetrics) {
    if let Some(test) = test {
        let (acc, l) = test.evaluate(net, loss);
        metrics.test_accuracy = Some(acc);
        metrics.test_loss = Some(l);
    }
}

/// All parameters trained jointly on batches from `source` until `stop`.
/// A covariance loss takes the label mean of the source.
pub fn run_standard<N: Network + ?Sized, R: Rng + ?Sized>(
    source: DataSource<'_>,
    net: &mut N,
    cfg: &NoisySgdConfig,
    loss: LossKind,
    stop: &StopRule,
    test: Option<&TestSet>,
    rng: &mut R,
) -> Result<RunMetrics> {
    cfg.validate()?;
    let mask = ParamMask::all(net.params().len());
    let mut metrics = RunMetrics::default();
    let (mut batcher, ybar) = match source {
        DataSource::Offline { data, passes } => {
            (Batcher::offline(data, (0..data.len()).collect(), passes, rng), data.label_mean())
        }
        DataSource::Fresh { params, target } => (Batcher::fresh(params, target), target.expectation(&params)),
    };
    let loss = with_label_mean(loss, ybar)?;
    let out = train_phase(net, &mut batcher, cfg, loss, stop, &mask, 0, test, &mut metrics, rng)?;
    metrics.steps_total = out.steps;
    metrics.converged = out.converged;
    metrics.final_train_loss = out.final_loss;
    finish(net, loss, test, &mut metrics);
    Ok(metrics)
}

/// Two phases, all parameters trained jointly: first on the sparse inputs
/// (the Hamming split at `mu` offline, the biased component when fresh)
/// until `stop1`, then on the full data until `stop2`. In single-pass
/// offline mode the second phase skips samples consumed by the first.
#[allow(clippy::too_many_arguments)]
pub fn run_curriculum_generic<N: Network + ?Sized, R: Rng + ?Sized>(
    source: DataSource<'_>,
    mu: f64,
    net: &mut N,
    cfg: &NoisySgdConfig,
    loss: LossKind,
    stop1: &StopRule,
    stop2: &StopRule,
    test: Option<&TestSet>,
    rng: &mut R,
) -> Result<RunMetrics> {
    cfg.validate()?;
    let mask = ParamMask::all(net.params().len());
    let mut metrics = RunMetrics::default();
    let mut phase1_steps = 0;
    let mut used = Vec::new();
    if stop1.max_steps > 0 {
        let (mut batcher, ybar) = match source {
            DataSource::Offline { data, passes } => {
                let idx = data.sparse_indices(mu);
                if idx.is_empty() {
                    return Err(Error::SparseSetEmpty);
                }
                let ybar = crate::data::mean(&idx.iter().map(|&i| data.label(i)).collect::<Vec<_>>());
                (Batcher::offline(data, idx, passes, rng), ybar)
            }
            DataSource::Fresh { params, target } => {
                let sparse = MixtureParams { rho: 1.0, mu, ..params };
                (Batcher::fresh(sparse, target), target.expectation(&sparse))
            }
        };
        let loss1 = with_label_mean(loss, ybar)?;
        let out = train_phase(net, &mut batcher, cfg, loss1, stop1, &mask, 0, test, &mut metrics, rng)?;
        phase1_steps = out.steps;
        used = batcher.used().to_vec();
        info!("curriculum phase 1: {} steps, converged {}", out.steps, out.converged);
    }
    let (mut batcher, ybar) = match source {
        DataSource::Offline { data, passes } => {
            let pool: Vec<usize> = if used.is_empty() {
                (0..data.len()).collect()
            } else {
                let mut taken = vec![false; data.len()];
                used.iter().for_each(|&i| taken[i] = true);
                (0..data.len()).filter(|&i| !taken[i]).collect()
            };
            (Batcher::offline(data, pool, passes, rng), data.label_mean())
        }
        DataSource::Fresh { params, target } => (Batcher::fresh(params, target), target.expectation(&params)),
    };
    let loss2 = with_label_mean(loss, ybar)?;
    let out = train_phase(net, &mut batcher, cfg, loss2, stop2, &mask, phase1_steps, test, &mut metrics, rng)?;
    metrics.steps_phase1 = phase1_steps;
    metrics.steps_total = phase1_steps + out.steps;
    metrics.converged = out.converged;
    metrics.final_train_loss = out.final_loss;
    finish(net, loss2, test, &mut metrics);
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Algorithm1Output {
    pub net: TwoLayerNet,
    /// The network at the end of the first-layer phase, before the reset.
    pub after_phase_a: TwoLayerNet,
    pub sparse_label_mean: f64,
    pub metrics: RunMetrics,
}

/// Layer-wise curriculum. Phase A trains the first layer on sparse samples
/// with the covariance loss at the estimated sparse label mean and box
/// projection; then biases are reset and the second layer zeroed; phase B
/// trains the second layer on the remaining samples with the covariance
/// loss at the full-set label mean. No sample is used twice.
pub fn run_algorithm1<R: Rng + ?Sized>(
    full: &Dataset,
    params: &MixtureParams,
    sched: &CurriculumSchedule,
    mut net: TwoLayerNet,
    test: Option<&TestSet>,
    rng: &mut R,
) -> Result<Algorithm1Output> {
    sched.validate()?;
    if net.input_dim() != full.dim() {
        return Err(Error::InvalidParams("network and dataset dimensions differ".into()));
    }
    let mut sparse = full.sparse_indices(params.mu);
    if sparse.is_empty() {
        return Err(Error::SparseSetEmpty);
    }
    let b = sched.batch_size;
    let phase_a_need = sched.b1 + sched.t1 * b;
    if sparse.len() < phase_a_need {
        return Err(Error::DataExhausted { needed: phase_a_need, available: sparse.len() });
    }
    let phase_b_need = sched.t2 * b;
    let remaining = full.len() - phase_a_need;
    if remaining < phase_b_need {
        return Err(Error::DataExhausted { needed: phase_b_need, available: remaining });
    }
    sparse.shuffle(rng);

    let est: Vec<f64> = sparse[..sched.b1].iter().map(|&i| full.label(i)).collect();
    let ybar1 = label_mean_estimate(&est, sched.b1)?;
    let loss_a = LossKind::covariance(ybar1)?;
    let mut metrics = RunMetrics::default();
    let cfg_a = NoisySgdConfig {
        schedule: LearningRate::constant(sched.gamma1),
        clip_range: sched.clip_range,
        noise_level: sched.tau,
        batch_size: b,
        projection: Some(sched.delta),
    };
    let mask_a = ParamMask::new(vec![net.first_layer_range()]);
    let mut pool_a = Batcher::offline_ordered(full, sparse[sched.b1..phase_a_need].to_vec());
    let stop_a = StopRule::fixed(sched.t1);
    let out_a = train_phase(&mut net, &mut pool_a, &cfg_a, loss_a, &stop_a, &mask_a, 0, test, &mut metrics, rng)?;
    let after_phase_a = net.clone();

    for i in 0..net.width() {
        net.b_mut()[i] = sched.reset_bias(i);
    }
    if sched.second_layer_reset {
        net.a_mut().fill(0.0);
    }

    let mut taken = vec![false; full.len()];
    sparse[..phase_a_need].iter().for_each(|&i| taken[i] = true);
    let mut rest: Vec<usize> = (0..full.len()).filter(|&i| !taken[i]).collect();
    rest.shuffle(rng);
    rest.truncate(phase_b_need);
    let loss_b = LossKind::covariance(full.label_mean())?;
    let cfg_b = NoisySgdConfig {
        schedule: LearningRate::constant(sched.gamma2),
        clip_range: sched.clip_range,
        noise_level: sched.tau,
        batch_size: b,
        projection: None,
    };
    let mask_b = ParamMask::new(vec![net.second_layer_range()]);
    let mut pool_b = Batcher::offline_ordered(full, rest);
    let stop_b = StopRule::fixed(sched.t2);
    let out_b =
        train_phase(&mut net, &mut pool_b, &cfg_b, loss_b, &stop_b, &mask_b, out_a.steps, test, &mut metrics, rng)?;

    metrics.steps_phase1 = out_a.steps;
    metrics.steps_total = out_a.steps + out_b.steps;
    metrics.converged = out_b.steps == sched.t2;
    metrics.final_train_loss = out_b.final_loss;
    finish(&net, loss_b, test, &mut metrics);
    Ok(Algorithm1Output { net, after_phase_a, sparse_label_mean: ybar1, metrics })
}

impl<'a> Batcher<'a> {
    /// Serves `order` front to back in a single pass.
    fn offline_ordered(data: &'a Dataset, order: Vec<usize>) -> Self {
        Batcher::Offline { data, pool: Vec::new(), order, pos: 0, passes_left: Some(1), used: Vec::new() }
    }
}

/// Population gradient of `loss` under `params`, by exact enumeration of the
/// cube (`d <= 20`).
pub fn population_gradient<N: Network + ?Sized>(
    net: &N,
    params: &MixtureParams,
    target: &MonomialTarget,
    loss: LossKind,
) -> Result<Vec<f64>> {
    let d = net.input_dim();
    if d > 20 {
        return Err(Error::TooLarge { count: 1u128 << d, limit: 1 << 20 });
    }
    let mut total = vec![0.0; net.params().len()];
    for x in crate::data::cube(d) {
        let p = mixture_probability(params, &x);
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let y = target.eval(&x);
        let c = loss.derivative(net.forward(&xf), y);
        if c != 0.0 {
            for (t, g) in total.iter_mut().zip(net.gradient(&xf, c).as_slice()) {
                *t += p * g;
            }
        }
    }
    Ok(total)
}

/// Step-one constants and the second-phase rate of the one-step procedure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStepSchedule {
    pub mu_train: f64,
    pub gamma0: f64,
    pub psi0: f64,
    pub c0: f64,
    pub lambda0: f64,
    pub eta0: f64,
    pub d0: f64,
    /// Second-layer rate for `t >= 1`.
    pub eta: f64,
    /// `64 eps^-2 (d-k+1)^3 (d+1) N (1+tau)^2`.
    pub t2: f64,
}

impl OneStepSchedule {
    pub fn new(d: usize, k: usize, n: usize, epsilon: f64, tau: f64) -> Self {
        let mu = one_step_mu(d, k);
        let nf = n as f64;
        Self {
            mu_train: mu,
            gamma0: 2.0 * nf * mu.powi(-(k as i32 - 1)),
            psi0: nf / mu.powi(k as i32),
            c0: -1.0 / (2.0 * nf),
            lambda0: (d + 1) as f64,
            eta0: 0.0,
            d0: 0.0,
            eta: epsilon / (2.0 * nf * (1.0 + tau).powi(2)),
            t2: 64.0 / (epsilon * epsilon)
                * ((d - k + 1) as f64).powi(3)
                * (d + 1) as f64
                * nf
                * (1.0 + tau).powi(2),
        }
    }
}

/// `sqrt(1 - 1/(2(d-k)))`.
pub fn one_step_mu(d: usize, k: usize) -> f64 {
    (1.0 - 1.0 / (2.0 * (d - k) as f64)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OneStepMode {
    /// Population expectations in place of batch estimates.
    Exact,
    Sampled { batch_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStepConfig {
    pub d: usize,
    pub k: usize,
    pub epsilon: f64,
    /// Failure probability for grid coverage; sets the default width.
    pub delta: f64,
    pub tau: f64,
    /// Mixture weight of the biased component in the second phase and at test time.
    pub rho: f64,
    pub mode: OneStepMode,
    #[serde(default)]
    pub width: Option<usize>,
    /// Caps the second phase (the formula count is astronomically large).
    #[serde(default)]
    pub phase2_steps: Option<usize>,
    #[serde(default)]
    pub phase2_lr: Option<f64>,
    /// Stop once the second-phase hinge loss falls below this.
    #[serde(default)]
    pub stop_loss: Option<f64>,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
}

fn default_test_samples() -> usize {
    10_000
}

impl OneStepConfig {
    pub fn new(d: usize, k: usize, epsilon: f64, delta: f64, tau: f64, mode: OneStepMode) -> Self {
        Self {
            d,
            k,
            epsilon,
            delta,
            tau,
            rho: 0.5,
            mode,
            width: None,
            phase2_steps: None,
            phase2_lr: None,
            stop_loss: None,
            test_samples: default_test_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStepOutput {
    pub net: TwoLayerNet,
    pub after_step_one: TwoLayerNet,
    pub schedule: OneStepSchedule,
    pub metrics: RunMetrics,
}

/// Default cap on second-phase steps.
pub const ONE_STEP_PHASE2_CAP: usize = 200_000;

/// Exact hinge expectations over a finite support of input states.
struct StateTable {
    prob: Vec<f64>,
    label: Vec<f64>,
    /// `features[s * n + i]`.
    features: Vec<f64>,
    n: usize,
}

impl StateTable {
    fn build(net: &TwoLayerNet, params: &MixtureParams, k: usize) -> Result<Self> {
        let (n, d) = (net.width(), net.input_dim());
        let block = (0..n).all(|i| {
            let row = net.w_row(i);
            row[..k].iter().all(|&v| v == row[0]) && row[k..].iter().all(|&v| v == row[k])
        });
        let mut prob = Vec::new();
        let mut label = Vec::new();
        let mut features = Vec::new();
        if block {
            let p_plus = params.plus_probability();
            let binom = |n: usize, j: usize, p: f64| {
                let ln = statrs::function::factorial::ln_binomial(n as u64, j as u64);
                (ln + (n - j) as f64 * p.ln() + j as f64 * (1.0 - p).ln()).exp()
            };
            let bern = |n: usize, j: usize| {
                (statrs::function::factorial::ln_binomial(n as u64, j as u64) - n as f64 * 2f64.ln()).exp()
            };
            for p in 0..=k {
                for q in 0..=d - k {
                    let biased = if p_plus >= 1.0 {
                        if p == 0 && q == 0 { 1.0 } else { 0.0 }
                    } else {
                        binom(k, p, p_plus) * binom(d - k, q, p_plus)
                    };
                    prob.push(params.rho * biased + (1.0 - params.rho) * bern(k, p) * bern(d - k, q));
                    label.push(if p % 2 == 0 { 1.0 } else { -1.0 });
                    for i in 0..n {
                        let row = net.w_row(i);
                        let pre = row[0] * (k as f64 - 2.0 * p as f64)
                            + row[k] * ((d - k) as f64 - 2.0 * q as f64)
                            + net.b()[i];
                        features.push(net.activation().apply(pre));
                    }
                }
            }
        } else {
            if d > 16 {
                return Err(Error::TooLarge { count: 1u128 << d, limit: 1 << 16 });
            }
            for x in crate::data::cube(d) {
                prob.push(mixture_probability(params, &x));
                label.push(x[..k].iter().map(|&v| v as f64).product());
                let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
                features.extend(net.hidden(&xf));
            }
        }
        Ok(Self { prob, label, features, n })
    }

    fn outputs(&self, a: &[f64]) -> Vec<f64> {
        self.features.chunks_exact(self.n).map(|f| f.iter().zip(a).map(|(u, v)| u * v).sum()).collect()
    }

    /// `(hinge loss, accuracy, gradient in a)`.
    fn hinge(&self, a: &[f64]) -> (f64, f64, Vec<f64>) {
        let outs = self.outputs(a);
        let mut grad = vec![0.0; self.n];
        let (mut l, mut acc) = (0.0, 0.0);
        for (s, &f) in outs.iter().enumerate() {
            let (p, y) = (self.prob[s], self.label[s]);
            l += p * loss_value(LossKind::Hinge, f, y);
            if sign(f) == y {
                acc += p;
            }
            if 1.0 - y * f > 0.0 {
                let feats = &self.features[s * self.n..(s + 1) * self.n];
                for (g, u) in grad.iter_mut().zip(feats) {
                    *g -= p * y * u;
                }
            }
        }
        (l, acc, grad)
    }
}

/// One first-layer step on the biased distribution followed by second-layer
/// hinge training on the mixture.
pub fn run_one_step_hinge<R: Rng + ?Sized>(cfg: &OneStepConfig, rng: &mut R) -> Result<OneStepOutput> {
    let (d, k) = (cfg.d, cfg.k);
    if k == 0 || k >= d {
        return Err(Error::InvalidParams(format!("need 0 < k < d, got d = {d}, k = {k}")));
    }
    if !(cfg.epsilon > 0.0) || !(cfg.delta > 0.0 && cfg.delta < 1.0) || !(cfg.tau >= 0.0) {
        return Err(Error::InvalidParams("need epsilon > 0, delta in (0,1), tau >= 0".into()));
    }
    let n = cfg.width.unwrap_or_else(|| recommended_one_step_width(d, k, cfg.delta));
    let sched = OneStepSchedule::new(d, k, n, cfg.epsilon, cfg.tau);
    let mu = sched.mu_train;
    let target = MonomialTarget::parity(k, d)?;
    let biased = MixtureParams::new(1.0, mu, d)?;
    let mixed = MixtureParams::new(cfg.rho, mu, d)?;
    let mut net = init_one_step_net(n, d, k, rng)?;
    let tau = cfg.tau;
    let noise = |rng: &mut R| if tau > 0.0 { rng.gen_range(-tau..=tau) } else { 0.0 };

    // Gradient estimates at initialization.
    let (g_w, g_b, g_a) = match cfg.mode {
        OneStepMode::Exact => {
            let a = net.a().to_vec();
            let mut g_w = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    let sym = if j < k { k - 1 } else { k + 1 };
                    g_w[i * d + j] = -a[i] * mu.powi(sym as i32);
                }
            }
            let g_b: Vec<f64> = a.iter().map(|ai| -ai * mu.powi(k as i32)).collect();
            // The second-layer gradient is multiplied by eta0 = 0.
            (g_w, g_b, vec![0.0; n])
        }
        OneStepMode::Sampled { batch_size } => {
            let mut batcher = Batcher::fresh(biased, &target);
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            batcher.next(batch_size, rng, &mut xs, &mut ys)?;
            let mask = ParamMask::all(net.params().len());
            let (_, g) = batch_gradient(&net, &xs, &ys, LossKind::Hinge, None, &mask);
            (
                g[net.first_layer_range()].to_vec(),
                g[net.bias_range()].to_vec(),
                g[net.second_layer_range()].to_vec(),
            )
        }
    };
    for (w, g) in net.w_mut().iter_mut().zip(&g_w) {
        *w -= sched.gamma0 * (g + noise(rng));
    }
    for (b, g) in net.b_mut().iter_mut().zip(&g_b) {
        *b = sched.lambda0 * (*b + sched.psi0 * (g + noise(rng))) + sched.d0;
    }
    for (a, g) in net.a_mut().iter_mut().zip(&g_a) {
        *a += -sched.eta0 * (g + noise(rng)) + sched.c0;
    }
    let after_step_one = net.clone();

    let eta = cfg.phase2_lr.unwrap_or(sched.eta);
    let max_steps = cfg.phase2_steps.unwrap_or_else(|| (sched.t2.min(ONE_STEP_PHASE2_CAP as f64)) as usize);
    let mut metrics = RunMetrics { steps_phase1: 1, ..Default::default() };
    let mut steps = 0;
    match cfg.mode {
        OneStepMode::Exact => {
            let table = StateTable::build(&net, &mixed, k)?;
            let mut last;
            loop {
                let (l, acc, grad) = table.hinge(net.a());
                metrics.train_losses.push(l);
                last = (l, acc);
                if cfg.stop_loss.is_some_and(|s| l < s) {
                    metrics.converged = true;
                    break;
                }
                if steps == max_steps {
                    break;
                }
                for (a, g) in net.a_mut().iter_mut().zip(&grad) {
                    *a -= eta * (g + noise(rng));
                }
                steps += 1;
            }
            metrics.final_train_loss = last.0;
            metrics.test_accuracy = Some(last.1);
            metrics.test_loss = Some(last.0);
        }
        OneStepMode::Sampled { batch_size } => {
            let cfg2 = NoisySgdConfig {
                schedule: LearningRate::constant(eta),
                clip_range: None,
                noise_level: tau,
                batch_size,
                projection: None,
            };
            let mask = ParamMask::new(vec![net.second_layer_range()]);
            let stop = StopRule {
                loss_threshold: cfg.stop_loss.unwrap_or(f64::NEG_INFINITY),
                max_steps,
                window: default_window(),
            };
            let mut batcher = Batcher::fresh(mixed, &target);
            let out =
                train_phase(&mut net, &mut batcher, &cfg2, LossKind::Hinge, &stop, &mask, 1, None, &mut metrics, rng)?;
            steps = out.steps;
            metrics.converged = out.converged;
            metrics.final_train_loss = out.final_loss;
            let test = TestSet::generate(&mixed, &target, cfg.test_samples, rng.gen());
            finish(&net, LossKind::Hinge, Some(&test), &mut metrics);
        }
    }
    metrics.steps_total = 1 + steps;
    Ok(OneStepOutput { net, after_step_one, schedule: sched, metrics })
}

/// Accuracy of `net` on the states of the mixture, computed exactly.
pub fn exact_accuracy(net: &TwoLayerNet, params: &MixtureParams, k: usize) -> Result<f64> {
    let table = StateTable::build(net, params, k)?;
    Ok(table.hinge(net.a()).1)
}

/// Hamming weight of each row of a flat batch (diagnostics).
pub fn batch_hamming_weights(xs: &[i8], d: usize) -> Vec<usize> {
    xs.chunks_exact(d).map(hamming_weight).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::model::{init_curriculum_net, Activation, MlpNet};

    #[test]
    fn drift_constants() {
        assert!((drift_constant(0.9, 3) - 0.1539).abs() < 1e-12);
        assert!((drift_constant(0.98, 5) - (0.98f64.powi(4) - 0.98f64.powi(6))).abs() < 1e-15);
        assert!((drift_constant(0.98, 5) - 0.036526).abs() < 1e-6);
    }

    #[test]
    fn theorem_schedule_moves_far_enough() {
        let inp = Theorem2Inputs {
            d: 20,
            k: 2,
            mu: 0.9,
            kappa: 1.0 / 126.0,
            delta: 1.0,
            tau: 0.0,
            epsilon: 1.0,
            n: 3,
            batch_size: 64,
            zeta: 0.02,
            constants: TheoremConstants::default(),
        };
        let s = theorem2_hyperparams(&inp).unwrap();
        let sc = &s.schedule;
        assert!(sc.gamma1 * sc.kappa * s.l_mu * sc.t1 as f64 >= 2.0 * sc.delta);
        assert_eq!(sc.reset_bias(0), 0.0);
        assert_eq!(sc.reset_bias(2), 4.0);
    }

    #[test]
    fn mu_train_value() {
        assert!((one_step_mu(10, 3) - 0.963624).abs() < 1e-6);
    }

    #[test]
    fn zero_steps_only_resets() {
        let params = MixtureParams::new(1.0, 0.9, 8).unwrap();
        let target = MonomialTarget::parity(2, 8).unwrap();
        let ds = generate_dataset(&params, &target, 200, 3).unwrap();
        let sched = CurriculumSchedule {
            t1: 0,
            t2: 0,
            gamma1: 1.0,
            gamma2: 1.0,
            batch_size: 8,
            b1: 50,
            delta: 1.0,
            kappa: 0.01,
            tau: 0.0,
            clip_range: None,
            k: 2,
            bias_reset: BiasReset::Centered,
            second_layer_reset: true,
        };
        let net = init_curriculum_net(3, 8, 1.0, 0.01).unwrap();
        let out = run_algorithm1(&ds, &params, &sched, net.clone(), None, &mut seeded(0)).unwrap();
        assert_eq!(out.net.w(), net.w());
        assert!(out.net.a().iter().all(|&a| a == 0.0));
        assert_eq!(out.net.b(), &[0.0, 2.0, 4.0]);
        assert_eq!(out.metrics.steps_total, 0);
    }

    #[test]
    fn algorithm1_needs_enough_data() {
        let params = MixtureParams::new(1.0, 0.9, 8).unwrap();
        let target = MonomialTarget::parity(2, 8).unwrap();
        let ds = generate_dataset(&params, &target, 100, 3).unwrap();
        let sched = CurriculumSchedule {
            t1: 5,
            t2: 50,
            gamma1: 1.0,
            gamma2: 1.0,
            batch_size: 8,
            b1: 20,
            delta: 1.0,
            kappa: 0.01,
            tau: 0.0,
            clip_range: None,
            k: 2,
            bias_reset: BiasReset::Centered,
            second_layer_reset: true,
        };
        let net = init_curriculum_net(3, 8, 1.0, 0.01).unwrap();
        let err = run_algorithm1(&ds, &params, &sched, net, None, &mut seeded(0));
        assert!(matches!(err, Err(Error::DataExhausted { .. })));
    }

    #[test]
    fn stop_above_initial_loss_takes_no_steps() {
        let params = MixtureParams::new(0.5, 0.9, 6).unwrap();
        let target = MonomialTarget::parity(2, 6).unwrap();
        let mut net = MlpNet::pytorch_init(&[6, 8, 1], &mut seeded(1)).unwrap();
        let before = net.clone();
        let m = run_standard(
            DataSource::Fresh { params, target: &target },
            &mut net,
            &NoisySgdConfig::plain(0.1, 16),
            LossKind::L2,
            &StopRule::new(1e9, 100),
            None,
            &mut seeded(2),
        )
        .unwrap();
        assert_eq!(m.steps_total, 0);
        assert!(m.converged);
        assert_eq!(net, before);
    }

    #[test]
    fn offline_single_pass_exhausts() {
        let params = MixtureParams::new(0.5, 0.9, 6).unwrap();
        let target = MonomialTarget::parity(2, 6).unwrap();
        let ds = generate_dataset(&params, &target, 40, 3).unwrap();
        let mut net = MlpNet::pytorch_init(&[6, 8, 1], &mut seeded(1)).unwrap();
        let err = run_standard(
            DataSource::Offline { data: &ds, passes: Some(1) },
            &mut net,
            &NoisySgdConfig::plain(0.01, 16),
            LossKind::L2,
            &StopRule::fixed(5),
            None,
            &mut seeded(2),
        );
        assert!(matches!(err, Err(Error::DataExhausted { .. })));
    }

    #[test]
    fn curriculum_with_empty_phase_one_is_standard() {
        let params = MixtureParams::new(0.3, 0.9, 6).unwrap();
        let target = MonomialTarget::parity(2, 6).unwrap();
        let ds = generate_dataset(&params, &target, 500, 3).unwrap();
        let cfg = NoisySgdConfig::plain(0.05, 10);
        let init = MlpNet::pytorch_init(&[6, 8, 1], &mut seeded(1)).unwrap();
        for source in [
            DataSource::Offline { data: &ds, passes: None },
            DataSource::Fresh { params, target: &target },
        ] {
            let mut a = init.clone();
            let mut b = init.clone();
            let stop = StopRule::fixed(30);
            let ma = run_standard(source, &mut a, &cfg, LossKind::L2, &stop, None, &mut seeded(9)).unwrap();
            let mb = run_curriculum_generic(
                source,
                0.9,
                &mut b,
                &cfg,
                LossKind::L2,
                &StopRule::fixed(0),
                &stop,
                None,
                &mut seeded(9),
            )
            .unwrap();
            assert_eq!(a, b);
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn uniform_offline_curriculum_has_no_sparse_set() {
        let params = MixtureParams::new(0.0, 0.98, 100).unwrap();
        let target = MonomialTarget::parity(3, 100).unwrap();
        let ds = generate_dataset(&params, &target, 200, 4).unwrap();
        let mut net = MlpNet::pytorch_init(&[100, 4, 1], &mut seeded(1)).unwrap();
        let err = run_curriculum_generic(
            DataSource::Offline { data: &ds, passes: Some(1) },
            0.98,
            &mut net,
            &NoisySgdConfig::plain(0.01, 8),
            LossKind::L2,
            &StopRule::new(1e-2, 10),
            &StopRule::new(1e-3, 10),
            None,
            &mut seeded(0),
        );
        assert!(matches!(err, Err(Error::SparseSetEmpty)));
    }

    #[test]
    fn replay_is_deterministic() {
        let params = MixtureParams::new(0.5, 0.9, 8).unwrap();
        let target = MonomialTarget::parity(2, 8).unwrap();
        let run = || {
            let mut rng = seeded(77);
            let mut net = MlpNet::pytorch_init(&[8, 16, 1], &mut rng).unwrap();
            let mut cfg = NoisySgdConfig::plain(0.05, 8);
            cfg.noise_level = 0.01;
            cfg.clip_range = Some(1.0);
            let m = run_standard(
                DataSource::Fresh { params, target: &target },
                &mut net,
                &cfg,
                LossKind::L2,
                &StopRule::fixed(50),
                None,
                &mut rng,
            )
            .unwrap();
            (net, m)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn layerwise_masks_freeze_other_groups() {
        let params = MixtureParams::new(1.0, 0.9, 8).unwrap();
        let target = MonomialTarget::parity(2, 8).unwrap();
        let ds = generate_dataset(&params, &target, 400, 5).unwrap();
        let mut rng = seeded(6);
        let mut net = TwoLayerNet::uniform_init(4, 8, Activation::Relu, &mut rng).unwrap();
        let cfg = NoisySgdConfig { noise_level: 0.01, clip_range: Some(1.0), projection: Some(1.0), ..NoisySgdConfig::plain(0.1, 8) };
        let loss = LossKind::covariance(0.2).unwrap();
        let mut metrics = RunMetrics::default();
        let mut batcher = Batcher::offline(&ds, (0..ds.len()).collect(), None, &mut rng);
        for (mask, frozen) in [
            (ParamMask::new(vec![net.first_layer_range()]), vec![net.bias_range(), net.second_layer_range()]),
            (ParamMask::new(vec![net.second_layer_range()]), vec![net.first_layer_range(), net.bias_range()]),
        ] {
            for t in 0..20 {
                let before = net.params().to_vec();
                train_phase(&mut net, &mut batcher, &cfg, loss, &StopRule::fixed(1), &mask, t, None, &mut metrics, &mut rng)
                    .unwrap();
                for r in &frozen {
                    assert_eq!(net.params()[r.clone()], before[r.clone()]);
                }
                assert_ne!(net.params(), &before[..]);
            }
        }
    }

    #[test]
    fn single_pass_serves_each_index_once() {
        let params = MixtureParams::new(0.5, 0.9, 6).unwrap();
        let target = MonomialTarget::parity(2, 6).unwrap();
        let ds = generate_dataset(&params, &target, 103, 2).unwrap();
        let mut rng = seeded(3);
        let mut batcher = Batcher::offline(&ds, (0..ds.len()).collect(), Some(1), &mut rng);
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        let mut batches = 0;
        while batcher.next(10, &mut rng, &mut xs, &mut ys).is_ok() {
            batches += 1;
        }
        let mut used = batcher.used().to_vec();
        assert_eq!((batches, used.len()), (10, 100));
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), 100);
    }
}
