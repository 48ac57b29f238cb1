use std::ops::Range;

use log::warn;
use rand::Rng;

use super::{Activation, GradientBundle, Network};
use crate::error::{Error, Result};

/// `x -> sum_i a_i act(<w_i, x> + b_i)`, optionally scaled by `1/N`.
///
/// Parameters are stored as `[w (N*d, row per unit) | b (N) | a (N)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    n: usize,
    d: usize,
    params: Vec<f64>,
    activation: Activation,
    mean_field: bool,
}

impl TwoLayerNet {
    pub fn zeros(n: usize, d: usize, activation: Activation) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidParams("two-layer net needs N >= 1 and d >= 1".into()));
        }
        Ok(Self { n, d, params: vec![0.0; n * d + 2 * n], activation, mean_field: false })
    }

    pub fn from_parts(
        a: Vec<f64>,
        w: Vec<f64>,
        b: Vec<f64>,
        d: usize,
        activation: Activation,
    ) -> Result<Self> {
        let n = a.len();
        if b.len() != n || w.len() != n * d {
            return Err(Error::InvalidParams("inconsistent two-layer shapes".into()));
        }
        if a.iter().chain(&w).chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("parameters must be finite".into()));
        }
        let mut net = Self::zeros(n, d, activation)?;
        net.w_mut().copy_from_slice(&w);
        net.b_mut().copy_from_slice(&b);
        net.a_mut().copy_from_slice(&a);
        Ok(net)
    }

    pub fn width(&self) -> usize {
        self.n
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn mean_field(&self) -> bool {
        self.mean_field
    }

    pub fn set_mean_field(&mut self, on: bool) {
        self.mean_field = on;
    }

    pub fn first_layer_range(&self) -> Range<usize> {
        0..self.n * self.d
    }

    pub fn bias_range(&self) -> Range<usize> {
        self.n * self.d..self.n * self.d + self.n
    }

    pub fn second_layer_range(&self) -> Range<usize> {
        self.n * self.d + self.n..self.params.len()
    }

    pub fn w(&self) -> &[f64] {
        &self.params[self.first_layer_range()]
    }

    pub fn w_row(&self, i: usize) -> &[f64] {
        &self.params[i * self.d..(i + 1) * self.d]
    }

    pub fn b(&self) -> &[f64] {
        &self.params[self.bias_range()]
    }

    pub fn a(&self) -> &[f64] {
        &self.params[self.second_layer_range()]
    }

    pub fn w_mut(&mut self) -> &mut [f64] {
        let r = self.first_layer_range();
        &mut self.params[r]
    }

    pub fn b_mut(&mut self) -> &mut [f64] {
        let r = self.bias_range();
        &mut self.params[r]
    }

    pub fn a_mut(&mut self) -> &mut [f64] {
        let r = self.second_layer_range();
        &mut self.params[r]
    }

    fn output_scale(&self) -> f64 {
        if self.mean_field {
            1.0 / self.n as f64
        } else {
            1.0
        }
    }

    /// Pre-activation of unit `i`.
    #[inline]
    pub fn preactivation(&self, i: usize, x: &[f64]) -> f64 {
        dot(self.w_row(i), x) + self.b()[i]
    }

    /// Hidden-unit outputs `act(<w_i, x> + b_i)`.
    pub fn hidden(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.activation.apply(self.preactivation(i, x))).collect()
    }

    /// The network with first-layer columns permuted so that
    /// `result.forward(x) == self.forward(x permuted by perm)` where the
    /// permuted input has entry `j` equal to `x[perm[j]]`.
    pub fn permute_inputs(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.d);
        let mut out = self.clone();
        for i in 0..self.n {
            let src = self.w_row(i).to_vec();
            let row = &mut out.w_mut()[i * self.d..(i + 1) * self.d];
            for (j, &pj) in perm.iter().enumerate() {
                row[pj] = src[j];
            }
        }
        out
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Network for TwoLayerNet {
    fn input_dim(&self) -> usize {
        self.d
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.d);
        let a = self.a();
        let s: f64 = (0..self.n)
            .map(|i| a[i] * self.activation.apply(self.preactivation(i, x)))
            .sum();
        s * self.output_scale()
    }

    fn gradient(&self, x: &[f64], upstream: f64) -> GradientBundle {
        let mut g = GradientBundle::zeros(self.params.len());
        if upstream != 0.0 {
            self.add_gradient(x, upstream, g.as_mut_slice());
        }
        g
    }

    fn accumulate_gradient(
        &self,
        xs: &[f64],
        coeff: &mut dyn FnMut(usize, f64) -> f64,
        grad_out: &mut [f64],
    ) -> Vec<f64> {
        let mut preds = Vec::with_capacity(xs.len() / self.d);
        for (row, x) in xs.chunks_exact(self.d).enumerate() {
            let p = self.forward(x);
            preds.push(p);
            let c = coeff(row, p);
            if c != 0.0 {
                self.add_gradient(x, c, grad_out);
            }
        }
        preds
    }
}

impl TwoLayerNet {
    fn add_gradient(&self, x: &[f64], upstream: f64, out: &mut [f64]) {
        let scale = upstream * self.output_scale();
        let (nd, n) = (self.n * self.d, self.n);
        let a = self.a();
        for i in 0..n {
            let pre = self.preactivation(i, x);
            out[nd + n + i] += scale * self.activation.apply(pre);
            let back = scale * a[i] * self.activation.derivative(pre);
            if back != 0.0 {
                out[nd + i] += back;
                for (o, &xj) in out[i * self.d..(i + 1) * self.d].iter_mut().zip(x) {
                    *o += back * xj;
                }
            }
        }
    }
}

/// Layer-wise curriculum initialization: `w = 0`, `a_i = kappa`, `b_i = Delta d + 1`.
pub fn init_curriculum_net(n: usize, d: usize, delta: f64, kappa: f64) -> Result<TwoLayerNet> {
    let cap = 1.0 / (n as f64 * (2.0 * delta * d as f64 + 2.0));
    if kappa > cap {
        warn!("kappa = {kappa} exceeds 1/(N(2 Delta d + 2)) = {cap}; |NN| < 1 is no longer guaranteed");
    }
    let mut net = TwoLayerNet::zeros(n, d, Activation::Relu)?;
    net.a_mut().fill(kappa);
    net.b_mut().fill(delta * d as f64 + 1.0);
    Ok(net)
}

/// `b_lm = -d + 2l - 1/2 + (m+1)/(d-k)`.
pub fn b_lm(d: usize, k: usize, l: usize, m: i64) -> f64 {
    -(d as f64) + 2.0 * l as f64 - 0.5 + (m + 1) as f64 / (d - k) as f64
}

/// Number of `(l, m)` pairs: `l in 0..=d`, `m in -1..=d-k`.
pub fn one_step_grid_size(d: usize, k: usize) -> usize {
    (d + 1) * (d - k + 2)
}

/// Initial bias grid `b_lm/(d+1) + 1/2`, `l`-major.
pub fn one_step_bias_grid(d: usize, k: usize) -> Vec<f64> {
    let mut grid = Vec::with_capacity(one_step_grid_size(d, k));
    for l in 0..=d {
        for m in -1..=(d - k) as i64 {
            grid.push(b_lm(d, k, l, m) / (d + 1) as f64 + 0.5);
        }
    }
    grid
}

/// Width at which every grid point is drawn with probability at least `1 - delta`.
pub fn recommended_one_step_width(d: usize, k: usize, delta: f64) -> usize {
    let g = one_step_grid_size(d, k) as f64;
    (g * (g / delta).ln()).ceil() as usize
}

/// One-step hinge initialization: Ramp units, `w = 0`, `a_i = 1/(2N)`, biases
/// drawn uniformly from [`one_step_bias_grid`].
pub fn init_one_step_net<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    k: usize,
    rng: &mut R,
) -> Result<TwoLayerNet> {
    if k >= d {
        return Err(Error::InvalidParams(format!("need k < d, got k = {k}, d = {d}")));
    }
    let grid = one_step_bias_grid(d, k);
    init_one_step_net_with_grid(n, d, &grid, rng)
}

pub fn init_one_step_net_with_grid<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    grid: &[f64],
    rng: &mut R,
) -> Result<TwoLayerNet> {
    if grid.is_empty() {
        return Err(Error::InvalidParams("empty bias grid".into()));
    }
    let coverage = (grid.len() as f64) * (grid.len() as f64).ln();
    if (n as f64) < coverage {
        warn!("N = {n} is below the grid coverage width {coverage:.0}");
    }
    let mut net = TwoLayerNet::zeros(n, d, Activation::Ramp)?;
    net.a_mut().fill(1.0 / (2.0 * n as f64));
    for b in net.b_mut() {
        *b = grid[rng.gen_range(0..grid.len())];
    }
    Ok(net)
}

/// Mean-field two-layer ReLU net: `a ~ U(-1, 1)`, `w, b ~ U(-1/sqrt d, 1/sqrt d)`,
/// output scaled by `1/N`.
pub fn init_mean_field_net<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> TwoLayerNet {
    let mut net = TwoLayerNet::zeros(n.max(1), d.max(1), Activation::Relu)
        .expect("positive dimensions");
    let r = 1.0 / (d as f64).sqrt();
    for v in net.w_mut() {
        *v = rng.gen_range(-r..r);
    }
    for v in net.b_mut() {
        *v = rng.gen_range(-r..r);
    }
    for v in net.a_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    net.mean_field = true;
    net
}

impl TwoLayerNet {
    /// Unscaled net with the usual fan-in uniform initialization on both layers.
    pub fn uniform_init<R: Rng + ?Sized>(
        n: usize,
        d: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(n, d, activation)?;
        let r1 = 1.0 / (d as f64).sqrt();
        let r2 = 1.0 / (n as f64).sqrt();
        for v in net.w_mut() {
            *v = rng.gen_range(-r1..r1);
        }
        for v in net.b_mut() {
            *v = rng.gen_range(-r1..r1);
        }
        for v in net.a_mut() {
            *v = rng.gen_range(-r2..r2);
        }
        Ok(net)
    }
}
