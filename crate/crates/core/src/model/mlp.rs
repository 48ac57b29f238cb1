use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::{GradientBundle, Network};
use crate::error::{Error, Result};

/// Fully connected ReLU network with a linear scalar output.
///
/// Layer `l` maps `dims[l] -> dims[l+1]`; its weight matrix (`out x in`,
/// row-major) is stored first, followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl MlpNet {
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 3 {
            return Err(Error::InvalidParams("MLP needs at least one hidden layer".into()));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidParams("layer widths must be positive".into()));
        }
        if *layer_dims.last().unwrap() != 1 {
            return Err(Error::InvalidParams("MLP output width must be 1".into()));
        }
        let mut offsets = vec![0];
        for w in layer_dims.windows(2) {
            offsets.push(offsets.last().unwrap() + w[0] * w[1] + w[1]);
        }
        let total = *offsets.last().unwrap();
        Ok(Self { dims: layer_dims.to_vec(), offsets, params: vec![0.0; total] })
    }

    /// Weights and biases of each layer drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn pytorch_init<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_dims)?;
        for l in 0..net.num_layers() {
            let bound = 1.0 / (net.dims[l] as f64).sqrt();
            let range = net.offsets[l]..net.offsets[l + 1];
            for v in &mut net.params[range] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// `[d, 512, 1024, 512, 64, 1]`.
    pub fn paper_dims(d: usize) -> Vec<usize> {
        vec![d, 512, 1024, 512, 64, 1]
    }

    /// `[d, 256, 256, 1]`.
    pub fn small_dims(d: usize) -> Vec<usize> {
        vec![d, 256, 256, 1]
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Hidden-layer pre-activations for one input, layer by layer.
    pub fn preactivations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut h = x.to_vec();
        for l in 0..self.num_layers() - 1 {
            let w = &self.params[self.weight_range(l)];
            let b = &self.params[self.bias_range(l)];
            let din = self.dims[l];
            let pre: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, bo)| bo + w[o * din..(o + 1) * din].iter().zip(&h).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            h = pre.iter().map(|v| v.max(0.0)).collect();
            out.push(pre);
        }
        out
    }

    fn weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.offsets[l];
        start..start + self.dims[l] * self.dims[l + 1]
    }

    fn bias_range(&self, l: usize) -> std::ops::Range<usize> {
        self.weight_range(l).end..self.offsets[l + 1]
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.dims[l + 1], self.dims[l]), &self.params[self.weight_range(l)])
            .expect("layout")
    }

    /// Layer outputs for a batch: `acts[0]` is the input, `acts[l+1]` the
    /// post-activation output of layer `l` (the last one linear).
    fn forward_acts(&self, xs: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let rows = xs.nrows();
        let mut acts = vec![xs.to_owned()];
        for l in 0..self.num_layers() {
            let mut h = Array2::<f64>::zeros((rows, self.dims[l + 1]));
            let bias = &self.params[self.bias_range(l)];
            for mut row in h.rows_mut() {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v = *b);
            }
            general_mat_mul(1.0, &acts[l], &self.weight(l).t(), 1.0, &mut h);
            if l + 1 < self.num_layers() {
                h.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(h);
        }
        acts
    }

    /// Reverse pass from output sensitivities `delta` (one per row).
    fn backward(&self, acts: &[Array2<f64>], out_delta: Vec<f64>, grad_out: &mut [f64]) {
        let rows = out_delta.len();
        let mut delta = Array2::from_shape_vec((rows, 1), out_delta).expect("shape");
        for l in (0..self.num_layers()).rev() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            {
                let wr = self.weight_range(l);
                let mut gw = ArrayViewMut2::from_shape((dout, din), &mut grad_out[wr]).expect("layout");
                general_mat_mul(1.0, &delta.t(), &acts[l], 1.0, &mut gw);
            }
            let br = self.bias_range(l);
            for (g, s) in grad_out[br].iter_mut().zip(delta.sum_axis(Axis(0))) {
                *g += s;
            }
            if l > 0 {
                let mut prev = Array2::<f64>::zeros((rows, din));
                general_mat_mul(1.0, &delta, &self.weight(l), 0.0, &mut prev);
                prev.zip_mut_with(&acts[l], |p, &a| {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                });
                delta = prev;
            }
        }
    }
}

impl Network for MlpNet {
    fn input_dim(&self) -> usize {
        self.dims[0]
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        for l in 0..self.num_layers() {
            let w = &self.params[self.weight_range(l)];
            let b = &self.params[self.bias_range(l)];
            let din = self.dims[l];
            let mut next: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, bo)| bo + w[o * din..(o + 1) * din].iter().zip(&h).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if l + 1 < self.num_layers() {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = next;
        }
        h[0]
    }

    fn gradient(&self, x: &[f64], upstream: f64) -> GradientBundle {
        let mut g = GradientBundle::zeros(self.params.len());
        if upstream != 0.0 {
            let xs = ArrayView2::from_shape((1, x.len()), x).expect("shape");
            let acts = self.forward_acts(xs);
            self.backward(&acts, vec![upstream], g.as_mut_slice());
        }
        g
    }

    fn forward_batch(&self, xs: &[f64]) -> Vec<f64> {
        let rows = xs.len() / self.dims[0];
        let view = ArrayView2::from_shape((rows, self.dims[0]), xs).expect("shape");
        let acts = self.forward_acts(view);
        acts.last().unwrap().column(0).to_vec()
    }

    fn accumulate_gradient(
        &self,
        xs: &[f64],
        coeff: &mut dyn FnMut(usize, f64) -> f64,
        grad_out: &mut [f64],
    ) -> Vec<f64> {
        let rows = xs.len() / self.dims[0];
        let view = ArrayView2::from_shape((rows, self.dims[0]), xs).expect("shape");
        let acts = self.forward_acts(view);
        let preds = acts.last().unwrap().column(0).to_vec();
        let delta: Vec<f64> = preds.iter().enumerate().map(|(r, &p)| coeff(r, p)).collect();
        if delta.iter().any(|&c| c != 0.0) {
            self.backward(&acts, delta, grad_out);
        }
        preds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_net_is_silent() {
        let net = MlpNet::zeros(&[4, 3, 1]).unwrap();
        let x = [1.0, -1.0, 1.0, 1.0];
        assert_eq!(net.forward(&x), 0.0);
        let g = net.gradient(&x, 1.0);
        // Only the output bias sees a nonzero gradient.
        let nonzero: Vec<usize> =
            g.as_slice().iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nonzero, vec![net.params().len() - 1]);
    }

    #[test]
    fn identity_chain_gradient_is_input() {
        // x -> relu(w1 x) -> w2 h, with w1 = w2 = 1 and x > 0.
        let mut net = MlpNet::zeros(&[1, 1, 1]).unwrap();
        net.params_mut().copy_from_slice(&[1.0, 0.0, 1.0, 0.0]);
        let g = net.gradient(&[0.7], 1.0);
        assert_eq!(g.as_slice()[0], 0.7);
        assert_eq!(net.forward(&[0.7]), 0.7);
    }

    #[test]
    fn batched_paths_agree_with_single_sample() {
        let mut rng = seeded(5);
        let net = MlpNet::pytorch_init(&[6, 8, 5, 1], &mut rng).unwrap();
        let xs: Vec<f64> = (0..6 * 7).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let batch = net.forward_batch(&xs);
        let mut expected = vec![0.0; net.params().len()];
        for (r, x) in xs.chunks(6).enumerate() {
            assert!((batch[r] - net.forward(x)).abs() < 1e-12);
            for (e, v) in expected.iter_mut().zip(net.gradient(x, r as f64 - 3.0).as_slice()) {
                *e += v;
            }
        }
        let mut got = vec![0.0; net.params().len()];
        net.accumulate_gradient(&xs, &mut |r, _| r as f64 - 3.0, &mut got);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(MlpNet::zeros(&[4, 1]).is_err());
        assert!(MlpNet::zeros(&[4, 0, 1]).is_err());
        assert!(MlpNet::zeros(&[4, 3, 2]).is_err());
    }
}
