//! Minimal multilayer perceptron with hand-written reverse mode.
//!
//! The two trainable components in this crate (the learned denoiser and the
//! inference model) are small tanh MLPs over f64 vectors, so a full autodiff
//! framework would be overkill. Forward and backward passes are batched as
//! matrix products (columns are samples); the backward pass turns output
//! cotangents into parameter gradients plus input gradients, which is all
//! that denoiser training, guidance gradients and objective-based amortizer
//! training need.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// One dense layer.
#[derive(Debug, Clone)]
pub struct Layer {
    /// Weight matrix (out × in).
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Tanh MLP: hidden layers use tanh, the output layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations cached by a batched forward pass, consumed by `backward`.
pub struct ForwardCache {
    /// Input batch followed by each layer's post-activation batch.
    acts: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// Build an MLP with the given layer sizes, e.g. `[in, 128, 128, out]`.
    /// Weights are symmetric-uniform scaled by 1/√fan_in; biases start at 0.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "mlp needs at least one layer");
        let layers = sizes
            .windows(2)
            .map(|wnd| {
                let (fan_in, fan_out) = (wnd[0], wnd[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let w = DMatrix::from_fn(fan_out, fan_in, |_, _| {
                    (2.0 * rng.gen::<f64>() - 1.0) * scale
                });
                Layer {
                    w,
                    b: DVector::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    /// Zero the final layer so the network output is exactly 0 everywhere.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("mlp has layers");
        last.w.fill(0.0);
        last.b.fill(0.0);
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim()).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.in_dim()];
        s.extend(self.layers.iter().map(|l| l.out_dim()));
        s
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Copy all parameters into one flat vector (per layer: weight matrix in
    /// column-major order, then bias). The layout is shared by gradients and
    /// the optimizer.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    /// Forward pass on a batch (columns are samples).
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.layers.len();
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * &cur;
            for mut col in z.column_iter_mut() {
                col += &l.b;
            }
            if i + 1 < n {
                z.apply(|v| *v = v.tanh());
            }
            cur = z;
        }
        cur
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.layers.len();
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * &cur + &l.b;
            if i + 1 < n {
                z.apply(|v| *v = v.tanh());
            }
            cur = z;
        }
        cur
    }

    /// Batched forward pass that caches activations for `backward`.
    pub fn forward_batch_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, ForwardCache) {
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(x.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &l.b;
            }
            if i + 1 < n {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        (acts.last().unwrap().clone(), ForwardCache { acts })
    }

    /// Reverse pass: given d(loss)/d(output) per column, return flat
    /// parameter gradients (summed over the batch) and d(loss)/d(input).
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        dout: &DMatrix<f64>,
    ) -> (Vec<f64>, DMatrix<f64>) {
        let n = self.layers.len();
        let mut grads = vec![0.0; self.n_params()];
        let mut offsets = Vec::with_capacity(n);
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.w.len() + l.b.len();
        }

        let mut delta = dout.clone();
        for i in (0..n).rev() {
            let l = &self.layers[i];
            let input = &cache.acts[i];
            let gw = &delta * input.transpose();
            let goff = offsets[i];
            grads[goff..goff + l.w.len()].copy_from_slice(gw.as_slice());
            let gb_off = goff + l.w.len();
            for (r, g) in grads[gb_off..gb_off + l.b.len()].iter_mut().enumerate() {
                *g = delta.row(r).sum();
            }
            let mut dinput = l.w.transpose() * &delta;
            if i > 0 {
                // The input of layer i is tanh(z of layer i-1); cached acts
                // already hold tanh(z), so the chain factor is 1 − act².
                dinput.zip_apply(input, |d, a| *d *= 1.0 - a * a);
            }
            delta = dinput;
        }
        (grads, delta)
    }

    /// Single-sample cached forward plus backward.
    pub fn forward_cached(&self, x: &DVector<f64>) -> (DVector<f64>, ForwardCache) {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let (out, cache) = self.forward_batch_cached(&xm);
        (out.column(0).into_owned(), cache)
    }

    pub fn backward(&self, cache: &ForwardCache, dout: &DVector<f64>) -> (Vec<f64>, DVector<f64>) {
        let dm = DMatrix::from_column_slice(dout.len(), 1, dout.as_slice());
        let (grads, dx) = self.backward_batch(cache, &dm);
        (grads, dx.column(0).into_owned())
    }
}

/// Timestep featurizer shared by the learned denoiser and the inference
/// model: (t/T, sin/cos at 4 frequencies), 9 features total.
pub const TIME_EMBED_DIM: usize = 9;
const TIME_FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

pub fn embed_time(t: usize, t_max: usize, out: &mut Vec<f64>) {
    let u = t as f64 / t_max as f64;
    out.push(u);
    for f in TIME_FREQS {
        let phase = 2.0 * std::f64::consts::PI * f * u;
        out.push(phase.sin());
        out.push(phase.cos());
    }
}
