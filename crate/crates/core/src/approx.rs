//! Small dense multilayer perceptrons with hand-written backpropagation,
//! Adam, and the tanh-squashed Gaussian policy head.
//!
//! Batches are row-major: `batch × width` with one sample per row. Layer
//! weights are stored row-major as `out × in`, followed by the `out` biases,
//! all in one flat parameter vector.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Log-std clamp of the policy head.
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Feedforward net: softplus on hidden layers, identity on the output.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Activations saved by [`Mlp::forward`] for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    fingerprint: u64,
    batch: usize,
    /// Layer inputs; `acts[0]` is the network input.
    acts: Vec<Vec<f64>>,
    /// Softplus slopes `σ(z)` of the hidden layers.
    slope: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Output of [`Mlp::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    /// Gradient with respect to the network input, `batch × widths[0]`.
    pub input: Vec<f64>,
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// `c = a · bᵀ` (+ `c` if `accumulate`) for row-major `a: m×k`, `b: n×k`.
fn gemm_abt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = aᵀ · b` for row-major `a: k×m`, `b: k×n`.
fn gemm_atb(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: as in `gemm_abt`.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`.
fn gemm_ab(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: as in `gemm_abt`.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl Mlp {
    /// Uniform fan-in initialization: every weight and bias of a layer with
    /// `n_in` inputs is drawn from `U(-1/√n_in, 1/√n_in)`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Mlp::zeros(widths)?;
        let mut off = 0;
        for w in widths.windows(2) {
            let bound = 1.0 / math::sqrt(w[0] as f64);
            for p in &mut net.params[off..off + w[0] * w[1] + w[1]] {
                *p = rng.random_range(-bound..bound);
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("an MLP needs at least two positive widths".into()));
        }
        Ok(Mlp { widths: widths.to_vec(), params: vec![0.0; param_count(widths)] })
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let net = Mlp::zeros(widths)?;
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch { expected: net.params.len(), found: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("MLP parameters".into()));
        }
        Ok(Mlp { params, ..net })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Cheap content hash tying a cache to the parameters that produced it.
    fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut lanes = [0xcbf2_9ce4_8422_2325u64; 8];
        for (k, &w) in self.widths.iter().enumerate() {
            lanes[k % 8] = (lanes[k % 8] ^ w as u64).wrapping_mul(PRIME);
        }
        let chunks = self.params.chunks_exact(8);
        let tail = chunks.remainder();
        for c in chunks {
            for (h, p) in lanes.iter_mut().zip(c) {
                *h = (*h ^ p.to_bits()).wrapping_mul(PRIME);
            }
        }
        for (h, p) in lanes.iter_mut().zip(tail) {
            *h = (*h ^ p.to_bits()).wrapping_mul(PRIME);
        }
        lanes.iter().fold(0xcbf2_9ce4_8422_2325u64, |acc, &h| (acc ^ h).wrapping_mul(PRIME))
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off: usize = self.widths[..l + 1].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
        (w, b)
    }

    fn check_input(&self, input: &[f64], batch: usize) -> Result<()> {
        if input.len() != batch * self.input_dim() {
            return Err(Error::DimensionMismatch { expected: batch * self.input_dim(), found: input.len() });
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("MLP input".into()));
        }
        Ok(())
    }

    fn run(&self, input: &[f64], batch: usize, keep: bool) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut acts = Vec::new();
        let mut slopes = Vec::new();
        let mut x = input.to_vec();
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = self.layer(l);
            let mut z = Vec::with_capacity(batch * n_out);
            for _ in 0..batch {
                z.extend_from_slice(b);
            }
            gemm_abt(batch, n_in, n_out, &x, w, &mut z, true);
            let next = if l + 1 == self.n_layers() {
                z
            } else {
                let mut slope = vec![0.0; z.len()];
                softplus_in_place(&mut z, &mut slope);
                if keep {
                    slopes.push(slope);
                }
                z
            };
            if keep {
                acts.push(core::mem::replace(&mut x, next));
            } else {
                x = next;
            }
        }
        (x, acts, slopes)
    }

    /// Output for a batch of inputs, plus the cache for [`Mlp::backward`].
    pub fn forward(&self, input: &[f64], batch: usize) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(input, batch)?;
        let (out, acts, slope) = self.run(input, batch, true);
        Ok((out, ForwardCache { fingerprint: self.fingerprint(), batch, acts, slope }))
    }

    /// Output only.
    pub fn predict(&self, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(input, batch)?;
        Ok(self.run(input, batch, false).0)
    }

    /// Gradients of `Σ grad_out ⊙ output` with respect to the parameters and
    /// the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<Gradients> {
        self.backprop(cache, grad_out, true)
    }

    /// Input gradient only; `params` is left empty.
    pub fn backward_input(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<Vec<f64>> {
        Ok(self.backprop(cache, grad_out, false)?.input)
    }

    fn backprop(&self, cache: &ForwardCache, grad_out: &[f64], with_params: bool) -> Result<Gradients> {
        if cache.fingerprint != self.fingerprint() || cache.acts.len() != self.n_layers() {
            return Err(Error::StaleCache);
        }
        let batch = cache.batch;
        if grad_out.len() != batch * self.output_dim() {
            return Err(Error::DimensionMismatch { expected: batch * self.output_dim(), found: grad_out.len() });
        }
        let mut grads = if with_params { vec![0.0; self.params.len()] } else { Vec::new() };
        let mut delta = grad_out.to_vec();
        let mut off_end = self.params.len();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = off_end - (n_in * n_out + n_out);
            if with_params {
                let (gw, gb) = grads[off..off_end].split_at_mut(n_in * n_out);
                gemm_atb(n_out, batch, n_in, &delta, &cache.acts[l], gw);
                for row in delta.chunks_exact(n_out) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            let (w, _) = self.layer(l);
            let mut dx = vec![0.0; batch * n_in];
            gemm_ab(batch, n_out, n_in, &delta, w, &mut dx);
            if l > 0 {
                for (d, &s) in dx.iter_mut().zip(&cache.slope[l - 1]) {
                    *d *= s;
                }
            }
            delta = dx;
            off_end = off;
        }
        Ok(Gradients { params: grads, input: delta })
    }

    /// `self ← (1 - tau)·self + tau·online`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        if online.widths != self.widths {
            return Err(Error::DimensionMismatch { expected: self.params.len(), found: online.params.len() });
        }
        for (t, &o) in self.params.iter_mut().zip(&online.params) {
            *t = (1.0 - tau) * *t + tau * o;
        }
        Ok(())
    }
}

/// `z ← softplus(z)` and `slope ← σ(z)` elementwise.
fn softplus_in_place(z: &mut [f64], slope: &mut [f64]) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { softplus_avx512(z, slope) };
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { softplus_avx2(z, slope) };
        }
    }
    softplus_generic(z, slope)
}

// Same operations in the same order as the generic loop, so identical bits.
#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx512f")]
unsafe fn softplus_avx512(z: &mut [f64], slope: &mut [f64]) {
    softplus_generic(z, slope)
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx2")]
unsafe fn softplus_avx2(z: &mut [f64], slope: &mut [f64]) {
    softplus_generic(z, slope)
}

#[inline(always)]
fn softplus_generic(z: &mut [f64], slope: &mut [f64]) {
    for (v, s) in z.iter_mut().zip(slope.iter_mut()) {
        let x = *v;
        let e = exp_nonpositive(-x.abs());
        let r = 1.0 / (1.0 + e);
        *s = if x >= 0.0 { r } else { e * r };
        *v = x.max(0.0) + ln_1p_unit(e);
    }
}

/// `e^x` for `x <= 0`, flushed to `e^-708` below that.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const SHIFT: f64 = 6755399441055744.0; // 1.5·2^52
    const LOG2E: f64 = core::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let x = x.max(-708.0);
    let t = x * LOG2E + SHIFT;
    let k = t - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series to degree 13 on |r| <= ln2/2.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let k_bits = t.to_bits().wrapping_sub(SHIFT.to_bits());
    p * f64::from_bits(k_bits.wrapping_add(1023) << 52)
}

/// `ln(1 + e)` for `e` in `[0, 1]` via `2 atanh(e/(2+e))`.
#[inline(always)]
fn ln_1p_unit(e: f64) -> f64 {
    let s = e / (2.0 + e);
    let w = s * s;
    let mut p = 1.0 / 31.0;
    p = p * w + 1.0 / 29.0;
    p = p * w + 1.0 / 27.0;
    p = p * w + 1.0 / 25.0;
    p = p * w + 1.0 / 23.0;
    p = p * w + 1.0 / 21.0;
    p = p * w + 1.0 / 19.0;
    p = p * w + 1.0 / 17.0;
    p = p * w + 1.0 / 15.0;
    p = p * w + 1.0 / 13.0;
    p = p * w + 1.0 / 11.0;
    p = p * w + 1.0 / 9.0;
    p = p * w + 1.0 / 7.0;
    p = p * w + 1.0 / 5.0;
    p = p * w + 1.0 / 3.0;
    p = p * w + 1.0;
    2.0 * s * p
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// One update of `params` against `grads` (descent direction).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch { expected: self.m.len(), found: grads.len().min(params.len()) });
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("gradient component {k} at Adam step {}", self.step + 1)));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (math::sqrt(vh) + self.eps);
        }
        Ok(())
    }
}

/// One reparameterized draw from the tanh-squashed Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SquashedSample {
    /// `tanh(u)` in `(-1, 1)`.
    pub action: f64,
    pub log_prob: f64,
    /// `u = mean + std·noise`.
    pub pre_tanh: f64,
    pub std: f64,
    pub noise: f64,
    clamped: bool,
}

/// `ln(1 - tanh²u)`, stable for large `|u|`.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (core::f64::consts::LN_2 - u - math::softplus(-2.0 * u))
}

/// `action = tanh(mean + exp(log_std)·noise)` and its log density, with the
/// change-of-variables term for the squashing.
pub fn gaussian_head(mean: f64, log_std: f64, noise: f64) -> Result<SquashedSample> {
    if !mean.is_finite() || !log_std.is_finite() || !noise.is_finite() {
        return Err(Error::NonFinite(alloc::format!("policy head (mean {mean}, log_std {log_std}, noise {noise})")));
    }
    let clamped = !(LOG_STD_MIN..=LOG_STD_MAX).contains(&log_std);
    let ls = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
    let std = math::exp(ls);
    let u = mean + std * noise;
    let action = math::tanh(u);
    let log_prob = -0.5 * noise * noise - ls - 0.5 * math::ln(2.0 * core::f64::consts::PI) - log_one_minus_tanh_sq(u);
    Ok(SquashedSample { action, log_prob, pre_tanh: u, std, noise, clamped })
}

impl SquashedSample {
    /// `1 - action²` without cancellation.
    pub fn dtanh(&self) -> f64 {
        math::exp(log_one_minus_tanh_sq(self.pre_tanh))
    }

    /// Chain rule through the head at fixed noise: given `∂L/∂action` and
    /// `∂L/∂log_prob`, returns `(∂L/∂mean, ∂L/∂log_std)`. The log-std
    /// gradient is zero outside the clamp.
    pub fn backprop(&self, d_action: f64, d_log_prob: f64) -> (f64, f64) {
        let du = d_action * self.dtanh() + d_log_prob * 2.0 * self.action;
        let d_log_std = if self.clamped { 0.0 } else { du * self.std * self.noise - d_log_prob };
        (du, d_log_std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn loss(net: &Mlp, x: &[f64], batch: usize, w: &[f64]) -> f64 {
        net.predict(x, batch).unwrap().iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central differences against the analytic gradient.
    fn check_gradients(widths: &[usize], seed: u64) {
        let mut r = rng(seed);
        let net = Mlp::new(widths, &mut r).unwrap();
        let batch = 3;
        let x: Vec<f64> = (0..batch * widths[0]).map(|_| r.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..batch * net.output_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, cache) = net.forward(&x, batch).unwrap();
        let g = net.backward(&cache, &w).unwrap();
        let h = 1e-5;
        for k in 0..net.params().len() {
            let mut p = net.clone();
            p.params_mut()[k] += h;
            let up = loss(&p, &x, batch, &w);
            p.params_mut()[k] -= 2.0 * h;
            let down = loss(&p, &x, batch, &w);
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(fd, g.params[k]) < 1e-4 || (fd - g.params[k]).abs() < 1e-9, "param {k}: fd {fd} vs {}", g.params[k]);
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += h;
            let up = loss(&net, &xp, batch, &w);
            xp[k] -= 2.0 * h;
            let down = loss(&net, &xp, batch, &w);
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(fd, g.input[k]) < 1e-4 || (fd - g.input[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_difference_gradients() {
        for seed in 0..20 {
            check_gradients(&[3, 2], seed);
            check_gradients(&[3, 5, 2], seed + 100);
            check_gradients(&[4, 6, 5, 1], seed + 200);
        }
    }

    #[test]
    fn zero_net_gives_zero_output() {
        let net = Mlp::zeros(&[3, 8, 2]).unwrap();
        assert_eq!(net.predict(&[1.0, -2.0, 0.5], 1).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer() {
        let net = Mlp::from_params(&[2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        assert_eq!(net.predict(&[1.0, 1.0, 0.0, 1.0], 2).unwrap(), vec![3.5, 6.5, 2.5, 3.5]);
        let (_, cache) = net.forward(&[0.3, -0.7], 1).unwrap();
        let g = net.backward(&cache, &[1.0, 0.0]).unwrap();
        assert_eq!(&g.params[..2], &[0.3, -0.7]);
        assert_eq!(&g.params[2..4], &[0.0, 0.0]);
        let z = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(z.params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let net = Mlp::new(&[5, 64, 32, 2], &mut rng(1)).unwrap();
        let x: Vec<f64> = (0..40).map(|k| (k as f64 * 0.37).sin()).collect();
        assert_eq!(net.predict(&x, 8).unwrap(), net.predict(&x, 8).unwrap());
        let one: Vec<f64> = net.predict(&x[5..10], 1).unwrap();
        assert_eq!(one, net.predict(&x, 8).unwrap()[2..4].to_vec());
    }

    #[test]
    fn stale_cache_and_shape_errors() {
        let mut net = Mlp::new(&[2, 4, 1], &mut rng(2)).unwrap();
        let (_, cache) = net.forward(&[0.1, 0.2], 1).unwrap();
        net.params_mut()[0] += 1.0;
        assert!(matches!(net.backward(&cache, &[1.0]), Err(Error::StaleCache)));
        assert!(net.predict(&[0.1], 1).is_err());
        assert!(net.predict(&[0.1, f64::NAN], 1).is_err());
        assert!(Mlp::zeros(&[3]).is_err());
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = vec![1.0, -1.0, 0.5];
        let mut adam = AdamState::new(3, 0.001);
        adam.step(&mut p, &[3.0, -0.02, 0.0]).unwrap();
        assert!((p[0] - (1.0 - 0.001)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 0.001)).abs() < 1e-7);
        assert_eq!(p[2], 0.5);
        let before = p.clone();
        let m_before = adam.m.clone();
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(adam.step, 2);
        assert!(adam.m.iter().zip(&m_before).all(|(a, b)| a.abs() <= b.abs()));
        assert!((p[2] - before[2]).abs() == 0.0);
        assert!(adam.step(&mut p, &[f64::INFINITY, 0.0, 0.0]).is_err());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // f(x) = (x - 3)², started at 0.
        let mut x = [0.0];
        let mut adam = AdamState::new(1, 0.05);
        let mut prev = f64::INFINITY;
        for step in 0..2000 {
            let f = (x[0] - 3.0) * (x[0] - 3.0);
            if step > 10 && x[0] < 2.9 {
                assert!(f < prev, "loss increased at step {step}");
            }
            prev = f;
            let g = [2.0 * (x[0] - 3.0)];
            adam.step(&mut x, &g).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn adam_determinism() {
        let run = || {
            let mut r = rng(9);
            let mut net = Mlp::new(&[3, 16, 1], &mut r).unwrap();
            let mut adam = AdamState::new(net.params().len(), 1e-3);
            for _ in 0..1000 {
                let x: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
                let (y, cache) = net.forward(&x, 4).unwrap();
                let g = net.backward(&cache, &y).unwrap();
                adam.step(net.params_mut(), &g.params).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn head_examples() {
        let s = gaussian_head(0.3, -1.0, 0.0).unwrap();
        assert_eq!(s.action, 0.3f64.tanh());
        let mut r = rng(4);
        for _ in 0..20 {
            let eps: f64 = StandardNormal.sample(&mut r);
            let s = gaussian_head(0.7, LOG_STD_MIN, eps).unwrap();
            assert!((s.action - 0.7f64.tanh()).abs() < 1e-8);
        }
        assert!(gaussian_head(f64::NAN, 0.0, 0.0).is_err());
        // Saturated actions keep a finite log density.
        let s = gaussian_head(7.25, -3.0, 0.0).unwrap();
        assert!(1.0 - s.action < 2e-6 && s.log_prob.is_finite());
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        for (mean, log_std) in [(0.0f64, 0.0f64), (0.8, -0.5), (-1.5, 0.7), (0.2, -2.0)] {
            let n = 400_000;
            let mut total = 0.0;
            for k in 0..n {
                // Midpoint rule in u = atanh(a), where the integrand is the
                // plain Gaussian: p(a) da = p(a(u)) (1 - a²) du.
                let a = -1.0 + (k as f64 + 0.5) * 2.0 / n as f64;
                let u = libm_atanh(a);
                let std = log_std.exp();
                let s = gaussian_head(mean, log_std, (u - mean) / std).unwrap();
                total += s.log_prob.exp() * (2.0 / n as f64);
            }
            assert!((total - 1.0).abs() < 1e-3, "mean {mean}, log_std {log_std}: {total}");
        }
    }

    fn libm_atanh(a: f64) -> f64 {
        0.5 * ((1.0 + a) / (1.0 - a)).ln()
    }

    #[test]
    fn head_backprop_matches_finite_differences() {
        // L = c_a·action + c_l·log_prob at fixed noise.
        let (ca, cl) = (0.7, -0.3);
        let l = |m: f64, s: f64, e: f64| {
            let h = gaussian_head(m, s, e).unwrap();
            ca * h.action + cl * h.log_prob
        };
        for (m, s, e) in [(0.1, -0.4, 0.9), (-0.8, 0.3, -1.2), (1.5, -1.0, 0.2)] {
            let (dm, ds) = gaussian_head(m, s, e).unwrap().backprop(ca, cl);
            let h = 1e-6;
            let fm = (l(m + h, s, e) - l(m - h, s, e)) / (2.0 * h);
            let fs = (l(m, s + h, e) - l(m, s - h, e)) / (2.0 * h);
            assert!(rel_err(dm, fm) < 1e-6 && rel_err(ds, fs) < 1e-6);
        }
        let (_, ds) = gaussian_head(0.0, 5.0, 1.0).unwrap().backprop(1.0, 1.0);
        assert_eq!(ds, 0.0);
    }

    #[test]
    fn soft_update() {
        let mut t = Mlp::zeros(&[1, 1]).unwrap();
        let o = Mlp::from_params(&[1, 1], vec![1.0, 1.0]).unwrap();
        t.soft_update_from(&o, 0.005).unwrap();
        assert_eq!(t.params(), &[0.005, 0.005]);
        let mut same = o.clone();
        same.soft_update_from(&o, 0.005).unwrap();
        assert_eq!(same, o);
    }

    #[test]
    fn vector_softplus_matches_scalar() {
        let mut z: Vec<f64> = (0..20001).map(|k| (k as f64 - 10000.0) * 0.0037).collect();
        z.extend([0.0, -0.0, 1e-300, -1e-300, 35.0, -35.0, 800.0, -800.0, 1e200]);
        let mut act = z.clone();
        let mut slope = vec![0.0; z.len()];
        softplus_in_place(&mut act, &mut slope);
        let mut generic = z.clone();
        let mut slope_generic = vec![0.0; z.len()];
        softplus_generic(&mut generic, &mut slope_generic);
        for k in 0..z.len() {
            assert_eq!(act[k].to_bits(), generic[k].to_bits());
            assert_eq!(slope[k].to_bits(), slope_generic[k].to_bits());
            let (a, s) = (math::softplus(z[k]), math::sigmoid(z[k]));
            assert!((act[k] - a).abs() <= 2e-15 * a.abs().max(1e-300) + 1e-307, "softplus({}) {} vs {a}", z[k], act[k]);
            assert!((slope[k] - s).abs() <= 2e-15 * s.max(1e-300) + 1e-307, "sigmoid({}) {} vs {s}", z[k], slope[k]);
        }
    }
}
