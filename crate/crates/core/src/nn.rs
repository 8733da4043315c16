//! Small dense networks with hand-written backward passes, Adam, and the
//! warm-up/step-decay learning-rate schedule.
//!
//! Parameters live in one flat vector so optimizers and serializers treat a
//! network as a plain slice. Layer `l` stores its weights row-major
//! (`out × in`) followed by its biases.

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

pub const BASE_LR: f64 = 0.01;
pub const WARMUP_FRACTION: f64 = 0.05;
pub const DECAY_MARKS: [f64; 5] = [0.45, 0.60, 0.75, 0.85, 0.95];
pub const DECAY_FACTOR: f64 = 0.33;

pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    fn of(x: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::LeakyRelu => {
                if z >= T::zero() {
                    z
                } else {
                    z * T::of(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative<T: Real>(self, z: T, a: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::LeakyRelu => {
                if z >= T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => a * (T::one() - a),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseNet<T> {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<T>,
    #[serde(skip)]
    version: u64,
}

impl<T: PartialEq> PartialEq for DenseNet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths && self.activations == other.activations && self.params == other.params
    }
}

/// Activations retained by a training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    batch: usize,
    version: u64,
    /// `inputs[l]` is the input to layer `l`; the last entry is the output.
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.inputs.last().unwrap()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl<T: Real> DenseNet<T> {
    /// Zero-initialized network. `activations[l]` follows layer `l`.
    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Self {
        assert!(widths.len() >= 2);
        assert_eq!(activations.len(), widths.len() - 1);
        let n: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        DenseNet {
            widths: widths.to_vec(),
            activations: activations.to_vec(),
            params: vec![T::zero(); n],
            version: 0,
        }
    }

    /// Kaiming-uniform weights scaled by fan-in, zero biases.
    pub fn kaiming<R: Rng>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        let mut net = Self::zeros(widths, activations);
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        for l in 0..net.num_layers() {
            let (fan_in, fan_out) = (net.widths[l], net.widths[l + 1]);
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            let off = net.layer_offset(l);
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = T::of(rng.gen_range(-bound..bound));
            }
        }
        net
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable parameters; any cache taken before this call becomes stale.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.version += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::WidthMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.widths
            .windows(2)
            .take(layer)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Identical network in another precision.
    pub fn cast<U: Real>(&self) -> DenseNet<U> {
        DenseNet {
            widths: self.widths.clone(),
            activations: self.activations.clone(),
            params: self
                .params
                .iter()
                .map(|p| U::of(p.to_f64().unwrap()))
                .collect(),
            version: 0,
        }
    }

    fn check_input(&self, input: &[T], batch: usize) -> Result<()> {
        if input.len() != batch * self.input_width() {
            return Err(Error::WidthMismatch {
                expected: batch * self.input_width(),
                got: input.len(),
            });
        }
        Ok(())
    }

    #[inline]
    fn layer_row(&self, layer: usize, off: usize, x: &[T], out: &mut [T], pre: Option<&mut [T]>) {
        let (nin, nout) = (self.widths[layer], self.widths[layer + 1]);
        let w = &self.params[off..off + nin * nout];
        let b = &self.params[off + nin * nout..off + nin * nout + nout];
        let act = self.activations[layer];
        let mut pre = pre;
        for j in 0..nout {
            let row = &w[j * nin..(j + 1) * nin];
            let mut z = b[j];
            for (wi, xi) in row.iter().zip(x) {
                z = z + *wi * *xi;
            }
            if let Some(p) = pre.as_deref_mut() {
                p[j] = z;
            }
            out[j] = act.apply(z);
        }
    }

    /// Inference pass over a row-major batch.
    pub fn predict(&self, input: &[T], batch: usize) -> Result<Vec<T>> {
        self.check_input(input, batch)?;
        let maxw = *self.widths.iter().max().unwrap();
        let mut a = vec![T::zero(); maxw];
        let mut b = vec![T::zero(); maxw];
        let mut out = vec![T::zero(); batch * self.output_width()];
        let nin = self.input_width();
        let nout = self.output_width();
        for r in 0..batch {
            a[..nin].copy_from_slice(&input[r * nin..(r + 1) * nin]);
            let mut off = 0;
            for l in 0..self.num_layers() {
                let (wi, wo) = (self.widths[l], self.widths[l + 1]);
                self.layer_row(l, off, &a[..wi], &mut b[..wo], None);
                std::mem::swap(&mut a, &mut b);
                off += wi * wo + wo;
            }
            out[r * nout..(r + 1) * nout].copy_from_slice(&a[..nout]);
        }
        Ok(out)
    }

    /// Training pass; the returned cache feeds [`DenseNet::backward`].
    pub fn forward(&self, input: &[T], batch: usize) -> Result<ForwardCache<T>> {
        self.check_input(input, batch)?;
        let mut inputs = Vec::with_capacity(self.num_layers() + 1);
        let mut pres = Vec::with_capacity(self.num_layers());
        inputs.push(input.to_vec());
        let mut off = 0;
        for l in 0..self.num_layers() {
            let (wi, wo) = (self.widths[l], self.widths[l + 1]);
            let mut out = vec![T::zero(); batch * wo];
            let mut pre = vec![T::zero(); batch * wo];
            let x = inputs.last().unwrap();
            for r in 0..batch {
                self.layer_row(
                    l,
                    off,
                    &x[r * wi..(r + 1) * wi],
                    &mut out[r * wo..(r + 1) * wo],
                    Some(&mut pre[r * wo..(r + 1) * wo]),
                );
            }
            inputs.push(out);
            pres.push(pre);
            off += wi * wo + wo;
        }
        Ok(ForwardCache {
            batch,
            version: self.version,
            inputs,
            pre: pres,
        })
    }

    /// Reverse pass. Parameter gradients are added into `param_grads`; the
    /// gradient with respect to the input batch is returned.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &[T], param_grads: &mut [T]) -> Result<Vec<T>> {
        if cache.version != self.version || cache.inputs.len() != self.widths.len() {
            return Err(Error::StaleCache);
        }
        if param_grads.len() != self.params.len() {
            return Err(Error::WidthMismatch {
                expected: self.params.len(),
                got: param_grads.len(),
            });
        }
        let batch = cache.batch;
        if grad_out.len() != batch * self.output_width() {
            return Err(Error::WidthMismatch {
                expected: batch * self.output_width(),
                got: grad_out.len(),
            });
        }
        let mut upstream = grad_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (wi, wo) = (self.widths[l], self.widths[l + 1]);
            let off = self.layer_offset(l);
            let act = self.activations[l];
            let x = &cache.inputs[l];
            let a = &cache.inputs[l + 1];
            let z = &cache.pre[l];
            let mut dz = upstream;
            for ((d, &zz), &aa) in dz.iter_mut().zip(z).zip(a) {
                *d = *d * act.derivative(zz, aa);
            }
            let (gw, gb) = param_grads[off..off + wi * wo + wo].split_at_mut(wi * wo);
            for r in 0..batch {
                let xr = &x[r * wi..(r + 1) * wi];
                for j in 0..wo {
                    let d = dz[r * wo + j];
                    if d == T::zero() {
                        continue;
                    }
                    gb[j] = gb[j] + d;
                    for (g, &xi) in gw[j * wi..(j + 1) * wi].iter_mut().zip(xr) {
                        *g = *g + d * xi;
                    }
                }
            }
            let w = &self.params[off..off + wi * wo];
            let mut dx = vec![T::zero(); batch * wi];
            for r in 0..batch {
                let dxr = &mut dx[r * wi..(r + 1) * wi];
                for j in 0..wo {
                    let d = dz[r * wo + j];
                    if d == T::zero() {
                        continue;
                    }
                    for (g, &wij) in dxr.iter_mut().zip(&w[j * wi..(j + 1) * wi]) {
                        *g = *g + d * wij;
                    }
                }
            }
            upstream = dx;
        }
        Ok(upstream)
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    skipped: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of updates rejected because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Applies one update; returns `false` (and leaves everything untouched)
    /// when a gradient is not finite.
    pub fn step<T: Real>(&mut self, params: &mut [T], grads: &[T], lr: f64) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::WidthMismatch {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i].to_f64().unwrap();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            let delta = lr * mhat / (vhat.sqrt() + self.eps);
            params[i] = params[i] - T::of(delta);
        }
        Ok(true)
    }
}

/// Linear warm-up over the first 5% of iterations, then ×0.33 at 45%, 60%,
/// 75%, 85% and 95% of the run.
pub fn lr_schedule(iter: usize, total_iters: usize) -> f64 {
    let total = total_iters.max(1) as f64;
    let it = iter as f64;
    let warm = WARMUP_FRACTION * total;
    let ramp = if it < warm { it / warm } else { 1.0 };
    let decays = DECAY_MARKS.iter().filter(|&&m| it >= m * total).count();
    BASE_LR * ramp * DECAY_FACTOR.powi(decays as i32)
}
