use crate::error::{Error, Result};

use super::{Scalar, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization with learned gain and shift.
///
/// Running statistics follow `running ← momentum·running + (1 − momentum)·batch`;
/// the running variance uses the unbiased batch estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gain: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Batch statistics kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads<T> {
    pub gain: Vec<T>,
    pub shift: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gain: vec![T::ONE; channels],
            shift: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gain.len()
    }

    pub fn param_count(&self) -> usize {
        self.gain.len() + self.shift.len()
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::shape(format!(
                "batch norm has {} channels, input has {}",
                self.channels(),
                x.channels()
            )));
        }
        Ok(())
    }

    fn apply(&self, x: &Tensor4<T>, mean: &[f64], inv_std: &[f64]) -> Tensor4<T> {
        let [n, c, _, _] = x.dims();
        let hw = x.plane();
        let mut y = Tensor4::zeros(x.dims());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let scale = T::from_f64(self.gain[ch].to_f64() * inv_std[ch]);
                let bias = T::from_f64(self.shift[ch].to_f64() - self.gain[ch].to_f64() * inv_std[ch] * mean[ch]);
                for (o, &v) in y.data_mut()[off..off + hw].iter_mut().zip(&x.data()[off..off + hw]) {
                    *o = v * scale + bias;
                }
            }
        }
        y
    }

    /// Training-phase forward: normalizes with batch statistics over
    /// `(batch, height, width)` and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BnCache)> {
        self.check(x)?;
        let [n, c, _, _] = x.dims();
        let hw = x.plane();
        let count = n * hw;
        if count < 2 {
            return Err(Error::param("batch norm needs at least two values per channel in training"));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                s += x.data()[off..off + hw].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            let mu = s / count as f64;
            let mut ss = 0.0;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                ss += x.data()[off..off + hw]
                    .iter()
                    .map(|v| {
                        let d = v.to_f64() - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = ss / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let y = self.apply(x, &mean, &inv_std);
        let unbias = count as f64 / (count - 1) as f64;
        for ch in 0..c {
            let m = self.momentum;
            self.running_mean[ch] = T::from_f64(m * self.running_mean[ch].to_f64() + (1.0 - m) * mean[ch]);
            self.running_var[ch] = T::from_f64(m * self.running_var[ch].to_f64() + (1.0 - m) * var[ch] * unbias);
        }
        Ok((y, BnCache { mean, inv_std }))
    }

    /// Inference-phase forward with the running statistics; no state change.
    pub fn forward_infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let mean: Vec<f64> = self.running_mean.iter().map(|v| v.to_f64()).collect();
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v.to_f64().max(0.0) + self.eps).sqrt())
            .collect();
        Ok(self.apply(x, &mean, &inv_std))
    }

    /// Exact training-phase gradient, including the dependence of the batch
    /// mean and variance on the input.
    pub fn backward(&self, x: &Tensor4<T>, cache: &BnCache, dy: &Tensor4<T>) -> Result<(Tensor4<T>, BnGrads<T>)> {
        self.check(x)?;
        x.same_dims(dy, "batch norm upstream gradient")?;
        let [n, c, _, _] = x.dims();
        let hw = x.plane();
        let count = (n * hw) as f64;
        let mut dx = Tensor4::zeros(x.dims());
        let mut grads = BnGrads {
            gain: vec![T::ZERO; c],
            shift: vec![T::ZERO; c],
        };
        for ch in 0..c {
            let (mu, istd) = (cache.mean[ch], cache.inv_std[ch]);
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for (&xv, &g) in x.data()[off..off + hw].iter().zip(&dy.data()[off..off + hw]) {
                    let g = g.to_f64();
                    sum_dy += g;
                    sum_dy_xhat += g * (xv.to_f64() - mu) * istd;
                }
            }
            grads.gain[ch] = T::from_f64(sum_dy_xhat);
            grads.shift[ch] = T::from_f64(sum_dy);
            let gain = self.gain[ch].to_f64();
            let mean_dy = sum_dy / count;
            let mean_dy_xhat = sum_dy_xhat / count;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for ((o, &xv), &g) in dx.data_mut()[off..off + hw]
                    .iter_mut()
                    .zip(&x.data()[off..off + hw])
                    .zip(&dy.data()[off..off + hw])
                {
                    let xhat = (xv.to_f64() - mu) * istd;
                    *o = T::from_f64(gain * istd * (g.to_f64() - mean_dy - xhat * mean_dy_xhat));
                }
            }
        }
        Ok((dx, grads))
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        BatchNorm {
            gain: conv(&self.gain),
            shift: conv(&self.shift),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}
