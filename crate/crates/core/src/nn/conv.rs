use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{Scalar, Tensor4};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `(out_ch, in_ch, 3, 3)`
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Unrolls the 3×3 neighbourhoods of one `(c, h, w)` sample into a
/// `(c·9) × (h·w)` matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::ZERO;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::ZERO;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    dx.fill(T::ZERO);
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            weights: vec![T::ZERO; out_ch * in_ch * TAPS],
            bias: vec![T::ZERO; out_ch],
        }
    }

    /// Fan-in scaled normal weights (`std = sqrt(2 / (9·in_ch))`), zero bias.
    pub fn kaiming<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self::fan_in_normal(in_ch, out_ch, 2.0, rng)
    }

    /// Normal weights with `std = sqrt(gain / (9·in_ch))`, zero bias.
    pub fn fan_in_normal<R: Rng>(in_ch: usize, out_ch: usize, gain: f64, rng: &mut R) -> Self {
        let std = (gain / (TAPS * in_ch) as f64).sqrt();
        let weights = (0..out_ch * in_ch * TAPS)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self {
            in_ch,
            out_ch,
            weights,
            bias: vec![T::ZERO; out_ch],
        }
    }

    /// Center tap 1 on matching channels, zero bias.
    pub fn identity(channels: usize) -> Self {
        let mut layer = Self::zeros(channels, channels);
        for c in 0..channels {
            layer.weights[(c * channels + c) * TAPS + 4] = T::ONE;
        }
        layer
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let [n, c, h, w] = x.dims();
        if c != self.in_ch {
            return Err(Error::shape(format!("conv expects {} input channels, got {c}", self.in_ch)));
        }
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("conv input has an empty dimension: {:?}", x.dims())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let [n, c, h, w] = x.dims();
        let hw = h * w;
        let mut out = Tensor4::zeros([n, self.out_ch, h, w]);
        let out_len = self.out_ch * hw;
        out.data_mut().par_chunks_mut(out_len).enumerate().for_each(|(i, y)| {
            let mut cols = vec![T::ZERO; c * TAPS * hw];
            im2col(x.sample(i), c, h, w, &mut cols);
            for (o, plane) in y.chunks_mut(hw).enumerate() {
                plane.fill(self.bias[o]);
            }
            T::gemm(self.out_ch, c * TAPS, hw, T::ONE, &self.weights, false, &cols, false, T::ONE, y);
        });
        Ok(out)
    }

    /// Gradients with respect to the input (if requested), weights and bias.
    /// Per-sample parameter gradients are summed in batch order.
    pub fn backward(&self, x: &Tensor4<T>, dy: &Tensor4<T>, want_input: bool) -> Result<(Option<Tensor4<T>>, ConvGrads<T>)> {
        self.check_input(x)?;
        let [n, c, h, w] = x.dims();
        if dy.dims() != [n, self.out_ch, h, w] {
            return Err(Error::shape(format!("conv upstream gradient {:?} does not match output", dy.dims())));
        }
        let hw = h * w;
        let ck = c * TAPS;
        let mut dx = want_input.then(|| Tensor4::zeros(x.dims()));
        let per_sample: Vec<Vec<T>> = match dx.as_mut() {
            Some(dx) => dx
                .data_mut()
                .par_chunks_mut(c * hw)
                .enumerate()
                .map(|(i, dxi)| self.sample_backward(x.sample(i), dy.sample(i), c, h, w, Some(dxi)))
                .collect(),
            None => (0..n)
                .into_par_iter()
                .map(|i| self.sample_backward(x.sample(i), dy.sample(i), c, h, w, None))
                .collect(),
        };
        let mut grads = ConvGrads {
            weights: vec![T::ZERO; self.out_ch * ck],
            bias: vec![T::ZERO; self.out_ch],
        };
        for (i, dw) in per_sample.iter().enumerate() {
            grads.weights.iter_mut().zip(dw).for_each(|(g, d)| *g += *d);
            for (o, plane) in dy.sample(i).chunks(hw).enumerate() {
                let mut s = T::ZERO;
                for v in plane {
                    s += *v;
                }
                grads.bias[o] += s;
            }
        }
        Ok((dx, grads))
    }

    fn sample_backward(&self, x: &[T], dy: &[T], c: usize, h: usize, w: usize, dx: Option<&mut [T]>) -> Vec<T> {
        let hw = h * w;
        let ck = c * TAPS;
        let mut cols = vec![T::ZERO; ck * hw];
        im2col(x, c, h, w, &mut cols);
        let mut dw = vec![T::ZERO; self.out_ch * ck];
        T::gemm(self.out_ch, hw, ck, T::ONE, dy, false, &cols, true, T::ZERO, &mut dw);
        if let Some(dx) = dx {
            T::gemm(ck, self.out_ch, hw, T::ONE, &self.weights, true, dy, false, T::ZERO, &mut cols);
            col2im(&cols, c, h, w, dx);
        }
        dw
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            weights: self.weights.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut rng = seeded(seed);
        let data = (0..dims.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor4::from_vec(dims, data).unwrap()
    }

    /// Direct 7-loop convolution used as an independent reference.
    fn naive(layer: &ConvLayer<f64>, x: &Tensor4<f64>) -> Vec<f64> {
        let [n, c, h, w] = x.dims();
        let mut out = vec![0.0; n * layer.out_ch * h * w];
        for b in 0..n {
            for o in 0..layer.out_ch {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = layer.bias[o];
                        for ci in 0..c {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wv = layer.weights[((o * c + ci) * 3 + ky as usize) * 3 + kx as usize];
                                    acc += wv * x.data()[((b * c + ci) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        out[((b * layer.out_ch + o) * h + y as usize) * w + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_exact() {
        let x = random_tensor([2, 3, 5, 7], 1);
        let y = ConvLayer::identity(3).forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let c = 0.3;
        let x = Tensor4::from_vec([1, 2, 6, 6], vec![c; 72]).unwrap();
        let mut layer = ConvLayer::<f64>::zeros(2, 1);
        layer.weights.fill(1.0);
        let y = layer.forward(&x).unwrap();
        for r in 1..5 {
            for col in 1..5 {
                assert!((y.data()[r * 6 + col] - 9.0 * c * 2.0).abs() < 1e-12);
            }
        }
        // corner sees a 2×2 window
        assert!((y.data()[0] - 4.0 * c * 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_convolution() {
        let x = random_tensor([2, 3, 6, 5], 2);
        let layer = ConvLayer::<f64>::kaiming(3, 4, &mut seeded(3));
        let y = layer.forward(&x).unwrap();
        let r = naive(&layer, &x);
        for (a, b) in y.data().iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = random_tensor([1, 2, 4, 4], 2);
        let layer = ConvLayer::<f64>::zeros(3, 1);
        assert!(matches!(layer.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn single_channel_layer_has_ten_params() {
        assert_eq!(ConvLayer::<f32>::zeros(1, 1).param_count(), 10);
    }
}
