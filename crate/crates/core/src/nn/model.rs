//! The 17-layer despeckling network.
//!
//! ```text
//! z_1 = ReLU(w_1 ∗ Y + b_1)
//! z_k = BN[ReLU(w_k ∗ z_{k−1} + b_k)] + [ (k−1) mod 3 = 0 ]·z_{k−3}     1 < k < 17
//! X̂   = z_17 = w_17 ∗ z_16 + b_17
//! ```

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::image::AmplitudeImage;
use crate::rng::seeded;

use super::activation::{relu, relu_backward};
use super::batchnorm::{BatchNorm, BnCache};
use super::conv::ConvLayer;
use super::{Scalar, Tensor4};

pub const DEPTH: usize = 17;
pub const FULL_WIDTH: usize = 64;
/// Width of the desk-scale variant.
pub const DESK_WIDTH: usize = 16;
/// Overlap added on each side of an inference tile.
/// Variance gain of the linear output layer. The five skips leave z_16 with
/// a second moment near 6, so the ReLU gain of 2 would start the estimate
/// with a standard deviation near 3 on data in [0, 1].
pub const OUTPUT_GAIN: f64 = 0.01;
pub const TILE_OVERLAP: usize = 16;

/// Whether layer `k` (1-based) adds the output of layer `k − 3`.
pub fn has_skip(k: usize) -> bool {
    k > 1 && k < DEPTH && (k - 1).is_multiple_of(3)
}

pub fn skip_layers() -> Vec<usize> {
    (1..=DEPTH).filter(|&k| has_skip(k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonetModel<T> {
    width: usize,
    convs: Vec<ConvLayer<T>>,
    norms: Vec<Option<BatchNorm<T>>>,
    version: u64,
}

/// Activations recorded by a training-phase forward pass.
#[derive(Debug)]
pub struct ForwardCache<T> {
    version: u64,
    /// `z_0 = Y` through `z_16`.
    outputs: Vec<Tensor4<T>>,
    /// ReLU outputs feeding each batch norm (layers 2..=16).
    relu_out: Vec<Option<Tensor4<T>>>,
    bn: Vec<Option<BnCache>>,
}

/// Parameter gradients in [`MonetModel::param_slices`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub slices: Vec<Vec<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn zeros_like(model: &MonetModel<T>) -> Self {
        Self {
            slices: model.param_slices().iter().map(|s| vec![T::ZERO; s.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads<T>) {
        for (a, b) in self.slices.iter_mut().zip(&other.slices) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.slices.iter().flatten().copied().collect()
    }

    pub fn all_finite(&self) -> bool {
        self.slices.iter().flatten().all(|v| v.is_finite())
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> MonetModel<T> {
    /// Kaiming-initialized network with `width` feature maps per inner layer.
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::param("network width must be positive"));
        }
        let mut rng = seeded(seed);
        let mut convs = Vec::with_capacity(DEPTH);
        let mut norms = Vec::with_capacity(DEPTH);
        for k in 1..=DEPTH {
            let (cin, cout) = match k {
                1 => (1, width),
                DEPTH => (width, 1),
                _ => (width, width),
            };
            convs.push(if k == DEPTH {
                ConvLayer::fan_in_normal(cin, cout, OUTPUT_GAIN, &mut rng)
            } else {
                ConvLayer::kaiming(cin, cout, &mut rng)
            });
            norms.push((k > 1 && k < DEPTH).then(|| BatchNorm::new(width)));
        }
        Ok(Self {
            width,
            convs,
            norms,
            version: 0,
        })
    }

    pub fn full(seed: u64) -> Result<Self> {
        Self::new(FULL_WIDTH, seed)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.convs.len()
    }

    pub fn convs(&self) -> &[ConvLayer<T>] {
        &self.convs
    }

    pub fn norms(&self) -> &[Option<BatchNorm<T>>] {
        &self.norms
    }

    /// Mutable access to layer `k` (1-based).
    pub fn layer_mut(&mut self, k: usize) -> (&mut ConvLayer<T>, Option<&mut BatchNorm<T>>) {
        self.version += 1;
        (&mut self.convs[k - 1], self.norms[k - 1].as_mut())
    }

    /// Counter bumped on every parameter mutation; caches from older
    /// versions are rejected by [`MonetModel::backward`].
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Trainable parameters: per layer the conv weights and bias, then the
    /// batch-norm gain and shift where present.
    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(4 * DEPTH);
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            out.push(conv.weights.as_slice());
            out.push(conv.bias.as_slice());
            if let Some(bn) = bn {
                out.push(bn.gain.as_slice());
                out.push(bn.shift.as_slice());
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.version += 1;
        let mut out = Vec::with_capacity(4 * DEPTH);
        for (conv, bn) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            out.push(conv.weights.as_mut_slice());
            out.push(conv.bias.as_mut_slice());
            if let Some(bn) = bn {
                out.push(bn.gain.as_mut_slice());
                out.push(bn.shift.as_mut_slice());
            }
        }
        out
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn check_input(&self, y: &Tensor4<T>) -> Result<()> {
        if y.channels() != 1 {
            return Err(Error::shape(format!("network input must have 1 channel, got {}", y.channels())));
        }
        y.check_finite("network input")
    }

    /// Training-phase forward pass. Batch norms use batch statistics and
    /// update their running estimates.
    pub fn forward_train(&mut self, y: &Tensor4<T>) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        self.check_input(y)?;
        let mut outputs = Vec::with_capacity(DEPTH);
        let mut relu_out = Vec::with_capacity(DEPTH);
        let mut bn_cache = Vec::with_capacity(DEPTH);
        outputs.push(y.clone());
        relu_out.push(None);
        bn_cache.push(None);
        for k in 1..DEPTH {
            let a = self.convs[k - 1].forward(&outputs[k - 1])?;
            let r = relu(&a);
            drop(a);
            match self.norms[k - 1].as_mut() {
                None => {
                    outputs.push(r);
                    relu_out.push(None);
                    bn_cache.push(None);
                }
                Some(bn) => {
                    let (mut z, c) = bn.forward_train(&r)?;
                    if has_skip(k) {
                        z.add_assign(&outputs[k - 3]);
                    }
                    outputs.push(z);
                    relu_out.push(Some(r));
                    bn_cache.push(Some(c));
                }
            }
        }
        let out = self.convs[DEPTH - 1].forward(&outputs[DEPTH - 1])?;
        out.check_finite("network output")?;
        Ok((
            out,
            ForwardCache {
                version: self.version,
                outputs,
                relu_out,
                bn: bn_cache,
            },
        ))
    }

    /// Inference-phase forward pass; model state is left untouched.
    pub fn infer(&self, y: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(y)?;
        // z_{k-3}, z_{k-2}, z_{k-1}
        let mut window: VecDeque<Tensor4<T>> = VecDeque::with_capacity(4);
        window.push_back(y.clone());
        for k in 1..DEPTH {
            let prev = window.back().expect("window holds z_{k-1}");
            let mut z = relu(&self.convs[k - 1].forward(prev)?);
            if let Some(bn) = &self.norms[k - 1] {
                z = bn.forward_infer(&z)?;
                if has_skip(k) {
                    z.add_assign(&window[window.len() - 3]);
                }
            }
            window.push_back(z);
            if window.len() > 3 {
                window.pop_front();
            }
        }
        let out = self.convs[DEPTH - 1].forward(window.back().expect("z_16"))?;
        out.check_finite("network output")?;
        Ok(out)
    }

    pub fn forward(&mut self, y: &Tensor4<T>, phase: Phase) -> Result<Tensor4<T>> {
        match phase {
            Phase::Train => Ok(self.forward_train(y)?.0),
            Phase::Infer => self.infer(y),
        }
    }

    /// Backpropagates `d_out = ∂L/∂X̂` through the cached forward pass.
    /// Returns the parameter gradients and, if requested, `∂L/∂Y`.
    pub fn backward(
        &self,
        cache: ForwardCache<T>,
        d_out: &Tensor4<T>,
        want_input: bool,
    ) -> Result<(ModelGrads<T>, Option<Tensor4<T>>)> {
        if cache.version != self.version {
            return Err(Error::Usage(format!(
                "forward cache is from model version {}, model is at {}",
                cache.version, self.version
            )));
        }
        let ForwardCache {
            mut outputs,
            mut relu_out,
            bn,
            ..
        } = cache;
        let [n, _, h, w] = outputs[0].dims();
        if d_out.dims() != [n, 1, h, w] {
            return Err(Error::shape(format!(
                "upstream gradient {:?} does not match network output {:?}",
                d_out.dims(),
                [n, 1, h, w]
            )));
        }
        let mut layer_grads: Vec<Vec<Vec<T>>> = vec![Vec::new(); DEPTH];
        let mut dz: Vec<Option<Tensor4<T>>> = (0..DEPTH).map(|_| None).collect();

        let (dx, g) = self.convs[DEPTH - 1].backward(&outputs[DEPTH - 1], d_out, true)?;
        layer_grads[DEPTH - 1] = vec![g.weights, g.bias];
        dz[DEPTH - 1] = dx;

        for k in (1..DEPTH).rev() {
            let g = dz[k].take().expect("every hidden output receives a gradient");
            let mut norm_grads = None;
            let da = match (&self.norms[k - 1], relu_out[k].take(), &bn[k]) {
                (Some(norm), Some(r), Some(c)) => {
                    if has_skip(k) {
                        add_into(&mut dz[k - 3], g.clone());
                    }
                    let (dr, bg) = norm.backward(&r, c, &g)?;
                    norm_grads = Some(bg);
                    relu_backward(&r, &dr)
                }
                // layer 1: z_1 is the ReLU output, so it carries the mask
                (None, None, None) if k == 1 => relu_backward(&outputs[1], &g),
                _ => return Err(Error::Usage("forward cache does not match the model".into())),
            };
            drop(g);
            let (dx, cg) = self.convs[k - 1].backward(&outputs[k - 1], &da, k > 1 || want_input)?;
            let lg = &mut layer_grads[k - 1];
            lg.extend([cg.weights, cg.bias]);
            if let Some(bg) = norm_grads {
                lg.extend([bg.gain, bg.shift]);
            }
            if k > 1 {
                // z_k is no longer needed once layer k has been processed
                outputs[k] = Tensor4::zeros([0, 0, 0, 0]);
            }
            if let Some(dx) = dx {
                add_into(&mut dz[k - 1], dx);
            }
        }
        let grads = ModelGrads {
            slices: layer_grads.into_iter().flatten().collect(),
        };
        Ok((grads, dz[0].take()))
    }

    /// Whole-image inference with tiling once the estimated working set
    /// exceeds `budget_bytes`. Tiles overlap by [`TILE_OVERLAP`] pixels on
    /// every side and only their centers are kept.
    pub fn denoise(&self, image: &AmplitudeImage, budget_bytes: usize) -> Result<AmplitudeImage> {
        let (h, w) = image.dims();
        let per_pixel = (4 + 9) * self.width * std::mem::size_of::<T>();
        if h * w * per_pixel <= budget_bytes {
            let y = Tensor4::from_images(&[image])?;
            return Ok(self.infer(&y)?.to_images()?.remove(0));
        }
        let max_px = (budget_bytes / per_pixel).max(1);
        let side = ((max_px as f64).sqrt() as usize).saturating_sub(2 * TILE_OVERLAP).max(TILE_OVERLAP);
        let mut out = vec![0.0; h * w];
        for r0 in (0..h).step_by(side) {
            for c0 in (0..w).step_by(side) {
                let (r1, c1) = ((r0 + side).min(h), (c0 + side).min(w));
                let (pr0, pc0) = (r0.saturating_sub(TILE_OVERLAP), c0.saturating_sub(TILE_OVERLAP));
                let (pr1, pc1) = ((r1 + TILE_OVERLAP).min(h), (c1 + TILE_OVERLAP).min(w));
                let tile = image.crop(pr0, pc0, pr1 - pr0, pc1 - pc0)?;
                let y = Tensor4::from_images(&[&tile])?;
                let est = self.infer(&y)?.to_images()?.remove(0);
                for r in r0..r1 {
                    for c in c0..c1 {
                        out[r * w + c] = est.get(r - pr0, c - pc0);
                    }
                }
            }
        }
        AmplitudeImage::new(h, w, out)
    }

    pub fn cast<U: Scalar>(&self) -> MonetModel<U> {
        MonetModel {
            width: self.width,
            convs: self.convs.iter().map(|c| c.cast()).collect(),
            norms: self.norms.iter().map(|b| b.as_ref().map(|b| b.cast())).collect(),
            version: self.version,
        }
    }

    pub(crate) fn from_parts(width: usize, convs: Vec<ConvLayer<T>>, norms: Vec<Option<BatchNorm<T>>>) -> Result<Self> {
        if convs.len() != DEPTH || norms.len() != DEPTH {
            return Err(Error::Format(format!("expected {DEPTH} layers, found {}", convs.len())));
        }
        for (k, (conv, bn)) in convs.iter().zip(&norms).enumerate().map(|(i, p)| (i + 1, p)) {
            let (cin, cout) = match k {
                1 => (1, width),
                DEPTH => (width, 1),
                _ => (width, width),
            };
            let needs_bn = k > 1 && k < DEPTH;
            if conv.in_ch != cin || conv.out_ch != cout || bn.is_some() != needs_bn {
                return Err(Error::Format(format!("layer {k} does not fit a width-{width} network")));
            }
            if let Some(bn) = bn {
                if bn.channels() != width || bn.running_var.iter().any(|v| v.to_f64() < 0.0) {
                    return Err(Error::Format(format!("batch norm of layer {k} is malformed")));
                }
            }
        }
        Ok(Self {
            width,
            convs,
            norms,
            version: 0,
        })
    }
}
