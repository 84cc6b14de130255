use crate::error::{Error, Result};
use crate::image::AmplitudeImage;

use super::Scalar;

/// Dense `(batch, channels, height, width)` array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::ZERO; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!("{} values for dims {dims:?}", data.len())));
        }
        let t = Self { dims, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    /// Stacks single-channel images into a `(n, 1, h, w)` batch.
    pub fn from_images(images: &[&AmplitudeImage]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::param("cannot batch zero images"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            img.ensure_same_shape(first, "batched images")?;
            data.extend(img.pixels().iter().map(|&p| T::from_f64(p)));
        }
        Ok(Self {
            dims: [images.len(), 1, h, w],
            data,
        })
    }

    /// Splits a single-channel batch back into images; negative values are
    /// clamped to zero.
    pub fn to_images(&self) -> Result<Vec<AmplitudeImage>> {
        let [n, c, h, w] = self.dims;
        if c != 1 {
            return Err(Error::shape(format!("expected 1 channel, got {c}")));
        }
        (0..n)
            .map(|i| {
                let px = self.data[i * h * w..(i + 1) * h * w].iter().map(|v| v.to_f64().max(0.0)).collect();
                AmplitudeImage::new(h, w, px)
            })
            .collect()
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    /// `height · width`.
    #[inline]
    pub fn plane(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Slice holding sample `n` (all channels).
    #[inline]
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.dims[1] * self.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn same_dims(&self, other: &Tensor4<T>, what: &str) -> Result<()> {
        if self.dims == other.dims {
            Ok(())
        } else {
            Err(Error::shape(format!("{what}: {:?} vs {:?}", self.dims, other.dims)))
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what}: element {i} is not finite"))),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4<T>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element type conversion.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
