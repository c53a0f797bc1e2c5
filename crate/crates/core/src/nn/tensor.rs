use crate::error::{Error, Result};
use crate::nn::Real;

/// Channel-first dense map `C × D × W × H` (batch size is always one).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    channels: usize,
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self::filled(channels, dims, T::ZERO)
    }

    pub fn filled(channels: usize, dims: [usize; 3], value: T) -> Self {
        Self {
            channels,
            dims,
            data: vec![value; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if data.len() != channels * dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!(
                "{} values for shape {}x{:?}",
                data.len(),
                channels,
                dims
            )));
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, d: usize, w: usize, h: usize) -> T {
        self.data[((c * self.dims[0] + d) * self.dims[1] + w) * self.dims[2] + h]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, d: usize, w: usize, h: usize) -> &mut T {
        let i = ((c * self.dims[0] + d) * self.dims[1] + w) * self.dims[2] + h;
        &mut self.data[i]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn ensure_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{what}: {}x{:?} vs {}x{:?}",
                self.channels, self.dims, other.channels, other.dims
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Stacks tensors with equal spatial dims along the channel axis.
    pub fn concat(parts: &[&Tensor<T>]) -> Result<Self> {
        let dims = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?
            .dims;
        if parts.iter().any(|p| p.dims != dims) {
            return Err(Error::Shape("concat: spatial dims differ".into()));
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * dims[0] * dims[1] * dims[2]);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    /// Splits along channels into pieces of the given channel counts.
    pub fn split(&self, counts: &[usize]) -> Vec<Tensor<T>> {
        assert_eq!(counts.iter().sum::<usize>(), self.channels, "split counts");
        let n = self.voxels();
        let mut start = 0;
        counts
            .iter()
            .map(|&c| {
                let t = Tensor {
                    channels: c,
                    dims: self.dims,
                    data: self.data[start * n..(start + c) * n].to_vec(),
                };
                start += c;
                t
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
