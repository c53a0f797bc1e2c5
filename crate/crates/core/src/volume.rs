//! Dense 3D grids with voxel spacing.
//!
//! Voxels are stored D-major, then W, then H (H varies fastest), matching the
//! on-disk layout of the DVOL1 format.

use crate::error::{Error, Result};

/// A 3D grid of scalars with per-axis voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<T>,
}

/// Intensity volume (HU-like scale, or normalized to [0, 1]).
pub type Volume = Grid<f32>;

/// Integer label grid aligned to a [`Volume`].
pub type LabelMap = Grid<u8>;

impl<T: Copy + Default> Grid<T> {
    pub fn new(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        Self::filled(dims, spacing, T::default())
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: T) -> Self {
        Self {
            dims,
            spacing,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], spacing: [f32; 3], data: Vec<T>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!(
                "{} voxels supplied for dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    /// Builds a grid by evaluating `f` at every `(d, w, h)`.
    pub fn from_fn(dims: [usize; 3], spacing: [f32; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for d in 0..dims[0] {
            for w in 0..dims[1] {
                for h in 0..dims[2] {
                    data.push(f(d, w, h));
                }
            }
        }
        Self {
            dims,
            spacing,
            data,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn index(&self, d: usize, w: usize, h: usize) -> usize {
        (d * self.dims[1] + w) * self.dims[2] + h
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let h = index % self.dims[2];
        let rest = index / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], h]
    }

    #[inline]
    pub fn get(&self, d: usize, w: usize, h: usize) -> T {
        self.data[self.index(d, w, h)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, w: usize, h: usize, value: T) {
        let i = self.index(d, w, h);
        self.data[i] = value;
    }

    /// Value at signed coordinates, `None` when out of bounds.
    #[inline]
    pub fn get_signed(&self, d: isize, w: isize, h: isize) -> Option<T> {
        if d < 0 || w < 0 || h < 0 {
            return None;
        }
        let (d, w, h) = (d as usize, w as usize, h as usize);
        if d >= self.dims[0] || w >= self.dims[1] || h >= self.dims[2] {
            return None;
        }
        Some(self.get(d, w, h))
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.dims == other.dims
    }

    pub fn ensure_aligned<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Copies the sub-box `[lo, hi)` into a new grid.
    pub fn crop(&self, bbox: &BoundingBox) -> Grid<T> {
        let size = bbox.size();
        Grid::from_fn(size, self.spacing, |d, w, h| {
            self.get(bbox.lo[0] + d, bbox.lo[1] + w, bbox.lo[2] + h)
        })
    }
}

impl Grid<f32> {
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

impl Grid<u8> {
    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Binary mask of voxels equal to `label`.
    pub fn mask_of(&self, label: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == label).collect()
    }

    pub fn nonzero_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != 0).collect()
    }

    /// Sorted distinct nonzero labels.
    pub fn labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn bounding_box(&self, label: u8) -> Option<BoundingBox> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &v) in self.data.iter().enumerate() {
            if v == label {
                any = true;
                let c = self.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a] + 1);
                }
            }
        }
        any.then_some(BoundingBox { lo, hi })
    }
}

/// Half-open axis-aligned box `[lo, hi)` in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn size(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= self.lo[a] && c[a] < self.hi[a])
    }
}
