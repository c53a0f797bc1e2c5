//! Intensity normalization and lobe-chunk extraction.

use crate::error::{Error, Result};
use crate::nn::{resize_trilinear, Real, Tensor};
use crate::volume::{BoundingBox, Grid, LabelMap, Volume};

pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 400.0;

/// Clips to `[HU_MIN, HU_MAX]` and rescales to `[0, 1]`.
pub fn normalize_intensity(image: &Volume) -> Volume {
    image.map(|v| (v.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN))
}

/// Where a chunk came from: the lobe's bounding box in the scan and the
/// chunk size it was resized to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkGeometry {
    pub lobe_id: u8,
    pub bbox: BoundingBox,
    pub chunk_dims: [usize; 3],
}

impl ChunkGeometry {
    /// Resamples a scan-space binary mask into chunk space.
    pub fn mask_to_chunk(&self, mask: &[bool], scan_dims: [usize; 3]) -> Vec<bool> {
        let size = self.bbox.size();
        let mut crop = Vec::with_capacity(size.iter().product());
        for d in self.bbox.lo[0]..self.bbox.hi[0] {
            for w in self.bbox.lo[1]..self.bbox.hi[1] {
                for h in self.bbox.lo[2]..self.bbox.hi[2] {
                    crop.push(mask[(d * scan_dims[1] + w) * scan_dims[2] + h] as u8 as f32);
                }
            }
        }
        let t = Tensor::from_vec(1, size, crop).expect("crop matches bbox");
        resize_trilinear(&t, self.chunk_dims).data().iter().map(|&v| v >= 0.5).collect()
    }

    /// Resamples a chunk-space map back onto the lobe's bounding box.
    pub fn to_bbox<T: Real>(&self, chunk: &Tensor<T>) -> Tensor<T> {
        resize_trilinear(chunk, self.bbox.size())
    }
}

/// Network input for one lobe.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    /// `1 × chunk_dims`, zero outside the lobe.
    pub image: Tensor<f32>,
    /// The lobe mask in chunk space.
    pub mask: Vec<bool>,
    pub geometry: ChunkGeometry,
}

/// Crops the lobe's bounding box, resizes it to `chunk_dims` and zeroes
/// everything outside the resized lobe mask.
pub fn extract_chunk(scan: &Volume, lobe_map: &LabelMap, lobe_id: u8, chunk_dims: [usize; 3]) -> Result<Chunk> {
    scan.ensure_aligned(lobe_map, "extract_chunk")?;
    let bbox = lobe_map
        .bounding_box(lobe_id)
        .ok_or_else(|| Error::Domain(format!("lobe {lobe_id} is empty")))?;
    let geometry = ChunkGeometry {
        lobe_id,
        bbox,
        chunk_dims,
    };
    let crop: Grid<f32> = scan.crop(&bbox);
    let mut image = resize_trilinear(&Tensor::from_vec(1, bbox.size(), crop.into_vec())?, chunk_dims);
    let mask = geometry.mask_to_chunk(&lobe_map.mask_of(lobe_id), scan.dims());
    for (v, &m) in image.data_mut().iter_mut().zip(&mask) {
        if !m {
            *v = 0.0;
        }
    }
    Ok(Chunk { image, mask, geometry })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints() {
        let v: Volume = Grid::from_vec([1, 1, 5], [1.0; 3], vec![-1000.0, 400.0, -300.0, -2000.0, 3000.0]).unwrap();
        let n = normalize_intensity(&v);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[1], 1.0);
        assert!((n.data()[2] - 0.5).abs() < 1e-7);
        assert_eq!(n.data()[3], 0.0);
        assert_eq!(n.data()[4], 1.0);
    }

    #[test]
    fn normalization_is_idempotent_through_hu() {
        let v: Volume = Grid::from_fn([4, 4, 4], [1.0; 3], |d, w, h| -1000.0 + 1400.0 * ((d * 16 + w * 4 + h) as f32 / 63.0));
        let once = normalize_intensity(&v);
        let back = once.map(|x| x * (HU_MAX - HU_MIN) + HU_MIN);
        let twice = normalize_intensity(&back);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn box_lobe(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> LabelMap {
        Grid::from_fn(dims, [1.0; 3], |d, w, h| {
            let c = [d, w, h];
            (0..3).all(|a| c[a] >= lo[a] && c[a] < hi[a]) as u8
        })
    }

    #[test]
    fn chunk_of_exact_size_is_a_masked_crop() {
        let dims = [12, 12, 12];
        // Lobe: an L-shape whose bbox is 8³, so some bbox voxels are outside.
        let lobe: LabelMap = Grid::from_fn(dims, [1.0; 3], |d, w, h| {
            let inside = (2..10).contains(&d) && (2..10).contains(&w) && (2..10).contains(&h);
            (inside && (d < 6 || w < 6)) as u8
        });
        let scan: Volume = Grid::from_fn(dims, [1.0; 3], |d, w, h| (d * 144 + w * 12 + h) as f32);
        let c = extract_chunk(&scan, &lobe, 1, [8; 3]).unwrap();
        assert_eq!(c.geometry.bbox.lo, [2; 3]);
        for d in 0..8 {
            for w in 0..8 {
                for h in 0..8 {
                    let i = (d * 8 + w) * 8 + h;
                    let inside = lobe.get(d + 2, w + 2, h + 2) == 1;
                    assert_eq!(c.mask[i], inside);
                    let want = if inside { scan.get(d + 2, w + 2, h + 2) } else { 0.0 };
                    assert_eq!(c.image.data()[i], want);
                }
            }
        }
    }

    #[test]
    fn outside_lobe_is_exactly_zero_after_resizing() {
        let dims = [20, 16, 18];
        let lobe = box_lobe(dims, [3, 2, 5], [17, 13, 16]);
        let scan: Volume = Grid::filled(dims, [1.0; 3], 0.7);
        let c = extract_chunk(&scan, &lobe, 1, [8; 3]).unwrap();
        for (v, &m) in c.image.data().iter().zip(&c.mask) {
            if !m {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(extract_chunk(&scan, &lobe, 2, [8; 3]).is_err());
    }

    #[test]
    fn geometry_round_trips_a_binary_pattern() {
        let dims = [40, 36, 44];
        let lobe: LabelMap = Grid::from_fn(dims, [1.0; 3], |d, w, h| {
            let p = [d as f64 - 20.0, w as f64 - 17.0, h as f64 - 22.0];
            ((p[0] / 15.0).powi(2) + (p[1] / 13.0).powi(2) + (p[2] / 18.0).powi(2) < 1.0) as u8
        });
        let scan: Volume = Grid::filled(dims, [1.0; 3], 0.0);
        // Desk geometry: lobe boxes of at most 40 voxels enlarged to 48³.
        let c = extract_chunk(&scan, &lobe, 1, [48; 3]).unwrap();
        let painted = Tensor::from_vec(1, [48; 3], c.mask.iter().map(|&m| m as u8 as f32).collect()).unwrap();
        let back = c.geometry.to_bbox(&painted);
        let bb = c.geometry.bbox;
        let (mut agree, mut total) = (0usize, 0usize);
        for d in 0..bb.size()[0] {
            for w in 0..bb.size()[1] {
                for h in 0..bb.size()[2] {
                    let want = lobe.get(bb.lo[0] + d, bb.lo[1] + w, bb.lo[2] + h) == 1;
                    let got = back.at(0, d, w, h) >= 0.5;
                    agree += (want == got) as usize;
                    total += 1;
                }
            }
        }
        let rate = agree as f64 / total as f64;
        assert!(rate >= 0.99, "agreement {rate}");
    }
}
