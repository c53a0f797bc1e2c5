//! Orthogonal-slice PNGs with prediction and reference contours.

use std::path::Path;

use dram_core::pipeline::{HU_MAX, HU_MIN};
use dram_core::volume::Volume;
use image::{Rgb, RgbImage};

const SCALE: u32 = 3;
const GAP: u32 = 4;
const REFERENCE: Rgb<u8> = Rgb([40, 220, 60]);
const PREDICTION: Rgb<u8> = Rgb([235, 40, 40]);

/// Rounded centroid of a mask, or the grid centre when it is empty.
pub fn centroid(mask: &[bool], dims: [usize; 3]) -> [usize; 3] {
    let mut sum = [0usize; 3];
    let mut n = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let c = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        for a in 0..3 {
            sum[a] += c[a];
        }
        n += 1;
    }
    if n == 0 {
        return dims.map(|d| d / 2);
    }
    [0, 1, 2].map(|a| (sum[a] + n / 2) / n)
}

/// A 2D view: the plane orthogonal to `axis` through `at`.
struct Slice {
    axis: usize,
    at: usize,
    rows: usize,
    cols: usize,
}

impl Slice {
    fn new(axis: usize, at: usize, dims: [usize; 3]) -> Self {
        let (r, c) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        Self {
            axis,
            at,
            rows: dims[r],
            cols: dims[c],
        }
    }

    fn index(&self, r: usize, c: usize, dims: [usize; 3]) -> usize {
        let p = match self.axis {
            0 => [self.at, r, c],
            1 => [r, self.at, c],
            _ => [r, c, self.at],
        };
        (p[0] * dims[1] + p[1]) * dims[2] + p[2]
    }

    /// In-mask pixel with a 4-neighbour outside the mask or the slice.
    fn on_contour(&self, mask: &[bool], r: usize, c: usize, dims: [usize; 3]) -> bool {
        if !mask[self.index(r, c, dims)] {
            return false;
        }
        let inside = |rr: isize, cc: isize| {
            rr >= 0
                && cc >= 0
                && (rr as usize) < self.rows
                && (cc as usize) < self.cols
                && mask[self.index(rr as usize, cc as usize, dims)]
        };
        let (r, c) = (r as isize, c as isize);
        !(inside(r - 1, c) && inside(r + 1, c) && inside(r, c - 1) && inside(r, c + 1))
    }
}

/// Renders the three orthogonal slices through the reference centroid
/// side by side: grey-level intensity, reference contour in green and
/// prediction contour in red.
pub fn render(image: &Volume, reference: &[bool], prediction: &[bool]) -> RgbImage {
    let dims = image.dims();
    let center = if reference.iter().any(|&v| v) {
        centroid(reference, dims)
    } else {
        centroid(prediction, dims)
    };
    let slices: Vec<Slice> = (0..3).map(|a| Slice::new(a, center[a], dims)).collect();
    let width = slices.iter().map(|s| s.cols as u32 * SCALE).sum::<u32>() + GAP * 2;
    let height = slices.iter().map(|s| s.rows as u32 * SCALE).max().unwrap_or(0);
    let mut img = RgbImage::new(width, height);
    let mut x0 = 0u32;
    for s in &slices {
        for r in 0..s.rows {
            for c in 0..s.cols {
                let i = s.index(r, c, dims);
                let g = ((image.data()[i].clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN) * 255.0).round() as u8;
                let mut px = Rgb([g, g, g]);
                if s.on_contour(reference, r, c, dims) {
                    px = REFERENCE;
                }
                if s.on_contour(prediction, r, c, dims) {
                    px = PREDICTION;
                }
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        img.put_pixel(x0 + c as u32 * SCALE + dx, r as u32 * SCALE + dy, px);
                    }
                }
            }
        }
        x0 += s.cols as u32 * SCALE + GAP;
    }
    img
}

pub fn write_overlay(path: &Path, image: &Volume, reference: &[bool], prediction: &[bool]) -> image::ImageResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    render(image, reference, prediction).save_with_format(path, image::ImageFormat::Png)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dram_core::volume::Grid;

    #[test]
    fn centroid_of_a_box() {
        let dims = [6, 8, 10];
        let mask: Vec<bool> = (0..480)
            .map(|i| {
                let c = [i / 80, (i / 10) % 8, i % 10];
                (1..4).contains(&c[0]) && (2..7).contains(&c[1]) && c[2] == 9
            })
            .collect();
        assert_eq!(centroid(&mask, dims), [2, 4, 9]);
        assert_eq!(centroid(&[false; 480], dims), [3, 4, 5]);
    }

    #[test]
    fn contours_are_coloured() {
        let dims = [9, 9, 9];
        let image: Volume = Grid::filled(dims, [1.0; 3], -1000.0);
        let cube: Vec<bool> = (0..729)
            .map(|i| [i / 81, (i / 9) % 9, i % 9].iter().all(|&c| (2..7).contains(&c)))
            .collect();
        let img = render(&image, &cube, &[false; 729]);
        assert_eq!(img.width(), 3 * 9 * SCALE + 2 * GAP);
        // Slice through the centre: (2, 2) is a contour pixel, (4, 4) interior.
        assert_eq!(*img.get_pixel(2 * SCALE, 2 * SCALE), REFERENCE);
        assert_eq!(*img.get_pixel(4 * SCALE, 4 * SCALE), Rgb([0, 0, 0]));
        let both = render(&image, &cube, &cube);
        assert_eq!(*both.get_pixel(2 * SCALE, 2 * SCALE), PREDICTION);
    }
}
