//! Voxel-set overlap, volume and shape measures.

use crate::error::{Error, Result};

fn check_len(a: &[bool], b: &[bool], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: masks of {} and {} voxels", a.len(), b.len())));
    }
    Ok(())
}

fn count(m: &[bool]) -> usize {
    m.iter().filter(|&&v| v).count()
}

fn overlap(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(&x, &y)| x && y).count()
}

/// Dice similarity `2|X∩Y| / (|X| + |Y|)`; two empty sets score 1.
pub fn dsc(pred: &[bool], reference: &[bool]) -> Result<f64> {
    check_len(pred, reference, "dsc")?;
    let denom = count(pred) + count(reference);
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * overlap(pred, reference) as f64 / denom as f64)
}

/// Absolute difference of lesion fraction of the lung,
/// `||X| − |Y|| / |Lung|`.
pub fn apd(pred: &[bool], reference: &[bool], lung: &[bool]) -> Result<f64> {
    check_len(pred, reference, "apd")?;
    check_len(pred, lung, "apd")?;
    let l = count(lung);
    if l == 0 {
        return Err(Error::Domain("empty lung mask".into()));
    }
    Ok((count(pred) as f64 - count(reference) as f64).abs() / l as f64)
}

/// Area of all voxel faces separating the mask from non-mask or
/// out-of-bounds voxels, in mm².
pub fn surface_area(mask: &[bool], dims: [usize; 3], spacing: [f32; 3]) -> Result<f64> {
    if mask.len() != dims.iter().product::<usize>() {
        return Err(Error::Shape(format!("mask of {} voxels for dims {dims:?}", mask.len())));
    }
    if count(mask) == 0 {
        return Err(Error::Domain("surface of an empty mask".into()));
    }
    let s = spacing.map(|v| v as f64);
    let face = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut exposed = [0usize; 3];
    for d in 0..dims[0] {
        for w in 0..dims[1] {
            for h in 0..dims[2] {
                let i = (d * dims[1] + w) * dims[2] + h;
                if !mask[i] {
                    continue;
                }
                let c = [d, w, h];
                for a in 0..3 {
                    if c[a] == 0 || !mask[i - strides[a]] {
                        exposed[a] += 1;
                    }
                    if c[a] + 1 == dims[a] || !mask[i + strides[a]] {
                        exposed[a] += 1;
                    }
                }
            }
        }
    }
    Ok((0..3).map(|a| exposed[a] as f64 * face[a]).sum())
}

/// Surface-to-volume ratio in mm⁻¹.
pub fn surface_to_volume(mask: &[bool], dims: [usize; 3], spacing: [f32; 3]) -> Result<f64> {
    let area = surface_area(mask, dims, spacing)?;
    let voxel: f64 = spacing.iter().map(|&v| v as f64).product();
    Ok(area / (count(mask) as f64 * voxel))
}

/// `|SVR(X) − SVR(Y)|` in mm⁻¹; both masks must be nonempty.
pub fn svrd(pred: &[bool], reference: &[bool], dims: [usize; 3], spacing: [f32; 3]) -> Result<f64> {
    check_len(pred, reference, "svrd")?;
    Ok((surface_to_volume(pred, dims, spacing)? - surface_to_volume(reference, dims, spacing)?).abs())
}

/// False-discovery rate; an empty prediction yields 0 with the flag set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fdr {
    pub value: f64,
    pub empty_prediction: bool,
}

pub fn fdr(pred: &[bool], reference: &[bool]) -> Result<Fdr> {
    check_len(pred, reference, "fdr")?;
    let p = count(pred);
    if p == 0 {
        return Ok(Fdr {
            value: 0.0,
            empty_prediction: true,
        });
    }
    Ok(Fdr {
        value: 1.0 - overlap(pred, reference) as f64 / p as f64,
        empty_prediction: false,
    })
}

/// Recall restricted to reference voxels labelled `subtype`; `None` when the
/// subtype is absent.
pub fn tpr_subtype(pred: &[bool], subtype_map: &[u8], subtype: u8) -> Result<Option<f64>> {
    if pred.len() != subtype_map.len() {
        return Err(Error::Shape("tpr: prediction and reference differ in size".into()));
    }
    let (mut total, mut hit) = (0usize, 0usize);
    for (&p, &s) in pred.iter().zip(subtype_map) {
        if s == subtype {
            total += 1;
            hit += p as usize;
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn set(n: usize, idx: &[usize]) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in idx {
            m[i] = true;
        }
        m
    }

    #[test]
    fn dsc_examples() {
        let x = set(10, &[1, 2]);
        assert_eq!(dsc(&x, &x).unwrap(), 1.0);
        assert_eq!(dsc(&x, &set(10, &[5, 6])).unwrap(), 0.0);
        assert!((dsc(&x, &set(10, &[1, 2, 3, 4])).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(dsc(&[false; 4], &[false; 4]).unwrap(), 1.0);
    }

    #[test]
    fn apd_examples() {
        let lung = vec![true; 100];
        let x = set(100, &(0..10).collect::<Vec<_>>());
        let y = set(100, &(20..27).collect::<Vec<_>>());
        assert_eq!(apd(&x, &x, &lung).unwrap(), 0.0);
        assert!((apd(&x, &y, &lung).unwrap() - 0.03).abs() < 1e-15);
        assert_eq!(apd(&lung, &[false; 100], &lung).unwrap(), 1.0);
        assert!(apd(&x, &y, &[false; 100]).is_err());
    }

    #[test]
    fn surface_examples() {
        let one = set(27, &[13]);
        assert_eq!(surface_area(&one, [3, 3, 3], [1.0; 3]).unwrap(), 6.0);
        let two = set(27, &[13, 22]);
        assert_eq!(surface_area(&two, [3, 3, 3], [1.0; 3]).unwrap(), 10.0);
        assert_eq!(surface_area(&one, [3, 3, 3], [1.0, 2.0, 2.0]).unwrap(), 16.0);
        // Faces on the grid border count too.
        assert_eq!(surface_area(&[true], [1, 1, 1], [1.0; 3]).unwrap(), 6.0);
        assert!(surface_area(&[false; 27], [3, 3, 3], [1.0; 3]).is_err());
    }

    #[test]
    fn svrd_examples() {
        let one = set(27, &[13]);
        let two = set(27, &[13, 22]);
        assert_eq!(svrd(&one, &one, [3, 3, 3], [1.0; 3]).unwrap(), 0.0);
        assert_eq!(svrd(&one, &two, [3, 3, 3], [1.0; 3]).unwrap(), 1.0);
        let shifted = set(27, &[0, 9]);
        assert_eq!(svrd(&two, &shifted, [3, 3, 3], [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn fdr_and_tpr_examples() {
        let y = set(10, &[0, 1, 2, 3]);
        assert_eq!(fdr(&set(10, &[0, 1]), &y).unwrap().value, 0.0);
        assert_eq!(fdr(&set(10, &[7, 8]), &y).unwrap().value, 1.0);
        assert_eq!(fdr(&set(10, &[0, 1, 7, 8]), &y).unwrap().value, 0.5);
        let empty = fdr(&[false; 10], &y).unwrap();
        assert!(empty.empty_prediction && empty.value == 0.0);

        let mut sub = vec![0u8; 20];
        for s in sub.iter_mut().take(10) {
            *s = 2;
        }
        assert_eq!(tpr_subtype(&set(20, &(0..10).collect::<Vec<_>>()), &sub, 2).unwrap(), Some(1.0));
        assert_eq!(tpr_subtype(&set(20, &[15]), &sub, 2).unwrap(), Some(0.0));
        assert_eq!(tpr_subtype(&set(20, &(0..7).collect::<Vec<_>>()), &sub, 2).unwrap(), Some(0.7));
        assert_eq!(tpr_subtype(&set(20, &[1]), &sub, 3).unwrap(), None);
    }

    /// Set-based oracle over explicit index sets.
    fn oracle(x: &BTreeSet<usize>, y: &BTreeSet<usize>, lung: usize) -> (f64, f64, f64) {
        let inter = x.intersection(y).count() as f64;
        let d = if x.is_empty() && y.is_empty() {
            1.0
        } else {
            2.0 * inter / (x.len() + y.len()) as f64
        };
        let a = (x.len() as f64 - y.len() as f64).abs() / lung as f64;
        let f = if x.is_empty() { 0.0 } else { 1.0 - inter / x.len() as f64 };
        (d, a, f)
    }

    #[test]
    fn overlap_metrics_match_set_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (px, py) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6));
            let x: BTreeSet<usize> = (0..512).filter(|_| rng.gen_bool(px)).collect();
            let y: BTreeSet<usize> = (0..512).filter(|_| rng.gen_bool(py)).collect();
            let sub: Vec<u8> = (0..512).map(|i| if y.contains(&i) { rng.gen_range(1..=3) } else { 0 }).collect();
            let xm: Vec<bool> = (0..512).map(|i| x.contains(&i)).collect();
            let ym: Vec<bool> = (0..512).map(|i| y.contains(&i)).collect();
            let (d, a, f) = oracle(&x, &y, 512);
            assert_eq!(dsc(&xm, &ym).unwrap(), d);
            assert_eq!(apd(&xm, &ym, &[true; 512]).unwrap(), a);
            assert_eq!(fdr(&xm, &ym).unwrap().value, f);
            for s in 1..=3u8 {
                let ys: BTreeSet<usize> = (0..512).filter(|&i| sub[i] == s).collect();
                let want = (!ys.is_empty()).then(|| ys.intersection(&x).count() as f64 / ys.len() as f64);
                assert_eq!(tpr_subtype(&xm, &sub, s).unwrap(), want);
            }
        }
    }

    fn rotate90(m: &[bool], n: usize) -> Vec<bool> {
        let mut out = vec![false; m.len()];
        for d in 0..n {
            for w in 0..n {
                for h in 0..n {
                    out[(d * n + (n - 1 - h)) * n + w] = m[(d * n + w) * n + h];
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn overlap_properties(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<bool> = (0..512).map(|_| rng.gen_bool(0.3)).collect();
            let y: Vec<bool> = (0..512).map(|_| rng.gen_bool(0.3)).collect();
            let d = dsc(&x, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dsc(&y, &x).unwrap());
            let mut perm: Vec<usize> = (0..512).collect();
            for i in (1..512).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let px: Vec<bool> = perm.iter().map(|&i| x[i]).collect();
            let py: Vec<bool> = perm.iter().map(|&i| y[i]).collect();
            prop_assert_eq!(dsc(&px, &py).unwrap(), d);
            prop_assert_eq!(fdr(&px, &py).unwrap(), fdr(&x, &y).unwrap());
            let sub: Vec<u8> = y.iter().map(|&v| v as u8).collect();
            let psub: Vec<u8> = py.iter().map(|&v| v as u8).collect();
            prop_assert_eq!(tpr_subtype(&px, &psub, 1).unwrap(), tpr_subtype(&x, &sub, 1).unwrap());
            let f = fdr(&x, &y).unwrap().value;
            let precision = x.iter().zip(&y).filter(|(&a, &b)| a && b).count() as f64 / x.iter().filter(|&&a| a).count() as f64;
            prop_assert!((f + precision - 1.0).abs() < 1e-12);
        }

        #[test]
        fn surface_is_translation_and_rotation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // A random blob inside the central 4³ of an 8³ grid.
            let mut m = vec![false; 512];
            for d in 2..6 { for w in 2..6 { for h in 2..6 {
                m[(d * 8 + w) * 8 + h] = rng.gen_bool(0.6);
            }}}
            m[(3 * 8 + 3) * 8 + 3] = true;
            let a = surface_area(&m, [8; 3], [1.0; 3]).unwrap();
            let (sd, sw, sh) = (rng.gen_range(-2i32..=2), rng.gen_range(-2i32..=2), rng.gen_range(-2i32..=2));
            let mut t = vec![false; 512];
            for d in 0..8i32 { for w in 0..8i32 { for h in 0..8i32 {
                if m[((d * 8 + w) * 8 + h) as usize] {
                    t[(((d + sd) * 8 + w + sw) * 8 + h + sh) as usize] = true;
                }
            }}}
            prop_assert_eq!(surface_area(&t, [8; 3], [1.0; 3]).unwrap(), a);
            prop_assert_eq!(surface_area(&rotate90(&m, 8), [8; 3], [1.0; 3]).unwrap(), a);
        }
    }
}
