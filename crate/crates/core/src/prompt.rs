//! Prompt-centred cropping. The prompt point lands on crop pixel
//! `(side/2, side/2)`; pixels outside the image are zero.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PromptPoint {
    /// Column.
    pub x: usize,
    /// Row.
    pub y: usize,
}

impl PromptPoint {
    pub fn new(x: usize, y: usize) -> Self {
        PromptPoint { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub origin_x: i64,
    pub origin_y: i64,
    pub side: usize,
    pub original_w: usize,
    pub original_h: usize,
}

impl CropSpec {
    /// Requires a point inside a `w`x`h` image and an even, positive side.
    pub fn centered(point: PromptPoint, side: usize, w: usize, h: usize) -> Result<Self> {
        if point.x >= w || point.y >= h {
            return Err(Error::Domain(format!(
                "prompt ({}, {}) outside {w}x{h} image",
                point.x, point.y
            )));
        }
        if side == 0 || side % 2 != 0 {
            return Err(Error::Domain(format!("crop side must be even and positive, got {side}")));
        }
        let half = (side / 2) as i64;
        Ok(CropSpec {
            origin_x: point.x as i64 - half,
            origin_y: point.y as i64 - half,
            side,
            original_w: w,
            original_h: h,
        })
    }

    pub fn center(&self) -> (i64, i64) {
        let half = (self.side / 2) as i64;
        (self.origin_x + half, self.origin_y + half)
    }

    /// Crop rows/cols `[c0, c1)` that fall inside the image along one axis.
    fn overlap(origin: i64, side: usize, extent: usize) -> (usize, usize) {
        let lo = (-origin).clamp(0, side as i64) as usize;
        let hi = (extent as i64 - origin).clamp(0, side as i64) as usize;
        (lo, hi.max(lo))
    }

    /// In-bounds window as crop-frame ranges `(x0..x1, y0..y1)`.
    pub fn valid_window(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (x0, x1) = Self::overlap(self.origin_x, self.side, self.original_w);
        let (y0, y1) = Self::overlap(self.origin_y, self.side, self.original_h);
        (x0..x1, y0..y1)
    }
}

/// Crops any `1xCxHxW` tensor by `spec`, zero-filling outside the image.
pub fn crop_with<T: Real>(image: &Tensor<T>, spec: &CropSpec) -> Result<Tensor<T>> {
    let [n, c, h, w] = image.dims4()?;
    if n != 1 || h != spec.original_h || w != spec.original_w {
        return Err(Error::Shape(format!(
            "crop spec for {}x{} image applied to tensor {:?}",
            spec.original_w,
            spec.original_h,
            image.shape()
        )));
    }
    let s = spec.side;
    let mut out = Tensor::zeros([1, c, s, s]);
    let (xs, ys) = spec.valid_window();
    let src = image.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for cy in ys.clone() {
            let iy = (cy as i64 + spec.origin_y) as usize;
            let ix0 = (xs.start as i64 + spec.origin_x) as usize;
            let s_off = (ch * h + iy) * w + ix0;
            let d_off = (ch * s + cy) * s + xs.start;
            dst[d_off..d_off + xs.len()].copy_from_slice(&src[s_off..s_off + xs.len()]);
        }
    }
    Ok(out)
}

/// Crops `image` (`1xCxHxW`) so `point` lands on the crop centre.
pub fn crop_centered<T: Real>(image: &Tensor<T>, point: PromptPoint, side: usize) -> Result<(Tensor<T>, CropSpec)> {
    let [_, _, h, w] = image.dims4()?;
    let spec = CropSpec::centered(point, side, w, h)?;
    Ok((crop_with(image, &spec)?, spec))
}

/// Pastes a `1x1xSxS` crop-frame mask back into the original frame; pixels
/// outside the crop window are 0.
pub fn uncrop_mask<T: Real>(mask: &Tensor<T>, spec: &CropSpec) -> Result<Tensor<T>> {
    let s = spec.side;
    if mask.shape() != [1, 1, s, s] {
        return Err(Error::shape("uncrop_mask", "mask", mask.shape(), "spec", &[1, 1, s, s]));
    }
    let (h, w) = (spec.original_h, spec.original_w);
    let mut out = Tensor::zeros([1, 1, h, w]);
    let (xs, ys) = spec.valid_window();
    let dst = out.data_mut();
    for cy in ys {
        let iy = (cy as i64 + spec.origin_y) as usize;
        let ix0 = (xs.start as i64 + spec.origin_x) as usize;
        dst[iy * w + ix0..iy * w + ix0 + xs.len()]
            .copy_from_slice(&mask.data()[cy * s + xs.start..cy * s + xs.end]);
    }
    Ok(out)
}

/// Rounded centroid of the nonzero pixels of a `1x1xHxW` mask, or `None`
/// for an empty mask.
pub fn mask_centroid<T: Real>(mask: &Tensor<T>) -> Result<Option<PromptPoint>> {
    let [_, _, h, w] = mask.dims4()?;
    let (mut sx, mut sy, mut n) = (0u64, 0u64, 0u64);
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] > T::zero() {
                sx += x as u64;
                sy += y as u64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let r = |s: u64| ((s as f64) / (n as f64)).round() as usize;
    Ok(Some(PromptPoint::new(r(sx), r(sy))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![1, c, h, w], |i| (i + 1) as f32)
    }

    #[test]
    fn centred_example() {
        let img = ramp(3, 100, 100);
        let (crop, spec) = crop_centered(&img, PromptPoint::new(50, 50), 64).unwrap();
        assert_eq!((spec.origin_x, spec.origin_y), (18, 18));
        for c in 0..3 {
            assert_eq!(crop.at4(0, c, 32, 32), img.at4(0, c, 50, 50));
        }
    }

    #[test]
    fn corner_prompt_pads_with_zeros() {
        let img = ramp(3, 100, 100);
        let (crop, spec) = crop_centered(&img, PromptPoint::new(0, 0), 64).unwrap();
        assert_eq!((spec.origin_x, spec.origin_y), (-32, -32));
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(crop.at4(0, c, y, x), 0.0);
                }
            }
            assert_eq!(crop.at4(0, c, 32, 32), img.at4(0, c, 0, 0));
        }
    }

    #[test]
    fn rejects_bad_prompts() {
        let img = ramp(3, 10, 12);
        assert!(matches!(
            crop_centered(&img, PromptPoint::new(12, 0), 8),
            Err(Error::Domain(_))
        ));
        assert!(crop_centered(&img, PromptPoint::new(0, 10), 8).is_err());
        assert!(crop_centered(&img, PromptPoint::new(0, 0), 7).is_err());
    }

    #[test]
    fn all_ones_uncrop() {
        let spec = CropSpec::centered(PromptPoint::new(20, 25), 16, 50, 40).unwrap();
        let back = uncrop_mask(&Tensor::full([1, 1, 16, 16], 1.0f32), &spec).unwrap();
        for y in 0..40 {
            for x in 0..50 {
                let inside = (12..28).contains(&x) && (17..33).contains(&y);
                assert_eq!(back.at4(0, 0, y, x), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn partially_outside_uncrop_clips() {
        let spec = CropSpec::centered(PromptPoint::new(49, 0), 16, 50, 40).unwrap();
        let back = uncrop_mask(&Tensor::full([1, 1, 16, 16], 1.0f32), &spec).unwrap();
        assert_eq!(back.data().iter().filter(|&&v| v == 1.0).count(), 9 * 8);
        assert!(uncrop_mask(&Tensor::full([1, 1, 8, 8], 1.0f32), &spec).is_err());
    }

    #[test]
    fn random_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for case in 0..100 {
            let (h, w) = (rng.random_range(1..80), rng.random_range(1..80));
            let side = 2 * rng.random_range(1..40);
            // every fourth case sits on an image border
            let (x, y) = if case % 4 == 0 {
                (if rng.random() { 0 } else { w - 1 }, rng.random_range(0..h))
            } else {
                (rng.random_range(0..w), rng.random_range(0..h))
            };
            let img = Tensor::from_fn(vec![1, 3, h, w], |_| rng.random::<f32>());
            let gt = Tensor::from_fn(vec![1, 1, h, w], |_| rng.random_range(0..2) as f32);
            let (crop, spec) = crop_centered(&img, PromptPoint::new(x, y), side).unwrap();
            for c in 0..3 {
                assert_eq!(crop.at4(0, c, side / 2, side / 2).to_bits(), img.at4(0, c, y, x).to_bits());
            }
            let back = uncrop_mask(&crop_with(&gt, &spec).unwrap(), &spec).unwrap();
            for yy in 0..h {
                for xx in 0..w {
                    let inside = (spec.origin_x..spec.origin_x + side as i64).contains(&(xx as i64))
                        && (spec.origin_y..spec.origin_y + side as i64).contains(&(yy as i64));
                    let want = if inside { gt.at4(0, 0, yy, xx) } else { 0.0 };
                    assert_eq!(back.at4(0, 0, yy, xx), want);
                }
            }
        }
    }

    #[test]
    fn translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Tensor::from_fn(vec![1, 3, 40, 40], |_| rng.random::<f32>());
        let (dx, dy) = (7, 5);
        let shifted = Tensor::from_fn(vec![1, 3, 60, 60], |i| {
            let (c, y, x) = (i / 3600, i / 60 % 60, i % 60);
            if x >= dx && y >= dy && x - dx < 40 && y - dy < 40 {
                base.at4(0, c, y - dy, x - dx)
            } else {
                -1.0
            }
        });
        let (a, _) = crop_centered(&base, PromptPoint::new(20, 18), 16).unwrap();
        let (b, _) = crop_centered(&shifted, PromptPoint::new(20 + dx, 18 + dy), 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn centroid() {
        let mut m = Tensor::<f32>::zeros([1, 1, 5, 5]);
        assert_eq!(mask_centroid(&m).unwrap(), None);
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            m.data_mut()[y * 5 + x] = 1.0;
        }
        assert_eq!(mask_centroid(&m).unwrap(), Some(PromptPoint::new(2, 2)));
    }
}
