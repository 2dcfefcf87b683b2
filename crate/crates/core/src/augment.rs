//! Random crop, bilinear resize and horizontal flip for `[3, 32, 32]` images.

use rand::Rng;

use crate::data::{CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Tensor};

pub const MIN_CROP: usize = 24;

/// A concrete augmentation: a square crop resized back to full size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugParams {
    pub crop: usize,
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl AugParams {
    pub const IDENTITY: AugParams = AugParams { crop: IMAGE_SIZE, top: 0, left: 0, flip: false };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let crop = rng.random_range(MIN_CROP..=IMAGE_SIZE);
        let top = rng.random_range(0..=IMAGE_SIZE - crop);
        let left = rng.random_range(0..=IMAGE_SIZE - crop);
        AugParams { crop, top, left, flip: rng.random_bool(0.5) }
    }

    pub fn from_seed(aug_seed: u64) -> Self {
        Self::sample(&mut seed::rng(aug_seed))
    }
}

/// Writes the augmented version of one flattened image into `out`.
pub fn apply_into<T: Real>(src: &[T], p: AugParams, out: &mut [T]) {
    let n = IMAGE_SIZE;
    let scale = p.crop as f64 / n as f64;
    let max = (p.crop - 1) as f64;
    // half-pixel-centre sampling; a full-size crop maps every pixel onto itself
    let coord = |d: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(p.crop - 1);
        (i0, i1, s - i0 as f64)
    };
    let rows: Vec<_> = (0..n).map(coord).collect();
    let cols: Vec<_> = (0..n).map(coord).collect();
    for c in 0..CHANNELS {
        let plane = &src[c * n * n..(c + 1) * n * n];
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            for x in 0..n {
                let (x0, x1, fx) = cols[if p.flip { n - 1 - x } else { x }];
                let at = |yy: usize, xx: usize| plane[(p.top + yy) * n + p.left + xx].to_f64();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[c * n * n + y * n + x] = T::of(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
}

pub fn apply<T: Real>(image: &Tensor<T>, p: AugParams) -> Result<Tensor<T>> {
    let expected = [CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
    let per_image = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
    let batch_ok = image.rank() == 4 && image.shape()[1..] == expected;
    if !(image.shape() == expected || batch_ok) {
        return Err(Error::shape("augment", format!("expected [.., 3, 32, 32], got {:?}", image.shape())));
    }
    let mut out = Tensor::zeros(image.shape());
    for (s, d) in image.data().chunks(per_image).zip(out.data_mut().chunks_mut(per_image)) {
        apply_into(s, p, d);
    }
    Ok(out)
}

/// Augments one image with parameters drawn from `aug_seed`.
pub fn augment<T: Real>(image: &Tensor<T>, aug_seed: u64) -> Result<Tensor<T>> {
    apply(image, AugParams::from_seed(aug_seed))
}
