//! Horizontal flip and random crop with nearest-neighbour resize.

use rand::Rng;

use crate::tensor::Tensor4;

use super::data::SceneSample;

/// Side of the random crop relative to the image side.
pub const CROP_FRACTION: f64 = 0.875;

fn remap(sample: &SceneSample, f: impl Fn(usize, usize) -> (usize, usize)) -> SceneSample {
    let s = sample.image.shape();
    let image = Tensor4::from_fn(s, |n, c, y, x| {
        let (sy, sx) = f(y, x);
        sample.image.at(n, c, sy, sx)
    });
    let mask = sample.mask.as_ref().map(|m| {
        let mut out = Vec::with_capacity(m.len());
        for y in 0..s.h {
            for x in 0..s.w {
                let (sy, sx) = f(y, x);
                out.push(m[sy * s.w + sx]);
            }
        }
        out
    });
    SceneSample {
        image,
        label: sample.label,
        mask,
    }
}

pub fn hflip(sample: &SceneSample) -> SceneSample {
    let w = sample.image.shape().w;
    remap(sample, |y, x| (y, w - 1 - x))
}

/// Crops a `CROP_FRACTION` window at `(top, left)` and resizes it back to
/// the full extent.
pub fn crop_resize(sample: &SceneSample, top: usize, left: usize) -> SceneSample {
    let (h, w) = sample.extent();
    let (ch, cw) = crop_extent(h, w);
    assert!(top + ch <= h && left + cw <= w, "crop window out of bounds");
    remap(sample, |y, x| (top + y * ch / h, left + x * cw / w))
}

pub fn crop_extent(h: usize, w: usize) -> (usize, usize) {
    let side = |e: usize| ((e as f64 * CROP_FRACTION).round() as usize).clamp(1, e);
    (side(h), side(w))
}

/// Flip with probability 0.5, then a random crop resized back.
pub fn augment<R: Rng + ?Sized>(sample: &SceneSample, rng: &mut R) -> SceneSample {
    let flipped = if rng.random_bool(0.5) { hflip(sample) } else { sample.clone() };
    let (h, w) = sample.extent();
    let (ch, cw) = crop_extent(h, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    crop_resize(&flipped, top, left)
}
