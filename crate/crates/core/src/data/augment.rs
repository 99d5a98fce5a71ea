//! Training-time augmentation: horizontal flip, zoom and random erasing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sample::Sample;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub flip_p: f64,
    /// Inclusive range of the zoom factor; `(1, 1)` disables zoom.
    pub zoom: (f64, f64),
    pub erase_p: f64,
    /// Erased fraction of the image area.
    pub erase_area: (f64, f64),
    /// Height over width of the erased rectangle.
    pub erase_aspect: (f64, f64),
    /// Per-channel fill for erased pixels and zoom padding.
    pub fill: [f32; 3],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            enabled: true,
            flip_p: 0.5,
            zoom: (0.9, 1.1),
            erase_p: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
            fill: [0.5; 3],
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            enabled: false,
            ..Default::default()
        }
    }
}

/// Axis-aligned rectangle `[top, top + height) x [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Apply the policy to a copy of the sample. Labels are carried over untouched.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R, policy: &AugmentPolicy) -> Sample {
    if !policy.enabled {
        return sample.clone();
    }
    let mut image = sample.image.clone();
    if rng.gen_bool(policy.flip_p) {
        image = flip_horizontal(&image);
    }
    if policy.zoom.0 < policy.zoom.1 {
        let factor = rng.gen_range(policy.zoom.0..=policy.zoom.1);
        image = zoom(&image, factor, policy.fill);
    }
    if rng.gen_bool(policy.erase_p) {
        let (h, w) = (image.dim(1), image.dim(2));
        if let Some(rect) = sample_erase_rect(h, w, policy, rng) {
            erase(&mut image, rect, policy.fill);
        }
    }
    Sample {
        image,
        ..sample.clone()
    }
}

pub fn flip_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let d = image.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    })
}

/// Rescale about the image centre by `factor` with bilinear sampling, keeping
/// the size. Factors above one crop; below one pad with `fill`.
pub fn zoom(image: &Tensor<f32>, factor: f64, fill: [f32; 3]) -> Tensor<f32> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let d = image.data();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0f32; c * h * w];
    for y in 0..h {
        let sy = cy + (y as f64 - cy) / factor;
        for x in 0..w {
            let sx = cx + (x as f64 - cx) / factor;
            let inside = sy >= -0.5 && sy <= h as f64 - 0.5 && sx >= -0.5 && sx <= w as f64 - 0.5;
            for ch in 0..c {
                out[(ch * h + y) * w + x] = if inside {
                    bilinear(&d[ch * h * w..(ch + 1) * h * w], h, w, sy, sx)
                } else {
                    fill[ch.min(2)]
                };
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Draw an erasing rectangle whose area fraction and aspect lie in the
/// policy ranges. Gives up after a bounded number of attempts.
pub fn sample_erase_rect<R: Rng>(
    h: usize,
    w: usize,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Option<Rect> {
    let total = (h * w) as f64;
    for _ in 0..100 {
        let area = total * rng.gen_range(policy.erase_area.0..=policy.erase_area.1);
        let (la, lb) = (policy.erase_aspect.0.ln(), policy.erase_aspect.1.ln());
        let aspect = rng.gen_range(la..=lb).exp();
        let height = (area * aspect).sqrt().round() as usize;
        let width = (area / aspect).sqrt().round() as usize;
        if height == 0 || width == 0 || height > h || width > w {
            continue;
        }
        let frac = (height * width) as f64 / total;
        if frac < policy.erase_area.0 || frac > policy.erase_area.1 {
            continue;
        }
        let top = rng.gen_range(0..=h - height);
        let left = rng.gen_range(0..=w - width);
        return Some(Rect {
            top,
            left,
            height,
            width,
        });
    }
    None
}

pub fn erase(image: &mut Tensor<f32>, rect: Rect, fill: [f32; 3]) {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let d = image.data_mut();
    for ch in 0..c {
        for y in rect.top..rect.top + rect.height {
            let row = (ch * h + y) * w;
            d[row + rect.left..row + rect.left + rect.width].fill(fill[ch.min(2)]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Tensor<f32> {
        Tensor::from_fn(&[3, 6, 7], |i| (i % 97) as f32 / 97.0)
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp();
        assert_ne!(flip_horizontal(&img), img);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn unit_zoom_is_identity() {
        let img = ramp();
        let z = zoom(&img, 1.0, [0.0; 3]);
        for (a, b) in z.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zoom_out_pads_with_fill() {
        let img = Tensor::full(&[3, 8, 8], 1.0);
        let z = zoom(&img, 0.5, [0.25; 3]);
        assert_eq!(z.data()[0], 0.25);
        assert_eq!(z.data()[(8 * 4) + 4], 1.0);
    }

    #[test]
    fn erase_rect_respects_ranges() {
        let policy = AugmentPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let r = sample_erase_rect(32, 32, &policy, &mut rng).unwrap();
            let frac = (r.height * r.width) as f64 / 1024.0;
            assert!((0.02..=0.2).contains(&frac));
            assert!(r.top + r.height <= 32 && r.left + r.width <= 32);
        }
    }
}
