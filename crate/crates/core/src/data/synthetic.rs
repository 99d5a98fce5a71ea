//! Procedural vehicles.
//!
//! Every identity is a type silhouette, a base hue and a private texture
//! (gratings plus stickers). Each image renders that sprite under a random
//! affine view over a cluttered background with random illumination, by
//! inverse-mapping every pixel into the sprite's canonical frame.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::{AttributeSchema, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub id_count: usize,
    pub images_per_id: usize,
    pub image_size: usize,
    pub color_classes: usize,
    pub type_classes: usize,
    pub cameras: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            id_count: 80,
            images_per_id: 8,
            image_size: 64,
            color_classes: 6,
            type_classes: 4,
            cameras: 4,
            seed: 0,
        }
    }
}

/// Generating parameters of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub color: usize,
    pub vtype: usize,
    gratings: [(f64, f64, f64); 2],
    stickers: Vec<([f64; 4], [f32; 3])>,
}

#[derive(Clone, Copy, Debug)]
struct Silhouette {
    body_w: f64,
    body_top: f64,
    body_bottom: f64,
    cabin_c: f64,
    cabin_w: f64,
    cabin_top: f64,
    slant: f64,
    wheel_r: f64,
}

fn stream(seed: u64, id: usize, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((id as u64) << 20) | k);
    rng
}

impl Silhouette {
    /// Shape of a type class. Depends only on the class index so that every
    /// dataset built with the same classes agrees on what a type looks like.
    fn of_type(t: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7e57_0000 + t as u64);
        let body_h = rng.gen_range(0.2..0.45);
        let body_bottom = 0.45;
        let body_top = body_bottom - body_h;
        Silhouette {
            body_w: rng.gen_range(0.6..0.92),
            body_top,
            body_bottom,
            cabin_c: rng.gen_range(-0.25..0.25),
            cabin_w: rng.gen_range(0.2..0.5),
            cabin_top: body_top - rng.gen_range(0.1..0.4),
            slant: rng.gen_range(0.0..0.6),
            wheel_r: rng.gen_range(0.09..0.17),
        }
    }

    /// 0 outside, 1 body, 2 window, 3 wheel.
    fn region(&self, u: f64, v: f64) -> u8 {
        let wx = self.body_w - 0.2;
        for cx in [-wx, wx] {
            if (u - cx).powi(2) + (v - self.body_bottom).powi(2) <= self.wheel_r.powi(2) {
                return 3;
            }
        }
        if u.abs() <= self.body_w && (self.body_top..=self.body_bottom).contains(&v) {
            return 1;
        }
        if (self.cabin_top..self.body_top).contains(&v) {
            let t = (self.body_top - v) / (self.body_top - self.cabin_top);
            let half = self.cabin_w * (1.0 - self.slant * t);
            let du = (u - self.cabin_c).abs();
            if du <= half {
                let inner = du <= half - 0.06 && v >= self.cabin_top + 0.05;
                return if inner { 2 } else { 1 };
            }
        }
        0
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Base colour of a colour class: evenly spaced hues.
pub fn class_color(color: usize, classes: usize) -> [f32; 3] {
    hsv(color as f64 / classes as f64, 0.8, 0.9)
}

impl Identity {
    fn draw(spec: &SyntheticSpec, id: usize) -> Self {
        let mut rng = stream(spec.seed, id, 0xFFFFF);
        let color = rng.gen_range(0..spec.color_classes);
        let vtype = rng.gen_range(0..spec.type_classes);
        let mut grating = || {
            (
                rng.gen_range(1.5..4.0),
                rng.gen_range(0.0..PI),
                rng.gen_range(0.0..2.0 * PI),
            )
        };
        let gratings = [grating(), grating()];
        let stickers = (0..2)
            .map(|_| {
                let u0 = rng.gen_range(-0.8..0.5);
                let v0 = rng.gen_range(-0.3..0.35);
                let rect = [u0, v0, u0 + rng.gen_range(0.12..0.3), v0 + rng.gen_range(0.06..0.15)];
                let c = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
                (rect, c)
            })
            .collect();
        Identity {
            color,
            vtype,
            gratings,
            stickers,
        }
    }

    fn surface(&self, base: [f32; 3], u: f64, v: f64) -> [f32; 3] {
        for (r, c) in &self.stickers {
            if u >= r[0] && u <= r[2] && v >= r[1] && v <= r[3] {
                return *c;
            }
        }
        let g: f64 = self
            .gratings
            .iter()
            .map(|&(f, phi, ph)| (2.0 * PI * f * (u * phi.cos() + v * phi.sin()) + ph).sin())
            .sum::<f64>()
            / 2.0;
        let m = (0.8 + 0.2 * g) as f32;
        base.map(|x| x * m)
    }
}

/// Render one view of an identity.
fn render(spec: &SyntheticSpec, ident: &Identity, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = spec.image_size;
    let sil = Silhouette::of_type(ident.vtype);
    let base = class_color(ident.color, spec.color_classes);

    let theta = rng.gen_range(-0.25..0.25);
    let scale = rng.gen_range(0.75..1.0);
    let stretch = rng.gen_range(-0.15..0.15);
    let mirror = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
    let (tx, ty) = (rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12));
    let (sx, sy) = (scale * (1.0 + stretch) * mirror, scale * (1.0 - stretch));
    let (cos, sin) = (f64::cos(theta), f64::sin(theta));
    let light = rng.gen_range(0.7f32..1.15);

    let bg_level = rng.gen_range(0.2f32..0.7);
    let grad = (rng.gen_range(-0.15f32..0.15), rng.gen_range(-0.15f32..0.15));
    let blobs: Vec<(f64, f64, f64, f64, [f32; 3])> = (0..3)
        .map(|_| {
            let c = hsv(rng.gen(), 0.25, rng.gen_range(0.2..0.8));
            (
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.1..0.4),
                rng.gen_range(0.1..0.4),
                c,
            )
        })
        .collect();

    let mut data = vec![0f32; 3 * s * s];
    for y in 0..s {
        let qy = 2.0 * (y as f64 + 0.5) / s as f64 - 1.0;
        for x in 0..s {
            let qx = 2.0 * (x as f64 + 0.5) / s as f64 - 1.0;
            let (dx, dy) = (qx - tx, qy - ty);
            let u = (cos * dx + sin * dy) / sx;
            let v = (-sin * dx + cos * dy) / sy;
            let px = match sil.region(u, v) {
                1 => ident.surface(base, u, v),
                2 => [0.25, 0.3, 0.38],
                3 => [0.08, 0.08, 0.08],
                _ => {
                    let mut c = [bg_level + grad.0 * qx as f32 + grad.1 * qy as f32; 3];
                    for &(bx, by, rx, ry, bc) in &blobs {
                        if ((qx - bx) / rx).powi(2) + ((qy - by) / ry).powi(2) <= 1.0 {
                            c = bc;
                        }
                    }
                    c
                }
            };
            for ch in 0..3 {
                let noise = rng.gen_range(-0.03f32..0.03);
                data[(ch * s + y) * s + x] = (px[ch] * light + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, s, s], data)
}

/// Generate `id_count x images_per_id` samples; identities are `0..id_count`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.color_classes < 2 || spec.type_classes < 2 {
        return Err(Error::InvalidArgument(
            "synthetic data needs at least 2 colour and 2 type classes".into(),
        ));
    }
    if spec.image_size < 4 || spec.cameras == 0 {
        return Err(Error::InvalidArgument(
            "image_size must be at least 4 and cameras positive".into(),
        ));
    }
    let mut samples = Vec::with_capacity(spec.id_count * spec.images_per_id);
    for id in 0..spec.id_count {
        let ident = Identity::draw(spec, id);
        for k in 0..spec.images_per_id {
            let mut rng = stream(spec.seed, id, k as u64);
            samples.push(Sample {
                image: render(spec, &ident, &mut rng),
                identity: id,
                camera: (k + id) % spec.cameras,
                attributes: vec![Some(ident.color), Some(ident.vtype)],
            });
        }
    }
    Dataset::new(
        samples,
        AttributeSchema::color_type(spec.color_classes, spec.type_classes),
        Split::Train,
    )
}

/// Train / query / gallery partition by held-out identities.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

impl Splits {
    /// Query and gallery together, in that order.
    pub fn held_out(&self) -> Result<Dataset> {
        let mut samples = self.query.samples.clone();
        samples.extend(self.gallery.samples.iter().cloned());
        Dataset::new(samples, self.query.meta.schema.clone(), Split::Test)
    }
}

/// The first `train_ids` identities (ascending) train; the rest are held
/// out. Of each held-out identity, the first `max(1, n / 4)` images are
/// queries and the remainder gallery.
pub fn split_by_identity(ds: &Dataset, train_ids: usize) -> Result<Splits> {
    let groups = ds.by_identity();
    if train_ids >= groups.len() {
        return Err(Error::InvalidArgument(format!(
            "{train_ids} training identities leave none of {} held out",
            groups.len()
        )));
    }
    let (mut tr, mut q, mut g) = (Vec::new(), Vec::new(), Vec::new());
    for (rank, members) in groups.values().enumerate() {
        if rank < train_ids {
            tr.extend(members);
        } else {
            let nq = (members.len() / 4).max(1);
            q.extend(&members[..nq]);
            g.extend(&members[nq..]);
        }
    }
    Ok(Splits {
        train: ds.subset(&tr, Split::Train),
        query: ds.subset(&q, Split::Query),
        gallery: ds.subset(&g, Split::Gallery),
    })
}
