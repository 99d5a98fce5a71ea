//! Activation-map export for the joint module's `G` and `G_reid`.
//!
//! Files are `{index:04}_G.pgm` and `{index:04}_Greid.pgm`, one pixel per
//! feature-map cell, holding the channel mean min-max scaled to 0..255.

use std::path::{Path, PathBuf};

use crate::data::pnm::write_pgm;
use crate::error::{Error, Result};
use crate::model::{infer, ModelState};
use crate::numerics::Tensor;

/// Gray level of a flat map whose value is not zero.
pub const FLAT_GRAY: u8 = 128;

/// Channel mean of image `i` of an `n x c x h x w` map.
pub fn channel_mean(map: &Tensor<f32>, i: usize) -> Vec<f32> {
    let (c, hw) = (map.dim(1), map.dim(2) * map.dim(3));
    let img = &map.data()[i * c * hw..(i + 1) * c * hw];
    (0..hw)
        .map(|p| (0..c).map(|ch| img[ch * hw + p] as f64).sum::<f64>() as f32 / c as f32)
        .collect()
}

/// Min-max scale to 8 bits. A flat map becomes mid-gray, or black if zero.
pub fn to_gray(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi <= lo {
        let level = if lo == 0.0 { 0 } else { FLAT_GRAY };
        return vec![level; values.len()];
    }
    let span = (hi - lo) as f64;
    values
        .iter()
        .map(|&v| ((v - lo) as f64 / span * 255.0).round() as u8)
        .collect()
}

/// Write the maps of every image and return the written paths.
pub fn export_activation_maps(state: &ModelState, images: &[Tensor<f32>], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !state.config.variant.has_joint() {
        return Err(Error::InvalidArgument(format!(
            "variant {} has no joint module to export",
            state.config.variant
        )));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir)?;
    let (tape, out) = infer(state, Tensor::stack(images))?;
    let joint = out.joint.expect("joint variant");
    let mut maps = vec![("G", tape.value(joint.gmap))];
    if let Some(g) = joint.g_reid {
        maps.push(("Greid", tape.value(g)));
    }
    let mut written = Vec::new();
    for i in 0..images.len() {
        for (tag, map) in &maps {
            let (h, w) = (map.dim(2), map.dim(3));
            let path = out_dir.join(format!("{i:04}_{tag}.pgm"));
            write_pgm(&path, w, h, to_gray(&channel_mean(map, i)))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_maps() {
        assert_eq!(to_gray(&[0.7; 4]), vec![FLAT_GRAY; 4]);
        assert_eq!(to_gray(&[0.0; 4]), vec![0; 4]);
        assert_eq!(to_gray(&[1.0, 2.0, 3.0]), vec![0, 128, 255]);
    }

    #[test]
    fn channel_mean_per_pixel() {
        let m = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 6.0]);
        assert_eq!(channel_mean(&m, 0), vec![2.0, 4.0]);
    }
}
