//! Retrieval feature extraction.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{heads::concat_features, infer, ModelState, Outputs, Selector};
use crate::numerics::{Tape, Tensor, Var};

/// Images per forward pass during extraction.
pub const EXTRACT_BATCH: usize = 32;

/// Handle of the selected raw feature inside a forward pass.
pub fn select(tape: &mut Tape<f32>, out: &Outputs, selector: Selector) -> Result<Var> {
    match selector {
        Selector::F => Ok(out.f),
        Selector::J => out
            .joint
            .as_ref()
            .map(|j| j.j)
            .ok_or_else(|| Error::InvalidArgument("selector j needs the joint module".into())),
        Selector::Fa => {
            if out.branches.is_empty() {
                return Err(Error::InvalidArgument(
                    "selector fa needs attribute branches".into(),
                ));
            }
            let attrs: Vec<Var> = out.branches.iter().map(|b| b.a).collect();
            concat_features(tape, out.f, &attrs)
        }
    }
}

/// Raw (unnormalized) features of a stack of images.
pub fn raw_features(state: &ModelState, images: Tensor<f32>, selector: Selector) -> Result<Tensor<f32>> {
    let (mut tape, out) = infer(state, images)?;
    let v = select(&mut tape, &out, selector)?;
    Ok(tape.value(v).clone())
}

/// L2-normalize every row in place; a zero row is reported by index.
pub fn l2_normalize_rows(feats: &mut Tensor<f32>) -> std::result::Result<(), usize> {
    let dim = feats.dim(1);
    for (i, row) in feats.data_mut().chunks_mut(dim).enumerate() {
        let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(i);
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
    }
    Ok(())
}

/// One L2-normalized feature row per sample.
pub fn extract_features(data: &Dataset, state: &ModelState, selector: Selector) -> Result<Tensor<f32>> {
    let variant = state.config.variant;
    if !variant.supports(selector) {
        return Err(Error::IncompatibleSelector {
            selector: selector.name().into(),
            variant: variant.name().into(),
        });
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot extract features of an empty set".into()));
    }
    let chunks: Vec<&[crate::data::Sample]> = data.samples.chunks(EXTRACT_BATCH).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let images: Vec<Tensor<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
            raw_features(state, Tensor::stack(&images), selector)
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = parts[0].dim(1);
    let data_flat: Vec<f32> = parts.into_iter().flat_map(Tensor::into_data).collect();
    let mut feats = Tensor::new(&[data.len(), dim], data_flat);
    l2_normalize_rows(&mut feats).map_err(|i| {
        let s = &data.samples[i];
        Error::Degenerate(format!(
            "sample {i} (identity {}, camera {}) has a zero {selector} feature",
            s.identity, s.camera
        ))
    })?;
    Ok(feats)
}
