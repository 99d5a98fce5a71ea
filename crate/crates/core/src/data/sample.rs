use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Names and class counts of the labelled attributes, in slot order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub names: Vec<String>,
    pub classes: Vec<usize>,
}

impl AttributeSchema {
    /// The two-attribute layout used throughout: slot 0 colour, slot 1 type.
    pub fn color_type(color_classes: usize, type_classes: usize) -> Self {
        AttributeSchema {
            names: vec!["color".into(), "type".into()],
            classes: vec![color_classes, type_classes],
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
    Test,
}

/// One labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3 x h x w`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub identity: usize,
    pub camera: usize,
    /// One optional class index per attribute slot.
    pub attributes: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema: AttributeSchema,
    pub id_count: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Build a dataset, checking image ranges and attribute bounds.
    pub fn new(samples: Vec<Sample>, schema: AttributeSchema, split: Split) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            check_sample(s, &schema).map_err(|e| {
                Error::InvalidArgument(format!("sample {i}: {e}"))
            })?;
        }
        let id_count = samples
            .iter()
            .map(|s| s.identity)
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        Ok(Dataset {
            samples,
            meta: DatasetMeta {
                schema,
                id_count,
                split,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by identity, identities in ascending order.
    pub fn by_identity(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.identity).or_default().push(i);
        }
        map
    }

    /// Map from raw identity to a contiguous class label `0..id_count`.
    pub fn label_map(&self) -> BTreeMap<usize, usize> {
        self.by_identity()
            .keys()
            .enumerate()
            .map(|(label, &id)| (id, label))
            .collect()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    /// Per-channel mean over every pixel of every image.
    pub fn channel_means(&self) -> [f32; 3] {
        let mut acc = [0f64; 3];
        let mut count = 0usize;
        for s in &self.samples {
            let hw = s.image.dim(1) * s.image.dim(2);
            for (c, a) in acc.iter_mut().enumerate() {
                *a += s.image.data()[c * hw..(c + 1) * hw]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            count += hw;
        }
        if count == 0 {
            return [0.0; 3];
        }
        acc.map(|a| (a / count as f64) as f32)
    }

    /// A new dataset holding the given samples, sharing this one's schema.
    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let samples: Vec<Sample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset::new(samples, self.meta.schema.clone(), split)
            .expect("subset of a valid dataset is valid")
    }
}

pub(crate) fn check_sample(s: &Sample, schema: &AttributeSchema) -> Result<()> {
    if s.image.rank() != 3 || s.image.dim(0) != 3 {
        return Err(Error::InvalidArgument(format!(
            "image must be 3 x h x w, got {:?}",
            s.image.shape()
        )));
    }
    if s.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArgument("image values outside [0, 1]".into()));
    }
    if s.attributes.len() != schema.len() {
        return Err(Error::InvalidArgument(format!(
            "{} attribute slots, schema has {}",
            s.attributes.len(),
            schema.len()
        )));
    }
    for (slot, (label, &m)) in s.attributes.iter().zip(&schema.classes).enumerate() {
        if let Some(l) = label {
            if *l >= m {
                return Err(Error::InvalidArgument(format!(
                    "attribute '{}' index {l} out of range (classes = {m})",
                    schema.names.get(slot).map_or("?", |s| s.as_str())
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: usize, attrs: Vec<Option<usize>>) -> Sample {
        Sample {
            image: Tensor::full(&[3, 2, 2], 0.5),
            identity: id,
            camera: 0,
            attributes: attrs,
        }
    }

    #[test]
    fn rejects_out_of_range_attribute() {
        let schema = AttributeSchema::color_type(4, 8);
        let err = Dataset::new(vec![sample(0, vec![Some(1), Some(9)])], schema, Split::Train)
            .unwrap_err();
        assert!(err.to_string().contains("type"), "{err}");
    }

    #[test]
    fn label_map_is_contiguous() {
        let schema = AttributeSchema::color_type(4, 8);
        let ds = Dataset::new(
            vec![
                sample(17, vec![None, None]),
                sample(3, vec![Some(0), None]),
                sample(17, vec![None, Some(2)]),
            ],
            schema,
            Split::Train,
        )
        .unwrap();
        assert_eq!(ds.meta.id_count, 2);
        let m = ds.label_map();
        assert_eq!(m[&3], 0);
        assert_eq!(m[&17], 1);
    }
}
