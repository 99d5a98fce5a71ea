//! On-disk datasets: one directory with `images/`, and a JSON-lines manifest
//! per split (`train.jsonl`, `query.jsonl`, `gallery.jsonl`).

use std::path::{Path, PathBuf};

use super::manifest::{load_manifest, write_manifest, ManifestRecord};
use super::pnm::write_ppm;
use super::sample::{AttributeSchema, Dataset, Split};
use super::synthetic::Splits;
use crate::error::Result;

pub const IMAGE_DIR: &str = "images";

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split_name(split)))
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Query => "query",
        Split::Gallery => "gallery",
        Split::Test => "test",
    }
}

/// Write the images of `ds` as binary pixmaps and its manifest.
pub fn write_dataset(ds: &Dataset, dir: &Path, split: Split) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let name = split_name(split);
    let mut records = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let rel = format!("{IMAGE_DIR}/{name}_{i:05}.ppm");
        write_ppm(&dir.join(&rel), &s.image)?;
        records.push(ManifestRecord {
            path: rel,
            id: s.identity,
            camera: s.camera,
            attributes: s.attributes.clone(),
        });
    }
    write_manifest(&manifest_path(dir, split), &records, &ds.meta.schema)
}

pub fn write_splits(splits: &Splits, dir: &Path) -> Result<()> {
    write_dataset(&splits.train, dir, Split::Train)?;
    write_dataset(&splits.query, dir, Split::Query)?;
    write_dataset(&splits.gallery, dir, Split::Gallery)?;
    Ok(())
}

pub fn load_split(dir: &Path, schema: &AttributeSchema, split: Split) -> Result<Dataset> {
    load_manifest(&manifest_path(dir, split), schema, split)
}

pub fn load_splits(dir: &Path, schema: &AttributeSchema) -> Result<Splits> {
    Ok(Splits {
        train: load_split(dir, schema, Split::Train)?,
        query: load_split(dir, schema, Split::Query)?,
        gallery: load_split(dir, schema, Split::Gallery)?,
    })
}
