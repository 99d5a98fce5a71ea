//! JSON-lines manifests: one `{"path", "id", "camera", <attr>...}` object per line.
//!
//! Attribute keys are the schema names (`color`, `type`); a `null` or missing
//! attribute becomes an absent label. Image paths are relative to the manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use super::pnm::read_ppm;
use super::sample::{check_sample, AttributeSchema, Dataset, Sample, Split};
use crate::error::{Error, Result};

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub id: usize,
    pub camera: usize,
    pub attributes: Vec<Option<usize>>,
}

fn manifest_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_line(
    text: &str,
    schema: &AttributeSchema,
    path: &Path,
    line: usize,
) -> Result<ManifestRecord> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| manifest_err(path, line, e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| manifest_err(path, line, "expected a JSON object"))?;
    let uint = |key: &str| -> Result<usize> {
        obj.get(key)
            .and_then(Value::as_u64)
            .map(|x| x as usize)
            .ok_or_else(|| manifest_err(path, line, format!("missing or invalid '{key}'")))
    };
    let rel = obj
        .get("path")
        .and_then(Value::as_str)
        .ok_or_else(|| manifest_err(path, line, "missing or invalid 'path'"))?
        .to_string();
    let id = uint("id")?;
    let camera = uint("camera")?;
    let mut attributes = Vec::with_capacity(schema.len());
    for (name, &m) in schema.names.iter().zip(&schema.classes) {
        let label = match obj.get(name) {
            None | Some(Value::Null) => None,
            Some(x) => {
                let k = x.as_u64().ok_or_else(|| {
                    manifest_err(path, line, format!("'{name}' must be an integer or null"))
                })? as usize;
                if k >= m {
                    return Err(manifest_err(
                        path,
                        line,
                        format!("'{name}' index {k} out of range (classes = {m})"),
                    ));
                }
                Some(k)
            }
        };
        attributes.push(label);
    }
    Ok(ManifestRecord {
        path: rel,
        id,
        camera,
        attributes,
    })
}

/// Parse every record without touching the images.
pub fn read_records(path: &Path, schema: &AttributeSchema) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, schema, path, i + 1))
        .collect()
}

/// Load a manifest and the images it references.
pub fn load_manifest(path: &Path, schema: &AttributeSchema, split: Split) -> Result<Dataset> {
    let records = read_records(path, schema)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let image = read_ppm(&base.join(&r.path))?;
        let s = Sample {
            image,
            identity: r.id,
            camera: r.camera,
            attributes: r.attributes,
        };
        check_sample(&s, schema)?;
        samples.push(s);
    }
    Dataset::new(samples, schema.clone(), split)
}

pub fn record_json(r: &ManifestRecord, schema: &AttributeSchema) -> String {
    let mut obj = Map::new();
    obj.insert("path".into(), json!(r.path));
    obj.insert("id".into(), json!(r.id));
    obj.insert("camera".into(), json!(r.camera));
    for (name, a) in schema.names.iter().zip(&r.attributes) {
        obj.insert(name.clone(), a.map_or(Value::Null, |k| json!(k)));
    }
    Value::Object(obj).to_string()
}

pub fn write_manifest(
    path: &Path,
    records: &[ManifestRecord],
    schema: &AttributeSchema,
) -> Result<PathBuf> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", record_json(r, schema))?;
    }
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pnm::write_ppm;
    use crate::numerics::Tensor;

    fn schema() -> AttributeSchema {
        AttributeSchema::color_type(10, 8)
    }

    fn write_fixture(lines: &[&str]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.ppm", "b.ppm", "c.ppm"] {
            write_ppm(&dir.path().join(name), &Tensor::full(&[3, 2, 2], 0.2)).unwrap();
        }
        let p = dir.path().join("m.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        (dir, p)
    }

    #[test]
    fn three_line_manifest() {
        let (_d, p) = write_fixture(&[
            r#"{"path":"a.ppm","id":1,"camera":0,"color":2,"type":3}"#,
            r#"{"path":"b.ppm","id":1,"camera":1,"color":2,"type":3}"#,
            r#"{"path":"c.ppm","id":5,"camera":0,"color":null,"type":1}"#,
        ]);
        let ds = load_manifest(&p, &schema(), Split::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.meta.id_count, 2);
        assert_eq!(ds.samples[2].attributes, vec![None, Some(1)]);
    }

    #[test]
    fn missing_attribute_key_is_absent() {
        let (_d, p) = write_fixture(&[r#"{"path":"a.ppm","id":1,"camera":0}"#]);
        let ds = load_manifest(&p, &schema(), Split::Train).unwrap();
        assert_eq!(ds.samples[0].attributes, vec![None, None]);
    }

    #[test]
    fn out_of_range_type_cites_line() {
        let (_d, p) = write_fixture(&[
            r#"{"path":"a.ppm","id":1,"camera":0,"color":2,"type":3}"#,
            r#"{"path":"b.ppm","id":1,"camera":0,"color":2,"type":9}"#,
        ]);
        let err = load_manifest(&p, &schema(), Split::Train).unwrap_err();
        match &err {
            Error::Manifest { line, message, .. } => {
                assert_eq!(*line, 2);
                assert!(message.contains("type"));
            }
            other => panic!("unexpected error {other}"),
        }
        assert!(err.to_string().contains(":2:"));
    }

    #[test]
    fn malformed_line_cites_line() {
        let (_d, p) = write_fixture(&[
            r#"{"path":"a.ppm","id":1,"camera":0}"#,
            r#"{"path":"a.ppm","id":1,"camera":0}"#,
            r#"{"path": "a.ppm", "id": oops}"#,
        ]);
        match load_manifest(&p, &schema(), Split::Train).unwrap_err() {
            Error::Manifest { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn record_json_round_trips() {
        let r = ManifestRecord {
            path: "x.ppm".into(),
            id: 4,
            camera: 2,
            attributes: vec![None, Some(7)],
        };
        let line = record_json(&r, &schema());
        assert!(line.contains("\"color\":null"));
        let back = parse_line(&line, &schema(), Path::new("m"), 1).unwrap();
        assert_eq!(back, r);
    }
}
