use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::image::Image;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Where an image's pixels come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ImageRef {
    /// A file path, resolved relative to the annotation file.
    Path(String),
    /// A key into the dataset's image container.
    Synthetic(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub identity_id: usize,
    pub image_ref: ImageRef,
    pub captions: Vec<String>,
    pub split: Split,
}

fn record_error(index: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("record {index}: {msg}"))
}

fn parse_record(index: usize, value: &Value) -> Result<AnnotationRecord> {
    let obj = value
        .as_object()
        .ok_or_else(|| record_error(index, "not a JSON object"))?;
    let identity_id = obj
        .get("id")
        .ok_or_else(|| record_error(index, "missing \"id\""))?
        .as_u64()
        .ok_or_else(|| record_error(index, "\"id\" must be a nonnegative integer"))? as usize;
    let image_ref = match (obj.get("img_path"), obj.get("synthetic")) {
        (Some(Value::String(p)), None) => ImageRef::Path(p.clone()),
        (None, Some(Value::String(k))) => ImageRef::Synthetic(k.clone()),
        (Some(_), Some(_)) => return Err(record_error(index, "both \"img_path\" and \"synthetic\" given")),
        _ => return Err(record_error(index, "needs a string \"img_path\" or \"synthetic\"")),
    };
    let captions: Vec<String> = match obj.get("captions") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|c| {
                c.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| record_error(index, "captions must be strings"))
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(record_error(index, "\"captions\" must be an array")),
        None => return Err(record_error(index, "missing \"captions\"")),
    };
    if captions.is_empty() || captions.iter().any(|c| c.trim().is_empty()) {
        return Err(record_error(index, "needs at least one non-empty caption"));
    }
    let split = match obj.get("split") {
        Some(Value::String(s)) => s.parse().map_err(|e| record_error(index, e))?,
        Some(_) => return Err(record_error(index, "\"split\" must be a string")),
        None => Split::Train,
    };
    Ok(AnnotationRecord {
        identity_id,
        image_ref,
        captions,
        split,
    })
}

pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let value: Value = serde_json::from_str(text)?;
    let items = value
        .as_array()
        .ok_or_else(|| Error::Parse("annotation file must hold a JSON array".into()))?;
    items.iter().enumerate().map(|(i, v)| parse_record(i, v)).collect()
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_annotations(&text)
}

/// Canonical JSON form: keys `id`, `img_path`|`synthetic`, `captions`, `split`.
pub fn annotations_to_json(records: &[AnnotationRecord]) -> String {
    let items: Vec<Value> = records
        .iter()
        .map(|r| {
            let mut m = serde_json::Map::new();
            m.insert("id".into(), r.identity_id.into());
            match &r.image_ref {
                ImageRef::Path(p) => m.insert("img_path".into(), p.clone().into()),
                ImageRef::Synthetic(k) => m.insert("synthetic".into(), k.clone().into()),
            };
            m.insert("captions".into(), r.captions.clone().into());
            m.insert("split".into(), r.split.to_string().into());
            Value::Object(m)
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&items).expect("json");
    s.push('\n');
    s
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    std::fs::write(path, annotations_to_json(records))?;
    Ok(())
}

pub fn partition(records: &[AnnotationRecord]) -> BTreeMap<Split, Vec<AnnotationRecord>> {
    let mut out: BTreeMap<Split, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.split).or_default().push(r.clone());
    }
    out
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_FILE: &str = "images.ckpt";

/// Annotation records with their decoded images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<AnnotationRecord>,
    /// Images keyed by `ImageRef` string (path or synthetic key).
    pub images: BTreeMap<String, Image>,
}

impl Dataset {
    pub fn image(&self, record: &AnnotationRecord) -> Result<&Image> {
        let key = match &record.image_ref {
            ImageRef::Path(p) | ImageRef::Synthetic(p) => p,
        };
        self.images
            .get(key)
            .ok_or_else(|| Error::Contract(format!("no image loaded for {key:?}")))
    }

    pub fn split(&self, split: Split) -> Vec<&AnnotationRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Writes `annotations.json` and `images.ckpt` (synthetic images only) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_annotations(&dir.join(ANNOTATIONS_FILE), &self.records)?;
        let mut ckpt = Checkpoint::new();
        for r in &self.records {
            if let ImageRef::Synthetic(k) = &r.image_ref {
                ckpt.insert(k.clone(), self.image(r)?.to_tensor());
            }
        }
        ckpt.save(&dir.join(IMAGES_FILE))
    }

    /// Loads a dataset from a directory (or an annotation file path). Synthetic
    /// images come from the sibling `images.ckpt`; path images are decoded from disk.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, ann): (PathBuf, PathBuf) = if path.is_dir() {
            (path.to_path_buf(), path.join(ANNOTATIONS_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let records = load_annotations(&ann)?;
        let mut images = BTreeMap::new();
        let needs_container = records
            .iter()
            .any(|r| matches!(r.image_ref, ImageRef::Synthetic(_)));
        let container = if needs_container {
            Some(Checkpoint::load(&dir.join(IMAGES_FILE))?)
        } else {
            None
        };
        for r in &records {
            match &r.image_ref {
                ImageRef::Synthetic(k) => {
                    let t = container.as_ref().expect("loaded above").get(k)?;
                    images.insert(k.clone(), Image::from_tensor(t)?);
                }
                ImageRef::Path(p) => {
                    if !images.contains_key(p) {
                        images.insert(p.clone(), Image::load(&dir.join(p))?);
                    }
                }
            }
        }
        Ok(Self { records, images })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_list_is_empty_dataset() {
        assert!(parse_annotations("[]").unwrap().is_empty());
    }

    #[test]
    fn missing_captions_names_the_record() {
        let text = r#"[{"id": 0, "synthetic": "a", "captions": ["x"]},
                       {"id": 1, "synthetic": "b"}]"#;
        let err = parse_annotations(text).unwrap_err().to_string();
        assert!(err.contains("record 1"), "{err}");
        assert!(err.contains("captions"), "{err}");
    }

    #[test]
    fn rejects_bad_split_and_negative_id() {
        let bad_split = r#"[{"id": 0, "synthetic": "a", "captions": ["x"], "split": "dev"}]"#;
        assert!(parse_annotations(bad_split).is_err());
        let neg = r#"[{"id": -1, "synthetic": "a", "captions": ["x"]}]"#;
        assert!(parse_annotations(neg).is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let text = r#"[{"split": "val", "captions": ["a red shirt", "b"], "id": 3, "img_path": "imgs/3.png"},
                       {"id": 0, "synthetic": "k0", "captions": ["c"]}]"#;
        let records = parse_annotations(text).unwrap();
        let canonical = annotations_to_json(&records);
        let again = parse_annotations(&canonical).unwrap();
        assert_eq!(records, again);
        assert_eq!(annotations_to_json(&again), canonical);
        assert_eq!(partition(&records)[&Split::Val].len(), 1);
    }
}
