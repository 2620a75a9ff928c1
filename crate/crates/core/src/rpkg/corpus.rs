use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels: top-left corner, width, height; y grows downward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Whether a point lies strictly inside the box.
    pub fn contains_strict(&self, (px, py): (f64, f64)) -> bool {
        px > self.x && px < self.x + self.w && py > self.y && py < self.y + self.h
    }

    /// Intersection with `[0, width] × [0, height]`; `None` if nothing is left.
    fn clamp(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        (x1 > x0 && y1 > y0).then_some(BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }
}

/// One object after relabeling to the target vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstance {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<ObjectInstance>,
}

impl AnnotatedImage {
    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }
}

/// Relabeled corpus over an ordered target vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub classes: Vec<String>,
    pub images: Vec<AnnotatedImage>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_objects(&self) -> usize {
        self.images.iter().map(|i| i.objects.len()).sum()
    }
}

/// Mapping from corpus labels onto an ordered list of target classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub target_classes: Vec<String>,
    pub source_to_target: BTreeMap<String, String>,
}

impl LabelMap {
    pub fn new(
        target_classes: Vec<String>,
        source_to_target: BTreeMap<String, String>,
    ) -> Result<Self> {
        let map = LabelMap {
            target_classes,
            source_to_target,
        };
        map.validate()?;
        Ok(map)
    }

    /// Every class maps to itself.
    pub fn identity(classes: &[String]) -> Self {
        LabelMap {
            target_classes: classes.to_vec(),
            source_to_target: classes.iter().map(|c| (c.clone(), c.clone())).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.target_classes {
            if !seen.insert(c.as_str()) {
                return Err(Error::Config(format!("duplicate target class {c:?}")));
            }
        }
        for (src, dst) in &self.source_to_target {
            if !seen.contains(dst.as_str()) {
                return Err(Error::Config(format!(
                    "label {src:?} maps to unknown target class {dst:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: LabelMap = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        map.validate()?;
        Ok(map)
    }

    /// Target class index for a source label, if mapped.
    pub fn resolve(&self, label: &str) -> Option<usize> {
        let target = self.source_to_target.get(label)?;
        self.target_classes.iter().position(|c| c == target)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObject {
    label: String,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_id: String,
    width: u64,
    height: u64,
    objects: Vec<RawObject>,
}

/// Parses line-delimited annotation records and relabels them.
///
/// Objects with unmapped labels, and boxes lying entirely outside the image,
/// are dropped; the image itself is always kept. Blank lines are skipped.
pub fn ingest_corpus(reader: impl BufRead, source: &str, label_map: &LabelMap) -> Result<Corpus> {
    label_map.validate()?;
    let mut images = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let bad = |msg: String| Error::Parse {
            path: source.to_owned(),
            line: lineno,
            msg,
        };
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.width == 0 || rec.height == 0 {
            return Err(bad(format!("image {} has zero size", rec.image_id)));
        }
        let (width, height) = (rec.width as f64, rec.height as f64);
        let mut objects = Vec::with_capacity(rec.objects.len());
        for o in rec.objects {
            let [x, y, w, h] = o.bbox;
            if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() {
                return Err(bad(format!("object {:?} has a degenerate bbox", o.label)));
            }
            let Some(class) = label_map.resolve(&o.label) else {
                continue;
            };
            if let Some(bbox) = (BBox { x, y, w, h }).clamp(width, height) {
                objects.push(ObjectInstance { class, bbox });
            }
        }
        images.push(AnnotatedImage {
            image_id: rec.image_id,
            width,
            height,
            objects,
        });
    }
    Ok(Corpus {
        classes: label_map.target_classes.clone(),
        images,
    })
}

pub fn read_corpus(path: &Path, label_map: &LabelMap) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_corpus(
        std::io::BufReader::new(file),
        &path.display().to_string(),
        label_map,
    )
}
