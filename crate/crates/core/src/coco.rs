//! COCO-style detection datasets: typed records, JSON ingestion and
//! emission, validation, and K-shot support sampling.
//!
//! Two non-standard annotation keys record where an annotation came from:
//! `"source"` (`"pseudo"` or `"external"`; absent means ground truth) and
//! `"score"` (present exactly on pseudo annotations). Any key the model does not know
//! about is kept in the record's `extra` map and written back unchanged.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::BBox;

/// Unknown JSON keys, re-emitted after the modeled fields in key order.
pub type Extra = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(flatten)]
    pub extra: Extra,
}

impl ImageRecord {
    pub fn new(id: u64, file_name: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            id,
            file_name: file_name.into(),
            width,
            height,
            extra: Extra::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
    #[serde(flatten)]
    pub extra: Extra,
}

impl CategoryRecord {
    pub fn new(id: u64, name: impl Into<String>) -> Self {
        Self {
            id,
            name: name.into(),
            extra: Extra::new(),
        }
    }
}

/// Where an annotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    GroundTruth,
    Pseudo,
    External,
}

impl Source {
    pub fn is_ground_truth(&self) -> bool {
        *self == Source::GroundTruth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub area: f64,
    #[serde(serialize_with = "iscrowd_as_int")]
    pub iscrowd: bool,
    #[serde(skip_serializing_if = "Source::is_ground_truth")]
    pub source: Source,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl AnnotationRecord {
    pub fn ground_truth(id: u64, image_id: u64, category_id: u64, bbox: BBox) -> Self {
        Self {
            id,
            image_id,
            category_id,
            area: bbox.area(),
            bbox,
            iscrowd: false,
            source: Source::GroundTruth,
            score: None,
            extra: Extra::new(),
        }
    }

    pub fn pseudo(id: u64, image_id: u64, category_id: u64, bbox: BBox, score: f64) -> Self {
        Self {
            source: Source::Pseudo,
            score: Some(score),
            ..Self::ground_truth(id, image_id, category_id, bbox)
        }
    }
}

fn iscrowd_as_int<S: serde::Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(*v as u8)
}

/// A COCO dataset. Top-level keys other than `images`, `categories` and
/// `annotations` (`info`, `licenses`, ...) are carried opaquely in `extra`.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub categories: Vec<CategoryRecord>,
    pub annotations: Vec<AnnotationRecord>,
    #[serde(flatten)]
    pub extra: Extra,
}

// Ingestion-side mirrors of the records: optional fields and lenient
// `iscrowd` are normalized before validation.

#[derive(Deserialize)]
struct RawDataset {
    images: Vec<RawImage>,
    categories: Vec<RawCategory>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    width: u32,
    height: u32,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
    #[serde(flatten)]
    extra: Extra,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: Option<f64>,
    #[serde(default, deserialize_with = "lenient_iscrowd")]
    iscrowd: bool,
    #[serde(default)]
    source: Source,
    #[serde(default)]
    score: Option<f64>,
    #[serde(flatten)]
    extra: Extra,
}

fn lenient_iscrowd<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Bool(bool),
        Int(u8),
    }
    match Flag::deserialize(d)? {
        Flag::Bool(b) => Ok(b),
        Flag::Int(0) => Ok(false),
        Flag::Int(1) => Ok(true),
        Flag::Int(n) => Err(serde::de::Error::custom(format!("iscrowd must be 0 or 1, got {n}"))),
    }
}

impl From<RawDataset> for Dataset {
    fn from(raw: RawDataset) -> Self {
        Dataset {
            images: raw
                .images
                .into_iter()
                .map(|i| ImageRecord {
                    id: i.id,
                    file_name: i.file_name,
                    width: i.width,
                    height: i.height,
                    extra: i.extra,
                })
                .collect(),
            categories: raw
                .categories
                .into_iter()
                .map(|c| CategoryRecord {
                    id: c.id,
                    name: c.name,
                    extra: c.extra,
                })
                .collect(),
            annotations: raw
                .annotations
                .into_iter()
                .map(|a| {
                    let bbox = BBox::from(a.bbox);
                    AnnotationRecord {
                        id: a.id,
                        image_id: a.image_id,
                        category_id: a.category_id,
                        area: a.area.unwrap_or_else(|| bbox.area()),
                        bbox,
                        iscrowd: a.iscrowd,
                        source: a.source,
                        score: a.score,
                        extra: a.extra,
                    }
                })
                .collect(),
            extra: raw.extra,
        }
    }
}

/// Parse and validate a COCO JSON document.
pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let dataset = parse_dataset_unchecked(bytes)?;
    dataset.check()?;
    Ok(dataset)
}

/// Structural parse only; ids, references and boxes are left for
/// [`validate`] so that every problem can be listed at once.
pub fn parse_dataset_unchecked(bytes: &[u8]) -> Result<Dataset> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| Error::MalformedJson(e.to_string()))?;
    let raw = RawDataset::deserialize(value).map_err(|e| Error::SchemaViolation(e.to_string()))?;
    Ok(Dataset::from(raw))
}

/// Compact, byte-deterministic COCO JSON.
///
/// Key order: top level `images`, `categories`, `annotations`, then extra
/// keys sorted; images `id, file_name, width, height`; categories `id,
/// name`; annotations `id, image_id, category_id, bbox, area, iscrowd`,
/// then `source` and `score` when not ground truth; extras last, sorted.
pub fn serialize_dataset(d: &Dataset) -> Vec<u8> {
    serde_json::to_vec(d).expect("dataset serialization is infallible")
}

/// Which record a [`Violation`] is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordRef {
    Image(u64),
    Category(u64),
    Annotation(u64),
}

impl fmt::Display for RecordRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordRef::Image(id) => write!(f, "image {id}"),
            RecordRef::Category(id) => write!(f, "category {id}"),
            RecordRef::Annotation(id) => write!(f, "annotation {id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    DuplicateId,
    DanglingImage(u64),
    DanglingCategory(u64),
    ZeroImageSize,
    EmptyCategoryName,
    InvalidBox,
    NonPositiveArea,
    MissingScore,
    UnexpectedScore,
    ScoreOutOfRange(f64),
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::DuplicateId => f.write_str("id is not unique"),
            Rule::DanglingImage(id) => write!(f, "image_id {id} does not exist"),
            Rule::DanglingCategory(id) => write!(f, "category_id {id} does not exist"),
            Rule::ZeroImageSize => f.write_str("width and height must be positive"),
            Rule::EmptyCategoryName => f.write_str("name must be non-empty"),
            Rule::InvalidBox => f.write_str("bbox needs finite coordinates and w, h > 0"),
            Rule::NonPositiveArea => f.write_str("area must be finite and positive"),
            Rule::MissingScore => f.write_str("pseudo annotation without score"),
            Rule::UnexpectedScore => f.write_str("score on a non-pseudo annotation"),
            Rule::ScoreOutOfRange(s) => write!(f, "score {s} outside [0, 1]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub record: RecordRef,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.record, self.rule)
    }
}

/// Every broken invariant in `d`, in record order. Empty iff valid.
pub fn validate(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |record, rule| out.push(Violation { record, rule });

    let mut image_ids = HashSet::with_capacity(d.images.len());
    for img in &d.images {
        if !image_ids.insert(img.id) {
            push(RecordRef::Image(img.id), Rule::DuplicateId);
        }
        if img.width == 0 || img.height == 0 {
            push(RecordRef::Image(img.id), Rule::ZeroImageSize);
        }
    }

    let mut category_ids = HashSet::with_capacity(d.categories.len());
    for cat in &d.categories {
        if !category_ids.insert(cat.id) {
            push(RecordRef::Category(cat.id), Rule::DuplicateId);
        }
        if cat.name.trim().is_empty() {
            push(RecordRef::Category(cat.id), Rule::EmptyCategoryName);
        }
    }

    let mut ann_ids = HashSet::with_capacity(d.annotations.len());
    for ann in &d.annotations {
        let r = RecordRef::Annotation(ann.id);
        if !ann_ids.insert(ann.id) {
            push(r, Rule::DuplicateId);
        }
        if !image_ids.contains(&ann.image_id) {
            push(r, Rule::DanglingImage(ann.image_id));
        }
        if !category_ids.contains(&ann.category_id) {
            push(r, Rule::DanglingCategory(ann.category_id));
        }
        if !ann.bbox.is_valid() {
            push(r, Rule::InvalidBox);
        }
        if !(ann.area.is_finite() && ann.area > 0.0) {
            push(r, Rule::NonPositiveArea);
        }
        match (ann.source, ann.score) {
            (Source::Pseudo, None) => push(r, Rule::MissingScore),
            (Source::Pseudo, Some(s)) if !(0.0..=1.0).contains(&s) => {
                push(r, Rule::ScoreOutOfRange(s))
            }
            (Source::GroundTruth | Source::External, Some(_)) => push(r, Rule::UnexpectedScore),
            _ => {}
        }
    }
    out
}

fn join(vs: &[&Violation]) -> String {
    vs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Dataset {
    pub fn new(
        images: Vec<ImageRecord>,
        categories: Vec<CategoryRecord>,
        annotations: Vec<AnnotationRecord>,
    ) -> Self {
        Self {
            images,
            categories,
            annotations,
            extra: Extra::new(),
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }

    /// Validation as a `Result`, classified the way [`parse_dataset`]
    /// reports it: duplicates first, then dangling references, then the rest.
    pub fn check(&self) -> Result<()> {
        let violations = validate(self);
        if violations.is_empty() {
            return Ok(());
        }
        let dups: Vec<_> = violations
            .iter()
            .filter(|v| v.rule == Rule::DuplicateId)
            .collect();
        if !dups.is_empty() {
            return Err(Error::DuplicateId(join(&dups)));
        }
        let dangling: Vec<_> = violations
            .iter()
            .filter(|v| matches!(v.rule, Rule::DanglingImage(_) | Rule::DanglingCategory(_)))
            .collect();
        if !dangling.is_empty() {
            return Err(Error::ReferenceError(join(&dangling)));
        }
        Err(Error::SchemaViolation(join(&violations.iter().collect::<Vec<_>>())))
    }

    pub fn to_json(&self) -> Vec<u8> {
        serialize_dataset(self)
    }

    /// Parse and check a dataset file.
    pub fn read(path: &Path) -> Result<Self> {
        parse_dataset(&crate::io::read(path)?)
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category(&self, id: u64) -> Option<&CategoryRecord> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn image_ids(&self) -> Vec<u64> {
        self.images.iter().map(|i| i.id).collect()
    }

    pub fn max_annotation_id(&self) -> Option<u64> {
        self.annotations.iter().map(|a| a.id).max()
    }

    /// Same images and categories, no annotations.
    pub fn skeleton(&self) -> Dataset {
        Dataset {
            images: self.images.clone(),
            categories: self.categories.clone(),
            annotations: Vec::new(),
            extra: self.extra.clone(),
        }
    }

    /// Annotation indices grouped by `(image_id, category_id)`.
    pub fn index_by_image_category(&self) -> HashMap<(u64, u64), Vec<usize>> {
        let mut map: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
        for (i, a) in self.annotations.iter().enumerate() {
            map.entry((a.image_id, a.category_id)).or_default().push(i);
        }
        map
    }
}

/// Keep exactly `k` annotations per category, drawn uniformly without
/// replacement with a generator seeded by `seed`. All images are kept,
/// including those left without annotations.
pub fn sample_support(d: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    let mut by_category: BTreeMap<u64, Vec<usize>> =
        d.categories.iter().map(|c| (c.id, Vec::new())).collect();
    for (i, a) in d.annotations.iter().enumerate() {
        by_category.entry(a.category_id).or_default().push(i);
    }
    if let Some((&category, members)) = by_category.iter().find(|(_, m)| m.len() < k) {
        return Err(Error::InsufficientInstances {
            category,
            available: members.len(),
            k,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; d.annotations.len()];
    for members in by_category.values() {
        for j in index::sample(&mut rng, members.len(), k) {
            keep[members[j]] = true;
        }
    }

    let mut out = d.skeleton();
    out.annotations = d
        .annotations
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(a, _)| a.clone())
        .collect();
    Ok(out)
}
