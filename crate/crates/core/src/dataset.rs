//! COCO annotation ingestion, few-shot set assembly and merged dataset output.
//!
//! Images may carry a `verified_category_ids` extension key; a federated
//! sidecar (`{"<image_id>": [category ids]}`) overrides it. Images with
//! neither are treated as verified for every category.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Default number of shots per category.
pub const DEFAULT_SHOTS: usize = 10;

/// Default IoU at which a pseudo box is considered a duplicate of a human box.
pub const DEFAULT_DEDUP_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDef {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub verified_categories: BTreeSet<u64>,
}

impl ImageRecord {
    pub fn is_verified(&self, category_id: u64) -> bool {
        self.verified_categories.contains(&category_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Human,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub source: LabelSource,
    pub score: Option<f64>,
}

impl GroundTruthBox {
    pub fn human(image_id: u64, category_id: u64, bbox: BBox) -> Self {
        Self {
            image_id,
            category_id,
            bbox,
            source: LabelSource::Human,
            score: None,
        }
    }

    pub fn pseudo(image_id: u64, category_id: u64, bbox: BBox, score: f64) -> Result<Self> {
        if !(score > 0.0 && score <= 1.0) {
            return Err(Error::Precondition(format!(
                "pseudo label score must lie in (0, 1], got {score}"
            )));
        }
        Ok(Self {
            image_id,
            category_id,
            bbox,
            source: LabelSource::Pseudo,
            score: Some(score),
        })
    }

    pub fn is_pseudo(&self) -> bool {
        self.source == LabelSource::Pseudo
    }
}

/// A loaded annotation document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub categories: Vec<CategoryDef>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<GroundTruthBox>,
}

impl Dataset {
    pub fn category(&self, id: u64) -> Option<&CategoryDef> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn human_annotations(&self) -> impl Iterator<Item = &GroundTruthBox> {
        self.annotations.iter().filter(|a| !a.is_pseudo())
    }

    /// Overrides per-image verified categories from a federated sidecar map.
    /// Images missing from the map keep their current set.
    pub fn apply_federation(&mut self, verified: &BTreeMap<u64, BTreeSet<u64>>) -> Result<()> {
        let known: HashSet<u64> = self.categories.iter().map(|c| c.id).collect();
        for (image_id, cats) in verified {
            if let Some(unknown) = cats.iter().find(|c| !known.contains(c)) {
                return Err(Error::Integrity(format!(
                    "federated metadata for image {image_id} names unknown category {unknown}"
                )));
            }
            let image = self
                .images
                .iter_mut()
                .find(|i| i.id == *image_id)
                .ok_or_else(|| {
                    Error::Integrity(format!(
                        "federated metadata references unknown image {image_id}"
                    ))
                })?;
            image.verified_categories = cats.clone();
        }
        Ok(())
    }

    /// Checks id uniqueness and that every annotation resolves.
    pub fn check_integrity(&self) -> Result<()> {
        let mut cat_ids = HashSet::new();
        for c in &self.categories {
            if c.id == 0 {
                return Err(Error::Integrity(format!(
                    "category '{}' has non-positive id",
                    c.name
                )));
            }
            if !cat_ids.insert(c.id) {
                return Err(Error::Integrity(format!("duplicate category id {}", c.id)));
            }
        }
        let mut image_ids = HashSet::new();
        for im in &self.images {
            if !image_ids.insert(im.id) {
                return Err(Error::Integrity(format!("duplicate image id {}", im.id)));
            }
            if im.width == 0 || im.height == 0 {
                return Err(Error::Integrity(format!("image {} has zero size", im.id)));
            }
        }
        for (i, a) in self.annotations.iter().enumerate() {
            if !image_ids.contains(&a.image_id) {
                return Err(Error::Integrity(format!(
                    "annotation {i} references missing image {}",
                    a.image_id
                )));
            }
            if !cat_ids.contains(&a.category_id) {
                return Err(Error::Integrity(format!(
                    "annotation {i} references missing category {}",
                    a.category_id
                )));
            }
            match (a.source, a.score) {
                (LabelSource::Human, None) => {}
                (LabelSource::Pseudo, Some(s)) if s > 0.0 => {}
                _ => {
                    return Err(Error::Integrity(format!(
                        "annotation {i} has inconsistent source/score"
                    )))
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// COCO wire records

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    verified_category_ids: Option<Vec<u64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iscrowd: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<LabelSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    supercategory: Option<String>,
}

fn records<T: for<'de> Deserialize<'de>>(doc: &Value, key: &str, origin: &str) -> Result<Vec<T>> {
    let items = match doc.get(key) {
        Some(Value::Array(items)) => items,
        Some(_) => return Err(Error::parse(origin, format!("'{key}' is not an array"))),
        None => return Err(Error::parse(origin, format!("missing '{key}' array"))),
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            T::deserialize(item).map_err(|e| {
                let id = item.get("id").map(|v| format!(" (id {v})")).unwrap_or_default();
                Error::parse(format!("{origin}: {key}[{i}]{id}"), e)
            })
        })
        .collect()
}

/// Parses a COCO document held in memory. `origin` names it in errors.
pub fn parse_coco(text: &str, origin: &str) -> Result<Dataset> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
    let raw_categories: Vec<CocoCategory> = records(&doc, "categories", origin)?;
    let raw_images: Vec<CocoImage> = records(&doc, "images", origin)?;
    let raw_annotations: Vec<CocoAnnotation> = records(&doc, "annotations", origin)?;

    let categories: Vec<CategoryDef> = raw_categories
        .into_iter()
        .map(|c| CategoryDef {
            id: c.id,
            name: c.name,
        })
        .collect();
    let all_categories: BTreeSet<u64> = categories.iter().map(|c| c.id).collect();

    let images: Vec<ImageRecord> = raw_images
        .into_iter()
        .map(|im| ImageRecord {
            id: im.id,
            file_name: im.file_name,
            width: im.width,
            height: im.height,
            verified_categories: im
                .verified_category_ids
                .map(|ids| ids.into_iter().collect())
                .unwrap_or_else(|| all_categories.clone()),
        })
        .collect();
    let sizes: HashMap<u64, (u32, u32)> =
        images.iter().map(|i| (i.id, (i.width, i.height))).collect();

    let mut annotations = Vec::with_capacity(raw_annotations.len());
    for (i, a) in raw_annotations.into_iter().enumerate() {
        let context = || format!("{origin}: annotations[{i}]");
        let [x, y, w, h] = a.bbox;
        let mut bbox = BBox::from_xywh(x, y, w, h).map_err(|e| Error::parse(context(), e))?;
        let Some(&(width, height)) = sizes.get(&a.image_id) else {
            return Err(Error::Integrity(format!(
                "{}: references missing image {}",
                context(),
                a.image_id
            )));
        };
        let (clamped, changed) = bbox.clamp_to(width as f64, height as f64);
        if changed {
            warn!(
                "{}: box {:?} exceeds image {} bounds {}x{}, clamped",
                context(),
                a.bbox,
                a.image_id,
                width,
                height
            );
            bbox = clamped;
        }
        let source = a.source.unwrap_or(LabelSource::Human);
        let score = match (source, a.score) {
            (LabelSource::Human, None) => None,
            (LabelSource::Pseudo, Some(s)) if s > 0.0 && s <= 1.0 => Some(s),
            (LabelSource::Human, Some(_)) => {
                return Err(Error::parse(context(), "human annotation carries a score"))
            }
            (LabelSource::Pseudo, _) => {
                return Err(Error::parse(
                    context(),
                    "pseudo annotation needs a score in (0, 1]",
                ))
            }
        };
        annotations.push(GroundTruthBox {
            image_id: a.image_id,
            category_id: a.category_id,
            bbox,
            source,
            score,
        });
    }

    let dataset = Dataset {
        categories,
        images,
        annotations,
    };
    dataset.check_integrity()?;
    Ok(dataset)
}

pub fn load_coco(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco(&text, &path.display().to_string())
}

/// Loads a COCO file and applies an optional federated sidecar.
pub fn load_coco_federated(path: impl AsRef<Path>, sidecar: Option<&Path>) -> Result<Dataset> {
    let mut dataset = load_coco(path)?;
    if let Some(sidecar) = sidecar {
        let verified = load_federated_sidecar(sidecar)?;
        dataset.apply_federation(&verified)?;
    }
    Ok(dataset)
}

/// Reads `{"<image_id>": [category_id, ...]}`.
pub fn load_federated_sidecar(path: &Path) -> Result<BTreeMap<u64, BTreeSet<u64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, Vec<u64>> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    raw.into_iter()
        .map(|(k, v)| {
            let id = k.parse::<u64>().map_err(|_| {
                Error::parse(path.display().to_string(), format!("bad image id key '{k}'"))
            })?;
            Ok((id, v.into_iter().collect()))
        })
        .collect()
}

/// Serializes a dataset as a COCO document. Integrity is checked first.
pub fn to_coco_json(dataset: &Dataset) -> Result<Value> {
    dataset.check_integrity()?;
    let images: Vec<CocoImage> = dataset
        .images
        .iter()
        .map(|im| CocoImage {
            id: im.id,
            file_name: im.file_name.clone(),
            width: im.width,
            height: im.height,
            verified_category_ids: Some(im.verified_categories.iter().copied().collect()),
        })
        .collect();
    let annotations: Vec<CocoAnnotation> = dataset
        .annotations
        .iter()
        .enumerate()
        .map(|(i, a)| CocoAnnotation {
            id: Some(i as u64 + 1),
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: a.bbox.to_xywh(),
            area: Some(a.bbox.area()),
            iscrowd: Some(0),
            source: a.is_pseudo().then_some(LabelSource::Pseudo),
            score: a.score,
        })
        .collect();
    let categories: Vec<CocoCategory> = dataset
        .categories
        .iter()
        .map(|c| CocoCategory {
            id: c.id,
            name: c.name.clone(),
            supercategory: None,
        })
        .collect();
    Ok(serde_json::json!({
        "images": images,
        "annotations": annotations,
        "categories": categories,
    }))
}

pub fn write_coco(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let doc = to_coco_json(dataset)?;
    let text = serde_json::to_string_pretty(&doc).expect("COCO document serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Few-shot sets

#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub image: ImageRecord,
    pub gt: GroundTruthBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotStatus {
    Full,
    /// Fewer annotations than requested were available.
    Short,
    /// The category has no annotations at all.
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSet {
    pub category_id: u64,
    pub shots: Vec<Shot>,
    pub requested: usize,
    pub status: ShotStatus,
    /// Shot images holding more than one instance of the category.
    pub multi_instance_images: Vec<u64>,
}

impl FewShotSet {
    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    /// Splits off the last `count` shots, e.g. as a held-out validation slice.
    pub fn split_tail(&self, count: usize) -> (FewShotSet, Vec<Shot>) {
        let keep = self.shots.len().saturating_sub(count);
        let mut head = self.clone();
        let tail = head.shots.split_off(keep);
        (head, tail)
    }
}

fn category_rng(seed: u64, category_id: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&category_id.to_le_bytes());
    bytes[16..24].copy_from_slice(b"fewshot!");
    ChaCha8Rng::from_seed(bytes)
}

/// Draws up to `k` human annotations per category with a seeded sampler.
/// Every listed category gets an entry, empty ones included.
pub fn build_few_shot_sets(
    categories: &[CategoryDef],
    images: &[ImageRecord],
    annotations: &[GroundTruthBox],
    k: usize,
    seed: u64,
) -> Result<BTreeMap<u64, FewShotSet>> {
    if k == 0 {
        return Err(Error::Precondition("shot count must be positive".into()));
    }
    let by_id: HashMap<u64, &ImageRecord> = images.iter().map(|i| (i.id, i)).collect();
    let mut sets = BTreeMap::new();
    for cat in categories {
        let pool: Vec<&GroundTruthBox> = annotations
            .iter()
            .filter(|a| a.category_id == cat.id && !a.is_pseudo())
            .collect();
        let mut picked: Vec<usize> = if pool.len() <= k {
            (0..pool.len()).collect()
        } else {
            let mut rng = category_rng(seed, cat.id);
            index::sample(&mut rng, pool.len(), k).into_vec()
        };
        picked.sort_unstable();

        let mut shots = Vec::with_capacity(picked.len());
        for i in picked {
            let gt = pool[i];
            let image = by_id.get(&gt.image_id).ok_or_else(|| {
                Error::Integrity(format!(
                    "annotation for category {} references missing image {}",
                    cat.id, gt.image_id
                ))
            })?;
            shots.push(Shot {
                image: (*image).clone(),
                gt: gt.clone(),
            });
        }

        let mut per_image: HashMap<u64, usize> = HashMap::new();
        for a in &pool {
            *per_image.entry(a.image_id).or_default() += 1;
        }
        let mut multi: Vec<u64> = shots
            .iter()
            .map(|s| s.image.id)
            .filter(|id| per_image.get(id).copied().unwrap_or(0) > 1)
            .collect();
        multi.sort_unstable();
        multi.dedup();
        if !multi.is_empty() {
            warn!(
                "category {}: shot images {:?} contain several instances",
                cat.id, multi
            );
        }

        let status = match shots.len() {
            0 => ShotStatus::Empty,
            n if n < k => ShotStatus::Short,
            _ => ShotStatus::Full,
        };
        if status != ShotStatus::Full {
            warn!(
                "category {} has {} of {} requested shots",
                cat.id,
                shots.len(),
                k
            );
        }
        sets.insert(
            cat.id,
            FewShotSet {
                category_id: cat.id,
                shots,
                requested: k,
                status,
                multi_instance_images: multi,
            },
        );
    }
    Ok(sets)
}

/// Combines human labels with pseudo labels, dropping any pseudo box that
/// overlaps a same-category human box on the same image with IoU ≥ `dedup_iou`.
pub fn merge_annotations(
    human: &[GroundTruthBox],
    pseudo: &[GroundTruthBox],
    dedup_iou: f64,
) -> Result<Vec<GroundTruthBox>> {
    if let Some(bad) = pseudo.iter().find(|p| !p.is_pseudo()) {
        return Err(Error::Precondition(format!(
            "merge received a human box on image {} in the pseudo list",
            bad.image_id
        )));
    }
    let mut index: HashMap<(u64, u64), Vec<&BBox>> = HashMap::new();
    for h in human {
        index
            .entry((h.image_id, h.category_id))
            .or_default()
            .push(&h.bbox);
    }
    let mut merged = human.to_vec();
    merged.extend(
        pseudo
            .iter()
            .filter(|p| {
                index
                    .get(&(p.image_id, p.category_id))
                    .is_none_or(|boxes| boxes.iter().all(|h| iou(h, &p.bbox) < dedup_iou))
            })
            .cloned(),
    );
    Ok(merged)
}
