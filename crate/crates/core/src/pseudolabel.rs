//! Iterative pseudo-label optimization.
//!
//! 1. Label the target images with the initial model: every detection
//!    scoring strictly above η becomes a pseudo label.
//! 2. Merge those with the human labels, write the dataset, finetune.
//! 3. Regenerate all pseudo labels from scratch with the new model.
//! 4. Repeat 2–3 until the iteration cap or the plateau rule fires.
//!
//! Each iteration `k` leaves `iter_<k>/dataset.json`,
//! `iter_<k>/pseudo_labels.json` and `iter_<k>/metrics.json` under the
//! work directory, plus a `manifest.json` describing the whole run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{self, CategoryDef, Dataset, GroundTruthBox, ImageRecord};
use crate::detector::{DetectRequest, Detection, DetectorClient, FinetuneConfig, Lineage, ModelHandle};
use crate::error::{Error, Result};
use crate::evaluation::{self, Federation, ThresholdMode};

pub const DEFAULT_ETA: f64 = 0.3;

/// Pseudo-label confidence threshold, uniform with optional per-category
/// overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaConfig {
    pub default: f64,
    #[serde(default)]
    pub per_category: BTreeMap<u64, f64>,
}

impl Default for EtaConfig {
    fn default() -> Self {
        Self::uniform(DEFAULT_ETA)
    }
}

impl EtaConfig {
    pub fn uniform(eta: f64) -> Self {
        Self {
            default: eta,
            per_category: BTreeMap::new(),
        }
    }

    pub fn for_category(&self, category_id: u64) -> f64 {
        self.per_category
            .get(&category_id)
            .copied()
            .unwrap_or(self.default)
    }

    pub fn validate(&self) -> Result<()> {
        for eta in std::iter::once(&self.default).chain(self.per_category.values()) {
            if !(0.0..1.0).contains(eta) {
                return Err(Error::Config(format!("eta {eta} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Splits detections into those scoring strictly above `eta` and the rest.
pub fn split_by_eta(detections: Vec<Detection>, eta: f64) -> (Vec<Detection>, Vec<Detection>) {
    detections.into_iter().partition(|d| d.score > eta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoLabelBatch {
    pub iteration: u32,
    pub labels: Vec<GroundTruthBox>,
    pub generating_model: ModelHandle,
    pub expressions_used: BTreeMap<u64, String>,
    /// Detections at or below η that were dropped.
    pub suppressed: usize,
}

impl PseudoLabelBatch {
    pub fn counts_by_category(&self) -> BTreeMap<u64, usize> {
        let mut counts: BTreeMap<u64, usize> =
            self.expressions_used.keys().map(|c| (*c, 0)).collect();
        for l in &self.labels {
            *counts.entry(l.category_id).or_default() += 1;
        }
        counts
    }
}

/// Where the detector finds an image.
pub fn image_ref(image: &ImageRecord, root: Option<&Path>) -> String {
    match root {
        Some(root) => root.join(&image.file_name).display().to_string(),
        None => image.file_name.clone(),
    }
}

/// One request per verified (image, category) pair, grouped per image.
fn request_batches(
    images: &[ImageRecord],
    expressions: &BTreeMap<u64, String>,
    image_root: Option<&Path>,
) -> Vec<(usize, Vec<DetectRequest>)> {
    images
        .iter()
        .enumerate()
        .filter_map(|(i, image)| {
            let reqs: Vec<DetectRequest> = expressions
                .iter()
                .filter(|(c, _)| image.is_verified(**c))
                .map(|(c, expr)| DetectRequest {
                    image_id: image.id,
                    image_ref: image_ref(image, image_root),
                    expression: expr.clone(),
                    category_id: Some(*c),
                })
                .collect();
            (!reqs.is_empty()).then_some((i, reqs))
        })
        .collect()
}

/// Runs detection over `images` for every verified category and keeps
/// detections scoring above η, clamped to the image bounds.
pub fn generate_pseudo_labels(
    client: &mut DetectorClient,
    model: &ModelHandle,
    images: &[ImageRecord],
    expressions: &BTreeMap<u64, String>,
    eta: &EtaConfig,
    iteration: u32,
    image_root: Option<&Path>,
) -> Result<PseudoLabelBatch> {
    eta.validate()?;
    if expressions.is_empty() {
        return Err(Error::Precondition("no expressions to query".into()));
    }
    let batches = request_batches(images, expressions, image_root);
    let requests: Vec<Vec<DetectRequest>> = batches.iter().map(|(_, r)| r.clone()).collect();
    let results = client.detect_pipelined(model, &requests);

    let total = batches.len();
    let mut labels = Vec::new();
    let mut suppressed = 0;
    for (done, ((image_idx, _), result)) in batches.iter().zip(results).enumerate() {
        let groups = match result {
            Ok(g) => g,
            Err(e) => {
                return Err(Error::PartialBatch {
                    completed: done,
                    total,
                    labels,
                    source: Box::new(e),
                })
            }
        };
        let image = &images[*image_idx];
        for group in groups {
            for d in group {
                let category = d.category_id.expect("requests carry a category");
                if d.score > eta.for_category(category) {
                    let (bbox, _) = d.bbox.clamp_to(image.width as f64, image.height as f64);
                    labels.push(GroundTruthBox::pseudo(image.id, category, bbox, d.score)?);
                } else {
                    suppressed += 1;
                }
            }
        }
    }
    Ok(PseudoLabelBatch {
        iteration,
        labels,
        generating_model: model.clone(),
        expressions_used: expressions.clone(),
        suppressed,
    })
}

/// Regenerates a batch from scratch with a model descended from the one
/// that produced `previous`.
pub fn refine_batch(
    client: &mut DetectorClient,
    previous: &PseudoLabelBatch,
    new_model: &ModelHandle,
    images: &[ImageRecord],
    eta: &EtaConfig,
    image_root: Option<&Path>,
) -> Result<PseudoLabelBatch> {
    if !client
        .lineage()
        .is_descendant(&new_model.id, &previous.generating_model.id)
    {
        return Err(Error::Precondition(format!(
            "model '{}' does not descend from '{}'",
            new_model.id, previous.generating_model.id
        )));
    }
    generate_pseudo_labels(
        client,
        new_model,
        images,
        &previous.expressions_used,
        eta,
        previous.iteration + 1,
        image_root,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub max_iterations: u32,
    pub plateau_epsilon: f64,
    pub plateau_patience: u32,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            max_iterations: 3,
            plateau_epsilon: 1e-3,
            plateau_patience: 2,
        }
    }
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau_patience must be positive".into()));
        }
        if self.plateau_epsilon.is_nan() || self.plateau_epsilon < 0.0 {
            return Err(Error::Config("plateau_epsilon must be non-negative".into()));
        }
        Ok(())
    }

    /// Whether to stop after the last entry of `metrics` (one per iteration,
    /// iteration 0 first). Without metrics only the cap applies.
    pub fn should_stop(&self, metrics: &[Option<f64>]) -> bool {
        let done = metrics.len().saturating_sub(1);
        if done >= self.max_iterations as usize {
            return true;
        }
        let values: Option<Vec<f64>> = metrics.iter().copied().collect();
        let Some(values) = values else { return false };
        let patience = self.plateau_patience as usize;
        if values.len() <= patience {
            return false;
        }
        values
            .windows(2)
            .rev()
            .take(patience)
            .all(|w| w[1] - w[0] < self.plateau_epsilon)
    }
}

/// Held-out shots used to track progress between iterations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationSet {
    pub images: Vec<ImageRecord>,
    pub gts: Vec<GroundTruthBox>,
}

impl ValidationSet {
    pub fn is_empty(&self) -> bool {
        self.gts.is_empty()
    }

    /// mAP@0.5 of `model` on the held-out boxes.
    pub fn evaluate(
        &self,
        client: &mut DetectorClient,
        model: &ModelHandle,
        expressions: &BTreeMap<u64, String>,
        image_root: Option<&Path>,
    ) -> Result<f64> {
        let detections = detect_images(client, model, &self.images, expressions, image_root)?;
        let report = evaluation::mean_ap(
            &detections,
            &self.gts,
            ThresholdMode::Single(0.5),
            Some(&Federation::from_images(&self.images)),
        );
        Ok(report.map)
    }
}

/// All detections for the verified categories of `images`, unfiltered.
pub fn detect_images(
    client: &mut DetectorClient,
    model: &ModelHandle,
    images: &[ImageRecord],
    expressions: &BTreeMap<u64, String>,
    image_root: Option<&Path>,
) -> Result<Vec<Detection>> {
    let batches: Vec<Vec<DetectRequest>> = request_batches(images, expressions, image_root)
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let mut out = Vec::new();
    for result in client.detect_pipelined(model, &batches) {
        out.extend(result?.into_iter().flatten());
    }
    Ok(out)
}

/// Images that carry no human annotation.
pub fn unlabeled_images(images: &[ImageRecord], human: &[GroundTruthBox]) -> Vec<ImageRecord> {
    let labeled: BTreeSet<u64> = human.iter().map(|h| h.image_id).collect();
    images
        .iter()
        .filter(|i| !labeled.contains(&i.id))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub iteration: u32,
    pub model: String,
    pub label_counts: BTreeMap<u64, usize>,
    pub metric: Option<f64>,
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationState {
    pub iteration: u32,
    pub model: ModelHandle,
    pub current_dataset: PathBuf,
    pub history: Vec<HistoryEntry>,
    pub lineage: Lineage,
    pub aborted: Option<String>,
}

/// The loop stopped early; `state` holds everything up to the failure.
#[derive(Debug)]
pub struct LoopAbort {
    pub state: IterationState,
    pub error: Error,
}

impl fmt::Display for LoopAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iteration loop aborted after iteration {}: {}",
            self.state.iteration, self.error
        )
    }
}

impl std::error::Error for LoopAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopConfig {
    pub eta: EtaConfig,
    pub stopping: StoppingRule,
    pub finetune: FinetuneConfig,
    pub dedup_iou: f64,
    pub workdir: PathBuf,
    pub image_root: Option<PathBuf>,
}

impl LoopConfig {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        Self {
            eta: EtaConfig::default(),
            stopping: StoppingRule::default(),
            finetune: FinetuneConfig::default(),
            dedup_iou: dataset::DEFAULT_DEDUP_IOU,
            workdir: workdir.into(),
            image_root: None,
        }
    }
}

/// Inputs that stay fixed across iterations.
pub struct LoopData<'a> {
    pub categories: &'a [CategoryDef],
    /// Every image that goes into the written datasets.
    pub images: &'a [ImageRecord],
    pub human_labels: &'a [GroundTruthBox],
    /// Images that receive pseudo labels.
    pub targets: &'a [ImageRecord],
    pub expressions: &'a BTreeMap<u64, String>,
    pub validation: Option<&'a ValidationSet>,
    /// Recorded verbatim in the manifest (seeds, run configuration, ...).
    pub manifest_extra: Value,
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn pseudo_labels_json(batch: &PseudoLabelBatch, eta: &EtaConfig) -> Value {
    let labels: Vec<Value> = batch
        .labels
        .iter()
        .map(|l| {
            json!({
                "image_id": l.image_id,
                "category_id": l.category_id,
                "bbox": l.bbox.to_xywh(),
                "score": l.score,
            })
        })
        .collect();
    json!({
        "iteration": batch.iteration,
        "generating_model": batch.generating_model,
        "expressions_used": batch.expressions_used,
        "eta": eta,
        "suppressed": batch.suppressed,
        "labels": labels,
    })
}

struct Run<'a, 'c> {
    client: &'c mut DetectorClient,
    data: &'a LoopData<'a>,
    config: &'a LoopConfig,
}

impl Run<'_, '_> {
    fn metric(&mut self, model: &ModelHandle) -> Result<Option<f64>> {
        match self.data.validation {
            Some(v) if !v.is_empty() => {
                let root = self.config.image_root.as_deref();
                v.evaluate(self.client, model, self.data.expressions, root)
                    .map(Some)
            }
            _ => Ok(None),
        }
    }

    /// Writes the artifacts of one iteration and returns its history entry.
    fn persist(&self, batch: &PseudoLabelBatch, metric: Option<f64>) -> Result<HistoryEntry> {
        let dir = self.config.workdir.join(format!("iter_{}", batch.iteration));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let merged = dataset::merge_annotations(
            self.data.human_labels,
            &batch.labels,
            self.config.dedup_iou,
        )?;
        let ds = Dataset {
            categories: self.data.categories.to_vec(),
            images: self.data.images.to_vec(),
            annotations: merged,
        };
        let dataset_path = dir.join("dataset.json");
        dataset::write_coco(&ds, &dataset_path)?;
        write_json(
            &dir.join("pseudo_labels.json"),
            &pseudo_labels_json(batch, &self.config.eta),
        )?;
        let counts = batch.counts_by_category();
        write_json(
            &dir.join("metrics.json"),
            &json!({
                "iteration": batch.iteration,
                "model": batch.generating_model.id,
                "label_counts": counts,
                "pseudo_labels": batch.labels.len(),
                "suppressed": batch.suppressed,
                "metric": metric,
                "metric_name": "mAP@0.5 on held-out shots",
            }),
        )?;
        info!(
            "iteration {}: {} pseudo labels from {}, metric {:?}",
            batch.iteration,
            batch.labels.len(),
            batch.generating_model.id,
            metric
        );
        Ok(HistoryEntry {
            iteration: batch.iteration,
            model: batch.generating_model.id.clone(),
            label_counts: counts,
            metric,
            dataset: dataset_path,
        })
    }

    fn write_manifest(&self, state: &IterationState) -> Result<()> {
        let path = self.config.workdir.join("manifest.json");
        write_json(
            &path,
            &json!({
                "loop": self.config,
                "expressions": self.data.expressions,
                "final_model": state.model,
                "lineage": state.lineage,
                "history": state.history,
                "aborted": state.aborted,
                "run": self.data.manifest_extra,
            }),
        )
    }
}

fn abort(mut state: IterationState, error: Error) -> Box<LoopAbort> {
    state.aborted = Some(error.to_string());
    Box::new(LoopAbort { state, error })
}

/// Runs the full generate → merge → finetune → regenerate loop.
pub fn run_iteration_loop(
    client: &mut DetectorClient,
    initial_model: &ModelHandle,
    data: &LoopData<'_>,
    config: &LoopConfig,
) -> std::result::Result<IterationState, Box<LoopAbort>> {
    let mut state = IterationState {
        iteration: 0,
        model: initial_model.clone(),
        current_dataset: PathBuf::new(),
        history: vec![],
        lineage: client.lineage().clone(),
        aborted: None,
    };
    let checks = config
        .eta
        .validate()
        .and_then(|_| config.stopping.validate())
        .and_then(|_| config.finetune.validate())
        .and_then(|_| {
            fs::create_dir_all(&config.workdir).map_err(|e| Error::io(&config.workdir, e))
        });
    if let Err(e) = checks {
        return Err(abort(state, e));
    }
    let mut run = Run {
        client,
        data,
        config,
    };

    macro_rules! attempt {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => {
                    let st = abort(state, err);
                    if let Err(e) = run.write_manifest(&st.state) {
                        warn!("could not write manifest: {e}");
                    }
                    return Err(st);
                }
            }
        };
    }

    let root = config.image_root.clone();
    let mut batch = attempt!(generate_pseudo_labels(
        run.client,
        initial_model,
        data.targets,
        data.expressions,
        &config.eta,
        0,
        root.as_deref(),
    ));
    let metric = attempt!(run.metric(initial_model));
    let entry = attempt!(run.persist(&batch, metric));
    state.current_dataset = entry.dataset.clone();
    state.history.push(entry);

    while !config
        .stopping
        .should_stop(&state.history.iter().map(|h| h.metric).collect::<Vec<_>>())
    {
        let next = attempt!(run
            .client
            .finetune(&state.model, &state.current_dataset, &config.finetune));
        state.lineage = run.client.lineage().clone();
        batch = attempt!(refine_batch(
            run.client,
            &batch,
            &next,
            data.targets,
            &config.eta,
            root.as_deref(),
        ));
        state.model = next.clone();
        state.iteration = batch.iteration;
        let metric = attempt!(run.metric(&next));
        let entry = attempt!(run.persist(&batch, metric));
        state.current_dataset = entry.dataset.clone();
        state.history.push(entry);
    }
    state.lineage = run.client.lineage().clone();
    attempt!(run.write_manifest(&state));
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(max: u32, eps: f64, patience: u32) -> StoppingRule {
        StoppingRule {
            max_iterations: max,
            plateau_epsilon: eps,
            plateau_patience: patience,
        }
    }

    #[test]
    fn cap_only_without_metrics() {
        let r = rule(3, 0.1, 1);
        assert!(!r.should_stop(&[None]));
        assert!(!r.should_stop(&[None, None, None]));
        assert!(r.should_stop(&[None, None, None, None]));
    }

    #[test]
    fn plateau_needs_consecutive_flat_steps() {
        let r = rule(10, 0.01, 2);
        assert!(!r.should_stop(&[Some(0.5), Some(0.5)]));
        assert!(r.should_stop(&[Some(0.5), Some(0.5), Some(0.505)]));
        assert!(!r.should_stop(&[Some(0.5), Some(0.5), Some(0.6)]));
        assert!(!r.should_stop(&[Some(0.1), Some(0.5), Some(0.5)]));
    }

    #[test]
    fn eta_validation_and_overrides() {
        assert!(EtaConfig::uniform(1.0).validate().is_err());
        assert!(EtaConfig::uniform(-0.1).validate().is_err());
        let mut e = EtaConfig::uniform(0.3);
        e.per_category.insert(4, 0.5);
        assert_eq!(e.for_category(4), 0.5);
        assert_eq!(e.for_category(1), 0.3);
    }

    #[test]
    fn strict_eta_split() {
        let mk = |s: f64| Detection {
            image_id: 1,
            bbox: crate::geometry::BBox::new(0., 0., 1., 1.).unwrap(),
            score: s,
            expression: "x".into(),
            category_id: Some(1),
        };
        let (kept, dropped) = split_by_eta(vec![mk(0.95), mk(0.31), mk(0.30), mk(0.29)], 0.3);
        let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.95, 0.31]);
        assert_eq!(dropped.len(), 2);
        let (kept, _) = split_by_eta(vec![mk(0.0001), mk(1.0)], 0.0);
        assert_eq!(kept.len(), 2);
    }
}
