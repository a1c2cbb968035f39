//! The end-to-end workflow behind the command-line tool.
//!
//! Commands only talk to each other through files in the work directory:
//! `align` writes `selection.json`, which `gen-pseudo` and `iterate` read.
//! Every command leaves a `<command>_manifest.json` next to its outputs.

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{self, Dataset, GroundTruthBox, ImageRecord};
use crate::detector::wire::PROTOCOL_VERSION;
use crate::detector::{DetectRequest, Detection, DetectorClient};
use crate::error::{Error, Result};
use crate::evaluation::{self, ComparisonEntry, EvalReport, Federation, Report, ThresholdMode};
use crate::expressions::{self, SelectionResult};
use crate::pseudolabel::{self, IterationState, LoopConfig, LoopData, PseudoLabelBatch, ValidationSet};

pub use config::{connect, DetectorSpec, Overrides, RunConfig};

pub const SELECTION_FILE: &str = "selection.json";
pub const ITERATIONS_DIR: &str = "iterations";
pub const PSEUDO_DIR: &str = "pseudo";

/// A resolved configuration bound to an absolute work directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub workdir: PathBuf,
    pub config: RunConfig,
}

impl Context {
    pub fn new(workdir: impl AsRef<Path>, config: RunConfig) -> Result<Self> {
        let workdir = workdir.as_ref();
        fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let workdir = workdir.canonicalize().map_err(|e| Error::io(workdir, e))?;
        config.validate()?;
        Ok(Self { workdir, config })
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        config::in_workdir(&self.workdir, p)
    }

    fn image_root(&self) -> Option<PathBuf> {
        self.config.images_root.as_deref().map(|p| self.path(p))
    }

    pub fn load_annotations(&self) -> Result<Dataset> {
        let path = self.path(self.config.require(&self.config.annotations, "annotations")?);
        let sidecar = self.config.federated.as_deref().map(|p| self.path(p));
        dataset::load_coco_federated(&path, sidecar.as_deref())
    }

    pub fn connect(&self) -> Result<DetectorClient> {
        config::connect(&self.config, &self.workdir)
    }

    fn manifest(&self, command: &str, extra: Value) -> Result<()> {
        let value = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "protocol": PROTOCOL_VERSION,
            "seed": self.config.seed,
            "config": self.config,
            "details": extra,
        });
        write_json(&self.workdir.join(format!("{command}_manifest.json")), &value)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_report(base: &Path, report: &Report) -> Result<()> {
    write_json(&base.with_extension("json"), &report.json)?;
    let md = base.with_extension("md");
    fs::write(&md, &report.text).map_err(|e| Error::io(&md, e))
}

// ---------------------------------------------------------------------------
// align

/// Contents of `selection.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub seed: u64,
    /// Model the candidates were scored with.
    pub model: String,
    pub iou_threshold: f64,
    pub results: Vec<SelectionResult>,
    /// Categories that could not be scored (no shots).
    pub skipped: Vec<u64>,
    /// Set when the run stopped early.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Selection {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn expressions(&self) -> BTreeMap<u64, String> {
        self.results
            .iter()
            .map(|r| (r.category_id, r.best.text.clone()))
            .collect()
    }
}

pub struct AlignOutput {
    pub selection: Selection,
    pub report: Report,
}

/// Scores every candidate expression of every category on its few-shot set
/// and keeps the best one.
pub fn align(ctx: &Context, client: &mut DetectorClient) -> Result<AlignOutput> {
    let cfg = &ctx.config;
    let data = ctx.load_annotations()?;
    let sets = dataset::build_few_shot_sets(
        &data.categories,
        &data.images,
        &data.annotations,
        cfg.shots_k,
        cfg.seed,
    )?;
    let terms = match &cfg.terms {
        Some(p) => expressions::load_term_file(&ctx.path(p))?,
        None => {
            warn!("no term file configured, every category uses its class name");
            BTreeMap::new()
        }
    };
    let model = cfg.initial_handle();
    let root = ctx.image_root();
    let mut selection = Selection {
        seed: cfg.seed,
        model: model.id.clone(),
        iou_threshold: cfg.iou_threshold,
        results: vec![],
        skipped: vec![],
        error: None,
    };

    let mut failure = None;
    for cat in &data.categories {
        let set = &sets[&cat.id];
        if set.is_empty() {
            warn!("category {} ({}) has no annotated shots, skipped", cat.id, cat.name);
            selection.skipped.push(cat.id);
            continue;
        }
        let term_set = terms.get(&cat.id);
        if term_set.is_none() {
            warn!("no terms for category {} ({}), falling back to the class name", cat.id, cat.name);
        }
        let outcome = expressions::generate_candidates(
            cat.id,
            &cat.name,
            term_set,
            cfg.n_candidates,
            cfg.seed,
        )
        .and_then(|candidates| {
            let batches: Vec<Vec<DetectRequest>> = candidates
                .iter()
                .map(|c| {
                    set.shots
                        .iter()
                        .map(|s| DetectRequest {
                            image_id: s.image.id,
                            image_ref: pseudolabel::image_ref(&s.image, root.as_deref()),
                            expression: c.text.clone(),
                            category_id: Some(cat.id),
                        })
                        .collect()
                })
                .collect();
            let replies = client.detect_pipelined(&model, &batches);
            let mut scores = Vec::with_capacity(candidates.len());
            for (candidate, reply) in candidates.iter().zip(replies) {
                let per_shot: BTreeMap<usize, Vec<Detection>> =
                    reply?.into_iter().enumerate().collect();
                scores.push(expressions::score_candidate(
                    candidate,
                    set,
                    &per_shot,
                    cfg.iou_threshold,
                ));
            }
            expressions::select_best(scores)
        });
        match outcome {
            Ok(result) => {
                info!(
                    "category {} ({}): '{}' {:.2} -> {:.2}",
                    cat.id, cat.name, result.best.text, result.acc_before, result.acc_after
                );
                selection.results.push(result);
            }
            Err(e) => {
                failure = Some(Error::InCategory {
                    category_id: cat.id,
                    source: Box::new(e),
                });
                break;
            }
        }
    }

    selection.error = failure.as_ref().map(ToString::to_string);
    write_json(&ctx.workdir.join(SELECTION_FILE), &selection)?;
    let report = evaluation::render_alignment_report(&selection.results);
    write_report(&ctx.workdir.join("alignment_report"), &report)?;
    let multi: BTreeMap<u64, Vec<u64>> = sets
        .values()
        .filter(|s| !s.multi_instance_images.is_empty())
        .map(|s| (s.category_id, s.multi_instance_images.clone()))
        .collect();
    let short: Vec<u64> = sets
        .values()
        .filter(|s| s.status != dataset::ShotStatus::Full)
        .map(|s| s.category_id)
        .collect();
    ctx.manifest(
        "align",
        json!({
            "selection_model": "initial",
            "short_categories": short,
            "multi_instance_shot_images": multi,
            "outputs": [SELECTION_FILE, "alignment_report.md", "alignment_report.json"],
        }),
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(AlignOutput { selection, report }),
    }
}

pub fn cmd_align(ctx: &Context) -> Result<AlignOutput> {
    let mut client = ctx.connect()?;
    align(ctx, &mut client)
}

// ---------------------------------------------------------------------------
// expressions for the later stages

#[derive(Debug, Clone, PartialEq)]
pub enum ExpressionSource {
    Selection(PathBuf),
    ClassNames,
}

pub fn resolve_expressions(
    ctx: &Context,
    data: &Dataset,
    source: &ExpressionSource,
) -> Result<BTreeMap<u64, String>> {
    let mut out: BTreeMap<u64, String> = data
        .categories
        .iter()
        .map(|c| (c.id, c.name.clone()))
        .collect();
    if let ExpressionSource::Selection(path) = source {
        let selection = Selection::load(&ctx.path(path))?;
        let chosen = selection.expressions();
        for (id, name) in out.iter_mut() {
            match chosen.get(id) {
                Some(expr) => *name = expr.clone(),
                None => warn!("selection has no expression for category {id}, using '{name}'"),
            }
        }
        if let Some(extra) = chosen.keys().find(|k| !out.contains_key(k)) {
            return Err(Error::Integrity(format!(
                "selection names category {extra} absent from the annotations"
            )));
        }
    }
    Ok(out)
}

/// Splits the annotated data into training and held-out parts. Held-out
/// images are whole images picked from the tail of each few-shot set.
fn holdout(ctx: &Context, data: &Dataset) -> Result<(Vec<ImageRecord>, Vec<GroundTruthBox>, ValidationSet)> {
    let human: Vec<GroundTruthBox> = data.human_annotations().cloned().collect();
    let frac = ctx.config.holdout_fraction;
    if frac <= 0.0 {
        return Ok((data.images.clone(), human, ValidationSet::default()));
    }
    let sets = dataset::build_few_shot_sets(
        &data.categories,
        &data.images,
        &human,
        ctx.config.shots_k,
        ctx.config.seed,
    )?;
    let mut held: BTreeSet<u64> = BTreeSet::new();
    for set in sets.values() {
        if set.len() < 2 {
            continue;
        }
        let n = ((set.len() as f64 * frac).floor() as usize).max(1);
        let (_, tail) = set.split_tail(n);
        held.extend(tail.iter().map(|s| s.image.id));
    }
    let (val_images, train_images): (Vec<ImageRecord>, Vec<ImageRecord>) =
        data.images.iter().cloned().partition(|i| held.contains(&i.id));
    let (val_gts, train_gts): (Vec<GroundTruthBox>, Vec<GroundTruthBox>) =
        human.into_iter().partition(|g| held.contains(&g.image_id));
    info!("holding out {} images with {} boxes", val_images.len(), val_gts.len());
    Ok((
        train_images,
        train_gts,
        ValidationSet {
            images: val_images,
            gts: val_gts,
        },
    ))
}

fn targets(ctx: &Context, images: &[ImageRecord], human: &[GroundTruthBox]) -> Vec<ImageRecord> {
    if ctx.config.include_labeled_images {
        images.to_vec()
    } else {
        pseudolabel::unlabeled_images(images, human)
    }
}

// ---------------------------------------------------------------------------
// gen-pseudo

pub struct GenPseudoOutput {
    pub batch: PseudoLabelBatch,
    pub detections: Vec<Detection>,
}

/// One round of pseudo labelling with the initial model, no training.
pub fn gen_pseudo(
    ctx: &Context,
    client: &mut DetectorClient,
    source: &ExpressionSource,
) -> Result<GenPseudoOutput> {
    let data = ctx.load_annotations()?;
    let expressions = resolve_expressions(ctx, &data, source)?;
    let human: Vec<GroundTruthBox> = data.human_annotations().cloned().collect();
    let targets = targets(ctx, &data.images, &human);
    let model = ctx.config.initial_handle();
    let root = ctx.image_root();
    let detections =
        pseudolabel::detect_images(client, &model, &targets, &expressions, root.as_deref())?;
    let batch = pseudolabel::generate_pseudo_labels(
        client,
        &model,
        &targets,
        &expressions,
        &ctx.config.eta_config(),
        0,
        root.as_deref(),
    )?;
    let dir = ctx.workdir.join(PSEUDO_DIR);
    let merged = dataset::merge_annotations(&human, &batch.labels, ctx.config.dedup_iou)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    dataset::write_coco(
        &Dataset {
            categories: data.categories.clone(),
            images: data.images.clone(),
            annotations: merged,
        },
        dir.join("dataset.json"),
    )?;
    write_json(&dir.join("pseudo_labels.json"), &batch)?;
    write_json(
        &dir.join("detections.json"),
        &evaluation::results_json(&detections),
    )?;
    ctx.manifest(
        "gen-pseudo",
        json!({
            "expressions": expressions,
            "targets": targets.len(),
            "pseudo_labels": batch.labels.len(),
            "suppressed": batch.suppressed,
            "outputs": ["pseudo/dataset.json", "pseudo/pseudo_labels.json", "pseudo/detections.json"],
        }),
    )?;
    Ok(GenPseudoOutput { batch, detections })
}

pub fn cmd_gen_pseudo(ctx: &Context, source: &ExpressionSource) -> Result<GenPseudoOutput> {
    let mut client = ctx.connect()?;
    gen_pseudo(ctx, &mut client, source)
}

// ---------------------------------------------------------------------------
// iterate

pub fn iterate(
    ctx: &Context,
    client: &mut DetectorClient,
    source: &ExpressionSource,
) -> Result<IterationState> {
    let data = ctx.load_annotations()?;
    let expressions = resolve_expressions(ctx, &data, source)?;
    let (images, human, validation) = holdout(ctx, &data)?;
    let targets = targets(ctx, &images, &human);
    let loop_config = LoopConfig {
        eta: ctx.config.eta_config(),
        stopping: ctx.config.stopping,
        finetune: ctx.config.finetune.clone(),
        dedup_iou: ctx.config.dedup_iou,
        workdir: ctx.workdir.join(ITERATIONS_DIR),
        image_root: ctx.image_root(),
    };
    let expression_source = match source {
        ExpressionSource::Selection(p) => json!({"selection": ctx.path(p)}),
        ExpressionSource::ClassNames => json!("classnames"),
    };
    let loop_data = LoopData {
        categories: &data.categories,
        images: &images,
        human_labels: &human,
        targets: &targets,
        expressions: &expressions,
        validation: (!validation.is_empty()).then_some(&validation),
        manifest_extra: json!({
            "seed": ctx.config.seed,
            "expression_source": expression_source,
            "held_out_images": validation.images.iter().map(|i| i.id).collect::<Vec<_>>(),
        }),
    };
    let outcome =
        pseudolabel::run_iteration_loop(client, &ctx.config.initial_handle(), &loop_data, &loop_config);
    let (state, error) = match outcome {
        Ok(state) => (state, None),
        Err(abort) => {
            let abort = *abort;
            (abort.state, Some(abort.error))
        }
    };
    ctx.manifest(
        "iterate",
        json!({
            "expression_source": expression_source,
            "iterations": state.history.len(),
            "final_model": state.model.id,
            "aborted": state.aborted,
        }),
    )?;
    match error {
        Some(e) => Err(Error::LoopAborted {
            iteration: state.iteration,
            source: Box::new(e),
        }),
        None => Ok(state),
    }
}

pub fn cmd_iterate(ctx: &Context, source: &ExpressionSource) -> Result<IterationState> {
    let mut client = ctx.connect()?;
    iterate(ctx, &mut client, source)
}

// ---------------------------------------------------------------------------
// eval / report

pub fn cmd_eval(
    ctx: &Context,
    results: &Path,
    ground_truth: &Path,
    federated: Option<&Path>,
    mode: ThresholdMode,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let detections = evaluation::load_results(&ctx.path(results))?;
    let sidecar = federated.map(|p| ctx.path(p));
    let gt = dataset::load_coco_federated(ctx.path(ground_truth), sidecar.as_deref())?;
    let known: BTreeSet<u64> = gt.images.iter().map(|i| i.id).collect();
    if let Some(d) = detections.iter().find(|d| !known.contains(&d.image_id)) {
        return Err(Error::Integrity(format!(
            "results reference image {} absent from the ground truth",
            d.image_id
        )));
    }
    let gts: Vec<GroundTruthBox> = gt.human_annotations().cloned().collect();
    let report = evaluation::mean_ap(
        &detections,
        &gts,
        mode,
        Some(&Federation::from_images(&gt.images)),
    );
    let base = out
        .map(|p| ctx.path(p))
        .unwrap_or_else(|| ctx.workdir.join("eval_report.json"));
    write_json(&base.with_extension("json"), &report)?;
    let md = base.with_extension("md");
    fs::write(&md, report.to_text()).map_err(|e| Error::io(&md, e))?;
    ctx.manifest(
        "eval",
        json!({
            "results": ctx.path(results),
            "ground_truth": ctx.path(ground_truth),
            "mode": report.mode,
            "map": report.map,
        }),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReportInput {
    Selection(PathBuf),
    Comparison(PathBuf),
}

pub fn cmd_report(ctx: &Context, input: &ReportInput, out: Option<&Path>) -> Result<Report> {
    let (report, default_name) = match input {
        ReportInput::Selection(p) => {
            let selection = Selection::load(&ctx.path(p))?;
            (evaluation::render_alignment_report(&selection.results), "alignment_report")
        }
        ReportInput::Comparison(p) => {
            let path = ctx.path(p);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let entries: Vec<ComparisonEntry> = serde_json::from_str(&text)
                .map_err(|e| Error::parse(path.display().to_string(), e))?;
            (evaluation::render_comparison_report(&entries), "comparison_report")
        }
    };
    let base = out
        .map(|p| ctx.path(p))
        .unwrap_or_else(|| ctx.workdir.join(default_name));
    write_report(&base, &report)?;
    Ok(report)
}
