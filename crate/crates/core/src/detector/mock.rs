//! Scriptable stand-in for a grounding detector.
//!
//! A [`MockScript`] lists the ground-truth objects the mock "sees" and, per
//! category, rules mapping expressions to a response policy. Each rule has a
//! list of stages; a base model answers with stage 0 and every finetune moves
//! the child one stage further (the last stage repeats). Responses depend
//! only on the script, the seed, the model's stage and the query, never on
//! call order.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::transport::LineHandler;
use super::wire::{Operation, Request, Response, WireDetection, WireFinetuneConfig, WireQuery};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const ORACLE_SCORE: f64 = 0.99;
pub const JITTER_SCORE: f64 = 0.9;
const DEFAULT_IMAGE_SIZE: (f64, f64) = (640.0, 480.0);

fn oracle_score() -> f64 {
    ORACLE_SCORE
}

fn jitter_score() -> f64 {
    JITTER_SCORE
}

fn default_initial_model() -> String {
    "m0".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Policy {
    /// Return every ground-truth box of the category on the image.
    Oracle {
        #[serde(default = "oracle_score")]
        score: f64,
    },
    /// Ground truth perturbed so that IoU with the source box stays ≥ `iou_floor`.
    JitteredOracle {
        iou_floor: f64,
        #[serde(default = "jitter_score")]
        score: f64,
    },
    Silent,
    /// `count` uniformly placed boxes with uniform scores.
    RandomBoxes { count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionMatch {
    Exact(String),
    Any,
}

impl ExpressionMatch {
    fn matches(&self, expression: &str) -> bool {
        match self {
            ExpressionMatch::Exact(e) => e == expression,
            ExpressionMatch::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub category_id: u64,
    #[serde(rename = "match")]
    pub matcher: ExpressionMatch,
    pub stages: Vec<Policy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockObject {
    pub image: String,
    pub category_id: u64,
    /// COCO `[x, y, w, h]`.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockImage {
    pub image: String,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_initial_model")]
    pub initial_model: String,
    pub categories: Vec<u64>,
    #[serde(default)]
    pub images: Vec<MockImage>,
    #[serde(default)]
    pub objects: Vec<MockObject>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Finetuning a model already at this stage (or beyond) fails.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_finetune_from_stage: Option<u32>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        let known: BTreeSet<u64> = self.categories.iter().copied().collect();
        for rule in &self.rules {
            if !known.contains(&rule.category_id) {
                return Err(Error::Config(format!(
                    "mock rule references unknown category {}",
                    rule.category_id
                )));
            }
            if rule.stages.is_empty() {
                return Err(Error::Config(format!(
                    "mock rule for category {} has no stages",
                    rule.category_id
                )));
            }
            for p in &rule.stages {
                let score = match p {
                    Policy::Oracle { score } => *score,
                    Policy::JitteredOracle { iou_floor, score } => {
                        if !(*iou_floor > 0.0 && *iou_floor <= 1.0) {
                            return Err(Error::Config(format!(
                                "iou_floor {iou_floor} outside (0, 1]"
                            )));
                        }
                        *score
                    }
                    Policy::Silent | Policy::RandomBoxes { .. } => 0.5,
                };
                if !(0.0..=1.0).contains(&score) {
                    return Err(Error::Config(format!("policy score {score} outside [0, 1]")));
                }
            }
        }
        for obj in &self.objects {
            if !known.contains(&obj.category_id) {
                return Err(Error::Config(format!(
                    "mock object on {} references unknown category {}",
                    obj.image, obj.category_id
                )));
            }
            let [x, y, w, h] = obj.bbox;
            BBox::from_xywh(x, y, w, h).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// A finetune call as the mock received it.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneRecord {
    pub model: String,
    pub dataset: String,
    pub config: WireFinetuneConfig,
    pub issued: String,
}

pub struct MockDetector {
    script: MockScript,
    objects: HashMap<(String, u64), Vec<BBox>>,
    sizes: HashMap<String, (f64, f64)>,
    stages: HashMap<String, u32>,
    next_model: u64,
    finetunes: Vec<FinetuneRecord>,
}

impl MockDetector {
    pub fn new(script: MockScript) -> Result<Self> {
        script.validate()?;
        let mut objects: HashMap<(String, u64), Vec<BBox>> = HashMap::new();
        for o in &script.objects {
            let [x, y, w, h] = o.bbox;
            objects
                .entry((o.image.clone(), o.category_id))
                .or_default()
                .push(BBox::from_xywh(x, y, w, h)?);
        }
        let sizes = script
            .images
            .iter()
            .map(|i| (i.image.clone(), (i.width, i.height)))
            .collect();
        let stages = HashMap::from([(script.initial_model.clone(), 0)]);
        Ok(Self {
            script,
            objects,
            sizes,
            stages,
            next_model: 1,
            finetunes: vec![],
        })
    }

    pub fn finetunes(&self) -> &[FinetuneRecord] {
        &self.finetunes
    }

    pub fn stage_of(&self, model: &str) -> Option<u32> {
        self.stages.get(model).copied()
    }

    pub fn handle(&mut self, request: &Request) -> Response {
        match &request.op {
            Operation::Detect { model, requests } => {
                let Some(&stage) = self.stages.get(model) else {
                    return Response::error(
                        request.id,
                        "unknown_model",
                        format!("model '{model}' is not loaded"),
                    );
                };
                let groups = requests.iter().map(|q| self.answer(stage, q)).collect();
                Response::groups(request.id, groups)
            }
            Operation::Finetune {
                model,
                dataset,
                config,
            } => {
                let Some(&stage) = self.stages.get(model) else {
                    return Response::error(
                        request.id,
                        "unknown_model",
                        format!("model '{model}' is not loaded"),
                    );
                };
                if self
                    .script
                    .fail_finetune_from_stage
                    .is_some_and(|limit| stage >= limit)
                {
                    return Response::error(
                        request.id,
                        "training_failed",
                        format!("scripted failure finetuning '{model}'"),
                    );
                }
                if !Path::new(dataset).is_file() {
                    return Response::error(
                        request.id,
                        "training_failed",
                        format!("dataset '{dataset}' not found"),
                    );
                }
                let mut issued = format!("m{}", self.next_model);
                while self.stages.contains_key(&issued) {
                    self.next_model += 1;
                    issued = format!("m{}", self.next_model);
                }
                self.next_model += 1;
                self.stages.insert(issued.clone(), stage + 1);
                self.finetunes.push(FinetuneRecord {
                    model: model.clone(),
                    dataset: dataset.clone(),
                    config: config.clone(),
                    issued: issued.clone(),
                });
                Response::model(request.id, issued)
            }
        }
    }

    fn policy(&self, stage: u32, query: &WireQuery) -> Option<&Policy> {
        let category = query.category_id?;
        let rule = self
            .script
            .rules
            .iter()
            .find(|r| r.category_id == category && r.matcher.matches(&query.expression))?;
        let idx = (stage as usize).min(rule.stages.len() - 1);
        Some(&rule.stages[idx])
    }

    fn rng_for(&self, stage: u32, query: &WireQuery) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.script.seed.to_le_bytes());
        h.update(stage.to_le_bytes());
        h.update(query.category_id.unwrap_or(0).to_le_bytes());
        h.update(query.image.as_bytes());
        h.update([0u8]);
        h.update(query.expression.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    fn answer(&self, stage: u32, query: &WireQuery) -> Vec<WireDetection> {
        let Some(policy) = self.policy(stage, query) else {
            return vec![];
        };
        let truth = query
            .category_id
            .and_then(|c| self.objects.get(&(query.image.clone(), c)))
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let mut rng = self.rng_for(stage, query);
        let wire = |b: BBox, score: f64| WireDetection {
            bbox: b.to_xywh(),
            score,
        };
        match policy {
            Policy::Silent => vec![],
            Policy::Oracle { score } => truth.iter().map(|b| wire(*b, *score)).collect(),
            Policy::JitteredOracle { iou_floor, score } => truth
                .iter()
                .map(|b| wire(jitter(b, *iou_floor, &mut rng), *score))
                .collect(),
            Policy::RandomBoxes { count } => {
                let (w, h) = self
                    .sizes
                    .get(&query.image)
                    .copied()
                    .unwrap_or(DEFAULT_IMAGE_SIZE);
                (0..*count)
                    .map(|_| {
                        let (x0, x1) = ordered(rng.random_range(0.0..w), rng.random_range(0.0..w));
                        let (y0, y1) = ordered(rng.random_range(0.0..h), rng.random_range(0.0..h));
                        let score = rng.random_range(0.0..=1.0);
                        wire(BBox::new(x0, y0, x1, y1).expect("ordered corners"), score)
                    })
                    .collect()
            }
        }
    }
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Perturbs `gt` into a box whose IoU with it is drawn uniformly from
/// `[floor, 1]`. One box contains the other, so IoU is the area ratio.
pub fn jitter(gt: &BBox, floor: f64, rng: &mut impl Rng) -> BBox {
    if gt.is_degenerate() || floor >= 1.0 {
        return *gt;
    }
    let target: f64 = rng.random_range(floor..=1.0);
    let split: f64 = rng.random_range(0.0..=1.0);
    let sx = target.powf(split);
    let sy = target.powf(1.0 - split);
    let (ox, oy): (f64, f64) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
    let (w, h) = (gt.width(), gt.height());
    let candidate = if rng.random_bool(0.5) {
        let (nw, nh) = (w * sx, h * sy);
        let x = gt.x_min() + ox * (w - nw);
        let y = gt.y_min() + oy * (h - nh);
        BBox::new(x, y, x + nw, y + nh)
    } else {
        let (nw, nh) = (w / sx, h / sy);
        let x = gt.x_min() - ox * (nw - w);
        let y = gt.y_min() - oy * (nh - h);
        BBox::new(x, y, x + nw, y + nh)
    };
    match candidate {
        Ok(b) if iou(&b, gt) >= floor => b,
        _ => *gt,
    }
}

impl LineHandler for MockDetector {
    fn handle_line(&mut self, line: &str) -> String {
        match Request::parse(line) {
            Ok(request) => self.handle(&request).to_line(),
            Err(Error::Protocol { kind, message }) => {
                let id = super::wire::peek_id(line).unwrap_or(0);
                Response::error(id, kind, message).to_line()
            }
            Err(other) => Response::error(0, "malformed", other.to_string()).to_line(),
        }
    }
}
