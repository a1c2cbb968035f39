//! Referential-expression candidates, few-shot scoring and best-expression
//! selection.
//!
//! For one category, each candidate expression is sent to the detector on
//! every shot image. A shot counts as a hit when the best predicted box
//! overlaps the shot's ground truth with IoU strictly above the threshold;
//! the candidate's accuracy is the hit fraction. Candidate 0 is always the
//! bare class name, so the chosen expression never scores below it.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FewShotSet, Shot};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Prompt given to the multimodal model together with the boxed image.
pub const DESCRIBE_PROMPT: &str =
    "Please provide five descriptive terms for the object within the red box.";

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Every non-empty subset of five terms.
pub const DEFAULT_CANDIDATES: usize = 31;
/// Subsets are enumerated exhaustively, so term lists stay small.
pub const MAX_TERMS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermSource {
    File,
    LlmClient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTermSet {
    pub category_id: u64,
    terms: Vec<String>,
    pub source: TermSource,
}

impl PromptTermSet {
    /// Trims terms; rejects an empty list, blank terms and duplicates.
    pub fn new(category_id: u64, terms: Vec<String>, source: TermSource) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidTerms {
            category_id,
            reason,
        };
        if terms.is_empty() {
            return Err(invalid("no terms".into()));
        }
        if terms.len() > MAX_TERMS {
            return Err(invalid(format!("{} terms, at most {MAX_TERMS}", terms.len())));
        }
        let mut seen = HashSet::new();
        let mut clean = Vec::with_capacity(terms.len());
        for t in terms {
            let t = t.trim().to_string();
            if t.is_empty() {
                return Err(invalid("blank term".into()));
            }
            if !seen.insert(t.clone()) {
                return Err(invalid(format!("duplicate term '{t}'")));
            }
            clean.push(t);
        }
        Ok(Self {
            category_id,
            terms: clean,
            source,
        })
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }
}

/// Reads a term file: `{"<category_id>": ["term", ...], ...}`.
pub fn load_term_file(path: &Path) -> Result<BTreeMap<u64, PromptTermSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_term_file(&text, &path.display().to_string())
}

pub fn parse_term_file(text: &str, origin: &str) -> Result<BTreeMap<u64, PromptTermSet>> {
    let raw: BTreeMap<String, Vec<String>> =
        serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
    raw.into_iter()
        .map(|(key, terms)| {
            let id: u64 = key
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, format!("bad category id '{key}'")))?;
            Ok((id, PromptTermSet::new(id, terms, TermSource::File)?))
        })
        .collect()
}

/// What a multimodal model is asked for one shot. Drawing the box onto the
/// image is left to whoever serves the request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub image_ref: String,
    pub bbox: BBox,
    pub prompt: String,
}

pub fn build_llm_request(shot: &Shot) -> LlmRequest {
    LlmRequest {
        image_ref: shot.image.file_name.clone(),
        bbox: shot.gt.bbox,
        prompt: DESCRIBE_PROMPT.to_string(),
    }
}

/// A source of descriptive terms, e.g. a multimodal chat model.
pub trait TermClient {
    fn describe(&mut self, request: &LlmRequest) -> Result<Vec<String>>;
}

/// Asks `client` about the first shot of `shots` and builds a term set.
/// Repeated terms in the reply are dropped.
pub fn request_terms(client: &mut dyn TermClient, shots: &FewShotSet) -> Result<PromptTermSet> {
    let shot = shots.shots.first().ok_or_else(|| {
        Error::Precondition(format!("category {} has no shots", shots.category_id))
    })?;
    let mut seen = HashSet::new();
    let terms: Vec<String> = client
        .describe(&build_llm_request(shot))?
        .into_iter()
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty() && seen.insert(t.clone()))
        .collect();
    PromptTermSet::new(shots.category_id, terms, TermSource::LlmClient)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateExpression {
    pub category_id: u64,
    pub index: usize,
    pub text: String,
    /// Positions in the term set; empty for the class name.
    pub term_indices: Vec<usize>,
}

/// Candidate 0 is `class_name`; the rest are space-joined non-empty term
/// subsets (terms in list order), shuffled with `seed`, deduplicated by
/// text, truncated to `n`.
pub fn generate_candidates(
    category_id: u64,
    class_name: &str,
    terms: Option<&PromptTermSet>,
    n: usize,
    seed: u64,
) -> Result<Vec<CandidateExpression>> {
    if n == 0 {
        return Err(Error::Precondition("candidate count must be positive".into()));
    }
    let class_name = class_name.trim();
    if class_name.is_empty() {
        return Err(Error::Precondition(format!(
            "category {category_id} has a blank name"
        )));
    }
    let mut out = vec![CandidateExpression {
        category_id,
        index: 0,
        text: class_name.to_string(),
        term_indices: vec![],
    }];
    let terms = match terms {
        Some(t) if !t.terms().is_empty() => t.terms(),
        _ => {
            warn!("category {category_id}: no terms, only the class name is tried");
            return Ok(out);
        }
    };

    let mut seen: HashSet<String> = HashSet::from([class_name.to_string()]);
    let mut subsets: Vec<(String, Vec<usize>)> = Vec::new();
    for mask in 1u32..(1u32 << terms.len()) {
        let members: Vec<usize> = (0..terms.len()).filter(|i| mask & (1 << i) != 0).collect();
        let text = members
            .iter()
            .map(|&i| terms[i].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        if seen.insert(text.clone()) {
            subsets.push((text, members));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ category_id.rotate_left(32));
    subsets.shuffle(&mut rng);
    out.extend(
        subsets
            .into_iter()
            .take(n)
            .enumerate()
            .map(|(i, (text, term_indices))| CandidateExpression {
                category_id,
                index: i + 1,
                text,
                term_indices,
            }),
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionScore {
    pub candidate: CandidateExpression,
    pub per_shot_hit: Vec<bool>,
    pub acc: f64,
}

/// Best IoU between any prediction and `gt`, 0 when there are none.
pub fn best_match_iou(predictions: &[Detection], gt: &BBox) -> f64 {
    predictions
        .iter()
        .map(|d| iou(&d.bbox, gt))
        .fold(0.0, f64::max)
}

/// Scores one candidate over a few-shot set. `detections` is keyed by shot
/// index; a missing key counts as no detections.
pub fn score_candidate(
    candidate: &CandidateExpression,
    shots: &FewShotSet,
    detections: &BTreeMap<usize, Vec<Detection>>,
    iou_threshold: f64,
) -> ExpressionScore {
    let per_shot_hit: Vec<bool> = shots
        .shots
        .iter()
        .enumerate()
        .map(|(j, shot)| {
            detections
                .get(&j)
                .is_some_and(|preds| best_match_iou(preds, &shot.gt.bbox) > iou_threshold)
        })
        .collect();
    let acc = if per_shot_hit.is_empty() {
        0.0
    } else {
        per_shot_hit.iter().filter(|h| **h).count() as f64 / per_shot_hit.len() as f64
    };
    ExpressionScore {
        candidate: candidate.clone(),
        per_shot_hit,
        acc,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub category_id: u64,
    pub best: CandidateExpression,
    pub acc_before: f64,
    pub acc_after: f64,
    pub all_scores: Vec<ExpressionScore>,
}

impl SelectionResult {
    pub fn improved(&self) -> bool {
        self.acc_after > self.acc_before
    }
}

/// Argmax over accuracy. Ties go to the class name, then to the lowest index.
pub fn select_best(scores: Vec<ExpressionScore>) -> Result<SelectionResult> {
    let baseline = scores
        .iter()
        .find(|s| s.candidate.index == 0)
        .ok_or_else(|| Error::Precondition("scores lack the class-name candidate".into()))?;
    let category_id = baseline.candidate.category_id;
    if let Some(stray) = scores.iter().find(|s| s.candidate.category_id != category_id) {
        return Err(Error::Precondition(format!(
            "scores mix categories {category_id} and {}",
            stray.candidate.category_id
        )));
    }
    let acc_before = baseline.acc;
    let best = scores
        .iter()
        .min_by(|a, b| {
            b.acc
                .total_cmp(&a.acc)
                .then(a.candidate.index.cmp(&b.candidate.index))
        })
        .expect("non-empty: holds the baseline");
    Ok(SelectionResult {
        category_id,
        best: best.candidate.clone(),
        acc_before,
        acc_after: best.acc,
        all_scores: scores,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::dataset::{GroundTruthBox, ImageRecord, ShotStatus};

    fn terms(t: &[&str]) -> PromptTermSet {
        PromptTermSet::new(1, t.iter().map(|s| s.to_string()).collect(), TermSource::File).unwrap()
    }

    fn shot_set(n: usize) -> FewShotSet {
        let shots = (0..n as u64)
            .map(|i| Shot {
                image: ImageRecord {
                    id: i + 1,
                    file_name: format!("img{i}.jpg"),
                    width: 100,
                    height: 100,
                    verified_categories: BTreeSet::from([1]),
                },
                gt: GroundTruthBox::human(i + 1, 1, BBox::new(0., 0., 10., 10.).unwrap()),
            })
            .collect();
        FewShotSet {
            category_id: 1,
            shots,
            requested: n,
            status: ShotStatus::Full,
            multi_instance_images: vec![],
        }
    }

    fn det(image_id: u64, b: BBox) -> Detection {
        Detection {
            image_id,
            bbox: b,
            score: 0.5,
            expression: "x".into(),
            category_id: Some(1),
        }
    }

    fn cand(index: usize, text: &str) -> CandidateExpression {
        CandidateExpression {
            category_id: 1,
            index,
            text: text.into(),
            term_indices: vec![],
        }
    }

    fn score(index: usize, text: &str, acc: f64) -> ExpressionScore {
        ExpressionScore {
            candidate: cand(index, text),
            per_shot_hit: vec![],
            acc,
        }
    }

    #[test]
    fn prompt_is_verbatim() {
        let s = shot_set(1);
        let r = build_llm_request(&s.shots[0]);
        assert_eq!(
            r.prompt,
            "Please provide five descriptive terms for the object within the red box."
        );
        assert_eq!(r.bbox, s.shots[0].gt.bbox);
        assert_eq!(r.image_ref, "img0.jpg");
    }

    #[test]
    fn term_set_validation() {
        assert!(PromptTermSet::new(1, vec![], TermSource::File).is_err());
        assert!(PromptTermSet::new(1, vec!["a".into(), " ".into()], TermSource::File).is_err());
        assert!(PromptTermSet::new(1, vec!["a".into(), "a ".into()], TermSource::File).is_err());
        assert_eq!(terms(&[" kick "]).terms(), &["kick".to_string()]);
    }

    #[test]
    fn term_file_parsing() {
        let sets = parse_term_file(r#"{"13": ["small", "kick", "scooter"]}"#, "mem").unwrap();
        assert_eq!(sets[&13].terms().len(), 3);
        assert!(parse_term_file(r#"{"x": ["a"]}"#, "mem").is_err());
        assert!(parse_term_file(r#"{"1": []}"#, "mem").is_err());
    }

    #[test]
    fn all_subsets_of_five() {
        let t = terms(&["a", "b", "c", "d", "e"]);
        let c = generate_candidates(1, "thing", Some(&t), 31, 0).unwrap();
        assert_eq!(c.len(), 32);
        assert_eq!(c[0].text, "thing");
        let texts: HashSet<&str> = c.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts.len(), 32);
        assert!(texts.contains("a b c d e"));
        for (i, cand) in c.iter().enumerate() {
            assert_eq!(cand.index, i);
        }
    }

    #[test]
    fn single_term_and_cap() {
        let c = generate_candidates(1, "thing", Some(&terms(&["a"])), 10, 0).unwrap();
        let texts: Vec<&str> = c.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["thing", "a"]);
        let t = terms(&["a", "b", "c"]);
        assert_eq!(generate_candidates(1, "thing", Some(&t), 4, 0).unwrap().len(), 5);
    }

    #[test]
    fn no_terms_yields_class_name_only() {
        let c = generate_candidates(1, "debris", None, 31, 0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].text, "debris");
    }

    #[test]
    fn candidates_are_seeded() {
        let t = terms(&["a", "b", "c", "d", "e"]);
        let a = generate_candidates(1, "x", Some(&t), 8, 5).unwrap();
        assert_eq!(a, generate_candidates(1, "x", Some(&t), 8, 5).unwrap());
    }

    #[test]
    fn class_name_never_duplicated() {
        let t = terms(&["car", "sedan"]);
        let c = generate_candidates(1, "car", Some(&t), 31, 0).unwrap();
        assert_eq!(c.iter().filter(|c| c.text == "car").count(), 1);
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn scoring_examples() {
        let shots = shot_set(10);
        let gt = BBox::new(0., 0., 10., 10.).unwrap();
        let exact: BTreeMap<usize, Vec<Detection>> =
            (0..10).map(|j| (j, vec![det(j as u64 + 1, gt)])).collect();
        assert_eq!(score_candidate(&cand(0, "x"), &shots, &exact, 0.5).acc, 1.0);

        let none: BTreeMap<usize, Vec<Detection>> = (0..10).map(|j| (j, vec![])).collect();
        assert_eq!(score_candidate(&cand(0, "x"), &shots, &none, 0.5).acc, 0.0);
        assert_eq!(score_candidate(&cand(0, "x"), &shots, &BTreeMap::new(), 0.5).acc, 0.0);
    }

    #[test]
    fn threshold_is_strict() {
        let shots = shot_set(1);
        // width 5 inside a 10x10 box: IoU exactly 0.5
        let half = BBox::new(0., 0., 5., 10.).unwrap();
        let dets = BTreeMap::from([(0, vec![det(1, half)])]);
        assert!(!score_candidate(&cand(0, "x"), &shots, &dets, 0.5).per_shot_hit[0]);
        assert!(score_candidate(&cand(0, "x"), &shots, &dets, 0.49).per_shot_hit[0]);
    }

    #[test]
    fn selection_examples() {
        let r = select_best(vec![
            score(0, "personal mobility", 0.3),
            score(1, "small kick scooter", 0.9),
            score(2, "kick", 0.5),
        ])
        .unwrap();
        assert_eq!(r.best.text, "small kick scooter");
        assert_eq!((r.acc_before, r.acc_after), (0.3, 0.9));

        let r = select_best(vec![score(3, "auto", 1.0), score(0, "car", 1.0), score(1, "sedan", 1.0)])
            .unwrap();
        assert_eq!(r.best.text, "car");
        assert!(!r.improved());

        let r = select_best(vec![
            score(0, "debris", 0.0),
            score(1, "indicator warning board with wooden frame", 0.7),
        ])
        .unwrap();
        assert_eq!(r.best.index, 1);

        let r = select_best(vec![score(0, "a", 0.1), score(4, "b", 0.6), score(2, "c", 0.6)]).unwrap();
        assert_eq!(r.best.index, 2);
    }

    #[test]
    fn selection_requires_baseline() {
        assert!(select_best(vec![]).is_err());
        assert!(select_best(vec![score(1, "x", 0.2)]).is_err());
    }

    struct FixedTerms;

    impl TermClient for FixedTerms {
        fn describe(&mut self, request: &LlmRequest) -> Result<Vec<String>> {
            assert_eq!(request.prompt, DESCRIBE_PROMPT);
            Ok(vec!["kick".into(), "scooter".into(), "kick".into(), " ".into()])
        }
    }

    #[test]
    fn client_terms_are_deduplicated() {
        let set = request_terms(&mut FixedTerms, &shot_set(2)).unwrap();
        assert_eq!(set.terms(), &["kick".to_string(), "scooter".to_string()]);
        assert_eq!(set.source, TermSource::LlmClient);
    }
}
