//! COCO-style average precision and the alignment / comparison reports.
//!
//! AP follows the COCO convention: detections are visited in descending
//! score order, each claims the unmatched ground-truth box of highest IoU at
//! or above the threshold, and the precision envelope is sampled at 101
//! recall points. Classes without ground truth have no AP and are left out
//! of the mean.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{GroundTruthBox, ImageRecord};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::expressions::SelectionResult;
use crate::geometry::{iou, BBox};

pub const MATCHING_TAG: &str = "greedy-max-iou/101-point-interpolated";
const RECALL_POINTS: usize = 101;

/// Which categories were exhaustively checked on each image. Images that are
/// not listed count as verified for everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Federation {
    verified: BTreeMap<u64, BTreeSet<u64>>,
}

impl Federation {
    pub fn from_images(images: &[ImageRecord]) -> Self {
        Self {
            verified: images
                .iter()
                .map(|i| (i.id, i.verified_categories.clone()))
                .collect(),
        }
    }

    pub fn is_verified(&self, image_id: u64, category_id: u64) -> bool {
        self.verified
            .get(&image_id)
            .is_none_or(|cats| cats.contains(&category_id))
    }
}

fn keep(d: &Detection, federation: Option<&Federation>) -> bool {
    match (federation, d.category_id) {
        (Some(f), Some(c)) => f.is_verified(d.image_id, c),
        _ => true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PRPoint {
    pub score_threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Greedy COCO matching. Returns a TP flag per detection in score order,
/// alongside the sorted detections' scores.
fn match_detections(
    detections: &[&Detection],
    gts: &[&GroundTruthBox],
    iou_threshold: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<&Detection> = detections.to_vec();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut by_image: BTreeMap<u64, Vec<(&BBox, bool)>> = BTreeMap::new();
    for g in gts {
        by_image.entry(g.image_id).or_default().push((&g.bbox, false));
    }
    order
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            if let Some(candidates) = by_image.get(&d.image_id) {
                for (k, (gt, taken)) in candidates.iter().enumerate() {
                    if *taken {
                        continue;
                    }
                    let v = iou(&d.bbox, gt);
                    if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                        best = Some((k, v));
                    }
                }
            }
            if let Some((k, _)) = best {
                by_image.get_mut(&d.image_id).expect("image present")[k].1 = true;
            }
            (d.score, best.is_some())
        })
        .collect()
}

/// Precision/recall after each detection, highest score first.
pub fn pr_curve(
    detections: &[Detection],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
    federation: Option<&Federation>,
) -> Vec<PRPoint> {
    let dets: Vec<&Detection> = detections.iter().filter(|d| keep(d, federation)).collect();
    let gts: Vec<&GroundTruthBox> = gts.iter().collect();
    let positives = gts.len() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    match_detections(&dets, &gts, iou_threshold)
        .into_iter()
        .map(|(score, hit)| {
            if hit {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            PRPoint {
                score_threshold: score,
                precision: tp / (tp + fp),
                recall: if positives > 0.0 { tp / positives } else { 0.0 },
            }
        })
        .collect()
}

/// AP of a single category, `None` without ground truth.
pub fn average_precision(
    detections: &[Detection],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
    federation: Option<&Federation>,
) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let curve = pr_curve(detections, gts, iou_threshold, federation);
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            curve
                .iter()
                .position(|p| p.recall >= r)
                .map_or(0.0, |i| envelope[i])
        })
        .sum();
    Some(total / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    Single(f64),
    /// `start:end` stepping by `step` inclusive.
    Range { start: f64, end: f64, step: f64 },
}

impl ThresholdMode {
    pub const COCO: ThresholdMode = ThresholdMode::Range {
        start: 0.5,
        end: 0.95,
        step: 0.05,
    };

    /// Accepts `0.5`, `0.5:0.95` (step 0.05) or `start:end:step`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad IoU threshold spec '{text}'"));
        let parts: Vec<f64> = text
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        let mode = match parts.as_slice() {
            [t] => ThresholdMode::Single(*t),
            [s, e] => ThresholdMode::Range {
                start: *s,
                end: *e,
                step: 0.05,
            },
            [s, e, step] => ThresholdMode::Range {
                start: *s,
                end: *e,
                step: *step,
            },
            _ => return Err(bad()),
        };
        match mode {
            ThresholdMode::Single(t) if !in_range(t) => Err(bad()),
            ThresholdMode::Range { start, end, step }
                if !(in_range(start) && in_range(end) && start <= end && step > 0.0) =>
            {
                Err(bad())
            }
            m => Ok(m),
        }
    }

    pub fn thresholds(&self) -> Vec<f64> {
        match *self {
            ThresholdMode::Single(t) => vec![t],
            ThresholdMode::Range { start, end, step } => {
                let n = ((end - start) / step + 1e-9).floor() as usize;
                (0..=n)
                    .map(|i| ((start + step * i as f64) * 1e6).round() / 1e6)
                    .collect()
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            ThresholdMode::Single(t) => format!("{t}"),
            ThresholdMode::Range { start, end, step } => format!("{start}:{end}:{step}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<u64, f64>,
    pub map: f64,
    pub iou_thresholds: Vec<f64>,
    pub mode: String,
    pub matching: String,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .per_class_ap
            .iter()
            .map(|(c, ap)| vec![c.to_string(), format!("{:.4}", ap)])
            .collect();
        rows.push(vec!["mAP".into(), format!("{:.4}", self.map)]);
        let mut out = format!("IoU thresholds: {} ({})\n\n", self.mode, self.matching);
        out.push_str(&markdown_table(&["Category", "AP"], &rows));
        out
    }
}

/// Per-class AP averaged over thresholds, then over classes with ground truth.
pub fn mean_ap(
    detections: &[Detection],
    gts: &[GroundTruthBox],
    mode: ThresholdMode,
    federation: Option<&Federation>,
) -> EvalReport {
    let thresholds = mode.thresholds();
    let mut gt_by_class: BTreeMap<u64, Vec<GroundTruthBox>> = BTreeMap::new();
    for g in gts {
        gt_by_class.entry(g.category_id).or_default().push(g.clone());
    }
    let mut det_by_class: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        if let Some(c) = d.category_id {
            det_by_class.entry(c).or_default().push(d.clone());
        }
    }
    let per_class_ap: BTreeMap<u64, f64> = gt_by_class
        .iter()
        .map(|(c, class_gts)| {
            let dets = det_by_class.get(c).map(Vec::as_slice).unwrap_or(&[]);
            let sum: f64 = thresholds
                .iter()
                .map(|t| average_precision(dets, class_gts, *t, federation).unwrap_or(0.0))
                .sum();
            (*c, sum / thresholds.len() as f64)
        })
        .collect();
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    EvalReport {
        per_class_ap,
        map,
        iou_thresholds: thresholds,
        mode: mode.label(),
        matching: MATCHING_TAG.into(),
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ResultRecord {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    score: f64,
}

/// Parses a COCO results array `[{image_id, category_id, bbox, score}]`.
pub fn parse_results(text: &str, origin: &str) -> Result<Vec<Detection>> {
    let records: Vec<ResultRecord> = serde_json::from_str(text).map_err(|e| {
        Error::parse(
            format!("{origin} line {} column {}", e.line(), e.column()),
            e,
        )
    })?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let ctx = || format!("{origin}: results[{i}]");
            if !(0.0..=1.0).contains(&r.score) {
                return Err(Error::parse(ctx(), format!("score {} outside [0, 1]", r.score)));
            }
            let [x, y, w, h] = r.bbox;
            Ok(Detection {
                image_id: r.image_id,
                bbox: BBox::from_xywh(x, y, w, h).map_err(|e| Error::parse(ctx(), e))?,
                score: r.score,
                expression: String::new(),
                category_id: Some(r.category_id),
            })
        })
        .collect()
}

pub fn load_results(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text, &path.display().to_string())
}

pub fn results_json(detections: &[Detection]) -> Value {
    let records: Vec<ResultRecord> = detections
        .iter()
        .filter_map(|d| {
            Some(ResultRecord {
                image_id: d.image_id,
                category_id: d.category_id?,
                bbox: d.bbox.to_xywh(),
                score: d.score,
            })
        })
        .collect();
    json!(records)
}

// ---------------------------------------------------------------------------
// Reports

/// A rendered report in machine- and human-readable form.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub json: Value,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub class_index: u64,
    pub class_name: String,
    pub expression: String,
    pub acc_before: f64,
    pub acc_after: f64,
}

impl AlignmentRow {
    pub fn improved(&self) -> bool {
        self.acc_after > self.acc_before
    }
}

impl From<&SelectionResult> for AlignmentRow {
    fn from(r: &SelectionResult) -> Self {
        let class_name = r
            .all_scores
            .iter()
            .find(|s| s.candidate.index == 0)
            .map(|s| s.candidate.text.clone())
            .unwrap_or_else(|| r.best.text.clone());
        Self {
            class_index: r.category_id,
            class_name,
            expression: r.best.text.clone(),
            acc_before: r.acc_before,
            acc_after: r.acc_after,
        }
    }
}

fn markdown_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(headers.to_vec());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&line(rule.iter().map(String::as_str).collect()));
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

pub fn render_alignment_report(results: &[SelectionResult]) -> Report {
    let rows: Vec<AlignmentRow> = results.iter().map(AlignmentRow::from).collect();
    render_alignment_rows(&rows)
}

pub fn render_alignment_rows(rows: &[AlignmentRow]) -> Report {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.class_index.to_string(),
                r.class_name.clone(),
                r.expression.clone(),
                format!("{:.1}", r.acc_before),
                format!("{:.1}", r.acc_after),
                if r.improved() { "yes" } else { "" }.to_string(),
            ]
        })
        .collect();
    let text = markdown_table(
        &[
            "Class index",
            "Class name",
            "Referential expression",
            "ACC (before)",
            "ACC (after)",
            "Improved",
        ],
        &cells,
    );
    let json_rows: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "class_index": r.class_index,
                "class_name": r.class_name,
                "expression": r.expression,
                "acc_before": r.acc_before,
                "acc_after": r.acc_after,
                "improved": r.improved(),
            })
        })
        .collect();
    Report {
        json: json!({ "rows": json_rows }),
        text,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub method: String,
    pub map: f64,
}

pub fn render_comparison_report(entries: &[ComparisonEntry]) -> Report {
    let cells: Vec<Vec<String>> = entries
        .iter()
        .map(|e| vec![e.method.clone(), format!("{:.2}", e.map)])
        .collect();
    let mut text = markdown_table(&["Method", "mAP"], &cells);
    if entries.is_empty() {
        let _ = writeln!(text);
    }
    Report {
        json: json!({ "rows": entries }),
        text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(image_id: u64, b: BBox, score: f64) -> Detection {
        Detection {
            image_id,
            bbox: b,
            score,
            expression: String::new(),
            category_id: Some(1),
        }
    }

    fn gt(image_id: u64, b: BBox) -> GroundTruthBox {
        GroundTruthBox::human(image_id, 1, b)
    }

    /// A box to the right of `g` whose IoU with it is exactly `target`
    /// (same height, horizontal shift).
    fn shifted(g: &BBox, target: f64) -> BBox {
        let w = g.width();
        // overlap o: o / (2w - o) = target
        let o = 2.0 * w * target / (1.0 + target);
        g.translate(w - o, 0.0).unwrap()
    }

    #[test]
    fn single_match_and_miss() {
        let g = bx(0., 0., 10., 10.);
        let hit = shifted(&g, 0.9);
        assert!((iou(&hit, &g) - 0.9).abs() < 1e-12);
        assert_eq!(average_precision(&[det(1, hit, 0.8)], &[gt(1, g)], 0.5, None), Some(1.0));
        let miss = bx(50., 50., 60., 60.);
        assert_eq!(average_precision(&[det(1, miss, 0.8)], &[gt(1, g)], 0.5, None), Some(0.0));
        assert_eq!(average_precision(&[det(1, miss, 0.8)], &[], 0.5, None), None);
    }

    #[test]
    fn trailing_false_positive_keeps_full_ap() {
        let g1 = bx(0., 0., 10., 10.);
        let g2 = bx(100., 0., 110., 10.);
        let dets = [
            det(1, shifted(&g1, 0.8), 0.9),
            det(1, shifted(&g2, 0.6), 0.8),
            det(1, shifted(&g2, 0.55), 0.7),
        ];
        let curve = pr_curve(&dets, &[gt(1, g1), gt(1, g2)], 0.5, None);
        let pr: Vec<(f64, f64)> = curve.iter().map(|p| (p.precision, p.recall)).collect();
        assert_eq!(pr, vec![(1.0, 0.5), (1.0, 1.0), (2.0 / 3.0, 1.0)]);
        assert_eq!(
            average_precision(&dets, &[gt(1, g1), gt(1, g2)], 0.5, None),
            Some(1.0)
        );
    }

    #[test]
    fn federation_ignores_unverified() {
        let g = bx(0., 0., 10., 10.);
        let stray = det(2, bx(0., 0., 5., 5.), 0.99);
        let images = vec![
            ImageRecord {
                id: 1,
                file_name: "a".into(),
                width: 20,
                height: 20,
                verified_categories: BTreeSet::from([1]),
            },
            ImageRecord {
                id: 2,
                file_name: "b".into(),
                width: 20,
                height: 20,
                verified_categories: BTreeSet::new(),
            },
        ];
        let fed = Federation::from_images(&images);
        let dets = [stray, det(1, g, 0.5)];
        assert_eq!(average_precision(&dets, &[gt(1, g)], 0.5, Some(&fed)), Some(1.0));
        assert!(average_precision(&dets, &[gt(1, g)], 0.5, None).unwrap() < 1.0);
    }

    #[test]
    fn threshold_modes() {
        assert_eq!(ThresholdMode::parse("0.5").unwrap().thresholds(), vec![0.5]);
        let coco = ThresholdMode::parse("0.5:0.95").unwrap().thresholds();
        assert_eq!(coco.len(), 10);
        assert_eq!(coco[0], 0.5);
        assert_eq!(coco[9], 0.95);
        assert_eq!(ThresholdMode::COCO.thresholds(), coco);
        assert!(ThresholdMode::parse("abc").is_err());
        assert!(ThresholdMode::parse("0.9:0.5").is_err());
        assert_ne!(
            ThresholdMode::parse("0.5").unwrap().label(),
            ThresholdMode::COCO.label()
        );
    }

    #[test]
    fn mean_ap_perfect_and_empty() {
        let gts = vec![
            gt(1, bx(0., 0., 10., 10.)),
            GroundTruthBox::human(1, 2, bx(20., 20., 30., 30.)),
        ];
        let perfect: Vec<Detection> = gts
            .iter()
            .map(|g| Detection {
                image_id: g.image_id,
                bbox: g.bbox,
                score: 0.9,
                expression: String::new(),
                category_id: Some(g.category_id),
            })
            .collect();
        let r = mean_ap(&perfect, &gts, ThresholdMode::COCO, None);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class_ap.len(), 2);
        assert_eq!(mean_ap(&[], &gts, ThresholdMode::Single(0.5), None).map, 0.0);
    }

    #[test]
    fn zero_gt_classes_are_excluded() {
        let gts = vec![gt(1, bx(0., 0., 10., 10.))];
        let mut dets = vec![det(1, bx(0., 0., 10., 10.), 0.9)];
        dets.push(Detection {
            category_id: Some(7),
            ..det(1, bx(0., 0., 3., 3.), 0.9)
        });
        let r = mean_ap(&dets, &gts, ThresholdMode::Single(0.5), None);
        assert_eq!(r.map, 1.0);
        assert!(!r.per_class_ap.contains_key(&7));
    }

    #[test]
    fn results_parsing() {
        let d = parse_results(
            r#"[{"image_id":1,"category_id":2,"bbox":[1,2,3,4],"score":0.5}]"#,
            "mem",
        )
        .unwrap();
        assert_eq!(d[0].bbox, bx(1., 2., 4., 6.));
        let err = parse_results("[\n{\"image_id\": 1}\n]", "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { ref context, .. } if context.contains("line")));
        let back = parse_results(&results_json(&d).to_string(), "mem").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn comparison_report_is_verbatim() {
        let entries = vec![
            ComparisonEntry { method: "A".into(), map: 1.0 },
            ComparisonEntry { method: "A".into(), map: 2.5 },
        ];
        let r = render_comparison_report(&entries);
        assert_eq!(r.text.lines().count(), 4);
        assert_eq!(r.json["rows"].as_array().unwrap().len(), 2);
        let empty = render_comparison_report(&[]);
        assert_eq!(empty.text.lines().filter(|l| l.starts_with('|')).count(), 2);
    }

    #[test]
    fn alignment_report_empty_is_header_only() {
        let r = render_alignment_rows(&[]);
        assert_eq!(r.text.lines().count(), 2);
        assert!(r.text.contains("ACC (before)"));
        assert_eq!(r.json["rows"], json!([]));
    }
}
