#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;

use groundalign::detector::mock::{ExpressionMatch, MockImage, MockObject, MockRule, MockScript, Policy};
use groundalign::pipeline::{Context, DetectorSpec, RunConfig};

pub const IMAGE_W: f64 = 640.0;
pub const IMAGE_H: f64 = 480.0;

/// (class index, class name, referential expression, ACC before, ACC after)
pub const REFERENCE_ROWS: [(u64, &str, &str, f64, f64); 18] = [
    (1, "car", "car", 1.0, 1.0),
    (2, "truck", "lorry", 0.6, 0.7),
    (3, "construction vehicle", "lift shovel excavator", 0.9, 0.9),
    (4, "bus", "bus", 0.9, 0.9),
    (5, "trailer", "large cargo box on the trailer", 0.6, 0.8),
    (6, "emergency", "emergency police wagon", 0.4, 0.6),
    (7, "motorcycle", "narrow motorcycle", 0.8, 0.8),
    (8, "bicycle", "bicycle bike", 0.9, 1.0),
    (9, "adult", "adult people", 0.4, 0.7),
    (10, "child", "single little short youth children", 0.6, 0.7),
    (11, "police officer", "traffic policeman", 0.4, 0.6),
    (12, "construction worker", "construction workman people", 0.5, 0.7),
    (13, "personal mobility", "small kick scooter", 0.3, 0.9),
    (14, "stroller", "stroller", 1.0, 1.0),
    (15, "pushable pullable", "pushable pullable garbage container", 0.5, 1.0),
    (16, "barrier", "single short tarp barrier", 0.3, 0.5),
    (17, "traffic cone", "traffic cone", 1.0, 1.0),
    (18, "debris", "indicator warning board with wooden frame", 0.0, 0.7),
];

/// Rows highlighted as improved in the reference table.
pub const REFERENCE_HIGHLIGHTED: [u64; 12] = [2, 5, 6, 8, 9, 10, 11, 12, 13, 15, 16, 18];

/// Synthetic annotated world: one object per image, some images labeled.
pub struct World {
    pub categories: Vec<(u64, String)>,
    pub coco: Value,
    pub images: Vec<MockImage>,
    pub objects: Vec<MockObject>,
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let w = rng.random_range(40..200) as f64;
    let h = rng.random_range(40..160) as f64;
    let x = rng.random_range(0..(IMAGE_W as i64 - w as i64)) as f64;
    let y = rng.random_range(0..(IMAGE_H as i64 - h as i64)) as f64;
    [x, y, w, h]
}

pub fn world(categories: &[(u64, &str)], labeled: usize, unlabeled: usize, seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coco_images = vec![];
    let mut coco_anns = vec![];
    let mut images = vec![];
    let mut objects = vec![];
    let mut next_id = 1u64;
    for &(cat, _) in categories {
        for i in 0..labeled + unlabeled {
            let is_labeled = i < labeled;
            let file = format!("{}_{cat}_{i}.jpg", if is_labeled { "l" } else { "u" });
            let bbox = random_box(&mut rng);
            coco_images.push(json!({
                "id": next_id, "file_name": file, "width": IMAGE_W as u32, "height": IMAGE_H as u32,
            }));
            if is_labeled {
                coco_anns.push(json!({
                    "id": next_id, "image_id": next_id, "category_id": cat, "bbox": bbox,
                }));
            }
            images.push(MockImage {
                image: file.clone(),
                width: IMAGE_W,
                height: IMAGE_H,
            });
            objects.push(MockObject {
                image: file,
                category_id: cat,
                bbox,
            });
            next_id += 1;
        }
    }
    let coco = json!({
        "images": coco_images,
        "annotations": coco_anns,
        "categories": categories.iter().map(|(id, name)| json!({"id": id, "name": name})).collect::<Vec<_>>(),
    });
    World {
        categories: categories.iter().map(|(i, n)| (*i, n.to_string())).collect(),
        coco,
        images,
        objects,
    }
}

pub fn script(world: &World, rules: Vec<MockRule>, seed: u64) -> MockScript {
    MockScript {
        seed,
        initial_model: "m0".into(),
        categories: world.categories.iter().map(|(i, _)| *i).collect(),
        images: world.images.clone(),
        objects: world.objects.clone(),
        rules,
        fail_finetune_from_stage: None,
    }
}

pub fn exact(category_id: u64, expression: &str, stages: Vec<Policy>) -> MockRule {
    MockRule {
        category_id,
        matcher: ExpressionMatch::Exact(expression.into()),
        stages,
    }
}

pub fn any(category_id: u64, stages: Vec<Policy>) -> MockRule {
    MockRule {
        category_id,
        matcher: ExpressionMatch::Any,
        stages,
    }
}

pub fn jittered(iou_floor: f64) -> Policy {
    Policy::JitteredOracle {
        iou_floor,
        score: 0.9,
    }
}

/// Splits `expression` into at most three phrases and adds two distractors,
/// so every term subset fits in the default candidate budget and the
/// in-order union of the phrases spells `expression` again.
pub fn terms_for(expression: &str) -> Vec<String> {
    let words: Vec<&str> = expression.split_whitespace().collect();
    let per = words.len().div_ceil(3).max(1);
    let mut terms: Vec<String> = words.chunks(per).map(|c| c.join(" ")).collect();
    terms.push("blurry".into());
    terms.push("distant".into());
    terms
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

/// A scratch work directory with annotations, terms and a mock script.
pub struct Workspace {
    pub dir: TempDir,
}

impl Workspace {
    pub fn new(world: &World, script: &MockScript, terms: &BTreeMap<u64, Vec<String>>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_json(&dir.path().join("annotations.json"), &world.coco);
        write_json(&dir.path().join("mock.json"), script);
        let terms: BTreeMap<String, &Vec<String>> =
            terms.iter().map(|(k, v)| (k.to_string(), v)).collect();
        write_json(&dir.path().join("terms.json"), &terms);
        Self { dir }
    }

    pub fn path(&self) -> PathBuf {
        self.dir.path().to_path_buf()
    }

    pub fn config(&self) -> RunConfig {
        RunConfig {
            annotations: Some("annotations.json".into()),
            terms: Some("terms.json".into()),
            detector: Some(DetectorSpec::Mock {
                script: "mock.json".into(),
            }),
            ..RunConfig::default()
        }
    }

    pub fn context(&self, config: RunConfig) -> Context {
        Context::new(self.dir.path(), config).unwrap()
    }
}

/// The 18-category reference fixture: each category answers only its planted
/// expression, with jittered boxes at `floor`.
pub fn reference_workspace(seed: u64, floor: f64) -> Workspace {
    reference_subset_workspace(seed, floor, |_| true)
}

pub fn reference_subset_workspace(seed: u64, floor: f64, keep: impl Fn(&(u64, &str, &str, f64, f64)) -> bool) -> Workspace {
    let rows: Vec<_> = REFERENCE_ROWS.iter().filter(|r| keep(r)).collect();
    let cats: Vec<(u64, &str)> = rows.iter().map(|r| (r.0, r.1)).collect();
    let w = world(&cats, 10, 4, seed);
    let rules = rows.iter().map(|r| exact(r.0, r.2, vec![jittered(floor)])).collect();
    let s = script(&w, rules, seed);
    let terms = rows.iter().map(|r| (r.0, terms_for(r.2))).collect();
    Workspace::new(&w, &s, &terms)
}
