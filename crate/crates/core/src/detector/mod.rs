//! Boundary to an external grounding detector.
//!
//! Detectors live in another process and speak a small JSON protocol
//! ([`wire`]) over a child's standard streams or over HTTP ([`transport`]).
//! [`DetectorClient`] owns the stream, validates every reply and converts
//! wire boxes into [`BBox`]es. [`mock::MockDetector`] is a scriptable,
//! fully deterministic implementation of the detector side.

pub mod client;
pub mod mock;
pub mod transport;
pub mod wire;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub use client::DetectorClient;
pub use mock::{MockDetector, MockScript};
pub use transport::{HttpTransport, LoopbackTransport, SubprocessTransport, Transport};

/// One predicted box for a text query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub bbox: BBox,
    pub score: f64,
    pub expression: String,
    pub category_id: Option<u64>,
}

/// One text-conditioned query against one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectRequest {
    pub image_id: u64,
    /// Path or URI the detector resolves on its side.
    pub image_ref: String,
    pub expression: String,
    pub category_id: Option<u64>,
}

/// Loss weights and schedule forwarded with a finetune message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub focal_loss_weight: f64,
    pub box_l1_weight: f64,
    pub giou_weight: f64,
    pub epochs: u32,
    /// Passed through to the detector untouched.
    pub extra: BTreeMap<String, Value>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            focal_loss_weight: 1.0,
            box_l1_weight: 5.0,
            giou_weight: 2.0,
            epochs: 12,
            extra: BTreeMap::new(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("focal", self.focal_loss_weight),
            ("l1", self.box_l1_weight),
            ("giou", self.giou_weight),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} loss weight must be non-negative")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelHandle {
    pub id: String,
    pub parent: Option<String>,
    /// Training data the model was produced from, empty for a base model.
    pub created_from: String,
}

impl ModelHandle {
    pub fn base(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            parent: None,
            created_from: String::new(),
        }
    }
}

/// Parent links of every model seen in a run. Forms a forest; ids are unique.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    parents: BTreeMap<String, Option<String>>,
}

impl Lineage {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a handle. The parent must already be known and the id must be new.
    pub fn record(&mut self, handle: &ModelHandle) -> Result<()> {
        if self.parents.contains_key(&handle.id) {
            return Err(Error::protocol(
                "lineage",
                format!("model id '{}' issued twice", handle.id),
            ));
        }
        if let Some(parent) = &handle.parent {
            if !self.parents.contains_key(parent) {
                return Err(Error::protocol(
                    "lineage",
                    format!("model '{}' has unknown parent '{parent}'", handle.id),
                ));
            }
        }
        self.parents.insert(handle.id.clone(), handle.parent.clone());
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.parents.contains_key(id)
    }

    /// True when `ancestor` lies on the strict parent chain of `id`.
    pub fn is_descendant(&self, id: &str, ancestor: &str) -> bool {
        let mut cursor = self.parents.get(id).cloned().flatten();
        while let Some(p) = cursor {
            if p == ancestor {
                return true;
            }
            cursor = self.parents.get(&p).cloned().flatten();
        }
        false
    }

    /// Parent chain from `id` back to its root, `id` first.
    pub fn chain(&self, id: &str) -> Vec<String> {
        let mut out = vec![];
        let mut cursor = Some(id.to_string());
        while let Some(c) = cursor {
            cursor = self.parents.get(&c).cloned().flatten();
            out.push(c);
        }
        out
    }

    pub fn as_map(&self) -> HashMap<&str, Option<&str>> {
        self.parents
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_deref()))
            .collect()
    }
}
