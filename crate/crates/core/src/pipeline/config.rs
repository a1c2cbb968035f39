//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DEFAULT_DEDUP_IOU, DEFAULT_SHOTS};
use crate::detector::transport::{HttpTransport, LoopbackTransport, SubprocessTransport};
use crate::detector::{DetectorClient, FinetuneConfig, MockDetector, MockScript, ModelHandle};
use crate::error::{Error, Result};
use crate::expressions::{DEFAULT_CANDIDATES, DEFAULT_IOU_THRESHOLD};
use crate::pseudolabel::{EtaConfig, StoppingRule, DEFAULT_ETA};

/// Overrides whatever detector the configuration names with an HTTP endpoint.
pub const DETECTOR_URL_ENV: &str = "GROUNDALIGN_DETECTOR_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DetectorSpec {
    /// Newline-delimited JSON over the child's stdin/stdout.
    Subprocess { command: Vec<String> },
    Http { url: String },
    /// The built-in mock, in-process.
    Mock { script: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// COCO file with the human annotations.
    pub annotations: Option<PathBuf>,
    /// Optional federated sidecar for `annotations`.
    pub federated: Option<PathBuf>,
    /// Prefix joined to image file names before they are sent to the detector.
    pub images_root: Option<PathBuf>,
    /// Term file, `{"<category_id>": [terms]}`.
    pub terms: Option<PathBuf>,
    pub detector: Option<DetectorSpec>,
    pub initial_model: String,
    pub n_candidates: usize,
    pub shots_k: usize,
    pub eta: f64,
    pub eta_per_category: BTreeMap<u64, f64>,
    pub iou_threshold: f64,
    pub dedup_iou: f64,
    pub max_boxes: Option<usize>,
    /// Share of each few-shot set held out for the convergence metric.
    pub holdout_fraction: f64,
    /// Also pseudo-label images that carry human labels.
    pub include_labeled_images: bool,
    pub stopping: StoppingRule,
    pub finetune: FinetuneConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            annotations: None,
            federated: None,
            images_root: None,
            terms: None,
            detector: None,
            initial_model: "m0".into(),
            n_candidates: DEFAULT_CANDIDATES,
            shots_k: DEFAULT_SHOTS,
            eta: DEFAULT_ETA,
            eta_per_category: BTreeMap::new(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            dedup_iou: DEFAULT_DEDUP_IOU,
            max_boxes: None,
            holdout_fraction: 0.0,
            include_labeled_images: false,
            stopping: StoppingRule::default(),
            finetune: FinetuneConfig::default(),
            seed: 0,
        }
    }
}

/// Flag-level overrides; `None` leaves the file or default value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub annotations: Option<PathBuf>,
    pub federated: Option<PathBuf>,
    pub images_root: Option<PathBuf>,
    pub terms: Option<PathBuf>,
    pub detector: Option<DetectorSpec>,
    pub initial_model: Option<String>,
    pub n_candidates: Option<usize>,
    pub shots_k: Option<usize>,
    pub eta: Option<f64>,
    pub iou_threshold: Option<f64>,
    pub max_iterations: Option<u32>,
    pub holdout_fraction: Option<f64>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Layers `file` (if any) and `flags` over the defaults, then the
    /// detector URL environment variable.
    pub fn resolve(file: Option<&Path>, flags: Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        if let Ok(url) = env::var(DETECTOR_URL_ENV) {
            if !url.trim().is_empty() {
                cfg.detector = Some(DetectorSpec::Http { url });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: Overrides) {
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = o.$field { self.$field = Some(v); } )* };
        }
        macro_rules! put {
            ($($field:ident),*) => { $( if let Some(v) = o.$field { self.$field = v; } )* };
        }
        set!(annotations, federated, images_root, terms, detector);
        put!(initial_model, n_candidates, shots_k, eta, iou_threshold, holdout_fraction, seed);
        if let Some(m) = o.max_iterations {
            self.stopping.max_iterations = m;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.eta_config().validate()?;
        self.stopping.validate()?;
        self.finetune.validate()?;
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} {v} outside [0, 1]")))
            }
        };
        unit("iou_threshold", self.iou_threshold)?;
        unit("dedup_iou", self.dedup_iou)?;
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        if self.n_candidates == 0 || self.shots_k == 0 {
            return Err(Error::Config(
                "n_candidates and shots_k must be positive".into(),
            ));
        }
        if self.initial_model.trim().is_empty() {
            return Err(Error::Config("initial_model is blank".into()));
        }
        Ok(())
    }

    pub fn eta_config(&self) -> EtaConfig {
        EtaConfig {
            default: self.eta,
            per_category: self.eta_per_category.clone(),
        }
    }

    pub fn initial_handle(&self) -> ModelHandle {
        ModelHandle::base(self.initial_model.clone())
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
        value
            .as_ref()
            .ok_or_else(|| Error::Config(format!("'{name}' is not configured")))
    }
}

/// Resolves `path` against `workdir` unless it is absolute.
pub fn in_workdir(workdir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        workdir.join(path)
    }
}

/// Opens a client for the configured detector.
pub fn connect(config: &RunConfig, workdir: &Path) -> Result<DetectorClient> {
    let spec = config
        .detector
        .as_ref()
        .ok_or_else(|| Error::Config("no detector configured".into()))?;
    let transport: Box<dyn crate::detector::Transport> = match spec {
        DetectorSpec::Subprocess { command } => {
            Box::new(SubprocessTransport::spawn_in(command, workdir)?)
        }
        DetectorSpec::Http { url } => Box::new(HttpTransport::new(url.clone())),
        DetectorSpec::Mock { script } => {
            let script = MockScript::load(&in_workdir(workdir, script))?;
            Box::new(LoopbackTransport::new(MockDetector::new(script)?))
        }
    };
    Ok(DetectorClient::new(transport, &config.initial_handle()).with_max_boxes(config.max_boxes))
}
