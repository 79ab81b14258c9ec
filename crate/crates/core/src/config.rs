//! Run configuration: a single JSON document plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{allocate_quota, ClusterConfig, Mode, RemainderOrder};
use crate::backend::mock::MOCK_LAYER;
use crate::backend::MockWorld;
use crate::score::{PatchWindow, ScoreConfig};
use crate::seed::{derive_seed, sha256_hex};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Text rendered into the label prompt; defaults to the dataset's own
    /// label text (mock) or the class name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedWorld {
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub jitter: f32,
    #[serde(default = "default_true")]
    pub paired_noise: bool,
}

fn default_true() -> bool {
    true
}

fn default_mock_images() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Exactly one of `world` (inline), `world_file` or `planted`.
    Mock {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        world: Option<MockWorld>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        world_file: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        planted: Option<PlantedWorld>,
        /// Renderable images per class.
        #[serde(default = "default_mock_images")]
        images_per_class: usize,
    },
    Remote {
        endpoint: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherConfig {
    /// Closed-form teacher of the mock world.
    Mock,
    Uniform,
    Remote { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub backend: BackendConfig,
    /// `<root>/<class>/*.png`; required for the remote backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_root: Option<PathBuf>,
    /// Empty = every class of the mock world.
    pub classes: Vec<ClassSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherConfig>,
    pub score: ScoreConfig,
    pub window: PatchWindow,
    pub cluster: ClusterConfig,
    pub ipc: usize,
    /// Overrides the IPC-based default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    /// Real images sampled per class (`K`).
    pub images_per_class: usize,
    pub resize_edge: u32,
    pub output_size: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub candidates_per_image: usize,
    pub feature_t: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_layer: Option<String>,
    pub remainder_order: RemainderOrder,
    /// Scoring threads; 0 = one per core.
    pub workers: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::Mock {
                world: None,
                world_file: None,
                planted: Some(PlantedWorld { classes: 3, seed: 0, jitter: 0.0, paired_noise: true }),
                images_per_class: default_mock_images(),
            },
            dataset_root: None,
            classes: Vec::new(),
            teacher: None,
            score: ScoreConfig::default(),
            window: PatchWindow::default(),
            cluster: ClusterConfig::default(),
            ipc: 10,
            mode: None,
            images_per_class: 300,
            resize_edge: 256,
            output_size: 224,
            seed: 0,
            out_dir: PathBuf::from("distilled"),
            candidates_per_image: 1,
            feature_t: 1.6,
            feature_layer: None,
            remainder_order: RemainderOrder::Descending,
            workers: 0,
        }
    }
}

impl DistillConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let BackendConfig::Mock { world_file: Some(p), .. } = &mut cfg.backend {
            rel(p);
        }
        if let Some(p) = &mut cfg.dataset_root {
            rel(p);
        }
        rel(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn effective_mode(&self) -> Mode {
        self.mode.unwrap_or_else(|| Mode::for_ipc(self.ipc))
    }

    pub fn is_mock(&self) -> bool {
        matches!(self.backend, BackendConfig::Mock { .. })
    }

    pub fn feature_layer(&self) -> String {
        match (&self.feature_layer, &self.backend) {
            (Some(l), _) => l.clone(),
            (None, BackendConfig::Mock { .. }) => MOCK_LAYER.to_string(),
            (None, BackendConfig::Remote { .. }) => "up_ft1".to_string(),
        }
    }

    /// The mock world named by the backend config, if any.
    pub fn mock_world(&self) -> Result<Option<MockWorld>> {
        let BackendConfig::Mock { world, world_file, planted, .. } = &self.backend else {
            return Ok(None);
        };
        let w = match (world, world_file, planted) {
            (Some(w), None, None) => w.clone(),
            (None, Some(p), None) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            (None, None, Some(pw)) => {
                if !(1..=9).contains(&pw.classes) {
                    return Err(Error::Config("planted world supports 1..=9 classes".into()));
                }
                let mut w = MockWorld::planted(pw.classes, pw.seed);
                w.jitter = pw.jitter;
                w.paired_noise = pw.paired_noise;
                w
            }
            _ => {
                return Err(Error::Config(
                    "mock backend needs exactly one of world, world_file, planted".into(),
                ))
            }
        };
        w.validate().map_err(|e| Error::Config(format!("mock world: {e}")))?;
        Ok(Some(w))
    }

    /// `(name, label_text)` per class, in run order.
    pub fn resolved_classes(&self, world: Option<&MockWorld>) -> Result<Vec<(String, String)>> {
        let out: Vec<(String, String)> = match world {
            Some(w) if self.classes.is_empty() => w
                .classes
                .iter()
                .map(|c| (c.name.clone(), c.label_text.clone()))
                .collect(),
            _ => self
                .classes
                .iter()
                .map(|c| {
                    let default = world
                        .and_then(|w| w.class_index(&c.name).map(|i| w.classes[i].label_text.clone()))
                        .unwrap_or_else(|| c.name.clone());
                    (c.name.clone(), c.label_text.clone().unwrap_or(default))
                })
                .collect(),
        };
        if out.is_empty() {
            return Err(Error::Config("no classes configured".into()));
        }
        for (i, (name, label)) in out.iter().enumerate() {
            if name.is_empty() || name.contains('/') || name.contains('\\') || name == "." || name == ".." {
                return Err(Error::Config(format!("invalid class name {name:?}")));
            }
            if label.trim().is_empty() {
                return Err(Error::Config(format!("class {name} has an empty label text")));
            }
            if out[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("class {name} listed twice")));
            }
        }
        Ok(out)
    }

    /// Checks every sub-config plus the per-class feasibility guard.
    pub fn validate(&self) -> Result<()> {
        self.score.validate()?;
        self.window.validate()?;
        self.cluster.validate()?;
        if self.ipc == 0 {
            return Err(Error::Config("ipc must be >= 1".into()));
        }
        if self.images_per_class == 0 || self.candidates_per_image == 0 {
            return Err(Error::Config("images_per_class and candidates_per_image must be >= 1".into()));
        }
        if self.output_size == 0 || self.resize_edge == 0 {
            return Err(Error::Config("output_size and resize_edge must be >= 1".into()));
        }
        let mode = self.effective_mode();
        if mode == Mode::Mosaic && !self.output_size.is_multiple_of(2) {
            return Err(Error::Config("mosaic output_size must be even".into()));
        }
        if !(self.feature_t > 0.0 && self.feature_t.is_finite()) {
            return Err(Error::Config("feature_t must be > 0".into()));
        }
        match &self.backend {
            BackendConfig::Mock { images_per_class, .. } => {
                if *images_per_class == 0 {
                    return Err(Error::Config("mock images_per_class must be >= 1".into()));
                }
            }
            BackendConfig::Remote { endpoint } => {
                if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
                    return Err(Error::Config(format!("endpoint {endpoint:?} must be an http(s) URL")));
                }
                if self.dataset_root.is_none() {
                    return Err(Error::Config("remote backend needs dataset_root".into()));
                }
            }
        }
        if matches!(self.teacher, Some(TeacherConfig::Mock)) && !self.is_mock() {
            return Err(Error::Config("the mock teacher needs the mock backend".into()));
        }
        let quota = allocate_quota(self.ipc, self.cluster.n_top, mode)?;
        let available = self.images_per_class * self.candidates_per_image;
        if quota.needed > available {
            return Err(Error::Infeasible(format!(
                "{} patches per class needed ({mode:?}, ipc {}) but images_per_class x candidates_per_image = {available}; \
                 raise images_per_class to at least {} or lower ipc",
                quota.needed,
                self.ipc,
                quota.needed.div_ceil(self.candidates_per_image)
            )));
        }
        Ok(())
    }

    /// Copy with the draw and clustering seeds derived from `seed`; any
    /// `rng_seed` given in the file is overwritten.
    pub fn with_derived_seeds(&self) -> Self {
        let mut cfg = self.clone();
        cfg.score.rng_seed = derive_seed(self.seed, "score");
        cfg.cluster.rng_seed = derive_seed(self.seed, "cluster");
        cfg
    }

    /// Canonical JSON of the config with derived seeds filled in. Fields that
    /// cannot change an output byte (`out_dir`, `workers`) are blanked.
    pub fn effective_json(&self) -> Result<serde_json::Value> {
        let mut cfg = self.with_derived_seeds();
        cfg.workers = 0;
        cfg.mode = Some(self.effective_mode());
        cfg.feature_layer = Some(self.feature_layer());
        cfg.classes = self
            .resolved_classes(self.mock_world()?.as_ref())?
            .into_iter()
            .map(|(name, label_text)| ClassSpec { name, label_text: Some(label_text) })
            .collect();
        cfg.out_dir = PathBuf::new();
        Ok(serde_json::to_value(cfg)?)
    }

    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(&self.effective_json()?)?.as_bytes()))
    }
}
