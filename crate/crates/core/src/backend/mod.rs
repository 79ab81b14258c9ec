//! Noise-prediction and feature-extraction contract.
//!
//! Both the in-process [`mock::MockBackend`] and the HTTP
//! [`remote::RemoteBackend`] implement [`Backend`]. Loss maps are returned
//! unreduced (one value per latent position) so that all spatial reductions
//! happen in the score engine.

pub mod cache;
pub mod conformance;
pub mod mock;
pub mod remote;
pub mod wire;

use image::RgbImage;
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

pub use cache::CachedBackend;
pub use mock::{MockBackend, MockTeacher, MockWorld};
pub use remote::{RemoteBackend, RemoteTeacher};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl BackendError {
    /// Transport-level failures that are worth retrying.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Unavailable(_))
    }
}

/// Encoder output for one image (or a crop of one).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap {
    /// `(channels, height, width)`; the mock uses a single channel.
    pub data: Array3<f32>,
    /// Pixels per latent unit.
    pub downsample_factor: u32,
    pub source_id: String,
    /// Offset of this map inside the full-image latent, in latent units.
    pub origin: (usize, usize),
}

impl LatentMap {
    pub fn new(
        data: Array3<f32>,
        downsample_factor: u32,
        source_id: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(BackendError::ShapeMismatch(format!(
                "latent must be non-empty, got {c}x{h}x{w}"
            )));
        }
        if downsample_factor == 0 {
            return Err(BackendError::InvalidRequest(
                "downsample_factor must be >= 1".into(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::InvalidRequest(
                "latent contains non-finite values".into(),
            ));
        }
        Ok(Self {
            data,
            downsample_factor,
            source_id: source_id.into(),
            origin: (0, 0),
        })
    }

    pub fn from_grid(
        grid: Array2<f32>,
        downsample_factor: u32,
        source_id: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let (h, w) = grid.dim();
        let data = grid
            .into_shape_with_order((1, h, w))
            .expect("reshape of a contiguous grid");
        Self::new(data, downsample_factor, source_id)
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// Spatial sub-window `[row, row+h) x [col, col+w)`; the origin is
    /// accumulated so crops of crops still know where they sit.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self, BackendError> {
        if h == 0 || w == 0 || row + h > self.height() || col + w > self.width() {
            return Err(BackendError::ShapeMismatch(format!(
                "crop {h}x{w} at ({row},{col}) outside latent {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Self {
            data: self.data.slice(s![.., row..row + h, col..col + w]).to_owned(),
            downsample_factor: self.downsample_factor,
            source_id: self.source_id.clone(),
            origin: (self.origin.0 + row, self.origin.1 + col),
        })
    }
}

/// Text condition for the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum PromptSpec {
    Label(String),
    Null,
}

impl PromptSpec {
    pub fn label(text: impl Into<String>) -> Result<Self, BackendError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest(
                "label text must be non-empty".into(),
            ));
        }
        Ok(PromptSpec::Label(text))
    }

    pub fn render(&self) -> String {
        match self {
            PromptSpec::Label(c) => format!("An image of {c}"),
            PromptSpec::Null => "An image of .".to_string(),
        }
    }

    pub fn label_text(&self) -> Option<&str> {
        match self {
            PromptSpec::Label(c) => Some(c),
            PromptSpec::Null => None,
        }
    }
}

/// One Monte-Carlo draw: diffusion time fraction and the seed of its noise.
///
/// The same `DrawSpec` must always produce the same noise realization, for
/// every prompt, so that label and null losses are paired.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawSpec {
    pub t: f64,
    pub noise_seed: u64,
}

impl DrawSpec {
    pub fn new(t: f64, noise_seed: u64) -> Result<Self, BackendError> {
        if !(t > 0.0 && t < 1.0) {
            return Err(BackendError::InvalidRequest(format!(
                "draw time must lie in (0,1), got {t}"
            )));
        }
        Ok(Self { t, noise_seed })
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        Self::new(self.t, self.noise_seed).map(|_| ())
    }

    /// Bit-exact key for caches.
    pub(crate) fn key(&self) -> (u64, u64) {
        (self.t.to_bits(), self.noise_seed)
    }
}

/// Per-position squared prediction error for one prompt and one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMap {
    pub data: Array2<f32>,
    pub draw: DrawSpec,
    pub prompt: PromptSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub feature_t: f64,
    pub layer_tag: String,
}

/// Noise-prediction model seen through its loss.
///
/// Implementations must be pure functions of their arguments (plus fixed model
/// weights) and safe to call from many threads at once.
pub trait Backend: Send + Sync {
    /// Encode a preprocessed RGB image into its latent.
    fn encode(&self, image: &RgbImage, source_id: &str) -> Result<LatentMap, BackendError>;

    /// Loss maps for each draw, in request order.
    fn loss_maps(
        &self,
        latent: &LatentMap,
        prompt: &PromptSpec,
        draws: &[DrawSpec],
    ) -> Result<Vec<LossMap>, BackendError>;

    /// Intermediate denoiser activations for each latent. `feature_t` is
    /// passed through verbatim; its interpretation is up to the backend.
    fn features(
        &self,
        latents: &[LatentMap],
        prompt: &PromptSpec,
        feature_t: f64,
        layer: &str,
    ) -> Result<Vec<FeatureVector>, BackendError>;

    fn loss_map(
        &self,
        latent: &LatentMap,
        prompt: &PromptSpec,
        draw: DrawSpec,
    ) -> Result<LossMap, BackendError> {
        let mut maps = self.loss_maps(latent, prompt, std::slice::from_ref(&draw))?;
        maps.pop()
            .ok_or_else(|| BackendError::Protocol("backend returned no loss map".into()))
    }

    fn feature(
        &self,
        latent: &LatentMap,
        prompt: &PromptSpec,
        feature_t: f64,
        layer: &str,
    ) -> Result<FeatureVector, BackendError> {
        let mut out = self.features(std::slice::from_ref(latent), prompt, feature_t, layer)?;
        out.pop()
            .ok_or_else(|| BackendError::Protocol("backend returned no feature".into()))
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn encode(&self, image: &RgbImage, source_id: &str) -> Result<LatentMap, BackendError> {
        (**self).encode(image, source_id)
    }

    fn loss_maps(
        &self,
        latent: &LatentMap,
        prompt: &PromptSpec,
        draws: &[DrawSpec],
    ) -> Result<Vec<LossMap>, BackendError> {
        (**self).loss_maps(latent, prompt, draws)
    }

    fn features(
        &self,
        latents: &[LatentMap],
        prompt: &PromptSpec,
        feature_t: f64,
        layer: &str,
    ) -> Result<Vec<FeatureVector>, BackendError> {
        (**self).features(latents, prompt, feature_t, layer)
    }
}

/// Provenance of one tile of a synthetic item, as seen by a teacher.
#[derive(Debug, Clone, Copy)]
pub struct TileView<'a> {
    pub source_id: &'a str,
    pub crop_box: crate::reconstruction::CropBox,
}

/// A rendered synthetic item handed to a teacher.
#[derive(Debug, Clone)]
pub struct TeacherInput<'a> {
    pub image: &'a RgbImage,
    pub tiles: Vec<TileView<'a>>,
}

/// Source of soft labels.
pub trait Teacher: Send + Sync {
    fn class_names(&self) -> Vec<String>;

    /// One probability vector (length = `class_names().len()`) per input.
    fn probabilities(&self, inputs: &[TeacherInput<'_>]) -> Result<Vec<Vec<f32>>, BackendError>;
}

/// Teacher that knows nothing: every item gets the uniform distribution.
#[derive(Debug, Clone)]
pub struct UniformTeacher {
    pub classes: Vec<String>,
}

impl Teacher for UniformTeacher {
    fn class_names(&self) -> Vec<String> {
        self.classes.clone()
    }

    fn probabilities(&self, inputs: &[TeacherInput<'_>]) -> Result<Vec<Vec<f32>>, BackendError> {
        let c = self.classes.len();
        if c == 0 {
            return Err(BackendError::InvalidRequest("teacher has no classes".into()));
        }
        Ok(vec![vec![1.0 / c as f32; c]; inputs.len()])
    }
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_templates() {
        assert_eq!(PromptSpec::label("goldfish").unwrap().render(), "An image of goldfish");
        assert_eq!(PromptSpec::Null.render(), "An image of .");
        assert!(PromptSpec::label("  ").is_err());
    }

    #[test]
    fn draw_time_is_open_interval() {
        assert!(DrawSpec::new(0.0, 1).is_err());
        assert!(DrawSpec::new(1.0, 1).is_err());
        assert!(DrawSpec::new(f64::NAN, 1).is_err());
        assert!(DrawSpec::new(0.5, 1).is_ok());
    }

    #[test]
    fn latent_crop_accumulates_origin() {
        let grid = Array2::from_shape_fn((6, 6), |(i, j)| (i * 6 + j) as f32);
        let latent = LatentMap::from_grid(grid, 1, "x").unwrap();
        let a = latent.crop(1, 2, 4, 4).unwrap();
        let b = a.crop(1, 1, 2, 2).unwrap();
        assert_eq!(b.origin, (2, 3));
        assert_eq!(b.data[[0, 0, 0]], (2 * 6 + 3) as f32);
        assert!(latent.crop(4, 4, 3, 3).is_err());
    }

    #[test]
    fn latent_rejects_non_finite() {
        let mut grid = Array2::zeros((2, 2));
        grid[[1, 1]] = f32::INFINITY;
        assert!(LatentMap::from_grid(grid, 1, "x").is_err());
    }
}
