//! Representativeness scoring and best-patch selection.
//!
//! Sign convention: `rho = E[L_null - L_label]`, so a larger `rho` means the
//! label prompt explains the region better and the binary zero-shot
//! probability `p(c|z) = sigmoid(rho)` is larger. Every "best" / "descending"
//! ranking in the crate is by descending `rho`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{softmax, Backend, DrawSpec, LatentMap, PromptSpec};
use crate::reconstruction::CropBox;
use crate::seed::rng_for;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    /// One uniform draw inside each of `n_draws` equal strata of the range.
    Stratified,
    /// Plain i.i.d. uniform draws over the range.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub n_draws: usize,
    pub rng_seed: u64,
    pub sampling: TimeSampling,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            t_min: 0.1,
            t_max: 0.7,
            n_draws: 10,
            rng_seed: 0,
            sampling: TimeSampling::Stratified,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(Error::Config(format!(
                "time range must satisfy 0 < t_min < t_max < 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.n_draws == 0 {
            return Err(Error::Config("n_draws must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws for one image. The stream is keyed by `(rng_seed, source_id)` so the
/// result does not depend on scoring order.
pub fn draw_schedule(cfg: &ScoreConfig, source_id: &str) -> Vec<DrawSpec> {
    let mut rng = rng_for(cfg.rng_seed, source_id);
    let span = cfg.t_max - cfg.t_min;
    let n = cfg.n_draws as f64;
    (0..cfg.n_draws)
        .map(|k| {
            let u: f64 = rng.random();
            let t = match cfg.sampling {
                TimeSampling::Stratified => cfg.t_min + (k as f64 + u) / n * span,
                TimeSampling::Uniform => cfg.t_min + u * span,
            };
            DrawSpec {
                t: t.clamp(cfg.t_min, cfg.t_max),
                noise_seed: rng.random(),
            }
        })
        .collect()
}

/// Draw-averaged `L_null - L_label`, per latent position.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDiffMap {
    pub data: Array2<f64>,
    pub n_draws: usize,
}

impl LossDiffMap {
    /// Whole-image representativeness: the spatial mean.
    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }
}

fn require_label(label: &PromptSpec) -> Result<()> {
    match label {
        PromptSpec::Label(_) => Ok(()),
        PromptSpec::Null => Err(Error::InvalidInput(
            "representativeness needs a label prompt, got the null prompt".into(),
        )),
    }
}

/// Loss-difference map over an explicit draw list. Label and null losses are
/// evaluated with the same draws.
pub fn loss_diff_map_with(
    backend: &dyn Backend,
    latent: &LatentMap,
    label: &PromptSpec,
    draws: &[DrawSpec],
) -> Result<LossDiffMap> {
    require_label(label)?;
    if draws.is_empty() {
        return Err(Error::InvalidInput("at least one draw is required".into()));
    }
    let shape = (latent.height(), latent.width());
    let mut acc = Array2::<f64>::zeros(shape);
    for (i, draw) in draws.iter().enumerate() {
        let ctx = || format!("{} draw {i} (t={})", latent.source_id, draw.t);
        let cond = backend
            .loss_map(latent, label, *draw)
            .map_err(|e| Error::backend(ctx(), e))?;
        let null = backend
            .loss_map(latent, &PromptSpec::Null, *draw)
            .map_err(|e| Error::backend(ctx(), e))?;
        if cond.data.dim() != shape || null.data.dim() != shape {
            return Err(Error::backend(
                ctx(),
                crate::backend::BackendError::ShapeMismatch(format!(
                    "loss map {:?} for latent {shape:?}",
                    cond.data.dim()
                )),
            ));
        }
        ndarray::Zip::from(&mut acc)
            .and(&null.data)
            .and(&cond.data)
            .for_each(|a, &n, &c| *a += f64::from(n) - f64::from(c));
    }
    acc /= draws.len() as f64;
    Ok(LossDiffMap {
        data: acc,
        n_draws: draws.len(),
    })
}

pub fn loss_diff_map(
    backend: &dyn Backend,
    latent: &LatentMap,
    label: &PromptSpec,
    cfg: &ScoreConfig,
) -> Result<LossDiffMap> {
    cfg.validate()?;
    loss_diff_map_with(backend, latent, label, &draw_schedule(cfg, &latent.source_id))
}

/// `rho = E_{eps,t}[mean(L_null) - mean(L_label)]`.
pub fn representativeness(
    backend: &dyn Backend,
    latent: &LatentMap,
    label: &PromptSpec,
    cfg: &ScoreConfig,
) -> Result<f64> {
    Ok(loss_diff_map(backend, latent, label, cfg)?.mean())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary zero-shot probability of the label against the null prompt.
pub fn class_probability_binary(
    backend: &dyn Backend,
    latent: &LatentMap,
    label: &PromptSpec,
    cfg: &ScoreConfig,
) -> Result<f64> {
    Ok(sigmoid(representativeness(backend, latent, label, cfg)?))
}

/// Zero-shot posterior over several prompts: softmax of the negated expected
/// losses, all prompts sharing one draw set.
pub fn class_posterior_multi(
    backend: &dyn Backend,
    latent: &LatentMap,
    labels: &[PromptSpec],
    cfg: &ScoreConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if labels.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "posterior needs at least 2 prompts, got {}",
            labels.len()
        )));
    }
    let draws = draw_schedule(cfg, &latent.source_id);
    let mut expected = Vec::with_capacity(labels.len());
    for prompt in labels {
        let maps = backend
            .loss_maps(latent, prompt, &draws)
            .map_err(|e| Error::backend(format!("{} prompt {prompt:?}", latent.source_id), e))?;
        let total: f64 = maps
            .iter()
            .map(|m| m.data.iter().map(|&v| f64::from(v)).sum::<f64>() / m.data.len() as f64)
            .sum();
        expected.push(total / draws.len() as f64);
    }
    let neg: Vec<f64> = expected.iter().map(|e| -e).collect();
    Ok(softmax(&neg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchWindow {
    pub size_latent: usize,
    pub stride_latent: usize,
}

impl Default for PatchWindow {
    /// 224-pixel windows on a factor-8 latent.
    fn default() -> Self {
        Self {
            size_latent: 28,
            stride_latent: 1,
        }
    }
}

impl PatchWindow {
    pub fn validate(&self) -> Result<()> {
        if self.size_latent == 0 || self.stride_latent == 0 {
            return Err(Error::Config("window size and stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Window clipped to a map of the given extent.
    pub fn clipped_to(&self, h: usize, w: usize) -> PatchWindow {
        PatchWindow {
            size_latent: self.size_latent.min(h).min(w),
            stride_latent: self.stride_latent,
        }
    }
}

/// Windowed means of a loss-difference map, indexed by window top-left
/// offset (in stride steps).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub scores: Array2<f64>,
    pub window: PatchWindow,
}

impl ScoreMap {
    /// Latent top-left of the window at grid index `(r, c)`.
    pub fn offset(&self, r: usize, c: usize) -> (usize, usize) {
        (r * self.window.stride_latent, c * self.window.stride_latent)
    }
}

/// Average-pool `diff` with a square window; windows never leave the map.
pub fn pool_patch_scores(diff: &Array2<f64>, window: PatchWindow) -> Result<ScoreMap> {
    window.validate()?;
    let (h, w) = diff.dim();
    let k = window.size_latent;
    if k > h || k > w {
        return Err(Error::InvalidInput(format!(
            "window {k} larger than map {h}x{w}"
        )));
    }
    // summed-area table with a zero border
    let mut sat = Array2::<f64>::zeros((h + 1, w + 1));
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += diff[[i, j]];
            sat[[i + 1, j + 1]] = sat[[i, j + 1]] + row;
        }
    }
    let s = window.stride_latent;
    let rows = (h - k) / s + 1;
    let cols = (w - k) / s + 1;
    let area = (k * k) as f64;
    let scores = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (i, j) = (r * s, c * s);
        (sat[[i + k, j + k]] - sat[[i, j + k]] - sat[[i + k, j]] + sat[[i, j]]) / area
    });
    Ok(ScoreMap { scores, window })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCandidate {
    pub source_id: String,
    /// `(row, col)` in full-image latent units.
    pub top_left_latent: (usize, usize),
    pub window: PatchWindow,
    pub rho: f64,
    pub pixel_box: CropBox,
}

fn candidate_at(map: &ScoreMap, latent: &LatentMap, r: usize, c: usize) -> PatchCandidate {
    let (row, col) = map.offset(r, c);
    let (row, col) = (row + latent.origin.0, col + latent.origin.1);
    let f = latent.downsample_factor;
    let size = map.window.size_latent as u32 * f;
    PatchCandidate {
        source_id: latent.source_id.clone(),
        top_left_latent: (row, col),
        window: map.window,
        rho: map.scores[[r, c]],
        pixel_box: CropBox {
            x: col as u32 * f,
            y: row as u32 * f,
            w: size,
            h: size,
        },
    }
}

/// The `n` highest-`rho` windows, ties broken by row-major order.
pub fn top_patches(map: &ScoreMap, latent: &LatentMap, n: usize) -> Result<Vec<PatchCandidate>> {
    if map.scores.is_empty() {
        return Err(Error::InvalidInput("empty score map".into()));
    }
    let mut idx: Vec<((usize, usize), f64)> = map.scores.indexed_iter().map(|(ix, &v)| (ix, v)).collect();
    // stable sort keeps row-major order among equal scores
    idx.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(idx
        .into_iter()
        .take(n)
        .map(|((r, c), _)| candidate_at(map, latent, r, c))
        .collect())
}

pub fn select_best_patch(map: &ScoreMap, latent: &LatentMap) -> Result<PatchCandidate> {
    Ok(top_patches(map, latent, 1)?.remove(0))
}

/// Scores of one image: whole-image `rho` plus its best windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub rho_image: f64,
    pub score_map: ScoreMap,
    pub candidates: Vec<PatchCandidate>,
}

pub fn score_image(
    backend: &dyn Backend,
    latent: &LatentMap,
    label: &PromptSpec,
    cfg: &ScoreConfig,
    window: PatchWindow,
    n_candidates: usize,
) -> Result<ImageScore> {
    let diff = loss_diff_map(backend, latent, label, cfg)?;
    let window = window.clipped_to(latent.height(), latent.width());
    let score_map = pool_patch_scores(&diff.data, window)?;
    let candidates = top_patches(&score_map, latent, n_candidates.max(1))?;
    Ok(ImageScore {
        rho_image: diff.mean(),
        score_map,
        candidates,
    })
}
