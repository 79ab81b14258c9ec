//! Planted-signal mock world.
//!
//! Images are rendered procedurally: gray background noise, colored distractor
//! blocks, and one colored object placed inside the mask of the image's class.
//! The mock encoder keeps the pixel grid as the latent grid (factor 1) and uses
//! chroma as activation `a(i,j)`. The loss for a draw is
//!
//! ```text
//! L(i,j) = t + j0 * eta(seed, i, j) - [prompt = Label(c)] * g_c * m_c(i,j) * a(i,j)
//! ```
//!
//! so every downstream quantity is computable by hand when `j0 = 0`.

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    softmax, Backend, BackendError, DrawSpec, FeatureVector, LatentMap, LossMap, PromptSpec,
    Teacher, TeacherInput,
};
use crate::seed::{derive_seed, rng_for};

pub const MOCK_LAYER: &str = "mock-moments";
pub const MOCK_FEATURE_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self {
            row,
            col,
            height,
            width,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.height && col >= self.col && col < self.col + self.width
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockClass {
    pub name: String,
    pub label_text: String,
    /// Union of rectangles, in latent (= pixel) units.
    pub mask: Vec<Rect>,
    pub gain: f32,
    pub color: [u8; 3],
}

/// Procedural image generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    pub background: (u8, u8),
    pub object_size: (usize, usize),
    pub object_intensity: (f32, f32),
    pub distractors: usize,
    pub distractor_size: (usize, usize),
    pub distractor_intensity: (f32, f32),
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            background: (40, 200),
            object_size: (10, 14),
            object_intensity: (0.7, 1.0),
            distractors: 6,
            distractor_size: (6, 12),
            distractor_intensity: (0.7, 1.0),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_teacher_scale() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockWorld {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<MockClass>,
    /// Jitter amplitude `j0`.
    #[serde(default)]
    pub jitter: f32,
    /// When false the jitter is also keyed on the prompt, so it no longer
    /// cancels between label and null maps. Only useful to exercise the
    /// Monte-Carlo estimator.
    #[serde(default = "default_true")]
    pub paired_noise: bool,
    #[serde(default)]
    pub render: RenderSpec,
    /// Sharpness of the closed-form teacher.
    #[serde(default = "default_teacher_scale")]
    pub teacher_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Mask slots on a 48x48 grid for [`MockWorld::planted`].
const PLANTED_SLOTS: [(usize, usize); 9] = [
    (2, 2),
    (2, 30),
    (30, 16),
    (30, 2),
    (30, 30),
    (2, 16),
    (16, 2),
    (16, 30),
    (16, 16),
];

fn hue_color(k: usize, n: usize) -> [u8; 3] {
    let h = 6.0 * k as f64 / n as f64;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

impl MockWorld {
    /// A 48x48 world with `n_classes` (at most 9) disjoint 16x16 masks, gain 2
    /// and hue-wheel class colors.
    pub fn planted(n_classes: usize, seed: u64) -> Self {
        assert!(
            (1..=PLANTED_SLOTS.len()).contains(&n_classes),
            "planted world supports 1..=9 classes"
        );
        let classes = (0..n_classes)
            .map(|k| {
                let (row, col) = PLANTED_SLOTS[k];
                MockClass {
                    name: format!("class{k}"),
                    label_text: format!("object {k}"),
                    mask: vec![Rect::new(row, col, 16, 16)],
                    gain: 2.0,
                    color: hue_color(k, n_classes),
                }
            })
            .collect();
        Self {
            height: 48,
            width: 48,
            classes,
            jitter: 0.0,
            paired_noise: true,
            render: RenderSpec::default(),
            teacher_scale: default_teacher_scale(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.height == 0 || self.width == 0 {
            return Err(BackendError::InvalidRequest("world grid must be non-empty".into()));
        }
        if self.classes.is_empty() {
            return Err(BackendError::InvalidRequest("world has no classes".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(BackendError::InvalidRequest("jitter must be finite and >= 0".into()));
        }
        for class in &self.classes {
            if !(class.gain >= 0.0 && class.gain.is_finite()) {
                return Err(BackendError::InvalidRequest(format!(
                    "class {}: gain must be finite and >= 0",
                    class.name
                )));
            }
            for r in &class.mask {
                if r.area() == 0 || r.row + r.height > self.height || r.col + r.width > self.width {
                    return Err(BackendError::InvalidRequest(format!(
                        "class {}: mask rect {r:?} outside {}x{} grid",
                        class.name, self.height, self.width
                    )));
                }
            }
        }
        let (lo, hi) = self.render.object_size;
        if lo == 0 || lo > hi {
            return Err(BackendError::InvalidRequest("object_size must be 1 <= min <= max".into()));
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    fn class_for_prompt(&self, prompt: &PromptSpec) -> Option<&MockClass> {
        let text = prompt.label_text()?;
        self.classes
            .iter()
            .find(|c| c.label_text == text || c.name == text)
    }

    /// Binary mask of a class sampled at absolute latent coordinates.
    pub fn mask_at(&self, class: &MockClass, row: usize, col: usize) -> f32 {
        if class.mask.iter().any(|r| r.contains(row, col)) {
            1.0
        } else {
            0.0
        }
    }

    pub fn mask_grid(&self, class_idx: usize) -> Array2<f32> {
        let class = &self.classes[class_idx];
        Array2::from_shape_fn((self.height, self.width), |(i, j)| self.mask_at(class, i, j))
    }

    /// Fraction of `rect` (latent units) covered by the class mask.
    pub fn mask_overlap(&self, class_idx: usize, rect: &Rect) -> f64 {
        let class = &self.classes[class_idx];
        let mut hits = 0usize;
        for i in rect.row..rect.row + rect.height {
            for j in rect.col..rect.col + rect.width {
                if self.mask_at(class, i, j) > 0.0 {
                    hits += 1;
                }
            }
        }
        hits as f64 / rect.area().max(1) as f64
    }

    /// Noise field `eta` in [-1, 1] for a draw.
    pub fn noise_field(&self, draw: &DrawSpec, prompt: &PromptSpec, h: usize, w: usize) -> Array2<f32> {
        let seed = if self.paired_noise {
            draw.noise_seed
        } else {
            derive_seed(draw.noise_seed, &prompt.render())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((h, w), || rng.random_range(-1.0f32..=1.0))
    }

    /// The closed-form loss given an activation grid whose top-left sits at
    /// `origin` in the world grid.
    pub fn loss_formula(
        &self,
        activation: &Array2<f32>,
        origin: (usize, usize),
        prompt: &PromptSpec,
        draw: &DrawSpec,
    ) -> Array2<f32> {
        let (h, w) = activation.dim();
        let eta = if self.jitter > 0.0 {
            Some(self.noise_field(draw, prompt, h, w))
        } else {
            None
        };
        let class = self.class_for_prompt(prompt);
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut v = draw.t;
            if let Some(eta) = &eta {
                v += f64::from(self.jitter) * f64::from(eta[[i, j]]);
            }
            if let Some(class) = class {
                let m = self.mask_at(class, origin.0 + i, origin.1 + j);
                v -= f64::from(class.gain) * f64::from(m) * f64::from(activation[[i, j]]);
            }
            v as f32
        })
    }

    /// Activation of an image: per-pixel chroma in [0, 1]. Gray pixels have zero activation.
    pub fn activation(image: &RgbImage) -> Array2<f32> {
        let (w, h) = image.dimensions();
        Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
            let p = image.get_pixel(j as u32, i as u32).0;
            let max = p.iter().copied().max().unwrap_or(0);
            let min = p.iter().copied().min().unwrap_or(0);
            f32::from(max - min) / 255.0
        })
    }

    pub fn source_id(class_name: &str, index: usize) -> String {
        format!("mock/{class_name}/{index}")
    }

    fn parse_source_id(&self, source_id: &str) -> Option<(usize, usize)> {
        let rest = source_id.strip_prefix("mock/")?;
        let (name, idx) = rest.rsplit_once('/')?;
        let class = self.class_index(name)?;
        Some((class, idx.parse().ok()?))
    }

    /// Render the image behind a `mock/<class>/<index>` source id.
    pub fn render_source(&self, source_id: &str) -> Result<RgbImage, BackendError> {
        let (class, index) = self.parse_source_id(source_id).ok_or_else(|| {
            BackendError::InvalidRequest(format!("not a mock source id: {source_id}"))
        })?;
        Ok(self.render(class, index))
    }

    pub fn render(&self, class_idx: usize, index: usize) -> RgbImage {
        let class = &self.classes[class_idx];
        let spec = &self.render;
        let mut rng = rng_for(self.seed, &Self::source_id(&class.name, index));
        let (h, w) = (self.height, self.width);
        let mut img = RgbImage::new(w as u32, h as u32);
        let (bg_lo, bg_hi) = spec.background;
        for p in img.pixels_mut() {
            let v = rng.random_range(bg_lo.min(bg_hi)..=bg_hi.max(bg_lo));
            *p = Rgb([v, v, v]);
        }

        let paint = |img: &mut RgbImage, r: &Rect, color: [u8; 3], intensity: f32| {
            let px = Rgb(color.map(|c| (f32::from(c) * intensity).round() as u8));
            for i in r.row..(r.row + r.height).min(h) {
                for j in r.col..(r.col + r.width).min(w) {
                    img.put_pixel(j as u32, i as u32, px);
                }
            }
        };

        let (dlo, dhi) = spec.distractor_size;
        for _ in 0..spec.distractors {
            if dlo == 0 || dlo > dhi || dhi > h.min(w) {
                break;
            }
            let color = self.classes[rng.random_range(0..self.classes.len())].color;
            let intensity = sample_range(&mut rng, spec.distractor_intensity);
            for _attempt in 0..50 {
                let size = rng.random_range(dlo..=dhi);
                let rect = Rect::new(
                    rng.random_range(0..=h - size),
                    rng.random_range(0..=w - size),
                    size,
                    size,
                );
                if !class.mask.iter().any(|m| m.intersects(&rect)) {
                    paint(&mut img, &rect, color, intensity);
                    break;
                }
            }
        }

        if let Some(area) = class.mask.first() {
            let (olo, ohi) = spec.object_size;
            let max_size = area.height.min(area.width);
            let size = rng.random_range(olo.min(max_size)..=ohi.min(max_size));
            let rect = Rect::new(
                area.row + rng.random_range(0..=area.height - size),
                area.col + rng.random_range(0..=area.width - size),
                size,
                size,
            );
            let intensity = sample_range(&mut rng, spec.object_intensity);
            paint(&mut img, &rect, class.color, intensity);
        }
        img
    }

    /// Closed-form evidence `g_c * mean_box(m_c * a)` for each listed class.
    pub fn box_evidence(&self, activation: &Array2<f32>, rect: &Rect, classes: &[usize]) -> Vec<f64> {
        classes
            .iter()
            .map(|&c| {
                let class = &self.classes[c];
                let mut sum = 0.0f64;
                for i in rect.row..rect.row + rect.height {
                    for j in rect.col..rect.col + rect.width {
                        sum += f64::from(self.mask_at(class, i, j)) * f64::from(activation[[i, j]]);
                    }
                }
                f64::from(class.gain) * sum / rect.area().max(1) as f64
            })
            .collect()
    }

    /// Pixel-only color classifier used by the mock sidecar's teacher endpoint.
    pub fn color_logits(&self, image: &RgbImage) -> Vec<f32> {
        let n = (image.width() * image.height()).max(1) as f64;
        self.classes
            .iter()
            .map(|class| {
                let cn = class.color.map(f64::from);
                let cnorm = cn.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                let mut acc = 0.0;
                for p in image.pixels() {
                    let pv = p.0.map(f64::from);
                    let pnorm = pv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if pnorm == 0.0 {
                        continue;
                    }
                    let chroma = (pv.iter().copied().fold(0.0, f64::max)
                        - pv.iter().copied().fold(255.0, f64::min))
                        / 255.0;
                    let cos = (pv[0] * cn[0] + pv[1] * cn[1] + pv[2] * cn[2]) / (pnorm * cnorm);
                    acc += chroma * cos;
                }
                (self.teacher_scale * acc / n) as f32
            })
            .collect()
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// In-process backend over a [`MockWorld`].
#[derive(Debug, Clone)]
pub struct MockBackend {
    world: MockWorld,
}

impl MockBackend {
    pub fn new(world: MockWorld) -> Result<Self, BackendError> {
        world.validate()?;
        Ok(Self { world })
    }

    pub fn world(&self) -> &MockWorld {
        &self.world
    }

    fn activation_of<'a>(latent: &'a LatentMap) -> ndarray::ArrayView2<'a, f32> {
        latent.data.index_axis(ndarray::Axis(0), 0)
    }

    /// Moment features of a latent under a prompt:
    /// `[g_c*mean(m_c*a), mean(a), std(a), com_row/h, com_col/w, mean(m_c)]`.
    pub fn moment_features(&self, latent: &LatentMap, prompt: &PromptSpec) -> Vec<f32> {
        let a = Self::activation_of(latent);
        let (h, w) = a.dim();
        let n = (h * w) as f64;
        let class = self.world.class_for_prompt(prompt);
        let (mut masked, mut mask_sum, mut sum, mut sq) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let (mut row_mass, mut col_mass) = (0.0f64, 0.0f64);
        for ((i, j), &v) in a.indexed_iter() {
            let v = f64::from(v);
            let m = class.map_or(0.0, |c| {
                f64::from(self.world.mask_at(c, latent.origin.0 + i, latent.origin.1 + j))
            });
            masked += m * v;
            mask_sum += m;
            sum += v;
            sq += v * v;
            row_mass += v * (i as f64 + 0.5);
            col_mass += v * (j as f64 + 0.5);
        }
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0);
        let gain = class.map_or(0.0, |c| f64::from(c.gain));
        let (com_r, com_c) = if sum > 0.0 {
            (row_mass / sum / h as f64, col_mass / sum / w as f64)
        } else {
            (0.5, 0.5)
        };
        vec![
            (gain * masked / n) as f32,
            mean as f32,
            var.sqrt() as f32,
            com_r as f32,
            com_c as f32,
            (mask_sum / n) as f32,
        ]
    }
}

impl Backend for MockBackend {
    fn encode(&self, image: &RgbImage, source_id: &str) -> Result<LatentMap, BackendError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(BackendError::ShapeMismatch("empty image".into()));
        }
        LatentMap::from_grid(MockWorld::activation(image), 1, source_id)
    }

    fn loss_maps(
        &self,
        latent: &LatentMap,
        prompt: &PromptSpec,
        draws: &[DrawSpec],
    ) -> Result<Vec<LossMap>, BackendError> {
        if latent.channels() != 1 {
            return Err(BackendError::ShapeMismatch(format!(
                "mock expects 1 latent channel, got {}",
                latent.channels()
            )));
        }
        let a = Self::activation_of(latent).to_owned();
        draws
            .iter()
            .map(|draw| {
                draw.validate()?;
                Ok(LossMap {
                    data: self.world.loss_formula(&a, latent.origin, prompt, draw),
                    draw: *draw,
                    prompt: prompt.clone(),
                })
            })
            .collect()
    }

    fn features(
        &self,
        latents: &[LatentMap],
        prompt: &PromptSpec,
        feature_t: f64,
        _layer: &str,
    ) -> Result<Vec<FeatureVector>, BackendError> {
        if !(feature_t > 0.0 && feature_t.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "feature time must be positive, got {feature_t}"
            )));
        }
        Ok(latents
            .iter()
            .map(|latent| FeatureVector {
                values: self.moment_features(latent, prompt),
                feature_t,
                layer_tag: MOCK_LAYER.to_string(),
            })
            .collect())
    }
}

/// Closed-form teacher on the mock world: soft label from the class evidence
/// of each tile's source region, averaged over tiles.
#[derive(Debug, Clone)]
pub struct MockTeacher {
    world: MockWorld,
    classes: Vec<usize>,
}

impl MockTeacher {
    /// Teacher over a subset of the world's classes, in the given order.
    pub fn new(world: MockWorld, class_names: &[String]) -> Result<Self, BackendError> {
        let classes = class_names
            .iter()
            .map(|n| {
                world
                    .class_index(n)
                    .ok_or_else(|| BackendError::InvalidRequest(format!("unknown mock class {n}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if classes.is_empty() {
            return Err(BackendError::InvalidRequest("teacher has no classes".into()));
        }
        Ok(Self { world, classes })
    }
}

impl Teacher for MockTeacher {
    fn class_names(&self) -> Vec<String> {
        self.classes
            .iter()
            .map(|&c| self.world.classes[c].name.clone())
            .collect()
    }

    fn probabilities(&self, inputs: &[TeacherInput<'_>]) -> Result<Vec<Vec<f32>>, BackendError> {
        inputs
            .iter()
            .map(|input| {
                if input.tiles.is_empty() {
                    return Err(BackendError::InvalidRequest("item has no tiles".into()));
                }
                let mut evidence = vec![0.0f64; self.classes.len()];
                for tile in &input.tiles {
                    let src = self.world.render_source(tile.source_id)?;
                    let a = MockWorld::activation(&src);
                    let b = tile.crop_box;
                    if (b.x + b.w) as usize > self.world.width || (b.y + b.h) as usize > self.world.height {
                        return Err(BackendError::ShapeMismatch(format!(
                            "tile box {b:?} outside the mock grid"
                        )));
                    }
                    let rect = Rect::new(b.y as usize, b.x as usize, b.h as usize, b.w as usize);
                    for (e, v) in evidence
                        .iter_mut()
                        .zip(self.world.box_evidence(&a, &rect, &self.classes))
                    {
                        *e += v / input.tiles.len() as f64;
                    }
                }
                let logits: Vec<f64> = evidence.iter().map(|e| e * self.world.teacher_scale).collect();
                Ok(softmax(&logits).into_iter().map(|p| p as f32).collect())
            })
            .collect()
    }
}

/// A 1-channel latent from a raw activation grid, for tests and examples.
pub fn activation_latent(activation: Array2<f32>, source_id: &str) -> LatentMap {
    let (h, w) = activation.dim();
    LatentMap {
        data: Array3::from_shape_vec((1, h, w), activation.into_raw_vec_and_offset().0)
            .expect("shape matches"),
        downsample_factor: 1,
        source_id: source_id.to_string(),
        origin: (0, 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reconstruction::CropBox;
    use crate::backend::TileView;

    /// 4x4 world, class "c" masked on the top-left 2x2 block with gain `g`.
    pub(crate) fn corner_world(g: f32, jitter: f32) -> MockWorld {
        MockWorld {
            height: 4,
            width: 4,
            classes: vec![MockClass {
                name: "c".into(),
                label_text: "c".into(),
                mask: vec![Rect::new(0, 0, 2, 2)],
                gain: g,
                color: [255, 0, 0],
            }],
            jitter,
            paired_noise: true,
            render: RenderSpec::default(),
            teacher_scale: 10.0,
            seed: 0,
        }
    }

    fn ones(h: usize, w: usize) -> LatentMap {
        activation_latent(Array2::ones((h, w)), "ones")
    }

    #[test]
    fn label_loss_is_t_without_mask() {
        let mut world = corner_world(2.0, 0.0);
        world.classes[0].mask.clear();
        let backend = MockBackend::new(world).unwrap();
        let map = backend
            .loss_map(&ones(4, 4), &PromptSpec::label("c").unwrap(), DrawSpec::new(0.3, 9).unwrap())
            .unwrap();
        assert!(map.data.iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn null_loss_is_t() {
        let backend = MockBackend::new(corner_world(2.0, 0.0)).unwrap();
        let map = backend
            .loss_map(&ones(4, 4), &PromptSpec::Null, DrawSpec::new(0.5, 1).unwrap())
            .unwrap();
        assert!(map.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn diff_map_closed_form_and_t_cancels() {
        let backend = MockBackend::new(corner_world(2.0, 0.0)).unwrap();
        let label = PromptSpec::label("c").unwrap();
        let mut diffs = Vec::new();
        for t in [0.2, 0.6] {
            let d = DrawSpec::new(t, 3).unwrap();
            let lc = backend.loss_map(&ones(4, 4), &label, d).unwrap().data;
            let ln = backend.loss_map(&ones(4, 4), &PromptSpec::Null, d).unwrap().data;
            diffs.push(&ln - &lc);
        }
        for ((i, j), &v) in diffs[0].indexed_iter() {
            let expected = if i < 2 && j < 2 { 2.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-6, "({i},{j}) = {v}");
            assert!((v - diffs[1][[i, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gain_makes_prompts_identical() {
        let backend = MockBackend::new(corner_world(0.0, 0.3)).unwrap();
        let d = DrawSpec::new(0.4, 11).unwrap();
        let lc = backend.loss_map(&ones(4, 4), &PromptSpec::label("c").unwrap(), d).unwrap();
        let ln = backend.loss_map(&ones(4, 4), &PromptSpec::Null, d).unwrap();
        assert_eq!(lc.data, ln.data);
    }

    #[test]
    fn paired_jitter_cancels_exactly_in_difference() {
        let backend = MockBackend::new(corner_world(2.0, 0.7)).unwrap();
        let label = PromptSpec::label("c").unwrap();
        let d = DrawSpec::new(0.35, 77).unwrap();
        let lc = backend.loss_map(&ones(4, 4), &label, d).unwrap().data;
        let ln = backend.loss_map(&ones(4, 4), &PromptSpec::Null, d).unwrap().data;
        assert!(ln.iter().any(|&v| (v - 0.35).abs() > 1e-3), "jitter should be visible");
        for ((i, j), v) in (&ln - &lc).indexed_iter() {
            let expected = if i < 2 && j < 2 { 2.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn same_draw_same_bits() {
        let backend = MockBackend::new(corner_world(1.5, 0.4)).unwrap();
        let d = DrawSpec::new(0.25, 5).unwrap();
        let a = backend.loss_map(&ones(4, 4), &PromptSpec::Null, d).unwrap();
        let b = backend.loss_map(&ones(4, 4), &PromptSpec::Null, d).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn features_inside_vs_outside_mask_differ_by_gain_times_mean() {
        let world = MockWorld::planted(3, 0);
        let backend = MockBackend::new(world.clone()).unwrap();
        let prompt = PromptSpec::label(world.classes[0].label_text.clone()).unwrap();
        let grid = Array2::from_shape_fn((48, 48), |(i, j)| ((i * 7 + j * 3) % 5) as f32 / 5.0);
        let full = activation_latent(grid, "g");
        // mask of class0 is rows/cols 2..18
        let inside = full.crop(4, 4, 8, 8).unwrap();
        let outside = full.crop(30, 30, 8, 8).unwrap();
        let fi = backend.feature(&inside, &prompt, 1.6, MOCK_LAYER).unwrap();
        let fo = backend.feature(&outside, &prompt, 1.6, MOCK_LAYER).unwrap();
        let mean_a = inside.data.mean().unwrap();
        assert!((fi.values[0] - fo.values[0] - 2.0 * mean_a).abs() < 1e-6);
        assert_eq!(fo.values[0], 0.0);
        assert_eq!(fi.feature_t, 1.6);
    }

    #[test]
    fn render_is_deterministic_and_object_sits_in_mask() {
        let world = MockWorld::planted(3, 4);
        for c in 0..3 {
            let img = world.render(c, 17);
            assert_eq!(img, world.render(c, 17));
            let a = MockWorld::activation(&img);
            let mask = world.mask_grid(c);
            // every colored pixel inside the mask belongs to the object
            let inside: f32 = (&a * &mask).sum();
            assert!(inside >= 0.7 * 100.0 - 1e-3, "object mass {inside}");
        }
    }

    #[test]
    fn mock_teacher_prefers_class_whose_mask_holds_the_tiles() {
        let world = MockWorld::planted(3, 2);
        let names: Vec<String> = world.classes.iter().map(|c| c.name.clone()).collect();
        let teacher = MockTeacher::new(world.clone(), &names).unwrap();
        let img = world.render(1, 0);
        let a = MockWorld::activation(&img);
        // locate the object: brightest 8x8 window inside class1's mask
        let (r0, c0) = (2usize, 30usize);
        let mut best = (0.0f32, r0, c0);
        for r in r0..=r0 + 8 {
            for c in c0..=c0 + 8 {
                let s: f32 = a.slice(ndarray::s![r..r + 8, c..c + 8]).sum();
                if s > best.0 {
                    best = (s, r, c);
                }
            }
        }
        let sid = MockWorld::source_id("class1", 0);
        let tile = TileView {
            source_id: &sid,
            crop_box: CropBox { x: best.2 as u32, y: best.1 as u32, w: 8, h: 8 },
        };
        let probs = teacher
            .probabilities(&[TeacherInput { image: &img, tiles: vec![tile] }])
            .unwrap();
        let p = &probs[0];
        assert!(p[1] > p[0] && p[1] > p[2], "{p:?}");
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
