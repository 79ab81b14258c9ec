//! Image catalogs, source loading and seeded subset sampling.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::backend::MockWorld;
use crate::seed::rng_for;
use crate::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub label_text: String,
    /// Source ids in catalog order.
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCatalog {
    pub classes: Vec<ClassEntry>,
}

impl DatasetCatalog {
    /// `<root>/<class>/*.{png,jpg,jpeg}`, files sorted by name. Source ids
    /// are `<class>/<file>`.
    pub fn scan_folder(root: &Path, classes: &[(String, String)]) -> Result<Self> {
        let mut entries = Vec::with_capacity(classes.len());
        for (name, label_text) in classes {
            let dir = root.join(name);
            let rd = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut files = Vec::new();
            for entry in rd {
                let entry = entry.map_err(|e| Error::io(&dir, e))?;
                let path = entry.path();
                let ext = path
                    .extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.to_ascii_lowercase());
                if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                    if let Some(f) = path.file_name().and_then(|f| f.to_str()) {
                        files.push(format!("{name}/{f}"));
                    }
                }
            }
            files.sort();
            if files.is_empty() {
                return Err(Error::Config(format!("class {name} has no images in {}", dir.display())));
            }
            entries.push(ClassEntry {
                name: name.clone(),
                label_text: label_text.clone(),
                sources: files,
            });
        }
        Ok(Self { classes: entries })
    }

    /// Indices `0..per_class` of each listed mock class.
    pub fn mock(world: &MockWorld, classes: &[(String, String)], per_class: usize) -> Result<Self> {
        if per_class == 0 {
            return Err(Error::Config("mock catalog needs at least one image per class".into()));
        }
        let entries = classes
            .iter()
            .map(|(name, label_text)| {
                if world.class_index(name).is_none() {
                    return Err(Error::Config(format!("class {name} is not in the mock world")));
                }
                Ok(ClassEntry {
                    name: name.clone(),
                    label_text: label_text.clone(),
                    sources: (0..per_class).map(|i| MockWorld::source_id(name, i)).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { classes: entries })
    }
}

/// Uniform sample of `min(k, len)` sources without replacement, returned in
/// catalog order. `k >= len` keeps the full list.
pub fn sample_subset(sources: &[String], k: usize, seed: u64) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::Config("subset size must be >= 1".into()));
    }
    if sources.is_empty() {
        return Err(Error::InvalidInput("cannot sample from an empty class".into()));
    }
    if k >= sources.len() {
        return Ok(sources.to_vec());
    }
    let mut rng = rng_for(seed, "subset");
    let mut idx = sample(&mut rng, sources.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| sources[i].clone()).collect())
}

/// Scale so the shorter edge equals `edge`, keeping the aspect ratio.
pub fn resize_shortest_edge(img: &RgbImage, edge: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let short = w.min(h);
    if short == edge || short == 0 {
        return img.clone();
    }
    let scale = f64::from(edge) / f64::from(short);
    let nw = ((f64::from(w) * scale).round() as u32).max(1);
    let nh = ((f64::from(h) * scale).round() as u32).max(1);
    let (nw, nh) = if w <= h { (edge, nh) } else { (nw, edge) };
    image::imageops::resize(img, nw, nh, FilterType::Triangle)
}

/// Where the pixels behind source ids come from. Crop boxes refer to the
/// image returned by [`ImageSource::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    /// Procedurally rendered; used at native resolution.
    Mock { world: MockWorld },
    Folder { root: PathBuf, resize_edge: u32 },
}

pub trait ImageSource: Send + Sync {
    fn load(&self, source_id: &str) -> Result<RgbImage>;
}

impl ImageSource for SourceSpec {
    fn load(&self, source_id: &str) -> Result<RgbImage> {
        match self {
            SourceSpec::Mock { world } => world
                .render_source(source_id)
                .map_err(|e| Error::backend(format!("render {source_id}"), e)),
            SourceSpec::Folder { root, resize_edge } => {
                let path = root.join(source_id);
                let img = image::open(&path)
                    .map_err(|e| match e {
                        image::ImageError::IoError(io) => Error::io(&path, io),
                        other => Error::Image(other),
                    })?
                    .to_rgb8();
                Ok(resize_shortest_edge(&img, *resize_edge))
            }
        }
    }
}
