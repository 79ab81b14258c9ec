//! `manifest.jsonl`: a header line followed by one line per synthetic item.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::{ClusterConfig, Mode, RemainderOrder};
use crate::dataset::SourceSpec;
use crate::reconstruction::CropBox;
use crate::score::{PatchWindow, ScoreConfig};
use crate::{Error, Result};

pub const MANIFEST_FORMAT: &str = "patch-distill-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_name: String,
    pub label_text: String,
    pub n_images: usize,
    pub n_candidates: usize,
    /// Cluster ids by descending median representativeness.
    pub inter_order: Vec<usize>,
    /// Indexed by cluster id.
    pub cluster_sizes: Vec<usize>,
    pub cluster_median_rho: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    /// SHA-256 of the canonical effective configuration.
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub ipc: usize,
    pub classes: Vec<String>,
    pub window: PatchWindow,
    pub score: ScoreConfig,
    pub cluster: ClusterConfig,
    pub remainder_order: RemainderOrder,
    pub images_per_class: usize,
    pub candidates_per_image: usize,
    pub resize_filter: String,
    pub output_size: u32,
    pub source: SourceSpec,
    pub summaries: Vec<ClassSummary>,
    pub effective_config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub source_id: String,
    pub crop_box: CropBox,
    pub rho: f64,
    pub cluster: usize,
    /// `None` for remainder fills.
    pub inter_rank: Option<usize>,
    pub intra_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticItem {
    pub class_index: usize,
    pub class_name: String,
    pub item_index: usize,
    pub mode: Mode,
    /// Relative to the manifest directory.
    pub file: String,
    pub tiles: Vec<TileRecord>,
}

impl SyntheticItem {
    pub fn file_name(class_name: &str, item_index: usize) -> String {
        format!("{class_name}/{item_index}.png")
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiles.len() != self.mode.tiles() {
            return Err(Error::InvalidInput(format!(
                "item {}/{}: {:?} needs {} tiles, has {}",
                self.class_name,
                self.item_index,
                self.mode,
                self.mode.tiles(),
                self.tiles.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub header: ManifestHeader,
    pub items: Vec<SyntheticItem>,
}

impl SyntheticManifest {
    pub fn validate(&self) -> Result<()> {
        if self.header.format != MANIFEST_FORMAT {
            return Err(Error::InvalidInput(format!(
                "unsupported manifest format {:?}",
                self.header.format
            )));
        }
        let n = self.header.classes.len();
        let mut counts = vec![0usize; n];
        for item in &self.items {
            item.validate()?;
            if item.class_index >= n || self.header.classes[item.class_index] != item.class_name {
                return Err(Error::InvalidInput(format!(
                    "item {} references unknown class {}",
                    item.item_index, item.class_name
                )));
            }
            if item.mode != self.header.mode {
                return Err(Error::InvalidInput("item mode differs from header".into()));
            }
            if item.item_index != counts[item.class_index] {
                return Err(Error::InvalidInput(format!(
                    "class {} items out of order at {}",
                    item.class_name, item.item_index
                )));
            }
            counts[item.class_index] += 1;
        }
        if let Some((c, &k)) = counts.iter().enumerate().find(|(_, &k)| k != self.header.ipc) {
            return Err(Error::InvalidInput(format!(
                "class {} has {k} items, expected ipc {}",
                self.header.classes[c], self.header.ipc
            )));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        out.push_str(&self.body_jsonl()?);
        Ok(out)
    }

    /// Item lines only.
    pub fn body_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::read_from(text.as_bytes())
    }

    pub fn read_from(reader: impl std::io::Read) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty manifest".into()))?
            .map_err(|e| Error::io("manifest", e))?;
        let header: ManifestHeader = serde_json::from_str(&first)?;
        let mut items = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io("manifest", e))?;
            if line.trim().is_empty() {
                continue;
            }
            items.push(serde_json::from_str(&line)?);
        }
        let m = Self { header, items };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f)
    }

    /// Restrict to `classes` (renumbered in the given order) and the first
    /// `ipc` items of each.
    /// Header restricted to `classes` at `ipc`, plus the old index of each
    /// kept class.
    pub fn sliced_header(&self, classes: &[String], ipc: usize) -> Result<(ManifestHeader, Vec<usize>)> {
        if ipc == 0 || ipc > self.header.ipc {
            return Err(Error::Infeasible(format!(
                "cannot slice ipc {ipc} from a manifest with ipc {}",
                self.header.ipc
            )));
        }
        if self.header.mode == Mode::Mosaic && ipc != self.header.ipc {
            return Err(Error::Infeasible(
                "mosaic items are built from per-cluster groups; only single-mode manifests can be sliced by ipc".into(),
            ));
        }
        let mut index = Vec::with_capacity(classes.len());
        for name in classes {
            let i = self
                .header
                .classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Config(format!("class {name:?} not in manifest")))?;
            if index.contains(&i) {
                return Err(Error::Config(format!("class {name:?} listed twice")));
            }
            index.push(i);
        }
        let mut header = self.header.clone();
        header.ipc = ipc;
        header.classes = classes.to_vec();
        header.summaries = index.iter().map(|&i| self.header.summaries[i].clone()).collect();
        if let Some(obj) = header.effective_config.as_object_mut() {
            obj.insert("ipc".into(), ipc.into());
            let specs: Vec<serde_json::Value> = match obj.get("classes").and_then(|v| v.as_array()) {
                Some(all) => index.iter().filter_map(|&i| all.get(i).cloned()).collect(),
                None => Vec::new(),
            };
            obj.insert("classes".into(), specs.into());
        }
        header.config_hash = crate::seed::sha256_hex(
            serde_json::to_string(&header.effective_config)?.as_bytes(),
        );
        Ok((header, index))
    }

    /// True when the first `ipc` items of a class are what a fresh run at
    /// `ipc` would select: the quota splits evenly over the top clusters and
    /// none of them runs short.
    pub fn prefix_is_exact(&self, class_index: usize, ipc: usize) -> bool {
        if ipc == self.header.ipc {
            return true;
        }
        let n_top = self.header.cluster.n_top;
        if self.header.mode != Mode::Single || n_top == 0 || !ipc.is_multiple_of(n_top) {
            return false;
        }
        let q = ipc / n_top;
        let Some(s) = self.header.summaries.get(class_index) else {
            return false;
        };
        s.inter_order.len() >= n_top
            && s.inter_order
                .iter()
                .take(n_top)
                .all(|&c| s.cluster_sizes.get(c).is_some_and(|&n| n >= q))
    }

    /// Slice by truncating each class. Fails when a truncation would not
    /// match a fresh run; `pipeline::slice_manifest` handles those cases
    /// from the cluster dump.
    pub fn slice(&self, classes: &[String], ipc: usize) -> Result<Self> {
        let (header, index) = self.sliced_header(classes, ipc)?;
        if let Some(&bad) = index.iter().find(|&&i| !self.prefix_is_exact(i, ipc)) {
            return Err(Error::Infeasible(format!(
                "class {}: the first {ipc} items are not an exact selection at ipc {ipc} \
                 (uneven quota or a short top cluster); slice with the cluster dump",
                self.header.classes[bad]
            )));
        }
        let mut items = Vec::with_capacity(classes.len() * ipc);
        for (new_idx, &old_idx) in index.iter().enumerate() {
            for item in self
                .items
                .iter()
                .filter(|it| it.class_index == old_idx && it.item_index < ipc)
            {
                let mut it = item.clone();
                it.class_index = new_idx;
                items.push(it);
            }
        }
        let m = Self { header, items };
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::backend::MockWorld;

    pub(crate) fn sample_manifest(mode: Mode, ipc: usize, classes: &[&str]) -> SyntheticManifest {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            config_hash: "0".repeat(64),
            seed: 7,
            mode,
            ipc,
            classes: classes.iter().map(|s| s.to_string()).collect(),
            window: PatchWindow { size_latent: 8, stride_latent: 1 },
            score: ScoreConfig::default(),
            cluster: ClusterConfig { n_centers: 2, n_top: 2, ..Default::default() },
            remainder_order: RemainderOrder::Descending,
            images_per_class: 40,
            candidates_per_image: 1,
            resize_filter: "bilinear".into(),
            output_size: 16,
            source: SourceSpec::Mock { world: MockWorld::planted(classes.len(), 1) },
            summaries: classes
                .iter()
                .map(|c| ClassSummary {
                    class_name: c.to_string(),
                    label_text: format!("a {c}"),
                    n_images: 40,
                    n_candidates: 40,
                    inter_order: vec![1, 0],
                    cluster_sizes: vec![19, 21],
                    cluster_median_rho: vec![Some(0.1), Some(0.30000000000000004)],
                })
                .collect(),
            effective_config: serde_json::json!({"ipc": ipc, "classes": classes}),
        };
        let mut items = Vec::new();
        for (ci, c) in classes.iter().enumerate() {
            for k in 0..ipc {
                items.push(SyntheticItem {
                    class_index: ci,
                    class_name: c.to_string(),
                    item_index: k,
                    mode,
                    file: SyntheticItem::file_name(c, k),
                    tiles: (0..mode.tiles())
                        .map(|t| TileRecord {
                            source_id: format!("mock/{c}/{}", k * 4 + t),
                            crop_box: CropBox { x: t as u32, y: 3, w: 8, h: 8 },
                            rho: 0.1 * (k + t) as f64 + 1e-17,
                            cluster: t % 2,
                            inter_rank: if t == 3 { None } else { Some(t % 2) },
                            intra_rank: k,
                        })
                        .collect(),
                });
            }
        }
        SyntheticManifest { header, items }
    }

    #[test]
    fn jsonl_roundtrip_is_lossless() {
        let m = sample_manifest(Mode::Mosaic, 3, &["class0", "class1"]);
        let text = m.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 1 + 6);
        let back = SyntheticManifest::from_jsonl(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_jsonl().unwrap(), text);
    }

    #[test]
    fn item_count_mismatch_rejected() {
        let mut m = sample_manifest(Mode::Single, 2, &["class0"]);
        m.items.pop();
        assert!(SyntheticManifest::from_jsonl(&m.to_jsonl().unwrap()).is_err());
    }

    #[test]
    fn slice_renumbers_and_truncates() {
        let m = sample_manifest(Mode::Single, 5, &["class0", "class1", "class2"]);
        let s = m.slice(&["class2".into(), "class0".into()], 2).unwrap();
        assert_eq!(s.items.len(), 4);
        assert_eq!(s.items[0].class_name, "class2");
        assert_eq!(s.items[0].class_index, 0);
        assert_eq!(s.items[2].class_index, 1);
        assert_eq!(s.header.summaries[0].class_name, "class2");
        assert_eq!(s.header.effective_config["ipc"], 2);
        assert!(m.slice(&["nope".into()], 1).is_err());
        assert!(matches!(m.slice(&["class0".into()], 6), Err(Error::Infeasible(_))));
        // 3 does not split over 2 top clusters
        assert!(matches!(m.slice(&["class0".into()], 3), Err(Error::Infeasible(_))));
        assert!(m.slice(&["class0".into()], 5).is_ok());
    }

    #[test]
    fn short_top_cluster_blocks_prefix() {
        let mut m = sample_manifest(Mode::Single, 8, &["class0"]);
        m.header.summaries[0].cluster_sizes = vec![19, 2];
        assert!(m.prefix_is_exact(0, 4));
        assert!(!m.prefix_is_exact(0, 6));
        assert!(m.prefix_is_exact(0, 8));
        m.header.summaries[0].cluster_sizes = vec![0, 21];
        assert!(!m.prefix_is_exact(0, 2));
    }

    #[test]
    fn mosaic_cannot_be_sliced_by_ipc() {
        let m = sample_manifest(Mode::Mosaic, 2, &["class0"]);
        assert!(m.slice(&["class0".into()], 1).is_err());
        assert!(m.slice(&["class0".into()], 2).is_ok());
    }
}
