//! End-to-end run: ingest, score, cluster, select, reconstruct, label.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use image::{Rgb, RgbImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::aggregation::{
    allocate_quota, median, select_final_patches, ClusterConfig, ClusterReport, KMeansFit, Mode, Pick, PickSource, Quota,
    RemainderOrder,
};
use crate::backend::{
    Backend, CachedBackend, MockBackend, MockTeacher, PromptSpec, RemoteBackend, RemoteTeacher, Teacher,
    UniformTeacher,
};
use crate::calibration::{
    over_seeds, pixel_features, soft_labels_for, train_student, evaluate_student, write_soft_labels, SeedStats,
    SoftLabelRecord, TrainConfig,
};
use crate::config::{BackendConfig, DistillConfig, TeacherConfig};
use crate::dataset::{sample_subset, DatasetCatalog, ImageSource, SourceSpec};
use crate::manifest::{
    ClassSummary, ManifestHeader, SyntheticItem, SyntheticManifest, TileRecord, MANIFEST_FILE, MANIFEST_FORMAT,
};
use crate::reconstruction::{crop_patch, render_item, resize_patch, save_png, write_item_images, CropBox, RESIZE_FILTER};
use crate::score::{score_image, PatchCandidate};
use crate::seed::{derive_seed, rng_for};
use crate::{Error, Result};

pub const CLUSTER_DUMP_FILE: &str = "clusters.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// JSON-lines progress log.
pub struct EventLog {
    out: Mutex<Box<dyn Write + Send>>,
    start: Instant,
}

impl EventLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        Self { out: Mutex::new(out), start: Instant::now() }
    }

    pub fn stderr() -> Self {
        Self::new(Box::new(std::io::stderr()))
    }

    pub fn sink() -> Self {
        Self::new(Box::new(std::io::sink()))
    }

    pub fn emit(&self, event: &str, mut fields: serde_json::Value) {
        if let Some(obj) = fields.as_object_mut() {
            obj.insert("event".into(), event.into());
            obj.insert("elapsed_ms".into(), (self.start.elapsed().as_millis() as u64).into());
        }
        let mut out = self.out.lock().expect("event log lock");
        // progress output is best effort
        let _ = writeln!(out, "{fields}");
    }
}

/// Everything a run needs besides the config itself.
pub struct RunContext {
    pub cfg: DistillConfig,
    pub classes: Vec<(String, String)>,
    pub source: SourceSpec,
    pub catalog: DatasetCatalog,
    pub backend: Arc<dyn Backend>,
}

impl RunContext {
    pub fn from_config(cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.with_derived_seeds();
        let world = cfg.mock_world()?;
        let classes = cfg.resolved_classes(world.as_ref())?;
        let (source, catalog, backend): (SourceSpec, DatasetCatalog, Arc<dyn Backend>) = match &cfg.backend {
            BackendConfig::Mock { images_per_class, .. } => {
                let world = world.expect("mock backend has a world");
                let catalog = DatasetCatalog::mock(&world, &classes, *images_per_class)?;
                let backend = MockBackend::new(world.clone()).map_err(|e| Error::Config(e.to_string()))?;
                (SourceSpec::Mock { world }, catalog, Arc::new(backend))
            }
            BackendConfig::Remote { endpoint } => {
                let root = cfg.dataset_root.clone().expect("validated");
                let catalog = DatasetCatalog::scan_folder(&root, &classes)?;
                let backend = RemoteBackend::new(endpoint);
                backend
                    .health()
                    .map_err(|e| Error::backend(format!("health check of {endpoint}"), e))?;
                (SourceSpec::Folder { root, resize_edge: cfg.resize_edge }, catalog, Arc::new(backend))
            }
        };
        Ok(Self { cfg, classes, source, catalog, backend })
    }

    /// Same context with another backend (e.g. a remote client against a
    /// test server).
    pub fn with_backend(mut self, backend: Arc<dyn Backend>) -> Self {
        self.backend = backend;
        self
    }

    fn cluster_config(&self, class: &str) -> ClusterConfig {
        ClusterConfig {
            rng_seed: derive_seed(self.cfg.cluster.rng_seed, &format!("cluster/{class}")),
            ..self.cfg.cluster.clone()
        }
    }

    pub fn subset(&self, class_idx: usize) -> Result<Vec<String>> {
        let entry = &self.catalog.classes[class_idx];
        sample_subset(
            &entry.sources,
            self.cfg.images_per_class,
            derive_seed(self.cfg.seed, &format!("subset/{}", entry.name)),
        )
    }
}

pub fn make_teacher(spec: &TeacherConfig, source: &SourceSpec, classes: &[String]) -> Result<Box<dyn Teacher>> {
    Ok(match spec {
        TeacherConfig::Mock => {
            let SourceSpec::Mock { world } = source else {
                return Err(Error::Config("the mock teacher needs a mock source".into()));
            };
            Box::new(MockTeacher::new(world.clone(), classes).map_err(|e| Error::Config(e.to_string()))?)
        }
        TeacherConfig::Uniform => Box::new(UniformTeacher { classes: classes.to_vec() }),
        TeacherConfig::Remote { endpoint } => Box::new(
            RemoteTeacher::connect(endpoint).map_err(|e| Error::backend(format!("teacher at {endpoint}"), e))?,
        ),
    })
}

/// One scored window together with its clustering feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPatch {
    pub candidate: PatchCandidate,
    pub rho_image: f64,
    pub feature: Vec<f32>,
}

/// Per-class result of scoring and clustering, before rendering.
#[derive(Debug, Clone)]
pub struct ClassSelection {
    pub class_name: String,
    pub label_text: String,
    pub n_images: usize,
    pub patches: Vec<ScoredPatch>,
    pub report: ClusterReport,
    pub quota: Quota,
    pub picks: Vec<Pick>,
}

fn score_one(ctx: &RunContext, backend: &dyn Backend, label: &PromptSpec, source_id: &str) -> Result<Vec<ScoredPatch>> {
    let cfg = &ctx.cfg;
    let img = ctx.source.load(source_id)?;
    let latent = backend
        .encode(&img, source_id)
        .map_err(|e| Error::backend(format!("encode {source_id}"), e))?;
    let scored = score_image(backend, &latent, label, &cfg.score, cfg.window, cfg.candidates_per_image)
        .map_err(|e| match e {
            Error::Backend { context, source } => Error::backend(format!("{source_id}: {context}"), source),
            other => other,
        })?;
    let (w, h) = img.dimensions();
    let mut crops = Vec::with_capacity(scored.candidates.len());
    for c in &scored.candidates {
        if !c.pixel_box.fits(w, h) {
            return Err(Error::InvalidInput(format!(
                "{source_id}: patch box {:?} outside the {w}x{h} source",
                c.pixel_box
            )));
        }
        let (r, col) = c.top_left_latent;
        let size = c.window.size_latent;
        crops.push(
            latent
                .crop(r - latent.origin.0, col - latent.origin.1, size, size)
                .map_err(|e| Error::backend(format!("crop {source_id}"), e))?,
        );
    }
    let features = backend
        .features(&crops, label, cfg.feature_t, &cfg.feature_layer())
        .map_err(|e| Error::backend(format!("features {source_id}"), e))?;
    if features.len() != crops.len() {
        return Err(Error::backend(
            format!("features {source_id}"),
            crate::backend::BackendError::ShapeMismatch("feature count differs from request".into()),
        ));
    }
    Ok(scored
        .candidates
        .into_iter()
        .zip(features)
        .map(|(candidate, f)| ScoredPatch { candidate, rho_image: scored.rho_image, feature: f.values })
        .collect())
}

/// Score every sampled image of one class, cluster the kept windows and pick
/// the quota.
pub fn select_class(ctx: &RunContext, backend: &dyn Backend, class_idx: usize, log: &EventLog) -> Result<ClassSelection> {
    let (name, label_text) = ctx.classes[class_idx].clone();
    let label = PromptSpec::label(label_text.clone()).map_err(|e| Error::Config(e.to_string()))?;
    let subset = ctx.subset(class_idx)?;
    log.emit("class_start", json!({"class": name, "images": subset.len()}));

    let per_image = subset
        .par_iter()
        .map(|sid| score_one(ctx, backend, &label, sid))
        .collect::<Result<Vec<_>>>()?;
    let patches: Vec<ScoredPatch> = per_image.into_iter().flatten().collect();
    log.emit("class_scored", json!({"class": name, "candidates": patches.len()}));

    let mode = ctx.cfg.effective_mode();
    let quota = allocate_quota(ctx.cfg.ipc, ctx.cfg.cluster.n_top, mode)?;
    if quota.needed > patches.len() {
        return Err(Error::Infeasible(format!(
            "class {name}: {} patches needed but only {} candidates from {} images",
            quota.needed,
            patches.len(),
            subset.len()
        )));
    }
    let dim = patches[0].feature.len();
    if patches.iter().any(|p| p.feature.len() != dim) {
        return Err(Error::backend(
            "features",
            crate::backend::BackendError::ShapeMismatch("feature dimension varies within a run".into()),
        ));
    }
    let points: Vec<Vec<f64>> = patches
        .iter()
        .map(|p| p.feature.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let rho: Vec<f64> = patches.iter().map(|p| p.candidate.rho).collect();
    let ids: Vec<String> = patches
        .iter()
        .map(|p| {
            let (r, c) = p.candidate.top_left_latent;
            format!("{}@{r},{c}", p.candidate.source_id)
        })
        .collect();
    let report = ClusterReport::build(&points, &rho, &ids, &ctx.cluster_config(&name))?;
    let picks = select_final_patches(&report, &quota, ctx.cfg.cluster.n_top, &rho, ctx.cfg.remainder_order)?;
    log.emit(
        "class_clustered",
        json!({"class": name, "k": report.fit.k(), "inertia": report.fit.inertia, "picked": picks.len()}),
    );
    Ok(ClassSelection {
        class_name: name,
        label_text,
        n_images: subset.len(),
        patches,
        report,
        quota,
        picks,
    })
}

/// Item order: mosaics take consecutive groups of four picks in cluster-major
/// order; single items go round-robin over the top clusters by intra rank so
/// every prefix is itself a balanced selection.
pub fn order_picks(picks: &[Pick], mode: Mode) -> Vec<Pick> {
    match mode {
        Mode::Mosaic => picks.to_vec(),
        Mode::Single => {
            let mut clustered: Vec<Pick> = picks.iter().copied().filter(|p| p.source != PickSource::Remainder).collect();
            clustered.sort_by_key(|p| match p.source {
                PickSource::Cluster { inter_rank, intra_rank } => (intra_rank, inter_rank),
                PickSource::Remainder => unreachable!(),
            });
            clustered.extend(picks.iter().copied().filter(|p| p.source == PickSource::Remainder));
            clustered
        }
    }
}

fn tile_record(source_id: &str, crop_box: CropBox, rho: f64, cluster: usize, intra_rank: usize, pick: &Pick) -> TileRecord {
    TileRecord {
        source_id: source_id.to_string(),
        crop_box,
        rho,
        cluster,
        inter_rank: match pick.source {
            PickSource::Cluster { inter_rank, .. } => Some(inter_rank),
            PickSource::Remainder => None,
        },
        intra_rank,
    }
}

fn group_items(tiles: Vec<TileRecord>, class_index: usize, class_name: &str, mode: Mode) -> Vec<SyntheticItem> {
    tiles
        .chunks(mode.tiles())
        .enumerate()
        .map(|(item_index, group)| SyntheticItem {
            class_index,
            class_name: class_name.to_string(),
            item_index,
            mode,
            file: SyntheticItem::file_name(class_name, item_index),
            tiles: group.to_vec(),
        })
        .collect()
}

fn items_for(sel: &ClassSelection, class_index: usize, mode: Mode) -> Vec<SyntheticItem> {
    let intra = sel.report.intra_rank();
    let tiles = order_picks(&sel.picks, mode)
        .iter()
        .map(|p| {
            let c = &sel.patches[p.candidate].candidate;
            tile_record(&c.source_id, c.pixel_box, c.rho, sel.report.fit.assignment[p.candidate], intra[p.candidate], p)
        })
        .collect();
    group_items(tiles, class_index, &sel.class_name, mode)
}

fn summary_for(sel: &ClassSelection) -> ClassSummary {
    let members = sel.report.fit.members();
    ClassSummary {
        class_name: sel.class_name.clone(),
        label_text: sel.label_text.clone(),
        n_images: sel.n_images,
        n_candidates: sel.patches.len(),
        inter_order: sel.report.inter_order.clone(),
        cluster_sizes: members.iter().map(Vec::len).collect(),
        cluster_median_rho: members
            .iter()
            .map(|m| median(&m.iter().map(|&i| sel.patches[i].candidate.rho).collect::<Vec<_>>()))
            .collect(),
    }
}

/// Build the manifest (no I/O besides backend calls).
pub fn distill(ctx: &RunContext, log: &EventLog) -> Result<(SyntheticManifest, Vec<ClassSelection>)> {
    let backend = CachedBackend::new(ctx.backend.clone());
    let mode = ctx.cfg.effective_mode();
    let mut selections = Vec::with_capacity(ctx.classes.len());
    for class_idx in 0..ctx.classes.len() {
        selections.push(select_class(ctx, &backend, class_idx, log)?);
    }
    let items = selections
        .iter()
        .enumerate()
        .flat_map(|(ci, sel)| items_for(sel, ci, mode))
        .collect();
    let effective = ctx.cfg.effective_json()?;
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        config_hash: crate::seed::sha256_hex(serde_json::to_string(&effective)?.as_bytes()),
        seed: ctx.cfg.seed,
        mode,
        ipc: ctx.cfg.ipc,
        classes: ctx.classes.iter().map(|(n, _)| n.clone()).collect(),
        window: ctx.cfg.window,
        score: ctx.cfg.score.clone(),
        cluster: ctx.cfg.cluster.clone(),
        remainder_order: ctx.cfg.remainder_order,
        images_per_class: ctx.cfg.images_per_class,
        candidates_per_image: ctx.cfg.candidates_per_image,
        resize_filter: RESIZE_FILTER.into(),
        output_size: ctx.cfg.output_size,
        source: ctx.source.clone(),
        summaries: selections.iter().map(summary_for).collect(),
        effective_config: effective,
    };
    let manifest = SyntheticManifest { header, items };
    manifest.validate()?;
    Ok((manifest, selections))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub format: String,
    pub source: SourceSpec,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpPatch {
    /// Position in the class's candidate list.
    pub candidate: usize,
    pub source_id: String,
    pub crop_box: CropBox,
    pub rho: f64,
    pub cluster: usize,
    pub intra_rank: usize,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDump {
    pub class_name: String,
    pub inter_order: Vec<usize>,
    /// Indexed by cluster id, members in intra order.
    pub clusters: Vec<Vec<DumpPatch>>,
}

pub fn cluster_dump(sel: &ClassSelection) -> ClassDump {
    let intra = sel.report.intra_rank();
    ClassDump {
        class_name: sel.class_name.clone(),
        inter_order: sel.report.inter_order.clone(),
        clusters: sel
            .report
            .intra_order
            .iter()
            .enumerate()
            .map(|(c, members)| {
                members
                    .iter()
                    .map(|&i| {
                        let p = &sel.patches[i];
                        DumpPatch {
                            candidate: i,
                            source_id: p.candidate.source_id.clone(),
                            crop_box: p.candidate.pixel_box,
                            rho: p.candidate.rho,
                            cluster: c,
                            intra_rank: intra[i],
                            feature: p.feature.clone(),
                        }
                    })
                    .collect()
            })
            .collect(),
    }
}

pub fn write_cluster_dump(path: &Path, source: &SourceSpec, selections: &[ClassSelection]) -> Result<()> {
    let header = DumpHeader {
        format: "patch-distill-clusters/1".into(),
        source: source.clone(),
        classes: selections.iter().map(|s| s.class_name.clone()).collect(),
    };
    let mut text = serde_json::to_string(&header)?;
    text.push('\n');
    for sel in selections {
        text.push_str(&serde_json::to_string(&cluster_dump(sel))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_cluster_dump(path: &Path) -> Result<(DumpHeader, Vec<ClassDump>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: DumpHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| Error::InvalidInput(format!("{} is empty", path.display())))?,
    )?;
    let classes = lines.map(serde_json::from_str).collect::<std::result::Result<Vec<ClassDump>, _>>()?;
    Ok((header, classes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLegendTile {
    pub source_id: String,
    pub crop_box: CropBox,
    pub rho: f64,
    pub intra_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLegendRow {
    pub cluster: usize,
    pub inter_rank: usize,
    pub tiles: Vec<GridLegendTile>,
    /// Neutral tiles appended because the cluster had fewer than `m` members.
    pub padded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLegend {
    pub class_name: String,
    pub tile_size: u32,
    pub rows: Vec<GridLegendRow>,
}

pub const NEUTRAL_GRAY: Rgb<u8> = Rgb([128, 128, 128]);

/// `n` rows (top clusters) by `m` columns (best members) of patches.
pub fn emit_cluster_grid(
    dump: &ClassDump,
    source: &dyn ImageSource,
    n: usize,
    m: usize,
    tile_size: u32,
) -> Result<(RgbImage, GridLegend)> {
    if n == 0 || m == 0 || tile_size == 0 {
        return Err(Error::InvalidInput("grid needs n, m and tile size >= 1".into()));
    }
    let rows: Vec<usize> = dump.inter_order.iter().copied().take(n).collect();
    let mut img = RgbImage::from_pixel(m as u32 * tile_size, rows.len() as u32 * tile_size, NEUTRAL_GRAY);
    let mut legend = GridLegend { class_name: dump.class_name.clone(), tile_size, rows: Vec::new() };
    for (r, &cluster) in rows.iter().enumerate() {
        let members = dump
            .clusters
            .get(cluster)
            .ok_or_else(|| Error::InvalidInput(format!("dump has no cluster {cluster}")))?;
        let mut row = GridLegendRow { cluster, inter_rank: r, tiles: Vec::new(), padded: 0 };
        for (c, p) in members.iter().take(m).enumerate() {
            let patch = resize_patch(&crop_patch(&source.load(&p.source_id)?, p.crop_box)?, tile_size);
            image::imageops::replace(&mut img, &patch, i64::from(c as u32 * tile_size), i64::from(r as u32 * tile_size));
            row.tiles.push(GridLegendTile {
                source_id: p.source_id.clone(),
                crop_box: p.crop_box,
                rho: p.rho,
                intra_rank: p.intra_rank,
            });
        }
        row.padded = m - row.tiles.len();
        legend.rows.push(row);
    }
    Ok((img, legend))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_name: String,
    pub images: usize,
    pub candidates: usize,
    pub clusters: usize,
    pub cluster_sizes: Vec<usize>,
    pub inter_order: Vec<usize>,
    pub inertia: f64,
    pub quota: Quota,
    pub remainder_picks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub mode: Mode,
    pub ipc: usize,
    pub items: usize,
    pub classes: Vec<ClassReport>,
    pub soft_labels: bool,
}

#[derive(Debug)]
pub struct RunOutput {
    pub manifest: SyntheticManifest,
    pub manifest_path: PathBuf,
    pub report: RunReport,
    pub soft_labels: Option<Vec<SoftLabelRecord>>,
}

/// Full run: manifest, images, cluster dump, report and (with a teacher)
/// soft labels under `cfg.out_dir`.
pub fn run_distill(ctx: &RunContext, log: &EventLog) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| run_inner(ctx, log))
}

fn run_inner(ctx: &RunContext, log: &EventLog) -> Result<RunOutput> {
    let out = &ctx.cfg.out_dir;
    log.emit("run_start", json!({"classes": ctx.classes.len(), "ipc": ctx.cfg.ipc}));
    let (manifest, selections) = distill(ctx, log)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_item_images(&manifest, &ctx.source, out)?;
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;
    write_cluster_dump(&out.join(CLUSTER_DUMP_FILE), &ctx.source, &selections)?;
    log.emit("images_written", json!({"items": manifest.items.len()}));

    let soft_labels = match &ctx.cfg.teacher {
        Some(t) => {
            let teacher = make_teacher(t, &ctx.source, &manifest.header.classes)?;
            let records = crate::calibration::generate_soft_labels(&manifest, out, teacher.as_ref())?;
            write_soft_labels(out, &teacher.class_names(), &records)?;
            log.emit("soft_labels_written", json!({"records": records.len()}));
            Some(records)
        }
        None => None,
    };

    let report = RunReport {
        config_hash: manifest.header.config_hash.clone(),
        mode: manifest.header.mode,
        ipc: manifest.header.ipc,
        items: manifest.items.len(),
        classes: selections
            .iter()
            .map(|s| ClassReport {
                class_name: s.class_name.clone(),
                images: s.n_images,
                candidates: s.patches.len(),
                clusters: s.report.fit.k(),
                cluster_sizes: s.report.fit.members().iter().map(Vec::len).collect(),
                inter_order: s.report.inter_order.clone(),
                inertia: s.report.fit.inertia,
                quota: s.quota,
                remainder_picks: s.picks.iter().filter(|p| p.source == PickSource::Remainder).count(),
            })
            .collect(),
        soft_labels: soft_labels.is_some(),
    };
    let report_path = out.join(REPORT_FILE);
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")
        .map_err(|e| Error::io(&report_path, e))?;
    log.emit("run_done", json!({"items": report.items}));
    Ok(RunOutput { manifest, manifest_path, report, soft_labels })
}

/// Re-applies the quota for `ipc` to a class's dumped candidates, giving the
/// tiles a fresh run would emit.
fn reselect(dump: &ClassDump, cluster: &ClusterConfig, ipc: usize, mode: Mode, order: RemainderOrder) -> Result<Vec<TileRecord>> {
    let n: usize = dump.clusters.iter().map(Vec::len).sum();
    let mut slots: Vec<Option<&DumpPatch>> = vec![None; n];
    for p in dump.clusters.iter().flatten() {
        match slots.get_mut(p.candidate) {
            Some(slot @ None) => *slot = Some(p),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "cluster dump of {}: bad candidate index {}",
                    dump.class_name, p.candidate
                )))
            }
        }
    }
    let patches: Vec<&DumpPatch> = slots.into_iter().flatten().collect();
    let report = ClusterReport {
        fit: KMeansFit {
            centroids: vec![Vec::new(); dump.clusters.len()],
            assignment: patches.iter().map(|p| p.cluster).collect(),
            inertia: 0.0,
            inertia_trace: Vec::new(),
        },
        intra_order: dump.clusters.iter().map(|m| m.iter().map(|p| p.candidate).collect()).collect(),
        inter_order: dump.inter_order.clone(),
    };
    let rho: Vec<f64> = patches.iter().map(|p| p.rho).collect();
    let quota = allocate_quota(ipc, cluster.n_top, mode)?;
    let picks = select_final_patches(&report, &quota, cluster.n_top, &rho, order)?;
    Ok(order_picks(&picks, mode)
        .iter()
        .map(|pick| {
            let p = patches[pick.candidate];
            tile_record(&p.source_id, p.crop_box, p.rho, p.cluster, p.intra_rank, pick)
        })
        .collect())
}

/// Restrict a run to `classes` at a smaller IPC without touching the backend.
/// With the run's cluster dump the quota is re-applied to every candidate, so
/// the result always equals a fresh run at that setting; without it only
/// exact prefixes are accepted.
pub fn slice_manifest(
    manifest: &SyntheticManifest,
    dump: Option<&[ClassDump]>,
    classes: &[String],
    ipc: usize,
) -> Result<SyntheticManifest> {
    let Some(dump) = dump else {
        return manifest.slice(classes, ipc);
    };
    let (header, index) = manifest.sliced_header(classes, ipc)?;
    let h = &manifest.header;
    let mut items = Vec::with_capacity(classes.len() * ipc);
    for (new_idx, &old_idx) in index.iter().enumerate() {
        let name = &h.classes[old_idx];
        let d = dump
            .iter()
            .find(|d| &d.class_name == name)
            .ok_or_else(|| Error::InvalidInput(format!("cluster dump has no class {name}")))?;
        let own: Vec<TileRecord> = manifest
            .items
            .iter()
            .filter(|it| it.class_index == old_idx)
            .flat_map(|it| it.tiles.iter().cloned())
            .collect();
        if reselect(d, &h.cluster, h.ipc, h.mode, h.remainder_order)? != own {
            return Err(Error::InvalidInput(format!(
                "cluster dump does not match the manifest for class {name}"
            )));
        }
        let tiles = reselect(d, &h.cluster, ipc, h.mode, h.remainder_order)?;
        items.extend(group_items(tiles, new_idx, name, h.mode));
    }
    let m = SyntheticManifest { header, items };
    m.validate()?;
    Ok(m)
}

/// Write a sliced manifest under `out_dir`. Images identical to an item of
/// `original` are copied from `src_dir`; the rest are rendered from the source
/// images. The cluster dump is carried along when present.
pub fn write_slice(sliced: &SyntheticManifest, original: &SyntheticManifest, src_dir: &Path, out_dir: &Path) -> Result<PathBuf> {
    for class in &sliced.header.classes {
        let d = out_dir.join(class);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    sliced.items.par_iter().try_for_each(|item| -> Result<()> {
        let to = out_dir.join(&item.file);
        let same = original
            .items
            .iter()
            .find(|o| o.class_name == item.class_name && o.tiles == item.tiles);
        if let Some(o) = same {
            let from = src_dir.join(&o.file);
            if from.exists() {
                if from != to {
                    std::fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
                }
                return Ok(());
            }
        }
        save_png(&render_item(item, &sliced.header.source, sliced.header.output_size)?, &to)
    })?;
    let dump = src_dir.join(CLUSTER_DUMP_FILE);
    let dump_to = out_dir.join(CLUSTER_DUMP_FILE);
    if dump.exists() && dump != dump_to {
        std::fs::copy(&dump, &dump_to).map_err(|e| Error::io(&dump, e))?;
    }
    let path = out_dir.join(MANIFEST_FILE);
    sliced.write(&path)?;
    Ok(path)
}

/// Same classes, subsets and tile geometry as `manifest`, but every tile is a
/// uniformly random window of a uniformly random subset image.
pub fn random_patch_manifest(manifest: &SyntheticManifest, seed: u64) -> Result<SyntheticManifest> {
    let cfg: DistillConfig = serde_json::from_value(manifest.header.effective_config.clone())
        .map_err(|e| Error::InvalidInput(format!("manifest effective config: {e}")))?;
    let world = match &manifest.header.source {
        SourceSpec::Mock { world } => Some(world.clone()),
        SourceSpec::Folder { .. } => None,
    };
    let classes = cfg.resolved_classes(world.as_ref())?;
    let catalog = match &manifest.header.source {
        SourceSpec::Mock { world } => {
            let per = match &cfg.backend {
                BackendConfig::Mock { images_per_class, .. } => *images_per_class,
                BackendConfig::Remote { .. } => unreachable!("mock source implies mock backend"),
            };
            DatasetCatalog::mock(world, &classes, per)?
        }
        SourceSpec::Folder { root, .. } => DatasetCatalog::scan_folder(root, &classes)?,
    };
    let source = &manifest.header.source;
    let mut items = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let entry = &catalog.classes[item.class_index];
        let subset = sample_subset(
            &entry.sources,
            cfg.images_per_class,
            derive_seed(cfg.seed, &format!("subset/{}", entry.name)),
        )?;
        let mut rng = rng_for(seed, &format!("random-patch/{}/{}", entry.name, item.item_index));
        let mut it = item.clone();
        for tile in &mut it.tiles {
            let sid = subset[rng.random_range(0..subset.len())].clone();
            let (w, h) = source.load(&sid)?.dimensions();
            let (bw, bh) = (tile.crop_box.w.min(w), tile.crop_box.h.min(h));
            *tile = TileRecord {
                source_id: sid,
                crop_box: CropBox {
                    x: rng.random_range(0..=w - bw),
                    y: rng.random_range(0..=h - bh),
                    w: bw,
                    h: bh,
                },
                rho: 0.0,
                cluster: 0,
                inter_rank: None,
                intra_rank: 0,
            };
        }
        items.push(it);
    }
    Ok(SyntheticManifest { header: manifest.header.clone(), items })
}

/// Labeled held-out images in the student's input space.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Mock images with indices `offset..offset + per_class`, labeled by their
/// position in `class_names`.
pub fn mock_test_set(
    world: &crate::backend::MockWorld,
    class_names: &[String],
    per_class: usize,
    offset: usize,
    input_size: u32,
) -> Result<TestSet> {
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for (label, name) in class_names.iter().enumerate() {
        let ci = world
            .class_index(name)
            .ok_or_else(|| Error::InvalidInput(format!("class {name} not in the mock world")))?;
        for i in offset..offset + per_class {
            xs.push(pixel_features(&world.render(ci, i), input_size));
            labels.push(label);
        }
    }
    Ok(TestSet { xs, labels })
}

/// All images under `<root>/<class>/`, resized to `resize_edge` then to the
/// student input.
pub fn folder_test_set(root: &Path, class_names: &[String], resize_edge: u32, input_size: u32) -> Result<TestSet> {
    let pairs: Vec<(String, String)> = class_names.iter().map(|c| (c.clone(), c.clone())).collect();
    let catalog = DatasetCatalog::scan_folder(root, &pairs)?;
    let source = SourceSpec::Folder { root: root.to_path_buf(), resize_edge };
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for (label, entry) in catalog.classes.iter().enumerate() {
        for sid in &entry.sources {
            xs.push(pixel_features(&source.load(sid)?, input_size));
            labels.push(label);
        }
    }
    Ok(TestSet { xs, labels })
}

/// Train one student per seed on `manifest` (images rendered from its tile
/// records) with teacher soft labels, and report test accuracy.
pub fn train_and_evaluate(
    manifest: &SyntheticManifest,
    images: &[RgbImage],
    labels: &[SoftLabelRecord],
    test: &TestSet,
    train: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    if images.len() != manifest.items.len() || labels.len() != images.len() {
        return Err(Error::InvalidInput("images, labels and items must align".into()));
    }
    let xs: Vec<Vec<f64>> = images.iter().map(|img| pixel_features(img, train.input_size)).collect();
    let ts: Vec<Vec<f64>> = labels
        .iter()
        .map(|r| r.probs.iter().map(|&p| f64::from(p)).collect())
        .collect();
    let out = train_student(&xs, &ts, &TrainConfig { rng_seed: seed, ..train.clone() })?;
    evaluate_student(&out.model, &test.xs, &test.labels)
}

pub fn render_items(manifest: &SyntheticManifest) -> Result<Vec<RgbImage>> {
    manifest
        .items
        .par_iter()
        .map(|item| render_item(item, &manifest.header.source, manifest.header.output_size))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Baseline {
    /// Evaluate the manifest's own selection.
    Selected,
    /// Replace every tile with a random window, re-drawn per seed.
    RandomPatches,
}

/// Multi-seed evaluation of the manifest's selection or of the random-patch
/// baseline built from it.
pub fn evaluate_manifest(
    manifest: &SyntheticManifest,
    teacher: &dyn Teacher,
    test: &TestSet,
    train: &TrainConfig,
    seeds: &[u64],
    baseline: Baseline,
) -> Result<SeedStats> {
    match baseline {
        Baseline::Selected => {
            let images = render_items(manifest)?;
            let labels = soft_labels_for(manifest, &images, teacher)?;
            over_seeds(seeds, |s| train_and_evaluate(manifest, &images, &labels, test, train, s))
        }
        Baseline::RandomPatches => over_seeds(seeds, |s| {
            let m = random_patch_manifest(manifest, s)?;
            let images = render_items(&m)?;
            let labels = soft_labels_for(&m, &images, teacher)?;
            train_and_evaluate(&m, &images, &labels, test, train, s)
        }),
    }
}
