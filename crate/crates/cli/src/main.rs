use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use distill_core::aggregation::Mode;
use distill_core::calibration::{generate_soft_labels, write_soft_labels, TrainConfig};
use distill_core::config::{BackendConfig, DistillConfig, TeacherConfig};
use distill_core::dataset::SourceSpec;
use distill_core::manifest::SyntheticManifest;
use distill_core::pipeline::{
    emit_cluster_grid, evaluate_manifest, folder_test_set, make_teacher, mock_test_set, read_cluster_dump,
    run_distill, slice_manifest, write_slice, Baseline, EventLog, RunContext, CLUSTER_DUMP_FILE,
};
use distill_core::Error;

#[derive(Parser)]
#[command(name = "distill", version, about = "Distill an image dataset into a few representative patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score, cluster and select patches, then write images and the manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ipc: Option<usize>,
        #[arg(long)]
        mode: Option<Mode>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Restrict a manifest to some classes and a smaller IPC.
    Slice {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        #[arg(long)]
        ipc: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach teacher soft labels to a manifest.
    Labels {
        #[arg(long)]
        manifest: PathBuf,
        /// `mock`, `uniform` or a sidecar URL.
        #[arg(long)]
        teacher: String,
    },
    /// Patch grid of the top clusters from a cluster dump.
    Grid {
        #[arg(long)]
        dump: PathBuf,
        #[arg(short = 'n', default_value_t = 3)]
        rows: usize,
        #[arg(short = 'm', default_value_t = 5)]
        cols: usize,
        /// Class to draw; defaults to the first one in the dump.
        #[arg(long)]
        class: Option<String>,
        #[arg(long, default_value_t = 64)]
        tile: u32,
        /// PNG path; the legend goes next to it with a `.json` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train students on the distilled set and report test accuracy.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        baseline: Option<BaselineArg>,
        /// `mock`, `uniform` or a sidecar URL; defaults to `mock` on mock data.
        #[arg(long)]
        teacher: Option<String>,
        /// Labeled test images `<root>/<class>/*` (required for folder datasets).
        #[arg(long)]
        test_root: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        input_size: Option<u32>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Random,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Backend { .. } => 3,
        Error::Infeasible(_) => 4,
        _ => 1,
    }
}

fn teacher_spec(arg: &str) -> TeacherConfig {
    match arg {
        "mock" => TeacherConfig::Mock,
        "uniform" => TeacherConfig::Uniform,
        url => TeacherConfig::Remote { endpoint: url.to_string() },
    }
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> distill_core::Result<()> {
    match cli.command {
        Command::Run { config, seed, ipc, mode, out, workers } => {
            let mut cfg = DistillConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = ipc {
                cfg.ipc = n;
            }
            if mode.is_some() {
                cfg.mode = mode;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let ctx = RunContext::from_config(cfg)?;
            let out = run_distill(&ctx, &EventLog::stderr())?;
            println!("{}", out.manifest_path.display());
        }
        Command::Slice { manifest, classes, ipc, out } => {
            let m = SyntheticManifest::read(&manifest)?;
            let dir = manifest_dir(&manifest);
            let dump_path = dir.join(CLUSTER_DUMP_FILE);
            let dump = if dump_path.exists() {
                let (header, dump) = read_cluster_dump(&dump_path)?;
                if header.source != m.header.source {
                    return Err(Error::InvalidInput(format!("{} belongs to another source", dump_path.display())));
                }
                Some(dump)
            } else {
                None
            };
            let classes = classes.unwrap_or_else(|| m.header.classes.clone());
            let sliced = slice_manifest(&m, dump.as_deref(), &classes, ipc)?;
            let path = write_slice(&sliced, &m, &dir, &out)?;
            println!("{}", path.display());
        }
        Command::Labels { manifest, teacher } => {
            let m = SyntheticManifest::read(&manifest)?;
            let dir = manifest_dir(&manifest);
            let t = make_teacher(&teacher_spec(&teacher), &m.header.source, &m.header.classes)?;
            let records = generate_soft_labels(&m, &dir, t.as_ref())?;
            write_soft_labels(&dir, &t.class_names(), &records)?;
            println!("{}", dir.join(distill_core::calibration::SOFT_LABELS_BIN).display());
        }
        Command::Grid { dump, rows, cols, class, tile, out } => {
            let (header, dumps) = read_cluster_dump(&dump)?;
            let d = match &class {
                Some(name) => dumps
                    .iter()
                    .find(|d| &d.class_name == name)
                    .ok_or_else(|| Error::Config(format!("class {name} not in dump")))?,
                None => dumps.first().ok_or_else(|| Error::InvalidInput("dump has no classes".into()))?,
            };
            let (img, legend) = emit_cluster_grid(d, &header.source, rows, cols, tile)?;
            img.save_with_format(&out, image::ImageFormat::Png)?;
            let legend_path = out.with_extension("json");
            std::fs::write(&legend_path, serde_json::to_string_pretty(&legend)? + "\n")
                .map_err(|e| Error::Io { path: legend_path.clone(), source: e })?;
            println!("{}", out.display());
        }
        Command::Eval { manifest, seeds, baseline, teacher, test_root, test_per_class, epochs, lr, input_size } => {
            let m = SyntheticManifest::read(&manifest)?;
            let teacher = match (teacher.as_deref(), &m.header.source) {
                (Some(t), _) => teacher_spec(t),
                (None, SourceSpec::Mock { .. }) => TeacherConfig::Mock,
                (None, SourceSpec::Folder { .. }) => {
                    return Err(Error::Config("--teacher is required for folder datasets".into()))
                }
            };
            let t = make_teacher(&teacher, &m.header.source, &m.header.classes)?;
            let mut train = TrainConfig::default();
            if let Some(e) = epochs {
                train.epochs = e;
            }
            if let Some(l) = lr {
                train.lr = l;
            }
            if let Some(s) = input_size {
                train.input_size = s;
            }
            train.validate()?;
            let names = t.class_names();
            let test = match (&test_root, &m.header.source) {
                (Some(root), source) => {
                    let edge = match source {
                        SourceSpec::Folder { resize_edge, .. } => *resize_edge,
                        SourceSpec::Mock { world } => world.height.min(world.width) as u32,
                    };
                    folder_test_set(root, &names, edge, train.input_size)?
                }
                (None, SourceSpec::Mock { world }) => {
                    let cfg: DistillConfig = serde_json::from_value(m.header.effective_config.clone())?;
                    let offset = match cfg.backend {
                        BackendConfig::Mock { images_per_class, .. } => images_per_class,
                        BackendConfig::Remote { .. } => 0,
                    };
                    mock_test_set(world, &names, test_per_class, offset, train.input_size)?
                }
                (None, SourceSpec::Folder { .. }) => {
                    return Err(Error::Config("--test-root is required for folder datasets".into()))
                }
            };
            let seed_list: Vec<u64> = (0..seeds).collect();
            let which = match baseline {
                Some(BaselineArg::Random) => Baseline::RandomPatches,
                None => Baseline::Selected,
            };
            let stats = evaluate_manifest(&m, t.as_ref(), &test, &train, &seed_list, which)?;
            println!("{}", serde_json::to_string(&stats)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(tracing::Level::WARN)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
