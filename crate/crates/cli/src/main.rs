//! `dwpseg`: pipeline driver for the deep-weight-prior segmentation
//! benchmark. Exit codes: 0 ok, 2 usage, 3 config, 4 missing artifact,
//! 5 corrupt artifact, 6 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use dwpseg_core::data::Domain;
use dwpseg_core::dwp::{read_prior, sample_kernels};
use dwpseg_core::error::Error;
use dwpseg_core::experiments::{
    gen_dataset, harvest_stage, load_config, load_domain, render_kernel_grid, run_single,
    run_table, train_prior_stage, train_source_stage, write_manifest, Layout, MasterConfig, Method,
};
use dwpseg_core::harvest::{read_kernel_dataset, GroupingMode};
use dwpseg_core::numerics::rng::Stream;

#[derive(Parser)]
#[command(name = "dwpseg", version, about = "deep-weight-prior segmentation benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic source/target volume pools.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Volumes per domain (overrides the config pools).
        #[arg(long)]
        volumes: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the source model; snapshots land in `<out>.snapshots/`.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Collect conv kernels from snapshot checkpoints into a dataset.
    Harvest {
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: GroupingMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the kernel prior(s) to a harvested dataset.
    TrainPrior {
        #[arg(long)]
        kernels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Train and score one method on one train-size/seed cell.
    Run {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        train_size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding the pipeline artifacts.
        #[arg(long, default_value = ".")]
        workdir: PathBuf,
    },
    /// The full benchmark table (auto-runs missing upstream stages).
    Table {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render mean decoder samples from a trained prior as a PGM grid.
    SamplePrior {
        #[arg(long)]
        prior: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<GroupingMode, String> {
    match s {
        "shared" => Ok(GroupingMode::Shared),
        "per_layer" => Ok(GroupingMode::PerLayer),
        other => Err(format!("unknown mode {other}; expected shared|per_layer")),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::Config(_) => 3,
        Error::MissingArtifact(_) => 4,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 4,
        Error::BadMagic { .. }
        | Error::PayloadMismatch { .. }
        | Error::Truncated { .. }
        | Error::CheckpointMismatch(_)
        | Error::Json(_) => 5,
        _ => 6,
    }
}

fn config_or_default(path: &Option<PathBuf>) -> dwpseg_core::Result<MasterConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(MasterConfig::default()),
    }
}

/// Manifest path for a single-file artifact: `<out>.manifest.json`.
fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn snapshots_dir_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".snapshots");
    PathBuf::from(s)
}

fn dispatch(cmd: Cmd) -> dwpseg_core::Result<()> {
    match cmd {
        Cmd::GenData {
            out,
            seed,
            volumes,
            config,
        } => {
            let mut cfg = config_or_default(&config)?;
            cfg.seed = seed;
            if let Some(n) = volumes {
                cfg.source_volumes = n;
                cfg.target_volumes = n;
            }
            gen_dataset(&cfg, &out)?;
            write_manifest(&cfg, "gen-data", &out.join("manifest.json"))?;
            println!(
                "wrote {} source + {} target volumes to {}",
                cfg.source_volumes,
                cfg.target_volumes,
                out.display()
            );
            Ok(())
        }
        Cmd::TrainSource { data, out, config } => {
            let cfg = load_config(&config)?;
            // accept either a data root (with a source/ subdir) or the
            // source directory itself
            let source_dir = if data.join(Domain::Source.to_string()).is_dir() {
                data.join(Domain::Source.to_string())
            } else {
                data
            };
            let source = load_domain(&source_dir)?;
            let snapshots = snapshots_dir_for(&out);
            train_source_stage(&cfg, &source, &snapshots, &out)?;
            write_manifest(&cfg, "train-source", &sidecar_manifest(&out))?;
            println!(
                "trained source model -> {} (snapshots in {})",
                out.display(),
                snapshots.display()
            );
            Ok(())
        }
        Cmd::Harvest {
            snapshots,
            mode,
            out,
        } => {
            let ds = harvest_stage(&snapshots, mode, &out)?;
            println!(
                "harvested {} kernel slices in {} group(s) -> {}",
                ds.total_slices(),
                ds.groups.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::TrainPrior {
            kernels,
            out,
            config,
        } => {
            let cfg = load_config(&config)?;
            if !kernels.is_file() {
                return Err(Error::MissingArtifact(kernels.display().to_string()));
            }
            let ds = read_kernel_dataset(&kernels)?;
            train_prior_stage(&cfg, &ds, &out)?;
            write_manifest(&cfg, "train-prior", &sidecar_manifest(&out))?;
            println!("trained {} prior(s) -> {}", ds.groups.len(), out.display());
            Ok(())
        }
        Cmd::Run {
            method,
            train_size,
            seed,
            out,
            config,
            workdir,
        } => {
            let cfg = config_or_default(&config)?;
            let layout = Layout::new(workdir);
            let r = run_single(&cfg, &layout, method, train_size, seed, &out)?;
            println!(
                "{} size {} seed {}: dice {:.4} iou {:.4} ({:.1}s)",
                r.method, r.train_size, r.seed, r.dice, r.iou, r.wall_seconds
            );
            Ok(())
        }
        Cmd::Table { config, out } => {
            let cfg = load_config(&config)?;
            let layout = Layout::new(out);
            let outcome = run_table(&cfg, &layout)?;
            print!("{}", outcome.table_text);
            if !outcome.failures.is_empty() {
                eprintln!("{} cell(s) failed:", outcome.failures.len());
                for f in &outcome.failures {
                    eprintln!(
                        "  {} size {} seed {}: {}",
                        f.method, f.train_size, f.seed, f.message
                    );
                }
            }
            println!(
                "metrics: {}  table: {}",
                layout.metrics_csv().display(),
                layout.table_txt().display()
            );
            Ok(())
        }
        Cmd::SamplePrior {
            prior,
            n,
            out,
            seed,
        } => {
            if n == 0 {
                return Err(Error::InvalidArgument("--n must be >= 1".into()));
            }
            let p = read_prior::<f32>(&prior)?;
            let mut rng = Stream::derive(seed, "sample-prior");
            let kernels = sample_kernels(&p, n, &mut rng)?;
            render_kernel_grid(&kernels, &out)?;
            println!("wrote {} samples -> {}", n, out.display());
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
