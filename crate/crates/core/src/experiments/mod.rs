//! Benchmark pipeline: data generation, source training with kernel
//! snapshots, harvesting, prior training, and the method-comparison table.
//!
//! On-disk layout under a work directory:
//! ```text
//! data/source/*.mvol   data/target/*.mvol
//! snapshots/epochNNNN.ckpt
//! source.ckpt  kernels.kds
//! prior.ckpt (+.json)  or  priors/<layer>.ckpt in per-layer mode
//! metrics.csv  table.txt  manifest.json
//! ```

pub mod config;
pub mod pgm;

pub use config::{load_config, MasterConfig};
pub use pgm::render_kernel_grid;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::data::{gen_volume, make_splits, read_volume, write_volume, Domain, Volume};
use crate::dwp::{read_prior, train_vae, write_prior, VAEPrior};
use crate::error::{Error, Result};
use crate::harvest::{
    build_kernel_dataset, read_kernel_dataset, snapshot_kernels, write_kernel_dataset,
    GroupingMode, KernelDataset, SnapshotSchedule,
};
use crate::numerics::rng::Stream;
use crate::segnet::loss::{dice_metric, iou_metric};
use crate::segnet::train::{train_plain, train_plain_with_hook, TrainPlainConfig};
use crate::segnet::unet::{build_unet, unet_forward, Init};
use crate::vi::{
    init_posterior, predict, train_dwp, LikelihoodScale, PredictMode, VITrainConfig,
};
use crate::ParamSet;

pub const CSV_HEADER: &str = "method,train_size,seed,dice,iou,wall_seconds";
pub const METRIC_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Dwp,
    Pr,
    Prf,
    Ri,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dwp, Method::Pr, Method::Prf, Method::Ri];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dwp => "dwp",
            Method::Pr => "pr",
            Method::Prf => "prf",
            Method::Ri => "ri",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        match s {
            "dwp" => Ok(Method::Dwp),
            "pr" => Ok(Method::Pr),
            "prf" => Ok(Method::Prf),
            "ri" => Ok(Method::Ri),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other}; expected dwp|pr|prf|ri"
            ))),
        }
    }
}

/// What a method needs beyond the target training set. pr/prf fine-tune the
/// source weights (prf with the middle frozen); dwp trains variationally
/// under the kernel priors; ri starts from scratch.
pub struct MethodInputs<'a> {
    pub source_params: Option<&'a ParamSet<f32>>,
    pub priors: Option<&'a BTreeMap<String, VAEPrior<f32>>>,
}

impl MethodInputs<'_> {
    fn validate(&self, method: Method) -> Result<()> {
        match method {
            Method::Pr | Method::Prf => {
                if self.source_params.is_none() {
                    return Err(Error::MissingArtifact(format!(
                        "method {method} needs a source checkpoint"
                    )));
                }
            }
            Method::Dwp => {
                if self.priors.is_none() {
                    return Err(Error::MissingArtifact(
                        "method dwp needs trained priors".into(),
                    ));
                }
            }
            Method::Ri => {
                if self.source_params.is_some() {
                    return Err(Error::InvalidArgument(
                        "method ri must not be given a source checkpoint".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub method: Method,
    pub train_size: usize,
    pub seed: u64,
    pub dice: f64,
    pub iou: f64,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let ok = self.iou.is_finite()
            && self.dice.is_finite()
            && 0.0 <= self.iou
            && self.iou <= self.dice
            && self.dice <= 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "bad metrics record: dice {} iou {}",
                self.dice, self.iou
            )));
        }
        Ok(())
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.3}",
            self.method, self.train_size, self.seed, self.dice, self.iou, self.wall_seconds
        )
    }
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&p, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::PayloadMismatch {
                path: p,
                detail: format!("bad CSV header {other:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::PayloadMismatch {
                path: p,
                detail: format!("line {}: expected 6 fields", i + 2),
            });
        }
        let parse_err = |what: &str| Error::PayloadMismatch {
            path: p.clone(),
            detail: format!("line {}: bad {what}", i + 2),
        };
        let r = MetricsRecord {
            method: fields[0].parse().map_err(|_| parse_err("method"))?,
            train_size: fields[1].parse().map_err(|_| parse_err("train_size"))?,
            seed: fields[2].parse().map_err(|_| parse_err("seed"))?,
            dice: fields[3].parse().map_err(|_| parse_err("dice"))?,
            iou: fields[4].parse().map_err(|_| parse_err("iou"))?,
            wall_seconds: fields[5].parse().map_err(|_| parse_err("wall_seconds"))?,
        };
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

/// Artifact paths under one work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn domain_dir(&self, domain: Domain) -> PathBuf {
        self.data_dir().join(domain.to_string())
    }
    pub fn snapshots_dir(&self) -> PathBuf {
        self.root.join("snapshots")
    }
    pub fn source_ckpt(&self) -> PathBuf {
        self.root.join("source.ckpt")
    }
    pub fn kernels(&self) -> PathBuf {
        self.root.join("kernels.kds")
    }
    /// Prior artifact: a single file in shared mode, a directory per-layer.
    pub fn prior_path(&self, grouping: GroupingMode) -> PathBuf {
        match grouping {
            GroupingMode::Shared => self.root.join("prior.ckpt"),
            GroupingMode::PerLayer => self.root.join("priors"),
        }
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn table_txt(&self) -> PathBuf {
        self.root.join("table.txt")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    command: &'a str,
    seeds: &'a [u64],
    config: &'a MasterConfig,
}

/// Every run records the resolved config, crate version, and seeds.
pub fn write_manifest(cfg: &MasterConfig, command: &str, path: &Path) -> Result<()> {
    let m = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        command,
        seeds: &cfg.seeds,
        config: cfg,
    };
    let text = serde_json::to_string_pretty(&m)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p.display().to_string(), e))
}

/// Generate both domain pools under `data_dir`, one labeled substream per
/// volume so the set is invariant to generation order.
pub fn gen_dataset(cfg: &MasterConfig, data_dir: &Path) -> Result<()> {
    let dims = (cfg.dims[0], cfg.dims[1], cfg.dims[2]);
    for (domain, count) in [
        (Domain::Source, cfg.source_volumes),
        (Domain::Target, cfg.target_volumes),
    ] {
        let dir = data_dir.join(domain.to_string());
        ensure_dir(&dir)?;
        for i in 0..count {
            let id = format!("{domain}-{i:03}");
            let mut rng = Stream::derive(cfg.seed, &format!("gen-data/{id}"));
            let v = gen_volume(domain, dims, &id, &mut rng)?;
            write_volume(&v, &dir.join(format!("{id}.mvol")))?;
        }
    }
    Ok(())
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let p = dir.display().to_string();
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(p));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(&p, e))? {
        let path = entry.map_err(|e| Error::io(&p, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Load every volume of one domain directory, sorted by filename.
pub fn load_domain(dir: &Path) -> Result<Vec<Volume>> {
    let files = sorted_files(dir, "mvol")?;
    if files.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no .mvol files in {}",
            dir.display()
        )));
    }
    files.iter().map(|p| read_volume(p)).collect()
}

fn snapshot_ckpt_name(epoch: usize) -> String {
    format!("epoch{epoch:04}.ckpt")
}

/// Train the source model, writing full-weight checkpoints on the snapshot
/// schedule plus the final checkpoint.
pub fn train_source_stage(
    cfg: &MasterConfig,
    source: &[Volume],
    snapshots_dir: &Path,
    ckpt_path: &Path,
) -> Result<()> {
    ensure_dir(snapshots_dir)?;
    let p0 = build_unet::<f32>(
        &cfg.unet,
        Init::HeRandom,
        &mut Stream::derive(cfg.seed, "train-source/init"),
    )?;
    let tcfg = TrainPlainConfig {
        epochs: cfg.source_epochs,
        lr: cfg.lr,
        lambda_dice: cfg.lambda_dice,
    };
    let schedule = SnapshotSchedule {
        burn_in: cfg.snapshot_burn_in,
        every: cfg.snapshot_every,
    };
    let epochs = schedule.snapshot_epochs(cfg.source_epochs);
    let mut hook_err = None;
    let (params, _trace) = train_plain_with_hook(
        source,
        &cfg.unet,
        &p0,
        &[],
        &tcfg,
        &mut Stream::derive(cfg.seed, "train-source/train"),
        |epoch, params| {
            if epochs.contains(&epoch) && hook_err.is_none() {
                let path = snapshots_dir.join(snapshot_ckpt_name(epoch));
                if let Err(e) = crate::checkpoint::write_checkpoint(params, &path) {
                    hook_err = Some(e);
                }
            }
        },
    )?;
    if let Some(e) = hook_err {
        return Err(e);
    }
    crate::checkpoint::write_checkpoint(&params, ckpt_path)
}

/// Collect 3x3x3 kernels from every snapshot checkpoint in `snapshots_dir`
/// and write them as a grouped KDS1 dataset.
pub fn harvest_stage(
    snapshots_dir: &Path,
    grouping: GroupingMode,
    out: &Path,
) -> Result<KernelDataset> {
    let files = sorted_files(snapshots_dir, "ckpt")?;
    if files.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no snapshot checkpoints in {}",
            snapshots_dir.display()
        )));
    }
    let mut snapshots = Vec::with_capacity(files.len());
    for path in &files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let epoch: usize = stem
            .strip_prefix("epoch")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidArgument(format!(
                "snapshot file {} not named epochNNNN.ckpt",
                path.display()
            )))?;
        let params: ParamSet<f32> = crate::checkpoint::read_checkpoint(path)?;
        snapshots.push(snapshot_kernels(&params, epoch));
    }
    let ds = build_kernel_dataset(&snapshots, grouping)?;
    write_kernel_dataset(&ds, out)?;
    Ok(ds)
}

/// Fit one VAE per kernel group and persist: shared mode writes a single
/// prior file at `out`; per-layer mode writes one file per group under the
/// `out` directory.
pub fn train_prior_stage(cfg: &MasterConfig, ds: &KernelDataset, out: &Path) -> Result<()> {
    if ds.grouping == GroupingMode::PerLayer {
        ensure_dir(out)?;
    }
    for (key, slices) in &ds.groups {
        let mut rng = Stream::derive(cfg.seed, &format!("train-prior/{key}"));
        let (prior, _trace) = train_vae::<f32>(slices, key, &cfg.vae, &mut rng)?;
        let path = match ds.grouping {
            GroupingMode::Shared => out.to_path_buf(),
            GroupingMode::PerLayer => out.join(format!("{key}.ckpt")),
        };
        write_prior(&prior, &path)?;
    }
    Ok(())
}

/// Load trained priors keyed by group, from a single file (shared) or a
/// directory of per-layer files.
pub fn load_priors(path: &Path, grouping: GroupingMode) -> Result<BTreeMap<String, VAEPrior<f32>>> {
    let mut out = BTreeMap::new();
    match grouping {
        GroupingMode::Shared => {
            let prior = read_prior::<f32>(path)?;
            out.insert(prior.group_key.clone(), prior);
        }
        GroupingMode::PerLayer => {
            for f in sorted_files(path, "ckpt")? {
                let prior = read_prior::<f32>(&f)?;
                out.insert(prior.group_key.clone(), prior);
            }
            if out.is_empty() {
                return Err(Error::MissingArtifact(format!(
                    "no prior files in {}",
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

/// Mean hard dice/iou at threshold 0.5 over a test set, given a per-volume
/// probability predictor.
fn evaluate(
    test: &[Volume],
    mut probs: impl FnMut(&Volume) -> Result<crate::Tensor<f32>>,
) -> Result<(f64, f64)> {
    let mut dice = 0.0;
    let mut iou = 0.0;
    for v in test {
        let p = probs(v)?;
        let mask = v.mask_tensor::<f32>();
        dice += dice_metric(&p, &mask, METRIC_THRESHOLD)?;
        iou += iou_metric(&p, &mask, METRIC_THRESHOLD)?;
    }
    let n = test.len() as f64;
    Ok((dice / n, iou / n))
}

/// Train one method on one (train_size, seed) cell and score it on the test
/// set. Deterministic given the master seed and the cell coordinates.
pub fn run_method(
    cfg: &MasterConfig,
    method: Method,
    inputs: &MethodInputs,
    train: &[Volume],
    test: &[Volume],
    train_size: usize,
    seed: u64,
) -> Result<MetricsRecord> {
    inputs.validate(method)?;
    if train.len() != train_size {
        return Err(Error::InvalidArgument(format!(
            "train set has {} volumes, expected {train_size}",
            train.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let started = Instant::now();
    let label = format!("run/{method}/size{train_size}/seed{seed}");
    let tcfg = TrainPlainConfig {
        epochs: cfg.target_epochs,
        lr: cfg.lr,
        lambda_dice: cfg.lambda_dice,
    };

    let (dice, iou) = match method {
        Method::Ri | Method::Pr | Method::Prf => {
            let p0 = match method {
                Method::Ri => build_unet::<f32>(
                    &cfg.unet,
                    Init::HeRandom,
                    &mut Stream::derive(cfg.seed, &format!("{label}/init")),
                )?,
                _ => inputs.source_params.unwrap().clone(),
            };
            let freeze = if method == Method::Prf {
                cfg.unet.middle_freeze_set()
            } else {
                Vec::new()
            };
            let (params, _trace) = train_plain(
                train,
                &cfg.unet,
                &p0,
                &freeze,
                &tcfg,
                &mut Stream::derive(cfg.seed, &format!("{label}/train")),
            )?;
            for f in &freeze {
                if params.get(f) != p0.get(f) {
                    return Err(Error::InvalidArgument(format!(
                        "frozen tensor {f} changed during prf training"
                    )));
                }
            }
            evaluate(test, |v| {
                let (logits, _) = unet_forward(&cfg.unet, &params, &v.input_tensor())?;
                Ok(logits.map(crate::numerics::act::sigmoid))
            })?
        }
        Method::Dwp => {
            let init = init_posterior::<f32>(
                &cfg.unet,
                &mut Stream::derive(cfg.seed, &format!("{label}/init")),
            )?;
            let vcfg = VITrainConfig {
                epochs: cfg.target_epochs,
                lr_theta: cfg.lr_theta,
                lr_psi: cfg.lr_psi,
                mc_samples: cfg.mc_samples,
                likelihood_scale: LikelihoodScale::DatasetVoxels,
                lambda_dice: cfg.lambda_dice,
                seed,
                ..Default::default()
            };
            let (q, _priors, _trace) = train_dwp(
                train,
                &cfg.unet,
                inputs.priors.unwrap(),
                &vcfg,
                init,
                &mut Stream::derive(cfg.seed, &format!("{label}/train")),
            )?;
            let mut eval_rng = Stream::derive(cfg.seed, &format!("{label}/eval"));
            evaluate(test, |v| {
                predict(&q, &cfg.unet, v, PredictMode::Mean, &mut eval_rng)
            })?
        }
    };

    let record = MetricsRecord {
        method,
        train_size,
        seed,
        dice,
        iou,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    record.validate()?;
    Ok(record)
}

/// Make sure every upstream artifact exists under the layout, running the
/// missing stages in order.
pub fn ensure_artifacts(cfg: &MasterConfig, layout: &Layout) -> Result<()> {
    ensure_dir(&layout.root)?;
    if !layout.domain_dir(Domain::Source).is_dir() || !layout.domain_dir(Domain::Target).is_dir() {
        gen_dataset(cfg, &layout.data_dir())?;
    }
    if !layout.source_ckpt().is_file() {
        let source = load_domain(&layout.domain_dir(Domain::Source))?;
        train_source_stage(cfg, &source, &layout.snapshots_dir(), &layout.source_ckpt())?;
    }
    if !layout.kernels().is_file() {
        harvest_stage(&layout.snapshots_dir(), cfg.grouping, &layout.kernels())?;
    }
    let prior = layout.prior_path(cfg.grouping);
    let prior_missing = match cfg.grouping {
        GroupingMode::Shared => !prior.is_file(),
        GroupingMode::PerLayer => !prior.is_dir(),
    };
    if prior_missing {
        let ds = read_kernel_dataset(&layout.kernels())?;
        train_prior_stage(cfg, &ds, &prior)?;
    }
    Ok(())
}

/// Split the target pool for one cell and load the train/test volumes.
fn cell_volumes(
    target: &[Volume],
    train_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<(Vec<Volume>, Vec<Volume>)> {
    let pool: Vec<String> = target.iter().map(|v| v.id.clone()).collect();
    let split = make_splits(&pool, train_size, test_size, seed)?;
    let by_id = |id: &String| -> Volume {
        target
            .iter()
            .find(|v| &v.id == id)
            .expect("split ids come from the pool")
            .clone()
    };
    Ok((
        split.train_ids.iter().map(by_id).collect(),
        split.test_ids.iter().map(by_id).collect(),
    ))
}

/// One cell for the standalone `run` subcommand. Requires artifacts to exist
/// already; writes a one-record CSV plus a manifest next to it.
pub fn run_single(
    cfg: &MasterConfig,
    layout: &Layout,
    method: Method,
    train_size: usize,
    seed: u64,
    out_csv: &Path,
) -> Result<MetricsRecord> {
    let target = load_domain(&layout.domain_dir(Domain::Target))?;
    let source_params;
    let priors;
    let inputs = match method {
        Method::Ri => MethodInputs {
            source_params: None,
            priors: None,
        },
        Method::Pr | Method::Prf => {
            let p = layout.source_ckpt();
            if !p.is_file() {
                return Err(Error::MissingArtifact(p.display().to_string()));
            }
            source_params = crate::checkpoint::read_checkpoint::<f32>(&p)?;
            MethodInputs {
                source_params: Some(&source_params),
                priors: None,
            }
        }
        Method::Dwp => {
            priors = load_priors(&layout.prior_path(cfg.grouping), cfg.grouping)?;
            MethodInputs {
                source_params: None,
                priors: Some(&priors),
            }
        }
    };
    let (train, test) = cell_volumes(&target, train_size, cfg.test_size, seed)?;
    let record = run_method(cfg, method, &inputs, &train, &test, train_size, seed)?;
    write_metrics_csv(std::slice::from_ref(&record), out_csv)?;
    let manifest = out_csv.with_extension("manifest.json");
    write_manifest(cfg, &format!("run --method {method} --train-size {train_size} --seed {seed}"), &manifest)?;
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct CellFailure {
    pub method: Method,
    pub train_size: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug)]
pub struct TableOutcome {
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<CellFailure>,
    pub table_text: String,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean (std) IoU per (train_size, method) cell; cells with no surviving
/// records are marked. Built from parsed records so the table and the CSV
/// round to the same values.
pub fn format_table(records: &[MetricsRecord], train_sizes: &[usize]) -> String {
    let mut s = String::from("IoU, mean (std) over seeds\n\ntrain_size");
    for m in Method::ALL {
        s.push_str(&format!("  {:<14}", m));
    }
    s.push('\n');
    for &ts in train_sizes {
        s.push_str(&format!("{ts:<10}"));
        for m in Method::ALL {
            let ious: Vec<f64> = records
                .iter()
                .filter(|r| r.train_size == ts && r.method == m)
                .map(|r| r.iou)
                .collect();
            if ious.is_empty() {
                s.push_str(&format!("  {:<14}", "-- (failed)"));
            } else {
                let (mean, std) = mean_std(&ious);
                s.push_str(&format!("  {:<14}", format!("{mean:.4} ({std:.4})")));
            }
        }
        s.push('\n');
    }
    s
}

/// The full benchmark: every train_size x method x seed cell. Upstream
/// stages are auto-invoked if their artifacts are missing. Per-cell failures
/// are recorded and marked in the table instead of aborting the sweep.
pub fn run_table(cfg: &MasterConfig, layout: &Layout) -> Result<TableOutcome> {
    cfg.validate()?;
    crate::numerics::flush_denormals();
    ensure_artifacts(cfg, layout)?;

    let target = load_domain(&layout.domain_dir(Domain::Target))?;
    let source_params: ParamSet<f32> = crate::checkpoint::read_checkpoint(&layout.source_ckpt())?;
    let priors = load_priors(&layout.prior_path(cfg.grouping), cfg.grouping)?;

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &train_size in &cfg.train_sizes {
        for method in Method::ALL {
            for &seed in &cfg.seeds {
                let inputs = MethodInputs {
                    source_params: match method {
                        Method::Pr | Method::Prf => Some(&source_params),
                        _ => None,
                    },
                    priors: match method {
                        Method::Dwp => Some(&priors),
                        _ => None,
                    },
                };
                let cell = cell_volumes(&target, train_size, cfg.test_size, seed).and_then(
                    |(train, test)| {
                        run_method(cfg, method, &inputs, &train, &test, train_size, seed)
                    },
                );
                match cell {
                    Ok(r) => records.push(r),
                    Err(e) => failures.push(CellFailure {
                        method,
                        train_size,
                        seed,
                        message: e.to_string(),
                    }),
                }
            }
        }
    }

    write_metrics_csv(&records, &layout.metrics_csv())?;
    // re-read so table cells reflect exactly what the CSV stores
    let parsed = read_metrics_csv(&layout.metrics_csv())?;
    let table_text = format_table(&parsed, &cfg.train_sizes);
    std::fs::write(&layout.table_txt(), &table_text)
        .map_err(|e| Error::io(layout.table_txt().display().to_string(), e))?;
    write_manifest(cfg, "table", &layout.manifest())?;
    Ok(TableOutcome {
        records,
        failures,
        table_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::unet::UNetConfig;

    fn tiny_config() -> MasterConfig {
        MasterConfig {
            seed: 7,
            dims: [16, 16, 16],
            source_volumes: 4,
            target_volumes: 10,
            test_size: 4,
            train_sizes: vec![5],
            seeds: vec![1],
            unet: UNetConfig {
                levels: 2,
                base_channels: 2,
                in_channels: 1,
            },
            source_epochs: 4,
            target_epochs: 2,
            snapshot_burn_in: 1,
            snapshot_every: 2,
            vae: crate::dwp::VAEConfig {
                latent_dim: 2,
                encoder_hidden: vec![8],
                decoder_hidden: vec![8],
                epochs: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn method_parse_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let records = vec![MetricsRecord {
            method: Method::Dwp,
            train_size: 5,
            seed: 1,
            dice: 0.75,
            iou: 0.6,
            wall_seconds: 1.25,
        }];
        write_metrics_csv(&records, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("method,train_size,seed,dice,iou,wall_seconds\n"));
        assert_eq!(read_metrics_csv(&p).unwrap(), records);
    }

    #[test]
    fn csv_rejects_iou_above_dice() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, format!("{CSV_HEADER}\ndwp,5,1,0.4,0.6,1.0\n")).unwrap();
        assert!(read_metrics_csv(&p).is_err());
    }

    #[test]
    fn csv_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "method,iou\n").unwrap();
        assert!(read_metrics_csv(&p).is_err());
    }

    #[test]
    fn inputs_validation() {
        let empty = MethodInputs {
            source_params: None,
            priors: None,
        };
        assert!(empty.validate(Method::Ri).is_ok());
        assert!(empty.validate(Method::Pr).is_err());
        assert!(empty.validate(Method::Prf).is_err());
        assert!(empty.validate(Method::Dwp).is_err());
    }

    #[test]
    fn gen_dataset_is_deterministic() {
        let cfg = MasterConfig {
            source_volumes: 2,
            target_volumes: 2,
            dims: [16, 16, 16],
            ..tiny_config()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        gen_dataset(&cfg, d1.path()).unwrap();
        gen_dataset(&cfg, d2.path()).unwrap();
        for domain in ["source", "target"] {
            let f1 = sorted_files(&d1.path().join(domain), "mvol").unwrap();
            let f2 = sorted_files(&d2.path().join(domain), "mvol").unwrap();
            assert_eq!(f1.len(), 2);
            for (a, b) in f1.iter().zip(&f2) {
                assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
            }
        }
    }

    #[test]
    fn format_table_marks_missing_cells() {
        let records = vec![MetricsRecord {
            method: Method::Ri,
            train_size: 5,
            seed: 1,
            dice: 0.5,
            iou: 0.5,
            wall_seconds: 0.0,
        }];
        let t = format_table(&records, &[5]);
        assert!(t.contains("0.5000 (0.0000)"));
        assert!(t.contains("-- (failed)"));
    }

    #[test]
    fn mean_std_matches_hand_computation() {
        let (m, s) = mean_std(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
    }

    /// End-to-end: stages auto-invoke, all cells complete, artifacts exist,
    /// and the CSV honors the metric ordering invariant.
    #[test]
    fn tiny_table_end_to_end() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let outcome = run_table(&cfg, &layout).unwrap();
        assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
        assert_eq!(outcome.records.len(), 4); // 1 size x 4 methods x 1 seed
        for r in &outcome.records {
            r.validate().unwrap();
            assert!(r.wall_seconds > 0.0);
        }
        assert!(layout.metrics_csv().is_file());
        assert!(layout.table_txt().is_file());
        assert!(layout.manifest().is_file());
        assert!(layout.source_ckpt().is_file());
        assert!(layout.kernels().is_file());
        let parsed = read_metrics_csv(&layout.metrics_csv()).unwrap();
        assert_eq!(parsed.len(), 4);
        // run_single reuses the artifacts without retraining the stages
        let out = dir.path().join("one.csv");
        let r = run_single(&cfg, &layout, Method::Ri, 5, 1, &out).unwrap();
        let again = read_metrics_csv(&out).unwrap();
        assert_eq!(format!("{:.6}", again[0].iou), format!("{:.6}", r.iou));
        // and matches the table's ri cell bit-for-bit except wall time
        let table_ri = parsed
            .iter()
            .find(|x| x.method == Method::Ri && x.seed == 1)
            .unwrap();
        assert_eq!(format!("{:.6}", r.iou), format!("{:.6}", table_ri.iou));
        assert_eq!(format!("{:.6}", r.dice), format!("{:.6}", table_ri.dice));
    }

    #[test]
    fn run_single_without_artifacts_names_the_missing_path() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let err = run_single(&cfg, &layout, Method::Pr, 5, 1, &dir.path().join("x.csv"))
            .unwrap_err();
        match err {
            Error::MissingArtifact(msg) => assert!(msg.contains("target"), "{msg}"),
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
    }
}
