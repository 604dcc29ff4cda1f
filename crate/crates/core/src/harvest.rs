//! Stage 1: train on the source dataset while snapshotting 3x3x3 convolution
//! kernels, and export the collected kernels as a dataset for prior training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{expect_magic, read_json_line};
use crate::data::Volume;
use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::rng::Stream;
use crate::segnet::params::ParamSet;
use crate::segnet::train::{train_plain_with_hook, TrainPlainConfig};
use crate::segnet::unet::UNetConfig;

pub const KDS_MAGIC: &[u8] = b"KDS1\n";

/// One 3x3x3 filter for a single (input-channel, output-channel) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSlice {
    pub values: [f32; 27],
    pub layer_name: String,
    pub in_index: usize,
    pub out_index: usize,
    pub snapshot_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMode {
    PerLayer,
    Shared,
}

impl std::fmt::Display for GroupingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupingMode::PerLayer => write!(f, "per_layer"),
            GroupingMode::Shared => write!(f, "shared"),
        }
    }
}

pub const SHARED_GROUP_KEY: &str = "shared";

/// Harvested kernels grouped for prior training: one pooled group in shared
/// mode, one group per conv layer in per-layer mode.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDataset {
    pub grouping: GroupingMode,
    pub groups: Vec<(String, Vec<KernelSlice>)>,
}

impl KernelDataset {
    pub fn group(&self, key: &str) -> Option<&[KernelSlice]> {
        self.groups
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
    }

    pub fn total_slices(&self) -> usize {
        self.groups.iter().map(|(_, v)| v.len()).sum()
    }

    /// Group key a conv layer maps to under this dataset's grouping mode.
    pub fn key_for_layer(&self, layer_name: &str) -> String {
        match self.grouping {
            GroupingMode::Shared => SHARED_GROUP_KEY.to_string(),
            GroupingMode::PerLayer => layer_name.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotSchedule {
    pub burn_in: usize,
    pub every: usize,
}

impl SnapshotSchedule {
    /// Epochs at which kernels are snapshotted: every multiple of `every`
    /// strictly greater than `burn_in`, plus the final epoch.
    pub fn snapshot_epochs(&self, total_epochs: usize) -> Vec<usize> {
        let mut epochs: Vec<usize> = (1..=total_epochs)
            .filter(|e| e > &self.burn_in && e % self.every == 0)
            .collect();
        if epochs.last() != Some(&total_epochs) && total_epochs > 0 {
            epochs.push(total_epochs);
        }
        epochs
    }
}

/// Every 3x3x3 kernel slice of every conv layer, in parameter order.
pub fn snapshot_kernels<F: Real>(params: &ParamSet<F>, epoch: usize) -> Vec<KernelSlice> {
    let mut slices = Vec::new();
    for (name, t) in params.iter() {
        let s = t.shape();
        if s.len() != 5 || s[2] != 3 || s[3] != 3 || s[4] != 3 {
            continue;
        }
        let layer = name.strip_suffix(".weight").unwrap_or(name);
        let (cout, cin) = (s[0], s[1]);
        for co in 0..cout {
            for ci in 0..cin {
                let mut values = [0f32; 27];
                for (i, v) in values.iter_mut().enumerate() {
                    *v = t.data()[(co * cin + ci) * 27 + i].to_f32_();
                }
                slices.push(KernelSlice {
                    values,
                    layer_name: layer.to_string(),
                    in_index: ci,
                    out_index: co,
                    snapshot_epoch: epoch,
                });
            }
        }
    }
    slices
}

/// Expected slice count per snapshot: sum of Cin*Cout over conv layers.
pub fn expected_slice_count(cfg: &UNetConfig) -> usize {
    cfg.conv_layers().iter().map(|(_, cin, cout)| cin * cout).sum()
}

/// Train on the source dataset (no freezing), snapshotting kernels on the
/// schedule. Returns the final weights and the harvested snapshots.
pub fn train_source<F: Real>(
    source: &[Volume],
    cfg: &UNetConfig,
    p0: &ParamSet<F>,
    tcfg: &TrainPlainConfig,
    schedule: &SnapshotSchedule,
    rng: &mut Stream,
) -> Result<(ParamSet<F>, Vec<Vec<KernelSlice>>)> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("empty source dataset".into()));
    }
    if schedule.burn_in >= tcfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "burn_in {} must be below total epochs {}",
            schedule.burn_in, tcfg.epochs
        )));
    }
    let epochs = schedule.snapshot_epochs(tcfg.epochs);
    let mut snapshots = Vec::with_capacity(epochs.len());
    let (final_params, _trace) =
        train_plain_with_hook(source, cfg, p0, &[], tcfg, rng, |epoch, params| {
            if epochs.contains(&epoch) {
                snapshots.push(snapshot_kernels(params, epoch));
            }
        })?;
    Ok((final_params, snapshots))
}

/// Aggregate snapshots into a grouped dataset and write it as a KDS1 file.
pub fn export_kernel_dataset(
    snapshots: &[Vec<KernelSlice>],
    grouping: GroupingMode,
    path: &Path,
) -> Result<KernelDataset> {
    let ds = build_kernel_dataset(snapshots, grouping)?;
    write_kernel_dataset(&ds, path)?;
    Ok(ds)
}

pub fn build_kernel_dataset(
    snapshots: &[Vec<KernelSlice>],
    grouping: GroupingMode,
) -> Result<KernelDataset> {
    if snapshots.iter().map(|s| s.len()).sum::<usize>() == 0 {
        return Err(Error::InvalidArgument(
            "no kernel slices to export".into(),
        ));
    }
    let mut groups: Vec<(String, Vec<KernelSlice>)> = Vec::new();
    for snap in snapshots {
        for slice in snap {
            let key = match grouping {
                GroupingMode::Shared => SHARED_GROUP_KEY.to_string(),
                GroupingMode::PerLayer => slice.layer_name.clone(),
            };
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(slice.clone()),
                None => groups.push((key, vec![slice.clone()])),
            }
        }
    }
    Ok(KernelDataset { grouping, groups })
}

#[derive(Debug, Serialize, Deserialize)]
struct KdsGroupHeader {
    key: String,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct KdsHeader {
    grouping: GroupingMode,
    groups: Vec<KdsGroupHeader>,
}

pub fn write_kernel_dataset(ds: &KernelDataset, path: &Path) -> Result<()> {
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&p, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&p, e);
    w.write_all(KDS_MAGIC).map_err(io)?;
    let header = KdsHeader {
        grouping: ds.grouping,
        groups: ds
            .groups
            .iter()
            .map(|(k, v)| KdsGroupHeader {
                key: k.clone(),
                count: v.len(),
            })
            .collect(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for (_, slices) in &ds.groups {
        for slice in slices {
            for &v in &slice.values {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn read_kernel_dataset(path: &Path) -> Result<KernelDataset> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut r = BufReader::new(file);
    expect_magic(&mut r, KDS_MAGIC, &p)?;
    let header: KdsHeader = read_json_line(&mut r, &p)?;
    let mut groups = Vec::with_capacity(header.groups.len());
    for g in &header.groups {
        let mut slices = Vec::with_capacity(g.count);
        for i in 0..g.count {
            let mut bytes = [0u8; 4 * 27];
            r.read_exact(&mut bytes).map_err(|_| Error::Truncated {
                path: p.clone(),
                detail: format!("payload ended at slice {i} of group {}", g.key),
            })?;
            let mut values = [0f32; 27];
            for (j, c) in bytes.chunks_exact(4).enumerate() {
                values[j] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
            slices.push(KernelSlice {
                values,
                layer_name: g.key.clone(),
                in_index: 0,
                out_index: 0,
                snapshot_epoch: 0,
            });
        }
        groups.push((g.key.clone(), slices));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(&p, e))? != 0 {
        return Err(Error::PayloadMismatch {
            path: p,
            detail: "trailing bytes after last group".into(),
        });
    }
    Ok(KernelDataset {
        grouping: header.grouping,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use crate::segnet::unet::{build_unet, Init};

    #[test]
    fn schedule_arithmetic_matches_spec_example() {
        let s = SnapshotSchedule {
            burn_in: 20,
            every: 10,
        };
        assert_eq!(s.snapshot_epochs(60), vec![30, 40, 50, 60]);
        // final epoch appended when not on the grid
        let s2 = SnapshotSchedule {
            burn_in: 5,
            every: 10,
        };
        assert_eq!(s2.snapshot_epochs(25), vec![10, 20, 25]);
    }

    #[test]
    fn slice_count_is_cin_times_cout() {
        let mut p = ParamSet::<f32>::new();
        let mut rng = Stream::from_seed(1);
        p.insert("a.weight", rng.normal_tensor(&[4, 2, 3, 3, 3]));
        p.insert("a.bias", rng.normal_tensor(&[4]));
        let slices = snapshot_kernels(&p, 3);
        assert_eq!(slices.len(), 8);
        assert!(slices.iter().all(|s| s.layer_name == "a"));
        assert!(slices.iter().all(|s| s.snapshot_epoch == 3));
    }

    #[test]
    fn desk_net_slice_count_matches_layer_sum() {
        let cfg = UNetConfig::default();
        let p: ParamSet<f32> = build_unet(&cfg, Init::HeRandom, &mut Stream::from_seed(1)).unwrap();
        let slices = snapshot_kernels(&p, 1);
        assert_eq!(slices.len(), expected_slice_count(&cfg));
    }

    #[test]
    fn zero_params_give_zero_slices() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a.weight", Tensor::zeros(&[2, 2, 3, 3, 3]));
        let slices = snapshot_kernels(&p, 0);
        assert!(slices.iter().all(|s| s.values.iter().all(|&v| v == 0.0)));
    }

    fn fake_snapshot(layer: &str, n: usize, epoch: usize) -> Vec<KernelSlice> {
        (0..n)
            .map(|i| KernelSlice {
                values: [i as f32 * 0.1 + epoch as f32; 27],
                layer_name: layer.to_string(),
                in_index: i,
                out_index: 0,
                snapshot_epoch: epoch,
            })
            .collect()
    }

    #[test]
    fn shared_mode_pools_everything() {
        let snaps = vec![fake_snapshot("a", 8, 1), fake_snapshot("a", 8, 2)];
        let ds = build_kernel_dataset(&snaps, GroupingMode::Shared).unwrap();
        assert_eq!(ds.groups.len(), 1);
        assert_eq!(ds.groups[0].1.len(), 16);
    }

    #[test]
    fn per_layer_mode_groups_by_layer() {
        let snaps = vec![[
            fake_snapshot("a", 2, 1),
            fake_snapshot("b", 3, 1),
            fake_snapshot("c", 4, 1),
        ]
        .concat()];
        let ds = build_kernel_dataset(&snaps, GroupingMode::PerLayer).unwrap();
        assert_eq!(ds.groups.len(), 3);
        assert_eq!(ds.group("b").unwrap().len(), 3);
    }

    #[test]
    fn kds_round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.kds");
        let snaps = vec![[fake_snapshot("a", 4, 1), fake_snapshot("b", 2, 1)].concat()];
        let ds = export_kernel_dataset(&snaps, GroupingMode::PerLayer, &path).unwrap();
        let back = read_kernel_dataset(&path).unwrap();
        assert_eq!(back.grouping, ds.grouping);
        assert_eq!(back.groups.len(), ds.groups.len());
        for ((ka, va), (kb, vb)) in ds.groups.iter().zip(back.groups.iter()) {
            assert_eq!(ka, kb);
            let a: Vec<[f32; 27]> = va.iter().map(|s| s.values).collect();
            let b: Vec<[f32; 27]> = vb.iter().map(|s| s.values).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_export_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_kernel_dataset(&[], GroupingMode::Shared, &dir.path().join("e.kds")).is_err());
    }

    #[test]
    fn lr_zero_snapshots_equal_init() {
        use crate::data::{gen_volume, Domain};
        let cfg = UNetConfig {
            levels: 2,
            base_channels: 2,
            in_channels: 1,
        };
        let p0: ParamSet<f32> = build_unet(&cfg, Init::HeRandom, &mut Stream::from_seed(1)).unwrap();
        let vols = vec![gen_volume(
            Domain::Source,
            (16, 16, 16),
            "s0",
            &mut Stream::from_seed(9),
        )
        .unwrap()];
        let tcfg = TrainPlainConfig {
            epochs: 4,
            lr: 0.0,
            lambda_dice: 1.0,
        };
        let schedule = SnapshotSchedule {
            burn_in: 1,
            every: 2,
        };
        let (_, snaps) =
            train_source(&vols, &cfg, &p0, &tcfg, &schedule, &mut Stream::from_seed(2)).unwrap();
        assert_eq!(snaps.len(), 2); // epochs 2 and 4
        let init_slices = snapshot_kernels(&p0, 0);
        for snap in &snaps {
            for (a, b) in snap.iter().zip(init_slices.iter()) {
                assert_eq!(a.values, b.values);
            }
        }
    }
}
