//! Synthetic two-domain volumetric dataset: a source domain with many small
//! high-contrast lesions and a target domain with fewer, larger, lower
//! contrast blobs on a gamma-shifted background. Also the MVOL1 on-disk
//! volume format and train/test split management.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{expect_magic, read_json_line};
use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::rng::Stream;
use crate::numerics::tensor::Tensor;

pub const MVOL_MAGIC: &[u8] = b"MVOL1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// One 3D scan: intensity grid in [0,1] plus a binary lesion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub intensities: Vec<f32>,
    pub mask: Vec<u8>,
    pub domain: Domain,
    pub id: String,
}

impl Volume {
    pub fn voxel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg: usize = self.mask.iter().map(|&m| m as usize).sum();
        fg as f64 / self.voxel_count() as f64
    }

    /// Intensities as a [1, 1, D, H, W] tensor for the network.
    pub fn input_tensor<F: Real>(&self) -> Tensor<F> {
        let (d, h, w) = self.dims;
        Tensor::from_vec(
            &[1, 1, d, h, w],
            self.intensities.iter().map(|&v| F::from_f32_(v)).collect(),
        )
        .expect("dims match payload by invariant")
    }

    pub fn mask_tensor<F: Real>(&self) -> Tensor<F> {
        let (d, h, w) = self.dims;
        Tensor::from_vec(
            &[1, 1, d, h, w],
            self.mask.iter().map(|&v| F::from_f64(v as f64)).collect(),
        )
        .expect("dims match payload by invariant")
    }

    fn validate(&self) -> Result<()> {
        if self.intensities.len() != self.voxel_count() || self.mask.len() != self.voxel_count() {
            return Err(Error::InvalidArgument(format!(
                "volume {}: payload sizes {}/{} do not match dims {:?}",
                self.id,
                self.intensities.len(),
                self.mask.len(),
                self.dims
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

struct DomainProfile {
    lesion_count: (usize, usize),
    radius: (f64, f64),
    contrast: f64,
    gamma: Option<(f64, f64)>,
}

impl Domain {
    fn profile(self) -> DomainProfile {
        match self {
            // many small, high-contrast lesions
            Domain::Source => DomainProfile {
                lesion_count: (3, 8),
                radius: (1.0, 3.0),
                contrast: 0.35,
                gamma: None,
            },
            // fewer mid-size, low-contrast lesions on a gamma-shifted background
            Domain::Target => DomainProfile {
                lesion_count: (2, 4),
                radius: (2.0, 4.5),
                contrast: 0.12,
                gamma: Some((0.70, 0.90)),
            },
        }
    }
}

/// Separable box blur, one pass per axis, repeated `passes` times.
fn smooth(field: &mut Vec<f32>, (d, h, w): (usize, usize, usize), radius: usize, passes: usize) {
    let mut tmp = vec![0f32; field.len()];
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for _ in 0..passes {
        for (axis, ext) in [(0usize, d), (1, h), (2, w)] {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let c = [z, y, x][axis];
                        let lo = c.saturating_sub(radius);
                        let hi = (c + radius).min(ext - 1);
                        let mut acc = 0f32;
                        for t in lo..=hi {
                            let mut p = [z, y, x];
                            p[axis] = t;
                            acc += field[idx(p[0], p[1], p[2])];
                        }
                        tmp[idx(z, y, x)] = acc / (hi - lo + 1) as f32;
                    }
                }
            }
            std::mem::swap(field, &mut tmp);
        }
    }
}

/// Generate one volume. Deterministic given (domain, dims, the stream state).
pub fn gen_volume(
    domain: Domain,
    dims: (usize, usize, usize),
    id: &str,
    rng: &mut Stream,
) -> Result<Volume> {
    let (d, h, w) = dims;
    if d < 16 || h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!(
            "dims {:?} too small: every axis must be >= 16",
            dims
        )));
    }
    let profile = domain.profile();
    let n = d * h * w;

    // smoothed-noise background scaled into [0.15, 0.55]
    let mut bg: Vec<f32> = (0..n).map(|_| rng.uniform_f64() as f32).collect();
    smooth(&mut bg, dims, 2, 2);
    let (mut lo, mut hi) = (f32::MAX, f32::MIN);
    for &v in &bg {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-6);
    for v in bg.iter_mut() {
        *v = 0.15 + 0.40 * (*v - lo) / span;
    }

    let gamma = profile
        .gamma
        .map(|(glo, ghi)| rng.uniform_range(glo, ghi) as f32);

    // lesions: additive ellipsoids with a shared radial falloff texture
    for _attempt in 0..8 {
        let mut intensities = bg.clone();
        if let Some(g) = gamma {
            for v in intensities.iter_mut() {
                *v = v.powf(g);
            }
        }
        let mut mask = vec![0u8; n];
        let count = profile.lesion_count.0
            + rng.uniform_usize(profile.lesion_count.1 - profile.lesion_count.0 + 1);
        for _ in 0..count {
            let (rlo, rhi) = profile.radius;
            let axes = [
                rng.uniform_range(rlo, rhi),
                rng.uniform_range(rlo, rhi),
                rng.uniform_range(rlo, rhi),
            ];
            let margin = rhi.ceil() as usize;
            let center = [
                margin + rng.uniform_usize(d.saturating_sub(2 * margin).max(1)),
                margin + rng.uniform_usize(h.saturating_sub(2 * margin).max(1)),
                margin + rng.uniform_usize(w.saturating_sub(2 * margin).max(1)),
            ];
            let (zr, yr, xr) = (
                axes[0].ceil() as isize,
                axes[1].ceil() as isize,
                axes[2].ceil() as isize,
            );
            for dz in -zr..=zr {
                for dy in -yr..=yr {
                    for dx in -xr..=xr {
                        let z = center[0] as isize + dz;
                        let y = center[1] as isize + dy;
                        let x = center[2] as isize + dx;
                        if z < 0 || y < 0 || x < 0 {
                            continue;
                        }
                        let (z, y, x) = (z as usize, y as usize, x as usize);
                        if z >= d || y >= h || x >= w {
                            continue;
                        }
                        let r2 = (dz as f64 / axes[0]).powi(2)
                            + (dy as f64 / axes[1]).powi(2)
                            + (dx as f64 / axes[2]).powi(2);
                        if r2 <= 1.0 {
                            let i = (z * h + y) * w + x;
                            mask[i] = 1;
                            let falloff = 1.0 - 0.5 * r2;
                            intensities[i] += (profile.contrast * falloff) as f32;
                        }
                    }
                }
            }
        }
        if mask.iter().any(|&m| m == 1) {
            for v in intensities.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            return Ok(Volume {
                dims,
                intensities,
                mask,
                domain,
                id: id.to_string(),
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not generate a nonempty mask for volume {id}"
    )))
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    domain: Domain,
    id: String,
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    v.validate()?;
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&p, e))?;
    let mut wtr = BufWriter::new(file);
    let io = |e| Error::io(&p, e);
    wtr.write_all(MVOL_MAGIC).map_err(io)?;
    let header = VolumeHeader {
        dims: [v.dims.0, v.dims.1, v.dims.2],
        domain: v.domain,
        id: v.id.clone(),
    };
    serde_json::to_writer(&mut wtr, &header)?;
    wtr.write_all(b"\n").map_err(io)?;
    for &x in &v.intensities {
        wtr.write_all(&x.to_le_bytes()).map_err(io)?;
    }
    wtr.write_all(&v.mask).map_err(io)?;
    wtr.flush().map_err(io)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut r = BufReader::new(file);
    expect_magic(&mut r, MVOL_MAGIC, &p)?;
    let header: VolumeHeader = read_json_line(&mut r, &p)?;
    let n = header.dims.iter().product::<usize>();
    let mut float_bytes = vec![0u8; 4 * n];
    r.read_exact(&mut float_bytes).map_err(|_| Error::Truncated {
        path: p.clone(),
        detail: "intensity payload shorter than header dims imply".into(),
    })?;
    let intensities: Vec<f32> = float_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut mask = vec![0u8; n];
    r.read_exact(&mut mask).map_err(|_| Error::Truncated {
        path: p.clone(),
        detail: "mask payload shorter than header dims imply".into(),
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(&p, e))? != 0 {
        return Err(Error::PayloadMismatch {
            path: p,
            detail: format!("trailing bytes after {} voxels", n),
        });
    }
    for (i, &m) in mask.iter().enumerate() {
        if m > 1 {
            return Err(Error::PayloadMismatch {
                path: p,
                detail: format!("mask byte {} at voxel {} is not 0/1", m, i),
            });
        }
    }
    Ok(Volume {
        dims: (header.dims[0], header.dims[1], header.dims[2]),
        intensities,
        mask,
        domain: header.domain,
        id: header.id,
    })
}

/// Uniform train/test sampling without replacement from an id pool.
pub fn make_splits(
    pool: &[String],
    train_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<SplitSpec> {
    if ![5, 10, 15, 20].contains(&train_size) {
        return Err(Error::InvalidArgument(format!(
            "train_size must be one of 5, 10, 15, 20; got {train_size}"
        )));
    }
    if pool.len() < train_size + test_size {
        return Err(Error::InvalidArgument(format!(
            "pool of {} ids too small for train {} + test {}",
            pool.len(),
            train_size,
            test_size
        )));
    }
    let mut rng = Stream::derive(seed, "make_splits");
    let picks = rng.sample_without_replacement(pool.len(), train_size + test_size);
    let train_ids = picks[..train_size]
        .iter()
        .map(|&i| pool[i].clone())
        .collect();
    let test_ids = picks[train_size..]
        .iter()
        .map(|&i| pool[i].clone())
        .collect();
    Ok(SplitSpec {
        train_ids,
        test_ids,
        seed,
    })
}
