//! Central-difference gradient verification for scalar losses over parameter
//! sets. Run in f64; the implementations under test are generic so the same
//! code path is exercised.

use crate::error::{Error, Result};
use crate::numerics::rng::Stream;
use crate::segnet::params::ParamSet;

pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub checked_coords: usize,
    /// (param name, flat index, analytic, finite-difference) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare `analytic` gradients of `loss_fn` against central differences on a
/// random subsample of at most `max_coords` coordinates. Relative error uses
/// a small absolute floor so near-zero gradients do not blow up the ratio.
pub fn finite_diff_check(
    mut loss_fn: impl FnMut(&ParamSet<f64>) -> Result<f64>,
    params: &ParamSet<f64>,
    analytic: &ParamSet<f64>,
    epsilon: f64,
    max_coords: usize,
    rng: &mut Stream,
) -> Result<FiniteDiffReport> {
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, t) in params.iter() {
        for i in 0..t.len() {
            coords.push((name.to_string(), i));
        }
    }
    if coords.len() > max_coords {
        let picks = rng.sample_without_replacement(coords.len(), max_coords);
        let mut subset: Vec<(String, usize)> = picks.into_iter().map(|i| coords[i].clone()).collect();
        subset.sort();
        coords = subset;
    }

    let floor = 1e-4;
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        checked_coords: coords.len(),
        worst: None,
    };
    let mut probe = params.clone();
    for (name, idx) in coords {
        let orig = probe.get(&name).unwrap().data()[idx];
        probe.get_mut(&name).unwrap().data_mut()[idx] = orig + epsilon;
        let lp = loss_fn(&probe)?;
        probe.get_mut(&name).unwrap().data_mut()[idx] = orig - epsilon;
        let lm = loss_fn(&probe)?;
        probe.get_mut(&name).unwrap().data_mut()[idx] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_diff_check".into(),
                detail: format!("loss non-finite at probe of {name}[{idx}]"),
            });
        }
        let fd = (lp - lm) / (2.0 * epsilon);
        let a = analytic
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("no analytic gradient for {name}")))?
            .data()[idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name.clone(), idx, a, fd));
        }
    }
    Ok(report)
}
