//! Stochastic variational inference on the target data: a fully factorized
//! Gaussian posterior q_theta(w) over all network weights, optimized jointly
//! with the prior's encoder psi. Per step the objective is
//!
//!   N * (-bce_dice(w_hat)) + sum_slices [ -log q(w_hat) - log r(z_hat|w_hat)
//!                                         + log p(z_hat) + log p(w_hat|z_hat) ]
//!
//! with w_hat a reparameterized draw from q and z_hat from the encoder.
//! Non-kernel parameters (biases) fall back to a standard-normal prior.
//! All gradients are pathwise and hand-written; the decoder phi stays frozen.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::dwp::{
    decode_raw, encode_raw, mlp::mlp_backward, mlp::VarianceHead, VAEPrior, DEC_PREFIX, ENC_PREFIX,
    KERNEL_DIM,
};
use crate::error::{Error, Result};
use crate::numerics::act::sigmoid;
use crate::numerics::adam::{AdamConfig, OptimizerState};
use crate::numerics::real::Real;
use crate::numerics::rng::Stream;
use crate::numerics::tensor::Tensor;
use crate::segnet::loss::{bce_dice_loss, bce_dice_loss_backward};
use crate::segnet::params::ParamSet;
use crate::segnet::unet::{build_unet, unet_backward, unet_forward, Init, UNetConfig};
use crate::harvest::SHARED_GROUP_KEY;

const LN_2PI: f64 = 1.8378770664093453;
pub const INIT_LOG_SIGMA: f64 = -5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior<F: Real> {
    pub mu: ParamSet<F>,
    pub log_sigma: ParamSet<F>,
}

impl<F: Real> VariationalPosterior<F> {
    pub fn validate(&self) -> Result<()> {
        if !self.mu.congruent(&self.log_sigma) {
            return Err(Error::InvalidArgument(
                "posterior mu and log_sigma are not congruent".into(),
            ));
        }
        self.mu.check_finite("posterior.mu")?;
        self.log_sigma.check_finite("posterior.log_sigma")
    }

    pub fn cast<G: Real>(&self) -> VariationalPosterior<G> {
        VariationalPosterior {
            mu: self.mu.cast(),
            log_sigma: self.log_sigma.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    Dwp,
    StdNormal,
}

/// Weight of the data term relative to the prior term. `DatasetSize`
/// multiplies the mean-voxel loss by the number of training volumes;
/// `DatasetVoxels` additionally multiplies by the voxel count, making the
/// data term an estimate of the full dataset log-likelihood (the mean-voxel
/// loss hides a 1/voxels factor). With ~1e5 network weights the prior term
/// otherwise swamps the likelihood and the posterior never fits the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodScale {
    DatasetSize,
    DatasetVoxels,
}

impl LikelihoodScale {
    pub fn scale(self, n_volumes: usize, voxels: usize) -> f64 {
        match self {
            LikelihoodScale::DatasetSize => n_volumes as f64,
            LikelihoodScale::DatasetVoxels => (n_volumes * voxels) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VITrainConfig {
    pub epochs: usize,
    pub lr_theta: f64,
    pub lr_psi: f64,
    pub mc_samples: usize,
    pub likelihood_scale: LikelihoodScale,
    pub lambda_dice: f64,
    pub prior_mode: PriorMode,
    pub seed: u64,
}

impl Default for VITrainConfig {
    fn default() -> Self {
        VITrainConfig {
            epochs: 60,
            lr_theta: 1e-3,
            lr_psi: 1e-3,
            mc_samples: 1,
            likelihood_scale: LikelihoodScale::DatasetSize,
            lambda_dice: 1.0,
            prior_mode: PriorMode::Dwp,
            seed: 1,
        }
    }
}

impl VITrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples < 1 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fresh posterior over a U-Net: mu He-initialized, log_sigma constant -5.
pub fn init_posterior<F: Real>(cfg: &UNetConfig, rng: &mut Stream) -> Result<VariationalPosterior<F>> {
    let mu = build_unet(cfg, Init::HeRandom, rng)?;
    let log_sigma = mu.map_values(|t| Tensor::full(t.shape(), F::from_f64(INIT_LOG_SIGMA)));
    Ok(VariationalPosterior { mu, log_sigma })
}

/// Posterior centered on existing weights (used to warm-start from a trained
/// model), log_sigma constant -5.
pub fn posterior_from_params<F: Real>(params: &ParamSet<F>) -> VariationalPosterior<F> {
    VariationalPosterior {
        mu: params.clone(),
        log_sigma: params.map_values(|t| Tensor::full(t.shape(), F::from_f64(INIT_LOG_SIGMA))),
    }
}

/// One reparameterized draw per scalar weight; the noise is returned so
/// gradients can be pathed and tests can hold it fixed.
pub fn sample_weights<F: Real>(
    q: &VariationalPosterior<F>,
    rng: &mut Stream,
) -> Result<(ParamSet<F>, ParamSet<F>)> {
    let mut w = ParamSet::new();
    let mut noise = ParamSet::new();
    for ((name, mu), (_, ls)) in q.mu.iter().zip(q.log_sigma.iter()) {
        let (s, e) = crate::numerics::rng::reparam_sample(mu, ls, rng)?;
        w.insert(name, s);
        noise.insert(name, e);
    }
    Ok((w, noise))
}

fn is_kernel_tensor(shape: &[usize]) -> bool {
    shape.len() == 5 && shape[2..] == [3, 3, 3]
}

fn layer_key(tensor_name: &str) -> &str {
    tensor_name.strip_suffix(".weight").unwrap_or(tensor_name)
}

/// Gradient accumulators for one objective evaluation, in minimization
/// convention (d of the negated objective).
pub struct StepGrads<F: Real> {
    pub dmu: ParamSet<F>,
    pub dls: ParamSet<F>,
    pub dpsi: BTreeMap<String, ParamSet<F>>,
}

struct PriorAccum<F: Real> {
    /// d(-objective)/d(w_hat), folded into the reparameterization chain later.
    dw: ParamSet<F>,
    /// Direct (non-chained) contributions to dmu / dlog_sigma from -log q.
    dmu_direct: ParamSet<F>,
    dls_direct: ParamSet<F>,
    dpsi: BTreeMap<String, ParamSet<F>>,
}

/// Core of the prior term. Returns the summed bound contribution
/// sum[-log q + prior log-densities] in maximization convention; when `accum`
/// is given, fills gradients of the *negated* term. z-noise is drawn from
/// `rng` group by group in sorted group order, row-major within a group.
fn prior_terms_core<F: Real>(
    q: &VariationalPosterior<F>,
    w_hat: &ParamSet<F>,
    priors: &BTreeMap<String, VAEPrior<F>>,
    mode: PriorMode,
    rng: &mut Stream,
    mut accum: Option<&mut PriorAccum<F>>,
) -> Result<F> {
    let half = F::from_f64(0.5);
    let ln2pi = F::from_f64(LN_2PI);
    let mut total = F::zero();

    // -log q over every scalar weight, evaluated at the sampled point.
    for ((name, w), (_, mu)) in w_hat.iter().zip(q.mu.iter()) {
        let ls = q.log_sigma.require(name)?;
        for i in 0..w.len() {
            let diff = w.data()[i] - mu.data()[i];
            let lsv = ls.data()[i];
            let inv_var = (-(lsv + lsv)).exp();
            total += -(-half * (diff * diff * inv_var + lsv + lsv + ln2pi));
            if let Some(acc) = accum.as_deref_mut() {
                // objective has -log q; negated objective has +log q
                acc.dw.get_mut(name).unwrap().data_mut()[i] += -diff * inv_var;
                acc.dmu_direct.get_mut(name).unwrap().data_mut()[i] += diff * inv_var;
                acc.dls_direct.get_mut(name).unwrap().data_mut()[i] += diff * diff * inv_var - F::one();
            }
        }
    }

    match mode {
        PriorMode::StdNormal => {
            for (name, w) in w_hat.iter() {
                for i in 0..w.len() {
                    let v = w.data()[i];
                    total += -half * (v * v + ln2pi);
                    if let Some(acc) = accum.as_deref_mut() {
                        acc.dw.get_mut(name).unwrap().data_mut()[i] += v;
                    }
                }
            }
        }
        PriorMode::Dwp => {
            // assign each tensor to a prior group; batch slices per group
            let mut group_rows: BTreeMap<String, Vec<(String, usize)>> = BTreeMap::new();
            for (name, w) in w_hat.iter() {
                if is_kernel_tensor(w.shape()) {
                    let key = if priors.contains_key(SHARED_GROUP_KEY) {
                        SHARED_GROUP_KEY.to_string()
                    } else {
                        let k = layer_key(name).to_string();
                        if !priors.contains_key(&k) {
                            return Err(Error::InvalidArgument(format!(
                                "conv layer {name} has no mapped prior group"
                            )));
                        }
                        k
                    };
                    let rows = group_rows.entry(key).or_default();
                    let n_slices = w.len() / KERNEL_DIM;
                    for s in 0..n_slices {
                        rows.push((name.to_string(), s * KERNEL_DIM));
                    }
                } else {
                    // standard-normal fallback for biases and any non-3x3x3 tensor
                    for i in 0..w.len() {
                        let v = w.data()[i];
                        total += -half * (v * v + ln2pi);
                        if let Some(acc) = accum.as_deref_mut() {
                            acc.dw.get_mut(name).unwrap().data_mut()[i] += v;
                        }
                    }
                }
            }

            for (key, rows) in &group_rows {
                let prior = priors.get(key).unwrap();
                let b = rows.len();
                let latent = prior.config.latent_dim;
                let mut wdata = Vec::with_capacity(b * KERNEL_DIM);
                for (name, off) in rows {
                    wdata.extend_from_slice(&w_hat.require(name)?.data()[*off..][..KERNEL_DIM]);
                }
                let w = Tensor::from_vec(&[b, KERNEL_DIM], wdata)?;

                let (mu_z, ls_z, enc_cache) = encode_raw(prior, &w)?;
                let eta = rng.normal_tensor::<F>(&[b, latent]);
                let z = crate::numerics::rng::apply_reparam(&mu_z, &ls_z, &eta);
                let (mu_w, ls_w, dec_cache) = decode_raw(prior, &z)?;

                // term values
                for i in 0..z.len() {
                    let lsv = ls_z.data()[i];
                    let e = eta.data()[i];
                    // -log r + log p(z) at z_hat = mu_z + sigma*eta
                    total += half * (e * e + lsv + lsv + ln2pi);
                    let zv = z.data()[i];
                    total += -half * (zv * zv + ln2pi);
                }
                for i in 0..w.len() {
                    let diff = w.data()[i] - mu_w.data()[i];
                    let lsv = ls_w.data()[i];
                    let inv_var = (-(lsv + lsv)).exp();
                    total += -half * (diff * diff * inv_var + lsv + lsv + ln2pi);
                }

                if let Some(acc) = accum.as_deref_mut() {
                    // negated objective: -log p(w|z) through the decoder
                    let mut dmu_w = Tensor::zeros(mu_w.shape());
                    let mut dls_w = Tensor::zeros(ls_w.shape());
                    let mut dw_direct = Tensor::zeros(w.shape());
                    for i in 0..w.len() {
                        let diff = w.data()[i] - mu_w.data()[i];
                        let lsv = ls_w.data()[i];
                        let inv_var = (-(lsv + lsv)).exp();
                        dmu_w.data_mut()[i] = -diff * inv_var;
                        dls_w.data_mut()[i] = F::one() - diff * diff * inv_var;
                        dw_direct.data_mut()[i] = diff * inv_var;
                    }
                    let dz_dec = mlp_backward(
                        &prior.phi,
                        DEC_PREFIX,
                        &prior.config.decoder_spec(),
                        prior.config.decoder_head(),
                        &dec_cache,
                        &dmu_w,
                        &dls_w,
                        None,
                    )?;
                    // dz: decoder path, -log p(z), +log r explicit
                    let mut dz = dz_dec;
                    let mut dmu_z = Tensor::zeros(mu_z.shape());
                    let mut dls_z = Tensor::zeros(ls_z.shape());
                    for i in 0..z.len() {
                        let e = eta.data()[i];
                        let sig = ls_z.data()[i].exp();
                        dz.data_mut()[i] += z.data()[i] - e / sig;
                        // chain z = mu_z + sigma*eta plus +log r explicit parts
                        dmu_z.data_mut()[i] = dz.data()[i] + e / sig;
                        dls_z.data_mut()[i] = dz.data()[i] * sig * e + e * e - F::one();
                    }
                    let dpsi = acc
                        .dpsi
                        .entry(key.clone())
                        .or_insert_with(|| prior.psi.zeros_like());
                    let dw_enc = mlp_backward(
                        &prior.psi,
                        ENC_PREFIX,
                        &prior.config.encoder_spec(),
                        VarianceHead::PerElement,
                        &enc_cache,
                        &dmu_z,
                        &dls_z,
                        Some(dpsi),
                    )?;
                    // scatter dw back to the named tensors
                    for (r, (name, off)) in rows.iter().enumerate() {
                        let t = acc.dw.get_mut(name).unwrap();
                        for i in 0..KERNEL_DIM {
                            t.data_mut()[off + i] +=
                                dw_direct.data()[r * KERNEL_DIM + i] + dw_enc.data()[r * KERNEL_DIM + i];
                        }
                    }
                }
            }
        }
    }
    Ok(total)
}

/// One-sample estimate of the prior bound term (maximization convention).
pub fn prior_bound_term<F: Real>(
    q: &VariationalPosterior<F>,
    w_hat: &ParamSet<F>,
    priors: &BTreeMap<String, VAEPrior<F>>,
    mode: PriorMode,
    rng: &mut Stream,
) -> Result<F> {
    prior_terms_core(q, w_hat, priors, mode, rng, None)
}

/// Full single-volume objective (maximization convention) and gradients of
/// its negation w.r.t. theta and psi, with the reparameterization noise held
/// to the given tensors and z-noise drawn from `rng`.
pub fn objective_step<F: Real>(
    cfg: &UNetConfig,
    q: &VariationalPosterior<F>,
    noise: &ParamSet<F>,
    priors: &BTreeMap<String, VAEPrior<F>>,
    mode: PriorMode,
    volume: &Volume,
    likelihood_scale: f64,
    lambda_dice: f64,
    rng: &mut Stream,
    want_grads: bool,
) -> Result<(F, F, F, Option<StepGrads<F>>)> {
    // w_hat = mu + sigma * noise
    let mut w_hat = ParamSet::new();
    for ((name, mu), (_, ls)) in q.mu.iter().zip(q.log_sigma.iter()) {
        let e = noise.require(name)?;
        w_hat.insert(name, crate::numerics::rng::apply_reparam(mu, ls, e));
    }

    let input = volume.input_tensor::<F>();
    let mask = volume.mask_tensor::<F>();
    let (logits, cache) = unet_forward(cfg, &w_hat, &input)?;
    let (loss, _) = bce_dice_loss(&logits, &mask, lambda_dice)?;
    let scale = F::from_f64(likelihood_scale);
    let data_term = -scale * loss;

    let mut acc = if want_grads {
        Some(PriorAccum {
            dw: q.mu.zeros_like(),
            dmu_direct: q.mu.zeros_like(),
            dls_direct: q.mu.zeros_like(),
            dpsi: BTreeMap::new(),
        })
    } else {
        None
    };
    let prior_term = prior_terms_core(q, &w_hat, priors, mode, rng, acc.as_mut())?;
    let objective = data_term + prior_term;

    let grads = if let Some(mut acc) = acc {
        let dlogits = bce_dice_loss_backward(&logits, &mask, lambda_dice)?;
        let dw_data = unet_backward(cfg, &w_hat, &cache, &dlogits)?;
        // negated objective includes +scale * loss
        acc.dw.add_scaled(&dw_data, scale);
        // chain w_hat = mu + exp(ls) * eps into (mu, log_sigma)
        let mut dmu = acc.dmu_direct;
        let mut dls = acc.dls_direct;
        for ((name, dm), (_, dl)) in dmu.iter_mut().zip(dls.iter_mut()) {
            let dw = acc.dw.require(name)?;
            let wv = w_hat.require(name)?;
            let muv = q.mu.require(name)?;
            for i in 0..dm.len() {
                dm.data_mut()[i] += dw.data()[i];
                // sigma * eps = w_hat - mu
                dl.data_mut()[i] += dw.data()[i] * (wv.data()[i] - muv.data()[i]);
            }
        }
        Some(StepGrads {
            dmu,
            dls,
            dpsi: acc.dpsi,
        })
    } else {
        None
    };
    Ok((objective, data_term, prior_term, grads))
}

/// Variational training on the target set. Returns the trained posterior, the
/// jointly trained priors (psi updated, phi untouched), and the per-epoch
/// mean objective trace.
pub fn train_dwp<F: Real>(
    target_train: &[Volume],
    cfg: &UNetConfig,
    priors: &BTreeMap<String, VAEPrior<F>>,
    vcfg: &VITrainConfig,
    init: VariationalPosterior<F>,
    rng: &mut Stream,
) -> Result<(VariationalPosterior<F>, BTreeMap<String, VAEPrior<F>>, Vec<f64>)> {
    vcfg.validate()?;
    if target_train.is_empty() {
        return Err(Error::InvalidArgument("empty target training set".into()));
    }
    init.validate()?;
    let mut q = init;
    let mut priors = priors.clone();
    let n = target_train.len();

    // theta and psi get separate optimizers (separate learning rates)
    let mut opt_theta = OptimizerState::new(AdamConfig::with_lr(vcfg.lr_theta));
    let mut opt_psi = OptimizerState::new(AdamConfig::with_lr(vcfg.lr_psi));

    let mut order: Vec<usize> = (0..target_train.len()).collect();
    let mut trace = Vec::with_capacity(vcfg.epochs);
    let mut step = 0usize;
    for _epoch in 0..vcfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_obj = 0.0;
        for &vi in &order {
            step += 1;
            let volume = &target_train[vi];
            let inv_mc = F::from_f64(1.0 / vcfg.mc_samples as f64);
            let mut obj_avg = F::zero();
            let mut dmu_avg = q.mu.zeros_like();
            let mut dls_avg = q.mu.zeros_like();
            let mut dpsi_avg: BTreeMap<String, ParamSet<F>> = BTreeMap::new();
            for _ in 0..vcfg.mc_samples {
                let (_, noise) = sample_weights(&q, rng)?;
                let scale = vcfg.likelihood_scale.scale(n, volume.voxel_count());
                let (obj, data_term, prior_term, grads) = objective_step(
                    cfg,
                    &q,
                    &noise,
                    &priors,
                    vcfg.prior_mode,
                    volume,
                    scale,
                    vcfg.lambda_dice,
                    rng,
                    true,
                )?;
                if !obj.is_finite() {
                    return Err(Error::NonFinite {
                        context: "train_dwp".into(),
                        detail: format!(
                            "objective non-finite at step {step}: data_term {}, prior_term {}",
                            data_term, prior_term
                        ),
                    });
                }
                let g = grads.unwrap();
                obj_avg += obj * inv_mc;
                dmu_avg.add_scaled(&g.dmu, inv_mc);
                dls_avg.add_scaled(&g.dls, inv_mc);
                for (k, pg) in g.dpsi {
                    dpsi_avg
                        .entry(k)
                        .and_modify(|a| a.add_scaled(&pg, inv_mc))
                        .or_insert_with(|| {
                            let mut z = pg.zeros_like();
                            z.add_scaled(&pg, inv_mc);
                            z
                        });
                }
            }
            epoch_obj += obj_avg.to_f64_();

            // theta update over a combined name space
            let mut theta = ParamSet::new();
            let mut theta_grads = ParamSet::new();
            for ((name, m), (_, l)) in q.mu.iter().zip(q.log_sigma.iter()) {
                theta.insert(format!("mu.{name}"), m.clone());
                theta.insert(format!("ls.{name}"), l.clone());
                theta_grads.insert(format!("mu.{name}"), dmu_avg.get(name).unwrap().clone());
                theta_grads.insert(format!("ls.{name}"), dls_avg.get(name).unwrap().clone());
            }
            opt_theta.step(&mut theta, &theta_grads)?;
            for (name, t) in q.mu.iter_mut() {
                *t = theta.get(&format!("mu.{name}")).unwrap().clone();
            }
            for (name, t) in q.log_sigma.iter_mut() {
                *t = theta.get(&format!("ls.{name}")).unwrap().clone();
            }

            // psi update, one combined step across groups; phi never touched
            if !dpsi_avg.is_empty() {
                let mut psi = ParamSet::new();
                let mut psi_grads = ParamSet::new();
                for (key, pg) in &dpsi_avg {
                    let prior = priors.get(key).unwrap();
                    for (name, t) in prior.psi.iter() {
                        psi.insert(format!("{key}|{name}"), t.clone());
                        psi_grads.insert(format!("{key}|{name}"), pg.get(name).unwrap().clone());
                    }
                }
                opt_psi.step(&mut psi, &psi_grads)?;
                for (key, prior) in priors.iter_mut() {
                    if dpsi_avg.contains_key(key) {
                        for (name, t) in prior.psi.iter_mut() {
                            *t = psi.get(&format!("{key}|{name}")).unwrap().clone();
                        }
                    }
                }
            }
        }
        trace.push(epoch_obj / target_train.len() as f64);
    }
    Ok((q, priors, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    Mean,
    McAverage(usize),
}

/// Per-voxel foreground probabilities for one volume.
pub fn predict<F: Real>(
    q: &VariationalPosterior<F>,
    cfg: &UNetConfig,
    volume: &Volume,
    mode: PredictMode,
    rng: &mut Stream,
) -> Result<Tensor<F>> {
    let input = volume.input_tensor::<F>();
    match mode {
        PredictMode::Mean => {
            let (logits, _) = unet_forward(cfg, &q.mu, &input)?;
            Ok(logits.map(sigmoid))
        }
        PredictMode::McAverage(n) => {
            if n == 0 {
                return Err(Error::InvalidArgument("mc_average needs n >= 1".into()));
            }
            let mut acc: Option<Tensor<F>> = None;
            let inv = F::from_f64(1.0 / n as f64);
            for _ in 0..n {
                let (w, _) = sample_weights(q, rng)?;
                let (logits, _) = unet_forward(cfg, &w, &input)?;
                let probs = logits.map(sigmoid);
                match acc.as_mut() {
                    None => {
                        acc = Some(probs.map(|v| v * inv));
                    }
                    Some(a) => a.add_scaled(&probs, inv),
                }
            }
            Ok(acc.unwrap())
        }
    }
}
