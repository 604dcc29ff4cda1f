//! Implicit kernel prior: a VAE over flattened 3x3x3 kernel slices with
//! Gaussian encoder r_psi(z|w) and Gaussian decoder p_phi(w|z), trained by the
//! standard evidence lower bound. Provides sampling and the per-slice
//! log-density terms the inference stage consumes.

pub mod mlp;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::harvest::KernelSlice;
use crate::numerics::real::Real;
use crate::numerics::rng::Stream;
use crate::numerics::tensor::Tensor;
use crate::segnet::params::ParamSet;

use mlp::{init_mlp, mlp_backward, mlp_forward, MlpCache, MlpSpec, VarianceHead};

/// Flattened 3x3x3 kernel length.
pub const KERNEL_DIM: usize = 27;
/// Parameter-name prefix of encoder tensors inside psi.
pub const ENC_PREFIX: &str = "enc.";
/// Parameter-name prefix of decoder tensors inside phi.
pub const DEC_PREFIX: &str = "dec.";

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariance {
    LearnedPerElement,
    GlobalScalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VAEConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub decoder_variance: DecoderVariance,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for VAEConfig {
    fn default() -> Self {
        VAEConfig {
            latent_dim: 4,
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            decoder_variance: DecoderVariance::LearnedPerElement,
            epochs: 80,
            lr: 1e-3,
            batch_size: 64,
        }
    }
}

impl VAEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        for &w in self.encoder_hidden.iter().chain(&self.decoder_hidden) {
            if w < self.latent_dim {
                return Err(Error::Config(format!(
                    "hidden width {} smaller than latent_dim {}",
                    w, self.latent_dim
                )));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: KERNEL_DIM,
            hidden: self.encoder_hidden.clone(),
            output_dim: self.latent_dim,
        }
    }

    pub fn decoder_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.latent_dim,
            hidden: self.decoder_hidden.clone(),
            output_dim: KERNEL_DIM,
        }
    }

    pub fn decoder_head(&self) -> VarianceHead {
        match self.decoder_variance {
            DecoderVariance::LearnedPerElement => VarianceHead::PerElement,
            DecoderVariance::GlobalScalar => VarianceHead::GlobalScalar,
        }
    }
}

/// Trained prior for one kernel group. `psi` holds encoder tensors (names
/// under "enc."), `phi` decoder tensors (names under "dec.").
#[derive(Debug, Clone, PartialEq)]
pub struct VAEPrior<F: Real> {
    pub psi: ParamSet<F>,
    pub phi: ParamSet<F>,
    pub config: VAEConfig,
    pub group_key: String,
}

impl<F: Real> VAEPrior<F> {
    pub fn cast<G: Real>(&self) -> VAEPrior<G> {
        VAEPrior {
            psi: self.psi.cast(),
            phi: self.phi.cast(),
            config: self.config.clone(),
            group_key: self.group_key.clone(),
        }
    }
}

/// Untrained prior with freshly initialized encoder/decoder.
pub fn init_prior<F: Real>(cfg: &VAEConfig, group_key: &str, rng: &mut Stream) -> Result<VAEPrior<F>> {
    cfg.validate()?;
    let mut psi = ParamSet::new();
    init_mlp(&cfg.encoder_spec(), ENC_PREFIX, VarianceHead::PerElement, &mut psi, rng);
    let mut phi = ParamSet::new();
    init_mlp(&cfg.decoder_spec(), DEC_PREFIX, cfg.decoder_head(), &mut phi, rng);
    Ok(VAEPrior {
        psi,
        phi,
        config: cfg.clone(),
        group_key: group_key.to_string(),
    })
}

/// Exact diagonal-Gaussian log-density: -1/2 sum[(x-mu)^2/sigma^2 + 2*ls + ln 2pi].
pub fn gaussian_log_pdf<F: Real>(x: &[F], mu: &[F], log_sigma: &[F]) -> F {
    debug_assert_eq!(x.len(), mu.len());
    debug_assert_eq!(x.len(), log_sigma.len());
    let half = F::from_f64(0.5);
    let ln2pi = F::from_f64(LN_2PI);
    let mut acc = F::zero();
    for i in 0..x.len() {
        let d = x[i] - mu[i];
        let inv_var = (-(log_sigma[i] + log_sigma[i])).exp();
        acc += d * d * inv_var + log_sigma[i] + log_sigma[i] + ln2pi;
    }
    -half * acc
}

pub fn std_normal_log_pdf<F: Real>(x: &[F]) -> F {
    let half = F::from_f64(0.5);
    let ln2pi = F::from_f64(LN_2PI);
    let mut acc = F::zero();
    for &v in x {
        acc += v * v + ln2pi;
    }
    -half * acc
}

/// Batched encoder forward: (mu_z, log_sigma_z, cache) for w of shape [B,27].
pub fn encode_raw<F: Real>(
    prior: &VAEPrior<F>,
    w: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, MlpCache<F>)> {
    mlp_forward(&prior.psi, ENC_PREFIX, &prior.config.encoder_spec(), VarianceHead::PerElement, w)
}

/// Batched decoder forward: (mu_w, log_sigma_w, cache) for z of shape [B,latent].
pub fn decode_raw<F: Real>(
    prior: &VAEPrior<F>,
    z: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, MlpCache<F>)> {
    mlp_forward(&prior.phi, DEC_PREFIX, &prior.config.decoder_spec(), prior.config.decoder_head(), z)
}

/// Single-vector convenience: (mu_z, sigma_z).
pub fn encode<F: Real>(prior: &VAEPrior<F>, w: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
    let d = prior.config.latent_dim;
    let batched = w.clone().reshape(&[1, KERNEL_DIM])?;
    let (mu, ls, _) = encode_raw(prior, &batched)?;
    Ok((mu.reshape(&[d])?, ls.map(|v| v.exp()).reshape(&[d])?))
}

/// Single-vector convenience: (mu_w, sigma_w).
pub fn decode<F: Real>(prior: &VAEPrior<F>, z: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
    let d = prior.config.latent_dim;
    let batched = z.clone().reshape(&[1, d])?;
    let (mu, ls, _) = decode_raw(prior, &batched)?;
    Ok((
        mu.reshape(&[KERNEL_DIM])?,
        ls.map(|v| v.exp()).reshape(&[KERNEL_DIM])?,
    ))
}

/// Mean samples from the prior: z ~ N(0,I), w = mu_w(z) reshaped 3x3x3.
pub fn sample_kernels<F: Real>(
    prior: &VAEPrior<F>,
    n: usize,
    rng: &mut Stream,
) -> Result<Vec<KernelSlice>> {
    let z = rng.normal_tensor::<F>(&[n, prior.config.latent_dim]);
    let (mu_w, _, _) = decode_raw(prior, &z)?;
    mu_w.check_finite("sample_kernels")?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &mu_w.data()[i * KERNEL_DIM..][..KERNEL_DIM];
        let mut values = [0f32; 27];
        for (v, &x) in values.iter_mut().zip(row) {
            *v = x.to_f32_();
        }
        out.push(KernelSlice {
            values,
            layer_name: "sampled".to_string(),
            in_index: 0,
            out_index: i,
            snapshot_epoch: 0,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LogTerms<F: Real> {
    pub z_hat: Tensor<F>,
    pub log_r: F,
    pub log_p_z: F,
    pub log_p_w_given_z: F,
}

/// One-sample estimate of the prior's per-slice log-density terms at `w_hat`
/// (length 27): z_hat ~ r_psi(z|w_hat) by reparameterization, then exact
/// diagonal-Gaussian log-pdfs at (z_hat, w_hat).
pub fn log_terms<F: Real>(
    prior: &VAEPrior<F>,
    w_hat: &Tensor<F>,
    rng: &mut Stream,
) -> Result<LogTerms<F>> {
    let w = w_hat.clone().reshape(&[1, KERNEL_DIM])?;
    let (mu_z, ls_z, _) = encode_raw(prior, &w)?;
    let (z_hat, _) = crate::numerics::rng::reparam_sample(&mu_z, &ls_z, rng)?;
    let log_r = gaussian_log_pdf(z_hat.data(), mu_z.data(), ls_z.data());
    let log_p_z = std_normal_log_pdf(z_hat.data());
    let (mu_w, ls_w, _) = decode_raw(prior, &z_hat)?;
    let log_p_w_given_z = gaussian_log_pdf(w.data(), mu_w.data(), ls_w.data());
    Ok(LogTerms {
        z_hat: z_hat.reshape(&[prior.config.latent_dim])?,
        log_r,
        log_p_z,
        log_p_w_given_z,
    })
}

/// One forward/backward over a minibatch. Returns the mean per-sample bound
/// E[log p_phi(w|z)] - KL(r_psi(z|w) || N(0,I)); when `grads` is given,
/// accumulates d(-bound)/d(params) so a minimizer ascends the bound.
/// `params` holds psi and phi tensors jointly (prefixes keep names disjoint).
fn vae_step<F: Real>(
    cfg: &VAEConfig,
    params: &ParamSet<F>,
    w: &Tensor<F>,
    noise: &Tensor<F>,
    mut grads: Option<&mut ParamSet<F>>,
) -> Result<F> {
    let batch = w.shape()[0];
    let enc_spec = cfg.encoder_spec();
    let dec_spec = cfg.decoder_spec();
    let (mu_z, ls_z, enc_cache) =
        mlp_forward(params, ENC_PREFIX, &enc_spec, VarianceHead::PerElement, w)?;
    let z = crate::numerics::rng::apply_reparam(&mu_z, &ls_z, noise);
    let (mu_w, ls_w, dec_cache) =
        mlp_forward(params, DEC_PREFIX, &dec_spec, cfg.decoder_head(), &z)?;

    let half = F::from_f64(0.5);
    let ln2pi = F::from_f64(LN_2PI);
    let inv_b = F::from_f64(1.0 / batch as f64);

    // bound = (1/B) sum_b [ log p(w_b | z_b) - KL_b ]
    let mut loglik = F::zero();
    for i in 0..w.len() {
        let d = w.data()[i] - mu_w.data()[i];
        let ls = ls_w.data()[i];
        let inv_var = (-(ls + ls)).exp();
        loglik += -half * (d * d * inv_var + ls + ls + ln2pi);
    }
    let mut kl = F::zero();
    for i in 0..mu_z.len() {
        let m = mu_z.data()[i];
        let ls = ls_z.data()[i];
        let s2 = (ls + ls).exp();
        kl += half * (m * m + s2 - F::one()) - ls;
    }
    let bound = (loglik - kl) * inv_b;

    if let Some(grads) = grads.as_deref_mut() {
        // loss = -bound; decoder-output grads
        let mut dmu_w = Tensor::zeros(mu_w.shape());
        let mut dls_w = Tensor::zeros(ls_w.shape());
        for i in 0..w.len() {
            let d = w.data()[i] - mu_w.data()[i];
            let ls = ls_w.data()[i];
            let inv_var = (-(ls + ls)).exp();
            dmu_w.data_mut()[i] = -d * inv_var * inv_b;
            dls_w.data_mut()[i] = (F::one() - d * d * inv_var) * inv_b;
        }
        let dz = mlp_backward(
            params, DEC_PREFIX, &dec_spec, cfg.decoder_head(), &dec_cache, &dmu_w, &dls_w,
            Some(grads),
        )?;
        // encoder-output grads: KL part plus the chain through z
        let mut dmu_z = dz.clone();
        let mut dls_z = Tensor::zeros(ls_z.shape());
        for i in 0..mu_z.len() {
            let m = mu_z.data()[i];
            let ls = ls_z.data()[i];
            let sigma = ls.exp();
            dmu_z.data_mut()[i] += m * inv_b;
            dls_z.data_mut()[i] = (sigma * sigma - F::one()) * inv_b + dz.data()[i] * sigma * noise.data()[i];
        }
        mlp_backward(
            params, ENC_PREFIX, &enc_spec, VarianceHead::PerElement, &enc_cache, &dmu_z, &dls_z,
            Some(grads),
        )?;
    }
    Ok(bound)
}

/// Train the VAE on one kernel group by minibatch gradient ascent on the
/// evidence lower bound. Returns the trained prior and the per-epoch mean
/// bound trace.
pub fn train_vae<F: Real>(
    slices: &[KernelSlice],
    group_key: &str,
    cfg: &VAEConfig,
    rng: &mut Stream,
) -> Result<(VAEPrior<F>, Vec<f64>)> {
    if slices.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "empty kernel group {group_key}"
        )));
    }
    let prior = init_prior::<F>(cfg, group_key, rng)?;
    let batch_size = cfg.batch_size.min(slices.len());

    let mut params = ParamSet::new();
    for (n, t) in prior.psi.iter() {
        params.insert(n, t.clone());
    }
    for (n, t) in prior.phi.iter() {
        params.insert(n, t.clone());
    }

    let data: Vec<F> = slices
        .iter()
        .flat_map(|s| s.values.iter().map(|&v| F::from_f32_(v)))
        .collect();
    let all = Tensor::from_vec(&[slices.len(), KERNEL_DIM], data)?;

    let mut opt = crate::numerics::adam::OptimizerState::new(
        crate::numerics::adam::AdamConfig::with_lr(cfg.lr),
    );
    let mut order: Vec<usize> = (0..slices.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_bound = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut wdata = Vec::with_capacity(chunk.len() * KERNEL_DIM);
            for &i in chunk {
                wdata.extend_from_slice(&all.data()[i * KERNEL_DIM..][..KERNEL_DIM]);
            }
            let w = Tensor::from_vec(&[chunk.len(), KERNEL_DIM], wdata)?;
            let noise = rng.normal_tensor::<F>(&[chunk.len(), cfg.latent_dim]);
            let mut grads = params.zeros_like();
            let bound = vae_step(cfg, &params, &w, &noise, Some(&mut grads))?;
            if !bound.is_finite() {
                return Err(Error::NonFinite {
                    context: "train_vae".into(),
                    detail: format!("bound non-finite in group {group_key}"),
                });
            }
            opt.step(&mut params, &grads)?;
            epoch_bound += bound.to_f64_();
            batches += 1;
        }
        trace.push(epoch_bound / batches as f64);
    }

    let mut psi = ParamSet::new();
    let mut phi = ParamSet::new();
    for (n, t) in params.iter() {
        if n.starts_with(ENC_PREFIX) {
            psi.insert(n, t.clone());
        } else {
            phi.insert(n, t.clone());
        }
    }
    Ok((
        VAEPrior {
            psi,
            phi,
            config: cfg.clone(),
            group_key: group_key.to_string(),
        },
        trace,
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorSidecar {
    config: VAEConfig,
    group_key: String,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Persist as a CKPT1 container plus a `<path>.json` sidecar with the config
/// and group key.
pub fn write_prior<F: Real>(prior: &VAEPrior<F>, path: &Path) -> Result<()> {
    let mut combined = ParamSet::new();
    for (n, t) in prior.psi.iter().chain(prior.phi.iter()) {
        combined.insert(n, t.clone());
    }
    write_checkpoint(&combined, path)?;
    let sc = PriorSidecar {
        config: prior.config.clone(),
        group_key: prior.group_key.clone(),
    };
    let sp = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sc)?;
    std::fs::write(&sp, text).map_err(|e| Error::io(sp.display().to_string(), e))
}

pub fn read_prior<F: Real>(path: &Path) -> Result<VAEPrior<F>> {
    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp)
        .map_err(|_| Error::MissingArtifact(format!("prior sidecar {}", sp.display())))?;
    let sc: PriorSidecar = serde_json::from_str(&text)?;
    sc.config.validate()?;
    let combined: ParamSet<F> = read_checkpoint(path)?;
    let mut psi = ParamSet::new();
    let mut phi = ParamSet::new();
    for (n, t) in combined.iter() {
        if n.starts_with(ENC_PREFIX) {
            psi.insert(n, t.clone());
        } else if n.starts_with(DEC_PREFIX) {
            phi.insert(n, t.clone());
        } else {
            return Err(Error::PayloadMismatch {
                path: path.display().to_string(),
                detail: format!("unexpected tensor {n} in prior checkpoint"),
            });
        }
    }
    Ok(VAEPrior {
        psi,
        phi,
        config: sc.config,
        group_key: sc.group_key,
    })
}
