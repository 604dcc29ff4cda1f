use std::collections::HashSet;

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::numerics::adam::{AdamConfig, OptimizerState};
use crate::numerics::real::Real;
use crate::numerics::rng::Stream;
use crate::segnet::loss::{bce_dice_loss, bce_dice_loss_backward};
use crate::segnet::params::ParamSet;
use crate::segnet::unet::{unet_backward, unet_forward, UNetConfig};

#[derive(Debug, Clone)]
pub struct TrainPlainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_dice: f64,
}

impl Default for TrainPlainConfig {
    fn default() -> Self {
        TrainPlainConfig {
            epochs: 60,
            lr: 1e-3,
            lambda_dice: 1.0,
        }
    }
}

/// Non-Bayesian training: Adam on BCE+Dice over shuffled single-volume
/// minibatches. Parameters named in `freeze` are never given gradients, so
/// they stay bit-identical to their initial values. Returns the trained
/// parameters and the per-epoch mean training loss.
pub fn train_plain<F: Real>(
    train: &[Volume],
    cfg: &UNetConfig,
    p0: &ParamSet<F>,
    freeze: &[String],
    tcfg: &TrainPlainConfig,
    rng: &mut Stream,
) -> Result<(ParamSet<F>, Vec<f64>)> {
    train_plain_with_hook(train, cfg, p0, freeze, tcfg, rng, |_, _| {})
}

/// As [`train_plain`], invoking `epoch_hook(epoch_number, params)` after each
/// epoch (1-based). Used by kernel harvesting to snapshot weights.
pub fn train_plain_with_hook<F: Real>(
    train: &[Volume],
    cfg: &UNetConfig,
    p0: &ParamSet<F>,
    freeze: &[String],
    tcfg: &TrainPlainConfig,
    rng: &mut Stream,
    mut epoch_hook: impl FnMut(usize, &ParamSet<F>),
) -> Result<(ParamSet<F>, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let names: HashSet<&str> = p0.names().collect();
    for f in freeze {
        if !names.contains(f.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "unknown freeze name {f}"
            )));
        }
    }
    let frozen: HashSet<&str> = freeze.iter().map(|s| s.as_str()).collect();

    let mut params = p0.clone();
    let mut opt = OptimizerState::new(AdamConfig::with_lr(tcfg.lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(tcfg.epochs);

    for epoch in 1..=tcfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for &vi in &order {
            let v = &train[vi];
            let input = v.input_tensor::<F>();
            let mask = v.mask_tensor::<F>();
            let (logits, cache) = unet_forward(cfg, &params, &input)?;
            let (loss, _) = bce_dice_loss(&logits, &mask, tcfg.lambda_dice)?;
            epoch_loss += loss.to_f64_();
            let dlogits = bce_dice_loss_backward(&logits, &mask, tcfg.lambda_dice)?;
            let grads = unet_backward(cfg, &params, &cache, &dlogits)?;
            // drop frozen entries so adam never touches them
            let mut trainable = ParamSet::new();
            for (name, g) in grads.iter() {
                if !frozen.contains(name) {
                    trainable.insert(name, g.clone());
                }
            }
            opt.step(&mut params, &trainable)?;
        }
        trace.push(epoch_loss / train.len() as f64);
        epoch_hook(epoch, &params);
    }
    Ok((params, trace))
}
