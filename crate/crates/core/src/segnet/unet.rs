use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::act::{leaky_relu, leaky_relu_backward};
use crate::numerics::conv::{conv3d, conv3d_backward};
use crate::numerics::pool::{maxpool2, maxpool2_backward, upsample2, upsample2_backward};
use crate::numerics::real::Real;
use crate::numerics::rng::Stream;
use crate::numerics::tensor::Tensor;
use crate::segnet::params::ParamSet;

/// 3D U-Net topology. Channels double per encoder level; the decoder mirrors
/// the encoder with skip concatenation; every conv is 3x3x3 with padding 1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_in_channels() -> usize {
    1
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 3,
            base_channels: 8,
            in_channels: 1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::InvalidArgument(format!(
                "levels must be >= 2, got {}",
                self.levels
            )));
        }
        if self.base_channels < 2 {
            return Err(Error::InvalidArgument(format!(
                "base_channels must be >= 2, got {}",
                self.base_channels
            )));
        }
        if self.in_channels < 1 {
            return Err(Error::InvalidArgument("in_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be divisible by this for pooling to round-trip.
    pub fn divisibility(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// All conv layers as (name, in_channels, out_channels), in forward order.
    /// This fixes both ParamSet layout and checkpoint layout.
    pub fn conv_layers(&self) -> Vec<(String, usize, usize)> {
        let l = self.levels;
        let mut layers = Vec::new();
        for i in 0..l - 1 {
            let c = self.channels_at(i);
            let prev = if i == 0 {
                self.in_channels
            } else {
                self.channels_at(i - 1)
            };
            layers.push((format!("enc{i}.conv0"), prev, c));
            layers.push((format!("enc{i}.conv1"), c, c));
        }
        let cb = self.channels_at(l - 1);
        layers.push(("bottom.conv0".into(), self.channels_at(l - 2), cb));
        layers.push(("bottom.conv1".into(), cb, cb));
        for i in (0..l - 1).rev() {
            let c = self.channels_at(i);
            let cup = self.channels_at(i + 1);
            layers.push((format!("dec{i}.up"), cup, c));
            layers.push((format!("dec{i}.conv0"), 2 * c, c));
            layers.push((format!("dec{i}.conv1"), c, c));
        }
        layers.push(("out".into(), self.base_channels, 1));
        layers
    }

    /// Names frozen for the "fine-tune only the first and last block" baseline:
    /// everything except the first encoder block, the last decoder block and
    /// the output conv.
    pub fn middle_freeze_set(&self) -> Vec<String> {
        let mut frozen = Vec::new();
        for (name, _, _) in self.conv_layers() {
            let trainable =
                name.starts_with("enc0.") || name.starts_with("dec0.") || name == "out";
            if !trainable {
                frozen.push(format!("{name}.weight"));
                frozen.push(format!("{name}.bias"));
            }
        }
        frozen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    HeRandom,
    Zero,
}

/// He-normal kernels (std = sqrt(2 / fan_in)), zero biases.
pub fn build_unet<F: Real>(cfg: &UNetConfig, init: Init, rng: &mut Stream) -> Result<ParamSet<F>> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    for (name, cin, cout) in cfg.conv_layers() {
        let shape = [cout, cin, 3, 3, 3];
        let weight = match init {
            Init::Zero => Tensor::zeros(&shape),
            Init::HeRandom => {
                let std = (2.0 / (cin as f64 * 27.0)).sqrt();
                let mut t = rng.normal_tensor::<F>(&shape);
                let s = F::from_f64(std);
                for v in t.data_mut() {
                    *v = *v * s;
                }
                t
            }
        };
        params.insert(format!("{name}.weight"), weight);
        params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }
    Ok(params)
}

/// Check a checkpoint against a config; lists every missing or mis-shaped tensor.
pub fn check_params_match<F: Real>(cfg: &UNetConfig, params: &ParamSet<F>) -> Result<()> {
    let mut problems = Vec::new();
    for (name, cin, cout) in cfg.conv_layers() {
        let wname = format!("{name}.weight");
        match params.get(&wname) {
            None => problems.push(format!("missing {wname}")),
            Some(t) if t.shape() != [cout, cin, 3, 3, 3] => problems.push(format!(
                "{wname}: shape {:?}, expected {:?}",
                t.shape(),
                [cout, cin, 3, 3, 3]
            )),
            _ => {}
        }
        let bname = format!("{name}.bias");
        match params.get(&bname) {
            None => problems.push(format!("missing {bname}")),
            Some(t) if t.shape() != [cout] => problems.push(format!(
                "{bname}: shape {:?}, expected [{cout}]",
                t.shape()
            )),
            _ => {}
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckpointMismatch(problems.join("; ")))
    }
}

struct ConvCache<F: Real> {
    input: Tensor<F>,
    /// Pre-activation output; present only for convs followed by leaky-relu.
    preact: Option<Tensor<F>>,
}

struct BlockCache<F: Real> {
    conv0: ConvCache<F>,
    conv1: ConvCache<F>,
}

struct DecCache<F: Real> {
    up_in_shape: Vec<usize>,
    upconv: ConvCache<F>,
    skip_channels: usize,
    block: BlockCache<F>,
}

/// Activation record from one forward pass, consumed by [`unet_backward`].
pub struct UNetCache<F: Real> {
    enc: Vec<BlockCache<F>>,
    pools: Vec<(Vec<usize>, Vec<u32>)>,
    bottom: BlockCache<F>,
    /// Indexed by decoder level (0 = finest); built coarse-to-fine.
    dec: Vec<DecCache<F>>,
    out_conv: ConvCache<F>,
}

fn conv_bias<F: Real>(
    params: &ParamSet<F>,
    name: &str,
    input: &Tensor<F>,
) -> Result<Tensor<F>> {
    let w = params.require(&format!("{name}.weight"))?;
    let b = params.require(&format!("{name}.bias"))?;
    let mut out = conv3d(input, w, 1)?;
    let s = out.shape().to_vec();
    let (n, c) = (s[0], s[1]);
    let vol = s[2] * s[3] * s[4];
    for bi in 0..n {
        for ci in 0..c {
            let bias = b.data()[ci];
            for v in out.data_mut()[(bi * c + ci) * vol..][..vol].iter_mut() {
                *v += bias;
            }
        }
    }
    Ok(out)
}

fn conv_leaky<F: Real>(
    params: &ParamSet<F>,
    name: &str,
    input: Tensor<F>,
) -> Result<(Tensor<F>, ConvCache<F>)> {
    let preact = conv_bias(params, name, &input)?;
    let out = leaky_relu(&preact);
    Ok((
        out,
        ConvCache {
            input,
            preact: Some(preact),
        },
    ))
}

fn block_forward<F: Real>(
    params: &ParamSet<F>,
    block: &str,
    input: Tensor<F>,
) -> Result<(Tensor<F>, BlockCache<F>)> {
    let (x, c0) = conv_leaky(params, &format!("{block}.conv0"), input)?;
    let (y, c1) = conv_leaky(params, &format!("{block}.conv1"), x)?;
    Ok((y, BlockCache { conv0: c0, conv1: c1 }))
}

fn concat_channels<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (sa, sb) = (a.shape(), b.shape());
    debug_assert_eq!(sa[0], sb[0]);
    debug_assert_eq!(&sa[2..], &sb[2..]);
    let n = sa[0];
    let (ca, cb) = (sa[1], sb[1]);
    let vol: usize = sa[2..].iter().product();
    let mut out = Tensor::zeros(&[n, ca + cb, sa[2], sa[3], sa[4]]);
    for bi in 0..n {
        let dst = &mut out.data_mut()[bi * (ca + cb) * vol..][..(ca + cb) * vol];
        dst[..ca * vol].copy_from_slice(&a.data()[bi * ca * vol..][..ca * vol]);
        dst[ca * vol..].copy_from_slice(&b.data()[bi * cb * vol..][..cb * vol]);
    }
    out
}

fn split_channels<F: Real>(g: &Tensor<F>, ca: usize) -> (Tensor<F>, Tensor<F>) {
    let s = g.shape();
    let n = s[0];
    let c = s[1];
    let cb = c - ca;
    let vol: usize = s[2..].iter().product();
    let mut a = Tensor::zeros(&[n, ca, s[2], s[3], s[4]]);
    let mut b = Tensor::zeros(&[n, cb, s[2], s[3], s[4]]);
    for bi in 0..n {
        let src = &g.data()[bi * c * vol..][..c * vol];
        a.data_mut()[bi * ca * vol..][..ca * vol].copy_from_slice(&src[..ca * vol]);
        b.data_mut()[bi * cb * vol..][..cb * vol].copy_from_slice(&src[ca * vol..]);
    }
    (a, b)
}

/// Forward pass producing logits [N,1,D,H,W] and the cache for backward.
pub fn unet_forward<F: Real>(
    cfg: &UNetConfig,
    params: &ParamSet<F>,
    input: &Tensor<F>,
) -> Result<(Tensor<F>, UNetCache<F>)> {
    let s = input.shape();
    if s.len() != 5 || s[1] != cfg.in_channels {
        return Err(Error::ShapeMismatch {
            axis: 1,
            message: format!(
                "input must be [N,{},D,H,W], got {:?}",
                cfg.in_channels, s
            ),
        });
    }
    let div = cfg.divisibility();
    for (axis, &ext) in s[2..].iter().enumerate() {
        if ext % div != 0 {
            return Err(Error::ShapeMismatch {
                axis: axis + 2,
                message: format!(
                    "spatial extent {} on axis {} must be divisible by {} for {} levels",
                    ext,
                    axis + 2,
                    div,
                    cfg.levels
                ),
            });
        }
    }

    let l = cfg.levels;
    let mut enc_caches = Vec::with_capacity(l - 1);
    let mut pools = Vec::with_capacity(l - 1);
    let mut skips: Vec<Tensor<F>> = Vec::with_capacity(l - 1);

    let mut x = input.clone();
    for i in 0..l - 1 {
        let (y, cache) = block_forward(params, &format!("enc{i}"), x)?;
        skips.push(y.clone());
        enc_caches.push(cache);
        let (pooled, argmax) = maxpool2(&y)?;
        pools.push((y.shape().to_vec(), argmax));
        x = pooled;
    }
    let (mut x, bottom_cache) = block_forward(params, "bottom", x)?;

    let mut dec_caches: Vec<Option<DecCache<F>>> = (0..l - 1).map(|_| None).collect();
    for i in (0..l - 1).rev() {
        let up_in_shape = x.shape().to_vec();
        let up = upsample2(&x)?;
        let (upc, upconv_cache) = conv_leaky(params, &format!("dec{i}.up"), up)?;
        let skip = &skips[i];
        let skip_channels = skip.shape()[1];
        let cat = concat_channels(skip, &upc);
        let (y, block_cache) = block_forward(params, &format!("dec{i}"), cat)?;
        dec_caches[i] = Some(DecCache {
            up_in_shape,
            upconv: upconv_cache,
            skip_channels,
            block: block_cache,
        });
        x = y;
    }

    let logits = conv_bias(params, "out", &x)?;
    let out_conv = ConvCache {
        input: x,
        preact: None,
    };
    Ok((
        logits,
        UNetCache {
            enc: enc_caches,
            pools,
            bottom: bottom_cache,
            dec: dec_caches.into_iter().map(|c| c.expect("filled")).collect(),
            out_conv,
        },
    ))
}

fn conv_backward_step<F: Real>(
    params: &ParamSet<F>,
    grads: &mut ParamSet<F>,
    name: &str,
    cache: &ConvCache<F>,
    grad_out: &Tensor<F>,
) -> Result<Tensor<F>> {
    // activation first (reverse order)
    let g = match &cache.preact {
        Some(pre) => leaky_relu_backward(pre, grad_out),
        None => grad_out.clone(),
    };
    // bias gradient: sum over batch and spatial dims
    let s = g.shape();
    let (n, c) = (s[0], s[1]);
    let vol = s[2] * s[3] * s[4];
    let bname = format!("{name}.bias");
    {
        let gb = grads.get_mut(&bname).expect("grads congruent to params");
        for bi in 0..n {
            for ci in 0..c {
                let sum: F = g.data()[(bi * c + ci) * vol..][..vol].iter().copied().sum();
                gb.data_mut()[ci] += sum;
            }
        }
    }
    let w = params.require(&format!("{name}.weight"))?;
    let (gin, gw) = conv3d_backward(&cache.input, w, 1, &g)?;
    grads
        .get_mut(&format!("{name}.weight"))
        .expect("grads congruent to params")
        .add_scaled(&gw, F::one());
    Ok(gin)
}

fn block_backward<F: Real>(
    params: &ParamSet<F>,
    grads: &mut ParamSet<F>,
    block: &str,
    cache: &BlockCache<F>,
    grad_out: &Tensor<F>,
) -> Result<Tensor<F>> {
    let g1 = conv_backward_step(params, grads, &format!("{block}.conv1"), &cache.conv1, grad_out)?;
    conv_backward_step(params, grads, &format!("{block}.conv0"), &cache.conv0, &g1)
}

/// Gradients of a scalar loss w.r.t. every parameter, given d(loss)/d(logits).
pub fn unet_backward<F: Real>(
    cfg: &UNetConfig,
    params: &ParamSet<F>,
    cache: &UNetCache<F>,
    grad_logits: &Tensor<F>,
) -> Result<ParamSet<F>> {
    let mut grads = params.zeros_like();
    let l = cfg.levels;

    let mut g = conv_backward_step(params, &mut grads, "out", &cache.out_conv, grad_logits)?;

    // skip-connection gradients surface while unwinding the decoder
    let mut skip_grads: Vec<Option<Tensor<F>>> = (0..l - 1).map(|_| None).collect();
    for i in 0..l - 1 {
        let dc = &cache.dec[i];
        let gcat = block_backward(params, &mut grads, &format!("dec{i}"), &dc.block, &g)?;
        let (gskip, gup) = split_channels(&gcat, dc.skip_channels);
        skip_grads[i] = Some(gskip);
        let gupconv =
            conv_backward_step(params, &mut grads, &format!("dec{i}.up"), &dc.upconv, &gup)?;
        g = upsample2_backward(&dc.up_in_shape, &gupconv);
    }

    g = block_backward(params, &mut grads, "bottom", &cache.bottom, &g)?;

    for i in (0..l - 1).rev() {
        let (in_shape, argmax) = &cache.pools[i];
        let mut gy = maxpool2_backward(in_shape, argmax, &g);
        gy.add_scaled(skip_grads[i].as_ref().expect("filled"), F::one());
        g = block_backward(params, &mut grads, &format!("enc{i}"), &cache.enc[i], &gy)?;
    }

    Ok(grads)
}

/// Exact total scalar count for a config, from the layer list.
pub fn param_count_for(cfg: &UNetConfig) -> usize {
    cfg.conv_layers()
        .iter()
        .map(|(_, cin, cout)| cout * cin * 27 + cout)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> UNetConfig {
        UNetConfig {
            levels: 2,
            base_channels: 4,
            in_channels: 1,
        }
    }

    #[test]
    fn param_count_matches_hand_derivation() {
        // levels 2, base 4, in 1:
        // enc0.conv0 1->4: 4*1*27+4 = 112
        // enc0.conv1 4->4: 4*4*27+4 = 436
        // bottom.conv0 4->8: 8*4*27+8 = 872
        // bottom.conv1 8->8: 8*8*27+8 = 1736
        // dec0.up 8->4: 4*8*27+4 = 868
        // dec0.conv0 8->4: 4*8*27+4 = 868
        // dec0.conv1 4->4: 436
        // out 4->1: 1*4*27+1 = 109
        let cfg = tiny_cfg();
        let expected = 112 + 436 + 872 + 1736 + 868 + 868 + 436 + 109;
        assert_eq!(param_count_for(&cfg), expected);
        let p: ParamSet<f32> = build_unet(&cfg, Init::HeRandom, &mut Stream::from_seed(1)).unwrap();
        assert_eq!(p.param_count(), expected);
    }

    #[test]
    fn desk_config_count_matches_layer_sum() {
        let cfg = UNetConfig::default();
        let sum: usize = cfg
            .conv_layers()
            .iter()
            .map(|(_, cin, cout)| cout * cin * 27 + cout)
            .sum();
        let p: ParamSet<f32> = build_unet(&cfg, Init::HeRandom, &mut Stream::from_seed(1)).unwrap();
        assert_eq!(p.param_count(), sum);
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let cfg = tiny_cfg();
        let a: ParamSet<f32> = build_unet(&cfg, Init::HeRandom, &mut Stream::from_seed(3)).unwrap();
        let b: ParamSet<f32> = build_unet(&cfg, Init::HeRandom, &mut Stream::from_seed(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let cfg = tiny_cfg();
        let p: ParamSet<f64> = build_unet(&cfg, Init::Zero, &mut Stream::from_seed(0)).unwrap();
        let input = Stream::from_seed(2).normal_tensor::<f64>(&[1, 1, 8, 8, 8]);
        let (logits, _) = unet_forward(&cfg, &p, &input).unwrap();
        assert_eq!(logits.shape(), &[1, 1, 8, 8, 8]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_is_preserved() {
        let cfg = UNetConfig::default();
        let p: ParamSet<f32> = build_unet(&cfg, Init::HeRandom, &mut Stream::from_seed(1)).unwrap();
        let input = Stream::from_seed(2).normal_tensor::<f32>(&[1, 1, 16, 16, 16]);
        let (logits, _) = unet_forward(&cfg, &p, &input).unwrap();
        assert_eq!(logits.shape(), &[1, 1, 16, 16, 16]);
        logits.check_finite("logits").unwrap();
    }

    #[test]
    fn indivisible_dims_rejected_with_required_divisor() {
        let cfg = UNetConfig::default();
        let p: ParamSet<f32> = build_unet(&cfg, Init::HeRandom, &mut Stream::from_seed(1)).unwrap();
        let input = Tensor::<f32>::zeros(&[1, 1, 12, 12, 10]);
        let err = match unet_forward(&cfg, &p, &input) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected divisibility error"),
        };
        assert!(err.contains("divisible by 4"), "{err}");
    }

    #[test]
    fn first_layer_weight_perturbation_changes_logits() {
        let cfg = tiny_cfg();
        let p: ParamSet<f64> = build_unet(&cfg, Init::HeRandom, &mut Stream::from_seed(5)).unwrap();
        let input = Stream::from_seed(6).normal_tensor::<f64>(&[1, 1, 8, 8, 8]);
        let (base, _) = unet_forward(&cfg, &p, &input).unwrap();
        let mut q = p.clone();
        q.get_mut("enc0.conv0.weight").unwrap().data_mut()[13] += 0.5;
        let (perturbed, _) = unet_forward(&cfg, &q, &input).unwrap();
        let diff: f64 = base
            .data()
            .iter()
            .zip(perturbed.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn checkpoint_mismatch_lists_tensors() {
        let cfg = tiny_cfg();
        let mut p: ParamSet<f32> =
            build_unet(&cfg, Init::HeRandom, &mut Stream::from_seed(1)).unwrap();
        let err = check_params_match(&UNetConfig::default(), &p)
            .unwrap_err()
            .to_string();
        assert!(err.contains("missing"), "{err}");
        // also a shape mismatch
        *p.get_mut("enc0.conv1.weight").unwrap() = Tensor::zeros(&[4, 3, 3, 3, 3]);
        let err = check_params_match(&cfg, &p).unwrap_err().to_string();
        assert!(err.contains("enc0.conv1.weight"), "{err}");
    }

    #[test]
    fn prf_freeze_set_is_complement_of_first_and_last_blocks() {
        let cfg = UNetConfig::default();
        let frozen = cfg.middle_freeze_set();
        for name in &frozen {
            assert!(
                !name.starts_with("enc0.") && !name.starts_with("dec0.") && !name.starts_with("out."),
                "{name} should not be frozen"
            );
        }
        // every parameter is either frozen or in the trainable blocks
        let p: ParamSet<f32> = build_unet(&cfg, Init::HeRandom, &mut Stream::from_seed(1)).unwrap();
        for name in p.names() {
            let trainable =
                name.starts_with("enc0.") || name.starts_with("dec0.") || name.starts_with("out.");
            assert_eq!(
                !trainable,
                frozen.iter().any(|f| f == name),
                "{name} freeze status inconsistent"
            );
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_tiny_net() {
        use crate::numerics::gradcheck::finite_diff_check;
        let cfg = tiny_cfg();
        let params: ParamSet<f64> =
            build_unet(&cfg, Init::HeRandom, &mut Stream::from_seed(8)).unwrap();
        let input = Stream::from_seed(9).normal_tensor::<f64>(&[1, 1, 4, 4, 4]);
        let target = Stream::from_seed(10).normal_tensor::<f64>(&[1, 1, 4, 4, 4]);
        // loss = sum(logits * target)
        let loss_fn = |p: &ParamSet<f64>| -> crate::error::Result<f64> {
            let (logits, _) = unet_forward(&cfg, p, &input)?;
            Ok(logits
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| a * b)
                .sum())
        };
        let (_, cache) = unet_forward(&cfg, &params, &input).unwrap();
        let analytic = unet_backward(&cfg, &params, &cache, &target).unwrap();
        let report = finite_diff_check(
            loss_fn,
            &params,
            &analytic,
            1e-4,
            150,
            &mut Stream::from_seed(11),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-3, "{:?}", report.worst);
    }

    use crate::numerics::rng::Stream;
}
