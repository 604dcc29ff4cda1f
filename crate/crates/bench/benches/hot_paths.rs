use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, Criterion};

use dwpseg_core::dwp::{init_prior, VAEConfig};
use dwpseg_core::numerics::conv::{conv3d, conv3d_backward};
use dwpseg_core::numerics::rng::Stream;
use dwpseg_core::segnet::unet::{build_unet, unet_forward, Init, UNetConfig};
use dwpseg_core::vi::{init_posterior, prior_bound_term, sample_weights, PriorMode};
use dwpseg_core::Tensor;

fn bench_conv3d(c: &mut Criterion) {
    let mut rng = Stream::from_seed(1);
    let input: Tensor<f32> = rng.normal_tensor(&[1, 8, 16, 16, 16]);
    let kernels: Tensor<f32> = rng.normal_tensor(&[8, 8, 3, 3, 3]);
    c.bench_function("conv3d_8x8_16c", |b| {
        b.iter(|| conv3d(&input, &kernels, 1).unwrap())
    });
    let out = conv3d(&input, &kernels, 1).unwrap();
    c.bench_function("conv3d_backward_8x8_16c", |b| {
        b.iter(|| conv3d_backward(&input, &kernels, 1, &out).unwrap())
    });
}

fn bench_unet_forward(c: &mut Criterion) {
    let cfg = UNetConfig {
        levels: 2,
        base_channels: 4,
        in_channels: 1,
    };
    let params = build_unet::<f32>(&cfg, Init::HeRandom, &mut Stream::from_seed(1)).unwrap();
    let input: Tensor<f32> = Stream::from_seed(2).normal_tensor(&[1, 1, 16, 16, 16]);
    c.bench_function("unet_forward_16c", |b| {
        b.iter(|| unet_forward(&cfg, &params, &input).unwrap())
    });
}

fn bench_prior_bound(c: &mut Criterion) {
    let ucfg = UNetConfig {
        levels: 2,
        base_channels: 4,
        in_channels: 1,
    };
    let vcfg = VAEConfig {
        latent_dim: 2,
        encoder_hidden: vec![16],
        decoder_hidden: vec![16],
        ..Default::default()
    };
    let mut rng = Stream::from_seed(1);
    let q = init_posterior::<f32>(&ucfg, &mut rng).unwrap();
    let prior = init_prior::<f32>(&vcfg, "shared", &mut rng).unwrap();
    let mut priors = BTreeMap::new();
    priors.insert("shared".to_string(), prior);
    let (w_hat, _) = sample_weights(&q, &mut rng).unwrap();
    c.bench_function("prior_bound_term", |b| {
        b.iter(|| {
            let mut r = Stream::from_seed(3);
            prior_bound_term(&q, &w_hat, &priors, PriorMode::Dwp, &mut r).unwrap()
        })
    });
}

criterion_group!(benches, bench_conv3d, bench_unet_forward, bench_prior_bound);
criterion_main!(benches);
