//! Small fully-connected nets with two Gaussian heads (mu, clamped
//! log-sigma), operating on batches of flattened vectors. Hand-written
//! backward passes expose gradients w.r.t. both parameters and inputs; the
//! input gradient path is what lets the inference stage differentiate through
//! a frozen decoder.

use crate::error::{Error, Result};
use crate::numerics::act::{leaky_relu, leaky_relu_backward};
use crate::numerics::real::Real;
use crate::numerics::rng::Stream;
use crate::numerics::tensor::Tensor;
use crate::segnet::params::ParamSet;

/// Clamp bounds for log-sigma heads: sigma in [1e-4, 1e2].
pub const LOG_SIGMA_MIN: f64 = -9.210340371976182; // ln(1e-4)
pub const LOG_SIGMA_MAX: f64 = 4.605170185988092; // ln(1e2)

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceHead {
    /// A log-sigma output per element.
    PerElement,
    /// One shared learned log-sigma scalar, broadcast over outputs.
    GlobalScalar,
}

impl MlpSpec {
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &hd in &self.hidden {
            dims.push((prev, hd));
            prev = hd;
        }
        dims
    }

    fn last_hidden(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.input_dim)
    }
}

/// He-normal hidden layers; near-zero heads with log-sigma biased to -2 so
/// initial densities are well-conditioned.
pub fn init_mlp<F: Real>(
    spec: &MlpSpec,
    prefix: &str,
    variance: VarianceHead,
    params: &mut ParamSet<F>,
    rng: &mut Stream,
) {
    for (i, (din, dout)) in spec.layer_dims().into_iter().enumerate() {
        let std = (2.0 / din as f64).sqrt();
        let mut w = rng.normal_tensor::<F>(&[dout, din]);
        let s = F::from_f64(std);
        for v in w.data_mut() {
            *v = *v * s;
        }
        params.insert(format!("{prefix}h{i}.weight"), w);
        params.insert(format!("{prefix}h{i}.bias"), Tensor::zeros(&[dout]));
    }
    let lh = spec.last_hidden();
    let mut head = |name: &str, dout: usize, bias_val: f64| {
        let mut w = rng.normal_tensor::<F>(&[dout, lh]);
        let s = F::from_f64(0.01);
        for v in w.data_mut() {
            *v = *v * s;
        }
        params.insert(format!("{prefix}{name}.weight"), w);
        params.insert(
            format!("{prefix}{name}.bias"),
            Tensor::full(&[dout], F::from_f64(bias_val)),
        );
    };
    head("mu", spec.output_dim, 0.0);
    match variance {
        VarianceHead::PerElement => head("ls", spec.output_dim, -2.0),
        VarianceHead::GlobalScalar => {
            params.insert(
                format!("{prefix}ls.scalar"),
                Tensor::full(&[1], F::from_f64(-2.0)),
            );
        }
    }
}

fn linear_forward<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let batch = x.shape()[0];
    let din = x.shape()[1];
    let dout = w.shape()[0];
    debug_assert_eq!(w.shape()[1], din);
    let mut y = Tensor::zeros(&[batch, dout]);
    for bi in 0..batch {
        let xrow = &x.data()[bi * din..][..din];
        let yrow = &mut y.data_mut()[bi * dout..][..dout];
        for o in 0..dout {
            let wrow = &w.data()[o * din..][..din];
            let mut acc = b.data()[o];
            for i in 0..din {
                acc += wrow[i] * xrow[i];
            }
            yrow[o] = acc;
        }
    }
    y
}

/// Returns grad w.r.t. x; accumulates parameter gradients when `grads` is Some.
fn linear_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    wname: &str,
    bname: &str,
    grads: Option<&mut ParamSet<F>>,
) -> Tensor<F> {
    let batch = x.shape()[0];
    let din = x.shape()[1];
    let dout = w.shape()[0];
    let mut dx = Tensor::zeros(&[batch, din]);
    for bi in 0..batch {
        let dyrow = &dy.data()[bi * dout..][..dout];
        let dxrow = &mut dx.data_mut()[bi * din..][..din];
        for o in 0..dout {
            let g = dyrow[o];
            if g == F::zero() {
                continue;
            }
            let wrow = &w.data()[o * din..][..din];
            for i in 0..din {
                dxrow[i] += g * wrow[i];
            }
        }
    }
    if let Some(grads) = grads {
        let gw = grads.get_mut(wname).expect("grads congruent");
        for bi in 0..batch {
            let xrow = &x.data()[bi * din..][..din];
            let dyrow = &dy.data()[bi * dout..][..dout];
            for o in 0..dout {
                let g = dyrow[o];
                if g == F::zero() {
                    continue;
                }
                let grow = &mut gw.data_mut()[o * din..][..din];
                for i in 0..din {
                    grow[i] += g * xrow[i];
                }
            }
        }
        let gb = grads.get_mut(bname).expect("grads congruent");
        for bi in 0..batch {
            let dyrow = &dy.data()[bi * dout..][..dout];
            for o in 0..dout {
                gb.data_mut()[o] += dyrow[o];
            }
        }
    }
    dx
}

pub struct MlpCache<F: Real> {
    /// Input to each hidden layer (layer_inputs[0] is the net input).
    layer_inputs: Vec<Tensor<F>>,
    /// Pre-activation of each hidden layer.
    preacts: Vec<Tensor<F>>,
    /// Input to the heads (last hidden activation, or the net input).
    head_input: Tensor<F>,
    /// Raw (pre-clamp) log-sigma head output.
    ls_raw: Tensor<F>,
}

/// Forward pass: (mu, clamped log-sigma, cache).
pub fn mlp_forward<F: Real>(
    params: &ParamSet<F>,
    prefix: &str,
    spec: &MlpSpec,
    variance: VarianceHead,
    x: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, MlpCache<F>)> {
    if x.shape().len() != 2 || x.shape()[1] != spec.input_dim {
        return Err(Error::ShapeMismatch {
            axis: 1,
            message: format!(
                "expected [B,{}] input, got {:?}",
                spec.input_dim,
                x.shape()
            ),
        });
    }
    let batch = x.shape()[0];
    let mut layer_inputs = Vec::new();
    let mut preacts = Vec::new();
    let mut h = x.clone();
    for i in 0..spec.hidden.len() {
        let w = params.require(&format!("{prefix}h{i}.weight"))?;
        let b = params.require(&format!("{prefix}h{i}.bias"))?;
        let pre = linear_forward(&h, w, b);
        let act = leaky_relu(&pre);
        layer_inputs.push(h);
        preacts.push(pre);
        h = act;
    }
    let head_input = h;
    let mu = linear_forward(
        &head_input,
        params.require(&format!("{prefix}mu.weight"))?,
        params.require(&format!("{prefix}mu.bias"))?,
    );
    let (ls_raw, ls) = match variance {
        VarianceHead::PerElement => {
            let raw = linear_forward(
                &head_input,
                params.require(&format!("{prefix}ls.weight"))?,
                params.require(&format!("{prefix}ls.bias"))?,
            );
            let clamped = clamp_ls(&raw);
            (raw, clamped)
        }
        VarianceHead::GlobalScalar => {
            let scalar = params.require(&format!("{prefix}ls.scalar"))?.data()[0];
            let raw = Tensor::full(&[batch, spec.output_dim], scalar);
            let clamped = clamp_ls(&raw);
            (raw, clamped)
        }
    };
    Ok((
        mu,
        ls,
        MlpCache {
            layer_inputs,
            preacts,
            head_input,
            ls_raw,
        },
    ))
}

fn clamp_ls<F: Real>(raw: &Tensor<F>) -> Tensor<F> {
    let lo = F::from_f64(LOG_SIGMA_MIN);
    let hi = F::from_f64(LOG_SIGMA_MAX);
    raw.map(|v| v.max(lo).min(hi))
}

/// Backward pass: given d(loss)/d(mu) and d(loss)/d(log_sigma), returns
/// d(loss)/d(x). Parameter gradients are accumulated into `grads` when
/// provided; pass None to treat the net as frozen (gradient still flows to x).
pub fn mlp_backward<F: Real>(
    params: &ParamSet<F>,
    prefix: &str,
    spec: &MlpSpec,
    variance: VarianceHead,
    cache: &MlpCache<F>,
    dmu: &Tensor<F>,
    dls: &Tensor<F>,
    mut grads: Option<&mut ParamSet<F>>,
) -> Result<Tensor<F>> {
    // clamp gradient: zero outside the active range
    let lo = F::from_f64(LOG_SIGMA_MIN);
    let hi = F::from_f64(LOG_SIGMA_MAX);
    let mut dls_raw = dls.clone();
    for (g, &r) in dls_raw.data_mut().iter_mut().zip(cache.ls_raw.data()) {
        if r <= lo || r >= hi {
            *g = F::zero();
        }
    }

    let mut dhead = linear_backward(
        &cache.head_input,
        params.require(&format!("{prefix}mu.weight"))?,
        dmu,
        &format!("{prefix}mu.weight"),
        &format!("{prefix}mu.bias"),
        grads.as_deref_mut(),
    );
    match variance {
        VarianceHead::PerElement => {
            let d2 = linear_backward(
                &cache.head_input,
                params.require(&format!("{prefix}ls.weight"))?,
                &dls_raw,
                &format!("{prefix}ls.weight"),
                &format!("{prefix}ls.bias"),
                grads.as_deref_mut(),
            );
            dhead.add_scaled(&d2, F::one());
        }
        VarianceHead::GlobalScalar => {
            if let Some(grads) = grads.as_deref_mut() {
                let gs = grads
                    .get_mut(&format!("{prefix}ls.scalar"))
                    .expect("grads congruent");
                let total: F = dls_raw.data().iter().copied().sum();
                gs.data_mut()[0] += total;
            }
        }
    }

    let mut g = dhead;
    for i in (0..spec.hidden.len()).rev() {
        let dpre = leaky_relu_backward(&cache.preacts[i], &g);
        g = linear_backward(
            &cache.layer_inputs[i],
            params.require(&format!("{prefix}h{i}.weight"))?,
            &dpre,
            &format!("{prefix}h{i}.weight"),
            &format!("{prefix}h{i}.bias"),
            grads.as_deref_mut(),
        );
    }
    Ok(g)
}
