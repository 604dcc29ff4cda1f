//! Pointwise nonlinearities shared by the U-Net and the prior's MLPs.

use crate::numerics::real::Real;
use crate::numerics::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let slope = F::from_f64(LEAKY_SLOPE);
    x.map(|v| if v > F::zero() { v } else { slope * v })
}

/// Gradient w.r.t. the pre-activation, given the pre-activation values.
pub fn leaky_relu_backward<F: Real>(pre: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let slope = F::from_f64(LEAKY_SLOPE);
    let mut g = grad_out.clone();
    for (gv, &p) in g.data_mut().iter_mut().zip(pre.data().iter()) {
        if p <= F::zero() {
            *gv = *gv * slope;
        }
    }
    g
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        let e = (-x).exp();
        F::one() / (F::one() + e)
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values_and_grad() {
        let x = Tensor::<f64>::from_vec(&[3], vec![2.0, -2.0, 0.0]).unwrap();
        let y = leaky_relu(&x);
        assert_eq!(y.data(), &[2.0, -0.02, 0.0]);
        let g = leaky_relu_backward(&x, &Tensor::full(&[3], 1.0));
        assert_eq!(g.data(), &[1.0, 0.01, 0.01]);
    }

    #[test]
    fn sigmoid_saturates_stably() {
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        assert!(sigmoid(40.0f64) > 1.0 - 1e-12);
        assert!(sigmoid(-40.0f64) < 1e-12);
        assert!(sigmoid(-800.0f64).is_finite());
    }
}
