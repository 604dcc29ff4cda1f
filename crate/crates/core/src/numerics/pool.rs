//! 2x2x2 max pooling and nearest-neighbor x2 upsampling, with backward passes.

use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::tensor::Tensor;

/// Max-pool by 2 along each spatial axis. Returns the pooled tensor and the
/// flat argmax index (into the input channel volume) per output element,
/// consumed by the backward pass. Ties break toward the first element in scan
/// order, which keeps runs deterministic.
pub fn maxpool2<F: Real>(input: &Tensor<F>) -> Result<(Tensor<F>, Vec<u32>)> {
    let s = input.shape();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch {
            axis: 0,
            message: format!("maxpool2 expects [N,C,D,H,W], got {:?}", s),
        });
    }
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    for (axis, &ext) in s[2..].iter().enumerate() {
        if ext % 2 != 0 {
            return Err(Error::ShapeMismatch {
                axis: axis + 2,
                message: format!("spatial extent {} on axis {} not divisible by 2", ext, axis + 2),
            });
        }
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let ivol = d * h * w;
    let ovol = od * oh * ow;
    let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
    let mut argmax = vec![0u32; n * c * ovol];
    for bc in 0..n * c {
        let ich = &input.data()[bc * ivol..][..ivol];
        let och = &mut out.data_mut()[bc * ovol..][..ovol];
        let amax = &mut argmax[bc * ovol..][..ovol];
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((2 * z + dz) * h + (2 * y + dy)) * w + (2 * x + dx);
                                let v = ich[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    och[(z * oh + y) * ow + x] = best;
                    amax[(z * oh + y) * ow + x] = best_idx as u32;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<F: Real>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let (n, c, d, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
        input_shape[4],
    );
    let ivol = d * h * w;
    let ovol = grad_out.len() / (n * c);
    let mut grad_in = Tensor::zeros(input_shape);
    for bc in 0..n * c {
        let gch = &mut grad_in.data_mut()[bc * ivol..][..ivol];
        let dch = &grad_out.data()[bc * ovol..][..ovol];
        let amax = &argmax[bc * ovol..][..ovol];
        for (i, &g) in dch.iter().enumerate() {
            gch[amax[i] as usize] += g;
        }
    }
    grad_in
}

/// Nearest-neighbor upsampling by 2 along each spatial axis.
pub fn upsample2<F: Real>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let s = input.shape();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch {
            axis: 0,
            message: format!("upsample2 expects [N,C,D,H,W], got {:?}", s),
        });
    }
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let ivol = d * h * w;
    let ovol = od * oh * ow;
    let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
    for bc in 0..n * c {
        let ich = &input.data()[bc * ivol..][..ivol];
        let och = &mut out.data_mut()[bc * ovol..][..ovol];
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    och[(z * oh + y) * ow + x] = ich[((z / 2) * h + y / 2) * w + x / 2];
                }
            }
        }
    }
    Ok(out)
}

/// Each input element receives the sum over its 8 replicas.
pub fn upsample2_backward<F: Real>(input_shape: &[usize], grad_out: &Tensor<F>) -> Tensor<F> {
    let (n, c, d, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
        input_shape[4],
    );
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let ivol = d * h * w;
    let ovol = od * oh * ow;
    let mut grad_in = Tensor::zeros(input_shape);
    for bc in 0..n * c {
        let gch = &mut grad_in.data_mut()[bc * ivol..][..ivol];
        let dch = &grad_out.data()[bc * ovol..][..ovol];
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    gch[((z / 2) * h + y / 2) * w + x / 2] += dch[(z * oh + y) * ow + x];
                }
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Stream;

    #[test]
    fn maxpool_picks_maxima_and_backward_routes() {
        let mut rng = Stream::from_seed(5);
        let input = rng.normal_tensor::<f64>(&[1, 2, 4, 4, 4]);
        let (out, argmax) = maxpool2(&input).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 2, 2]);
        // every output equals input at its argmax
        let ivol = 64;
        let ovol = 8;
        for bc in 0..2 {
            for i in 0..ovol {
                let a = argmax[bc * ovol + i] as usize;
                assert_eq!(out.data()[bc * ovol + i], input.data()[bc * ivol + a]);
            }
        }
        let gout = Tensor::<f64>::full(&[1, 2, 2, 2, 2], 1.0);
        let gin = maxpool2_backward(input.shape(), &argmax, &gout);
        let total: f64 = gin.data().iter().sum();
        assert_eq!(total, 16.0);
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let mut rng = Stream::from_seed(6);
        let input = rng.normal_tensor::<f64>(&[2, 1, 2, 2, 2]);
        let up = upsample2(&input).unwrap();
        assert_eq!(up.shape(), &[2, 1, 4, 4, 4]);
        // each source value appears 8 times
        assert_eq!(up.data()[0], input.data()[0]);
        let gout = Tensor::<f64>::full(&[2, 1, 4, 4, 4], 0.5);
        let gin = upsample2_backward(input.shape(), &gout);
        for &g in gin.data() {
            assert_eq!(g, 4.0);
        }
    }

    #[test]
    fn odd_extent_rejected() {
        let input = Tensor::<f64>::zeros(&[1, 1, 3, 4, 4]);
        assert!(maxpool2(&input).is_err());
    }
}
