//! 3x3x3 convolution (stride 1) with analytic gradients for both input and
//! kernels. The kernel extent is fixed at 3 because every conv in this
//! project uses 3x3x3 filters.
//!
//! Forward and input-gradient share one gather loop: the input gradient of a
//! correlation is a correlation of the zero-padded output gradient with the
//! spatially flipped kernel.

use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::tensor::Tensor;

pub const K: usize = 3;

/// dst[z,y,x] += sum_{kd,kh,kw} w[kd,kh,kw] * src[z+kd, y+kh, x+kw]
/// src dims must each exceed dst dims by exactly 2.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gather_accum<F: Real>(
    src: &[F],
    (sd, sh, sw): (usize, usize, usize),
    dst: &mut [F],
    (dd, dh, dw): (usize, usize, usize),
    w: &[F],
) {
    debug_assert_eq!(sd, dd + 2);
    debug_assert_eq!(sh, dh + 2);
    debug_assert_eq!(sw, dw + 2);
    debug_assert_eq!(w.len(), 27);
    // row-centric: each dst row is written once with all 27 taps applied in
    // (kd, kh, kw) order, so per-element accumulation order matches the
    // per-tap formulation exactly while touching dst 9x less often
    for z in 0..dd {
        for y in 0..dh {
            let drow = &mut dst[(z * dh + y) * dw..][..dw];
            for kd in 0..K {
                for kh in 0..K {
                    let w0 = w[kd * 9 + kh * 3];
                    let w1 = w[kd * 9 + kh * 3 + 1];
                    let w2 = w[kd * 9 + kh * 3 + 2];
                    let srow = &src[((z + kd) * sh + (y + kh)) * sw..][..dw + 2];
                    let (s0, s1, s2) = (&srow[..dw], &srow[1..dw + 1], &srow[2..dw + 2]);
                    for x in 0..dw {
                        drow[x] = drow[x] + w0 * s0[x] + w1 * s1[x] + w2 * s2[x];
                    }
                }
            }
        }
    }
}

/// Accumulate the 27 kernel-tap gradients for one (co, ci) pair.
#[inline]
fn tap_dots<F: Real>(
    src: &[F],
    (sd, sh, sw): (usize, usize, usize),
    dout: &[F],
    (dd, dh, dw): (usize, usize, usize),
    dw_out: &mut [F],
) {
    debug_assert_eq!(sd, dd + 2);
    debug_assert_eq!(sh, dh + 2);
    debug_assert_eq!(sw, dw + 2);
    const LANES: usize = 8;
    // lane-wise partial sums so the reduction vectorizes; the final fold has
    // a fixed order, keeping runs bitwise reproducible. All 27 accumulator
    // sets advance together in one pass over dout (each dout row is read
    // once per (kd, kh) from L1 instead of the whole volume 9 times).
    let mut acc = [[F::zero(); LANES]; 27];
    for z in 0..dd {
        for y in 0..dh {
            let drow = &dout[(z * dh + y) * dw..][..dw];
            for kd in 0..K {
                for kh in 0..K {
                    let srow = &src[((z + kd) * sh + (y + kh)) * sw..][..dw + 2];
                    let (head, rest) = acc[kd * 9 + kh * 3..].split_at_mut(1);
                    let (mid, tail) = rest.split_at_mut(1);
                    let (a0, a1, a2) = (&mut head[0], &mut mid[0], &mut tail[0]);
                    let chunks = dw / LANES;
                    for c in 0..chunks {
                        let base = c * LANES;
                        let dv = &drow[base..base + LANES];
                        let s0 = &srow[base..base + LANES];
                        let s1 = &srow[base + 1..base + 1 + LANES];
                        let s2 = &srow[base + 2..base + 2 + LANES];
                        // one loop per accumulator so each vectorizes cleanly
                        for l in 0..LANES {
                            a0[l] += dv[l] * s0[l];
                        }
                        for l in 0..LANES {
                            a1[l] += dv[l] * s1[l];
                        }
                        for l in 0..LANES {
                            a2[l] += dv[l] * s2[l];
                        }
                    }
                    for x in chunks * LANES..dw {
                        let dv = drow[x];
                        a0[0] += dv * srow[x];
                        a1[0] += dv * srow[x + 1];
                        a2[0] += dv * srow[x + 2];
                    }
                }
            }
        }
    }
    for (t, a) in acc.iter().enumerate() {
        let mut s = F::zero();
        for &v in a.iter() {
            s += v;
        }
        dw_out[t] += s;
    }
}

fn pad_volume<F: Real>(
    src: &[F],
    (d, h, w): (usize, usize, usize),
    pad: usize,
    dst: &mut [F],
) {
    let (pd, ph, pw) = (d + 2 * pad, h + 2 * pad, w + 2 * pad);
    debug_assert_eq!(dst.len(), pd * ph * pw);
    for v in dst.iter_mut() {
        *v = F::zero();
    }
    for z in 0..d {
        for y in 0..h {
            let srow = &src[(z * h + y) * w..][..w];
            let drow = &mut dst[((z + pad) * ph + (y + pad)) * pw + pad..][..w];
            drow.copy_from_slice(srow);
        }
    }
}

fn check_shapes<F: Real>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    padding: usize,
) -> Result<(usize, usize, usize, (usize, usize, usize))> {
    let ishape = input.shape();
    if ishape.len() != 5 {
        return Err(Error::ShapeMismatch {
            axis: 0,
            message: format!("input must be [N,Cin,D,H,W], got {:?}", ishape),
        });
    }
    let kshape = kernels.shape();
    if kshape.len() != 5 || kshape[2] != K || kshape[3] != K || kshape[4] != K {
        return Err(Error::ShapeMismatch {
            axis: 2,
            message: format!("kernels must be [Cout,Cin,3,3,3], got {:?}", kshape),
        });
    }
    if kshape[1] != ishape[1] {
        return Err(Error::ShapeMismatch {
            axis: 1,
            message: format!(
                "kernel Cin {} does not match input Cin {}",
                kshape[1], ishape[1]
            ),
        });
    }
    for (axis, &ext) in ishape[2..].iter().enumerate() {
        if ext + 2 * padding < K {
            return Err(Error::ShapeMismatch {
                axis: axis + 2,
                message: format!(
                    "spatial extent {} on axis {} too small for 3x3x3 kernel with padding {}",
                    ext,
                    axis + 2,
                    padding
                ),
            });
        }
    }
    let n = ishape[0];
    let cin = ishape[1];
    let cout = kshape[0];
    let dims = (ishape[2], ishape[3], ishape[4]);
    Ok((n, cin, cout, dims))
}

/// out[n,co] = sum_ci correlate(pad(input[n,ci]), kernels[co,ci])
/// Output spatial extents are D + 2*padding - 2 (same for H, W).
pub fn conv3d<F: Real>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    padding: usize,
) -> Result<Tensor<F>> {
    let (n, cin, cout, (d, h, w)) = check_shapes(input, kernels, padding)?;
    let (od, oh, ow) = (d + 2 * padding - 2, h + 2 * padding - 2, w + 2 * padding - 2);
    let (pd, ph, pw) = (d + 2 * padding, h + 2 * padding, w + 2 * padding);
    let ivol = d * h * w;
    let pvol = pd * ph * pw;
    let ovol = od * oh * ow;

    let mut out = Tensor::zeros(&[n, cout, od, oh, ow]);
    let mut padbuf = vec![F::zero(); cin * pvol];
    let kdata = kernels.data();

    for b in 0..n {
        for ci in 0..cin {
            pad_volume(
                &input.data()[(b * cin + ci) * ivol..][..ivol],
                (d, h, w),
                padding,
                &mut padbuf[ci * pvol..][..pvol],
            );
        }
        for co in 0..cout {
            let och = &mut out.data_mut()[(b * cout + co) * ovol..][..ovol];
            for ci in 0..cin {
                gather_accum(
                    &padbuf[ci * pvol..][..pvol],
                    (pd, ph, pw),
                    och,
                    (od, oh, ow),
                    &kdata[(co * cin + ci) * 27..][..27],
                );
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss w.r.t. both conv3d arguments, given the
/// upstream gradient of the output.
pub fn conv3d_backward<F: Real>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    padding: usize,
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (n, cin, cout, (d, h, w)) = check_shapes(input, kernels, padding)?;
    let (od, oh, ow) = (d + 2 * padding - 2, h + 2 * padding - 2, w + 2 * padding - 2);
    if grad_out.shape() != [n, cout, od, oh, ow] {
        return Err(Error::ShapeMismatch {
            axis: 0,
            message: format!(
                "grad_out shape {:?}, expected {:?}",
                grad_out.shape(),
                [n, cout, od, oh, ow]
            ),
        });
    }
    let (pd, ph, pw) = (d + 2 * padding, h + 2 * padding, w + 2 * padding);
    let ivol = d * h * w;
    let pvol = pd * ph * pw;
    let ovol = od * oh * ow;
    // dout padded by 2 so the input gradient is itself a gather pass
    let (qd, qh, qw) = (od + 4, oh + 4, ow + 4);
    let qvol = qd * qh * qw;

    let mut grad_input = Tensor::zeros(&[n, cin, d, h, w]);
    let mut grad_kernels = Tensor::zeros(&[cout, cin, K, K, K]);
    let kdata = kernels.data();

    let mut padbuf = vec![F::zero(); cin * pvol];
    let mut doutp = vec![F::zero(); cout * qvol];
    let mut dpad = vec![F::zero(); pvol];
    let mut wflip = [F::zero(); 27];

    for b in 0..n {
        for ci in 0..cin {
            pad_volume(
                &input.data()[(b * cin + ci) * ivol..][..ivol],
                (d, h, w),
                padding,
                &mut padbuf[ci * pvol..][..pvol],
            );
        }
        for co in 0..cout {
            pad_volume(
                &grad_out.data()[(b * cout + co) * ovol..][..ovol],
                (od, oh, ow),
                2,
                &mut doutp[co * qvol..][..qvol],
            );
        }
        for ci in 0..cin {
            for v in dpad.iter_mut() {
                *v = F::zero();
            }
            for co in 0..cout {
                let dout_ch = &grad_out.data()[(b * cout + co) * ovol..][..ovol];
                let kslice = &kdata[(co * cin + ci) * 27..][..27];
                for (i, wv) in wflip.iter_mut().enumerate() {
                    *wv = kslice[26 - i];
                }
                gather_accum(
                    &doutp[co * qvol..][..qvol],
                    (qd, qh, qw),
                    &mut dpad,
                    (pd, ph, pw),
                    &wflip,
                );
                // kernel gradient for this (co, ci)
                tap_dots(
                    &padbuf[ci * pvol..][..pvol],
                    (pd, ph, pw),
                    dout_ch,
                    (od, oh, ow),
                    &mut grad_kernels.data_mut()[(co * cin + ci) * 27..][..27],
                );
            }
            // crop padding back off
            let gi = &mut grad_input.data_mut()[(b * cin + ci) * ivol..][..ivol];
            for z in 0..d {
                for y in 0..h {
                    let srow = &dpad[((z + padding) * ph + (y + padding)) * pw + padding..][..w];
                    let drow = &mut gi[(z * h + y) * w..][..w];
                    for x in 0..w {
                        drow[x] += srow[x];
                    }
                }
            }
        }
    }
    Ok((grad_input, grad_kernels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Stream;

    /// Direct 6-nested-loop reference, independent of the fast path.
    pub fn conv3d_naive<F: Real>(input: &Tensor<F>, kernels: &Tensor<F>, padding: usize) -> Tensor<F> {
        let is = input.shape();
        let (n, cin, d, h, w) = (is[0], is[1], is[2], is[3], is[4]);
        let cout = kernels.shape()[0];
        let (od, oh, ow) = (d + 2 * padding - 2, h + 2 * padding - 2, w + 2 * padding - 2);
        let mut out = Tensor::zeros(&[n, cout, od, oh, ow]);
        for b in 0..n {
            for co in 0..cout {
                for z in 0..od {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = F::zero();
                            for ci in 0..cin {
                                for kd in 0..3 {
                                    for kh in 0..3 {
                                        for kw in 0..3 {
                                            let iz = (z + kd) as isize - padding as isize;
                                            let iy = (y + kh) as isize - padding as isize;
                                            let ix = (x + kw) as isize - padding as isize;
                                            if iz >= 0
                                                && iy >= 0
                                                && ix >= 0
                                                && (iz as usize) < d
                                                && (iy as usize) < h
                                                && (ix as usize) < w
                                            {
                                                let iv = input.data()[(((b * cin + ci) * d
                                                    + iz as usize)
                                                    * h
                                                    + iy as usize)
                                                    * w
                                                    + ix as usize];
                                                let kv = kernels.data()
                                                    [(((co * cin + ci) * 3 + kd) * 3 + kh) * 3 + kw];
                                                acc += iv * kv;
                                            }
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((b * cout + co) * od + z) * oh + y) * ow + x] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let input = Tensor::<f64>::zeros(&[1, 2, 4, 4, 4]);
        let mut rng = Stream::from_seed(1);
        let kernels = rng.normal_tensor::<f64>(&[3, 2, 3, 3, 3]);
        let out = conv3d(&input, &kernels, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_sums_to_27() {
        let input = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0);
        let kernels = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0);
        let out = conv3d(&input, &kernels, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1, 1]);
        assert!((out.data()[0] - 27.0).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_oracle_on_spec_shape() {
        let mut rng = Stream::from_seed(42);
        let input = rng.normal_tensor::<f64>(&[1, 2, 5, 5, 5]);
        let kernels = rng.normal_tensor::<f64>(&[3, 2, 3, 3, 3]);
        for padding in [0usize, 1] {
            let fast = conv3d(&input, &kernels, padding).unwrap();
            let slow = conv3d_naive(&input, &kernels, padding);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                let rel = (a - b).abs() / b.abs().max(1e-12);
                assert!(rel <= 1e-5, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn matches_naive_oracle_on_small_extents() {
        let mut rng = Stream::from_seed(7);
        for &(n, cin, cout, d, h, w) in &[
            (1usize, 1usize, 1usize, 3usize, 3usize, 3usize),
            (2, 1, 2, 3, 4, 5),
            (1, 3, 2, 4, 4, 4),
            (1, 2, 3, 5, 6, 3),
            (2, 2, 2, 6, 5, 4),
        ] {
            let input = rng.normal_tensor::<f64>(&[n, cin, d, h, w]);
            let kernels = rng.normal_tensor::<f64>(&[cout, cin, 3, 3, 3]);
            for padding in [0usize, 1] {
                if d + 2 * padding < 3 || h + 2 * padding < 3 || w + 2 * padding < 3 {
                    continue;
                }
                let fast = conv3d(&input, &kernels, padding).unwrap();
                let slow = conv3d_naive(&input, &kernels, padding);
                for (a, b) in fast.data().iter().zip(slow.data()) {
                    assert!((a - b).abs() / b.abs().max(1e-12) <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn shape_errors_name_axis() {
        let input = Tensor::<f64>::zeros(&[1, 2, 4, 4, 4]);
        let kernels = Tensor::<f64>::zeros(&[3, 1, 3, 3, 3]);
        let err = conv3d(&input, &kernels, 1).unwrap_err();
        match err {
            Error::ShapeMismatch { axis, .. } => assert_eq!(axis, 1),
            other => panic!("unexpected error {other:?}"),
        }
        let tiny = Tensor::<f64>::zeros(&[1, 2, 2, 4, 4]);
        let k2 = Tensor::<f64>::zeros(&[3, 2, 3, 3, 3]);
        let err = conv3d(&tiny, &k2, 0).unwrap_err();
        match err {
            Error::ShapeMismatch { axis, .. } => assert_eq!(axis, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Stream::from_seed(11);
        let input = rng.normal_tensor::<f64>(&[1, 2, 4, 4, 4]);
        let kernels = rng.normal_tensor::<f64>(&[2, 2, 3, 3, 3]);
        let padding = 1;
        // scalar loss: weighted sum of outputs
        let out = conv3d(&input, &kernels, padding).unwrap();
        let weights = Stream::from_seed(12).normal_tensor::<f64>(out.shape());
        let (gi, gk) = conv3d_backward(&input, &kernels, padding, &weights).unwrap();

        let loss = |inp: &Tensor<f64>, ker: &Tensor<f64>| -> f64 {
            let o = conv3d(inp, ker, padding).unwrap();
            o.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-5;
        for idx in [0usize, 7, 63, 100] {
            let mut ip = input.clone();
            ip.data_mut()[idx] += eps;
            let mut im = input.clone();
            im.data_mut()[idx] -= eps;
            let fd = (loss(&ip, &kernels) - loss(&im, &kernels)) / (2.0 * eps);
            assert!((fd - gi.data()[idx]).abs() < 1e-6, "input grad {idx}");
        }
        for idx in [0usize, 13, 26, 40] {
            let mut kp = kernels.clone();
            kp.data_mut()[idx] += eps;
            let mut km = kernels.clone();
            km.data_mut()[idx] -= eps;
            let fd = (loss(&input, &kp) - loss(&input, &km)) / (2.0 * eps);
            assert!((fd - gk.data()[idx]).abs() < 1e-6, "kernel grad {idx}");
        }
    }
}
