//! Naive reference implementations used by the test suites to cross-check
//! the optimized paths. These stay deliberately close to the defining
//! formulas (direct summation, exhaustive sweeps) and share no code with
//! the implementations they verify.

use crate::error::{AfnError, Result};
use crate::tensor::{Shape, Tensor};

/// Direct dilated-convolution sum: for every output element, loop over all
/// input channels and kernel taps, treating out-of-bounds input as zero.
pub fn conv2d_reference(input: &Tensor, kernel: &Tensor, dilation: usize, padding: usize, stride: usize) -> Result<Tensor> {
    let x = input.shape;
    let w = kernel.shape;
    if x.c != w.c {
        return Err(AfnError::ShapeMismatch("conv2d_reference: channel mismatch".into()));
    }
    let k = w.f;
    let of = crate::tape::conv_out_len(x.f, k, dilation, padding, stride)?;
    let ot = crate::tape::conv_out_len(x.t, k, dilation, padding, stride)?;
    let out_shape = Shape::new(x.n, w.n, of, ot);
    let mut out = vec![0.0; out_shape.numel()];
    for n in 0..x.n {
        for o in 0..w.n {
            for y in 0..of {
                for xx in 0..ot {
                    let mut acc = 0.0;
                    for i in 0..x.c {
                        for u in 0..k {
                            for v in 0..k {
                                let fy = y * stride + dilation * u;
                                let ft = xx * stride + dilation * v;
                                if fy < padding || ft < padding {
                                    continue;
                                }
                                let (fy, ft) = (fy - padding, ft - padding);
                                if fy >= x.f || ft >= x.t {
                                    continue;
                                }
                                acc += input.at(n, i, fy, ft) * kernel.at(o, i, u, v);
                            }
                        }
                    }
                    out[out_shape.idx(n, o, y, xx)] = acc;
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Equal error rate by exhaustive candidate sweep: evaluates the false
/// acceptance and false rejection rates at every unique score (plus a
/// sentinel above the maximum) by direct counting and takes the midpoint at
/// the first threshold where FRR >= FAR.
pub fn eer_reference(genuine: &[f64], spoof: &[f64]) -> (f64, f64) {
    let mut candidates: Vec<f64> = genuine.iter().chain(spoof).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let top = candidates.last().copied().unwrap_or(0.0);
    candidates.push(top + 1.0);
    for &theta in &candidates {
        let far = spoof.iter().filter(|&&s| s >= theta).count() as f64 / spoof.len() as f64;
        let frr = genuine.iter().filter(|&&s| s < theta).count() as f64 / genuine.len() as f64;
        if frr >= far {
            return ((far + frr) / 2.0, theta);
        }
    }
    unreachable!("sentinel threshold always has FRR=1 >= FAR=0");
}

/// Sliding-window mean normalization computed frame by frame: for every
/// frame, average the centered window (truncated at the edges) directly and
/// subtract. Utterances no longer than the window use the full utterance.
pub fn sliding_mean_reference(data: &[f64], f: usize, t: usize, window: usize) -> Vec<f64> {
    let half = window / 2;
    let mut out = vec![0.0; f * t];
    for row in 0..f {
        for col in 0..t {
            let (lo, hi) = if window >= t {
                (0, t - 1)
            } else {
                (col.saturating_sub(half), (col + half).min(t - 1))
            };
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += data[row * t + j];
            }
            let mean = acc / (hi - lo + 1) as f64;
            out[row * t + col] = data[row * t + col] - mean;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_conv_identity() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::new(Shape::new(1, 1, 3, 3), k).unwrap();
        let y = conv2d_reference(&x, &w, 1, 1, 1).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn reference_eer_perfect_and_crossed() {
        let (eer, _) = eer_reference(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(eer, 0.0);
        let (eer, _) = eer_reference(&[1.0, 3.0], &[2.0, 4.0]);
        assert_eq!(eer, 0.5);
    }
}
