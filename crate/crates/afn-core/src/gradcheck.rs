//! Central finite-difference verification of analytic gradients.
//!
//! The relative error between an analytic gradient `a` and its numeric
//! estimate `n` is |a - n| / max(|a|, |n|, 1), which behaves as a relative
//! measure for large gradients and an absolute one near zero, where the
//! finite-difference noise floor dominates.

use crate::error::{AfnError, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Which coordinates of each parameter tensor to compare.
#[derive(Clone, Copy, Debug)]
pub enum CoordSampling {
    /// Every coordinate of every parameter.
    All,
    /// Up to `max_coords` seeded-random coordinates per parameter tensor.
    /// Used for composed graphs where exhaustive probing is too slow; a
    /// wrong backward rule corrupts whole tensors, so spot checks catch it.
    PerTensor { max_coords: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

/// Outcome of a gradient check over one graph.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub worst: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }

    pub fn ensure_passed(&self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(AfnError::GradCheckFailed { worst: self.worst, tolerance: self.tolerance })
        }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "grad check: worst {:.3e} (tolerance {:.1e}, h={:.1e}) -> {}",
            self.worst,
            self.tolerance,
            self.step,
            if self.passed() { "pass" } else { "FAIL" }
        )?;
        for e in &self.entries {
            writeln!(f, "  {:<28} {:>5} coords  max rel err {:.3e}", e.name, e.coords_checked, e.max_rel_error)?;
        }
        Ok(())
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Builds the graph once for the analytic gradients, then re-evaluates the
/// scalar output at +/- `step` around each sampled coordinate. `build` must
/// register the given tensors as leaves in order and return the scalar
/// output id.
pub fn grad_check<F>(
    params: &[(String, Tensor)],
    build: F,
    step: f64,
    tolerance: f64,
    sampling: CoordSampling,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        if tape.value(out).numel() != 1 {
            return Err(AfnError::InvalidArgument("grad_check: graph output must be scalar".into()));
        }
        Ok(tape.value(out).data[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = build(&mut tape, &ids)?;
    let grads = tape.backward(out)?;

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    for v in values.iter_mut() {
        v.requires_grad = true;
    }

    let mut entries = Vec::with_capacity(params.len());
    let mut worst = 0.0f64;
    for (p, (name, _)) in params.iter().enumerate() {
        let analytic = grads
            .get(ids[p])
            .ok_or_else(|| AfnError::InvalidArgument(format!("grad_check: no gradient for {}", name)))?
            .to_vec();
        let numel = values[p].numel();
        let coords: Vec<usize> = match sampling {
            CoordSampling::All => (0..numel).collect(),
            CoordSampling::PerTensor { max_coords, seed } => {
                if numel <= max_coords {
                    (0..numel).collect()
                } else {
                    // seed varies per tensor so samples differ across params
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p as u64).wrapping_mul(0x9e3779b97f4a7c15));
                    let mut picked: Vec<usize> = (0..max_coords).map(|_| rng.gen_range(0..numel)).collect();
                    picked.sort_unstable();
                    picked.dedup();
                    picked
                }
            }
        };
        let mut max_err = 0.0f64;
        for &j in &coords {
            let orig = values[p].data[j];
            values[p].data[j] = orig + step;
            let up = eval(&values)?;
            values[p].data[j] = orig - step;
            let down = eval(&values)?;
            values[p].data[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            max_err = max_err.max(relative_error(analytic[j], numeric));
        }
        worst = worst.max(max_err);
        entries.push(GradCheckEntry { name: name.clone(), coords_checked: coords.len(), max_rel_error: max_err });
    }

    Ok(GradCheckReport { tolerance, step, worst, entries })
}

/// Central-difference gradient of a scalar graph with respect to every
/// coordinate of every parameter. Test helper for negative controls.
pub fn numeric_gradients<F>(params: &[(String, Tensor)], build: F, step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        Ok(tape.value(out).data[0])
    };
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut all = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let numel = values[p].numel();
        let mut g = Vec::with_capacity(numel);
        for j in 0..numel {
            let orig = values[p].data[j];
            values[p].data[j] = orig + step;
            let up = eval(&values)?;
            values[p].data[j] = orig - step;
            let down = eval(&values)?;
            values[p].data[j] = orig;
            g.push((up - down) / (2.0 * step));
        }
        all.push(g);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{Activation, SoftmaxAxis};
    use crate::tensor::Shape;

    fn seeded(n: usize, c: usize, f: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(n, c, f, t), |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    /// Scalar head so any intermediate can be reduced for checking; the
    /// cross-entropy step also folds the batch axis.
    fn reduce(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let sh = tape.shape(x);
        let pooled = tape.global_mean_pool(x);
        let w = tape.leaf(seeded(1, sh.c, 1, 1, 999));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let z = tape.linear(pooled, w, b)?;
        let targets = vec![1.0; tape.value(z).numel()];
        tape.bce_with_logits(z, &targets)
    }

    #[test]
    fn conv2d_gradients_pass() {
        for (d, p, s) in [(1, 1, 1), (2, 2, 1), (1, 0, 2), (4, 4, 1)] {
            let params = vec![
                ("input".to_string(), seeded(2, 2, 9, 9, 51)),
                ("kernel".to_string(), seeded(3, 2, 3, 3, 52)),
            ];
            let report = grad_check(
                &params,
                |tape, ids| {
                    let y = tape.conv2d(ids[0], ids[1], d, p, s)?;
                    reduce(tape, y)
                },
                DEFAULT_STEP,
                1e-4,
                CoordSampling::All,
            )
            .unwrap();
            assert!(report.passed(), "conv d={} p={} s={}:\n{}", d, p, s, report);
        }
    }

    #[test]
    fn pool_upsample_softmax_gradients_pass() {
        let params = vec![("input".to_string(), seeded(1, 2, 6, 8, 61))];
        let report = grad_check(
            &params,
            |tape, ids| {
                let p = tape.maxpool2d(ids[0], 2, 2)?;
                let u = tape.bilinear_upsample(p, 6, 8)?;
                let s = tape.axis_softmax(u, SoftmaxAxis::Frequency);
                reduce(tape, s)
            },
            DEFAULT_STEP,
            1e-4,
            CoordSampling::All,
        )
        .unwrap();
        assert!(report.passed(), "{}", report);
    }

    #[test]
    fn activation_and_bn_gradients_pass() {
        for kind in [Activation::Relu, Activation::Elu, Activation::Sigmoid, Activation::Tanh] {
            let params = vec![
                ("input".to_string(), seeded(2, 3, 4, 4, 71)),
                ("gamma".to_string(), seeded(1, 3, 1, 1, 72)),
                ("beta".to_string(), seeded(1, 3, 1, 1, 73)),
            ];
            let report = grad_check(
                &params,
                |tape, ids| {
                    let (bn, _, _) = tape.batchnorm2d_train(ids[0], ids[1], ids[2])?;
                    let a = tape.activation(bn, kind);
                    reduce(tape, a)
                },
                DEFAULT_STEP,
                1e-4,
                CoordSampling::All,
            )
            .unwrap();
            assert!(report.passed(), "{:?}:\n{}", kind, report);
        }
    }

    #[test]
    fn bn_eval_linear_bce_gradients_pass() {
        let params = vec![
            ("input".to_string(), seeded(3, 2, 3, 3, 81)),
            ("gamma".to_string(), seeded(1, 2, 1, 1, 82)),
            ("beta".to_string(), seeded(1, 2, 1, 1, 83)),
            ("w".to_string(), seeded(1, 18, 1, 1, 84)),
            ("b".to_string(), seeded(1, 1, 1, 1, 85)),
            ("bias_c".to_string(), seeded(1, 2, 1, 1, 86)),
        ];
        let report = grad_check(
            &params,
            |tape, ids| {
                let bn = tape.batchnorm2d_eval(ids[0], ids[1], ids[2], &[0.1, -0.2], &[0.9, 1.4])?;
                let biased = tape.bias_add(bn, ids[5])?;
                let z = tape.linear(biased, ids[3], ids[4])?;
                tape.bce_with_logits(z, &[1.0, 0.0, 1.0])
            },
            DEFAULT_STEP,
            1e-4,
            CoordSampling::All,
        )
        .unwrap();
        assert!(report.passed(), "{}", report);
    }

    #[test]
    fn concat_mul_add_gradients_pass() {
        let params = vec![
            ("a".to_string(), seeded(1, 2, 4, 4, 91)),
            ("b".to_string(), seeded(1, 3, 4, 4, 92)),
            ("m".to_string(), seeded(1, 5, 4, 4, 93)),
        ];
        let report = grad_check(
            &params,
            |tape, ids| {
                let cat = tape.concat_channels(ids[0], ids[1])?;
                let prod = tape.mul(cat, ids[2])?;
                let sum = tape.add(prod, cat)?;
                reduce(tape, sum)
            },
            DEFAULT_STEP,
            1e-4,
            CoordSampling::All,
        )
        .unwrap();
        assert!(report.passed(), "{}", report);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // conv -> elu -> pool -> upsample -> mul residual -> bce
        let params = vec![
            ("x".to_string(), seeded(1, 1, 8, 8, 101)),
            ("k".to_string(), seeded(2, 1, 3, 3, 102)),
            ("w".to_string(), seeded(1, 2, 1, 1, 103)),
            ("b".to_string(), seeded(1, 1, 1, 1, 104)),
        ];
        let report = grad_check(
            &params,
            |tape, ids| {
                let c = tape.conv2d(ids[0], ids[1], 2, 2, 1)?;
                let a = tape.activation(c, Activation::Elu);
                let p = tape.maxpool2d(a, 2, 2)?;
                let u = tape.bilinear_upsample(p, 8, 8)?;
                let r = tape.mul(u, u)?;
                let g = tape.global_mean_pool(r);
                let z = tape.linear(g, ids[2], ids[3])?;
                tape.bce_with_logits(z, &[1.0])
            },
            DEFAULT_STEP,
            1e-4,
            CoordSampling::All,
        )
        .unwrap();
        assert!(report.passed(), "{}", report);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let params = vec![
            ("x".to_string(), seeded(1, 1, 5, 5, 111)),
            ("k".to_string(), seeded(1, 1, 3, 3, 112)),
        ];
        let build = |tape: &mut Tape, ids: &[TensorId]| -> Result<TensorId> {
            let c = tape.conv2d(ids[0], ids[1], 1, 1, 1)?;
            let s = tape.activation(c, Activation::Sigmoid);
            reduce(tape, s)
        };
        // analytic gradients from the tape, then corrupt one entry as a
        // stand-in for a broken backward rule
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params.iter().map(|(_, t)| tape.leaf(t.clone().with_grad())).collect();
        let out = build(&mut tape, &ids).unwrap();
        let grads = tape.backward(out).unwrap();
        let mut analytic: Vec<f64> = grads.get(ids[1]).unwrap().to_vec();
        analytic[3] = analytic[3] * 1.5 + 0.05;

        let numeric = numeric_gradients(&params, build, DEFAULT_STEP).unwrap();
        let max_err = analytic
            .iter()
            .zip(&numeric[1])
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0f64, f64::max);
        assert!(max_err > 1e-4, "corruption must exceed tolerance, got {:.3e}", max_err);
    }
}
