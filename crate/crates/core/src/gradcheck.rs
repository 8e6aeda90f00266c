//! Central finite-difference verification of analytic gradients.
//!
//! `grad_check` is the oracle every differentiable operation is held
//! against: it never touches the backward rules, only repeated forward
//! evaluation at perturbed points.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tape::{BnMode, PwFn, Tape, TensorId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare the analytic gradient of `f` (a scalar-valued tape program) at
/// `points` against central finite differences, returning the maximum
/// relative error over all coordinates. The relative error denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = points.iter().map(|p| tape.variable(p.clone())).collect();
    let out = f(&mut tape, &ids)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::invalid(format!(
            "grad_check expects a scalar function, got output shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let grads: Vec<Vec<f64>> = ids
        .iter()
        .zip(points)
        .map(|(&id, p)| tape.grad(id).map(|g| g.to_vec()).unwrap_or(vec![0.0; p.len()]))
        .collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = pts.iter().map(|p| t.constant(p.clone())).collect();
        let o = f(&mut t, &ids)?;
        Ok(t.value(o).scalar_value())
    };

    let mut work: Vec<Tensor> = points.to_vec();
    let mut max_rel = 0.0f64;
    for pi in 0..work.len() {
        for ci in 0..work[pi].len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let fp = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let fm = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = grads[pi][ci];
            let rel = (analytic - numeric).abs()
                / analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn randn_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), randn_vec(rng, n)).unwrap()
}

/// Random tensor whose entries stay away from a kink at zero.
fn rand_tensor_off_kink(rng: &mut ChaCha12Rng, shape: &[usize], margin: f64) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = margin * if *v >= 0.0 { 1.0 } else { -1.0 } + *v;
        }
    }
    t
}

/// Weighted-sum readout so every output coordinate influences the scalar
/// with a generic nonzero weight (a plain sum hides gradients that cancel
/// by symmetry, e.g. through batch normalization).
fn weighted_sum(tape: &mut Tape, y: TensorId, weights: &Tensor) -> Result<TensorId> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum_all(prod))
}

fn readout_weights(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.25..1.25)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn checked(name: &str, tol: f64, err: Result<f64>) -> Result<CheckReport> {
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: err?,
        tolerance: tol,
    })
}

/// Finite-difference checks for every differentiable tape operation, each
/// evaluated at fresh random points for every seed. Returns one report per
/// operation holding the worst error over all seeds.
pub fn op_suite(seeds: &[u64]) -> Result<Vec<CheckReport>> {
    let mut worst: Vec<CheckReport> = Vec::new();
    for &seed in seeds {
        let reports = op_suite_single(seed)?;
        if worst.is_empty() {
            worst = reports;
        } else {
            for (w, r) in worst.iter_mut().zip(reports) {
                if r.max_rel_err > w.max_rel_err {
                    w.max_rel_err = r.max_rel_err;
                }
            }
        }
    }
    Ok(worst)
}

fn op_suite_single(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let tol = 1e-4;

    {
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5]);
        let rw = readout_weights(&mut rng, &[3, 5]);
        out.push(checked(
            "linear",
            tol,
            grad_check(
                |t, ids| {
                    let y = t.linear(ids[0], ids[1], ids[2])?;
                    weighted_sum(t, y, &rw)
                },
                &[x, w, b],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let x = rand_tensor(&mut rng, &[2, 3, 6]);
        let k = rand_tensor(&mut rng, &[4, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        let rw = readout_weights(&mut rng, &[2, 4, 6]);
        out.push(checked(
            "conv1d_same",
            tol,
            grad_check(
                |t, ids| {
                    let y = t.conv1d_same(ids[0], ids[1], ids[2])?;
                    weighted_sum(t, y, &rw)
                },
                &[x, k, b],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let g = rand_tensor_off_kink(&mut rng, &[3], 0.2);
        let b = rand_tensor(&mut rng, &[3]);
        let rw = readout_weights(&mut rng, &[2, 3, 4]);
        out.push(checked(
            "batchnorm1d_train",
            tol,
            grad_check(
                |t, ids| {
                    let (y, _) = t.batchnorm1d(ids[0], ids[1], ids[2], BnMode::Train, None, 0.1)?;
                    weighted_sum(t, y, &rw)
                },
                &[x.clone(), g.clone(), b.clone()],
                DEFAULT_STEP,
            ),
        )?);
        let rm: Vec<f64> = randn_vec(&mut rng, 3);
        let rv: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
        out.push(checked(
            "batchnorm1d_eval",
            tol,
            grad_check(
                |t, ids| {
                    let (y, _) = t.batchnorm1d(
                        ids[0],
                        ids[1],
                        ids[2],
                        BnMode::Eval,
                        Some((&rm, &rv)),
                        0.1,
                    )?;
                    weighted_sum(t, y, &rw)
                },
                &[x.clone(), g, b],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let x = rand_tensor_off_kink(&mut rng, &[4, 5], 1e-2);
        let rw = readout_weights(&mut rng, &[4, 5]);
        out.push(checked(
            "relu",
            tol,
            grad_check(
                |t, ids| {
                    let y = t.relu(ids[0]);
                    weighted_sum(t, y, &rw)
                },
                &[x],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let x = rand_tensor(&mut rng, &[4, 5]);
        let rw = readout_weights(&mut rng, &[4, 5]);
        out.push(checked(
            "sigmoid",
            1e-6,
            grad_check(
                |t, ids| {
                    let y = t.sigmoid(ids[0]);
                    weighted_sum(t, y, &rw)
                },
                &[x],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let x = rand_tensor(&mut rng, &[3, 6]);
        let rw = readout_weights(&mut rng, &[3, 6]);
        out.push(checked(
            "softmax_lastdim",
            tol,
            grad_check(
                |t, ids| {
                    let y = t.softmax_lastdim(ids[0])?;
                    weighted_sum(t, y, &rw)
                },
                &[x],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let x = rand_tensor(&mut rng, &[3, 5]);
        let g = rand_tensor_off_kink(&mut rng, &[5], 0.2);
        let b = rand_tensor(&mut rng, &[5]);
        let rw = readout_weights(&mut rng, &[3, 5]);
        out.push(checked(
            "layer_norm_rows",
            tol,
            grad_check(
                |t, ids| {
                    let y = t.layer_norm_rows(ids[0], ids[1], ids[2])?;
                    weighted_sum(t, y, &rw)
                },
                &[x, g, b],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[5, 4]);
        let rw = readout_weights(&mut rng, &[3, 5]);
        out.push(checked(
            "matmul_transb",
            tol,
            grad_check(
                |t, ids| {
                    let y = t.matmul_transb(ids[0], ids[1])?;
                    weighted_sum(t, y, &rw)
                },
                &[a, b],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let a = rand_tensor(&mut rng, &[4]);
        let b = rand_tensor(&mut rng, &[3]);
        let rw = readout_weights(&mut rng, &[4, 3]);
        out.push(checked(
            "outer",
            tol,
            grad_check(
                |t, ids| {
                    let y = t.outer(ids[0], ids[1])?;
                    weighted_sum(t, y, &rw)
                },
                &[a, b],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let x = rand_tensor(&mut rng, &[4, 3]);
        let s = rand_tensor(&mut rng, &[4]);
        let rw = readout_weights(&mut rng, &[4, 3]);
        out.push(checked(
            "scale_rows",
            tol,
            grad_check(
                |t, ids| {
                    let y = t.scale_rows(ids[0], ids[1])?;
                    weighted_sum(t, y, &rw)
                },
                &[x, s],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let mut b = rand_tensor(&mut rng, &[3, 4]);
        for v in b.data_mut() {
            *v = 0.5 + v.abs();
        }
        let rw = readout_weights(&mut rng, &[3, 4]);
        out.push(checked(
            "div",
            tol,
            grad_check(
                |t, ids| {
                    let y = t.div(ids[0], ids[1])?;
                    weighted_sum(t, y, &rw)
                },
                &[a, b],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let mut x = rand_tensor(&mut rng, &[6]);
        for v in x.data_mut() {
            *v = 0.5 + v.abs();
        }
        let rw = readout_weights(&mut rng, &[6]);
        out.push(checked(
            "sqrt",
            tol,
            grad_check(
                |t, ids| {
                    let y = t.pointwise(ids[0], PwFn::Sqrt);
                    weighted_sum(t, y, &rw)
                },
                &[x],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let x = rand_tensor_off_kink(&mut rng, &[6], 1e-2);
        let rw = readout_weights(&mut rng, &[6]);
        out.push(checked(
            "abs",
            tol,
            grad_check(
                |t, ids| {
                    let y = t.pointwise(ids[0], PwFn::Abs);
                    weighted_sum(t, y, &rw)
                },
                &[x],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let x = rand_tensor(&mut rng, &[6]);
        let rw = readout_weights(&mut rng, &[6]);
        out.push(checked(
            "softplus",
            tol,
            grad_check(
                |t, ids| {
                    let y = t.pointwise(ids[0], PwFn::Softplus);
                    weighted_sum(t, y, &rw)
                },
                &[x],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        let x = rand_tensor(&mut rng, &[5]);
        let mask = vec![true, false, true, true, false];
        out.push(checked(
            "masked_mean_rows",
            tol,
            grad_check(
                |t, ids| t.masked_mean_rows(ids[0], &mask),
                &[x],
                DEFAULT_STEP,
            ),
        )?);
    }

    {
        // Shape plumbing composed into one check: concat, slice, stack,
        // transpose, reshape, row_sum.
        let a = rand_tensor(&mut rng, &[1, 2, 3]);
        let b = rand_tensor(&mut rng, &[1, 3, 3]);
        let rw = readout_weights(&mut rng, &[1, 4]);
        out.push(checked(
            "shape_ops",
            tol,
            grad_check(
                |t, ids| {
                    let cat = t.concat_channels(&[ids[0], ids[1]])?;
                    let f0 = t.frame_slice(cat, 0)?;
                    let f2 = t.frame_slice(cat, 2)?;
                    let restk = t.stack_frames(&[f0, f2])?;
                    let p = t.person_slice(restk, 0)?;
                    let pt = t.transpose2d(p)?;
                    let sl = t.slice_cols(pt, 1, 3)?;
                    let rs = t.row_sum(sl)?;
                    let v = t.reshape(rs, vec![2, 1])?;
                    let flat = t.reshape(v, vec![2])?;
                    let row1 = t.reshape(flat, vec![1, 2])?;
                    let row2 = t.reshape(flat, vec![1, 2])?;
                    let two = t.concat_cols(&[row1, row2])?;
                    weighted_sum(t, two, &rw)
                },
                &[a, b],
                DEFAULT_STEP,
            ),
        )?);
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_check_of_sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.4]);
        let err = grad_check(|t, ids| Ok(t.sum_all(ids[0])), &[x], DEFAULT_STEP).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn grad_check_sigmoid_of_sum_at_zero() {
        let x = Tensor::vector(vec![0.0]);
        let err = grad_check(
            |t, ids| {
                let s = t.sum_all(ids[0]);
                Ok(t.sigmoid(s))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn grad_check_composed_conv_bn_relu() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 2, 5]);
        let k = rand_tensor(&mut rng, &[3, 2, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let g = rand_tensor_off_kink(&mut rng, &[3], 0.2);
        let bb = rand_tensor(&mut rng, &[3]);
        let rw = readout_weights(&mut rng, &[2, 3, 5]);
        let err = grad_check(
            |t, ids| {
                let c = t.conv1d_same(ids[0], ids[1], ids[2])?;
                let (bn, _) = t.batchnorm1d(c, ids[3], ids[4], BnMode::Train, None, 0.1)?;
                let r = t.relu(bn);
                weighted_sum(t, r, &rw)
            },
            &[x, k, b, g, bb],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn op_suite_passes_on_ten_seeds() {
        let seeds: Vec<u64> = (0..10).collect();
        for report in op_suite(&seeds).unwrap() {
            assert!(
                report.pass(),
                "{} failed: {} >= {}",
                report.name,
                report.max_rel_err,
                report.tolerance
            );
        }
    }
}
