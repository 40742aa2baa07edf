//! Central finite differences against reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Builds the function under test on a fresh graph from leaves bound to the inputs.
pub trait GradFn: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> GradFn for F {}

/// Evaluates `op` and reduces non-scalar outputs with fixed pseudo-random weights.
fn evaluate(op: &impl GradFn, inputs: &[Tensor<f64>], track: bool) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let out = op(&mut g, &vars)?;
    let len = g.value(out).len();
    let root = if len == 1 {
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ len as u64);
        let weights = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        g.weighted_sum(out, weights)?
    };
    Ok((g, vars, root))
}

/// Maximum over all input elements of `|a - n| / max(|a|, |n|, 1e-8)` where `a` is the
/// reverse-mode gradient and `n` the central difference with step `h`.
pub fn finite_difference_check(op: impl GradFn, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    let (mut g, vars, root) = evaluate(&op, inputs, true)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let fp = scalar_value(&op, &probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let fm = scalar_value(&op, &probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_value(op: &impl GradFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let (g, _, root) = evaluate(op, inputs, false)?;
    Ok(g.value(root).data()[0])
}

/// Largest relative error an op may show in [`gradcheck_suite`].
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
/// Finite-difference step used by [`gradcheck_suite`].
pub const GRADCHECK_STEP: f64 = 1e-4;

/// Worst finite-difference disagreement of one op over its random cases.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Magnitudes in `[0.05, 1)` with random sign, keeping ReLU kinks out of the stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Shuffled values spaced 0.01 apart so every pooling window has a clear maximum.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    for i in (1..n).rev() {
        data.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Checks every differentiable op on `cases` random shapes and parameter
/// settings each. The first transposed-convolution case of each run uses the
/// GNet upsampling configuration (k=3, s=2, d=2, p=2, output_padding=1).
pub fn gradcheck_suite(cases: usize, seed: u64) -> Result<Vec<OpCheck>> {
    use super::{BatchNormStats, Conv2dParams, ConvTranspose2dParams, PadMode, PadSpec};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = GRADCHECK_STEP;
    let mut out = Vec::new();
    let mut run = |op: &'static str, rng: &mut ChaCha8Rng, case: &mut dyn FnMut(&mut ChaCha8Rng, usize) -> Result<f64>| -> Result<()> {
        let mut worst = 0.0f64;
        for i in 0..cases {
            worst = worst.max(case(rng, i)?);
        }
        out.push(OpCheck { op, cases, max_rel_error: worst });
        Ok(())
    };

    run("conv2d", &mut rng, &mut |rng, _| {
        let (n, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = [1, 3][rng.gen_range(0..2)];
        let p = Conv2dParams::new(rng.gen_range(1..=2), rng.gen_range(0..=1), rng.gen_range(1..=2));
        let (hh, ww) = (rng.gen_range(5..=8), rng.gen_range(5..=8));
        let inputs = [uniform(&[n, ci, hh, ww], -1.0, 1.0, rng), uniform(&[co, ci, k, k], -1.0, 1.0, rng), uniform(&[co], -1.0, 1.0, rng)];
        finite_difference_check(move |g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], Some(v[2]), p), &inputs, h)
    })?;
    run("conv_transpose2d", &mut rng, &mut |rng, i| {
        let (n, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (k, p) = if i == 0 {
            (3, ConvTranspose2dParams::new(2, 2, 2, 1))
        } else {
            let k = rng.gen_range(2..=3);
            let stride = rng.gen_range(1..=2);
            let dilation = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..=dilation * (k - 1) / 2);
            let output_padding = if stride > 1 { rng.gen_range(0..stride.min(dilation + 1)) } else { 0 };
            (k, ConvTranspose2dParams::new(stride, padding, dilation, output_padding))
        };
        let (hh, ww) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
        let inputs = [uniform(&[n, ci, hh, ww], -1.0, 1.0, rng), uniform(&[ci, co, k, k], -1.0, 1.0, rng), uniform(&[co], -1.0, 1.0, rng)];
        finite_difference_check(move |g: &mut Graph<f64>, v: &[Var]| g.conv_transpose2d(v[0], v[1], Some(v[2]), p), &inputs, h)
    })?;
    run("max_pool2d", &mut rng, &mut |rng, _| {
        let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), 2 * rng.gen_range(1..=4), 2 * rng.gen_range(1..=4)];
        let x = distinct(&shape, rng);
        finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| g.max_pool2d(v[0], 2, 2), &[x], h)
    })?;
    run("relu", &mut rng, &mut |rng, _| {
        let x = away_from_zero(&[rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=6), rng.gen_range(2..=6)], rng);
        finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| Ok(g.relu(v[0])), &[x], h)
    })?;
    run("sigmoid", &mut rng, &mut |rng, _| {
        let x = uniform(&[rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=6), rng.gen_range(2..=6)], -4.0, 4.0, rng);
        finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| Ok(g.sigmoid(v[0])), &[x], h)
    })?;
    run("batch_norm2d", &mut rng, &mut |rng, i| {
        let c = rng.gen_range(1..=3);
        let shape = [rng.gen_range(1..=2), c, rng.gen_range(2..=5), rng.gen_range(2..=5)];
        let inputs = [uniform(&shape, -1.0, 1.0, rng), uniform(&[c], 0.5, 1.5, rng), uniform(&[c], -0.5, 0.5, rng)];
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        let training = i % 2 == 0;
        finite_difference_check(
            move |g: &mut Graph<f64>, v: &[Var]| {
                let mut stats = BatchNormStats::new(c);
                stats.mean = mean.clone();
                stats.var = var.clone();
                g.batch_norm2d(v[0], v[1], v[2], &mut stats, training)
            },
            &inputs,
            h,
        )
    })?;
    run("concat_channels", &mut rng, &mut |rng, _| {
        let (n, hh, ww) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let inputs = [uniform(&[n, rng.gen_range(1..=3), hh, ww], -1.0, 1.0, rng), uniform(&[n, rng.gen_range(1..=3), hh, ww], -1.0, 1.0, rng)];
        finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| g.concat_channels(v[0], v[1]), &inputs, h)
    })?;
    run("upsample_nearest2x", &mut rng, &mut |rng, _| {
        let x = uniform(&[rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)], -1.0, 1.0, rng);
        finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| g.upsample_nearest2x(v[0]), &[x], h)
    })?;
    run("crop2d", &mut rng, &mut |rng, _| {
        let (hh, ww) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
        let x = uniform(&[1, rng.gen_range(1..=3), hh, ww], -1.0, 1.0, rng);
        let (top, left) = (rng.gen_range(0..hh - 1), rng.gen_range(0..ww - 1));
        let (ch, cw) = (rng.gen_range(1..=hh - top), rng.gen_range(1..=ww - left));
        finite_difference_check(move |g: &mut Graph<f64>, v: &[Var]| g.crop2d(v[0], top, left, ch, cw), &[x], h)
    })?;
    run("pad2d", &mut rng, &mut |rng, i| {
        let (hh, ww) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
        let x = uniform(&[1, rng.gen_range(1..=2), hh, ww], -1.0, 1.0, rng);
        let mode = [PadMode::Zero, PadMode::Circular, PadMode::Reflect][i % 3];
        let rows = PadSpec::new(rng.gen_range(0..hh), rng.gen_range(0..hh), mode);
        let cols = PadSpec::new(rng.gen_range(0..ww), rng.gen_range(0..ww), mode);
        finite_difference_check(move |g: &mut Graph<f64>, v: &[Var]| g.pad2d(v[0], rows, cols), &[x], h)
    })?;
    run("bce_loss", &mut rng, &mut |rng, _| {
        let shape = [1, 1, rng.gen_range(1..=5), rng.gen_range(1..=5)];
        let inputs = [uniform(&shape, 0.15, 0.85, rng), uniform(&shape, 0.0, 1.0, rng)];
        finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| g.bce_loss(v[0], v[1]), &inputs, h)
    })?;
    run("mse_loss", &mut rng, &mut |rng, _| {
        let shape = [1, 1, rng.gen_range(1..=5), rng.gen_range(1..=5)];
        let inputs = [uniform(&shape, -1.0, 1.0, rng), uniform(&shape, -1.0, 1.0, rng)];
        finite_difference_check(|g: &mut Graph<f64>, v: &[Var]| g.mse_loss(v[0], v[1]), &inputs, h)
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let w: Vec<f64> = (0..16).map(|i| i as f64 * 0.25 - 1.0).collect();
        let err = finite_difference_check(move |g: &mut Graph<f64>, v: &[Var]| g.weighted_sum(v[0], w.clone()), &[x], 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn suite_covers_every_op_and_passes() {
        let report = gradcheck_suite(3, 5).unwrap();
        assert_eq!(report.len(), 12);
        for r in &report {
            assert!(r.passed(), "{r:?}");
        }
    }
}
