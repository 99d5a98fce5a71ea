//! Central finite-difference verification of analytic gradients (64-bit only).

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::norm::NormKind;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    pub tolerance: f64,
    /// Gradient magnitudes below this are compared on an absolute scale.
    pub floor: f64,
}

impl GradCheckConfig {
    pub fn primitive() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-3,
        }
    }

    pub fn composed() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:>6} elems  max rel err {:.3e}  (tol {:.0e})  {}",
            self.name,
            self.checked,
            self.max_rel_error,
            self.tolerance,
            if self.passed { "ok" } else { "FAIL" }
        )?;
        if !self.passed {
            if let Some((i, e)) = self.worst {
                write!(
                    f,
                    "  at input {i} element {e}: analytic {:.6e} vs numeric {:.6e}",
                    self.analytic_at_worst, self.numeric_at_worst
                )?;
            }
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the analytic gradient of scalar `f` with central differences.
///
/// `f` receives one leaf per input. Only inputs with `perturb[i]` set are
/// checked; the others enter as gradient-free constants.
pub fn grad_check_subset<F>(
    name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    perturb: &[bool],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    assert_eq!(inputs.len(), perturb.len());
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(perturb)
            .map(|(v, &p)| tape.leaf(v.clone(), p))
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(perturb)
        .map(|(v, &p)| tape.leaf(v.clone(), p))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out);

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        if !perturb[i] {
            continue;
        }
        for e in 0..inputs[i].len() {
            let analytic = grads.get(*v).map_or(0.0, |g| g.data()[e]);
            let x0 = inputs[i].data()[e];
            work[i].data_mut()[e] = x0 + cfg.step;
            let fp = eval(&work)?;
            work[i].data_mut()[e] = x0 - cfg.step;
            let fm = eval(&work)?;
            work[i].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let err = relative_error(analytic, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, e));
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tolerance;
    Ok(report)
}

/// [`grad_check_subset`] over every input.
pub fn grad_check<F>(
    name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_subset(name, f, inputs, &vec![true; inputs.len()], cfg)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduce an arbitrary output to a scalar with fixed random weights.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..tape.value(y).len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    tape.weighted_sum(y, &w)
}

/// Gradient checks for every primitive operation.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let cfg = GradCheckConfig::primitive();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = uniform(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[3], -1.0, 1.0);
    out.push(grad_check(
        "conv2d 3x3 stride 1",
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            project(t, y, 1)
        },
        &[x.clone(), w.clone(), b],
        cfg,
    )?);
    out.push(grad_check(
        "conv2d 3x3 stride 2",
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, 1)?;
            project(t, y, 2)
        },
        &[x.clone(), w],
        cfg,
    )?);
    let w1 = uniform(&mut rng, &[3, 2, 1, 1], -1.0, 1.0);
    out.push(grad_check(
        "conv2d 1x1",
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 0)?;
            project(t, y, 3)
        },
        &[x.clone(), w1],
        cfg,
    )?);

    for (label, kind, train) in [
        ("normalize batch train", NormKind::Batch, true),
        ("normalize instance", NormKind::Instance, true),
        ("normalize ibn-split train", NormKind::IbnSplit, true),
        ("normalize batch eval", NormKind::Batch, false),
    ] {
        let x = uniform(&mut rng, &[3, 4, 3, 3], -2.0, 2.0);
        let gamma = uniform(&mut rng, &[4], 0.5, 1.5);
        let beta = uniform(&mut rng, &[4], -0.5, 0.5);
        let modes = kind.channel_modes(4)?;
        let rc = kind.running_channels(4);
        let rm: Vec<f64> = (0..rc).map(|i| 0.1 * i as f64).collect();
        let rv: Vec<f64> = (0..rc).map(|i| 0.5 + 0.2 * i as f64).collect();
        out.push(grad_check(
            label,
            |t, v| {
                let (y, _) = t.normalize(v[0], v[1], v[2], &modes, train, Some((&rm, &rv)))?;
                project(t, y, 4)
            },
            &[x, gamma, beta],
            cfg,
        )?);
    }

    let xe = away_from_zero(&mut rng, &[3, 5]);
    out.push(grad_check(
        "relu",
        |t, v| {
            let y = t.relu(v[0]);
            project(t, y, 5)
        },
        &[xe],
        cfg,
    )?);
    let xs = uniform(&mut rng, &[3, 5], -3.0, 3.0);
    out.push(grad_check(
        "sigmoid",
        |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, 6)
        },
        std::slice::from_ref(&xs),
        cfg,
    )?);
    out.push(grad_check(
        "softplus",
        |t, v| {
            let y = t.softplus(v[0]);
            project(t, y, 7)
        },
        std::slice::from_ref(&xs),
        cfg,
    )?);
    out.push(grad_check(
        "softmax",
        |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, 8)
        },
        std::slice::from_ref(&xs),
        cfg,
    )?);
    out.push(grad_check(
        "cross_entropy label-smoothed",
        |t, v| {
            let y = t.cross_entropy(v[0], &[Some(1), None, Some(4)], 0.1)?;
            project(t, y, 9)
        },
        std::slice::from_ref(&xs),
        cfg,
    )?);
    let sq = uniform(&mut rng, &[6], 0.5, 2.0);
    out.push(grad_check(
        "sqrt_clamped",
        |t, v| {
            let y = t.sqrt_clamped(v[0], 1e-12);
            project(t, y, 10)
        },
        &[sq],
        cfg,
    )?);

    let fmap = uniform(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    out.push(grad_check(
        "gap",
        |t, v| {
            let y = t.gap(v[0])?;
            project(t, y, 11)
        },
        std::slice::from_ref(&fmap),
        cfg,
    )?);
    out.push(grad_check(
        "global_max",
        |t, v| {
            let y = t.global_max(v[0])?;
            project(t, y, 12)
        },
        std::slice::from_ref(&fmap),
        cfg,
    )?);
    out.push(grad_check(
        "channel_mean",
        |t, v| {
            let y = t.channel_mean(v[0])?;
            project(t, y, 13)
        },
        std::slice::from_ref(&fmap),
        cfg,
    )?);
    out.push(grad_check(
        "channel_max",
        |t, v| {
            let y = t.channel_max(v[0])?;
            project(t, y, 14)
        },
        std::slice::from_ref(&fmap),
        cfg,
    )?);
    let cg = uniform(&mut rng, &[2, 3], 0.1, 0.9);
    out.push(grad_check(
        "mul_channel",
        |t, v| {
            let y = t.mul_channel(v[0], v[1])?;
            project(t, y, 15)
        },
        &[fmap.clone(), cg],
        cfg,
    )?);
    let sg = uniform(&mut rng, &[2, 1, 3, 4], 0.1, 0.9);
    out.push(grad_check(
        "mul_spatial",
        |t, v| {
            let y = t.mul_spatial(v[0], v[1])?;
            project(t, y, 16)
        },
        &[fmap.clone(), sg],
        cfg,
    )?);

    let lx = uniform(&mut rng, &[5, 3], -1.0, 1.0);
    let lw = uniform(&mut rng, &[4, 3], -1.0, 1.0);
    let lb = uniform(&mut rng, &[4], -1.0, 1.0);
    out.push(grad_check(
        "linear",
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, 17)
        },
        &[lx.clone(), lw, lb],
        cfg,
    )?);
    let a = uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
    let bb = uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
    out.push(grad_check(
        "add",
        |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 18)
        },
        &[a.clone(), bb.clone()],
        cfg,
    )?);
    out.push(grad_check(
        "sub",
        |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, 19)
        },
        &[a.clone(), bb.clone()],
        cfg,
    )?);
    out.push(grad_check(
        "mul",
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 20)
        },
        &[a.clone(), bb.clone()],
        cfg,
    )?);
    let c2 = uniform(&mut rng, &[2, 1, 2, 2], -1.0, 1.0);
    out.push(grad_check(
        "concat",
        |t, v| {
            let y = t.concat(&[v[0], v[1]])?;
            project(t, y, 21)
        },
        &[a, c2],
        cfg,
    )?);
    out.push(grad_check(
        "l2norm",
        |t, v| {
            let y = t.l2_normalize(v[0])?;
            project(t, y, 22)
        },
        std::slice::from_ref(&lx),
        cfg,
    )?);
    let emb = uniform(&mut rng, &[4, 3], -1.0, 1.0);
    out.push(grad_check(
        "pairwise_sq_dist",
        |t, v| {
            let y = t.pairwise_sq_dist(v[0])?;
            project(t, y, 23)
        },
        std::slice::from_ref(&emb),
        cfg,
    )?);
    out.push(grad_check(
        "gather",
        |t, v| {
            let y = t.gather(v[0], &[0, 5, 5, 11])?;
            project(t, y, 24)
        },
        std::slice::from_ref(&emb),
        cfg,
    )?);
    out.push(grad_check(
        "scale+add_scalar+mean",
        |t, v| {
            let y = t.scale(v[0], -1.7);
            let y = t.add_scalar(y, 0.3);
            Ok(t.mean(y))
        },
        std::slice::from_ref(&emb),
        cfg,
    )?);
    Ok(out)
}
