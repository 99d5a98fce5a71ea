//! Batch, instance and IBN-split normalization kernels.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Variance floor added before the square root.
pub const NORM_EPS: f64 = 1e-5;

/// Running statistics decay: `running = 0.9 * running + 0.1 * batch`.
pub const RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Batch,
    Instance,
    /// First half of the channels instance-normalized, second half batch-normalized.
    IbnSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelMode {
    Instance,
    Batch,
}

impl NormKind {
    pub fn channel_modes(self, channels: usize) -> Result<Vec<ChannelMode>> {
        Ok(match self {
            NormKind::Batch => vec![ChannelMode::Batch; channels],
            NormKind::Instance => vec![ChannelMode::Instance; channels],
            NormKind::IbnSplit => {
                if channels % 2 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "ibn-split needs an even channel count, got {channels}"
                    )));
                }
                let half = channels / 2;
                (0..channels)
                    .map(|c| {
                        if c < half {
                            ChannelMode::Instance
                        } else {
                            ChannelMode::Batch
                        }
                    })
                    .collect()
            }
        })
    }

    /// Number of channels that carry running statistics.
    pub fn running_channels(self, channels: usize) -> usize {
        match self {
            NormKind::Batch => channels,
            NormKind::Instance => 0,
            NormKind::IbnSplit => channels / 2,
        }
    }
}

/// Values kept from the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct NormSaved<T> {
    pub modes: Vec<ChannelMode>,
    pub train: bool,
    pub xhat: Vec<T>,
    /// One entry per (sample, channel).
    pub inv_std: Vec<T>,
}

/// Batch statistics of the batch-normalized channels, in channel order.
#[derive(Clone, Debug, Default)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::InvalidArgument(format!(
            "normalize expects a rank 2 or 4 input, got {shape:?}"
        ))),
    }
}

/// Normalize `x` (`n x c` or `n x c x h x w`) with per-channel scale/shift.
///
/// In eval mode the batch-normalized channels use `running` (mean, var), indexed
/// over batch channels only; instance channels always use per-sample moments.
pub fn norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    modes: &[ChannelMode],
    train: bool,
    running: Option<(&[T], &[T])>,
) -> Result<(Tensor<T>, NormSaved<T>, BatchStats<T>)> {
    let (n, c, hw) = dims(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] || modes.len() != c {
        return Err(Error::shape("normalize", x.shape(), gamma.shape()));
    }
    let n_batch = modes.iter().filter(|m| **m == ChannelMode::Batch).count();
    if !train && n_batch > 0 {
        match running {
            Some((m, v)) if m.len() == n_batch && v.len() == n_batch => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "eval-mode normalization needs running stats for {n_batch} channels"
                )))
            }
        }
    }
    let eps = T::of(NORM_EPS);
    let xd = x.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); n * c];
    let mut stats = BatchStats::default();
    let idx = |s: usize, ch: usize| (s * c + ch) * hw;

    let mut batch_slot = 0;
    for ch in 0..c {
        match modes[ch] {
            ChannelMode::Instance => {
                for s in 0..n {
                    let seg = &xd[idx(s, ch)..idx(s, ch) + hw];
                    let mean = seg.iter().copied().sum::<T>() / T::of(hw as f64);
                    let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>()
                        / T::of(hw as f64);
                    let is = T::one() / (var + eps).sqrt();
                    inv_std[s * c + ch] = is;
                    for (o, &v) in xhat[idx(s, ch)..idx(s, ch) + hw].iter_mut().zip(seg) {
                        *o = (v - mean) * is;
                    }
                }
            }
            ChannelMode::Batch => {
                let (mean, var) = if train {
                    let count = T::of((n * hw) as f64);
                    let mut sum = T::zero();
                    for s in 0..n {
                        sum = sum + xd[idx(s, ch)..idx(s, ch) + hw].iter().copied().sum::<T>();
                    }
                    let mean = sum / count;
                    let mut sq = T::zero();
                    for s in 0..n {
                        sq = sq
                            + xd[idx(s, ch)..idx(s, ch) + hw]
                                .iter()
                                .map(|&v| (v - mean) * (v - mean))
                                .sum::<T>();
                    }
                    let var = sq / count;
                    stats.mean.push(mean);
                    stats.var.push(var);
                    (mean, var)
                } else {
                    let (m, v) = running.expect("checked above");
                    (m[batch_slot], v[batch_slot])
                };
                batch_slot += 1;
                let is = T::one() / (var + eps).sqrt();
                for s in 0..n {
                    inv_std[s * c + ch] = is;
                    let seg = &xd[idx(s, ch)..idx(s, ch) + hw];
                    for (o, &v) in xhat[idx(s, ch)..idx(s, ch) + hw].iter_mut().zip(seg) {
                        *o = (v - mean) * is;
                    }
                }
            }
        }
    }

    let mut y = Tensor::zeros(x.shape());
    {
        let yd = y.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let (g, b) = (gamma.data()[ch], beta.data()[ch]);
                let base = idx(s, ch);
                for i in base..base + hw {
                    yd[i] = g * xhat[i] + b;
                }
            }
        }
    }
    Ok((
        y,
        NormSaved {
            modes: modes.to_vec(),
            train,
            xhat,
            inv_std,
        },
        stats,
    ))
}

/// Returns (dx, dgamma, dbeta).
pub fn norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    saved: &NormSaved<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, hw) = dims(shape).expect("validated in forward");
    let idx = |s: usize, ch: usize| (s * c + ch) * hw;
    let dyd = dy.data();
    let xhat = &saved.xhat;
    let mut dx = Tensor::zeros(shape);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);

    for ch in 0..c {
        let g = gamma.data()[ch];
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for s in 0..n {
            for i in idx(s, ch)..idx(s, ch) + hw {
                sg = sg + dyd[i] * xhat[i];
                sb = sb + dyd[i];
            }
        }
        dgamma.data_mut()[ch] = sg;
        dbeta.data_mut()[ch] = sb;

        let dxd = dx.data_mut();
        match (saved.modes[ch], saved.train) {
            (ChannelMode::Instance, _) => {
                let m = T::of(hw as f64);
                for s in 0..n {
                    let r = idx(s, ch)..idx(s, ch) + hw;
                    let is = saved.inv_std[s * c + ch];
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for i in r.clone() {
                        let d = dyd[i] * g;
                        s1 = s1 + d;
                        s2 = s2 + d * xhat[i];
                    }
                    for i in r {
                        let d = dyd[i] * g;
                        dxd[i] = is / m * (m * d - s1 - xhat[i] * s2);
                    }
                }
            }
            (ChannelMode::Batch, true) => {
                let m = T::of((n * hw) as f64);
                let is = saved.inv_std[ch];
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for s in 0..n {
                    for i in idx(s, ch)..idx(s, ch) + hw {
                        let d = dyd[i] * g;
                        s1 = s1 + d;
                        s2 = s2 + d * xhat[i];
                    }
                }
                for s in 0..n {
                    for i in idx(s, ch)..idx(s, ch) + hw {
                        let d = dyd[i] * g;
                        dxd[i] = is / m * (m * d - s1 - xhat[i] * s2);
                    }
                }
            }
            (ChannelMode::Batch, false) => {
                let is = saved.inv_std[ch];
                for s in 0..n {
                    for i in idx(s, ch)..idx(s, ch) + hw {
                        dxd[i] = dyd[i] * g * is;
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[c], 1.0), Tensor::zeros(&[c]))
    }

    #[test]
    fn constant_input_batch_mode_gives_shift() {
        let x = Tensor::<f64>::full(&[3, 2, 2, 2], 4.2);
        let gamma = Tensor::full(&[2], 1.7);
        let beta = Tensor::new(&[2], vec![0.25, -0.5]);
        let modes = NormKind::Batch.channel_modes(2).unwrap();
        let (y, _, stats) = norm_forward(&x, &gamma, &beta, &modes, true, None).unwrap();
        for s in 0..3 {
            for ch in 0..2 {
                for i in 0..4 {
                    assert_eq!(y.data()[(s * 2 + ch) * 4 + i], beta.data()[ch]);
                }
            }
        }
        assert_eq!(stats.var, vec![0.0, 0.0]);
    }

    #[test]
    fn standardized_input_is_unchanged() {
        // Each channel holds exactly mean 0, variance 1 over the batch.
        let vals = [1.0, -1.0, 1.0, -1.0];
        let x = Tensor::<f64>::from_fn(&[2, 1, 1, 2], |i| vals[i]);
        let (g, b) = affine(1);
        let modes = NormKind::Batch.channel_modes(1).unwrap();
        let (y, _, _) = norm_forward(&x, &g, &b, &modes, true, None).unwrap();
        for (a, e) in y.data().iter().zip(x.data()) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn instance_mode_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn(&[2, 3, 5, 5], |_| rng.gen_range(-3.0..5.0));
        let (g, b) = affine(3);
        let modes = NormKind::Instance.channel_modes(3).unwrap();
        let (y, _, _) = norm_forward(&x, &g, &b, &modes, true, None).unwrap();
        for s in 0..2 {
            for ch in 0..3 {
                let seg = &y.data()[(s * 3 + ch) * 25..(s * 3 + ch + 1) * 25];
                let mean = seg.iter().sum::<f64>() / 25.0;
                let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0;
                assert!(mean.abs() < 1e-6, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn ibn_split_requires_even_channels() {
        assert!(NormKind::IbnSplit.channel_modes(3).is_err());
        let modes = NormKind::IbnSplit.channel_modes(4).unwrap();
        assert_eq!(
            modes,
            vec![
                ChannelMode::Instance,
                ChannelMode::Instance,
                ChannelMode::Batch,
                ChannelMode::Batch
            ]
        );
        assert_eq!(NormKind::IbnSplit.running_channels(4), 2);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 2], 3.0);
        let (g, b) = affine(1);
        let modes = NormKind::Batch.channel_modes(1).unwrap();
        let (y, _, _) =
            norm_forward(&x, &g, &b, &modes, false, Some((&[1.0], &[4.0 - 1e-5]))).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
        assert!(norm_forward(&x, &g, &b, &modes, false, None).is_err());
    }
}
