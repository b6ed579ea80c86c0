//! Linear signal primitives on [`ChannelSeries`] and their exact adjoints.
//!
//! Every forward operator here is linear in its signal argument (and
//! `conv1d_same` is also linear in its kernels), so each `*_adjoint` is the
//! transpose of the forward map. The pyramid filter and the backbone compose
//! these to get reverse-mode gradients without a general autodiff engine.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::series::ChannelSeries;

fn check_kernels(channels: usize, kernels: &ArrayView2<'_, f64>) -> Result<usize> {
    let (kc, k) = kernels.dim();
    if kc != channels {
        return Err(Error::Shape(format!(
            "{kc} kernels for a {channels}-channel series"
        )));
    }
    if k == 0 || k % 2 == 0 {
        return Err(Error::Config(format!("kernel length must be odd, got {k}")));
    }
    Ok(k)
}

#[inline]
fn clamp_index(t: usize, i: usize, half: usize, len: usize) -> usize {
    (t + i).saturating_sub(half).min(len - 1)
}

/// Per-channel "same" correlation with replicate padding:
/// `out[c][t] = Σ_i w[c][i] · x[c][clamp(t + i − h)]`, `h = (k − 1) / 2`.
///
/// `kernels` is `C × k` with one odd-length kernel per channel.
pub fn conv1d_same(x: &ChannelSeries, kernels: ArrayView2<'_, f64>) -> Result<ChannelSeries> {
    let (c, t_len) = x.shape();
    let k = check_kernels(c, &kernels)?;
    let half = k / 2;
    let mut out = Array2::zeros((c, t_len));
    for ch in 0..c {
        let xs = x.channel(ch);
        let w = kernels.row(ch);
        let mut row = out.row_mut(ch);
        for t in 0..t_len {
            let mut acc = 0.0;
            for i in 0..k {
                acc += w[i] * xs[clamp_index(t, i, half, t_len)];
            }
            row[t] = acc;
        }
    }
    Ok(ChannelSeries::from_array_unchecked(out))
}

/// Adjoint of [`conv1d_same`]: returns `(∂L/∂x, ∂L/∂kernels)` given `∂L/∂out`.
///
/// Edge samples collect the gradient of every padded tap that replicated them.
pub fn conv1d_same_adjoint(
    grad_out: &ChannelSeries,
    x: &ChannelSeries,
    kernels: ArrayView2<'_, f64>,
) -> Result<(ChannelSeries, Array2<f64>)> {
    grad_out.check_same_shape(x, "conv1d adjoint")?;
    let (c, t_len) = x.shape();
    let k = check_kernels(c, &kernels)?;
    let half = k / 2;
    let mut grad_x = Array2::zeros((c, t_len));
    let mut grad_w = Array2::zeros((c, k));
    for ch in 0..c {
        let xs = x.channel(ch);
        let g = grad_out.channel(ch);
        let w = kernels.row(ch);
        for t in 0..t_len {
            let gt = g[t];
            if gt == 0.0 {
                continue;
            }
            for i in 0..k {
                let src = clamp_index(t, i, half, t_len);
                grad_x[[ch, src]] += w[i] * gt;
                grad_w[[ch, i]] += xs[src] * gt;
            }
        }
    }
    Ok((ChannelSeries::from_array_unchecked(grad_x), grad_w))
}

/// Length after one 2× decimation step: `⌈T/2⌉`.
pub fn downsampled_len(len: usize) -> usize {
    len.div_ceil(2)
}

/// Averages adjacent sample pairs. An odd trailing sample is paired with
/// itself, so the output length is `⌈T/2⌉`.
pub fn downsample2(x: &ChannelSeries) -> Result<ChannelSeries> {
    let (c, t_len) = x.shape();
    if t_len < 2 {
        return Err(Error::Degenerate(format!(
            "cannot downsample a series of length {t_len}"
        )));
    }
    let out_len = downsampled_len(t_len);
    let mut out = Array2::zeros((c, out_len));
    for ch in 0..c {
        let xs = x.channel(ch);
        for j in 0..out_len {
            let a = xs[2 * j];
            out[[ch, j]] = if 2 * j + 1 < t_len {
                0.5 * (a + xs[2 * j + 1])
            } else {
                a
            };
        }
    }
    Ok(ChannelSeries::from_array_unchecked(out))
}

/// Adjoint of [`downsample2`] for an input of length `input_len`.
pub fn downsample2_adjoint(grad_out: &ChannelSeries, input_len: usize) -> Result<ChannelSeries> {
    let (c, out_len) = grad_out.shape();
    if input_len < 2 || downsampled_len(input_len) != out_len {
        return Err(Error::Shape(format!(
            "gradient of length {out_len} does not come from an input of length {input_len}"
        )));
    }
    let mut gx = Array2::zeros((c, input_len));
    for ch in 0..c {
        let g = grad_out.channel(ch);
        for j in 0..out_len {
            if 2 * j + 1 < input_len {
                gx[[ch, 2 * j]] = 0.5 * g[j];
                gx[[ch, 2 * j + 1]] = 0.5 * g[j];
            } else {
                gx[[ch, 2 * j]] = g[j];
            }
        }
    }
    Ok(ChannelSeries::from_array_unchecked(gx))
}

fn check_upsample_len(source_len: usize, target_len: usize) -> Result<()> {
    if target_len == 0 || downsampled_len(target_len) != source_len {
        return Err(Error::Shape(format!(
            "cannot upsample length {source_len} to {target_len}; expected {} or {}",
            (2 * source_len).saturating_sub(1),
            2 * source_len
        )));
    }
    Ok(())
}

/// Zero-order hold: repeats each sample twice and truncates to `target_len`,
/// which must be `2T − 1` or `2T`.
pub fn upsample2(x: &ChannelSeries, target_len: usize) -> Result<ChannelSeries> {
    let (c, t_len) = x.shape();
    check_upsample_len(t_len, target_len)?;
    let mut out = Array2::zeros((c, target_len));
    for ch in 0..c {
        let xs = x.channel(ch);
        for t in 0..target_len {
            out[[ch, t]] = xs[t / 2];
        }
    }
    Ok(ChannelSeries::from_array_unchecked(out))
}

/// Adjoint of [`upsample2`]: sums the gradients of both copies of each sample.
pub fn upsample2_adjoint(grad_out: &ChannelSeries, source_len: usize) -> Result<ChannelSeries> {
    let (c, target_len) = grad_out.shape();
    check_upsample_len(source_len, target_len)?;
    let mut gx = Array2::zeros((c, source_len));
    for ch in 0..c {
        let g = grad_out.channel(ch);
        for t in 0..target_len {
            gx[[ch, t / 2]] += g[t];
        }
    }
    Ok(ChannelSeries::from_array_unchecked(gx))
}

/// Mean absolute error over all `C·T` entries.
pub fn mae(a: &ChannelSeries, b: &ChannelSeries) -> Result<f64> {
    a.check_same_shape(b, "mae")?;
    let n = (a.channels() * a.len()) as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// Subgradient of [`mae`] with respect to `a`: `sign(a − b) / (C·T)`, `sign(0) = 0`.
pub fn mae_grad(a: &ChannelSeries, b: &ChannelSeries) -> Result<ChannelSeries> {
    a.check_same_shape(b, "mae grad")?;
    let n = (a.channels() * a.len()) as f64;
    let g = ndarray::Zip::from(a.as_array())
        .and(b.as_array())
        .map_collect(|&x, &y| sign(x - y) / n);
    Ok(ChannelSeries::from_array_unchecked(g))
}

#[inline]
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
