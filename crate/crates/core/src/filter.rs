//! The learnable channel-wise pyramid filter.
//!
//! One level of the decomposition takes the current approximation `Y`,
//! decimates it by two, convolves the result with the channel's kernel to
//! obtain the next approximation, and stores the residual
//! `Y − upsample(next)` as that level's detail. After `K` levels the last
//! approximation is kept as the final (coarsest) component, giving `K + 1`
//! components in total. The same `C × k` kernel bank is reused at every level.
//!
//! Because every detail is an exact residual, [`reconstruct`] inverts
//! [`decompose`] for any kernel values.

use log::warn;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{
    conv1d_same, conv1d_same_adjoint, downsample2, downsample2_adjoint, upsample2,
    upsample2_adjoint,
};
use crate::series::ChannelSeries;

pub const DEFAULT_KERNEL_SIZE: usize = 5;
pub const DEFAULT_SCALES: usize = 5;
/// Amplitude of the uniform jitter added by [`init_params`].
pub const INIT_JITTER: f64 = 1e-3;

const MAGIC: &[u8; 4] = b"CPF1";
const HEADER_LEN: usize = 16;

/// Per-channel kernels `θ`, a `C × k` matrix with odd `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterParams {
    kernels: Array2<f64>,
}

impl FilterParams {
    pub fn new(kernels: Array2<f64>) -> Result<Self> {
        let (c, k) = kernels.dim();
        if c == 0 {
            return Err(Error::Config("filter needs at least one channel".into()));
        }
        check_kernel_size(k)?;
        if kernels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite kernel value".into()));
        }
        Ok(Self { kernels })
    }

    /// Every channel gets the normalized binomial row of length `k`.
    pub fn binomial(channels: usize, k: usize) -> Result<Self> {
        check_kernel_size(k)?;
        let row = binomial_row(k);
        Self::new(Array2::from_shape_fn((channels, k), |(_, i)| row[i]))
    }

    /// Centered unit impulse for every channel.
    pub fn identity(channels: usize, k: usize) -> Result<Self> {
        check_kernel_size(k)?;
        Self::new(Array2::from_shape_fn((channels, k), |(_, i)| {
            if i == k / 2 {
                1.0
            } else {
                0.0
            }
        }))
    }

    pub fn zeros(channels: usize, k: usize) -> Result<Self> {
        Self::new(Array2::zeros((channels, k)))
    }

    pub fn channels(&self) -> usize {
        self.kernels.nrows()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.ncols()
    }

    /// Number of learnable values, `C · k`, independent of the scale count.
    pub fn param_count(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernels(&self) -> ArrayView2<'_, f64> {
        self.kernels.view()
    }

    pub fn kernels_mut(&mut self) -> &mut Array2<f64> {
        &mut self.kernels
    }

    /// Checkpoint encoding: `"CPF1"`, `u32 C`, `u32 k`, 4 reserved zero bytes,
    /// then `C·k` little-endian `f64`s in channel-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.channels() as u32).to_le_bytes());
        out.extend_from_slice(&(self.kernel_size() as u32).to_le_bytes());
        out.extend_from_slice(&[0u8; 4]);
        for v in self.kernels.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing CPF1 header".into()));
        }
        let c = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 8 * c * k {
            return Err(Error::Checkpoint(format!(
                "expected {} payload bytes for {c}x{k} kernels, found {}",
                8 * c * k,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let kernels =
            Array2::from_shape_vec((c, k), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::new(kernels)
    }
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel size must be odd, got {k}")));
    }
    Ok(())
}

/// Row `k − 1` of Pascal's triangle divided by `2^(k−1)`.
fn binomial_row(k: usize) -> Vec<f64> {
    let mut row = vec![1.0_f64];
    for _ in 1..k {
        let mut next = vec![1.0; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let total: f64 = row.iter().sum();
    row.into_iter().map(|v| v / total).collect()
}

/// Binomial low-pass kernels plus seeded uniform jitter of amplitude [`INIT_JITTER`].
pub fn init_params(channels: usize, k: usize, seed: u64) -> Result<FilterParams> {
    init_params_with_jitter(channels, k, seed, INIT_JITTER)
}

pub fn init_params_with_jitter(
    channels: usize,
    k: usize,
    seed: u64,
    jitter: f64,
) -> Result<FilterParams> {
    let mut params = FilterParams::binomial(channels, k)?;
    if jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params
            .kernels
            .mapv_inplace(|v| v + rng.random_range(-jitter..jitter));
    }
    Ok(params)
}

/// Largest scale count `K` with `2^K ≤ len`.
pub fn max_scales(len: usize) -> usize {
    if len == 0 {
        0
    } else {
        len.ilog2() as usize
    }
}

/// Clamps `requested` to what a horizon of `len` admits, logging when it does.
pub fn clamp_scales(requested: usize, len: usize) -> usize {
    let max = max_scales(len);
    if requested > max {
        warn!("scale count {requested} too large for length {len}; using {max}");
        max
    } else {
        requested
    }
}

fn check_scales(len: usize, scales: usize) -> Result<()> {
    if scales == 0 {
        return Err(Error::Config("scale count must be at least 1".into()));
    }
    if scales >= usize::BITS as usize || len < (1usize << scales) {
        return Err(Error::Degenerate(format!(
            "{scales} scales need length >= 2^{scales}; length {len} admits at most {}",
            max_scales(len)
        )));
    }
    Ok(())
}

/// Detail components `τ₁…τ_K` and the final approximation `τ_{K+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidDecomposition {
    pub details: Vec<ChannelSeries>,
    pub final_approx: ChannelSeries,
}

impl PyramidDecomposition {
    pub fn scales(&self) -> usize {
        self.details.len()
    }

    /// All `K + 1` components, finest first.
    pub fn components(&self) -> impl Iterator<Item = &ChannelSeries> {
        self.details.iter().chain(std::iter::once(&self.final_approx))
    }

    pub fn zeros_like(&self) -> Self {
        let zero = |s: &ChannelSeries| ChannelSeries::zeros(s.channels(), s.len());
        Self {
            details: self.details.iter().map(zero).collect(),
            final_approx: zero(&self.final_approx),
        }
    }
}

/// Forward intermediates needed by [`decompose_backward`].
#[derive(Debug, Clone)]
pub struct FilterTrace {
    /// `D_j = downsample(Y_{j−1})` for `j = 1…K`.
    decimated: Vec<ChannelSeries>,
    /// `len(Y_{j−1})` for `j = 1…K`.
    level_lens: Vec<usize>,
    channels: usize,
}

impl FilterTrace {
    pub fn scales(&self) -> usize {
        self.decimated.len()
    }
}

/// Decomposes `x` into `K` detail components and a final approximation.
pub fn decompose(x: &ChannelSeries, params: &FilterParams, scales: usize) -> Result<PyramidDecomposition> {
    decompose_traced(x, params, scales).map(|(p, _)| p)
}

/// [`decompose`], also returning the intermediates for the backward pass.
pub fn decompose_traced(
    x: &ChannelSeries,
    params: &FilterParams,
    scales: usize,
) -> Result<(PyramidDecomposition, FilterTrace)> {
    check_scales(x.len(), scales)?;
    if params.channels() != x.channels() {
        return Err(Error::Shape(format!(
            "filter has {} channels, signal has {}",
            params.channels(),
            x.channels()
        )));
    }
    let mut details = Vec::with_capacity(scales);
    let mut decimated = Vec::with_capacity(scales);
    let mut level_lens = Vec::with_capacity(scales);
    let mut approx = x.clone();
    for _ in 0..scales {
        let down = downsample2(&approx)?;
        let next = conv1d_same(&down, params.kernels())?;
        let detail = approx.sub(&upsample2(&next, approx.len())?)?;
        level_lens.push(approx.len());
        details.push(detail);
        decimated.push(down);
        approx = next;
    }
    let trace = FilterTrace {
        decimated,
        level_lens,
        channels: x.channels(),
    };
    Ok((
        PyramidDecomposition {
            details,
            final_approx: approx,
        },
        trace,
    ))
}

/// Inverts [`decompose`]: `Y_{j−1} = τ_j + upsample(Y_j)`, starting from the
/// final approximation.
///
/// Only the up-sampling operator is involved; `params` is accepted to mirror
/// `decompose` and is not read. This is not a denoiser: editing components and
/// reconstructing does not re-apply the learned kernels.
pub fn reconstruct(p: &PyramidDecomposition, _params: &FilterParams) -> Result<ChannelSeries> {
    let mut approx = p.final_approx.clone();
    for detail in p.details.iter().rev() {
        if detail.channels() != approx.channels() {
            return Err(Error::Shape("channel count changes across levels".into()));
        }
        approx = detail.add(&upsample2(&approx, detail.len())?)?;
    }
    Ok(approx)
}

/// Reverse-mode pass through [`decompose`].
///
/// `grad_components` holds `∂L/∂τ_j` for all `K + 1` components in the same
/// order as [`PyramidDecomposition::components`]. Returns `∂L/∂x` and `∂L/∂θ`,
/// the latter summed over every level that reuses the kernels.
pub fn decompose_backward(
    grad_components: &[ChannelSeries],
    params: &FilterParams,
    trace: &FilterTrace,
) -> Result<(ChannelSeries, Array2<f64>)> {
    let scales = trace.scales();
    if scales == 0 {
        return Err(Error::Usage("trace holds no forward intermediates".into()));
    }
    if grad_components.len() != scales + 1 {
        return Err(Error::Usage(format!(
            "trace is for {scales} scales but {} component gradients were given",
            grad_components.len()
        )));
    }
    if trace.channels != params.channels() {
        return Err(Error::Shape("trace and filter disagree on channel count".into()));
    }
    let mut grad_kernels = Array2::zeros(params.kernels.dim());
    // Gradient flowing into the current approximation Y_j.
    let mut grad_approx = grad_components[scales].clone();
    for level in (0..scales).rev() {
        let grad_detail = &grad_components[level];
        let down = &trace.decimated[level];
        let parent_len = trace.level_lens[level];
        if grad_detail.shape() != (trace.channels, parent_len)
            || grad_approx.shape() != down.shape()
        {
            return Err(Error::Shape(format!("gradient shapes do not match level {}", level + 1)));
        }
        // τ_j = Y_{j−1} − up(Y_j)
        grad_approx.axpy(-1.0, &upsample2_adjoint(grad_detail, down.len())?);
        // Y_j = conv(D_j, θ)
        let (grad_down, gk) = conv1d_same_adjoint(&grad_approx, down, params.kernels())?;
        grad_kernels += &gk;
        // D_j = down(Y_{j−1}); Y_{j−1} also feeds τ_j directly.
        let mut grad_parent = downsample2_adjoint(&grad_down, parent_len)?;
        grad_parent.axpy(1.0, grad_detail);
        grad_approx = grad_parent;
    }
    Ok((grad_approx, grad_kernels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, random_series, rel_err};

    fn row(v: &[f64]) -> ChannelSeries {
        ChannelSeries::from_rows(&[v.to_vec()]).unwrap()
    }

    #[test]
    fn binomial_initialization() {
        let p = init_params_with_jitter(3, 5, 0, 0.0).unwrap();
        for c in 0..3 {
            assert_eq!(p.kernels().row(c).to_vec(), vec![0.0625, 0.25, 0.375, 0.25, 0.0625]);
        }
        assert_eq!(FilterParams::binomial(2, 1).unwrap().kernels().row(1).to_vec(), vec![1.0]);
        assert_eq!(FilterParams::binomial(1, 3).unwrap().kernels().row(0).to_vec(), vec![0.25, 0.5, 0.25]);
        assert!(matches!(init_params(2, 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn jitter_is_seeded_and_bounded() {
        let a = init_params(4, 5, 17).unwrap();
        let b = init_params(4, 5, 17).unwrap();
        let c = init_params(4, 5, 18).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let base = FilterParams::binomial(4, 5).unwrap();
        let dev = (&a.kernels - &base.kernels).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(dev > 0.0 && dev < INIT_JITTER);
        assert_eq!(a.param_count(), 20);
    }

    #[test]
    fn zero_input_gives_zero_components() {
        let p = init_params(2, 5, 1).unwrap();
        let d = decompose(&ChannelSeries::zeros(2, 32), &p, 3).unwrap();
        assert!(d.components().all(|c| c.max_abs() == 0.0));
    }

    #[test]
    fn identity_kernel_hand_trace() {
        let p = FilterParams::identity(1, 5).unwrap();
        let d = decompose(&row(&[4.0; 4]), &p, 1).unwrap();
        assert_eq!(d.details, vec![row(&[0.0; 4])]);
        assert_eq!(d.final_approx, row(&[4.0, 4.0]));
    }

    #[test]
    fn component_lengths_follow_ceil_chain() {
        let p = init_params(1, 3, 0).unwrap();
        for t in [8usize, 9, 13, 31, 32, 33, 96, 97] {
            for k in 1..=max_scales(t) {
                let d = decompose(&ChannelSeries::constant(1, t, 1.0), &p, k).unwrap();
                let mut len = t;
                for detail in &d.details {
                    assert_eq!(detail.len(), len);
                    len = len.div_ceil(2);
                }
                assert_eq!(d.final_approx.len(), len);
            }
        }
    }

    #[test]
    fn too_many_scales_names_the_limit() {
        let p = init_params(1, 5, 0).unwrap();
        let err = decompose(&ChannelSeries::zeros(1, 12), &p, 4).unwrap_err();
        assert!(matches!(err, Error::Degenerate(ref m) if m.contains("at most 3")), "{err}");
        assert!(decompose(&ChannelSeries::zeros(1, 16), &p, 4).is_ok());
        assert!(matches!(decompose(&ChannelSeries::zeros(1, 16), &p, 0), Err(Error::Config(_))));
        assert_eq!(clamp_scales(5, 20), 4);
        assert_eq!(clamp_scales(3, 20), 3);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let p = init_params(2, 5, 0).unwrap();
        assert!(matches!(decompose(&ChannelSeries::zeros(3, 16), &p, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn reconstruct_examples() {
        let p = FilterParams::binomial(1, 5).unwrap();
        let zero = PyramidDecomposition {
            details: vec![ChannelSeries::zeros(1, 8), ChannelSeries::zeros(1, 4)],
            final_approx: ChannelSeries::zeros(1, 2),
        };
        assert_eq!(reconstruct(&zero, &p).unwrap().max_abs(), 0.0);
        let flat = PyramidDecomposition {
            details: vec![ChannelSeries::zeros(1, 4)],
            final_approx: row(&[2.5, 2.5]),
        };
        assert_eq!(reconstruct(&flat, &p).unwrap(), row(&[2.5; 4]));
        let broken = PyramidDecomposition {
            details: vec![ChannelSeries::zeros(1, 8)],
            final_approx: ChannelSeries::zeros(1, 2),
        };
        assert!(matches!(reconstruct(&broken, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn perfect_reconstruction_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let c = rng.random_range(1..=4);
            let t = rng.random_range(8..=64);
            let k = [1, 3, 5][rng.random_range(0..3)];
            let scales = rng.random_range(1..=max_scales(t));
            let x = random_series(&mut rng, c, t).scale(10.0);
            let params = FilterParams::new(Array2::from_shape_fn((c, k), |_| rng.random_range(-2.0..2.0))).unwrap();
            let d = decompose(&x, &params, scales).unwrap();
            let err = reconstruct(&d, &params).unwrap().sub(&x).unwrap().max_abs();
            assert!(err < 1e-12, "err {err}");
        }
    }

    #[test]
    fn backward_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_series(&mut rng, 2, 16);
        let p = init_params(2, 3, 0).unwrap();
        let (d, trace) = decompose_traced(&x, &p, 2).unwrap();
        let zeros: Vec<_> = d.zeros_like().components().cloned().collect();
        let (gx, gk) = decompose_backward(&zeros, &p, &trace).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert!(gk.iter().all(|v| *v == 0.0));
        assert!(matches!(decompose_backward(&zeros[..2], &p, &trace), Err(Error::Usage(_))));
    }

    /// `L = Σ_j <τ_j, W_j>` for fixed random weights `W_j`, plus a cubic term
    /// so the functional is not linear.
    fn test_functional(
        x: &ChannelSeries,
        p: &FilterParams,
        scales: usize,
        weights: &[ChannelSeries],
    ) -> f64 {
        let d = decompose(x, p, scales).unwrap();
        d.components()
            .zip(weights)
            .map(|(c, w)| c.iter().zip(w.iter()).map(|(a, b)| a * b + 0.1 * a.powi(3)).sum::<f64>())
            .sum()
    }

    fn check_backward(rng: &mut ChaCha8Rng, c: usize, t: usize, scales: usize, k: usize) {
        let x = random_series(rng, c, t);
        let p = FilterParams::new(Array2::from_shape_fn((c, k), |_| rng.random_range(-1.0..1.0))).unwrap();
        let (d, trace) = decompose_traced(&x, &p, scales).unwrap();
        let weights: Vec<_> = d.components().map(|s| random_series(rng, s.channels(), s.len())).collect();
        let grads: Vec<_> = d
            .components()
            .zip(&weights)
            .map(|(s, w)| {
                ChannelSeries::from_array_unchecked(ndarray::Zip::from(s.as_array())
                    .and(w.as_array())
                    .map_collect(|&a, &b| b + 0.3 * a * a))
            })
            .collect();
        let (gx, gk) = decompose_backward(&grads, &p, &trace).unwrap();
        for ch in 0..c {
            for s in 0..t {
                let fd = central_diff(1e-5, |h| {
                    let mut xp = x.clone();
                    xp.set(ch, s, x.get(ch, s) + h);
                    test_functional(&xp, &p, scales, &weights)
                });
                assert!(rel_err(gx.get(ch, s), fd) < 1e-5, "x[{ch},{s}]: {} vs {fd}", gx.get(ch, s));
            }
            for i in 0..k {
                let fd = central_diff(1e-5, |h| {
                    let mut pp = p.clone();
                    pp.kernels_mut()[[ch, i]] += h;
                    test_functional(&x, &pp, scales, &weights)
                });
                assert!(rel_err(gk[[ch, i]], fd) < 1e-5, "θ[{ch},{i}]: {} vs {fd}", gk[[ch, i]]);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        check_backward(&mut rng, 2, 16, 2, 3);
        check_backward(&mut rng, 1, 13, 3, 5);
        check_backward(&mut rng, 3, 9, 1, 1);
    }

    #[test]
    fn backward_identity_kernel_single_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_series(&mut rng, 1, 8);
        let p = FilterParams::identity(1, 5).unwrap();
        let (_, trace) = decompose_traced(&x, &p, 1).unwrap();
        let g1 = random_series(&mut rng, 1, 8);
        let (gx, _) = decompose_backward(&[g1.clone(), ChannelSeries::zeros(1, 4)], &p, &trace).unwrap();
        let weight = |x: &ChannelSeries| decompose(x, &p, 1).unwrap().details[0].dot(&g1);
        for s in 0..8 {
            let fd = central_diff(1e-5, |h| {
                let mut xp = x.clone();
                xp.set(0, s, x.get(0, s) + h);
                weight(&xp)
            });
            assert!(rel_err(gx.get(0, s), fd) < 1e-6);
        }
    }

    #[test]
    fn channels_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_series(&mut rng, 3, 32);
        let p = init_params(3, 5, 2).unwrap();
        let base = decompose(&x, &p, 3).unwrap();
        let mut bumped = x.clone();
        bumped.set(1, 7, x.get(1, 7) + 1.0);
        let moved = decompose(&bumped, &p, 3).unwrap();
        for (a, b) in base.components().zip(moved.components()) {
            assert_eq!(a.channel(0), b.channel(0));
            assert_eq!(a.channel(2), b.channel(2));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let p = init_params(3, 5, 9).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), 16 + 8 * 15);
        assert_eq!(&bytes[..4], b"CPF1");
        assert_eq!(FilterParams::from_bytes(&bytes).unwrap(), p);
        assert!(FilterParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FilterParams::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }
}
