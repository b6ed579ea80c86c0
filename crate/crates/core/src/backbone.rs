//! DLinear-style forecaster: a per-channel affine map from the lookback
//! window to the horizon, optionally split into a moving-average trend
//! branch and a remainder branch.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{conv1d_same, conv1d_same_adjoint};
use crate::series::ChannelSeries;

pub const DEFAULT_MA_WINDOW: usize = 25;

const MAGIC: &[u8; 4] = b"CPM1";
const FLAG_DECOMPOSE: u8 = 1;
const FLAG_SHARED: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// One map shared by all channels instead of one per channel.
    pub shared_weights: bool,
    /// Enable the moving-average trend / remainder split.
    pub decomposition: bool,
    /// Odd moving-average window.
    pub ma_window: usize,
}

impl BackboneConfig {
    pub fn new(channels: usize, lookback: usize, horizon: usize) -> Self {
        Self {
            channels,
            lookback,
            horizon,
            shared_weights: false,
            decomposition: true,
            ma_window: DEFAULT_MA_WINDOW,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.lookback == 0 || self.horizon == 0 {
            return Err(Error::Config(format!(
                "backbone dimensions must be positive (C={}, M={}, N={})",
                self.channels, self.lookback, self.horizon
            )));
        }
        if self.decomposition && self.ma_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "moving-average window must be odd, got {}",
                self.ma_window
            )));
        }
        Ok(())
    }

    fn weight_channels(&self) -> usize {
        if self.shared_weights {
            1
        } else {
            self.channels
        }
    }

    fn branches(&self) -> usize {
        if self.decomposition {
            2
        } else {
            1
        }
    }
}

/// One affine map per weight channel: `out = W · x + b`, `W` is `N × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBranch {
    /// `(C_w, N, M)`
    pub weight: Array3<f64>,
    /// `(C_w, N)`
    pub bias: Array2<f64>,
}

impl LinearBranch {
    fn zeros(cw: usize, horizon: usize, lookback: usize) -> Self {
        Self {
            weight: Array3::zeros((cw, horizon, lookback)),
            bias: Array2::zeros((cw, horizon)),
        }
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Gradients with the same layout as [`ForecastModel::branches`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrads {
    pub branches: Vec<LinearBranch>,
}

impl BackboneGrads {
    pub fn sq_norm(&self) -> f64 {
        self.branches
            .iter()
            .flat_map(|b| b.weight.iter().chain(b.bias.iter()))
            .map(|v| v * v)
            .sum()
    }

    pub fn scale(&mut self, alpha: f64) {
        for b in &mut self.branches {
            b.weight *= alpha;
            b.bias *= alpha;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    config: BackboneConfig,
    /// `[trend, remainder]` with decomposition, otherwise a single branch.
    pub branches: Vec<LinearBranch>,
}

/// A batch of inputs laid out as `(B, C, L)`.
pub type Batch = Array3<f64>;

impl ForecastModel {
    /// Weights start at `1/M` (a moving-average forecast) and biases are drawn
    /// uniformly from `±1/√M`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.lookback as f64).sqrt();
        let cw = config.weight_channels();
        let branches = (0..config.branches())
            .map(|_| LinearBranch {
                weight: Array3::from_elem(
                    (cw, config.horizon, config.lookback),
                    1.0 / config.lookback as f64,
                ),
                bias: Array2::from_shape_fn((cw, config.horizon), |_| {
                    rng.random_range(-bound..bound)
                }),
            })
            .collect();
        Ok(Self { config, branches })
    }

    /// All weights and biases zero.
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let cw = config.weight_channels();
        let branches = (0..config.branches())
            .map(|_| LinearBranch::zeros(cw, config.horizon, config.lookback))
            .collect();
        Ok(Self { config, branches })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(|b| b.weight.len() + b.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.branches.iter().all(LinearBranch::is_finite)
    }

    pub fn sq_norm(&self) -> f64 {
        self.branches
            .iter()
            .flat_map(|b| b.weight.iter().chain(b.bias.iter()))
            .map(|v| v * v)
            .sum()
    }

    fn ma_kernels(&self) -> Array2<f64> {
        let w = self.config.ma_window;
        Array2::from_elem((self.config.channels, w), 1.0 / w as f64)
    }

    fn check_input(&self, x: &Batch) -> Result<()> {
        let (_, c, m) = x.dim();
        if c != self.config.channels || m != self.config.lookback {
            return Err(Error::Shape(format!(
                "model expects {}x{} inputs, got {c}x{m}",
                self.config.channels, self.config.lookback
            )));
        }
        Ok(())
    }

    /// Splits a batch into `(trend, remainder)`, or `(x, ·)` without decomposition.
    fn branch_inputs(&self, x: &Batch) -> Result<Vec<Batch>> {
        if !self.config.decomposition {
            return Ok(vec![x.clone()]);
        }
        let kernels = self.ma_kernels();
        let mut trend = Array3::zeros(x.dim());
        for (b, sample) in x.axis_iter(Axis(0)).enumerate() {
            let series = ChannelSeries::from_array_unchecked(sample.to_owned());
            let smoothed = conv1d_same(&series, kernels.view())?;
            trend.index_axis_mut(Axis(0), b).assign(smoothed.as_array());
        }
        let remainder = x - &trend;
        Ok(vec![trend, remainder])
    }

    fn weight_index(&self, channel: usize) -> usize {
        if self.config.shared_weights {
            0
        } else {
            channel
        }
    }

    /// Batched forward pass: `(B, C, M) → (B, C, N)`.
    pub fn forward_batch(&self, x: &Batch) -> Result<Batch> {
        self.check_input(x)?;
        let (batch, c, _) = x.dim();
        let inputs = self.branch_inputs(x)?;
        let mut out = Array3::zeros((batch, c, self.config.horizon));
        for (branch, input) in self.branches.iter().zip(&inputs) {
            for ch in 0..c {
                let wi = self.weight_index(ch);
                let xin: ArrayView2<f64> = input.slice(s![.., ch, ..]);
                let w = branch.weight.index_axis(Axis(0), wi);
                let mut dst = out.slice_mut(s![.., ch, ..]);
                ndarray::linalg::general_mat_mul(1.0, &xin, &w.t(), 1.0, &mut dst);
                dst += &branch.bias.row(wi);
            }
        }
        Ok(out)
    }

    /// Batched backward pass. Returns parameter gradients (summed over the
    /// batch) and `∂L/∂x` when `want_input_grad` is set.
    pub fn backward_batch(
        &self,
        x: &Batch,
        grad_out: &Batch,
        want_input_grad: bool,
    ) -> Result<(BackboneGrads, Option<Batch>)> {
        self.check_input(x)?;
        let (batch, c, _) = x.dim();
        if grad_out.dim() != (batch, c, self.config.horizon) {
            return Err(Error::Shape(format!(
                "output gradient is {:?}, expected ({batch}, {c}, {})",
                grad_out.dim(),
                self.config.horizon
            )));
        }
        let inputs = self.branch_inputs(x)?;
        let cw = self.config.weight_channels();
        let mut grads = BackboneGrads {
            branches: (0..self.branches.len())
                .map(|_| LinearBranch::zeros(cw, self.config.horizon, self.config.lookback))
                .collect(),
        };
        let mut input_grads: Vec<Batch> = Vec::new();
        for ((branch, input), grad) in self.branches.iter().zip(&inputs).zip(&mut grads.branches) {
            let mut grad_in = Array3::zeros(x.dim());
            for ch in 0..c {
                let wi = self.weight_index(ch);
                let g = grad_out.slice(s![.., ch, ..]);
                let xin = input.slice(s![.., ch, ..]);
                let mut gw = grad.weight.index_axis_mut(Axis(0), wi);
                ndarray::linalg::general_mat_mul(1.0, &g.t(), &xin, 1.0, &mut gw);
                let mut gb = grad.bias.row_mut(wi);
                gb += &g.sum_axis(Axis(0));
                if want_input_grad {
                    let w = branch.weight.index_axis(Axis(0), wi);
                    let mut dst = grad_in.slice_mut(s![.., ch, ..]);
                    ndarray::linalg::general_mat_mul(1.0, &g, &w, 0.0, &mut dst);
                }
            }
            input_grads.push(grad_in);
        }
        if !want_input_grad {
            return Ok((grads, None));
        }
        let grad_x = if self.config.decomposition {
            // trend = A x, remainder = x − A x  ⇒  ∂x = ∂rem + Aᵀ(∂trend − ∂rem)
            let kernels = self.ma_kernels();
            let diff = &input_grads[0] - &input_grads[1];
            let mut gx = input_grads[1].clone();
            for b in 0..batch {
                let d = ChannelSeries::from_array_unchecked(diff.index_axis(Axis(0), b).to_owned());
                let xs = ChannelSeries::from_array_unchecked(x.index_axis(Axis(0), b).to_owned());
                let (back, _) = conv1d_same_adjoint(&d, &xs, kernels.view())?;
                let mut dst = gx.index_axis_mut(Axis(0), b);
                dst += back.as_array();
            }
            gx
        } else {
            input_grads.swap_remove(0)
        };
        Ok((grads, Some(grad_x)))
    }

    pub fn forward(&self, x: &ChannelSeries) -> Result<ChannelSeries> {
        let batch = x.as_array().clone().insert_axis(Axis(0));
        let out = self.forward_batch(&batch)?;
        Ok(ChannelSeries::from_array_unchecked(out.index_axis_move(Axis(0), 0)))
    }

    /// Single-sample backward pass: parameter gradients and `∂L/∂x`.
    pub fn backward(
        &self,
        x: &ChannelSeries,
        grad_out: &ChannelSeries,
    ) -> Result<(BackboneGrads, ChannelSeries)> {
        let xb = x.as_array().clone().insert_axis(Axis(0));
        let gb = grad_out.as_array().clone().insert_axis(Axis(0));
        let (grads, gx) = self.backward_batch(&xb, &gb, true)?;
        let gx = gx.expect("input gradient requested");
        Ok((grads, ChannelSeries::from_array_unchecked(gx.index_axis_move(Axis(0), 0))))
    }

    /// Checkpoint encoding: `"CPM1"`, `u32 C`, `u32 M`, `u32 N`, `u8 flags`
    /// (bit 0 decomposition, bit 1 shared weights), `u32` moving-average
    /// window, then every branch's weights followed by its biases as
    /// little-endian `f64`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let mut out = Vec::with_capacity(21 + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        for v in [cfg.channels, cfg.lookback, cfg.horizon] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let mut flags = 0u8;
        if cfg.decomposition {
            flags |= FLAG_DECOMPOSE;
        }
        if cfg.shared_weights {
            flags |= FLAG_SHARED;
        }
        out.push(flags);
        out.extend_from_slice(&(cfg.ma_window as u32).to_le_bytes());
        for b in &self.branches {
            for v in b.weight.iter().chain(b.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 21;
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing CPM1 header".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let flags = bytes[16];
        let config = BackboneConfig {
            channels: word(4),
            lookback: word(8),
            horizon: word(12),
            decomposition: flags & FLAG_DECOMPOSE != 0,
            shared_weights: flags & FLAG_SHARED != 0,
            ma_window: word(17),
        };
        let mut model = Self::zeros(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let expected = 8 * model.param_count();
        let body = &bytes[HEADER..];
        if body.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} payload bytes, found {}",
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        for b in &mut model.branches {
            for v in b.weight.iter_mut().chain(b.bias.iter_mut()) {
                *v = values.next().expect("length checked");
            }
        }
        if !model.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(model)
    }
}
