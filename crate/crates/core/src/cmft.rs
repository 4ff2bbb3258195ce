//! Correlation-matching feature transfer.
//!
//! Given a query map `Fx` and a key map `Fy` that live in the same feature
//! domain, and a payload map `Py` spatially aligned with `Fy`, the transfer
//! rebuilds a payload aligned with `Fx`:
//!
//! ```text
//! logits[i][j] = t * <Fx_i, Fy_j>
//! w[i][j]      = exp(logits[i][j]) / sum_j exp(logits[i][j])
//! out_i        = sum_j w[i][j] * Py_j
//! ```
//!
//! `t` is an optional temperature (default `1.0`, the plain exponential dot
//! product kernel). Spatial positions are flattened row-major:
//! `i = y * width + x`.
//!
//! Three routes compute the same thing:
//!
//! * [`cmft_transfer_naive`] is a plain double loop used as the oracle.
//! * [`cmft_transfer`] materializes the `HW x HW` logits and runs a dense
//!   softmax and matmul through candle, so it is differentiable by autograd.
//! * [`cmft_transfer_tiled`] streams over key tiles with an online softmax
//!   (running max and running normalizer per output row). It never holds more
//!   than `tile * tile` logits at once, and its hand-written backward pass
//!   recomputes the weights tile by tile as well.
//!
//! The weights are never stored; [`weight_row`] recomputes one row on demand.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp3, DType, Device, Layout, Shape, Tensor};

use crate::error::{Error, Result};

/// `H x W x L` activation grid, stored position-major (`[y][x][channel]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Validation(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{channels} feature map needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature value at flat index {pos}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    values.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of spatial positions, `H * W`.
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Feature vector at flattened position `i`.
    pub fn position(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    /// Reorders spatial positions so that position `i` of the result holds
    /// position `perm[i]` of `self`.
    pub fn permute_positions(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.positions() {
            return Err(Error::Dimension(format!(
                "permutation of length {} for {} positions",
                perm.len(),
                self.positions()
            )));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for &src in perm {
            values.extend_from_slice(self.position(src));
        }
        Self::new(self.height, self.width, self.channels, values)
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `(1, H*W, L)` f64 tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.values,
            (1, self.positions(), self.channels),
            device,
        )?)
    }

    /// Inverse of [`FeatureMap::to_tensor`]; accepts `(1, N, L)` or `(N, L)`.
    pub fn from_tensor(t: &Tensor, height: usize, width: usize) -> Result<Self> {
        let t = match t.rank() {
            3 => t.squeeze(0)?,
            2 => t.clone(),
            r => {
                return Err(Error::Dimension(format!(
                    "expected a rank 2 or 3 tensor, got rank {r}"
                )))
            }
        };
        let (n, l) = t.dims2()?;
        if n != height * width {
            return Err(Error::Dimension(format!(
                "{n} positions cannot form a {height}x{width} map"
            )));
        }
        let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Self::new(height, width, l, values)
    }
}

/// `HW x HW` raw similarity scores between two feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationLogits {
    side: usize,
    values: Vec<f64>,
}

impl CorrelationLogits {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.side + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.side..(i + 1) * self.side]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Transfer settings. `temperature` scales the dot products before the
/// exponential; `1.0` is the plain kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cmft {
    pub temperature: f64,
}

impl Default for Cmft {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

fn check_matching(fx: &FeatureMap, fy: &FeatureMap) -> Result<()> {
    if (fx.height, fx.width, fx.channels) != (fy.height, fy.width, fy.channels) {
        return Err(Error::Dimension(format!(
            "matching maps differ: {}x{}x{} vs {}x{}x{}",
            fx.height, fx.width, fx.channels, fy.height, fy.width, fy.channels
        )));
    }
    Ok(())
}

fn check_transfer(fx: &FeatureMap, fy: &FeatureMap, payload: &FeatureMap) -> Result<()> {
    check_matching(fx, fy)?;
    if (payload.height, payload.width) != (fy.height, fy.width) {
        return Err(Error::Dimension(format!(
            "payload is {}x{} but matching maps are {}x{}",
            payload.height, payload.width, fy.height, fy.width
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Cmft {
    pub fn new(temperature: f64) -> Result<Self> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        Ok(Self { temperature })
    }

    /// Raw logits `t * <Fx_i, Fy_j>`.
    pub fn logits(&self, fx: &FeatureMap, fy: &FeatureMap) -> Result<CorrelationLogits> {
        check_matching(fx, fy)?;
        let n = fx.positions();
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            let a = fx.position(i);
            for j in 0..n {
                values.push(self.temperature * dot(a, fy.position(j)));
            }
        }
        Ok(CorrelationLogits { side: n, values })
    }

    /// Softmax weights of output position `i` over all key positions.
    pub fn weight_row(&self, fx: &FeatureMap, fy: &FeatureMap, i: usize) -> Result<Vec<f64>> {
        check_matching(fx, fy)?;
        if i >= fx.positions() {
            return Err(Error::Validation(format!(
                "row {i} out of range for {} positions",
                fx.positions()
            )));
        }
        let a = fx.position(i);
        let mut row: Vec<f64> = (0..fy.positions())
            .map(|j| self.temperature * dot(a, fy.position(j)))
            .collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in &mut row {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in &mut row {
            *v /= sum;
        }
        Ok(row)
    }

    /// Reference implementation: explicit loops over output and key
    /// positions, no batching or tiling. Intended for small maps.
    pub fn transfer_naive(
        &self,
        fx: &FeatureMap,
        fy: &FeatureMap,
        payload: &FeatureMap,
    ) -> Result<FeatureMap> {
        check_transfer(fx, fy, payload)?;
        let n = fx.positions();
        let d = payload.channels;
        let mut out = vec![0.0; n * d];
        let mut logits = vec![0.0; n];
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..fx.channels {
                    s += fx.position(i)[c] * fy.position(j)[c];
                }
                logits[j] = self.temperature * s;
                if logits[j] > max {
                    max = logits[j];
                }
            }
            let mut norm = 0.0;
            for j in 0..n {
                norm += (logits[j] - max).exp();
            }
            for j in 0..n {
                let w = (logits[j] - max).exp() / norm;
                for c in 0..d {
                    out[i * d + c] += w * payload.position(j)[c];
                }
            }
        }
        FeatureMap::new(fx.height, fx.width, d, out)
    }

    /// Dense route through candle tensors.
    pub fn transfer(
        &self,
        fx: &FeatureMap,
        fy: &FeatureMap,
        payload: &FeatureMap,
    ) -> Result<FeatureMap> {
        check_transfer(fx, fy, payload)?;
        let dev = Device::Cpu;
        let out = transfer_dense(
            &fx.to_tensor(&dev)?,
            &fy.to_tensor(&dev)?,
            &payload.to_tensor(&dev)?,
            self.temperature,
        )?;
        FeatureMap::from_tensor(&out, fx.height, fx.width)
    }

    /// Streaming route with `tile x tile` logit blocks.
    pub fn transfer_tiled(
        &self,
        fx: &FeatureMap,
        fy: &FeatureMap,
        payload: &FeatureMap,
        tile: usize,
    ) -> Result<(FeatureMap, TileStats)> {
        check_transfer(fx, fy, payload)?;
        let dev = Device::Cpu;
        let stats = TileStats::default();
        let out = transfer_streaming(
            &fx.to_tensor(&dev)?,
            &fy.to_tensor(&dev)?,
            &payload.to_tensor(&dev)?,
            self.temperature,
            tile,
            Some(&stats),
        )?;
        Ok((FeatureMap::from_tensor(&out, fx.height, fx.width)?, stats))
    }
}

/// Pairwise dot products between the positions of `fx` and `fy`.
pub fn correlation_logits(fx: &FeatureMap, fy: &FeatureMap) -> Result<CorrelationLogits> {
    Cmft::default().logits(fx, fy)
}

pub fn cmft_transfer(fx: &FeatureMap, fy: &FeatureMap, payload: &FeatureMap) -> Result<FeatureMap> {
    Cmft::default().transfer(fx, fy, payload)
}

pub fn cmft_transfer_naive(
    fx: &FeatureMap,
    fy: &FeatureMap,
    payload: &FeatureMap,
) -> Result<FeatureMap> {
    Cmft::default().transfer_naive(fx, fy, payload)
}

pub fn cmft_transfer_tiled(
    fx: &FeatureMap,
    fy: &FeatureMap,
    payload: &FeatureMap,
    tile: usize,
) -> Result<FeatureMap> {
    Ok(Cmft::default().transfer_tiled(fx, fy, payload, tile)?.0)
}

pub fn weight_row(fx: &FeatureMap, fy: &FeatureMap, i: usize) -> Result<Vec<f64>> {
    Cmft::default().weight_row(fx, fy, i)
}

/// Scratch-memory instrumentation for the streaming kernel. Shared across
/// clones, so one handle can observe many calls.
#[derive(Debug, Clone, Default)]
pub struct TileStats {
    peak_logits: Arc<AtomicUsize>,
    calls: Arc<AtomicUsize>,
}

impl TileStats {
    /// Largest number of logits held at once by any observed call, forward
    /// or backward.
    pub fn peak_logit_entries(&self) -> usize {
        self.peak_logits.load(Ordering::Relaxed)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn record(&self, entries: usize) {
        self.peak_logits.fetch_max(entries, Ordering::Relaxed);
    }
}

fn check_batched(query: &Tensor, key: &Tensor, value: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, n, l) = query.dims3()?;
    let (bk, nk, lk) = key.dims3()?;
    let (bv, nv, d) = value.dims3()?;
    if (b, n, l) != (bk, nk, lk) {
        return Err(Error::Dimension(format!(
            "query {:?} and key {:?} must share shape",
            query.dims(),
            key.dims()
        )));
    }
    if (bv, nv) != (b, n) {
        return Err(Error::Dimension(format!(
            "value {:?} does not match key positions {:?}",
            value.dims(),
            key.dims()
        )));
    }
    Ok((b, n, l, d))
}

/// Batched dense transfer on `(B, N, L)` query/key and `(B, N, D)` value
/// tensors. Materializes `B x N x N` logits; gradients come from autograd.
pub fn transfer_dense(query: &Tensor, key: &Tensor, value: &Tensor, temperature: f64) -> Result<Tensor> {
    check_batched(query, key, value)?;
    let logits = query.matmul(&key.t()?)?;
    let logits = if temperature == 1.0 {
        logits
    } else {
        (logits * temperature)?
    };
    let weights = candle_nn::ops::softmax(&logits, 2)?;
    Ok(weights.matmul(value)?)
}

/// Batched streaming transfer. Same contract as [`transfer_dense`]; holds at
/// most `tile * tile` logits at a time in both the forward and backward pass.
pub fn transfer_streaming(
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    temperature: f64,
    tile: usize,
    stats: Option<&TileStats>,
) -> Result<Tensor> {
    check_batched(query, key, value)?;
    if tile == 0 {
        return Err(Error::Validation("tile must be at least 1".into()));
    }
    let op = StreamingCmft {
        temperature,
        tile,
        stats: stats.cloned().unwrap_or_default(),
    };
    Ok(query
        .contiguous()?
        .apply_op3(&key.contiguous()?, &value.contiguous()?, op)?)
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    n: usize,
    l: usize,
    d: usize,
}

struct StreamingCmft {
    temperature: f64,
    tile: usize,
    stats: TileStats,
}

fn storage_to_f64(s: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("streaming cmft needs contiguous inputs".into()))?;
    match s {
        CpuStorage::F64(v) => Ok(v[start..end].to_vec()),
        CpuStorage::F32(v) => Ok(v[start..end].iter().map(|&x| x as f64).collect()),
        other => Err(candle_core::Error::Msg(format!(
            "streaming cmft does not support {:?}",
            other.dtype()
        ))),
    }
}

fn tensor_to_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

impl CustomOp3 for StreamingCmft {
    fn name(&self) -> &'static str {
        "streaming-cmft"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, n, l) = l1.shape().dims3()?;
        let (_, _, d) = l3.shape().dims3()?;
        let dims = Dims { batch, n, l, d };
        let q = storage_to_f64(s1, l1)?;
        let k = storage_to_f64(s2, l2)?;
        let v = storage_to_f64(s3, l3)?;
        self.stats.calls.fetch_add(1, Ordering::Relaxed);
        let out = streaming_forward(&q, &k, &v, dims, self.temperature, self.tile, &self.stats);
        let storage = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(out.iter().map(|&x| x as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, Shape::from((batch, n, d))))
    }

    fn bwd(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (batch, n, l) = query.dims3()?;
        let (_, _, d) = value.dims3()?;
        let dims = Dims { batch, n, l, d };
        let grads = streaming_backward(
            &tensor_to_f64(query)?,
            &tensor_to_f64(key)?,
            &tensor_to_f64(value)?,
            &tensor_to_f64(res)?,
            &tensor_to_f64(grad_res)?,
            dims,
            self.temperature,
            self.tile,
            &self.stats,
        );
        let dtype = query.dtype();
        let dev = query.device();
        let dq = Tensor::from_vec(grads.query, (batch, n, l), dev)?.to_dtype(dtype)?;
        let dk = Tensor::from_vec(grads.key, (batch, n, l), dev)?.to_dtype(dtype)?;
        let dv = Tensor::from_vec(grads.value, (batch, n, d), dev)?.to_dtype(dtype)?;
        Ok((Some(dq), Some(dk), Some(dv)))
    }
}

/// Fills `scores[r * cols + c]` with `t * <q_{r0+r}, k_{c0+c}>`.
#[allow(clippy::too_many_arguments)]
fn score_block(
    q: &[f64],
    k: &[f64],
    l: usize,
    r0: usize,
    rows: usize,
    c0: usize,
    cols: usize,
    t: f64,
    scores: &mut [f64],
) {
    for r in 0..rows {
        let qi = &q[(r0 + r) * l..(r0 + r + 1) * l];
        for c in 0..cols {
            let kj = &k[(c0 + c) * l..(c0 + c + 1) * l];
            scores[r * cols + c] = t * dot(qi, kj);
        }
    }
}

fn streaming_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: Dims,
    t: f64,
    tile: usize,
    stats: &TileStats,
) -> Vec<f64> {
    let Dims { batch, n, l, d } = dims;
    let tile = tile.min(n);
    let mut out = vec![0.0; batch * n * d];
    let mut scores = vec![0.0; tile * tile];
    stats.record(scores.len());
    let mut run_max = vec![0.0; tile];
    let mut run_sum = vec![0.0; tile];
    let mut acc = vec![0.0; tile * d];

    for b in 0..batch {
        let qb = &q[b * n * l..(b + 1) * n * l];
        let kb = &k[b * n * l..(b + 1) * n * l];
        let vb = &v[b * n * d..(b + 1) * n * d];
        for r0 in (0..n).step_by(tile) {
            let rows = tile.min(n - r0);
            run_max[..rows].fill(f64::NEG_INFINITY);
            run_sum[..rows].fill(0.0);
            acc[..rows * d].fill(0.0);
            for c0 in (0..n).step_by(tile) {
                let cols = tile.min(n - c0);
                score_block(qb, kb, l, r0, rows, c0, cols, t, &mut scores);
                for r in 0..rows {
                    let srow = &scores[r * cols..(r + 1) * cols];
                    let block_max = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let new_max = run_max[r].max(block_max);
                    let rescale = (run_max[r] - new_max).exp();
                    let arow = &mut acc[r * d..(r + 1) * d];
                    if rescale != 1.0 {
                        run_sum[r] *= rescale;
                        arow.iter_mut().for_each(|a| *a *= rescale);
                    }
                    for (c, &s) in srow.iter().enumerate() {
                        let p = (s - new_max).exp();
                        run_sum[r] += p;
                        let vj = &vb[(c0 + c) * d..(c0 + c + 1) * d];
                        for (a, &x) in arow.iter_mut().zip(vj) {
                            *a += p * x;
                        }
                    }
                    run_max[r] = new_max;
                }
            }
            for r in 0..rows {
                let dst = &mut out[(b * n + r0 + r) * d..(b * n + r0 + r + 1) * d];
                for (o, &a) in dst.iter_mut().zip(&acc[r * d..(r + 1) * d]) {
                    *o = a / run_sum[r];
                }
            }
        }
    }
    out
}

struct StreamingGrads {
    query: Vec<f64>,
    key: Vec<f64>,
    value: Vec<f64>,
}

/// Recomputes the weights tile by tile. With `P = softmax(S)`, `O = P V`:
/// `dV = P^T dO`, `dS = P * (dO V^T - rowsum(dO * O))`, `dQ = t dS K`,
/// `dK = t dS^T Q`.
#[allow(clippy::too_many_arguments)]
fn streaming_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    o: &[f64],
    grad_o: &[f64],
    dims: Dims,
    t: f64,
    tile: usize,
    stats: &TileStats,
) -> StreamingGrads {
    let Dims { batch, n, l, d } = dims;
    let tile = tile.min(n);
    let mut dq = vec![0.0; batch * n * l];
    let mut dk = vec![0.0; batch * n * l];
    let mut dv = vec![0.0; batch * n * d];
    let mut scores = vec![0.0; tile * tile];
    stats.record(scores.len());
    let mut lse = vec![0.0; n];
    let mut delta = vec![0.0; n];

    for b in 0..batch {
        let qb = &q[b * n * l..(b + 1) * n * l];
        let kb = &k[b * n * l..(b + 1) * n * l];
        let vb = &v[b * n * d..(b + 1) * n * d];
        let ob = &o[b * n * d..(b + 1) * n * d];
        let gb = &grad_o[b * n * d..(b + 1) * n * d];

        // Row log-normalizers, streamed the same way as the forward pass.
        for r0 in (0..n).step_by(tile) {
            let rows = tile.min(n - r0);
            let mut m = vec![f64::NEG_INFINITY; rows];
            let mut s = vec![0.0; rows];
            for c0 in (0..n).step_by(tile) {
                let cols = tile.min(n - c0);
                score_block(qb, kb, l, r0, rows, c0, cols, t, &mut scores);
                for r in 0..rows {
                    let srow = &scores[r * cols..(r + 1) * cols];
                    let block_max = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let new_max = m[r].max(block_max);
                    s[r] *= (m[r] - new_max).exp();
                    s[r] += srow.iter().map(|&x| (x - new_max).exp()).sum::<f64>();
                    m[r] = new_max;
                }
            }
            for r in 0..rows {
                lse[r0 + r] = m[r] + s[r].ln();
            }
        }
        for i in 0..n {
            delta[i] = dot(&gb[i * d..(i + 1) * d], &ob[i * d..(i + 1) * d]);
        }

        let dqb = &mut dq[b * n * l..(b + 1) * n * l];
        let dkb = &mut dk[b * n * l..(b + 1) * n * l];
        let dvb = &mut dv[b * n * d..(b + 1) * n * d];
        for r0 in (0..n).step_by(tile) {
            let rows = tile.min(n - r0);
            for c0 in (0..n).step_by(tile) {
                let cols = tile.min(n - c0);
                score_block(qb, kb, l, r0, rows, c0, cols, t, &mut scores);
                for r in 0..rows {
                    let i = r0 + r;
                    let gi = &gb[i * d..(i + 1) * d];
                    for c in 0..cols {
                        let j = c0 + c;
                        let p = (scores[r * cols + c] - lse[i]).exp();
                        let vj = &vb[j * d..(j + 1) * d];
                        for (acc, &g) in dvb[j * d..(j + 1) * d].iter_mut().zip(gi) {
                            *acc += p * g;
                        }
                        let ds = t * p * (dot(gi, vj) - delta[i]);
                        for ch in 0..l {
                            dqb[i * l + ch] += ds * kb[j * l + ch];
                            dkb[j * l + ch] += ds * qb[i * l + ch];
                        }
                    }
                }
            }
        }
    }
    StreamingGrads {
        query: dq,
        key: dk,
        value: dv,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, l: usize, v: &[f64]) -> FeatureMap {
        FeatureMap::new(h, w, l, v.to_vec()).unwrap()
    }

    #[test]
    fn single_position_logit() {
        let f = map(1, 1, 1, &[2.0]);
        let c = correlation_logits(&f, &f).unwrap();
        assert_eq!(c.values(), &[4.0]);
    }

    #[test]
    fn zero_query_gives_zero_logits() {
        let fx = map(2, 2, 3, &[0.0; 12]);
        let fy = FeatureMap::from_fn(2, 2, 3, |y, x, c| (y + 2 * x + 3 * c) as f64).unwrap();
        let c = correlation_logits(&fx, &fy).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pairwise_logits() {
        let f = map(1, 2, 1, &[1.0, 0.0]);
        let c = correlation_logits(&f, &f).unwrap();
        assert_eq!(c.values(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = map(1, 2, 1, &[1.0, 0.0]);
        let b = map(2, 1, 1, &[1.0, 0.0]);
        assert!(matches!(correlation_logits(&a, &b), Err(Error::Dimension(_))));
        let p = map(1, 1, 1, &[1.0]);
        assert!(matches!(cmft_transfer(&a, &a, &p), Err(Error::Dimension(_))));
        assert!(matches!(cmft_transfer_naive(&a, &a, &p), Err(Error::Dimension(_))));
        assert!(matches!(cmft_transfer_tiled(&a, &a, &p, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_input_rejected() {
        let err = FeatureMap::new(1, 1, 1, vec![f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(FeatureMap::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn weight_row_out_of_range() {
        let f = map(1, 2, 1, &[1.0, 0.0]);
        assert!(weight_row(&f, &f, 2).is_err());
    }

    #[test]
    fn zero_tile_rejected() {
        let f = map(1, 2, 1, &[1.0, 0.0]);
        assert!(matches!(cmft_transfer_tiled(&f, &f, &f, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn large_logits_stay_finite() {
        // dot products of magnitude 100 would overflow a naive exp in f32
        let fx = FeatureMap::from_fn(2, 2, 1, |y, x, _| if (y + x) % 2 == 0 { 10.0 } else { -10.0 }).unwrap();
        let payload = FeatureMap::from_fn(2, 2, 2, |y, x, c| (y * 4 + x * 2 + c) as f64).unwrap();
        for out in [
            cmft_transfer(&fx, &fx, &payload).unwrap(),
            cmft_transfer_naive(&fx, &fx, &payload).unwrap(),
            cmft_transfer_tiled(&fx, &fx, &payload, 3).unwrap(),
        ] {
            assert!(out.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn f32_streaming_matches_dense() {
        let dev = Device::Cpu;
        let q = Tensor::arange(0f32, 24., &dev).unwrap().reshape((2, 6, 2)).unwrap();
        let q = ((q * 0.05).unwrap().sin()).unwrap();
        let k = (q.clone() * 0.7).unwrap().cos().unwrap();
        let v = Tensor::arange(0f32, 36., &dev).unwrap().reshape((2, 6, 3)).unwrap();
        let a = transfer_dense(&q, &k, &v, 1.0).unwrap();
        let b = transfer_streaming(&q, &k, &v, 1.0, 4, None).unwrap();
        assert_eq!(b.dtype(), DType::F32);
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Cmft::new(0.0).is_err());
        assert!(Cmft::new(f64::INFINITY).is_err());
        assert!(Cmft::new(2.0).is_ok());
    }
}
