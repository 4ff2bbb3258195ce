//! Parameter storage and the small set of layers the generator is built from.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, WithDType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the model seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

/// He-uniform weights for a `k x k` conv with `fan_in` inputs per output,
/// drawn from a stream keyed by `(seed, name)`.
pub(crate) fn init_conv_weight(
    seed: u64,
    name: &str,
    shape: (usize, usize, usize, usize),
) -> Vec<f32> {
    let (c_out, c_in, kh, kw) = shape;
    let fan_in = (c_in * kh * kw) as f64;
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let bound = (3.0f64).sqrt() * gain / fan_in.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    (0..c_out * c_in * kh * kw)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect()
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `values`, which must cover exactly the
    /// same names and shapes.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn k3() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn k1() -> Self {
        Self {
            kernel: 1,
            ..Self::k3()
        }
    }

    pub fn stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    pub fn dilation(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }

    pub fn groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    /// Padding that keeps `H / stride` output size for odd kernels.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    spec: ConvSpec,
}

impl Conv {
    /// Registers a trainable conv under `name.weight` / `name.bias`.
    pub fn trainable(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        device: &Device,
    ) -> Result<Self> {
        let (weight, bias) = Self::init_tensors(seed, name, c_in, c_out, spec, device)?;
        let weight = store.insert(&format!("{name}.weight"), weight)?;
        let bias = store.insert(&format!("{name}.bias"), bias)?;
        Ok(Self { weight, bias, spec })
    }

    /// Conv whose tensors are plain constants (never updated).
    pub fn frozen(
        seed: u64,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        device: &Device,
    ) -> Result<Self> {
        let (weight, bias) = Self::init_tensors(seed, name, c_in, c_out, spec, device)?;
        Ok(Self { weight, bias, spec })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, spec: ConvSpec) -> Self {
        Self { weight, bias, spec }
    }

    fn init_tensors(
        seed: u64,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        device: &Device,
    ) -> Result<(Tensor, Tensor)> {
        if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::Config(format!(
                "{name}: {c_in} -> {c_out} channels not divisible into {} groups",
                spec.groups
            )));
        }
        let shape = (c_out, c_in / spec.groups, spec.kernel, spec.kernel);
        let w = init_conv_weight(seed, name, shape);
        let weight = Tensor::from_vec(w, shape, device)?;
        let bias = Tensor::zeros(c_out, DType::F32, device)?;
        Ok((weight, bias))
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.to_dtype(x.dtype())?;
        let b = self.bias.to_dtype(x.dtype())?;
        let y = conv2d(x, &w, self.spec)?;
        Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
    }
}

/// Convolution geometry of one call.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> candle_core::Result<Self> {
        let bad = |m: String| candle_core::Error::Msg(m);
        let (&[batch, c_in, h, wd], &[c_out, cig, kh, kw]) = (x, w) else {
            return Err(bad(format!("conv2d expects 4-d operands, got {x:?} and {w:?}")));
        };
        if kh != kw || kh != spec.kernel || cig * spec.groups != c_in || c_out % spec.groups != 0 {
            return Err(bad(format!("conv2d: input {x:?} does not fit kernel {w:?} with {spec:?}")));
        }
        let pad = spec.padding();
        let span = spec.dilation * (kh - 1) + 1;
        if h + 2 * pad < span || wd + 2 * pad < span {
            return Err(bad(format!("conv2d: input {x:?} smaller than the kernel span {span}")));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k: kh,
            stride: spec.stride,
            pad,
            dilation: spec.dilation,
            groups: spec.groups,
            ho: (h + 2 * pad - span) / spec.stride + 1,
            wo: (wd + 2 * pad - span) / spec.stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `t`.
    fn source(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        (o * self.stride + t * self.dilation).checked_sub(self.pad).filter(|&i| i < limit)
    }
}

/// `(B, C, H, W)` to `(B, C*k*k, Ho*Wo)` patch matrix.
fn im2col<T: WithDType>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut col = vec![T::from_f64(0.0); g.batch * rows * cols];
    for b in 0..g.batch {
        for c in 0..g.c_in {
            let plane = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    let dst = &mut col[(b * rows + row) * cols..][..cols];
                    for oy in 0..g.ho {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        for ox in 0..g.wo {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                dst[oy * g.wo + ox] = plane[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch-matrix entries back onto the image.
fn col2im<T: WithDType>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut x = vec![T::from_f64(0.0); g.batch * g.c_in * g.h * g.w];
    for b in 0..g.batch {
        for c in 0..g.c_in {
            let plane = &mut x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    let src = &col[(b * rows + row) * cols..][..cols];
                    for oy in 0..g.ho {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        for ox in 0..g.wo {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                plane[iy * g.w + ix] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Grouped, strided, dilated convolution with "same"-style padding, written
/// as patch matrices times weights so both gradients are matrix products.
struct Conv2dOp {
    spec: ConvSpec,
}

impl Conv2dOp {
    fn forward_typed<T: WithDType>(&self, x: &[T], w: &[T], g: &ConvGeom) -> candle_core::Result<Vec<T>> {
        let dev = Device::Cpu;
        let (gr, kg) = (g.groups, g.rows() / g.groups);
        let col = Tensor::from_vec(im2col(x, g), (g.batch, gr, kg, g.cols()), &dev)?;
        let w = Tensor::from_slice(w, (gr, g.c_out / gr, kg), &dev)?;
        w.broadcast_matmul(&col)?.flatten_all()?.to_vec1::<T>()
    }

    fn backward_typed<T: WithDType>(
        &self,
        x: &Tensor,
        w: &Tensor,
        grad: &Tensor,
        g: &ConvGeom,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let dev = Device::Cpu;
        let (gr, kg, cog) = (g.groups, g.rows() / g.groups, g.c_out / g.groups);
        let xs = x.flatten_all()?.to_vec1::<T>()?;
        let col = Tensor::from_vec(im2col(&xs, g), (g.batch, gr, kg, g.cols()), &dev)?;
        let gy = grad.detach().contiguous()?.reshape((g.batch, gr, cog, g.cols()))?;
        let grad_w = gy
            .matmul(&col.t()?.contiguous()?)?
            .sum(0)?
            .reshape(w.shape())?;
        let wt = w.detach().reshape((gr, cog, kg))?.t()?.contiguous()?;
        let grad_col = wt.broadcast_matmul(&gy)?.flatten_all()?.to_vec1::<T>()?;
        let grad_x = Tensor::from_vec(col2im(&grad_col, g), x.shape(), &dev)?;
        Ok((grad_x, grad_w))
    }
}

fn contiguous_slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv2d needs contiguous operands".into()))?;
    Ok(&T::cpu_storage_as_slice(s)?[start..end])
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.dims(), l2.dims(), self.spec)?;
        let storage = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(self.forward_typed::<f32>(
                contiguous_slice(s1, l1)?,
                contiguous_slice(s2, l2)?,
                &g,
            )?),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(self.forward_typed::<f64>(
                contiguous_slice(s1, l1)?,
                contiguous_slice(s2, l2)?,
                &g,
            )?),
            _ => return Err(candle_core::Error::Msg("conv2d supports matching f32 or f64 operands".into())),
        };
        Ok((storage, Shape::from((g.batch, g.c_out, g.ho, g.wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = ConvGeom::new(x.dims(), w.dims(), self.spec)?;
        let (gx, gw) = match x.dtype() {
            DType::F32 => self.backward_typed::<f32>(x, w, grad, &g)?,
            DType::F64 => self.backward_typed::<f64>(x, w, grad, &g)?,
            dt => return Err(candle_core::Error::Msg(format!("conv2d does not support {dt:?}"))),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// 2x2 max pooling with stride 2; a trailing odd row or column is dropped.
/// Built from a reshape and two max reductions so every window maximum
/// receives the full upstream gradient.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let x = x.narrow(2, 0, oh * 2)?.narrow(3, 0, ow * 2)?;
    Ok(x.reshape((b, c, oh, 2, ow, 2))?.max(5)?.max(3)?)
}

/// Convolution of `(B, C, H, W)` by `(C_out, C / groups, k, k)` with padding
/// `dilation * (k - 1) / 2`.
pub fn conv2d(x: &Tensor, weight: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, Conv2dOp { spec })?)
}

pub fn leaky(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, LEAKY_SLOPE)?)
}

/// Channel concatenation that skips zero-channel operands.
pub fn cat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let parts: Vec<&Tensor> = parts
        .iter()
        .copied()
        .filter(|t| t.dims().get(1).copied().unwrap_or(0) > 0)
        .collect();
    match parts.len() {
        0 => Err(Error::Dimension("nothing to concatenate".into())),
        1 => Ok(parts[0].clone()),
        _ => Ok(Tensor::cat(&parts, 1)?),
    }
}

/// `(B, C, H, W)` to `(B, H*W, C)`, row-major positions.
pub fn to_positions(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_positions`].
pub fn from_positions(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != height * width {
        return Err(Error::Dimension(format!("{n} positions for {height}x{width}")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, height, width))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_seed_and_name() {
        let a = init_conv_weight(1, "a", (2, 2, 3, 3));
        assert_eq!(a, init_conv_weight(1, "a", (2, 2, 3, 3)));
        assert_ne!(a, init_conv_weight(2, "a", (2, 2, 3, 3)));
        assert_ne!(a, init_conv_weight(1, "b", (2, 2, 3, 3)));
    }

    #[test]
    fn strided_dilated_conv_halves() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let conv = Conv::trainable(&mut store, 0, "c", 2, 4, ConvSpec::k3().stride(2).dilation(2), &dev).unwrap();
        let x = Tensor::ones((1, 2, 16, 16), DType::F32, &dev).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 4, 8, 8]);
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn conv_matches_reference_with_gradients() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rand = |shape: &[usize]| {
            let n = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Var::from_tensor(&Tensor::from_vec(v, shape, &dev).unwrap()).unwrap()
        };
        for spec in [
            ConvSpec::k3(),
            ConvSpec::k1(),
            ConvSpec::k3().stride(2),
            ConvSpec::k3().dilation(2),
            ConvSpec::k3().groups(2),
            ConvSpec::k3().stride(2).dilation(4).groups(4),
        ] {
            let x = rand(&[2, 4, 9, 7]);
            let w = rand(&[8, 4 / spec.groups, spec.kernel, spec.kernel]);
            let probe = rand(&[1]);
            let ours = conv2d(&x, &w, spec).unwrap();
            let theirs = x
                .conv2d(&w, spec.padding(), spec.stride, spec.dilation, spec.groups)
                .unwrap();
            assert_eq!(ours.dims(), theirs.dims(), "{spec:?}");
            let diff = |a: &Tensor, b: &Tensor| -> f64 {
                (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
            };
            assert!(diff(&ours, &theirs) < 1e-12, "{spec:?}");
            // weight the output unevenly so every gradient entry matters
            let weights = Tensor::arange(0.0, ours.elem_count() as f64, &dev)
                .unwrap()
                .reshape(ours.dims())
                .unwrap()
                .sin()
                .unwrap();
            let scalar = |y: &Tensor| (y * &weights).unwrap().sum_all().unwrap().broadcast_mul(&probe).unwrap();
            let ga = scalar(&ours).backward().unwrap();
            let gb = scalar(&theirs).backward().unwrap();
            for v in [&x, &w] {
                let (a, b) = (ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap());
                assert!(diff(a, b) < 1e-10, "{spec:?}: {}", diff(a, b));
            }
        }
    }

    #[test]
    fn position_layout_is_row_major() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 12., &dev).unwrap().reshape((1, 2, 2, 3)).unwrap();
        let p = to_positions(&x).unwrap();
        assert_eq!(p.dims(), &[1, 6, 2]);
        // position 4 is (y=1, x=1): channel 0 value 4, channel 1 value 10
        let row: Vec<f32> = p.get(0).unwrap().get(4).unwrap().to_vec1().unwrap();
        assert_eq!(row, vec![4.0, 10.0]);
        let back = from_positions(&p, 2, 3).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn cat_skips_empty() {
        let dev = Device::Cpu;
        let a = Tensor::ones((1, 2, 2, 2), DType::F32, &dev).unwrap();
        let e = Tensor::zeros((1, 0, 2, 2), DType::F32, &dev).unwrap();
        assert_eq!(cat_channels(&[&a, &e]).unwrap().dims(), &[1, 2, 2, 2]);
    }

    #[test]
    fn max_pool_routes_full_gradient() {
        let dev = Device::Cpu;
        let v: Vec<f64> = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 7.0, 8.0, 6.0, 0.5, 0.25, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5, 8.5];
        let x = Var::from_vec(v, (1, 1, 4, 5), &dev).unwrap();
        let y = max_pool2x2(&x).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![9.0, 8.0, 5.5, 7.5]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut expect = vec![0.0; 20];
        for i in [6, 8, 16, 18] {
            expect[i] = 1.0;
        }
        assert_eq!(gx, expect);
    }
}
