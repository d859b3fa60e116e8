//! Convolution primitives built from an im2col/col2im pair and a single GEMM.
//!
//! Column buffers use the layout `(C·k·k, B·Ho·Wo)`: one row per (channel,
//! kernel-row, kernel-col) tap and one column per output position across the
//! whole batch, so a convolution is exactly one matrix product.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` lies inside the image.
    #[inline]
    fn valid_range(&self, k_off: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let lo = if k_off >= self.pad {
            0
        } else {
            (self.pad - k_off).div_ceil(self.stride)
        };
        // largest ox with ox*stride + k_off - pad <= in_len - 1
        let hi = if in_len + self.pad > k_off {
            ((in_len - 1 + self.pad - k_off) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn im2col<T: Copy + Default>(src: &[T], g: &Geometry) -> Vec<T> {
    let plane = g.height * g.width;
    let per_image = g.out_height * g.out_width;
    let ncols = g.cols();
    let mut out = vec![T::default(); g.rows() * ncols];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.out_height, g.height);
            for kx in 0..g.kernel {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.out_width, g.width);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut out[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let img = &src[(b * g.channels + c) * plane..][..plane];
                    let dst = &mut dst_row[b * per_image..(b + 1) * per_image];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let src_line = &img[iy * g.width..(iy + 1) * g.width];
                        let dst_line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            let n = ox_hi - ox_lo;
                            dst_line[ox_lo..ox_hi].copy_from_slice(&src_line[ix0..ix0 + n]);
                        } else {
                            for (j, d) in dst_line[ox_lo..ox_hi].iter_mut().enumerate() {
                                *d = src_line[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: &Geometry) -> Vec<T> {
    let plane = g.height * g.width;
    let per_image = g.out_height * g.out_width;
    let ncols = g.cols();
    let mut out = vec![T::default(); g.batch * g.channels * plane];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let img = &mut out[(b * g.channels + c) * plane..][..plane];
            for ky in 0..g.kernel {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.out_height, g.height);
                for kx in 0..g.kernel {
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.out_width, g.width);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let row = (c * g.kernel + ky) * g.kernel + kx;
                    let s = &src[row * ncols + b * per_image..][..per_image];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let line = &mut img[iy * g.width..(iy + 1) * g.width];
                        let s_line = &s[oy * g.out_width..(oy + 1) * g.out_width];
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        for (j, v) in s_line[ox_lo..ox_hi].iter().enumerate() {
                            line[ix0 + j * g.stride] += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::RequiresContiguous { op: "im2col" }),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.rows(), g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout)?, g)),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(
                    other.dtype(),
                    "im2col",
                ))
            }
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, layout)?, g)),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(
                    other.dtype(),
                    "col2im",
                ))
            }
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} does not fit input of size {input} with padding {pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// 2-D convolution, `x: (B, Ci, H, W)`, `weight: (Co, Ci, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (co, ci, kernel, kw) = weight.dims4()?;
    if ci != channels || kernel != kw {
        return Err(Error::shape(
            format!("input with {ci} channels for a {kernel}x{kernel} kernel"),
            format!("{:?} against weight {:?}", x.dims(), weight.dims()),
        ));
    }
    let g = Geometry {
        batch,
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
        out_height: out_len(height, kernel, stride, pad)?,
        out_width: out_len(width, kernel, stride, pad)?,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = weight.reshape((co, g.rows()))?.matmul(&cols)?;
    Ok(y
        .reshape((co, batch, g.out_height, g.out_width))?
        .transpose(0, 1)?
        .contiguous()?)
}

/// Transposed 2-D convolution, `x: (B, Ci, H, W)`, `weight: (Ci, Co, k, k)`.
///
/// Output size is `(H-1)·stride - 2·pad + k`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, ci, height, width) = x.dims4()?;
    let (wci, co, kernel, kw) = weight.dims4()?;
    if wci != ci || kernel != kw {
        return Err(Error::shape(
            format!("input with {wci} channels for a {kernel}x{kernel} kernel"),
            format!("{:?} against weight {:?}", x.dims(), weight.dims()),
        ));
    }
    let out_h = (height - 1) * stride + kernel;
    let out_w = (width - 1) * stride + kernel;
    if out_h <= 2 * pad || out_w <= 2 * pad {
        return Err(Error::Config(format!(
            "padding {pad} too large for transposed convolution"
        )));
    }
    let g = Geometry {
        batch,
        channels: co,
        height: out_h - 2 * pad,
        width: out_w - 2 * pad,
        kernel,
        stride,
        pad,
        out_height: height,
        out_width: width,
    };
    let xs = x
        .transpose(0, 1)?
        .contiguous()?
        .reshape((ci, batch * height * width))?;
    let cols = weight.reshape((ci, g.rows()))?.t()?.matmul(&xs)?;
    Ok(cols.apply_op1(Col2Im(g))?)
}

/// Fused per-channel operations on contiguous NCHW buffers. Reductions are
/// accumulated in f64 whatever the storage type.
#[derive(Clone, Copy, Debug)]
struct Nchw {
    batch: usize,
    channels: usize,
    plane: usize,
}

impl Nchw {
    fn of(x: &Tensor) -> Result<Self> {
        let (batch, channels, h, w) = x.dims4()?;
        Ok(Self {
            batch,
            channels,
            plane: h * w,
        })
    }

    fn count(&self) -> f64 {
        (self.batch * self.plane) as f64
    }

    /// Calls `f(channel, values)` for every (image, channel) plane.
    #[inline]
    fn planes<'a, T>(&self, data: &'a [T], mut f: impl FnMut(usize, &'a [T])) {
        for b in 0..self.batch {
            for c in 0..self.channels {
                f(c, &data[(b * self.channels + c) * self.plane..][..self.plane]);
            }
        }
    }

    fn planes_mut<T>(&self, data: &mut [T], mut f: impl FnMut(usize, &mut [T])) {
        for (i, p) in data.chunks_exact_mut(self.plane).enumerate() {
            f(i % self.channels, p);
        }
    }
}

fn slice_of<'a, T>(data: &'a [T], layout: &Layout, op: &'static str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::RequiresContiguous { op }),
    }
}

fn small_f64(s: &CpuStorage, l: &Layout, op: &'static str) -> candle_core::Result<Vec<f64>> {
    Ok(match s {
        CpuStorage::F32(v) => slice_of(v, l, op)?.iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => slice_of(v, l, op)?.to_vec(),
        other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), op)),
    })
}

/// Output `(2, C)` in f64: row 0 per-channel sums of `a`, row 1 sums of `a·(b-mean)·inv`
/// when `b` is given (used for normalization gradients), otherwise mean and biased variance of `a`.
struct ChannelMoments(Nchw);

fn moments<T: WithDType>(x: &[T], g: &Nchw) -> Vec<f64> {
    let mut sum = vec![0.0; g.channels];
    g.planes(x, |c, p| sum[c] += p.iter().map(|v| v.to_f64()).sum::<f64>());
    let mean: Vec<f64> = sum.iter().map(|s| s / g.count()).collect();
    let mut sq = vec![0.0; g.channels];
    g.planes(x, |c, p| {
        let m = mean[c];
        sq[c] += p.iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>()
    });
    mean.into_iter().chain(sq.into_iter().map(|q| q / g.count())).collect()
}

impl CustomOp1 for ChannelMoments {
    fn name(&self) -> &'static str {
        "channel-moments"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => moments(slice_of(v, l, self.name())?, &self.0),
            CpuStorage::F64(v) => moments(slice_of(v, l, self.name())?, &self.0),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), self.name())),
        };
        Ok((CpuStorage::F64(out), Shape::from((2, self.0.channels))))
    }
}

/// Per-channel mean and biased variance of an NCHW tensor.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = Nchw::of(x)?;
    let v = x.contiguous()?.apply_op1_no_bwd(&ChannelMoments(g))?.to_vec2::<f64>()?;
    Ok((v[0].clone(), v[1].clone()))
}

/// `y = γ·(x − mean)·inv_std + β` per channel. With `batch_stats`, `mean` and
/// `inv_std` are treated as functions of `x` in the backward pass.
#[derive(Clone)]
struct ChannelNorm {
    g: Nchw,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

fn norm_fwd<T: WithDType>(x: &[T], gamma: &[f64], beta: &[f64], op: &ChannelNorm) -> Vec<T> {
    let mut out = x.to_vec();
    op.g.planes_mut(&mut out, |c, p| {
        let a = gamma[c] * op.inv_std[c];
        let b = beta[c] - a * op.mean[c];
        for v in p {
            *v = T::from_f64(a * v.to_f64() + b);
        }
    });
    out
}

impl CustomOp3 for ChannelNorm {
    fn name(&self) -> &'static str {
        "channel-norm"
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
        let gamma = small_f64(s2, l2, self.name())?;
        let beta = small_f64(s3, l3, self.name())?;
        let out = match s1 {
            CpuStorage::F32(v) => CpuStorage::F32(norm_fwd(slice_of(v, l1, self.name())?, &gamma, &beta, self)),
            CpuStorage::F64(v) => CpuStorage::F64(norm_fwd(slice_of(v, l1, self.name())?, &gamma, &beta, self)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), self.name())),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let x = x.contiguous()?;
        let grad = grad.contiguous()?;
        let sums = x
            .apply_op2_no_bwd(&grad, &NormGradSums(self.clone()))?
            .to_vec2::<f64>()?;
        let (d_beta, d_gamma) = (&sums[0], &sums[1]);
        let gamma_v: Vec<f64> = gamma.to_dtype(DType::F64)?.to_vec1()?;
        let dx = x.apply_op2_no_bwd(
            &grad,
            &NormGradInput {
                norm: self.clone(),
                gamma: gamma_v,
                d_beta: d_beta.clone(),
                d_gamma: d_gamma.clone(),
            },
        )?;
        let dev = x.device();
        let dt = x.dtype();
        Ok((
            Some(dx),
            Some(Tensor::from_slice(d_gamma, self.g.channels, dev)?.to_dtype(dt)?),
            Some(Tensor::from_slice(d_beta, self.g.channels, dev)?.to_dtype(dt)?),
        ))
    }
}

/// `(Σ dy, Σ dy·x̂)` per channel as a `(2, C)` f64 tensor.
struct NormGradSums(ChannelNorm);

fn grad_sums<T: WithDType>(x: &[T], dy: &[T], n: &ChannelNorm) -> Vec<f64> {
    let c = n.g.channels;
    let mut out = vec![0.0; 2 * c];
    let plane = n.g.plane;
    for (i, (xp, gp)) in x.chunks_exact(plane).zip(dy.chunks_exact(plane)).enumerate() {
        let ch = i % c;
        let (m, inv) = (n.mean[ch], n.inv_std[ch]);
        let (mut s0, mut s1) = (0.0, 0.0);
        for (xv, gv) in xp.iter().zip(gp) {
            let g = gv.to_f64();
            s0 += g;
            s1 += g * (xv.to_f64() - m) * inv;
        }
        out[ch] += s0;
        out[c + ch] += s1;
    }
    out
}

impl CustomOp2 for NormGradSums {
    fn name(&self) -> &'static str {
        "channel-norm-grad-sums"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                grad_sums(slice_of(x, l1, self.name())?, slice_of(g, l2, self.name())?, &self.0)
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                grad_sums(slice_of(x, l1, self.name())?, slice_of(g, l2, self.name())?, &self.0)
            }
            (other, _) => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), self.name())),
        };
        Ok((CpuStorage::F64(out), Shape::from((2, self.0.g.channels))))
    }
}

struct NormGradInput {
    norm: ChannelNorm,
    gamma: Vec<f64>,
    d_beta: Vec<f64>,
    d_gamma: Vec<f64>,
}

fn grad_input<T: WithDType>(x: &[T], dy: &[T], op: &NormGradInput) -> Vec<T> {
    let n = &op.norm;
    let count = n.g.count();
    let c = n.g.channels;
    let plane = n.g.plane;
    let mut out = Vec::with_capacity(x.len());
    for (i, (xp, gp)) in x.chunks_exact(plane).zip(dy.chunks_exact(plane)).enumerate() {
        let ch = i % c;
        let (m, inv) = (n.mean[ch], n.inv_std[ch]);
        let k = op.gamma[ch] * inv;
        if n.batch_stats {
            // dx = γ·inv/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
            let (sb, sg) = (op.d_beta[ch] / count, op.d_gamma[ch] / count);
            out.extend(xp.iter().zip(gp).map(|(xv, gv)| {
                let xh = (xv.to_f64() - m) * inv;
                T::from_f64(k * (gv.to_f64() - sb - xh * sg))
            }));
        } else {
            out.extend(gp.iter().map(|gv| T::from_f64(k * gv.to_f64())));
        }
    }
    out
}

impl CustomOp2 for NormGradInput {
    fn name(&self) -> &'static str {
        "channel-norm-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(grad_input(slice_of(x, l1, self.name())?, slice_of(g, l2, self.name())?, self))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(grad_input(slice_of(x, l1, self.name())?, slice_of(g, l2, self.name())?, self))
            }
            (other, _) => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), self.name())),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Per-channel affine normalization of an NCHW tensor with precomputed
/// statistics. `batch_stats` marks `mean`/`inv_std` as the batch's own, so
/// gradients flow through them.
pub fn channel_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
) -> Result<Tensor> {
    let g = Nchw::of(x)?;
    if mean.len() != g.channels || inv_std.len() != g.channels || gamma.elem_count() != g.channels {
        return Err(Error::shape(
            format!("{} channel statistics", g.channels),
            format!("{} / {} / {}", mean.len(), inv_std.len(), gamma.elem_count()),
        ));
    }
    Ok(x.contiguous()?.apply_op3(
        gamma,
        beta,
        ChannelNorm {
            g,
            mean,
            inv_std,
            batch_stats,
        },
    )?)
}

/// `x + bias[c]` for NCHW `x`.
struct ChannelBias(Nchw);

fn bias_fwd<T: WithDType>(x: &[T], bias: &[f64], g: &Nchw) -> Vec<T> {
    let mut out = x.to_vec();
    g.planes_mut(&mut out, |c, p| {
        let b = T::from_f64(bias[c]);
        for v in p {
            *v += b;
        }
    });
    out
}

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let bias = small_f64(s2, l2, self.name())?;
        let out = match s1 {
            CpuStorage::F32(v) => CpuStorage::F32(bias_fwd(slice_of(v, l1, self.name())?, &bias, &self.0)),
            CpuStorage::F64(v) => CpuStorage::F64(bias_fwd(slice_of(v, l1, self.name())?, &bias, &self.0)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), self.name())),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        _x: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (mean, _) = channel_moments(grad).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let n = self.0.count();
        let sums: Vec<f64> = mean.iter().map(|m| m * n).collect();
        let db = Tensor::from_vec(sums, bias.dims(), grad.device())?.to_dtype(grad.dtype())?;
        Ok((Some(grad.clone()), Some(db)))
    }
}

/// Adds a per-channel bias `(C,)` to an NCHW tensor.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = Nchw::of(x)?;
    if bias.elem_count() != g.channels {
        return Err(Error::shape(format!("{} biases", g.channels), bias.elem_count()));
    }
    Ok(x.contiguous()?.apply_op2(bias, ChannelBias(g))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(
        x: &[f64],
        (b, ci, h, w): (usize, usize, usize, usize),
        k: &[f64],
        (co, kk): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, usize, usize) {
        let ho = (h + 2 * pad - kk) / stride + 1;
        let wo = (w + 2 * pad - kk) / stride + 1;
        let mut out = vec![0.0; b * co * ho * wo];
        for n in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..kk {
                                for kx in 0..kk {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((n * ci + c) * h + iy as usize) * w + ix as usize]
                                        * k[((o * ci + c) * kk + ky) * kk + kx];
                                }
                            }
                        }
                        out[((n * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        (out, ho, wo)
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_nested_loops() {
        let dev = Device::Cpu;
        for &(stride, pad, kk, h) in &[(1, 1, 3, 7), (2, 1, 3, 8), (2, 0, 2, 6), (1, 0, 1, 5)] {
            let (b, ci, co) = (2, 3, 4);
            let xv = seq(b * ci * h * h, 2.0);
            let kv = seq(co * ci * kk * kk, 1.0);
            let x = Tensor::from_vec(xv.clone(), (b, ci, h, h), &dev).unwrap();
            let k = Tensor::from_vec(kv.clone(), (co, ci, kk, kk), &dev).unwrap();
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let (want, ho, wo) = naive_conv(&xv, (b, ci, h, h), &kv, (co, kk), stride, pad);
            assert_eq!(y.dims(), &[b, co, ho, wo]);
            let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for the same kernel reinterpreted.
        let dev = Device::Cpu;
        let (b, ci, co, h, kk, stride, pad) = (2, 3, 2, 7, 3, 2, 1);
        let x = Tensor::from_vec(seq(b * ci * h * h, 1.0), (b, ci, h, h), &dev).unwrap();
        let k = Tensor::from_vec(seq(co * ci * kk * kk, 1.0), (co, ci, kk, kk), &dev).unwrap();
        let y = conv2d(&x, &k, stride, pad).unwrap();
        let (_, _, ho, wo) = y.dims4().unwrap();
        let r = Tensor::from_vec(seq(b * co * ho * wo, 3.0), (b, co, ho, wo), &dev).unwrap();
        let lhs = (&y * &r).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        // conv_transpose weight layout is (C_in_of_transpose=co, C_out=ci, k, k).
        let back = conv_transpose2d(&r, &k, stride, pad).unwrap();
        assert_eq!(back.dims(), x.dims());
        let rhs = (&x * &back).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn transposed_upsampling_doubles_resolution() {
        let dev = Device::Cpu;
        let x = Tensor::ones((1, 2, 5, 5), DType::F32, &dev).unwrap();
        let w = Tensor::ones((2, 3, 2, 2), DType::F32, &dev).unwrap();
        let y = conv_transpose2d(&x, &w, 2, 0).unwrap();
        assert_eq!(y.dims(), &[1, 3, 10, 10]);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&e| e == 2.0));
    }

    #[test]
    fn gradients_flow_through_custom_ops() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::from_vec(seq(32, 1.0), (1, 2, 4, 4), &dev).unwrap())
            .unwrap();
        let k = Var::from_tensor(&Tensor::from_vec(seq(36, 1.0), (2, 2, 3, 3), &dev).unwrap())
            .unwrap();
        let y = conv2d(&x, &k, 1, 1).unwrap();
        let y_ref = x.conv2d(&k, 1, 1, 1, 1).unwrap();
        let loss = y.sqr().unwrap().sum_all().unwrap();
        let loss_ref = y_ref.sqr().unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let g_ref = loss_ref.backward().unwrap();
        for v in [x.as_tensor(), k.as_tensor()] {
            let a = g.get(v).unwrap();
            let b = g_ref.get(v).unwrap();
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_scalar::<f64>().unwrap() < 1e-10);
        }
    }
}
