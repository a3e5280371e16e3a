//! Per-sample 3D convolution kernels (im2col + GEMM).

use super::{gemm, Real};
use crate::error::{Error, Result};

/// `floor((extent + 2·padding − kernel)/stride) + 1`, or `None` when the
/// kernel does not fit in the padded extent.
pub fn conv3d_output_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Resolved shapes of a cross-correlation `[N,C,D,H,W] ⋆ [K,C,kd,kh,kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dGeometry {
    pub fn resolve(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 5 || kernel.len() != 5 {
            return Err(Error::Shape(format!(
                "conv3d expects 5-D input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if input[1] != kernel[1] {
            return Err(Error::Shape(format!(
                "conv3d channel mismatch: input {input:?} has {} channels, kernel {kernel:?} expects {}",
                input[1], kernel[1]
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv3d stride must be positive".into(),
            ));
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            output[axis] = conv3d_output_extent(input[2 + axis], kernel[2 + axis], stride, padding)
                .ok_or_else(|| {
                    Error::Shape(format!(
                        "conv3d kernel {kernel:?} larger than padded input {input:?} (padding {padding})"
                    ))
                })?;
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: kernel[0],
            input: [input[2], input[3], input[4]],
            kernel: [kernel[2], kernel[3], kernel[4]],
            output,
            stride,
            padding,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_channels,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.padding == 0
    }
}

/// Range of output positions `o` whose input index `o·stride + offset − padding`
/// lands inside `[0, extent)`.
fn valid_range(
    out: usize,
    extent: usize,
    stride: usize,
    offset: usize,
    padding: usize,
) -> (usize, usize) {
    // o·s + off − p ≥ 0  ⇔  o ≥ ceil((p − off)/s)
    let lo = if offset >= padding {
        0
    } else {
        (padding - offset).div_ceil(stride)
    };
    // o·s + off − p ≤ extent − 1  ⇔  o ≤ (extent − 1 + p − off)/s
    let hi = if extent + padding < offset + 1 {
        0
    } else {
        ((extent - 1 + padding - offset) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Output depth planes per im2col chunk, sized so the column buffer stays
/// cache-resident.
fn chunk_planes(g: &Conv3dGeometry) -> usize {
    const TARGET: usize = 1 << 19;
    let plane = g.output[1] * g.output[2];
    (TARGET / (g.patch_len() * plane).max(1)).clamp(1, g.output[0])
}

/// Columns for output depth planes `z0..z1`: `cols[row, (zd − z0)·oh·ow + …]`.
fn im2col<T: Real>(g: &Conv3dGeometry, x: &[T], cols: &mut [T], z0: usize, z1: usize) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let (s, p) = (g.stride, g.padding);
    let plane = (z1 - z0) * oh * ow;
    cols[..g.patch_len() * plane]
        .iter_mut()
        .for_each(|v| *v = T::zero());
    for c in 0..g.in_channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            let (zd0, zd1) = valid_range(od, d, s, a, p);
            let (zd0, zd1) = (zd0.max(z0), zd1.min(z1));
            for b in 0..kh {
                let (zh0, zh1) = valid_range(oh, h, s, b, p);
                for e in 0..kw {
                    let (zw0, zw1) = valid_range(ow, w, s, e, p);
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for zd in zd0..zd1 {
                        let id = zd * s + a - p;
                        for zh in zh0..zh1 {
                            let ih = zh * s + b - p;
                            let src = &xc[(id * h + ih) * w..(id * h + ih + 1) * w];
                            let o = ((zd - z0) * oh + zh) * ow;
                            let out = &mut dst[o..o + ow];
                            if s == 1 {
                                let iw0 = zw0 + e - p;
                                out[zw0..zw1].copy_from_slice(&src[iw0..iw0 + (zw1 - zw0)]);
                            } else {
                                for zw in zw0..zw1 {
                                    out[zw] = src[zw * s + e - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] for the same depth-plane range.
fn col2im<T: Real>(g: &Conv3dGeometry, cols: &[T], dx: &mut [T], z0: usize, z1: usize) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let (s, p) = (g.stride, g.padding);
    let plane = (z1 - z0) * oh * ow;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            let (zd0, zd1) = valid_range(od, d, s, a, p);
            let (zd0, zd1) = (zd0.max(z0), zd1.min(z1));
            for b in 0..kh {
                let (zh0, zh1) = valid_range(oh, h, s, b, p);
                for e in 0..kw {
                    let (zw0, zw1) = valid_range(ow, w, s, e, p);
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for zd in zd0..zd1 {
                        let id = zd * s + a - p;
                        for zh in zh0..zh1 {
                            let ih = zh * s + b - p;
                            let dst = &mut dxc[(id * h + ih) * w..(id * h + ih + 1) * w];
                            let o = ((zd - z0) * oh + zh) * ow;
                            let row_src = &src[o..o + ow];
                            if s == 1 {
                                let iw0 = zw0 + e - p;
                                for (d, &v) in dst[iw0..iw0 + (zw1 - zw0)]
                                    .iter_mut()
                                    .zip(&row_src[zw0..zw1])
                                {
                                    *d += v;
                                }
                            } else {
                                for zw in zw0..zw1 {
                                    dst[zw * s + e - p] += row_src[zw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depth-plane ranges `[z0, z1)` covering the output.
fn chunks(g: &Conv3dGeometry) -> impl Iterator<Item = (usize, usize)> {
    let step = chunk_planes(g);
    let od = g.output[0];
    (0..od)
        .step_by(step)
        .map(move |z0| (z0, (z0 + step).min(od)))
}

pub(super) fn conv3d_forward<T: Real>(
    g: &Conv3dGeometry,
    x: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let (ci, co) = (g.in_channels, g.out_channels);
    let (vin, vout, plen) = (g.in_volume(), g.out_volume(), g.patch_len());
    let plane = g.output[1] * g.output[2];
    let mut out = vec![T::zero(); g.batch * co * vout];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); plen * plane * chunk_planes(g)]
    };
    for n in 0..g.batch {
        let xn = &x[n * ci * vin..(n + 1) * ci * vin];
        let yn = &mut out[n * co * vout..(n + 1) * co * vout];
        for (k, row) in yn.chunks_mut(vout).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[k]);
        }
        if g.is_pointwise() {
            gemm::nn(co, plen, vout, kernel, xn, T::one(), yn);
            continue;
        }
        for (z0, z1) in chunks(g) {
            let ncols = (z1 - z0) * plane;
            im2col(g, xn, &mut cols, z0, z1);
            gemm::nn_strided(
                co,
                plen,
                ncols,
                kernel,
                plen,
                &cols[..plen * ncols],
                T::one(),
                &mut yn[z0 * plane..],
                vout,
            );
        }
    }
    out
}

/// Gradients of a conv3d w.r.t. its operands. Each output is only computed
/// when requested; results are added into the supplied buffers.
pub(super) struct Conv3dGrads<'a, T> {
    pub input: Option<&'a mut [T]>,
    pub kernel: Option<&'a mut [T]>,
    pub bias: Option<&'a mut [T]>,
}

pub(super) fn conv3d_backward<T: Real>(
    g: &Conv3dGeometry,
    x: &[T],
    kernel: &[T],
    upstream: &[T],
    grads: Conv3dGrads<'_, T>,
) {
    let Conv3dGrads {
        input: mut dx,
        kernel: mut dk,
        bias: mut db,
    } = grads;
    let (ci, co) = (g.in_channels, g.out_channels);
    let (vin, vout, plen) = (g.in_volume(), g.out_volume(), g.patch_len());
    let plane = g.output[1] * g.output[2];
    let pointwise = g.is_pointwise();
    let buffer = || {
        if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); plen * plane * chunk_planes(g)]
        }
    };
    let mut cols = if dk.is_some() { buffer() } else { Vec::new() };
    let mut dcols = if dx.is_some() { buffer() } else { Vec::new() };
    for n in 0..g.batch {
        let xn = &x[n * ci * vin..(n + 1) * ci * vin];
        let gn = &upstream[n * co * vout..(n + 1) * co * vout];
        if let Some(db) = db.as_deref_mut() {
            for (k, row) in gn.chunks(vout).enumerate() {
                db[k] += row.iter().copied().sum::<T>();
            }
        }
        if pointwise {
            if let Some(dk) = dk.as_deref_mut() {
                // dK (co×ci) += G (co×vout) · Xᵀ
                gemm::nt(co, vout, plen, gn, xn, T::one(), dk);
            }
            if let Some(dx) = dx.as_deref_mut() {
                // dX (ci×vin) += Kᵀ · G
                gemm::tn(
                    plen,
                    co,
                    vout,
                    kernel,
                    gn,
                    T::one(),
                    &mut dx[n * ci * vin..(n + 1) * ci * vin],
                );
            }
            continue;
        }
        for (z0, z1) in chunks(g) {
            let ncols = (z1 - z0) * plane;
            let gc = &gn[z0 * plane..];
            if let Some(dk) = dk.as_deref_mut() {
                im2col(g, xn, &mut cols, z0, z1);
                // dK (co×plen) += G_chunk (co×ncols) · colsᵀ
                gemm::nt_strided(
                    co,
                    ncols,
                    plen,
                    gc,
                    vout,
                    &cols[..plen * ncols],
                    T::one(),
                    dk,
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                // dcols (plen×ncols) = Kᵀ · G_chunk
                gemm::tn_strided(
                    plen,
                    co,
                    ncols,
                    kernel,
                    gc,
                    vout,
                    T::zero(),
                    &mut dcols[..plen * ncols],
                );
                col2im(
                    g,
                    &dcols[..plen * ncols],
                    &mut dx[n * ci * vin..(n + 1) * ci * vin],
                    z0,
                    z1,
                );
            }
        }
    }
}

/// Shapes of a non-overlapping transposed convolution
/// `[N,C,D,H,W] → [N,K,D·s,H·s,W·s]` with kernel `[C,K,s,s,s]`.
#[derive(Clone, Copy, Debug)]
pub(super) struct UpGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub stride: usize,
}

impl UpGeometry {
    pub fn resolve(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        if input.len() != 5 || kernel.len() != 5 {
            return Err(Error::Shape(format!(
                "conv3d_transposed expects 5-D input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv3d_transposed stride must be positive".into(),
            ));
        }
        if kernel[2..].iter().any(|&k| k != stride) {
            return Err(Error::InvalidArgument(format!(
                "conv3d_transposed kernel extent {:?} must equal stride {stride}",
                &kernel[2..]
            )));
        }
        if input[1] != kernel[0] {
            return Err(Error::Shape(format!(
                "conv3d_transposed channel mismatch: input {input:?}, kernel {kernel:?}"
            )));
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: kernel[1],
            input: [input[2], input[3], input[4]],
            stride,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let s = self.stride;
        vec![
            self.batch,
            self.out_channels,
            self.input[0] * s,
            self.input[1] * s,
            self.input[2] * s,
        ]
    }

    fn rows(&self) -> usize {
        self.out_channels * self.stride.pow(3)
    }
}

/// Moves `cols[(k·s³ + (a·s+b)·s + e), (z·H + y)·W + x]` to
/// `out[k, z·s+a, y·s+b, x·s+e]` (or the reverse when `gather`).
fn shuffle<T: Real>(g: &UpGeometry, cols: &mut [T], out: &mut [T], gather: bool) {
    let s = g.stride;
    let [d, h, w] = g.input;
    let (oh, ow) = (h * s, w * s);
    let vin = d * h * w;
    let vout = vin * s * s * s;
    for k in 0..g.out_channels {
        let ok = &mut out[k * vout..(k + 1) * vout];
        for a in 0..s {
            for b in 0..s {
                for e in 0..s {
                    let row = k * s * s * s + (a * s + b) * s + e;
                    let cr = &mut cols[row * vin..(row + 1) * vin];
                    for z in 0..d {
                        for y in 0..h {
                            let base_in = (z * h + y) * w;
                            let base_out = ((z * s + a) * oh + (y * s + b)) * ow + e;
                            for x in 0..w {
                                let o = base_out + x * s;
                                if gather {
                                    cr[base_in + x] = ok[o];
                                } else {
                                    ok[o] = cr[base_in + x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv_transposed_forward<T: Real>(g: &UpGeometry, x: &[T], kernel: &[T]) -> Vec<T> {
    let (ci, co) = (g.in_channels, g.out_channels);
    let vin: usize = g.input.iter().product();
    let vout = vin * g.stride.pow(3);
    let rows = g.rows();
    let mut out = vec![T::zero(); g.batch * co * vout];
    let mut cols = vec![T::zero(); rows * vin];
    for n in 0..g.batch {
        let xn = &x[n * ci * vin..(n + 1) * ci * vin];
        // cols (rows×vin) = Kᵀ (rows×ci) · X (ci×vin), K stored ci×rows
        gemm::tn(rows, ci, vin, kernel, xn, T::zero(), &mut cols);
        shuffle(
            g,
            &mut cols,
            &mut out[n * co * vout..(n + 1) * co * vout],
            false,
        );
    }
    out
}

pub(super) fn conv_transposed_backward<T: Real>(
    g: &UpGeometry,
    x: &[T],
    kernel: &[T],
    upstream: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    let (ci, co) = (g.in_channels, g.out_channels);
    let vin: usize = g.input.iter().product();
    let vout = vin * g.stride.pow(3);
    let rows = g.rows();
    let mut dcols = vec![T::zero(); rows * vin];
    let mut scratch = upstream.to_vec();
    for n in 0..g.batch {
        let xn = &x[n * ci * vin..(n + 1) * ci * vin];
        shuffle(
            g,
            &mut dcols,
            &mut scratch[n * co * vout..(n + 1) * co * vout],
            true,
        );
        if let Some(dx) = dx.as_deref_mut() {
            // dX (ci×vin) += K (ci×rows) · dcols (rows×vin)
            gemm::nn(
                ci,
                rows,
                vin,
                kernel,
                &dcols,
                T::one(),
                &mut dx[n * ci * vin..(n + 1) * ci * vin],
            );
        }
        if let Some(dk) = dk.as_deref_mut() {
            // dK (ci×rows) += X (ci×vin) · dcolsᵀ
            gemm::nt(ci, vin, rows, xn, &dcols, T::one(), dk);
        }
    }
}
