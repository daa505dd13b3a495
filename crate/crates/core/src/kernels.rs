//! Forward and backward kernels on raw tensors.
//!
//! These functions carry no autodiff state. [`crate::graph::Graph`] records
//! them on a tape; the forward-only baseline ensemble calls them directly.
//! Convolutions lower to `im2col` + GEMM per batch item, so every reduction
//! runs in a fixed order and results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor3};

/// Output length of a 1-D convolution, or `None` when it would be < 1.
pub fn conv_out_len(time: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = time + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output length of a 1-D transposed convolution, or `None` when it would be < 1.
pub fn conv_transpose_out_len(
    time: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if stride == 0 || kernel == 0 || time == 0 {
        return None;
    }
    let full = (time - 1) * stride + kernel;
    (full > 2 * padding).then(|| full - 2 * padding)
}

/// Range of output positions `t` for which `t * stride + offset - pad` lands in `[0, len)`.
fn valid_range(
    t_out: usize,
    offset: usize,
    stride: usize,
    pad: usize,
    len: usize,
) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad > offset {
        ((len + pad - offset - 1) / stride + 1).min(t_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds `channels` rows of length `len` into `[channels * kernel, t_out]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    src: &[T],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
    cols: &mut [T],
) {
    debug_assert_eq!(cols.len(), channels * kernel * t_out);
    for c in 0..channels {
        let row_in = &src[c * len..(c + 1) * len];
        for j in 0..kernel {
            let row = &mut cols[(c * kernel + j) * t_out..(c * kernel + j + 1) * t_out];
            let (lo, hi) = valid_range(t_out, j, stride, pad, len);
            row[..lo].fill(T::zero());
            row[hi..].fill(T::zero());
            if lo == hi {
                continue;
            }
            if stride == 1 {
                let start = lo + j - pad;
                row[lo..hi].copy_from_slice(&row_in[start..start + (hi - lo)]);
            } else {
                for t in lo..hi {
                    row[t] = row_in[t * stride + j - pad];
                }
            }
        }
    }
}

/// [`im2col`] restricted to output positions `t0..t0 + n`, written into
/// columns `off..off + n` of a row-major buffer with row stride `ld`.
#[allow(clippy::too_many_arguments)]
fn im2col_block<T: Real>(
    src: &[T],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
    t0: usize,
    n: usize,
    cols: &mut [T],
    ld: usize,
    off: usize,
) {
    for c in 0..channels {
        let row_in = &src[c * len..(c + 1) * len];
        for j in 0..kernel {
            let r = (c * kernel + j) * ld + off;
            let row = &mut cols[r..r + n];
            let (lo, hi) = valid_range(t_out, j, stride, pad, len);
            let lo = lo.clamp(t0, t0 + n) - t0;
            let hi = hi.clamp(t0, t0 + n) - t0;
            if lo >= hi {
                row.fill(T::zero());
                continue;
            }
            row[..lo].fill(T::zero());
            row[hi..].fill(T::zero());
            if stride == 1 {
                let start = t0 + lo + j - pad;
                row[lo..hi].copy_from_slice(&row_in[start..start + (hi - lo)]);
            } else {
                for t in lo..hi {
                    row[t] = row_in[(t0 + t) * stride + j - pad];
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `[channels * kernel, t_out]` into `dst`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
    dst: &mut [T],
) {
    for c in 0..channels {
        let row_out = &mut dst[c * len..(c + 1) * len];
        for j in 0..kernel {
            let row = &cols[(c * kernel + j) * t_out..(c * kernel + j + 1) * t_out];
            let (lo, hi) = valid_range(t_out, j, stride, pad, len);
            for t in lo..hi {
                row_out[t * stride + j - pad] += row[t];
            }
        }
    }
}

fn check_bias<T>(bias: Option<&[T]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::shape(format!(
            "bias has {} entries for {channels} output channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

/// Target element count of the patch buffer in the forward convolution.
const COL_BLOCK: usize = 1 << 18;

/// Hyper-parameters shared by the convolution kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    pub const fn grouped(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

/// Validated geometry of a convolution call.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    t_in: usize,
    t_out: usize,
    groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
}

fn conv_geom(x: Shape, w: Shape, spec: ConvSpec) -> Result<ConvGeom> {
    let (cout, cin_g, kernel) = (w.batch, w.channels, w.time);
    if spec.stride == 0 || spec.groups == 0 || kernel == 0 {
        return Err(Error::shape("stride, groups and kernel size must be >= 1"));
    }
    if x.channels != cin_g * spec.groups || cout % spec.groups != 0 {
        return Err(Error::shape(format!(
            "conv1d weight {w} (groups {}) does not accept {} input channels",
            spec.groups, x.channels
        )));
    }
    let t_out = conv_out_len(x.time, kernel, spec.stride, spec.padding).ok_or_else(|| {
        Error::shape(format!(
            "conv1d on time {} with k={kernel}, stride={}, padding={} has no output",
            x.time, spec.stride, spec.padding
        ))
    })?;
    Ok(ConvGeom {
        batch: x.batch,
        cin: x.channels,
        cout,
        kernel,
        t_in: x.time,
        t_out,
        groups: spec.groups,
    })
}

/// Cross-correlation with zero padding. `weight` is `(out_ch, in_ch / groups, k)`.
pub fn conv1d<T: Real>(
    x: &Tensor3<T>,
    weight: &Tensor3<T>,
    bias: Option<&[T]>,
    spec: ConvSpec,
) -> Result<Tensor3<T>> {
    let g = conv_geom(x.shape(), weight.shape(), spec)?;
    check_bias(bias, g.cout)?;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let rows = cin_g * g.kernel;
    let mut out = vec![T::zero(); g.batch * g.cout * g.t_out];
    let w = weight.data();
    let direct = g.kernel == 1 && spec.stride == 1 && spec.padding == 0;
    if direct {
        for b in 0..g.batch {
            let xi = x.item(b);
            let oi = &mut out[b * g.cout * g.t_out..(b + 1) * g.cout * g.t_out];
            for grp in 0..g.groups {
                let src = &xi[grp * cin_g * g.t_in..(grp + 1) * cin_g * g.t_in];
                let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                let og = &mut oi[grp * cout_g * g.t_out..(grp + 1) * cout_g * g.t_out];
                T::gemm(
                    cout_g, rows, g.t_out, T::one(), wg, rows as isize, 1, src,
                    g.t_out as isize, 1, T::zero(), og, g.t_out as isize, 1,
                );
            }
        }
    } else {
        // Columns from several (item, time span) pieces share one GEMM. Keeps
        // the patch buffer cache sized and fills short rows up to a useful width.
        let width = (COL_BLOCK / rows).max(64).min(g.batch * g.t_out);
        let mut cols = vec![T::zero(); rows * width];
        let mut tmp = vec![T::zero(); cout_g * width];
        let mut pieces: Vec<(usize, usize, usize, usize)> = Vec::new();
        for grp in 0..g.groups {
            let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let mut used = 0;
            let mut flush = |pieces: &mut Vec<(usize, usize, usize, usize)>,
                             used: usize,
                             cols: &[T],
                             tmp: &mut [T]| {
                T::gemm(
                    cout_g, rows, used, T::one(), wg, rows as isize, 1, cols,
                    width as isize, 1, T::zero(), tmp, width as isize, 1,
                );
                for &(b, t0, n, off) in pieces.iter() {
                    for c in 0..cout_g {
                        let o = (b * g.cout + grp * cout_g + c) * g.t_out + t0;
                        out[o..o + n].copy_from_slice(&tmp[c * width + off..c * width + off + n]);
                    }
                }
                pieces.clear();
            };
            for b in 0..g.batch {
                let xi = x.item(b);
                let src = &xi[grp * cin_g * g.t_in..(grp + 1) * cin_g * g.t_in];
                let mut t0 = 0;
                while t0 < g.t_out {
                    if used == width {
                        flush(&mut pieces, used, &cols, &mut tmp);
                        used = 0;
                    }
                    let n = (g.t_out - t0).min(width - used);
                    im2col_block(
                        src, cin_g, g.t_in, g.kernel, spec.stride, spec.padding, g.t_out, t0, n,
                        &mut cols, width, used,
                    );
                    pieces.push((b, t0, n, used));
                    used += n;
                    t0 += n;
                }
            }
            if used > 0 {
                flush(&mut pieces, used, &cols, &mut tmp);
            }
        }
    }
    if let Some(bias) = bias {
        for oi in out.chunks_mut(g.cout * g.t_out) {
            for (c, &bv) in bias.iter().enumerate() {
                for v in &mut oi[c * g.t_out..(c + 1) * g.t_out] {
                    *v += bv;
                }
            }
        }
    }
    Tensor3::new(Shape::new(g.batch, g.cout, g.t_out), out)
}

/// Gradients produced by a convolution backward pass. Each field is present
/// only when requested.
#[derive(Debug, Default)]
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Which gradients a backward call should produce.
#[derive(Debug, Clone, Copy)]
pub struct Needs {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

fn bias_grad<T: Real>(grad_out: &[T], batch: usize, channels: usize, time: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = (b * channels + c) * time;
            *acc += grad_out[start..start + time]
                .iter()
                .fold(T::zero(), |s, &v| s + v);
        }
    }
    db
}

pub fn conv1d_backward<T: Real>(
    x: &Tensor3<T>,
    weight: &Tensor3<T>,
    grad_out: &[T],
    spec: ConvSpec,
    needs: Needs,
) -> Result<ConvGrads<T>> {
    let g = conv_geom(x.shape(), weight.shape(), spec)?;
    if grad_out.len() != g.batch * g.cout * g.t_out {
        return Err(Error::shape("conv1d upstream gradient has the wrong length"));
    }
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let rows = cin_g * g.kernel;
    let w = weight.data();
    let mut dx = needs.input.then(|| vec![T::zero(); x.len()]);
    let mut dw = needs.weight.then(|| vec![T::zero(); weight.len()]);
    let mut cols = vec![T::zero(); rows * g.t_out];
    for b in 0..g.batch {
        let xi = x.item(b);
        let gi = &grad_out[b * g.cout * g.t_out..(b + 1) * g.cout * g.t_out];
        for grp in 0..g.groups {
            let gg = &gi[grp * cout_g * g.t_out..(grp + 1) * cout_g * g.t_out];
            if let Some(dw) = dw.as_mut() {
                let src = &xi[grp * cin_g * g.t_in..(grp + 1) * cin_g * g.t_in];
                im2col(
                    src,
                    cin_g,
                    g.t_in,
                    g.kernel,
                    spec.stride,
                    spec.padding,
                    g.t_out,
                    &mut cols,
                );
                // dW[cout_g, rows] += gout[cout_g, t_out] * cols^T
                T::gemm(
                    cout_g,
                    g.t_out,
                    rows,
                    T::one(),
                    gg,
                    g.t_out as isize,
                    1,
                    &cols,
                    1,
                    g.t_out as isize,
                    T::one(),
                    &mut dw[grp * cout_g * rows..(grp + 1) * cout_g * rows],
                    rows as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                // dcols[rows, t_out] = W^T * gout
                T::gemm(
                    rows,
                    cout_g,
                    g.t_out,
                    T::one(),
                    wg,
                    1,
                    rows as isize,
                    gg,
                    g.t_out as isize,
                    1,
                    T::zero(),
                    &mut cols,
                    g.t_out as isize,
                    1,
                );
                let dst = &mut dx[(b * g.cin + grp * cin_g) * g.t_in
                    ..(b * g.cin + (grp + 1) * cin_g) * g.t_in];
                col2im(
                    &cols,
                    cin_g,
                    g.t_in,
                    g.kernel,
                    spec.stride,
                    spec.padding,
                    g.t_out,
                    dst,
                );
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: needs
            .bias
            .then(|| bias_grad(grad_out, g.batch, g.cout, g.t_out)),
    })
}

fn convt_geom(x: Shape, w: Shape, stride: usize, padding: usize) -> Result<ConvGeom> {
    let (cin, cout, kernel) = (w.batch, w.channels, w.time);
    if x.channels != cin {
        return Err(Error::shape(format!(
            "conv_transpose1d weight {w} does not accept {} input channels",
            x.channels
        )));
    }
    let t_out = conv_transpose_out_len(x.time, kernel, stride, padding).ok_or_else(|| {
        Error::shape(format!(
            "conv_transpose1d on time {} with k={kernel}, stride={stride}, padding={padding} has no output",
            x.time
        ))
    })?;
    Ok(ConvGeom {
        batch: x.batch,
        cin,
        cout,
        kernel,
        t_in: x.time,
        t_out,
        groups: 1,
    })
}

/// Transposed convolution (scatter-add adjoint of [`conv1d`]).
/// `weight` is `(in_ch, out_ch, k)`.
pub fn conv_transpose1d<T: Real>(
    x: &Tensor3<T>,
    weight: &Tensor3<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor3<T>> {
    let g = convt_geom(x.shape(), weight.shape(), stride, padding)?;
    check_bias(bias, g.cout)?;
    let rows = g.cout * g.kernel;
    let mut cols = vec![T::zero(); rows * g.t_in];
    let mut out = vec![T::zero(); g.batch * g.cout * g.t_out];
    for b in 0..g.batch {
        // cols[rows, t_in] = W^T * x
        T::gemm(
            rows,
            g.cin,
            g.t_in,
            T::one(),
            weight.data(),
            1,
            rows as isize,
            x.item(b),
            g.t_in as isize,
            1,
            T::zero(),
            &mut cols,
            g.t_in as isize,
            1,
        );
        let oi = &mut out[b * g.cout * g.t_out..(b + 1) * g.cout * g.t_out];
        col2im(&cols, g.cout, g.t_out, g.kernel, stride, padding, g.t_in, oi);
        if let Some(bias) = bias {
            for (c, &bv) in bias.iter().enumerate() {
                for v in &mut oi[c * g.t_out..(c + 1) * g.t_out] {
                    *v += bv;
                }
            }
        }
    }
    Tensor3::new(Shape::new(g.batch, g.cout, g.t_out), out)
}

pub fn conv_transpose1d_backward<T: Real>(
    x: &Tensor3<T>,
    weight: &Tensor3<T>,
    grad_out: &[T],
    stride: usize,
    padding: usize,
    needs: Needs,
) -> Result<ConvGrads<T>> {
    let g = convt_geom(x.shape(), weight.shape(), stride, padding)?;
    if grad_out.len() != g.batch * g.cout * g.t_out {
        return Err(Error::shape(
            "conv_transpose1d upstream gradient has the wrong length",
        ));
    }
    let rows = g.cout * g.kernel;
    let mut dx = needs.input.then(|| vec![T::zero(); x.len()]);
    let mut dw = needs.weight.then(|| vec![T::zero(); weight.len()]);
    let mut gcols = vec![T::zero(); rows * g.t_in];
    if dx.is_some() || dw.is_some() {
        for b in 0..g.batch {
            let gi = &grad_out[b * g.cout * g.t_out..(b + 1) * g.cout * g.t_out];
            im2col(
                gi, g.cout, g.t_out, g.kernel, stride, padding, g.t_in, &mut gcols,
            );
            if let Some(dx) = dx.as_mut() {
                // dx[cin, t_in] = W[cin, rows] * gcols
                T::gemm(
                    g.cin,
                    rows,
                    g.t_in,
                    T::one(),
                    weight.data(),
                    rows as isize,
                    1,
                    &gcols,
                    g.t_in as isize,
                    1,
                    T::zero(),
                    &mut dx[b * g.cin * g.t_in..(b + 1) * g.cin * g.t_in],
                    g.t_in as isize,
                    1,
                );
            }
            if let Some(dw) = dw.as_mut() {
                // dW[cin, rows] += x[cin, t_in] * gcols^T
                T::gemm(
                    g.cin,
                    g.t_in,
                    rows,
                    T::one(),
                    x.item(b),
                    g.t_in as isize,
                    1,
                    &gcols,
                    1,
                    g.t_in as isize,
                    T::one(),
                    dw,
                    rows as isize,
                    1,
                );
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: needs
            .bias
            .then(|| bias_grad(grad_out, g.batch, g.cout, g.t_out)),
    })
}

pub fn leaky_relu<T: Real>(x: &Tensor3<T>, slope: T) -> Tensor3<T> {
    x.map(|v| if v >= T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor3<T>, grad_out: &[T], slope: T) -> Vec<T> {
    x.data()
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v >= T::zero() { g } else { g * slope })
        .collect()
}

/// Stabilizer inside the global-norm square root.
pub const GLOBAL_NORM_EPS: f64 = 1e-8;

/// Divides every batch item by its RMS over all channels and time steps.
/// Returns the output and the per-item divisor `sqrt(mean(a^2) + eps)`.
pub fn global_norm<T: Real>(x: &Tensor3<T>) -> (Tensor3<T>, Vec<T>) {
    let shape = x.shape();
    let n = shape.item_len();
    let eps = T::lit(GLOBAL_NORM_EPS);
    let mut out = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(shape.batch);
    for b in 0..shape.batch {
        let item = x.item(b);
        let ms = if n == 0 {
            T::zero()
        } else {
            item.iter().fold(T::zero(), |acc, &v| acc + v * v) / T::from_usize(n).unwrap()
        };
        let s = (ms + eps).sqrt();
        out.extend(item.iter().map(|&v| v / s));
        scales.push(s);
    }
    (Tensor3::new(shape, out).expect("shape preserved"), scales)
}

/// `dL/da = (g - b * mean(g * b)) / s` per batch item.
pub fn global_norm_backward<T: Real>(out: &Tensor3<T>, scales: &[T], grad_out: &[T]) -> Vec<T> {
    let n = out.shape().item_len();
    let nf = T::from_usize(n.max(1)).unwrap();
    let mut dx = Vec::with_capacity(out.len());
    for (b, &s) in scales.iter().enumerate() {
        let bi = out.item(b);
        let gi = &grad_out[b * n..(b + 1) * n];
        let proj = bi
            .iter()
            .zip(gi)
            .fold(T::zero(), |acc, (&bv, &gv)| acc + bv * gv)
            / nf;
        dx.extend(bi.iter().zip(gi).map(|(&bv, &gv)| (gv - bv * proj) / s));
    }
    dx
}

/// Tiles the channel block `factor` times: output channel `j` is input channel `j % channels`.
pub fn duplicate_channels<T: Real>(x: &Tensor3<T>, factor: usize) -> Result<Tensor3<T>> {
    if factor == 0 {
        return Err(Error::shape("duplicate_channels factor must be >= 1"));
    }
    let s = x.shape();
    let mut out = Vec::with_capacity(x.len() * factor);
    for b in 0..s.batch {
        for _ in 0..factor {
            out.extend_from_slice(x.item(b));
        }
    }
    Tensor3::new(Shape::new(s.batch, s.channels * factor, s.time), out)
}

/// Output channel `j` is the mean of input channels `j, j + out_ch, j + 2 out_ch, ...`.
pub fn group_mean_channels<T: Real>(x: &Tensor3<T>, out_ch: usize) -> Result<Tensor3<T>> {
    let s = x.shape();
    if out_ch == 0 || s.channels % out_ch != 0 {
        return Err(Error::shape(format!(
            "cannot reduce {} channels to {out_ch} by group mean",
            s.channels
        )));
    }
    let groups = s.channels / out_ch;
    let inv = T::one() / T::from_usize(groups).unwrap();
    let block = out_ch * s.time;
    let mut out = vec![T::zero(); s.batch * block];
    for b in 0..s.batch {
        let item = x.item(b);
        let o = &mut out[b * block..(b + 1) * block];
        for grp in 0..groups {
            for (acc, &v) in o.iter_mut().zip(&item[grp * block..(grp + 1) * block]) {
                *acc += v;
            }
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor3::new(Shape::new(s.batch, out_ch, s.time), out)
}

/// Keeps channels `[start, start + count)`.
pub fn slice_channels<T: Real>(x: &Tensor3<T>, start: usize, count: usize) -> Result<Tensor3<T>> {
    let s = x.shape();
    if start + count > s.channels || count == 0 {
        return Err(Error::shape(format!(
            "channel slice {start}..{} out of range for {} channels",
            start + count,
            s.channels
        )));
    }
    let mut out = Vec::with_capacity(s.batch * count * s.time);
    for b in 0..s.batch {
        out.extend_from_slice(&x.item(b)[start * s.time..(start + count) * s.time]);
    }
    Tensor3::new(Shape::new(s.batch, count, s.time), out)
}

pub fn concat_channels<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>) -> Result<Tensor3<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch != sb.batch || sa.time != sb.time {
        return Err(Error::shape(format!("cannot concat {sa} with {sb}")));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..sa.batch {
        out.extend_from_slice(a.item(i));
        out.extend_from_slice(b.item(i));
    }
    Tensor3::new(Shape::new(sa.batch, sa.channels + sb.channels, sa.time), out)
}

/// Keeps the first `len` time steps of every channel.
pub fn trim_time<T: Real>(x: &Tensor3<T>, len: usize) -> Result<Tensor3<T>> {
    let s = x.shape();
    if len > s.time || len == 0 {
        return Err(Error::shape(format!(
            "cannot trim time {} to {len}",
            s.time
        )));
    }
    let mut out = Vec::with_capacity(s.batch * s.channels * len);
    for row in x.data().chunks(s.time) {
        out.extend_from_slice(&row[..len]);
    }
    Tensor3::new(Shape::new(s.batch, s.channels, len), out)
}

/// Right-pads every channel with zeros to `len`.
pub fn pad_time<T: Real>(x: &Tensor3<T>, len: usize) -> Result<Tensor3<T>> {
    let s = x.shape();
    if len < s.time {
        return Err(Error::shape(format!("cannot pad time {} to {len}", s.time)));
    }
    let mut out = Vec::with_capacity(s.batch * s.channels * len);
    for row in x.data().chunks(s.time) {
        out.extend_from_slice(row);
        out.extend(std::iter::repeat_n(T::zero(), len - s.time));
    }
    Tensor3::new(Shape::new(s.batch, s.channels, len), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(v: &[f64]) -> Tensor3<f64> {
        Tensor3::from_signal(v)
    }

    fn w(out: usize, inp: usize, k: usize, v: &[f64]) -> Tensor3<f64> {
        Tensor3::new(Shape::new(out, inp, k), v.to_vec()).unwrap()
    }

    /// Direct sliding-window evaluation.
    fn conv_naive(x: &[f64], kern: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let n = (x.len() + 2 * pad - kern.len()) / stride + 1;
        (0..n)
            .map(|t| {
                kern.iter()
                    .enumerate()
                    .map(|(j, &kv)| {
                        let idx = (t * stride + j) as isize - pad as isize;
                        if idx < 0 || idx as usize >= x.len() {
                            0.0
                        } else {
                            kv * x[idx as usize]
                        }
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = sig(&[1.0, -2.0, 3.5]);
        let y = conv1d(&x, &w(1, 1, 1, &[1.0]), Some(&[0.0]), ConvSpec::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv1d_box_filter() {
        let x = sig(&[1.0, 2.0, 3.0, 4.0]);
        let y = conv1d(&x, &w(1, 1, 3, &[1.0, 1.0, 1.0]), Some(&[0.0]), ConvSpec::new(1, 1)).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 7.0]);
        assert_eq!(conv_naive(x.data(), &[1.0, 1.0, 1.0], 1, 1), vec![3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn conv1d_strided_matches_naive() {
        let x: Vec<f64> = (0..23).map(|i| (i as f64 * 0.37).sin()).collect();
        let k = [0.5, -1.0, 2.0, 0.25, 1.5];
        for (stride, pad) in [(1, 0), (2, 2), (4, 2), (3, 1), (4, 0)] {
            let y = conv1d(&sig(&x), &w(1, 1, 5, &k), None, ConvSpec::new(stride, pad)).unwrap();
            let expect = conv_naive(&x, &k, stride, pad);
            assert_eq!(y.shape().time, expect.len());
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_output_shape() {
        assert_eq!(conv_out_len(8192, 5, 4, 2), Some(2048));
        assert_eq!(conv_out_len(2, 5, 1, 0), None);
        let x = Tensor3::<f32>::zeros(Shape::new(1, 2, 4));
        let bad = Tensor3::<f32>::zeros(Shape::new(1, 3, 1));
        assert!(matches!(
            conv1d(&x, &bad, None, ConvSpec::new(1, 0)),
            Err(Error::Shape(_))
        ));
        let wide = Tensor3::<f32>::zeros(Shape::new(1, 2, 9));
        assert!(conv1d(&x, &wide, None, ConvSpec::new(1, 0)).is_err());
    }

    #[test]
    fn grouped_conv_matches_per_group_convs() {
        let x = Tensor3::new(
            Shape::new(1, 4, 6),
            (0..24).map(|v| v as f64 * 0.1 - 1.0).collect(),
        )
        .unwrap();
        let wt = Tensor3::new(
            Shape::new(2, 2, 3),
            (0..12).map(|v| (v as f64).cos()).collect(),
        )
        .unwrap();
        let y = conv1d(&x, &wt, None, ConvSpec::grouped(1, 1, 2)).unwrap();
        for grp in 0..2 {
            let xs = slice_channels(&x, grp * 2, 2).unwrap();
            let ws = Tensor3::new(
                Shape::new(1, 2, 3),
                wt.data()[grp * 6..grp * 6 + 6].to_vec(),
            )
            .unwrap();
            let ys = conv1d(&xs, &ws, None, ConvSpec::new(1, 1)).unwrap();
            assert_eq!(ys.data(), y.channel(0, grp));
        }
    }

    #[test]
    fn conv_transpose_scatter_add() {
        let y = conv_transpose1d(&sig(&[1.0, 2.0]), &w(1, 1, 2, &[1.0, 1.0]), None, 2, 0).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0]);
        let y = conv_transpose1d(&sig(&[5.0]), &w(1, 1, 1, &[1.0]), None, 1, 0).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(conv_transpose_out_len(2048, 5, 4, 2), Some(8189));
        assert_eq!(conv_transpose_out_len(2048, 5, 4, 0), Some(8193));
    }

    #[test]
    fn leaky_relu_values() {
        let y = leaky_relu(&sig(&[2.0, -3.0, 0.0]), 0.1);
        assert_eq!(y.data()[0], 2.0);
        assert!((y.data()[1] + 0.3).abs() < 1e-15);
        assert_eq!(y.data()[2], 0.0);
    }

    #[test]
    fn global_norm_values() {
        let (zero, _) = global_norm(&Tensor3::<f64>::zeros(Shape::new(2, 3, 4)));
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let (b, s) = global_norm(&sig(&[3.0, 4.0]));
        // mean square 12.5
        assert!((s[0] - (12.5f64 + 1e-8).sqrt()).abs() < 1e-15);
        assert!((b.data()[0] - 0.848528).abs() < 1e-5);
        assert!((b.data()[1] - 1.131371).abs() < 1e-5);
    }

    #[test]
    fn global_norm_is_per_item() {
        let x = Tensor3::<f64>::new(Shape::new(2, 1, 2), vec![3.0, 4.0, 300.0, 400.0]).unwrap();
        let (b, _) = global_norm(&x);
        assert!((b.data()[0] - b.data()[2]).abs() < 1e-9);
        assert!((b.data()[1] - b.data()[3]).abs() < 1e-9);
    }

    #[test]
    fn channel_tiling_and_group_mean() {
        let x = Tensor3::new(Shape::new(1, 2, 1), vec![1.0, 2.0]).unwrap();
        let d = duplicate_channels(&x, 2).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(group_mean_channels(&d, 2).unwrap(), x);
        assert_eq!(duplicate_channels(&x, 1).unwrap(), x);
        let m = group_mean_channels(&Tensor3::new(Shape::new(1, 2, 1), vec![2.0, 4.0]).unwrap(), 1)
            .unwrap();
        assert_eq!(m.data(), &[3.0]);
        assert!(group_mean_channels(&d, 3).is_err());
    }

    #[test]
    fn concat_then_slice() {
        let a = Tensor3::new(Shape::new(2, 3, 16), (0..96).map(f64::from).collect()).unwrap();
        let b = Tensor3::<f64>::full(Shape::new(2, 5, 16), -1.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 8, 16));
        assert_eq!(slice_channels(&c, 0, 3).unwrap(), a);
        let short = Tensor3::<f64>::zeros(Shape::new(2, 5, 15));
        assert!(concat_channels(&a, &short).is_err());
    }

    #[test]
    fn trim_and_pad() {
        let x = Tensor3::new(Shape::new(1, 2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(trim_time(&x, 2).unwrap().data(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(
            pad_time(&x, 4).unwrap().data(),
            &[1.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0, 0.0]
        );
        assert!(trim_time(&x, 4).is_err());
    }
}
