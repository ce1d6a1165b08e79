//! Convolutional building blocks: plain convolution with pooling for the
//! encoder, transposed convolution and channel concatenation (skip wiring)
//! for the decoders, per-pixel channel softmax for the classification head.
//!
//! Convolution uses the cross-correlation convention (no kernel flip).
//! Everything is NCHW row-major f64. The inner loops are written so each
//! output element accumulates its terms in (in-channel, ky, kx) order, which
//! keeps results identical to the naive nested-loop formulation.

use crate::data::Rng;
use crate::error::{AuxError, Result};
use crate::tensor::{Op, Tensor};

/// 2D convolution parameters. Weight layout `[out, in, k, k]`, bias `[out]`.
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Transposed 2D convolution parameters. Weight layout `[in, out, k, k]`
/// (so a conv weight buffer `[B, A, k, k]` is directly the matched
/// transposed kernel mapping B -> A channels), bias `[out]`.
pub struct TransposedConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Kaiming-uniform fan-in initialization: uniform in ±sqrt(6 / fan_in).
fn kaiming_uniform(rng: &mut Rng, count: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..count).map(|_| (rng.next_f64() * 2.0 - 1.0) * bound).collect()
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let count = out_channels * in_channels * kernel * kernel;
        let weights = Tensor::from_vec(
            &[out_channels, in_channels, kernel, kernel],
            kaiming_uniform(rng, count, in_channels * kernel * kernel),
            true,
        )
        .expect("conv weight shape");
        let bias = Tensor::zeros(&[out_channels], true);
        ConvSpec { in_channels, out_channels, kernel, stride, padding, weights, bias }
    }

    /// Build from explicit buffers (tests, oracles).
    pub fn with_params(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let weights = Tensor::from_vec(
            &[out_channels, in_channels, kernel, kernel],
            weights,
            true,
        )?;
        let bias = Tensor::from_vec(&[out_channels], bias, true)?;
        Ok(ConvSpec { in_channels, out_channels, kernel, stride, padding, weights, bias })
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

impl TransposedConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let count = in_channels * out_channels * kernel * kernel;
        let weights = Tensor::from_vec(
            &[in_channels, out_channels, kernel, kernel],
            kaiming_uniform(rng, count, in_channels * kernel * kernel),
            true,
        )
        .expect("transposed conv weight shape");
        let bias = Tensor::zeros(&[out_channels], true);
        TransposedConvSpec { in_channels, out_channels, kernel, stride, weights, bias }
    }

    pub fn with_params(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let weights = Tensor::from_vec(
            &[in_channels, out_channels, kernel, kernel],
            weights,
            true,
        )?;
        let bias = Tensor::from_vec(&[out_channels], bias, true)?;
        Ok(TransposedConvSpec { in_channels, out_channels, kernel, stride, weights, bias })
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel + self.out_channels
    }
}

fn dims_nchw(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(AuxError::ShapeMismatch(format!(
            "{what}: expected NCHW tensor, got shape {other:?}"
        ))),
    }
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(AuxError::ShapeMismatch(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output rows y in [0, out_extent) for which `y*stride + off` lies inside
/// [0, in_extent).
fn valid_out_range(out_extent: usize, in_extent: usize, off: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let top = in_extent as isize - 1 - off;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top / s + 1).min(out_extent as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Dot product with a fixed 8-way unroll (fixed summation order).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0f64; 8];
    let chunks = n / 8;
    for i in 0..chunks {
        let j = i * 8;
        for lane in 0..8 {
            acc[lane] += a[j + lane] * b[j + lane];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for j in chunks * 8..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(out: &mut [f64], x: &[f64], a: f64) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Unfold a `[C, H, W]` plane block into `col[(ic*k + ky)*k + kx][y*W' + x]`
/// rows for a stride-1 convolution; out-of-image taps are zero.
///
/// The row order matches the weight layout `[out, in, k, k]`, so a GEMM over
/// rows accumulates each output element in the same (ic, ky, kx) order as
/// the naive nested loops.
fn im2col_s1(
    x: &[f64],
    (c_in, h_in, w_in): (usize, usize, usize),
    (k, p): (usize, usize),
    (h_out, w_out): (usize, usize),
    col: &mut [f64],
) {
    let how = h_out * w_out;
    let ihw = h_in * w_in;
    debug_assert_eq!(col.len(), c_in * k * k * how);
    for ic in 0..c_in {
        let iplane = &x[ic * ihw..][..ihw];
        for ky in 0..k {
            for kx in 0..k {
                let crow = &mut col[((ic * k + ky) * k + kx) * how..][..how];
                let xlo = p.saturating_sub(kx).min(w_out);
                let xhi = (w_in + p - kx).min(w_out).max(xlo);
                for y in 0..h_out {
                    let dst = &mut crow[y * w_out..(y + 1) * w_out];
                    let iy = y as isize + ky as isize - p as isize;
                    if iy < 0 || iy >= h_in as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..xlo].fill(0.0);
                    dst[xhi..].fill(0.0);
                    if xhi > xlo {
                        let src = (iy as usize) * w_in + xlo + kx - p;
                        dst[xlo..xhi].copy_from_slice(&iplane[src..src + (xhi - xlo)]);
                    }
                }
            }
        }
    }
}

/// Transposed unfold: `col_nk[y*W' + x][(ic*k + ky)*k + kx]`, one
/// contiguous receptive-field row per output pixel. Used by the weight
/// gradient, which then accumulates with axpy over pixel rows.
fn im2col_nk_s1(
    x: &[f64],
    (c_in, h_in, w_in): (usize, usize, usize),
    (k, p): (usize, usize),
    (h_out, w_out): (usize, usize),
    col: &mut [f64],
) {
    let ihw = h_in * w_in;
    let kk_total = c_in * k * k;
    debug_assert_eq!(col.len(), h_out * w_out * kk_total);
    for y in 0..h_out {
        for xx in 0..w_out {
            let row = &mut col[(y * w_out + xx) * kk_total..][..kk_total];
            let mut kk = 0;
            for ic in 0..c_in {
                let iplane = &x[ic * ihw..][..ihw];
                for ky in 0..k {
                    let iy = y as isize + ky as isize - p as isize;
                    if iy < 0 || iy >= h_in as isize {
                        row[kk..kk + k].fill(0.0);
                        kk += k;
                        continue;
                    }
                    let irow = &iplane[(iy as usize) * w_in..(iy as usize + 1) * w_in];
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - p as isize;
                        row[kk] = if ix < 0 || ix >= w_in as isize {
                            0.0
                        } else {
                            irow[ix as usize]
                        };
                        kk += 1;
                    }
                }
            }
        }
    }
}

/// Fold `dcol` rows back onto the input plane block (adjoint of
/// `im2col_s1`); out-of-image taps are dropped.
fn col2im_add_s1(
    dcol: &[f64],
    (c_in, h_in, w_in): (usize, usize, usize),
    (k, p): (usize, usize),
    (h_out, w_out): (usize, usize),
    dx: &mut [f64],
) {
    let how = h_out * w_out;
    let ihw = h_in * w_in;
    for ic in 0..c_in {
        let dplane = &mut dx[ic * ihw..][..ihw];
        for ky in 0..k {
            for kx in 0..k {
                let crow = &dcol[((ic * k + ky) * k + kx) * how..][..how];
                let xlo = p.saturating_sub(kx).min(w_out);
                let xhi = (w_in + p - kx).min(w_out).max(xlo);
                if xhi <= xlo {
                    continue;
                }
                for y in 0..h_out {
                    let iy = y as isize + ky as isize - p as isize;
                    if iy < 0 || iy >= h_in as isize {
                        continue;
                    }
                    let dst_base = (iy as usize) * w_in + xlo + kx - p;
                    axpy(
                        &mut dplane[dst_base..dst_base + (xhi - xlo)],
                        &crow[y * w_out + xlo..y * w_out + xhi],
                        1.0,
                    );
                }
            }
        }
    }
}

// ── convolution ─────────────────────────────────────────────────────────

/// Cross-correlation plus bias. Output `[N, out, H', W']` with
/// `H' = (H + 2p - k)/stride + 1`.
pub fn conv2d(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (n_batch, c_in, h_in, w_in) = dims_nchw(input, "conv2d input")?;
    if c_in != spec.in_channels {
        return Err(AuxError::ShapeMismatch(format!(
            "conv2d: input has {c_in} channels, spec wants {}",
            spec.in_channels
        )));
    }
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let c_out = spec.out_channels;
    let h_out = conv_out_extent(h_in, k, s, p)?;
    let w_out = conv_out_extent(w_in, k, s, p)?;

    let x = input.data();
    let w = spec.weights.data();
    let b = spec.bias.data();
    let mut out = vec![0.0; n_batch * c_out * h_out * w_out];
    let (ihw, ohw) = (h_in * w_in, h_out * w_out);
    let kk_total = c_in * k * k;

    if s == 1 {
        // One GEMM per sample over unfolded input rows: every output element
        // still accumulates bias first, then taps in (ic, ky, kx) order.
        let identity_col = k == 1 && p == 0;
        let mut col = vec![0.0; if identity_col { 0 } else { kk_total * ohw }];
        for n in 0..n_batch {
            let sample = &x[n * c_in * ihw..][..c_in * ihw];
            if !identity_col {
                im2col_s1(sample, (c_in, h_in, w_in), (k, p), (h_out, w_out), &mut col);
            }
            let rows: &[f64] = if identity_col { sample } else { &col };
            let out_block = &mut out[n * c_out * ohw..][..c_out * ohw];
            for oc in 0..c_out {
                out_block[oc * ohw..][..ohw].fill(b[oc]);
            }
            // Tiles keep a handful of unfolded rows hot in cache across all
            // output channels; per-element accumulation stays in kk order.
            for kk0 in (0..kk_total).step_by(8) {
                let kk1 = (kk0 + 8).min(kk_total);
                for oc in 0..c_out {
                    let oplane = &mut out_block[oc * ohw..][..ohw];
                    for kk in kk0..kk1 {
                        axpy(oplane, &rows[kk * ohw..][..ohw], w[oc * kk_total + kk]);
                    }
                }
            }
        }
    } else {
        for n in 0..n_batch {
            for oc in 0..c_out {
                let oplane = &mut out[(n * c_out + oc) * ohw..][..ohw];
                oplane.fill(b[oc]);
                for ic in 0..c_in {
                    let iplane = &x[(n * c_in + ic) * ihw..][..ihw];
                    let wbase = (oc * c_in + ic) * k * k;
                    for ky in 0..k {
                        let yoff = ky as isize - p as isize;
                        let (ylo, yhi) = valid_out_range(h_out, h_in, yoff, s);
                        for kx in 0..k {
                            let wv = w[wbase + ky * k + kx];
                            let xoff = kx as isize - p as isize;
                            let (xlo, xhi) = valid_out_range(w_out, w_in, xoff, s);
                            if xhi <= xlo {
                                continue;
                            }
                            for y in ylo..yhi {
                                let iy = (y as isize * s as isize + yoff) as usize;
                                let irow = &iplane[iy * w_in..(iy + 1) * w_in];
                                let orow = &mut oplane[y * w_out..(y + 1) * w_out];
                                for xx in xlo..xhi {
                                    let ix = (xx as isize * s as isize + xoff) as usize;
                                    orow[xx] += wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    drop(x);
    drop(w);
    drop(b);
    Ok(Tensor::record_op(
        vec![n_batch, c_out, h_out, w_out],
        out,
        Op::Conv2d { stride: s, padding: p },
        vec![input.clone(), spec.weights.clone(), spec.bias.clone()],
    ))
}

pub(crate) fn conv2d_backward(
    inputs: &[Tensor],
    out: &Tensor,
    upstream: &[f64],
    stride: usize,
    padding: usize,
    sink: &mut dyn FnMut(&Tensor, Vec<f64>),
) {
    let (input, weights, bias) = (&inputs[0], &inputs[1], &inputs[2]);
    let [n_batch, c_in, h_in, w_in] = *input.shape() else { unreachable!() };
    let [c_out, _, k, _] = *weights.shape() else { unreachable!() };
    let [_, _, h_out, w_out] = *out.shape() else { unreachable!() };
    let (s, p) = (stride, padding);
    let (ihw, ohw) = (h_in * w_in, h_out * w_out);

    if bias.requires_grad() {
        let mut db = vec![0.0; c_out];
        for n in 0..n_batch {
            for oc in 0..c_out {
                let uplane = &upstream[(n * c_out + oc) * ohw..][..ohw];
                db[oc] += uplane.iter().sum::<f64>();
            }
        }
        sink(bias, db);
    }

    let kk_total = c_in * k * k;
    if s == 1 {
        // dW rows are dot products against the unfolded input; dInput folds
        // Wᵀ·dOut back through col2im. The unfold is recomputed here rather
        // than saved from the forward pass.
        let identity_col = k == 1 && p == 0;
        let x = input.data();
        let mut col_nk = if weights.requires_grad() && !identity_col {
            vec![0.0; ohw * kk_total]
        } else {
            Vec::new()
        };
        let mut dw = if weights.requires_grad() { vec![0.0; c_out * kk_total] } else { Vec::new() };
        let mut dx = if input.requires_grad() { vec![0.0; n_batch * c_in * ihw] } else { Vec::new() };
        let mut dcol = if input.requires_grad() && !identity_col {
            vec![0.0; kk_total * ohw]
        } else {
            Vec::new()
        };
        let w = weights.data();
        for n in 0..n_batch {
            let sample = &x[n * c_in * ihw..][..c_in * ihw];
            let ublock = &upstream[n * c_out * ohw..][..c_out * ohw];
            if weights.requires_grad() {
                if identity_col {
                    // dW is a small stack of plain dots here.
                    for oc in 0..c_out {
                        let uplane = &ublock[oc * ohw..][..ohw];
                        for kk in 0..kk_total {
                            dw[oc * kk_total + kk] += dot(uplane, &sample[kk * ohw..][..ohw]);
                        }
                    }
                } else {
                    im2col_nk_s1(sample, (c_in, h_in, w_in), (k, p), (h_out, w_out), &mut col_nk);
                    // dw rows stay hot across a tile of pixel rows.
                    for n0 in (0..ohw).step_by(64) {
                        let n1 = (n0 + 64).min(ohw);
                        for oc in 0..c_out {
                            let dwrow = &mut dw[oc * kk_total..][..kk_total];
                            let uplane = &ublock[oc * ohw..][..ohw];
                            for np in n0..n1 {
                                axpy(dwrow, &col_nk[np * kk_total..][..kk_total], uplane[np]);
                            }
                        }
                    }
                }
            }
            if input.requires_grad() {
                if identity_col {
                    let dsample = &mut dx[n * c_in * ihw..][..c_in * ihw];
                    for oc in 0..c_out {
                        let uplane = &ublock[oc * ohw..][..ohw];
                        for kk in 0..kk_total {
                            axpy(&mut dsample[kk * ihw..][..ihw], uplane, w[oc * kk_total + kk]);
                        }
                    }
                } else {
                    dcol.fill(0.0);
                    for kk0 in (0..kk_total).step_by(8) {
                        let kk1 = (kk0 + 8).min(kk_total);
                        for oc in 0..c_out {
                            let uplane = &ublock[oc * ohw..][..ohw];
                            for kk in kk0..kk1 {
                                axpy(&mut dcol[kk * ohw..][..ohw], uplane, w[oc * kk_total + kk]);
                            }
                        }
                    }
                    col2im_add_s1(
                        &dcol,
                        (c_in, h_in, w_in),
                        (k, p),
                        (h_out, w_out),
                        &mut dx[n * c_in * ihw..][..c_in * ihw],
                    );
                }
            }
        }
        drop(w);
        drop(x);
        if weights.requires_grad() {
            sink(weights, dw);
        }
        if input.requires_grad() {
            sink(input, dx);
        }
        return;
    }

    if weights.requires_grad() {
        let x = input.data();
        let mut dw = vec![0.0; c_out * c_in * k * k];
        for n in 0..n_batch {
            for oc in 0..c_out {
                let uplane = &upstream[(n * c_out + oc) * ohw..][..ohw];
                for ic in 0..c_in {
                    let iplane = &x[(n * c_in + ic) * ihw..][..ihw];
                    let wbase = (oc * c_in + ic) * k * k;
                    for ky in 0..k {
                        let yoff = ky as isize - p as isize;
                        let (ylo, yhi) = valid_out_range(h_out, h_in, yoff, s);
                        for kx in 0..k {
                            let xoff = kx as isize - p as isize;
                            let (xlo, xhi) = valid_out_range(w_out, w_in, xoff, s);
                            if xhi <= xlo {
                                continue;
                            }
                            let mut acc = 0.0;
                            for y in ylo..yhi {
                                let iy = (y as isize * s as isize + yoff) as usize;
                                for xx in xlo..xhi {
                                    let ix = (xx as isize * s as isize + xoff) as usize;
                                    acc += uplane[y * w_out + xx] * iplane[iy * w_in + ix];
                                }
                            }
                            dw[wbase + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
        sink(weights, dw);
    }

    if input.requires_grad() {
        let w = weights.data();
        let mut dx = vec![0.0; n_batch * c_in * ihw];
        for n in 0..n_batch {
            for oc in 0..c_out {
                let uplane = &upstream[(n * c_out + oc) * ohw..][..ohw];
                for ic in 0..c_in {
                    let dplane = &mut dx[(n * c_in + ic) * ihw..][..ihw];
                    let wbase = (oc * c_in + ic) * k * k;
                    for ky in 0..k {
                        let yoff = ky as isize - p as isize;
                        let (ylo, yhi) = valid_out_range(h_out, h_in, yoff, s);
                        for kx in 0..k {
                            let wv = w[wbase + ky * k + kx];
                            let xoff = kx as isize - p as isize;
                            let (xlo, xhi) = valid_out_range(w_out, w_in, xoff, s);
                            if xhi <= xlo {
                                continue;
                            }
                            for y in ylo..yhi {
                                let iy = (y as isize * s as isize + yoff) as usize;
                                for xx in xlo..xhi {
                                    let ix = (xx as isize * s as isize + xoff) as usize;
                                    dplane[iy * w_in + ix] += wv * uplane[y * w_out + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
        sink(input, dx);
    }
}

// ── transposed convolution ──────────────────────────────────────────────

/// Upsampling as the adjoint of convolution. Output spatial size
/// `(H - 1) * stride + k` (no output padding).
pub fn transposed_conv2d(input: &Tensor, spec: &TransposedConvSpec) -> Result<Tensor> {
    let (n_batch, c_in, h_in, w_in) = dims_nchw(input, "transposed_conv2d input")?;
    if c_in != spec.in_channels {
        return Err(AuxError::ShapeMismatch(format!(
            "transposed_conv2d: input has {c_in} channels, spec wants {}",
            spec.in_channels
        )));
    }
    let (k, s) = (spec.kernel, spec.stride);
    let c_out = spec.out_channels;
    let h_out = (h_in - 1) * s + k;
    let w_out = (w_in - 1) * s + k;

    let x = input.data();
    let w = spec.weights.data();
    let b = spec.bias.data();
    let mut out = vec![0.0; n_batch * c_out * h_out * w_out];
    let (ihw, ohw) = (h_in * w_in, h_out * w_out);

    if k == s {
        // Non-overlapping stamps: each output element belongs to exactly one
        // kernel tap, so the op splits into k·k independent 1x1 mixes
        // scattered into interleaved output positions.
        let mut sub = vec![0.0; ihw];
        for n in 0..n_batch {
            let sample = &x[n * c_in * ihw..][..c_in * ihw];
            for oc in 0..c_out {
                let oplane = &mut out[(n * c_out + oc) * ohw..][..ohw];
                for ky in 0..k {
                    for kx in 0..k {
                        sub.fill(b[oc]);
                        for ic in 0..c_in {
                            axpy(&mut sub, &sample[ic * ihw..][..ihw], w[(ic * c_out + oc) * k * k + ky * k + kx]);
                        }
                        for y in 0..h_in {
                            let orow = &mut oplane[(y * s + ky) * w_out..(y * s + ky + 1) * w_out];
                            for (xx, &v) in sub[y * w_in..(y + 1) * w_in].iter().enumerate() {
                                orow[xx * s + kx] = v;
                            }
                        }
                    }
                }
            }
        }
    } else {
        for n in 0..n_batch {
            for oc in 0..c_out {
                let oplane = &mut out[(n * c_out + oc) * ohw..][..ohw];
                oplane.fill(b[oc]);
                for ic in 0..c_in {
                    let iplane = &x[(n * c_in + ic) * ihw..][..ihw];
                    let wbase = (ic * c_out + oc) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = w[wbase + ky * k + kx];
                            for y in 0..h_in {
                                let oy = y * s + ky;
                                let irow = &iplane[y * w_in..(y + 1) * w_in];
                                if s == 1 {
                                    let orow = &mut oplane[oy * w_out + kx..oy * w_out + kx + w_in];
                                    for (o, &i) in orow.iter_mut().zip(irow) {
                                        *o += wv * i;
                                    }
                                } else {
                                    let orow = &mut oplane[oy * w_out..(oy + 1) * w_out];
                                    for (xx, &i) in irow.iter().enumerate() {
                                        orow[xx * s + kx] += wv * i;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    drop(x);
    drop(w);
    drop(b);
    Ok(Tensor::record_op(
        vec![n_batch, c_out, h_out, w_out],
        out,
        Op::TransposedConv2d { stride: s },
        vec![input.clone(), spec.weights.clone(), spec.bias.clone()],
    ))
}

pub(crate) fn transposed_conv2d_backward(
    inputs: &[Tensor],
    upstream: &[f64],
    stride: usize,
    sink: &mut dyn FnMut(&Tensor, Vec<f64>),
) {
    let (input, weights, bias) = (&inputs[0], &inputs[1], &inputs[2]);
    let [n_batch, c_in, h_in, w_in] = *input.shape() else { unreachable!() };
    let [_, c_out, k, _] = *weights.shape() else { unreachable!() };
    let s = stride;
    let h_out = (h_in - 1) * s + k;
    let w_out = (w_in - 1) * s + k;
    let (ihw, ohw) = (h_in * w_in, h_out * w_out);

    if bias.requires_grad() {
        let mut db = vec![0.0; c_out];
        for n in 0..n_batch {
            for oc in 0..c_out {
                db[oc] += upstream[(n * c_out + oc) * ohw..][..ohw].iter().sum::<f64>();
            }
        }
        sink(bias, db);
    }

    if k == s && (weights.requires_grad() || input.requires_grad()) {
        // Gather each (oc, ky, kx) output subplane once, then both the
        // weight and input gradients are contiguous dot/axpy passes.
        let x = input.data();
        let w = weights.data();
        let mut dw = if weights.requires_grad() { vec![0.0; c_in * c_out * k * k] } else { Vec::new() };
        let mut dx = if input.requires_grad() { vec![0.0; n_batch * c_in * ihw] } else { Vec::new() };
        let mut usub = vec![0.0; ihw];
        for n in 0..n_batch {
            let sample = &x[n * c_in * ihw..][..c_in * ihw];
            for oc in 0..c_out {
                let uplane = &upstream[(n * c_out + oc) * ohw..][..ohw];
                for ky in 0..k {
                    for kx in 0..k {
                        for y in 0..h_in {
                            let urow = &uplane[(y * s + ky) * w_out..(y * s + ky + 1) * w_out];
                            for (xx, u) in usub[y * w_in..(y + 1) * w_in].iter_mut().enumerate() {
                                *u = urow[xx * s + kx];
                            }
                        }
                        if weights.requires_grad() {
                            for ic in 0..c_in {
                                dw[(ic * c_out + oc) * k * k + ky * k + kx] +=
                                    dot(&sample[ic * ihw..][..ihw], &usub);
                            }
                        }
                        if input.requires_grad() {
                            let dsample = &mut dx[n * c_in * ihw..][..c_in * ihw];
                            for ic in 0..c_in {
                                axpy(
                                    &mut dsample[ic * ihw..][..ihw],
                                    &usub,
                                    w[(ic * c_out + oc) * k * k + ky * k + kx],
                                );
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        drop(w);
        if weights.requires_grad() {
            sink(weights, dw);
        }
        if input.requires_grad() {
            sink(input, dx);
        }
        return;
    }

    if weights.requires_grad() {
        let x = input.data();
        let mut dw = vec![0.0; c_in * c_out * k * k];
        for n in 0..n_batch {
            for ic in 0..c_in {
                let iplane = &x[(n * c_in + ic) * ihw..][..ihw];
                for oc in 0..c_out {
                    let uplane = &upstream[(n * c_out + oc) * ohw..][..ohw];
                    let wbase = (ic * c_out + oc) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0;
                            for y in 0..h_in {
                                let urow_off = (y * s + ky) * w_out + kx;
                                let irow = &iplane[y * w_in..(y + 1) * w_in];
                                if s == 1 {
                                    acc += dot(irow, &uplane[urow_off..urow_off + w_in]);
                                } else {
                                    for (xx, &i) in irow.iter().enumerate() {
                                        acc += i * uplane[urow_off + xx * s];
                                    }
                                }
                            }
                            dw[wbase + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
        sink(weights, dw);
    }

    if input.requires_grad() {
        let w = weights.data();
        let mut dx = vec![0.0; n_batch * c_in * ihw];
        for n in 0..n_batch {
            for ic in 0..c_in {
                let dplane = &mut dx[(n * c_in + ic) * ihw..][..ihw];
                for oc in 0..c_out {
                    let uplane = &upstream[(n * c_out + oc) * ohw..][..ohw];
                    let wbase = (ic * c_out + oc) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = w[wbase + ky * k + kx];
                            for y in 0..h_in {
                                let urow_off = (y * s + ky) * w_out + kx;
                                let drow = &mut dplane[y * w_in..(y + 1) * w_in];
                                if s == 1 {
                                    for (d, &u) in
                                        drow.iter_mut().zip(&uplane[urow_off..urow_off + w_in])
                                    {
                                        *d += wv * u;
                                    }
                                } else {
                                    for (xx, d) in drow.iter_mut().enumerate() {
                                        *d += wv * uplane[urow_off + xx * s];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        sink(input, dx);
    }
}

// ── pooling ─────────────────────────────────────────────────────────────

/// 2x2 max pooling, stride 2. Gradient routes to the window argmax; ties go
/// to the first element in (0,0) (0,1) (1,0) (1,1) scan order.
pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    let (n_batch, c, h, w) = dims_nchw(input, "maxpool2 input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(AuxError::ShapeMismatch(format!(
            "maxpool2: extents must be even, got {h}x{w}"
        )));
    }
    let (h_out, w_out) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0; n_batch * c * h_out * w_out];
    let mut argmax = vec![0usize; out.len()];
    for nc in 0..n_batch * c {
        let iplane_off = nc * h * w;
        let oplane_off = nc * h_out * w_out;
        for y in 0..h_out {
            for xx in 0..w_out {
                let base = iplane_off + (2 * y) * w + 2 * xx;
                let mut best = x[base];
                let mut best_idx = base;
                for &cand in &[base + 1, base + w, base + w + 1] {
                    if x[cand] > best {
                        best = x[cand];
                        best_idx = cand;
                    }
                }
                out[oplane_off + y * w_out + xx] = best;
                argmax[oplane_off + y * w_out + xx] = best_idx;
            }
        }
    }
    drop(x);
    Ok(Tensor::record_op(
        vec![n_batch, c, h_out, w_out],
        out,
        Op::MaxPool2 { argmax },
        vec![input.clone()],
    ))
}

// ── softmax over channels ───────────────────────────────────────────────

/// Per-pixel distribution over the channel axis, stabilized by
/// max-subtraction.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    let (n_batch, c, h, w) = dims_nchw(input, "softmax_channels input")?;
    if c < 2 {
        return Err(AuxError::InvalidArgument(format!(
            "softmax_channels needs >= 2 channels, got {c}"
        )));
    }
    let x = input.data();
    if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
        return Err(AuxError::NonFinite(format!(
            "softmax_channels input at flat index {bad}"
        )));
    }
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for n in 0..n_batch {
        let base = n * c * hw;
        for px in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(x[base + ch * hw + px]);
            }
            let mut denom = 0.0;
            for ch in 0..c {
                let e = (x[base + ch * hw + px] - m).exp();
                out[base + ch * hw + px] = e;
                denom += e;
            }
            for ch in 0..c {
                out[base + ch * hw + px] /= denom;
            }
        }
    }
    drop(x);
    Ok(Tensor::record_op(
        vec![n_batch, c, h, w],
        out,
        Op::SoftmaxChannels,
        vec![input.clone()],
    ))
}

pub(crate) fn softmax_channels_backward(
    inputs: &[Tensor],
    out: &Tensor,
    mut upstream: Vec<f64>,
    sink: &mut dyn FnMut(&Tensor, Vec<f64>),
) {
    let input = &inputs[0];
    if !input.requires_grad() {
        return;
    }
    let [n_batch, c, h, w] = *out.shape() else { unreachable!() };
    let s = out.data();
    let hw = h * w;
    for n in 0..n_batch {
        let base = n * c * hw;
        for px in 0..hw {
            let mut dotp = 0.0;
            for ch in 0..c {
                let i = base + ch * hw + px;
                dotp += upstream[i] * s[i];
            }
            for ch in 0..c {
                let i = base + ch * hw + px;
                upstream[i] = s[i] * (upstream[i] - dotp);
            }
        }
    }
    drop(s);
    sink(input, upstream);
}

// ── channel concatenation (skip connections) ────────────────────────────

/// `[N, Ca, H, W] ++ [N, Cb, H, W] -> [N, Ca+Cb, H, W]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = dims_nchw(a, "concat_channels lhs")?;
    let (nb, cb, hb, wb) = dims_nchw(b, "concat_channels rhs")?;
    if na != nb || ha != hb || wa != wb {
        return Err(AuxError::ShapeMismatch(format!(
            "concat_channels: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let hw = ha * wa;
    let (xa, xb) = (a.data(), b.data());
    let mut out = vec![0.0; na * (ca + cb) * hw];
    for n in 0..na {
        let dst = &mut out[n * (ca + cb) * hw..][..(ca + cb) * hw];
        dst[..ca * hw].copy_from_slice(&xa[n * ca * hw..][..ca * hw]);
        dst[ca * hw..].copy_from_slice(&xb[n * cb * hw..][..cb * hw]);
    }
    drop(xa);
    drop(xb);
    Ok(Tensor::record_op(
        vec![na, ca + cb, ha, wa],
        out,
        Op::ConcatChannels { first_channels: ca },
        vec![a.clone(), b.clone()],
    ))
}

pub(crate) fn concat_channels_backward(
    inputs: &[Tensor],
    upstream: &[f64],
    first_channels: usize,
    sink: &mut dyn FnMut(&Tensor, Vec<f64>),
) {
    let (a, b) = (&inputs[0], &inputs[1]);
    let [n_batch, ca, h, w] = *a.shape() else { unreachable!() };
    let cb = b.shape()[1];
    debug_assert_eq!(ca, first_channels);
    let hw = h * w;
    if a.requires_grad() {
        let mut da = vec![0.0; n_batch * ca * hw];
        for n in 0..n_batch {
            da[n * ca * hw..][..ca * hw]
                .copy_from_slice(&upstream[n * (ca + cb) * hw..][..ca * hw]);
        }
        sink(a, da);
    }
    if b.requires_grad() {
        let mut db = vec![0.0; n_batch * cb * hw];
        for n in 0..n_batch {
            db[n * cb * hw..][..cb * hw]
                .copy_from_slice(&upstream[n * (ca + cb) * hw + ca * hw..][..cb * hw]);
        }
        sink(b, db);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn rng_data(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| lo + rng.next_f64() * (hi - lo)).collect()
    }

    /// Naive six-loop convolution, accumulating in (ic, ky, kx) order.
    fn conv2d_oracle(
        x: &[f64],
        (n_batch, c_in, h, w): (usize, usize, usize, usize),
        wts: &[f64],
        bias: &[f64],
        (c_out, k, s, p): (usize, usize, usize, usize),
    ) -> Vec<f64> {
        let h_out = (h + 2 * p - k) / s + 1;
        let w_out = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n_batch * c_out * h_out * w_out];
        for n in 0..n_batch {
            for oc in 0..c_out {
                for y in 0..h_out {
                    for xx in 0..w_out {
                        let mut acc = bias[oc];
                        for ic in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * s + ky) as isize - p as isize;
                                    let ix = (xx * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wts[((oc * c_in + ic) * k + ky) * k + kx]
                                        * x[((n * c_in + ic) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out[((n * c_out + oc) * h_out + y) * w_out + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut wts = vec![0.0; 9];
        wts[4] = 1.0; // center tap
        let spec = ConvSpec::with_params(1, 1, 3, 1, 1, wts, vec![0.0]).unwrap();
        let data = rng_data(3, 5 * 7, -1.0, 1.0);
        let x = Tensor::from_vec(&[1, 1, 5, 7], data.clone(), false).unwrap();
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(y.to_vec(), data);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let spec = ConvSpec::with_params(1, 1, 3, 1, 0, vec![1.0; 9], vec![0.5]).unwrap();
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9], false).unwrap();
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.value(), 9.5);
    }

    #[test]
    fn conv_matches_oracle_bitwise() {
        for (dims, co, k, s, p) in [
            ((1usize, 2usize, 5usize, 5usize), 3usize, 3usize, 1usize, 1usize),
            ((2, 4, 8, 8), 3, 3, 1, 1),
            ((2, 3, 8, 8), 2, 3, 2, 1),
            ((1, 2, 6, 6), 2, 1, 1, 0),
        ] {
            let (n, ci, h, w) = dims;
            let xdata = rng_data(11, n * ci * h * w, -1.0, 1.0);
            let wdata = rng_data(13, co * ci * k * k, -0.5, 0.5);
            let bdata = rng_data(17, co, -0.2, 0.2);
            let spec = ConvSpec::with_params(ci, co, k, s, p, wdata.clone(), bdata.clone()).unwrap();
            let x = Tensor::from_vec(&[n, ci, h, w], xdata.clone(), false).unwrap();
            let got = conv2d(&x, &spec).unwrap().to_vec();
            let want = conv2d_oracle(&xdata, dims, &wdata, &bdata, (co, k, s, p));
            assert_eq!(got, want, "mismatch for dims {dims:?} k{k} s{s} p{p}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut rng = Rng::new(1);
        let spec = ConvSpec::new(3, 4, 3, 1, 1, &mut rng);
        let x = Tensor::zeros(&[1, 2, 8, 8], false);
        assert!(conv2d(&x, &spec).is_err());
    }

    #[test]
    fn conv_param_count_formula() {
        let mut rng = Rng::new(1);
        let spec = ConvSpec::new(3, 8, 3, 1, 1, &mut rng);
        assert_eq!(spec.param_count(), 3 * 3 * 3 * 8 + 8);
        assert_eq!(
            spec.param_count(),
            spec.weights.numel() + spec.bias.numel()
        );
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        let y = maxpool2(&x).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);

        // Constant input: gradient goes to the top-left of each window.
        let c = Tensor::from_vec(&[1, 1, 2, 4], vec![7.0; 8], true).unwrap();
        let p = maxpool2(&c).unwrap();
        assert_eq!(p.to_vec(), vec![7.0, 7.0]);
        p.sum().unwrap().backward().unwrap();
        assert_eq!(c.grad().unwrap(), vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let data = rng_data(23, 2 * 3 * 4 * 4, -2.0, 2.0);
        let x = Tensor::from_vec(&[2, 3, 4, 4], data.clone(), false).unwrap();
        let y = maxpool2(&x).unwrap().to_vec();
        let mut want = Vec::new();
        for nc in 0..6 {
            for wy in 0..2 {
                for wx in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(data[nc * 16 + (2 * wy + dy) * 4 + 2 * wx + dx]);
                        }
                    }
                    want.push(m);
                }
            }
        }
        assert_eq!(y, want);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let x = Tensor::zeros(&[1, 1, 3, 4], false);
        assert!(maxpool2(&x).is_err());
    }

    #[test]
    fn tconv_single_pixel_stamps_kernel() {
        let spec = TransposedConvSpec::with_params(1, 1, 2, 2, vec![1.0; 4], vec![0.0]).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0], false).unwrap();
        let y = transposed_conv2d(&x, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![1.0; 4]);
    }

    #[test]
    fn tconv_zero_input_gives_bias() {
        let spec =
            TransposedConvSpec::with_params(2, 3, 2, 2, rng_data(5, 2 * 3 * 4, -1.0, 1.0), vec![0.25, -0.5, 1.0])
                .unwrap();
        let x = Tensor::zeros(&[1, 2, 3, 3], false);
        let y = transposed_conv2d(&x, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 3, 6, 6]);
        let out = y.to_vec();
        for oc in 0..3 {
            for v in &out[oc * 36..(oc + 1) * 36] {
                assert_eq!(*v, [0.25, -0.5, 1.0][oc]);
            }
        }
    }

    #[test]
    fn tconv_output_extent_formula() {
        let mut rng = Rng::new(2);
        let spec = TransposedConvSpec::new(4, 2, 2, 2, &mut rng);
        let x = Tensor::zeros(&[1, 4, 5, 9], false);
        let y = transposed_conv2d(&x, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 2, (5 - 1) * 2 + 2, (9 - 1) * 2 + 2]);
    }

    /// <conv(x), y> == <x, tconv(y)> when both use the same weight buffer and
    /// zero bias.
    #[test]
    fn conv_tconv_adjointness() {
        for (k, s, h, w) in [(3usize, 1usize, 6usize, 7usize), (2, 2, 6, 8)] {
            let (a, b) = (3usize, 2usize); // conv maps a->b channels
            let wdata = rng_data(31, b * a * k * k, -1.0, 1.0);
            let conv_spec =
                ConvSpec::with_params(a, b, k, s, 0, wdata.clone(), vec![0.0; b]).unwrap();
            let h_out = (h - k) / s + 1;
            let w_out = (w - k) / s + 1;
            let tconv_spec =
                TransposedConvSpec::with_params(b, a, k, s, wdata, vec![0.0; a]).unwrap();

            let x = Tensor::from_vec(&[1, a, h, w], rng_data(37, a * h * w, -1.0, 1.0), false)
                .unwrap();
            let y = Tensor::from_vec(
                &[1, b, h_out, w_out],
                rng_data(41, b * h_out * w_out, -1.0, 1.0),
                false,
            )
            .unwrap();

            let cx = conv2d(&x, &conv_spec).unwrap();
            let ty = transposed_conv2d(&y, &tconv_spec).unwrap();
            let lhs: f64 = cx.data().iter().zip(y.data().iter()).map(|(u, v)| u * v).sum();
            let rhs: f64 = x.data().iter().zip(ty.data().iter()).map(|(u, v)| u * v).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                "adjointness broke for k{k} s{s}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn softmax_uniform_and_known_values() {
        let x = Tensor::from_vec(&[1, 4, 1, 1], vec![1.7; 4], false).unwrap();
        let y = softmax_channels(&x).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 3.0f64.ln()], false).unwrap();
        let y = softmax_channels(&x).unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let data = rng_data(43, 2 * 3 * 2 * 2, -4.0, 4.0);
        let x = Tensor::from_vec(&[2, 3, 2, 2], data.clone(), false).unwrap();
        let shifted =
            Tensor::from_vec(&[2, 3, 2, 2], data.iter().map(|v| v + 11.25).collect(), false)
                .unwrap();
        let y0 = softmax_channels(&x).unwrap().to_vec();
        let y1 = softmax_channels(&shifted).unwrap().to_vec();
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() <= 1e-12);
        }
        // per-pixel sums are 1
        for n in 0..2 {
            for px in 0..4 {
                let s: f64 = (0..3).map(|c| y0[n * 12 + c * 4 + px]).sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_nonfinite() {
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, f64::NAN], false).unwrap();
        assert!(matches!(softmax_channels(&x), Err(AuxError::NonFinite(_))));
    }

    #[test]
    fn concat_shapes_and_backward_split() {
        let a = Tensor::from_vec(&[2, 2, 2, 2], rng_data(47, 16, -1.0, 1.0), true).unwrap();
        let b = Tensor::from_vec(&[2, 3, 2, 2], rng_data(53, 24, -1.0, 1.0), true).unwrap();
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 5, 2, 2]);

        // weighted sum so each position has a distinct gradient
        let weights = Tensor::from_vec(&[2, 5, 2, 2], (0..40).map(|i| i as f64).collect(), false)
            .unwrap();
        y.mul(&weights).unwrap().sum().unwrap().backward().unwrap();
        let ga = a.grad().unwrap();
        let gb = b.grad().unwrap();
        let w = weights.to_vec();
        for n in 0..2 {
            for c in 0..2 {
                for px in 0..4 {
                    assert_eq!(ga[(n * 2 + c) * 4 + px], w[(n * 5 + c) * 4 + px]);
                }
            }
            for c in 0..3 {
                for px in 0..4 {
                    assert_eq!(gb[(n * 3 + c) * 4 + px], w[(n * 5 + 2 + c) * 4 + px]);
                }
            }
        }
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[1, 2, 4, 4], false);
        let b = Tensor::zeros(&[1, 2, 4, 6], false);
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn conv_grad_check() {
        let mut rng = Rng::new(7);
        let spec = ConvSpec::new(2, 3, 3, 1, 1, &mut rng);
        let x = Tensor::from_vec(&[1, 2, 4, 4], rng_data(59, 32, -1.0, 1.0), true).unwrap();
        let params = [x.clone(), spec.weights.clone(), spec.bias.clone()];
        let report = grad_check(
            || conv2d(&x, &spec)?.mul(&conv2d(&x, &spec)?)?.mean(),
            &params,
            None,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn strided_conv_grad_check() {
        let mut rng = Rng::new(8);
        let spec = ConvSpec::new(2, 2, 3, 2, 1, &mut rng);
        let x = Tensor::from_vec(&[1, 2, 6, 6], rng_data(61, 72, -1.0, 1.0), true).unwrap();
        let params = [x.clone(), spec.weights.clone(), spec.bias.clone()];
        let report = grad_check(|| conv2d(&x, &spec)?.mean(), &params, None, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn tconv_grad_check() {
        let mut rng = Rng::new(9);
        let spec = TransposedConvSpec::new(3, 2, 2, 2, &mut rng);
        let x = Tensor::from_vec(&[2, 3, 3, 3], rng_data(67, 54, -1.0, 1.0), true).unwrap();
        let params = [x.clone(), spec.weights.clone(), spec.bias.clone()];
        let report = grad_check(
            || {
                let y = transposed_conv2d(&x, &spec)?;
                y.mul(&y)?.mean()
            },
            &params,
            None,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn maxpool_grad_check_away_from_ties() {
        // strictly increasing data: unique argmax everywhere
        let data: Vec<f64> = (0..32).map(|i| i as f64 * 0.37 - 3.0).collect();
        let x = Tensor::from_vec(&[1, 2, 4, 4], data, true).unwrap();
        let report = grad_check(
            || {
                let y = maxpool2(&x)?;
                y.mul(&y)?.mean()
            },
            &[x.clone()],
            None,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_grad_check() {
        let x = Tensor::from_vec(&[1, 3, 2, 2], rng_data(71, 12, -2.0, 2.0), true).unwrap();
        let weights =
            Tensor::from_vec(&[1, 3, 2, 2], rng_data(73, 12, -1.0, 1.0), false).unwrap();
        let report = grad_check(
            || softmax_channels(&x)?.mul(&weights)?.sum(),
            &[x.clone()],
            None,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }
}
