//! Raw numeric kernels behind the graph operations.
//!
//! Everything here works on flat row-major slices plus explicit extents,
//! accumulates in a fixed order (single-threaded), and is shared by the
//! forward and backward passes.

use crate::tensor::{strides_for, Element};

// ── Broadcast iteration ──────────────────────────────────────────────

/// Per-axis strides of `shape` viewed through `out_shape`, with stride 0
/// on stretched axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let base = strides_for(shape);
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        if d >= pad && shape[d - pad] != 1 {
            out[d] = base[d - pad];
        }
    }
    out
}

/// Visit every output position of a broadcast binary op, yielding the flat
/// offsets `(out, a, b)` in a fixed row-major order.
pub(crate) fn for_each_broadcast2(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let a_str = broadcast_strides(a_shape, out_shape);
    let b_str = broadcast_strides(b_shape, out_shape);
    let mut coord = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for flat in 0..numel {
        f(flat, ai, bi);
        for d in (0..rank).rev() {
            coord[d] += 1;
            ai += a_str[d];
            bi += b_str[d];
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
            ai -= a_str[d] * out_shape[d];
            bi -= b_str[d] * out_shape[d];
        }
    }
}

// ── Linear (x · Wᵀ + b over the last axis) ───────────────────────────

pub(crate) fn linear_fwd<T: Element>(
    x: &[T],
    rows: usize,
    din: usize,
    w: &[T],
    dout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut y = vec![T::ZERO; rows * dout];
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        let yr = &mut y[r * dout..(r + 1) * dout];
        for o in 0..dout {
            let wr = &w[o * din..(o + 1) * din];
            let mut acc = T::ZERO;
            for i in 0..din {
                acc = acc + xr[i] * wr[i];
            }
            yr[o] = match bias {
                Some(b) => acc + b[o],
                None => acc,
            };
        }
    }
    y
}

pub(crate) fn linear_bwd<T: Element>(
    x: &[T],
    rows: usize,
    din: usize,
    w: &[T],
    dout: usize,
    dy: &[T],
    with_bias: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let mut dx = vec![T::ZERO; rows * din];
    let mut dw = vec![T::ZERO; dout * din];
    let mut db = if with_bias { Some(vec![T::ZERO; dout]) } else { None };
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        let dyr = &dy[r * dout..(r + 1) * dout];
        let dxr = &mut dx[r * din..(r + 1) * din];
        for o in 0..dout {
            let g = dyr[o];
            let wr = &w[o * din..(o + 1) * din];
            let dwr = &mut dw[o * din..(o + 1) * din];
            for i in 0..din {
                dxr[i] = dxr[i] + g * wr[i];
                dwr[i] = dwr[i] + g * xr[i];
            }
        }
        if let Some(db) = db.as_mut() {
            for o in 0..dout {
                db[o] = db[o] + dyr[o];
            }
        }
    }
    (dx, dw, db)
}

// ── Batched matmul: (B,m,k) · (B,k,n) → (B,m,n) ─────────────────────

pub(crate) fn matmul_batched_fwd<T: Element>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut c = vec![T::ZERO; batch * m * n];
    for t in 0..batch {
        let at = &a[t * m * k..(t + 1) * m * k];
        let bt = &b[t * k * n..(t + 1) * k * n];
        let ct = &mut c[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            for p in 0..k {
                let av = at[i * k + p];
                let brow = &bt[p * n..(p + 1) * n];
                let crow = &mut ct[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] = crow[j] + av * brow[j];
                }
            }
        }
    }
    c
}

pub(crate) fn matmul_batched_bwd<T: Element>(
    a: &[T],
    b: &[T],
    dc: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::ZERO; batch * m * k];
    let mut db = vec![T::ZERO; batch * k * n];
    for t in 0..batch {
        let at = &a[t * m * k..(t + 1) * m * k];
        let bt = &b[t * k * n..(t + 1) * k * n];
        let dct = &dc[t * m * n..(t + 1) * m * n];
        let dat = &mut da[t * m * k..(t + 1) * m * k];
        let dbt = &mut db[t * k * n..(t + 1) * k * n];
        // dA = dC · Bᵀ ; dB = Aᵀ · dC
        for i in 0..m {
            for j in 0..n {
                let g = dct[i * n + j];
                for p in 0..k {
                    dat[i * k + p] = dat[i * k + p] + g * bt[p * n + j];
                    dbt[p * n + j] = dbt[p * n + j] + g * at[i * k + p];
                }
            }
        }
    }
    (da, db)
}

// ── 2-D convolution (cross-correlation) ──────────────────────────────

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output positions o where o*stride + k - pad lands inside [0, extent).
/// The returned half-open range never underflows the input row.
fn conv_span(o_len: usize, extent: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let off = k as isize - pad as isize;
    let lo = if off < 0 { ((-off) as usize).div_ceil(stride) } else { 0 };
    let hi_excl = extent as isize - off;
    if hi_excl <= 0 {
        return (0, 0);
    }
    let hi = (hi_excl as usize).div_ceil(stride);
    (lo.min(o_len), hi.min(o_len))
}

pub(crate) fn conv2d_fwd<T: Element>(
    x: &[T],
    wt: &[T],
    bias: Option<&[T]>,
    d: ConvDims,
) -> Vec<T> {
    // Kernel taps in the outer loops, full output rows inside: padding
    // bounds hoist out of the hot loop and the stride-1 case (every conv
    // in the model) updates independent lanes over contiguous rows.
    let mut y = vec![T::ZERO; d.n * d.cout * d.oh * d.ow];
    for n in 0..d.n {
        for co in 0..d.cout {
            let out_base = (n * d.cout + co) * d.oh * d.ow;
            if let Some(b) = bias {
                y[out_base..out_base + d.oh * d.ow].fill(b[co]);
            }
            for ci in 0..d.cin {
                let x_plane = &x[(n * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                let w_base = (co * d.cin + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = conv_span(d.oh, d.h, d.stride, ky, d.pad);
                    for kx in 0..d.kw {
                        let wv = wt[w_base + ky * d.kw + kx];
                        let (ox_lo, ox_hi) = conv_span(d.ow, d.w, d.stride, kx, d.pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let span = ox_hi - ox_lo;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * d.stride + ky - d.pad;
                            let x_row = &x_plane[iy * d.w + ox_lo * d.stride + kx - d.pad..];
                            let y_row =
                                &mut y[out_base + oy * d.ow + ox_lo..out_base + oy * d.ow + ox_hi];
                            if d.stride == 1 {
                                for (yo, &xv) in y_row.iter_mut().zip(&x_row[..span]) {
                                    *yo = *yo + wv * xv;
                                }
                            } else {
                                for (i, yo) in y_row.iter_mut().enumerate() {
                                    *yo = *yo + wv * x_row[i * d.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv2d_bwd<T: Element>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    with_bias: bool,
    d: ConvDims,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let mut dx = vec![T::ZERO; d.n * d.cin * d.h * d.w];
    let mut dw = vec![T::ZERO; d.cout * d.cin * d.kh * d.kw];
    let db = with_bias.then(|| {
        let mut db = vec![T::ZERO; d.cout];
        for n in 0..d.n {
            for (co, dbv) in db.iter_mut().enumerate() {
                let base = (n * d.cout + co) * d.oh * d.ow;
                for &g in &dy[base..base + d.oh * d.ow] {
                    *dbv = *dbv + g;
                }
            }
        }
        db
    });
    // Same tap-outer layout as the forward pass. The dx scatter runs as
    // its own row loop (independent lanes); the dw reduction stays a
    // sequential dot so the accumulation order is fixed.
    for n in 0..d.n {
        for co in 0..d.cout {
            let dy_base = (n * d.cout + co) * d.oh * d.ow;
            for ci in 0..d.cin {
                let x_base = (n * d.cin + ci) * d.h * d.w;
                let w_base = (co * d.cin + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = conv_span(d.oh, d.h, d.stride, ky, d.pad);
                    for kx in 0..d.kw {
                        let wv = wt[w_base + ky * d.kw + kx];
                        let (ox_lo, ox_hi) = conv_span(d.ow, d.w, d.stride, kx, d.pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let span = ox_hi - ox_lo;
                        let mut dwv = T::ZERO;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * d.stride + ky - d.pad;
                            let row = x_base + iy * d.w + ox_lo * d.stride + kx - d.pad;
                            let dy_row = &dy[dy_base + oy * d.ow + ox_lo
                                ..dy_base + oy * d.ow + ox_hi];
                            if d.stride == 1 {
                                let x_row = &x[row..row + span];
                                let dx_row = &mut dx[row..row + span];
                                for (dxv, &g) in dx_row.iter_mut().zip(dy_row) {
                                    *dxv = *dxv + wv * g;
                                }
                                for (&g, &xv) in dy_row.iter().zip(x_row) {
                                    dwv = dwv + g * xv;
                                }
                            } else {
                                for (i, &g) in dy_row.iter().enumerate() {
                                    let xi = row + i * d.stride;
                                    dx[xi] = dx[xi] + wv * g;
                                    dwv = dwv + g * x[xi];
                                }
                            }
                        }
                        let wi = w_base + ky * d.kw + kx;
                        dw[wi] = dw[wi] + dwv;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ── Group normalization ──────────────────────────────────────────────

/// Per (sample, group) mean and inverse standard deviation, accumulated
/// in f64 for stability.
pub(crate) fn group_norm_stats<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let cpg = c / groups;
    let group_len = (cpg * hw) as f64;
    let mut mean = vec![0f64; n * groups];
    let mut inv_std = vec![0f64; n * groups];
    for ni in 0..n {
        for g in 0..groups {
            let mut sum = 0f64;
            for ci in g * cpg..(g + 1) * cpg {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    sum += x[base + p].to_f64();
                }
            }
            let mu = sum / group_len;
            let mut var = 0f64;
            for ci in g * cpg..(g + 1) * cpg {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    let d = x[base + p].to_f64() - mu;
                    var += d * d;
                }
            }
            var /= group_len;
            mean[ni * groups + g] = mu;
            inv_std[ni * groups + g] = 1.0 / (var + eps).sqrt();
        }
    }
    (mean, inv_std)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_fwd<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Vec<T> {
    let (mean, inv_std) = group_norm_stats(x, n, c, hw, groups, eps);
    let cpg = c / groups;
    let mut y = vec![T::ZERO; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let g = ci / cpg;
            let mu = mean[ni * groups + g];
            let is = inv_std[ni * groups + g];
            let (ga, be) = (gamma[ci].to_f64(), beta[ci].to_f64());
            let base = (ni * c + ci) * hw;
            for p in 0..hw {
                let xh = (x[base + p].to_f64() - mu) * is;
                y[base + p] = T::from_f64(ga * xh + be);
            }
        }
    }
    y
}

// Indexing gamma/dgamma/dbeta by channel keeps the two passes legible.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub(crate) fn group_norm_bwd<T: Element>(
    x: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (mean, inv_std) = group_norm_stats(x, n, c, hw, groups, eps);
    let cpg = c / groups;
    let group_len = (cpg * hw) as f64;
    let mut dx = vec![T::ZERO; x.len()];
    let mut dgamma = vec![0f64; c];
    let mut dbeta = vec![0f64; c];
    for ni in 0..n {
        for g in 0..groups {
            let mu = mean[ni * groups + g];
            let is = inv_std[ni * groups + g];
            // First pass: grads w.r.t. the affine params plus group sums.
            let mut sum_dxh = 0f64;
            let mut sum_dxh_xh = 0f64;
            for ci in g * cpg..(g + 1) * cpg {
                let ga = gamma[ci].to_f64();
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    let xh = (x[base + p].to_f64() - mu) * is;
                    let gy = dy[base + p].to_f64();
                    dgamma[ci] += gy * xh;
                    dbeta[ci] += gy;
                    let dxh = gy * ga;
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
            }
            let m1 = sum_dxh / group_len;
            let m2 = sum_dxh_xh / group_len;
            for ci in g * cpg..(g + 1) * cpg {
                let ga = gamma[ci].to_f64();
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    let xh = (x[base + p].to_f64() - mu) * is;
                    let dxh = dy[base + p].to_f64() * ga;
                    dx[base + p] = T::from_f64(is * (dxh - m1 - xh * m2));
                }
            }
        }
    }
    let dgamma = dgamma.into_iter().map(T::from_f64).collect();
    let dbeta = dbeta.into_iter().map(T::from_f64).collect();
    (dx, dgamma, dbeta)
}

// ── Softmax along one axis ───────────────────────────────────────────

/// View `shape` as (outer, len, inner) around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn softmax_fwd<T: Element>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut maxv = x[idx(0)];
            for k in 1..len {
                if x[idx(k)] > maxv {
                    maxv = x[idx(k)];
                }
            }
            let mut denom = T::ZERO;
            for k in 0..len {
                let e = (x[idx(k)] - maxv).exp();
                y[idx(k)] = e;
                denom = denom + e;
            }
            for k in 0..len {
                y[idx(k)] = y[idx(k)] / denom;
            }
        }
    }
    y
}

pub(crate) fn softmax_bwd<T: Element>(
    y: &[T],
    dy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::ZERO; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut dot = T::ZERO;
            for k in 0..len {
                dot = dot + dy[idx(k)] * y[idx(k)];
            }
            for k in 0..len {
                dx[idx(k)] = y[idx(k)] * (dy[idx(k)] - dot);
            }
        }
    }
    dx
}

// ── Pooling ──────────────────────────────────────────────────────────

pub(crate) fn global_pool_fwd<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    max: bool,
) -> Vec<T> {
    let mut y = vec![T::ZERO; n * c];
    for i in 0..n * c {
        let row = &x[i * hw..(i + 1) * hw];
        y[i] = if max {
            let mut m = row[0];
            for &v in &row[1..] {
                if v > m {
                    m = v;
                }
            }
            m
        } else {
            let mut s = T::ZERO;
            for &v in row {
                s = s + v;
            }
            s / T::from_f64(hw as f64)
        };
    }
    y
}

pub(crate) fn global_pool_bwd<T: Element>(
    x: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    hw: usize,
    max: bool,
) -> Vec<T> {
    let mut dx = vec![T::ZERO; x.len()];
    for i in 0..n * c {
        let row = &x[i * hw..(i + 1) * hw];
        if max {
            // first maximal element in row-major order takes the gradient
            let mut arg = 0;
            for (p, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = p;
                }
            }
            dx[i * hw + arg] = dx[i * hw + arg] + dy[i];
        } else {
            let g = dy[i] / T::from_f64(hw as f64);
            for p in 0..hw {
                dx[i * hw + p] = g;
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn window_pool_fwd<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    max: bool,
) -> Vec<T> {
    let mut y = vec![T::ZERO; n * c * oh * ow];
    let inv = T::from_f64(1.0 / (k * k) as f64);
    for nc in 0..n * c {
        let plane = &x[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if max { plane[oy * stride * w + ox * stride] } else { T::ZERO };
                for ky in 0..k {
                    for kx in 0..k {
                        let v = plane[(oy * stride + ky) * w + ox * stride + kx];
                        if max {
                            if v > acc {
                                acc = v;
                            }
                        } else {
                            acc = acc + v;
                        }
                    }
                }
                y[(nc * oh + oy) * ow + ox] = if max { acc } else { acc * inv };
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn window_pool_bwd<T: Element>(
    x: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    max: bool,
) -> Vec<T> {
    let mut dx = vec![T::ZERO; x.len()];
    let inv = T::from_f64(1.0 / (k * k) as f64);
    for nc in 0..n * c {
        let plane = &x[nc * h * w..(nc + 1) * h * w];
        let dplane = &mut dx[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(nc * oh + oy) * ow + ox];
                if max {
                    let mut arg = oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let p = (oy * stride + ky) * w + ox * stride + kx;
                            if plane[p] > plane[arg] {
                                arg = p;
                            }
                        }
                    }
                    dplane[arg] = dplane[arg] + g;
                } else {
                    let gs = g * inv;
                    for ky in 0..k {
                        for kx in 0..k {
                            let p = (oy * stride + ky) * w + ox * stride + kx;
                            dplane[p] = dplane[p] + gs;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn channel_pool_fwd<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    max: bool,
) -> Vec<T> {
    let mut y = vec![T::ZERO; n * hw];
    for ni in 0..n {
        for p in 0..hw {
            let mut acc = x[ni * c * hw + p];
            for ci in 1..c {
                let v = x[(ni * c + ci) * hw + p];
                if max {
                    if v > acc {
                        acc = v;
                    }
                } else {
                    acc = acc + v;
                }
            }
            y[ni * hw + p] = if max { acc } else { acc / T::from_f64(c as f64) };
        }
    }
    y
}

pub(crate) fn channel_pool_bwd<T: Element>(
    x: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    hw: usize,
    max: bool,
) -> Vec<T> {
    let mut dx = vec![T::ZERO; x.len()];
    for ni in 0..n {
        for p in 0..hw {
            let g = dy[ni * hw + p];
            if max {
                // first maximal channel takes the gradient
                let mut arg = 0;
                for ci in 1..c {
                    if x[(ni * c + ci) * hw + p] > x[(ni * c + arg) * hw + p] {
                        arg = ci;
                    }
                }
                let at = (ni * c + arg) * hw + p;
                dx[at] = dx[at] + g;
            } else {
                let gs = g / T::from_f64(c as f64);
                for ci in 0..c {
                    dx[(ni * c + ci) * hw + p] = gs;
                }
            }
        }
    }
    dx
}

// ── Bilinear resize (half-pixel centers) ─────────────────────────────

/// Source coordinate plus the two taps and the fractional weight for one
/// output index under the half-pixel convention.
fn bilinear_taps(out_i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

pub(crate) fn resize_bilinear_fwd<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut y = vec![T::ZERO; n * c * oh * ow];
    for nc in 0..n * c {
        let plane = &x[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_taps(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_taps(ox, w, ow);
                let v = (1.0 - fy) * (1.0 - fx) * plane[y0 * w + x0].to_f64()
                    + (1.0 - fy) * fx * plane[y0 * w + x1].to_f64()
                    + fy * (1.0 - fx) * plane[y1 * w + x0].to_f64()
                    + fy * fx * plane[y1 * w + x1].to_f64();
                y[(nc * oh + oy) * ow + ox] = T::from_f64(v);
            }
        }
    }
    y
}

pub(crate) fn resize_bilinear_bwd<T: Element>(
    dy: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![0f64; n * c * h * w];
    for nc in 0..n * c {
        let dplane = &mut dx[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_taps(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_taps(ox, w, ow);
                let g = dy[(nc * oh + oy) * ow + ox].to_f64();
                dplane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * g;
                dplane[y0 * w + x1] += (1.0 - fy) * fx * g;
                dplane[y1 * w + x0] += fy * (1.0 - fx) * g;
                dplane[y1 * w + x1] += fy * fx * g;
            }
        }
    }
    dx.into_iter().map(T::from_f64).collect()
}

// ── Axis permutation ─────────────────────────────────────────────────

pub(crate) fn permute_fwd<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_for(shape);
    let numel = x.len();
    let mut y = vec![T::ZERO; numel];
    let mut coord = vec![0usize; rank];
    let mut src = 0usize;
    // walk the *output* in row-major order; src tracks the permuted offset
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    for yo in y.iter_mut() {
        *yo = x[src];
        for d in (0..rank).rev() {
            coord[d] += 1;
            src += src_strides[d];
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
            src -= src_strides[d] * out_shape[d];
        }
    }
    y
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
