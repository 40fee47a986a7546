//! Dense kernels behind the graph ops. All loops are sequential and
//! accumulate in a fixed order so results are bitwise reproducible.

/// C\[m,n\] = A\[m,k\] @ B\[k,n\]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// dA += G @ B^T where G is \[m,n\], B is \[k,n\].
pub fn matmul_grad_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                s += gv * bv;
            }
            da_row[p] += s;
        }
    }
}

/// dB += A^T @ G where A is \[m,k\], G is \[m,n\].
pub fn matmul_grad_b(g: &[f64], a: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (dv, &gv) in db_row.iter_mut().zip(g_row) {
                *dv += av * gv;
            }
        }
    }
}

/// Output spatial size of a padded strided convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Valid output-index window `[lo, hi)` such that `o*stride - pad + k` stays
/// inside `[0, input)`.
fn out_window(input: usize, stride: usize, pad: usize, k: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k + stride - 1) / stride };
    let max_i = input as isize - 1 + pad as isize - k as isize;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = (max_i as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// NCHW convolution with zero padding.
/// x: \[n, cin, h, w\], weight: \[cout, cin, kh, kw\], bias: \[cout\] (optional).
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            let o_plane = &mut out[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo];
            if let Some(bias) = bias {
                o_plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..cin {
                let x_plane = &x[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                let w_kern = &weight[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = out_window(h, stride, pad, ky, ho);
                    for kx in 0..kw {
                        let wv = w_kern[ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = out_window(w, stride, pad, kx, wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let x_row = &x_plane[iy * w..(iy + 1) * w];
                            let o_row = &mut o_plane[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                let x_off = ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                let xs = &x_row[x_off..x_off + len];
                                let os = &mut o_row[ox_lo..ox_hi];
                                for (ov, &xv) in os.iter_mut().zip(xs) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    o_row[ox] += wv * x_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// dX for [`conv2d`]; accumulates into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_x(
    g: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    for b in 0..n {
        for co in 0..cout {
            let g_plane = &g[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo];
            for ci in 0..cin {
                let dx_plane = &mut dx[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                let w_kern = &weight[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = out_window(h, stride, pad, ky, ho);
                    for kx in 0..kw {
                        let wv = w_kern[ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = out_window(w, stride, pad, kx, wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                            let dx_row = &mut dx_plane[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let x_off = ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                let ds = &mut dx_row[x_off..x_off + len];
                                let gs = &g_row[ox_lo..ox_hi];
                                for (dv, &gv) in ds.iter_mut().zip(gs) {
                                    *dv += wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    dx_row[ix] += wv * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dW and dB for [`conv2d`]; accumulates into `dw`/`db`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_grad_w(
    g: &[f64],
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dw: &mut [f64],
    mut db: Option<&mut [f64]>,
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    for b in 0..n {
        for co in 0..cout {
            let g_plane = &g[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo];
            if let Some(db) = db.as_deref_mut() {
                db[co] += g_plane.iter().sum::<f64>();
            }
            for ci in 0..cin {
                let x_plane = &x[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                let dw_kern = &mut dw[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = out_window(h, stride, pad, ky, ho);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = out_window(w, stride, pad, kx, wo);
                        let mut s = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                            let x_row = &x_plane[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let x_off = ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                let xs = &x_row[x_off..x_off + len];
                                let gs = &g_row[ox_lo..ox_hi];
                                for (&xv, &gv) in xs.iter().zip(gs) {
                                    s += xv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    s += x_row[ix] * g_row[ox];
                                }
                            }
                        }
                        dw_kern[ky * kw + kx] += s;
                    }
                }
            }
        }
    }
}

/// Nearest-neighbor 2x upsampling, NCHW.
pub fn upsample2x(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        let w2 = 2 * w;
        for r in 0..h {
            for c in 0..w {
                let v = xp[r * w + c];
                op[(2 * r) * w2 + 2 * c] = v;
                op[(2 * r) * w2 + 2 * c + 1] = v;
                op[(2 * r + 1) * w2 + 2 * c] = v;
                op[(2 * r + 1) * w2 + 2 * c + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2x_grad(g: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let w2 = 2 * w;
    for p in 0..planes {
        let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                dp[r * w + c] += gp[(2 * r) * w2 + 2 * c]
                    + gp[(2 * r) * w2 + 2 * c + 1]
                    + gp[(2 * r + 1) * w2 + 2 * c]
                    + gp[(2 * r + 1) * w2 + 2 * c + 1];
            }
        }
    }
}

/// Row-stable softmax over `cols`-wide rows.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - m).exp();
            *o = e;
            z += e;
        }
        for o in or.iter_mut() {
            *o /= z;
        }
    }
    out
}

/// Decomposes a shape around `axis` into (outer, len, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
