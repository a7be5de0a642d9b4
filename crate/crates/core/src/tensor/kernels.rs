//! Raw forward/backward kernels on flat buffers, shared by the tape and by
//! non-differentiable callers.

use crate::par;

/// Splits a shape at `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// 3x3, stride 1, zero padding 1. `x` is `[n, cin, h, w]`, `w` is `[cout, cin, 3, 3]`.
pub(crate) fn conv3x3_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    (n, cin, h, wd): (usize, usize, usize, usize),
    cout: usize,
) -> Vec<f64> {
    let plane = h * wd;
    let mut out = vec![0.0; n * cout * plane];
    par::for_each_chunk_mut(&mut out, cout * plane, |s, o| {
        let xs = &x[s * cin * plane..(s + 1) * cin * plane];
        for co in 0..cout {
            let op = &mut o[co * plane..(co + 1) * plane];
            op.fill(b[co]);
            for ci in 0..cin {
                let xp = &xs[ci * plane..(ci + 1) * plane];
                let k = &w[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kv = k[ky * 3 + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        // output rows whose source row y+ky-1 is in bounds
                        let y0 = if ky == 0 { 1 } else { 0 };
                        let y1 = if ky == 2 { h - 1 } else { h };
                        let x0 = if kx == 0 { 1 } else { 0 };
                        let x1 = if kx == 2 { wd - 1 } else { wd };
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let orow = &mut op[y * wd..(y + 1) * wd];
                            let irow = &xp[sy * wd..(sy + 1) * wd];
                            for xx in x0..x1 {
                                orow[xx] += kv * irow[xx + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns (grad_x, grad_w, grad_b) for [`conv3x3_forward`].
pub(crate) fn conv3x3_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    (n, cin, h, wd): (usize, usize, usize, usize),
    cout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = h * wd;
    let mut gx = vec![0.0; n * cin * plane];
    par::for_each_chunk_mut(&mut gx, cin * plane, |s, gxs| {
        let gs = &g[s * cout * plane..(s + 1) * cout * plane];
        for co in 0..cout {
            let gp = &gs[co * plane..(co + 1) * plane];
            for ci in 0..cin {
                let gxp = &mut gxs[ci * plane..(ci + 1) * plane];
                let k = &w[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kv = k[ky * 3 + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        let y0 = if ky == 0 { 1 } else { 0 };
                        let y1 = if ky == 2 { h - 1 } else { h };
                        let x0 = if kx == 0 { 1 } else { 0 };
                        let x1 = if kx == 2 { wd - 1 } else { wd };
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            for xx in x0..x1 {
                                gxp[sy * wd + xx + kx - 1] += kv * gp[y * wd + xx];
                            }
                        }
                    }
                }
            }
        }
    });

    // Per-sample partials, summed in sample order.
    let partials: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(n, |s| {
        let xs = &x[s * cin * plane..(s + 1) * cin * plane];
        let gs = &g[s * cout * plane..(s + 1) * cout * plane];
        let mut gw = vec![0.0; cout * cin * 9];
        let mut gb = vec![0.0; cout];
        for co in 0..cout {
            let gp = &gs[co * plane..(co + 1) * plane];
            gb[co] = gp.iter().sum();
            for ci in 0..cin {
                let xp = &xs[ci * plane..(ci + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y0 = if ky == 0 { 1 } else { 0 };
                        let y1 = if ky == 2 { h - 1 } else { h };
                        let x0 = if kx == 0 { 1 } else { 0 };
                        let x1 = if kx == 2 { wd - 1 } else { wd };
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            for xx in x0..x1 {
                                acc += gp[y * wd + xx] * xp[sy * wd + xx + kx - 1];
                            }
                        }
                        gw[(co * cin + ci) * 9 + ky * 3 + kx] = acc;
                    }
                }
            }
        }
        (gw, gb)
    });
    let mut gw = vec![0.0; cout * cin * 9];
    let mut gb = vec![0.0; cout];
    for (pw, pb) in partials {
        for (a, v) in gw.iter_mut().zip(pw) {
            *a += v;
        }
        for (a, v) in gb.iter_mut().zip(pb) {
            *a += v;
        }
    }
    (gx, gw, gb)
}

/// Interpolation taps for one axis of a half-pixel-centred bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_hi: f64,
}

pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                w_hi: pos - lo as f64,
            }
        })
        .collect()
}

/// Resizes each trailing `h x w` plane of `x` (with `planes` planes) to `oh x ow`.
pub(crate) fn resize_forward(x: &[f64], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v00 = src[a.lo * w + b.lo];
                let v01 = src[a.lo * w + b.hi];
                let v10 = src[a.hi * w + b.lo];
                let v11 = src[a.hi * w + b.hi];
                let top = v00 * (1.0 - b.w_hi) + v01 * b.w_hi;
                let bot = v10 * (1.0 - b.w_hi) + v11 * b.w_hi;
                dst[oy * ow + ox] = top * (1.0 - a.w_hi) + bot * a.w_hi;
            }
        }
    }
    out
}

pub(crate) fn resize_backward(g: &[f64], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gsrc = &mut gx[p * h * w..(p + 1) * h * w];
        let gd = &g[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = gd[oy * ow + ox];
                gsrc[a.lo * w + b.lo] += v * (1.0 - a.w_hi) * (1.0 - b.w_hi);
                gsrc[a.lo * w + b.hi] += v * (1.0 - a.w_hi) * b.w_hi;
                gsrc[a.hi * w + b.lo] += v * a.w_hi * (1.0 - b.w_hi);
                gsrc[a.hi * w + b.hi] += v * a.w_hi * b.w_hi;
            }
        }
    }
    gx
}
