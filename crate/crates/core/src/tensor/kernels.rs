//! Raw slice kernels for convolution. Same padding with zeros, stride 1.

/// Output rows `y` for which `y + ky - pad` lands inside `[0, h)`.
#[inline]
fn valid_range(k: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(n);
    (lo, hi)
}

/// `out[co,y,x] = Σ_{ci,ky,kx} w[co,ci,ky,kx] · x[ci, y+ky-ph, x+kx-pw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let plane = h * wd;
    for co in 0..c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..c_in {
            let xi = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..kh {
                let (y0, y1) = valid_range(ky, ph, h);
                for kx in 0..kw {
                    let wv = w[((co * c_in + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(kx, pw, wd);
                    for y in y0..y1 {
                        let src = (y + ky - ph) * wd + kx;
                        let orow = &mut o[y * wd + x0..y * wd + x1];
                        let irow = &xi[src + x0 - pw..src + x1 - pw];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients of [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    c_in: usize,
    c_out: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let plane = h * wd;
    if let Some(gw) = gw {
        for co in 0..c_out {
            let go = &g[co * plane..(co + 1) * plane];
            for ci in 0..c_in {
                let xi = &x[ci * plane..(ci + 1) * plane];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky, ph, h);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(kx, pw, wd);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let src = (y + ky - ph) * wd + kx;
                            let grow = &go[y * wd + x0..y * wd + x1];
                            let irow = &xi[src + x0 - pw..src + x1 - pw];
                            acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gw[((co * c_in + ci) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        for co in 0..c_out {
            let go = &g[co * plane..(co + 1) * plane];
            for ci in 0..c_in {
                let gxi = &mut gx[ci * plane..(ci + 1) * plane];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky, ph, h);
                    for kx in 0..kw {
                        let wv = w[((co * c_in + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(kx, pw, wd);
                        for y in y0..y1 {
                            let src = (y + ky - ph) * wd + kx;
                            let grow = &go[y * wd + x0..y * wd + x1];
                            let xrow = &mut gxi[src + x0 - pw..src + x1 - pw];
                            for (xv, gv) in xrow.iter_mut().zip(grow) {
                                *xv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel convolution: `w` is `[C,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_forward(x: &[f64], w: &[f64], out: &mut [f64], c: usize, h: usize, wd: usize, kh: usize, kw: usize) {
    let plane = h * wd;
    let ksz = kh * kw;
    for ch in 0..c {
        conv2d_forward(
            &x[ch * plane..(ch + 1) * plane],
            &w[ch * ksz..(ch + 1) * ksz],
            &mut out[ch * plane..(ch + 1) * plane],
            1,
            1,
            h,
            wd,
            kh,
            kw,
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
) {
    let plane = h * wd;
    let ksz = kh * kw;
    for ch in 0..c {
        let p = ch * plane..(ch + 1) * plane;
        let k = ch * ksz..(ch + 1) * ksz;
        conv2d_backward(
            &x[p.clone()],
            &w[k.clone()],
            &g[p.clone()],
            gx.as_deref_mut().map(|s| &mut s[p.clone()]),
            gw.as_deref_mut().map(|s| &mut s[k.clone()]),
            1,
            1,
            h,
            wd,
            kh,
            kw,
        );
    }
}
