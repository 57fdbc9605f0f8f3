//! Raw loops behind the tape's spatial and matrix ops.
//!
//! Images are single C x H x W planes; convolutions are direct, stride 1,
//! zero padded to preserve the spatial size.

use std::ops::Range;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
}

impl ConvDims {
    /// Spatial offset of kernel tap `t` (along one axis).
    fn offset(&self, t: usize) -> isize {
        (t as isize - (self.k / 2) as isize) * self.dilation as isize
    }
}

/// Output positions whose input position `pos + d` stays inside `0..n`.
fn valid(n: usize, d: isize) -> Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    lo.min(hi)..hi
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    d: ConvDims,
) -> Vec<f64> {
    let hw = d.h * d.w;
    let mut out = vec![0.0; d.c_out * hw];
    for co in 0..d.c_out {
        let plane = &mut out[co * hw..(co + 1) * hw];
        if let Some(b) = bias {
            plane.fill(b[co]);
        }
        for ci in 0..d.c_in {
            let src = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..d.k {
                let dy = d.offset(ky);
                let rows = valid(d.h, dy);
                for kx in 0..d.k {
                    let wv = weight[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = d.offset(kx);
                    let cols = valid(d.w, dx);
                    if cols.is_empty() {
                        continue;
                    }
                    for y in rows.clone() {
                        let yi = (y as isize + dy) as usize;
                        let o = &mut plane[y * d.w + cols.start..y * d.w + cols.end];
                        let xs = (cols.start as isize + dx) as usize;
                        let s = &src[yi * d.w + xs..yi * d.w + xs + cols.len()];
                        for (ov, sv) in o.iter_mut().zip(s) {
                            *ov += wv * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (d input, d weight, d bias); the first two only when requested.
pub(crate) fn conv2d_backward(
    grad: &[f64],
    x: &[f64],
    weight: &[f64],
    d: ConvDims,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let hw = d.h * d.w;
    let mut gx = need_input.then(|| vec![0.0; d.c_in * hw]);
    let mut gw = need_weight.then(|| vec![0.0; weight.len()]);
    let gb = (0..d.c_out)
        .map(|co| grad[co * hw..(co + 1) * hw].iter().sum())
        .collect();
    for co in 0..d.c_out {
        let g = &grad[co * hw..(co + 1) * hw];
        for ci in 0..d.c_in {
            let src = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..d.k {
                let dy = d.offset(ky);
                let rows = valid(d.h, dy);
                for kx in 0..d.k {
                    let widx = ((co * d.c_in + ci) * d.k + ky) * d.k + kx;
                    let wv = weight[widx];
                    let dx = d.offset(kx);
                    let cols = valid(d.w, dx);
                    if cols.is_empty() {
                        continue;
                    }
                    let xs = (cols.start as isize + dx) as usize;
                    let mut acc = 0.0;
                    for y in rows.clone() {
                        let yi = (y as isize + dy) as usize;
                        let gr = &g[y * d.w + cols.start..y * d.w + cols.end];
                        let in_off = ci * hw + yi * d.w + xs;
                        if let Some(gx) = gx.as_mut() {
                            if wv != 0.0 {
                                let dst = &mut gx[in_off..in_off + cols.len()];
                                for (dv, gv) in dst.iter_mut().zip(gr) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                        if gw.is_some() {
                            let s = &src[yi * d.w + xs..yi * d.w + xs + cols.len()];
                            acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

pub(crate) fn avgpool_forward(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            let row = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let orow = &mut out[(ch * oh + y / k) * ow..(ch * oh + y / k + 1) * ow];
            for (xpos, v) in row.iter().enumerate() {
                orow[xpos / k] += v * scale;
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward(g: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let grow = &g[(ch * oh + y / k) * ow..(ch * oh + y / k + 1) * ow];
            let row = &mut out[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (xpos, v) in row.iter_mut().enumerate() {
                *v = grow[xpos / k] * scale;
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling by an integer factor.
pub(crate) fn upsample_forward(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h * k, w * k);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &x[(ch * h + y / k) * w..(ch * h + y / k + 1) * w];
            let row = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for (xpos, v) in row.iter_mut().enumerate() {
                *v = src[xpos / k];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(g: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h * k, w * k);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            let grow = &g[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            let dst = &mut out[(ch * h + y / k) * w..(ch * h + y / k + 1) * w];
            for (xpos, v) in grow.iter().enumerate() {
                dst[xpos / k] += v;
            }
        }
    }
    out
}

/// `a` is m x k, `b` is k x n.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive reference with explicit bounds checks on every tap.
    fn conv_reference(x: &[f64], wt: &[f64], d: ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.c_out * d.h * d.w];
        let r = (d.k / 2) as isize;
        for co in 0..d.c_out {
            for y in 0..d.h as isize {
                for xx in 0..d.w as isize {
                    let mut s = 0.0;
                    for ci in 0..d.c_in {
                        for ky in 0..d.k as isize {
                            for kx in 0..d.k as isize {
                                let iy = y + (ky - r) * d.dilation as isize;
                                let ix = xx + (kx - r) * d.dilation as isize;
                                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    continue;
                                }
                                let wi =
                                    ((co * d.c_in + ci) * d.k + ky as usize) * d.k + kx as usize;
                                s += wt[wi] * x[(ci * d.h + iy as usize) * d.w + ix as usize];
                            }
                        }
                    }
                    out[(co * d.h + y as usize) * d.w + xx as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference_for_all_dilations() {
        for (k, dilation) in [(1, 1), (3, 1), (3, 2), (3, 4)] {
            let d = ConvDims {
                c_in: 2,
                c_out: 3,
                h: 7,
                w: 5,
                k,
                dilation,
            };
            let x: Vec<f64> = (0..2 * 35).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let wt: Vec<f64> = (0..3 * 2 * k * k)
                .map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.7)
                .collect();
            let got = conv2d_forward(&x, &wt, None, d);
            let want = conv_reference(&x, &wt, d);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint() {
        let (c, h, w, k) = (2, 4, 6, 2);
        let x: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = (0..c * (h / k) * (w / k))
            .map(|i| (i as f64).sin())
            .collect();
        let px = avgpool_forward(&x, c, h, w, k);
        let gy = avgpool_backward(&y, c, h, w, k);
        let lhs: f64 = px.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gy).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let uy = upsample_forward(&y, c, h / k, w / k, k);
        let gx = upsample_backward(&x, c, h / k, w / k, k);
        let lhs: f64 = uy.iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
