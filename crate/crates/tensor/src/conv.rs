//! Same-padded, stride-1 2-D cross-correlation via im2col + GEMM.

use crate::gemm::{gemm, Mat};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn hw(&self) -> usize {
        self.height * self.width
    }

    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Column range `[x0, x1)` of an output row whose source column `x + shift` is in bounds.
fn valid_cols(width: usize, shift: isize) -> (usize, usize) {
    let x0 = (-shift).max(0) as usize;
    let x1 = (width as isize - shift).clamp(0, width as isize) as usize;
    (x0.min(x1), x1)
}

fn im2col(img: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let (h, w, k) = (d.height, d.width, d.kernel);
    let hw = d.hw();
    let pad = (k / 2) as isize;
    for ci in 0..d.c_in {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (x0, x1) = valid_cols(w, dx);
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    out[..x0].fill(0.0);
                    out[x1..].fill(0.0);
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], d: &ConvDims, img: &mut [f64]) {
    let (h, w, k) = (d.height, d.width, d.kernel);
    let hw = d.hw();
    let pad = (k / 2) as isize;
    for ci in 0..d.c_in {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (x0, x1) = valid_cols(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w + x0..y * w + x1];
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x1 - x0];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(x: &[f64], weight: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let hw = d.hw();
    let mut out = vec![0.0; d.batch * d.c_out * hw];
    let mut cols = vec![0.0; d.patch() * hw];
    for n in 0..d.batch {
        im2col(&x[n * d.c_in * hw..(n + 1) * d.c_in * hw], d, &mut cols);
        let o = &mut out[n * d.c_out * hw..(n + 1) * d.c_out * hw];
        for (co, row) in o.chunks_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        gemm(
            Mat::new(weight, d.c_out, d.patch()),
            Mat::new(&cols, d.patch(), hw),
            1.0,
            o,
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn backward(
    x: &[f64],
    weight: &[f64],
    g: &[f64],
    d: &ConvDims,
    need_dx: bool,
) -> ConvGrads {
    let hw = d.hw();
    let mut dw = vec![0.0; d.c_out * d.patch()];
    let mut db = vec![0.0; d.c_out];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut cols = vec![0.0; d.patch() * hw];
    let mut dcols = vec![0.0; d.patch() * hw];
    for n in 0..d.batch {
        let gn = &g[n * d.c_out * hw..(n + 1) * d.c_out * hw];
        for (co, row) in gn.chunks(hw).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
        im2col(&x[n * d.c_in * hw..(n + 1) * d.c_in * hw], d, &mut cols);
        gemm(
            Mat::new(gn, d.c_out, hw),
            Mat::new(&cols, d.patch(), hw).t(),
            1.0,
            &mut dw,
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                Mat::new(weight, d.c_out, d.patch()).t(),
                Mat::new(gn, d.c_out, hw),
                0.0,
                &mut dcols,
            );
            col2im_add(&dcols, d, &mut dx[n * d.c_in * hw..(n + 1) * d.c_in * hw]);
        }
    }
    ConvGrads { dx, dw, db }
}
