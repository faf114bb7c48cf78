//! Forward-only spatial operators: same-padded convolution, global average
//! pooling and bilinear sampling.

use super::Tensor;
use crate::error::{Error, Result};

fn chw(x: &Tensor<f32>, what: &str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape(format!("{} expects C×H×W, got {:?}", what, s))),
    }
}

/// Cross-correlation with zero padding that preserves H×W.
///
/// Lowered to im2col followed by a single-precision GEMM.
pub fn conv2d(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, wd) = chw(x, "conv2d input")?;
    let (f, wc, kh, kw) = match w.shape() {
        [f, c, kh, kw] => (*f, *c, *kh, *kw),
        s => return Err(Error::shape(format!("conv2d kernel expects F×C×kh×kw, got {:?}", s))),
    };
    if wc != c {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {}, kernel expects {}",
            c, wc
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(format!(
            "conv2d kernel dims must be odd, got {}×{}",
            kh, kw
        )));
    }
    if b.shape() != [f] {
        return Err(Error::shape(format!(
            "conv2d bias expects [{}], got {:?}",
            f,
            b.shape()
        )));
    }

    let hw = h * wd;
    let taps = c * kh * kw;
    let (ph, pw) = (kh / 2, kw / 2);
    let xd = x.data();

    // cols[(ci, ky, kx), (y, x)]
    let mut cols = vec![0f32; taps * hw];
    for ci in 0..c {
        let plane = &xd[ci * hw..(ci + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - ph as isize;
                let dx = kx as isize - pw as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * wd..(sy as usize + 1) * wd];
                    let dst_row = &mut dst[y * wd..(y + 1) * wd];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (wd as isize - dx).min(wd as isize).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let s_lo = (x_lo as isize + dx) as usize;
                    dst_row[x_lo..x_hi].copy_from_slice(&src_row[s_lo..s_lo + (x_hi - x_lo)]);
                }
            }
        }
    }

    let mut out = vec![0f32; f * hw];
    for (fi, chunk) in out.chunks_mut(hw).enumerate() {
        chunk.fill(b.data()[fi]);
    }
    // SAFETY: the slices are exactly f×taps, taps×hw and f×hw, row-major,
    // and the strides passed below describe that layout.
    unsafe {
        matrixmultiply::sgemm(
            f,
            taps,
            hw,
            1.0,
            w.data().as_ptr(),
            taps as isize,
            1,
            cols.as_ptr(),
            hw as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    Tensor::new(vec![f, h, wd], out)?.checked("conv2d")
}

pub fn global_avg_pool(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(x, "global_avg_pool")?;
    let hw = h * w;
    let means = x
        .data()
        .chunks(hw)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor::new(vec![c], means)
}

/// Samples every channel of `map` at each `(x, y)`; neighbours outside the
/// map read as zero.
pub fn bilinear_sample(map: &Tensor<f32>, coords: &[(f64, f64)]) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(map, "bilinear_sample")?;
    if coords.is_empty() {
        return Err(Error::shape("bilinear_sample needs at least one coordinate"));
    }
    let n = coords.len();
    let hw = h * w;
    let md = map.data();
    let mut out = vec![0f32; c * n];

    for (k, &(x, y)) in coords.iter().enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite("bilinear_sample coordinate"));
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ];
        for &(tx, ty, wt) in &taps {
            if wt == 0.0 || tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
                continue;
            }
            let offset = ty as usize * w + tx as usize;
            for ci in 0..c {
                out[ci * n + k] += (wt * md[ci * hw + offset] as f64) as f32;
            }
        }
    }
    Tensor::new(vec![c, n], out)
}
