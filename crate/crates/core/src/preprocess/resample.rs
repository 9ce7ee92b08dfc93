use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::data::VolumeScan;

pub const RESIZE_SIZE: usize = 400;
pub const CROP_SIZE: usize = 224;

/// Source index pair and blend weight for one output coordinate.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-center bilinear mapping from `out_len` samples back onto
/// `in_len` samples, edge-clamped.
fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    let last = (in_len - 1) as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

// Written as a + t*(b - a) so that equal endpoints reproduce the input
// value exactly.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn sample(img: &ArrayView2<f32>, row: Tap, col: Tap) -> f32 {
    let top = lerp(img[[row.lo, col.lo]] as f64, img[[row.lo, col.hi]] as f64, col.frac);
    let bottom = lerp(img[[row.hi, col.lo]] as f64, img[[row.hi, col.hi]] as f64, col.frac);
    lerp(top, bottom, row.frac) as f32
}

fn resample_window(
    img: ArrayView2<f32>,
    full: (usize, usize),
    origin: (usize, usize),
    size: (usize, usize),
) -> Array2<f32> {
    let (h, w) = img.dim();
    let rows = &taps(h, full.0)[origin.0..origin.0 + size.0];
    let cols = &taps(w, full.1)[origin.1..origin.1 + size.1];
    Array2::from_shape_fn(size, |(i, j)| sample(&img, rows[i], cols[j]))
}

/// Bilinear resize of one slice.
pub fn resize_bilinear(img: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    resample_window(img, (out_h, out_w), (0, 0), (out_h, out_w))
}

/// Central `size x size` window; the offset rounds down when the margin is odd.
pub fn center_crop(img: ArrayView2<f32>, size: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    assert!(h >= size && w >= size, "crop {size} larger than {h}x{w}");
    let (r0, c0) = ((h - size) / 2, (w - size) / 2);
    img.slice(s![r0..r0 + size, c0..c0 + size]).to_owned()
}

/// Resizes every slice to 400x400 and keeps the central 224x224 window.
///
/// Only the cropped window is ever materialized; the values are identical to
/// `center_crop(resize_bilinear(slice, 400, 400), 224)`.
pub fn resize_and_crop(scan: &VolumeScan) -> VolumeScan {
    let (s, _, _) = scan.dims();
    let offset = (RESIZE_SIZE - CROP_SIZE) / 2;
    let mut out = Array3::<f32>::zeros((s, CROP_SIZE, CROP_SIZE));
    for (k, slice) in scan.voxels.axis_iter(Axis(0)).enumerate() {
        let window = resample_window(
            slice,
            (RESIZE_SIZE, RESIZE_SIZE),
            (offset, offset),
            (CROP_SIZE, CROP_SIZE),
        );
        out.index_axis_mut(Axis(0), k).assign(&window);
    }
    scan.with_voxels(out)
}
