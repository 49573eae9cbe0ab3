//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ma3e::geometry::RotatedCropSpec;
use ma3e::imageio::Image;

/// Tent-kernel bilinear sample written as an explicit sum over the pixel
/// neighbourhood rather than a two-step lerp.
pub fn tent_sample(img: &Image, y: f64, x: f64, ch: usize) -> f64 {
    let mut acc = 0.0;
    let (r_lo, c_lo) = (y.floor() as i64 - 1, x.floor() as i64 - 1);
    for r in r_lo..=r_lo + 3 {
        for c in c_lo..=c_lo + 3 {
            if r < 0 || c < 0 || r >= img.height() as i64 || c >= img.width() as i64 {
                continue;
            }
            let w = (1.0 - (y - r as f64).abs()).max(0.0) * (1.0 - (x - c as f64).abs()).max(0.0);
            acc += w * img.get(r as usize, c as usize, ch);
        }
    }
    acc
}

/// Source position for a destination offset, via polar form: the offset
/// `dc + i·dr` is turned by `-θ` (row axis down, counter-clockwise positive).
pub fn oracle_source(spec: &RotatedCropSpec, i: usize, j: usize) -> (f64, f64) {
    let half = (spec.a as f64 - 1.0) / 2.0;
    let (dr, dc) = (i as f64 - half, j as f64 - half);
    let radius = dr.hypot(dc);
    let phi = dr.atan2(dc) - spec.theta;
    let cy = spec.row0 as f64 + half;
    let cx = spec.col0 as f64 + half;
    (cy + radius * phi.sin(), cx + radius * phi.cos())
}

pub fn oracle_crop(img: &Image, spec: &RotatedCropSpec) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..spec.a {
        for j in 0..spec.a {
            let (y, x) = oracle_source(spec, i, j);
            for ch in 0..img.channels() {
                out.push(tent_sample(img, y, x, ch));
            }
        }
    }
    out
}
