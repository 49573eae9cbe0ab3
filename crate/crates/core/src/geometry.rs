//! Rotated-crop construction.
//!
//! A crop of side `a` is carved out of an enclosing square of side
//! `h = √2·a` that shares its center. Rotating the enclosing square by any
//! angle keeps its inscribed circle intact, and the `a`-square inscribed in
//! that circle is what replaces the original scene. Source coordinates
//! therefore never leave the enclosing square and no padding enters the crop.
//!
//! Conventions: pixel `(row, col)` has its center at integer coordinates;
//! the row axis points down; positive angles are counter-clockwise as seen
//! on screen. A destination pixel at offset `d` from the crop center takes
//! the bilinear sample at `center + R(θ)·d`.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imageio::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatedCropSpec {
    pub row0: usize,
    pub col0: usize,
    pub a: usize,
    pub theta: f64,
    pub h: f64,
}

impl RotatedCropSpec {
    pub fn new(row0: usize, col0: usize, a: usize, theta: f64) -> Self {
        RotatedCropSpec {
            row0,
            col0,
            a,
            theta,
            h: enclosing_side(a),
        }
    }

    /// Center of the crop in pixel-center coordinates `(row, col)`.
    pub fn center(&self) -> (f64, f64) {
        let half = (self.a as f64 - 1.0) / 2.0;
        (self.row0 as f64 + half, self.col0 as f64 + half)
    }

    fn margin(&self) -> f64 {
        (self.h - self.a as f64) / 2.0
    }

    pub fn inner_fits(&self, height: usize, width: usize) -> bool {
        self.a > 0 && self.row0 + self.a <= height && self.col0 + self.a <= width
    }

    /// Whether the enclosing `h`-square lies inside a `height`×`width` image.
    pub fn enclosing_fits(&self, height: usize, width: usize) -> bool {
        let m = self.margin();
        let fits = |start: usize, extent: usize| {
            start as f64 >= m && (start + self.a) as f64 + m <= extent as f64
        };
        self.inner_fits(height, width) && fits(self.row0, height) && fits(self.col0, width)
    }

    pub fn is_aligned(&self, p: usize) -> bool {
        p > 0 && self.a.is_multiple_of(p) && self.row0.is_multiple_of(p) && self.col0.is_multiple_of(p)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row0 + self.a).contains(&row)
            && (self.col0..self.col0 + self.a).contains(&col)
    }

    pub fn to_sidecar(&self) -> String {
        format!("{} {} {} {}\n", self.row0, self.col0, self.a, self.theta)
    }
}

impl fmt::Display for RotatedCropSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_sidecar().trim_end())
    }
}

impl FromStr for RotatedCropSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let fields: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::invalid(format!("bad crop sidecar {s:?}"));
        if fields.len() != 4 {
            return Err(bad());
        }
        let row0 = fields[0].parse().map_err(|_| bad())?;
        let col0 = fields[1].parse().map_err(|_| bad())?;
        let a = fields[2].parse().map_err(|_| bad())?;
        let theta = fields[3].parse().map_err(|_| bad())?;
        Ok(RotatedCropSpec::new(row0, col0, a, theta))
    }
}

pub fn enclosing_side(a: usize) -> f64 {
    SQRT_2 * a as f64
}

/// Start offsets along one axis: multiples of `p` where the crop fits, and,
/// when `enclosing` is set, where the centered `h`-square fits as well.
pub fn feasible_starts(extent: usize, p: usize, a: usize, enclosing: bool) -> Vec<usize> {
    if p == 0 || a == 0 || a > extent {
        return Vec::new();
    }
    let probe = |start| {
        let spec = RotatedCropSpec::new(start, start, a, 0.0);
        if enclosing {
            spec.enclosing_fits(extent, extent)
        } else {
            spec.inner_fits(extent, extent)
        }
    };
    (0..=extent - a).step_by(p).filter(|&s| probe(s)).collect()
}

fn sample_spec<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    p: usize,
    a: usize,
    theta_range: (f64, f64),
    enclosing: bool,
    rng: &mut R,
) -> Result<RotatedCropSpec> {
    if p == 0 || a == 0 || !a.is_multiple_of(p) {
        return Err(Error::invalid(format!(
            "crop side {a} must be a positive multiple of patch size {p}"
        )));
    }
    let (lo, hi) = theta_range;
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::invalid(format!("bad angle range [{lo}, {hi}]")));
    }
    let rows = feasible_starts(height, p, a, enclosing);
    let cols = feasible_starts(width, p, a, enclosing);
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::NoFeasiblePosition {
            height,
            width,
            a,
            h: enclosing_side(a),
        });
    }
    let row0 = rows[rng.random_range(0..rows.len())];
    let col0 = cols[rng.random_range(0..cols.len())];
    let theta = if hi > lo { rng.random_range(lo..hi) } else { lo };
    Ok(RotatedCropSpec::new(row0, col0, a, theta))
}

/// Draws a grid-aligned crop placement uniformly from the feasible set and an
/// angle uniformly from `theta_range` (radians).
pub fn sample_crop_spec<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    p: usize,
    a: usize,
    theta_range: (f64, f64),
    rng: &mut R,
) -> Result<RotatedCropSpec> {
    sample_spec(height, width, p, a, theta_range, true, rng)
}

/// Like [`sample_crop_spec`] but only requires the `a`-square to fit, as the
/// plain random-rotation baseline does.
pub fn sample_baseline_spec<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    p: usize,
    a: usize,
    theta_range: (f64, f64),
    rng: &mut R,
) -> Result<RotatedCropSpec> {
    sample_spec(height, width, p, a, theta_range, false, rng)
}

/// Bilinear sample at real pixel-center coordinates. Callers keep `(y, x)`
/// within `[0, H-1]×[0, W-1]`.
#[inline]
pub fn bilinear(img: &Image, y: f64, x: f64, ch: usize) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let r0 = y0 as usize;
    let c0 = x0 as usize;
    let r1 = (r0 + 1).min(img.height() - 1);
    let c1 = (c0 + 1).min(img.width() - 1);
    let top = (1.0 - fx) * img.get(r0, c0, ch) + fx * img.get(r0, c1, ch);
    let bottom = (1.0 - fx) * img.get(r1, c0, ch) + fx * img.get(r1, c1, ch);
    (1.0 - fy) * top + fy * bottom
}

/// Source coordinate `center + R(θ)·d` for a destination offset `d = (dr, dc)`.
#[inline]
fn rotate_offset(center: (f64, f64), sin: f64, cos: f64, dr: f64, dc: f64) -> (f64, f64) {
    (center.0 + dr * cos - dc * sin, center.1 + dr * sin + dc * cos)
}

fn check_spec(img: &Image, spec: &RotatedCropSpec, enclosing: bool) -> Result<()> {
    let ok = if enclosing {
        spec.enclosing_fits(img.height(), img.width())
    } else {
        spec.inner_fits(img.height(), img.width())
    };
    if !ok || !spec.theta.is_finite() {
        return Err(Error::invalid(format!(
            "crop {spec} does not fit a {}x{} image",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// The rotated `a`×`a` crop content.
pub fn scaling_center_crop(img: &Image, spec: &RotatedCropSpec) -> Result<Image> {
    check_spec(img, spec, true)?;
    let a = spec.a;
    let c = img.channels();
    let center = spec.center();
    let (sin, cos) = spec.theta.sin_cos();
    let half_h = spec.h / 2.0;
    let half = (a as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(a * a * c);
    for i in 0..a {
        for j in 0..a {
            let (y, x) = rotate_offset(center, sin, cos, i as f64 - half, j as f64 - half);
            assert!(
                (y - center.0).abs() <= half_h && (x - center.1).abs() <= half_h,
                "source ({y}, {x}) left the enclosing square of {spec}"
            );
            for ch in 0..c {
                out.push(bilinear(img, y, x, ch));
            }
        }
    }
    Image::from_unclamped(a, a, c, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSample {
    pub original: Image,
    pub composite: Image,
    pub spec: RotatedCropSpec,
}

fn paste(img: &Image, crop: &Image, spec: &RotatedCropSpec) -> Image {
    let mut out = img.clone();
    for i in 0..spec.a {
        for j in 0..spec.a {
            for ch in 0..img.channels() {
                out.set(spec.row0 + i, spec.col0 + j, ch, crop.get(i, j, ch));
            }
        }
    }
    out
}

/// Replaces the crop region of `img` with its scaling-center-crop rotation.
pub fn composite(img: &Image, spec: &RotatedCropSpec) -> Result<CompositeSample> {
    let crop = scaling_center_crop(img, spec)?;
    Ok(CompositeSample {
        original: img.clone(),
        composite: paste(img, &crop, spec),
        spec: *spec,
    })
}

/// Rotates the `a`-square in place; destinations whose source falls outside
/// the square become 0.
pub fn random_rotation_baseline(img: &Image, spec: &RotatedCropSpec) -> Result<CompositeSample> {
    check_spec(img, spec, false)?;
    let a = spec.a;
    let c = img.channels();
    let center = spec.center();
    let (sin, cos) = spec.theta.sin_cos();
    let half = (a as f64 - 1.0) / 2.0;
    let lo = (spec.row0 as f64, spec.col0 as f64);
    let hi = (lo.0 + a as f64 - 1.0, lo.1 + a as f64 - 1.0);
    let mut crop = Vec::with_capacity(a * a * c);
    for i in 0..a {
        for j in 0..a {
            let (y, x) = rotate_offset(center, sin, cos, i as f64 - half, j as f64 - half);
            let inside = y >= lo.0 && y <= hi.0 && x >= lo.1 && x <= hi.1;
            for ch in 0..c {
                crop.push(if inside { bilinear(img, y, x, ch) } else { 0.0 });
            }
        }
    }
    let crop = Image::from_unclamped(a, a, c, crop)?;
    Ok(CompositeSample {
        original: img.clone(),
        composite: paste(img, &crop, spec),
        spec: *spec,
    })
}
