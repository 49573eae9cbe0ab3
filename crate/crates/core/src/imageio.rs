//! Raster I/O and synthetic datasets.
//!
//! Pixels live in memory as `f64` in `[0, 1]`, row-major and
//! channel-interleaved. Quantization to 8 bits happens only when a file is
//! written. Binary portable pixmaps (P5 grayscale, P6 color) are the on-disk
//! format; 16-bit payloads (max value above 255) are accepted on load.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ZeroSized);
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{}x{}x{} image needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Image::filled(height, width, channels, 0.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    /// Sets a pixel, clamping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value.clamp(0.0, 1.0);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Replaces the pixel buffer. Values are clamped into `[0, 1]`; NaN is rejected.
    pub(crate) fn from_unclamped(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN pixel".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::new(height, width, channels, data)
    }

    /// The same image quantized to 8 bits, as it would come back from disk.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| f64::from(quantize(v)) / 255.0).collect(),
            ..self.clone()
        }
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn unreadable(path: &Path, reason: impl Into<String>) -> Error {
    Error::Unreadable {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Pulls the next whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos).ok_or_else(|| unreadable(path, "empty file"))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("magic {:?}", String::from_utf8_lossy(other)),
            })
        }
    };
    let mut field = |name: &str| -> Result<usize> {
        let tok = header_token(bytes, &mut pos)
            .ok_or_else(|| unreadable(path, format!("truncated header ({name})")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| unreadable(path, format!("bad {name} field")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("max value")?;
    if width == 0 || height == 0 {
        return Err(Error::ZeroSized);
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("max value {maxval}"),
        });
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() {
        return Err(unreadable(path, "missing pixel payload"));
    }
    pos += 1;
    let samples = width * height * channels;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let payload = &bytes[pos..];
    if payload.len() < samples * bytes_per {
        return Err(unreadable(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), samples * bytes_per),
        ));
    }
    let scale = maxval as f64;
    let data = if bytes_per == 1 {
        payload[..samples]
            .iter()
            .map(|&b| (f64::from(b) / scale).min(1.0))
            .collect()
    } else {
        payload[..samples * 2]
            .chunks_exact(2)
            .map(|c| (f64::from(u16::from_be_bytes([c[0], c[1]])) / scale).min(1.0))
            .collect()
    };
    Image::new(height, width, channels, data)
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| unreadable(path, e.to_string()))?;
    decode_pnm(&bytes, path)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(img)).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

/// Lists the pixmap files in a directory in lexicographic order.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm" | "pgm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    list_images(dir)?.iter().map(load_image).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    OrientedBar,
    OrientedEllipse,
    Checker,
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::OrientedBar => "oriented_bar",
            ShapeKind::OrientedEllipse => "oriented_ellipse",
            ShapeKind::Checker => "checker",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oriented_bar" => Ok(ShapeKind::OrientedBar),
            "oriented_ellipse" => Ok(ShapeKind::OrientedEllipse),
            "checker" => Ok(ShapeKind::Checker),
            other => Err(Error::invalid(format!("unknown shape kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
    pub shape_kind: ShapeKind,
}

impl DatasetSpec {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        DatasetSpec {
            count,
            size,
            channels: 3,
            seed,
            shape_kind: ShapeKind::OrientedBar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::invalid("count ≥ 1 required"));
        }
        if self.size == 0 {
            return Err(Error::ZeroSized);
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Checks the image side against a patch size.
    pub fn validate_for_patch(&self, p: usize) -> Result<()> {
        self.validate()?;
        if p == 0 || !self.size.is_multiple_of(p) {
            return Err(Error::invalid(format!(
                "size {} not divisible by patch size {p}",
                self.size
            )));
        }
        Ok(())
    }

    pub fn manifest(&self) -> String {
        format!(
            "seed = {}\ncount = {}\nsize = {}\nchannels = {}\nshape_kind = {}\n",
            self.seed, self.count, self.size, self.channels, self.shape_kind
        )
    }
}

const SUPERSAMPLE: usize = 4;

pub fn generate_synthetic(spec: &DatasetSpec) -> Result<Vec<Image>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| synth_one(spec, i as u64))
        .collect()
}

struct Scene {
    base: [f64; 3],
    waves: [(f64, f64, f64, f64); 2],
    shape: [f64; 3],
    alt: [f64; 3],
    angle: f64,
    center: (f64, f64),
    half_len: f64,
    half_wid: f64,
}

impl Scene {
    fn sample(rng: &mut ChaCha8Rng, size: f64, kind: ShapeKind) -> Scene {
        let base = [
            rng.random_range(0.15..0.45),
            rng.random_range(0.15..0.45),
            rng.random_range(0.15..0.45),
        ];
        let mut wave = || {
            (
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        };
        let waves = [wave(), wave()];
        let shape = [
            rng.random_range(0.6..0.95),
            rng.random_range(0.6..0.95),
            rng.random_range(0.6..0.95),
        ];
        let alt = [shape[0] * 0.3, shape[1] * 0.3, shape[2] * 0.3];
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let center = (
            rng.random_range(0.3..0.7) * size,
            rng.random_range(0.3..0.7) * size,
        );
        let (half_len, half_wid) = match kind {
            ShapeKind::OrientedBar => (
                rng.random_range(0.18..0.32) * size,
                rng.random_range(0.04..0.08) * size,
            ),
            ShapeKind::OrientedEllipse => (
                rng.random_range(0.18..0.3) * size,
                rng.random_range(0.06..0.12) * size,
            ),
            ShapeKind::Checker => {
                let s = rng.random_range(0.15..0.25) * size;
                (s, s)
            }
        };
        Scene {
            base,
            waves,
            shape,
            alt,
            angle,
            center,
            half_len,
            half_wid,
        }
    }

    fn background(&self, y: f64, x: f64, ch: usize) -> f64 {
        let mut v = self.base[ch];
        for (k, &(freq, phase_y, phase_x, amp)) in self.waves.iter().enumerate() {
            let shift = ch as f64 * 0.7 + k as f64;
            v += amp * ((freq * y + phase_y + shift).sin() * (freq * x + phase_x).cos());
        }
        v
    }

    /// Shape color at a subpixel, or `None` outside the shape.
    fn shape_at(&self, kind: ShapeKind, y: f64, x: f64, ch: usize) -> Option<f64> {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.center.0;
        let dx = x - self.center.1;
        // coordinates along / across the shape axis; angle measured counter-clockwise
        let u = dx * c - dy * s;
        let v = dx * s + dy * c;
        match kind {
            ShapeKind::OrientedBar => {
                (u.abs() <= self.half_len && v.abs() <= self.half_wid).then_some(self.shape[ch])
            }
            ShapeKind::OrientedEllipse => {
                let r = (u / self.half_len).powi(2) + (v / self.half_wid).powi(2);
                (r <= 1.0).then_some(self.shape[ch])
            }
            ShapeKind::Checker => {
                if u.abs() > self.half_len || v.abs() > self.half_wid {
                    return None;
                }
                let cell = self.half_len / 2.0;
                let iu = ((u + self.half_len) / cell).floor() as i64;
                let iv = ((v + self.half_wid) / cell).floor() as i64;
                Some(if (iu + iv) % 2 == 0 {
                    self.shape[ch]
                } else {
                    self.alt[ch]
                })
            }
        }
    }
}

fn synth_one(spec: &DatasetSpec, index: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let size = spec.size;
    let scene = Scene::sample(&mut rng, size as f64, spec.shape_kind);
    let noise_amp = 0.02;
    let mut data = Vec::with_capacity(size * size * spec.channels);
    let inv = 1.0 / SUPERSAMPLE as f64;
    for row in 0..size {
        for col in 0..size {
            let noise: f64 = rng.random_range(-noise_amp..noise_amp);
            for ch in 0..spec.channels {
                // grayscale takes the first channel's palette
                let mut acc = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let y = row as f64 + (sy as f64 + 0.5) * inv;
                        let x = col as f64 + (sx as f64 + 0.5) * inv;
                        acc += scene
                            .shape_at(spec.shape_kind, y, x, ch)
                            .unwrap_or_else(|| scene.background(y, x, ch));
                    }
                }
                let v = acc * inv * inv + noise;
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(size, size, spec.channels, data)
}

/// Writes `synth_{index:06}.ppm` files plus `manifest.txt` into `dir`.
pub fn write_dataset(spec: &DatasetSpec, images: &[Image], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in images.iter().enumerate() {
        save_image(img, dir.join(format!("synth_{i:06}.ppm")))?;
    }
    let manifest = dir.join("manifest.txt");
    let mut f = fs::File::create(&manifest).map_err(|source| Error::Unwritable {
        path: manifest.clone(),
        source,
    })?;
    f.write_all(spec.manifest().as_bytes())
        .map_err(|e| Error::io(&manifest, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_p6_decodes_to_ones() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        let img = decode_pnm(&bytes, Path::new("mem")).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 2, 3));
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n3 1\n# max\n255\n".to_vec();
        bytes.extend([0u8, 51, 255]);
        let img = decode_pnm(&bytes, Path::new("mem")).unwrap();
        assert_eq!(img.data(), &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn truncated_payload_is_unreadable() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([1u8; 7]);
        let err = decode_pnm(&bytes, Path::new("mem")).unwrap_err();
        assert!(err.to_string().starts_with("unreadable file"), "{err}");
    }

    #[test]
    fn truncated_header_is_unreadable() {
        let err = decode_pnm(b"P6\n2", Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Unreadable { .. }));
    }

    #[test]
    fn unknown_magic_is_unsupported() {
        let err = decode_pnm(b"P3\n1 1\n255\n0 0 0\n", Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat { .. }));
    }

    #[test]
    fn zero_sized_header_is_rejected() {
        let err = decode_pnm(b"P5\n0 4\n255\n", Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::ZeroSized));
    }

    #[test]
    fn sixteen_bit_payload() {
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x00]);
        let img = decode_pnm(&bytes, Path::new("mem")).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_image_encodes_zero_payload() {
        let img = Image::zeros(3, 4, 3).unwrap();
        let bytes = encode_pnm(&img);
        let header = b"P6\n4 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 36);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn save_into_missing_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::zeros(2, 2, 1).unwrap();
        let err = save_image(&img, dir.path().join("nope/x.ppm")).unwrap_err();
        assert!(matches!(err, Error::Unwritable { .. }));
    }

    #[test]
    fn image_rejects_out_of_range_values() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5]).is_err());
    }

    #[test]
    fn synthetic_count_zero_is_rejected() {
        let err = generate_synthetic(&DatasetSpec::new(0, 16, 1)).unwrap_err();
        assert!(err.to_string().contains("count ≥ 1 required"));
    }

    #[test]
    fn synthetic_shape_contract() {
        let imgs = generate_synthetic(&DatasetSpec::new(256, 96, 7)).unwrap();
        assert_eq!(imgs.len(), 256);
        assert!(imgs
            .iter()
            .all(|i| i.height() == 96 && i.width() == 96 && i.channels() == 3));
    }

    #[test]
    fn synthetic_is_deterministic_and_varied() {
        for kind in [ShapeKind::OrientedBar, ShapeKind::OrientedEllipse, ShapeKind::Checker] {
            let spec = DatasetSpec {
                shape_kind: kind,
                ..DatasetSpec::new(3, 32, 11)
            };
            let a = generate_synthetic(&spec).unwrap();
            let b = generate_synthetic(&spec).unwrap();
            assert_eq!(a, b);
            assert_ne!(a[0], a[1]);
        }
    }

    #[test]
    fn patch_divisibility() {
        let spec = DatasetSpec::new(1, 96, 0);
        assert!(spec.validate_for_patch(8).is_ok());
        assert!(spec.validate_for_patch(7).is_err());
    }

    #[test]
    fn shape_kind_round_trips() {
        for k in [ShapeKind::OrientedBar, ShapeKind::OrientedEllipse, ShapeKind::Checker] {
            assert_eq!(k.to_string().parse::<ShapeKind>().unwrap(), k);
        }
    }
}
