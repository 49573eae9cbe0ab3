//! Patch sequences and the split crop/background masking.

use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::RotatedCropSpec;
use crate::imageio::Image;

/// `N` flattened `p×p×C` patches in row-major grid order. Each row of
/// `patches` is one patch, flattened row-major then channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Array2<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub p: usize,
    pub channels: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.p * self.p * self.channels
    }

    /// Rows of `patches` at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Array2<f64> {
        self.patches.select(Axis(0), indices)
    }
}

pub fn patchify(img: &Image, p: usize) -> Result<PatchSet> {
    if p == 0 || !img.height().is_multiple_of(p) || !img.width().is_multiple_of(p) {
        return Err(Error::invalid(format!(
            "{}x{} image is not divisible by patch size {p}",
            img.height(),
            img.width()
        )));
    }
    let c = img.channels();
    let rows = img.height() / p;
    let cols = img.width() / p;
    let dim = p * p * c;
    let mut patches = Array2::zeros((rows * cols, dim));
    for (k, mut patch) in patches.outer_iter_mut().enumerate() {
        let (gr, gc) = (k / cols, k % cols);
        for y in 0..p {
            let start = img.index(gr * p + y, gc * p, 0);
            let src = &img.data()[start..start + p * c];
            for (dst, &v) in patch.iter_mut().skip(y * p * c).zip(src) {
                *dst = v;
            }
        }
    }
    Ok(PatchSet {
        patches,
        grid_rows: rows,
        grid_cols: cols,
        p,
        channels: c,
    })
}

/// Reassembles an image; values are clamped into `[0, 1]`.
pub fn unpatchify(ps: &PatchSet) -> Result<Image> {
    let (p, c) = (ps.p, ps.channels);
    if p == 0 || ps.grid_rows * ps.grid_cols != ps.len() || ps.patches.ncols() != ps.patch_dim() {
        return Err(Error::shape(format!(
            "{} patches of width {} do not match a {}x{} grid of {p}px, {c}-channel patches",
            ps.len(),
            ps.patches.ncols(),
            ps.grid_rows,
            ps.grid_cols
        )));
    }
    let (h, w) = (ps.grid_rows * p, ps.grid_cols * p);
    let mut data = vec![0.0; h * w * c];
    for (k, patch) in ps.patches.outer_iter().enumerate() {
        let (gr, gc) = (k / ps.grid_cols, k % ps.grid_cols);
        for y in 0..p {
            let start = ((gr * p + y) * w + gc * p) * c;
            for (x, &v) in patch.iter().skip(y * p * c).take(p * c).enumerate() {
                data[start + x] = v;
            }
        }
    }
    Image::from_unclamped(h, w, c, data)
}

/// Per-patch standardization: subtract the mean and divide by the standard
/// deviation of each patch.
pub fn normalize_patch_targets(patches: &Array2<f64>) -> Array2<f64> {
    let mut out = patches.clone();
    for mut row in out.outer_iter_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// Grid cells covered by the crop, ascending, and the remaining cells.
pub fn split_indices(
    spec: &RotatedCropSpec,
    grid_rows: usize,
    grid_cols: usize,
    p: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !spec.is_aligned(p) {
        return Err(Error::invalid(format!("crop {spec} is not aligned to {p}px patches")));
    }
    let (r0, c0, side) = (spec.row0 / p, spec.col0 / p, spec.a / p);
    if r0 + side > grid_rows || c0 + side > grid_cols {
        return Err(Error::invalid(format!(
            "crop {spec} exceeds the {grid_rows}x{grid_cols} grid"
        )));
    }
    let (crop, background) = (0..grid_rows * grid_cols).partition(|&k| {
        let (r, c) = (k / grid_cols, k % grid_cols);
        (r0..r0 + side).contains(&r) && (c0..c0 + side).contains(&c)
    });
    Ok((crop, background))
}

/// `round(n·(1 − ratio))`.
pub fn visible_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * (1.0 - ratio)).round() as usize).min(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLayout {
    pub crop_indices: Vec<usize>,
    pub background_indices: Vec<usize>,
    pub crop_visible: Vec<usize>,
    pub crop_masked: Vec<usize>,
    pub bg_visible: Vec<usize>,
    pub bg_masked: Vec<usize>,
    pub ratio_crop: f64,
    pub ratio_bg: f64,
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Splits `population` into (visible, masked), both ascending.
fn draw<R: Rng + ?Sized>(population: &[usize], keep: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut chosen = vec![false; population.len()];
    for i in index::sample(rng, population.len(), keep) {
        chosen[i] = true;
    }
    let mut visible = Vec::with_capacity(keep);
    let mut masked = Vec::with_capacity(population.len() - keep);
    let mut sorted: Vec<(usize, bool)> = population.iter().copied().zip(chosen).collect();
    sorted.sort_unstable_by_key(|&(k, _)| k);
    for (k, keep) in sorted {
        if keep {
            visible.push(k);
        } else {
            masked.push(k);
        }
    }
    (visible, masked)
}

/// Masks crop and background independently, each uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(
    crop_indices: &[usize],
    background_indices: &[usize],
    ratio_crop: f64,
    ratio_bg: f64,
    rng: &mut R,
) -> Result<MaskLayout> {
    check_ratio(ratio_crop)?;
    check_ratio(ratio_bg)?;
    let (crop_visible, crop_masked) =
        draw(crop_indices, visible_count(crop_indices.len(), ratio_crop), rng);
    let (bg_visible, bg_masked) = draw(
        background_indices,
        visible_count(background_indices.len(), ratio_bg),
        rng,
    );
    let mut crop_indices = crop_indices.to_vec();
    let mut background_indices = background_indices.to_vec();
    crop_indices.sort_unstable();
    background_indices.sort_unstable();
    Ok(MaskLayout {
        crop_indices,
        background_indices,
        crop_visible,
        crop_masked,
        bg_visible,
        bg_masked,
        ratio_crop,
        ratio_bg,
    })
}

/// One mask over all patches at a single ratio, ignoring the crop boundary
/// when drawing; the result is still reported per population.
pub fn sample_mask_joint<R: Rng + ?Sized>(
    crop_indices: &[usize],
    background_indices: &[usize],
    ratio: f64,
    rng: &mut R,
) -> Result<MaskLayout> {
    check_ratio(ratio)?;
    let mut all: Vec<usize> = crop_indices.iter().chain(background_indices).copied().collect();
    all.sort_unstable();
    let (visible, _) = draw(&all, visible_count(all.len(), ratio), rng);
    let mut is_visible = vec![false; all.last().map_or(0, |&m| m + 1)];
    for &k in &visible {
        is_visible[k] = true;
    }
    let mut crop_indices = crop_indices.to_vec();
    let mut background_indices = background_indices.to_vec();
    crop_indices.sort_unstable();
    background_indices.sort_unstable();
    let (crop_visible, crop_masked) = crop_indices.iter().partition(|&&k| is_visible[k]);
    let (bg_visible, bg_masked) = background_indices.iter().partition(|&&k| is_visible[k]);
    Ok(MaskLayout {
        crop_indices,
        background_indices,
        crop_visible,
        crop_masked,
        bg_visible,
        bg_masked,
        ratio_crop: ratio,
        ratio_bg: ratio,
    })
}

impl MaskLayout {
    pub fn num_patches(&self) -> usize {
        self.crop_indices.len() + self.background_indices.len()
    }

    /// Encoder token order: crop-visible then background-visible.
    pub fn visible(&self) -> Vec<usize> {
        self.crop_visible.iter().chain(&self.bg_visible).copied().collect()
    }

    pub fn num_masked(&self) -> usize {
        self.crop_masked.len() + self.bg_masked.len()
    }

    pub fn is_masked(&self) -> Vec<bool> {
        let mut masked = vec![false; self.num_patches()];
        for &k in self.crop_masked.iter().chain(&self.bg_masked) {
            masked[k] = true;
        }
        masked
    }

    /// Checks that the four sets partition `{0..n-1}` consistently.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![0u8; n];
        let groups = [
            &self.crop_visible,
            &self.crop_masked,
            &self.bg_visible,
            &self.bg_masked,
        ];
        for group in groups {
            for &k in group.iter() {
                if k >= n {
                    return Err(Error::shape(format!("patch index {k} out of range {n}")));
                }
                seen[k] += 1;
            }
        }
        if seen.iter().any(|&s| s != 1) {
            return Err(Error::shape("mask sets do not partition the patch grid"));
        }
        let mut crop: Vec<usize> = self.crop_visible.iter().chain(&self.crop_masked).copied().collect();
        crop.sort_unstable();
        if crop != self.crop_indices || self.num_patches() != n {
            return Err(Error::shape("crop indices disagree with visible/masked crop sets"));
        }
        Ok(())
    }

    /// Text sidecar: one `name: i j k ...` line per index set.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ratio_crop: {}", self.ratio_crop);
        let _ = writeln!(out, "ratio_bg: {}", self.ratio_bg);
        let sets = [
            ("crop_indices", &self.crop_indices),
            ("background_indices", &self.background_indices),
            ("crop_visible", &self.crop_visible),
            ("crop_masked", &self.crop_masked),
            ("bg_visible", &self.bg_visible),
            ("bg_masked", &self.bg_masked),
        ];
        for (name, set) in sets {
            let list: Vec<String> = set.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{name}: {}", list.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut layout = MaskLayout {
            crop_indices: vec![],
            background_indices: vec![],
            crop_visible: vec![],
            crop_masked: vec![],
            bg_visible: vec![],
            bg_masked: vec![],
            ratio_crop: 0.0,
            ratio_bg: 0.0,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (name, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("bad mask line {line:?}")))?;
            let parse_list = || -> Result<Vec<usize>> {
                rest.split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::invalid(format!("bad index {t:?}"))))
                    .collect()
            };
            let parse_ratio = || -> Result<f64> {
                rest.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad ratio {rest:?}")))
            };
            match name.trim() {
                "ratio_crop" => layout.ratio_crop = parse_ratio()?,
                "ratio_bg" => layout.ratio_bg = parse_ratio()?,
                "crop_indices" => layout.crop_indices = parse_list()?,
                "background_indices" => layout.background_indices = parse_list()?,
                "crop_visible" => layout.crop_visible = parse_list()?,
                "crop_masked" => layout.crop_masked = parse_list()?,
                "bg_visible" => layout.bg_visible = parse_list()?,
                "bg_masked" => layout.bg_masked = parse_list()?,
                other => return Err(Error::invalid(format!("unknown mask set {other:?}"))),
            }
        }
        layout.validate(layout.num_patches())?;
        Ok(layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn patch_count_224() {
        let img = Image::zeros(224, 224, 3).unwrap();
        assert_eq!(patchify(&img, 16).unwrap().len(), 196);
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let img = noise_image(16, 16, 3, 1);
        let ps = patchify(&img, 16).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.patches.row(0).to_vec(), img.data());
    }

    #[test]
    fn patch_layout_is_row_major_then_channel() {
        let img = noise_image(8, 12, 3, 2);
        let ps = patchify(&img, 4).unwrap();
        assert_eq!((ps.grid_rows, ps.grid_cols), (2, 3));
        // patch 4 = grid (1, 1); element (y=2, x=3, c=1)
        assert_eq!(ps.patches[[4, (2 * 4 + 3) * 3 + 1]], img.get(6, 7, 1));
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let img = Image::zeros(10, 16, 1).unwrap();
        assert!(patchify(&img, 4).is_err());
    }

    #[test]
    fn unpatchify_zero_and_single_block() {
        let img = Image::zeros(16, 16, 1).unwrap();
        let mut ps = patchify(&img, 4).unwrap();
        assert_eq!(unpatchify(&ps).unwrap(), img);
        ps.patches.row_mut(5).fill(1.0);
        let out = unpatchify(&ps).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let inside = (4..8).contains(&r) && (4..8).contains(&c);
                assert_eq!(out.get(r, c, 0), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn unpatchify_rejects_bad_grid() {
        let mut ps = patchify(&Image::zeros(8, 8, 1).unwrap(), 4).unwrap();
        ps.grid_rows = 3;
        assert!(unpatchify(&ps).is_err());
    }

    #[test]
    fn split_counts() {
        let spec = RotatedCropSpec::new(32, 64, 96, 0.0);
        let (crop, bg) = split_indices(&spec, 14, 14, 16).unwrap();
        assert_eq!(crop.len(), 36);
        assert_eq!(bg.len(), 160);
        assert_eq!(crop[0], 2 * 14 + 4);

        let origin = RotatedCropSpec::new(0, 0, 16, 0.0);
        assert_eq!(split_indices(&origin, 4, 4, 16).unwrap().0, vec![0]);

        let off = RotatedCropSpec::new(8, 0, 16, 0.0);
        assert!(split_indices(&off, 4, 4, 16).is_err());
    }

    #[test]
    fn reported_visible_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let crop: Vec<usize> = (0..36).collect();
        let bg: Vec<usize> = (36..196).collect();
        let m = sample_mask(&crop, &bg, 0.75, 0.75, &mut rng).unwrap();
        assert_eq!((m.crop_visible.len(), m.bg_visible.len()), (9, 40));
        let m = sample_mask(&crop, &bg, 0.80, 0.75, &mut rng).unwrap();
        assert_eq!(m.crop_visible.len(), 7);
    }

    #[test]
    fn zero_ratio_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_mask(&[0, 1], &[2, 3, 4], 0.0, 0.0, &mut rng).unwrap();
        assert!(m.crop_masked.is_empty() && m.bg_masked.is_empty());
        assert_eq!(m.visible(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn bad_ratio_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(&[0], &[1], 1.5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn joint_mask_is_a_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let crop: Vec<usize> = vec![5, 6, 9, 10];
        let bg: Vec<usize> = (0..16).filter(|k| !crop.contains(k)).collect();
        let m = sample_mask_joint(&crop, &bg, 0.75, &mut rng).unwrap();
        m.validate(16).unwrap();
        assert_eq!(m.crop_visible.len() + m.bg_visible.len(), 4);
    }

    #[test]
    fn mask_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let crop: Vec<usize> = vec![0, 1, 4, 5];
        let bg: Vec<usize> = vec![2, 3, 6, 7];
        let m = sample_mask(&crop, &bg, 0.5, 0.25, &mut rng).unwrap();
        assert_eq!(MaskLayout::from_text(&m.to_text()).unwrap(), m);
        assert!(MaskLayout::from_text("crop_visible: 0 0").is_err());
    }

    #[test]
    fn normalized_targets_have_zero_mean() {
        let img = noise_image(8, 8, 3, 3);
        let ps = patchify(&img, 4).unwrap();
        let norm = normalize_patch_targets(&ps.patches);
        for row in norm.outer_iter() {
            assert!(row.sum().abs() < 1e-9);
        }
    }
}
