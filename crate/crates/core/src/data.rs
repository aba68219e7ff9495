//! Slide tiling and dataset plumbing: cutting a stained-slide raster into
//! fixed-size tiles, deriving multi-hot labels from region masks, balancing
//! label combinations, assigning train/val/test splits over repeated rounds,
//! color augmentations, and the line-delimited JSON manifest that ties it all
//! together.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Element, Tensor};

/// Canonical label order; logit/target columns and mask indices follow it.
pub const LABEL_NAMES: [&str; 4] = ["interstitial_area", "necrosis", "non_tumor", "tumor"];

pub const INTERSTITIAL: usize = 0;
pub const NECROSIS: usize = 1;
pub const NON_TUMOR: usize = 2;
pub const TUMOR: usize = 3;

/// Multi-hot label over the four tissue classes. At least one bit is always
/// set; tiles matching no class are discarded before one is ever built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabelVector([bool; 4]);

impl LabelVector {
    pub fn new(bits: [bool; 4]) -> Result<Self> {
        if bits.iter().any(|&b| b) {
            Ok(Self(bits))
        } else {
            Err(Error::Data("label vector must set at least one bit".into()))
        }
    }

    pub fn bit(&self, label: usize) -> bool {
        self.0[label]
    }

    pub fn bits(&self) -> [bool; 4] {
        self.0
    }

    /// Names of the set bits, in canonical order.
    pub fn names(&self) -> Vec<String> {
        LABEL_NAMES
            .iter()
            .zip(self.0)
            .filter(|(_, b)| *b)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut bits = [false; 4];
        for n in names {
            let idx = LABEL_NAMES
                .iter()
                .position(|&l| l == n.as_ref())
                .ok_or_else(|| Error::Data(format!("unknown label name {:?}", n.as_ref())))?;
            bits[idx] = true;
        }
        Self::new(bits)
    }

    /// A short stable key like `interstitial_area+tumor`, used to group
    /// records by label combination.
    pub fn combo_key(&self) -> String {
        self.names().join("+")
    }

    /// The 0/1 target row for the loss, in canonical column order.
    pub fn targets<E: Element>(&self) -> [E; 4] {
        self.0.map(|b| E::from_f64(if b { 1.0 } else { 0.0 }))
    }
}

/// Stack label rows into an `[N, 4]` target tensor.
pub fn labels_to_tensor<E: Element>(labels: &[LabelVector]) -> Result<Tensor<E>> {
    if labels.is_empty() {
        return Err(Error::Data("empty label batch".into()));
    }
    let data = labels.iter().flat_map(|l| l.targets::<E>()).collect();
    Tensor::new(vec![labels.len(), 4], data)
}

/// Binary region masks, one per label, all matching the slide dimensions.
/// Masks may overlap; overlapping tissue is what produces multi-label tiles.
pub struct RegionMasks {
    width: u32,
    height: u32,
    masks: [Vec<bool>; 4],
}

impl RegionMasks {
    pub fn new(width: u32, height: u32) -> Self {
        let empty = vec![false; (width * height) as usize];
        Self {
            width,
            height,
            masks: [empty.clone(), empty.clone(), empty.clone(), empty],
        }
    }

    /// Build from grayscale raster masks (nonzero pixel = inside the region),
    /// ordered per [`LABEL_NAMES`].
    pub fn from_images(imgs: &[image::GrayImage; 4]) -> Result<Self> {
        let (w, h) = imgs[0].dimensions();
        let mut out = Self::new(w, h);
        for (label, img) in imgs.iter().enumerate() {
            if img.dimensions() != (w, h) {
                return Err(Error::Data(format!(
                    "mask {} is {:?}, others are {:?}",
                    LABEL_NAMES[label],
                    img.dimensions(),
                    (w, h)
                )));
            }
            for (i, p) in img.pixels().enumerate() {
                out.masks[label][i] = p.0[0] != 0;
            }
        }
        Ok(out)
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Mark a rectangle as belonging to `label` (clipped to the slide).
    pub fn set_rect(&mut self, label: usize, x: u32, y: u32, w: u32, h: u32) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.masks[label][(yy * self.width + xx) as usize] = true;
            }
        }
    }

    pub fn contains(&self, label: usize, x: u32, y: u32) -> bool {
        self.masks[label][(y * self.width + x) as usize]
    }

    /// Fraction of the `tile × tile` square at `(x, y)` covered by `label`.
    pub fn coverage(&self, label: usize, x: u32, y: u32, tile: u32) -> f64 {
        let mut inside = 0usize;
        for yy in y..y + tile {
            for xx in x..x + tile {
                if self.contains(label, xx, yy) {
                    inside += 1;
                }
            }
        }
        inside as f64 / (tile as f64 * tile as f64)
    }

    /// Export as grayscale images (255 inside, 0 outside).
    pub fn to_images(&self) -> [image::GrayImage; 4] {
        std::array::from_fn(|label| {
            image::GrayImage::from_fn(self.width, self.height, |x, y| {
                image::Luma([if self.contains(label, x, y) { 255 } else { 0 }])
            })
        })
    }
}

/// Number of tiles along each axis for a given slide, tile and stride.
pub fn tile_grid(width: u32, height: u32, tile: u32, stride: u32) -> (u32, u32) {
    let fit = |extent: u32| {
        if extent < tile {
            0
        } else {
            (extent - tile) / stride + 1
        }
    };
    (fit(width), fit(height))
}

/// Cut a slide into `tile × tile` squares on a `stride` grid, dropping
/// right/bottom remainders smaller than a tile. Returns `(x, y, tile image)`
/// in row-major scan order.
pub fn patchify(slide: &RgbImage, tile: u32, stride: u32) -> Result<Vec<(u32, u32, RgbImage)>> {
    let (w, h) = slide.dimensions();
    if tile == 0 || stride == 0 {
        return Err(Error::Data("tile and stride must be positive".into()));
    }
    if w < tile || h < tile {
        return Err(Error::Data(format!(
            "slide {w}×{h} is smaller than the {tile}×{tile} tile"
        )));
    }
    let (nx, ny) = tile_grid(w, h, tile, stride);
    let mut out = Vec::with_capacity((nx * ny) as usize);
    for iy in 0..ny {
        for ix in 0..nx {
            let (x, y) = (ix * stride, iy * stride);
            let view = image::imageops::crop_imm(slide, x, y, tile, tile).to_image();
            out.push((x, y, view));
        }
    }
    Ok(out)
}

/// Label a tile by mask overlap: bit ℓ is set when at least `tau` of the
/// tile's pixels fall inside mask ℓ. Returns `None` when no label reaches the
/// threshold; such tiles are dropped by the pipeline.
pub fn assign_labels(
    masks: &RegionMasks,
    x: u32,
    y: u32,
    tile: u32,
    tau: f64,
) -> Option<LabelVector> {
    let bits = std::array::from_fn(|label| masks.coverage(label, x, y, tile) >= tau);
    LabelVector::new(bits).ok()
}

/// Subsample over-represented label combinations until no combination holds
/// more than `max_ratio` times the rarest one. Which records survive is a
/// seeded, order-independent choice; minority combinations are never touched
/// and survivors keep their original order.
pub fn balance<T, F>(records: Vec<T>, labels_of: F, max_ratio: f64, seed: u64) -> Result<Vec<T>>
where
    F: Fn(&T) -> LabelVector,
{
    if records.is_empty() {
        return Err(Error::Data("cannot balance an empty record set".into()));
    }
    if !(max_ratio >= 1.0) {
        return Err(Error::Data(format!("balance ratio {max_ratio} must be at least 1")));
    }
    let mut groups: HashMap<LabelVector, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(labels_of(r)).or_default().push(i);
    }
    let min = groups.values().map(Vec::len).min().unwrap();
    let cap = ((max_ratio * min as f64).floor() as usize).max(min);

    let base = CounterRng::new(seed).derive_named("balance");
    let mut drop = vec![false; records.len()];
    for (combo, members) in &groups {
        if members.len() <= cap {
            continue;
        }
        let mut order: Vec<usize> = (0..members.len()).collect();
        base.derive_named(&combo.combo_key()).shuffle(&mut order);
        for &pos in &order[cap..] {
            drop[members[pos]] = true;
        }
    }
    Ok(records
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| (!drop[i]).then_some(r))
        .collect())
}

/// Which of the three splits a record lands in for one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One round's split assignment, as stored in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub round: usize,
    pub split: Split,
}

/// Assign every record to train/val/test once per round, each round an
/// independent seeded shuffle. Val and test sizes are floored; the remainder
/// goes to train. Returns `splits[record][round]`.
pub fn make_splits(
    n: usize,
    rounds: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<Vec<SplitAssignment>>> {
    let (ft, fv, fe) = fractions;
    if (ft + fv + fe - 1.0).abs() > 1e-9 || ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::Data(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    if n < 10 {
        return Err(Error::Data(format!("need at least 10 records to split, got {n}")));
    }
    let val_n = (n as f64 * fv).floor() as usize;
    let test_n = (n as f64 * fe).floor() as usize;
    let train_n = n - val_n - test_n;

    let base = CounterRng::new(seed).derive_named("splits");
    let mut out = vec![Vec::with_capacity(rounds); n];
    for round in 0..rounds {
        let mut order: Vec<usize> = (0..n).collect();
        base.derive(round as u64).shuffle(&mut order);
        for (pos, &rec) in order.iter().enumerate() {
            let split = if pos < train_n {
                Split::Train
            } else if pos < train_n + val_n {
                Split::Val
            } else {
                Split::Test
            };
            out[rec].push(SplitAssignment { round, split });
        }
    }
    Ok(out)
}

/// One manifest line: a tile on disk, its origin in the source slide, its
/// labels by name, and its split for every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub path: String,
    pub x: u32,
    pub y: u32,
    pub labels: Vec<String>,
    pub splits: Vec<SplitAssignment>,
}

impl TileRecord {
    pub fn label_vector(&self) -> Result<LabelVector> {
        LabelVector::from_names(&self.labels)
    }

    pub fn split_for(&self, round: usize) -> Option<Split> {
        self.splits.iter().find(|s| s.round == round).map(|s| s.split)
    }
}

/// Write records as line-delimited JSON.
pub fn write_manifest(path: impl AsRef<Path>, records: &[TileRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<TileRecord>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TileRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))?;
        rec.label_vector()?;
        out.push(rec);
    }
    Ok(out)
}

/// Mirror axis for flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

/// Mirror an image; labels are unaffected by either flip.
pub fn flip(img: &RgbImage, axis: FlipAxis) -> RgbImage {
    match axis {
        FlipAxis::Horizontal => image::imageops::flip_horizontal(img),
        FlipAxis::Vertical => image::imageops::flip_vertical(img),
    }
}

/// RGB (8-bit) → HSV with hue as a fraction of the circle in `[0, 1)` and
/// saturation/value in `[0, 1]`.
pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (rf, gf, bf) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = rf.max(gf).max(bf);
    let min = rf.min(gf).min(bf);
    let delta = max - min;
    let v = max;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    let h = if delta == 0.0 {
        0.0
    } else if max == rf {
        ((gf - bf) / delta).rem_euclid(6.0) / 6.0
    } else if max == gf {
        ((bf - rf) / delta + 2.0) / 6.0
    } else {
        ((rf - gf) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

/// Inverse of [`rgb_to_hsv`], rounding to the nearest 8-bit channel value.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (rf, gf, bf) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let to_u8 = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
    (to_u8(rf), to_u8(gf), to_u8(bf))
}

/// Apply a fixed HSV perturbation: rotate hue by `hue_delta` (fraction of the
/// circle, wrapping), scale saturation and value (clamped to `[0, 1]`).
pub fn hsv_jitter(img: &RgbImage, hue_delta: f64, sat_scale: f64, val_scale: f64) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let [r, g, b] = img.get_pixel(x, y).0;
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let h = (h + hue_delta).rem_euclid(1.0);
        let s = (s * sat_scale).clamp(0.0, 1.0);
        let v = (v * val_scale).clamp(0.0, 1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        image::Rgb([r, g, b])
    })
}

/// Sampling bounds for the color jitter. Defaults are deliberately mild so
/// stain colors stay plausible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsvJitter {
    /// Maximum hue rotation, as a fraction of the hue circle (±).
    pub hue_delta: f64,
    pub sat_range: (f64, f64),
    pub val_range: (f64, f64),
}

impl Default for HsvJitter {
    fn default() -> Self {
        Self { hue_delta: 0.015, sat_range: (0.6, 1.4), val_range: (0.6, 1.4) }
    }
}

impl HsvJitter {
    /// Draw `(hue_delta, sat_scale, val_scale)` from the bounds.
    pub fn sample(&self, rng: &mut CounterRng) -> (f64, f64, f64) {
        (
            rng.uniform(-self.hue_delta, self.hue_delta),
            rng.uniform(self.sat_range.0, self.sat_range.1),
            rng.uniform(self.val_range.0, self.val_range.1),
        )
    }
}

/// Randomly perturb hue/saturation/value within `bounds`, deterministically
/// for a given RNG state.
pub fn random_hsv(img: &RgbImage, bounds: &HsvJitter, rng: &mut CounterRng) -> RgbImage {
    let (h, s, v) = bounds.sample(rng);
    hsv_jitter(img, h, s, v)
}

/// Convert an 8-bit RGB image to a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn image_to_tensor<E: Element>(img: &RgbImage) -> Tensor<E> {
    let (w, h) = img.dimensions();
    let mut data = vec![E::zero(); (3 * w * h) as usize];
    let plane = (w * h) as usize;
    for (x, y, p) in img.enumerate_pixels() {
        let base = (y * w + x) as usize;
        for c in 0..3 {
            data[c * plane + base] = E::from_f64(p.0[c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![3, h as usize, w as usize], data).expect("image tensor shape")
}

/// Stack same-sized images into an `[N, 3, H, W]` batch scaled to `[0, 1]`.
pub fn batch_to_tensor<E: Element>(imgs: &[&RgbImage]) -> Result<Tensor<E>> {
    let Some(first) = imgs.first() else {
        return Err(Error::Data("empty image batch".into()));
    };
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(imgs.len() * (3 * w * h) as usize);
    for img in imgs {
        if img.dimensions() != (w, h) {
            return Err(Error::Data(format!(
                "batch mixes {:?} and {:?} images",
                (w, h),
                img.dimensions()
            )));
        }
        data.extend(image_to_tensor::<E>(img).as_slice().iter().copied());
    }
    Tensor::new(vec![imgs.len(), 3, h as usize, w as usize], data)
}

/// Base colors used by the synthetic fixtures, one per label: rough stand-ins
/// for sparse stroma, necrotic debris, regular parenchyma and dense tumor.
const SYNTH_COLORS: [[f64; 3]; 4] = [
    [232.0, 178.0, 194.0],
    [242.0, 232.0, 200.0],
    [156.0, 108.0, 182.0],
    [92.0, 58.0, 124.0],
];

/// Deterministic solid-texture tile for a label combination: single-label
/// tiles get one noisy base color, dual-label tiles are split half/half.
pub fn synthetic_tile(labels: LabelVector, size: u32, rng: &mut CounterRng) -> RgbImage {
    let set: Vec<usize> = (0..4).filter(|&l| labels.bit(l)).collect();
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let label = if set.len() == 1 {
                set[0]
            } else {
                // Half/half vertical split mimicking a region boundary.
                set[(x >= size / 2) as usize % set.len()]
            };
            let noise = rng.uniform(-10.0, 10.0);
            let px = std::array::from_fn(|c| (SYNTH_COLORS[label][c] + noise).clamp(0.0, 255.0) as u8);
            img.put_pixel(x, y, image::Rgb(px));
        }
    }
    img
}

/// The six label combinations observed in practice: the four single labels
/// plus interstitial+non-tumor and interstitial+tumor overlaps.
pub fn standard_combinations() -> Vec<LabelVector> {
    let mk = |bits| LabelVector::new(bits).unwrap();
    vec![
        mk([true, false, false, false]),
        mk([false, true, false, false]),
        mk([false, false, true, false]),
        mk([false, false, false, true]),
        mk([true, false, true, false]),
        mk([true, false, false, true]),
    ]
}

/// `n` deterministic labeled tiles cycling through the standard combinations.
pub fn synthetic_dataset(n: usize, size: u32, seed: u64) -> Vec<(RgbImage, LabelVector)> {
    let combos = standard_combinations();
    let base = CounterRng::new(seed).derive_named("synthetic");
    (0..n)
        .map(|i| {
            let labels = combos[i % combos.len()];
            let mut rng = base.derive(i as u64);
            (synthetic_tile(labels, size, &mut rng), labels)
        })
        .collect()
}

/// A synthetic slide with region masks: vertical interstitial and necrosis
/// bands, non-tumor/tumor stacked in between so both overlap the interstitial
/// band (producing the two dual-label zones), and an unlabeled gap.
pub fn synthetic_slide(width: u32, height: u32, seed: u64) -> (RgbImage, RegionMasks) {
    let mut masks = RegionMasks::new(width, height);
    let fx = |f: f64| (width as f64 * f) as u32;
    masks.set_rect(INTERSTITIAL, 0, 0, fx(0.55), height);
    masks.set_rect(NON_TUMOR, fx(0.45), 0, fx(0.75) - fx(0.45), height / 2);
    masks.set_rect(TUMOR, fx(0.45), height / 2, fx(0.75) - fx(0.45), height - height / 2);
    masks.set_rect(NECROSIS, fx(0.8), 0, width - fx(0.8), height);

    let mut rng = CounterRng::new(seed).derive_named("slide");
    let mut slide = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let active: Vec<usize> = (0..4).filter(|&l| masks.contains(l, x, y)).collect();
            let noise = rng.uniform(-8.0, 8.0);
            let px = std::array::from_fn(|c| {
                let base = if active.is_empty() {
                    245.0
                } else {
                    active.iter().map(|&l| SYNTH_COLORS[l][c]).sum::<f64>() / active.len() as f64
                };
                (base + noise).clamp(0.0, 255.0) as u8
            });
            slide.put_pixel(x, y, image::Rgb(px));
        }
    }
    (slide, masks)
}
