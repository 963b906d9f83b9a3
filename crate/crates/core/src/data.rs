//! Datasets, the AMIM container format, synthetic shapes and multi-crop
//! views.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{ViewBatch, GLOBAL_VIEWS};
use crate::error::{Error, Result};
use crate::rng::{RngState, StreamRng};
use crate::tensor::Scalar;

pub const AMIM_MAGIC: &[u8; 4] = b"AMIM";
pub const AMIM_VERSION: u16 = 1;
/// magic, version, count, height, width, channels, classes.
pub const AMIM_HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2 + 1 + 2;

/// Images of identical shape, stored back to back as channel-last bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageDataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
}

impl ImageDataset {
    pub fn empty(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        ImageDataset {
            height,
            width,
            channels,
            classes,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, pixels: &[u8], label: u16) {
        debug_assert_eq!(pixels.len(), self.image_len());
        self.pixels.extend_from_slice(pixels);
        self.labels.push(label);
    }

    pub fn subset(&self, idx: &[usize]) -> ImageDataset {
        let mut out = ImageDataset::empty(self.height, self.width, self.channels, self.classes);
        for &i in idx {
            out.push(self.image(i), self.labels[i]);
        }
        out
    }

    /// Stratified split: about `fraction` of every class goes to the second
    /// set. Returns `(train, holdout)`.
    pub fn split(&self, fraction: f64, rng: &mut StreamRng) -> (ImageDataset, ImageDataset) {
        let mut train = Vec::new();
        let mut hold = Vec::new();
        for c in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] as usize == c)
                .collect();
            idx.shuffle(rng);
            let h = (fraction * idx.len() as f64).round() as usize;
            hold.extend_from_slice(&idx[..h]);
            train.extend_from_slice(&idx[h..]);
        }
        train.sort_unstable();
        hold.sort_unstable();
        (self.subset(&train), self.subset(&hold))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(AMIM_HEADER_LEN + self.pixels.len() + 2 * self.len());
        b.extend_from_slice(AMIM_MAGIC);
        b.extend_from_slice(&AMIM_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.len() as u32).to_le_bytes());
        b.extend_from_slice(&(self.height as u16).to_le_bytes());
        b.extend_from_slice(&(self.width as u16).to_le_bytes());
        b.push(self.channels as u8);
        b.extend_from_slice(&(self.classes as u16).to_le_bytes());
        b.extend_from_slice(&self.pixels);
        for l in &self.labels {
            b.extend_from_slice(&l.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if b.len() < AMIM_HEADER_LEN {
            return Err(fail(
                b.len(),
                format!("header needs {AMIM_HEADER_LEN} bytes, file has {}", b.len()),
            ));
        }
        if &b[..4] != AMIM_MAGIC {
            return Err(fail(0, "bad magic, expected `AMIM`".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]) as usize;
        if u16_at(4) != AMIM_VERSION as usize {
            return Err(fail(4, format!("unsupported version {}", u16_at(4))));
        }
        let count = u32::from_le_bytes([b[6], b[7], b[8], b[9]]) as usize;
        let mut ds = ImageDataset::empty(u16_at(10), u16_at(12), b[14] as usize, u16_at(15));
        let pix_end = AMIM_HEADER_LEN + count * ds.image_len();
        let end = pix_end + 2 * count;
        if b.len() < pix_end {
            let whole = (b.len() - AMIM_HEADER_LEN) / ds.image_len().max(1);
            return Err(fail(
                AMIM_HEADER_LEN + whole * ds.image_len(),
                format!(
                    "pixel payload truncated: header declares {count} images, data holds {whole}"
                ),
            ));
        }
        if b.len() != end {
            return Err(fail(
                b.len().min(end),
                format!("label block: expected file size {end}, got {}", b.len()),
            ));
        }
        ds.pixels = b[AMIM_HEADER_LEN..pix_end].to_vec();
        ds.labels = b[pix_end..end]
            .chunks(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        if let Some(i) = ds.labels.iter().position(|&l| l as usize >= ds.classes) {
            return Err(fail(
                pix_end + 2 * i,
                format!(
                    "label {} of image {i} outside [0, {})",
                    ds.labels[i], ds.classes
                ),
            ));
        }
        Ok(ds)
    }
}

pub fn load_dataset(path: &Path) -> Result<ImageDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ImageDataset::from_bytes(&bytes)
}

pub fn save_dataset(ds: &ImageDataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ds.to_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Bar,
    Corner,
}

const FOREGROUND: [f64; 3] = [210.0, 190.0, 170.0];
const BACKGROUND: f64 = 60.0;

pub const SHAPES: [Shape; 8] = [
    Shape::Square,
    Shape::Disc,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
    Shape::Bar,
    Shape::Corner,
];

impl Shape {
    /// Whether the point `(u, v)`, relative to the shape center in units of
    /// its half-size, is inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            Shape::Square => au <= 0.8 && av <= 0.8,
            Shape::Disc => u * u + v * v <= 1.0,
            Shape::Triangle => (-0.9..=0.9).contains(&v) && au <= (v + 0.9) / 1.8,
            Shape::Cross => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
            Shape::Ring => (0.45..=1.0).contains(&(u * u + v * v).sqrt()),
            Shape::Diamond => au + av <= 1.0,
            Shape::Bar => au <= 1.0 && av <= 0.35,
            Shape::Corner => {
                (-0.9..=0.9).contains(&u) && (-0.9..=0.9).contains(&v) && (u <= -0.35 || v >= 0.35)
            }
        }
    }
}

/// One shape per class on a dim, noisy background. Labels cycle through the
/// classes, so any prefix is roughly balanced.
///
/// Foreground and background levels are the same for every image. A per-image
/// colour would survive any crop or flip, and two views could then be matched
/// on colour alone without looking at the shape.
pub fn make_synthetic(
    classes: usize,
    per_class: usize,
    side: usize,
    channels: usize,
    rng: &mut StreamRng,
) -> Result<ImageDataset> {
    if classes < 2 || classes > SHAPES.len() {
        return Err(Error::Parameter(format!(
            "classes must be in [2, {}], got {classes}",
            SHAPES.len()
        )));
    }
    if side < 8 || !(channels == 1 || channels == 3) {
        return Err(Error::Parameter(format!(
            "need side >= 8 and 1 or 3 channels, got side {side}, {channels} channels"
        )));
    }
    let mut ds = ImageDataset::empty(side, side, channels, classes);
    let mut img = vec![0u8; side * side * channels];
    for i in 0..classes * per_class {
        let label = i % classes;
        let s = side as f64;
        let half = rng.random_range(0.2 * s..0.34 * s);
        let cx = rng.random_range(half..s - half);
        let cy = rng.random_range(half..s - half);
        for y in 0..side {
            for x in 0..side {
                let u = (x as f64 + 0.5 - cx) / half;
                let v = (y as f64 + 0.5 - cy) / half;
                let inside = SHAPES[label].contains(u, v);
                for c in 0..channels {
                    let noise: f64 = rng.random_range(-15.0..15.0);
                    let val = if inside {
                        FOREGROUND[c % 3]
                    } else {
                        BACKGROUND
                    } + noise;
                    img[(y * side + x) * channels + c] = val.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        ds.push(&img, label as u16);
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// Split between local `(0.05, s]` and global `(s, 1]` crop scales.
    pub scale_split: f64,
    pub local_crop_count: usize,
    pub global_side: usize,
    pub local_side: usize,
    pub flip_prob: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            scale_split: 0.25,
            local_crop_count: 2,
            global_side: 32,
            local_side: 16,
            flip_prob: 0.5,
        }
    }
}

pub const LOCAL_MIN_SCALE: f64 = 0.05;
const RATIO_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

impl AugConfig {
    pub fn validate(&self, patch: usize) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(format!("augment.{f}"), m));
        if !(self.scale_split > LOCAL_MIN_SCALE && self.scale_split <= 1.0) {
            return err(
                "scale_split",
                format!("must be in (0.05, 1], got {}", self.scale_split),
            );
        }
        if self.global_side == 0 || !self.global_side.is_multiple_of(patch) {
            return err(
                "global_side",
                format!(
                    "{} is not a multiple of patch size {patch}",
                    self.global_side
                ),
            );
        }
        if self.local_crop_count > 0
            && (self.local_side == 0 || !self.local_side.is_multiple_of(patch))
        {
            return err(
                "local_side",
                format!(
                    "{} is not a multiple of patch size {patch}",
                    self.local_side
                ),
            );
        }
        if self.local_crop_count > 0 && self.local_side >= self.global_side {
            return err(
                "local_side",
                "local crops must be smaller than global views".into(),
            );
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return err(
                "flip_prob",
                format!("must be in [0, 1], got {}", self.flip_prob),
            );
        }
        Ok(())
    }
}

/// Crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Random crop with area fraction in `scale` and log-uniform aspect ratio in
/// `[3/4, 4/3]`; falls back to the whole image after ten failed draws.
pub fn sample_crop(h: usize, w: usize, scale: (f64, f64), rng: &mut StreamRng) -> Crop {
    let area = (h * w) as f64;
    let (lr0, lr1) = (RATIO_RANGE.0.ln(), RATIO_RANGE.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return Crop {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    Crop {
        top: 0,
        left: 0,
        height: h,
        width: w,
    }
}

/// Bilinear resize of a crop to `side x side` with half-pixel centers;
/// samples never leave the crop rectangle.
pub fn resized_crop(img: &[u8], w: usize, c: usize, crop: Crop, side: usize) -> Vec<u8> {
    let axis = |o: usize, start: usize, len: usize| {
        let src = (o as f64 + 0.5) * len as f64 / side as f64 - 0.5;
        let src = src.clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (start + i0, start + i1, src - i0 as f64)
    };
    let mut out = vec![0u8; side * side * c];
    for oy in 0..side {
        let (y0, y1, fy) = axis(oy, crop.top, crop.height);
        for ox in 0..side {
            let (x0, x1, fx) = axis(ox, crop.left, crop.width);
            for ch in 0..c {
                let p = |y: usize, x: usize| img[(y * w + x) * c + ch] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                out[(oy * side + ox) * c + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

pub fn flip_horizontal(img: &mut [u8], side: usize, c: usize) {
    for row in img.chunks_mut(side * c) {
        for x in 0..side / 2 {
            for ch in 0..c {
                row.swap(x * c + ch, (side - 1 - x) * c + ch);
            }
        }
    }
}

/// Augmented byte views of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Views {
    pub globals: Vec<Vec<u8>>,
    pub locals: Vec<Vec<u8>>,
}

pub fn make_views(
    img: &[u8],
    h: usize,
    w: usize,
    c: usize,
    aug: &AugConfig,
    rng: &mut StreamRng,
) -> Views {
    let view = |side: usize, scale: (f64, f64), rng: &mut StreamRng| {
        let crop = sample_crop(h, w, scale, rng);
        let mut v = resized_crop(img, w, c, crop, side);
        if rng.random::<f64>() < aug.flip_prob {
            flip_horizontal(&mut v, side, c);
        }
        v
    };
    let globals = (0..GLOBAL_VIEWS)
        .map(|_| view(aug.global_side, (aug.scale_split, 1.0), rng))
        .collect();
    let locals = (0..aug.local_crop_count)
        .map(|_| view(aug.local_side, (LOCAL_MIN_SCALE, aug.scale_split), rng))
        .collect();
    Views { globals, locals }
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Per-channel `(mean, std)` applied after scaling bytes to `[0, 1]`.
pub fn norm_constants(channels: usize, ch: usize) -> (f64, f64) {
    if channels == 3 {
        (IMAGENET_MEAN[ch], IMAGENET_STD[ch])
    } else {
        (0.5, 0.25)
    }
}

pub fn normalize_into<T: Scalar>(img: &[u8], channels: usize, out: &mut Vec<T>) {
    out.extend(img.iter().enumerate().map(|(i, &p)| {
        let (m, s) = norm_constants(channels, i % channels);
        T::of((p as f64 / 255.0 - m) / s)
    }));
}

pub fn denormalize<T: Scalar>(x: &[T], channels: usize) -> Vec<u8> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let (m, s) = norm_constants(channels, i % channels);
            ((v.as_f64() * s + m) * 255.0).round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Views of the images `idx` as a normalized training batch. Image `i` of the
/// batch draws from stream `("views", first_sample + i)`.
pub fn make_batch<T: Scalar>(
    ds: &ImageDataset,
    idx: &[usize],
    aug: &AugConfig,
    rng: &RngState,
    first_sample: u64,
) -> ViewBatch<T> {
    let c = ds.channels;
    let mut globals = Vec::with_capacity(idx.len() * GLOBAL_VIEWS * aug.global_side.pow(2) * c);
    let mut locals =
        Vec::with_capacity(idx.len() * aug.local_crop_count * aug.local_side.pow(2) * c);
    for (i, &k) in idx.iter().enumerate() {
        let mut r = rng.stream("views", first_sample + i as u64);
        let v = make_views(ds.image(k), ds.height, ds.width, c, aug, &mut r);
        v.globals
            .iter()
            .for_each(|g| normalize_into(g, c, &mut globals));
        v.locals
            .iter()
            .for_each(|l| normalize_into(l, c, &mut locals));
    }
    ViewBatch {
        images: idx.len(),
        global_side: aug.global_side,
        local_side: aug.local_side,
        local_count: aug.local_crop_count,
        globals,
        locals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(i: u64) -> StreamRng {
        RngState::new(3).stream("data-test", i)
    }

    #[test]
    fn amim_roundtrip_and_size() {
        let ds = make_synthetic(4, 5, 16, 3, &mut rng(0)).unwrap();
        let b = ds.to_bytes();
        assert_eq!(b.len(), 17 + 20 * 16 * 16 * 3 + 2 * 20);
        assert_eq!(ImageDataset::from_bytes(&b).unwrap(), ds);
        assert_eq!(ImageDataset::from_bytes(&b).unwrap().to_bytes(), b);
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let ds = ImageDataset::empty(8, 8, 1, 2);
        let back = ImageDataset::from_bytes(&ds.to_bytes()).unwrap();
        assert!(back.is_empty() && back.pixels.is_empty());
    }

    #[test]
    fn truncation_reports_offset() {
        let ds = make_synthetic(2, 5, 8, 1, &mut rng(1)).unwrap();
        let mut b = ds.to_bytes();
        b.truncate(AMIM_HEADER_LEN + 9 * 64);
        match ImageDataset::from_bytes(&b) {
            Err(Error::Format { offset, .. }) => {
                assert_eq!(offset as usize, AMIM_HEADER_LEN + 9 * 64)
            }
            other => panic!("{other:?}"),
        }
        let mut bad = ds.to_bytes();
        bad[0] = b'X';
        assert!(matches!(
            ImageDataset::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_validated() {
        let a = make_synthetic(3, 4, 16, 3, &mut rng(2)).unwrap();
        let b = make_synthetic(3, 4, 16, 3, &mut rng(2)).unwrap();
        assert_eq!(a, b);
        assert!(make_synthetic(4, 0, 16, 3, &mut rng(2)).unwrap().is_empty());
        assert!(matches!(
            make_synthetic(9, 1, 16, 3, &mut rng(2)),
            Err(Error::Parameter(_))
        ));
        assert_eq!(a.labels, vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn synthetic_is_learnable_by_nearest_centroid() {
        let ds = make_synthetic(2, 100, 32, 3, &mut rng(3)).unwrap();
        let (train, test) = ds.split(0.5, &mut rng(4));
        let d = ds.image_len();
        let mut cent = vec![vec![0.0f64; d]; 2];
        for i in 0..train.len() {
            let c = &mut cent[train.labels[i] as usize];
            c.iter_mut()
                .zip(train.image(i))
                .for_each(|(a, &p)| *a += p as f64 / 50.0);
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let dist = |c: &Vec<f64>| {
                    c.iter()
                        .zip(test.image(i))
                        .map(|(a, &p)| (a - p as f64).powi(2))
                        .sum::<f64>()
                };
                let pred = if dist(&cent[0]) <= dist(&cent[1]) {
                    0
                } else {
                    1
                };
                pred == test.labels[i]
            })
            .count();
        assert!(
            correct as f64 / test.len() as f64 > 0.5,
            "{correct}/{}",
            test.len()
        );
    }

    #[test]
    fn split_is_stratified() {
        let ds = make_synthetic(4, 25, 8, 1, &mut rng(5)).unwrap();
        let (train, hold) = ds.split(0.2, &mut rng(6));
        assert_eq!((train.len(), hold.len()), (80, 20));
        for c in 0..4u16 {
            assert_eq!(hold.labels.iter().filter(|&&l| l == c).count(), 5);
        }
    }

    #[test]
    fn no_local_crops_gives_two_views() {
        let ds = make_synthetic(2, 1, 32, 3, &mut rng(7)).unwrap();
        let aug = AugConfig {
            local_crop_count: 0,
            ..Default::default()
        };
        let v = make_views(ds.image(0), 32, 32, 3, &aug, &mut rng(8));
        assert_eq!((v.globals.len(), v.locals.len()), (2, 0));
    }

    #[test]
    fn full_scale_without_flip_is_the_original() {
        let ds = make_synthetic(2, 3, 32, 3, &mut rng(9)).unwrap();
        let aug = AugConfig {
            scale_split: 1.0,
            flip_prob: 0.0,
            ..Default::default()
        };
        for i in 0..3 {
            for s in 0..20 {
                let v = make_views(ds.image(i), 32, 32, 3, &aug, &mut rng(s));
                assert!(v.globals.iter().all(|g| g.as_slice() == ds.image(i)));
            }
        }
    }

    #[test]
    fn crop_of_gradient_matches_bilinear_oracle() {
        let (w, h) = (40, 24);
        let img: Vec<u8> = (0..h).flat_map(|_| (0..w).map(|x| (x * 6) as u8)).collect();
        let crop = Crop {
            top: 3,
            left: 5,
            height: 17,
            width: 23,
        };
        let out = resized_crop(&img, w, 1, crop, 16);
        for oy in 0..16 {
            for ox in 0..16 {
                let sx = ((ox as f64 + 0.5) * 23.0 / 16.0 - 0.5).clamp(0.0, 22.0) + 5.0;
                let want = 6.0 * sx;
                assert!(
                    (out[oy * 16 + ox] as f64 - want).abs() <= 0.5 + 1e-9,
                    "{ox}"
                );
            }
        }
    }

    #[test]
    fn crops_stay_inside_and_respect_scale() {
        let mut r = rng(10);
        for _ in 0..500 {
            let c = sample_crop(32, 32, (0.05, 0.25), &mut r);
            assert!(c.top + c.height <= 32 && c.left + c.width <= 32);
            assert!(c.height > 0 && c.width > 0);
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img: Vec<u8> = (0..4 * 4 * 3).map(|i| i as u8).collect();
        let mut f = img.clone();
        flip_horizontal(&mut f, 4, 3);
        assert_eq!(&f[..3], &img[9..12]);
        flip_horizontal(&mut f, 4, 3);
        assert_eq!(f, img);
    }

    #[test]
    fn normalization_inverts() {
        for ch in [1, 3] {
            let img: Vec<u8> = (0..=255).collect::<Vec<u8>>().repeat(ch);
            let mut x: Vec<f32> = Vec::new();
            normalize_into(&img, ch, &mut x);
            assert_eq!(denormalize(&x, ch), img);
        }
    }

    #[test]
    fn batches_are_reproducible() {
        let ds = make_synthetic(2, 4, 32, 3, &mut rng(11)).unwrap();
        let aug = AugConfig::default();
        let st = RngState::new(1);
        let a: ViewBatch<f32> = make_batch(&ds, &[0, 3, 5], &aug, &st, 10);
        let b: ViewBatch<f32> = make_batch(&ds, &[0, 3, 5], &aug, &st, 10);
        assert_eq!(a, b);
        a.validate(3).unwrap();
        assert_eq!(a.locals.len(), 3 * 2 * 16 * 16 * 3);
    }
}
