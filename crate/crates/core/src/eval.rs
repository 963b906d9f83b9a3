//! Frozen-feature evaluation and attention / mask export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{normalize_into, ImageDataset};
use crate::error::{Error, Result};
use crate::masking::{attmask_high, build_mask, random_mask, MaskPolicy, MaskStrategy, MaskVector};
use crate::rng::{RngState, StreamRng};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{cls_attention, AttentionRecord, Bound, Capture, EncoderConfig, ParamSet, Vit};

pub const KNN_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_K: usize = 20;
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    Cls,
    Gap,
}

/// L2-normalized features with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub features: Tensor<f32>,
    pub labels: Vec<u16>,
    pub source: FeatureSource,
}

impl FeatureBank {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.features.row(i)
    }

    fn subset(&self, idx: &[usize]) -> FeatureBank {
        let d = self.features.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        idx.iter()
            .for_each(|&i| data.extend_from_slice(self.row(i)));
        FeatureBank {
            features: Tensor::raw(vec![idx.len(), d], data),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            source: self.source,
        }
    }
}

/// Pooled features and, optionally, `[CLS]` attention for raw byte images.
pub struct Forward {
    pub features: Vec<Vec<f32>>,
    pub attention: Vec<Vec<f32>>,
}

fn check_resolution(cfg: &EncoderConfig, ds: &ImageDataset) -> Result<()> {
    if ds.height != cfg.image_side || ds.width != cfg.image_side || ds.channels != cfg.channels {
        return Err(Error::config(
            "model.image_side",
            format!(
                "dataset images are {}x{}x{}, model expects {}x{}x{}",
                ds.height, ds.width, ds.channels, cfg.image_side, cfg.image_side, cfg.channels
            ),
        ));
    }
    Ok(())
}

fn l2_normalized(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| (x / n) as f32).collect()
}

/// Unmasked forward over `images` (back-to-back bytes at the model
/// resolution). When `attention_layer` is set, also returns the head-averaged
/// `[CLS]` attention of that layer for every image.
pub fn forward_images<T: Scalar>(
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    images: &[u8],
    source: FeatureSource,
    attention_layer: Option<usize>,
) -> Result<Forward> {
    let side = cfg.image_side;
    let per = side * side * cfg.channels;
    let vit = Vit::new(cfg);
    let mut out = Forward {
        features: Vec::new(),
        attention: Vec::new(),
    };
    for chunk in images.chunks(CHUNK * per) {
        let mut px: Vec<T> = Vec::with_capacity(chunk.len());
        normalize_into(chunk, cfg.channels, &mut px);
        let mut tape = Tape::new();
        let mut bound = Bound::new(params);
        let capture = attention_layer.map_or(Capture::None, Capture::Layer);
        let (enc, record) =
            vit.embed_and_encode(&mut tape, &mut bound, &px, side, None, capture)?;
        let x = vit.final_norm(&mut tape, &mut bound, enc.tokens)?;
        let x = tape.value(x);
        let t = enc.len_per_seq();
        for s in 0..enc.seqs {
            let pooled: Vec<f64> = match source {
                FeatureSource::Cls => x.row(s * t).iter().map(|v| v.as_f64()).collect(),
                FeatureSource::Gap => {
                    let mut m = vec![0.0; x.cols()];
                    for r in 1..t {
                        m.iter_mut()
                            .zip(x.row(s * t + r))
                            .for_each(|(a, b)| *a += b.as_f64());
                    }
                    m.iter_mut().for_each(|a| *a /= enc.patches as f64);
                    m
                }
            };
            out.features.push(l2_normalized(pooled));
            if let Some(l) = attention_layer {
                let a = cls_attention(&record, s, l)?;
                out.attention
                    .push(a.values.iter().map(|v| v.as_f64() as f32).collect());
            }
        }
    }
    Ok(out)
}

fn bank_from(
    features: Vec<Vec<f32>>,
    labels: Vec<u16>,
    source: FeatureSource,
) -> Result<FeatureBank> {
    let d = features.first().map_or(1, Vec::len);
    let rows = features.len();
    let data: Vec<f32> = features.into_iter().flatten().collect();
    Ok(FeatureBank {
        features: Tensor::raw(vec![rows, d], data),
        labels,
        source,
    })
}

/// Features of every image of `ds`, without masking or augmentation.
pub fn extract_features<T: Scalar>(
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    ds: &ImageDataset,
    source: FeatureSource,
) -> Result<FeatureBank> {
    check_resolution(cfg, ds)?;
    let f = forward_images(cfg, params, &ds.pixels, source, None)?;
    bank_from(f.features, ds.labels.clone(), source)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub predictions: Vec<u16>,
    pub accuracy: f64,
}

/// Weighted k-NN: cosine similarity, top `k` (lower bank index wins ties),
/// votes `exp(sim / 0.07)`, lowest class wins a tied vote.
pub fn knn_classify(bank: &FeatureBank, queries: &FeatureBank, k: usize) -> Result<KnnResult> {
    if bank.is_empty() {
        return Err(Error::Contract(
            "k-NN needs a non-empty feature bank".into(),
        ));
    }
    if k == 0 || k > bank.len() {
        return Err(Error::Contract(format!(
            "k = {k} with {} bank entries",
            bank.len()
        )));
    }
    let classes = bank
        .labels
        .iter()
        .chain(&queries.labels)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(1);
    let mut predictions = Vec::with_capacity(queries.len());
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(bank.len());
    for q in 0..queries.len() {
        let qv = queries.row(q);
        sims.clear();
        sims.extend((0..bank.len()).map(|i| {
            let s: f64 = bank
                .row(i)
                .iter()
                .zip(qv)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            (s, i)
        }));
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0.0f64; classes];
        for &(s, i) in &sims[..k] {
            votes[bank.labels[i] as usize] += (s / KNN_TEMPERATURE).exp();
        }
        let best = (0..classes).fold(0, |b, c| if votes[c] > votes[b] { c } else { b });
        predictions.push(best as u16);
    }
    let correct = predictions
        .iter()
        .zip(&queries.labels)
        .filter(|(p, l)| p == l)
        .count();
    let accuracy = if queries.is_empty() {
        0.0
    } else {
        correct as f64 / queries.len() as f64
    };
    Ok(KnnResult {
        predictions,
        accuracy,
    })
}

/// k-NN against a bank reduced to `nu` random examples per class.
pub fn few_example_knn(
    bank: &FeatureBank,
    queries: &FeatureBank,
    k: usize,
    nu: usize,
    rng: &mut StreamRng,
) -> Result<f64> {
    let classes = bank
        .labels
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0);
    let mut keep = Vec::with_capacity(nu * classes);
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..bank.len())
            .filter(|&i| bank.labels[i] as usize == c)
            .collect();
        if idx.len() < nu {
            return Err(Error::Contract(format!(
                "class {c} has {} bank examples, {nu} requested",
                idx.len()
            )));
        }
        idx.shuffle(rng);
        keep.extend_from_slice(&idx[..nu]);
    }
    keep.sort_unstable();
    let small = bank.subset(&keep);
    Ok(knn_classify(&small, queries, k.min(nu * classes))?.accuracy)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskingMode {
    Attention,
    Random,
}

/// Sets every pixel of the masked patches to zero (in byte space).
pub fn zero_patches(img: &mut [u8], side: usize, channels: usize, patch: usize, mask: &MaskVector) {
    let g = side / patch;
    for i in mask.indices() {
        let (gy, gx) = (i / g, i % g);
        for y in gy * patch..(gy + 1) * patch {
            let start = (y * side + gx * patch) * channels;
            img[start..start + patch * channels].fill(0);
        }
    }
}

/// k-NN accuracy of `queries` against `bank` after zeroing the
/// `floor(r * n)` patches of each query chosen by `mode`: the most attended
/// ones under `reference` (last layer `[CLS]` attention), or random ones.
#[allow(clippy::too_many_arguments)]
pub fn masked_inference_eval<T: Scalar>(
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    reference: &ParamSet<T>,
    bank: &FeatureBank,
    queries: &ImageDataset,
    ratios: &[f64],
    mode: MaskingMode,
    k: usize,
    rng: &RngState,
) -> Result<Vec<(f64, f64)>> {
    check_resolution(cfg, queries)?;
    let n = cfg.num_patches();
    let attention = match mode {
        MaskingMode::Attention => {
            forward_images(
                cfg,
                reference,
                &queries.pixels,
                bank.source,
                Some(cfg.depth),
            )?
            .attention
        }
        MaskingMode::Random => Vec::new(),
    };
    let mut out = Vec::with_capacity(ratios.len());
    for (ri, &r) in ratios.iter().enumerate() {
        let mut pixels = queries.pixels.clone();
        for i in 0..queries.len() {
            let mask = match mode {
                MaskingMode::Attention => attmask_high(&attention[i], r),
                MaskingMode::Random => {
                    let mut s = rng.stream("masked-inference", (ri * queries.len() + i) as u64);
                    random_mask(n, r, &mut s)
                }
            };
            let len = queries.image_len();
            zero_patches(
                &mut pixels[i * len..(i + 1) * len],
                cfg.image_side,
                cfg.channels,
                cfg.patch_size,
                &mask,
            );
        }
        let f = forward_images(cfg, params, &pixels, bank.source, None)?;
        let q = bank_from(f.features, queries.labels.clone(), bank.source)?;
        out.push((r, knn_classify(bank, &q, k)?.accuracy));
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Min-max scaled 8-bit values; a constant map is all zeros.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

pub fn pgm_bytes(gray: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut b = format!("P5\n{width} {height}\n255\n").into_bytes();
    b.extend_from_slice(gray);
    b
}

pub fn ppm_bytes(rgb: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut b = format!("P6\n{width} {height}\n255\n").into_bytes();
    b.extend_from_slice(rgb);
    b
}

fn csv_grid(values: &[f64], g: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(g) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

/// Writes the `[CLS]` attention over patches of sequence `seq` at `layer`,
/// per head and head-averaged, each as `<stem>_head<h>.{csv,pgm}` and
/// `<stem>_mean.{csv,pgm}` in `dir`. Returns the written paths.
pub fn export_attention_map<T: Scalar>(
    record: &AttentionRecord<T>,
    seq: usize,
    layer: usize,
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let n = record.tokens - 1;
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::Unsupported(format!(
            "{n} patch tokens do not form a square grid"
        )));
    }
    let mut maps: Vec<(String, Vec<f64>)> = Vec::new();
    for h in 0..record.heads {
        let m = record.matrix(layer, seq, h)?;
        maps.push((
            format!("head{h}"),
            m[1..=n].iter().map(|v| v.as_f64()).collect(),
        ));
    }
    let mean = cls_attention(record, seq, layer)?;
    maps.push((
        "mean".into(),
        mean.values.iter().map(|v| v.as_f64()).collect(),
    ));
    let mut paths = Vec::new();
    for (name, values) in maps {
        let csv = dir.join(format!("{stem}_{name}.csv"));
        write_file(&csv, csv_grid(&values, g).as_bytes())?;
        let pgm = dir.join(format!("{stem}_{name}.pgm"));
        write_file(&pgm, &pgm_bytes(&to_gray(&values), g, g))?;
        paths.extend([csv, pgm]);
    }
    Ok(paths)
}

pub const OVERLAY_COLOR: [u8; 3] = [255, 0, 200];

/// RGB copy of `img` with masked patches painted [`OVERLAY_COLOR`].
pub fn mask_overlay(
    img: &[u8],
    side: usize,
    channels: usize,
    patch: usize,
    mask: &MaskVector,
) -> Result<Vec<u8>> {
    let g = side / patch;
    if mask.len() != g * g || img.len() != side * side * channels {
        return Err(Error::Dimension(format!(
            "mask of length {} for a {g}x{g} grid and image of {} values",
            mask.len(),
            img.len()
        )));
    }
    let mut rgb: Vec<u8> = img
        .chunks(channels)
        .flat_map(|p| {
            if channels == 3 {
                [p[0], p[1], p[2]]
            } else {
                [p[0]; 3]
            }
        })
        .collect();
    for i in mask.indices() {
        let (gy, gx) = (i / g, i % g);
        for y in gy * patch..(gy + 1) * patch {
            for x in gx * patch..(gx + 1) * patch {
                rgb[(y * side + x) * 3..(y * side + x + 1) * 3].copy_from_slice(&OVERLAY_COLOR);
            }
        }
    }
    Ok(rgb)
}

pub fn export_mask_overlay(
    img: &[u8],
    side: usize,
    channels: usize,
    patch: usize,
    mask: &MaskVector,
    path: &Path,
) -> Result<()> {
    let rgb = mask_overlay(img, side, channels, patch, mask)?;
    write_file(path, &ppm_bytes(&rgb, side, side))
}

/// Files written by [`export_image_attention`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionExport {
    /// CSV and PGM pairs: one per head, then the head mean.
    pub maps: Vec<PathBuf>,
    /// One PPM overlay per masking strategy, in [`MaskStrategy::ALL`] order.
    pub overlays: Vec<PathBuf>,
}

/// Captures the attention of `layer` (1-based) for one image, writes the
/// per-head and mean maps, and paints the mask each strategy would draw at
/// `ratio` from that attention.
#[allow(clippy::too_many_arguments)]
pub fn export_image_attention<T: Scalar>(
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    img: &[u8],
    layer: usize,
    policy: &MaskPolicy,
    ratio: f64,
    rng: &RngState,
    dir: &Path,
    stem: &str,
) -> Result<AttentionExport> {
    if layer == 0 || layer > cfg.depth {
        return Err(Error::Range {
            what: "layer",
            value: layer as i64,
            lo: 1,
            hi: cfg.depth as i64,
        });
    }
    let side = cfg.image_side;
    if img.len() != side * side * cfg.channels {
        return Err(Error::Dimension(format!(
            "image has {} values, model expects {side}x{side}x{}",
            img.len(),
            cfg.channels
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut px: Vec<T> = Vec::with_capacity(img.len());
    normalize_into(img, cfg.channels, &mut px);
    let vit = Vit::new(cfg);
    let mut tape = Tape::new();
    let mut bound = Bound::new(params);
    let (_, record) = vit.embed_and_encode(
        &mut tape,
        &mut bound,
        &px,
        side,
        None,
        Capture::Layer(layer),
    )?;
    let maps = export_attention_map(&record, 0, layer, dir, stem)?;
    let attn = cls_attention(&record, 0, layer)?.values;
    let mut overlays = Vec::new();
    for (i, strategy) in MaskStrategy::ALL.into_iter().enumerate() {
        let p = MaskPolicy {
            strategy,
            ..policy.clone()
        };
        let mut r = rng.stream("export-mask", i as u64);
        let mask = build_mask(&p, attn.len(), ratio, Some(&attn), &mut r)?;
        let path = dir.join(format!("{stem}_{}.ppm", strategy.name()));
        export_mask_overlay(img, side, cfg.channels, cfg.patch_size, &mask, &path)?;
        overlays.push(path);
    }
    Ok(AttentionExport { maps, overlays })
}
