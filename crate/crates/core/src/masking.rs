//! Token mask generation and masked substitution.
//!
//! Every strategy produces exactly `k = floor(r * n)` masked tokens, except
//! the hint variant, which may reveal a few of them again. Ties in attention
//! are broken towards the lower token index.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tensor};
use crate::vit::TokenSequence;

/// Binary mask over `n` patch tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskVector {
    bits: Vec<bool>,
    k: usize,
}

impl MaskVector {
    pub fn zeros(n: usize) -> Self {
        MaskVector {
            bits: vec![false; n],
            k: 0,
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        let k = bits.iter().filter(|&&b| b).count();
        MaskVector { bits, k }
    }

    pub fn from_indices(n: usize, idx: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; n];
        idx.into_iter().for_each(|i| bits[i] = true);
        Self::from_bits(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of masked tokens.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bits[i]).collect()
    }

    fn clear(&mut self, i: usize) {
        if std::mem::replace(&mut self.bits[i], false) {
            self.k -= 1;
        }
    }
}

/// `n:hex`, four tokens per hex digit, first token in the high bit.
impl fmt::Display for MaskVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.len())?;
        for chunk in self.bits.chunks(4) {
            let nib = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (j, &b)| acc | ((b as u8) << (3 - j)));
            write!(f, "{nib:x}")?;
        }
        Ok(())
    }
}

impl FromStr for MaskVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("malformed mask string `{s}`"));
        let (n, hex) = s.split_once(':').ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        if hex.len() != n.div_ceil(4) {
            return Err(bad());
        }
        let mut bits = Vec::with_capacity(n);
        for c in hex.chars() {
            let nib = c.to_digit(16).ok_or_else(bad)?;
            for j in 0..4 {
                bits.push(nib >> (3 - j) & 1 == 1);
            }
        }
        if bits[n..].iter().any(|&b| b) {
            return Err(bad());
        }
        bits.truncate(n);
        Ok(Self::from_bits(bits))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    Random,
    BlockWise,
    AttmaskHigh,
    AttmaskLow,
    AttmaskHint,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 5] = [
        MaskStrategy::Random,
        MaskStrategy::BlockWise,
        MaskStrategy::AttmaskHigh,
        MaskStrategy::AttmaskLow,
        MaskStrategy::AttmaskHint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Random => "random",
            MaskStrategy::BlockWise => "block-wise",
            MaskStrategy::AttmaskHigh => "attmask-high",
            MaskStrategy::AttmaskLow => "attmask-low",
            MaskStrategy::AttmaskHint => "attmask-hint",
        }
    }

    pub fn needs_attention(self) -> bool {
        matches!(
            self,
            MaskStrategy::AttmaskHigh | MaskStrategy::AttmaskLow | MaskStrategy::AttmaskHint
        )
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown masking strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPolicy {
    pub strategy: MaskStrategy,
    /// Probability that a global view is masked at all.
    pub probability: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Show ratio of the hint variant.
    pub show_ratio: f64,
    /// 1-based encoder layer whose attention drives masking; `None` is the last.
    pub layer: Option<usize>,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            strategy: MaskStrategy::AttmaskHigh,
            probability: 0.5,
            ratio_min: 0.1,
            ratio_max: 0.5,
            show_ratio: 0.1,
            layer: None,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self, depth: usize) -> Result<()> {
        let unit = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(
                    format!("masking.{field}"),
                    format!("{v} is outside [0, 1]"),
                ))
            }
        };
        unit("probability", self.probability)?;
        unit("ratio_min", self.ratio_min)?;
        unit("ratio_max", self.ratio_max)?;
        unit("show_ratio", self.show_ratio)?;
        if self.ratio_min > self.ratio_max {
            return Err(Error::config(
                "masking.ratio_min",
                format!(
                    "ratio_min {} exceeds ratio_max {}",
                    self.ratio_min, self.ratio_max
                ),
            ));
        }
        if let Some(l) = self.layer {
            if l == 0 || l > depth {
                return Err(Error::config(
                    "masking.layer",
                    format!("layer {l} outside [1, {depth}]"),
                ));
            }
        }
        Ok(())
    }

    pub fn attention_layer(&self, depth: usize) -> usize {
        self.layer.unwrap_or(depth)
    }
}

/// Masking decision for one view. Always consumes two draws so that the
/// stream stays aligned whatever the policy.
pub fn sample_ratio(policy: &MaskPolicy, rng: &mut StreamRng) -> (bool, f64) {
    let coin: f64 = rng.random();
    let u: f64 = rng.random();
    let r = if policy.ratio_min < policy.ratio_max {
        policy.ratio_min + (policy.ratio_max - policy.ratio_min) * u
    } else {
        policy.ratio_min
    };
    (coin < policy.probability, r)
}

/// `floor(r * n)`.
pub fn mask_count(n: usize, r: f64) -> usize {
    ((r * n as f64).floor() as usize).min(n)
}

pub fn random_mask(n: usize, r: f64, rng: &mut StreamRng) -> MaskVector {
    let k = mask_count(n, r);
    MaskVector::from_indices(n, index::sample(rng, n, k))
}

fn square_side(n: usize) -> Result<usize> {
    let g = (n as f64).sqrt().round() as usize;
    if g * g == n && n > 0 {
        Ok(g)
    } else {
        Err(Error::Unsupported(format!(
            "{n} tokens do not form a square grid"
        )))
    }
}

const BLOCK_MIN_AREA: usize = 16;
const BLOCK_MIN_ASPECT: f64 = 0.3;

/// Rectangle `(top, left, height, width)` with area at least `min_area` and
/// aspect ratio within `[0.3, 1/0.3]`.
fn sample_rect(
    g: usize,
    min_area: usize,
    max_area: usize,
    rng: &mut StreamRng,
) -> (usize, usize, usize, usize) {
    let (la, lb) = (BLOCK_MIN_ASPECT.ln(), (1.0 / BLOCK_MIN_ASPECT).ln());
    let mut hw = None;
    for _ in 0..100 {
        let area = rng.random_range(min_area as f64..=max_area.max(min_area) as f64);
        let aspect = rng.random_range(la..=lb).exp();
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, g);
        let w = ((area / aspect).sqrt().round() as usize).clamp(1, g);
        let ratio = h as f64 / w as f64;
        if h * w >= min_area && (BLOCK_MIN_ASPECT..=1.0 / BLOCK_MIN_ASPECT).contains(&ratio) {
            hw = Some((h, w));
            break;
        }
    }
    let (h, w) = hw.unwrap_or_else(|| {
        let s = ((min_area as f64).sqrt().ceil() as usize).min(g);
        (s, s)
    });
    let top = rng.random_range(0..=g - h);
    let left = rng.random_range(0..=g - w);
    (top, left, h, w)
}

/// Union of random rectangles covering exactly `floor(r * n)` tokens of a
/// square grid. The last rectangle is trimmed from its outer ring inwards.
pub fn blockwise_mask(n: usize, r: f64, rng: &mut StreamRng) -> Result<MaskVector> {
    let g = square_side(n)?;
    let k = mask_count(n, r);
    let mut bits = vec![false; n];
    let mut covered = 0;
    while covered < k {
        let need = k - covered;
        let (top, left, h, w) = sample_rect(g, BLOCK_MIN_AREA.min(need), need, rng);
        let mut fresh: Vec<(usize, usize)> = Vec::new();
        for y in top..top + h {
            for x in left..left + w {
                if !bits[y * g + x] {
                    let ring = (y - top)
                        .min(top + h - 1 - y)
                        .min(x - left)
                        .min(left + w - 1 - x);
                    fresh.push((ring, y * g + x));
                }
            }
        }
        if fresh.len() > need {
            fresh.sort_unstable();
            fresh.drain(..fresh.len() - need);
        }
        covered += fresh.len();
        fresh.into_iter().for_each(|(_, i)| bits[i] = true);
    }
    Ok(MaskVector::from_bits(bits))
}

/// Token indices by descending attention, lower index first among ties.
pub fn rank_descending<T: Scalar>(attn: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..attn.len()).collect();
    order.sort_by(|&a, &b| {
        attn[b]
            .as_f64()
            .total_cmp(&attn[a].as_f64())
            .then(a.cmp(&b))
    });
    order
}

fn rank_ascending<T: Scalar>(attn: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..attn.len()).collect();
    order.sort_by(|&a, &b| {
        attn[a]
            .as_f64()
            .total_cmp(&attn[b].as_f64())
            .then(a.cmp(&b))
    });
    order
}

/// Masks the `floor(r * n)` most attended tokens.
pub fn attmask_high<T: Scalar>(attn: &[T], r: f64) -> MaskVector {
    let n = attn.len();
    MaskVector::from_indices(n, rank_descending(attn).into_iter().take(mask_count(n, r)))
}

/// Masks the `floor(r * n)` least attended tokens.
pub fn attmask_low<T: Scalar>(attn: &[T], r: f64) -> MaskVector {
    let n = attn.len();
    MaskVector::from_indices(n, rank_ascending(attn).into_iter().take(mask_count(n, r)))
}

/// High-attention mask with `floor(s * k)` tokens drawn (without
/// replacement) from the `floor(s * n)` most attended and revealed again.
pub fn attmask_hint<T: Scalar>(attn: &[T], r: f64, s: f64, rng: &mut StreamRng) -> MaskVector {
    let n = attn.len();
    let k = mask_count(n, r);
    let order = rank_descending(attn);
    let mut mask = MaskVector::from_indices(n, order[..k].iter().copied());
    let reveal = mask_count(k, s);
    let pool = mask_count(n, s);
    for j in index::sample(rng, pool, reveal.min(pool)) {
        mask.clear(order[j]);
    }
    mask
}

/// Builds the mask for one view according to `strategy`.
pub fn build_mask<T: Scalar>(
    policy: &MaskPolicy,
    n: usize,
    r: f64,
    attn: Option<&[T]>,
    rng: &mut StreamRng,
) -> Result<MaskVector> {
    let need_attn = || {
        attn.filter(|a| a.len() == n).ok_or_else(|| {
            Error::Contract(format!(
                "{} masking needs a CLS attention vector of length {n}",
                policy.strategy
            ))
        })
    };
    Ok(match policy.strategy {
        MaskStrategy::Random => random_mask(n, r, rng),
        MaskStrategy::BlockWise => blockwise_mask(n, r, rng)?,
        MaskStrategy::AttmaskHigh => attmask_high(need_attn()?, r),
        MaskStrategy::AttmaskLow => attmask_low(need_attn()?, r),
        MaskStrategy::AttmaskHint => attmask_hint(need_attn()?, r, policy.show_ratio, rng),
    })
}

/// Replaces masked patch rows with `mask_embed`; `[CLS]` is left alone.
pub fn apply_mask<T: Scalar>(
    seq: &TokenSequence<T>,
    mask: &MaskVector,
    mask_embed: &[T],
) -> Result<TokenSequence<T>> {
    if mask.len() != seq.n {
        return Err(Error::Dimension(format!(
            "mask of length {} for {} patch tokens",
            mask.len(),
            seq.n
        )));
    }
    let d = seq.dim();
    if mask_embed.len() != d {
        return Err(Error::Dimension(format!(
            "mask embedding of length {} for token dim {d}",
            mask_embed.len()
        )));
    }
    let mut data = seq.tokens.data().to_vec();
    for i in mask.indices() {
        data[(i + 1) * d..(i + 2) * d].copy_from_slice(mask_embed);
    }
    TokenSequence::new(Tensor::from_vec(seq.tokens.shape(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use proptest::prelude::*;

    fn rng(i: u64) -> StreamRng {
        RngState::new(7).stream("mask-test", i)
    }

    fn components(bits: &[bool], g: usize) -> usize {
        let mut seen = vec![false; bits.len()];
        let mut count = 0;
        for start in 0..bits.len() {
            if !bits[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = (i / g, i % g);
                let mut nb = Vec::new();
                if y > 0 {
                    nb.push(i - g)
                }
                if y + 1 < g {
                    nb.push(i + g)
                }
                if x > 0 {
                    nb.push(i - 1)
                }
                if x + 1 < g {
                    nb.push(i + 1)
                }
                for j in nb {
                    if bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn zero_probability_never_applies() {
        let p = MaskPolicy {
            probability: 0.0,
            ..Default::default()
        };
        let mut r = rng(0);
        assert!((0..1000).all(|_| !sample_ratio(&p, &mut r).0));
    }

    #[test]
    fn degenerate_ratio_range_is_constant() {
        let p = MaskPolicy {
            ratio_min: 0.3,
            ratio_max: 0.3,
            ..Default::default()
        };
        let mut r = rng(1);
        assert!((0..100).all(|_| sample_ratio(&p, &mut r).1 == 0.3));
    }

    #[test]
    fn sample_ratio_monte_carlo() {
        let p = MaskPolicy::default();
        let mut r = rng(2);
        let draws: Vec<_> = (0..10_000).map(|_| sample_ratio(&p, &mut r)).collect();
        let rate = draws.iter().filter(|d| d.0).count() as f64 / 1e4;
        let mean = draws.iter().map(|d| d.1).sum::<f64>() / 1e4;
        assert!((rate - 0.5).abs() <= 0.02, "{rate}");
        assert!((mean - 0.3).abs() <= 0.01, "{mean}");
    }

    #[test]
    fn random_mask_extremes_and_count() {
        let mut r = rng(3);
        assert_eq!(random_mask(10, 0.0, &mut r).k(), 0);
        assert!(random_mask(10, 1.0, &mut r).bits().iter().all(|&b| b));
        for _ in 0..50 {
            assert_eq!(random_mask(64, 0.5, &mut r).k(), 32);
        }
    }

    #[test]
    fn blockwise_cardinality() {
        let mut r = rng(4);
        assert_eq!(blockwise_mask(64, 0.0, &mut r).unwrap().k(), 0);
        for i in 0..1000 {
            let ratio = [0.1, 0.2, 0.3, 0.4, 0.5][i % 5];
            assert_eq!(
                blockwise_mask(64, ratio, &mut r).unwrap().k(),
                (ratio * 64.0) as usize
            );
        }
        assert_eq!(blockwise_mask(64, 1.0, &mut r).unwrap().k(), 64);
    }

    #[test]
    fn blockwise_is_more_contiguous_than_random() {
        let mut r = rng(5);
        let (mut blocks, mut random) = (0, 0);
        for _ in 0..1000 {
            blocks += components(blockwise_mask(64, 0.3, &mut r).unwrap().bits(), 8);
            random += components(random_mask(64, 0.3, &mut r).bits(), 8);
        }
        assert!(blocks < random, "{blocks} vs {random}");
    }

    #[test]
    fn blockwise_rejects_non_square() {
        assert!(matches!(
            blockwise_mask(10, 0.5, &mut rng(0)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn high_and_low_examples() {
        let a = [0.1, 0.4, 0.2, 0.3];
        assert_eq!(attmask_high(&a, 0.5).bits(), &[false, true, false, true]);
        assert_eq!(attmask_low(&a, 0.5).bits(), &[true, false, true, false]);
        assert_eq!(attmask_high(&a, 0.0).k(), 0);
        assert_eq!(attmask_low(&a, 1.0).k(), 4);
    }

    #[test]
    fn uniform_attention_ties_go_to_lower_index() {
        let a = [0.125f64; 8];
        assert_eq!(attmask_high(&a, 0.25).indices(), vec![0, 1]);
        assert_eq!(attmask_low(&a, 0.25).indices(), vec![0, 1]);
    }

    #[test]
    fn hint_examples() {
        let a: Vec<f64> = (0..10).map(|i| ((i * 7) % 10) as f64 / 10.0).collect();
        let high = attmask_high(&a, 0.5);
        assert_eq!(attmask_hint(&a, 0.5, 0.0, &mut rng(0)), high);
        assert_eq!(attmask_hint(&a, 0.0, 0.5, &mut rng(0)).k(), 0);

        // k = 5, one token revealed from the two most attended.
        let top2 = &rank_descending(&a)[..2];
        let outputs: std::collections::BTreeSet<Vec<usize>> = (0..200)
            .map(|i| attmask_hint(&a, 0.5, 0.2, &mut rng(i)).indices())
            .collect();
        let expected: std::collections::BTreeSet<Vec<usize>> = top2
            .iter()
            .map(|&t| high.indices().into_iter().filter(|&i| i != t).collect())
            .collect();
        assert_eq!(outputs, expected);
    }

    #[test]
    fn apply_mask_substitutes_rows() {
        let t = Tensor::<f64>::from_rows(&[
            &[5.0, 5.0],
            &[1.0, 2.0],
            &[3.0, 4.0],
            &[5.0, 6.0],
            &[7.0, 8.0],
        ]);
        let seq = TokenSequence::new(t).unwrap();
        let m = MaskVector::from_bits(vec![false, true, false, true]);
        let out = apply_mask(&seq, &m, &[9.0, 9.0]).unwrap();
        assert_eq!(
            out.tokens.data(),
            &[5.0, 5.0, 1.0, 2.0, 9.0, 9.0, 5.0, 6.0, 9.0, 9.0]
        );
        assert_eq!(
            apply_mask(&seq, &MaskVector::zeros(4), &[9.0, 9.0]).unwrap(),
            seq
        );
        let all = apply_mask(&seq, &MaskVector::from_bits(vec![true; 4]), &[9.0, 9.0]).unwrap();
        assert_eq!(all.tokens.row(0), &[5.0, 5.0]);
        assert!((1..5).all(|r| all.tokens.row(r) == [9.0, 9.0]));
        assert_eq!(apply_mask(&out, &m, &[9.0, 9.0]).unwrap(), out);
        assert!(matches!(
            apply_mask(&seq, &MaskVector::zeros(3), &[9.0, 9.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn text_form() {
        let m = MaskVector::from_bits(vec![false, true, false, true, true]);
        assert_eq!(m.to_string(), "5:58");
        assert_eq!("5:58".parse::<MaskVector>().unwrap(), m);
        assert!("5:59".parse::<MaskVector>().is_err());
        assert!("5:5".parse::<MaskVector>().is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(MaskPolicy::default().validate(6).is_ok());
        let bad = MaskPolicy {
            ratio_min: 0.6,
            ..Default::default()
        };
        assert!(bad.validate(6).is_err());
        let bad = MaskPolicy {
            layer: Some(7),
            ..Default::default()
        };
        assert!(bad.validate(6).is_err());
        assert_eq!(
            "block-wise".parse::<MaskStrategy>().unwrap(),
            MaskStrategy::BlockWise
        );
    }

    fn attn_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        // Small integer levels make ties common.
        prop::collection::vec(0u8..6, 1..=max_len)
            .prop_map(|v| v.into_iter().map(|x| x as f64 / 8.0).collect())
    }

    proptest! {
        #[test]
        fn high_low_match_sort_oracle(a in attn_vec(64), r in 0.0f64..=1.0) {
            let k = (r * a.len() as f64).floor() as usize;
            let mut pairs: Vec<(f64, usize)> = a.iter().copied().zip(0..).collect();
            pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            let mut hi: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
            hi.sort();
            pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
            let mut lo: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
            lo.sort();
            prop_assert_eq!(attmask_high(&a, r).indices(), hi);
            prop_assert_eq!(attmask_low(&a, r).indices(), lo);
        }

        #[test]
        fn high_carries_maximal_mass(a in prop::collection::vec(0.0f64..1.0, 1..=10)) {
            let n = a.len();
            for k in 1..=n {
                let r = k as f64 / n as f64;
                let high = attmask_high(&a, r);
                prop_assert_eq!(high.k(), k);
                let mass: f64 = high.indices().iter().map(|&i| a[i]).sum();
                for subset in 0u32..(1 << n) {
                    if subset.count_ones() as usize == k {
                        let m: f64 = (0..n).filter(|i| subset >> i & 1 == 1).map(|i| a[i]).sum();
                        prop_assert!(m <= mass + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn scale_invariant(a in attn_vec(40), c in 0.01f64..100.0, r in 0.0f64..=1.0, seed in 0u64..100) {
            let b: Vec<f64> = a.iter().map(|x| x * c).collect();
            prop_assert_eq!(attmask_high(&a, r), attmask_high(&b, r));
            prop_assert_eq!(attmask_low(&a, r), attmask_low(&b, r));
            prop_assert_eq!(attmask_hint(&a, r, 0.3, &mut rng(seed)), attmask_hint(&b, r, 0.3, &mut rng(seed)));
        }

        #[test]
        fn hint_cardinality(a in attn_vec(64), r in 0.0f64..=1.0, s in 0.0f64..=1.0, seed in 0u64..100) {
            let k = (r * a.len() as f64).floor() as usize;
            let m = (s * k as f64).floor() as usize;
            let got = attmask_hint(&a, r, s, &mut rng(seed)).k();
            prop_assert!(got + m >= k && got <= k);
        }

        #[test]
        fn high_low_disjoint_when_distinct(n in 2usize..40, r in 0.0f64..0.5, seed in 0u64..1000) {
            let a: Vec<f64> = index::sample(&mut rng(seed), 1000, n).into_iter().map(|x| x as f64).collect();
            let h = attmask_high(&a, r);
            let l = attmask_low(&a, r);
            prop_assert!(h.bits().iter().zip(l.bits()).all(|(x, y)| !(x & y)));
        }

        #[test]
        fn text_roundtrip(bits in prop::collection::vec(any::<bool>(), 0..100)) {
            let m = MaskVector::from_bits(bits);
            prop_assert_eq!(m.to_string().parse::<MaskVector>().unwrap(), m);
        }
    }
}
