//! Mask-derived measurements and face-area balancing between genders.
//!
//! "Face" means the classes skin, nose, eyes, brows, mouth and other_face.
//! Hair and facial hair are excluded.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::Pair;
use crate::records::{raster_header, FaceClass, Gender, GrayRaster, Manifest, MaskRaster, Race};
use crate::seeding::stream_rng;

/// Side length of aligned face crops.
pub const ALIGNED_SIZE: u32 = 224;
pub const HEATMAP_MAGIC: &[u8; 4] = b"BAHM";

/// Face-indicator bitset of one mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceIndicator {
    pub width: u32,
    pub height: u32,
    words: Vec<u64>,
}

impl FaceIndicator {
    pub fn from_mask(mask: &MaskRaster) -> FaceIndicator {
        let n = mask.classes.len();
        let mut words = vec![0u64; n.div_ceil(64)];
        for (i, &c) in mask.classes.iter().enumerate() {
            if FaceClass::is_face(c) {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        FaceIndicator {
            width: mask.width,
            height: mask.height,
            words,
        }
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn iou(&self, other: &FaceIndicator) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Contract(format!(
                "IoU between {}x{} and {}x{} masks",
                self.width, self.height, other.width, other.height
            )));
        }
        let (mut inter, mut union) = (0u64, 0u64);
        for (a, b) in self.words.iter().zip(&other.words) {
            inter += u64::from((a & b).count_ones());
            union += u64::from((a | b).count_ones());
        }
        if union == 0 {
            return Ok(1.0);
        }
        Ok(inter as f64 / union as f64)
    }
}

/// Fraction of pixels labeled as face.
pub fn area_ratio(mask: &MaskRaster) -> f64 {
    if mask.classes.is_empty() {
        return 0.0;
    }
    let face = mask.classes.iter().filter(|&&c| FaceClass::is_face(c)).count();
    face as f64 / mask.classes.len() as f64
}

pub fn nose_present(mask: &MaskRaster) -> bool {
    mask.classes.contains(&(FaceClass::Nose as u8))
}

/// Face-region IoU; two empty faces count as identical (IoU 1).
pub fn mask_iou(a: &MaskRaster, b: &MaskRaster) -> Result<f64> {
    FaceIndicator::from_mask(a).iou(&FaceIndicator::from_mask(b))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct IouBalance {
    pub kept: Vec<Pair>,
    /// Pairs dropped because a side had no mask.
    pub missing_mask: Vec<Pair>,
}

/// Keeps pairs whose face IoU is strictly above `min_iou`. `masks` is indexed
/// by manifest position, like the pairs.
pub fn balance_pairs_by_iou(pairs: &[Pair], masks: &[Option<MaskRaster>], min_iou: f64) -> Result<IouBalance> {
    let needed: HashSet<usize> = pairs
        .iter()
        .flat_map(|p| [p.first as usize, p.second as usize])
        .collect();
    let indicators: Vec<Option<FaceIndicator>> = masks
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            if needed.contains(&i) {
                m.as_ref().map(FaceIndicator::from_mask)
            } else {
                None
            }
        })
        .collect();
    balance_indicator_pairs(pairs, &indicators, min_iou)
}

pub fn balance_indicator_pairs(
    pairs: &[Pair],
    indicators: &[Option<FaceIndicator>],
    min_iou: f64,
) -> Result<IouBalance> {
    let verdicts: Vec<Result<Option<bool>>> = pairs
        .par_iter()
        .map(|p| {
            let a = indicators.get(p.first as usize).and_then(Option::as_ref);
            let b = indicators.get(p.second as usize).and_then(Option::as_ref);
            match (a, b) {
                (Some(a), Some(b)) => Ok(Some(a.iou(b)? > min_iou)),
                _ => Ok(None),
            }
        })
        .collect();
    let mut out = IouBalance::default();
    for (p, v) in pairs.iter().zip(verdicts) {
        match v? {
            Some(true) => out.kept.push(*p),
            Some(false) => {}
            None => out.missing_mask.push(*p),
        }
    }
    Ok(out)
}

/// Per-pixel difference of mean face indicators, group A minus group B.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl HeatmapGrid {
    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.values[(y * self.width + x) as usize]
    }

    pub fn mean_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() / self.values.len() as f64
    }

    pub fn negated(&self) -> HeatmapGrid {
        HeatmapGrid {
            values: self.values.iter().map(|v| -v).collect(),
            ..*self
        }
    }

    /// One CSV row per raster row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.width as usize) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Raster-style header under the `"BAHM"` magic, payload f32 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = raster_header(HEATMAP_MAGIC, self.width, self.height);
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }
}

fn indicator_counts<'a>(masks: impl IntoIterator<Item = &'a FaceIndicator>) -> Result<(Vec<u32>, usize)> {
    let n_px = (ALIGNED_SIZE * ALIGNED_SIZE) as usize;
    let mut counts = vec![0u32; n_px];
    let mut n = 0;
    for m in masks {
        if (m.width, m.height) != (ALIGNED_SIZE, ALIGNED_SIZE) {
            return Err(Error::Contract(format!(
                "heatmap masks must be {ALIGNED_SIZE}x{ALIGNED_SIZE}, got {}x{}",
                m.width, m.height
            )));
        }
        for (px, c) in counts.iter_mut().enumerate() {
            *c += u32::from(m.get(px));
        }
        n += 1;
    }
    Ok((counts, n))
}

/// Integer per-pixel counts keep the sum exact and order-free.
pub fn mean_indicator_diff(group_a: &[&FaceIndicator], group_b: &[&FaceIndicator]) -> Result<HeatmapGrid> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::Contract("mean mask difference needs two non-empty groups".into()));
    }
    let (ca, na) = indicator_counts(group_a.iter().copied())?;
    let (cb, nb) = indicator_counts(group_b.iter().copied())?;
    let values = ca
        .iter()
        .zip(&cb)
        .map(|(&a, &b)| f64::from(a) / na as f64 - f64::from(b) / nb as f64)
        .collect();
    Ok(HeatmapGrid {
        width: ALIGNED_SIZE,
        height: ALIGNED_SIZE,
        values,
    })
}

pub fn mean_mask_diff(group_a: &[&MaskRaster], group_b: &[&MaskRaster]) -> Result<HeatmapGrid> {
    let a: Vec<FaceIndicator> = group_a.par_iter().map(|m| FaceIndicator::from_mask(m)).collect();
    let b: Vec<FaceIndicator> = group_b.par_iter().map(|m| FaceIndicator::from_mask(m)).collect();
    mean_indicator_diff(&a.iter().collect::<Vec<_>>(), &b.iter().collect::<Vec<_>>())
}

fn weighted_counts(items: &[(&FaceIndicator, u64)]) -> Result<(Vec<u64>, u64)> {
    let n_px = (ALIGNED_SIZE * ALIGNED_SIZE) as usize;
    let mut counts = vec![0u64; n_px];
    let mut total = 0;
    for (m, w) in items {
        if (m.width, m.height) != (ALIGNED_SIZE, ALIGNED_SIZE) {
            return Err(Error::Contract(format!(
                "heatmap masks must be {ALIGNED_SIZE}x{ALIGNED_SIZE}, got {}x{}",
                m.width, m.height
            )));
        }
        for (wi, &word) in m.words.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                counts[wi * 64 + b] += w;
                bits &= bits - 1;
            }
        }
        total += w;
    }
    Ok((counts, total))
}

/// Before/after summary of IoU balancing for one race.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaBalanceReport {
    pub race: Race,
    pub pairs_before: usize,
    pub pairs_kept: usize,
    pub missing_mask: usize,
    pub mean_abs_area_diff_before: f64,
    pub mean_abs_area_diff_after: Option<f64>,
    /// Female minus male, averaged over the pairs' sides.
    pub heatmap_before: HeatmapGrid,
    pub heatmap_after: Option<HeatmapGrid>,
}

impl AreaBalanceReport {
    pub const CSV_HEADER: &'static str =
        "race,pairs_before,pairs_kept,missing_mask,mean_abs_area_diff_before,mean_abs_area_diff_after,heatmap_mean_abs_before,heatmap_mean_abs_after\n";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}\n",
            self.race,
            self.pairs_before,
            self.pairs_kept,
            self.missing_mask,
            self.mean_abs_area_diff_before,
            opt(self.mean_abs_area_diff_after),
            self.heatmap_before.mean_abs(),
            opt(self.heatmap_after.as_ref().map(HeatmapGrid::mean_abs)),
        )
    }
}

fn pair_summary(manifest: &Manifest, pairs: &[Pair], ind: &[Option<FaceIndicator>]) -> Result<(f64, HeatmapGrid)> {
    let mut female: BTreeMap<usize, u64> = BTreeMap::new();
    let mut male: BTreeMap<usize, u64> = BTreeMap::new();
    let mut diff_sum = 0.0;
    let px = f64::from(ALIGNED_SIZE * ALIGNED_SIZE);
    for p in pairs {
        let (a, b) = (p.first as usize, p.second as usize);
        let (f, m) = if manifest.records[a].gender == Gender::Female { (a, b) } else { (b, a) };
        let (fi, mi) = (ind[f].as_ref().unwrap(), ind[m].as_ref().unwrap());
        diff_sum += (fi.count() as f64 - mi.count() as f64).abs() / px;
        *female.entry(f).or_default() += 1;
        *male.entry(m).or_default() += 1;
    }
    let side = |s: &BTreeMap<usize, u64>| -> Vec<(&FaceIndicator, u64)> {
        s.iter().map(|(&i, &w)| (ind[i].as_ref().unwrap(), w)).collect()
    };
    let (cf, nf) = weighted_counts(&side(&female))?;
    let (cm, nm) = weighted_counts(&side(&male))?;
    let values = cf
        .iter()
        .zip(&cm)
        .map(|(&a, &b)| a as f64 / nf as f64 - b as f64 / nm as f64)
        .collect();
    Ok((
        diff_sum / pairs.len() as f64,
        HeatmapGrid {
            width: ALIGNED_SIZE,
            height: ALIGNED_SIZE,
            values,
        },
    ))
}

/// Cross-gender pairs of one race, before and after IoU balancing. `masks`
/// is indexed by manifest position.
pub fn balance_area_for_race(
    manifest: &Manifest,
    masks: &[Option<MaskRaster>],
    race: Race,
    cap: usize,
    min_iou: f64,
    seed: u64,
) -> Result<AreaBalanceReport> {
    let all = cross_gender_pairs(manifest, race, cap, seed);
    let indicators: Vec<Option<FaceIndicator>> = masks
        .par_iter()
        .enumerate()
        .map(|(i, m)| match m {
            Some(m) if manifest.records[i].race == race => Some(FaceIndicator::from_mask(m)),
            _ => None,
        })
        .collect();
    let usable: Vec<Pair> = all
        .iter()
        .copied()
        .filter(|p| indicators[p.first as usize].is_some() && indicators[p.second as usize].is_some())
        .collect();
    if usable.is_empty() {
        return Err(Error::Shortfall {
            context: format!("race {race} cross-gender pairs with masks"),
            need: 1,
            have: 0,
        });
    }
    let balance = balance_indicator_pairs(&usable, &indicators, min_iou)?;
    let (before_diff, before_map) = pair_summary(manifest, &usable, &indicators)?;
    let after = if balance.kept.is_empty() {
        None
    } else {
        Some(pair_summary(manifest, &balance.kept, &indicators)?)
    };
    Ok(AreaBalanceReport {
        race,
        pairs_before: usable.len(),
        pairs_kept: balance.kept.len(),
        missing_mask: all.len() - usable.len(),
        mean_abs_area_diff_before: before_diff,
        mean_abs_area_diff_after: after.as_ref().map(|a| a.0),
        heatmap_before: before_map,
        heatmap_after: after.map(|a| a.1),
    })
}

/// Drops male records flagged with facial hair. Female records stay even when
/// flagged.
pub fn exclude_facial_hair(manifest: &Manifest) -> Manifest {
    let keep: Vec<usize> = (0..manifest.len())
        .filter(|&i| {
            let r = &manifest.records[i];
            !(r.gender == Gender::Male && r.facial_hair == Some(true))
        })
        .collect();
    manifest.select(&keep)
}

/// Face skin brightness: mean gray value over skin-class pixels.
pub fn compute_fsb(gray: &GrayRaster, mask: &MaskRaster) -> Result<f64> {
    if (gray.width, gray.height) != (mask.width, mask.height) {
        return Err(Error::Contract(format!(
            "gray raster {}x{} does not match mask {}x{}",
            gray.width, gray.height, mask.width, mask.height
        )));
    }
    let (sum, n) = gray
        .pixels
        .iter()
        .zip(&mask.classes)
        .filter(|(_, &c)| c == FaceClass::Skin as u8)
        .fold((0u64, 0u64), |(s, n), (&g, _)| (s + u64::from(g), n + 1));
    if n == 0 {
        return Err(Error::Degenerate("no skin pixels for brightness".into()));
    }
    Ok(sum as f64 / n as f64)
}

/// Female × male pairs within one race: all of them when there are at most
/// `cap`, otherwise `cap` distinct pairs drawn uniformly.
pub fn cross_gender_pairs(manifest: &Manifest, race: Race, cap: usize, seed: u64) -> Vec<Pair> {
    let side = |g: Gender| -> Vec<usize> {
        (0..manifest.len())
            .filter(|&i| manifest.records[i].race == race && manifest.records[i].gender == g)
            .collect()
    };
    let females = side(Gender::Female);
    let males = side(Gender::Male);
    let total = females.len() * males.len();
    if total <= cap {
        return females
            .iter()
            .flat_map(|&f| males.iter().map(move |&m| Pair::new(f, m)))
            .collect();
    }
    let mut rng = stream_rng(seed, &format!("cross-gender/{race}"));
    let mut seen = HashSet::with_capacity(cap);
    let mut out = Vec::with_capacity(cap);
    while out.len() < cap {
        let f = females[rng.random_range(0..females.len())];
        let m = males[rng.random_range(0..males.len())];
        let p = Pair::new(f, m);
        if seen.insert(p) {
            out.push(p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(size: u32, x0: u32, y0: u32, side: u32) -> MaskRaster {
        let mut m = MaskRaster::filled(size, size, FaceClass::Background);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, FaceClass::Skin);
            }
        }
        m
    }

    #[test]
    fn area_ratio_cases() {
        assert_eq!(area_ratio(&MaskRaster::filled(8, 8, FaceClass::Background)), 0.0);
        assert_eq!(area_ratio(&MaskRaster::filled(8, 8, FaceClass::Skin)), 1.0);
        assert_eq!(area_ratio(&square(224, 50, 60, 112)), 0.25);
        assert_eq!(area_ratio(&MaskRaster::filled(8, 8, FaceClass::FacialHair)), 0.0);
        assert_eq!(area_ratio(&MaskRaster::filled(8, 8, FaceClass::Hair)), 0.0);
    }

    #[test]
    fn nose_cases() {
        let mut m = MaskRaster::filled(4, 4, FaceClass::Skin);
        assert!(!nose_present(&m));
        m.set(2, 2, FaceClass::Nose);
        assert!(nose_present(&m));
        assert!(!nose_present(&MaskRaster::filled(4, 4, FaceClass::Background)));
    }

    #[test]
    fn iou_cases() {
        let a = square(32, 0, 0, 10);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &square(32, 20, 20, 10)).unwrap(), 0.0);
        // shifted by 5 columns: overlap 50 of 150
        assert!((mask_iou(&a, &square(32, 5, 0, 10)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let empty = MaskRaster::filled(32, 32, FaceClass::Background);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        assert!(mask_iou(&a, &MaskRaster::filled(16, 16, FaceClass::Skin)).is_err());
    }

    #[test]
    fn iou_threshold_is_strict() {
        // 10 columns vs 9 columns of the same 10 rows: IoU = 90/100 = 0.9
        let a = {
            let mut m = MaskRaster::filled(16, 16, FaceClass::Background);
            for y in 0..10 {
                for x in 0..10 {
                    m.set(x, y, FaceClass::Skin);
                }
            }
            m
        };
        let mut b = a.clone();
        for y in 0..10 {
            b.set(9, y, FaceClass::Background);
        }
        assert!((mask_iou(&a, &b).unwrap() - 0.9).abs() < 1e-12);
        let masks = vec![Some(a.clone()), Some(b), Some(a), None];
        let pairs = [Pair::new(0, 1), Pair::new(0, 2), Pair::new(2, 3)];
        let out = balance_pairs_by_iou(&pairs, &masks, 0.9).unwrap();
        assert_eq!(out.kept, vec![Pair::new(0, 2)]);
        assert_eq!(out.missing_mask, vec![Pair::new(2, 3)]);
    }

    #[test]
    fn heatmap_cases() {
        let full = MaskRaster::filled(224, 224, FaceClass::Skin);
        let bg = MaskRaster::filled(224, 224, FaceClass::Background);
        let zero = mean_mask_diff(&[&full, &bg], &[&bg, &full]).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let ones = mean_mask_diff(&[&full], &[&bg]).unwrap();
        assert!(ones.values.iter().all(|&v| v == 1.0));

        // A has a top strip (rows 0..10) that B lacks
        let mut a = square(224, 0, 30, 150);
        let b = a.clone();
        for y in 0..10 {
            for x in 0..224 {
                a.set(x, y, FaceClass::Skin);
            }
        }
        let h = mean_mask_diff(&[&a], &[&b]).unwrap();
        for y in 0..224 {
            for x in 0..224 {
                let expect = if y < 10 { 1.0 } else { 0.0 };
                assert_eq!(h.at(x, y), expect);
            }
        }
        assert!(mean_mask_diff(&[], &[&b]).is_err());
        let small = MaskRaster::filled(8, 8, FaceClass::Skin);
        assert!(mean_mask_diff(&[&small], &[&small]).is_err());
    }

    #[test]
    fn heatmap_bytes() {
        let full = MaskRaster::filled(224, 224, FaceClass::Skin);
        let h = mean_mask_diff(&[&full], &[&full]).unwrap();
        let bytes = h.to_bytes();
        assert_eq!(&bytes[..4], b"BAHM");
        assert_eq!(bytes.len(), 13 + 224 * 224 * 4);
        assert_eq!(h.to_csv().lines().count(), 224);
    }

    #[test]
    fn facial_hair_rule_is_male_only() {
        use crate::records::{AgeGroup, ImageRecord};
        let mut recs = Vec::new();
        for i in 0..10 {
            let mut r = ImageRecord::new(format!("m{i}"), "p", Race::Black, Gender::Male, AgeGroup::Young, i);
            r.facial_hair = Some(i < 4);
            recs.push(r);
        }
        let mut f = ImageRecord::new("f", "q", Race::Black, Gender::Female, AgeGroup::Young, 10);
        f.facial_hair = Some(true);
        recs.push(f);
        let out = exclude_facial_hair(&Manifest::new(recs, "t"));
        assert_eq!(out.len(), 7);
        assert_eq!(out.records.iter().filter(|r| r.gender == Gender::Male).count(), 6);
        assert!(out.records.iter().any(|r| r.image_id == "f"));
    }

    #[test]
    fn fsb_cases() {
        let mask = square(16, 2, 2, 8);
        let gray = GrayRaster::new(16, 16, vec![128; 256]).unwrap();
        assert_eq!(compute_fsb(&gray, &mask).unwrap(), 128.0);

        let mut px = vec![0u8; 256];
        for y in 2..10 {
            for x in 2..10 {
                px[y * 16 + x] = if x < 6 { 100 } else { 200 };
            }
        }
        let gray = GrayRaster::new(16, 16, px).unwrap();
        assert_eq!(compute_fsb(&gray, &mask).unwrap(), 150.0);

        let bg = MaskRaster::filled(16, 16, FaceClass::Background);
        assert!(matches!(compute_fsb(&gray, &bg), Err(Error::Degenerate(_))));
    }
}
