//! Pair generation, scoring, score distributions and disparity metrics.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{DemographicGroup, EmbeddingStore, Gender, Manifest, Race};
use crate::seeding::stream_rng;

pub const HIST_BINS: usize = 2000;
const HIST_LO: f64 = -1.0;
const HIST_HI: f64 = 1.0;
/// Pairs per block when building distributions. Fixed so that merge order,
/// and therefore every floating-point result, is independent of thread count.
const SCORE_BLOCK: usize = 1 << 16;
pub const DEFAULT_IMPOSTOR_CAP: usize = 10_000_000;

/// Streaming summary of similarity scores: a fixed 2000-bin histogram over
/// [-1, 1] plus exact running moments (Welford, merged with Chan et al.).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub bins: Vec<u64>,
    pub count: u64,
    mean: f64,
    m2: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for ScoreDistribution {
    fn default() -> Self {
        ScoreDistribution {
            bins: vec![0; HIST_BINS],
            count: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl ScoreDistribution {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scores outside [-1, 1] (rounding on unit vectors) land in the end bins.
    pub fn bin_index(score: f64) -> usize {
        let t = (score - HIST_LO) / (HIST_HI - HIST_LO) * HIST_BINS as f64;
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(HIST_BINS - 1)
        }
    }

    pub fn bin_center(i: usize) -> f64 {
        HIST_LO + (i as f64 + 0.5) * (HIST_HI - HIST_LO) / HIST_BINS as f64
    }

    pub fn push(&mut self, score: f64) {
        self.bins[Self::bin_index(score)] += 1;
        self.count += 1;
        let delta = score - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (score - self.mean);
        self.min = self.min.min(score);
        self.max = self.max.max(score);
    }

    pub fn merge(&mut self, other: &ScoreDistribution) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        let n_a = self.count as f64;
        let n_b = other.count as f64;
        let n = n_a + n_b;
        let delta = other.mean - self.mean;
        self.mean += delta * n_b / n;
        self.m2 += other.m2 + delta * delta * n_a * n_b / n;
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }

    /// Builds a distribution in fixed-size blocks reduced in block order.
    pub fn from_scores(scores: &[f64]) -> ScoreDistribution {
        let parts: Vec<ScoreDistribution> = scores
            .par_chunks(SCORE_BLOCK)
            .map(|chunk| {
                let mut d = ScoreDistribution::new();
                for &s in chunk {
                    d.push(s);
                }
                d
            })
            .collect();
        let mut out = ScoreDistribution::new();
        for p in &parts {
            out.merge(p);
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    /// Unbiased sample variance (n - 1 denominator).
    pub fn variance(&self) -> Option<f64> {
        (self.count > 1).then(|| (self.m2 / (self.count - 1) as f64).max(0.0))
    }

    /// Fraction of scores whose bin center lies in `[lo, hi]`.
    pub fn mass_in(&self, lo: f64, hi: f64) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let inside: u64 = self
            .bins
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let c = Self::bin_center(*i);
                c >= lo && c <= hi
            })
            .map(|(_, &n)| n)
            .sum();
        inside as f64 / self.count as f64
    }

    /// Two-column `bin_center,count` CSV.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_center,count\n");
        for (i, c) in self.bins.iter().enumerate() {
            out.push_str(&format!("{:.4},{c}\n", Self::bin_center(i)));
        }
        out
    }
}

/// Two records of one manifest, by position, `first < second`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub first: u32,
    pub second: u32,
}

impl Pair {
    pub fn new(a: usize, b: usize) -> Pair {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        Pair {
            first: lo as u32,
            second: hi as u32,
        }
    }

    fn key(self) -> u64 {
        (u64::from(self.first) << 32) | u64::from(self.second)
    }
}

/// All same-identity unordered pairs among `positions`, identities in lexical
/// order and pairs in position order within an identity.
pub fn genuine_pairs_among(manifest: &Manifest, positions: &[usize]) -> Vec<Pair> {
    let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in positions {
        by_id.entry(manifest.records[i].identity_id.as_str()).or_default().push(i);
    }
    let mut out = Vec::new();
    for idx in by_id.values() {
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                out.push(Pair::new(i, j));
            }
        }
    }
    out
}

pub fn enumerate_genuine_pairs(manifest: &Manifest) -> Vec<Pair> {
    let all: Vec<usize> = (0..manifest.len()).collect();
    genuine_pairs_among(manifest, &all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImpostorScope {
    WithinGroup(DemographicGroup),
    Global,
}

impl ImpostorScope {
    fn tag(self) -> String {
        match self {
            ImpostorScope::WithinGroup(g) => format!("impostor/{g}"),
            ImpostorScope::Global => "impostor/global".into(),
        }
    }

    pub fn positions(self, manifest: &Manifest) -> Vec<usize> {
        match self {
            ImpostorScope::Global => (0..manifest.len()).collect(),
            ImpostorScope::WithinGroup(g) => manifest
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.group() == g)
                .map(|(i, _)| i)
                .collect(),
        }
    }
}

/// Draws `m` distinct cross-identity pairs uniformly, or enumerates all of them
/// when there are no more than `m`.
pub fn sample_impostor_pairs(
    manifest: &Manifest,
    scope: ImpostorScope,
    m: usize,
    seed: u64,
) -> Result<Vec<Pair>> {
    let positions = scope.positions(manifest);
    impostor_pairs_among(manifest, &positions, m, seed, &scope.tag())
}

pub(crate) fn impostor_pairs_among(
    manifest: &Manifest,
    positions: &[usize],
    m: usize,
    seed: u64,
    tag: &str,
) -> Result<Vec<Pair>> {
    // identity ordinal per position
    let mut ordinals: BTreeMap<&str, u32> = BTreeMap::new();
    for &i in positions {
        let next = ordinals.len() as u32;
        ordinals.entry(manifest.records[i].identity_id.as_str()).or_insert(next);
    }
    if ordinals.len() < 2 {
        return Err(Error::Contract(format!(
            "impostor pairs need at least 2 identities in scope, found {}",
            ordinals.len()
        )));
    }
    let ident: Vec<u32> = positions
        .iter()
        .map(|&i| ordinals[manifest.records[i].identity_id.as_str()])
        .collect();
    let mut sizes = vec![0u128; ordinals.len()];
    for &o in &ident {
        sizes[o as usize] += 1;
    }
    let n = positions.len() as u128;
    let total = n * (n - 1) / 2 - sizes.iter().map(|s| s * s.saturating_sub(1) / 2).sum::<u128>();

    if total <= m as u128 {
        let mut out = Vec::with_capacity(total as usize);
        for a in 0..positions.len() {
            for b in a + 1..positions.len() {
                if ident[a] != ident[b] {
                    out.push(Pair::new(positions[a], positions[b]));
                }
            }
        }
        return Ok(out);
    }

    let mut rng = stream_rng(seed, tag);
    let mut seen: HashSet<u64> = HashSet::with_capacity(m);
    let mut out = Vec::with_capacity(m);
    let len = positions.len();
    while out.len() < m {
        let a = rng.random_range(0..len);
        let b = rng.random_range(0..len);
        if a == b || ident[a] == ident[b] {
            continue;
        }
        let pair = Pair::new(positions[a], positions[b]);
        if seen.insert(pair.key()) {
            out.push(pair);
        }
    }
    Ok(out)
}

/// Cosine similarity of every pair, in pair order.
pub fn pair_scores(pairs: &[Pair], manifest: &Manifest, store: &EmbeddingStore) -> Result<Vec<f64>> {
    let rows: Vec<usize> = manifest
        .records
        .iter()
        .map(|r| r.embedding_index as usize)
        .collect();
    if let Some(r) = manifest
        .records
        .iter()
        .find(|r| r.embedding_index >= store.count() as u64)
    {
        return Err(Error::Contract(format!(
            "{}: embedding_index {} outside store of {} rows",
            r.image_id,
            r.embedding_index,
            store.count()
        )));
    }
    if let Some(p) = pairs
        .iter()
        .find(|p| p.second as usize >= rows.len() || p.first as usize >= rows.len())
    {
        return Err(Error::Contract(format!(
            "pair ({}, {}) references a record outside the manifest of {}",
            p.first,
            p.second,
            rows.len()
        )));
    }
    Ok(pairs
        .par_iter()
        .with_min_len(1024)
        .map(|p| store.dot(rows[p.first as usize], rows[p.second as usize]))
        .collect())
}

pub fn score_pairs(pairs: &[Pair], manifest: &Manifest, store: &EmbeddingStore) -> Result<ScoreDistribution> {
    Ok(ScoreDistribution::from_scores(&pair_scores(pairs, manifest, store)?))
}

/// Decidability index from exact moments:
/// `|mean_g - mean_i| / sqrt((var_g + var_i) / 2)`.
pub fn dprime(genuine: &ScoreDistribution, impostor: &ScoreDistribution) -> Result<f64> {
    if genuine.count < 2 || impostor.count < 2 {
        return Err(Error::Degenerate(format!(
            "d' needs at least 2 scores per distribution (have {} and {})",
            genuine.count, impostor.count
        )));
    }
    let pooled = (genuine.variance().unwrap() + impostor.variance().unwrap()) / 2.0;
    if !(pooled > 0.0) {
        return Err(Error::Degenerate("zero pooled variance".into()));
    }
    Ok((genuine.mean - impostor.mean).abs() / pooled.sqrt())
}

pub fn delta_dprime(d_male: f64, d_female: f64) -> f64 {
    (d_male - d_female).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    ReferenceGroup,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub target_fmr: f64,
    pub achieved_fmr: f64,
    pub n_impostor: usize,
    pub source: ThresholdSource,
}

/// Slack against products like `1e-5 * 1e6` landing a hair below an integer.
const RATE_SLACK: f64 = 1e-9;

/// Number of impostor scores needed before `rate` can be resolved.
pub fn required_impostors(rate: f64) -> usize {
    (1.0 / rate - RATE_SLACK).ceil() as usize
}

/// Threshold at the k-th largest impostor score, `k = max(1, floor(rate * n))`.
/// Ties can push the achieved FMR above the target; it is reported as is.
pub fn fmr_threshold(impostor_scores: &[f64], rate: f64) -> Result<ThresholdResult> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Contract(format!("FMR target {rate} outside (0, 1]")));
    }
    let n = impostor_scores.len();
    let need = required_impostors(rate);
    if n < need || n == 0 {
        return Err(Error::Contract(format!(
            "FMR {rate} is unresolvable with {n} impostor scores; need at least {need}"
        )));
    }
    if impostor_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Contract("impostor scores must be finite".into()));
    }
    let k = ((rate * n as f64 + RATE_SLACK).floor() as usize).clamp(1, n);
    let mut work = impostor_scores.to_vec();
    let (_, kth, _) = work.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    let threshold = *kth;
    Ok(ThresholdResult {
        threshold,
        target_fmr: rate,
        achieved_fmr: fmr_at(threshold, impostor_scores),
        n_impostor: n,
        source: ThresholdSource::Global,
    })
}

fn rate_at_or_above(threshold: f64, scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s >= threshold).count() as f64 / scores.len() as f64
}

/// Fraction of impostor scores `>= threshold`; 0 for an empty set (the
/// disparity report flags that case with `n_impostor = 0`).
pub fn fmr_at(threshold: f64, impostor: &[f64]) -> f64 {
    rate_at_or_above(threshold, impostor)
}

/// Fraction of genuine scores `>= threshold`.
pub fn tpr_at(threshold: f64, genuine: &[f64]) -> f64 {
    rate_at_or_above(threshold, genuine)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "group", rename_all = "snake_case")]
pub enum ThresholdScope {
    ReferenceGroup(DemographicGroup),
    Global,
}

impl std::str::FromStr for ThresholdScope {
    type Err = Error;

    /// `global` or `reference:<GROUP>`.
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("global") {
            return Ok(ThresholdScope::Global);
        }
        match s.split_once(':') {
            Some((kind, group)) if kind.eq_ignore_ascii_case("reference") => {
                Ok(ThresholdScope::ReferenceGroup(group.parse()?))
            }
            _ => Err(Error::Config(format!(
                "threshold scope {s:?} is neither `global` nor `reference:<GROUP>`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityConfig {
    pub fmr_rate: f64,
    pub threshold_scope: ThresholdScope,
    pub impostor_cap: usize,
    pub seed: u64,
}

impl Default for DisparityConfig {
    fn default() -> Self {
        DisparityConfig {
            fmr_rate: 1e-4,
            threshold_scope: ThresholdScope::ReferenceGroup(DemographicGroup::new(Race::White, Gender::Male)),
            impostor_cap: DEFAULT_IMPOSTOR_CAP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMetrics {
    pub group: DemographicGroup,
    pub n_ids: usize,
    pub n_images: usize,
    pub n_genuine: usize,
    pub n_impostor: usize,
    /// `None` when either distribution is degenerate.
    pub dprime: Option<f64>,
    pub fmr: f64,
    pub tpr: f64,
    pub genuine: ScoreDistribution,
    pub impostor: ScoreDistribution,
}

/// Gender gap within one race. `genuine_gap` and `impostor_gap` are d′ between
/// the male and female distributions of that kind; `separation_gap` is
/// `|d′_male - d′_female|` of the per-group genuine-vs-impostor d′.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RaceGap {
    pub race: Race,
    pub genuine_gap: Option<f64>,
    pub impostor_gap: Option<f64>,
    pub separation_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisparityReport {
    pub config: DisparityConfig,
    pub threshold: ThresholdResult,
    pub groups: Vec<GroupMetrics>,
    pub race_gaps: Vec<RaceGap>,
    pub notes: Vec<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl DisparityReport {
    pub fn group(&self, g: DemographicGroup) -> Option<&GroupMetrics> {
        self.groups.iter().find(|m| m.group == g)
    }

    pub fn groups_csv(&self) -> String {
        let mut out = String::from("group,n_ids,n_images,n_genuine,n_impostor,dprime,fmr,tpr\n");
        for g in &self.groups {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                g.group,
                g.n_ids,
                g.n_images,
                g.n_genuine,
                g.n_impostor,
                fmt_opt(g.dprime),
                g.fmr,
                g.tpr
            ));
        }
        out
    }

    pub fn race_gaps_csv(&self) -> String {
        let mut out = String::from("race,genuine_delta_dprime,impostor_delta_dprime,separation_delta_dprime\n");
        for r in &self.race_gaps {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.race,
                fmt_opt(r.genuine_gap),
                fmt_opt(r.impostor_gap),
                fmt_opt(r.separation_gap)
            ));
        }
        out.push_str("# gaps are absolute values\n");
        out
    }
}

struct GroupScores {
    metrics_base: (DemographicGroup, usize, usize),
    genuine: Vec<f64>,
    impostor: Vec<f64>,
}

/// Per-group d′, FMR and TPR at one shared threshold, plus per-race gender gaps.
pub fn disparity_report(
    manifest: &Manifest,
    store: &EmbeddingStore,
    cfg: &DisparityConfig,
) -> Result<DisparityReport> {
    let groups = manifest.groups();
    let mut scored = Vec::with_capacity(groups.len());
    for (group, positions) in &groups {
        let ids: HashSet<&str> = positions
            .iter()
            .map(|&i| manifest.records[i].identity_id.as_str())
            .collect();
        if ids.len() < 2 {
            return Err(Error::Shortfall {
                context: format!("group {group} identities"),
                need: 2,
                have: ids.len(),
            });
        }
        let genuine = pair_scores(&genuine_pairs_among(manifest, positions), manifest, store)?;
        let imp_pairs = impostor_pairs_among(
            manifest,
            positions,
            cfg.impostor_cap,
            cfg.seed,
            &ImpostorScope::WithinGroup(*group).tag(),
        )?;
        let impostor = pair_scores(&imp_pairs, manifest, store)?;
        scored.push(GroupScores {
            metrics_base: (*group, ids.len(), positions.len()),
            genuine,
            impostor,
        });
    }

    let mut notes = vec![
        "d' = |mean_gen - mean_imp| / sqrt((var_gen + var_imp) / 2) over exact moments".to_string(),
        "a pair matches when its score is >= the threshold".to_string(),
    ];
    let threshold = match cfg.threshold_scope {
        ThresholdScope::ReferenceGroup(g) => {
            let s = scored
                .iter()
                .find(|s| s.metrics_base.0 == g)
                .ok_or_else(|| Error::Contract(format!("reference group {g} is absent from the manifest")))?;
            notes.push(format!("threshold from {g} within-group impostor scores"));
            ThresholdResult {
                source: ThresholdSource::ReferenceGroup,
                ..fmr_threshold(&s.impostor, cfg.fmr_rate)?
            }
        }
        ThresholdScope::Global => {
            let pairs = sample_impostor_pairs(manifest, ImpostorScope::Global, cfg.impostor_cap, cfg.seed)?;
            notes.push(format!("threshold from {} global impostor scores", pairs.len()));
            fmr_threshold(&pair_scores(&pairs, manifest, store)?, cfg.fmr_rate)?
        }
    };

    let metrics: Vec<GroupMetrics> = scored
        .iter()
        .map(|s| {
            let (group, n_ids, n_images) = s.metrics_base;
            let genuine = ScoreDistribution::from_scores(&s.genuine);
            let impostor = ScoreDistribution::from_scores(&s.impostor);
            GroupMetrics {
                group,
                n_ids,
                n_images,
                n_genuine: s.genuine.len(),
                n_impostor: s.impostor.len(),
                dprime: dprime(&genuine, &impostor).ok(),
                fmr: fmr_at(threshold.threshold, &s.impostor),
                tpr: tpr_at(threshold.threshold, &s.genuine),
                genuine,
                impostor,
            }
        })
        .collect();
    for m in &metrics {
        if m.n_genuine == 0 {
            notes.push(format!("{}: no genuine pairs, TPR reported as 0", m.group));
        }
    }

    let mut race_gaps = Vec::new();
    for race in Race::ALL {
        let find = |gender| metrics.iter().find(|m| m.group == DemographicGroup::new(race, gender));
        if let (Some(male), Some(female)) = (find(Gender::Male), find(Gender::Female)) {
            race_gaps.push(RaceGap {
                race,
                genuine_gap: dprime(&male.genuine, &female.genuine).ok(),
                impostor_gap: dprime(&male.impostor, &female.impostor).ok(),
                separation_gap: match (male.dprime, female.dprime) {
                    (Some(a), Some(b)) => Some(delta_dprime(a, b)),
                    _ => None,
                },
            });
        }
    }
    if !race_gaps.is_empty() {
        notes.push("separation_gap is unsigned: |d'_male - d'_female|".into());
    }

    Ok(DisparityReport {
        config: cfg.clone(),
        threshold,
        groups: metrics,
        race_gaps,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{AgeGroup, ImageRecord};

    fn manifest_of(ids: &[(&str, usize)]) -> Manifest {
        let mut recs = Vec::new();
        for (id, n) in ids {
            for k in 0..*n {
                let idx = recs.len() as u64;
                recs.push(ImageRecord::new(
                    format!("{id}_{k}"),
                    *id,
                    Race::White,
                    Gender::Male,
                    AgeGroup::Young,
                    idx,
                ));
            }
        }
        Manifest::new(recs, "t")
    }

    #[test]
    fn genuine_pair_counts() {
        assert_eq!(enumerate_genuine_pairs(&manifest_of(&[("a", 4)])).len(), 6);
        assert_eq!(enumerate_genuine_pairs(&manifest_of(&[("a", 1)])).len(), 0);
        let pairs = enumerate_genuine_pairs(&manifest_of(&[("b", 3), ("a", 3)]));
        assert_eq!(pairs.len(), 6);
        // identity "a" (positions 3..6) comes first
        assert_eq!(pairs[0], Pair::new(3, 4));
    }

    #[test]
    fn impostor_exhaustive_and_deterministic() {
        let m = manifest_of(&[("a", 1), ("b", 1)]);
        let pairs = sample_impostor_pairs(&m, ImpostorScope::Global, 10, 1).unwrap();
        assert_eq!(pairs, vec![Pair::new(0, 1)]);

        let m = manifest_of(&[("a", 30), ("b", 30), ("c", 30)]);
        let p1 = sample_impostor_pairs(&m, ImpostorScope::Global, 500, 9).unwrap();
        let p2 = sample_impostor_pairs(&m, ImpostorScope::Global, 500, 9).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.len(), 500);
        let distinct: HashSet<Pair> = p1.iter().copied().collect();
        assert_eq!(distinct.len(), 500);
        assert!(p1
            .iter()
            .all(|p| m.records[p.first as usize].identity_id != m.records[p.second as usize].identity_id));
        let p3 = sample_impostor_pairs(&m, ImpostorScope::Global, 500, 10).unwrap();
        assert_ne!(p1, p3);
    }

    #[test]
    fn impostor_needs_two_identities() {
        let m = manifest_of(&[("a", 5)]);
        assert!(matches!(
            sample_impostor_pairs(&m, ImpostorScope::Global, 10, 0),
            Err(Error::Contract(_))
        ));
        let g = DemographicGroup::new(Race::Asian, Gender::Female);
        assert!(sample_impostor_pairs(&manifest_of(&[("a", 2), ("b", 2)]), ImpostorScope::WithinGroup(g), 3, 0).is_err());
    }

    #[test]
    fn scoring_identical_and_orthogonal() {
        let m = manifest_of(&[("a", 1), ("b", 1), ("c", 1)]);
        let store = EmbeddingStore::from_rows(2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = score_pairs(&[Pair::new(0, 1)], &m, &store).unwrap();
        assert_eq!(d.count, 1);
        assert_eq!(d.bins[HIST_BINS - 1], 1);
        assert_eq!(d.mean(), Some(1.0));
        let s = pair_scores(&[Pair::new(0, 2)], &m, &store).unwrap();
        assert_eq!(s, vec![0.0]);
        assert!(matches!(
            pair_scores(&[Pair::new(0, 7)], &m, &store),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dprime_cases() {
        let mut a = ScoreDistribution::new();
        for s in [0.1, 0.2, 0.3] {
            a.push(s);
        }
        assert_eq!(dprime(&a, &a).unwrap(), 0.0);
        let mut one = ScoreDistribution::new();
        one.push(0.5);
        assert!(matches!(dprime(&one, &a), Err(Error::Degenerate(_))));
        let mut flat = ScoreDistribution::new();
        flat.push(0.5);
        flat.push(0.5);
        assert!(dprime(&flat, &flat).is_err());
        assert_eq!(delta_dprime(0.5, 0.5), 0.0);
        assert!((delta_dprime(1.2, 0.9) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn threshold_examples() {
        let scores: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let t = fmr_threshold(&scores, 0.2).unwrap();
        assert_eq!(t.threshold, 0.8);
        assert_eq!(t.achieved_fmr, 0.2);

        let t = fmr_threshold(&scores, 1.0).unwrap();
        assert_eq!(t.threshold, 0.0);
        assert_eq!(t.achieved_fmr, 1.0);

        let t = fmr_threshold(&[0.4; 5], 0.2).unwrap();
        assert_eq!(t.threshold, 0.4);
        assert_eq!(t.achieved_fmr, 1.0);

        let err = fmr_threshold(&scores, 0.01).unwrap_err().to_string();
        assert!(err.contains("need at least 100"), "{err}");
        assert!(fmr_threshold(&scores, 0.0).is_err());
    }

    #[test]
    fn rates_at_threshold() {
        let imp = [0.1, 0.2, 0.3];
        assert_eq!(fmr_at(0.31, &imp), 0.0);
        assert_eq!(fmr_at(0.1, &imp), 1.0);
        assert_eq!(fmr_at(0.5, &[]), 0.0);
        let gen = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(tpr_at(0.5, &gen), 0.5);
        assert_eq!(tpr_at(0.0, &gen), 1.0);
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(ScoreDistribution::bin_index(-1.0), 0);
        assert_eq!(ScoreDistribution::bin_index(-1.5), 0);
        assert_eq!(ScoreDistribution::bin_index(1.0), HIST_BINS - 1);
        assert_eq!(ScoreDistribution::bin_index(1.0000001), HIST_BINS - 1);
        assert_eq!(ScoreDistribution::bin_index(0.0), 1000);
        assert!((ScoreDistribution::bin_center(0) + 0.9995).abs() < 1e-12);
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("global".parse::<ThresholdScope>().unwrap(), ThresholdScope::Global);
        assert_eq!(
            "reference:WM".parse::<ThresholdScope>().unwrap(),
            ThresholdScope::ReferenceGroup(DemographicGroup::new(Race::White, Gender::Male))
        );
        assert!("reference:XX".parse::<ThresholdScope>().is_err());
        assert!("wm".parse::<ThresholdScope>().is_err());
    }
}
