//! Experiment recipes: identity/image-count subsampling, quality-driven
//! benchmark assembly, and distribution comparison.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{ScoreDistribution, HIST_BINS};
use crate::records::{DemographicGroup, Manifest};
use crate::seeding::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub n_ids: usize,
    pub imgs_per_id: usize,
    pub group: DemographicGroup,
    pub seed: u64,
}

impl SubsampleSpec {
    /// Label in the `AF-200-15` style.
    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.group, self.n_ids, self.imgs_per_id)
    }
}

/// Picks `n_ids` identities of the group (among those with enough images),
/// then `imgs_per_id` images of each. Output keeps manifest order.
pub fn subsample(manifest: &Manifest, spec: &SubsampleSpec) -> Result<Manifest> {
    if spec.n_ids == 0 || spec.imgs_per_id == 0 {
        return Err(Error::Config("n_ids and imgs_per_id must be at least 1".into()));
    }
    let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if r.group() == spec.group {
            by_id.entry(r.identity_id.as_str()).or_default().push(i);
        }
    }
    let eligible: Vec<&Vec<usize>> = by_id.values().filter(|v| v.len() >= spec.imgs_per_id).collect();
    if eligible.len() < spec.n_ids {
        return Err(Error::Shortfall {
            context: format!(
                "{} identities with at least {} images",
                spec.group, spec.imgs_per_id
            ),
            need: spec.n_ids,
            have: eligible.len(),
        });
    }
    let mut rng = stream_rng(spec.seed, &format!("subsample/{}", spec.label()));
    let mut chosen = index::sample(&mut rng, eligible.len(), spec.n_ids).into_vec();
    chosen.sort_unstable();
    let mut keep = Vec::with_capacity(spec.n_ids * spec.imgs_per_id);
    for c in chosen {
        let images = eligible[c];
        let picks = index::sample(&mut rng, images.len(), spec.imgs_per_id);
        keep.extend(picks.into_iter().map(|k| images[k]));
    }
    keep.sort_unstable();
    let mut out = manifest.select(&keep);
    out.note(format!(
        "subsample group={} n_ids={} imgs_per_id={} seed={}",
        spec.group, spec.n_ids, spec.imgs_per_id, spec.seed
    ));
    Ok(out)
}

/// Largest CDF gap over histogram bin edges.
pub fn ks_distance(a: &ScoreDistribution, b: &ScoreDistribution) -> Result<f64> {
    if a.count == 0 || b.count == 0 {
        return Err(Error::Degenerate("KS distance of an empty distribution".into()));
    }
    let (mut ca, mut cb) = (0u64, 0u64);
    let mut best: f64 = 0.0;
    for i in 0..HIST_BINS {
        ca += a.bins[i];
        cb += b.bins[i];
        let gap = (ca as f64 / a.count as f64 - cb as f64 / b.count as f64).abs();
        best = best.max(gap);
    }
    Ok(best)
}

pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Degenerate("min-max normalization needs at least 2 values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("min-max normalization of non-finite values".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Err(Error::Degenerate(format!("zero range: every value is {lo}")));
    }
    Ok(values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    #[default]
    Mean,
    Min,
    Product,
}

pub fn aggregate_quality(qf_norm: f64, qm_norm: f64, rule: AggregationRule) -> f64 {
    match rule {
        AggregationRule::Mean => (qf_norm + qm_norm) / 2.0,
        AggregationRule::Min => qf_norm.min(qm_norm),
        AggregationRule::Product => qf_norm * qm_norm,
    }
}

/// Element at `floor((n - 1) / 2)` of the sorted values.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub subjects_per_group: usize,
    pub images_per_subject: usize,
    pub rule: AggregationRule,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn new(seed: u64) -> Self {
        BenchmarkSpec {
            subjects_per_group: 90,
            images_per_subject: 5,
            rule: AggregationRule::Mean,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSelection {
    pub group: DemographicGroup,
    pub q50: f64,
    pub n_images: usize,
    pub n_subjects: usize,
    pub n_eligible: usize,
    pub selected_subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkManifest {
    /// Selected records with `q_norm_faceqnet`, `q_norm_magface`,
    /// `q_aggregate` and `group_q50` added as extra keys.
    pub manifest: Manifest,
    pub groups: Vec<GroupSelection>,
    pub spec: BenchmarkSpec,
}

/// Quality-driven benchmark: per group, subjects with enough images strictly
/// below the group's median aggregated quality, a seeded pick of subjects, and
/// a seeded pick of those low-quality images per subject.
pub fn build_benchmark(manifest: &Manifest, spec: &BenchmarkSpec) -> Result<BenchmarkManifest> {
    if spec.subjects_per_group == 0 || spec.images_per_subject == 0 {
        return Err(Error::Config("benchmark shape must be positive".into()));
    }
    let mut qf = Vec::with_capacity(manifest.len());
    let mut qm = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        match (r.q_faceqnet, r.q_magface) {
            (Some(f), Some(m)) => {
                qf.push(f);
                qm.push(m);
            }
            _ => {
                return Err(Error::Contract(format!(
                    "{}: benchmark assembly needs both quality scores",
                    r.image_id
                )))
            }
        }
    }
    let qf = minmax_normalize(&qf)?;
    let qm = minmax_normalize(&qm)?;
    let agg: Vec<f64> = qf
        .iter()
        .zip(&qm)
        .map(|(&f, &m)| aggregate_quality(f, m, spec.rule))
        .collect();

    let mut picked: Vec<(usize, f64)> = Vec::new();
    let mut groups = Vec::new();
    for (group, positions) in manifest.groups() {
        let q50 = lower_median(&positions.iter().map(|&i| agg[i]).collect::<Vec<_>>()).unwrap();
        let mut low_by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut n_subjects = std::collections::BTreeSet::new();
        for &i in &positions {
            let id = manifest.records[i].identity_id.as_str();
            n_subjects.insert(id);
            if agg[i] < q50 {
                low_by_id.entry(id).or_default().push(i);
            }
        }
        let eligible: Vec<(&str, &Vec<usize>)> = low_by_id
            .iter()
            .filter(|(_, v)| v.len() >= spec.images_per_subject)
            .map(|(k, v)| (*k, v))
            .collect();
        if eligible.len() < spec.subjects_per_group {
            return Err(Error::Shortfall {
                context: format!(
                    "group {group} subjects with {} images below Q50 {q50}",
                    spec.images_per_subject
                ),
                need: spec.subjects_per_group,
                have: eligible.len(),
            });
        }
        let mut rng = stream_rng(spec.seed, &format!("benchmark/{group}"));
        let mut chosen = index::sample(&mut rng, eligible.len(), spec.subjects_per_group).into_vec();
        chosen.sort_unstable();
        let mut selected_subjects = Vec::with_capacity(chosen.len());
        for c in chosen {
            let (id, images) = eligible[c];
            selected_subjects.push(id.to_string());
            let mut take = index::sample(&mut rng, images.len(), spec.images_per_subject).into_vec();
            take.sort_unstable();
            picked.extend(take.into_iter().map(|k| (images[k], q50)));
        }
        groups.push(GroupSelection {
            group,
            q50,
            n_images: positions.len(),
            n_subjects: n_subjects.len(),
            n_eligible: eligible.len(),
            selected_subjects,
        });
    }
    picked.sort_by_key(|(i, _)| *i);

    let records = picked
        .iter()
        .map(|&(i, q50)| {
            let mut r = manifest.records[i].clone();
            r.extra.insert("q_norm_faceqnet".into(), qf[i].into());
            r.extra.insert("q_norm_magface".into(), qm[i].into());
            r.extra.insert("q_aggregate".into(), agg[i].into());
            r.extra.insert("group_q50".into(), q50.into());
            r
        })
        .collect();
    let mut out = Manifest::new(records, manifest.provenance.clone());
    out.note(format!(
        "benchmark seed={} subjects_per_group={} images_per_subject={} aggregation={:?} q50=per-group lower median, selection strictly below",
        spec.seed, spec.subjects_per_group, spec.images_per_subject, spec.rule
    ));
    for g in &groups {
        out.note(format!(
            "benchmark group={} q50={} images={} subjects={} eligible={}",
            g.group, g.q50, g.n_images, g.n_subjects, g.n_eligible
        ));
    }
    Ok(BenchmarkManifest {
        manifest: out,
        groups,
        spec: *spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{AgeGroup, Gender, ImageRecord, Race};

    fn group_manifest(ids: usize, imgs: usize) -> Manifest {
        let mut recs = Vec::new();
        for p in 0..ids {
            for k in 0..imgs {
                let n = recs.len() as u64;
                recs.push(ImageRecord::new(
                    format!("p{p}_{k}"),
                    format!("p{p}"),
                    Race::Asian,
                    Gender::Female,
                    AgeGroup::Young,
                    n,
                ));
            }
        }
        Manifest::new(recs, "t")
    }

    fn af() -> DemographicGroup {
        "AF".parse().unwrap()
    }

    #[test]
    fn subsample_examples() {
        let m = group_manifest(3, 2);
        let spec = SubsampleSpec {
            n_ids: 2,
            imgs_per_id: 1,
            group: af(),
            seed: 5,
        };
        let out = subsample(&m, &spec).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out, subsample(&m, &spec).unwrap());
        assert_eq!(spec.label(), "AF-2-1");

        let big = SubsampleSpec {
            n_ids: 200,
            imgs_per_id: 15,
            group: af(),
            seed: 1,
        };
        let err = subsample(&group_manifest(100, 15), &big).unwrap_err().to_string();
        assert!(err.contains("need 200 have 100"), "{err}");
    }

    #[test]
    fn ks_cases() {
        let mut a = ScoreDistribution::new();
        a.push(-1.0);
        let mut b = ScoreDistribution::new();
        b.push(1.0);
        assert_eq!(ks_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_distance(&a, &b).unwrap(), 1.0);
        assert!(ks_distance(&a, &ScoreDistribution::new()).is_err());
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_normalize(&[0.0, 5.0, 10.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[20.0, 40.0]).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(minmax_normalize(&[3.0, 3.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(minmax_normalize(&[1.0]).is_err());
    }

    #[test]
    fn aggregation_cases() {
        assert_eq!(aggregate_quality(0.0, 0.0, AggregationRule::Mean), 0.0);
        assert_eq!(aggregate_quality(1.0, 0.0, AggregationRule::Mean), 0.5);
        assert_eq!(aggregate_quality(0.3, 0.7, AggregationRule::Mean), 0.5);
        assert_eq!(aggregate_quality(0.3, 0.7, AggregationRule::Min), 0.3);
        assert!((aggregate_quality(0.3, 0.7, AggregationRule::Product) - 0.21).abs() < 1e-12);
    }

    #[test]
    fn lower_median_convention() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert_eq!(lower_median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(lower_median(&[]), None);
    }

    #[test]
    fn benchmark_shortfall() {
        let mut m = group_manifest(50, 12);
        for (i, r) in m.records.iter_mut().enumerate() {
            r.q_faceqnet = Some((i % 12) as f64 / 12.0);
            r.q_magface = Some(20.0 + (i % 12) as f64);
        }
        let err = build_benchmark(&m, &BenchmarkSpec::new(1)).unwrap_err().to_string();
        assert!(err.contains("need 90 have 50"), "{err}");
        let spec = BenchmarkSpec {
            subjects_per_group: 10,
            ..BenchmarkSpec::new(1)
        };
        let out = build_benchmark(&m, &spec).unwrap();
        assert_eq!(out.manifest.len(), 50);
        let q50 = out.groups[0].q50;
        for r in &out.manifest.records {
            assert!(r.extra["q_aggregate"].as_f64().unwrap() < q50);
        }
    }
}
