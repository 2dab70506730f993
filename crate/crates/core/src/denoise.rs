//! Identity denoising by density clustering of embeddings inside each identity.
//!
//! Clustering is DBSCAN over cosine distance with two determinism rules:
//! clusters are numbered by their lowest-index core point, and a border point
//! reachable from several clusters joins the cluster of its lowest-index core
//! neighbour.

use std::collections::{BTreeSet, HashSet, VecDeque};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{genuine_pairs_among, pair_scores, ScoreDistribution};
use crate::records::{EmbeddingStore, ImageRecord, Manifest};
use crate::seeding::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepPolicy {
    DropNoiseOnly,
    KeepLargestCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub eps: f64,
    pub min_pts: usize,
    pub keep_policy: KeepPolicy,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            eps: 0.65,
            min_pts: 3,
            keep_policy: KeepPolicy::KeepLargestCluster,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 2.0) {
            return Err(Error::Config(format!("eps {} outside (0, 2]", self.eps)));
        }
        if self.min_pts == 0 {
            return Err(Error::Config("min_pts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ClusterLabel {
    Cluster(usize),
    Noise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterAssignment {
    pub labels: Vec<ClusterLabel>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == ClusterLabel::Cluster(cluster))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn noise(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == ClusterLabel::Noise)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "cosine distance between dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    Ok((1.0 - dot).clamp(0.0, 2.0))
}

/// DBSCAN; a point is core when at least `min_pts` points (itself included)
/// lie within `eps`.
pub fn dbscan<V: AsRef<[f32]> + Sync>(points: &[V], cfg: &DenoiseConfig) -> Result<ClusterAssignment> {
    cfg.validate()?;
    let n = points.len();
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != points[0].as_ref().len()) {
        return Err(Error::Contract(format!(
            "mixed embedding dims {} and {}",
            points[0].as_ref().len(),
            p.as_ref().len()
        )));
    }
    // ascending neighbour lists, self included
    let neighbours: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    i == j
                        || cosine_distance(points[i].as_ref(), points[j].as_ref()).unwrap() <= cfg.eps
                })
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= cfg.min_pts).collect();

    let mut labels = vec![None; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !core[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(next);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if core[q] && labels[q].is_none() {
                    labels[q] = Some(next);
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    let labels = (0..n)
        .map(|i| {
            if core[i] {
                return ClusterLabel::Cluster(labels[i].unwrap());
            }
            match neighbours[i].iter().find(|&&j| core[j]) {
                Some(&j) => ClusterLabel::Cluster(labels[j].unwrap()),
                None => ClusterLabel::Noise,
            }
        })
        .collect();
    Ok(ClusterAssignment {
        labels,
        n_clusters: next,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    DbscanNoise,
    MinorCluster,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::DbscanNoise => "dbscan_noise",
            DropReason::MinorCluster => "minor_cluster",
        }
    }
}

/// Positions into the records passed to [`denoise_identity`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentitySplit {
    pub kept: Vec<usize>,
    pub dropped: Vec<(usize, DropReason)>,
}

fn mean_pairwise_similarity(vectors: &[Vec<f32>], members: &[usize]) -> f64 {
    if members.len() < 2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            sum += 1.0 - cosine_distance(&vectors[i], &vectors[j]).unwrap();
            n += 1;
        }
    }
    sum / n as f64
}

pub fn denoise_identity(
    records: &[&ImageRecord],
    store: &EmbeddingStore,
    cfg: &DenoiseConfig,
) -> Result<IdentitySplit> {
    if records.is_empty() {
        return Err(Error::Contract("denoise_identity needs at least one record".into()));
    }
    let vectors: Vec<Vec<f32>> = records
        .iter()
        .map(|r| {
            store.get(r.embedding_index as usize).ok_or_else(|| {
                Error::Contract(format!(
                    "{}: embedding_index {} outside store of {} rows",
                    r.image_id,
                    r.embedding_index,
                    store.count()
                ))
            })
        })
        .collect::<Result<_>>()?;
    let assignment = dbscan(&vectors, cfg)?;

    let keep_cluster = match cfg.keep_policy {
        KeepPolicy::DropNoiseOnly => None,
        KeepPolicy::KeepLargestCluster => (0..assignment.n_clusters)
            .map(|c| {
                let members = assignment.members(c);
                (c, members.len(), mean_pairwise_similarity(&vectors, &members))
            })
            // largest, then most cohesive, then lowest id
            .max_by(|a, b| a.1.cmp(&b.1).then(a.2.total_cmp(&b.2)).then(b.0.cmp(&a.0)))
            .map(|(c, _, _)| c),
    };

    let mut split = IdentitySplit {
        kept: Vec::new(),
        dropped: Vec::new(),
    };
    for (i, label) in assignment.labels.iter().enumerate() {
        match (label, keep_cluster) {
            (ClusterLabel::Noise, _) => split.dropped.push((i, DropReason::DbscanNoise)),
            (ClusterLabel::Cluster(c), Some(k)) if *c != k => {
                split.dropped.push((i, DropReason::MinorCluster))
            }
            _ => split.kept.push(i),
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DropEntry {
    pub image_id: String,
    pub identity_id: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone)]
pub struct DenoiseOutcome {
    pub kept: Manifest,
    /// Ordered by manifest position.
    pub dropped: Vec<DropEntry>,
}

impl DenoiseOutcome {
    /// One `image_id<TAB>reason` line per dropped image.
    pub fn drop_list(&self) -> String {
        self.dropped
            .iter()
            .map(|d| format!("{}\t{}\n", d.image_id, d.reason.as_str()))
            .collect()
    }
}

/// Denoises every identity independently (in parallel); kept records stay in
/// manifest order.
pub fn denoise_manifest(manifest: &Manifest, store: &EmbeddingStore, cfg: &DenoiseConfig) -> Result<DenoiseOutcome> {
    cfg.validate()?;
    let identities: Vec<Vec<usize>> = manifest.identities().into_values().collect();
    let splits: Vec<Vec<(usize, Option<DropReason>)>> = identities
        .par_iter()
        .map(|positions| {
            let recs: Vec<&ImageRecord> = positions.iter().map(|&i| &manifest.records[i]).collect();
            let split = denoise_identity(&recs, store, cfg)?;
            let mut out: Vec<(usize, Option<DropReason>)> =
                split.kept.iter().map(|&k| (positions[k], None)).collect();
            out.extend(split.dropped.iter().map(|&(k, r)| (positions[k], Some(r))));
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut verdict: Vec<Option<DropReason>> = vec![None; manifest.len()];
    for (pos, reason) in splits.into_iter().flatten() {
        verdict[pos] = reason;
    }
    let keep: Vec<usize> = (0..manifest.len()).filter(|&i| verdict[i].is_none()).collect();
    let dropped = verdict
        .iter()
        .enumerate()
        .filter_map(|(i, v)| {
            v.map(|reason| DropEntry {
                image_id: manifest.records[i].image_id.clone(),
                identity_id: manifest.records[i].identity_id.clone(),
                reason,
            })
        })
        .collect();
    Ok(DenoiseOutcome {
        kept: manifest.select(&keep),
        dropped,
    })
}

/// Keeps only records present (by image_id) in `other`; intersects the keep
/// sets of two denoising runs over different feature stores.
pub fn intersect_keep_sets(manifest: &Manifest, other: &Manifest) -> Manifest {
    let ids: HashSet<&str> = other.records.iter().map(|r| r.image_id.as_str()).collect();
    let keep: Vec<usize> = (0..manifest.len())
        .filter(|&i| ids.contains(manifest.records[i].image_id.as_str()))
        .collect();
    manifest.select(&keep)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionPair {
    pub identities: Vec<String>,
    pub before: ScoreDistribution,
    pub after: ScoreDistribution,
}

/// Genuine distributions of a seeded identity sample, before and after cleaning.
pub fn genuine_shift_report(
    before: &Manifest,
    after: &Manifest,
    store: &EmbeddingStore,
    sample_size: usize,
    seed: u64,
) -> Result<DistributionPair> {
    let before_ids: HashSet<&str> = before.records.iter().map(|r| r.image_id.as_str()).collect();
    if let Some(r) = after.records.iter().find(|r| !before_ids.contains(r.image_id.as_str())) {
        return Err(Error::Contract(format!(
            "{} is in the cleaned manifest but not the original",
            r.image_id
        )));
    }
    let all: Vec<&str> = before.identities().into_keys().collect();
    let take = sample_size.min(all.len());
    let mut rng = stream_rng(seed, "genuine-shift");
    let picked: BTreeSet<&str> = index::sample(&mut rng, all.len(), take)
        .into_iter()
        .map(|i| all[i])
        .collect();

    let distribution = |m: &Manifest| -> Result<ScoreDistribution> {
        let positions: Vec<usize> = (0..m.len())
            .filter(|&i| picked.contains(m.records[i].identity_id.as_str()))
            .collect();
        let pairs = genuine_pairs_among(m, &positions);
        Ok(ScoreDistribution::from_scores(&pair_scores(&pairs, m, store)?))
    };
    Ok(DistributionPair {
        identities: picked.iter().map(|s| s.to_string()).collect(),
        before: distribution(before)?,
        after: distribution(after)?,
    })
}
