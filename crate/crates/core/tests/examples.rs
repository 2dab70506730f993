use std::collections::BTreeSet;

use fairbench::consensus::apply_consensus;
use fairbench::denoise::{denoise_manifest, DenoiseConfig};
use fairbench::evaluation::{
    disparity_report, enumerate_genuine_pairs, score_pairs, DisparityConfig, ScoreDistribution,
};
use fairbench::filters::{filter_manifest, GateConfig, RejectReason};
use fairbench::protocols::ks_distance;
use fairbench::records::{DemographicGroup, Gender, Manifest};
use fairbench::synthcohort::{generate, CohortSpec, GroupSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn g(code: &str) -> DemographicGroup {
    code.parse().unwrap()
}

fn group(code: &str, n_ids: usize, imgs_per_id: usize, within_sigma: f64) -> GroupSpec {
    GroupSpec {
        group: g(code),
        n_ids,
        imgs_per_id,
        within_sigma,
    }
}

#[test]
fn identical_groups_have_matching_tpr() {
    let spec = CohortSpec::new(11, vec![group("WM", 400, 12, 0.11), group("WF", 400, 12, 0.11)]);
    let c = generate(&spec).unwrap();
    let cfg = DisparityConfig {
        impostor_cap: 1_000_000,
        ..DisparityConfig::default()
    };
    let report = disparity_report(&c.manifest, &c.store, &cfg).unwrap();
    let (m, f) = (report.group(g("WM")).unwrap(), report.group(g("WF")).unwrap());
    assert!(m.tpr > 0.05 && m.tpr < 0.995, "uninformative tpr {}", m.tpr);
    assert!((m.tpr - f.tpr).abs() < 0.01, "{} vs {}", m.tpr, f.tpr);

    let ks = ks_distance(&m.genuine, &f.genuine).unwrap();
    assert!(ks < 0.05, "genuine KS {ks}");
}

#[test]
fn doubled_spread_gives_lowest_tpr() {
    let spec = CohortSpec::new(
        12,
        vec![group("WM", 120, 8, 0.08), group("BM", 120, 8, 0.08), group("AF", 120, 8, 0.16)],
    );
    let c = generate(&spec).unwrap();
    let report = disparity_report(&c.manifest, &c.store, &DisparityConfig::default()).unwrap();
    let af = report.group(g("AF")).unwrap().tpr;
    for other in ["WM", "BM"] {
        assert!(af < report.group(g(other)).unwrap().tpr, "AF {af} vs {other}");
    }
}

#[test]
fn single_group_has_no_gender_gaps() {
    let c = generate(&CohortSpec::uniform(13, &[g("WM")], 60, 5, 0.08)).unwrap();
    let report = disparity_report(&c.manifest, &c.store, &DisparityConfig::default()).unwrap();
    assert_eq!(report.groups.len(), 1);
    assert!(report.race_gaps.iter().all(|r| r.genuine_gap.is_none() && r.separation_gap.is_none()));
}

#[test]
fn thirty_percent_wide_yaw_is_counted() {
    let mut m = generate(&CohortSpec::uniform(14, &[g("IF"), g("IM")], 50, 20, 0.05))
        .unwrap()
        .manifest;
    let n = m.len();
    for (i, r) in m.records.iter_mut().enumerate() {
        if i % 10 < 3 {
            r.yaw = Some(45.0);
        }
    }
    let out = filter_manifest(&m, &GateConfig::default()).unwrap();
    assert_eq!(out.stats.reason_count(RejectReason::Pose), n * 3 / 10);
    assert_eq!(out.stats.rejected, n * 3 / 10);
    assert_eq!(out.kept.len(), n - n * 3 / 10);
}

#[test]
fn gender_flips_are_voted_away() {
    let mut spec = CohortSpec::uniform(15, &[g("BF"), g("BM")], 80, 10, 0.05);
    spec.gender_flip_rate = 0.05;
    let c = generate(&spec).unwrap();
    let flipped = c.truth.records.iter().filter(|t| t.label_flipped).count();
    assert!(flipped > 0);

    let out = apply_consensus(&c.manifest).unwrap();
    let truth: std::collections::HashMap<&str, DemographicGroup> =
        c.truth.records.iter().map(|t| (t.image_id.as_str(), t.true_group)).collect();
    for (_, pos) in out.manifest.identities() {
        let genders: BTreeSet<Gender> = pos.iter().map(|&i| out.manifest.records[i].gender).collect();
        assert_eq!(genders.len(), 1);
    }
    let wrong = out
        .manifest
        .records
        .iter()
        .filter(|r| truth[r.image_id.as_str()] != r.group())
        .count();
    assert_eq!(wrong, 0);
}

#[test]
fn same_population_samples_are_close() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let normal = Normal::new(0.2, 0.1).unwrap();
    let mut draw = || -> ScoreDistribution {
        let s: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        ScoreDistribution::from_scores(&s)
    };
    let (a, b) = (draw(), draw());
    assert!(ks_distance(&a, &b).unwrap() < 0.05);
}

/// Relabels some images of `donor` as belonging to `host`.
fn relabel(m: &mut Manifest, donor: &str, host: &str, how_many: usize) -> Vec<String> {
    let mut moved = Vec::new();
    for r in m.records.iter_mut().filter(|r| r.identity_id == donor).take(how_many) {
        r.identity_id = host.to_string();
        moved.push(r.image_id.clone());
    }
    moved
}

#[test]
fn injected_images_are_dropped() {
    let c = generate(&CohortSpec::uniform(17, &[g("WM")], 4, 12, 0.05)).unwrap();
    let ids: Vec<String> = c.manifest.identities().keys().map(|s| s.to_string()).collect();
    let mut m = c.manifest.clone();
    let moved = relabel(&mut m, &ids[1], &ids[0], 2);

    let out = denoise_manifest(&m, &c.store, &DenoiseConfig::default()).unwrap();
    let dropped: BTreeSet<String> = out.dropped.iter().map(|d| d.image_id.clone()).collect();
    assert_eq!(dropped, moved.into_iter().collect());
}

#[test]
fn equal_clusters_keep_exactly_one() {
    let c = generate(&CohortSpec::uniform(18, &[g("AM")], 3, 6, 0.05)).unwrap();
    let ids: Vec<String> = c.manifest.identities().keys().map(|s| s.to_string()).collect();
    let mut m = c.manifest.clone();
    relabel(&mut m, &ids[1], &ids[0], 6);

    let out = denoise_manifest(&m, &c.store, &DenoiseConfig::default()).unwrap();
    let kept = out.kept.identities();
    let host = &kept[ids[0].as_str()];
    assert_eq!(host.len(), 6);
    let truth: std::collections::HashMap<&str, &str> = c
        .truth
        .records
        .iter()
        .map(|t| (t.image_id.as_str(), t.true_identity.as_str()))
        .collect();
    let sources: BTreeSet<&str> = host.iter().map(|&i| truth[out.kept.records[i].image_id.as_str()]).collect();
    assert_eq!(sources.len(), 1);
}

#[test]
fn scored_mean_matches_naive_loop() {
    let c = generate(&CohortSpec::uniform(19, &[g("IF")], 20, 6, 0.1)).unwrap();
    let pairs = enumerate_genuine_pairs(&c.manifest);
    let d = score_pairs(&pairs, &c.manifest, &c.store).unwrap();
    let mut total = 0.0;
    for p in &pairs {
        let a = c.store.vector(c.manifest.records[p.first as usize].embedding_index as usize);
        let b = c.store.vector(c.manifest.records[p.second as usize].embedding_index as usize);
        total += a.iter().zip(&b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum::<f64>();
    }
    let naive = total / pairs.len() as f64;
    assert_eq!(d.count as usize, pairs.len());
    assert!((d.mean().unwrap() - naive).abs() < 1e-6);
}
