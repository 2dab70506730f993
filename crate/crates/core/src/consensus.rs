//! Per-identity label voting and age-label disagreement reporting.
//!
//! Race and gender are identity-level: each identity gets the strict plurality
//! value of its images. Exact ties are not broken; the identity is marked
//! ambiguous and dropped. Age is an image-level label and is never touched.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::records::{AgeGroup, Gender, ImageRecord, Manifest, Race};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LabelVote<T> {
    Decided(T),
    Ambiguous,
}

impl<T: Copy> LabelVote<T> {
    pub fn decided(self) -> Option<T> {
        match self {
            LabelVote::Decided(v) => Some(v),
            LabelVote::Ambiguous => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IdentityLabelResult {
    pub identity_id: String,
    pub race: LabelVote<Race>,
    pub gender: LabelVote<Gender>,
    pub race_votes: BTreeMap<Race, usize>,
    pub gender_votes: BTreeMap<Gender, usize>,
    /// Records whose race or gender differs from the decided value.
    pub changed_records: usize,
}

impl IdentityLabelResult {
    pub fn is_ambiguous(&self) -> bool {
        matches!(self.race, LabelVote::Ambiguous) || matches!(self.gender, LabelVote::Ambiguous)
    }
}

fn plurality<T: Copy + Ord>(votes: &BTreeMap<T, usize>) -> LabelVote<T> {
    let best = votes.values().copied().max().unwrap_or(0);
    let mut winners = votes.iter().filter(|(_, &c)| c == best);
    match (winners.next(), winners.next()) {
        (Some((v, _)), None) => LabelVote::Decided(*v),
        _ => LabelVote::Ambiguous,
    }
}

pub fn vote_identity_labels(records: &[&ImageRecord]) -> Result<IdentityLabelResult> {
    let first = records
        .first()
        .ok_or_else(|| Error::Contract("cannot vote over zero records".into()))?;
    let identity_id = &first.identity_id;
    if let Some(other) = records.iter().find(|r| &r.identity_id != identity_id) {
        return Err(Error::Contract(format!(
            "mixed identities in one vote: {identity_id:?} and {:?}",
            other.identity_id
        )));
    }
    let mut race_votes = BTreeMap::new();
    let mut gender_votes = BTreeMap::new();
    for r in records {
        *race_votes.entry(r.race).or_default() += 1;
        *gender_votes.entry(r.gender).or_default() += 1;
    }
    let race = plurality(&race_votes);
    let gender = plurality(&gender_votes);
    let changed_records = records
        .iter()
        .filter(|r| {
            race.decided().is_some_and(|v| v != r.race)
                || gender.decided().is_some_and(|v| v != r.gender)
        })
        .count();
    Ok(IdentityLabelResult {
        identity_id: identity_id.clone(),
        race,
        gender,
        race_votes,
        gender_votes,
        changed_records,
    })
}

#[derive(Debug, Clone)]
pub struct ConsensusOutcome {
    pub manifest: Manifest,
    /// One entry per identity, ordered by identity_id.
    pub results: Vec<IdentityLabelResult>,
}

impl ConsensusOutcome {
    pub fn ambiguous(&self) -> impl Iterator<Item = &IdentityLabelResult> {
        self.results.iter().filter(|r| r.is_ambiguous())
    }

    pub fn results_csv(&self) -> String {
        let mut out = String::from("identity_id,race,gender,status,changed_records,race_votes,gender_votes\n");
        for r in &self.results {
            let show = |v: Option<String>| v.unwrap_or_else(|| "AMBIGUOUS".into());
            let votes = |m: Vec<(String, usize)>| {
                m.into_iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(";")
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.identity_id,
                show(r.race.decided().map(|v| v.to_string())),
                show(r.gender.decided().map(|v| v.to_string())),
                if r.is_ambiguous() { "excluded" } else { "kept" },
                r.changed_records,
                votes(r.race_votes.iter().map(|(k, v)| (k.to_string(), *v)).collect()),
                votes(r.gender_votes.iter().map(|(k, v)| (k.to_string(), *v)).collect()),
            ));
        }
        out
    }
}

/// Rewrites race and gender to each identity's consensus value and removes
/// ambiguous identities. Record order is preserved.
pub fn apply_consensus(manifest: &Manifest) -> Result<ConsensusOutcome> {
    let identities = manifest.identities();
    let groups: Vec<(&str, Vec<usize>)> = identities.into_iter().collect();
    let results: Vec<IdentityLabelResult> = groups
        .par_iter()
        .map(|(_, idx)| {
            let recs: Vec<&ImageRecord> = idx.iter().map(|&i| &manifest.records[i]).collect();
            vote_identity_labels(&recs)
        })
        .collect::<Result<_>>()?;

    let decided: BTreeMap<&str, (Race, Gender)> = results
        .iter()
        .filter_map(|r| Some((r.identity_id.as_str(), (r.race.decided()?, r.gender.decided()?))))
        .collect();
    let records = manifest
        .records
        .iter()
        .filter_map(|r| {
            let (race, gender) = decided.get(r.identity_id.as_str())?;
            let mut r = r.clone();
            r.race = *race;
            r.gender = *gender;
            Some(r)
        })
        .collect();
    Ok(ConsensusOutcome {
        manifest: Manifest::new(records, manifest.provenance.clone()),
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DisagreementMatrix {
    /// counts[a][b]: images labeled `a` by the first source and `b` by the second.
    pub counts: [[u64; 3]; 3],
    pub off_diagonal: u64,
    /// Largest off-diagonal cell, `None` when the sources fully agree.
    pub largest: Option<(AgeGroup, AgeGroup, u64)>,
}

impl DisagreementMatrix {
    pub fn get(&self, a: AgeGroup, b: AgeGroup) -> u64 {
        self.counts[a.index()][b.index()]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source_a\\source_b");
        for g in AgeGroup::ALL {
            out.push_str(&format!(",{g}"));
        }
        out.push('\n');
        for a in AgeGroup::ALL {
            out.push_str(&a.to_string());
            for b in AgeGroup::ALL {
                out.push_str(&format!(",{}", self.get(a, b)));
            }
            out.push('\n');
        }
        out
    }
}

/// Cross-tabulates two per-image age labelings over the same image set.
pub fn age_disagreement_report(
    labels_a: &BTreeMap<String, AgeGroup>,
    labels_b: &BTreeMap<String, AgeGroup>,
) -> Result<DisagreementMatrix> {
    let keys_a: BTreeSet<&String> = labels_a.keys().collect();
    let keys_b: BTreeSet<&String> = labels_b.keys().collect();
    if keys_a != keys_b {
        let only_a: Vec<&str> = keys_a.difference(&keys_b).map(|s| s.as_str()).collect();
        let only_b: Vec<&str> = keys_b.difference(&keys_a).map(|s| s.as_str()).collect();
        return Err(Error::Contract(format!(
            "age label sources cover different images; missing from second: {only_a:?}; missing from first: {only_b:?}"
        )));
    }
    let mut counts = [[0u64; 3]; 3];
    for (id, a) in labels_a {
        counts[a.index()][labels_b[id].index()] += 1;
    }
    let mut off_diagonal = 0;
    let mut largest: Option<(AgeGroup, AgeGroup, u64)> = None;
    for a in AgeGroup::ALL {
        for b in AgeGroup::ALL {
            if a == b {
                continue;
            }
            let c = counts[a.index()][b.index()];
            off_diagonal += c;
            if c > 0 && largest.is_none_or(|(_, _, best)| c > best) {
                largest = Some((a, b, c));
            }
        }
    }
    Ok(DisagreementMatrix {
        counts,
        off_diagonal,
        largest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, identity: &str, race: Race, gender: Gender) -> ImageRecord {
        ImageRecord::new(id, identity, race, gender, AgeGroup::Young, 0)
    }

    #[test]
    fn plurality_overwrites_minority() {
        let recs: Vec<ImageRecord> = (0..7)
            .map(|i| {
                let race = if i < 5 { Race::Asian } else { Race::White };
                rec(&format!("i{i}"), "p", race, Gender::Female)
            })
            .collect();
        let refs: Vec<&ImageRecord> = recs.iter().collect();
        let res = vote_identity_labels(&refs).unwrap();
        assert_eq!(res.race, LabelVote::Decided(Race::Asian));
        assert_eq!(res.changed_records, 2);
        assert_eq!(res.race_votes[&Race::Asian], 5);
    }

    #[test]
    fn tie_is_ambiguous() {
        let recs: Vec<ImageRecord> = (0..4)
            .map(|i| {
                let g = if i % 2 == 0 { Gender::Male } else { Gender::Female };
                rec(&format!("i{i}"), "p", Race::Black, g)
            })
            .collect();
        let refs: Vec<&ImageRecord> = recs.iter().collect();
        let res = vote_identity_labels(&refs).unwrap();
        assert_eq!(res.gender, LabelVote::Ambiguous);
        assert!(res.is_ambiguous());
    }

    #[test]
    fn singleton_and_mixed() {
        let a = rec("a", "p", Race::Indian, Gender::Male);
        let res = vote_identity_labels(&[&a]).unwrap();
        assert_eq!(res.race, LabelVote::Decided(Race::Indian));
        assert_eq!(res.changed_records, 0);
        let b = rec("b", "q", Race::Indian, Gender::Male);
        assert!(matches!(vote_identity_labels(&[&a, &b]), Err(Error::Contract(_))));
        assert!(vote_identity_labels(&[]).is_err());
    }

    #[test]
    fn three_three_race_tie_empties_manifest() {
        let recs: Vec<ImageRecord> = (0..6)
            .map(|i| {
                let race = if i < 3 { Race::Asian } else { Race::Black };
                rec(&format!("i{i}"), "p", race, Gender::Male)
            })
            .collect();
        let out = apply_consensus(&Manifest::new(recs, "t")).unwrap();
        assert!(out.manifest.is_empty());
        assert_eq!(out.results.len(), 1);
        assert_eq!(out.ambiguous().count(), 1);
    }

    #[test]
    fn consistent_manifest_is_a_fixed_point() {
        let recs = vec![
            rec("a", "p", Race::Asian, Gender::Male),
            rec("b", "q", Race::White, Gender::Female),
            rec("c", "p", Race::Asian, Gender::Male),
        ];
        let m = Manifest::new(recs, "t");
        let out = apply_consensus(&m).unwrap();
        assert_eq!(out.manifest, m);
        assert!(out.results.iter().all(|r| r.changed_records == 0));
        assert_eq!(out.results[0].identity_id, "p");
    }

    #[test]
    fn age_is_left_alone() {
        let mut recs = vec![
            rec("a", "p", Race::Asian, Gender::Male),
            rec("b", "p", Race::Asian, Gender::Male),
            rec("c", "p", Race::White, Gender::Male),
        ];
        recs[2].age_group = AgeGroup::Senior;
        let out = apply_consensus(&Manifest::new(recs, "t")).unwrap();
        assert_eq!(out.manifest.records[2].race, Race::Asian);
        assert_eq!(out.manifest.records[2].age_group, AgeGroup::Senior);
    }

    #[test]
    fn age_matrix_counts_flips() {
        let a: BTreeMap<String, AgeGroup> = (0..10)
            .map(|i| (format!("i{i}"), if i < 6 { AgeGroup::Young } else { AgeGroup::MiddleAged }))
            .collect();
        let mut b = a.clone();
        assert_eq!(age_disagreement_report(&a, &b).unwrap().off_diagonal, 0);
        // 2 Young -> Middle, 1 Middle -> Young
        b.insert("i0".into(), AgeGroup::MiddleAged);
        b.insert("i1".into(), AgeGroup::MiddleAged);
        b.insert("i7".into(), AgeGroup::Young);
        let m = age_disagreement_report(&a, &b).unwrap();
        assert_eq!(
            m.get(AgeGroup::Young, AgeGroup::MiddleAged) + m.get(AgeGroup::MiddleAged, AgeGroup::Young),
            3
        );
        assert_eq!(m.off_diagonal, 3);
        assert_eq!(m.largest, Some((AgeGroup::Young, AgeGroup::MiddleAged, 2)));
        assert!(m.to_csv().starts_with("source_a\\source_b,Young,MiddleAged,Senior\n"));
    }

    #[test]
    fn age_key_mismatch_names_ids() {
        let a: BTreeMap<String, AgeGroup> = [("x".to_string(), AgeGroup::Young)].into();
        let b: BTreeMap<String, AgeGroup> = [("y".to_string(), AgeGroup::Young)].into();
        let err = age_disagreement_report(&a, &b).unwrap_err().to_string();
        assert!(err.contains("\"x\"") && err.contains("\"y\""), "{err}");
    }
}
