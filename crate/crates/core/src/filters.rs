//! Attribute gates for image selection.
//!
//! Every gate accepts values exactly at its threshold. A record missing an
//! attribute a gate needs is rejected with [`RejectReason::AttributeMissing`].

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{DemographicGroup, ImageRecord, Manifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub q_faceqnet_min: f64,
    pub q_magface_min: f64,
    pub pose_abs_max_deg: f64,
    pub fsb_range: [f64; 2],
    pub face_area_min: f64,
    pub require_nose: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            q_faceqnet_min: 0.3,
            q_magface_min: 20.0,
            pose_abs_max_deg: 20.0,
            fsb_range: [115.86, 198.75],
            face_area_min: 0.20,
            require_nose: true,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.q_faceqnet_min,
            self.q_magface_min,
            self.pose_abs_max_deg,
            self.fsb_range[0],
            self.fsb_range[1],
            self.face_area_min,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("gate thresholds must be finite".into()));
        }
        if self.fsb_range[0] >= self.fsb_range[1] {
            return Err(Error::Config(format!(
                "fsb range [{}, {}] is empty",
                self.fsb_range[0], self.fsb_range[1]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    QualityFaceqnet,
    QualityMagface,
    Pose,
    Brightness,
    FaceArea,
    NoseMissing,
    AttributeMissing,
}

impl RejectReason {
    pub const ALL: [RejectReason; 7] = [
        RejectReason::QualityFaceqnet,
        RejectReason::QualityMagface,
        RejectReason::Pose,
        RejectReason::Brightness,
        RejectReason::FaceArea,
        RejectReason::NoseMissing,
        RejectReason::AttributeMissing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::QualityFaceqnet => "quality_faceqnet",
            RejectReason::QualityMagface => "quality_magface",
            RejectReason::Pose => "pose",
            RejectReason::Brightness => "brightness",
            RejectReason::FaceArea => "face_area",
            RejectReason::NoseMissing => "nose_missing",
            RejectReason::AttributeMissing => "attribute_missing",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GateDecision {
    pub reject_reasons: BTreeSet<RejectReason>,
}

impl GateDecision {
    pub fn accepted(&self) -> bool {
        self.reject_reasons.is_empty()
    }
}

/// Evaluates every gate; the reason set is complete, not first-failure.
pub fn gate_record(record: &ImageRecord, cfg: &GateConfig) -> GateDecision {
    let mut reasons = BTreeSet::new();
    let mut at_least = |value: Option<f64>, min: f64, reason: RejectReason| match value {
        None => {
            reasons.insert(RejectReason::AttributeMissing);
        }
        // written so NaN fails
        Some(v) if !(v >= min) => {
            reasons.insert(reason);
        }
        Some(_) => {}
    };
    at_least(record.q_faceqnet, cfg.q_faceqnet_min, RejectReason::QualityFaceqnet);
    at_least(record.q_magface, cfg.q_magface_min, RejectReason::QualityMagface);
    at_least(record.face_area_ratio, cfg.face_area_min, RejectReason::FaceArea);

    // a present angle out of range is flagged even when another is missing
    for angle in [record.pitch, record.yaw, record.roll] {
        match angle {
            None => {
                reasons.insert(RejectReason::AttributeMissing);
            }
            Some(a) if !(a.abs() <= cfg.pose_abs_max_deg) => {
                reasons.insert(RejectReason::Pose);
            }
            Some(_) => {}
        }
    }

    match record.brightness_fsb {
        None => {
            reasons.insert(RejectReason::AttributeMissing);
        }
        Some(b) if !(b >= cfg.fsb_range[0] && b <= cfg.fsb_range[1]) => {
            reasons.insert(RejectReason::Brightness);
        }
        Some(_) => {}
    }

    if cfg.require_nose {
        match record.nose_present {
            None => {
                reasons.insert(RejectReason::AttributeMissing);
            }
            Some(false) => {
                reasons.insert(RejectReason::NoseMissing);
            }
            Some(true) => {}
        }
    }

    GateDecision {
        reject_reasons: reasons,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GroupCounts {
    pub kept: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RejectionStats {
    pub input: usize,
    pub kept: usize,
    pub rejected: usize,
    /// A record with several reasons counts once under each.
    pub per_reason: BTreeMap<RejectReason, usize>,
    pub per_group: BTreeMap<DemographicGroup, GroupCounts>,
}

impl RejectionStats {
    pub fn reason_count(&self, reason: RejectReason) -> usize {
        self.per_reason.get(&reason).copied().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,key,kept,rejected\n");
        out.push_str(&format!("total,all,{},{}\n", self.kept, self.rejected));
        for reason in RejectReason::ALL {
            out.push_str(&format!("reason,{},,{}\n", reason.as_str(), self.reason_count(reason)));
        }
        for (g, c) in &self.per_group {
            out.push_str(&format!("group,{g},{},{}\n", c.kept, c.rejected));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Manifest,
    pub stats: RejectionStats,
    /// Per input record, in input order.
    pub decisions: Vec<GateDecision>,
}

/// Gates every record (in parallel) and keeps the accepted ones in input order.
pub fn filter_manifest(manifest: &Manifest, cfg: &GateConfig) -> Result<FilterOutcome> {
    cfg.validate()?;
    let decisions: Vec<GateDecision> = manifest
        .records
        .par_iter()
        .map(|r| gate_record(r, cfg))
        .collect();

    let mut stats = RejectionStats {
        input: manifest.len(),
        ..Default::default()
    };
    let mut keep = Vec::new();
    for (i, (r, d)) in manifest.records.iter().zip(&decisions).enumerate() {
        let group = stats.per_group.entry(r.group()).or_default();
        if d.accepted() {
            group.kept += 1;
            stats.kept += 1;
            keep.push(i);
        } else {
            group.rejected += 1;
            stats.rejected += 1;
            for reason in &d.reject_reasons {
                *stats.per_reason.entry(*reason).or_default() += 1;
            }
        }
    }
    Ok(FilterOutcome {
        kept: manifest.select(&keep),
        stats,
        decisions,
    })
}
