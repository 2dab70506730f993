//! Synthetic cohorts with known ground truth.
//!
//! Identities get a random mean direction on the unit sphere; images are
//! Gaussian perturbations of it, renormalized. A fraction of images is
//! planted as identity noise, and gate violations and label flips are
//! planted at configurable rates. Everything planted is listed in the
//! [`GroundTruth`], which the pipeline under test never reads.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facearea::{area_ratio, nose_present, ALIGNED_SIZE};
use crate::filters::{FilterOutcome, RejectReason};
use crate::records::{AgeGroup, DemographicGroup, EmbeddingStore, FaceClass, Gender, ImageRecord, Manifest, MaskRaster};
use crate::seeding::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub group: DemographicGroup,
    pub n_ids: usize,
    pub imgs_per_id: usize,
    pub within_sigma: f64,
}

/// Per-image probability of each planted gate violation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViolationRates {
    pub quality_faceqnet: f64,
    pub quality_magface: f64,
    pub pose: f64,
    pub brightness: f64,
    pub face_area: f64,
    pub nose_missing: f64,
    pub attribute_missing: f64,
}

impl ViolationRates {
    fn pairs(&self) -> [(RejectReason, f64); 7] {
        [
            (RejectReason::QualityFaceqnet, self.quality_faceqnet),
            (RejectReason::QualityMagface, self.quality_magface),
            (RejectReason::Pose, self.pose),
            (RejectReason::Brightness, self.brightness),
            (RejectReason::FaceArea, self.face_area),
            (RejectReason::NoseMissing, self.nose_missing),
            (RejectReason::AttributeMissing, self.attribute_missing),
        ]
    }
}

/// Ranges for clean attribute draws. Violating values are drawn outside the
/// default gates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeDists {
    pub pose_abs_max_deg: f64,
    pub q_faceqnet: [f64; 2],
    pub q_magface: [f64; 2],
    pub brightness_fsb: [f64; 2],
    /// Used only when masks are not generated.
    pub face_area_ratio: [f64; 2],
}

impl Default for AttributeDists {
    fn default() -> Self {
        AttributeDists {
            pose_abs_max_deg: 15.0,
            q_faceqnet: [0.35, 0.95],
            q_magface: [21.0, 35.0],
            brightness_fsb: [130.0, 185.0],
            face_area_ratio: [0.3, 0.5],
        }
    }
}

/// Face ellipse geometry on the 224 x 224 canvas, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskParams {
    pub semi_x: f64,
    pub semi_y: f64,
    pub center_y: f64,
    /// Relative standard deviation of the semi-axes per image.
    pub scale_jitter: f64,
    /// Standard deviation of the center offset per image.
    pub shift_jitter: f64,
    pub facial_hair_rate: f64,
}

impl MaskParams {
    pub fn female() -> Self {
        MaskParams {
            semi_x: 68.0,
            semi_y: 88.0,
            center_y: 118.0,
            scale_jitter: 0.04,
            shift_jitter: 2.0,
            facial_hair_rate: 0.0,
        }
    }

    pub fn male() -> Self {
        MaskParams {
            semi_x: 73.0,
            semi_y: 95.0,
            center_y: 114.0,
            scale_jitter: 0.04,
            shift_jitter: 2.0,
            facial_hair_rate: 0.3,
        }
    }
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams::female()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenderedMasks {
    pub female: MaskParams,
    pub male: MaskParams,
}

impl Default for GenderedMasks {
    fn default() -> Self {
        GenderedMasks {
            female: MaskParams::female(),
            male: MaskParams::male(),
        }
    }
}

impl GenderedMasks {
    pub fn for_gender(&self, g: Gender) -> &MaskParams {
        match g {
            Gender::Female => &self.female,
            Gender::Male => &self.male,
        }
    }
}

/// Cohort configuration, read from TOML.
///
/// ```toml
/// seed = 7
/// dim = 128
/// noise_rate = 0.1
///
/// [[groups]]
/// group = "WM"
/// n_ids = 100
/// imgs_per_id = 20
/// within_sigma = 0.05
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub seed: u64,
    pub groups: Vec<GroupSpec>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub race_flip_rate: f64,
    #[serde(default)]
    pub gender_flip_rate: f64,
    #[serde(default)]
    pub age_flip_rate: f64,
    #[serde(default)]
    pub violations: ViolationRates,
    #[serde(default)]
    pub attributes: AttributeDists,
    #[serde(default)]
    pub generate_masks: bool,
    #[serde(default)]
    pub masks: GenderedMasks,
}

fn default_dim() -> usize {
    128
}

impl CohortSpec {
    pub fn new(seed: u64, groups: Vec<GroupSpec>) -> Self {
        CohortSpec {
            seed,
            groups,
            dim: default_dim(),
            noise_rate: 0.0,
            race_flip_rate: 0.0,
            gender_flip_rate: 0.0,
            age_flip_rate: 0.0,
            violations: ViolationRates::default(),
            attributes: AttributeDists::default(),
            generate_masks: false,
            masks: GenderedMasks::default(),
        }
    }

    /// Same shape for each listed group.
    pub fn uniform(seed: u64, groups: &[DemographicGroup], n_ids: usize, imgs_per_id: usize, within_sigma: f64) -> Self {
        CohortSpec::new(
            seed,
            groups
                .iter()
                .map(|&group| GroupSpec {
                    group,
                    n_ids,
                    imgs_per_id,
                    within_sigma,
                })
                .collect(),
        )
    }

    pub fn from_toml(text: &str) -> Result<CohortSpec> {
        let spec: CohortSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CohortSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CohortSpec::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..0.5).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 0.5)", self.noise_rate));
        }
        if self.dim < 8 {
            return bad(format!("dim {} below 8", self.dim));
        }
        if self.groups.is_empty() {
            return bad("no groups".into());
        }
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            if !seen.insert(g.group) {
                return bad(format!("group {} listed twice", g.group));
            }
            if !(g.within_sigma > 0.0 && g.within_sigma.is_finite()) {
                return bad(format!("group {}: within_sigma must be positive", g.group));
            }
            if g.n_ids == 0 || g.imgs_per_id == 0 {
                return bad(format!("group {}: empty shape", g.group));
            }
        }
        if self.noise_rate > 0.0 && self.groups.iter().map(|g| g.n_ids).sum::<usize>() < 2 {
            return bad("identity noise needs at least 2 identities".into());
        }
        let rates = self
            .violations
            .pairs()
            .map(|(r, p)| (r.as_str().to_string(), p))
            .into_iter()
            .chain([
                ("race_flip_rate".to_string(), self.race_flip_rate),
                ("gender_flip_rate".to_string(), self.gender_flip_rate),
                ("age_flip_rate".to_string(), self.age_flip_rate),
                ("female.facial_hair_rate".to_string(), self.masks.female.facial_hair_rate),
                ("male.facial_hair_rate".to_string(), self.masks.male.facial_hair_rate),
            ]);
        for (name, p) in rates {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Planted facts about one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub image_id: String,
    /// Identity folder the image is filed under.
    pub labeled_identity: String,
    /// Identity whose embedding the image carries.
    pub true_identity: String,
    pub noise: bool,
    pub true_group: DemographicGroup,
    pub true_age_group: AgeGroup,
    pub label_flipped: bool,
    pub violations: Vec<RejectReason>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub records: Vec<TruthRecord>,
}

impl GroundTruth {
    pub fn noise_ids(&self) -> BTreeSet<&str> {
        self.records
            .iter()
            .filter(|r| r.noise)
            .map(|r| r.image_id.as_str())
            .collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(r: impl BufRead) -> Result<GroundTruth> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(GroundTruth { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GroundTruth> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        GroundTruth::read_from(std::io::BufReader::new(f))
    }
}

pub struct Cohort {
    pub manifest: Manifest,
    pub store: EmbeddingStore,
    /// Aligned with manifest records; empty unless masks were requested.
    pub masks: Vec<MaskRaster>,
    pub truth: GroundTruth,
}

impl std::fmt::Debug for Cohort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cohort")
            .field("records", &self.manifest.len())
            .field("store", &self.store)
            .field("masks", &self.masks.len())
            .finish()
    }
}

struct GroupDraw {
    records: Vec<ImageRecord>,
    vectors: Vec<f32>,
    masks: Vec<MaskRaster>,
    truth: Vec<TruthRecord>,
}

fn identity_id(group: DemographicGroup, k: usize) -> String {
    format!("{group}{k:05}")
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn perturbed_unit(rng: &mut ChaCha8Rng, mean: &[f64], sigma: f64) -> Vec<f32> {
    let v: Vec<f64> = mean
        .iter()
        .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Draws a synthetic face mask.
pub fn render_mask(rng: &mut ChaCha8Rng, params: &MaskParams, bearded: bool, with_nose: bool, shrink: f64) -> MaskRaster {
    let size = ALIGNED_SIZE;
    let scale = (1.0 + params.scale_jitter * rng.sample::<f64, _>(StandardNormal)).max(0.5) * shrink;
    let ax = params.semi_x * scale;
    let ay = params.semi_y * scale;
    let cx = size as f64 / 2.0 + params.shift_jitter * rng.sample::<f64, _>(StandardNormal);
    let cy = params.center_y + params.shift_jitter * rng.sample::<f64, _>(StandardNormal);
    let inside = |x: f64, y: f64, ex: f64, ey: f64, rx: f64, ry: f64| {
        let dx = (x - ex) / rx;
        let dy = (y - ey) / ry;
        dx * dx + dy * dy <= 1.0
    };
    let mut mask = MaskRaster::filled(size, size, FaceClass::Background);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let class = if inside(fx, fy, cx, cy, ax, ay) {
                let eye_y = cy - 0.15 * ay;
                let brow_y = cy - 0.3 * ay;
                let eye = [-1.0, 1.0]
                    .iter()
                    .any(|s| inside(fx, fy, cx + s * 0.38 * ax, eye_y, 0.16 * ax, 0.06 * ay));
                let brow = [-1.0, 1.0]
                    .iter()
                    .any(|s| inside(fx, fy, cx + s * 0.38 * ax, brow_y, 0.2 * ax, 0.03 * ay));
                if eye {
                    FaceClass::Eyes
                } else if brow {
                    FaceClass::Brows
                } else if with_nose && inside(fx, fy, cx, cy + 0.08 * ay, 0.1 * ax, 0.18 * ay) {
                    FaceClass::Nose
                } else if inside(fx, fy, cx, cy + 0.48 * ay, 0.3 * ax, 0.07 * ay) {
                    FaceClass::Mouth
                } else if bearded && fy > cy + 0.35 * ay {
                    FaceClass::FacialHair
                } else {
                    FaceClass::Skin
                }
            } else if fy < cy && inside(fx, fy, cx, cy - 0.05 * ay, ax * 1.12, ay * 1.12) {
                FaceClass::Hair
            } else {
                FaceClass::Background
            };
            mask.set(x, y, class);
        }
    }
    mask
}

fn draw_group(
    spec: &CohortSpec,
    g: &GroupSpec,
    means: &[Vec<f64>],
    id_names: &[String],
    first_identity: usize,
    first_index: u64,
) -> GroupDraw {
    let mut rng = stream_rng(spec.seed, &format!("synth/images/{}", g.group));
    let attrs = &spec.attributes;
    let mut out = GroupDraw {
        records: Vec::with_capacity(g.n_ids * g.imgs_per_id),
        vectors: Vec::with_capacity(g.n_ids * g.imgs_per_id * spec.dim),
        masks: Vec::new(),
        truth: Vec::with_capacity(g.n_ids * g.imgs_per_id),
    };
    let mut index = first_index;
    for k in 0..g.n_ids {
        let own = first_identity + k;
        let age = AgeGroup::ALL[rng.random_range(0..AgeGroup::ALL.len())];
        for j in 0..g.imgs_per_id {
            let image_id = format!("{}_{j:03}", id_names[own]);
            let noise = spec.noise_rate > 0.0 && rng.random_bool(spec.noise_rate);
            let source = if noise {
                let other = rng.random_range(0..means.len() - 1);
                if other >= own {
                    other + 1
                } else {
                    other
                }
            } else {
                own
            };
            out.vectors.extend(perturbed_unit(&mut rng, &means[source], g.within_sigma));

            let mut planted: Vec<RejectReason> = Vec::new();
            for (reason, p) in spec.violations.pairs() {
                if p > 0.0 && rng.random_bool(p) {
                    planted.push(reason);
                }
            }
            let has = |r: RejectReason| planted.contains(&r);

            let mut race = g.group.race;
            let mut gender = g.group.gender;
            let mut age_label = age;
            let mut flipped = false;
            if spec.race_flip_rate > 0.0 && rng.random_bool(spec.race_flip_rate) {
                let others: Vec<_> = crate::records::Race::ALL.iter().filter(|&&r| r != race).collect();
                race = *others[rng.random_range(0..others.len())];
                flipped = true;
            }
            if spec.gender_flip_rate > 0.0 && rng.random_bool(spec.gender_flip_rate) {
                gender = gender.flipped();
                flipped = true;
            }
            if spec.age_flip_rate > 0.0 && rng.random_bool(spec.age_flip_rate) {
                let others: Vec<_> = AgeGroup::ALL.iter().filter(|&&a| a != age_label).collect();
                age_label = *others[rng.random_range(0..others.len())];
                flipped = true;
            }

            let mut r = ImageRecord::new(image_id.clone(), id_names[own].clone(), race, gender, age_label, index);
            index += 1;
            let pmax = attrs.pose_abs_max_deg;
            let mut pose = [0.0f64; 3];
            for a in pose.iter_mut() {
                *a = rng.random_range(-pmax..=pmax);
            }
            if has(RejectReason::Pose) {
                let which = rng.random_range(0..3);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                pose[which] = sign * rng.random_range(20.5..45.0);
            }
            r.pitch = Some(pose[0]);
            r.yaw = Some(pose[1]);
            r.roll = Some(pose[2]);
            r.q_faceqnet = Some(if has(RejectReason::QualityFaceqnet) {
                rng.random_range(0.0..0.29)
            } else {
                uniform(&mut rng, attrs.q_faceqnet)
            });
            r.q_magface = Some(if has(RejectReason::QualityMagface) {
                rng.random_range(5.0..19.5)
            } else {
                uniform(&mut rng, attrs.q_magface)
            });
            r.brightness_fsb = Some(if has(RejectReason::Brightness) {
                if rng.random_bool(0.5) {
                    rng.random_range(40.0..115.0)
                } else {
                    rng.random_range(199.5..250.0)
                }
            } else {
                uniform(&mut rng, attrs.brightness_fsb)
            });

            let true_gender = g.group.gender;
            let params = spec.masks.for_gender(true_gender);
            let bearded = params.facial_hair_rate > 0.0 && rng.random_bool(params.facial_hair_rate);
            r.facial_hair = Some(bearded);
            let with_nose = !has(RejectReason::NoseMissing);
            let shrink = if has(RejectReason::FaceArea) { 0.55 } else { 1.0 };
            if spec.generate_masks {
                let mask = render_mask(&mut rng, params, bearded, with_nose, shrink);
                r.face_area_ratio = Some(area_ratio(&mask));
                r.nose_present = Some(nose_present(&mask));
                r.mask_path = Some(format!("masks/{image_id}.bamk"));
                out.masks.push(mask);
            } else {
                r.face_area_ratio = Some(if has(RejectReason::FaceArea) {
                    rng.random_range(0.05..0.19)
                } else {
                    uniform(&mut rng, attrs.face_area_ratio)
                });
                r.nose_present = Some(with_nose);
            }
            if has(RejectReason::AttributeMissing) {
                match rng.random_range(0..4) {
                    0 => r.q_faceqnet = None,
                    1 => r.yaw = None,
                    2 => r.brightness_fsb = None,
                    _ => r.nose_present = None,
                }
            }

            out.truth.push(TruthRecord {
                image_id,
                labeled_identity: id_names[own].clone(),
                true_identity: id_names[source].clone(),
                noise,
                true_group: g.group,
                true_age_group: age,
                label_flipped: flipped,
                violations: planted,
            });
            out.records.push(r);
        }
    }
    out
}

/// Generates the cohort. Groups are drawn in parallel from per-group streams,
/// so output does not depend on the thread count.
pub fn generate(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let mut id_names = Vec::new();
    let mut starts = Vec::new();
    for g in &spec.groups {
        starts.push(id_names.len());
        id_names.extend((0..g.n_ids).map(|k| identity_id(g.group, k)));
    }
    let means: Vec<Vec<f64>> = spec
        .groups
        .par_iter()
        .map(|g| {
            let mut rng = stream_rng(spec.seed, &format!("synth/means/{}", g.group));
            (0..g.n_ids).map(|_| gaussian_unit(&mut rng, spec.dim)).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    let mut first_index = Vec::with_capacity(spec.groups.len());
    let mut total = 0u64;
    for g in &spec.groups {
        first_index.push(total);
        total += (g.n_ids * g.imgs_per_id) as u64;
    }
    let draws: Vec<GroupDraw> = spec
        .groups
        .par_iter()
        .enumerate()
        .map(|(gi, g)| draw_group(spec, g, &means, &id_names, starts[gi], first_index[gi]))
        .collect();

    let mut records = Vec::with_capacity(total as usize);
    let mut vectors = Vec::with_capacity(total as usize * spec.dim);
    let mut masks = Vec::new();
    let mut truth = Vec::with_capacity(total as usize);
    for d in draws {
        records.extend(d.records);
        vectors.extend(d.vectors);
        masks.extend(d.masks);
        truth.extend(d.truth);
    }
    let mut manifest = Manifest::new(records, "synthcohort");
    manifest.note(format!(
        "seed={} dim={} noise_rate={} groups={}",
        spec.seed,
        spec.dim,
        spec.noise_rate,
        spec.groups.iter().map(|g| g.group.code()).collect::<Vec<_>>().join(",")
    ));
    Ok(Cohort {
        manifest,
        store: EmbeddingStore::from_rows(spec.dim, &vectors)?,
        masks,
        truth: GroundTruth { records: truth },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct GroupRecovery {
    pub planted_noise: usize,
    pub dropped_noise: usize,
    pub clean: usize,
    pub dropped_clean: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryStats {
    pub planted_noise: usize,
    pub dropped: usize,
    pub dropped_noise: usize,
    /// 1 when nothing was dropped.
    pub precision: f64,
    /// 1 when nothing was planted.
    pub recall: f64,
    /// Dropped clean images over all clean images.
    pub false_drop_rate: f64,
    pub per_group: BTreeMap<DemographicGroup, GroupRecovery>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores noise removal: `before` is the pipeline input, `after` its output.
pub fn ground_truth_score(before: &Manifest, after: &Manifest, truth: &GroundTruth) -> Result<RecoveryStats> {
    let by_id: HashMap<&str, &TruthRecord> = truth.records.iter().map(|t| (t.image_id.as_str(), t)).collect();
    let mut kept = BTreeSet::new();
    for r in &after.records {
        if !by_id.contains_key(r.image_id.as_str()) {
            return Err(Error::Contract(format!("{} is not in the ground truth", r.image_id)));
        }
        kept.insert(r.image_id.as_str());
    }
    let mut stats = RecoveryStats {
        planted_noise: 0,
        dropped: 0,
        dropped_noise: 0,
        precision: 1.0,
        recall: 1.0,
        false_drop_rate: 0.0,
        per_group: BTreeMap::new(),
    };
    let mut clean = 0;
    let mut dropped_clean = 0;
    for r in &before.records {
        let t = by_id
            .get(r.image_id.as_str())
            .ok_or_else(|| Error::Contract(format!("{} is not in the ground truth", r.image_id)))?;
        let dropped = !kept.contains(r.image_id.as_str());
        let g = stats.per_group.entry(t.true_group).or_default();
        if t.noise {
            stats.planted_noise += 1;
            g.planted_noise += 1;
        } else {
            clean += 1;
            g.clean += 1;
        }
        if dropped {
            stats.dropped += 1;
            if t.noise {
                stats.dropped_noise += 1;
                g.dropped_noise += 1;
            } else {
                dropped_clean += 1;
                g.dropped_clean += 1;
            }
        }
    }
    stats.precision = ratio(stats.dropped_noise, stats.dropped);
    stats.recall = ratio(stats.dropped_noise, stats.planted_noise);
    stats.false_drop_rate = if clean == 0 { 0.0 } else { dropped_clean as f64 / clean as f64 };
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct GateRecovery {
    pub planted: usize,
    pub detected: usize,
}

/// For each reason, how many planted violations the filter flagged with it.
pub fn gate_recovery(
    manifest: &Manifest,
    outcome: &FilterOutcome,
    truth: &GroundTruth,
) -> Result<BTreeMap<RejectReason, GateRecovery>> {
    let by_id: HashMap<&str, &TruthRecord> = truth.records.iter().map(|t| (t.image_id.as_str(), t)).collect();
    if outcome.decisions.len() != manifest.len() {
        return Err(Error::Contract("filter decisions do not match the manifest".into()));
    }
    let mut out: BTreeMap<RejectReason, GateRecovery> = RejectReason::ALL.iter().map(|&r| (r, GateRecovery::default())).collect();
    for (r, d) in manifest.records.iter().zip(&outcome.decisions) {
        let t = by_id
            .get(r.image_id.as_str())
            .ok_or_else(|| Error::Contract(format!("{} is not in the ground truth", r.image_id)))?;
        for reason in &t.violations {
            let e = out.get_mut(reason).unwrap();
            e.planted += 1;
            if d.reject_reasons.contains(reason) {
                e.detected += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{enumerate_genuine_pairs, sample_impostor_pairs, score_pairs, ImpostorScope};
    use crate::records::validate;

    fn wm() -> DemographicGroup {
        "WM".parse().unwrap()
    }

    #[test]
    fn tiny_sigma_gives_unit_genuine_scores() {
        let spec = CohortSpec::uniform(3, &[wm()], 20, 4, 1e-7);
        let c = generate(&spec).unwrap();
        let gen = score_pairs(&enumerate_genuine_pairs(&c.manifest), &c.manifest, &c.store).unwrap();
        assert!(gen.min > 0.9999);
        let imp = sample_impostor_pairs(&c.manifest, ImpostorScope::Global, 2000, 1).unwrap();
        let imp = score_pairs(&imp, &c.manifest, &c.store).unwrap();
        assert!(imp.mean().unwrap().abs() < 0.05);
    }

    #[test]
    fn noise_count_is_binomial() {
        let mut spec = CohortSpec::uniform(11, &[wm()], 100, 20, 0.05);
        spec.noise_rate = 0.1;
        let c = generate(&spec).unwrap();
        let n = c.truth.noise_ids().len() as f64;
        let sd = (2000.0f64 * 0.1 * 0.9).sqrt();
        assert!((n - 200.0).abs() < 4.0 * sd, "{n}");
    }

    #[test]
    fn output_is_valid_and_deterministic() {
        let mut spec = CohortSpec::uniform(5, &DemographicGroup::ALL, 3, 3, 0.05);
        spec.noise_rate = 0.2;
        spec.generate_masks = true;
        spec.violations.pose = 0.3;
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert!(validate(&a.manifest, &a.store).is_clean());
        assert_eq!(a.manifest.to_bytes(), b.manifest.to_bytes());
        assert_eq!(a.store.as_bytes(), b.store.as_bytes());
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.masks.len(), a.manifest.len());
    }

    #[test]
    fn spec_validation() {
        let mut spec = CohortSpec::uniform(1, &[wm()], 2, 2, 0.05);
        spec.noise_rate = 0.5;
        assert!(spec.validate().is_err());
        spec.noise_rate = 0.0;
        spec.dim = 4;
        assert!(spec.validate().is_err());
        spec.dim = 8;
        spec.groups[0].within_sigma = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
seed = 9
dim = 16
noise_rate = 0.05

[[groups]]
group = "AF"
n_ids = 4
imgs_per_id = 3
within_sigma = 0.05

[violations]
pose = 0.1
"#;
        let spec = CohortSpec::from_toml(text).unwrap();
        assert_eq!(spec.groups[0].group, "AF".parse().unwrap());
        assert_eq!(spec.violations.pose, 0.1);
        assert!(CohortSpec::from_toml("seed = 1\ngroups = []\nbogus = 2").is_err());
    }

    #[test]
    fn recovery_definitions() {
        let mut spec = CohortSpec::uniform(2, &[wm()], 10, 10, 0.05);
        spec.noise_rate = 0.2;
        let c = generate(&spec).unwrap();
        let noise = c.truth.noise_ids();
        let planted = noise.len();
        assert!(planted > 0);

        let exact = c.manifest.select(
            &(0..c.manifest.len())
                .filter(|&i| !noise.contains(c.manifest.records[i].image_id.as_str()))
                .collect::<Vec<_>>(),
        );
        let s = ground_truth_score(&c.manifest, &exact, &c.truth).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 1.0));

        let s = ground_truth_score(&c.manifest, &c.manifest, &c.truth).unwrap();
        assert_eq!(s.recall, 0.0);

        let k = 3;
        let mut extra = 0;
        let superset = c.manifest.select(
            &(0..c.manifest.len())
                .filter(|&i| {
                    let id = c.manifest.records[i].image_id.as_str();
                    if noise.contains(id) {
                        return false;
                    }
                    if extra < k {
                        extra += 1;
                        return false;
                    }
                    true
                })
                .collect::<Vec<_>>(),
        );
        let s = ground_truth_score(&c.manifest, &superset, &c.truth).unwrap();
        assert_eq!(s.precision, planted as f64 / (planted + k) as f64);

        let mut stranger = c.manifest.clone();
        stranger.records[0].image_id = "nobody".into();
        assert!(matches!(
            ground_truth_score(&c.manifest, &stranger, &c.truth),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn truth_jsonl_round_trip() {
        let mut spec = CohortSpec::uniform(2, &[wm()], 3, 2, 0.05);
        spec.noise_rate = 0.3;
        spec.violations.brightness = 0.5;
        let c = generate(&spec).unwrap();
        let mut buf = Vec::new();
        c.truth.write_to(&mut buf).unwrap();
        assert_eq!(GroundTruth::read_from(&buf[..]).unwrap(), c.truth);
    }
}
