//! Data model and on-disk formats.
//!
//! * Manifest: UTF-8, one JSON object per line. Lines starting with `#` form
//!   the free-text provenance header. Unknown keys survive a load/write cycle.
//! * Embedding blob: `"BAEM"`, version `1u8`, `dim: u32 LE`, `count: u64 LE`,
//!   then `count * dim` little-endian `f32`, row-major.
//! * Mask raster: `"BAMK"`, version `1u8`, `width: u32 LE`, `height: u32 LE`,
//!   then `width * height` class bytes, row-major.
//! * Gray raster: same layout as masks under the magic `"BAGR"`, payload is
//!   8-bit luma.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use memmap2::Mmap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Race {
    White,
    Black,
    Asian,
    Indian,
}

impl Race {
    pub const ALL: [Race; 4] = [Race::Asian, Race::Black, Race::Indian, Race::White];

    pub fn code(self) -> char {
        match self {
            Race::White => 'W',
            Race::Black => 'B',
            Race::Asian => 'A',
            Race::Indian => 'I',
        }
    }
}

impl FromStr for Race {
    type Err = Error;

    /// Full name or one-letter code, case-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Race::ALL
            .into_iter()
            .find(|r| t.eq_ignore_ascii_case(&r.to_string()) || t.eq_ignore_ascii_case(&r.code().to_string()))
            .ok_or_else(|| Error::Config(format!("unknown race {s:?}")))
    }
}

impl fmt::Display for Race {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn code(self) -> char {
        match self {
            Gender::Male => 'M',
            Gender::Female => 'F',
        }
    }

    pub fn flipped(self) -> Gender {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Young 10-29, MiddleAged 30-49, Senior 50+.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeGroup {
    Young,
    MiddleAged,
    Senior,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 3] = [AgeGroup::Young, AgeGroup::MiddleAged, AgeGroup::Senior];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for AgeGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Young" => Ok(AgeGroup::Young),
            "MiddleAged" | "Middle_Aged" => Ok(AgeGroup::MiddleAged),
            "Senior" => Ok(AgeGroup::Senior),
            other => Err(Error::Config(format!("unknown age group {other:?}"))),
        }
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One race × gender cell, written as a two-letter code (`AF`, `WM`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DemographicGroup {
    pub race: Race,
    pub gender: Gender,
}

impl DemographicGroup {
    /// The eight groups in code order: AF, AM, BF, BM, IF, IM, WF, WM.
    pub const ALL: [DemographicGroup; 8] = [
        DemographicGroup::new(Race::Asian, Gender::Female),
        DemographicGroup::new(Race::Asian, Gender::Male),
        DemographicGroup::new(Race::Black, Gender::Female),
        DemographicGroup::new(Race::Black, Gender::Male),
        DemographicGroup::new(Race::Indian, Gender::Female),
        DemographicGroup::new(Race::Indian, Gender::Male),
        DemographicGroup::new(Race::White, Gender::Female),
        DemographicGroup::new(Race::White, Gender::Male),
    ];

    pub const fn new(race: Race, gender: Gender) -> Self {
        DemographicGroup { race, gender }
    }

    pub fn code(self) -> String {
        format!("{}{}", self.race.code(), self.gender.code())
    }

    fn ordinal(self) -> usize {
        let r = match self.race {
            Race::Asian => 0,
            Race::Black => 1,
            Race::Indian => 2,
            Race::White => 3,
        };
        r * 2 + usize::from(self.gender == Gender::Male)
    }
}

impl PartialOrd for DemographicGroup {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DemographicGroup {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.ordinal().cmp(&other.ordinal())
    }
}

impl fmt::Display for DemographicGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.race.code(), self.gender.code())
    }
}

impl FromStr for DemographicGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let code = s.trim().to_ascii_uppercase();
        DemographicGroup::ALL
            .into_iter()
            .find(|g| g.code() == code)
            .ok_or_else(|| Error::Config(format!("unknown demographic group {s:?}")))
    }
}

impl Serialize for DemographicGroup {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for DemographicGroup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One image. Measured attributes are optional; gates treat a missing value
/// as a rejection, never as a pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub identity_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_faceqnet: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_magface: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brightness_fsb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_area_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nose_present: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facial_hair: Option<bool>,
    pub race: Race,
    pub gender: Gender,
    pub age_group: AgeGroup,
    pub embedding_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    /// Keys this version does not know about, kept verbatim.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ImageRecord {
    /// A record with every measured attribute unset.
    pub fn new(
        image_id: impl Into<String>,
        identity_id: impl Into<String>,
        race: Race,
        gender: Gender,
        age_group: AgeGroup,
        embedding_index: u64,
    ) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            identity_id: identity_id.into(),
            pitch: None,
            yaw: None,
            roll: None,
            q_faceqnet: None,
            q_magface: None,
            brightness_fsb: None,
            face_area_ratio: None,
            nose_present: None,
            facial_hair: None,
            race,
            gender,
            age_group,
            embedding_index,
            mask_path: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn group(&self) -> DemographicGroup {
        DemographicGroup::new(self.race, self.gender)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
    pub provenance: String,
}

impl Manifest {
    pub fn new(records: Vec<ImageRecord>, provenance: impl Into<String>) -> Self {
        Manifest {
            records,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record positions per identity, identities in lexical order and
    /// positions in manifest order.
    pub fn identities(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            out.entry(r.identity_id.as_str()).or_default().push(i);
        }
        out
    }

    /// Record positions per demographic group, in manifest order.
    pub fn groups(&self) -> BTreeMap<DemographicGroup, Vec<usize>> {
        let mut out: BTreeMap<DemographicGroup, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            out.entry(r.group()).or_default().push(i);
        }
        out
    }

    /// Keeps the records at `positions` (in the given order).
    pub fn select(&self, positions: &[usize]) -> Manifest {
        Manifest {
            records: positions.iter().map(|&i| self.records[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Appends a line to the provenance header.
    pub fn note(&mut self, line: impl AsRef<str>) {
        if !self.provenance.is_empty() {
            self.provenance.push('\n');
        }
        self.provenance.push_str(line.as_ref());
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            if let Some(prev) = seen.insert(r.image_id.as_str(), i) {
                return Err(Error::Integrity(format!(
                    "duplicate image_id {:?} at records {} and {}",
                    r.image_id,
                    prev + 1,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for line in self.provenance.lines() {
            if line.is_empty() {
                writeln!(w, "#")?;
            } else {
                writeln!(w, "# {line}")?;
            }
        }
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_from(r: impl BufRead) -> Result<Manifest> {
        let mut records = Vec::new();
        let mut provenance: Vec<String> = Vec::new();
        let mut first_line: HashMap<String, usize> = HashMap::new();
        for (n, line) in r.lines().enumerate() {
            let lineno = n + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if let Some(rest) = line.strip_prefix('#') {
                provenance.push(rest.strip_prefix(' ').unwrap_or(rest).to_string());
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if let Some(prev) = first_line.get(&rec.image_id) {
                return Err(Error::Integrity(format!(
                    "duplicate image_id {:?} on lines {} and {}",
                    rec.image_id, prev, lineno
                )));
            }
            first_line.insert(rec.image_id.clone(), lineno);
            records.push(rec);
        }
        Ok(Manifest {
            records,
            provenance: provenance.join("\n"),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Manifest::read_from(BufReader::new(f))
    }
}

pub const EMBEDDING_MAGIC: &[u8; 4] = b"BAEM";
pub const MASK_MAGIC: &[u8; 4] = b"BAMK";
pub const GRAY_MAGIC: &[u8; 4] = b"BAGR";
pub const FORMAT_VERSION: u8 = 1;
const EMBEDDING_HEADER: usize = 4 + 1 + 4 + 8;
const RASTER_HEADER: usize = 4 + 1 + 4 + 4;

enum Backing {
    Mapped(Mmap),
    Owned(Vec<u8>),
}

impl Backing {
    fn bytes(&self) -> &[u8] {
        match self {
            Backing::Mapped(m) => m,
            Backing::Owned(v) => v,
        }
    }
}

/// Fixed-dimension embedding rows. File-backed stores are memory mapped, so
/// rows are paged in on access rather than read up front.
pub struct EmbeddingStore {
    dim: usize,
    count: usize,
    data: Backing,
}

impl fmt::Debug for EmbeddingStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingStore")
            .field("dim", &self.dim)
            .field("count", &self.count)
            .finish()
    }
}

impl EmbeddingStore {
    /// Builds an in-memory store from row-major values.
    pub fn from_rows(dim: usize, values: &[f32]) -> Result<EmbeddingStore> {
        if dim == 0 {
            return Err(Error::Format("embedding dim must be positive".into()));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::Format(format!(
                "{} values do not form rows of dim {dim}",
                values.len()
            )));
        }
        let count = values.len() / dim;
        let mut bytes = Vec::with_capacity(EMBEDDING_HEADER + values.len() * 4);
        bytes.extend_from_slice(EMBEDDING_MAGIC);
        bytes.push(FORMAT_VERSION);
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        bytes.extend_from_slice(&(count as u64).to_le_bytes());
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Ok(EmbeddingStore {
            dim,
            count,
            data: Backing::Owned(bytes),
        })
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<EmbeddingStore> {
        let (dim, count) = parse_embedding_header(&bytes)?;
        Ok(EmbeddingStore {
            dim,
            count,
            data: Backing::Owned(bytes),
        })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
        if (len as usize) < EMBEDDING_HEADER {
            return Err(Error::Format(format!(
                "{}: {len} bytes is shorter than the header",
                path.display()
            )));
        }
        // SAFETY: the mapping is read-only and stores are treated as immutable
        // for their lifetime.
        let map = unsafe { Mmap::map(&f) }.map_err(|e| Error::io(path, e))?;
        let (dim, count) = parse_embedding_header(&map)?;
        Ok(EmbeddingStore {
            dim,
            count,
            data: Backing::Mapped(map),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// The complete blob, header included.
    pub fn as_bytes(&self) -> &[u8] {
        self.data.bytes()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Raw little-endian bytes of row `i`. Panics when out of range.
    pub fn row_bytes(&self, i: usize) -> &[u8] {
        assert!(i < self.count, "row {i} out of range ({} rows)", self.count);
        let stride = self.dim * 4;
        let start = EMBEDDING_HEADER + i * stride;
        &self.data.bytes()[start..start + stride]
    }

    pub fn vector(&self, i: usize) -> Vec<f32> {
        self.row_bytes(i)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    pub fn get(&self, i: usize) -> Option<Vec<f32>> {
        (i < self.count).then(|| self.vector(i))
    }

    /// Dot product of rows `i` and `j` (cosine similarity for unit rows).
    pub fn dot(&self, i: usize, j: usize) -> f64 {
        dot_le(self.row_bytes(i), self.row_bytes(j))
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.vector(i)
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

fn parse_embedding_header(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < EMBEDDING_HEADER {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the embedding header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != EMBEDDING_MAGIC {
        return Err(Error::Format(format!(
            "bad embedding magic {:?}",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported embedding format version {}",
            bytes[4]
        )));
    }
    let dim = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
    if dim == 0 {
        return Err(Error::Format("embedding dim must be positive".into()));
    }
    let expected = (count as u128) * (dim as u128) * 4 + EMBEDDING_HEADER as u128;
    if expected != bytes.len() as u128 {
        return Err(Error::Format(format!(
            "header promises {count} rows of dim {dim} ({expected} bytes) but file has {} bytes",
            bytes.len()
        )));
    }
    Ok((dim, count as usize))
}

/// Dot product over two little-endian f32 rows with eight fixed lanes, so the
/// summation order (and the result) does not depend on the caller.
pub(crate) fn dot_le(a: &[u8], b: &[u8]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let mut ca = a.chunks_exact(32);
    let mut cb = b.chunks_exact(32);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            let o = l * 4;
            let xv = f32::from_le_bytes([x[o], x[o + 1], x[o + 2], x[o + 3]]);
            let yv = f32::from_le_bytes([y[o], y[o + 1], y[o + 2], y[o + 3]]);
            acc[l] += xv * yv;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ca
        .remainder()
        .chunks_exact(4)
        .zip(cb.remainder().chunks_exact(4))
    {
        let xv = f32::from_le_bytes([x[0], x[1], x[2], x[3]]);
        let yv = f32::from_le_bytes([y[0], y[1], y[2], y[3]]);
        tail += f64::from(xv) * f64::from(yv);
    }
    acc.iter().map(|&v| f64::from(v)).sum::<f64>() + tail
}

/// Face-parsing classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FaceClass {
    Background = 0,
    Skin = 1,
    Nose = 2,
    Eyes = 3,
    Brows = 4,
    Mouth = 5,
    Hair = 6,
    FacialHair = 7,
    OtherFace = 8,
}

impl FaceClass {
    pub const MAX: u8 = 8;

    /// Whether the class counts as visible face for area and IoU. Hair and
    /// facial hair do not.
    pub fn is_face(code: u8) -> bool {
        matches!(code, 1..=5 | 8)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRaster {
    pub width: u32,
    pub height: u32,
    pub classes: Vec<u8>,
}

impl MaskRaster {
    pub fn filled(width: u32, height: u32, class: FaceClass) -> MaskRaster {
        MaskRaster {
            width,
            height,
            classes: vec![class as u8; width as usize * height as usize],
        }
    }

    pub fn new(width: u32, height: u32, classes: Vec<u8>) -> Result<MaskRaster> {
        let m = MaskRaster {
            width,
            height,
            classes,
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Format("mask dimensions must be positive".into()));
        }
        let n = self.width as usize * self.height as usize;
        if self.classes.len() != n {
            return Err(Error::Format(format!(
                "mask {}x{} needs {n} entries, has {}",
                self.width,
                self.height,
                self.classes.len()
            )));
        }
        if let Some(pos) = self.classes.iter().position(|&c| c > FaceClass::MAX) {
            return Err(Error::Format(format!(
                "mask class {} at pixel {pos} exceeds {}",
                self.classes[pos],
                FaceClass::MAX
            )));
        }
        Ok(())
    }

    pub fn at(&self, x: u32, y: u32) -> u8 {
        self.classes[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, class: FaceClass) {
        let w = self.width;
        self.classes[(y * w + x) as usize] = class as u8;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        raster_bytes(MASK_MAGIC, self.width, self.height, &self.classes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MaskRaster> {
        let (width, height, payload) = parse_raster(MASK_MAGIC, bytes)?;
        MaskRaster::new(width, height, payload.to_vec())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MaskRaster> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        MaskRaster::from_bytes(&bytes)
    }
}

/// 8-bit grayscale image aligned with a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayRaster {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayRaster {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<GrayRaster> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::Format(format!(
                "gray raster {width}x{height} needs {} pixels, has {}",
                width as usize * height as usize,
                pixels.len()
            )));
        }
        Ok(GrayRaster {
            width,
            height,
            pixels,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        raster_bytes(GRAY_MAGIC, self.width, self.height, &self.pixels)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<GrayRaster> {
        let (width, height, payload) = parse_raster(GRAY_MAGIC, bytes)?;
        GrayRaster::new(width, height, payload.to_vec())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GrayRaster> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        GrayRaster::from_bytes(&bytes)
    }
}

pub(crate) fn raster_header(magic: &[u8; 4], width: u32, height: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(RASTER_HEADER);
    out.extend_from_slice(magic);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out
}

fn raster_bytes(magic: &[u8; 4], width: u32, height: u32, payload: &[u8]) -> Vec<u8> {
    let mut out = raster_header(magic, width, height);
    out.extend_from_slice(payload);
    out
}

fn parse_raster<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(u32, u32, &'a [u8])> {
    if bytes.len() < RASTER_HEADER {
        return Err(Error::Format("raster shorter than its header".into()));
    }
    if &bytes[0..4] != magic {
        return Err(Error::Format(format!(
            "bad raster magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[0..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported raster format version {}",
            bytes[4]
        )));
    }
    let width = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
    let n = width as usize * height as usize;
    let payload = &bytes[RASTER_HEADER..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "raster {width}x{height} promises {n} bytes, payload has {}",
            payload.len()
        )));
    }
    Ok((width, height, payload))
}

pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    EmbeddingIndexOutOfRange {
        image_id: String,
        embedding_index: u64,
        count: usize,
    },
    NonUnitRow {
        row: usize,
        norm: f64,
    },
    FieldRange {
        image_id: String,
        field: &'static str,
        value: f64,
    },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::EmbeddingIndexOutOfRange {
                image_id,
                embedding_index,
                count,
            } => write!(
                f,
                "{image_id}: embedding_index {embedding_index} out of range (store has {count} rows)"
            ),
            Finding::NonUnitRow { row, norm } => write!(f, "row {row}: norm {norm} is not unit"),
            Finding::FieldRange {
                image_id,
                field,
                value,
            } => write!(f, "{image_id}: {field} = {value} out of range"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
    pub group_counts: BTreeMap<DemographicGroup, usize>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Cross-checks a manifest against its embedding store. Never fails; every
/// problem becomes a finding.
pub fn validate(manifest: &Manifest, store: &EmbeddingStore) -> ValidationReport {
    let mut report = ValidationReport::default();
    for r in &manifest.records {
        *report.group_counts.entry(r.group()).or_default() += 1;
        if r.embedding_index >= store.count() as u64 {
            report.findings.push(Finding::EmbeddingIndexOutOfRange {
                image_id: r.image_id.clone(),
                embedding_index: r.embedding_index,
                count: store.count(),
            });
        }
        let mut range = |field: &'static str, value: Option<f64>, lo: f64, hi: f64| {
            if let Some(v) = value {
                if !(v >= lo && v <= hi) {
                    report.findings.push(Finding::FieldRange {
                        image_id: r.image_id.clone(),
                        field,
                        value: v,
                    });
                }
            }
        };
        range("q_faceqnet", r.q_faceqnet, 0.0, 1.0);
        range("q_magface", r.q_magface, 0.0, f64::MAX);
        range("brightness_fsb", r.brightness_fsb, 0.0, 255.0);
        range("face_area_ratio", r.face_area_ratio, 0.0, 1.0);
        range("pitch", r.pitch, -180.0, 180.0);
        range("yaw", r.yaw, -180.0, 180.0);
        range("roll", r.roll, -180.0, 180.0);
    }
    for row in 0..store.count() {
        let norm = store.norm(row);
        if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
            report.findings.push(Finding::NonUnitRow { row, norm });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, identity: &str, idx: u64) -> ImageRecord {
        let mut r = ImageRecord::new(id, identity, Race::Asian, Gender::Female, AgeGroup::Young, idx);
        r.q_faceqnet = Some(0.5);
        r.yaw = Some(-3.25);
        r
    }

    #[test]
    fn manifest_round_trip_keeps_unknown_keys() {
        let mut m = Manifest::new(
            vec![record("a", "p1", 0), record("b", "p1", 1), record("c", "p2", 2)],
            "source: test\nstage: unit",
        );
        m.records[1]
            .extra
            .insert("future_factor".into(), serde_json::json!({"x": [1, 2]}));
        let back = Manifest::read_from(&m.to_bytes()[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.len(), 3);
    }

    #[test]
    fn empty_manifest_is_valid() {
        let m = Manifest::read_from(&b""[..]).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn duplicate_image_id_names_both_lines() {
        let recs: Vec<String> = ["x00", "x01", "x02", "x03", "x01"]
            .iter()
            .enumerate()
            .map(|(i, id)| serde_json::to_string(&record(id, "p", i as u64)).unwrap())
            .collect();
        let text = recs.join("\n");
        let err = Manifest::read_from(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Integrity(_)));
        assert!(msg.contains("lines 2 and 5"), "{msg}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = serde_json::to_string(&record("a", "p", 0)).unwrap();
        let text = format!("# prov\n{good}\n{{not json\n");
        match Manifest::read_from(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn embedding_blob_layout() {
        let store = EmbeddingStore::from_rows(4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let bytes = store.as_bytes();
        assert_eq!(&bytes[..4], b"BAEM");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &4u32.to_le_bytes());
        assert_eq!(&bytes[9..17], &2u64.to_le_bytes());
        assert_eq!(bytes.len(), 17 + 32);
        let again = EmbeddingStore::from_bytes(bytes.to_vec()).unwrap();
        assert_eq!(again.count(), 2);
        assert_eq!(again.vector(1), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_bad_magic_and_truncation() {
        let store = EmbeddingStore::from_rows(4, &[0.5; 12]).unwrap();
        let mut bad = store.as_bytes().to_vec();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(EmbeddingStore::from_bytes(bad), Err(Error::Format(_))));
        // header says 3 rows, payload holds 2
        let mut short = store.as_bytes().to_vec();
        short.truncate(17 + 2 * 16);
        assert!(matches!(EmbeddingStore::from_bytes(short), Err(Error::Format(_))));
    }

    #[test]
    fn mapped_store_reads_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.baem");
        let store = EmbeddingStore::from_rows(3, &[1.0, 0.0, 0.0, 0.6, 0.8, 0.0]).unwrap();
        store.write(&path).unwrap();
        let mapped = EmbeddingStore::open(&path).unwrap();
        assert_eq!(mapped.dim(), 3);
        assert!((mapped.dot(0, 1) - 0.6).abs() < 1e-7);
        assert_eq!(mapped.get(2), None);
    }

    #[test]
    fn dot_matches_naive_for_odd_dims() {
        let a: Vec<f32> = (0..37).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..37).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut rows = a.clone();
        rows.extend_from_slice(&b);
        let store = EmbeddingStore::from_rows(37, &rows).unwrap();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
        assert!((store.dot(0, 1) - naive).abs() < 1e-5);
    }

    #[test]
    fn mask_format_rejects_class_nine() {
        let m = MaskRaster::filled(2, 2, FaceClass::Skin);
        let mut bytes = m.to_bytes();
        assert_eq!(MaskRaster::from_bytes(&bytes).unwrap(), m);
        *bytes.last_mut().unwrap() = 9;
        assert!(matches!(MaskRaster::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn validate_reports_findings() {
        let mut recs: Vec<ImageRecord> = (0..10)
            .map(|i| record(&format!("i{i}"), &format!("p{}", i / 2), i))
            .collect();
        let mut rows = Vec::new();
        for i in 0..10 {
            let mut v = vec![0f32; 8];
            v[i % 8] = 1.0;
            rows.extend(v);
        }
        let store = EmbeddingStore::from_rows(8, &rows).unwrap();
        let m = Manifest::new(recs.clone(), "t");
        let rep = validate(&m, &store);
        assert!(rep.is_clean(), "{:?}", rep.findings);
        assert_eq!(rep.group_counts[&"AF".parse().unwrap()], 10);

        recs[3].embedding_index = 10;
        let rep = validate(&Manifest::new(recs, "t"), &store);
        assert_eq!(rep.findings.len(), 1);
        assert!(matches!(rep.findings[0], Finding::EmbeddingIndexOutOfRange { .. }));

        rows[8] = 2.0; // row 1 = (0, 2, 0, ...)
        rows[9] = 0.0;
        let store = EmbeddingStore::from_rows(8, &rows).unwrap();
        let rep = validate(&m, &store);
        assert_eq!(rep.findings, vec![Finding::NonUnitRow { row: 1, norm: 2.0 }]);
    }

    #[test]
    fn group_codes_round_trip() {
        for g in DemographicGroup::ALL {
            assert_eq!(g.code().parse::<DemographicGroup>().unwrap(), g);
        }
        let mut sorted = DemographicGroup::ALL.to_vec();
        sorted.sort();
        assert_eq!(sorted, DemographicGroup::ALL.to_vec());
    }
}
