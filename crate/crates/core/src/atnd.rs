//! ATND v1: one sample's answer-token attention plus its region map and
//! metadata in a single little-endian binary file.
//!
//! ```text
//! "ATND" | version u32 | L u32 | H u32 | N u32 | region_count u32
//! per region: name_len u32 | name (UTF-8) | start u32 | end u32
//! meta_len u32 | meta (UTF-8 JSON of SampleMeta)
//! payload: L*H*N f32, index order [l][h][j]
//! ```
//!
//! Datasets are a directory of these files indexed by a JSONL manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    region_violations, scan_values, AttentionTensor, PromptVariant, QuestionType, Region, RegionMap, SampleMeta,
    ValueViolation, ROW_SUM_TOLERANCE,
};

pub const MAGIC: [u8; 4] = *b"ATND";
pub const VERSION: u32 = 1;

/// Serializes a dump to bytes after checking every invariant.
pub fn encode(tensor: &AttentionTensor, regions: &RegionMap, meta: &SampleMeta) -> Result<Vec<u8>> {
    if regions.seq_len() != tensor.seq_len() {
        return Err(Error::Shape(format!(
            "region map covers {} tokens, tensor has {}",
            regions.seq_len(),
            tensor.seq_len()
        )));
    }
    meta.validate()?;
    let meta_json = serde_json::to_vec(meta)?;

    let mut buf = Vec::with_capacity(24 + meta_json.len() + tensor.values().len() * 4);
    buf.extend_from_slice(&MAGIC);
    for v in [VERSION, to_u32(tensor.layers())?, to_u32(tensor.heads())?, to_u32(tensor.seq_len())?] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&to_u32(regions.regions().len())?.to_le_bytes());
    for r in regions.regions() {
        buf.extend_from_slice(&to_u32(r.name.len())?.to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.extend_from_slice(&to_u32(r.start)?.to_le_bytes());
        buf.extend_from_slice(&to_u32(r.end)?.to_le_bytes());
    }
    buf.extend_from_slice(&to_u32(meta_json.len())?.to_le_bytes());
    buf.extend_from_slice(&meta_json);
    for v in tensor.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Shape(format!("{v} does not fit in u32")))
}

pub fn write_atnd(
    tensor: &AttentionTensor,
    regions: &RegionMap,
    meta: &SampleMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor, regions, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Layout-level parse result; nothing beyond byte structure is checked yet.
#[derive(Debug)]
struct RawDump {
    layers: usize,
    heads: usize,
    seq_len: usize,
    regions: Vec<Region>,
    meta: Vec<u8>,
    values: Vec<f32>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64, what: &'static str) -> Result<&'a [u8]> {
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n > remaining {
            return Err(Error::Truncated {
                what,
                expected: n,
                actual: remaining,
            });
        }
        let n = n as usize;
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_raw(bytes: &[u8]) -> Result<RawDump> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let layers = cur.u32("layer count")? as usize;
    let heads = cur.u32("head count")? as usize;
    let seq_len = cur.u32("sequence length")? as usize;
    let region_count = cur.u32("region count")?;

    let mut regions = Vec::new();
    for _ in 0..region_count {
        let name_len = cur.u32("region name length")?;
        let name = cur.take(name_len as u64, "region name")?;
        let name = std::str::from_utf8(name)
            .map_err(|e| Error::Region(format!("region name is not UTF-8: {e}")))?
            .to_string();
        let start = cur.u32("region start")? as usize;
        let end = cur.u32("region end")? as usize;
        regions.push(Region { name, start, end });
    }
    let meta_len = cur.u32("meta length")?;
    let meta = cur.take(meta_len as u64, "meta block")?.to_vec();

    let count = layers as u64 * heads as u64 * seq_len as u64;
    let payload = cur.take(count * 4, "payload")?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let trailing = (bytes.len() - cur.pos) as u64;
    if trailing != 0 {
        return Err(Error::TrailingBytes(trailing));
    }
    Ok(RawDump {
        layers,
        heads,
        seq_len,
        regions,
        meta,
        values,
    })
}

pub fn decode(bytes: &[u8]) -> Result<(AttentionTensor, RegionMap, SampleMeta)> {
    let raw = parse_raw(bytes)?;
    let tensor = AttentionTensor::new(raw.layers, raw.heads, raw.seq_len, raw.values)?;
    let regions = RegionMap::new(raw.seq_len, raw.regions)?;
    let meta: SampleMeta =
        serde_json::from_slice(&raw.meta).map_err(|e| Error::Meta(format!("meta block is not valid JSON: {e}")))?;
    meta.validate()?;
    Ok((tensor, regions, meta))
}

pub fn read_atnd(path: impl AsRef<Path>) -> Result<(AttentionTensor, RegionMap, SampleMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Io,
    BadMagic,
    UnsupportedVersion,
    Truncated,
    TrailingBytes,
    Shape,
    NonFinite,
    Negative,
    RowSum,
    Region,
    Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    pub message: String,
}

impl Violation {
    fn plain(kind: ViolationKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            layer: None,
            head: None,
            token: None,
            sum: None,
            tolerance: None,
            message: message.into(),
        }
    }

    fn from_error(err: &Error) -> Self {
        let kind = match err {
            Error::Io { .. } => ViolationKind::Io,
            Error::BadMagic { .. } => ViolationKind::BadMagic,
            Error::UnsupportedVersion(_) => ViolationKind::UnsupportedVersion,
            Error::Truncated { .. } => ViolationKind::Truncated,
            Error::TrailingBytes(_) => ViolationKind::TrailingBytes,
            Error::Region(_) => ViolationKind::Region,
            Error::Meta(_) | Error::Json(_) => ViolationKind::Meta,
            _ => ViolationKind::Shape,
        };
        Self::plain(kind, err.to_string())
    }

    fn from_value(v: &ValueViolation) -> Self {
        let message = Error::from(v.clone()).to_string();
        match *v {
            ValueViolation::NonFinite {
                layer, head, token, ..
            } => Self {
                layer: Some(layer),
                head: Some(head),
                token: Some(token),
                ..Self::plain(ViolationKind::NonFinite, message)
            },
            ValueViolation::Negative {
                layer, head, token, ..
            } => Self {
                layer: Some(layer),
                head: Some(head),
                token: Some(token),
                ..Self::plain(ViolationKind::Negative, message)
            },
            ValueViolation::RowSum { layer, head, sum } => Self {
                layer: Some(layer),
                head: Some(head),
                sum: Some(sum),
                tolerance: Some(ROW_SUM_TOLERANCE),
                ..Self::plain(ViolationKind::RowSum, message)
            },
        }
    }
}

/// Every invariant a dump breaks; empty iff the file reads back cleanly.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_bytes(bytes: &[u8]) -> ValidationReport {
    let raw = match parse_raw(bytes) {
        Ok(raw) => raw,
        Err(e) => {
            return ValidationReport {
                violations: vec![Violation::from_error(&e)],
            }
        }
    };
    let mut violations = Vec::new();
    if raw.layers == 0 || raw.heads == 0 || raw.seq_len == 0 {
        violations.push(Violation::plain(
            ViolationKind::Shape,
            format!(
                "dimensions must be positive, got {}x{}x{}",
                raw.layers, raw.heads, raw.seq_len
            ),
        ));
    }
    violations.extend(
        scan_values(raw.heads, raw.seq_len, &raw.values)
            .iter()
            .map(Violation::from_value),
    );
    violations.extend(
        region_violations(raw.seq_len, &raw.regions)
            .into_iter()
            .map(|m| Violation::plain(ViolationKind::Region, m)),
    );
    match serde_json::from_slice::<SampleMeta>(&raw.meta) {
        Ok(meta) => violations.extend(
            meta.violations()
                .into_iter()
                .map(|m| Violation::plain(ViolationKind::Meta, m)),
        ),
        Err(e) => violations.push(Violation::plain(
            ViolationKind::Meta,
            format!("meta block is not valid JSON: {e}"),
        )),
    }
    ValidationReport { violations }
}

pub fn validate_dump(path: impl AsRef<Path>) -> ValidationReport {
    let path = path.as_ref();
    match fs::read(path) {
        Ok(bytes) => validate_bytes(&bytes),
        Err(e) => ValidationReport {
            violations: vec![Violation::from_error(&Error::io(path, e))],
        },
    }
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Dump location, relative to the manifest's directory unless absolute.
    pub path: String,
    pub question_type: QuestionType,
    pub prompt_variant: PromptVariant,
    pub gold_answer: u32,
    #[serde(default)]
    pub model_answer: Option<u32>,
}

impl ManifestEntry {
    pub fn from_meta(meta: &SampleMeta, path: impl Into<String>) -> Self {
        Self {
            sample_id: meta.sample_id.clone(),
            path: path.into(),
            question_type: meta.question_type,
            prompt_variant: meta.prompt_variant,
            gold_answer: meta.gold_answer,
            model_answer: meta.model_answer,
        }
    }

    pub fn correct(&self) -> Option<bool> {
        self.model_answer.map(|a| a == self.gold_answer)
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, entries })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{PromptVariant, QuestionType};

    fn sample() -> (AttentionTensor, RegionMap, SampleMeta) {
        let values = vec![0.25f32; 16];
        let tensor = AttentionTensor::new(2, 2, 4, values).unwrap();
        let regions = RegionMap::new(
            4,
            vec![Region::new("text", 0, 1), Region::new("image", 1, 3), Region::new("question", 3, 4)],
        )
        .unwrap();
        let meta = SampleMeta {
            sample_id: "s-001".into(),
            question_type: QuestionType::General,
            prompt_variant: PromptVariant::Visual,
            gold_answer: 4,
            model_answer: Some(2),
            correct: Some(false),
        };
        (tensor, regions, meta)
    }

    #[test]
    fn file_size_matches_layout() {
        let (t, r, m) = sample();
        let bytes = encode(&t, &r, &m).unwrap();
        let meta_len = serde_json::to_vec(&m).unwrap().len();
        let region_table: usize = r.regions().iter().map(|x| 12 + x.name.len()).sum();
        assert_eq!(bytes.len(), 24 + region_table + 4 + meta_len + 2 * 2 * 4 * 4);
        assert_eq!(&bytes[..4], b"ATND");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.atnd");
        let (t, r, m) = sample();
        write_atnd(&t, &r, &m, &path).unwrap();
        let (t2, r2, m2) = read_atnd(&path).unwrap();
        assert_eq!((t, r, m), (t2, r2, m2));
        assert!(validate_dump(&path).is_valid());
    }

    #[test]
    fn bad_magic_and_version() {
        let (t, r, m) = sample();
        let mut bytes = encode(&t, &r, &m).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic { found }) if &found == b"XTND"));
        let report = validate_bytes(&bytes);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::BadMagic);

        let mut bytes = encode(&t, &r, &m).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let (t, r, m) = sample();
        let mut bytes = encode(&t, &r, &m).unwrap();
        bytes.truncate(bytes.len() - 4);
        match decode(&bytes) {
            Err(Error::Truncated {
                what,
                expected,
                actual,
            }) => {
                assert_eq!(what, "payload");
                assert_eq!(expected, 64);
                assert_eq!(actual, 60);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        let mut extra = encode(&t, &r, &m).unwrap();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::TrailingBytes(1))));
    }

    #[test]
    fn writer_refuses_invalid_meta() {
        let (t, r, mut m) = sample();
        m.gold_answer = 0;
        assert!(encode(&t, &r, &m).is_err());
    }

    #[test]
    fn validator_reports_missing_image_region() {
        let (t, _, m) = sample();
        // Hand-assemble a dump whose only region is "text".
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"ATND");
        for v in [1u32, 2, 2, 4, 1, 4] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(b"text");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        let meta = serde_json::to_vec(&m).unwrap();
        bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&meta);
        for v in t.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let report = validate_bytes(&bytes);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::Region);
        assert!(report.violations[0].message.contains("mandatory region absent"));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, _, m) = sample();
        let entries = vec![ManifestEntry::from_meta(&m, "dumps/s-001.atnd")];
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &entries).unwrap();
        let manifest = Manifest::read(&path).unwrap();
        assert_eq!(manifest.entries, entries);
        assert_eq!(manifest.resolve(&entries[0]), dir.path().join("dumps/s-001.atnd"));
        assert_eq!(entries[0].correct(), Some(false));
    }
}
