//! Domain types shared across the toolkit: attention tensors, region maps,
//! sample metadata and head identifiers.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed deviation of a row sum from 1, for rows stored as 32-bit floats.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

/// Name of the region every dump must carry.
pub const IMAGE_REGION: &str = "image";
/// Name of the question bounding-box region (a sub-span of the image).
pub const QBBOX_REGION: &str = "qbbox";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn check_bounds(self, layers: usize, heads: usize) -> Result<()> {
        if self.layer < layers && self.head < heads {
            Ok(())
        } else {
            Err(Error::HeadOutOfBounds {
                head: self,
                layers,
                heads,
            })
        }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.head)
    }
}

/// Answer-token attention of one sample, laid out `[layer][head][token]`.
///
/// Every row is a probability distribution over the input sequence: entries
/// are finite and nonnegative and sum to 1 within [`ROW_SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    layers: usize,
    heads: usize,
    seq_len: usize,
    values: Vec<f32>,
}

/// One broken tensor invariant, located by (layer, head) and, where it
/// applies, token.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueViolation {
    NonFinite {
        layer: usize,
        head: usize,
        token: usize,
        value: f32,
    },
    Negative {
        layer: usize,
        head: usize,
        token: usize,
        value: f32,
    },
    RowSum {
        layer: usize,
        head: usize,
        sum: f64,
    },
}

impl From<ValueViolation> for Error {
    fn from(v: ValueViolation) -> Self {
        match v {
            ValueViolation::NonFinite {
                layer,
                head,
                token,
                value,
            } => Error::NonFinite {
                layer,
                head,
                token,
                value,
            },
            ValueViolation::Negative {
                layer,
                head,
                token,
                value,
            } => Error::Negative {
                layer,
                head,
                token,
                value: value as f64,
            },
            ValueViolation::RowSum { layer, head, sum } => Error::RowNormalization {
                layer,
                head,
                sum,
                tolerance: ROW_SUM_TOLERANCE,
            },
        }
    }
}

/// Scans `values` (laid out `[layer][head][token]`) and returns every broken
/// invariant. A row with a non-finite or negative entry is not also reported
/// for its sum.
pub fn scan_values(heads: usize, seq_len: usize, values: &[f32]) -> Vec<ValueViolation> {
    let mut out = Vec::new();
    if seq_len == 0 || heads == 0 {
        return out;
    }
    for (row_idx, row) in values.chunks_exact(seq_len).enumerate() {
        let layer = row_idx / heads;
        let head = row_idx % heads;
        let mut bad_entry = false;
        for (token, &value) in row.iter().enumerate() {
            if !value.is_finite() {
                out.push(ValueViolation::NonFinite {
                    layer,
                    head,
                    token,
                    value,
                });
                bad_entry = true;
            } else if value < 0.0 {
                out.push(ValueViolation::Negative {
                    layer,
                    head,
                    token,
                    value,
                });
                bad_entry = true;
            }
        }
        if !bad_entry {
            let sum = row_sum(row);
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                out.push(ValueViolation::RowSum { layer, head, sum });
            }
        }
    }
    out
}

fn row_sum(row: &[f32]) -> f64 {
    row.iter().map(|&v| v as f64).sum()
}

impl AttentionTensor {
    /// Builds a tensor, checking shape and every row invariant.
    pub fn new(layers: usize, heads: usize, seq_len: usize, values: Vec<f32>) -> Result<Self> {
        if layers == 0 || heads == 0 || seq_len == 0 {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {layers}x{heads}x{seq_len}"
            )));
        }
        let expected = layers
            .checked_mul(heads)
            .and_then(|v| v.checked_mul(seq_len))
            .ok_or_else(|| Error::Shape("dimensions overflow".into()))?;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{layers}x{heads}x{seq_len} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(v) = scan_values(heads, seq_len, &values).into_iter().next() {
            return Err(v.into());
        }
        Ok(Self {
            layers,
            heads,
            seq_len,
            values,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Attention row of `head` over the input sequence.
    ///
    /// Panics if `head` is outside the tensor.
    pub fn row(&self, head: HeadId) -> &[f32] {
        assert!(head.layer < self.layers && head.head < self.heads, "head {head} out of bounds");
        let start = (head.layer * self.heads + head.head) * self.seq_len;
        &self.values[start..start + self.seq_len]
    }

    pub fn head_ids(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.layers).flat_map(move |l| (0..self.heads).map(move |h| HeadId::new(l, h)))
    }
}

/// Named half-open token span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl Region {
    pub fn new(name: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            name: name.into(),
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    seq_len: usize,
    regions: Vec<Region>,
}

/// Returns a description of every broken region-map invariant.
pub fn region_violations(seq_len: usize, regions: &[Region]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, r) in regions.iter().enumerate() {
        if r.start >= r.end || r.end > seq_len {
            out.push(format!(
                "region {:?} span [{}, {}) invalid for sequence length {seq_len}",
                r.name, r.start, r.end
            ));
        }
        if regions[..i].iter().any(|o| o.name == r.name) {
            out.push(format!("region name {:?} repeated", r.name));
        }
    }
    let image = regions.iter().find(|r| r.name == IMAGE_REGION);
    match image {
        None => out.push("mandatory region absent: \"image\"".to_string()),
        Some(image) => {
            if let Some(q) = regions.iter().find(|r| r.name == QBBOX_REGION) {
                if q.start < image.start || q.end > image.end {
                    out.push(format!(
                        "qbbox [{}, {}) not inside image [{}, {})",
                        q.start, q.end, image.start, image.end
                    ));
                }
            }
        }
    }
    out
}

impl RegionMap {
    pub fn new(seq_len: usize, regions: Vec<Region>) -> Result<Self> {
        if let Some(msg) = region_violations(seq_len, &regions).into_iter().next() {
            return Err(Error::Region(msg));
        }
        Ok(Self { seq_len, regions })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn get(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn image(&self) -> &Region {
        self.get(IMAGE_REGION).expect("validated at construction")
    }

    pub fn qbbox(&self) -> Option<&Region> {
        self.get(QBBOX_REGION)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    General,
    Object,
    Super,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [QuestionType::General, QuestionType::Object, QuestionType::Super];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    Plain,
    Visual,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 2] = [PromptVariant::Plain, PromptVariant::Visual];
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionType::General => "general",
            QuestionType::Object => "object",
            QuestionType::Super => "super",
        })
    }
}

impl std::str::FromStr for QuestionType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        QuestionType::ALL
            .into_iter()
            .find(|q| q.to_string() == s)
            .ok_or_else(|| format!("unknown question type {s:?} (expected general, object or super)"))
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptVariant::Plain => "plain",
            PromptVariant::Visual => "visual",
        })
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        PromptVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| format!("unknown prompt variant {s:?} (expected plain or visual)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub question_type: QuestionType,
    pub prompt_variant: PromptVariant,
    pub gold_answer: u32,
    #[serde(default)]
    pub model_answer: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

impl SampleMeta {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(1..=7).contains(&self.gold_answer) {
            out.push(format!("gold_answer {} outside 1..=7", self.gold_answer));
        }
        if let Some(correct) = self.correct {
            if correct != (self.model_answer == Some(self.gold_answer)) {
                out.push(format!(
                    "correct={correct} disagrees with model_answer {:?} vs gold {}",
                    self.model_answer, self.gold_answer
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some(msg) => Err(Error::Meta(msg)),
            None => Ok(()),
        }
    }

    /// Correctness, derived from the answers when not recorded explicitly.
    pub fn is_correct(&self) -> Option<bool> {
        self.correct
            .or_else(|| self.model_answer.map(|a| a == self.gold_answer))
    }
}

/// One of the three contiguous thirds of a model's layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Early,
    Mid,
    Late,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Early, Stage::Mid, Stage::Late];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Early => "early",
            Stage::Mid => "mid",
            Stage::Late => "late",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "early" => Ok(Stage::Early),
            "mid" => Ok(Stage::Mid),
            "late" => Ok(Stage::Late),
            other => Err(format!("unknown stage {other:?} (expected early, mid or late)")),
        }
    }
}

/// How heads are picked for a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionRule {
    Top,
    Random,
    Others,
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionRule::Top => "top",
            SelectionRule::Random => "random",
            SelectionRule::Others => "others",
        })
    }
}

impl std::str::FromStr for SelectionRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "top" => Ok(SelectionRule::Top),
            "random" => Ok(SelectionRule::Random),
            "others" => Ok(SelectionRule::Others),
            other => Err(format!("unknown rule {other:?} (expected top, random or others)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub rule: Option<SelectionRule>,
    pub stage: Option<Stage>,
    pub k: usize,
    pub seed: Option<u64>,
    /// For the `others` rule: how many top-ranked heads were skipped first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub others_skip: Option<usize>,
}

/// A set of heads to zero-ablate, with a record of how it was chosen.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskSpec {
    pub heads: BTreeSet<HeadId>,
    pub provenance: MaskProvenance,
}

impl MaskSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_heads(heads: impl IntoIterator<Item = HeadId>) -> Self {
        let heads: BTreeSet<HeadId> = heads.into_iter().collect();
        let k = heads.len();
        Self {
            heads,
            provenance: MaskProvenance {
                k,
                ..MaskProvenance::default()
            },
        }
    }

    pub fn contains(&self, head: HeadId) -> bool {
        self.heads.contains(&head)
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn check_bounds(&self, layers: usize, heads: usize) -> Result<()> {
        self.heads.iter().try_for_each(|h| h.check_bounds(layers, heads))
    }
}
