//! Dataset-level reduction of per-sample metrics into per-head tables, plus
//! the views built on those tables: heatmap grids, scatter points, stage
//! partitions and head rankings.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{neumaier_sum, sample_metrics, MetricConfig, SampleMetrics};
use crate::types::{
    AttentionTensor, HeadId, MaskProvenance, MaskSpec, PromptVariant, QuestionType, RegionMap, SampleMeta,
    SelectionRule, Stage,
};

/// Number of top-ranked heads the `others` rule skips unless told otherwise.
pub const DEFAULT_OTHERS_SKIP: usize = 50;

/// Per-head means over a dataset, stored layer-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStatsTable {
    pub model_id: String,
    pub dataset_id: String,
    pub layers: usize,
    pub heads: usize,
    pub sample_count: usize,
    pub mean_image_mass: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_qbbox_mass: Option<Vec<f64>>,
    /// Samples that carried a qbbox region and so fed `mean_qbbox_mass`.
    #[serde(default)]
    pub qbbox_sample_count: usize,
    pub mean_concentration: Vec<f64>,
    pub mean_detection_score: Vec<f64>,
    pub metric_config: MetricConfig,
}

impl HeadStatsTable {
    pub fn index(&self, head: HeadId) -> usize {
        head.layer * self.heads + head.head
    }

    pub fn head_ids(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.layers).flat_map(move |l| (0..self.heads).map(move |h| HeadId::new(l, h)))
    }

    pub fn metric(&self, metric: HeadMetric) -> Result<&[f64]> {
        Ok(match metric {
            HeadMetric::ImageMass => &self.mean_image_mass,
            HeadMetric::QbboxMass => self
                .mean_qbbox_mass
                .as_deref()
                .ok_or(Error::MissingMetric("qbbox_mass"))?,
            HeadMetric::Concentration => &self.mean_concentration,
            HeadMetric::DetectionScore => &self.mean_detection_score,
        })
    }

    pub fn score(&self, head: HeadId) -> f64 {
        self.mean_detection_score[self.index(head)]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(s)?;
        table.check()?;
        Ok(table)
    }

    fn check(&self) -> Result<()> {
        let n = self.layers * self.heads;
        let mut arrays = vec![
            ("mean_image_mass", self.mean_image_mass.len()),
            ("mean_concentration", self.mean_concentration.len()),
            ("mean_detection_score", self.mean_detection_score.len()),
        ];
        if let Some(q) = &self.mean_qbbox_mass {
            arrays.push(("mean_qbbox_mass", q.len()));
        }
        for (name, len) in arrays {
            if len != n {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has {len} cells, expected {}x{}",
                    self.layers, self.heads
                )));
            }
        }
        if self.sample_count == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMetric {
    ImageMass,
    QbboxMass,
    Concentration,
    DetectionScore,
}

impl HeadMetric {
    pub fn name(self) -> &'static str {
        match self {
            HeadMetric::ImageMass => "image_mass",
            HeadMetric::QbboxMass => "qbbox_mass",
            HeadMetric::Concentration => "concentration",
            HeadMetric::DetectionScore => "detection_score",
        }
    }

    pub const ALL: [HeadMetric; 4] = [
        HeadMetric::ImageMass,
        HeadMetric::QbboxMass,
        HeadMetric::Concentration,
        HeadMetric::DetectionScore,
    ];
}

impl FromStr for HeadMetric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        HeadMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

/// Collects per-sample metrics and reduces them to a [`HeadStatsTable`].
///
/// The reduction sorts by sample id before summing, so the result is the
/// same whatever order samples arrive in.
#[derive(Debug)]
pub struct Accumulator {
    layers: usize,
    heads: usize,
    cfg: MetricConfig,
    entries: Vec<(String, SampleMetrics)>,
}

impl Accumulator {
    pub fn new(layers: usize, heads: usize, cfg: MetricConfig) -> Self {
        Self {
            layers,
            heads,
            cfg,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, sample_id: impl Into<String>, metrics: SampleMetrics) -> Result<()> {
        let n = self.layers * self.heads;
        if metrics.image_mass.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "sample has {} heads, table has {}x{}",
                metrics.image_mass.len(),
                self.layers,
                self.heads
            )));
        }
        self.entries.push((sample_id.into(), metrics));
        Ok(())
    }

    pub fn finish(mut self, model_id: &str, dataset_id: &str) -> Result<HeadStatsTable> {
        if self.entries.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = self.entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateSample(w[0].0.clone()));
        }
        let n = self.layers * self.heads;
        let count = self.entries.len();
        let mean = |get: &dyn Fn(&SampleMetrics) -> &[f64]| -> Vec<f64> {
            (0..n)
                .map(|i| neumaier_sum(self.entries.iter().map(|(_, m)| get(m)[i])) / count as f64)
                .collect()
        };
        let mean_image_mass = mean(&|m| &m.image_mass);
        let mean_concentration = mean(&|m| &m.concentration);
        let mean_detection_score = mean(&|m| &m.detection_score);

        let with_qbbox: Vec<&[f64]> = self
            .entries
            .iter()
            .filter_map(|(_, m)| m.qbbox_mass.as_deref())
            .collect();
        let mean_qbbox_mass = (!with_qbbox.is_empty()).then(|| {
            (0..n)
                .map(|i| neumaier_sum(with_qbbox.iter().map(|q| q[i])) / with_qbbox.len() as f64)
                .collect()
        });

        Ok(HeadStatsTable {
            model_id: model_id.to_string(),
            dataset_id: dataset_id.to_string(),
            layers: self.layers,
            heads: self.heads,
            sample_count: count,
            mean_image_mass,
            mean_qbbox_mass,
            qbbox_sample_count: with_qbbox.len(),
            mean_concentration,
            mean_detection_score,
            metric_config: self.cfg,
        })
    }
}

/// One sample as fed to [`accumulate`].
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub sample_id: &'a str,
    pub tensor: &'a AttentionTensor,
    pub regions: &'a RegionMap,
}

/// Averages every per-head metric over `samples`. Per-sample work runs on the
/// current rayon pool.
pub fn accumulate<'a>(
    samples: impl IntoIterator<Item = SampleRef<'a>>,
    cfg: &MetricConfig,
    model_id: &str,
    dataset_id: &str,
) -> Result<HeadStatsTable> {
    cfg.validate()?;
    let samples: Vec<SampleRef<'a>> = samples.into_iter().collect();
    let first = samples.first().ok_or(Error::EmptyInput)?;
    let (layers, heads) = (first.tensor.layers(), first.tensor.heads());
    if let Some(bad) = samples
        .iter()
        .find(|s| s.tensor.layers() != layers || s.tensor.heads() != heads)
    {
        return Err(Error::ShapeMismatch(format!(
            "sample {:?} is {}x{}, expected {layers}x{heads}",
            bad.sample_id,
            bad.tensor.layers(),
            bad.tensor.heads()
        )));
    }
    let metrics: Vec<SampleMetrics> = samples
        .par_iter()
        .map(|s| sample_metrics(s.tensor, s.regions, cfg))
        .collect::<Result<_>>()?;
    let mut acc = Accumulator::new(layers, heads, *cfg);
    for (s, m) in samples.iter().zip(metrics) {
        acc.push(s.sample_id, m)?;
    }
    acc.finish(model_id, dataset_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correctness {
    Correct,
    Incorrect,
}

/// Slices a dataset by question type, prompt variant and answer correctness.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFilter {
    pub question_type: Option<QuestionType>,
    pub prompt_variant: Option<PromptVariant>,
    pub correctness: Option<Correctness>,
}

impl SampleFilter {
    pub fn accepts(&self, meta: &SampleMeta) -> bool {
        self.question_type.is_none_or(|q| q == meta.question_type)
            && self.prompt_variant.is_none_or(|v| v == meta.prompt_variant)
            && match self.correctness {
                None => true,
                Some(Correctness::Correct) => meta.is_correct() == Some(true),
                Some(Correctness::Incorrect) => meta.is_correct() == Some(false),
            }
    }
}

/// Early, mid and late thirds of a model's layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePartition {
    pub early: Range<usize>,
    pub mid: Range<usize>,
    pub late: Range<usize>,
}

impl StagePartition {
    pub fn range(&self, stage: Stage) -> Range<usize> {
        match stage {
            Stage::Early => self.early.clone(),
            Stage::Mid => self.mid.clone(),
            Stage::Late => self.late.clone(),
        }
    }

    pub fn stage_of(&self, layer: usize) -> Option<Stage> {
        Stage::ALL.into_iter().find(|&s| self.range(s).contains(&layer))
    }

    pub fn layers(&self) -> usize {
        self.late.end
    }
}

/// Splits `layers` at `ceil(L/3)` and `ceil(2L/3)`.
pub fn stage_partition(layers: usize) -> Result<StagePartition> {
    if layers < 3 {
        return Err(Error::TooFewLayers(layers));
    }
    let first = layers.div_ceil(3);
    let second = (2 * layers).div_ceil(3);
    Ok(StagePartition {
        early: 0..first,
        mid: first..second,
        late: second..layers,
    })
}

/// Parameters of a head selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub stage: Option<Stage>,
    pub rule: SelectionRule,
    pub k: usize,
    pub seed: u64,
    /// Top-ranked heads skipped by the `others` rule.
    pub others_skip: usize,
}

impl Selection {
    pub fn new(stage: Option<Stage>, rule: SelectionRule, k: usize, seed: u64) -> Self {
        Self {
            stage,
            rule,
            k,
            seed,
            others_skip: DEFAULT_OTHERS_SKIP,
        }
    }
}

/// Heads of `stage` (or all heads) ordered by descending mean detection
/// score, ties broken by ascending (layer, head).
pub fn ranked_heads(table: &HeadStatsTable, stage: Option<Stage>) -> Result<Vec<HeadId>> {
    let layers = match stage {
        Some(s) => stage_partition(table.layers)?.range(s),
        None => 0..table.layers,
    };
    let mut heads: Vec<HeadId> = table.head_ids().filter(|h| layers.contains(&h.layer)).collect();
    heads.sort_by(|a, b| table.score(*b).total_cmp(&table.score(*a)).then(a.cmp(b)));
    Ok(heads)
}

/// Picks `sel.k` heads by the selection rule:
/// - `top`: the highest-scoring heads;
/// - `random`: uniform without replacement under `sel.seed`;
/// - `others`: the highest-scoring heads once the top `sel.others_skip` are
///   set aside.
pub fn rank_heads(table: &HeadStatsTable, sel: &Selection) -> Result<MaskSpec> {
    let ranked = ranked_heads(table, sel.stage)?;
    let chosen: Vec<HeadId> = match sel.rule {
        SelectionRule::Top => {
            if sel.k > ranked.len() {
                return Err(Error::NotEnoughHeads {
                    requested: sel.k,
                    available: ranked.len(),
                });
            }
            ranked[..sel.k].to_vec()
        }
        SelectionRule::Random => {
            let mut pool = ranked;
            pool.sort();
            if sel.k > pool.len() {
                return Err(Error::NotEnoughHeads {
                    requested: sel.k,
                    available: pool.len(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(sel.seed);
            rand::seq::index::sample(&mut rng, pool.len(), sel.k)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        }
        SelectionRule::Others => {
            let rest = ranked.get(sel.others_skip..).unwrap_or(&[]);
            if sel.k > rest.len() {
                return Err(Error::NotEnoughHeads {
                    requested: sel.k,
                    available: rest.len(),
                });
            }
            rest[..sel.k].to_vec()
        }
    };
    Ok(MaskSpec {
        heads: chosen.into_iter().collect::<BTreeSet<_>>(),
        provenance: MaskProvenance {
            rule: Some(sel.rule),
            stage: sel.stage,
            k: sel.k,
            seed: (sel.rule == SelectionRule::Random).then_some(sel.seed),
            others_skip: (sel.rule == SelectionRule::Others).then_some(sel.others_skip),
        },
    })
}

/// Dense layer x head view of one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub layers: usize,
    pub heads: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.heads + head]
    }

    /// `layer,head,value` rows, layer-major, values in shortest round-trip
    /// form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,value\n");
        for l in 0..self.layers {
            for h in 0..self.heads {
                let _ = writeln!(out, "{l},{h},{}", self.get(l, h));
            }
        }
        out
    }
}

pub fn heatmap_grid(table: &HeadStatsTable, metric: HeadMetric) -> Result<Grid> {
    Ok(Grid {
        layers: table.layers,
        heads: table.heads,
        values: table.metric(metric)?.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub head: HeadId,
    /// Mean image mass.
    pub x: f64,
    /// Mean concentration.
    pub y: f64,
}

pub fn scatter_points(table: &HeadStatsTable) -> Vec<ScatterPoint> {
    table
        .head_ids()
        .map(|head| {
            let i = table.index(head);
            ScatterPoint {
                head,
                x: table.mean_image_mass[i],
                y: table.mean_concentration[i],
            }
        })
        .collect()
}

pub fn scatter_csv(points: &[ScatterPoint]) -> String {
    let mut out = String::from("layer,head,image_mass,concentration\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.head.layer, p.head.head, p.x, p.y);
    }
    out
}
