use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::ToySample;
use super::model::ToyModel;
use crate::aggregate::{accumulate, rank_heads, HeadStatsTable, SampleRef, Selection};
use crate::atnd::{write_atnd, ManifestEntry};
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::seed::sub_seed;
use crate::types::{MaskSpec, SampleMeta, SelectionRule, Stage};

/// One masking experiment: pick `k` heads of `stage` (all layers when
/// `None`) by `rule` and zero-ablate them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRow {
    pub stage: Option<Stage>,
    pub rule: SelectionRule,
    pub k: usize,
}

impl PlanRow {
    pub fn new(stage: Option<Stage>, rule: SelectionRule, k: usize) -> Self {
        Self { stage, rule, k }
    }

    fn stage_label(&self) -> String {
        self.stage.map_or_else(|| "all".to_string(), |s| s.to_string())
    }

    /// Seed of this row's random mask, stable under plan reordering.
    pub fn mask_seed(&self, root: u64) -> u64 {
        sub_seed(root, &format!("mask/{}/{}/{}", self.stage_label(), self.rule, self.k))
    }
}

/// Full stages x rules grid at one `k`.
pub fn full_plan(rules: &[SelectionRule], k: usize) -> Vec<PlanRow> {
    Stage::ALL
        .iter()
        .flat_map(|&s| rules.iter().map(move |&r| PlanRow::new(Some(s), r, k)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub stage: Option<Stage>,
    pub rule: SelectionRule,
    pub k: usize,
    pub baseline: f64,
    pub masked: f64,
    /// `baseline - masked`, in accuracy fractions.
    pub abs_drop: f64,
    /// `abs_drop / baseline`; 0 when the baseline is 0.
    pub rel_drop: f64,
    pub mask: MaskSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: f64,
    pub samples: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,rule,k,baseline,masked,abs_drop,rel_drop\n");
        for r in &self.rows {
            let stage = r.stage.map_or_else(|| "all".to_string(), |s| s.to_string());
            out.push_str(&format!(
                "{stage},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.rule, r.k, r.baseline, r.masked, r.abs_drop, r.rel_drop
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn row(&self, stage: Option<Stage>, rule: SelectionRule, k: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.stage == stage && r.rule == rule && r.k == k)
    }
}

/// Head statistics of `model` over `samples` from unmasked forward passes.
pub fn head_stats(
    model: &ToyModel,
    samples: &[ToySample],
    cfg: &MetricConfig,
    model_id: &str,
    dataset_id: &str,
) -> Result<HeadStatsTable> {
    let outputs = samples
        .par_iter()
        .map(|s| model.forward(s, &MaskSpec::none()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<SampleRef<'_>> = samples
        .iter()
        .zip(&outputs)
        .map(|(s, o)| SampleRef {
            sample_id: &s.sample_id,
            tensor: &o.attention,
            regions: &o.regions,
        })
        .collect();
    accumulate(refs, cfg, model_id, dataset_id)
}

/// Evaluates every plan row independently against the unmasked baseline.
/// Random masks draw from [`PlanRow::mask_seed`] under `seed`.
pub fn ablation_protocol(
    model: &ToyModel,
    dataset: &[ToySample],
    stats: &HeadStatsTable,
    plan: &[PlanRow],
    seed: u64,
) -> Result<AblationReport> {
    let cfg = model.config();
    if stats.layers != cfg.layers || stats.heads != cfg.heads {
        return Err(Error::ShapeMismatch(format!(
            "stats table is {}x{} but model is {}x{}",
            stats.layers, stats.heads, cfg.layers, cfg.heads
        )));
    }
    let baseline = model.accuracy(dataset, &MaskSpec::none())?;
    let rows = plan
        .par_iter()
        .map(|row| {
            let sel = Selection::new(row.stage, row.rule, row.k, row.mask_seed(seed));
            let mask = rank_heads(stats, &sel)?;
            let masked = model.accuracy(dataset, &mask)?;
            let abs_drop = baseline - masked;
            Ok(AblationRow {
                stage: row.stage,
                rule: row.rule,
                k: row.k,
                baseline,
                masked,
                abs_drop,
                rel_drop: if baseline > 0.0 { abs_drop / baseline } else { 0.0 },
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        baseline,
        samples: dataset.len(),
        rows,
    })
}

pub fn sample_meta(sample: &ToySample, model_answer: Option<u32>) -> SampleMeta {
    SampleMeta {
        sample_id: sample.sample_id.clone(),
        question_type: sample.question_type,
        prompt_variant: sample.prompt_variant,
        gold_answer: sample.gold_answer(),
        model_answer,
        correct: model_answer.map(|a| a == sample.gold_answer()),
    }
}

/// Runs every sample under `mask`, writes `<sample_id>.atnd` into `dir` and
/// returns manifest entries with paths relative to `dir`, in sample order.
pub fn write_dumps(
    model: &ToyModel,
    samples: &[ToySample],
    mask: &MaskSpec,
    dir: impl AsRef<Path>,
) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    samples
        .par_iter()
        .map(|s| {
            let out = model.forward(s, mask)?;
            let meta = sample_meta(s, Some(out.answer));
            let name = format!("{}.atnd", s.sample_id);
            write_atnd(&out.attention, &out.regions, &meta, dir.join(&name))?;
            Ok(ManifestEntry::from_meta(&meta, name))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{build_model, gen_dataset, ToyModelConfig};

    #[test]
    fn empty_plan_records_baseline() {
        let cfg = ToyModelConfig::default();
        let model = build_model(&cfg).unwrap();
        let data = gen_dataset(&cfg, 20, 1).unwrap();
        let stats = head_stats(&model, &data, &MetricConfig::default(), "toy", "d").unwrap();
        let report = ablation_protocol(&model, &data, &stats, &[], 0).unwrap();
        assert!(report.rows.is_empty());
        assert!(report.baseline > 0.0);
        assert_eq!(report.to_csv(), "stage,rule,k,baseline,masked,abs_drop,rel_drop\n");
    }

    #[test]
    fn full_plan_shape() {
        let plan = full_plan(&[SelectionRule::Top, SelectionRule::Random], 20);
        assert_eq!(plan.len(), 6);
        assert_eq!(plan[0], PlanRow::new(Some(Stage::Early), SelectionRule::Top, 20));
        assert_eq!(plan[5], PlanRow::new(Some(Stage::Late), SelectionRule::Random, 20));
    }

    #[test]
    fn mask_seeds_differ_per_row() {
        let a = PlanRow::new(Some(Stage::Early), SelectionRule::Random, 20).mask_seed(1);
        let b = PlanRow::new(Some(Stage::Mid), SelectionRule::Random, 20).mask_seed(1);
        assert_ne!(a, b);
    }
}
