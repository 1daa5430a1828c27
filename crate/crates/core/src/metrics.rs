//! Per-sample, per-head scalar metrics: region mass, entropy, concentration,
//! the layer modulation curve and the head detection score.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AttentionTensor, HeadId, RegionMap};

/// Which tokens the concentration term of the detection score looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcentrationScope {
    /// The whole attention row.
    #[default]
    FullRow,
    /// The image span only, renormalized to sum to 1.
    ImageOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub eps_entropy: f64,
    pub eps_layer: f64,
    pub k: f64,
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub concentration_scope: ConcentrationScope,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            eps_entropy: 1e-12,
            eps_layer: 1.0,
            k: 1.0,
            a: 1.0,
            b: 0.1,
            concentration_scope: ConcentrationScope::FullRow,
        }
    }
}

impl MetricConfig {
    /// Entropies and their normalizer are measured in bits.
    pub const LOG_BASE: f64 = 2.0;

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be nonnegative and finite, got {v}")))
            }
        };
        positive("eps_entropy", self.eps_entropy)?;
        positive("eps_layer", self.eps_layer)?;
        nonneg("k", self.k)?;
        nonneg("a", self.a)?;
        nonneg("b", self.b)
    }
}

/// Compensated (Neumaier) sum in iteration order.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Total attention a head pays to the tokens in `span`.
pub fn region_mass(tensor: &AttentionTensor, head: HeadId, span: Range<usize>) -> Result<f64> {
    head.check_bounds(tensor.layers(), tensor.heads())?;
    let row = tensor.row(head);
    span_mass(row, span)
}

pub(crate) fn span_mass<T: Into<f64> + Copy>(row: &[T], span: Range<usize>) -> Result<f64> {
    if span.start > span.end || span.end > row.len() {
        return Err(Error::SpanOutOfBounds {
            start: span.start,
            end: span.end,
            len: row.len(),
        });
    }
    Ok(neumaier_sum(row[span].iter().map(|&v| v.into())))
}

/// Shannon entropy in bits, `-sum p * log2(p + eps)`, with zero entries
/// contributing nothing.
///
/// Terms are accumulated in ascending order of probability so the result
/// does not depend on token order.
pub fn entropy<T: Into<f64> + Copy>(row: &[T], cfg: &MetricConfig) -> Result<f64> {
    let mut probs = Vec::with_capacity(row.len());
    for (i, &v) in row.iter().enumerate() {
        let p: f64 = v.into();
        if p < 0.0 || p.is_nan() {
            return Err(Error::NegativeProbability { index: i, value: p });
        }
        if p > 0.0 {
            probs.push(p);
        }
    }
    probs.sort_by(f64::total_cmp);
    let h = -neumaier_sum(probs.iter().map(|&p| p * (p + cfg.eps_entropy).log2()));
    // -0.0 and the tiny negative left by log2(1 + eps) on one-hot rows
    Ok(h.max(0.0))
}

/// `1 - H / log2(N + eps)`: 1 for a one-hot row, about 0 for a uniform one.
pub fn concentration<T: Into<f64> + Copy>(row: &[T], cfg: &MetricConfig) -> Result<f64> {
    if row.len() < 2 {
        return Err(Error::DegenerateLength(row.len()));
    }
    let h = entropy(row, cfg)?;
    Ok(1.0 - h / (row.len() as f64 + cfg.eps_entropy).log2())
}

/// Concentration of the distribution obtained by restricting `row` to `span`
/// and renormalizing. A span carrying no mass has concentration 0.
pub fn concentration_within<T: Into<f64> + Copy>(row: &[T], span: Range<usize>, cfg: &MetricConfig) -> Result<f64> {
    let mass = span_mass(row, span.clone())?;
    if mass <= 0.0 {
        return Ok(0.0);
    }
    let sub: Vec<f64> = row[span].iter().map(|&v| v.into() / mass).collect();
    concentration(&sub, cfg)
}

/// `k / (l + eps_layer) + a * exp(-b * l)`.
pub fn layer_modulation(layer: usize, cfg: &MetricConfig) -> f64 {
    let l = layer as f64;
    cfg.k / (l + cfg.eps_layer) + cfg.a * (-cfg.b * l).exp()
}

/// `mass * (1 + conc * layer_modulation(layer))`.
pub fn detection_score(mass: f64, conc: f64, layer: usize, cfg: &MetricConfig) -> f64 {
    mass * (1.0 + conc * layer_modulation(layer, cfg))
}

/// Every metric for every head of one sample, layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub image_mass: Vec<f64>,
    pub qbbox_mass: Option<Vec<f64>>,
    pub concentration: Vec<f64>,
    pub detection_score: Vec<f64>,
}

pub fn sample_metrics(tensor: &AttentionTensor, regions: &RegionMap, cfg: &MetricConfig) -> Result<SampleMetrics> {
    if regions.seq_len() != tensor.seq_len() {
        return Err(Error::ShapeMismatch(format!(
            "region map covers {} tokens, tensor has {}",
            regions.seq_len(),
            tensor.seq_len()
        )));
    }
    let image = regions.image().range();
    let qbbox = regions.qbbox().map(|r| r.range());
    let n = tensor.layers() * tensor.heads();
    let mut out = SampleMetrics {
        image_mass: Vec::with_capacity(n),
        qbbox_mass: qbbox.as_ref().map(|_| Vec::with_capacity(n)),
        concentration: Vec::with_capacity(n),
        detection_score: Vec::with_capacity(n),
    };
    for head in tensor.head_ids() {
        let row = tensor.row(head);
        let mass = span_mass(row, image.clone())?;
        let conc = match cfg.concentration_scope {
            ConcentrationScope::FullRow => concentration(row, cfg)?,
            ConcentrationScope::ImageOnly => concentration_within(row, image.clone(), cfg)?,
        };
        if let (Some(span), Some(q)) = (&qbbox, out.qbbox_mass.as_mut()) {
            q.push(span_mass(row, span.clone())?);
        }
        out.image_mass.push(mass);
        out.concentration.push(conc);
        out.detection_score.push(detection_score(mass, conc, head.layer, cfg));
    }
    Ok(out)
}
