use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::aggregate::stage_partition;
use crate::error::{Error, Result};
use crate::types::HeadId;

/// Residual channels owned by the planted circuit. Random components never
/// read or write them; everything from `RESERVED` up is free.
pub(crate) mod ch {
    pub const CONST: usize = 0;
    pub const BOS: usize = 1;
    pub const MARK: usize = 2;
    pub const DISTRACT: usize = 3;
    pub const BBOX: usize = 4;
    pub const GATE: usize = 5;
    pub const COUNT_A: usize = 6;
    pub const COUNT_B: usize = 7;
    pub const AUX: usize = 8;
    pub const RESERVED: usize = 9;
}

/// What a planted head is built to attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantTarget {
    /// Marked image patches; these heads carry the count.
    Image,
    /// Patches inside the question's bounding-box band; no causal role.
    Qbbox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedHead {
    pub head: HeadId,
    pub target: PlantTarget,
}

/// Architecture and planting recipe of the toy decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    /// Image tokens; must be a square patch grid.
    pub n_img: usize,
    pub planted: Vec<PlantedHead>,
    /// Attention-logit boost planted heads give marked patches.
    pub logit_boost: f64,
    /// Ratio of marked-patch to BOS attention per mark, which is what the
    /// count read-out decodes.
    pub sink_ratio: f64,
    /// Distractor patches look like `distractor_weight` of a mark to the
    /// first planted layer.
    pub distractor_weight: f64,
    pub max_distractors: usize,
    /// Output gain of heads in the second planted layer relative to the first.
    pub refiner_gain: f64,
    /// Scale of the random query/key projections.
    pub qk_scale: f64,
    /// Weight of the free residual channels in the digit logits.
    pub readout_noise: f64,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self::with_shape(12, 16, 64, 0)
    }
}

impl ToyModelConfig {
    /// Config of the given shape with the default planting: four image heads
    /// in layer 1 and four in the middle of the mid stage.
    pub fn with_shape(layers: usize, heads: usize, d_model: usize, seed: u64) -> Self {
        let planted = default_planting(layers, heads);
        Self {
            layers,
            heads,
            d_model,
            d_mlp: 2 * d_model,
            n_img: 64,
            planted,
            logit_boost: 8.0,
            sink_ratio: 8.0,
            distractor_weight: 0.85,
            max_distractors: 2,
            refiner_gain: 6.0,
            qk_scale: 0.4,
            readout_noise: 1e-3,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn grid_side(&self) -> usize {
        (self.n_img as f64).sqrt().round() as usize
    }

    /// Layout: BOS, two system tokens, the patch grid, three question
    /// tokens, the answer slot.
    pub fn seq_len(&self) -> usize {
        IMAGE_START + self.n_img + 4
    }

    pub fn image_heads(&self) -> BTreeSet<HeadId> {
        self.planted
            .iter()
            .filter(|p| p.target == PlantTarget::Image)
            .map(|p| p.head)
            .collect()
    }

    pub fn planted_heads(&self) -> BTreeSet<HeadId> {
        self.planted.iter().map(|p| p.head).collect()
    }

    /// Distinct planted layers, ascending.
    pub fn planted_layers(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.planted.iter().map(|p| p.head.layer).collect();
        set.into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ToyConfig(msg));
        if self.layers == 0 || self.heads == 0 {
            return fail("layers and heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.head_dim() < 2 {
            return fail(format!("head dimension {} below 2", self.head_dim()));
        }
        if self.d_model < ch::RESERVED + 4 {
            return fail(format!("d_model {} leaves too few free channels", self.d_model));
        }
        if self.d_mlp < 2 {
            return fail("d_mlp must hold the two gate neurons".into());
        }
        let side = self.grid_side();
        if side * side != self.n_img || side < 4 {
            return fail(format!("n_img {} is not a square grid of side >= 4", self.n_img));
        }
        if 7 + self.max_distractors > self.n_img {
            return fail("too many distractors for the patch grid".into());
        }
        for (name, v) in [
            ("logit_boost", self.logit_boost),
            ("sink_ratio", self.sink_ratio),
            ("refiner_gain", self.refiner_gain),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("distractor_weight", self.distractor_weight),
            ("qk_scale", self.qk_scale),
            ("readout_noise", self.readout_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be nonnegative, got {v}"));
            }
        }
        let mut seen = BTreeSet::new();
        for p in &self.planted {
            p.head.check_bounds(self.layers, self.heads)?;
            if !seen.insert(p.head) {
                return fail(format!("head {} planted twice", p.head));
            }
        }
        if self.planted_layers().len() > 2 {
            return fail("planted heads must occupy at most 2 layers".into());
        }
        Ok(())
    }
}

pub(crate) const IMAGE_START: usize = 3;

fn default_planting(layers: usize, heads: usize) -> Vec<PlantedHead> {
    let Ok(stages) = stage_partition(layers) else {
        return Vec::new();
    };
    let per_layer = (heads / 2).clamp(1, 4);
    let stride = heads / per_layer;
    let first = 1.min(stages.early.end - 1);
    let second = stages.mid.start + (stages.mid.len() - 1) / 2;
    let mut out = Vec::new();
    for (layer, offset) in [(first, 1 % stride), (second, stride / 2)] {
        for i in 0..per_layer {
            out.push(PlantedHead {
                head: HeadId::new(layer, i * stride + offset),
                target: PlantTarget::Image,
            });
        }
    }
    out
}
