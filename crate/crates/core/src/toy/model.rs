//! A small causal decoder whose count-reading circuit is built by hand.
//!
//! The residual stream is split in two. The first [`ch::RESERVED`] channels
//! belong to the planted circuit; every other channel is "free" and carries a
//! randomly initialized transformer (attention heads plus ReLU MLPs) that
//! never reads or writes the reserved channels. No normalization layers are
//! used, so the planted arithmetic is exact.
//!
//! Planted image heads in the first planted layer ("detectors") attend to
//! marked patches with logit `logit_boost` and to BOS with logit
//! `logit_boost - ln(sink_ratio)`, then copy the BOS flag and the mark flag
//! into two count channels. Per mark the ratio of the two is `sink_ratio`,
//! so the digit read-out, which is homogeneous in the count channels, decodes
//! the count whatever number of heads contributes. Detectors also weigh
//! distractor patches as partial marks, which biases their count.
//!
//! Two MLP neurons after the detectors turn "any detector output present"
//! into a saturated gate. Image heads in the second planted layer
//! ("refiners") ignore distractors but only give BOS its sink logit when the
//! gate is open; with every detector ablated their BOS attention collapses
//! and they read every image as the largest count.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::config::{ch, PlantTarget, ToyModelConfig, IMAGE_START};
use super::data::ToySample;
use crate::error::{Error, Result};
use crate::seed::sub_seed;
use crate::types::{AttentionTensor, HeadId, MaskSpec, Region, RegionMap};

mod tok {
    pub const BOS: usize = 0;
    #[allow(dead_code)]
    pub const PAD: usize = 1;
    pub const SYS_A: usize = 2;
    pub const SYS_B: usize = 3;
    pub const IMG: usize = 4;
    pub const QT_GENERAL: usize = 5;
    pub const PV_PLAIN: usize = 8;
    pub const Q_COUNT: usize = 10;
    pub const ANS: usize = 11;
    pub const VOCAB: usize = 19;
}

/// Input gain of the gate neurons; one detector's BOS share clears it.
const GATE_GAIN: f32 = 200.0;

pub const DIGITS: usize = 7;

struct Layer {
    /// `d x 3d`, columns Q | K | V, each split into per-head blocks.
    wqkv: Vec<f32>,
    /// `d x d`, rows split into per-head blocks.
    wo: Vec<f32>,
    /// `d x d_mlp`.
    w1: Vec<f32>,
    b1: Vec<f32>,
    /// `d_mlp x d`.
    w2: Vec<f32>,
}

pub struct ToyModel {
    cfg: ToyModelConfig,
    tok_emb: Vec<f32>,
    patch_emb: Vec<f32>,
    pos_emb: Vec<f32>,
    mark_emb: Vec<f32>,
    distract_emb: Vec<f32>,
    bbox_emb: Vec<f32>,
    layers: Vec<Layer>,
    /// `DIGITS x d`, nonzero only on free channels.
    noise_readout: Vec<f32>,
    image_heads: BTreeSet<HeadId>,
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub answer: u32,
    pub logits: [f32; DIGITS],
    pub attention: AttentionTensor,
    pub regions: RegionMap,
}

struct Gauss<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Gauss<'_> {
    fn fill(&mut self, buf: &mut [f32], rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, ncols: usize, std: f64) {
        for r in rows {
            for c in cols.clone() {
                let z: f64 = StandardNormal.sample(self.rng);
                buf[r * ncols + c] = (z * std) as f32;
            }
        }
    }
}

pub fn build_model(cfg: &ToyModelConfig) -> Result<ToyModel> {
    ToyModel::new(cfg.clone())
}

impl ToyModel {
    pub fn new(cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let free = ch::RESERVED..d;
        let d_free = (d - ch::RESERVED) as f64;
        let n = cfg.seq_len();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "weights"));
        let mut g = Gauss { rng: &mut rng };

        let mut tok_emb = vec![0.0; tok::VOCAB * d];
        g.fill(&mut tok_emb, 0..tok::VOCAB, free.clone(), d, 1.0);
        let mut patch_emb = vec![0.0; cfg.n_img * d];
        g.fill(&mut patch_emb, 0..cfg.n_img, free.clone(), d, 1.0);
        let mut pos_emb = vec![0.0; n * d];
        g.fill(&mut pos_emb, 0..n, free.clone(), d, 0.5);
        let mut feature = || {
            let mut v = vec![0.0; d];
            g.fill(&mut v, 0..1, free.clone(), d, 1.0);
            v
        };
        let (mark_emb, distract_emb, bbox_emb) = (feature(), feature(), feature());

        let dh = cfg.head_dim();
        let out_std = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut wqkv = vec![0.0; d * 3 * d];
            g.fill(&mut wqkv, free.clone(), 0..2 * d, 3 * d, cfg.qk_scale / d_free.sqrt());
            g.fill(&mut wqkv, free.clone(), 2 * d..3 * d, 3 * d, 1.0 / d_free.sqrt());
            let mut wo = vec![0.0; d * d];
            g.fill(&mut wo, 0..d, free.clone(), d, out_std / (d as f64).sqrt());
            let mut w1 = vec![0.0; d * cfg.d_mlp];
            g.fill(&mut w1, free.clone(), 0..cfg.d_mlp, cfg.d_mlp, 1.0 / d_free.sqrt());
            let b1 = vec![0.0; cfg.d_mlp];
            let mut w2 = vec![0.0; cfg.d_mlp * d];
            g.fill(
                &mut w2,
                0..cfg.d_mlp,
                free.clone(),
                d,
                out_std * (2.0 / cfg.d_mlp as f64).sqrt(),
            );
            layers.push(Layer { wqkv, wo, w1, b1, w2 });
        }
        let mut noise_readout = vec![0.0; DIGITS * d];
        g.fill(&mut noise_readout, 0..DIGITS, free, d, cfg.readout_noise);

        let mut model = Self {
            image_heads: cfg.image_heads(),
            cfg,
            tok_emb,
            patch_emb,
            pos_emb,
            mark_emb,
            distract_emb,
            bbox_emb,
            layers,
            noise_readout,
        };
        model.plant(dh);
        Ok(model)
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    fn plant(&mut self, dh: usize) {
        let d = self.cfg.d_model;
        let beta = self.cfg.logit_boost as f32;
        let sink = (self.cfg.logit_boost - self.cfg.sink_ratio.ln()) as f32;
        let lambda = self.cfg.distractor_weight as f32;
        let root = (dh as f32).sqrt();
        let planted_layers = self.cfg.planted_layers();
        let first_layer = planted_layers.first().copied();

        for p in self.cfg.planted.clone() {
            let layer = &mut self.layers[p.head.layer];
            let (q0, k0, v0) = (p.head.head * dh, d + p.head.head * dh, 2 * d + p.head.head * dh);
            let w = 3 * d;
            for r in 0..d {
                for c in 0..dh {
                    layer.wqkv[r * w + q0 + c] = 0.0;
                    layer.wqkv[r * w + k0 + c] = 0.0;
                    layer.wqkv[r * w + v0 + c] = 0.0;
                }
            }
            for c in 0..dh {
                for col in 0..d {
                    layer.wo[(p.head.head * dh + c) * d + col] = 0.0;
                }
            }
            let is_detector = Some(p.head.layer) == first_layer;
            layer.wqkv[ch::CONST * w + q0] = beta * root;
            layer.wqkv[ch::BOS * w + k0 + 1] = 1.0;
            match p.target {
                PlantTarget::Image if is_detector => {
                    layer.wqkv[ch::CONST * w + q0 + 1] = sink * root;
                    layer.wqkv[ch::MARK * w + k0] = 1.0;
                    layer.wqkv[ch::DISTRACT * w + k0] = lambda;
                    layer.wqkv[ch::BOS * w + v0] = 1.0;
                    layer.wqkv[ch::MARK * w + v0 + 1] = 1.0;
                    layer.wqkv[ch::DISTRACT * w + v0 + 1] = lambda;
                    layer.wo[(p.head.head * dh) * d + ch::COUNT_A] = 1.0;
                    layer.wo[(p.head.head * dh + 1) * d + ch::COUNT_B] = 1.0;
                }
                PlantTarget::Image => {
                    let gain = self.cfg.refiner_gain as f32;
                    layer.wqkv[ch::GATE * w + q0 + 1] = sink * root;
                    layer.wqkv[ch::MARK * w + k0] = 1.0;
                    layer.wqkv[ch::BOS * w + v0] = 1.0;
                    layer.wqkv[ch::MARK * w + v0 + 1] = 1.0;
                    layer.wo[(p.head.head * dh) * d + ch::COUNT_A] = gain;
                    layer.wo[(p.head.head * dh + 1) * d + ch::COUNT_B] = gain;
                }
                PlantTarget::Qbbox => {
                    layer.wqkv[ch::CONST * w + q0 + 1] = sink * root;
                    layer.wqkv[ch::BBOX * w + k0] = 1.0;
                    layer.wqkv[ch::MARK * w + v0] = 1.0;
                    layer.wo[(p.head.head * dh) * d + ch::AUX] = 1.0;
                }
            }
        }

        let has_detector = self
            .cfg
            .planted
            .iter()
            .any(|p| p.target == PlantTarget::Image && Some(p.head.layer) == first_layer);
        if let (Some(l), true) = (first_layer, has_detector) {
            // gate = relu(g * A) - relu(g * A - 1), saturating at one detector
            let layer = &mut self.layers[l];
            let m = self.cfg.d_mlp;
            for unit in 0..2 {
                for r in 0..d {
                    layer.w1[r * m + unit] = 0.0;
                }
                for col in 0..d {
                    layer.w2[unit * d + col] = 0.0;
                }
                layer.w1[ch::COUNT_A * m + unit] = GATE_GAIN;
            }
            layer.b1[0] = 0.0;
            layer.b1[1] = -1.0;
            layer.w2[ch::GATE] = 1.0;
            layer.w2[d + ch::GATE] = -1.0;
        }
    }

    /// Token ids and per-position patch index for a sample.
    fn embed(&self, sample: &ToySample) -> Vec<f32> {
        let d = self.cfg.d_model;
        let n = self.cfg.seq_len();
        let side = self.cfg.grid_side();
        let mut h = vec![0.0f32; n * d];
        let qt = tok::QT_GENERAL + sample.question_type as usize;
        let pv = tok::PV_PLAIN + sample.prompt_variant as usize;
        let img_end = IMAGE_START + self.cfg.n_img;
        let tokens = [tok::BOS, tok::SYS_A, tok::SYS_B]
            .into_iter()
            .chain(std::iter::repeat_n(tok::IMG, self.cfg.n_img))
            .chain([qt, pv, tok::Q_COUNT, tok::ANS]);
        let bbox = sample.bbox_patches(side);
        for (pos, token) in tokens.enumerate() {
            let row = &mut h[pos * d..(pos + 1) * d];
            let add = |row: &mut [f32], v: &[f32]| row.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            add(row, &self.tok_emb[token * d..(token + 1) * d]);
            add(row, &self.pos_emb[pos * d..(pos + 1) * d]);
            row[ch::CONST] = 1.0;
            if pos == 0 {
                row[ch::BOS] = 1.0;
            }
            if (IMAGE_START..img_end).contains(&pos) {
                let patch = pos - IMAGE_START;
                add(row, &self.patch_emb[patch * d..(patch + 1) * d]);
                if sample.marked.binary_search(&patch).is_ok() {
                    row[ch::MARK] = 1.0;
                    add(row, &self.mark_emb);
                }
                if sample.distractors.binary_search(&patch).is_ok() {
                    row[ch::DISTRACT] = 1.0;
                    add(row, &self.distract_emb);
                }
                if bbox.as_ref().is_some_and(|b| b.contains(&patch)) {
                    row[ch::BBOX] = 1.0;
                    add(row, &self.bbox_emb);
                }
            }
        }
        h
    }

    pub fn regions(&self, sample: &ToySample) -> RegionMap {
        let n = self.cfg.seq_len();
        let img_end = IMAGE_START + self.cfg.n_img;
        let mut regions = vec![
            Region::new("system", 0, IMAGE_START),
            Region::new("image", IMAGE_START, img_end),
            Region::new("question", img_end, n),
        ];
        if let Some(b) = sample.bbox_patches(self.cfg.grid_side()) {
            regions.push(Region::new("qbbox", IMAGE_START + b.start, IMAGE_START + b.end));
        }
        RegionMap::new(n, regions).expect("toy layout is a valid region map")
    }

    /// Runs the decoder; returns answer-slot logits and, when `record` is
    /// set, the answer slot's attention rows laid out `[layer][head][token]`.
    fn run(&self, sample: &ToySample, mask: &MaskSpec, record: bool) -> ([f32; DIGITS], Option<Vec<f32>>) {
        let cfg = &self.cfg;
        let (d, n, nh, dh) = (cfg.d_model, cfg.seq_len(), cfg.heads, cfg.head_dim());
        let scale = 1.0 / (dh as f32).sqrt();
        let mut h = self.embed(sample);
        let mut dump = record.then(|| vec![0.0f32; cfg.layers * nh * n]);
        let mut qkv = vec![0.0f32; n * 3 * d];
        let mut heads_out = vec![0.0f32; n * d];
        let mut hidden = vec![0.0f32; n * cfg.d_mlp];
        let mut probs = vec![0.0f32; n * n];
        let mut ex = vec![0.0f64; n];

        for (l, layer) in self.layers.iter().enumerate() {
            // Only the answer slot matters after the last layer.
            let q_start = if l + 1 == cfg.layers { n - 1 } else { 0 };
            let rows = n - q_start;
            matmul(&h, n, d, &layer.wqkv, 3 * d, &mut qkv, 0.0);
            heads_out[..rows * d].fill(0.0);
            for head in 0..nh {
                let masked = mask.contains(HeadId::new(l, head));
                let (qc, kc, vc) = (head * dh, d + head * dh, 2 * d + head * dh);
                let w = 3 * d;
                // scores[r][j] = q_{q_start + r} . k_j, full rows; causal cut below
                let scores = &mut probs[..rows * n];
                gemm(
                    rows, dh, n, scale,
                    View::new(&qkv[q_start * w + qc..], w, 1),
                    View::new(&qkv[kc..], 1, w),
                    0.0, scores, n,
                );
                for r in 0..rows {
                    let i = q_start + r;
                    let row = &mut scores[r * n..(r + 1) * n];
                    let max = row[..=i].iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    // f64 so each probability is rounded to f32 only once
                    let mut sum = 0.0f64;
                    for (e, &x) in ex.iter_mut().zip(&row[..=i]) {
                        *e = f64::from((x - max).exp());
                        sum += *e;
                    }
                    for (p, e) in row[..=i].iter_mut().zip(&ex) {
                        *p = (e / sum) as f32;
                    }
                    row[i + 1..].fill(0.0);
                }
                if let Some(dump) = dump.as_mut() {
                    let at = (l * nh + head) * n;
                    dump[at..at + n].copy_from_slice(&scores[(rows - 1) * n..rows * n]);
                }
                if !masked {
                    gemm(
                        rows, n, dh, 1.0,
                        View::new(scores, n, 1),
                        View::new(&qkv[vc..], w, 1),
                        0.0, &mut heads_out[head * dh..], d,
                    );
                }
            }
            let h_tail = &mut h[q_start * d..];
            matmul(&heads_out[..rows * d], rows, d, &layer.wo, d, h_tail, 1.0);

            let m = cfg.d_mlp;
            for r in 0..rows {
                hidden[r * m..(r + 1) * m].copy_from_slice(&layer.b1);
            }
            matmul(&h[q_start * d..], rows, d, &layer.w1, m, &mut hidden[..rows * m], 1.0);
            hidden[..rows * m].iter_mut().for_each(|x| *x = x.max(0.0));
            matmul(&hidden[..rows * m], rows, m, &layer.w2, d, &mut h[q_start * d..], 1.0);
        }

        let last = &h[(n - 1) * d..n * d];
        let a = last[ch::COUNT_A] * cfg.sink_ratio as f32;
        let b = last[ch::COUNT_B];
        let mut logits = [0.0f32; DIGITS];
        for (i, logit) in logits.iter_mut().enumerate() {
            let digit = (i + 1) as f32;
            let noise: f32 = self.noise_readout[i * d..(i + 1) * d]
                .iter()
                .zip(last)
                .map(|(w, x)| w * x)
                .sum();
            // tangent lines of r^2: the largest is the digit nearest b / a
            *logit = 2.0 * digit * b - digit * digit * a + noise;
        }
        (logits, dump)
    }

    pub fn forward(&self, sample: &ToySample, mask: &MaskSpec) -> Result<ForwardOutput> {
        mask.check_bounds(self.cfg.layers, self.cfg.heads)?;
        let (logits, dump) = self.run(sample, mask, true);
        let attention = AttentionTensor::new(
            self.cfg.layers,
            self.cfg.heads,
            self.cfg.seq_len(),
            dump.expect("recorded"),
        )?;
        Ok(ForwardOutput {
            answer: argmax_digit(&logits),
            logits,
            attention,
            regions: self.regions(sample),
        })
    }

    /// Answer only, without materializing the attention dump.
    pub fn predict(&self, sample: &ToySample, mask: &MaskSpec) -> Result<u32> {
        mask.check_bounds(self.cfg.layers, self.cfg.heads)?;
        Ok(argmax_digit(&self.run(sample, mask, false).0))
    }

    /// Fraction of samples answered correctly under `mask`, evaluated on the
    /// current rayon pool.
    pub fn accuracy(&self, samples: &[ToySample], mask: &MaskSpec) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        mask.check_bounds(self.cfg.layers, self.cfg.heads)?;
        let correct = samples
            .par_iter()
            .map(|s| (argmax_digit(&self.run(s, mask, false).0) == s.gold_answer()) as usize)
            .sum::<usize>();
        Ok(correct as f64 / samples.len() as f64)
    }

    /// Heads planted to attend to marked patches.
    pub fn image_heads(&self) -> &BTreeSet<HeadId> {
        &self.image_heads
    }
}

/// First digit with the largest logit.
fn argmax_digit(logits: &[f32; DIGITS]) -> u32 {
    let mut best = 0;
    for i in 1..DIGITS {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best as u32 + 1
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`.
fn matmul(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, c: &mut [f32], beta: f32) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the bounds above cover every element sgemm touches with these
    // row-major strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided read-only matrix operand.
struct View<'a> {
    data: &'a [f32],
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    fn new(data: &'a [f32], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// `c = alpha * a * b + beta * c` with `a: m x k`, `b: k x n` strided and
/// `c` row-major with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: View<'_>, b: View<'_>, beta: f32, c: &mut [f32], rsc: usize) {
    assert!(a.fits(m, k) && b.fits(k, n));
    assert!(m == 0 || n == 0 || (m - 1) * rsc + n <= c.len());
    // SAFETY: the asserts bound every element reached through the strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}
