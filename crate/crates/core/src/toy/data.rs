use std::ops::Range;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ToyModelConfig;
use crate::error::{Error, Result};
use crate::types::{PromptVariant, QuestionType};

/// Rows of the patch grid covered by the question's bounding box.
pub const BBOX_ROWS: usize = 2;

/// A counting question over a patch grid: how many patches are marked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySample {
    pub sample_id: String,
    /// Patch indices carrying a mark, ascending.
    pub marked: Vec<usize>,
    /// Unmarked patches that partially resemble marks, ascending.
    pub distractors: Vec<usize>,
    pub question_type: QuestionType,
    pub prompt_variant: PromptVariant,
    /// Grid rows of the bounding box, present for visual prompts; all marks
    /// fall inside it.
    pub bbox_rows: Option<Range<usize>>,
}

impl ToySample {
    pub fn mark_count(&self) -> u32 {
        self.marked.len() as u32
    }

    pub fn gold_answer(&self) -> u32 {
        self.mark_count()
    }

    /// Patch index range of the bounding box band.
    pub fn bbox_patches(&self, side: usize) -> Option<Range<usize>> {
        self.bbox_rows.as_ref().map(|r| r.start * side..r.end * side)
    }
}

/// `n` samples with mark counts, question types and prompt variants drawn
/// uniformly, deterministic in `seed`.
pub fn gen_dataset(cfg: &ToyModelConfig, n: usize, seed: u64) -> Result<Vec<ToySample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let side = cfg.grid_side();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n.to_string().len().max(6);
    // Shuffled balanced cycle: each sample's count is uniform on 1..=7 and
    // class frequencies differ by at most one.
    let mut counts: Vec<usize> = (0..n).map(|i| i % 7 + 1).collect();
    counts.shuffle(&mut rng);
    let samples = (0..n)
        .map(|i| {
            let count = counts[i];
            let question_type = QuestionType::ALL[rng.random_range(0..3)];
            let prompt_variant = PromptVariant::ALL[rng.random_range(0..2)];
            let (bbox_rows, pool) = match prompt_variant {
                PromptVariant::Visual => {
                    let start = rng.random_range(0..=side - BBOX_ROWS);
                    let rows = start..start + BBOX_ROWS;
                    let patches: Vec<usize> = (rows.start * side..rows.end * side).collect();
                    (Some(rows), patches)
                }
                PromptVariant::Plain => (None, (0..cfg.n_img).collect()),
            };
            let mut marked: Vec<usize> = index::sample(&mut rng, pool.len(), count)
                .into_iter()
                .map(|j| pool[j])
                .collect();
            marked.sort_unstable();
            let n_distract = rng.random_range(0..=cfg.max_distractors);
            let free: Vec<usize> = (0..cfg.n_img).filter(|p| marked.binary_search(p).is_err()).collect();
            let mut distractors: Vec<usize> = index::sample(&mut rng, free.len(), n_distract)
                .into_iter()
                .map(|j| free[j])
                .collect();
            distractors.sort_unstable();
            ToySample {
                sample_id: format!("toy-{seed}-{i:0width$}"),
                marked,
                distractors,
                question_type,
                prompt_variant,
                bbox_rows,
            }
        })
        .collect();
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_frequencies_are_uniform() {
        let cfg = ToyModelConfig::default();
        let data = gen_dataset(&cfg, 7000, 1).unwrap();
        let mut counts = [0usize; 8];
        for s in &data {
            counts[s.gold_answer() as usize] += 1;
        }
        for &c in &counts[1..] {
            assert!((950..=1050).contains(&c), "class count {c} outside 1000 +/- 5%");
        }
        let small = gen_dataset(&cfg, 10, 2).unwrap();
        for class in 1..=7 {
            let c = small.iter().filter(|s| s.gold_answer() == class).count();
            assert!((1..=2).contains(&c));
        }
    }

    #[test]
    fn samples_are_well_formed() {
        let cfg = ToyModelConfig::default();
        let side = cfg.grid_side();
        for s in gen_dataset(&cfg, 500, 3).unwrap() {
            assert!((1..=7).contains(&s.mark_count()));
            assert!(s.distractors.iter().all(|d| !s.marked.contains(d)));
            match s.prompt_variant {
                PromptVariant::Visual => {
                    let band = s.bbox_patches(side).unwrap();
                    assert!(s.marked.iter().all(|m| band.contains(m)));
                }
                PromptVariant::Plain => assert!(s.bbox_rows.is_none()),
            }
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let cfg = ToyModelConfig::default();
        assert_eq!(gen_dataset(&cfg, 1, 5).unwrap().len(), 1);
        assert_eq!(gen_dataset(&cfg, 50, 5).unwrap(), gen_dataset(&cfg, 50, 5).unwrap());
        assert_ne!(gen_dataset(&cfg, 50, 5).unwrap(), gen_dataset(&cfg, 50, 6).unwrap());
        assert!(gen_dataset(&cfg, 0, 5).is_err());
    }
}
