//! Behaviour of the planted toy decoder under zero ablation.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vhead_core::aggregate::{stage_partition, HeadMetric};
use vhead_core::metrics::MetricConfig;
use vhead_core::toy::{
    ablation_protocol, build_model, full_plan, gen_dataset, head_stats, PlanRow, PlantTarget, PlantedHead,
    ToyModelConfig,
};
use vhead_core::{HeadId, MaskSpec, SelectionRule, Stage};

const CHANCE: f64 = 1.0 / 7.0;

#[test]
fn unmasked_model_counts_correctly() {
    let cfg = ToyModelConfig::default();
    let model = build_model(&cfg).unwrap();
    let data = gen_dataset(&cfg, 500, 1).unwrap();
    let acc = model.accuracy(&data, &MaskSpec::none()).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn unplanted_model_is_at_chance() {
    let mut cfg = ToyModelConfig::default();
    cfg.planted.clear();
    let model = build_model(&cfg).unwrap();
    let data = gen_dataset(&cfg, 500, 2).unwrap();
    let acc = model.accuracy(&data, &MaskSpec::none()).unwrap();
    assert!((acc - CHANCE).abs() < 0.08, "accuracy {acc}");
}

#[test]
fn masking_every_planted_head_severs_the_count() {
    let cfg = ToyModelConfig::default().with_seed(5);
    let model = build_model(&cfg).unwrap();
    let data = gen_dataset(&cfg, 500, 3).unwrap();
    let acc = model.accuracy(&data, &MaskSpec::from_heads(cfg.planted_heads())).unwrap();
    assert!(acc <= CHANCE + 0.10, "accuracy {acc}");
}

#[test]
fn twenty_random_unplanted_heads_barely_matter() {
    let cfg = ToyModelConfig::default().with_seed(8);
    let model = build_model(&cfg).unwrap();
    let data = gen_dataset(&cfg, 200, 4).unwrap();
    let planted = cfg.planted_heads();
    let pool: Vec<HeadId> = (0..cfg.layers)
        .flat_map(|l| (0..cfg.heads).map(move |h| HeadId::new(l, h)))
        .filter(|h| !planted.contains(h))
        .collect();
    let base = model.accuracy(&data, &MaskSpec::none()).unwrap();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = MaskSpec::from_heads(sample(&mut rng, pool.len(), 20).into_iter().map(|i| pool[i]));
        let acc = model.accuracy(&data, &mask).unwrap();
        assert!((base - acc).abs() <= 0.05, "seed {seed}: {base} -> {acc}");
    }
}

#[test]
fn planted_heads_look_at_the_image() {
    let cfg = ToyModelConfig::default();
    let model = build_model(&cfg).unwrap();
    let data = gen_dataset(&cfg, 200, 6).unwrap();
    let table = head_stats(&model, &data, &MetricConfig::default(), "toy", "d").unwrap();
    let mass = table.metric(HeadMetric::ImageMass).unwrap();
    for h in cfg.image_heads() {
        assert!(mass[table.index(h)] >= 0.8, "{h}: {}", mass[table.index(h)]);
    }
}

#[test]
fn cutting_more_planted_heads_never_helps() {
    let cfg = ToyModelConfig::default().with_seed(12);
    let model = build_model(&cfg).unwrap();
    let data = gen_dataset(&cfg, 120, 7).unwrap();
    let planted: Vec<HeadId> = cfg.planted_heads().into_iter().collect();
    let mut prev = model.accuracy(&data, &MaskSpec::none()).unwrap();
    // grow the mask one planted head at a time, interleaving the two layers
    let order: Vec<HeadId> = (0..planted.len())
        .map(|i| planted[(i % 2) * planted.len() / 2 + i / 2])
        .collect();
    for n in 1..=order.len() {
        let acc = model.accuracy(&data, &MaskSpec::from_heads(order[..n].iter().copied())).unwrap();
        assert!(acc <= prev + 0.02, "{n} heads: {prev} -> {acc}");
        prev = acc;
    }
}

#[test]
fn qbbox_heads_attend_to_the_box_without_causal_role() {
    let mut cfg = ToyModelConfig::default().with_seed(10);
    let box_head = HeadId::new(cfg.planted_layers()[1], 0);
    cfg.planted.push(PlantedHead {
        head: box_head,
        target: PlantTarget::Qbbox,
    });
    let model = build_model(&cfg).unwrap();
    let data = gen_dataset(&cfg, 120, 9).unwrap();
    let table = head_stats(&model, &data, &MetricConfig::default(), "toy", "d").unwrap();
    let qbbox = table.metric(HeadMetric::QbboxMass).unwrap();
    assert!(qbbox[table.index(box_head)] > 0.8, "{}", qbbox[table.index(box_head)]);
    let base = model.accuracy(&data, &MaskSpec::none()).unwrap();
    let cut = model.accuracy(&data, &MaskSpec::from_heads([box_head])).unwrap();
    assert_eq!(base, cut);
}

#[test]
fn eight_by_eight_shape_still_counts() {
    let cfg = ToyModelConfig::with_shape(8, 8, 128, 1);
    assert_eq!(cfg.planted_layers(), vec![1, 4]);
    let model = build_model(&cfg).unwrap();
    let data = gen_dataset(&cfg, 200, 1).unwrap();
    assert!(model.accuracy(&data, &MaskSpec::none()).unwrap() >= 0.95);
}

#[test]
fn protocol_follows_the_staged_pattern() {
    let cfg = ToyModelConfig::default().with_seed(3);
    let model = build_model(&cfg).unwrap();
    let data = gen_dataset(&cfg, 150, 11).unwrap();
    let stats = head_stats(&model, &data, &MetricConfig::default(), "toy", "d").unwrap();
    let stages = stage_partition(cfg.layers).unwrap();
    let early_planted = cfg
        .image_heads()
        .iter()
        .filter(|h| stages.stage_of(h.layer) == Some(Stage::Early))
        .count();

    let mut plan = full_plan(&[SelectionRule::Top, SelectionRule::Random], 20);
    plan.push(PlanRow::new(Some(Stage::Early), SelectionRule::Top, early_planted));
    let report = ablation_protocol(&model, &data, &stats, &plan, 99).unwrap();
    assert_eq!(report.rows.len(), 7);

    let drop = |s, r, k| report.row(Some(s), r, k).unwrap().abs_drop;
    assert!(drop(Stage::Early, SelectionRule::Top, early_planted) >= 0.40);
    assert!(drop(Stage::Late, SelectionRule::Random, 20) <= 0.05);
    let early_top = drop(Stage::Early, SelectionRule::Top, 20);
    for r in &report.rows[..6] {
        if (r.stage, r.rule) != (Some(Stage::Early), SelectionRule::Top) {
            assert!(early_top > r.abs_drop, "{:?} {} drops {}", r.stage, r.rule, r.abs_drop);
        }
    }
    assert!(drop(Stage::Mid, SelectionRule::Top, 20) > drop(Stage::Late, SelectionRule::Top, 20));

    // masks are independent per row and reproducible
    let again = ablation_protocol(&model, &data, &stats, &plan[3..4], 99).unwrap();
    assert_eq!(again.rows[0], report.rows[3]);

    let csv = report.to_csv();
    assert!(csv.starts_with("stage,rule,k,baseline,masked,abs_drop,rel_drop\nearly,top,20,"));
    let heads: BTreeSet<_> = report.rows[1].mask.heads.iter().map(|h| h.layer).collect();
    assert!(heads.iter().all(|&l| stages.early.contains(&l)));
}

#[test]
fn protocol_rejects_oversized_requests() {
    let cfg = ToyModelConfig::default();
    let model = build_model(&cfg).unwrap();
    let data = gen_dataset(&cfg, 10, 1).unwrap();
    let stats = head_stats(&model, &data, &MetricConfig::default(), "toy", "d").unwrap();
    let plan = [PlanRow::new(Some(Stage::Late), SelectionRule::Top, 65)];
    assert!(ablation_protocol(&model, &data, &stats, &plan, 0).is_err());
}
