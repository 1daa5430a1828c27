//! Toy forward passes feeding the scoring and selection pipeline.

use std::collections::BTreeSet;

use vhead_core::aggregate::{
    accumulate, rank_heads, ranked_heads, scatter_points, HeadStatsTable, SampleFilter, SampleRef, Selection,
};
use vhead_core::metrics::MetricConfig;
use vhead_core::toy::{build_model, gen_dataset, head_stats, sample_meta, ForwardOutput, ToyModelConfig, ToySample};
use vhead_core::{HeadId, MaskSpec, SelectionRule};

fn forward_all(cfg: &ToyModelConfig, n: usize, seed: u64) -> (Vec<ToySample>, Vec<ForwardOutput>) {
    let model = build_model(cfg).unwrap();
    let samples = gen_dataset(cfg, n, seed).unwrap();
    let outs = samples.iter().map(|s| model.forward(s, &MaskSpec::none()).unwrap()).collect();
    (samples, outs)
}

fn table_of(samples: &[ToySample], outs: &[ForwardOutput], cfg: &MetricConfig) -> HeadStatsTable {
    let refs = samples.iter().zip(outs).map(|(s, o)| SampleRef {
        sample_id: &s.sample_id,
        tensor: &o.attention,
        regions: &o.regions,
    });
    accumulate(refs, cfg, "toy", "d").unwrap()
}

#[test]
fn table_matches_sequential_recompute() {
    let cfg = ToyModelConfig::default().with_seed(21);
    let (samples, outs) = forward_all(&cfg, 100, 5);
    let mcfg = MetricConfig::default();
    let table = table_of(&samples, &outs, &mcfg);

    let (layers, heads) = (cfg.layers, cfg.heads);
    let mut mass = vec![0.0f64; layers * heads];
    let mut conc = vec![0.0f64; layers * heads];
    let mut score = vec![0.0f64; layers * heads];
    for o in &outs {
        let image = o.regions.image().range();
        for l in 0..layers {
            for h in 0..heads {
                let row = o.attention.row(HeadId::new(l, h));
                let m: f64 = row[image.clone()].iter().map(|&v| v as f64).sum();
                let ent: f64 = -row
                    .iter()
                    .map(|&v| v as f64)
                    .map(|p| p * (p + mcfg.eps_entropy).log2())
                    .sum::<f64>();
                let c = 1.0 - ent / (row.len() as f64 + mcfg.eps_entropy).log2();
                let lf = l as f64;
                let func = mcfg.k / (lf + mcfg.eps_layer) + mcfg.a * (-mcfg.b * lf).exp();
                let i = l * heads + h;
                mass[i] += m;
                conc[i] += c;
                score[i] += m * (1.0 + c * func);
            }
        }
    }
    let n = outs.len() as f64;
    for i in 0..layers * heads {
        assert!((table.mean_image_mass[i] - mass[i] / n).abs() < 1e-9);
        assert!((table.mean_concentration[i] - conc[i] / n).abs() < 1e-9);
        assert!((table.mean_detection_score[i] - score[i] / n).abs() < 1e-9);
    }
    assert_eq!(table.sample_count, 100);
}

#[test]
fn planted_heads_rank_first_and_sit_upper_right() {
    let cfg = ToyModelConfig::default().with_seed(4);
    let model = build_model(&cfg).unwrap();
    let samples = gen_dataset(&cfg, 60, 8).unwrap();
    let table = head_stats(&model, &samples, &MetricConfig::default(), "toy", "d").unwrap();
    let planted = cfg.image_heads();
    let top: BTreeSet<HeadId> = ranked_heads(&table, None).unwrap().into_iter().take(planted.len()).collect();
    assert_eq!(top, planted);
    for p in scatter_points(&table) {
        if planted.contains(&p.head) {
            assert!(p.x > 0.5 && p.y > 0.5, "{} at ({}, {})", p.head, p.x, p.y);
        }
    }
}

#[test]
fn others_rule_matches_sort_and_slice() {
    let cfg = ToyModelConfig::default().with_seed(9);
    let model = build_model(&cfg).unwrap();
    let samples = gen_dataset(&cfg, 30, 1).unwrap();
    let table = head_stats(&model, &samples, &MetricConfig::default(), "toy", "d").unwrap();

    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            all.push((table.mean_detection_score[l * cfg.heads + h], l, h));
        }
    }
    // descending score, then ascending position
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let oracle: BTreeSet<HeadId> = all[50..70].iter().map(|&(_, l, h)| HeadId::new(l, h)).collect();

    let mask = rank_heads(&table, &Selection::new(None, SelectionRule::Others, 20, 0)).unwrap();
    assert_eq!(mask.heads, oracle);
    assert_eq!(mask.provenance.others_skip, Some(50));
}

#[test]
fn thread_count_does_not_change_the_table() {
    let cfg = ToyModelConfig::default().with_seed(2);
    let model = build_model(&cfg).unwrap();
    let samples = gen_dataset(&cfg, 24, 3).unwrap();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| head_stats(&model, &samples, &MetricConfig::default(), "toy", "d").unwrap())
    };
    let one = run(1).to_json().unwrap();
    assert_eq!(one, run(3).to_json().unwrap());
    assert_eq!(one, run(8).to_json().unwrap());
}

#[test]
fn filters_slice_toy_dumps() {
    let cfg = ToyModelConfig::default().with_seed(6);
    let (samples, outs) = forward_all(&cfg, 40, 2);
    let filter = SampleFilter {
        prompt_variant: Some(vhead_core::PromptVariant::Visual),
        ..SampleFilter::default()
    };
    let kept: Vec<usize> = (0..samples.len())
        .filter(|&i| filter.accepts(&sample_meta(&samples[i], Some(outs[i].answer))))
        .collect();
    assert!(!kept.is_empty() && kept.len() < samples.len());
    let refs = kept.iter().map(|&i| SampleRef {
        sample_id: &samples[i].sample_id,
        tensor: &outs[i].attention,
        regions: &outs[i].regions,
    });
    let table = accumulate(refs, &MetricConfig::default(), "toy", "visual").unwrap();
    // every visual sample carries a bounding box
    assert_eq!(table.qbbox_sample_count, kept.len());
    assert!(table.mean_qbbox_mass.is_some());
}
