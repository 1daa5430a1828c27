//! Library side of the `vhead` command line: argument types and one function
//! per command. Commands return an [`Outcome`] (stdout text plus exit code)
//! so they can be driven in-process as well as from `main`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vhead_core::aggregate::{
    accumulate, heatmap_grid, rank_heads, ranked_heads, scatter_csv, scatter_points, stage_partition, HeadMetric,
    HeadStatsTable, SampleRef, Selection,
};
use vhead_core::atnd::{read_atnd, validate_dump, write_manifest, Manifest, ManifestEntry, Violation};
use vhead_core::compare::{comparison_matrix, CompareOptions};
use vhead_core::seed::sub_seed;
use vhead_core::toy::{
    ablation_protocol, build_model, gen_dataset, head_stats, sample_meta, write_dumps, PlanRow, ToyModel,
    ToyModelConfig, ToySample,
};
use vhead_core::{AttentionTensor, MaskSpec, RegionMap};

pub mod args;

use args::{Cli, Command, CompareArgs, ReportArgs, ScoreArgs, ToyAblateArgs, ToyCommand, ToyGenArgs, ToyRunArgs, ValidateArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] vhead_core::Error),
}

impl CliError {
    /// 2 for usage and input/output problems, 1 for everything the domain
    /// logic rejects.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } => 2,
            CliError::Core(vhead_core::Error::Io { .. } | vhead_core::Error::Json(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// What a command printed and how it wants the process to exit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: u8,
    pub stdout: String,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self { code: 0, stdout }
    }
}

pub fn run(cli: Cli) -> CliResult<Outcome> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        pool = pool.num_threads(w as usize);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Validate(a) => cmd_validate(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Toy(ToyCommand::Gen(a)) => cmd_toy_gen(&a),
        Command::Toy(ToyCommand::Run(a)) => cmd_toy_run(&a),
        Command::Toy(ToyCommand::Ablate(a)) => cmd_toy_ablate(&a),
        Command::Report(a) => cmd_report(&a),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryViolations {
    pub sample_id: String,
    pub path: String,
    pub violations: Vec<Violation>,
}

/// Machine-readable result of `validate`; lists only dumps with problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateReport {
    pub dumps: usize,
    pub invalid_dumps: usize,
    pub violation_count: usize,
    pub entries: Vec<EntryViolations>,
}

pub fn cmd_validate(args: &ValidateArgs) -> CliResult<Outcome> {
    let manifest = Manifest::read(&args.manifest)?;
    let reports: Vec<_> = manifest
        .entries
        .par_iter()
        .map(|e| validate_dump(manifest.resolve(e)))
        .collect();
    let entries: Vec<EntryViolations> = manifest
        .entries
        .iter()
        .zip(reports)
        .filter(|(_, r)| !r.is_valid())
        .map(|(e, r)| EntryViolations {
            sample_id: e.sample_id.clone(),
            path: manifest.resolve(e).display().to_string(),
            violations: r.violations,
        })
        .collect();
    let report = ValidateReport {
        dumps: manifest.entries.len(),
        invalid_dumps: entries.len(),
        violation_count: entries.iter().map(|e| e.violations.len()).sum(),
        entries,
    };
    let mut out = String::new();
    for e in &report.entries {
        for v in &e.violations {
            out.push_str(&format!("{} ({}): {}\n", e.sample_id, e.path, v.message));
        }
    }
    out.push_str(&format!(
        "{} violations in {} of {} dumps\n",
        report.violation_count, report.invalid_dumps, report.dumps
    ));
    if let Some(path) = &args.out {
        write_file(path, serde_json::to_string_pretty(&report).map_err(vhead_core::Error::from)? + "\n")?;
    }
    Ok(Outcome {
        code: u8::from(report.invalid_dumps > 0),
        stdout: out,
    })
}

/// Writes the per-metric heatmaps and the mass/concentration scatter.
fn write_table_views(table: &HeadStatsTable, dir: &Path) -> CliResult<()> {
    for metric in HeadMetric::ALL {
        if metric == HeadMetric::QbboxMass && table.mean_qbbox_mass.is_none() {
            continue;
        }
        let grid = heatmap_grid(table, metric)?;
        write_file(&dir.join(format!("heatmap_{}.csv", metric.name())), grid.to_csv())?;
    }
    write_file(&dir.join("scatter.csv"), scatter_csv(&scatter_points(table)))
}

fn top_heads_text(table: &HeadStatsTable, n: usize) -> CliResult<String> {
    let mut out = String::from("rank,layer,head,detection_score\n");
    for (rank, h) in ranked_heads(table, None)?.into_iter().take(n).enumerate() {
        out.push_str(&format!("{},{},{},{:.6}\n", rank + 1, h.layer, h.head, table.score(h)));
    }
    Ok(out)
}

pub fn cmd_score(args: &ScoreArgs) -> CliResult<Outcome> {
    let cfg = args.metric.config();
    cfg.validate()?;
    let manifest = Manifest::read(&args.manifest)?;
    let filter = args.filter.filter();
    // Collect then scan in manifest order so the reported error is stable.
    let loaded: Vec<_> = manifest
        .entries
        .par_iter()
        .map(|e| read_atnd(manifest.resolve(e)))
        .collect();
    let mut dumps: Vec<(String, AttentionTensor, RegionMap)> = Vec::new();
    for item in loaded {
        let (tensor, regions, meta) = item?;
        if filter.accepts(&meta) {
            dumps.push((meta.sample_id, tensor, regions));
        }
    }
    let dataset_id = args.dataset_id.clone().unwrap_or_else(|| {
        args.manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let table = accumulate(
        dumps.iter().map(|(id, tensor, regions)| SampleRef {
            sample_id: id,
            tensor,
            regions,
        }),
        &cfg,
        &args.model_id,
        &dataset_id,
    )?;
    create_dir(&args.out)?;
    write_file(&args.out.join("head_stats.json"), table.to_json()? + "\n")?;
    write_table_views(&table, &args.out)?;
    let mut out = format!(
        "scored {} of {} samples ({}x{} heads)\n",
        table.sample_count,
        manifest.entries.len(),
        table.layers,
        table.heads
    );
    out.push_str(&top_heads_text(&table, 10)?);
    Ok(Outcome::ok(out))
}

fn read_table(path: &Path) -> CliResult<HeadStatsTable> {
    Ok(HeadStatsTable::from_json(&read_file(path)?)?)
}

pub fn cmd_compare(args: &CompareArgs) -> CliResult<Outcome> {
    let tables = args.tables.iter().map(|p| read_table(p)).collect::<CliResult<Vec<_>>>()?;
    let opts = CompareOptions {
        kind: args.kind,
        metric: args.metric,
        emd_2d: args.emd_2d,
    };
    let matrix = comparison_matrix(&tables, &opts)?;
    let csv = matrix.to_csv();
    match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            write_file(&dir.join("comparison.csv"), &csv)?;
            write_file(&dir.join("comparison.json"), matrix.to_json()? + "\n")?;
            Ok(Outcome::ok(format!(
                "compared {} tables into {}\n",
                tables.len(),
                dir.display()
            )))
        }
        None => Ok(Outcome::ok(csv)),
    }
}

/// Contents of `dataset.json` in a toy data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub config: ToyModelConfig,
    pub seed: u64,
    pub samples: Vec<ToySample>,
}

pub const DATASET_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DUMP_DIR: &str = "dumps";

impl ToyDataset {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let text = read_file(&dir.join(DATASET_FILE))?;
        let data: Self = serde_json::from_str(&text).map_err(vhead_core::Error::from)?;
        data.config.validate()?;
        Ok(data)
    }

    fn model(&self) -> CliResult<ToyModel> {
        Ok(build_model(&self.config)?)
    }
}

fn dump_path(sample_id: &str) -> String {
    format!("{DUMP_DIR}/{sample_id}.atnd")
}

pub fn cmd_toy_gen(args: &ToyGenArgs) -> CliResult<Outcome> {
    let mut config = match &args.config {
        Some(p) => serde_json::from_str(&read_file(p)?).map_err(vhead_core::Error::from)?,
        None => ToyModelConfig::default(),
    };
    config.seed = args.seed;
    let data_seed = sub_seed(args.data_seed.unwrap_or(args.seed), "dataset");
    let samples = gen_dataset(&config, args.count, data_seed)?;
    let entries: Vec<ManifestEntry> = samples
        .iter()
        .map(|s| ManifestEntry::from_meta(&sample_meta(s, None), dump_path(&s.sample_id)))
        .collect();
    let data = ToyDataset {
        config,
        seed: args.seed,
        samples,
    };
    create_dir(&args.out)?;
    write_file(
        &args.out.join(DATASET_FILE),
        serde_json::to_string_pretty(&data).map_err(vhead_core::Error::from)? + "\n",
    )?;
    write_manifest(args.out.join(MANIFEST_FILE), &entries)?;
    Ok(Outcome::ok(format!(
        "generated {} samples for a {}x{} model\n",
        data.samples.len(),
        data.config.layers,
        data.config.heads
    )))
}

fn resolve_mask(spec: &str, cfg: &ToyModelConfig) -> CliResult<MaskSpec> {
    match spec {
        "none" => Ok(MaskSpec::none()),
        "planted" => Ok(MaskSpec::from_heads(cfg.planted_heads())),
        "image" => Ok(MaskSpec::from_heads(cfg.image_heads())),
        path => {
            let mask: MaskSpec =
                serde_json::from_str(&read_file(Path::new(path))?).map_err(vhead_core::Error::from)?;
            mask.check_bounds(cfg.layers, cfg.heads)?;
            Ok(mask)
        }
    }
}

/// Accuracy summary written by `toy run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub accuracy: f64,
    pub correct: usize,
    pub samples: usize,
    pub mask: MaskSpec,
}

pub fn cmd_toy_run(args: &ToyRunArgs) -> CliResult<Outcome> {
    let data = ToyDataset::load(&args.data)?;
    let model = data.model()?;
    let mask = resolve_mask(&args.mask, &data.config)?;
    let out = args.out.clone().unwrap_or_else(|| args.data.clone());
    let mut entries = write_dumps(&model, &data.samples, &mask, out.join(DUMP_DIR))?;
    for e in &mut entries {
        e.path = format!("{DUMP_DIR}/{}", e.path);
    }
    write_manifest(out.join(MANIFEST_FILE), &entries)?;
    let correct = entries.iter().filter(|e| e.correct() == Some(true)).count();
    let summary = RunSummary {
        accuracy: correct as f64 / entries.len() as f64,
        correct,
        samples: entries.len(),
        mask,
    };
    write_file(
        &out.join("accuracy.json"),
        serde_json::to_string_pretty(&summary).map_err(vhead_core::Error::from)? + "\n",
    )?;
    Ok(Outcome::ok(format!(
        "accuracy {:.4} ({}/{}) with {} heads masked\n",
        summary.accuracy,
        correct,
        summary.samples,
        summary.mask.len()
    )))
}

pub fn cmd_toy_ablate(args: &ToyAblateArgs) -> CliResult<Outcome> {
    let data = ToyDataset::load(&args.data)?;
    let model = data.model()?;
    let stats = match &args.stats {
        Some(p) => read_table(p)?,
        None => {
            let cfg = args.metric.config();
            head_stats(&model, &data.samples, &cfg, &format!("toy-{}", data.seed), "toy")?
        }
    };
    let plan: Vec<PlanRow> = args
        .stage
        .iter()
        .flat_map(|&s| {
            args.rule
                .iter()
                .flat_map(move |&r| args.count.iter().map(move |&k| PlanRow::new(Some(s), r, k)))
        })
        .collect();
    let report = ablation_protocol(&model, &data.samples, &stats, &plan, args.seed.unwrap_or(data.seed))?;
    let out = args.out.clone().unwrap_or_else(|| args.data.clone());
    create_dir(&out)?;
    let csv = report.to_csv();
    write_file(&out.join("ablation.csv"), &csv)?;
    write_file(&out.join("ablation.json"), report.to_json()? + "\n")?;
    Ok(Outcome::ok(csv))
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<Outcome> {
    let table = read_table(&args.table)?;
    create_dir(&args.out)?;
    write_table_views(&table, &args.out)?;

    let stages = stage_partition(table.layers)?;
    let mut ranking = String::from("rank,layer,head,stage,detection_score,image_mass,concentration\n");
    for (rank, h) in ranked_heads(&table, args.stage)?.into_iter().enumerate() {
        let i = table.index(h);
        let stage = stages.stage_of(h.layer).map(|s| s.to_string()).unwrap_or_default();
        ranking.push_str(&format!(
            "{},{},{},{stage},{},{},{}\n",
            rank + 1,
            h.layer,
            h.head,
            table.mean_detection_score[i],
            table.mean_image_mass[i],
            table.mean_concentration[i]
        ));
    }
    write_file(&args.out.join("ranking.csv"), &ranking)?;

    let mut out = format!(
        "{}x{} heads from {} samples of {}/{}\n",
        table.layers, table.heads, table.sample_count, table.model_id, table.dataset_id
    );
    if let Some(rule) = args.rule {
        // Same seed derivation as `toy ablate`, so selections agree.
        let row = PlanRow::new(args.stage, rule, args.count);
        let mut sel = Selection::new(args.stage, rule, args.count, row.mask_seed(args.seed));
        sel.others_skip = args.others_skip;
        let mask = rank_heads(&table, &sel)?;
        write_file(
            &args.out.join("mask.json"),
            serde_json::to_string_pretty(&mask).map_err(vhead_core::Error::from)? + "\n",
        )?;
        let heads: Vec<String> = mask.heads.iter().map(|h| h.to_string()).collect();
        out.push_str(&format!("selected {} heads: {}\n", mask.len(), heads.join(" ")));
    }
    Ok(Outcome::ok(out))
}
