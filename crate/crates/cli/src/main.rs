//! `kps`: data generation, training, evaluation and the experiment grids.

mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use kps_core::data_io::persist::{read_json, read_jsonl, write_json};
use kps_core::data_io::synthetic::partition;
use kps_core::data_io::{
    generate_synthetic, load_annotations, save_annotations, ArtifactKind, RunDir, SyntheticConfig,
};
use kps_core::datamodel::Dataset;
use kps_core::embedding::{export_embeddings, pca_2d, similarity_gap, EmbeddingRow};
use kps_core::evaluation::ResultsTable;
use kps_core::nn::checkpoint::load_checkpoint;
use kps_core::sampling::{generate_split, SplitSpec};
use kps_core::training::experiments::{
    Experiment, RunOutcome, SweepRow, SWEEP_LAMBDA2, SWEEP_LAMBDA34,
};
use kps_core::training::{predict, score_predictions, EpochRecord, Method, TrainConfig, ValMetric};

#[derive(Parser)]
#[command(
    name = "kps",
    version,
    about = "Semi-supervised keypoint localization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct ConfigArgs {
    /// Flat `key = value` file overriding the training defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for initialisation, batching and warps.
    #[arg(long)]
    seed: Option<u64>,
    /// Single override, e.g. `--set lr=1e-3`. Applied after `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in {}", path.display()))?;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("`--set {o}` is not KEY=VALUE"))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        match std::env::var("KPS_DETERMINISTIC").as_deref() {
            Ok("1") => cfg.deterministic = true,
            Ok("0") => warn!("KPS_DETERMINISTIC=0 has no effect: execution is single-threaded and always deterministic"),
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grid {
    /// Loss-subset arms and the supervised baseline.
    Losses,
    /// Supervised, pseudo-label, ELT and full method.
    Methods,
    /// Full method with and without ground-truth heatmaps.
    GtHeatmaps,
    /// Full method while the unlabeled pool shrinks.
    Unlabeled,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Pck,
    Pckh,
    Auto,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlotKind {
    /// Validation PCK and training loss per epoch from a history file.
    Curves,
    /// Mean validation PCK per value of each weight from a sweep file.
    Sweep,
    /// 2-D linear projection of an embeddings file.
    Embed,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as train/val/test annotation files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2800)]
        images: usize,
        #[arg(long, default_value_t = 5)]
        keypoints: usize,
        /// Square input side in pixels; must be a multiple of 16.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 400)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write labeled/unlabeled splits of the training set.
    Split {
        /// Dataset directory (with `train/`) or an annotation file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.5,1.0")]
        fraction: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        repeat: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method on one split and score it on the test set.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "full")]
        method: Method,
        #[arg(long, default_value_t = 0.05)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        /// Use this split file instead of generating one.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, default_value_t = 0.5)]
        pl_threshold: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on an annotated dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation file, or a dataset directory (its `test/` is used).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "pck")]
        metric: MetricArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a results grid and write a table-shaped report.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        grid: Grid,
        /// Labeled fractions; the unlabeled grid uses the first one.
        #[arg(long, value_delimiter = ',')]
        fraction: Option<Vec<f64>>,
        /// Unlabeled-pool fractions for the unlabeled grid.
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,1.0")]
        unlabeled: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, default_value_t = 0.5)]
        pl_threshold: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full method over a grid of loss weights; one metric row per setting.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        #[arg(long, value_delimiter = ',')]
        lambda2: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        lambda3: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        lambda4: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export keypoint representations of every image.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation file, or a dataset directory (its `test/` is used).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a JSON-lines artifact as an SVG chart.
    Plot {
        #[arg(value_enum)]
        kind: PlotKind,
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn annotation_file(data: &Path, part: &str) -> PathBuf {
    if data.is_dir() {
        data.join(part).join("annotations.json")
    } else {
        data.to_path_buf()
    }
}

fn load_part(data: &Path, part: &str) -> Result<Dataset> {
    let path = annotation_file(data, part);
    load_annotations(&path).with_context(|| format!("loading {}", path.display()))
}

fn load_all(data: &Path) -> Result<(Dataset, Dataset, Dataset)> {
    if !data.is_dir() {
        bail!(
            "{} must be a directory with train/, val/ and test/",
            data.display()
        );
    }
    Ok((
        load_part(data, "train")?,
        load_part(data, "val")?,
        load_part(data, "test")?,
    ))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            images,
            keypoints,
            size,
            train,
            val,
            seed,
        } => synth(&out, images, keypoints, size, train, val, seed),
        Command::Split {
            data,
            fraction,
            repeat,
            seed,
            out,
        } => split(&data, &fraction, &repeat, seed, &out),
        Command::Train {
            data,
            method,
            fraction,
            repeat,
            split,
            split_seed,
            pl_threshold,
            cfg,
            out,
        } => train(
            &data,
            method,
            fraction,
            repeat,
            split.as_deref(),
            split_seed,
            pl_threshold,
            &cfg,
            &out,
        ),
        Command::Eval {
            checkpoint,
            data,
            alpha,
            metric,
            out,
        } => eval(&checkpoint, &data, alpha, metric, &out),
        Command::Ablate {
            data,
            grid,
            fraction,
            unlabeled,
            repeats,
            split_seed,
            pl_threshold,
            cfg,
            out,
        } => ablate(
            &data,
            grid,
            fraction,
            &unlabeled,
            repeats,
            split_seed,
            pl_threshold,
            &cfg,
            &out,
        ),
        Command::Sweep {
            data,
            fraction,
            repeat,
            lambda2,
            lambda3,
            lambda4,
            split_seed,
            cfg,
            out,
        } => sweep(
            &data,
            fraction,
            repeat,
            [lambda2, lambda3, lambda4],
            split_seed,
            &cfg,
            &out,
        ),
        Command::Embed {
            checkpoint,
            data,
            out,
        } => embed(&checkpoint, &data, &out),
        Command::Plot { kind, input, out } => plot(kind, &input, &out),
    }
}

fn synth(
    out: &Path,
    images: usize,
    keypoints: usize,
    size: usize,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<()> {
    let cfg = SyntheticConfig {
        n_images: images,
        num_keypoints: keypoints,
        image_size: (size, size),
        seed,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&cfg)?;
    let (train, val, test) = partition(&ds, n_train, n_val)?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        save_annotations(part, &out.join(name))?;
    }
    write_json(&out.join("synth.json"), &cfg)?;
    info!(
        "wrote {} / {} / {} images to {}",
        train.len(),
        val.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn split(data: &Path, fractions: &[f64], repeats: &[usize], seed: u64, out: &Path) -> Result<()> {
    let ds = load_part(data, "train")?;
    let mut run = RunDir::create(
        out,
        json!({"command": "split", "fractions": fractions, "repeats": repeats, "seed": seed}),
    )?;
    for &f in fractions {
        for &r in repeats {
            let s = generate_split(&ds.ids(), f, r, seed)?;
            let e = run.write_json(ArtifactKind::Split, &format!("split-{f}-r{r}"), &s)?;
            println!(
                "{}: {} labeled, {} unlabeled",
                run.full_path(&e).display(),
                s.labeled_ids.len(),
                s.unlabeled_ids.len()
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TestMetrics<'a> {
    method: &'a str,
    fraction: f64,
    repeat: usize,
    metric: &'static str,
    alpha: f64,
    percent: Option<f64>,
    per_keypoint: &'a [Option<f64>],
    best_epoch: usize,
    best_val: f64,
}

/// Everything a single training run leaves in its run directory.
fn write_run(run: &mut RunDir, out: &RunOutcome, split: &SplitSpec, test: &Dataset) -> Result<()> {
    let stem = format!("{}-{}-r{}", out.method, out.fraction, out.repeat);
    run.write_json(
        ArtifactKind::Split,
        &format!("split-{}-r{}", out.fraction, out.repeat),
        split,
    )?;
    run.write_checkpoint(
        &stem,
        &out.backbone,
        &out.kcn,
        &test.meta,
        serde_json::to_value(&out.config)?,
        out.best_epoch,
        Some(out.best_val),
    )?;
    run.write_jsonl(
        ArtifactKind::Metrics,
        &format!("{stem}-history"),
        &out.history,
    )?;
    run.write_jsonl(ArtifactKind::Metrics, &format!("{stem}-steps"), &out.steps)?;
    run.write_json(
        ArtifactKind::Metrics,
        &format!("{stem}-test"),
        &TestMetrics {
            method: out.method.name(),
            fraction: out.fraction,
            repeat: out.repeat,
            metric: "pck",
            alpha: 0.1,
            percent: out.test.percent,
            per_keypoint: &out.test.per_keypoint,
            best_epoch: out.best_epoch,
            best_val: out.best_val,
        },
    )?;
    let preds = predict(&out.backbone, test)?;
    run.write_jsonl(ArtifactKind::Predictions, &format!("{stem}-test"), &preds)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    method: Method,
    fraction: f64,
    repeat: usize,
    split_file: Option<&Path>,
    split_seed: u64,
    pl_threshold: f64,
    cfg: &ConfigArgs,
    out: &Path,
) -> Result<()> {
    let base = cfg.load()?;
    let (train, val, test) = load_all(data)?;
    let exp = Experiment {
        train: &train,
        val: &val,
        test: &test,
        base: base.clone(),
        split_seed,
        pl_threshold,
    };
    let split = match split_file {
        Some(p) => read_json::<SplitSpec>(p)?,
        None => exp.split(fraction, repeat)?,
    };
    let mut run = RunDir::create(
        out,
        json!({
            "command": "train",
            "method": method.name(),
            "fraction": split.fraction,
            "repeat": split.repeat_index,
            "split_seed": split_seed,
            "pl_threshold": pl_threshold,
            "train": base,
        }),
    )?;
    let outcome = exp.run(method, &split)?;
    write_run(&mut run, &outcome, &split, &test)?;
    println!(
        "{} ({}) at {}% labeled, repeat {}: test PCK@0.1 {:.2}, best epoch {}",
        method.label(),
        method,
        split.fraction * 100.0,
        split.repeat_index,
        outcome.test_percent(),
        outcome.best_epoch
    );
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, alpha: f64, metric: MetricArg, out: &Path) -> Result<()> {
    let (backbone, _kcn, side) = load_checkpoint(checkpoint)?;
    let ds = load_part(data, "test")?;
    if side.meta.keypoint_names != ds.meta.keypoint_names
        || side.meta.input_size != ds.meta.input_size
    {
        bail!("checkpoint was trained on a different keypoint set or input size");
    }
    let preds = predict(&backbone, &ds)?;
    let vm = match metric {
        MetricArg::Pck => ValMetric::Pck,
        MetricArg::Pckh => ValMetric::Pckh,
        MetricArg::Auto => ValMetric::Auto,
    };
    let score = score_predictions(&preds, &ds, vm, Some(alpha))?;
    let name = format!("{metric:?}").to_lowercase();
    let mut run = RunDir::create(
        out,
        json!({"command": "eval", "checkpoint": checkpoint, "data": annotation_file(data, "test"), "alpha": alpha, "metric": name}),
    )?;
    run.write_jsonl(ArtifactKind::Predictions, "eval", &preds)?;
    run.write_json(ArtifactKind::Metrics, "eval", &score)?;
    match score.percent {
        Some(p) => println!(
            "{name}@{alpha}: {p:.2} ({} / {})",
            score.correct, score.total
        ),
        None => println!("no visible keypoints to score"),
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RunRow {
    method: String,
    fraction: f64,
    repeat: usize,
    use_gt_for_labeled: bool,
    test_pck: Option<f64>,
    best_epoch: usize,
    best_val: f64,
}

impl RunRow {
    fn of(o: &RunOutcome) -> Self {
        Self {
            method: o.method.name().into(),
            fraction: o.fraction,
            repeat: o.repeat,
            use_gt_for_labeled: o.config.policy.use_gt_for_labeled,
            test_pck: o.test.percent,
            best_epoch: o.best_epoch,
            best_val: o.best_val,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    data: &Path,
    grid: Grid,
    fractions: Option<Vec<f64>>,
    unlabeled: &[f64],
    repeats: usize,
    split_seed: u64,
    pl_threshold: f64,
    cfg: &ConfigArgs,
    out: &Path,
) -> Result<()> {
    if repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let base = cfg.load()?;
    let (train, val, test) = load_all(data)?;
    let exp = Experiment {
        train: &train,
        val: &val,
        test: &test,
        base: base.clone(),
        split_seed,
        pl_threshold,
    };
    let fractions = fractions.unwrap_or_else(|| match grid {
        Grid::Unlabeled => vec![0.05],
        _ => vec![0.05, 0.1, 0.2, 0.5, 1.0],
    });
    let mut run = RunDir::create(
        out,
        json!({"command": "ablate", "grid": format!("{grid:?}"), "fractions": fractions, "unlabeled": unlabeled,
               "repeats": repeats, "split_seed": split_seed, "train": base}),
    )?;
    let mut rows = Vec::new();
    let mut record = |o: &RunOutcome| rows.push(RunRow::of(o));
    let table: ResultsTable = match grid {
        Grid::Losses => exp.method_table(
            "Unsupervised loss ablation (test PCK@0.1)",
            &Method::ABLATION,
            &fractions,
            repeats,
            &mut record,
        )?,
        Grid::Methods => exp.method_table(
            "Methods by labeled fraction (test PCK@0.1)",
            &[Method::Supervised, Method::Pl, Method::Elt, Method::Full],
            &fractions,
            repeats,
            &mut record,
        )?,
        Grid::GtHeatmaps => exp.gt_heatmap_table(&fractions, repeats, &mut record)?,
        Grid::Unlabeled => {
            if fractions.len() > 1 {
                warn!(
                    "the unlabeled grid uses only the first labeled fraction, {}",
                    fractions[0]
                );
            }
            exp.unlabeled_table(fractions[0], unlabeled, repeats, &mut record)?
        }
    };
    run.write_jsonl(ArtifactKind::Metrics, "runs", &rows)?;
    run.write_json(ArtifactKind::Metrics, "table", &table)?;
    let md = table.to_markdown();
    run.write_artifact(ArtifactKind::Report, "table", "md", md.as_bytes())?;
    println!("{md}");
    Ok(())
}

fn sweep(
    data: &Path,
    fraction: f64,
    repeat: usize,
    lambdas: [Option<Vec<f64>>; 3],
    split_seed: u64,
    cfg: &ConfigArgs,
    out: &Path,
) -> Result<()> {
    let base = cfg.load()?;
    let (train, val, test) = load_all(data)?;
    let exp = Experiment {
        train: &train,
        val: &val,
        test: &test,
        base: base.clone(),
        split_seed,
        pl_threshold: 0.5,
    };
    let [l2, l3, l4] = lambdas;
    let l2 = l2.unwrap_or_else(|| SWEEP_LAMBDA2.to_vec());
    let l3 = l3.unwrap_or_else(|| SWEEP_LAMBDA34.to_vec());
    let l4 = l4.unwrap_or_else(|| SWEEP_LAMBDA34.to_vec());
    let mut run = RunDir::create(
        out,
        json!({"command": "sweep", "fraction": fraction, "repeat": repeat, "lambda2": l2, "lambda3": l3,
               "lambda4": l4, "split_seed": split_seed, "train": base}),
    )?;
    let split = exp.split(fraction, repeat)?;
    let rows = exp.lambda_sweep(&split, &l2, &l3, &l4, |r| {
        println!(
            "lambda2={} lambda3={} lambda4={}: val {:.2}{}",
            r.lambda2,
            r.lambda3,
            r.lambda4,
            r.val_pck,
            if r.finite { "" } else { " (diverged)" }
        )
    })?;
    let e = run.write_jsonl(ArtifactKind::Metrics, "sweep", &rows)?;
    println!("{} rows in {}", rows.len(), run.full_path(&e).display());
    Ok(())
}

fn embed(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let (backbone, _kcn, side) = load_checkpoint(checkpoint)?;
    let ds = load_part(data, "test")?;
    if side.meta.keypoint_names != ds.meta.keypoint_names
        || side.meta.input_size != ds.meta.input_size
    {
        bail!("checkpoint was trained on a different keypoint set or input size");
    }
    let rows = export_embeddings(&backbone, &ds)?;
    let mut run = RunDir::create(
        out,
        json!({"command": "embed", "checkpoint": checkpoint, "data": annotation_file(data, "test")}),
    )?;
    let e = run.write_jsonl(ArtifactKind::Embeddings, "embeddings", &rows)?;
    let stats = similarity_gap(&rows)?;
    run.write_json(ArtifactKind::Metrics, "similarity", &stats)?;
    println!(
        "{} rows in {}; mean cosine within keypoints {:.3}, across {:.3}, gap {:.3}",
        rows.len(),
        run.full_path(&e).display(),
        stats.intra,
        stats.inter,
        stats.gap
    );
    Ok(())
}

fn plot(kind: PlotKind, input: &Path, out: &Path) -> Result<()> {
    let doc = match kind {
        PlotKind::Curves => {
            let rows: Vec<EpochRecord> = read_jsonl(input)?;
            let pck = rows.iter().map(|r| (r.epoch as f64, r.pck)).collect();
            let top = rows
                .iter()
                .map(|r| r.total)
                .fold(0.0f64, f64::max)
                .max(1e-12);
            let loss = rows
                .iter()
                .map(|r| (r.epoch as f64, 100.0 * r.total / top))
                .collect();
            svg::line_chart(
                "Validation accuracy and training loss",
                "epoch",
                "percent",
                &[
                    svg::Series {
                        name: "val PCK".into(),
                        points: pck,
                    },
                    svg::Series {
                        name: "total loss (% of max)".into(),
                        points: loss,
                    },
                ],
            )
        }
        PlotKind::Sweep => {
            let rows: Vec<SweepRow> = read_jsonl(input)?;
            let mut series = Vec::new();
            for (name, get) in [
                (
                    "lambda2",
                    (|r: &SweepRow| r.lambda2) as fn(&SweepRow) -> f64,
                ),
                ("lambda3", |r: &SweepRow| r.lambda3),
                ("lambda4", |r: &SweepRow| r.lambda4),
            ] {
                let mut by_value: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
                for r in rows.iter().filter(|r| r.val_pck.is_finite()) {
                    by_value
                        .entry(get(r).to_bits())
                        .or_default()
                        .push(r.val_pck);
                }
                let mut pts: Vec<(f64, f64)> = by_value
                    .into_iter()
                    .map(|(bits, v)| {
                        (
                            f64::from_bits(bits).log10(),
                            v.iter().sum::<f64>() / v.len() as f64,
                        )
                    })
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                series.push(svg::Series {
                    name: name.into(),
                    points: pts,
                });
            }
            svg::line_chart(
                "Sensitivity to the loss weights",
                "log10(weight)",
                "mean val PCK",
                &series,
            )
        }
        PlotKind::Embed => {
            let rows: Vec<EmbeddingRow> = read_jsonl(input)?;
            let proj = pca_2d(&rows)?;
            let k = rows.iter().map(|r| r.keypoint_index + 1).max().unwrap_or(0);
            let pts: Vec<_> = proj
                .iter()
                .zip(&rows)
                .map(|(p, r)| (p[0], p[1], r.keypoint_index))
                .collect();
            let names: Vec<String> = (0..k).map(|i| format!("keypoint {i}")).collect();
            svg::scatter(
                "Keypoint representations, PCA projection (linear, not t-SNE)",
                &pts,
                &names,
            )
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, doc).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}
