//! Command-line surface: feature extraction, training, prediction and the
//! evaluation protocols, all reproducible from a single --seed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use piqi::container::{ModelContainer, Provenance};
use piqi::evalkit::{self, EvalConfig, MetricReport, SplitMode};
use piqi::featpipe::{self, LAYOUT_VERSION};
use piqi::gpr;
use piqi::manifest::DatasetManifest;
use piqi::stackens::{self, BagConfig};

#[derive(Parser)]
#[command(name = "piqi", version, about = "No-reference perceptual image quality toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct TrainOpts {
    /// Master seed for all randomized stages.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = library default, 1 = sequential).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Number of bagged ensemble members.
    #[arg(long, default_value_t = stackens::DEFAULT_N_MEMBERS)]
    members: usize,
    /// Fraction of training rows sampled per member.
    #[arg(long = "row-frac", default_value_t = stackens::DEFAULT_ROW_FRACTION)]
    row_frac: f64,
    /// Fraction of features sampled per member.
    #[arg(long = "feat-frac", default_value_t = stackens::DEFAULT_FEATURE_FRACTION)]
    feat_frac: f64,
    /// Hyperparameter-tuning evaluation budget per member.
    #[arg(long = "tune-budget", default_value_t = gpr::DEFAULT_TUNE_BUDGET)]
    tune_budget: usize,
    /// Flip higher-worse score scales so higher always means better.
    #[arg(long = "unify-polarity")]
    unify_polarity: bool,
}

impl TrainOpts {
    fn bag(&self) -> BagConfig {
        BagConfig {
            n_members: self.members,
            row_fraction: self.row_frac,
            feature_fraction: self.feat_frac,
            master_seed: self.seed,
            tune_budget: self.tune_budget,
            init_params: None,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Extract features for every manifest image into a CSV dump.
    Extract {
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "unify-polarity")]
        unify_polarity: bool,
    },
    /// Train a stacked ensemble from a manifest or a feature CSV.
    Train {
        input: PathBuf,
        /// Output model container; convergence curve and test metrics are
        /// written next to it as <out>.curve.csv and <out>.metrics.csv.
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Score a single image, a manifest, or a feature CSV with a model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        input: PathBuf,
        /// CSV output path; omitted means stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Evaluate a trained model against a manifest's scores.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        manifest: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long = "unify-polarity")]
        unify_polarity: bool,
    },
    /// Repeated random-split evaluation with median reporting.
    Repeated {
        input: PathBuf,
        /// Per-iteration metrics CSV; the median is printed to stdout.
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        /// 'random' or 'group' (groups keyed by filename stem before '.').
        #[arg(long = "split-mode", default_value = "random")]
        split_mode: SplitMode,
        /// Tune hyperparameters once up front instead of per member.
        #[arg(long = "shared-tuning")]
        shared_tuning: bool,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Train on one dataset, evaluate on another.
    Crosseval {
        train_input: PathBuf,
        test_input: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into())
    ));
    std::fs::write(&tmp, contents)
        .and_then(|_| std::fs::rename(&tmp, path))
        .with_context(|| format!("writing {}", path.display()))
}

/// Features plus normalized scores, from either a manifest or a feature CSV.
struct TrainingInput {
    dataset_name: String,
    paths: Vec<PathBuf>,
    features: Vec<Vec<f64>>,
    scores: Vec<f64>,
}

fn is_manifest(text: &str) -> bool {
    text.lines()
        .any(|l| l.trim_start().starts_with("# score_min"))
}

fn feature_header() -> String {
    let mut cols = vec!["path".to_string()];
    cols.extend(featpipe::layout().column_names());
    cols.push("score".to_string());
    cols.join(",")
}

fn parse_feature_csv(text: &str, origin: &Path) -> Result<TrainingInput> {
    let expected_header = feature_header();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .with_context(|| format!("{}: empty feature CSV", origin.display()))?;
    if header.trim() != expected_header {
        bail!(
            "{}: feature CSV header does not match layout {LAYOUT_VERSION}",
            origin.display()
        );
    }
    let mut input = TrainingInput {
        dataset_name: origin
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "features".into()),
        paths: Vec::new(),
        features: Vec::new(),
        scores: Vec::new(),
    };
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != featpipe::FEATURE_COUNT + 2 {
            bail!(
                "{}: row {} has {} fields, expected {}",
                origin.display(),
                idx + 1,
                fields.len(),
                featpipe::FEATURE_COUNT + 2
            );
        }
        input.paths.push(PathBuf::from(fields[0]));
        let values: Vec<f64> = fields[1..=featpipe::FEATURE_COUNT]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .with_context(|| format!("{}: row {}: bad value '{f}'", origin.display(), idx + 1))
            })
            .collect::<Result<_>>()?;
        input.features.push(values);
        input.scores.push(
            fields[featpipe::FEATURE_COUNT + 1]
                .parse::<f64>()
                .with_context(|| format!("{}: row {}: bad score", origin.display(), idx + 1))?,
        );
    }
    Ok(input)
}

fn extract_from_manifest(
    manifest: &DatasetManifest,
    jobs: usize,
    unify_polarity: bool,
) -> Result<TrainingInput> {
    let normalized = manifest.normalize_scores(unify_polarity)?;
    let batch = featpipe::extract_batch(manifest, jobs)?;
    for (path, reason) in &batch.failures {
        eprintln!("warning: skipped {}: {reason}", path.display());
    }
    // batch rows keep manifest order; realign normalized scores to survivors
    let mut scores = Vec::with_capacity(batch.paths.len());
    let mut cursor = 0usize;
    for (row, norm) in manifest.rows.iter().zip(&normalized) {
        if cursor < batch.paths.len() && batch.paths[cursor] == row.0 {
            scores.push(*norm);
            cursor += 1;
        }
    }
    Ok(TrainingInput {
        dataset_name: manifest.dataset_name.clone(),
        paths: batch.paths,
        features: batch.features,
        scores,
    })
}

fn load_training_input(path: &Path, jobs: usize, unify_polarity: bool) -> Result<TrainingInput> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    if is_manifest(&text) {
        let manifest = DatasetManifest::parse(&text, path)?;
        extract_from_manifest(&manifest, jobs, unify_polarity)
    } else {
        parse_feature_csv(&text, path)
    }
}

/// Group label per image: the filename stem up to the first '.', so
/// distorted versions of one reference share a group.
fn group_labels(paths: &[PathBuf]) -> Vec<usize> {
    let mut keys: Vec<String> = Vec::new();
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let key = name.split('.').next().unwrap_or("").to_string();
            match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    keys.len() - 1
                }
            }
        })
        .collect()
}

fn metrics_csv(report: &MetricReport) -> String {
    format!(
        "r2,rmse,plcc,srocc,krocc,n\n{},{},{},{},{},{}\n",
        report.r2, report.rmse, report.plcc, report.srocc, report.krocc, report.n
    )
}

fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn cmd_extract(
    manifest_path: &Path,
    out: &Path,
    jobs: usize,
    unify_polarity: bool,
) -> Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let input = extract_from_manifest(&manifest, jobs, unify_polarity)?;
    let mut csv = feature_header();
    csv.push('\n');
    for ((path, row), score) in input.paths.iter().zip(&input.features).zip(&input.scores) {
        csv.push_str(&path.display().to_string());
        for v in row {
            csv.push(',');
            csv.push_str(&v.to_string());
        }
        csv.push(',');
        csv.push_str(&score.to_string());
        csv.push('\n');
    }
    write_atomic(out, &csv)?;
    eprintln!(
        "extracted {} images ({} failed) -> {}",
        input.features.len(),
        manifest.rows.len() - input.features.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(input_path: &Path, out: &Path, opts: &TrainOpts) -> Result<()> {
    let input = load_training_input(input_path, opts.jobs, opts.unify_polarity)?;
    let plan = evalkit::make_splits(
        input.features.len(),
        None,
        opts.seed,
        SplitMode::RandomByImage,
    )?;
    let ensemble = evalkit::train_on_split(
        &input.features,
        &input.scores,
        &plan,
        &opts.bag(),
        opts.jobs,
        LAYOUT_VERSION,
    )?;
    let (_, report) =
        evalkit::evaluate_rows(&ensemble, &input.features, &input.scores, &plan.test_idx)?;

    let mut curve_csv = String::from("member_count,rmse\n");
    for (k, rmse) in stackens::convergence_curve(&ensemble) {
        curve_csv.push_str(&format!("{k},{rmse}\n"));
    }

    let container = ModelContainer {
        layout_version: LAYOUT_VERSION.to_string(),
        provenance: Provenance {
            dataset_name: input.dataset_name,
            n_train: plan.train_idx.len() as u64,
            master_seed: opts.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        ensemble,
    };
    container.save(out)?;
    write_atomic(&out.with_extension("piqi.curve.csv"), &curve_csv)?;
    write_atomic(&out.with_extension("piqi.metrics.csv"), &metrics_csv(&report))?;
    println!(
        "trained {} members, {} selected; test srocc {:.4}, rmse {:.4} -> {}",
        container.ensemble.members.len(),
        container.ensemble.selected.len(),
        report.srocc,
        report.rmse,
        out.display()
    );
    Ok(())
}

fn cmd_predict(model_path: &Path, input: &Path, out: Option<&Path>, jobs: usize) -> Result<()> {
    let container = ModelContainer::load(model_path)?;
    let text_input = std::fs::read_to_string(input).ok();
    let rows: Vec<(PathBuf, Vec<f64>)> = match text_input {
        Some(text) if is_manifest(&text) => {
            let manifest = DatasetManifest::parse(&text, input)?;
            let t = extract_from_manifest(&manifest, jobs, false)?;
            t.paths.into_iter().zip(t.features).collect()
        }
        Some(text) if text.starts_with("path,") => {
            let t = parse_feature_csv(&text, input)?;
            t.paths.into_iter().zip(t.features).collect()
        }
        _ => {
            if container.layout_version != LAYOUT_VERSION {
                bail!(
                    "model layout {} cannot score raw images (expected {LAYOUT_VERSION})",
                    container.layout_version
                );
            }
            let planes = piqi::imgio::load_image(input)?;
            let fv = piqi::featpipe::extract_features(&planes)?;
            vec![(input.to_path_buf(), fv.values)]
        }
    };
    let mut csv = String::from("path,score\n");
    for (path, features) in &rows {
        let score = stackens::ensemble_predict(&container.ensemble, features)?;
        csv.push_str(&format!("{},{score}\n", path.display()));
    }
    emit(out, &csv)
}

fn cmd_evaluate(
    model_path: &Path,
    manifest_path: &Path,
    out: Option<&Path>,
    jobs: usize,
    unify_polarity: bool,
) -> Result<()> {
    let container = ModelContainer::load(model_path)?;
    let input = load_training_input(manifest_path, jobs, unify_polarity)?;
    let idx: Vec<usize> = (0..input.features.len()).collect();
    let (_, report) =
        evalkit::evaluate_rows(&container.ensemble, &input.features, &input.scores, &idx)?;
    emit(out, &metrics_csv(&report))
}

fn cmd_repeated(
    input_path: &Path,
    out: &Path,
    iters: usize,
    split_mode: SplitMode,
    shared_tuning: bool,
    opts: &TrainOpts,
) -> Result<()> {
    let input = load_training_input(input_path, opts.jobs, opts.unify_polarity)?;
    let groups = group_labels(&input.paths);
    let cfg = EvalConfig {
        bag: opts.bag(),
        split_mode,
        shared_tuning,
        jobs: opts.jobs,
    };
    let result = evalkit::repeated_eval(
        &input.features,
        &input.scores,
        Some(&groups),
        iters,
        opts.seed,
        &cfg,
    )?;
    let mut csv = String::from("iter,r2,rmse,plcc,srocc,krocc,n\n");
    for (i, r) in result.reports.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            r.r2, r.rmse, r.plcc, r.srocc, r.krocc, r.n
        ));
    }
    write_atomic(out, &csv)?;
    for (it, reason) in &result.failures {
        eprintln!("warning: iteration {it} failed: {reason}");
    }
    let m = &result.median;
    println!(
        "median over {} iterations: r2 {:.4}, rmse {:.4}, plcc {:.4}, srocc {:.4}, krocc {:.4}",
        result.reports.len(),
        m.r2,
        m.rmse,
        m.plcc,
        m.srocc,
        m.krocc
    );
    Ok(())
}

fn cmd_crosseval(
    train_path: &Path,
    test_path: &Path,
    out: Option<&Path>,
    opts: &TrainOpts,
) -> Result<()> {
    // polarity must agree between the datasets unless unification is on
    let read = |p: &Path| -> Result<Option<DatasetManifest>> {
        let text =
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(if is_manifest(&text) {
            Some(DatasetManifest::parse(&text, p)?)
        } else {
            None
        })
    };
    if let (Some(a), Some(b)) = (read(train_path)?, read(test_path)?) {
        if a.polarity != b.polarity && !opts.unify_polarity {
            return Err(piqi::Error::PolarityMismatch(
                a.dataset_name.clone(),
                b.dataset_name.clone(),
            )
            .into());
        }
    }
    let train = load_training_input(train_path, opts.jobs, opts.unify_polarity)?;
    let test = load_training_input(test_path, opts.jobs, opts.unify_polarity)?;
    let cfg = EvalConfig {
        bag: opts.bag(),
        split_mode: SplitMode::RandomByImage,
        shared_tuning: false,
        jobs: opts.jobs,
    };
    let (_, report) = evalkit::cross_dataset(
        &train.features,
        &train.scores,
        &test.features,
        &test.scores,
        opts.seed,
        &cfg,
    )?;
    emit(out, &metrics_csv(&report))
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Extract {
            manifest,
            out,
            jobs,
            seed: _,
            unify_polarity,
        } => cmd_extract(&manifest, &out, jobs, unify_polarity),
        Cmd::Train { input, out, opts } => cmd_train(&input, &out, &opts),
        Cmd::Predict {
            model,
            input,
            out,
            jobs,
        } => cmd_predict(&model, &input, out.as_deref(), jobs),
        Cmd::Evaluate {
            model,
            manifest,
            out,
            jobs,
            unify_polarity,
        } => cmd_evaluate(&model, &manifest, out.as_deref(), jobs, unify_polarity),
        Cmd::Repeated {
            input,
            out,
            iters,
            split_mode,
            shared_tuning,
            opts,
        } => cmd_repeated(&input, &out, iters, split_mode, shared_tuning, &opts),
        Cmd::Crosseval {
            train_input,
            test_input,
            out,
            opts,
        } => cmd_crosseval(&train_input, &test_input, out.as_deref(), &opts),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
