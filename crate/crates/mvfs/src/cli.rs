//! The `mvfs` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use mvfs_core::backbone::BackboneKind;
use mvfs_core::controller::Phase;
use mvfs_core::data::{Dataset, GroundTruth, InformativeField, SyntheticMode, SyntheticSpec, Vocabulary};
use mvfs_core::metrics::{group_breakdown, RunReport};
use mvfs_core::numeric::grad_check;
use mvfs_core::training::{self, Mode, Model, SweepRow, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{read_checkpoint, read_json, write_atomic, write_checkpoint, write_json};
use crate::error::{Error, Result};
use crate::runspec::{load_data, output_dir, remap_truth, LoadedData, RunSpecFile, SyntheticSource};
use crate::tsv::{read_tsv, write_tsv};

pub const CHECKPOINT_FILE: &str = "checkpoint.mvfs";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";
pub const PROFILE_FILE: &str = "profile.csv";
pub const GROUPS_FILE: &str = "groups.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const BREAKDOWN_FILE: &str = "breakdown.csv";
pub const TRUTH_FILE: &str = "truth.json";

/// Relative error bound of `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "mvfs", version, about = "Per-instance feature selection for CTR models")]
struct Cli {
    /// Overrides the seed of the run or generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct OutArg {
    /// Output directory; overrides `outputs.dir` of the run file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Variant {
    NoIsm,
    NoGate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Dims {
    Small,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/valid/test TSV splits and ground truth.
    Synth {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the instance count.
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Warm-up plus joint training; writes a checkpoint and a report.
    Train {
        run: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Evaluate a checkpoint on a TSV file or on a run file's test split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "run", required_unless_present = "run")]
        data: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Ground truth for selection quality (`synth` output).
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the run's backbone under a frozen controller from a checkpoint.
    Transfer {
        checkpoint: PathBuf,
        run: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train the full model and one ablated variant.
    Ablate {
        run: PathBuf,
        #[arg(long, value_enum)]
        variant: Variant,
        #[command(flatten)]
        out: OutArg,
    },
    /// One run per number of sub-networks.
    Sweep {
        run: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Finite-difference check of both backbones under the full controller.
    Gradcheck {
        #[arg(long, value_enum, default_value = "small")]
        dims: Dims,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-group AUC differences of two checkpoints (A minus B).
    Breakdown {
        checkpoint_a: PathBuf,
        checkpoint_b: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        fields: Vec<usize>,
        #[arg(long, conflicts_with = "run", required_unless_present = "run")]
        data: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Logging to stderr, filtered by `MVFS_LOG`, without timestamps.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("MVFS_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { spec, out, instances } => synth(&spec, &out, seed, instances),
        Command::Train { run, out } => {
            let spec = load_run(&run, seed)?;
            let dir = output_dir(out.out.as_deref(), Some(&spec))?;
            write_json(&dir.join(CONFIG_FILE), &spec)?;
            let data = load_data(&spec.data)?;
            train_into(&dir, &spec.model, &data)?;
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            run,
            truth,
            out,
        } => eval(
            &checkpoint,
            data.as_deref(),
            run.as_deref(),
            truth.as_deref(),
            &out,
            seed,
        ),
        Command::Transfer { checkpoint, run, out } => transfer(&checkpoint, &run, out.out.as_deref(), seed),
        Command::Ablate { run, variant, out } => ablate(&run, variant, out.out.as_deref(), seed),
        Command::Sweep { run, k, jobs, out } => sweep(&run, &k, jobs, out.out.as_deref(), seed),
        Command::Gradcheck { dims: Dims::Small, out } => gradcheck(seed.unwrap_or(0), out.as_deref()),
        Command::Breakdown {
            checkpoint_a,
            checkpoint_b,
            fields,
            data,
            run,
            out,
        } => breakdown(
            &checkpoint_a,
            &checkpoint_b,
            &fields,
            data.as_deref(),
            run.as_deref(),
            &out,
            seed,
        ),
    }
}

fn load_run(path: &Path, seed: Option<u64>) -> Result<RunSpecFile> {
    let mut spec = RunSpecFile::load(path)?;
    if let Some(s) = seed {
        spec.model.seed = s;
    }
    Ok(spec)
}

fn synth(path: &Path, out: &Path, seed: Option<u64>, instances: Option<usize>) -> Result<()> {
    let mut source: SyntheticSource = read_json(path)?;
    if let Some(s) = seed {
        source.spec.seed = s;
    }
    if let Some(m) = instances {
        source.instances = m;
    }
    source.spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::write(out, e))?;
    write_json(&out.join(CONFIG_FILE), &source)?;
    let data = load_data(&crate::runspec::DataSource::Synthetic(source.clone()))?;
    for (name, ds) in [
        ("train.tsv", &data.train),
        ("valid.tsv", &data.valid),
        ("test.tsv", &data.test),
    ] {
        write_tsv(&out.join(name), ds, &data.vocab)?;
    }
    write_json(&out.join(TRUTH_FILE), &source.spec.ground_truth())?;
    info!(
        "wrote {} / {} / {} instances to {}",
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

/// Trains, then writes checkpoint, report and CSV exports into `dir`.
fn train_into(dir: &Path, config: &TrainConfig, data: &LoadedData) -> Result<RunReport> {
    info!(
        "training {} with {} on {} instances",
        config.mode.label(),
        backbone_name(config.backbone),
        data.train.len()
    );
    let model = training::train(config, &data.train, &data.valid)?;
    finish(dir, &model, data)
}

fn finish(dir: &Path, model: &Model, data: &LoadedData) -> Result<RunReport> {
    let mut ckpt = model.checkpoint();
    ckpt.vocabulary = Some(data.vocab.clone());
    write_checkpoint(&dir.join(CHECKPOINT_FILE), &ckpt)?;
    write_reports(dir, model, &data.test, data.truth.as_ref())
}

fn write_reports(dir: &Path, model: &Model, ds: &Dataset, truth: Option<&GroundTruth>) -> Result<RunReport> {
    let report = training::report(model, ds, truth)?;
    info!("auc {:.6} logloss {:.6}", report.auc, report.logloss);
    write_json(&dir.join(REPORT_FILE), &report)?;
    if let Some(profile) = &report.subnet_profile {
        let mut csv = String::from("k,field,mean_importance\n");
        for (k, row) in profile.rows.iter().enumerate() {
            for (field, v) in row.iter().enumerate() {
                let _ = writeln!(csv, "{k},{field},{v}");
            }
        }
        write_atomic(&dir.join(PROFILE_FILE), csv.as_bytes())?;
    }
    let mut csv = String::from("field,group,auc,n\n");
    for g in &report.group_auc {
        let _ = writeln!(csv, "{},{},{},{}", g.field, g.group.name(), opt(g.auc), g.n);
    }
    write_atomic(&dir.join(GROUPS_FILE), csv.as_bytes())?;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn backbone_name(b: BackboneKind) -> &'static str {
    match b {
        BackboneKind::Mlp => "mlp",
        BackboneKind::DeepFm => "deepfm",
    }
}

fn load_model(path: &Path) -> Result<(Model, Option<Vocabulary>)> {
    let ckpt = read_checkpoint(path)?;
    let vocab = ckpt.vocabulary.clone();
    Ok((Model::from_checkpoint(ckpt)?, vocab))
}

/// The dataset a checkpoint is evaluated on: a TSV file encoded with the
/// checkpoint's vocabulary, or the test split of a run file.
fn eval_data(
    ckpt_path: &Path,
    vocab: Option<&Vocabulary>,
    data: Option<&Path>,
    run: Option<&Path>,
    seed: Option<u64>,
) -> Result<(Dataset, Option<GroundTruth>, serde_json::Value)> {
    match (data, run) {
        (Some(path), _) => {
            let vocab = vocab
                .ok_or_else(|| Error::Config(format!("{} stores no vocabulary; use --run", ckpt_path.display())))?;
            let (ds, _) = read_tsv(path, Some(vocab), 1)?;
            Ok((ds, None, json!({ "tsv": path })))
        }
        (None, Some(path)) => {
            let spec = load_run(path, seed)?;
            let loaded = load_data(&spec.data)?;
            Ok((
                loaded.test,
                loaded.truth,
                serde_json::to_value(&spec.data).map_err(runtime)?,
            ))
        }
        (None, None) => Err(Error::Config("pass --data or --run".into())),
    }
}

fn runtime(e: impl std::fmt::Display) -> Error {
    Error::Runtime(e.to_string())
}

fn check_schema(model: &Model, ds: &Dataset, what: &Path) -> Result<()> {
    if model.schema() != ds.schema() {
        return Err(Error::Config(format!(
            "{}: data vocabulary sizes {:?} differ from the checkpoint's {:?}",
            what.display(),
            ds.schema().vocab_sizes(),
            model.schema().vocab_sizes()
        )));
    }
    Ok(())
}

fn eval(
    ckpt_path: &Path,
    data: Option<&Path>,
    run: Option<&Path>,
    truth: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let (model, vocab) = load_model(ckpt_path)?;
    let (ds, run_truth, source) = eval_data(ckpt_path, vocab.as_ref(), data, run, seed)?;
    check_schema(&model, &ds, ckpt_path)?;
    let truth = match truth {
        Some(p) => {
            let t: GroundTruth = read_json(p)?;
            Some(match &vocab {
                Some(v) if data.is_some() => remap_truth(&t, v),
                _ => t,
            })
        }
        None => run_truth,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::write(out, e))?;
    write_json(
        &out.join(CONFIG_FILE),
        &json!({ "checkpoint": ckpt_path, "data": source, "truth": truth.is_some(), "model": model.config() }),
    )?;
    write_reports(out, &model, &ds, truth.as_ref())?;
    Ok(())
}

fn transfer(ckpt_path: &Path, run: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let (source, _) = load_model(ckpt_path)?;
    let spec = load_run(run, seed)?;
    let dir = output_dir(out, Some(&spec))?;
    let data = load_data(&spec.data)?;
    check_schema(&source, &data.train, run)?;
    let model = training::transfer(&source, &spec.model, &data.train, &data.valid)?;
    write_json(
        &dir.join(CONFIG_FILE),
        &json!({ "source_checkpoint": ckpt_path, "run": spec, "effective_model": model.config() }),
    )?;
    finish(&dir, &model, &data)?;
    Ok(())
}

fn ablate(run: &Path, variant: Variant, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let spec = load_run(run, seed)?;
    let dir = output_dir(out, Some(&spec))?;
    let mode = match variant {
        Variant::NoIsm => Mode::NoIsm,
        Variant::NoGate => Mode::NoGate,
    };
    let data = load_data(&spec.data)?;
    let mut csv = String::from("mode,auc,logloss\n");
    let mut configs = Vec::new();
    for m in [Mode::Mvfs, mode] {
        let config = TrainConfig {
            mode: m,
            ..spec.model.clone()
        };
        let sub = dir.join(m.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::write(&sub, e))?;
        let report = train_into(&sub, &config, &data)?;
        let _ = writeln!(csv, "{},{},{}", m.name(), report.auc, report.logloss);
        configs.push(config);
    }
    write_json(&dir.join(CONFIG_FILE), &json!({ "run": spec, "runs": configs }))?;
    write_atomic(&dir.join(ABLATION_FILE), csv.as_bytes())
}

fn sweep(run: &Path, ks: &[usize], jobs: usize, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::Config("--k needs at least one value".into()));
    }
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let spec = load_run(run, seed)?;
    for &k in ks {
        TrainConfig {
            k,
            ..spec.model.clone()
        }
        .validate()?;
    }
    let dir = output_dir(out, Some(&spec))?;
    write_json(&dir.join(CONFIG_FILE), &json!({ "run": spec, "k": ks, "jobs": jobs }))?;
    let data = load_data(&spec.data)?;

    // Each K trains in its own directory; results are gathered in K order
    // so the output does not depend on `jobs`.
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..ks.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(ks.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&k) = ks.get(i) else { break };
                let config = TrainConfig {
                    k,
                    ..spec.model.clone()
                };
                let sub = dir.join(format!("k{k}"));
                let row = std::fs::create_dir_all(&sub)
                    .map_err(|e| Error::write(&sub, e))
                    .and_then(|()| write_json(&sub.join(CONFIG_FILE), &config))
                    .and_then(|()| train_into(&sub, &config, &data))
                    .map(|r| SweepRow {
                        k,
                        auc: r.auc,
                        logloss: r.logloss,
                    });
                results.lock().expect("sweep results poisoned")[i] = Some(row);
            });
        }
    });
    let mut csv = String::from("k,auc,logloss\n");
    for row in results.into_inner().expect("sweep results poisoned") {
        let row = row.expect("every K is visited")?;
        let _ = writeln!(csv, "{},{},{}", row.k, row.auc, row.logloss);
    }
    write_atomic(&dir.join(SWEEP_FILE), csv.as_bytes())
}

#[derive(Debug, Serialize)]
struct GradcheckRow {
    backbone: &'static str,
    max_rel_err: f64,
    worst: Option<(String, usize)>,
    coordinates: usize,
}

/// Small planted dataset for gradient checks.
fn gradcheck_data(seed: u64) -> Result<Dataset> {
    let spec = SyntheticSpec {
        cardinalities: vec![3, 4, 3, 2],
        mode_field: 3,
        modes: vec![SyntheticMode {
            selector_values: vec![1, 2],
            informative: vec![InformativeField {
                field: 0,
                logits: vec![1.5, -1.0, 0.25],
            }],
        }],
        mode_field_weights: None,
        label_noise: 0.1,
        seed,
    };
    Ok(spec.generate(32)?.0)
}

/// Checks MvFS with both backbones at N=4, d=3, K=3 on a batch of four.
pub fn gradcheck_rows(seed: u64) -> Result<Vec<(BackboneKind, mvfs_core::numeric::GradCheckReport)>> {
    let ds = gradcheck_data(seed)?;
    let rows: Vec<usize> = (0..4).collect();
    [BackboneKind::Mlp, BackboneKind::DeepFm]
        .into_iter()
        .map(|backbone| {
            let config = TrainConfig {
                dim: 3,
                k: 3,
                batch_size: 4,
                seed,
                mode: Mode::Mvfs,
                backbone,
                ..TrainConfig::default()
            };
            let model = Model::new(config, ds.schema().clone())?;
            let report = grad_check(
                |t| model.loss_var(t, &ds, &rows, Phase::Train),
                model.store(),
                1e-5,
                |_| true,
            )?;
            Ok((backbone, report))
        })
        .collect()
}

fn gradcheck(seed: u64, out: Option<&Path>) -> Result<()> {
    let rows = gradcheck_rows(seed)?;
    let mut worst: f64 = 0.0;
    let mut summary = Vec::new();
    for (backbone, r) in rows {
        println!(
            "mvfs+{}: max rel err {:e} over {} coordinates",
            backbone_name(backbone),
            r.max_rel_err,
            r.coordinates
        );
        worst = worst.max(r.max_rel_err);
        summary.push(GradcheckRow {
            backbone: backbone_name(backbone),
            max_rel_err: r.max_rel_err,
            worst: r.worst,
            coordinates: r.coordinates,
        });
    }
    println!("max rel err {worst:e}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
        write_json(
            &dir.join(CONFIG_FILE),
            &json!({ "dims": "small", "fields": 4, "dim": 3, "k": 3, "batch": 4, "seed": seed, "eps": 1e-5 }),
        )?;
        write_json(
            &dir.join(REPORT_FILE),
            &json!({ "max_rel_err": worst, "runs": summary }),
        )?;
    }
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Error::Runtime(format!(
            "max relative error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

fn breakdown(
    a: &Path,
    b: &Path,
    fields: &[usize],
    data: Option<&Path>,
    run: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let (model_a, vocab) = load_model(a)?;
    let (model_b, _) = load_model(b)?;
    let (ds, _, source) = eval_data(a, vocab.as_ref(), data, run, seed)?;
    check_schema(&model_a, &ds, a)?;
    check_schema(&model_b, &ds, b)?;
    if let Some(&f) = fields.iter().find(|&&f| f >= ds.field_count()) {
        return Err(Error::Config(format!(
            "field {f} out of range for {} fields",
            ds.field_count()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::write(out, e))?;
    write_json(
        &out.join(CONFIG_FILE),
        &json!({ "checkpoint_a": a, "checkpoint_b": b, "fields": fields, "data": source }),
    )?;
    let deltas = group_breakdown(&model_a.predict(&ds)?, &model_b.predict(&ds)?, &ds, fields)?;
    let mut csv = String::from("field,group,delta_auc,n\n");
    for d in &deltas {
        let _ = writeln!(csv, "{},{},{},{}", d.field, d.group.name(), opt(d.delta_auc), d.n);
    }
    write_atomic(&out.join(BREAKDOWN_FILE), csv.as_bytes())
}
