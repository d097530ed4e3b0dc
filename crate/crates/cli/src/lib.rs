//! The `pedet` command line: phantom generation, training, detection,
//! FROC evaluation and the gradient-check harness.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 verification failure.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use pedet_core::config::{RunConfig, ScoreMode};
use pedet_core::froc::{
    self, read_annotations, read_detections, sensitivity_at, write_detections, write_froc,
};
use pedet_core::phantom::generate_dataset;
use pedet_core::pipeline::{
    self, load_dataset, load_model, preprocess, save_model, Model, Optimizers, Scan, TrainState,
};
use pedet_core::verify::{gradcheck_suite, GradcheckOptions, CHECKS};
use pedet_core::volume::{read_metaimage, read_volume};
use pedet_core::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// File names inside a training output directory.
pub const LOSS_LOG: &str = "losses.csv";
pub const STAGE1_DIR: &str = "stage1";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Verification(_) => EXIT_VERIFY,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Data(other),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "pedet",
    version,
    about = "Pulmonary embolism detection on 3-D angiography volumes"
)]
pub struct Cli {
    /// Config file of `key = <JSON value>` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=0.01` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads for detection; the output does not depend on it.
    #[arg(long, default_value_t = 1, global = true)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Score {
    Proposal,
    Classifier,
    Product,
}

impl From<Score> for ScoreMode {
    fn from(s: Score) -> Self {
        match s {
            Score::Proposal => ScoreMode::Proposal,
            Score::Classifier => ScoreMode::Classifier,
            Score::Product => ScoreMode::Product,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        scans: usize,
        /// Master seed (defaults to the config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the detector on a generated dataset.
    Train {
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory (also receives the loss log).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Proposal-only epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Epochs training the proposal network and classifier together.
        #[arg(long)]
        joint_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint in `--out`.
        #[arg(long, conflicts_with = "init")]
        resume: bool,
        /// Start from another checkpoint's weights, optimiser state and
        /// progress, under the current config.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run a trained model over volumes and write a detection CSV.
    Detect {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory of `<id>.json` + `<id>.raw` volumes.
        #[arg(long, required_unless_present = "volume")]
        data: Option<PathBuf>,
        /// Individual volume files (`.json` or `.mhd`), repeatable.
        #[arg(long)]
        volume: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        score: Option<Score>,
    },
    /// Score detections against annotations and write the FROC curves.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Dataset directory; its volumes all count towards FP/scan, even
        /// those with neither detections nor findings.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate one check's analytic gradient to confirm the harness fails.
        #[arg(long)]
        inject_sign_error: Option<String>,
        /// Skip the full-network composition.
        #[arg(long)]
        quick: bool,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pedet: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    match &cli.command {
        Command::Gen {
            out: dir,
            scans,
            seed,
        } => {
            let mut cfg = base_config(cli)?;
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            cmd_gen(&cfg, dir.as_deref(), *scans, out)
        }
        Command::Train {
            data,
            out: dir,
            epochs,
            joint_epochs,
            lr,
            seed,
            resume,
            init,
        } => {
            let mut cfg = base_config(cli)?;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(e) = joint_epochs {
                cfg.train.joint_epochs = *e;
            }
            if let Some(l) = lr {
                cfg.train.lr = *l;
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            cfg.validate()?;
            let start = match (resume, init) {
                (true, _) => Start::Resume,
                (false, Some(p)) => Start::Init(p.clone()),
                _ => Start::Fresh,
            };
            cmd_train(&cfg, data.as_deref(), dir.as_deref(), start, out)
        }
        Command::Detect {
            model,
            data,
            volume,
            out: path,
            score,
        } => {
            let model_dir = model
                .clone()
                .unwrap_or_else(|| base_defaults(cli).paths.checkpoint);
            cmd_detect(
                cli,
                &model_dir,
                data.as_deref(),
                volume,
                path.as_deref(),
                score.map(Into::into),
                out,
            )
        }
        Command::Eval {
            detections,
            annotations,
            data,
            out: path,
        } => {
            let cfg = base_config(cli)?;
            let scans = match data {
                Some(d) => list_volumes(d)?.iter().map(|p| stem(p)).collect(),
                None => Vec::new(),
            };
            cmd_eval(&cfg, detections, annotations, &scans, path.as_deref(), out).map(|_| ())
        }
        Command::Gradcheck {
            seed,
            inject_sign_error,
            quick,
        } => cmd_gradcheck(*seed, inject_sign_error.clone(), *quick, out),
    }
}

fn apply_sources(mut cfg: RunConfig, cli: &Cli) -> CliResult<RunConfig> {
    if let Some(p) = &cli.config {
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        cfg = cfg.apply_text(&text, p).map_err(config_error)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg = cfg.set(k.trim(), v.trim()).map_err(config_error)?;
    }
    Ok(cfg)
}

fn config_error(e: Error) -> CliError {
    match e {
        Error::Io { .. } => CliError::Data(e),
        other => CliError::Usage(other.to_string()),
    }
}

/// Defaults plus `--config` plus `--set`.
fn base_config(cli: &Cli) -> CliResult<RunConfig> {
    apply_sources(RunConfig::default(), cli)
}

fn base_defaults(cli: &Cli) -> RunConfig {
    base_config(cli).unwrap_or_default()
}

pub fn cmd_gen(
    cfg: &RunConfig,
    dir: Option<&Path>,
    scans: usize,
    out: &mut dyn Write,
) -> CliResult {
    if scans == 0 {
        return Err(CliError::Usage("--scans must be positive".into()));
    }
    let dir = dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.dataset.clone());
    generate_dataset(&dir, scans, &cfg.phantom, cfg.seed)?;
    let n_emboli = read_annotations(&dir.join(pedet_core::phantom::ANNOTATIONS_FILE))?.len();
    let _ = writeln!(
        out,
        "generated {scans} scans with {n_emboli} emboli in {}",
        dir.display()
    );
    Ok(())
}

pub enum Start {
    Fresh,
    Resume,
    Init(PathBuf),
}

fn write_loss_log(path: &Path, state: &TrainState) -> pedet_core::Result<()> {
    let mut text = String::from("epoch,stage,loss,classification,regression,fp_loss\n");
    for s in &state.history {
        let stage = if s.joint { "joint" } else { "proposal" };
        text.push_str(&format!(
            "{},{stage},{},{},{},{}\n",
            s.epoch + 1,
            s.loss,
            s.classification,
            s.regression,
            s.fp_loss
        ));
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Architecture-relevant parts of two configs must agree for weights to be reused.
fn check_compatible(stored: &RunConfig, cfg: &RunConfig) -> CliResult {
    if stored.net != cfg.net
        || stored.anchors != cfg.anchors
        || stored.align.roi_size != cfg.align.roi_size
    {
        return Err(CliError::Data(Error::Input(
            "checkpoint was trained with a different network, anchor or pooling configuration"
                .into(),
        )));
    }
    Ok(())
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: Option<&Path>,
    dir: Option<&Path>,
    start: Start,
    out: &mut dyn Write,
) -> CliResult {
    let data = data
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.dataset.clone());
    let dir = dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let (mut model, mut opt, mut state) = match start {
        Start::Fresh => {
            let m = Model::new(cfg);
            let o = Optimizers::new(&m, cfg.train.sgd());
            (m, o, TrainState::default())
        }
        Start::Resume | Start::Init(_) => {
            let from = match &start {
                Start::Init(p) => p.clone(),
                _ => dir.clone(),
            };
            let lm = load_model(&from)?;
            check_compatible(&lm.config, cfg)?;
            let (Some(mut o), Some(s)) = (lm.optimizers, lm.train_state) else {
                return Err(CliError::Data(Error::Input(format!(
                    "{} holds no training state",
                    from.display()
                ))));
            };
            o.net.config = cfg.train.sgd();
            o.fp.config = cfg.train.sgd();
            (lm.model, o, s)
        }
    };
    let scans = load_dataset(&data, &cfg.preprocess)?;
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let _ = writeln!(
        out,
        "training on {} scans, {} parameters",
        scans.len(),
        model.n_params()
    );
    let log = dir.join(LOSS_LOG);
    pipeline::train(
        &mut model,
        &mut opt,
        &scans,
        cfg,
        &mut state,
        |s, m, o, st| {
            let _ = writeln!(
                out,
                "epoch {:>3} {:<8} loss {:.6} (cls {:.6} reg {:.6} fp {:.6})",
                s.epoch + 1,
                if s.joint { "joint" } else { "proposal" },
                s.loss,
                s.classification,
                s.regression,
                s.fp_loss
            );
            save_model(&dir, cfg, m, Some((o, st)))?;
            if st.epochs_done == cfg.train.epochs {
                save_model(&dir.join(STAGE1_DIR), cfg, m, Some((o, st)))?;
            }
            write_loss_log(&log, st)
        },
    )?;
    if state.history.is_empty() {
        save_model(&dir, cfg, &model, Some((&opt, &state)))?;
        write_loss_log(&log, &state)?;
    }
    let _ = writeln!(out, "checkpoint written to {}", dir.display());
    Ok(())
}

/// Volumes named `<id>.json` (with a `.raw` sibling) in a directory, by name.
fn list_volumes(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut v: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.with_extension("raw").exists())
        .collect();
    v.sort();
    Ok(v)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_any(path: &Path) -> CliResult<pedet_core::Volume> {
    Ok(if path.extension().is_some_and(|x| x == "mhd") {
        read_metaimage(path)?
    } else {
        read_volume(path)?
    })
}

pub fn cmd_detect(
    cli: &Cli,
    model_dir: &Path,
    data: Option<&Path>,
    volumes: &[PathBuf],
    path: Option<&Path>,
    score: Option<ScoreMode>,
    out: &mut dyn Write,
) -> CliResult {
    let lm = load_model(model_dir)?;
    let mut cfg = apply_sources(lm.config.clone(), cli)?;
    cfg.validate()?;
    check_compatible(&lm.config, &cfg)?;
    if let Some(s) = score {
        cfg.detect.score = s;
    }
    let mut files = volumes.to_vec();
    if let Some(d) = data {
        files.extend(list_volumes(d)?);
    }
    if files.is_empty() {
        return Err(CliError::Usage("no volumes to process".into()));
    }
    let scans: Vec<Scan> = files
        .iter()
        .map(|f| {
            Ok(Scan {
                id: stem(f),
                volume: preprocess(&read_any(f)?, &cfg.preprocess)?,
                emboli: Vec::new(),
            })
        })
        .collect::<CliResult<_>>()?;
    let dets = pipeline::detect_scans(&lm.model, &scans, &cfg, cfg.detect.score, cli.threads)?;
    let records: Vec<_> = scans
        .iter()
        .zip(&dets)
        .flat_map(|(s, d)| pipeline::detection_records(&s.id, d))
        .collect();
    let path = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output.join("detections.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_detections(&path, &records)?;
    let _ = writeln!(
        out,
        "{} detections over {} volumes written to {}",
        records.len(),
        scans.len(),
        path.display()
    );
    Ok(())
}

/// Sensitivity at the operating point for each configured tolerance.
pub fn cmd_eval(
    cfg: &RunConfig,
    detections: &Path,
    annotations: &Path,
    scans: &[String],
    path: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<Vec<(f64, f64)>> {
    let dets = read_detections(detections)?;
    let gts = read_annotations(annotations)?;
    let mut curves = Vec::new();
    let mut summary = Vec::new();
    for &t in &cfg.eval.tolerances_mm {
        let c = froc::froc(&dets, &gts, scans, t)?;
        let s = sensitivity_at(&c, cfg.eval.operating_fp);
        let _ = writeln!(
            out,
            "sensitivity at {} FP/scan, tolerance {t} mm: {s:.4}",
            cfg.eval.operating_fp
        );
        summary.push((t, s));
        curves.push(c);
    }
    let path = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output.join("froc.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_froc(&path, &curves)?;
    Ok(summary)
}

pub fn cmd_gradcheck(
    seed: u64,
    inject: Option<String>,
    quick: bool,
    out: &mut dyn Write,
) -> CliResult {
    if let Some(name) = &inject {
        if !CHECKS.contains(&name.as_str()) && name != "graph_full" {
            return Err(CliError::Usage(format!(
                "unknown check {name:?}; known: {}, graph_full",
                CHECKS.join(", ")
            )));
        }
    }
    let opts = GradcheckOptions {
        seed,
        inject_sign_error: inject,
        full_network: !quick,
        ..Default::default()
    };
    let reports = gradcheck_suite(&opts)?;
    let _ = writeln!(
        out,
        "{:<16} {:>12} {:>10} {:>7}  result",
        "check", "max_rel_err", "tolerance", "coords"
    );
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed();
        let _ = writeln!(
            out,
            "{:<16} {:>12.3e} {:>10.0e} {:>7}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.coordinates,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
