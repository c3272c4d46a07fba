//! `nodegam` command-line tool: train, pretrain, finetune, predict, explain.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nodegam::container::{sha256_hex, write_atomic, ModelFile};
use nodegam::interpret::{self, GamExplanation, DEFAULT_BINS};
use nodegam::layer::Mode;
use nodegam::network::{NodeGamModel, Task};
use nodegam::numeric::Matrix;
use nodegam::preprocess::{train_val_split, Frame, Pipeline, Schema, Table};
use nodegam::training::{self, History};
use nodegam::Error;

use crate::config::RunConfig;

/// Largest allowed gap between summed terms and the model on binned rows.
const AUDIT_TOL: f64 = 1e-5;

#[derive(Parser)]
#[command(
    name = "nodegam",
    version,
    about = "Neural additive models from differentiable oblivious trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit preprocessing and train a supervised model.
    Train(TrainArgs),
    /// Self-supervised pretraining by masked-feature reconstruction.
    Pretrain(PretrainArgs),
    /// Train a pretrained model on labeled data.
    Finetune(FinetuneArgs),
    /// Score a CSV with a saved model.
    Predict(PredictArgs),
    /// Export shape functions and interaction surfaces.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Training CSV (header required).
    #[arg(long)]
    data: PathBuf,
    /// Schema file with one `column = numeric|categorical|target|ignore` line per column.
    #[arg(long)]
    schema: PathBuf,
    /// Output directory for the model, history and effective config.
    #[arg(long)]
    out: PathBuf,
    /// Preset config applied before --config.
    #[arg(long)]
    preset: Option<PathBuf>,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Separate validation CSV; otherwise a split of --data is used.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Worker threads for batch computations.
    #[arg(long)]
    threads: Option<usize>,
    /// Single-threaded execution for bit-reproducible runs.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// gam or ga2m.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Model file written by `pretrain`.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Reference data (typically the training CSV).
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Maximum bins per feature.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Also write one CSV per term.
    #[arg(long)]
    plots: bool,
    /// Check that the terms reproduce the model and report the largest gap.
    #[arg(long)]
    audit: bool,
    /// Weight purification by data counts.
    #[arg(long)]
    weighted_purify: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    deterministic: bool,
}

/// A failure with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Failure {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Failure {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = match &e {
            Error::InvalidArgument(_) => 1,
            Error::Numeric(_) | Error::NonAdditive { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Explain(a) => cmd_explain(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn setup_threads(threads: Option<usize>, deterministic: bool) -> CmdResult<()> {
    let n = if deterministic { Some(1) } else { threads };
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("cannot configure threads: {e}")))?;
    }
    Ok(())
}

/// Defaults, then preset, then config file, then `--set`, then flags.
fn resolve_config(run: &RunArgs, flags: &[(&str, Option<String>)]) -> CmdResult<RunConfig> {
    let mut cfg = RunConfig::default();
    for path in [&run.preset, &run.config].into_iter().flatten() {
        cfg.apply_file(path).map_err(Failure::usage)?;
    }
    for pair in &run.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.set(k, v).map_err(Failure::usage)?;
    }
    let common = [
        ("val_fraction", run.val_fraction.map(|v| v.to_string())),
        ("seed", run.seed.map(|v| v.to_string())),
        ("lr", run.lr.map(|v| v.to_string())),
        ("max_steps", run.max_steps.map(|v| v.to_string())),
    ];
    for (k, v) in common.iter().chain(flags) {
        if let Some(v) = v {
            cfg.set(k, v).map_err(Failure::usage)?;
        }
    }
    cfg.preprocess.seed = cfg.train.seed;
    cfg.validate().map_err(Failure::usage)?;
    Ok(cfg)
}

fn read_table(path: &Path) -> CmdResult<Table> {
    Table::read(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn file_hash(path: &Path) -> CmdResult<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

fn ensure_dir(dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CmdResult<()> {
    write_atomic(path, text.as_bytes()).map_err(Failure::from)
}

fn infer_task(y: &[f64]) -> Task {
    if !y.is_empty() && y.iter().all(|v| *v == 0.0 || *v == 1.0) {
        Task::Binary
    } else {
        Task::Regression
    }
}

fn check_targets(y: &[f64], task: Task) -> CmdResult<()> {
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Failure::data(format!(
            "target in data row {} is missing or not finite",
            i + 1
        )));
    }
    if task == Task::Binary && y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Failure::data("binary targets must be 0 or 1"));
    }
    Ok(())
}

/// Train/validation frames: an explicit validation file or a seeded split.
fn split_frames(
    run: &RunArgs,
    cfg: &RunConfig,
    frame: Frame,
    load_val: impl Fn(&Table) -> CmdResult<Frame>,
) -> CmdResult<(Frame, Frame)> {
    match &run.val_data {
        Some(path) => Ok((frame, load_val(&read_table(path)?)?)),
        None => {
            let (tr, va) = train_val_split(
                frame.target.as_deref(),
                frame.len(),
                cfg.val_fraction,
                cfg.train.seed,
            )?;
            Ok((frame.select(&tr), frame.select(&va)))
        }
    }
}

struct Outputs<'a> {
    dir: &'a Path,
    command: &'a str,
    data_hash: String,
}

impl Outputs<'_> {
    fn write(
        &self,
        mut file: ModelFile,
        history: &History,
        cfg: &RunConfig,
        extra: &[(&str, String)],
    ) -> CmdResult<()> {
        file.provenance
            .insert("command".into(), self.command.into());
        file.provenance
            .insert("data_sha256".into(), self.data_hash.clone());
        file.provenance
            .insert("seed".into(), cfg.train.seed.to_string());
        for (k, v) in extra {
            file.provenance.insert(k.to_string(), v.clone());
        }
        let model_path = self.dir.join("model.ngam");
        file.save(&model_path)?;
        history.save(&self.dir.join("history.jsonl"))?;
        write_text(&self.dir.join("config.cfg"), &cfg.to_text())?;
        match (history.best_metric, history.best_step) {
            (Some(m), Some(s)) => println!(
                "{}: {} steps, stopped by {:?}, best validation metric {m:.6} at step {s}",
                self.command, history.steps, history.stop_reason
            ),
            _ => println!(
                "{}: {} steps, stopped by {:?}",
                self.command, history.steps, history.stop_reason
            ),
        }
        println!("model written to {}", model_path.display());
        Ok(())
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult<()> {
    let run = &a.run;
    let cfg = resolve_config(
        run,
        &[
            ("mode", a.mode.clone()),
            ("depth", a.depth.map(|d| d.to_string())),
        ],
    )?;
    setup_threads(run.threads, run.deterministic)?;

    let schema = Schema::load(&run.schema)?;
    let target = schema
        .target()
        .ok_or_else(|| Failure::data("schema declares no target column"))?
        .to_string();
    let features = schema.features();
    let table = read_table(&run.data)?;
    table.check_schema(&schema)?;
    let frame = Frame::from_table(&table, &features, Some(&target))?;
    let (train_frame, val_frame) = split_frames(run, &cfg, frame, |t| {
        t.check_schema(&schema)?;
        Ok(Frame::from_table(t, &features, Some(&target))?)
    })?;
    let y = train_frame.target.clone().unwrap_or_default();
    let vy = val_frame.target.clone().unwrap_or_default();
    let task = cfg.task.unwrap_or_else(|| infer_task(&y));
    check_targets(&y, task)?;
    check_targets(&vy, task)?;

    let pipeline = Pipeline::fit(&train_frame, Some(&target), cfg.preprocess.clone())?;
    let x = pipeline.transform(&train_frame)?;
    let vx = pipeline.transform(&val_frame)?;
    let model_cfg = cfg
        .model_config(x.ncols(), 1, task)
        .map_err(Failure::usage)?;
    let mut model = NodeGamModel::new(model_cfg, &mut NodeGamModel::rng(cfg.train.seed))?;
    let history = training::train(&mut model, &x, &y, &vx, &vy, &cfg.train)?;

    ensure_dir(&run.out)?;
    let out = Outputs {
        dir: &run.out,
        command: "train",
        data_hash: file_hash(&run.data)?,
    };
    out.write(ModelFile::new(model, Some(pipeline)), &history, &cfg, &[])
}

fn cmd_pretrain(a: PretrainArgs) -> CmdResult<()> {
    let run = &a.run;
    let cfg = resolve_config(
        run,
        &[
            ("mode", a.mode.clone()),
            ("depth", a.depth.map(|d| d.to_string())),
        ],
    )?;
    setup_threads(run.threads, run.deterministic)?;
    if !cfg.model.add_last_linear {
        return Err(Failure::usage("pretraining needs add_last_linear = 1"));
    }

    let schema = Schema::load(&run.schema)?;
    let features = schema.features();
    let table = read_table(&run.data)?;
    table.check_schema(&schema)?;
    // Labels are not used; a target column, if declared, keeps its name so a
    // later finetune can reuse the pipeline.
    let frame = Frame::from_table(&table, &features, None)?;
    let (train_frame, val_frame) = split_frames(run, &cfg, frame, |t| {
        t.check_schema(&schema)?;
        Ok(Frame::from_table(t, &features, None)?)
    })?;
    let pipeline = Pipeline::fit(&train_frame, schema.target(), cfg.preprocess.clone())?;
    let x = pipeline.transform(&train_frame)?;
    let vx = pipeline.transform(&val_frame)?;
    let d = x.ncols();
    let model_cfg = cfg
        .model_config(d, d, Task::Regression)
        .map_err(Failure::usage)?;
    let mut model = NodeGamModel::new(model_cfg, &mut NodeGamModel::rng(cfg.train.seed))?;
    let history = training::pretrain(&mut model, &x, &vx, &cfg.train)?;

    ensure_dir(&run.out)?;
    let out = Outputs {
        dir: &run.out,
        command: "pretrain",
        data_hash: file_hash(&run.data)?,
    };
    out.write(ModelFile::new(model, Some(pipeline)), &history, &cfg, &[])
}

fn cmd_finetune(a: FinetuneArgs) -> CmdResult<()> {
    let run = &a.run;
    let cfg = resolve_config(run, &[])?;
    setup_threads(run.threads, run.deterministic)?;

    let pretrained_bytes = std::fs::read(&a.model)
        .map_err(|e| Failure::data(format!("cannot read {}: {e}", a.model.display())))?;
    let pretrained = ModelFile::from_bytes(&pretrained_bytes)?;
    let mut model = pretrained.model;
    let pipeline = pretrained
        .pipeline
        .ok_or_else(|| Failure::data("pretrained model carries no preprocessing pipeline"))?;
    if model.config.num_outputs != model.config.num_features {
        return Err(Failure::data(format!(
            "not a pretrained model: {} output heads for {} features",
            model.config.num_outputs, model.config.num_features
        )));
    }

    let schema = Schema::load(&run.schema)?;
    let target = schema
        .target()
        .ok_or_else(|| Failure::data("schema declares no target column"))?
        .to_string();
    if schema.features() != pipeline.features {
        return Err(
            Error::Schema("feature columns differ from the pretrained model".into()).into(),
        );
    }
    let features = schema.features();
    let table = read_table(&run.data)?;
    table.check_schema(&schema)?;
    let frame = Frame::from_table(&table, &features, Some(&target))?;
    let (train_frame, val_frame) = split_frames(run, &cfg, frame, |t| {
        t.check_schema(&schema)?;
        Ok(Frame::from_table(t, &features, Some(&target))?)
    })?;
    let y = train_frame.target.clone().unwrap_or_default();
    let vy = val_frame.target.clone().unwrap_or_default();
    let task = cfg.task.unwrap_or_else(|| infer_task(&y));
    check_targets(&y, task)?;
    check_targets(&vy, task)?;

    let mut pipeline = pipeline;
    pipeline.target = Some(target);
    let x = pipeline.transform(&train_frame)?;
    let vx = pipeline.transform(&val_frame)?;
    let history = training::finetune(&mut model, task, &x, &y, &vx, &vy, &cfg.train)?;

    ensure_dir(&run.out)?;
    let out = Outputs {
        dir: &run.out,
        command: "finetune",
        data_hash: file_hash(&run.data)?,
    };
    let parent = [("pretrained_sha256", sha256_hex(&pretrained_bytes))];
    out.write(
        ModelFile::new(model, Some(pipeline)),
        &history,
        &cfg,
        &parent,
    )
}

fn load_model(path: &Path) -> CmdResult<(NodeGamModel, Pipeline)> {
    let file = ModelFile::load(path)?;
    let pipeline = file.pipeline.ok_or_else(|| {
        Failure::data(format!(
            "{} carries no preprocessing pipeline",
            path.display()
        ))
    })?;
    Ok((file.model, pipeline))
}

/// Encoded feature matrix in raw units; a completely empty file gives zero rows.
fn encoded_rows(pipeline: &Pipeline, path: &Path) -> CmdResult<Matrix> {
    let table = read_table(path)?;
    if table.headers.is_empty() && table.rows.is_empty() {
        return Ok(Matrix::zeros((0, pipeline.num_features())));
    }
    let frame = pipeline.frame(&table, false)?;
    Ok(pipeline.encode(&frame)?)
}

fn cmd_predict(a: PredictArgs) -> CmdResult<()> {
    setup_threads(a.threads, a.deterministic)?;
    let (model, pipeline) = load_model(&a.model)?;
    if model.config.num_outputs != 1 {
        return Err(Failure::data(
            "prediction needs a single-output model (finetune a pretrained model first)",
        ));
    }
    let x = pipeline.gaussianize(&encoded_rows(&pipeline, &a.data)?)?;
    let scores = if x.nrows() == 0 {
        Matrix::zeros((0, 1))
    } else {
        training::predict_batched(&model, &x)?
    };
    let binary = model.config.task == Task::Binary;

    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Failure::data(format!("cannot write predictions: {e}"));
    if binary {
        w.write_record(["row_id", "score", "probability"])
            .map_err(io)?;
    } else {
        w.write_record(["row_id", "score"]).map_err(io)?;
    }
    for (i, s) in scores.column(0).iter().enumerate() {
        let mut rec = vec![i.to_string(), format!("{s:?}")];
        if binary {
            rec.push(format!("{:?}", nodegam::numeric::sigmoid(*s)));
        }
        w.write_record(&rec).map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Failure::data(format!("cannot write predictions: {e}")))?;
    write_atomic(&a.out, &bytes)?;
    println!(
        "{} predictions written to {}",
        scores.nrows(),
        a.out.display()
    );
    Ok(())
}

/// Keeps letters, digits, `-` and `_`; everything else becomes `_`.
fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "_".into()
    } else {
        s
    }
}

fn explain_gam(
    model: &NodeGamModel,
    pipeline: &Pipeline,
    data: &Matrix,
    names: &[String],
    seed: u64,
) -> CmdResult<GamExplanation> {
    // Median baseline in raw units.
    let baseline: Vec<f64> = (0..data.ncols())
        .map(|j| {
            let mut col: Vec<f64> = data.column(j).to_vec();
            col.sort_by(f64::total_cmp);
            col[col.len() / 2]
        })
        .collect();
    let predict = |raw: &Matrix| -> nodegam::Result<Vec<f64>> {
        let x = pipeline.gaussianize(raw)?;
        Ok(training::predict_batched(model, &x)?.column(0).to_vec())
    };
    Ok(interpret::extract_gam_shapes(
        &predict, data, &baseline, names, seed,
    )?)
}

fn write_term_files(exp: &GamExplanation, dir: &Path) -> CmdResult<()> {
    let io = |e: csv::Error| Failure::data(format!("cannot write term file: {e}"));
    for s in &exp.shapes {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["value", "contribution", "count"])
            .map_err(io)?;
        for ((x, f), c) in s
            .bins
            .representatives
            .iter()
            .zip(&s.values)
            .zip(&s.bins.counts)
        {
            w.write_record([format!("{x:?}"), format!("{f:?}"), c.to_string()])
                .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Failure::data(e.to_string()))?;
        write_atomic(
            &dir.join(format!("shape_{}.csv", sanitize(&s.name))),
            &bytes,
        )?;
    }
    for p in &exp.interactions {
        let (j, k) = p.features;
        let (xs, ys) = (
            &exp.shapes[j].bins.representatives,
            &exp.shapes[k].bins.representatives,
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            p.names.0.as_str(),
            p.names.1.as_str(),
            "contribution",
            "count",
        ])
        .map_err(io)?;
        for (a, x) in xs.iter().enumerate() {
            for (b, y) in ys.iter().enumerate() {
                w.write_record([
                    format!("{x:?}"),
                    format!("{y:?}"),
                    format!("{:?}", p.values[a][b]),
                    p.counts[a][b].to_string(),
                ])
                .map_err(io)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Failure::data(e.to_string()))?;
        let name = format!(
            "pair_{}__{}.csv",
            sanitize(&p.names.0),
            sanitize(&p.names.1)
        );
        write_atomic(&dir.join(name), &bytes)?;
    }
    Ok(())
}

fn cmd_explain(a: ExplainArgs) -> CmdResult<()> {
    setup_threads(a.threads, a.deterministic)?;
    if a.bins < 2 {
        return Err(Failure::usage("--bins must be at least 2"));
    }
    let (model, pipeline) = load_model(&a.model)?;
    if !model.is_annealed() {
        return Err(Failure::data(format!(
            "training incomplete: the model is not fully annealed (step {}, annealing ends after step {})",
            model.step, model.config.anneal_steps
        )));
    }
    if model.config.num_outputs != 1 {
        return Err(Failure::data("explanations need a single-output model"));
    }
    let data = encoded_rows(&pipeline, &a.data)?;
    if data.nrows() == 0 {
        return Err(Failure::data("no rows to explain"));
    }
    let names = pipeline.feature_names();
    let exp = match model.config.mode {
        Mode::Gam => explain_gam(&model, &pipeline, &data, &names, 0)?,
        Mode::Ga2m => interpret::explain(
            &model,
            &data,
            Some(&pipeline),
            a.bins,
            &names,
            a.weighted_purify,
        )?,
    };

    ensure_dir(&a.out)?;
    write_text(&a.out.join("explanation.json"), &exp.to_json()?)?;
    if a.plots {
        write_term_files(&exp, &a.out)?;
    }
    println!(
        "{} shape functions, {} interactions written to {}",
        exp.shapes.len(),
        exp.interactions.len(),
        a.out.display()
    );

    if a.audit {
        let snapped = interpret::snap_to_bins(&exp, &data)?;
        let gap = interpret::reconstruction_gap(&exp, &model, &snapped, Some(&pipeline))?;
        let data_gap = interpret::reconstruction_gap(&exp, &model, &data, Some(&pipeline))?;
        println!("audit: max gap on binned rows {gap:e} (tolerance {AUDIT_TOL:e})");
        println!("audit: max gap on raw rows {data_gap:e} (includes binning)");
        if gap.is_nan() || gap > AUDIT_TOL {
            return Err(Failure::numeric(format!(
                "audit failed: terms miss the model by {gap:e}"
            )));
        }
    }
    Ok(())
}
