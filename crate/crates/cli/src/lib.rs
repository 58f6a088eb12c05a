//! Command implementations behind the `defend` binary.
//!
//! Each `cmd_*` function resolves the run configuration, writes
//! `resolved_config.json` into the output directory, then does its work.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use defend_core::checkpoint::{self, Header};
use defend_core::config::{self, RunConfig, Sources};
use defend_core::data::{self, Dataset, SyntheticSample};
use defend_core::evaluation::{self, ProbeConfig};
use defend_core::model::ModelState;
use defend_core::trainer::{self, LossLog, StepRecord, Trainer};
use defend_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "defend", version, about = "Tobacco-product vision-language pretraining at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic annotated dataset.
    GenerateData(GenerateArgs),
    /// Run the three-phase training schedule.
    Train(TrainArgs),
    /// Linear probe, zero-shot, toy VQA and description metrics.
    Eval(EvalArgs),
    /// Export teacher attention overlays.
    AttnMap(AttnArgs),
    /// Check annotation records in a JSON-lines file.
    Validate(ValidateArgs),
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::GenerateData(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::AttnMap(a) => &a.common,
            Command::Validate(a) => &a.common,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file with dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.batch_size=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed; falls back to DEFEND_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// desk-smoke or desk-full.
    #[arg(long)]
    pub preset: Option<String>,
}

impl Common {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into(), ..Self::default() }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory from generate-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from a checkpoint; step numbering carries on.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Suppress per-step progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Probe,
    Zeroshot,
    Vqa,
    Describe,
    Attention,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub task: Task,
}

#[derive(Debug, Clone, Args)]
pub struct AttnArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image ids, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub common: Common,
    /// JSON-lines file of annotation records.
    #[arg(long)]
    pub input: PathBuf,
}

/// Runs a parsed command. On failure an `error.json` is left in the output
/// directory when it exists.
pub fn run(cli: &Cli) -> Result<()> {
    let r = match &cli.command {
        Command::GenerateData(a) => cmd_generate_data(a).map(|_| ()),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::AttnMap(a) => cmd_attn_map(a).map(|_| ()),
        Command::Validate(a) => cmd_validate(a).map(|_| ()),
    };
    if let Err(e) = &r {
        let out = &cli.command.common().out;
        if out.is_dir() {
            let body = json!({ "error": e.to_string(), "exit_code": e.exit_code() });
            let _ = fs::write(out.join("error.json"), format!("{body:#}\n"));
        }
    }
    r
}

// ---------------------------------------------------------------- config

fn sources(c: &Common, extra: Vec<(String, Value)>) -> Result<Sources> {
    let file = match &c.config {
        Some(p) => config::read_config_file(p)?,
        None => Vec::new(),
    };
    let mut sets = extra;
    sets.extend(config::parse_sets(&c.set)?);
    Ok(Sources { preset: c.preset.clone(), file, sets, seed_flag: c.seed, seed_env: None }.with_env())
}

fn prepare(c: &Common, extra: Vec<(String, Value)>) -> Result<(RunConfig, Sources)> {
    fs::create_dir_all(&c.out).map_err(|e| Error::Data(format!("cannot create {}: {e}", c.out.display())))?;
    let src = sources(c, extra)?;
    let cfg = config::resolve(&src)?;
    cfg.write_resolved(&c.out)?;
    Ok((cfg, src))
}

fn sets_model(src: &Sources) -> bool {
    src.file.iter().chain(&src.sets).any(|(k, _)| k.starts_with("model."))
}

/// Loads a checkpoint, adopting its model section unless the user set model
/// keys explicitly, in which case the dimensions must agree.
fn load_model(path: &Path, cfg: &mut RunConfig, src: &Sources) -> Result<(checkpoint::Checkpoint, Header)> {
    let header = checkpoint::read_header(path)?;
    if sets_model(src) {
        header.check_compatible(&cfg.model)?;
    }
    let ckpt = checkpoint::load(path)?;
    cfg.model = ckpt.model.cfg;
    cfg.data.image_size = cfg.model.encoder.image_size;
    Ok((ckpt, header))
}

fn check_image_size(ds: &Dataset, cfg: &RunConfig) -> Result<()> {
    if let Some(s) = ds.samples.first() {
        let want = cfg.model.encoder.image_size;
        if s.image.height != want || s.image.width != want {
            return Err(Error::Config(format!(
                "dataset images are {}x{} but model.encoder.image_size is {want}",
                s.image.height, s.image.width
            )));
        }
    }
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// --------------------------------------------------------- generate-data

pub struct GenerateOutcome {
    pub samples: usize,
    pub manifest: data::SplitManifest,
}

pub fn cmd_generate_data(a: &GenerateArgs) -> Result<GenerateOutcome> {
    let mut extra = Vec::new();
    for (k, v) in [("data.n_classes", a.classes), ("data.n_per_class", a.per_class), ("data.image_size", a.image_size)] {
        if let Some(v) = v {
            extra.push((k.to_string(), json!(v)));
        }
    }
    let (cfg, _) = prepare(&a.common, extra)?;
    let (samples, manifest) = data::generate_synthetic_dataset(&cfg.data, cfg.model.encoder.patch_size)?;
    data::write_dataset(&a.common.out, &samples, &manifest)?;
    eprintln!(
        "wrote {} samples ({} train, {} val, {} test, {} zero-shot) to {}",
        samples.len(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        manifest.zeroshot.len(),
        a.common.out.display()
    );
    Ok(GenerateOutcome { samples: samples.len(), manifest })
}

// ----------------------------------------------------------------- train

pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub total_steps: usize,
}

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome> {
    let extra = a.max_steps.map(|m| vec![("max_steps".to_string(), json!(m))]).unwrap_or_default();
    let (mut cfg, src) = prepare(&a.common, extra)?;
    let out = &a.common.out;
    let ds = data::load_dataset(&a.data)?;
    let train_split = ds.split(&ds.manifest.train)?;

    let resumed = match &a.resume {
        Some(p) => Some(load_model(p, &mut cfg, &src)?.0),
        None => None,
    };
    let model = match &resumed {
        Some(c) => c.model.clone(),
        None => {
            check_image_size(&ds, &cfg)?;
            let vocab = evaluation::build_run_vocab(&train_split, ds.manifest.num_classes, cfg.min_freq)?;
            ModelState::new(cfg.model, vocab, cfg.seed)?
        }
    };
    check_image_size(&ds, &cfg)?;
    cfg.model = model.cfg;
    cfg.write_resolved(out)?;

    let examples = train_split.iter().map(|s| model.example(s)).collect();
    let mut tr = Trainer::new(model, cfg.train, examples)?;
    if let Some(c) = resumed {
        tr.step = c.header.step;
        if let Some(opt) = c.opt {
            tr.opt = opt;
        }
    }

    let log_path = out.join("loss_log.csv");
    if a.resume.is_none() && log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    fs::create_dir_all(out.join("checkpoints"))?;
    let mut log = LossLog::open(&log_path)?;
    let mut checkpoints = Vec::new();
    if a.resume.is_none() {
        let p = checkpoint_path(out, 0);
        checkpoint::save(&p, &tr.model, 0, Some(&tr.opt))?;
        checkpoints.push(p);
    }

    let total = tr.budget.total();
    eprintln!(
        "training {} examples, {} steps ({} warmup, {} main, {} finetune), starting at step {}",
        tr.examples.len(),
        total,
        tr.budget.warmup,
        tr.budget.main,
        tr.budget.finetune,
        tr.step
    );
    let stop = cfg.max_steps.unwrap_or(usize::MAX);
    let mut records = Vec::new();
    let stderr = std::io::stderr();
    while !tr.done() && tr.step < stop {
        let rec = tr.train_step()?;
        log.append(&rec)?;
        if !a.quiet {
            trainer::summarize(&mut stderr.lock(), &rec)?;
        }
        records.push(rec);
        let boundary = tr.done() || tr.budget.phase_of(tr.step) != rec.phase;
        let periodic = cfg.checkpoint_every > 0 && tr.step % cfg.checkpoint_every == 0;
        if boundary || periodic {
            let p = checkpoint_path(out, tr.step);
            checkpoint::save(&p, &tr.model, tr.step, Some(&tr.opt))?;
            checkpoints.push(p);
        }
    }
    let final_checkpoint = out.join("checkpoints").join("final.ckpt");
    checkpoint::save(&final_checkpoint, &tr.model, tr.step, Some(&tr.opt))?;

    let summary = json!({
        "steps_run": records.len(),
        "end_step": tr.step,
        "total_steps": total,
        "first": records.first().map(|r| r.report),
        "last": records.last().map(|r| r.report),
        "checkpoints": checkpoints.iter().chain([&final_checkpoint]).map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    fs::write(out.join("train_summary.json"), format!("{summary:#}\n"))?;
    Ok(TrainOutcome { records, checkpoints, final_checkpoint, total_steps: total })
}

// ------------------------------------------------------------------ eval

fn wants(task: Task, t: Task) -> bool {
    task == Task::All || task == t
}

fn labels(samples: &[&SyntheticSample]) -> Vec<usize> {
    samples.iter().map(|s| s.class_id).collect()
}

fn images_of<'a>(s: &[&'a SyntheticSample]) -> Vec<&'a defend_core::imaging::Image> {
    s.iter().map(|x| &x.image).collect()
}

pub fn probe_block(model: &ModelState, train: &[&SyntheticSample], test: &[&SyntheticSample], cfg: &ProbeConfig) -> Result<Value> {
    let x_train = evaluation::global_features(model, &images_of(train))?;
    let x_test = evaluation::global_features(model, &images_of(test))?;
    let probe = evaluation::train_linear_probe(&x_train, &labels(train), cfg)?;
    let report = probe.evaluate(&x_test, &labels(test))?;

    let cell = model.cfg.encoder.patch_size;
    let pix = |s: &[&SyntheticSample]| s.iter().map(|x| (data::pixel_mean_features(&x.image, cell), x.class_id)).collect::<Vec<_>>();
    let baseline = data::nearest_centroid_accuracy(&pix(train), &pix(test));
    let mut v = serde_json::to_value(&report)?;
    let m = v.as_object_mut().expect("report is an object");
    m.insert("n_train".into(), json!(train.len()));
    m.insert("n_test".into(), json!(test.len()));
    m.insert("num_classes".into(), json!(probe.classes.len()));
    m.insert("chance".into(), json!(1.0 / probe.classes.len() as f64));
    m.insert("pixel_centroid_baseline_acc".into(), json!(baseline));
    Ok(v)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let (mut cfg, src) = prepare(&a.common, Vec::new())?;
    let out = &a.common.out;
    let (ckpt, header) = load_model(&a.checkpoint, &mut cfg, &src)?;
    cfg.write_resolved(out)?;
    let model = ckpt.model;
    let ds = data::load_dataset(&a.data)?;
    check_image_size(&ds, &cfg)?;
    let m = &ds.manifest;
    let test = ds.split(&m.test)?;

    let mut metrics = serde_json::Map::new();
    metrics.insert("checkpoint".into(), json!(a.checkpoint.display().to_string()));
    metrics.insert("step".into(), json!(header.step));
    if wants(a.task, Task::Probe) {
        let train = ds.split(&m.train)?;
        metrics.insert("probe".into(), probe_block(&model, &train, &test, &cfg.probe)?);
    }
    if wants(a.task, Task::Zeroshot) {
        let zs = ds.split(&m.zeroshot)?;
        let r = evaluation::zero_shot_eval(&model, &zs, &m.zeroshot_classes)?;
        metrics.insert("zeroshot".into(), serde_json::to_value(&r)?);
    }
    if wants(a.task, Task::Vqa) {
        let (r, rows) = evaluation::vqa_eval(&model, &test, m.num_classes)?;
        write_jsonl(&out.join("vqa_results.jsonl"), &rows)?;
        metrics.insert("vqa".into(), serde_json::to_value(&r)?);
    }
    if wants(a.task, Task::Describe) {
        let mut rows = Vec::new();
        let mut exact = 0;
        let mut lp = 0.0;
        for s in &test {
            let g = evaluation::describe(&model, &s.image)?;
            let generated = model.vocab.decode(&g.tokens);
            let reference = model.vocab.decode(&model.vocab.encode(&s.description_text));
            exact += usize::from(generated == reference);
            lp += g.log_prob;
            rows.push(json!({ "image_id": s.record.image_id, "generated": generated, "reference": reference, "log_prob": g.log_prob }));
        }
        write_jsonl(&out.join("descriptions.jsonl"), &rows)?;
        let n = test.len().max(1) as f64;
        metrics.insert("describe".into(), json!({ "n": test.len(), "exact_match": exact as f64 / n, "mean_log_prob": lp / n }));
    }
    if wants(a.task, Task::Attention) {
        let rate = evaluation::band_attention_rate(&model, &test)?;
        metrics.insert("attention".into(), json!({ "n": test.iter().filter(|s| s.band.is_some()).count(), "band_above_median_rate": rate }));
    }
    let v = Value::Object(metrics);
    fs::write(out.join("metrics.json"), format!("{v:#}\n"))?;
    Ok(v)
}

// -------------------------------------------------------------- attn-map

pub fn cmd_attn_map(a: &AttnArgs) -> Result<Vec<PathBuf>> {
    let (mut cfg, src) = prepare(&a.common, Vec::new())?;
    let (ckpt, _) = load_model(&a.checkpoint, &mut cfg, &src)?;
    cfg.write_resolved(&a.common.out)?;
    let ds = data::load_dataset(&a.data)?;
    check_image_size(&ds, &cfg)?;
    let samples = a
        .ids
        .iter()
        .map(|id| {
            ds.get(id)
                .ok_or_else(|| Error::Data(format!("unknown image id {id:?}; valid ids are {}", ds.id_range())))
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = a.common.out.join("attn");
    fs::create_dir_all(&dir)?;
    let mut paths = Vec::new();
    for s in samples {
        let map = evaluation::export_attention_map(&ckpt.model, &s.image, &s.record.image_id)?;
        let p = dir.join(format!("{}.png", s.record.image_id));
        map.overlay.save_png(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

// -------------------------------------------------------------- validate

pub struct ValidateOutcome {
    pub records: usize,
    pub failures: Vec<(usize, Vec<String>)>,
}

pub fn cmd_validate(a: &ValidateArgs) -> Result<ValidateOutcome> {
    prepare(&a.common, Vec::new())?;
    let failures = data::validate_file(&a.input)?;
    let records = fs::read_to_string(&a.input)?.lines().filter(|l| !l.trim().is_empty()).count();
    let report = json!({
        "input": a.input.display().to_string(),
        "records": records,
        "invalid": failures.iter().map(|(line, errors)| json!({ "line": line, "errors": errors })).collect::<Vec<_>>(),
    });
    fs::write(a.common.out.join("validation.json"), format!("{report:#}\n"))?;
    let mut err = std::io::stderr().lock();
    for (line, errors) in &failures {
        for e in errors {
            writeln!(err, "{}:{line}: {e}", a.input.display())?;
        }
    }
    if failures.is_empty() {
        eprintln!("{records} records valid");
        Ok(ValidateOutcome { records, failures })
    } else {
        Err(Error::Data(format!("{} of {records} records failed validation", failures.len())))
    }
}
