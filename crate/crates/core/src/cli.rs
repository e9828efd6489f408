//! Command-line entry point.
//!
//! Settings resolve as flag, then `--config` file (flat JSON), then the
//! built-in default. Every command writes a run manifest beside its main
//! output as `<output>.run.json`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::dataset::{format_boxes, read_boxes, read_dataset, read_manifest, write_dataset};
use crate::data::synth::{generate_dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::eval::{run_all, EvalReport, MetricsReport, TrackRun};
use crate::model::{AblationProfile, BackboneConfig, Tracker};
use crate::pipeline::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::pipeline::train::write_epoch_log;
use crate::pipeline::{
    prompt_param_counts, prompt_tune, train_foundation, TrainConfig, REFERENCE_PROMPT_PARAMS,
    REFERENCE_TOTAL_PARAMS,
};
use crate::verify::{gradcheck_tiny, GRADCHECK_EPS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "nightprompt", version, about = "Prompt-tuned nighttime single-object tracking")]
pub struct Cli {
    /// Flat JSON file with default settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic day or night dataset.
    GenData(GenDataArgs),
    /// Train the foundation tracker from scratch.
    TrainBase(TrainBaseArgs),
    /// Attach prompts to a base checkpoint and train only them.
    PromptTune(PromptTuneArgs),
    /// Run one-pass tracking and write one boxes file per sequence.
    Track(TrackArgs),
    /// Score predictions (or a checkpoint) against groundtruth.
    Eval(EvalArgs),
    /// Check prompt gradients against finite differences on the tiny model.
    Gradcheck(GradcheckArgs),
    /// Tune every profile from one base checkpoint and compare them.
    Ablate(AblateArgs),
    /// Report parameter counts for a model preset.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seqs: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub night: bool,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pairs_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// First epoch trained at the decayed rate; defaults to 80% of the epochs.
    #[arg(long)]
    pub decay_epoch: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainBaseArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model preset: tiny, small or desk.
    #[arg(long)]
    pub preset: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct PromptTuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// base, dcp, dcp+gfa_pp or dcp+gfa_full.
    #[arg(long)]
    pub profile: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory receiving `<sequence>.txt` boxes files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of `<sequence>.txt` predictions.
    #[arg(long, conflicts_with = "ckpt", required_unless_present = "ckpt")]
    pub pred: Option<PathBuf>,
    /// Track with this checkpoint instead of reading predictions.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub train_data: PathBuf,
    #[arg(long)]
    pub eval_data: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    /// Directory for the table and per-profile checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub profile: Option<String>,
}

/// Keys accepted in a `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub seqs: Option<usize>,
    pub frames: Option<usize>,
    pub night: Option<bool>,
    pub preset: Option<String>,
    pub profile: Option<String>,
    pub epochs: Option<usize>,
    pub pairs_per_epoch: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub decay_epoch: Option<usize>,
    pub weight_decay: Option<f64>,
    pub workers: Option<usize>,
    pub eps: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub duration_secs: f64,
}

/// `<path>.run.json`, beside a file or directory output.
pub fn manifest_path(output: &Path) -> PathBuf {
    sidecar(output, "run.json")
}

/// `<path>.log.csv`, the epoch log of a checkpoint.
pub fn epoch_log_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, "log.csv")
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    while s.to_string_lossy().ends_with('/') && s.len() > 1 {
        let t = s.to_string_lossy().trim_end_matches('/').to_string();
        s = OsString::from(t);
    }
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

struct Run {
    command: &'static str,
    started: Instant,
}

impl Run {
    fn start(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
        }
    }

    fn finish(self, config: Value, seed: u64, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>, at: &Path) -> Result<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            config,
            seed,
            inputs,
            outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = manifest_path(at);
        fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))
    }
}

fn preset(flag: &Option<String>, file: &FileConfig) -> Result<BackboneConfig> {
    let name = flag.clone().or_else(|| file.preset.clone()).unwrap_or_else(|| "desk".into());
    BackboneConfig::preset(&name)
}

fn profile(flag: &Option<String>, file: &FileConfig) -> Result<AblationProfile> {
    let name = flag
        .clone()
        .or_else(|| file.profile.clone())
        .ok_or_else(|| Error::Config("--profile is required".into()))?;
    AblationProfile::from_str(&name)
}

fn workers(flag: Option<usize>, file: &FileConfig) -> usize {
    flag.or(file.workers).unwrap_or(1).max(1)
}

/// Applies flags over file values over `base`.
pub fn resolve_train(base: TrainConfig, flags: &TrainFlags, file: &FileConfig) -> TrainConfig {
    let mut cfg = base;
    if let Some(e) = flags.epochs.or(file.epochs) {
        cfg = cfg.with_epochs(e);
    }
    if let Some(v) = flags.decay_epoch.or(file.decay_epoch) {
        cfg.decay_epoch = v;
    }
    cfg.pairs_per_epoch = flags.pairs_per_epoch.or(file.pairs_per_epoch).unwrap_or(cfg.pairs_per_epoch);
    cfg.batch_size = flags.batch_size.or(file.batch_size).unwrap_or(cfg.batch_size);
    cfg.lr = flags.lr.or(file.lr).unwrap_or(cfg.lr);
    cfg.weight_decay = flags.weight_decay.or(file.weight_decay).unwrap_or(cfg.weight_decay);
    cfg.seed = flags.seed.or(file.seed).unwrap_or(cfg.seed);
    cfg
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn cmd_gen_data(a: &GenDataArgs, file: &FileConfig) -> Result<()> {
    let run = Run::start("gen-data");
    let spec = DatasetSpec::new(
        a.seqs.or(file.seqs).unwrap_or(8),
        a.frames.or(file.frames).unwrap_or(60),
        a.seed.or(file.seed).unwrap_or(0),
        a.night || file.night.unwrap_or(false),
    );
    if spec.sequences == 0 || spec.frames < 2 {
        return Err(Error::Config("need at least one sequence of two or more frames".into()));
    }
    if is_nonempty_dir(&a.out) {
        if !a.force {
            return Err(Error::Data(format!(
                "{} exists and is not empty; pass --force to replace it",
                a.out.display()
            )));
        }
        fs::remove_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    }
    let seqs = generate_dataset(&spec)?;
    let manifest = write_dataset(&seqs, &a.out, spec.night, spec.seed)?;
    println!(
        "wrote {} {} sequences of {} frames to {}",
        manifest.sequences.len(),
        if spec.night { "night" } else { "day" },
        spec.frames,
        a.out.display()
    );
    run.finish(
        json!({ "seqs": spec.sequences, "frames": spec.frames, "seed": spec.seed, "night": spec.night,
                "width": spec.width, "height": spec.height }),
        spec.seed,
        vec![],
        vec![a.out.clone()],
        &a.out,
    )
}

fn save_trained(out: &Path, tracker: Tracker, cfg: &TrainConfig, log: &[crate::pipeline::EpochLog]) -> Result<()> {
    let mut ckpt = Checkpoint::new(tracker);
    ckpt.train_config = Some(cfg.clone());
    save_checkpoint(&ckpt, out)?;
    write_epoch_log(&epoch_log_path(out), log)
}

fn print_log(log: &[crate::pipeline::EpochLog]) {
    for e in log {
        println!("epoch {:>3}  loss {:.5}  lr {:.2e}", e.epoch, e.mean_loss, e.lr);
    }
}

fn cmd_train_base(a: &TrainBaseArgs, file: &FileConfig) -> Result<()> {
    let run = Run::start("train-base");
    let model = preset(&a.preset, file)?;
    let cfg = resolve_train(TrainConfig::foundation_default(), &a.train, file);
    cfg.validate()?;
    let data = read_dataset(&a.data)?;
    let out = train_foundation(&model, &data.sequences, &cfg)?;
    print_log(&out.log);
    save_trained(&a.out, out.tracker, &cfg, &out.log)?;
    println!("saved {}", a.out.display());
    run.finish(
        json!({ "model": model, "train": cfg }),
        cfg.seed,
        vec![a.data.clone()],
        vec![a.out.clone(), epoch_log_path(&a.out)],
        &a.out,
    )
}

fn cmd_prompt_tune(a: &PromptTuneArgs, file: &FileConfig) -> Result<()> {
    let run = Run::start("prompt-tune");
    let profile = profile(&a.profile, file)?;
    let cfg = resolve_train(TrainConfig::prompt_default(profile), &a.train, file);
    cfg.validate()?;
    let base = load_checkpoint(&a.base)?.tracker;
    let data = read_dataset(&a.data)?;
    let out = prompt_tune(&base, &data.sequences, &cfg)?;
    print_log(&out.log);
    let counts = prompt_param_counts(&out.tracker.params);
    println!(
        "trainable {} of {} parameters ({:.2}%)",
        counts.selected,
        counts.total,
        100.0 * counts.fraction
    );
    save_trained(&a.out, out.tracker, &cfg, &out.log)?;
    println!("saved {}", a.out.display());
    run.finish(
        json!({ "train": cfg }),
        cfg.seed,
        vec![a.data.clone(), a.base.clone()],
        vec![a.out.clone(), epoch_log_path(&a.out)],
        &a.out,
    )
}

fn cmd_track(a: &TrackArgs, file: &FileConfig) -> Result<()> {
    let run = Run::start("track");
    let w = workers(a.workers, file);
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let runs = run_all(&ckpt.tracker, &data.sequences, w)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut outputs = Vec::new();
    for r in &runs {
        let path = a.out.join(format!("{}.txt", r.sequence));
        fs::write(&path, format_boxes(&r.predictions)).map_err(|e| Error::io(&path, e))?;
        outputs.push(path);
    }
    println!("tracked {} sequences into {}", runs.len(), a.out.display());
    run.finish(
        json!({ "workers": w, "profile": ckpt.tracker.profile }),
        0,
        vec![a.data.clone(), a.ckpt.clone()],
        outputs,
        &a.out,
    )
}

fn print_metrics(label: &str, m: &MetricsReport) {
    println!(
        "{label}: frames {}  mean IoU {:.4}  success {:.4}  precision@20 {:.4}  norm precision {:.4}",
        m.frames, m.mean_iou, m.success_score, m.precision_score, m.norm_precision_score
    );
}

fn cmd_eval(a: &EvalArgs, file: &FileConfig) -> Result<()> {
    let run = Run::start("eval");
    let w = workers(a.workers, file);
    let mut inputs = vec![a.data.clone()];
    let (runs, attributes) = match (&a.pred, &a.ckpt) {
        (Some(pred), _) => {
            inputs.push(pred.clone());
            let manifest = read_manifest(&a.data)?;
            let mut runs = Vec::new();
            for e in &manifest.sequences {
                let gt = read_boxes(&a.data.join(&e.name).join("groundtruth.txt"))?;
                let p = read_boxes(&pred.join(format!("{}.txt", e.name)))?;
                runs.push(TrackRun::from_boxes(&e.name, p, gt)?);
            }
            let attrs = manifest.sequences.iter().map(|e| e.attributes.clone()).collect::<Vec<_>>();
            (runs, attrs)
        }
        (None, Some(ckpt)) => {
            inputs.push(ckpt.clone());
            let tracker = load_checkpoint(ckpt)?.tracker;
            let data = read_dataset(&a.data)?;
            let attrs = data.sequences.iter().map(|s| s.attributes.clone()).collect::<Vec<_>>();
            (run_all(&tracker, &data.sequences, w)?, attrs)
        }
        (None, None) => return Err(Error::Config("eval needs --pred or --ckpt".into())),
    };
    let report = EvalReport::new(&runs, &attributes);
    crate::eval::write_report(&report, &a.report)?;
    print_metrics("overall", &report.overall);
    for (tag, m) in &report.attributes.per_attribute {
        print_metrics(tag, m);
    }
    for n in &report.attributes.notes {
        println!("note: {n}");
    }
    let mut outputs = vec![a.report.clone()];
    outputs.extend(crate::eval::curve_paths(&a.report));
    run.finish(json!({ "workers": w }), 0, inputs, outputs, &a.report)
}

fn cmd_gradcheck(a: &GradcheckArgs, file: &FileConfig) -> Result<bool> {
    let run = Run::start("gradcheck");
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let eps = a.eps.or(file.eps).unwrap_or(GRADCHECK_EPS);
    let s = gradcheck_tiny(seed, eps)?;
    println!("{:<18} {:>14}  result", "class", "max rel error");
    for (class, err) in &s.classes {
        let ok = *err < s.threshold;
        println!("{class:<18} {err:>14.3e}  {}", if ok { "pass" } else { "FAIL" });
    }
    println!(
        "{} coordinates checked, {} frozen skipped, overall max {:.3e} (threshold {:.0e})",
        s.report.checked, s.report.skipped, s.report.max_rel_error, s.threshold
    );
    let passed = s.passed();
    println!("gradcheck {}", if passed { "passed" } else { "FAILED" });
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&s)?).map_err(|e| Error::io(out, e))?;
        run.finish(json!({ "seed": seed, "eps": eps }), seed, vec![], vec![out.clone()], out)?;
    }
    Ok(passed)
}

/// One row of the ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub profile: String,
    pub label: String,
    pub mean_iou: f64,
    pub success: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub trainable: usize,
    pub total: usize,
    pub trainable_fraction: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("profile,label,mean_iou,success,precision,norm_precision,trainable,total,trainable_fraction\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.profile, r.label, r.mean_iou, r.success, r.precision, r.norm_precision, r.trainable, r.total, r.trainable_fraction
        ));
    }
    s
}

fn cmd_ablate(a: &AblateArgs, file: &FileConfig) -> Result<()> {
    let run = Run::start("ablate");
    let w = workers(a.workers, file);
    let base = load_checkpoint(&a.base)?.tracker;
    let train_data = read_dataset(&a.train_data)?;
    let eval_data = read_dataset(&a.eval_data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    let mut last_cfg = None;
    for profile in AblationProfile::LADDER {
        let (tracker, trainable) = if profile == AblationProfile::BASE {
            (base.clone(), 0)
        } else {
            let cfg = resolve_train(TrainConfig::prompt_default(profile), &a.train, file);
            let out = prompt_tune(&base, &train_data.sequences, &cfg)?;
            let path = a.out.join(format!("{}.ckpt", profile.name()));
            save_trained(&path, out.tracker.clone(), &cfg, &out.log)?;
            outputs.push(path);
            let n = prompt_param_counts(&out.tracker.params).selected;
            last_cfg = Some(cfg);
            (out.tracker, n)
        };
        let m = MetricsReport::from_runs(&run_all(&tracker, &eval_data.sequences, w)?);
        let total = tracker.params.total_numel();
        print_metrics(profile.label(), &m);
        rows.push(AblationRow {
            profile: profile.name().to_string(),
            label: profile.label().to_string(),
            mean_iou: m.mean_iou,
            success: m.success_score,
            precision: m.precision_score,
            norm_precision: m.norm_precision_score,
            trainable,
            total,
            trainable_fraction: trainable as f64 / total as f64,
        });
    }
    println!("\n| profile | mean IoU | success | precision | trainable |");
    println!("|---|---|---|---|---|");
    for r in &rows {
        println!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.2}% |",
            r.label, r.mean_iou, r.success, r.precision, 100.0 * r.trainable_fraction
        );
    }
    let json_path = a.out.join("ablation.json");
    let csv_path = a.out.join("ablation.csv");
    fs::write(&json_path, serde_json::to_string_pretty(&rows)?).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&csv_path, ablation_csv(&rows)).map_err(|e| Error::io(&csv_path, e))?;
    outputs.extend([json_path, csv_path]);
    let seed = last_cfg.as_ref().map_or(0, |c| c.seed);
    run.finish(
        json!({ "workers": w, "train": last_cfg }),
        seed,
        vec![a.train_data.clone(), a.eval_data.clone(), a.base.clone()],
        outputs,
        &a.out,
    )
}

fn cmd_params(a: &ParamsArgs, file: &FileConfig) -> Result<()> {
    let model = preset(&a.preset, file)?;
    let profile = match a.profile.clone().or_else(|| file.profile.clone()) {
        Some(p) => AblationProfile::from_str(&p)?,
        None => AblationProfile::FULL,
    };
    let mut t = Tracker::foundation(model, 0)?;
    if profile.enable_dcp {
        t = t.with_prompts(profile, 0)?;
    }
    let c = prompt_param_counts(&t.params);
    for (tag, n) in &c.by_tag {
        println!("{tag:<10} {n:>10}");
    }
    println!(
        "prompt parameters {} of {} ({:.2}%)",
        c.selected,
        c.total,
        100.0 * c.fraction
    );
    println!(
        "reference full-scale model: {:.2}M of {:.2}M ({:.2}%)",
        REFERENCE_PROMPT_PARAMS / 1e6,
        REFERENCE_TOTAL_PARAMS / 1e6,
        100.0 * REFERENCE_PROMPT_PARAMS / REFERENCE_TOTAL_PARAMS
    );
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = FileConfig::load(cli.config.as_deref()).and_then(|file| match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, &file).map(|_| true),
        Command::TrainBase(a) => cmd_train_base(a, &file).map(|_| true),
        Command::PromptTune(a) => cmd_prompt_tune(a, &file).map(|_| true),
        Command::Track(a) => cmd_track(a, &file).map(|_| true),
        Command::Eval(a) => cmd_eval(a, &file).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a, &file),
        Command::Ablate(a) => cmd_ablate(a, &file).map(|_| true),
        Command::Params(a) => cmd_params(a, &file).map(|_| true),
    });
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecars() {
        assert_eq!(manifest_path(Path::new("out/base.ckpt")), PathBuf::from("out/base.ckpt.run.json"));
        assert_eq!(manifest_path(Path::new("data/night/")), PathBuf::from("data/night.run.json"));
        assert_eq!(epoch_log_path(Path::new("m.ckpt")), PathBuf::from("m.ckpt.log.csv"));
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file = FileConfig {
            epochs: Some(7),
            lr: Some(0.5),
            seed: Some(3),
            ..Default::default()
        };
        let flags = TrainFlags {
            lr: Some(0.25),
            ..Default::default()
        };
        let base = TrainConfig::prompt_default(AblationProfile::FULL);
        let cfg = resolve_train(base.clone(), &flags, &file);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.decay_epoch, 6);
        assert_eq!(cfg.lr, 0.25);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.batch_size, base.batch_size);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"epochs": 3, "learning_rate": 1}"#).unwrap();
        assert!(matches!(FileConfig::load(Some(&p)), Err(Error::Config(_))));
    }

    #[test]
    fn missing_required_flag_is_usage_error() {
        assert_eq!(run(["nightprompt", "gen-data", "--seqs", "2"]), EXIT_USAGE);
    }

    #[test]
    fn base_profile_cannot_be_tuned() {
        let file = FileConfig::default();
        let cfg = resolve_train(TrainConfig::prompt_default(AblationProfile::BASE), &TrainFlags::default(), &file);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
