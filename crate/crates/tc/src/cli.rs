//! The `tc` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tc_core::backbone::{init_weights, Encoder};
use tc_core::evaluation::MetricReport;
use tc_core::latent::encoder_checksum;
use tc_core::mil::{evaluate_mil, MilExample, MilHeadKind};
use tc_core::trainer::EvalSplit;

use crate::ablation::{run_from_encoder, write_csv};
use crate::checkpoint::{head_checkpoint, load_encoder, load_head, load_state, Checkpoint, HeadMeta, KIND_MIL_HEAD, KIND_MTL_STATE};
use crate::compress::compress_entries;
use crate::config::{RunConfig, SplitArg};
use crate::error::{Result, TcError};
use crate::experiment::{load_latent_dir, plans_for, run_plan};
use crate::fixture::{read_manifest, write_fixture};
use crate::io::write_json;
use crate::pretrain::{pretrain, PretrainOptions, ENCODER};
use crate::report::{collect_inputs, write_report};

#[derive(Debug, Parser)]
#[command(name = "tc", version, about = "Multi-task encoder pre-training, slide compression and MIL heads")]
pub struct Cli {
    /// JSON run configuration; defaults apply to every missing field.
    #[arg(short = 'c', long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Single-threaded, reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Output root.
    #[arg(long, global = true, env = "TC_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the shared encoder on the synthetic tasks.
    Pretrain(PretrainArgs),
    /// Turn slides into latent grids with a frozen encoder.
    Compress(CompressArgs),
    /// Train and test slide-level heads on latent slides.
    TrainMil(TrainMilArgs),
    /// Score a saved checkpoint.
    Eval(EvalArgs),
    /// Random-forest sample-efficiency ablation on frozen embeddings.
    Ablation(AblationArgs),
    /// Figures and a summary table from a directory of reports.
    Report(ReportArgs),
    /// Write a synthetic slide fixture (PNG slides and a manifest).
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many seconds of training.
    #[arg(long)]
    pub max_seconds: Option<f64>,
    /// Skip the validation pass after training.
    #[arg(long)]
    pub no_eval: bool,
}

#[derive(Clone, Debug, Args)]
pub struct EncoderArgs {
    /// Encoder or training-state checkpoint; defaults to the pre-trained encoder in the output root.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use a frozen, randomly initialized encoder of the configured architecture instead.
    #[arg(long, conflicts_with = "checkpoint")]
    pub random_init: bool,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[command(flatten)]
    pub encoder: EncoderArgs,
    /// Slide directory containing `manifest.json`, or the manifest itself.
    #[arg(long)]
    pub slides: PathBuf,
    /// Destination of the `.lwsi` files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep existing outputs written by the same encoder.
    #[arg(long)]
    pub skip_existing: bool,
}

#[derive(Debug, Args)]
pub struct TrainMilArgs {
    /// Directory of `.lwsi` files.
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long)]
    pub split: Option<SplitArg>,
    #[arg(long, value_parser = parse_head)]
    pub head: Option<MilHeadKind>,
    /// Destination of reports and head checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Head or training-state checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Latent slides to score a head on.
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Where to write the JSON result.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub encoder: EncoderArgs,
    /// CSV destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory searched recursively for reports and ablation tables.
    pub dir: PathBuf,
    /// Figure directory; defaults to `<dir>/figures`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_head(s: &str) -> std::result::Result<MilHeadKind, String> {
    match s {
        "maxpool" => Ok(MilHeadKind::MaxPool),
        "abmil" => Ok(MilHeadKind::Abmil),
        _ => Err(format!("unknown head `{s}`; expected maxpool or abmil")),
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    seed: u64,
    seeds: &'a [u64],
    deterministic: bool,
    version: &'a str,
}

struct Run {
    cfg: RunConfig,
    root: PathBuf,
    deterministic: bool,
}

impl Run {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
            cfg.eval.seeds = vec![s];
        }
        if cli.deterministic {
            cfg.compression.workers = 1;
        }
        let root = cfg.output_root(cli.output_dir.as_deref());
        cfg.output_dir = Some(root.clone());
        Ok(Self { cfg, root, deterministic: cli.deterministic })
    }

    /// Writes the resolved config and seeds next to a command's artifacts.
    fn provenance(&self, dir: &Path, command: &str) -> Result<()> {
        write_json(&dir.join("resolved_config.json"), &self.cfg)?;
        let p = Provenance {
            command,
            seed: self.cfg.seed,
            seeds: &self.cfg.eval.seeds,
            deterministic: self.deterministic,
            version: env!("CARGO_PKG_VERSION"),
        };
        write_json(&dir.join("provenance.json"), &p)
    }

    fn encoder(&self, args: &EncoderArgs) -> Result<(Encoder<f32>, String)> {
        if args.random_init {
            let mut enc = init_weights::<f32>(&self.cfg.backbone_config())?;
            enc.freeze();
            return Ok((enc, "random".into()));
        }
        let path = args.checkpoint.clone().unwrap_or_else(|| self.root.join(ENCODER));
        load_encoder(&path)
    }
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn safe_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn cmd_pretrain(run: &Run, args: &PretrainArgs) -> Result<i32> {
    let out = &run.root;
    std::fs::create_dir_all(out).map_err(|e| TcError::io(out, e))?;
    run.provenance(out, "pretrain")?;
    let opts = PretrainOptions { resume: args.resume, budget_secs: args.max_seconds, evaluate: !args.no_eval };
    let summary = pretrain(&run.cfg, out, &opts)?;
    print_json(&summary);
    Ok(0)
}

fn cmd_compress(run: &Run, args: &CompressArgs) -> Result<i32> {
    let (encoder, encoder_id) = run.encoder(&args.encoder)?;
    let (manifest, root) = read_manifest(&args.slides)?;
    let out = args.out.clone().unwrap_or_else(|| run.root.join("latents"));
    std::fs::create_dir_all(&out).map_err(|e| TcError::io(&out, e))?;
    run.provenance(&out, "compress")?;
    let summary = compress_entries(&manifest.slides, &root, &out, &encoder, &encoder_id, &run.cfg.compression, args.skip_existing)?;
    write_json(&out.join("compress_summary.json"), &summary)?;
    print_json(&summary);
    Ok(if summary.failures.is_empty() { 0 } else { 1 })
}

fn cmd_train_mil(run: &Run, args: &TrainMilArgs) -> Result<i32> {
    let split = args.split.unwrap_or(run.cfg.eval.split);
    let kind = args.head.unwrap_or(run.cfg.mil.head);
    let latents: Vec<_> = load_latent_dir(&args.latents)?.into_iter().map(|(_, l)| l).collect();
    let channels = latents[0].channels();
    let mode = run.cfg.eval.split_mode(split);
    // resolve and check every split before any training starts
    let mut jobs = Vec::new();
    for &seed in &run.cfg.eval.seeds {
        for plan in plans_for(&latents, &mode, seed)? {
            jobs.push((seed, plan));
        }
    }
    let out = args.out.clone().unwrap_or_else(|| run.root.clone());
    let (reports, heads) = (out.join("reports"), out.join("heads"));
    std::fs::create_dir_all(&reports).map_err(|e| TcError::io(&reports, e))?;
    run.provenance(&out, "train-mil")?;
    let mut summary = Vec::new();
    for (seed, plan) in jobs {
        let head_cfg = run.cfg.mil.head_config(kind, channels, seed);
        let (outcome, report) = run_plan(&latents, &plan, &split.to_string(), &head_cfg, &run.cfg.mil_train_config(seed))?;
        let stem = safe_name(&format!("{}_{}_seed{seed}", report.model_id, plan.split_id));
        write_json(&reports.join(format!("{stem}.json")), &report)?;
        let meta = HeadMeta {
            head: head_cfg,
            encoder_id: report.encoder_id.clone(),
            encoder_checksum: report.encoder_checksum.clone(),
            best_epoch: outcome.best_epoch,
        };
        head_checkpoint(&outcome.model, &meta).save(&heads.join(format!("{stem}.tcck")))?;
        log::info!("{stem}: test auc {:?}, best epoch {}", report.test.auc, report.best_epoch);
        summary.push(serde_json::json!({
            "model_id": report.model_id,
            "split_id": report.split_id,
            "seed": seed,
            "sizes": report.sizes,
            "best_epoch": report.best_epoch,
            "test": report.test,
        }));
    }
    print_json(&summary);
    Ok(0)
}

fn labeled_examples(dir: &Path) -> Result<Vec<MilExample>> {
    load_latent_dir(dir)?
        .into_iter()
        .map(|(p, l)| {
            let label = l.meta.label.ok_or_else(|| TcError::Usage(format!("{} has no label", p.display())))?;
            Ok(MilExample { slide_id: l.meta.slide_id.clone(), latent: l.data, label: label.index() })
        })
        .collect()
}

fn cmd_eval(run: &Run, args: &EvalArgs) -> Result<i32> {
    let kind = Checkpoint::load(&args.checkpoint)?.kind;
    let value = match kind.as_str() {
        KIND_MIL_HEAD => {
            let dir = args.latents.as_ref().ok_or_else(|| TcError::Usage("--latents is required to score a MIL head".into()))?;
            let (model, meta) = load_head(&args.checkpoint)?;
            let set = labeled_examples(dir)?;
            let mut report: MetricReport = evaluate_mil(&model, &set, run.cfg.mil.train.eval_min_side)?;
            report.model_id = Some(format!("{}-{}", meta.head.kind.as_str(), meta.encoder_id));
            serde_json::to_value(report).unwrap_or_default()
        }
        KIND_MTL_STATE => {
            let mut state = load_state(&args.checkpoint)?;
            let mut metrics = Vec::new();
            for t in 0..state.num_tasks() {
                metrics.push(state.evaluate_task(t, EvalSplit::Val, run.cfg.trainer.eval_limit)?);
            }
            let enc = state.export_encoder();
            serde_json::json!({ "encoder_checksum": encoder_checksum(&enc), "micro_steps": state.micro_step, "metrics": metrics })
        }
        other => return Err(TcError::Usage(format!("cannot evaluate a `{other}` checkpoint"))),
    };
    if let Some(out) = &args.out {
        write_json(out, &value)?;
    }
    print_json(&value);
    Ok(0)
}

fn cmd_ablation(run: &Run, args: &AblationArgs) -> Result<i32> {
    let (encoder, encoder_id) = run.encoder(&args.encoder)?;
    let out = args.out.clone().unwrap_or_else(|| run.root.join("ablation").join(format!("{encoder_id}.csv")));
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    std::fs::create_dir_all(&dir).map_err(|e| TcError::io(&dir, e))?;
    run.provenance(&dir, "ablation")?;
    let rows = run_from_encoder(&encoder, &run.cfg.eval.ablation)?;
    write_csv(&out, &rows)?;
    for &n in &run.cfg.eval.ablation.n_per_class {
        match crate::ablation::mean_f1(&rows, n) {
            Some(m) => println!("n={n}: mean F1 {m:.4}"),
            None => println!("n={n}: unavailable"),
        }
    }
    Ok(0)
}

fn cmd_report(args: &ReportArgs) -> Result<i32> {
    if !args.dir.is_dir() {
        return Err(TcError::Usage(format!("{} is not a directory", args.dir.display())));
    }
    let inputs = collect_inputs(&args.dir)?;
    let out = args.out.clone().unwrap_or_else(|| args.dir.join("figures"));
    for p in write_report(&inputs, &out)? {
        println!("{}", p.display());
    }
    Ok(0)
}

fn cmd_synth(run: &Run, args: &SynthArgs) -> Result<i32> {
    let spec = crate::fixture::FixtureSpec { seed: run.cfg.seed, ..run.cfg.fixture.clone() };
    let m = write_fixture(&args.out, &spec)?;
    println!("{} slides written to {}", m.slides.len(), args.out.display());
    Ok(0)
}

/// Runs a parsed invocation and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = Run::new(&cli).and_then(|run| {
        if cli.deterministic {
            // a second initialization in the same process is harmless
            let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
        }
        match &cli.command {
            Command::Pretrain(a) => cmd_pretrain(&run, a),
            Command::Compress(a) => cmd_compress(&run, a),
            Command::TrainMil(a) => cmd_train_mil(&run, a),
            Command::Eval(a) => cmd_eval(&run, a),
            Command::Ablation(a) => cmd_ablation(&run, a),
            Command::Report(a) => cmd_report(a),
            Command::Synth(a) => cmd_synth(&run, a),
        }
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
