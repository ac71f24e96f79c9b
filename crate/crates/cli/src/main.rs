//! `flowcd`: forge datasets, train, evaluate, ablate, infer, benchmark and
//! visualize the joint flow / change network.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowcd::forge::procedural::forge_procedural;
use flowcd::forge::{forge_dataset, DatasetManifest, MANIFEST_FILE};
use flowcd::harness::{
    ablate, bench, evaluate, infer_pair, metric_header, metric_line, train, write_history, BranchSelector,
    Checkpoint, JointNet, ModelPredictor, RunConfig,
};
use flowcd::{BitemporalSample, Error, Image, Result};

#[derive(Parser)]
#[command(name = "flowcd", version, about = "Joint optical-flow and change detection")]
struct Cli {
    /// Run configuration (.toml or .json); defaults to the full-scale recipe.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Config override `key.path=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output root; falls back to $FLOWCD_OUT, then `output.dir`, then `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Composite a dataset from background pairs and cutouts.
    Forge {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train from scratch and write a checkpoint.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        branch: BranchArg,
    },
    /// Score a checkpoint; prints F1, mEPE and FEPE.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[command(flatten)]
        branch: BranchArg,
    },
    /// Train and score the flow-only, change-only and joint variants.
    Ablate {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict flow and change for one image pair.
    Infer {
        t0: PathBuf,
        t1: PathBuf,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Time full forward passes.
    Bench {
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Weights to time; fresh weights when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "t1")]
        t0: Option<PathBuf>,
        #[arg(long, requires = "t0")]
        t1: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a t0 | t1 | flow | change panel for one dataset sample.
    Viz {
        /// Sample id; the first sample when absent.
        #[arg(long)]
        id: Option<String>,
        /// Dataset manifest; defaults to the training manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Show predictions of these weights instead of the labels.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output PNG; defaults to `<out>/viz/<id>.png`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CheckpointArg {
    /// Defaults to `<out>/checkpoint.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct BranchArg {
    /// both, of_only or cd_only.
    #[arg(long)]
    branch: Option<String>,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn train_manifest(&self) -> PathBuf {
        self.cfg
            .data
            .train
            .clone()
            .unwrap_or_else(|| self.out.join("dataset").join(MANIFEST_FILE))
    }

    fn test_manifest(&self) -> PathBuf {
        self.cfg.data.test.clone().unwrap_or_else(|| self.train_manifest())
    }

    fn checkpoint(&self, arg: Option<PathBuf>) -> PathBuf {
        arg.unwrap_or_else(|| self.out.join("checkpoint.ckpt"))
    }
}

fn load_samples(manifest: &Path) -> Result<Vec<BitemporalSample>> {
    DatasetManifest::load(manifest)?.load_samples()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn parse_branch(raw: &str) -> Result<BranchSelector> {
    BranchSelector::ALL
        .into_iter()
        .find(|b| b.name() == raw)
        .ok_or_else(|| Error::validation(format!("unknown branch {raw:?}; expected both, of_only or cd_only")))
}

/// Flags become overrides so they pass the same validation as `--set`.
fn flag_overrides(command: &Command) -> Vec<String> {
    let mut out = Vec::new();
    let mut push = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push(format!("{key}={v}"));
        }
    };
    match command {
        Command::Forge { seed } => push("forge.seed", seed.map(|s| s.to_string())),
        Command::Train { epochs, seed, branch } => {
            push("train.epochs", epochs.map(|e| e.to_string()));
            push("train.seed", seed.map(|s| s.to_string()));
            push("train.branch", branch.branch.as_ref().map(|b| format!("{b:?}")));
        }
        Command::Ablate { epochs, seed } => {
            push("train.epochs", epochs.map(|e| e.to_string()));
            push("train.seed", seed.map(|s| s.to_string()));
        }
        Command::Bench { pairs, warmup, seed, .. } => {
            push("bench.pairs", pairs.map(|p| p.to_string()));
            push("bench.warmup", warmup.map(|w| w.to_string()));
            push("train.seed", seed.map(|s| s.to_string()));
        }
        Command::Eval { .. } | Command::Infer { .. } | Command::Viz { .. } => {}
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(flag_overrides(&cli.command));
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path, &overrides)?,
        None => RunConfig::from_toml_str("", &overrides)?,
    };
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("FLOWCD_OUT").map(PathBuf::from))
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let ctx = Ctx { cfg, out };

    match cli.command {
        Command::Forge { .. } => forge(&ctx),
        Command::Train { .. } => train_cmd(&ctx),
        Command::Eval { ckpt, branch } => eval_cmd(&ctx, ckpt.checkpoint, branch.branch),
        Command::Ablate { .. } => ablate_cmd(&ctx),
        Command::Infer { t0, t1, ckpt } => {
            let ck = Checkpoint::load(&ctx.checkpoint(ckpt.checkpoint))?;
            let dir = ctx.out.join("infer");
            let o = infer_pair(&ck.model, &t0, &t1, &dir, ctx.cfg.eval.threshold)?;
            for p in [&o.flow_color, &o.flow, &o.change, &o.change_probability] {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Bench {
            checkpoint, t0, t1, ..
        } => bench_cmd(&ctx, checkpoint, t0.zip(t1)),
        Command::Viz {
            id,
            manifest,
            checkpoint,
            output,
        } => viz_cmd(&ctx, id, manifest, checkpoint, output),
    }
}

fn forge(ctx: &Ctx) -> Result<()> {
    let f = &ctx.cfg.forge;
    let dataset = ctx.out.join("dataset");
    let m = match (&f.backgrounds, &f.cutouts) {
        (Some(bg), Some(cut)) => forge_dataset(bg, cut, &f.config, &dataset, ctx.cfg.train.execution)?,
        (None, None) => forge_procedural(
            &ctx.out.join("sources"),
            &dataset,
            &f.procedural,
            &f.config,
            ctx.cfg.train.execution,
        )?,
        _ => {
            return Err(Error::validation(
                "set both forge.backgrounds and forge.cutouts, or neither for procedural sources",
            ))
        }
    };
    let pastes: usize = m.entries.iter().map(|e| e.pastes.len()).sum();
    println!(
        "forged {} samples ({pastes} pastes, seed {}) into {}",
        m.count,
        f.config.seed,
        dataset.display()
    );
    Ok(())
}

fn train_cmd(ctx: &Ctx) -> Result<()> {
    let samples = load_samples(&ctx.train_manifest())?;
    let every = (ctx.cfg.train.epochs / 20).max(1);
    let ck = train(&ctx.cfg, &samples, |r| {
        if r.epoch % every == 0 || r.epoch == ctx.cfg.train.epochs {
            let cell = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
            println!(
                "epoch {:>4}  loss {:.5}  F1 {}  mEPE {}  {:.2}s",
                r.epoch,
                r.loss,
                cell(r.f1),
                cell(r.mepe),
                r.seconds
            );
        }
    })?;
    let path = ctx.out.join("checkpoint.ckpt");
    ck.save(&path)?;
    write_history(&ctx.out.join("history.csv"), &ck.history)?;
    write(&ctx.out.join("config.toml"), &ctx.cfg.to_toml())?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}

fn eval_cmd(ctx: &Ctx, checkpoint: Option<PathBuf>, branch: Option<String>) -> Result<()> {
    let branch = branch.as_deref().map(parse_branch).transpose()?;
    let ck = Checkpoint::load(&ctx.checkpoint(checkpoint))?;
    let branch = branch.unwrap_or(ck.config.train.branch);
    let samples = load_samples(&ctx.test_manifest())?;
    let predictor = ModelPredictor {
        model: &ck.model,
        branch,
    };
    let report = evaluate(&predictor, &samples, &ctx.cfg.eval, ctx.cfg.train.execution)?;
    report.write(&ctx.out.join("eval"))?;
    println!("{}", metric_header());
    println!("{}", metric_line(&report));
    if report.aggregate.undefined_motion {
        eprintln!("warning: no sample has moving pixels; mEPE is reported as 0");
    }
    if !report.errors.is_empty() {
        for e in &report.errors {
            eprintln!("sample {}: {}", e.id, e.message);
        }
        return Err(Error::validation(format!(
            "{} of {} samples failed",
            report.errors.len(),
            samples.len()
        )));
    }
    Ok(())
}

fn ablate_cmd(ctx: &Ctx) -> Result<()> {
    let train_set = load_samples(&ctx.train_manifest())?;
    let test_set = load_samples(&ctx.test_manifest())?;
    let table = ablate(&ctx.cfg, &train_set, &test_set)?;
    write(&ctx.out.join("ablation.json"), &to_json(&table))?;
    print!("{}", table.render());
    Ok(())
}

/// Smooth deterministic frames for timing when no images are given.
fn synthetic_pair(width: usize, height: usize) -> Result<(Image, Image)> {
    let frame = |shift: f64| {
        Image::from_fn(height, width, |y, x| {
            let (x, y) = (x as f64 + shift, y as f64);
            [
                0.5 + 0.4 * (x * 0.21).sin() * (y * 0.17).cos(),
                0.5 + 0.4 * (x * 0.11 + y * 0.07).sin(),
                0.5 + 0.4 * (y * 0.23).sin(),
            ]
        })
    };
    Ok((frame(0.0)?, frame(1.5)?))
}

fn bench_cmd(ctx: &Ctx, checkpoint: Option<PathBuf>, frames: Option<(PathBuf, PathBuf)>) -> Result<()> {
    let model = match checkpoint {
        Some(p) => Checkpoint::load(&p)?.model,
        None => JointNet::new(ctx.cfg.model.clone(), ctx.cfg.train.seed)?,
    };
    let (t0, t1) = match frames {
        Some((a, b)) => (
            flowcd::harness::load_for_inference(&a)?.0,
            flowcd::harness::load_for_inference(&b)?.0,
        ),
        None => {
            let (w, h) = ctx.cfg.forge.config.output_size;
            synthetic_pair(w, h)?
        }
    };
    let r = bench(&model, &t0, &t1, ctx.cfg.bench.pairs, ctx.cfg.bench.warmup)?;
    write(&ctx.out.join("bench.json"), &to_json(&r))?;
    println!(
        "{} timed pairs at {}x{} after {} warmup: mean {:.4}s, {:.2} FPS on {}",
        r.pairs, r.width, r.height, r.warmup, r.mean_seconds, r.fps, r.device
    );
    Ok(())
}

fn viz_cmd(
    ctx: &Ctx,
    id: Option<String>,
    manifest: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    output: Option<PathBuf>,
) -> Result<()> {
    let m = DatasetManifest::load(&manifest.unwrap_or_else(|| ctx.train_manifest()))?;
    let entry = match &id {
        Some(id) => m
            .entries
            .iter()
            .find(|e| &e.id == id)
            .ok_or_else(|| Error::validation(format!("no sample {id:?} in the manifest")))?,
        None => m
            .entries
            .first()
            .ok_or_else(|| Error::validation("manifest lists no samples"))?,
    };
    let s = m.read(entry)?;
    let (flow, change) = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(&p)?;
            let pred = ck.model.predict(&s, BranchSelector::Both)?;
            (
                pred.flow.expect("both branches predict flow"),
                flowcd::binarize(&pred.change.expect("both branches predict change"), ctx.cfg.eval.threshold)?,
            )
        }
        None => (s.flow_label.clone(), s.change_label.clone()),
    };
    let path = output.unwrap_or_else(|| ctx.out.join("viz").join(format!("{}.png", s.id)));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    flowcd::viz::write_panel(&path, &s.t0, &s.t1, &flow, &change)?;
    println!("{}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
