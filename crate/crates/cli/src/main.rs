//! `mcdet`: one subcommand per pipeline stage.
//!
//! synth -> train -> infer -> aggregate -> eval / sweep. Every stage reads a
//! run configuration (TOML, optional) and applies flag overrides on top.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mcdet_core::aggregate::{postprocess, UncertaintyChannel};
use mcdet_core::config::RunConfig;
use mcdet_core::eval::{cpm, froc, match_detections, sweep, uncertainty_histogram};
use mcdet_core::io::{
    ground_truth_of, read_detections, read_ground_truth, read_pass_dump, read_scenes, write_detections,
    write_froc_csv, write_ground_truth, write_hist_csv, write_pass_dump, write_scenes, write_sweep_csv, PassSet,
};
use mcdet_core::micronet::{deterministic_infer, mc_infer, read_checkpoint, train, write_checkpoint, LossKind, MicroNet};
use mcdet_core::synth::{generate_dataset, simulate_mc_passes};

#[derive(Parser)]
#[command(name = "mcdet", version, about = "MC-dropout detection uncertainty pipeline")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with ground truth (and optionally simulated passes).
    Synth(SynthArgs),
    /// Train a micro detector on a scene file.
    Train(TrainArgs),
    /// Run T stochastic passes of a trained detector and write a pass dump.
    Infer(InferArgs),
    /// Aggregate a pass dump into post-NMS detections.
    Aggregate(AggregateArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Threshold sweep: writes froc.csv, sweep.csv and hist.csv.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of scenes.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Scene file (NDJSON).
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth file (NDJSON).
    #[arg(long)]
    gt: PathBuf,
    /// Also write simulated MC passes for the scenes to this dump.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Passes for the simulated dump.
    #[arg(long)]
    passes: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Attenuated,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Checkpoint output.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Noise samples T' of the attenuated loss.
    #[arg(long)]
    loss_samples: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    /// Pass dump output.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    passes: Option<usize>,
    /// Single dropout-free pass instead of MC sampling.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Detection output.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    prob_floor: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Cpm,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "cpm")]
    metric: Metric,
    /// Also write the FROC curve here.
    #[arg(long)]
    froc: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    Avg,
    Mc,
    Pred,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Directory receiving froc.csv, sweep.csv and hist.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum)]
    channel: Option<ChannelArg>,
    #[arg(long)]
    bins: Option<usize>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn finish(mut w: BufWriter<File>) -> Result<()> {
    w.flush()?;
    Ok(())
}

fn run_synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    if let Some(t) = a.passes {
        cfg.simulator.passes = t;
    }
    cfg.simulator.rng_seed = a.seed;
    cfg.validate()?;
    let scenes = generate_dataset(&cfg.grid, &cfg.dataset, a.n, a.seed)?;
    let mut w = create(&a.out)?;
    write_scenes(&mut w, &scenes)?;
    finish(w)?;
    let mut w = create(&a.gt)?;
    write_ground_truth(&mut w, &ground_truth_of(&scenes))?;
    finish(w)?;
    if let Some(path) = a.dump {
        let mut set = PassSet::new();
        for s in &scenes {
            set.insert(s.scan_id.clone(), simulate_mc_passes(s, &cfg.grid, &cfg.simulator)?);
        }
        let mut w = create(&path)?;
        write_pass_dump(&mut w, &cfg.grid, cfg.simulator.passes, &set)?;
        finish(w)?;
    }
    Ok(())
}

fn run_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    cfg.train.seed = a.seed;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.loss {
        cfg.train.loss_kind = match v {
            LossArg::Ce => LossKind::Ce,
            LossArg::Attenuated => LossKind::Attenuated,
        };
    }
    if let Some(v) = a.dropout {
        cfg.arch.dropout = v;
    }
    if let Some(v) = a.loss_samples {
        cfg.train.mc_integration_samples = v;
    }
    cfg.validate()?;
    let scenes = read_scenes(open(&a.scenes)?)?;
    let mut net = MicroNet::new(&cfg.grid, &cfg.arch, a.seed)?;
    train(&mut net, &scenes, &cfg.train)?;
    let mut w = create(&a.out)?;
    w.write_all(write_checkpoint(&net).as_bytes())?;
    finish(w)
}

fn run_infer(mut cfg: RunConfig, a: InferArgs) -> Result<()> {
    cfg.infer.seed = a.seed;
    if let Some(v) = a.passes {
        cfg.infer.passes = v;
    }
    if a.deterministic {
        cfg.infer.mc_dropout = false;
    }
    cfg.validate()?;
    let text = std::fs::read_to_string(&a.checkpoint)
        .with_context(|| format!("cannot open {}", a.checkpoint.display()))?;
    let net = read_checkpoint(&text)?;
    let scenes = read_scenes(open(&a.scenes)?)?;
    let passes = if cfg.infer.mc_dropout { cfg.infer.passes } else { 1 };
    let mut set = PassSet::new();
    for (i, s) in scenes.iter().enumerate() {
        let grids = if cfg.infer.mc_dropout {
            mc_infer(&net, &s.image, &s.scan_id, passes, cfg.infer.seed.wrapping_add(i as u64))?
        } else {
            deterministic_infer(&net, &s.image, &s.scan_id)?
        };
        set.insert(s.scan_id.clone(), grids);
    }
    let mut w = create(&a.out)?;
    write_pass_dump(&mut w, net.grid(), passes, &set)?;
    finish(w)
}

fn run_aggregate(mut cfg: RunConfig, a: AggregateArgs) -> Result<()> {
    if let Some(v) = a.prob_floor {
        cfg.aggregation.prob_floor = v;
    }
    if let Some(v) = a.nms_iou {
        cfg.aggregation.nms_iou = v;
    }
    cfg.validate()?;
    let (header, set) = read_pass_dump(open(&a.dump)?)?;
    let grid = header.grid();
    let mut agg = cfg.aggregation.clone();
    agg.passes_expected = Some(header.passes);
    let mut dets = Vec::new();
    for grids in set.values() {
        dets.extend(postprocess(grids, &grid, &agg)?);
    }
    let mut w = create(&a.out)?;
    write_detections(&mut w, &dets)?;
    finish(w)
}

fn run_eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    cfg.validate()?;
    let dets = read_detections(open(&a.dets)?)?;
    let gts = read_ground_truth(open(&a.gt)?)?;
    let m = match_detections(&dets, &gts)?;
    let points = froc(&m.labeled, m.n_scans, m.n_objects)?;
    if let Some(path) = a.froc {
        let mut w = create(&path)?;
        write_froc_csv(&mut w, &points)?;
        finish(w)?;
    }
    match a.metric {
        Metric::Cpm => println!("{}", cpm(&points, &cfg.eval.fp_rates)?),
    }
    Ok(())
}

fn run_sweep(mut cfg: RunConfig, a: SweepArgs) -> Result<()> {
    if let Some(c) = a.channel {
        cfg.sweep.channel = match c {
            ChannelArg::Avg => UncertaintyChannel::Avg,
            ChannelArg::Mc => UncertaintyChannel::Mc,
            ChannelArg::Pred => UncertaintyChannel::Pred,
        };
    }
    if let Some(b) = a.bins {
        cfg.sweep.hist_bins = b;
    }
    cfg.validate()?;
    let dets = read_detections(open(&a.dets)?)?;
    let gts = read_ground_truth(open(&a.gt)?)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let m = match_detections(&dets, &gts)?;
    let mut w = create(&a.out_dir.join("froc.csv"))?;
    write_froc_csv(&mut w, &froc(&m.labeled, m.n_scans, m.n_objects)?)?;
    finish(w)?;
    let s = &cfg.sweep;
    let result = sweep(&dets, &gts, &s.prob_grid, &s.unc_grid, &cfg.eval.fp_rates, s.channel)?;
    let mut w = create(&a.out_dir.join("sweep.csv"))?;
    write_sweep_csv(&mut w, &result.cells)?;
    finish(w)?;
    let mut w = create(&a.out_dir.join("hist.csv"))?;
    write_hist_csv(&mut w, &uncertainty_histogram(&m.labeled, s.hist_bins))?;
    finish(w)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("config {}", path.display()))?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => run_synth(cfg, a),
        Command::Train(a) => run_train(cfg, a),
        Command::Infer(a) => run_infer(cfg, a),
        Command::Aggregate(a) => run_aggregate(cfg, a),
        Command::Eval(a) => run_eval(cfg, a),
        Command::Sweep(a) => run_sweep(cfg, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mcdet: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
