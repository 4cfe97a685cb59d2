use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use memtrack::bench::{
    sweep, verify_design_rule, write_report, Axis, Precision, SweepOptions, Timing, MIN_WARMUP,
};
use memtrack::losses::run_grad_suite;
use memtrack::pipeline::{
    run_video, write_trace, Engine, EngineConfig, MemoryMode, SyntheticVideo, VideoSpec,
};
use memtrack::props::run_properties;
use memtrack::{Error, Real, Result};

const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(
    name = "memtrack",
    version,
    about = "Memory-compressed video tracking toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a synthetic video and write the per-frame trace.
    Run(RunArgs),
    /// Time memory attention along one axis and write a report.
    Bench(SweepArgs),
    /// Closed-form MAC report along one axis.
    Flops(SweepArgs),
    /// Compare analytic loss gradients with finite differences.
    GradCheck(CheckArgs),
    /// Randomized checks of the structural invariants.
    Props(CheckArgs),
    /// Write the resolved engine config.
    EmitConfig(EmitArgs),
}

/// Config sources, lowest precedence first: preset, file, flags.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dense,
    Compressed,
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptArg {
    Point,
    Mask,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum FpArg {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

impl From<FpArg> for Precision {
    fn from(f: FpArg) -> Self {
        match f {
            FpArg::F32 => Precision::F32,
            FpArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, value_enum, default_value = "point")]
    prompt: PromptArg,
    /// Trace destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "64")]
    fp: FpArg,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// frames, latents, depth or mode.
    #[arg(long, default_value = "mode")]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long, default_value = "dense,compressed")]
    values: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Measured repetitions (bench only).
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, value_enum, default_value = "32")]
    fp: FpArg,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixtures per loss or cases per property.
    #[arg(long, default_value_t = 100)]
    reps: usize,
}

#[derive(Args)]
struct EmitArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<EngineConfig> {
        let mut cfg = EngineConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            cfg.merge_text(&text)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.mode = match mode {
                ModeArg::Dense => MemoryMode::Dense,
                ModeArg::Compressed => MemoryMode::Compressed,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn run_with<T: Real>(args: &RunArgs, cfg: EngineConfig) -> Result<()> {
    let (h, w) = cfg.image_dims();
    let video = SyntheticVideo::generate(VideoSpec::new(args.frames, h, w, cfg.seed))?;
    let prompt = match args.prompt {
        PromptArg::Point => video.point_prompt(),
        PromptArg::Mask => video.mask_prompt(),
        PromptArg::None => None,
    };
    let engine = Engine::<T>::new(cfg.clone())?;
    let run = run_video(&engine, &video, prompt.as_ref())?;
    for o in &run.outputs {
        let want = engine.predicted_fuse_macs(o.bank_frames, o.attended_pointers);
        if o.fuse_macs != want {
            return Err(Error::Invariant(format!(
                "frame {}: counted MACs {:?} differ from model {:?}",
                o.frame_index, o.fuse_macs, want
            )));
        }
    }
    write_trace(&run.trace, output(args.out.as_deref())?)?;
    let macs = run.total_fuse_macs();
    eprintln!(
        "frames={} mode={} total_macs={} cross_mac={} self_mac={} wall_ms={:.3}",
        run.outputs.len(),
        cfg.mode,
        macs.total_macs(),
        macs.cross_attn,
        macs.self_attn,
        run.total_wall_ns() as f64 / 1e6
    );
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    match Precision::from(args.fp) {
        Precision::F32 => run_with::<f32>(args, cfg),
        Precision::F64 => run_with::<f64>(args, cfg),
    }
}

fn cmd_sweep(args: &SweepArgs, timed: bool) -> Result<()> {
    let base = args.cfg.resolve()?;
    let axis: Axis = args.axis.parse()?;
    let values: Vec<&str> = args.values.split(',').map(str::trim).collect();
    if timed && args.reps == 0 {
        return Err(Error::Config("--reps must be positive".into()));
    }
    let opts = SweepOptions {
        count: timed,
        timing: timed.then_some(Timing {
            warmup: MIN_WARMUP,
            reps: args.reps,
        }),
        precision: args.fp.into(),
    };
    let points = sweep(axis, &values, &base, &opts)?;
    write_report(&points, output(args.out.as_deref())?)?;
    let rule = verify_design_rule(&base)?;
    eprintln!(
        "HW/(Ng+Nl)={} T={} self/cross MACs={} ({:.1}% apart)",
        rule.compression,
        rule.frames,
        rule.self_over_cross.map_or("n/a".into(), |r| r.to_string()),
        100.0 * rule.balance_gap()
    );
    Ok(())
}

fn cmd_grad_check(args: &CheckArgs) -> Result<bool> {
    if args.reps == 0 {
        return Err(Error::Config("--reps must be positive".into()));
    }
    let rows = run_grad_suite(args.seed, args.reps)?;
    println!(
        "{:<14} {:>8} {:>12}  result",
        "loss", "fixtures", "max_rel_err"
    );
    let mut ok = true;
    for r in &rows {
        let pass = r.max_rel_err < GRAD_TOLERANCE;
        ok &= pass;
        println!(
            "{:<14} {:>8} {:>12.3e}  {}",
            r.loss,
            r.fixtures,
            r.max_rel_err,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn cmd_props(args: &CheckArgs) -> Result<bool> {
    if args.reps == 0 {
        return Err(Error::Config("--reps must be positive".into()));
    }
    let mut ok = true;
    for p in run_properties(args.seed, args.reps)? {
        ok &= p.passed();
        match &p.first_failure {
            None => println!("PASS {} ({} cases)", p.name, p.cases),
            Some(m) => println!("FAIL {} ({}/{} cases): {m}", p.name, p.failures, p.cases),
        }
    }
    Ok(ok)
}

fn cmd_emit_config(args: &EmitArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    output(args.out.as_deref())?.write_all(cfg.to_text().as_bytes())?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invariant(_) => 3,
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Invalid(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a).map(|_| true),
        Command::Bench(a) => cmd_sweep(a, true).map(|_| true),
        Command::Flops(a) => cmd_sweep(a, false).map(|_| true),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::Props(a) => cmd_props(a),
        Command::EmitConfig(a) => cmd_emit_config(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
