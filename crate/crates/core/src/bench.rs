//! Complexity sweeps: closed-form MACs, counted MACs and wall-clock timing
//! of memory attention against synthetic banks.

use std::fmt;
use std::hint::black_box;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_tallied, AttnParams};
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, TokenSet};
use crate::fusion::{fuse_macs, fuse_tallied, FuseShape, FusionParams, Ratio};
use crate::kernel::{Matrix, Real, Rng};
use crate::macs::{MacKind, MacTally};
use crate::memory::{FrameMemory, MemoryBank};
use crate::perceiver::CompressedMemory;
use crate::pipeline::{EngineConfig, MemoryMode};

pub const MIN_WARMUP: usize = 3;
pub const MIN_REPS: usize = 10;

/// Largest relative gap between self- and cross-attention MACs that still
/// counts as balanced.
pub const DESIGN_RULE_TOLERANCE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Self::F32),
            "64" | "f64" => Ok(Self::F64),
            _ => Err(Error::Config(format!(
                "unknown precision '{s}' (expected 32 or 64)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchResult {
    pub reps: usize,
    /// Measured repetitions in run order, warmup excluded.
    pub samples_ns: Vec<u64>,
    pub median_ns: u64,
    /// Median absolute deviation from the median.
    pub mad_ns: u64,
}

fn median(sorted: &[u64]) -> u64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2
    }
}

impl BenchResult {
    pub fn from_samples(samples_ns: Vec<u64>) -> Result<Self> {
        if samples_ns.is_empty() {
            return Err(Error::Invalid("no timing samples".into()));
        }
        let mut sorted = samples_ns.clone();
        sorted.sort_unstable();
        let med = median(&sorted);
        let mut dev: Vec<u64> = sorted.iter().map(|&s| s.abs_diff(med)).collect();
        dev.sort_unstable();
        Ok(Self {
            reps: samples_ns.len(),
            median_ns: med,
            mad_ns: median(&dev),
            samples_ns,
        })
    }
}

/// Times `f` on the calling thread after `warmup` discarded runs.
pub fn measure(
    warmup: usize,
    reps: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<BenchResult> {
    if warmup < MIN_WARMUP || reps < MIN_REPS {
        return Err(Error::Config(format!(
            "timing needs at least {MIN_WARMUP} warmup and {MIN_REPS} measured reps, got {warmup} and {reps}"
        )));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_nanos() as u64);
    }
    BenchResult::from_samples(samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Frame memories in the bank.
    Frames,
    /// `Ng + Nl` per compressed frame.
    Latents,
    /// Memory-attention blocks.
    Depth,
    /// Dense versus compressed memory.
    Mode,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frames" | "T" | "t" => Ok(Self::Frames),
            "latents" => Ok(Self::Latents),
            "depth" => Ok(Self::Depth),
            "mode" => Ok(Self::Mode),
            _ => Err(Error::Config(format!(
                "unknown axis '{s}' (expected frames, latents, depth or mode)"
            ))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Frames => "frames",
            Self::Latents => "latents",
            Self::Depth => "depth",
            Self::Mode => "mode",
        })
    }
}

/// Applies one axis value to `base`. A latent count keeps the base spatial
/// count when it fits and assigns the rest to global latents.
pub fn apply_axis(base: &EngineConfig, axis: Axis, value: &str) -> Result<EngineConfig> {
    let mut cfg = base.clone();
    let count = || -> Result<usize> {
        match value.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Config(format!(
                "{axis} value must be a positive integer, got '{value}'"
            ))),
        }
    };
    match axis {
        Axis::Frames => cfg.frame_capacity = count()?,
        Axis::Depth => cfg.fusion_depth = count()?,
        Axis::Latents => {
            let v = count()?;
            cfg.num_spatial = if v >= base.num_spatial {
                base.num_spatial
            } else {
                0
            };
            cfg.num_global = v - cfg.num_spatial;
        }
        Axis::Mode => cfg.mode = value.parse()?,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Memory-attention shape of a full bank without pointers.
pub fn bench_shape(cfg: &EngineConfig) -> FuseShape {
    FuseShape {
        frames: cfg.frame_capacity,
        channels: cfg.channels,
        height: cfg.height,
        width: cfg.width,
        mem_tokens_per_frame: cfg.tokens_per_compressed_frame(),
        pointers: 0,
        depth: cfg.fusion_depth,
        layout: cfg.layout(),
    }
}

/// Full bank of seeded random memories, no pointers.
pub fn synthetic_bank<T: Real>(cfg: &EngineConfig, rng: &mut Rng) -> Result<MemoryBank<T>> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut bank = MemoryBank::new(cfg.frame_capacity, 0)?.with_pointers_in_attention(false);
    for t in 0..cfg.frame_capacity {
        let mem = match cfg.mode {
            MemoryMode::Dense => FrameMemory::dense(
                t,
                FeatureMap::from_tokens(h, w, Matrix::random(h * w, c, 1.0, rng))?,
            ),
            MemoryMode::Compressed => {
                let side = (cfg.num_spatial as f64).sqrt().round() as usize;
                let global = TokenSet::new(Matrix::random(cfg.num_global, c, 1.0, rng));
                let spatial =
                    TokenSet::with_grid(Matrix::random(cfg.num_spatial, c, 1.0, rng), side, side)?;
                FrameMemory::compressed(t, CompressedMemory::new(global, spatial, (h, w))?)
            }
        };
        bank.push(mem, None)?;
    }
    Ok(bank)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timing {
    pub warmup: usize,
    pub reps: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            warmup: MIN_WARMUP,
            reps: MIN_REPS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepOptions {
    /// Run memory attention once with counting and compare to the model.
    pub count: bool,
    pub timing: Option<Timing>,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub axis: Axis,
    pub value: String,
    pub config: EngineConfig,
    /// Closed-form MACs in the point's mode.
    pub model: MacTally,
    /// Dense over compressed cross-attention MACs at this shape.
    pub ratio: Option<Ratio>,
    pub counted: Option<MacTally>,
    pub bench: Option<BenchResult>,
}

fn run_point<T: Real>(
    cfg: &EngineConfig,
    opts: &SweepOptions,
) -> Result<(Option<MacTally>, Option<BenchResult>)> {
    if !opts.count && opts.timing.is_none() {
        return Ok((None, None));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut params = FusionParams::<T>::init(cfg.channels, cfg.fusion_depth, &mut rng.split())?;
    params.layout = cfg.layout();
    let bank = synthetic_bank::<T>(cfg, &mut rng.split())?;
    let hw = cfg.hw();
    let f16 = FeatureMap::from_tokens(
        cfg.height,
        cfg.width,
        Matrix::random(hw, cfg.channels, 1.0, &mut rng.split()),
    )?;
    let counted = if opts.count {
        let mut tally = MacTally::new();
        fuse_tallied(&f16, &bank, &params, &mut tally)?;
        Some(tally)
    } else {
        None
    };
    let bench = match opts.timing {
        Some(t) => Some(measure(t.warmup, t.reps, || {
            black_box(fuse_tallied(&f16, &bank, &params, &mut MacTally::new())?);
            Ok(())
        })?),
        None => None,
    };
    Ok((counted, bench))
}

/// Evaluates every `values` entry of `axis` on top of `base`. Counted MACs
/// that disagree with the model fail with [`Error::Invariant`].
pub fn sweep(
    axis: Axis,
    values: &[&str],
    base: &EngineConfig,
    opts: &SweepOptions,
) -> Result<Vec<SweepPoint>> {
    let configs: Vec<EngineConfig> = values
        .iter()
        .map(|v| apply_axis(base, axis, v))
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(values.len());
    for (cfg, value) in configs.into_iter().zip(values) {
        let shape = bench_shape(&cfg);
        let model = fuse_macs(&shape, cfg.tokens_per_frame());
        let dense = fuse_macs(&shape, shape.hw());
        let compressed = fuse_macs(&shape, shape.mem_tokens_per_frame);
        let (counted, bench) = match opts.precision {
            Precision::F32 => run_point::<f32>(&cfg, opts)?,
            Precision::F64 => run_point::<f64>(&cfg, opts)?,
        };
        if let Some(c) = counted {
            if c != model {
                return Err(Error::Invariant(format!(
                    "{axis}={value}: counted MACs {c:?} differ from model {model:?}"
                )));
            }
        }
        points.push(SweepPoint {
            axis,
            value: value.to_string(),
            ratio: Ratio::new(dense.cross_attn, compressed.cross_attn),
            config: cfg,
            model,
            counted,
            bench,
        });
    }
    Ok(points)
}

/// Times one residual cross-attention sub-layer of `n_q` queries over
/// `n_kv` keys, both random.
pub fn time_cross_attention(
    c: usize,
    n_q: usize,
    n_kv: usize,
    precision: Precision,
    timing: Timing,
    seed: u64,
) -> Result<BenchResult> {
    fn go<T: Real>(
        c: usize,
        n_q: usize,
        n_kv: usize,
        timing: Timing,
        seed: u64,
    ) -> Result<BenchResult> {
        let mut rng = Rng::new(seed);
        let p = AttnParams::<T>::init(c, &mut rng);
        let q = TokenSet::new(Matrix::random(n_q, c, 1.0, &mut rng));
        let kv = TokenSet::new(Matrix::random(n_kv, c, 1.0, &mut rng));
        measure(timing.warmup, timing.reps, || {
            black_box(attention_tallied(
                &q,
                &kv,
                &p,
                MacKind::CrossAttn,
                &mut MacTally::new(),
            )?);
            Ok(())
        })
    }
    match precision {
        Precision::F32 => go::<f32>(c, n_q, n_kv, timing, seed),
        Precision::F64 => go::<f64>(c, n_q, n_kv, timing, seed),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DesignRule {
    /// `HW / (Ng + Nl)`.
    pub compression: Ratio,
    pub frames: usize,
    pub self_mac: u64,
    /// Compressed-mode cross-attention MACs of a full bank, no pointers.
    pub cross_mac: u64,
    /// `self_mac / cross_mac`.
    pub self_over_cross: Option<Ratio>,
}

impl DesignRule {
    pub fn holds_exactly(&self) -> bool {
        self.compression.den == 1 && self.compression.num == self.frames as u64
    }

    /// `|self − cross| / max(self, cross)`.
    pub fn balance_gap(&self) -> f64 {
        let (s, c) = (self.self_mac as f64, self.cross_mac as f64);
        let m = s.max(c);
        if m == 0.0 {
            0.0
        } else {
            (s - c).abs() / m
        }
    }

    pub fn balanced(&self) -> bool {
        self.balance_gap() <= DESIGN_RULE_TOLERANCE
    }
}

pub fn verify_design_rule(cfg: &EngineConfig) -> Result<DesignRule> {
    let latents = cfg.tokens_per_compressed_frame();
    let compression = Ratio::new(cfg.hw() as u64, latents as u64)
        .ok_or_else(|| Error::Config("no latents".into()))?;
    let mut shape = bench_shape(cfg);
    shape.layout.self_attention = true;
    shape.layout.cross_attention = true;
    let t = fuse_macs(&shape, latents);
    Ok(DesignRule {
        compression,
        frames: cfg.frame_capacity,
        self_mac: t.self_attn,
        cross_mac: t.cross_attn,
        self_over_cross: Ratio::new(t.self_attn, t.cross_attn),
    })
}

/// One CSV row of a sweep report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub axis: String,
    pub value: String,
    pub mode: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "Ng")]
    pub ng: usize,
    #[serde(rename = "Nl")]
    pub nl: usize,
    pub depth: usize,
    pub cross_mac: u64,
    pub self_mac: u64,
    pub proj_mac: u64,
    pub mlp_mac: u64,
    pub ratio_num: Option<u64>,
    pub ratio_den: Option<u64>,
    pub median_ns: Option<u64>,
    pub mad_ns: Option<u64>,
    pub reps: Option<usize>,
}

pub const REPORT_COLUMNS: [&str; 19] = [
    "axis",
    "value",
    "mode",
    "T",
    "C",
    "H",
    "W",
    "Ng",
    "Nl",
    "depth",
    "cross_mac",
    "self_mac",
    "proj_mac",
    "mlp_mac",
    "ratio_num",
    "ratio_den",
    "median_ns",
    "mad_ns",
    "reps",
];

impl From<&SweepPoint> for ReportRow {
    fn from(p: &SweepPoint) -> Self {
        let c = &p.config;
        Self {
            axis: p.axis.to_string(),
            value: p.value.clone(),
            mode: c.mode.to_string(),
            t: c.frame_capacity,
            c: c.channels,
            h: c.height,
            w: c.width,
            ng: c.num_global,
            nl: c.num_spatial,
            depth: c.fusion_depth,
            cross_mac: p.model.cross_attn,
            self_mac: p.model.self_attn,
            proj_mac: p.model.proj,
            mlp_mac: p.model.mlp,
            ratio_num: p.ratio.map(|r| r.num),
            ratio_den: p.ratio.map(|r| r.den),
            median_ns: p.bench.as_ref().map(|b| b.median_ns),
            mad_ns: p.bench.as_ref().map(|b| b.mad_ns),
            reps: p.bench.as_ref().map(|b| b.reps),
        }
    }
}

pub fn write_report<W: Write>(points: &[SweepPoint], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for p in points {
        w.serialize(ReportRow::from(p))?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_report(points: &[SweepPoint], path: &Path) -> Result<()> {
    write_report(points, std::fs::File::create(path)?)
}

pub fn read_report<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != REPORT_COLUMNS {
        return Err(Error::Invalid(format!(
            "unexpected report header {header:?}"
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
