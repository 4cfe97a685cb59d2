use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::fusion::{fuse_macs, fuse_tallied, FuseShape, FusionParams};
use crate::kernel::{Matrix, Real, Rng};
use crate::losses::{
    align_projection, loss_sam2, sigmoid, GroundTruth, LossReport, LossWeights, StudentOutputs,
    TeacherFeatures,
};
use crate::macs::MacTally;
use crate::memory::{memory_encode, FrameMemory, MemoryBank, MemoryEncoder, ObjectPointer};
use crate::perceiver::{compress_tallied, PerceiverParams};

use super::config::{EngineConfig, MemoryMode};
use super::stubs::{decode_mask, encode_image, ImageEncoder, MaskDecoder, Prompt};
use super::video::SyntheticVideo;

/// All weights of one tracker. Dense and compressed engines built from the
/// same seed share every weight; only the bank contents differ.
#[derive(Clone, Debug)]
pub struct Engine<T = f64> {
    config: EngineConfig,
    pub encoder: ImageEncoder<T>,
    pub decoder: MaskDecoder<T>,
    pub fusion: FusionParams<T>,
    pub memory_encoder: MemoryEncoder<T>,
    pub perceiver: PerceiverParams<T>,
}

/// Per-stream mutable state.
#[derive(Clone, Debug)]
pub struct EngineState<T = f64> {
    pub bank: MemoryBank<T>,
    last_frame: Option<usize>,
}

impl<T: Real> EngineState<T> {
    pub fn last_frame(&self) -> Option<usize> {
        self.last_frame
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput<T = f64> {
    pub frame_index: usize,
    pub mask_logits: Matrix<T>,
    pub iou: T,
    pub occlusion_logit: T,
    pub f16: FeatureMap<T>,
    pub f_m: FeatureMap<T>,
    /// Keys/values attended by memory attention this step.
    pub mem_tokens: usize,
    /// Frame memories in the bank before this step's push.
    pub bank_frames: usize,
    pub attended_pointers: usize,
    /// Tokens of the memory stored by this step.
    pub stored_tokens: usize,
    pub fuse_macs: MacTally,
    pub compress_macs: MacTally,
    pub wall_ns: u64,
}

impl<T: Real> Engine<T> {
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut root = Rng::new(config.seed);
        let mut rng_enc = root.split();
        let mut rng_dec = root.split();
        let mut rng_fuse = root.split();
        let mut rng_mem = root.split();
        let mut rng_perc = root.split();
        let mut fusion = FusionParams::init(c, config.fusion_depth, &mut rng_fuse)?;
        fusion.layout = config.layout();
        Ok(Self {
            encoder: ImageEncoder::init(c, &mut rng_enc),
            decoder: MaskDecoder::init(c, &mut rng_dec),
            fusion,
            memory_encoder: MemoryEncoder::init(c, &mut rng_mem),
            perceiver: PerceiverParams::init(
                c,
                config.num_global,
                config.num_spatial,
                config.perceiver(),
                &mut rng_perc,
            )?,
            config,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn new_state(&self) -> Result<EngineState<T>> {
        Ok(EngineState {
            bank: MemoryBank::new(self.config.frame_capacity, self.config.pointer_capacity)?
                .with_pointers_in_attention(self.config.include_pointers),
            last_frame: None,
        })
    }

    /// Shape of memory attention against a bank holding `frames` memories
    /// and `pointers` attended pointers.
    pub fn fuse_shape(&self, frames: usize, pointers: usize) -> FuseShape {
        let c = &self.config;
        FuseShape {
            frames,
            channels: c.channels,
            height: c.height,
            width: c.width,
            mem_tokens_per_frame: c.tokens_per_compressed_frame(),
            pointers,
            depth: c.fusion_depth,
            layout: c.layout(),
        }
    }

    /// Closed-form MACs of one step's memory attention.
    pub fn predicted_fuse_macs(&self, frames: usize, pointers: usize) -> MacTally {
        fuse_macs(
            &self.fuse_shape(frames, pointers),
            self.config.tokens_per_frame(),
        )
    }

    /// Processes frame `frame_index`: encode, fuse with the bank, decode,
    /// encode the memory, compress it in compressed mode, then push.
    pub fn step(
        &self,
        state: &mut EngineState<T>,
        frame_index: usize,
        image: &Matrix<T>,
        prompt: Option<&Prompt>,
    ) -> Result<StepOutput<T>> {
        if let Some(last) = state.last_frame {
            if frame_index <= last {
                return Err(Error::OutOfOrder {
                    got: frame_index,
                    newest: last,
                });
            }
        }
        let expected = self.config.image_dims();
        if image.shape() != expected {
            return Err(Error::shape(
                "step",
                format!("{:?} image, expected {:?}", image.shape(), expected),
            ));
        }
        let start = Instant::now();
        let feats = encode_image(image, &self.encoder)?;
        let mem_tokens = state.bank.token_count();
        let bank_frames = state.bank.len();
        let attended_pointers = state.bank.attended_pointers();
        let mut fuse_tally = MacTally::new();
        let f_m = fuse_tallied(&feats.f16, &state.bank, &self.fusion, &mut fuse_tally)?;
        let decoded = decode_mask(&f_m, &feats.f4, &feats.f8, prompt, &self.decoder)?;
        let probs = decoded.mask_logits.map(|x| T::of(sigmoid(x.as_f64())));
        let dense = memory_encode(&feats.f16, &probs, &self.memory_encoder, frame_index)?;
        let mut compress_tally = MacTally::new();
        let memory = match (self.config.mode, dense.kind) {
            (MemoryMode::Compressed, crate::memory::MemoryKind::Dense(map)) => {
                FrameMemory::compressed(
                    frame_index,
                    compress_tallied(&map, &self.perceiver, &mut compress_tally)?,
                )
            }
            (_, kind) => FrameMemory { frame_index, kind },
        };
        let stored_tokens = memory.token_count();
        let pointer = ObjectPointer {
            frame_index,
            vector: decoded.pointer,
        };
        state.bank.push(memory, Some(pointer))?;
        state.last_frame = Some(frame_index);
        Ok(StepOutput {
            frame_index,
            mask_logits: decoded.mask_logits,
            iou: decoded.iou,
            occlusion_logit: decoded.occlusion_logit,
            f16: feats.f16,
            f_m,
            mem_tokens,
            bank_frames,
            attended_pointers,
            stored_tokens,
            fuse_macs: fuse_tally,
            compress_macs: compress_tally,
            wall_ns: start.elapsed().as_nanos() as u64,
        })
    }
}

/// One line of the per-frame trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub frame: usize,
    pub mode: String,
    pub mem_tokens: usize,
    pub cross_mac: u64,
    pub self_mac: u64,
    pub wall_ns: u64,
}

#[derive(Clone, Debug)]
pub struct VideoRun<T = f64> {
    pub outputs: Vec<StepOutput<T>>,
    pub trace: Vec<TraceRow>,
}

impl<T> VideoRun<T> {
    pub fn total_fuse_macs(&self) -> MacTally {
        let mut t = MacTally::new();
        for o in &self.outputs {
            t += o.fuse_macs;
        }
        t
    }

    pub fn total_wall_ns(&self) -> u64 {
        self.outputs.iter().map(|o| o.wall_ns).sum()
    }
}

/// Runs a fresh stream over `video`, prompting only the first frame.
pub fn run_video<T: Real>(
    engine: &Engine<T>,
    video: &SyntheticVideo,
    prompt: Option<&Prompt>,
) -> Result<VideoRun<T>> {
    let mut state = engine.new_state()?;
    let mode = engine.config().mode.to_string();
    let mut outputs = Vec::with_capacity(video.len());
    let mut trace = Vec::with_capacity(video.len());
    for (t, frame) in video.frames.iter().enumerate() {
        let p = if t == 0 { prompt } else { None };
        let out = engine.step(&mut state, t, &frame.image.cast(), p)?;
        trace.push(TraceRow {
            frame: t,
            mode: mode.clone(),
            mem_tokens: out.mem_tokens,
            cross_mac: out.fuse_macs.cross_attn,
            self_mac: out.fuse_macs.self_attn,
            wall_ns: out.wall_ns,
        });
        outputs.push(out);
    }
    Ok(VideoRun { outputs, trace })
}

pub fn write_trace<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "frame",
            "mode",
            "mem_tokens",
            "cross_mac",
            "self_mac",
            "wall_ns",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Dense-memory engine with twice the channels on a shifted seed.
pub fn teacher_config(student: &EngineConfig) -> EngineConfig {
    EngineConfig {
        channels: 2 * student.channels,
        mode: MemoryMode::Dense,
        seed: student.seed.wrapping_add(1),
        ..student.clone()
    }
}

/// Video-stage loss of `student` against `teacher` on every frame.
pub fn distill_losses(
    student: &Engine,
    teacher: &Engine,
    video: &SyntheticVideo,
    prompt: Option<&Prompt>,
    weights: &LossWeights,
) -> Result<Vec<LossReport>> {
    let (cs, ct) = (student.config().channels, teacher.config().channels);
    let mut rng = Rng::new(teacher.config().seed);
    let f16_projection = (cs != ct).then(|| align_projection(cs, ct, &mut rng));
    let f_m_projection = (cs != ct).then(|| align_projection(cs, ct, &mut rng));
    let s = run_video(student, video, prompt)?;
    let t = run_video(teacher, video, prompt)?;
    s.outputs
        .into_iter()
        .zip(t.outputs)
        .zip(&video.frames)
        .map(|((so, to), frame)| {
            let out = StudentOutputs {
                mask_logits: so.mask_logits,
                iou_pred: so.iou,
                occlusion_logit: so.occlusion_logit,
                f16: so.f16,
                f_m: so.f_m,
            };
            let teacher = TeacherFeatures {
                f16: to.f16,
                f_m: to.f_m,
                f16_projection: f16_projection.clone(),
                f_m_projection: f_m_projection.clone(),
            };
            let gt = GroundTruth {
                mask: frame.mask.clone(),
                occluded: frame.occluded,
            };
            loss_sam2(&out, &gt, &teacher, weights, student.config().focal())
        })
        .collect()
}
