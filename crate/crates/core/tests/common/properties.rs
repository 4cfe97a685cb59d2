//! Structural invariants as proptest properties, driven through an explicit
//! runner so the acceptance binary can count cases.

use std::collections::VecDeque;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use memtrack::attention::{window_partition, window_unpartition};
use memtrack::bench::bench_shape;
use memtrack::fusion::{fuse_macs, fuse_tallied, FusionParams};
use memtrack::kernel::softmax_rows;
use memtrack::losses::{dice_loss, iou_l1_loss, mask_iou, occlusion_bce};
use memtrack::memory::{
    FrameMemory, MemoryBank, ObjectPointer, DEFAULT_FRAME_CAPACITY, DEFAULT_POINTER_CAPACITY,
};
use memtrack::perceiver::{compress, PerceiverConfig, PerceiverParams};
use memtrack::pipeline::{EngineConfig, MemoryMode};
use memtrack::{FeatureMap, MacTally, Matrix, Rng};

use super::random_map;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg.into()))
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

/// Map dims with a window size that tiles them.
fn tiling() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
    (
        1usize..=5,
        1usize..=5,
        1usize..=4,
        1usize..=4,
        1usize..=4,
        any::<u64>(),
    )
        .prop_map(|(nh, nw, wh, ww, c, seed)| (nh * wh, nw * ww, wh, ww, c, seed))
}

pub fn window_round_trip(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&tiling(), |(h, w, wh, ww, c, seed)| {
            let m = random_map(c, h, w, &mut Rng::new(seed));
            let wins = window_partition(&m, wh, ww).unwrap();
            ensure(wins.len() == (h / wh) * (w / ww), "window count")?;
            let back = window_unpartition(&wins, wh, ww, h, w).unwrap();
            ensure(
                back.tokens().as_slice() == m.tokens().as_slice(),
                format!("{h}x{w} / {wh}x{ww}"),
            )
        })
        .map_err(|e| e.to_string())
}

/// Push sequences: (frame-index gap, carries a pointer).
pub fn bank_fifo(cases: u32) -> Result<(), String> {
    let ops = prop::collection::vec((1usize..4, any::<bool>()), 0..60);
    runner(cases)
        .run(&ops, |ops| {
            let (fc, pc) = (DEFAULT_FRAME_CAPACITY, DEFAULT_POINTER_CAPACITY);
            let mut bank = MemoryBank::new(fc, pc).unwrap();
            let (mut frames, mut ptrs) = (VecDeque::new(), VecDeque::new());
            let mut idx = 0;
            for (gap, with_ptr) in ops {
                idx += gap;
                let map = FeatureMap::from_tokens(1, 1, Matrix::filled(1, 2, idx as f64)).unwrap();
                let ptr = with_ptr.then(|| ObjectPointer {
                    frame_index: idx,
                    vector: vec![0.0; 2],
                });
                bank.push(FrameMemory::dense(idx, map), ptr).unwrap();
                frames.push_back(idx);
                if frames.len() > fc {
                    frames.pop_front();
                }
                if with_ptr {
                    ptrs.push_back(idx);
                    if ptrs.len() > pc {
                        ptrs.pop_front();
                    }
                }
                ensure(bank.len() == frames.len(), "frame count")?;
                // A stale index is refused without touching the bank.
                let stale = FeatureMap::from_tokens(1, 1, Matrix::zeros(1, 2)).unwrap();
                ensure(
                    bank.push(FrameMemory::dense(idx, stale), None).is_err(),
                    "stale accepted",
                )?;
            }
            let got: Vec<usize> = bank.frames().map(|f| f.frame_index).collect();
            ensure(frames == got, "frame order")?;
            let got: Vec<usize> = bank.pointers().map(|p| p.frame_index).collect();
            ensure(ptrs == got, "pointer order")
        })
        .map_err(|e| e.to_string())
}

pub fn empty_bank_identity(cases: u32) -> Result<(), String> {
    let s = (1usize..=3, 1usize..=4, 1usize..=4, 1usize..=3, any::<u64>());
    runner(cases)
        .run(&s, |(cq, h, w, depth, seed)| {
            let mut rng = Rng::new(seed);
            let c = 4 * cq;
            let p = FusionParams::<f64>::init(c, depth, &mut rng).unwrap();
            let f16 = random_map(c, h, w, &mut rng);
            let mut tally = MacTally::new();
            let out = fuse_tallied(&f16, &MemoryBank::new(7, 16).unwrap(), &p, &mut tally).unwrap();
            ensure(out == f16, "features changed")?;
            ensure(tally == MacTally::new(), "MACs booked")
        })
        .map_err(|e| e.to_string())
}

pub fn compress_token_count(cases: u32) -> Result<(), String> {
    let s = (
        0usize..=6,
        0usize..=3,
        1usize..=3,
        1usize..=3,
        1usize..=2,
        any::<u64>(),
    )
        .prop_filter("needs a latent", |(ng, side, ..)| ng + side * side > 0);
    runner(cases)
        .run(&s, |(ng, side, fy, fx, cq, seed)| {
            let mut rng = Rng::new(seed);
            let (c, nl) = (4 * cq, side * side);
            let (h, w) = (side.max(1) * fy, side.max(1) * fx);
            let p = PerceiverParams::<f64>::init(c, ng, nl, PerceiverConfig::default(), &mut rng)
                .unwrap();
            let cm = compress(&random_map(c, h, w, &mut rng), &p).unwrap();
            ensure(cm.len() == ng + nl, format!("{} != {ng}+{nl}", cm.len()))?;
            ensure(cm.spatial().grid() == Some((side, side)), "spatial grid")
        })
        .map_err(|e| e.to_string())
}

pub fn softmax_row_stochastic(cases: u32) -> Result<(), String> {
    let s = (1usize..8, 1usize..12, -30.0f64..30.0, any::<u64>());
    runner(cases)
        .run(&s, |(r, c, scale, seed)| {
            let m = Matrix::random(r, c, scale.abs(), &mut Rng::new(seed));
            let p = softmax_rows(&m);
            for i in 0..r {
                let sum: f64 = p.row(i).iter().sum();
                ensure((sum - 1.0).abs() < 1e-12, format!("row sum {sum}"))?;
                ensure(p.row(i).iter().all(|&v| v >= 0.0), "negative weight")?;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn counted_macs_match_model(cases: u32) -> Result<(), String> {
    let s = (
        1usize..=3,
        1usize..=3,
        0usize..=1,
        any::<bool>(),
        any::<u64>(),
    );
    runner(cases)
        .run(&s, |(frames, depth, side, dense, seed)| {
            let cfg = EngineConfig {
                channels: 8,
                height: 2,
                width: 2,
                frame_capacity: frames,
                num_global: 2,
                num_spatial: side,
                fusion_depth: depth,
                mode: if dense {
                    MemoryMode::Dense
                } else {
                    MemoryMode::Compressed
                },
                seed,
                ..EngineConfig::desk()
            };
            let mut rng = Rng::new(seed);
            let p = FusionParams::<f64>::init(8, depth, &mut rng).unwrap();
            let bank = memtrack::bench::synthetic_bank::<f64>(&cfg, &mut rng).unwrap();
            let mut tally = MacTally::new();
            fuse_tallied(&random_map(8, 2, 2, &mut rng), &bank, &p, &mut tally).unwrap();
            ensure(
                tally == fuse_macs(&bench_shape(&cfg), cfg.tokens_per_frame()),
                "MAC mismatch",
            )
        })
        .map_err(|e| e.to_string())
}

pub fn config_text_round_trip(cases: u32) -> Result<(), String> {
    let s = (
        1usize..=16,
        1usize..=8,
        0usize..=4,
        1usize..=9,
        any::<bool>(),
        any::<u64>(),
        0.0f64..5.0,
    );
    runner(cases)
        .run(&s, |(cq, t, side, depth, dense, seed, gamma)| {
            let cfg = EngineConfig {
                channels: 4 * cq,
                height: 12,
                width: 12,
                frame_capacity: t,
                num_global: 1 + t,
                num_spatial: [0, 1, 4, 9, 36][side],
                fusion_depth: depth,
                mode: if dense {
                    MemoryMode::Dense
                } else {
                    MemoryMode::Compressed
                },
                seed,
                focal_gamma: gamma,
                ..EngineConfig::desk()
            };
            let back = EngineConfig::parse(&cfg.to_text()).unwrap();
            ensure(back == cfg, "round trip changed the config")
        })
        .map_err(|e| e.to_string())
}

pub fn losses_bounded(cases: u32) -> Result<(), String> {
    let s = (
        1usize..6,
        1usize..6,
        any::<u64>(),
        -20.0f64..20.0,
        0.0f64..=1.0,
    );
    runner(cases)
        .run(&s, |(r, c, seed, logit, iou)| {
            let mut rng = Rng::new(seed);
            let pred = Matrix::from_fn(r, c, |_, _| rng.range(0.0, 1.0));
            let gt = Matrix::from_fn(r, c, |_, _| (rng.uniform(1.0) > 0.0) as u8 as f64);
            let d = dice_loss(&pred, &gt).unwrap().value;
            ensure((0.0..=1.0).contains(&d), format!("dice {d}"))?;
            let actual = mask_iou(&pred, &gt).unwrap();
            let (l1, _) = iou_l1_loss(iou, actual);
            ensure((0.0..=1.0).contains(&l1), format!("iou l1 {l1}"))?;
            for occ in [false, true] {
                let (b, _) = occlusion_bce(logit, occ);
                ensure(b >= 0.0 && b.is_finite(), format!("bce {b}"))?;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub type Property = fn(u32) -> Result<(), String>;

pub const PROPERTIES: [(&str, Property); 8] = [
    ("window_round_trip", window_round_trip),
    ("bank_fifo", bank_fifo),
    ("empty_bank_identity", empty_bank_identity),
    ("compress_token_count", compress_token_count),
    ("softmax_row_stochastic", softmax_row_stochastic),
    ("counted_macs_match_model", counted_macs_match_model),
    ("config_text_round_trip", config_text_round_trip),
    ("losses_bounded", losses_bounded),
];
