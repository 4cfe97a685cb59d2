//! Seeded randomized checks of the structural invariants, for running
//! outside the test harness.

use std::collections::VecDeque;

use crate::attention::{
    attention_weights, rope_2d, window_partition, window_unpartition, AttnParams,
};
use crate::error::Result;
use crate::feature::{FeatureMap, TokenSet};
use crate::fusion::{fuse_tallied, FusionParams};
use crate::kernel::{Matrix, Rng};
use crate::macs::MacTally;
use crate::memory::{
    FrameMemory, MemoryBank, ObjectPointer, DEFAULT_FRAME_CAPACITY, DEFAULT_POINTER_CAPACITY,
};
use crate::perceiver::{compress, PerceiverConfig, PerceiverParams};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Description of the first failing case.
    pub first_failure: Option<String>,
}

impl PropertyOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

type Check = fn(&mut Rng) -> Result<std::result::Result<(), String>>;

fn divisor(n: usize, rng: &mut Rng) -> usize {
    let ds: Vec<usize> = (1..=n).filter(|d| n.is_multiple_of(*d)).collect();
    ds[rng.index(ds.len())]
}

fn window_round_trip(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    let (h, w, c) = (1 + rng.index(12), 1 + rng.index(12), 1 + rng.index(5));
    let (wh, ww) = (divisor(h, rng), divisor(w, rng));
    let m = FeatureMap::<f64>::from_tokens(h, w, Matrix::random(h * w, c, 1.0, rng))?;
    let back = window_unpartition(&window_partition(&m, wh, ww)?, wh, ww, h, w)?;
    Ok(if back == m {
        Ok(())
    } else {
        Err(format!("{h}x{w}x{c} with {wh}x{ww} windows"))
    })
}

fn bank_fifo(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    let (fc, pc) = (DEFAULT_FRAME_CAPACITY, DEFAULT_POINTER_CAPACITY);
    let mut bank = MemoryBank::new(fc, pc)?;
    let (mut frames, mut pointers) = (VecDeque::new(), VecDeque::new());
    let mut idx = 0;
    for _ in 0..1 + rng.index(40) {
        idx += 1 + rng.index(3);
        let map = FeatureMap::from_tokens(1, 1, Matrix::filled(1, 2, idx as f64))?;
        let ptr = (rng.index(3) > 0).then(|| ObjectPointer {
            frame_index: idx,
            vector: vec![idx as f64; 2],
        });
        bank.push(FrameMemory::dense(idx, map), ptr.clone())?;
        frames.push_back(idx);
        if frames.len() > fc {
            frames.pop_front();
        }
        if ptr.is_some() {
            pointers.push_back(idx);
            if pointers.len() > pc {
                pointers.pop_front();
            }
        }
    }
    let got_f: Vec<usize> = bank.frames().map(|f| f.frame_index).collect();
    let got_p: Vec<usize> = bank.pointers().map(|p| p.frame_index).collect();
    Ok(if frames == got_f && pointers == got_p {
        Ok(())
    } else {
        Err(format!(
            "frames {got_f:?} vs {frames:?}, pointers {got_p:?} vs {pointers:?}"
        ))
    })
}

fn empty_bank_identity(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    let c = 4 * (1 + rng.index(3));
    let (h, w) = (1 + rng.index(5), 1 + rng.index(5));
    let p = FusionParams::<f64>::init(c, 1 + rng.index(3), rng)?;
    let f16 = FeatureMap::from_tokens(h, w, Matrix::random(h * w, c, 1.0, rng))?;
    let mut tally = MacTally::new();
    let out = fuse_tallied(
        &f16,
        &MemoryBank::new(1 + rng.index(7), rng.index(16))?,
        &p,
        &mut tally,
    )?;
    Ok(if out == f16 && tally == MacTally::new() {
        Ok(())
    } else {
        Err(format!("{c}x{h}x{w}"))
    })
}

fn compress_count(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    let c = 4 * (1 + rng.index(2));
    let side = rng.index(4);
    let (h, w) = (
        side.max(1) * (1 + rng.index(3)),
        side.max(1) * (1 + rng.index(3)),
    );
    let ng = rng.index(6);
    let nl = side * side;
    if ng + nl == 0 {
        return Ok(Ok(()));
    }
    let cfg = PerceiverConfig {
        depth: 1 + rng.index(2),
        ..PerceiverConfig::default()
    };
    let p = PerceiverParams::<f64>::init(c, ng, nl, cfg, rng)?;
    let m = FeatureMap::from_tokens(h, w, Matrix::random(h * w, c, 1.0, rng))?;
    let got = compress(&m, &p)?.len();
    Ok(if got == ng + nl {
        Ok(())
    } else {
        Err(format!("Ng={ng} Nl={nl} on {h}x{w}: {got} tokens"))
    })
}

fn attention_row_stochastic(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    let c = 1 + rng.index(8);
    let (nq, nk) = (1 + rng.index(9), 1 + rng.index(9));
    let p = AttnParams::<f64>::init(c, rng);
    let q = TokenSet::new(Matrix::random(nq, c, 3.0, rng));
    let kv = TokenSet::new(Matrix::random(nk, c, 3.0, rng));
    let a = attention_weights(&q, &kv, &p)?;
    for i in 0..nq {
        let s: f64 = a.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-12 || a.row(i).iter().any(|&v| v < 0.0) {
            return Ok(Err(format!("row {i} of {nq}x{nk} sums to {s}")));
        }
    }
    Ok(Ok(()))
}

fn rope_norm(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    let c = 4 * (1 + rng.index(4));
    let (gh, gw) = (1 + rng.index(6), 1 + rng.index(6));
    let t = TokenSet::<f64>::with_grid(Matrix::random(gh * gw, c, 1.0, rng), gh, gw)?;
    let r = rope_2d(&t)?;
    for p in 0..t.n() {
        let n0: f64 = t.matrix().row(p).iter().map(|v| v * v).sum();
        let n1: f64 = r.matrix().row(p).iter().map(|v| v * v).sum();
        if (n0 - n1).abs() > 1e-12 * n0.max(1.0) {
            return Ok(Err(format!("token {p} of {gh}x{gw}x{c}: {n0} -> {n1}")));
        }
    }
    Ok(Ok(()))
}

const CHECKS: [(&str, Check); 6] = [
    ("window_round_trip", window_round_trip),
    ("bank_fifo", bank_fifo),
    ("empty_bank_identity", empty_bank_identity),
    ("compress_token_count", compress_count),
    ("attention_row_stochastic", attention_row_stochastic),
    ("rope_preserves_norm", rope_norm),
];

/// Runs each invariant on `cases` seeded random inputs.
pub fn run_properties(seed: u64, cases: usize) -> Result<Vec<PropertyOutcome>> {
    let mut root = Rng::new(seed);
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let mut rng = root.split();
            let mut out = PropertyOutcome {
                name,
                cases,
                failures: 0,
                first_failure: None,
            };
            for _ in 0..cases {
                if let Err(msg) = check(&mut rng)? {
                    out.failures += 1;
                    out.first_failure.get_or_insert(msg);
                }
            }
            Ok(out)
        })
        .collect()
}
