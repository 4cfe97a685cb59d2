//! Memory attention: current-frame features attend to the memory bank.
//!
//! The frame's `HW` stride-16 tokens are the queries. Each block runs
//! self-attention over the queries, cross-attention into the concatenated
//! bank, then an MLP. An empty bank leaves the features untouched.
//!
//! [`fuse_flops`] is the closed-form MAC model of the same computation. One
//! MAC is one multiply-accumulate: `QKᵀ` and `attention·V` each cost
//! `n_q·n_kv·C` and a projection costs `n·C²`.

use num_integer::Integer;

use crate::attention::{
    attention_tallied, mlp_tallied, sinusoidal_pe, AttnParams, MlpParams, MLP_RATIO,
};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::kernel::{Real, Rng};
use crate::macs::{MacKind, MacTally};
use crate::memory::MemoryBank;

/// Which sub-layers each block runs. The MLP always runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub self_attention: bool,
    pub cross_attention: bool,
}

impl Default for BlockLayout {
    fn default() -> Self {
        Self {
            self_attention: true,
            cross_attention: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionBlock<T = f64> {
    pub self_attn: AttnParams<T>,
    pub cross_attn: AttnParams<T>,
    pub mlp: MlpParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T = f64> {
    pub blocks: Vec<FusionBlock<T>>,
    pub layout: BlockLayout,
    /// Add a sinusoidal table to the queries before the first block.
    pub query_positional: bool,
}

impl<T: Real> FusionParams<T> {
    pub fn init(c: usize, depth: usize, rng: &mut Rng) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config(
                "memory attention depth must be at least 1".into(),
            ));
        }
        let blocks = (0..depth)
            .map(|_| FusionBlock {
                self_attn: AttnParams::init(c, rng),
                cross_attn: AttnParams::init(c, rng),
                mlp: MlpParams::init(c, rng),
            })
            .collect();
        Ok(Self {
            blocks,
            layout: BlockLayout::default(),
            query_positional: true,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn channels(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.self_attn.width())
    }

    pub fn cast<U: Real>(&self) -> FusionParams<U> {
        FusionParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| FusionBlock {
                    self_attn: b.self_attn.cast(),
                    cross_attn: b.cross_attn.cast(),
                    mlp: b.mlp.cast(),
                })
                .collect(),
            layout: self.layout,
            query_positional: self.query_positional,
        }
    }
}

pub fn fuse_tallied<T: Real>(
    f16: &FeatureMap<T>,
    bank: &MemoryBank<T>,
    p: &FusionParams<T>,
    tally: &mut MacTally,
) -> Result<FeatureMap<T>> {
    let (c, h, w) = f16.dims();
    if c != p.channels() {
        return Err(Error::shape(
            "fuse",
            format!("{c}-channel features into a width-{} fusion", p.channels()),
        ));
    }
    let Some(memory) = bank.concat()? else {
        return Ok(f16.clone());
    };
    let mut x = if p.query_positional {
        f16.add(&sinusoidal_pe(h, w, c)?)?.to_token_set()
    } else {
        f16.to_token_set()
    };
    for block in &p.blocks {
        if p.layout.self_attention {
            x = attention_tallied(&x, &x, &block.self_attn, MacKind::SelfAttn, tally)?;
        }
        if p.layout.cross_attention {
            x = attention_tallied(&x, &memory, &block.cross_attn, MacKind::CrossAttn, tally)?;
        }
        x = mlp_tallied(&x, &block.mlp, tally)?;
    }
    FeatureMap::from_tokens(h, w, x.into_matrix())
}

/// `F_M = A(F16, M_1..M_T)`.
pub fn fuse<T: Real>(
    f16: &FeatureMap<T>,
    bank: &MemoryBank<T>,
    p: &FusionParams<T>,
) -> Result<FeatureMap<T>> {
    fuse_tallied(f16, bank, p, &mut MacTally::new())
}

/// Shape inputs of the MAC model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FuseShape {
    /// Frame memories in the bank.
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Tokens per compressed frame memory, `Ng + Nl`.
    pub mem_tokens_per_frame: usize,
    /// Pointer tokens appended to the keys/values.
    pub pointers: usize,
    pub depth: usize,
    pub layout: BlockLayout,
}

impl FuseShape {
    pub fn hw(&self) -> usize {
        self.height * self.width
    }
}

/// Closed-form MACs of one [`fuse`] call when every frame contributes
/// `tokens_per_frame` keys.
pub fn fuse_macs(shape: &FuseShape, tokens_per_frame: usize) -> MacTally {
    let n_kv = (shape.frames * tokens_per_frame + shape.pointers) as u64;
    let mut t = MacTally::new();
    if n_kv == 0 {
        return t;
    }
    let (n, c, d) = (shape.hw() as u64, shape.channels as u64, shape.depth as u64);
    if shape.layout.self_attention {
        t.self_attn += d * 2 * n * n * c;
        t.proj += d * 4 * n * c * c;
        t.softmax_elems += d * n * n;
        t.norm_elems += d * 2 * n * c;
    }
    if shape.layout.cross_attention {
        t.cross_attn += d * 2 * n * n_kv * c;
        t.proj += d * (2 * n * c * c + 2 * n_kv * c * c);
        t.softmax_elems += d * n * n_kv;
        t.norm_elems += d * (n + n_kv) * c;
    }
    t.mlp += d * 2 * n * c * (MLP_RATIO as u64 * c);
    t.norm_elems += d * n * c;
    t
}

/// Reduced fraction `num/den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    /// `None` when `den` is zero.
    pub fn new(num: u64, den: u64) -> Option<Self> {
        if den == 0 {
            return None;
        }
        let g = num.gcd(&den);
        Some(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Dense versus compressed memory-attention cost for one shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub shape: FuseShape,
    /// Every frame contributes `HW` tokens.
    pub dense: MacTally,
    /// Every frame contributes `mem_tokens_per_frame` tokens.
    pub compressed: MacTally,
    /// `cross_mac_dense / cross_mac_compressed`.
    pub ratio: Option<Ratio>,
}

impl ComplexityReport {
    pub fn cross_mac_dense(&self) -> u64 {
        self.dense.cross_attn
    }

    pub fn cross_mac_compressed(&self) -> u64 {
        self.compressed.cross_attn
    }

    /// Self-attention MACs; identical in both modes.
    pub fn self_mac(&self) -> u64 {
        self.compressed.self_attn
    }

    pub fn proj_mac_dense(&self) -> u64 {
        self.dense.proj
    }

    pub fn proj_mac_compressed(&self) -> u64 {
        self.compressed.proj
    }

    pub fn mlp_mac(&self) -> u64 {
        self.compressed.mlp
    }
}

pub fn fuse_flops(shape: &FuseShape) -> ComplexityReport {
    let dense = fuse_macs(shape, shape.hw());
    let compressed = fuse_macs(shape, shape.mem_tokens_per_frame);
    ComplexityReport {
        shape: *shape,
        dense,
        compressed,
        ratio: Ratio::new(dense.cross_attn, compressed.cross_attn),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Matrix;
    use crate::memory::FrameMemory;

    fn full_shape() -> FuseShape {
        FuseShape {
            frames: 7,
            channels: 64,
            height: 64,
            width: 64,
            mem_tokens_per_frame: 512,
            pointers: 0,
            depth: 2,
            layout: BlockLayout::default(),
        }
    }

    #[test]
    fn eightfold_cross_attention_reduction() {
        let r = fuse_flops(&full_shape());
        assert_eq!(r.ratio, Some(Ratio { num: 8, den: 1 }));
        assert_eq!(r.cross_mac_dense(), 8 * r.cross_mac_compressed());
    }

    #[test]
    fn single_frame_score_pass() {
        let shape = FuseShape {
            frames: 1,
            mem_tokens_per_frame: 64 * 64,
            depth: 1,
            ..full_shape()
        };
        let r = fuse_flops(&shape);
        // QKᵀ and attention·V each cost C·(HW)².
        assert_eq!(r.cross_mac_dense(), 2 * 64 * 4096 * 4096);
        assert_eq!(r.ratio, Some(Ratio { num: 1, den: 1 }));
    }

    #[test]
    fn empty_bank_is_identity() {
        let mut rng = Rng::new(1);
        let p = FusionParams::<f64>::init(8, 2, &mut rng).unwrap();
        let f16 = FeatureMap::from_tokens(2, 2, Matrix::random(4, 8, 1.0, &mut rng)).unwrap();
        let bank = MemoryBank::new(7, 16).unwrap();
        let mut tally = MacTally::new();
        let out = fuse_tallied(&f16, &bank, &p, &mut tally).unwrap();
        assert_eq!(out, f16);
        assert_eq!(tally, MacTally::new());
    }

    #[test]
    fn counted_matches_model_with_pointers_and_layouts() {
        let mut rng = Rng::new(2);
        let c = 8;
        let f16 = FeatureMap::from_tokens(3, 4, Matrix::random(12, c, 1.0, &mut rng)).unwrap();
        let mut bank = MemoryBank::new(3, 2).unwrap();
        for i in 0..5 {
            let m = FeatureMap::from_tokens(3, 4, Matrix::random(12, c, 1.0, &mut rng)).unwrap();
            let ptr = crate::memory::ObjectPointer {
                frame_index: i,
                vector: vec![0.5; c],
            };
            bank.push(FrameMemory::dense(i, m), Some(ptr)).unwrap();
        }
        for layout in [
            BlockLayout::default(),
            BlockLayout {
                self_attention: false,
                cross_attention: true,
            },
            BlockLayout {
                self_attention: true,
                cross_attention: false,
            },
        ] {
            let mut p = FusionParams::<f64>::init(c, 3, &mut rng).unwrap();
            p.layout = layout;
            let mut tally = MacTally::new();
            let out = fuse_tallied(&f16, &bank, &p, &mut tally).unwrap();
            assert_eq!(out.dims(), f16.dims());
            let shape = FuseShape {
                frames: 3,
                channels: c,
                height: 3,
                width: 4,
                mem_tokens_per_frame: 12,
                pointers: 2,
                depth: 3,
                layout,
            };
            assert_eq!(tally, fuse_macs(&shape, 12), "{layout:?}");
        }
    }

    #[test]
    fn ratio_reduces() {
        assert_eq!(Ratio::new(28, 21), Some(Ratio { num: 4, den: 3 }));
        assert_eq!(Ratio::new(3, 0), None);
    }
}
