//! Single-head attention blocks, positional encodings and windowing.
//!
//! Attention sub-layers are pre-norm residual: `x + Wo·softmax(QKᵀ/√C)·V`
//! where queries and keys/values are layer-normalized before projection.
//! Every block also carries a 2-layer GELU MLP of hidden width `4C`, applied
//! as its own pre-norm residual sub-layer.

mod positional;
mod window;

pub use positional::{rope_2d, rope_angles, sinusoidal_pe, ROPE_BASE};
pub use window::{window_partition, window_unpartition};

use crate::error::{Error, Result};
use crate::feature::TokenSet;
use crate::kernel::{gelu, layer_norm, softmax_rows_in_place, Matrix, Real, Rng};
use crate::macs::{MacKind, MacTally};

/// Layer-norm epsilon used by every block.
pub const LN_EPS: f64 = 1e-6;

/// Hidden width multiplier of block MLPs.
pub const MLP_RATIO: usize = 4;

/// Score entries materialized per query block. Blocks of a few hundred
/// queries amortize the gemm packing of the keys.
const SCORE_BLOCK_ELEMS: usize = 1 << 23;

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T = f64> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Norm<T> {
    pub fn identity(c: usize) -> Self {
        Self {
            gain: vec![T::one(); c],
            bias: vec![T::zero(); c],
        }
    }

    pub fn apply(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        layer_norm(m, &self.gain, &self.bias, T::of(LN_EPS))
    }

    pub fn cast<U: Real>(&self) -> Norm<U> {
        Norm {
            gain: self.gain.iter().map(|&x| U::of(x.as_f64())).collect(),
            bias: self.bias.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

/// Projections and pre-norms of one single-head attention sub-layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<T = f64> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub norm_q: Norm<T>,
    pub norm_kv: Norm<T>,
}

impl<T: Real> AttnParams<T> {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        Self {
            wq: Matrix::init_linear(c, c, rng),
            wk: Matrix::init_linear(c, c, rng),
            wv: Matrix::init_linear(c, c, rng),
            wo: Matrix::init_linear(c, c, rng),
            norm_q: Norm::identity(c),
            norm_kv: Norm::identity(c),
        }
    }

    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    pub fn cast<U: Real>(&self) -> AttnParams<U> {
        AttnParams {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            norm_q: self.norm_q.cast(),
            norm_kv: self.norm_kv.cast(),
        }
    }

    fn check(&self, queries: &TokenSet<T>, kv: &TokenSet<T>) -> Result<()> {
        let c = self.width();
        for w in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if w.shape() != (c, c) {
                return Err(Error::shape(
                    "attention",
                    format!("projection {:?} in a width-{c} block", w.shape()),
                ));
            }
        }
        if queries.c() != c || kv.c() != c {
            return Err(Error::shape(
                "attention",
                format!(
                    "queries have {} channels, keys/values {}, block width {c}",
                    queries.c(),
                    kv.c()
                ),
            ));
        }
        if kv.is_empty() {
            return Err(Error::shape("attention", "no keys/values to attend to"));
        }
        Ok(())
    }
}

/// Two-layer GELU MLP with a pre-norm residual.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T = f64> {
    pub norm: Norm<T>,
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

impl<T: Real> MlpParams<T> {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        let hidden = MLP_RATIO * c;
        let w1 = Matrix::init_linear(c, hidden, rng);
        let b1 = Matrix::<T>::random(1, hidden, 1.0 / (c as f64).sqrt(), rng).into_vec();
        let w2 = Matrix::init_linear(hidden, c, rng);
        let b2 = Matrix::<T>::random(1, c, 1.0 / (hidden as f64).sqrt(), rng).into_vec();
        Self {
            norm: Norm::identity(c),
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn cast<U: Real>(&self) -> MlpParams<U> {
        let v = |x: &[T]| x.iter().map(|&y| U::of(y.as_f64())).collect();
        MlpParams {
            norm: self.norm.cast(),
            w1: self.w1.cast(),
            b1: v(&self.b1),
            w2: self.w2.cast(),
            b2: v(&self.b2),
        }
    }
}

/// Attention sub-layer followed by an MLP sub-layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = f64> {
    pub attn: AttnParams<T>,
    pub mlp: MlpParams<T>,
}

impl<T: Real> BlockParams<T> {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        Self {
            attn: AttnParams::init(c, rng),
            mlp: MlpParams::init(c, rng),
        }
    }

    pub fn cast<U: Real>(&self) -> BlockParams<U> {
        BlockParams {
            attn: self.attn.cast(),
            mlp: self.mlp.cast(),
        }
    }
}

/// Projected queries (pre-scaled by `1/√C`), keys and values.
struct Projected<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
}

fn project<T: Real>(
    queries: &TokenSet<T>,
    kv: &TokenSet<T>,
    p: &AttnParams<T>,
    tally: &mut MacTally,
) -> Result<Projected<T>> {
    p.check(queries, kv)?;
    let c = p.width();
    let qn = p.norm_q.apply(queries.matrix())?;
    let kvn = p.norm_kv.apply(kv.matrix())?;
    tally.norm_elems += ((queries.n() + kv.n()) * c) as u64;
    let scale = T::of(1.0 / (c as f64).sqrt());
    let q = tally.matmul(MacKind::Proj, &qn, &p.wq)?.scale(scale);
    let k = tally.matmul(MacKind::Proj, &kvn, &p.wk)?;
    let v = tally.matmul(MacKind::Proj, &kvn, &p.wv)?;
    Ok(Projected { q, k, v })
}

/// `softmax(QKᵀ)·V`, computed in query blocks so the score matrix never
/// exceeds [`SCORE_BLOCK_ELEMS`] entries.
fn attend<T: Real>(pr: &Projected<T>, kind: MacKind, tally: &mut MacTally) -> Result<Matrix<T>> {
    attend_blocked(pr, kind, tally, SCORE_BLOCK_ELEMS)
}

fn attend_blocked<T: Real>(
    pr: &Projected<T>,
    kind: MacKind,
    tally: &mut MacTally,
    block_elems: usize,
) -> Result<Matrix<T>> {
    let n_q = pr.q.rows();
    let n_kv = pr.k.rows();
    let c = pr.v.cols();
    let mut ctx = Matrix::zeros(n_q, c);
    let block = (block_elems / n_kv.max(1)).clamp(1, n_q.max(1));
    let mut start = 0;
    while start < n_q {
        let end = (start + block).min(n_q);
        let qb = if start == 0 && end == n_q {
            pr.q.clone()
        } else {
            pr.q.slice_rows(start, end)
        };
        let mut scores = tally.matmul_t(kind, &qb, &pr.k)?;
        softmax_rows_in_place(&mut scores);
        tally.softmax_elems += ((end - start) * n_kv) as u64;
        let part = tally.matmul(kind, &scores, &pr.v)?;
        ctx.as_mut_slice()[start * c..end * c].copy_from_slice(part.as_slice());
        start = end;
    }
    Ok(ctx)
}

/// Row-stochastic attention weights `softmax(QKᵀ/√C)`, `n_q × n_kv`.
pub fn attention_weights<T: Real>(
    queries: &TokenSet<T>,
    kv: &TokenSet<T>,
    p: &AttnParams<T>,
) -> Result<Matrix<T>> {
    let mut tally = MacTally::new();
    let pr = project(queries, kv, p, &mut tally)?;
    let mut scores = pr.q.matmul_t(&pr.k)?;
    softmax_rows_in_place(&mut scores);
    Ok(scores)
}

/// Attention context `softmax(QKᵀ/√C)·V`, before the output projection.
pub fn cross_attention_context<T: Real>(
    queries: &TokenSet<T>,
    kv: &TokenSet<T>,
    p: &AttnParams<T>,
) -> Result<Matrix<T>> {
    let mut tally = MacTally::new();
    let pr = project(queries, kv, p, &mut tally)?;
    attend(&pr, MacKind::CrossAttn, &mut tally)
}

/// Pre-norm residual attention sub-layer, booking MACs under `kind`.
pub fn attention_tallied<T: Real>(
    queries: &TokenSet<T>,
    kv: &TokenSet<T>,
    p: &AttnParams<T>,
    kind: MacKind,
    tally: &mut MacTally,
) -> Result<TokenSet<T>> {
    let pr = project(queries, kv, p, tally)?;
    let ctx = attend(&pr, kind, tally)?;
    let out = tally.matmul(MacKind::Proj, &ctx, &p.wo)?;
    let data = queries.matrix().add(&out)?;
    Ok(match queries.grid() {
        Some((gh, gw)) => TokenSet::with_grid(data, gh, gw)?,
        None => TokenSet::new(data),
    })
}

pub fn cross_attention<T: Real>(
    queries: &TokenSet<T>,
    kv: &TokenSet<T>,
    p: &AttnParams<T>,
) -> Result<TokenSet<T>> {
    attention_tallied(queries, kv, p, MacKind::CrossAttn, &mut MacTally::new())
}

pub fn self_attention<T: Real>(tokens: &TokenSet<T>, p: &AttnParams<T>) -> Result<TokenSet<T>> {
    attention_tallied(tokens, tokens, p, MacKind::SelfAttn, &mut MacTally::new())
}

/// `x + W2·gelu(W1·norm(x) + b1) + b2`.
pub fn mlp_tallied<T: Real>(
    tokens: &TokenSet<T>,
    p: &MlpParams<T>,
    tally: &mut MacTally,
) -> Result<TokenSet<T>> {
    if tokens.c() != p.w1.rows() {
        return Err(Error::shape(
            "mlp",
            format!("{} channels into a width-{} MLP", tokens.c(), p.w1.rows()),
        ));
    }
    if tokens.is_empty() {
        return Ok(tokens.clone());
    }
    let xn = p.norm.apply(tokens.matrix())?;
    tally.norm_elems += (tokens.n() * tokens.c()) as u64;
    let hidden = tally
        .matmul(MacKind::Mlp, &xn, &p.w1)?
        .add_row(&p.b1)?
        .map(gelu);
    let out = tally.matmul(MacKind::Mlp, &hidden, &p.w2)?.add_row(&p.b2)?;
    let data = tokens.matrix().add(&out)?;
    Ok(match tokens.grid() {
        Some((gh, gw)) => TokenSet::with_grid(data, gh, gw)?,
        None => TokenSet::new(data),
    })
}

pub fn mlp<T: Real>(tokens: &TokenSet<T>, p: &MlpParams<T>) -> Result<TokenSet<T>> {
    mlp_tallied(tokens, p, &mut MacTally::new())
}

/// Attention sub-layer then MLP sub-layer.
pub fn block_tallied<T: Real>(
    queries: &TokenSet<T>,
    kv: &TokenSet<T>,
    p: &BlockParams<T>,
    kind: MacKind,
    tally: &mut MacTally,
) -> Result<TokenSet<T>> {
    let x = attention_tallied(queries, kv, &p.attn, kind, tally)?;
    mlp_tallied(&x, &p.mlp, tally)
}
