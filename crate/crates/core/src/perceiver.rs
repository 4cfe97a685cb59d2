//! Latent-query compression of a dense frame memory.
//!
//! Two paths share one block stack by default:
//!
//! * the **global** path lets `Ng` learned latents cross-attend over every
//!   position of the memory map (plus a sinusoidal table), then self-attend;
//! * the **spatial** path partitions the map into `Nl` non-overlapping
//!   windows, lets latent `i` cross-attend only to window `i`, self-attends
//!   across all `Nl` latents, and finally applies the output positional
//!   encoding on the `√Nl×√Nl` latent grid.
//!
//! Each path runs `depth` rounds of cross-attention then self-attention,
//! carrying the latents forward. The compressed memory is the concatenation
//! of both outputs, `Ng + Nl` tokens regardless of the map size.

use crate::attention::{
    block_tallied, cross_attention_context, rope_2d, sinusoidal_pe, window_partition,
    window_unpartition, BlockParams, MLP_RATIO,
};
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, TokenSet};
use crate::kernel::{Matrix, Real, Rng};
use crate::macs::{MacKind, MacTally};

/// How the spatial path encodes position on its output grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputPosition {
    /// 2D rotary rotation of the latent grid tokens.
    Rope,
    /// Additive sinusoidal table over the latent grid.
    Additive,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PerceiverConfig {
    /// Rounds of cross- then self-attention.
    pub depth: usize,
    /// Self-attention among latents after each cross-attention.
    pub self_attention: bool,
    /// One block stack for both paths.
    pub share_params: bool,
    /// Add the sinusoidal table to the map before global cross-attention.
    pub global_positional: bool,
    pub spatial_position: OutputPosition,
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            self_attention: true,
            share_params: true,
            global_positional: true,
            spatial_position: OutputPosition::Rope,
        }
    }
}

/// One round: latents cross-attend to memory, then self-attend.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceiverLayer<T = f64> {
    pub cross: BlockParams<T>,
    pub latent_self: BlockParams<T>,
}

impl<T: Real> PerceiverLayer<T> {
    fn init(c: usize, rng: &mut Rng) -> Self {
        Self {
            cross: BlockParams::init(c, rng),
            latent_self: BlockParams::init(c, rng),
        }
    }

    fn cast<U: Real>(&self) -> PerceiverLayer<U> {
        PerceiverLayer {
            cross: self.cross.cast(),
            latent_self: self.latent_self.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceiverParams<T = f64> {
    /// `Ng×C` global latents.
    pub global_latents: TokenSet<T>,
    /// `Nl×C` spatial latents on a `√Nl×√Nl` grid.
    pub spatial_latents: TokenSet<T>,
    pub layers: Vec<PerceiverLayer<T>>,
    /// Separate stack for the spatial path when parameters are unshared.
    pub spatial_layers: Option<Vec<PerceiverLayer<T>>>,
    pub config: PerceiverConfig,
}

fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

impl<T: Real> PerceiverParams<T> {
    pub fn init(
        channels: usize,
        num_global: usize,
        num_spatial: usize,
        config: PerceiverConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_global + num_spatial == 0 {
            return Err(Error::Config("perceiver needs at least one latent".into()));
        }
        if config.depth == 0 {
            return Err(Error::Config("perceiver depth must be at least 1".into()));
        }
        let side = square_side(num_spatial).ok_or_else(|| {
            Error::Config(format!(
                "spatial latent count {num_spatial} is not a perfect square"
            ))
        })?;
        let global_latents = TokenSet::new(Matrix::random(num_global, channels, 1.0, rng));
        let spatial_latents =
            TokenSet::with_grid(Matrix::random(num_spatial, channels, 1.0, rng), side, side)?;
        let layers = (0..config.depth)
            .map(|_| PerceiverLayer::init(channels, rng))
            .collect();
        let spatial_layers = (!config.share_params).then(|| {
            (0..config.depth)
                .map(|_| PerceiverLayer::init(channels, rng))
                .collect()
        });
        Ok(Self {
            global_latents,
            spatial_latents,
            layers,
            spatial_layers,
            config,
        })
    }

    pub fn channels(&self) -> usize {
        self.global_latents.c()
    }

    pub fn num_global(&self) -> usize {
        self.global_latents.n()
    }

    pub fn num_spatial(&self) -> usize {
        self.spatial_latents.n()
    }

    fn spatial_stack(&self) -> &[PerceiverLayer<T>] {
        self.spatial_layers.as_deref().unwrap_or(&self.layers)
    }

    /// Window size `(wh, ww)` that tiles an `h×w` map into `Nl` windows.
    pub fn spatial_window(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        spatial_window(self.num_spatial(), h, w)
    }

    pub fn cast<U: Real>(&self) -> PerceiverParams<U> {
        PerceiverParams {
            global_latents: self.global_latents.cast(),
            spatial_latents: self.spatial_latents.cast(),
            layers: self.layers.iter().map(PerceiverLayer::cast).collect(),
            spatial_layers: self
                .spatial_layers
                .as_ref()
                .map(|ls| ls.iter().map(PerceiverLayer::cast).collect()),
            config: self.config,
        }
    }

    fn check_map(&self, m: &FeatureMap<T>) -> Result<()> {
        if m.channels() != self.channels() {
            return Err(Error::shape(
                "perceiver",
                format!(
                    "map has {} channels, latents {}",
                    m.channels(),
                    self.channels()
                ),
            ));
        }
        Ok(())
    }
}

/// Window size for `num_spatial` latents on an `h×w` map.
pub fn spatial_window(num_spatial: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    let side = square_side(num_spatial).ok_or_else(|| {
        Error::Config(format!(
            "spatial latent count {num_spatial} is not a perfect square"
        ))
    })?;
    if side == 0 {
        return Ok((h, w));
    }
    if !h.is_multiple_of(side) || !w.is_multiple_of(side) {
        return Err(Error::shape(
            "spatial_perceive",
            format!("{side}x{side} latent grid does not tile a {h}x{w} map"),
        ));
    }
    Ok((h / side, w / side))
}

fn global_keys<T: Real>(m: &FeatureMap<T>, p: &PerceiverParams<T>) -> Result<TokenSet<T>> {
    let (c, h, w) = m.dims();
    let tokens = if p.config.global_positional {
        m.add(&sinusoidal_pe(h, w, c)?)?.into_tokens()
    } else {
        m.tokens().clone()
    };
    Ok(TokenSet::new(tokens))
}

pub fn global_perceive_tallied<T: Real>(
    m: &FeatureMap<T>,
    p: &PerceiverParams<T>,
    tally: &mut MacTally,
) -> Result<TokenSet<T>> {
    p.check_map(m)?;
    if p.num_global() == 0 {
        return Ok(TokenSet::empty(p.channels()));
    }
    let kv = global_keys(m, p)?;
    let mut latents = p.global_latents.clone();
    for layer in &p.layers {
        latents = block_tallied(&latents, &kv, &layer.cross, MacKind::CrossAttn, tally)?;
        if p.config.self_attention {
            latents = block_tallied(
                &latents,
                &latents,
                &layer.latent_self,
                MacKind::SelfAttn,
                tally,
            )?;
        }
    }
    Ok(latents)
}

/// `Ng` global latent tokens summarizing the whole map.
pub fn global_perceive<T: Real>(m: &FeatureMap<T>, p: &PerceiverParams<T>) -> Result<TokenSet<T>> {
    global_perceive_tallied(m, p, &mut MacTally::new())
}

pub fn spatial_perceive_tallied<T: Real>(
    m: &FeatureMap<T>,
    p: &PerceiverParams<T>,
    tally: &mut MacTally,
) -> Result<TokenSet<T>> {
    p.check_map(m)?;
    let c = p.channels();
    let (h, w) = (m.height(), m.width());
    let nl = p.num_spatial();
    if nl == 0 {
        return TokenSet::with_grid(Matrix::zeros(0, c), 0, 0);
    }
    let (wh, ww) = p.spatial_window(h, w)?;
    let windows = window_partition(m, wh, ww)?;
    let mut latents: Vec<TokenSet<T>> = (0..nl)
        .map(|i| TokenSet::new(p.spatial_latents.matrix().slice_rows(i, i + 1)))
        .collect();
    for layer in p.spatial_stack() {
        for (latent, window) in latents.iter_mut().zip(&windows) {
            *latent = block_tallied(latent, window, &layer.cross, MacKind::CrossAttn, tally)?;
        }
        if p.config.self_attention {
            let all = TokenSet::concat(&latents.iter().collect::<Vec<_>>())?;
            let mixed = block_tallied(&all, &all, &layer.latent_self, MacKind::SelfAttn, tally)?;
            for (i, latent) in latents.iter_mut().enumerate() {
                *latent = TokenSet::new(mixed.matrix().slice_rows(i, i + 1));
            }
        }
    }
    let grid = window_unpartition(&latents, wh, ww, h, w)?;
    let (gh, gw) = (grid.height(), grid.width());
    let out = TokenSet::with_grid(grid.into_tokens(), gh, gw)?;
    match p.config.spatial_position {
        OutputPosition::Rope => rope_2d(&out),
        OutputPosition::Additive => {
            let table = sinusoidal_pe::<T>(gh, gw, c)?;
            TokenSet::with_grid(out.matrix().add(table.tokens())?, gh, gw)
        }
        OutputPosition::None => Ok(out),
    }
}

/// `Nl` window-local latent tokens on a grid.
pub fn spatial_perceive<T: Real>(m: &FeatureMap<T>, p: &PerceiverParams<T>) -> Result<TokenSet<T>> {
    spatial_perceive_tallied(m, p, &mut MacTally::new())
}

/// Cross-attention contexts of the first round, before any self-attention
/// mixes the latents: `(global Ng×C, spatial Nl×C)`.
pub fn first_pass_contexts<T: Real>(
    m: &FeatureMap<T>,
    p: &PerceiverParams<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    p.check_map(m)?;
    let c = p.channels();
    let global = if p.num_global() == 0 {
        Matrix::zeros(0, c)
    } else {
        cross_attention_context(
            &p.global_latents,
            &global_keys(m, p)?,
            &p.layers[0].cross.attn,
        )?
    };
    let spatial = if p.num_spatial() == 0 {
        Matrix::zeros(0, c)
    } else {
        let (wh, ww) = p.spatial_window(m.height(), m.width())?;
        let windows = window_partition(m, wh, ww)?;
        let attn = &p.spatial_stack()[0].cross.attn;
        let rows = windows
            .iter()
            .enumerate()
            .map(|(i, win)| {
                let q = TokenSet::new(p.spatial_latents.matrix().slice_rows(i, i + 1));
                cross_attention_context(&q, win, attn)
            })
            .collect::<Result<Vec<_>>>()?;
        Matrix::vstack(&rows.iter().collect::<Vec<_>>())?
    };
    Ok((global, spatial))
}

/// One frame's memory after compression.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedMemory<T = f64> {
    global: TokenSet<T>,
    spatial: TokenSet<T>,
    source_hw: (usize, usize),
}

impl<T: Real> CompressedMemory<T> {
    pub fn new(
        global: TokenSet<T>,
        spatial: TokenSet<T>,
        source_hw: (usize, usize),
    ) -> Result<Self> {
        if global.c() != spatial.c() {
            return Err(Error::shape(
                "compressed_memory",
                format!("global width {} vs spatial {}", global.c(), spatial.c()),
            ));
        }
        if spatial.grid().is_none() {
            return Err(Error::shape(
                "compressed_memory",
                "spatial tokens carry no grid",
            ));
        }
        Ok(Self {
            global,
            spatial,
            source_hw,
        })
    }

    pub fn global(&self) -> &TokenSet<T> {
        &self.global
    }

    pub fn spatial(&self) -> &TokenSet<T> {
        &self.spatial
    }

    pub fn source_hw(&self) -> (usize, usize) {
        self.source_hw
    }

    pub fn channels(&self) -> usize {
        self.global.c()
    }

    pub fn len(&self) -> usize {
        self.global.n() + self.spatial.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `global ⧺ spatial`.
    pub fn tokens(&self) -> Result<TokenSet<T>> {
        TokenSet::concat(&[&self.global, &self.spatial])
    }
}

pub fn compress_tallied<T: Real>(
    m: &FeatureMap<T>,
    p: &PerceiverParams<T>,
    tally: &mut MacTally,
) -> Result<CompressedMemory<T>> {
    let global = global_perceive_tallied(m, p, tally)?;
    let spatial = spatial_perceive_tallied(m, p, tally)?;
    CompressedMemory::new(global, spatial, (m.height(), m.width()))
}

pub fn compress<T: Real>(m: &FeatureMap<T>, p: &PerceiverParams<T>) -> Result<CompressedMemory<T>> {
    compress_tallied(m, p, &mut MacTally::new())
}

/// Closed-form MACs of one [`compress`] call.
pub fn compress_macs(
    c: usize,
    h: usize,
    w: usize,
    num_global: usize,
    num_spatial: usize,
    config: &PerceiverConfig,
) -> MacTally {
    let (c, hw) = (c as u64, (h * w) as u64);
    let depth = config.depth as u64;
    let mlp_per_token = 2 * MLP_RATIO as u64 * c * c;
    let mut t = MacTally::new();
    // Each global latent sees all HW positions; each spatial latent sees the
    // HW/Nl positions of its window. K and V are projected once per position.
    let paths = [
        (num_global as u64, num_global as u64 * hw),
        (num_spatial as u64, hw),
    ];
    for (n, keys_seen) in paths {
        if n == 0 {
            continue;
        }
        t.proj += depth * (2 * n * c * c + 2 * hw * c * c);
        t.cross_attn += depth * 2 * keys_seen * c;
        t.mlp += depth * n * mlp_per_token;
        if config.self_attention {
            t.proj += depth * 4 * n * c * c;
            t.self_attn += depth * 2 * n * n * c;
            t.mlp += depth * n * mlp_per_token;
        }
    }
    t
}
