use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::BlockLayout;
use crate::losses::FocalParams;
use crate::perceiver::{spatial_window, OutputPosition, PerceiverConfig};

/// What the bank stores per frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemoryMode {
    /// The full `HW×C` memory map.
    Dense,
    /// `Ng + Nl` perceiver tokens.
    Compressed,
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::Compressed => "compressed",
        })
    }
}

impl FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "compressed" => Ok(Self::Compressed),
            _ => Err(Error::Config(format!(
                "unknown memory mode '{s}' (expected dense or compressed)"
            ))),
        }
    }
}

fn position_name(p: OutputPosition) -> &'static str {
    match p {
        OutputPosition::Rope => "rope",
        OutputPosition::Additive => "additive",
        OutputPosition::None => "none",
    }
}

fn parse_position(s: &str) -> Result<OutputPosition> {
    match s {
        "rope" => Ok(OutputPosition::Rope),
        "additive" => Ok(OutputPosition::Additive),
        "none" => Ok(OutputPosition::None),
        _ => Err(Error::Config(format!(
            "unknown spatial position '{s}' (expected rope, additive or none)"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub channels: usize,
    /// Stride-16 feature height; images are `16·height` rows.
    pub height: usize,
    pub width: usize,
    pub frame_capacity: usize,
    pub pointer_capacity: usize,
    pub num_global: usize,
    pub num_spatial: usize,
    pub fusion_depth: usize,
    pub perceiver_depth: usize,
    pub mode: MemoryMode,
    pub seed: u64,
    /// Object pointers join the memory-attention keys.
    pub include_pointers: bool,
    pub perceiver_self_attention: bool,
    pub share_perceiver_params: bool,
    pub global_positional: bool,
    pub spatial_position: OutputPosition,
    pub fusion_self_attention: bool,
    pub fusion_cross_attention: bool,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Image side per stride-16 feature cell.
pub const IMAGE_STRIDE: usize = 16;

impl EngineConfig {
    /// Full-size shapes: 64 channels on a 64×64 grid, 7 frames, 256 + 256
    /// latents.
    pub fn full() -> Self {
        Self {
            channels: 64,
            height: 64,
            width: 64,
            frame_capacity: 7,
            pointer_capacity: 16,
            num_global: 256,
            num_spatial: 256,
            fusion_depth: 2,
            perceiver_depth: 2,
            ..Self::desk()
        }
    }

    /// Small shapes with `HW / (Ng + Nl) = T`: 16×16 grid, 4 frames,
    /// 48 global latents and 16 spatial latents over 4×4 windows.
    pub fn desk() -> Self {
        let focal = FocalParams::default();
        Self {
            channels: 32,
            height: 16,
            width: 16,
            frame_capacity: 4,
            pointer_capacity: 16,
            num_global: 48,
            num_spatial: 16,
            fusion_depth: 2,
            perceiver_depth: 2,
            mode: MemoryMode::Compressed,
            seed: 0,
            include_pointers: true,
            perceiver_self_attention: true,
            share_perceiver_params: true,
            global_positional: true,
            spatial_position: OutputPosition::Rope,
            fusion_self_attention: true,
            fusion_cross_attention: true,
            focal_gamma: focal.gamma,
            focal_alpha: focal.alpha,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(Error::Config(format!(
                "unknown preset '{name}' (expected desk or full)"
            ))),
        }
    }

    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (IMAGE_STRIDE * self.height, IMAGE_STRIDE * self.width)
    }

    pub fn tokens_per_compressed_frame(&self) -> usize {
        self.num_global + self.num_spatial
    }

    pub fn tokens_per_frame(&self) -> usize {
        match self.mode {
            MemoryMode::Dense => self.hw(),
            MemoryMode::Compressed => self.tokens_per_compressed_frame(),
        }
    }

    pub fn perceiver(&self) -> PerceiverConfig {
        PerceiverConfig {
            depth: self.perceiver_depth,
            self_attention: self.perceiver_self_attention,
            share_params: self.share_perceiver_params,
            global_positional: self.global_positional,
            spatial_position: self.spatial_position,
        }
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout {
            self_attention: self.fusion_self_attention,
            cross_attention: self.fusion_cross_attention,
        }
    }

    pub fn focal(&self) -> FocalParams {
        FocalParams {
            gamma: self.focal_gamma,
            alpha: self.focal_alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return fail(format!(
                "channels must be a positive multiple of 4, got {}",
                self.channels
            ));
        }
        if self.height == 0 || self.width == 0 {
            return fail("height and width must be positive".into());
        }
        if self.frame_capacity == 0 {
            return fail("frame_capacity must be at least 1".into());
        }
        if self.fusion_depth == 0 || self.perceiver_depth == 0 {
            return fail("depths must be at least 1".into());
        }
        if self.num_global + self.num_spatial == 0 {
            return fail("num_global + num_spatial must be positive".into());
        }
        spatial_window(self.num_spatial, self.height, self.width)?;
        if self.focal_gamma.is_nan()
            || self.focal_gamma < 0.0
            || !(0.0..=1.0).contains(&self.focal_alpha)
        {
            return fail("focal_gamma must be >= 0 and focal_alpha in [0, 1]".into());
        }
        Ok(())
    }

    /// Sets one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!(
                    "{key}: expected true or false, got '{value}'"
                ))),
            }
        }
        match key {
            "channels" => self.channels = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "frame_capacity" => self.frame_capacity = num(key, value)?,
            "pointer_capacity" => self.pointer_capacity = num(key, value)?,
            "num_global" => self.num_global = num(key, value)?,
            "num_spatial" => self.num_spatial = num(key, value)?,
            "fusion_depth" => self.fusion_depth = num(key, value)?,
            "perceiver_depth" => self.perceiver_depth = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "include_pointers" => self.include_pointers = flag(key, value)?,
            "perceiver_self_attention" => self.perceiver_self_attention = flag(key, value)?,
            "share_perceiver_params" => self.share_perceiver_params = flag(key, value)?,
            "global_positional" => self.global_positional = flag(key, value)?,
            "spatial_position" => self.spatial_position = parse_position(value)?,
            "fusion_self_attention" => self.fusion_self_attention = flag(key, value)?,
            "fusion_cross_attention" => self.fusion_cross_attention = flag(key, value)?,
            "focal_gamma" => self.focal_gamma = num(key, value)?,
            "focal_alpha" => self.focal_alpha = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and text
    /// after `#` are ignored; later lines win.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: n + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, got '{line}'")))?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => parse_err(msg),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Desk defaults overlaid with `text`, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        cfg.merge_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let rows: [(&str, String); 20] = [
            ("channels", self.channels.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("frame_capacity", self.frame_capacity.to_string()),
            ("pointer_capacity", self.pointer_capacity.to_string()),
            ("num_global", self.num_global.to_string()),
            ("num_spatial", self.num_spatial.to_string()),
            ("fusion_depth", self.fusion_depth.to_string()),
            ("perceiver_depth", self.perceiver_depth.to_string()),
            ("mode", self.mode.to_string()),
            ("seed", self.seed.to_string()),
            ("include_pointers", self.include_pointers.to_string()),
            (
                "perceiver_self_attention",
                self.perceiver_self_attention.to_string(),
            ),
            (
                "share_perceiver_params",
                self.share_perceiver_params.to_string(),
            ),
            ("global_positional", self.global_positional.to_string()),
            (
                "spatial_position",
                position_name(self.spatial_position).into(),
            ),
            (
                "fusion_self_attention",
                self.fusion_self_attention.to_string(),
            ),
            (
                "fusion_cross_attention",
                self.fusion_cross_attention.to_string(),
            ),
            ("focal_gamma", format!("{:?}", self.focal_gamma)),
            ("focal_alpha", format!("{:?}", self.focal_alpha)),
        ];
        let mut out = String::from("# memtrack engine config\n");
        for (k, v) in rows {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}
