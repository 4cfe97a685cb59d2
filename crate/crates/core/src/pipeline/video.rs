use std::ops::Range;

use crate::error::{Error, Result};
use crate::kernel::{Matrix, Rng};

use super::stubs::Prompt;

/// A square moving at constant velocity and bouncing off the borders.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSpec {
    pub frames: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub side: usize,
    /// Pixels per frame along (y, x).
    pub velocity: (i64, i64),
    /// Frames where the square is hidden and flagged occluded.
    pub occluded: Option<Range<usize>>,
    /// Half-width of uniform background noise.
    pub noise: f64,
    pub seed: u64,
}

impl VideoSpec {
    pub fn new(frames: usize, image_height: usize, image_width: usize, seed: u64) -> Self {
        let side = (image_height.min(image_width) / 4).max(1);
        Self {
            frames,
            image_height,
            image_width,
            side,
            velocity: (3, 5),
            occluded: None,
            noise: 0.05,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFrame {
    pub image: Matrix,
    /// Binary ground truth; empty while occluded.
    pub mask: Matrix,
    pub occluded: bool,
    /// Top-left corner of the square.
    pub position: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub spec: VideoSpec,
    pub frames: Vec<VideoFrame>,
}

/// Reflects `p` into `[0, span]`.
fn bounce(p: i64, span: i64) -> usize {
    if span == 0 {
        return 0;
    }
    let period = 2 * span;
    let r = p.rem_euclid(period);
    (if r <= span { r } else { period - r }) as usize
}

impl SyntheticVideo {
    pub fn generate(spec: VideoSpec) -> Result<Self> {
        let (h, w, s) = (spec.image_height, spec.image_width, spec.side);
        if s == 0 || s > h || s > w {
            return Err(Error::Config(format!(
                "a {s}-pixel square does not fit a {h}x{w} image"
            )));
        }
        let mut rng = Rng::new(spec.seed);
        let (span_y, span_x) = ((h - s) as i64, (w - s) as i64);
        let start = (
            rng.index(span_y as usize + 1) as i64,
            rng.index(span_x as usize + 1) as i64,
        );
        let frames = (0..spec.frames)
            .map(|t| {
                let (vy, vx) = spec.velocity;
                let y0 = bounce(start.0 + vy * t as i64, span_y);
                let x0 = bounce(start.1 + vx * t as i64, span_x);
                let occluded = spec.occluded.as_ref().is_some_and(|r| r.contains(&t));
                let inside = |y: usize, x: usize| {
                    !occluded && (y0..y0 + s).contains(&y) && (x0..x0 + s).contains(&x)
                };
                let mask = Matrix::from_fn(h, w, |y, x| if inside(y, x) { 1.0 } else { 0.0 });
                let image = Matrix::from_fn(h, w, |y, x| mask.get(y, x) + rng.uniform(spec.noise));
                VideoFrame {
                    image,
                    mask,
                    occluded,
                    position: (y0, x0),
                }
            })
            .collect();
        Ok(Self { spec, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Centre of the square on the first frame.
    pub fn point_prompt(&self) -> Option<Prompt> {
        let f = self.frames.first()?;
        let half = self.spec.side / 2;
        Some(Prompt::Point {
            y: f.position.0 + half,
            x: f.position.1 + half,
        })
    }

    pub fn mask_prompt(&self) -> Option<Prompt> {
        self.frames.first().map(|f| Prompt::Mask(f.mask.clone()))
    }
}
