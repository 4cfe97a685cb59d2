use crate::error::{Error, Result};
use crate::feature::{FeatureMap, TokenSet};
use crate::kernel::{Matrix, Real};

/// Frequency base shared by the sinusoidal table and the rotary encoding.
pub const ROPE_BASE: f64 = 10_000.0;

fn check_channels(op: &'static str, c: usize) -> Result<()> {
    if c == 0 || !c.is_multiple_of(4) {
        return Err(Error::shape(
            op,
            format!("{c} channels, need a positive multiple of 4"),
        ));
    }
    Ok(())
}

#[inline]
fn frequency(k: usize, quarter: usize) -> f64 {
    ROPE_BASE.powf(-(k as f64) / quarter as f64)
}

/// 2D sine/cosine table over an `h×w` grid.
///
/// With `q = c/4` and `f_k = 10000^(-k/q)`, channel `k` holds `sin(y·f_k)`,
/// `q+k` holds `cos(y·f_k)`, `2q+k` holds `sin(x·f_k)` and `3q+k` holds
/// `cos(x·f_k)`.
pub fn sinusoidal_pe<T: Real>(h: usize, w: usize, c: usize) -> Result<FeatureMap<T>> {
    check_channels("sinusoidal_pe", c)?;
    let q = c / 4;
    let tokens = Matrix::from_fn(h * w, c, |p, ch| {
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        let (quadrant, k) = (ch / q, ch % q);
        let f = frequency(k, q);
        T::of(match quadrant {
            0 => (y * f).sin(),
            1 => (y * f).cos(),
            2 => (x * f).sin(),
            _ => (x * f).cos(),
        })
    });
    FeatureMap::from_tokens(h, w, tokens)
}

/// Rotation angles `(row_angle, col_angle)` for pair `k` at grid `(y, x)`.
pub fn rope_angles(y: usize, x: usize, k: usize, c: usize) -> (f64, f64) {
    let f = frequency(k, c / 4);
    (y as f64 * f, x as f64 * f)
}

/// 2D rotary encoding of grid tokens.
///
/// The first `c/2` channels are rotated pairwise `(2k, 2k+1)` by `y·θ_k`, the
/// second half by `x·θ_k`, with `θ_k = 10000^(-k/(c/4))`.
pub fn rope_2d<T: Real>(tokens: &TokenSet<T>) -> Result<TokenSet<T>> {
    let (gh, gw) = tokens
        .grid()
        .ok_or_else(|| Error::shape("rope_2d", "token set has no grid"))?;
    let c = tokens.c();
    check_channels("rope_2d", c)?;
    let half = c / 2;
    let mut out = tokens.matrix().clone();
    for p in 0..tokens.n() {
        let (y, x) = (p / gw, p % gw);
        let row = out.row_mut(p);
        for k in 0..c / 4 {
            let (ay, ax) = rope_angles(y, x, k, c);
            rotate(row, 2 * k, ay);
            rotate(row, half + 2 * k, ax);
        }
    }
    TokenSet::with_grid(out, gh, gw)
}

#[inline]
fn rotate<T: Real>(row: &mut [T], i: usize, angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, c) = angle.sin_cos();
    let (s, c) = (T::of(s), T::of(c));
    let (a, b) = (row[i], row[i + 1]);
    row[i] = a * c - b * s;
    row[i + 1] = a * s + b * c;
}
