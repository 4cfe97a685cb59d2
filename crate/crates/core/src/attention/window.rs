use crate::error::{Error, Result};
use crate::feature::{FeatureMap, TokenSet};
use crate::kernel::{Matrix, Real};

/// Splits a map into non-overlapping `wh×ww` windows.
///
/// Windows come out in row-major window order; tokens inside a window are
/// row-major and the window's grid is `(wh, ww)`.
pub fn window_partition<T: Real>(
    m: &FeatureMap<T>,
    wh: usize,
    ww: usize,
) -> Result<Vec<TokenSet<T>>> {
    let (c, h, w) = m.dims();
    if wh == 0 || ww == 0 || !h.is_multiple_of(wh) || !w.is_multiple_of(ww) {
        return Err(Error::shape(
            "window_partition",
            format!("{wh}x{ww} windows do not tile a {h}x{w} map"),
        ));
    }
    let (nh, nw) = (h / wh, w / ww);
    let mut windows = Vec::with_capacity(nh * nw);
    for by in 0..nh {
        for bx in 0..nw {
            let mut data = Vec::with_capacity(wh * ww * c);
            for dy in 0..wh {
                for dx in 0..ww {
                    data.extend_from_slice(m.at(by * wh + dy, bx * ww + dx));
                }
            }
            windows.push(TokenSet::with_grid(Matrix::new(wh * ww, c, data)?, wh, ww)?);
        }
    }
    Ok(windows)
}

/// Inverse of [`window_partition`].
///
/// With `wh·ww` tokens per window the full `h×w` map is rebuilt. With one
/// token per window each window collapses to a single cell and the result is
/// the `(h/wh)×(w/ww)` summary grid in row-major window order.
pub fn window_unpartition<T: Real>(
    windows: &[TokenSet<T>],
    wh: usize,
    ww: usize,
    h: usize,
    w: usize,
) -> Result<FeatureMap<T>> {
    if wh == 0 || ww == 0 || !h.is_multiple_of(wh) || !w.is_multiple_of(ww) {
        return Err(Error::shape(
            "window_unpartition",
            format!("{wh}x{ww} windows do not tile a {h}x{w} map"),
        ));
    }
    let (nh, nw) = (h / wh, w / ww);
    if windows.len() != nh * nw {
        return Err(Error::shape(
            "window_unpartition",
            format!("{} windows, expected {}", windows.len(), nh * nw),
        ));
    }
    let c = windows.first().map_or(0, |t| t.c());
    let per = windows.first().map_or(0, |t| t.n());
    if windows.iter().any(|t| t.c() != c || t.n() != per) {
        return Err(Error::shape(
            "window_unpartition",
            "windows differ in size or width",
        ));
    }
    if per == wh * ww {
        let mut tokens = Matrix::zeros(h * w, c);
        for (idx, win) in windows.iter().enumerate() {
            let (by, bx) = (idx / nw, idx % nw);
            for dy in 0..wh {
                for dx in 0..ww {
                    let pos = (by * wh + dy) * w + bx * ww + dx;
                    tokens
                        .row_mut(pos)
                        .copy_from_slice(win.matrix().row(dy * ww + dx));
                }
            }
        }
        FeatureMap::from_tokens(h, w, tokens)
    } else if per == 1 {
        let parts: Vec<&Matrix<T>> = windows.iter().map(|t| t.matrix()).collect();
        FeatureMap::from_tokens(nh, nw, Matrix::vstack(&parts)?)
    } else {
        Err(Error::shape(
            "window_unpartition",
            format!("{per} tokens per window, expected {} or 1", wh * ww),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(h: usize, w: usize, c: usize) -> FeatureMap<f64> {
        let tokens = Matrix::from_fn(h * w, c, |p, ch| (p * c + ch) as f64);
        FeatureMap::from_tokens(h, w, tokens).unwrap()
    }

    #[test]
    fn four_by_four_first_window() {
        let m = iota(4, 4, 1);
        let wins = window_partition(&m, 2, 2).unwrap();
        assert_eq!(wins.len(), 4);
        assert_eq!(wins[0].matrix().as_slice(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(wins[3].matrix().as_slice(), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn degenerate_windows() {
        let m = iota(3, 4, 2);
        let whole = window_partition(&m, 3, 4).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].matrix(), m.tokens());
        let cells = window_partition(&m, 1, 1).unwrap();
        assert_eq!(cells.len(), 12);
        assert!(cells.iter().all(|t| t.n() == 1));
        assert_eq!(window_unpartition(&cells, 1, 1, 3, 4).unwrap(), m);
    }

    #[test]
    fn summary_grid_placement() {
        let summaries: Vec<TokenSet<f64>> = (0..4)
            .map(|i| TokenSet::new(Matrix::filled(1, 2, i as f64)))
            .collect();
        let g = window_unpartition(&summaries, 2, 2, 4, 4).unwrap();
        assert_eq!((g.height(), g.width()), (2, 2));
        assert_eq!(g.at(0, 1), &[1.0, 1.0]);
        assert_eq!(g.at(1, 0), &[2.0, 2.0]);
    }

    #[test]
    fn rejects_bad_tiling() {
        let m = iota(4, 4, 1);
        assert!(window_partition(&m, 3, 2).is_err());
        let wins = window_partition(&m, 2, 2).unwrap();
        assert!(window_unpartition(&wins[..3], 2, 2, 4, 4).is_err());
    }
}
