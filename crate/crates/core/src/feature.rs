//! Feature maps and token sets.
//!
//! A [`FeatureMap`] is a `C×H×W` frame feature. It is stored position-major,
//! as an `HW×C` token matrix with positions in row-major `(y, x)` order, so
//! flattening to a token sequence is free.

use crate::error::{Error, Result};
use crate::kernel::{Matrix, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f64> {
    height: usize,
    width: usize,
    tokens: Matrix<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            tokens: Matrix::zeros(height * width, channels),
        }
    }

    /// Wraps an `HW×C` token matrix.
    pub fn from_tokens(height: usize, width: usize, tokens: Matrix<T>) -> Result<Self> {
        if tokens.rows() != height * width {
            return Err(Error::shape(
                "feature_map",
                format!("{} tokens for a {height}x{width} grid", tokens.rows()),
            ));
        }
        Ok(Self {
            height,
            width,
            tokens,
        })
    }

    /// Builds from channel-major `C×H×W` data.
    pub fn from_chw(channels: usize, height: usize, width: usize, data: &[T]) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "feature_map",
                format!("{} values for {channels}x{height}x{width}", data.len()),
            ));
        }
        let hw = height * width;
        let tokens = Matrix::from_fn(hw, channels, |p, c| data[c * hw + p]);
        Ok(Self {
            height,
            width,
            tokens,
        })
    }

    pub fn to_chw(&self) -> Vec<T> {
        let hw = self.hw();
        let c = self.channels();
        let mut out = vec![T::zero(); c * hw];
        for p in 0..hw {
            for (ch, &v) in self.tokens.row(p).iter().enumerate() {
                out[ch * hw + p] = v;
            }
        }
        out
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    /// `(C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height, self.width)
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> T {
        self.tokens.get(y * self.width + x, channel)
    }

    /// Feature vector at `(y, x)`.
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> &[T] {
        self.tokens.row(y * self.width + x)
    }

    #[inline]
    pub fn tokens(&self) -> &Matrix<T> {
        &self.tokens
    }

    pub fn into_tokens(self) -> Matrix<T> {
        self.tokens
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                "feature_map_add",
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            tokens: self.tokens.add(&other.tokens)?,
        })
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            tokens: self.tokens.cast(),
        }
    }

    /// The map as a token set carrying its grid.
    pub fn to_token_set(&self) -> TokenSet<T> {
        TokenSet {
            data: self.tokens.clone(),
            grid: Some((self.height, self.width)),
        }
    }
}

/// An `N×C` sequence of feature vectors, optionally arranged on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<T = f64> {
    data: Matrix<T>,
    grid: Option<(usize, usize)>,
}

impl<T: Real> TokenSet<T> {
    pub fn new(data: Matrix<T>) -> Self {
        Self { data, grid: None }
    }

    pub fn with_grid(data: Matrix<T>, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != data.rows() {
            return Err(Error::shape(
                "token_set",
                format!("grid {rows}x{cols} for {} tokens", data.rows()),
            ));
        }
        Ok(Self {
            data,
            grid: Some((rows, cols)),
        })
    }

    pub fn empty(channels: usize) -> Self {
        Self::new(Matrix::zeros(0, channels))
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.data.rows()
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.data.cols()
    }

    #[inline]
    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix<T> {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.n() == 0
    }

    /// Concatenates along the token axis. The result carries no grid.
    pub fn concat(parts: &[&TokenSet<T>]) -> Result<TokenSet<T>> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|p| &p.data).collect();
        Ok(TokenSet::new(Matrix::vstack(&mats)?))
    }

    pub fn cast<U: Real>(&self) -> TokenSet<U> {
        TokenSet {
            data: self.data.cast(),
            grid: self.grid,
        }
    }
}
