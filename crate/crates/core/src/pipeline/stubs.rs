//! Fixed linear stand-ins for the image encoder and mask decoder.
//!
//! Neither carries a bias, so zero inputs map to zero features and logits.

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::kernel::{Matrix, Real, Rng};

use super::config::IMAGE_STRIDE;

/// Patch projections at strides 4, 8 and 16 of a single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder<T = f64> {
    pub p4: Matrix<T>,
    pub p8: Matrix<T>,
    pub p16: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage<T = f64> {
    pub f4: FeatureMap<T>,
    pub f8: FeatureMap<T>,
    pub f16: FeatureMap<T>,
}

impl<T: Real> ImageEncoder<T> {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        Self {
            p4: Matrix::init_linear(16, c, rng),
            p8: Matrix::init_linear(64, c, rng),
            p16: Matrix::init_linear(256, c, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.p16.cols()
    }
}

/// Rows of `s×s` patches, flattened row-major, in row-major patch order.
fn patches<T: Real>(image: &Matrix<T>, s: usize) -> Result<Matrix<T>> {
    let (gh, gw) = (image.rows() / s, image.cols() / s);
    Matrix::new(
        gh * gw,
        s * s,
        (0..gh * gw)
            .flat_map(|p| {
                let (py, px) = (p / gw, p % gw);
                (0..s * s).map(move |k| image.get(py * s + k / s, px * s + k % s))
            })
            .collect(),
    )
}

/// Features at strides 4, 8 and 16 of a `16H×16W` image.
pub fn encode_image<T: Real>(image: &Matrix<T>, enc: &ImageEncoder<T>) -> Result<EncodedImage<T>> {
    let (ih, iw) = image.shape();
    if ih == 0 || iw == 0 || ih % IMAGE_STRIDE != 0 || iw % IMAGE_STRIDE != 0 {
        return Err(Error::shape(
            "encode_image",
            format!("{ih}x{iw} image is not a positive multiple of {IMAGE_STRIDE}"),
        ));
    }
    let level = |s: usize, proj: &Matrix<T>| -> Result<FeatureMap<T>> {
        FeatureMap::from_tokens(ih / s, iw / s, patches(image, s)?.matmul(proj)?)
    };
    Ok(EncodedImage {
        f4: level(4, &enc.p4)?,
        f8: level(8, &enc.p8)?,
        f16: level(16, &enc.p16)?,
    })
}

/// User prompt on the first frame, in image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Prompt {
    Point {
        y: usize,
        x: usize,
    },
    /// Binary mask at image resolution.
    Mask(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskDecoder<T = f64> {
    /// Channel mix of the fused stride-16 map.
    pub reduce: Matrix<T>,
    pub prompt_embed: Vec<T>,
    pub mask_head: Vec<T>,
    pub iou_head: Vec<T>,
    pub occlusion_head: Vec<T>,
    pub pointer_proj: Matrix<T>,
}

impl<T: Real> MaskDecoder<T> {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        let vector = |rng: &mut Rng| Matrix::<T>::init_linear(c, 1, rng).into_vec();
        Self {
            reduce: Matrix::init_linear(c, c, rng),
            prompt_embed: vector(rng),
            mask_head: vector(rng),
            iou_head: vector(rng),
            occlusion_head: vector(rng),
            pointer_proj: Matrix::init_linear(c, c, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded<T = f64> {
    /// Logits at image resolution.
    pub mask_logits: Matrix<T>,
    pub iou: T,
    pub occlusion_logit: T,
    pub pointer: Vec<T>,
}

/// Nearest-neighbour upsampling of the token grid by `f` per axis.
fn upsample<T: Real>(m: &FeatureMap<T>, f: usize) -> Result<FeatureMap<T>> {
    let (c, h, w) = m.dims();
    let (oh, ow) = (h * f, w * f);
    let mut data = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            data.extend_from_slice(m.at(y / f, x / f));
        }
    }
    FeatureMap::from_tokens(oh, ow, Matrix::new(oh * ow, c, data)?)
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Stride-4 prompt map: a one-hot cell for a point, an average-pooled mask
/// otherwise.
fn prompt_map<T: Real>(prompt: &Prompt, h4: usize, w4: usize) -> Result<Matrix<T>> {
    let (ih, iw) = (4 * h4, 4 * w4);
    match prompt {
        Prompt::Point { y, x } => {
            if *y >= ih || *x >= iw {
                return Err(Error::Invalid(format!(
                    "point ({y}, {x}) outside a {ih}x{iw} image"
                )));
            }
            let (py, px) = (y / 4, x / 4);
            Ok(Matrix::from_fn(h4, w4, |i, j| {
                if (i, j) == (py, px) {
                    T::one()
                } else {
                    T::zero()
                }
            }))
        }
        Prompt::Mask(mask) => {
            if mask.shape() != (ih, iw) {
                return Err(Error::shape(
                    "decode_mask",
                    format!("{:?} mask prompt for a {ih}x{iw} image", mask.shape()),
                ));
            }
            crate::memory::downsample_mask(&mask.cast(), h4, w4)
        }
    }
}

/// Mask logits, IoU estimate, occlusion logit and object pointer.
pub fn decode_mask<T: Real>(
    f_m: &FeatureMap<T>,
    f4: &FeatureMap<T>,
    f8: &FeatureMap<T>,
    prompt: Option<&Prompt>,
    dec: &MaskDecoder<T>,
) -> Result<Decoded<T>> {
    let (c, h, w) = f_m.dims();
    if dec.reduce.rows() != c || f8.dims() != (c, 2 * h, 2 * w) || f4.dims() != (c, 4 * h, 4 * w) {
        return Err(Error::shape(
            "decode_mask",
            format!(
                "F_M {:?}, F8 {:?}, F4 {:?} for a {}-channel decoder",
                f_m.dims(),
                f8.dims(),
                f4.dims(),
                dec.reduce.rows()
            ),
        ));
    }
    let x16 = FeatureMap::from_tokens(h, w, f_m.tokens().matmul(&dec.reduce)?)?;
    let x8 = upsample(&x16, 2)?.add(f8)?;
    let mut x4 = upsample(&x8, 2)?.add(f4)?.into_tokens();
    if let Some(p) = prompt {
        let pm = prompt_map::<T>(p, 4 * h, 4 * w)?;
        for (pos, &v) in pm.as_slice().iter().enumerate() {
            if v != T::zero() {
                for (x, &e) in x4.row_mut(pos).iter_mut().zip(&dec.prompt_embed) {
                    *x += v * e;
                }
            }
        }
    }
    let w4 = 4 * w;
    let low: Vec<T> = (0..x4.rows())
        .map(|p| dot(x4.row(p), &dec.mask_head))
        .collect();
    let mask_logits = Matrix::from_fn(16 * h, 16 * w, |y, x| low[(y / 4) * w4 + x / 4]);

    let inv = T::of(1.0 / (h * w) as f64);
    let mut pooled = vec![T::zero(); c];
    for p in 0..h * w {
        for (acc, &v) in pooled.iter_mut().zip(x16.tokens().row(p)) {
            *acc += v * inv;
        }
    }
    let iou = T::one() / (T::one() + (-dot(&pooled, &dec.iou_head)).exp());
    let occlusion_logit = dot(&pooled, &dec.occlusion_head);
    let pointer = Matrix::new(1, c, pooled)?
        .matmul(&dec.pointer_proj)?
        .into_vec();
    Ok(Decoded {
        mask_logits,
        iou,
        occlusion_logit,
        pointer,
    })
}
