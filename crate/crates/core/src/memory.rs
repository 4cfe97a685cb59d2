//! FIFO memory bank and the memory encoder.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::feature::{FeatureMap, TokenSet};
use crate::kernel::{Matrix, Real, Rng};
use crate::perceiver::CompressedMemory;

/// Frame-memory capacity of the reference configuration.
pub const DEFAULT_FRAME_CAPACITY: usize = 7;
/// Object-pointer capacity of the reference configuration.
pub const DEFAULT_POINTER_CAPACITY: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub enum MemoryKind<T = f64> {
    Dense(FeatureMap<T>),
    Compressed(CompressedMemory<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMemory<T = f64> {
    pub frame_index: usize,
    pub kind: MemoryKind<T>,
}

impl<T: Real> FrameMemory<T> {
    pub fn dense(frame_index: usize, map: FeatureMap<T>) -> Self {
        Self {
            frame_index,
            kind: MemoryKind::Dense(map),
        }
    }

    pub fn compressed(frame_index: usize, mem: CompressedMemory<T>) -> Self {
        Self {
            frame_index,
            kind: MemoryKind::Compressed(mem),
        }
    }

    pub fn channels(&self) -> usize {
        match &self.kind {
            MemoryKind::Dense(m) => m.channels(),
            MemoryKind::Compressed(c) => c.channels(),
        }
    }

    /// Keys/values this frame contributes to memory attention.
    pub fn token_count(&self) -> usize {
        match &self.kind {
            MemoryKind::Dense(m) => m.hw(),
            MemoryKind::Compressed(c) => c.len(),
        }
    }

    pub fn tokens(&self) -> Result<TokenSet<T>> {
        match &self.kind {
            MemoryKind::Dense(m) => Ok(TokenSet::new(m.tokens().clone())),
            MemoryKind::Compressed(c) => c.tokens(),
        }
    }

    pub fn is_compressed(&self) -> bool {
        matches!(self.kind, MemoryKind::Compressed(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectPointer<T = f64> {
    pub frame_index: usize,
    pub vector: Vec<T>,
}

/// Bounded FIFO queues of frame memories and object pointers.
#[derive(Clone, Debug)]
pub struct MemoryBank<T = f64> {
    frames: VecDeque<FrameMemory<T>>,
    pointers: VecDeque<ObjectPointer<T>>,
    frame_capacity: usize,
    pointer_capacity: usize,
    include_pointers: bool,
}

impl<T: Real> MemoryBank<T> {
    pub fn new(frame_capacity: usize, pointer_capacity: usize) -> Result<Self> {
        if frame_capacity == 0 {
            return Err(Error::Config("frame capacity must be at least 1".into()));
        }
        Ok(Self {
            frames: VecDeque::with_capacity(frame_capacity + 1),
            pointers: VecDeque::with_capacity(pointer_capacity + 1),
            frame_capacity,
            pointer_capacity,
            include_pointers: true,
        })
    }

    /// Whether pointers join the key/value sequence in [`concat`](Self::concat).
    pub fn with_pointers_in_attention(mut self, include: bool) -> Self {
        self.include_pointers = include;
        self
    }

    pub fn frame_capacity(&self) -> usize {
        self.frame_capacity
    }

    pub fn pointer_capacity(&self) -> usize {
        self.pointer_capacity
    }

    pub fn pointers_in_attention(&self) -> bool {
        self.include_pointers
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn pointer_len(&self) -> usize {
        self.pointers.len()
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &FrameMemory<T>> {
        self.frames.iter()
    }

    pub fn pointers(&self) -> impl ExactSizeIterator<Item = &ObjectPointer<T>> {
        self.pointers.iter()
    }

    pub fn newest_index(&self) -> Option<usize> {
        self.frames.back().map(|f| f.frame_index)
    }

    /// Enqueues a frame memory and optionally its object pointer, evicting
    /// the oldest entries beyond capacity. Nothing changes on error.
    pub fn push(
        &mut self,
        memory: FrameMemory<T>,
        pointer: Option<ObjectPointer<T>>,
    ) -> Result<()> {
        if let Some(newest) = self.newest_index() {
            if memory.frame_index <= newest {
                return Err(Error::OutOfOrder {
                    got: memory.frame_index,
                    newest,
                });
            }
        }
        if let Some(first) = self.frames.front() {
            if first.channels() != memory.channels() {
                return Err(Error::shape(
                    "bank_push",
                    format!(
                        "{}-channel memory into a {}-channel bank",
                        memory.channels(),
                        first.channels()
                    ),
                ));
            }
        }
        if let Some(ptr) = &pointer {
            if let Some(last) = self.pointers.back() {
                if ptr.frame_index <= last.frame_index {
                    return Err(Error::OutOfOrder {
                        got: ptr.frame_index,
                        newest: last.frame_index,
                    });
                }
            }
            if ptr.vector.len() != memory.channels() {
                return Err(Error::shape(
                    "bank_push",
                    format!(
                        "pointer of width {} for {}-channel memory",
                        ptr.vector.len(),
                        memory.channels()
                    ),
                ));
            }
        }
        self.frames.push_back(memory);
        while self.frames.len() > self.frame_capacity {
            self.frames.pop_front();
        }
        if let Some(ptr) = pointer {
            if self.pointer_capacity > 0 {
                self.pointers.push_back(ptr);
                while self.pointers.len() > self.pointer_capacity {
                    self.pointers.pop_front();
                }
            }
        }
        Ok(())
    }

    /// Pointers contributing keys/values.
    pub fn attended_pointers(&self) -> usize {
        if self.include_pointers {
            self.pointers.len()
        } else {
            0
        }
    }

    /// Length of [`concat`](Self::concat) without building it.
    pub fn token_count(&self) -> usize {
        self.frames
            .iter()
            .map(FrameMemory::token_count)
            .sum::<usize>()
            + self.attended_pointers()
    }

    /// Key/value sequence for memory attention: frame tokens oldest to
    /// newest, then pointer tokens. `None` for an empty bank.
    pub fn concat(&self) -> Result<Option<TokenSet<T>>> {
        if self.frames.is_empty() {
            return Ok(None);
        }
        let c = self.frames[0].channels();
        let mut data = Vec::with_capacity(self.token_count() * c);
        for f in &self.frames {
            match &f.kind {
                MemoryKind::Dense(m) => data.extend_from_slice(m.tokens().as_slice()),
                MemoryKind::Compressed(cm) => {
                    data.extend_from_slice(cm.global().matrix().as_slice());
                    data.extend_from_slice(cm.spatial().matrix().as_slice());
                }
            }
        }
        if self.include_pointers {
            for p in &self.pointers {
                data.extend_from_slice(&p.vector);
            }
        }
        let n = data.len() / c;
        Ok(Some(TokenSet::new(Matrix::new(n, c, data)?)))
    }
}

/// Channel projection plus a mask embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEncoder<T = f64> {
    pub proj: Matrix<T>,
    pub mask_embed: Vec<T>,
}

impl<T: Real> MemoryEncoder<T> {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        Self {
            proj: Matrix::init_linear(c, c, rng),
            mask_embed: Matrix::<T>::random(1, c, 1.0, rng).into_vec(),
        }
    }

    pub fn cast<U: Real>(&self) -> MemoryEncoder<U> {
        MemoryEncoder {
            proj: self.proj.cast(),
            mask_embed: self.mask_embed.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

/// Average-pools `mask` down to `h×w`. Both dimensions must divide evenly.
pub fn downsample_mask<T: Real>(mask: &Matrix<T>, h: usize, w: usize) -> Result<Matrix<T>> {
    let (mh, mw) = mask.shape();
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 {
        return Err(Error::shape(
            "downsample_mask",
            format!("{mh}x{mw} mask onto a {h}x{w} grid"),
        ));
    }
    let (fy, fx) = (mh / h, mw / w);
    let inv = T::of(1.0 / (fy * fx) as f64);
    Ok(Matrix::from_fn(h, w, |y, x| {
        let mut s = T::zero();
        for dy in 0..fy {
            for dx in 0..fx {
                s += mask.get(y * fy + dy, x * fx + dx);
            }
        }
        s * inv
    }))
}

/// Dense frame memory from stride-16 features and a mask in `[0, 1]`:
/// `f16·proj + pool(mask) ⊗ mask_embed`.
pub fn memory_encode<T: Real>(
    f16: &FeatureMap<T>,
    mask: &Matrix<T>,
    enc: &MemoryEncoder<T>,
    frame_index: usize,
) -> Result<FrameMemory<T>> {
    let c = f16.channels();
    if enc.proj.shape() != (c, c) || enc.mask_embed.len() != c {
        return Err(Error::shape(
            "memory_encode",
            format!("{c}-channel features into a {:?} encoder", enc.proj.shape()),
        ));
    }
    if mask
        .as_slice()
        .iter()
        .any(|&v| !(v >= T::zero() && v <= T::one()))
    {
        return Err(Error::Invalid("mask values must lie in [0, 1]".into()));
    }
    let pooled = downsample_mask(mask, f16.height(), f16.width())?;
    let mut tokens = f16.tokens().matmul(&enc.proj)?;
    for (p, &m) in pooled.as_slice().iter().enumerate() {
        if m != T::zero() {
            for (x, &e) in tokens.row_mut(p).iter_mut().zip(&enc.mask_embed) {
                *x += m * e;
            }
        }
    }
    Ok(FrameMemory::dense(
        frame_index,
        FeatureMap::from_tokens(f16.height(), f16.width(), tokens)?,
    ))
}
