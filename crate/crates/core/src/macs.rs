//! Counted multiply-accumulate tallies.
//!
//! Every matrix product on the attention path goes through [`MacTally`], which
//! adds `rows × inner × cols` from the actual operand shapes. The closed-form
//! model in `fusion` is checked against these counts.

use crate::error::Result;
use crate::kernel::{Matrix, Real};

/// Where a product's MACs are booked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacKind {
    /// `QKᵀ` and `attention·V` of a self-attention.
    SelfAttn,
    /// `QKᵀ` and `attention·V` of a cross-attention.
    CrossAttn,
    /// Q/K/V/O projections.
    Proj,
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacTally {
    pub self_attn: u64,
    pub cross_attn: u64,
    pub proj: u64,
    pub mlp: u64,
    /// Score entries pushed through softmax. Not a MAC count.
    pub softmax_elems: u64,
    /// Elements pushed through layer normalization. Not a MAC count.
    pub norm_elems: u64,
}

impl MacTally {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, kind: MacKind, macs: u64) {
        match kind {
            MacKind::SelfAttn => self.self_attn += macs,
            MacKind::CrossAttn => self.cross_attn += macs,
            MacKind::Proj => self.proj += macs,
            MacKind::Mlp => self.mlp += macs,
        }
    }

    /// All multiply-accumulates, excluding softmax and norm element counts.
    pub fn total_macs(&self) -> u64 {
        self.self_attn + self.cross_attn + self.proj + self.mlp
    }

    pub(crate) fn matmul<T: Real>(
        &mut self,
        kind: MacKind,
        a: &Matrix<T>,
        b: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let out = a.matmul(b)?;
        self.add(kind, (a.rows() * a.cols() * b.cols()) as u64);
        Ok(out)
    }

    /// `a * bᵀ`.
    pub(crate) fn matmul_t<T: Real>(
        &mut self,
        kind: MacKind,
        a: &Matrix<T>,
        b: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let out = a.matmul_t(b)?;
        self.add(kind, (a.rows() * a.cols() * b.rows()) as u64);
        Ok(out)
    }
}

impl std::ops::AddAssign for MacTally {
    fn add_assign(&mut self, o: Self) {
        self.self_attn += o.self_attn;
        self.cross_attn += o.cross_attn;
        self.proj += o.proj;
        self.mlp += o.mlp;
        self.softmax_elems += o.softmax_elems;
        self.norm_elems += o.norm_elems;
    }
}
