//! Task and distillation losses with analytic gradients.
//!
//! All losses evaluate in `f64`. Each returns its value together with the
//! gradient with respect to the student-side inputs; [`grad_check`] compares
//! those gradients against central finite differences.

mod gradcheck;

pub use gradcheck::{grad_check, run_grad_suite, GradCheck, GradSuiteRow, GRAD_REL_FLOOR};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::kernel::{Matrix, Rng};

/// Smoothing term in the dice denominator.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub focal: f64,
    pub iou: f64,
    pub occlusion: f64,
    /// Image-feature alignment weight of the image stage.
    pub gamma: f64,
    /// Image-feature alignment weight of the video stage.
    pub alpha: f64,
    /// Memory-attention output alignment weight of the video stage.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dice: 20.0,
            focal: 1.0,
            iou: 1.0,
            occlusion: 1.0,
            gamma: 1.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

/// Focusing exponent and class balance of the focal loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// A scalar loss over a map and its gradient with respect to that map.
#[derive(Clone, Debug, PartialEq)]
pub struct MapLoss {
    pub value: f64,
    pub grad: Matrix,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `1 − 2Σpg / (Σp + Σg + ε)` over probabilities `pred` and binary `gt`.
pub fn dice_loss(pred: &Matrix, gt: &Matrix) -> Result<MapLoss> {
    same_shape("dice_loss", pred, gt)?;
    let (p, g) = (pred.as_slice(), gt.as_slice());
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<f64>() + g.iter().sum::<f64>() + DICE_EPS;
    let value = 1.0 - 2.0 * inter / denom;
    let d2 = denom * denom;
    let grad = Matrix::from_fn(pred.rows(), pred.cols(), |i, j| {
        let gi = gt.get(i, j);
        -2.0 * (gi * denom - inter) / d2
    });
    Ok(MapLoss { value, grad })
}

/// Mean over pixels of `−α_t (1 − p_t)^γ ln p_t`, with `p = σ(logit)`.
pub fn focal_loss(logits: &Matrix, gt: &Matrix, params: FocalParams) -> Result<MapLoss> {
    same_shape("focal_loss", logits, gt)?;
    let n = logits.as_slice().len().max(1) as f64;
    let FocalParams { gamma, alpha } = params;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (k, (&x, &g)) in logits.as_slice().iter().zip(gt.as_slice()).enumerate() {
        // s = +1 for positives, −1 for negatives; p_t = σ(s·x).
        let (s, a_t) = if g > 0.5 {
            (1.0, alpha)
        } else {
            (-1.0, 1.0 - alpha)
        };
        let pt = sigmoid(s * x);
        let q = sigmoid(-s * x);
        let log_pt = -softplus(-s * x);
        let q_gamma = q.powf(gamma);
        value += -a_t * q_gamma * log_pt;
        // d/dx = −α_t · s · [(1−p_t)^(γ+1) − γ (1−p_t)^γ p_t ln p_t]
        let d = -a_t * s * (q_gamma * q - gamma * q_gamma * pt * log_pt);
        grad.as_mut_slice()[k] = d / n;
    }
    Ok(MapLoss {
        value: value / n,
        grad,
    })
}

/// Intersection over union of two binary masks; two empty masks score 1.
pub fn mask_iou(a: &Matrix, b: &Matrix) -> Result<f64> {
    same_shape("mask_iou", a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// `|pred − actual|` and its derivative in `pred` (0 at equality).
pub fn iou_l1_loss(pred: f64, actual: f64) -> (f64, f64) {
    let d = pred - actual;
    (d.abs(), if d == 0.0 { 0.0 } else { d.signum() })
}

/// Binary cross-entropy on an occlusion logit, target 1 when occluded.
pub fn occlusion_bce(logit: f64, occluded: bool) -> (f64, f64) {
    let y = if occluded { 1.0 } else { 0.0 };
    (softplus(logit) - y * logit, sigmoid(logit) - y)
}

/// Fixed student-to-teacher channel map, uniform in `±1/√C_student`.
pub fn align_projection(student_channels: usize, teacher_channels: usize, rng: &mut Rng) -> Matrix {
    Matrix::init_linear(student_channels, teacher_channels, rng)
}

/// Mean squared error between `student·projection` and `teacher`.
///
/// The gradient is with respect to the student's `HW×C` token matrix.
pub fn align_mse(
    student: &FeatureMap,
    teacher: &FeatureMap,
    projection: Option<&Matrix>,
) -> Result<MapLoss> {
    if (student.height(), student.width()) != (teacher.height(), teacher.width()) {
        return Err(Error::shape(
            "align_mse",
            format!(
                "student {:?} vs teacher {:?}",
                student.dims(),
                teacher.dims()
            ),
        ));
    }
    let mapped = match projection {
        Some(p) => {
            if p.shape() != (student.channels(), teacher.channels()) {
                return Err(Error::shape(
                    "align_mse",
                    format!(
                        "projection {:?} for {} -> {} channels",
                        p.shape(),
                        student.channels(),
                        teacher.channels()
                    ),
                ));
            }
            student.tokens().matmul(p)?
        }
        None if student.channels() == teacher.channels() => student.tokens().clone(),
        None => {
            return Err(Error::shape(
                "align_mse",
                format!(
                    "{} vs {} channels need a projection",
                    student.channels(),
                    teacher.channels()
                ),
            ))
        }
    };
    let diff = mapped.sub(teacher.tokens())?;
    let n = diff.as_slice().len().max(1) as f64;
    let value = diff.frobenius_sq() / n;
    let scaled = diff.scale(2.0 / n);
    let grad = match projection {
        Some(p) => scaled.matmul_t(p)?,
        None => scaled,
    };
    Ok(MapLoss { value, grad })
}

/// Student predictions entering the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentOutputs {
    pub mask_logits: Matrix,
    pub iou_pred: f64,
    pub occlusion_logit: f64,
    pub f16: FeatureMap,
    pub f_m: FeatureMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub mask: Matrix,
    pub occluded: bool,
}

/// Teacher features plus the fixed maps bridging channel widths.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFeatures {
    pub f16: FeatureMap,
    pub f_m: FeatureMap,
    pub f16_projection: Option<Matrix>,
    pub f_m_projection: Option<Matrix>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub dice: f64,
    pub focal: f64,
    pub iou: f64,
    pub occlusion: f64,
    pub img: f64,
    pub mem: f64,
}

/// Gradients of the total loss with respect to each student output.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentGrads {
    pub mask_logits: Matrix,
    pub iou_pred: f64,
    pub occlusion_logit: f64,
    /// With respect to the `HW×C` tokens of `f16`.
    pub f16: Matrix,
    /// With respect to the `HW×C` tokens of `f_m`.
    pub f_m: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Unweighted terms.
    pub terms: LossTerms,
    pub grads: StudentGrads,
}

struct TaskLoss {
    terms: LossTerms,
    total: f64,
    mask_grad: Matrix,
    iou_grad: f64,
}

fn task_loss(
    out: &StudentOutputs,
    gt: &GroundTruth,
    w: &LossWeights,
    focal: FocalParams,
) -> Result<TaskLoss> {
    let probs = out.mask_logits.map(sigmoid);
    let dice = dice_loss(&probs, &gt.mask)?;
    let foc = focal_loss(&out.mask_logits, &gt.mask, focal)?;
    let actual = mask_iou(&probs, &gt.mask)?;
    let (iou, iou_grad) = iou_l1_loss(out.iou_pred, actual);
    let mask_grad = Matrix::from_fn(probs.rows(), probs.cols(), |i, j| {
        let p = probs.get(i, j);
        w.dice * dice.grad.get(i, j) * p * (1.0 - p) + w.focal * foc.grad.get(i, j)
    });
    Ok(TaskLoss {
        terms: LossTerms {
            dice: dice.value,
            focal: foc.value,
            iou,
            ..LossTerms::default()
        },
        total: w.dice * dice.value + w.focal * foc.value + w.iou * iou,
        mask_grad,
        iou_grad: w.iou * iou_grad,
    })
}

/// Image-stage loss: task terms plus `γ`-weighted `F16` alignment.
pub fn loss_sam(
    out: &StudentOutputs,
    gt: &GroundTruth,
    teacher: &TeacherFeatures,
    w: &LossWeights,
    focal: FocalParams,
) -> Result<LossReport> {
    let task = task_loss(out, gt, w, focal)?;
    let img = align_mse(&out.f16, &teacher.f16, teacher.f16_projection.as_ref())?;
    let (hw, c) = out.f_m.tokens().shape();
    Ok(LossReport {
        total: task.total + w.gamma * img.value,
        terms: LossTerms {
            img: img.value,
            ..task.terms
        },
        grads: StudentGrads {
            mask_logits: task.mask_grad,
            iou_pred: task.iou_grad,
            occlusion_logit: 0.0,
            f16: img.grad.scale(w.gamma),
            f_m: Matrix::zeros(hw, c),
        },
    })
}

/// Video-stage loss: task terms with occlusion BCE, `α`-weighted `F16`
/// alignment and `β`-weighted memory-attention output alignment.
pub fn loss_sam2(
    out: &StudentOutputs,
    gt: &GroundTruth,
    teacher: &TeacherFeatures,
    w: &LossWeights,
    focal: FocalParams,
) -> Result<LossReport> {
    let task = task_loss(out, gt, w, focal)?;
    let (occ, occ_grad) = occlusion_bce(out.occlusion_logit, gt.occluded);
    let img = align_mse(&out.f16, &teacher.f16, teacher.f16_projection.as_ref())?;
    let mem = align_mse(&out.f_m, &teacher.f_m, teacher.f_m_projection.as_ref())?;
    Ok(LossReport {
        total: task.total + w.occlusion * occ + w.alpha * img.value + w.beta * mem.value,
        terms: LossTerms {
            occlusion: occ,
            img: img.value,
            mem: mem.value,
            ..task.terms
        },
        grads: StudentGrads {
            mask_logits: task.mask_grad,
            iou_pred: task.iou_grad,
            occlusion_logit: w.occlusion * occ_grad,
            f16: img.grad.scale(w.alpha),
            f_m: mem.grad.scale(w.beta),
        },
    })
}
