use super::*;

/// Floor on the relative-error denominator; differences between gradients
/// smaller than this in magnitude are judged absolutely.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
}

/// Compares `analytic` against central differences of `f` at `x`.
///
/// The error at coordinate `i` is `|a − n| / max(|a|, |n|, GRAD_REL_FLOOR)`.
pub fn grad_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> Result<GradCheck> {
    if x.len() != analytic.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} inputs, {} gradient entries", x.len(), analytic.len()),
        ));
    }
    let mut probe = x.to_vec();
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe);
        probe[i] = x[i] - STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
        if err > worst.max_rel_err || err.is_nan() {
            worst = GradCheck {
                max_rel_err: err,
                worst_index: i,
            };
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSuiteRow {
    pub loss: &'static str,
    pub fixtures: usize,
    pub max_rel_err: f64,
}

/// Logits at least this far from zero keep the thresholded IoU fixed under
/// finite-difference probes.
const LOGIT_MARGIN: f64 = 0.05;

fn binary_mask(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| (rng.uniform(1.0) > 0.0) as u8 as f64)
}

fn away_from_zero(rng: &mut Rng, span: f64) -> f64 {
    let mag = rng.range(LOGIT_MARGIN, span);
    if rng.uniform(1.0) > 0.0 {
        mag
    } else {
        -mag
    }
}

fn map(c: usize, h: usize, w: usize, rng: &mut Rng) -> FeatureMap {
    FeatureMap::from_tokens(h, w, Matrix::random(h * w, c, 1.0, rng))
        .expect("token count matches grid")
}

struct Composite {
    out: StudentOutputs,
    gt: GroundTruth,
    teacher: TeacherFeatures,
}

fn composite_fixture(rng: &mut Rng) -> Composite {
    let (side, cs, ct) = (6, 4, 6);
    let mask_logits = Matrix::from_fn(side, side, |_, _| away_from_zero(rng, 3.0));
    let gt_mask = binary_mask(side, side, rng);
    let probs = mask_logits.map(sigmoid);
    let actual = mask_iou(&probs, &gt_mask).expect("same shape");
    // Keep the prediction off the |pred − actual| kink.
    let mut iou_pred = rng.range(0.0, 1.0);
    if (iou_pred - actual).abs() < 1e-3 {
        iou_pred = actual + 0.1;
    }
    let out = StudentOutputs {
        mask_logits,
        iou_pred,
        occlusion_logit: rng.range(-4.0, 4.0),
        f16: map(cs, 2, 2, rng),
        f_m: map(cs, 2, 2, rng),
    };
    let teacher = TeacherFeatures {
        f16: map(ct, 2, 2, rng),
        f_m: map(ct, 2, 2, rng),
        f16_projection: Some(align_projection(cs, ct, rng)),
        f_m_projection: Some(align_projection(cs, ct, rng)),
    };
    Composite {
        out,
        gt: GroundTruth {
            mask: gt_mask,
            occluded: rng.uniform(1.0) > 0.0,
        },
        teacher,
    }
}

fn pack(o: &StudentOutputs) -> Vec<f64> {
    let mut v = o.mask_logits.as_slice().to_vec();
    v.push(o.iou_pred);
    v.push(o.occlusion_logit);
    v.extend_from_slice(o.f16.tokens().as_slice());
    v.extend_from_slice(o.f_m.tokens().as_slice());
    v
}

fn unpack(template: &StudentOutputs, v: &[f64]) -> StudentOutputs {
    let (r, c) = template.mask_logits.shape();
    let n_mask = r * c;
    let n_f16 = template.f16.tokens().as_slice().len();
    let refill = |m: &FeatureMap, at: usize, len: usize| {
        let (hw, ch) = m.tokens().shape();
        FeatureMap::from_tokens(
            m.height(),
            m.width(),
            Matrix::new(hw, ch, v[at..at + len].to_vec()).expect("length matches"),
        )
        .expect("token count matches grid")
    };
    StudentOutputs {
        mask_logits: Matrix::new(r, c, v[..n_mask].to_vec()).expect("length matches"),
        iou_pred: v[n_mask],
        occlusion_logit: v[n_mask + 1],
        f16: refill(&template.f16, n_mask + 2, n_f16),
        f_m: refill(
            &template.f_m,
            n_mask + 2 + n_f16,
            template.f_m.tokens().as_slice().len(),
        ),
    }
}

fn pack_grads(g: &StudentGrads) -> Vec<f64> {
    let mut v = g.mask_logits.as_slice().to_vec();
    v.push(g.iou_pred);
    v.push(g.occlusion_logit);
    v.extend_from_slice(g.f16.as_slice());
    v.extend_from_slice(g.f_m.as_slice());
    v
}

type CompositeLoss = fn(
    &StudentOutputs,
    &GroundTruth,
    &TeacherFeatures,
    &LossWeights,
    FocalParams,
) -> Result<LossReport>;

fn check_composite(fx: &Composite, loss: CompositeLoss) -> Result<f64> {
    let (w, fp) = (LossWeights::default(), FocalParams::default());
    let report = loss(&fx.out, &fx.gt, &fx.teacher, &w, fp)?;
    let f = |v: &[f64]| {
        loss(&unpack(&fx.out, v), &fx.gt, &fx.teacher, &w, fp)
            .expect("fixture shapes are consistent")
            .total
    };
    Ok(grad_check(f, &pack(&fx.out), &pack_grads(&report.grads))?.max_rel_err)
}

fn check_map(x: &Matrix, analytic: &Matrix, f: impl Fn(&Matrix) -> f64) -> Result<f64> {
    let (r, c) = x.shape();
    let eval = |v: &[f64]| f(&Matrix::new(r, c, v.to_vec()).expect("length matches"));
    Ok(grad_check(eval, x.as_slice(), analytic.as_slice())?.max_rel_err)
}

/// Checks every loss on `fixtures` seeded random inputs each.
pub fn run_grad_suite(seed: u64, fixtures: usize) -> Result<Vec<GradSuiteRow>> {
    let mut rng = Rng::new(seed);
    let mut worst = [0.0f64; 7];
    for _ in 0..fixtures {
        let pred = Matrix::from_fn(4, 4, |_, _| rng.range(0.05, 0.95));
        let gt = binary_mask(4, 4, &mut rng);
        let d = dice_loss(&pred, &gt)?;
        worst[0] = worst[0].max(check_map(&pred, &d.grad, |p| {
            dice_loss(p, &gt).expect("same shape").value
        })?);

        let logits = Matrix::from_fn(4, 4, |_, _| rng.range(-3.0, 3.0));
        let gt = binary_mask(4, 4, &mut rng);
        let fp = FocalParams::default();
        let fl = focal_loss(&logits, &gt, fp)?;
        worst[1] = worst[1].max(check_map(&logits, &fl.grad, |x| {
            focal_loss(x, &gt, fp).expect("same shape").value
        })?);

        let actual = rng.range(0.0, 1.0);
        let pred = actual + away_from_zero(&mut rng, 0.5);
        let (_, g) = iou_l1_loss(pred, actual);
        let r = grad_check(|v| iou_l1_loss(v[0], actual).0, &[pred], &[g])?;
        worst[2] = worst[2].max(r.max_rel_err);

        let logit = rng.range(-6.0, 6.0);
        let occluded = rng.uniform(1.0) > 0.0;
        let (_, g) = occlusion_bce(logit, occluded);
        let r = grad_check(|v| occlusion_bce(v[0], occluded).0, &[logit], &[g])?;
        worst[3] = worst[3].max(r.max_rel_err);

        let s = map(3, 2, 3, &mut rng);
        let t = map(5, 2, 3, &mut rng);
        let p = align_projection(3, 5, &mut rng);
        let a = align_mse(&s, &t, Some(&p))?;
        worst[4] = worst[4].max(check_map(s.tokens(), &a.grad, |x| {
            let sm = FeatureMap::from_tokens(2, 3, x.clone()).expect("same grid");
            align_mse(&sm, &t, Some(&p)).expect("same shape").value
        })?);

        let fx = composite_fixture(&mut rng);
        worst[5] = worst[5].max(check_composite(&fx, loss_sam)?);
        worst[6] = worst[6].max(check_composite(&fx, loss_sam2)?);
    }
    let names = [
        "dice",
        "focal",
        "iou_l1",
        "occlusion_bce",
        "align_mse",
        "loss_sam",
        "loss_sam2",
    ];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(&loss, max_rel_err)| GradSuiteRow {
            loss,
            fixtures,
            max_rel_err,
        })
        .collect())
}
