//! Reinforced training objective.
//!
//! With student similarities `S = Φ_img Φ_txtᵀ`, student scale `ŝ`, and teacher
//! similarities `T_k = Ψ_img^(k) Ψ_txt^(k)ᵀ` at scales `s_k`:
//!
//! ```text
//! clip    = ½ [ mean_i −log softmax(ŝS)[i,i] + mean_i −log softmax(ŝSᵀ)[i,i] ]
//! distill = 1/(2K) Σ_k [ KL(softmax(s_k T_k) ‖ softmax(ŝS)) + KL(softmax(s_k T_kᵀ) ‖ softmax(ŝSᵀ)) ]
//! total   = (1 − λ) clip + λ distill
//! ```
//!
//! Every softmax is row-wise and every KL is a mean over rows. Both terms share
//! one backward pass: writing `Q = softmax(ŝS)`, `Q' = softmax(ŝSᵀ)` and the
//! row targets `Y = (1−λ) I + λ mean_k softmax(s_k T_k)` (likewise `Y'`),
//!
//! ```text
//! ∂total/∂(ŝS) = 1/(2b) [ (Q − Y) + (Q' − Y')ᵀ ]
//! ```
//!
//! Gradients are reported with respect to the unit-norm student rows; use
//! [`backprop_normalize`] to carry them through an L2 normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_normalize_rows, matmul, matmul_nt, norm, softmax_both_with_entropy, softmax_pair_both, softmax_rows, LogitScale, Matrix};

const UNIT_TOLERANCE: f64 = 1e-9;

/// One teacher's embeddings of the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherEmbeddings {
    pub img: Matrix,
    pub txt: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    pub phi_img: Matrix,
    pub phi_txt: Matrix,
    pub teachers: Vec<TeacherEmbeddings>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub student_scale: LogitScale,
    #[serde(default = "yes")]
    pub train_student_scale: bool,
    pub teacher_scales: Vec<LogitScale>,
    #[serde(default = "one")]
    pub gt_weight: f64,
    #[serde(default = "one")]
    pub syn_weight: f64,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.gt_weight >= 0.0 && self.syn_weight >= 0.0) {
            return Err(Error::Config("caption weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub clip_loss: f64,
    pub distill_loss: f64,
    /// `(image→text, text→image)` KL per teacher.
    pub per_teacher_terms: Vec<(f64, f64)>,
    pub total: f64,
    pub grad_phi_img: Matrix,
    pub grad_phi_txt: Matrix,
    /// `∂total/∂ŝ`.
    pub grad_student_scale: f64,
}

/// A loss value with gradients, for a single component.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub loss: f64,
    pub grad_phi_img: Matrix,
    pub grad_phi_txt: Matrix,
    pub grad_student_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillTerm {
    pub term: LossTerm,
    pub per_teacher_terms: Vec<(f64, f64)>,
}

/// One direction of one teacher: probabilities and `mean_i Σ_j p ln p`.
#[derive(Clone, Debug)]
struct TargetDirection {
    p: Matrix,
    neg_entropy: f64,
}

impl TargetDirection {
    fn new((p, neg_entropy): (Matrix, f64)) -> Self {
        Self { p, neg_entropy }
    }

    /// `mean_i KL(p_i ‖ q_i)` given student log-probabilities.
    fn kl_against(&self, log_q: &Matrix) -> f64 {
        self.neg_entropy - dot(self.p.data(), log_q.data()) / log_q.rows() as f64
    }
}

/// Teacher-side distributions for a batch. They do not depend on the student,
/// so a data loader can build them once per batch.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    batch: usize,
    per_teacher: Vec<(TargetDirection, TargetDirection)>,
    mean_i2t: Matrix,
    mean_t2i: Matrix,
}

impl TeacherTargets {
    pub fn new(teachers: &[TeacherEmbeddings], scales: &[LogitScale]) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::Config("distillation needs at least one teacher (K = 0)".into()));
        }
        if teachers.len() != scales.len() {
            return Err(Error::shape(
                format!("{} teachers", teachers.len()),
                format!("{} teacher scales", scales.len()),
            ));
        }
        let b = teachers[0].img.rows();
        let mut mean_i2t = Matrix::zeros(b, b);
        let mut mean_t2i = Matrix::zeros(b, b);
        let inv_k = 1.0 / teachers.len() as f64;
        let mut per_teacher = Vec::with_capacity(teachers.len());
        for (t, &scale) in teachers.iter().zip(scales) {
            if t.img.rows() != b || t.txt.rows() != b {
                return Err(Error::shape(format!("batch {b}"), format!("teacher rows {}/{}", t.img.rows(), t.txt.rows())));
            }
            let sims = matmul_nt(&t.img, &t.txt)?;
            let [fwd, rev] = softmax_both_with_entropy(&sims, scale)?;
            let (i2t, t2i) = (TargetDirection::new(fwd), TargetDirection::new(rev));
            mean_i2t.add_scaled(&i2t.p, inv_k)?;
            mean_t2i.add_scaled(&t2i.p, inv_k)?;
            per_teacher.push((i2t, t2i));
        }
        Ok(Self {
            batch: b,
            per_teacher,
            mean_i2t,
            mean_t2i,
        })
    }

    pub fn num_teachers(&self) -> usize {
        self.per_teacher.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Student similarities and both directions' log-softmax.
struct StudentSide {
    sims: Matrix,
    q: Matrix,
    log_q: Matrix,
    qt: Matrix,
    log_qt: Matrix,
}

impl StudentSide {
    fn new(phi_img: &Matrix, phi_txt: &Matrix, scale: LogitScale) -> Result<Self> {
        if phi_img.shape() != phi_txt.shape() {
            return Err(Error::shape(
                format!("phi_img {}x{}", phi_img.rows(), phi_img.cols()),
                format!("phi_txt {}x{}", phi_txt.rows(), phi_txt.cols()),
            ));
        }
        if phi_img.rows() == 0 {
            return Err(Error::Precondition("empty batch (b = 0)".into()));
        }
        let sims = matmul_nt(phi_img, phi_txt)?;
        let [(q, log_q), (qt, log_qt)] = softmax_pair_both(&sims, scale)?;
        Ok(Self {
            sims,
            q,
            log_q,
            qt,
            log_qt,
        })
    }

    fn b(&self) -> usize {
        self.sims.rows()
    }

    fn clip(&self) -> f64 {
        let b = self.b();
        let (mut a, mut c) = (0.0, 0.0);
        for i in 0..b {
            a -= self.log_q[(i, i)];
            c -= self.log_qt[(i, i)];
        }
        0.5 * (a + c) / b as f64
    }
}

/// Gradients of `clip_w · clip + distill_w · distill` with respect to the unit rows and the scale.
fn backward(
    side: &StudentSide,
    phi_img: &Matrix,
    phi_txt: &Matrix,
    scale: LogitScale,
    clip_w: f64,
    distill: Option<(&TeacherTargets, f64)>,
) -> Result<(Matrix, Matrix, f64)> {
    let b = side.b();
    let inv = 1.0 / (2.0 * b as f64);
    // dz[i][j] = ∂/∂(ŝ S_ij)
    let mut dz = Matrix::zeros(b, b);
    let total_w = clip_w + distill.map_or(0.0, |(_, w)| w);
    for i in 0..b {
        for j in 0..b {
            let q = side.q[(i, j)];
            let qt = side.qt[(j, i)];
            let eye = if i == j { 1.0 } else { 0.0 };
            let mut g = total_w * (q + qt) - clip_w * 2.0 * eye;
            if let Some((targets, w)) = distill {
                g -= w * (targets.mean_i2t[(i, j)] + targets.mean_t2i[(j, i)]);
            }
            dz[(i, j)] = inv * g;
        }
    }
    let grad_scale: f64 = dot(dz.data(), side.sims.data());
    let mut ds = dz;
    ds.scale_in_place(scale.get());
    let grad_img = matmul(&ds, phi_txt)?;
    let grad_txt = matmul(&ds.transpose(), phi_img)?;
    Ok((grad_img, grad_txt, grad_scale))
}

fn check_unit_rows(m: &Matrix, what: &'static str) -> Result<()> {
    for (i, r) in m.iter_rows().enumerate() {
        if (norm(r) - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Precondition(format!("{what} row {i} is not unit-norm")));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over the batch.
pub fn clip_loss(phi_img: &Matrix, phi_txt: &Matrix, scale: LogitScale) -> Result<LossTerm> {
    check_unit_rows(phi_img, "phi_img")?;
    check_unit_rows(phi_txt, "phi_txt")?;
    let side = StudentSide::new(phi_img, phi_txt, scale)?;
    let (grad_phi_img, grad_phi_txt, grad_student_scale) = backward(&side, phi_img, phi_txt, scale, 1.0, None)?;
    Ok(LossTerm {
        loss: side.clip(),
        grad_phi_img,
        grad_phi_txt,
        grad_student_scale,
    })
}

fn teacher_targets(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<TeacherTargets> {
    let b = batch.phi_img.rows();
    for (k, t) in batch.teachers.iter().enumerate() {
        if t.img.rows() != b || t.txt.rows() != b {
            return Err(Error::shape(format!("batch of {b}"), format!("teacher {k} with {}/{} rows", t.img.rows(), t.txt.rows())));
        }
        if t.img.cols() != t.txt.cols() {
            return Err(Error::shape(
                format!("teacher {k} img dim {}", t.img.cols()),
                format!("txt dim {}", t.txt.cols()),
            ));
        }
        check_unit_rows(&t.img, "teacher img")?;
        check_unit_rows(&t.txt, "teacher txt")?;
    }
    TeacherTargets::new(&batch.teachers, &cfg.teacher_scales)
}

/// Ensemble KL distillation, averaged over teachers and both directions.
pub fn distill_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<DistillTerm> {
    check_unit_rows(&batch.phi_img, "phi_img")?;
    check_unit_rows(&batch.phi_txt, "phi_txt")?;
    let targets = teacher_targets(batch, cfg)?;
    let side = StudentSide::new(&batch.phi_img, &batch.phi_txt, cfg.student_scale)?;
    let (loss, per_teacher_terms) = distill_value(&side, &targets)?;
    let (gi, gt, gs) = backward(&side, &batch.phi_img, &batch.phi_txt, cfg.student_scale, 0.0, Some((&targets, 1.0)))?;
    Ok(DistillTerm {
        term: LossTerm {
            loss,
            grad_phi_img: gi,
            grad_phi_txt: gt,
            grad_student_scale: gs,
        },
        per_teacher_terms,
    })
}

fn distill_value(side: &StudentSide, targets: &TeacherTargets) -> Result<(f64, Vec<(f64, f64)>)> {
    if targets.batch != side.b() {
        return Err(Error::shape(format!("student batch {}", side.b()), format!("teacher batch {}", targets.batch)));
    }
    let terms: Vec<(f64, f64)> = targets
        .per_teacher
        .iter()
        .map(|(i2t, t2i)| (i2t.kl_against(&side.log_q), t2i.kl_against(&side.log_qt)))
        .collect();
    let k = terms.len() as f64;
    let loss = terms.iter().map(|(a, b)| a + b).sum::<f64>() / (2.0 * k);
    Ok((loss, terms))
}

/// `(1 − λ)·clip + λ·distill` from unit-norm student rows and prebuilt teacher targets.
///
/// `targets` may be `None` only when `λ = 0`; the distillation fields are then zero.
pub fn total_loss_with_targets(
    phi_img: &Matrix,
    phi_txt: &Matrix,
    student_scale: LogitScale,
    lambda: f64,
    targets: Option<&TeacherTargets>,
) -> Result<LossReport> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    if lambda > 0.0 && targets.is_none() {
        return Err(Error::ReinforcementsRequired);
    }
    let side = StudentSide::new(phi_img, phi_txt, student_scale)?;
    let clip = side.clip();
    let (distill, per_teacher_terms) = match targets {
        Some(t) => distill_value(&side, t)?,
        None => (0.0, Vec::new()),
    };
    let distill_arg = targets.filter(|_| lambda > 0.0).map(|t| (t, lambda));
    let (grad_phi_img, grad_phi_txt, grad_student_scale) =
        backward(&side, phi_img, phi_txt, student_scale, 1.0 - lambda, distill_arg)?;
    Ok(LossReport {
        clip_loss: clip,
        distill_loss: distill,
        per_teacher_terms,
        total: (1.0 - lambda) * clip + lambda * distill,
        grad_phi_img,
        grad_phi_txt,
        grad_student_scale,
    })
}

pub fn total_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<LossReport> {
    cfg.validate()?;
    check_unit_rows(&batch.phi_img, "phi_img")?;
    check_unit_rows(&batch.phi_txt, "phi_txt")?;
    let targets = if batch.teachers.is_empty() {
        if cfg.lambda > 0.0 {
            return Err(Error::Config("distillation needs at least one teacher (K = 0)".into()));
        }
        None
    } else {
        Some(teacher_targets(batch, cfg)?)
    };
    total_loss_with_targets(&batch.phi_img, &batch.phi_txt, cfg.student_scale, cfg.lambda, targets.as_ref())
}

/// Carries a gradient w.r.t. `u = x/‖x‖` back to `x`: `(g − u (u·g)) / ‖x‖` per row.
pub fn backprop_normalize(raw: &Matrix, grad_unit: &Matrix) -> Result<Matrix> {
    if raw.shape() != grad_unit.shape() {
        return Err(Error::shape(format!("{:?}", raw.shape()), format!("{:?}", grad_unit.shape())));
    }
    let mut out = grad_unit.clone();
    for i in 0..raw.rows() {
        let x = raw.row(i);
        let n = norm(x);
        if n == 0.0 {
            return Err(Error::ZeroRow { row: i });
        }
        let g = grad_unit.row(i);
        let ug: f64 = x.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / n;
        for (o, (&xv, &gv)) in out.row_mut(i).iter_mut().zip(x.iter().zip(g)) {
            *o = (gv - ug * xv / n) / n;
        }
    }
    Ok(out)
}

/// Suggested step for [`grad_check`].
pub const GRAD_CHECK_EPSILON: f64 = 3e-4;

/// Central differences of `total` over every entry of `Φ_img` and `Φ_txt`,
/// treating the rows as pre-normalization inputs, with two levels of Richardson
/// extrapolation over steps `ε`, `ε/2`, `ε/4`. Returns the maximum of
/// `|analytic − numeric| / max(|numeric|, 1e-8)`.
///
/// Entries far below the largest gradient entry need both a large step (roundoff)
/// and a small truncation error (high curvature at large scales); the
/// extrapolation removes the `h²` and `h⁴` terms so `ε` can stay near 1e-4.
///
/// The numeric side never evaluates the full loss twice and subtracts. It
/// evaluates the increment `f(x ± h) − f(x)` row by row as
/// `ln(1 + Σ_j w_j · expm1(δ_j))`, where `w` is the baseline row softmax and `δ`
/// the shift of each logit relative to the row's target-weighted mean. Saturated
/// rows, whose true gradient can sit near 1e-11, keep full relative precision.
pub fn grad_check(batch: &BatchEmbeddings, cfg: &LossConfig, epsilon: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Precondition(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let report = total_loss(batch, cfg)?;
    let analytic_img = backprop_normalize(&batch.phi_img, &report.grad_phi_img)?;
    let analytic_txt = backprop_normalize(&batch.phi_txt, &report.grad_phi_txt)?;
    let probe = IncrementProbe::new(batch, cfg)?;

    let mut worst: f64 = 0.0;
    for (which, analytic) in [(0, &analytic_img), (1, &analytic_txt)] {
        for idx in 0..analytic.data().len() {
            let step = |h: f64| -> Result<f64> {
                let mut raw = [batch.phi_img.clone(), batch.phi_txt.clone()];
                raw[which].data_mut()[idx] += h;
                probe.increment(&l2_normalize_rows(&raw[0])?, &l2_normalize_rows(&raw[1])?)
            };
            let central = |h: f64| -> Result<f64> { Ok((step(h)? - step(-h)?) / (2.0 * h)) };
            let (d1, d2, d4) = (central(epsilon)?, central(epsilon / 2.0)?, central(epsilon / 4.0)?);
            let numeric = (16.0 * (4.0 * d4 - d2) / 3.0 - (4.0 * d2 - d1) / 3.0) / 15.0;
            let err = (analytic.data()[idx] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Baseline state for evaluating `total(u', v') − total(u, v)` accurately.
struct IncrementProbe {
    img: Matrix,
    txt: Matrix,
    scale: f64,
    /// Row targets `(1 − λ) e_i + λ · mean_k softmax(s_k T_k)_i`, both directions.
    targets: [Matrix; 2],
}

impl IncrementProbe {
    fn new(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<Self> {
        let b = batch.phi_img.rows();
        let mut targets = [Matrix::identity(b), Matrix::identity(b)];
        for t in targets.iter_mut() {
            t.scale_in_place(1.0 - cfg.lambda);
        }
        if cfg.lambda > 0.0 {
            let k = batch.teachers.len() as f64;
            for (t, &s) in batch.teachers.iter().zip(&cfg.teacher_scales) {
                let sims = matmul_nt(&t.img, &t.txt)?;
                targets[0].add_scaled(&softmax_rows(&sims, s)?, cfg.lambda / k)?;
                targets[1].add_scaled(&softmax_rows(&sims.transpose(), s)?, cfg.lambda / k)?;
            }
        }
        Ok(Self {
            img: batch.phi_img.clone(),
            txt: batch.phi_txt.clone(),
            scale: cfg.student_scale.get(),
            targets,
        })
    }

    fn increment(&self, img: &Matrix, txt: &Matrix) -> Result<f64> {
        let s = self.scale;
        let b = img.rows();
        let mut d_img = img.clone();
        d_img.add_scaled(&self.img, -1.0)?;
        let mut d_txt = txt.clone();
        d_txt.add_scaled(&self.txt, -1.0)?;
        // u'v'ᵀ − uvᵀ = Δu v'ᵀ + u Δvᵀ, without forming either product.
        let mut dz = matmul_nt(&d_img, txt)?;
        dz.add_scaled(&matmul_nt(&self.img, &d_txt)?, 1.0)?;
        dz.scale_in_place(s);
        let mut z = matmul_nt(&self.img, &self.txt)?;
        z.scale_in_place(s);

        let mut acc = 0.0;
        for (dir, (z, dz)) in [(z.clone(), dz.clone()), (z.transpose(), dz.transpose())].iter().enumerate() {
            let y = &self.targets[dir];
            for i in 0..b {
                let zr = z.row(i);
                let dzr = dz.row(i);
                let yr = y.row(i);
                let max = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = zr.iter().map(|v| (v - max).exp()).collect();
                let wsum: f64 = weights.iter().sum();
                let shift: f64 = yr.iter().zip(dzr).map(|(a, b)| a * b).sum();
                let inner: f64 = weights
                    .iter()
                    .zip(dzr)
                    .map(|(w, d)| w / wsum * (d - shift).exp_m1())
                    .sum();
                acc += inner.ln_1p();
            }
        }
        Ok(acc / (2.0 * b as f64))
    }
}

/// A batch whose texts come in `1 + N` slots: the ground-truth caption then `N` synthetic ones.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionBatch {
    pub phi_img: Matrix,
    pub phi_txt_slots: Vec<Matrix>,
    /// Per teacher: image embeddings and one text matrix per slot.
    pub teachers: Vec<(Matrix, Vec<Matrix>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedReport {
    pub slots: Vec<LossReport>,
    pub clip_loss: f64,
    pub distill_loss: f64,
    pub total: f64,
    pub grad_phi_img: Matrix,
    pub grad_phi_txt_slots: Vec<Matrix>,
    pub grad_student_scale: f64,
    pub warnings: Vec<String>,
}

/// Per-slot weights: `gt_weight` for slot 0, `syn_weight / N` for each synthetic slot.
pub fn slot_weights(slots: usize, cfg: &LossConfig) -> (Vec<f64>, Vec<String>) {
    let n_syn = slots.saturating_sub(1);
    let mut warnings = Vec::new();
    if n_syn == 0 && cfg.syn_weight > 0.0 {
        warnings.push("no synthetic captions; syn_weight contributes nothing".to_string());
    }
    let weights = (0..slots)
        .map(|j| if j == 0 { cfg.gt_weight } else { cfg.syn_weight / n_syn as f64 })
        .collect();
    (weights, warnings)
}

/// Combines per-slot reports into one weighted objective.
pub fn combine_slots(slots: Vec<LossReport>, weights: &[f64], warnings: Vec<String>) -> Result<ExpandedReport> {
    let first = slots
        .first()
        .ok_or_else(|| Error::Precondition("at least the ground-truth slot is required".into()))?;
    let mut grad_phi_img = Matrix::zeros(first.grad_phi_img.rows(), first.grad_phi_img.cols());
    let (mut clip, mut distill, mut total, mut gs) = (0.0, 0.0, 0.0, 0.0);
    let mut grad_phi_txt_slots = Vec::with_capacity(slots.len());
    for (r, &w) in slots.iter().zip(weights) {
        clip += w * r.clip_loss;
        distill += w * r.distill_loss;
        total += w * r.total;
        gs += w * r.grad_student_scale;
        grad_phi_img.add_scaled(&r.grad_phi_img, w)?;
        let mut g = r.grad_phi_txt.clone();
        g.scale_in_place(w);
        grad_phi_txt_slots.push(g);
    }
    Ok(ExpandedReport {
        slots,
        clip_loss: clip,
        distill_loss: distill,
        total,
        grad_phi_img,
        grad_phi_txt_slots,
        grad_student_scale: gs,
        warnings,
    })
}

/// `gt_weight · total(gt) + syn_weight · mean_j total(syn_j)`, one loss term per caption slot.
pub fn caption_term_expansion(batch: &CaptionBatch, cfg: &LossConfig) -> Result<ExpandedReport> {
    cfg.validate()?;
    let slots = batch.phi_txt_slots.len();
    if slots == 0 {
        return Err(Error::Precondition("at least the ground-truth slot is required".into()));
    }
    for (k, (_, txt)) in batch.teachers.iter().enumerate() {
        if txt.len() != slots {
            return Err(Error::shape(format!("{slots} caption slots"), format!("teacher {k} with {} slots", txt.len())));
        }
    }
    let reports = (0..slots)
        .map(|j| {
            let b = BatchEmbeddings {
                phi_img: batch.phi_img.clone(),
                phi_txt: batch.phi_txt_slots[j].clone(),
                teachers: batch
                    .teachers
                    .iter()
                    .map(|(img, txt)| TeacherEmbeddings {
                        img: img.clone(),
                        txt: txt[j].clone(),
                    })
                    .collect(),
            };
            total_loss(&b, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let (weights, warnings) = slot_weights(slots, cfg);
    combine_slots(reports, &weights, warnings)
}

impl LossReport {
    pub fn grad_norms(&self) -> (f64, f64) {
        (self.grad_phi_img.frobenius_norm(), self.grad_phi_txt.frobenius_norm())
    }
}
