//! Task, pixel-wise KD and cross-image relational distillation losses.
//!
//! Every loss returns its value together with the analytic gradient w.r.t.
//! the student-side inputs. Feature gradients are taken w.r.t. the raw
//! (pre-normalization) student features: losses normalize every embedding
//! before building a similarity and chain the normalization backward.
//! Teacher maps, queue contents and sampled contrastive batches are constants.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    axpy, l2_normalize_rows, l2_normalize_vjp, log_softmax_into, row_kl_with_grad, similarity,
    similarity_vjp, KlDirection, EPS_NORM,
};
use crate::error::{CirkdError, Result};
use crate::matrix::{DenseMatrix, FeatureMap, LabelMap, LogitMap, DEFAULT_IGNORE};
use crate::memory::SampleBatch;

/// Loss weights, temperatures and memory sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the pixel-wise KD term. The full objective uses 1.
    pub kd_weight: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Temperature of the relational similarity softmaxes.
    pub tau: f64,
    /// Temperature of the pixel-wise class-probability KD term.
    pub t_kd: f64,
    /// Teacher pixels pushed per present class per image.
    pub v_push: usize,
    pub k_p: usize,
    pub k_r: usize,
    pub n_p: usize,
    pub n_r: usize,
    pub ignore_index: u8,
    pub kl_reversed: bool,
    pub renormalize_regions: bool,
    /// Drop ignore-labeled anchor rows from the memory losses.
    pub mask_ignored_anchors: bool,
}

impl Default for DistillConfig {
    /// Full-size settings (19-class street scenes, large queues).
    fn default() -> Self {
        Self {
            kd_weight: 1.0,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            tau: 0.1,
            t_kd: 1.0,
            v_push: 16,
            k_p: 4096,
            k_r: 1024,
            n_p: 20_000,
            n_r: 2_000,
            ignore_index: DEFAULT_IGNORE,
            kl_reversed: false,
            renormalize_regions: true,
            mask_ignored_anchors: false,
        }
    }
}

impl DistillConfig {
    /// Sizes for the small synthetic task.
    pub fn desk_scale() -> Self {
        Self {
            v_push: 8,
            k_p: 128,
            k_r: 32,
            n_p: 256,
            n_r: 64,
            ..Self::default()
        }
    }

    pub fn direction(&self) -> KlDirection {
        KlDirection::from_reversed(self.kl_reversed)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let weights = [
            ("kd_weight", self.kd_weight),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(CirkdError::Param(format!("{name} must be >= 0, got {w}")));
            }
        }
        for (name, t) in [("tau", self.tau), ("t_kd", self.t_kd)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CirkdError::Param(format!("{name} must be > 0, got {t}")));
            }
        }
        if self.k_p == 0 || self.k_r == 0 || self.n_p == 0 || self.n_r == 0 {
            return Err(CirkdError::Param("queue sizes and sample counts must be >= 1".into()));
        }
        if self.k_p > num_classes * self.n_p {
            return Err(CirkdError::Param(format!(
                "k_p = {} exceeds C * n_p = {}",
                self.k_p,
                num_classes * self.n_p
            )));
        }
        if self.k_r > num_classes * self.n_r {
            return Err(CirkdError::Param(format!(
                "k_r = {} exceeds C * n_r = {}",
                self.k_r,
                num_classes * self.n_r
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Gradient w.r.t. the raw student feature map.
    pub grad_feat: Option<DenseMatrix>,
    /// Gradient w.r.t. the student logit map.
    pub grad_logits: Option<DenseMatrix>,
}

/// Shared knobs of the similarity-distribution losses.
#[derive(Debug, Clone, Copy)]
pub struct RelationOpts<'a> {
    pub tau: f64,
    pub direction: KlDirection,
    /// When set, only rows flagged `true` act as anchors.
    pub anchor_mask: Option<&'a [bool]>,
}

impl RelationOpts<'_> {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            direction: KlDirection::StudentFirst,
            anchor_mask: None,
        }
    }

    pub fn with_direction(mut self, direction: KlDirection) -> Self {
        self.direction = direction;
        self
    }
}

/// Mean cross-entropy over non-ignored pixels.
pub fn task_ce_loss(logits: &LogitMap, labels: &LabelMap) -> Result<LossResult> {
    if labels.area() != logits.flat().rows() {
        return Err(CirkdError::shape(
            "task_ce_loss",
            format!(
                "{} labels for {} logit rows",
                labels.area(),
                logits.flat().rows()
            ),
        ));
    }
    let c = logits.num_classes();
    labels.validate(c)?;
    let valid = (0..labels.area()).filter(|&i| !labels.is_ignored(i)).count();
    if valid == 0 {
        return Err(CirkdError::EmptySupervision);
    }
    let inv = 1.0 / valid as f64;
    let mut grad = DenseMatrix::zeros(labels.area(), c);
    let mut logp = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..labels.area() {
        let Some(y) = labels.class_at(i) else { continue };
        log_softmax_into(logits.flat().row(i), 1.0, &mut logp);
        total -= logp[y];
        for (k, (g, lp)) in grad.row_mut(i).iter_mut().zip(&logp).enumerate() {
            *g = inv * (lp.exp() - if k == y { 1.0 } else { 0.0 });
        }
    }
    Ok(LossResult {
        value: total * inv,
        grad_feat: None,
        grad_logits: Some(grad),
    })
}

/// Per-pixel KL between temperature softmaxes of student and teacher logits,
/// averaged over all `H * W` pixels. No `T^2` factor is applied.
pub fn kd_pixel_loss(
    student: &LogitMap,
    teacher: &LogitMap,
    t_kd: f64,
    direction: KlDirection,
) -> Result<LossResult> {
    if student.flat().shape() != teacher.flat().shape() {
        return Err(CirkdError::shape(
            "kd_pixel_loss",
            format!(
                "{:?} vs {:?}",
                student.flat().shape(),
                teacher.flat().shape()
            ),
        ));
    }
    let (value, grad) = row_kl_with_grad(student.flat(), teacher.flat(), t_kd, direction)?;
    Ok(LossResult {
        value,
        grad_feat: None,
        grad_logits: Some(grad),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossResult {
    pub value: f64,
    /// One gradient per student map, w.r.t. its raw features.
    pub grad_feats: Vec<DenseMatrix>,
}

fn unit_rows(map: &FeatureMap) -> Result<DenseMatrix> {
    if map.is_normalized() {
        Ok(map.flat().clone())
    } else {
        l2_normalize_rows(map.flat())
    }
}

/// Mini-batch pixel-to-pixel distillation over every ordered image pair,
/// self-pairs included: `(1/N^2) sum_ij KL-rows(F_i^s F_j^s^T, F_i^t F_j^t^T)`.
pub fn batch_p2p_loss(
    student: &[FeatureMap],
    teacher: &[FeatureMap],
    opts: &RelationOpts,
) -> Result<BatchLossResult> {
    let n = student.len();
    if n == 0 {
        return Err(CirkdError::Param("batch_p2p_loss needs at least one image".into()));
    }
    if teacher.len() != n {
        return Err(CirkdError::shape(
            "batch_p2p_loss",
            format!("{n} student maps vs {} teacher maps", teacher.len()),
        ));
    }
    let area = student[0].area();
    for (i, (s, t)) in student.iter().zip(teacher).enumerate() {
        if s.area() != area || t.area() != area {
            return Err(CirkdError::shape(
                "batch_p2p_loss",
                format!("image {i}: areas {} / {} vs {area}", s.area(), t.area()),
            ));
        }
        if s.dim() != student[0].dim() || t.dim() != teacher[0].dim() {
            return Err(CirkdError::shape("batch_p2p_loss", format!("image {i}: embedding dim differs")));
        }
    }
    let us: Vec<DenseMatrix> = student.iter().map(unit_rows).collect::<Result<_>>()?;
    let ut: Vec<DenseMatrix> = teacher.iter().map(unit_rows).collect::<Result<_>>()?;

    let pair_weight = 1.0 / (n * n) as f64;
    let mut grad_units: Vec<DenseMatrix> = us
        .iter()
        .map(|u| DenseMatrix::zeros(u.rows(), u.cols()))
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s_s = similarity(&us[i], &us[j])?;
            let s_t = similarity(&ut[i], &ut[j])?;
            let (v, mut g) = row_kl_with_grad(&s_s, &s_t, opts.tau, opts.direction)?;
            total += pair_weight * v;
            g.scale(pair_weight);
            let (gi, gj) = similarity_vjp(&us[i], &us[j], &g)?;
            grad_units[i].add_scaled(&gi, 1.0)?;
            grad_units[j].add_scaled(&gj, 1.0)?;
        }
    }
    let grad_feats = student
        .iter()
        .zip(&grad_units)
        .map(|(s, g)| l2_normalize_vjp(s.flat(), g))
        .collect::<Result<_>>()?;
    Ok(BatchLossResult {
        value: total,
        grad_feats,
    })
}

/// Shared body of the two memory-based losses: anchors from the current
/// image against a fixed contrastive batch.
fn memory_relation_loss(
    op: &'static str,
    student: &FeatureMap,
    teacher: &FeatureMap,
    contrast: &SampleBatch,
    opts: &RelationOpts,
) -> Result<LossResult> {
    if student.area() != teacher.area() {
        return Err(CirkdError::shape(
            op,
            format!("student area {} vs teacher area {}", student.area(), teacher.area()),
        ));
    }
    let d = contrast.embeddings.cols();
    if student.dim() != d || teacher.dim() != d {
        return Err(CirkdError::shape(
            op,
            format!(
                "student dim {}, teacher dim {}, contrastive dim {d}",
                student.dim(),
                teacher.dim()
            ),
        ));
    }
    let us = unit_rows(student)?;
    let ut = unit_rows(teacher)?;

    let kept: Option<Vec<usize>> = match opts.anchor_mask {
        None => None,
        Some(mask) => {
            if mask.len() != student.area() {
                return Err(CirkdError::shape(op, "anchor mask length differs from map area"));
            }
            Some((0..mask.len()).filter(|&i| mask[i]).collect())
        }
    };
    let (us_a, ut_a) = match &kept {
        None => (us.clone(), ut),
        Some(rows) => (gather_rows(&us, rows), gather_rows(&ut, rows)),
    };
    if us_a.rows() == 0 {
        return Ok(LossResult {
            value: 0.0,
            grad_feat: Some(DenseMatrix::zeros(student.area(), d)),
            grad_logits: None,
        });
    }

    let p_s = similarity(&us_a, &contrast.embeddings)?;
    let p_t = similarity(&ut_a, &contrast.embeddings)?;
    let (value, g) = row_kl_with_grad(&p_s, &p_t, opts.tau, opts.direction)?;
    let (g_anchor, _) = similarity_vjp(&us_a, &contrast.embeddings, &g)?;
    let g_units = match &kept {
        None => g_anchor,
        Some(rows) => {
            let mut full = DenseMatrix::zeros(student.area(), d);
            for (k, &r) in rows.iter().enumerate() {
                full.row_mut(r).copy_from_slice(g_anchor.row(k));
            }
            full
        }
    };
    let grad = l2_normalize_vjp(student.flat(), &g_units)?;
    Ok(LossResult {
        value,
        grad_feat: Some(grad),
        grad_logits: None,
    })
}

fn gather_rows(m: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows.len(), m.cols());
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).copy_from_slice(m.row(r));
    }
    out
}

/// Memory-based pixel-to-pixel loss against contrastive pixel embeddings.
pub fn memory_p2p_loss(
    student: &FeatureMap,
    teacher: &FeatureMap,
    pixels: &SampleBatch,
    opts: &RelationOpts,
) -> Result<LossResult> {
    memory_relation_loss("memory_p2p_loss", student, teacher, pixels, opts)
}

/// Memory-based pixel-to-region loss against contrastive region embeddings.
pub fn memory_p2r_loss(
    student: &FeatureMap,
    teacher: &FeatureMap,
    regions: &SampleBatch,
    opts: &RelationOpts,
) -> Result<LossResult> {
    memory_relation_loss("memory_p2r_loss", student, teacher, regions, opts)
}

fn check_label_alignment(op: &'static str, map: &FeatureMap, labels: &LabelMap) -> Result<()> {
    if map.height() != labels.height() || map.width() != labels.width() {
        return Err(CirkdError::shape(
            op,
            format!(
                "labels {}x{} vs features {}x{}",
                labels.height(),
                labels.width(),
                map.height(),
                map.width()
            ),
        ));
    }
    Ok(())
}

/// Per-class mean of teacher pixel embeddings, one row per present class in
/// ascending class order.
///
/// With `renormalize` set, each mean is scaled back to unit length; a class
/// whose mean has (numerically) zero norm has no direction and is dropped.
pub fn region_pool(
    teacher: &FeatureMap,
    labels: &LabelMap,
    renormalize: bool,
) -> Result<(DenseMatrix, Vec<usize>)> {
    check_label_alignment("region_pool", teacher, labels)?;
    let units = unit_rows(teacher)?;
    let d = units.cols();
    let mut sums: Vec<(usize, Vec<f64>, usize)> = Vec::new();
    for i in 0..labels.area() {
        let Some(c) = labels.class_at(i) else { continue };
        let pos = match sums.binary_search_by_key(&c, |e| e.0) {
            Ok(p) => p,
            Err(p) => {
                sums.insert(p, (c, vec![0.0; d], 0));
                p
            }
        };
        axpy(&mut sums[pos].1, 1.0, units.row(i));
        sums[pos].2 += 1;
    }
    let mut data = Vec::with_capacity(sums.len() * d);
    let mut ids = Vec::with_capacity(sums.len());
    for (c, mut sum, count) in sums {
        sum.iter_mut().for_each(|v| *v /= count as f64);
        if renormalize {
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < EPS_NORM {
                continue;
            }
            sum.iter_mut().for_each(|v| *v /= norm);
        }
        data.extend_from_slice(&sum);
        ids.push(c);
    }
    Ok((DenseMatrix::new(ids.len(), d, data)?, ids))
}

/// Picks up to `v_push` teacher pixel embeddings per present class, uniformly
/// without replacement. Entry `c` of the result holds class `c`'s picks.
pub fn select_queue_pixels<R: Rng + ?Sized>(
    teacher: &FeatureMap,
    labels: &LabelMap,
    num_classes: usize,
    v_push: usize,
    rng: &mut R,
) -> Result<Vec<DenseMatrix>> {
    check_label_alignment("select_queue_pixels", teacher, labels)?;
    labels.validate(num_classes)?;
    let units = unit_rows(teacher)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for i in 0..labels.area() {
        if let Some(c) = labels.class_at(i) {
            by_class[c].push(i);
        }
    }
    Ok(by_class
        .iter()
        .map(|pixels| {
            let take = v_push.min(pixels.len());
            let picks = index::sample(rng, pixels.len(), take);
            let rows: Vec<usize> = picks.into_iter().map(|k| pixels[k]).collect();
            gather_rows(&units, &rows)
        })
        .collect())
}

/// Everything the full objective consumes for one mini-batch.
///
/// `labels` must be at the logit/feature resolution.
#[derive(Debug, Clone, Copy)]
pub struct CirkdInputs<'a> {
    pub student_feats: &'a [FeatureMap],
    pub teacher_feats: &'a [FeatureMap],
    pub student_logits: &'a [LogitMap],
    pub teacher_logits: &'a [LogitMap],
    pub labels: &'a [LabelMap],
    pub pixel_samples: Option<&'a SampleBatch>,
    pub region_samples: Option<&'a SampleBatch>,
}

/// Unweighted value of each term; skipped terms are reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub kd: f64,
    pub batch_p2p: f64,
    pub memory_p2p: f64,
    pub memory_p2r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub parts: LossBreakdown,
    /// Gradients w.r.t. the raw student features, one per image.
    pub grad_feats: Vec<DenseMatrix>,
    /// Gradients w.r.t. the student logits, one per image.
    pub grad_logits: Vec<DenseMatrix>,
}

/// `L_task + w_kd L_kd + alpha L_batch_p2p + beta L_memory_p2p + gamma L_memory_p2r`.
///
/// Per-image terms are averaged over the batch. A term whose weight is zero
/// is not evaluated.
pub fn cirkd_total(inputs: &CirkdInputs, cfg: &DistillConfig) -> Result<TotalLoss> {
    let n = inputs.student_logits.len();
    if n == 0 {
        return Err(CirkdError::Param("empty batch".into()));
    }
    for (name, len) in [
        ("student_feats", inputs.student_feats.len()),
        ("teacher_feats", inputs.teacher_feats.len()),
        ("teacher_logits", inputs.teacher_logits.len()),
        ("labels", inputs.labels.len()),
    ] {
        if len != n {
            return Err(CirkdError::shape(
                "cirkd_total",
                format!("{name} has {len} entries for a batch of {n}"),
            ));
        }
    }
    let batch_w = 1.0 / n as f64;
    let direction = cfg.direction();
    let opts = RelationOpts::new(cfg.tau).with_direction(direction);

    let mut parts = LossBreakdown::default();
    let mut grad_logits = Vec::with_capacity(n);
    let mut grad_feats: Vec<DenseMatrix> = inputs
        .student_feats
        .iter()
        .map(|f| DenseMatrix::zeros(f.area(), f.dim()))
        .collect();

    for i in 0..n {
        let task = task_ce_loss(&inputs.student_logits[i], &inputs.labels[i])?;
        parts.task += batch_w * task.value;
        let mut g = task.grad_logits.expect("task loss yields logit grads");
        g.scale(batch_w);
        if cfg.kd_weight > 0.0 {
            let kd = kd_pixel_loss(
                &inputs.student_logits[i],
                &inputs.teacher_logits[i],
                cfg.t_kd,
                direction,
            )?;
            parts.kd += batch_w * kd.value;
            g.add_scaled(kd.grad_logits.as_ref().unwrap(), cfg.kd_weight * batch_w)?;
        }
        grad_logits.push(g);
    }

    if cfg.alpha > 0.0 {
        let bp = batch_p2p_loss(inputs.student_feats, inputs.teacher_feats, &opts)?;
        parts.batch_p2p = bp.value;
        for (acc, g) in grad_feats.iter_mut().zip(&bp.grad_feats) {
            acc.add_scaled(g, cfg.alpha)?;
        }
    }

    let memory_terms = [
        (cfg.beta, inputs.pixel_samples, "pixel"),
        (cfg.gamma, inputs.region_samples, "region"),
    ];
    for (slot, (weight, samples, what)) in memory_terms.into_iter().enumerate() {
        if weight <= 0.0 {
            continue;
        }
        let samples = samples.ok_or_else(|| {
            CirkdError::Param(format!("{what} contrastive samples required for a nonzero weight"))
        })?;
        let mut acc = 0.0;
        for i in 0..n {
            let mask: Option<Vec<bool>> = cfg.mask_ignored_anchors.then(|| {
                let y = &inputs.labels[i];
                (0..y.area()).map(|k| !y.is_ignored(k)).collect()
            });
            let opts = RelationOpts {
                anchor_mask: mask.as_deref(),
                ..opts
            };
            let r = memory_relation_loss(
                if slot == 0 { "memory_p2p_loss" } else { "memory_p2r_loss" },
                &inputs.student_feats[i],
                &inputs.teacher_feats[i],
                samples,
                &opts,
            )?;
            acc += batch_w * r.value;
            grad_feats[i].add_scaled(r.grad_feat.as_ref().unwrap(), weight * batch_w)?;
        }
        if slot == 0 {
            parts.memory_p2p = acc;
        } else {
            parts.memory_p2r = acc;
        }
    }

    let value = parts.task
        + cfg.kd_weight * parts.kd
        + cfg.alpha * parts.batch_p2p
        + cfg.beta * parts.memory_p2p
        + cfg.gamma * parts.memory_p2r;
    Ok(TotalLoss {
        value,
        parts,
        grad_feats,
        grad_logits,
    })
}
