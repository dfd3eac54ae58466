//! Row normalization, similarity, temperature softmax and KL kernels.
//!
//! Each kernel that feeds a loss comes with its analytic backward pass.
//! All of them are pure functions over borrowed inputs.

use crate::error::{CirkdError, Result};
use crate::matrix::DenseMatrix;

/// Rows with a Euclidean norm below this are treated as zero embeddings.
pub const EPS_NORM: f64 = 1e-12;

/// Which argument of the KL divergence the student distribution occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL(student || teacher)`, the order the relational losses are written in.
    #[default]
    StudentFirst,
    /// `KL(teacher || student)`, the usual Hinton-style order.
    TeacherFirst,
}

impl KlDirection {
    pub fn from_reversed(reversed: bool) -> Self {
        if reversed {
            KlDirection::TeacherFirst
        } else {
            KlDirection::StudentFirst
        }
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(CirkdError::Param(format!(
            "temperature must be positive and finite, got {tau}"
        )))
    }
}

pub fn l2_normalize_rows(m: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let norm = row_norm(row);
        if !(norm >= EPS_NORM) {
            return Err(CirkdError::DegenerateEmbedding { row: i, norm });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Pulls `upstream` (a gradient w.r.t. `normalize(m)`) back to `m`.
///
/// Per row: `(g - <g, u> u) / |m_i|` where `u` is the unit row.
pub fn l2_normalize_vjp(m: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
    if m.shape() != upstream.shape() {
        return Err(CirkdError::shape(
            "l2_normalize_vjp",
            format!("{:?} vs {:?}", m.shape(), upstream.shape()),
        ));
    }
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let x = m.row(i);
        let norm = row_norm(x);
        if !(norm >= EPS_NORM) {
            return Err(CirkdError::DegenerateEmbedding { row: i, norm });
        }
        let g = upstream.row(i);
        let radial: f64 = x.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / norm;
        for ((o, &xv), &gv) in out.row_mut(i).iter_mut().zip(x).zip(g) {
            *o = (gv - radial * xv / norm) / norm;
        }
    }
    Ok(out)
}

/// `out[a, k] = <fa_a, fb_k>`, i.e. `fa * fb^T`.
pub fn similarity(fa: &DenseMatrix, fb: &DenseMatrix) -> Result<DenseMatrix> {
    if fa.cols() != fb.cols() {
        return Err(CirkdError::shape(
            "similarity",
            format!("embedding dims {} vs {}", fa.cols(), fb.cols()),
        ));
    }
    let k = fb.rows();
    let mut out = DenseMatrix::zeros(fa.rows(), k);
    for a in 0..fa.rows() {
        let x = fa.row(a);
        let dst = out.row_mut(a);
        for (j, o) in dst.iter_mut().enumerate() {
            *o = dot(x, fb.row(j));
        }
    }
    Ok(out)
}

/// Backward of [`similarity`]: returns `(g * fb, g^T * fa)`.
pub fn similarity_vjp(
    fa: &DenseMatrix,
    fb: &DenseMatrix,
    grad: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if grad.shape() != (fa.rows(), fb.rows()) || fa.cols() != fb.cols() {
        return Err(CirkdError::shape(
            "similarity_vjp",
            format!(
                "grad {:?} for {:?} x {:?}^T",
                grad.shape(),
                fa.shape(),
                fb.shape()
            ),
        ));
    }
    let d = fa.cols();
    let mut ga = DenseMatrix::zeros(fa.rows(), d);
    let mut gb = DenseMatrix::zeros(fb.rows(), d);
    for a in 0..fa.rows() {
        let g_row = grad.row(a);
        let x = fa.row(a);
        let ga_row = ga.row_mut(a);
        for (k, &g) in g_row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(ga_row, g, fb.row(k));
            axpy(gb.row_mut(k), g, x);
        }
    }
    Ok((ga, gb))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(dst: &mut [f64], k: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Writes `log softmax(row / tau)` into `out`.
pub(crate) fn log_softmax_into(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max) / tau;
        sum += o.exp();
    }
    let lse = sum.ln();
    out.iter_mut().for_each(|o| *o -= lse);
}

pub fn row_softmax(s: &DenseMatrix, tau: f64) -> Result<DenseMatrix> {
    check_tau(tau)?;
    if !s.is_finite() {
        return Err(CirkdError::Param("row_softmax input is not finite".into()));
    }
    let mut out = DenseMatrix::zeros(s.rows(), s.cols());
    for i in 0..s.rows() {
        let dst = out.row_mut(i);
        log_softmax_into(s.row(i), tau, dst);
        dst.iter_mut().for_each(|v| *v = v.exp());
    }
    Ok(out)
}

/// Mean row KL between temperature softmaxes, with the gradient w.r.t. `s_student`.
///
/// Uses the student-first order `KL(softmax(s_s/tau) || softmax(s_t/tau))`.
pub fn row_softmax_kl_with_grad(
    s_student: &DenseMatrix,
    s_teacher: &DenseMatrix,
    tau: f64,
) -> Result<(f64, DenseMatrix)> {
    row_kl_with_grad(s_student, s_teacher, tau, KlDirection::StudentFirst)
}

/// Mean over rows of the temperature-softmax KL divergence in the given direction.
pub fn row_kl_with_grad(
    s_student: &DenseMatrix,
    s_teacher: &DenseMatrix,
    tau: f64,
    direction: KlDirection,
) -> Result<(f64, DenseMatrix)> {
    check_tau(tau)?;
    if s_student.shape() != s_teacher.shape() {
        return Err(CirkdError::shape(
            "row_softmax_kl_with_grad",
            format!("{:?} vs {:?}", s_student.shape(), s_teacher.shape()),
        ));
    }
    let (rows, cols) = s_student.shape();
    let mut grad = DenseMatrix::zeros(rows, cols);
    if rows == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / rows as f64;
    let mut ls = vec![0.0; cols];
    let mut lt = vec![0.0; cols];
    let mut total = 0.0;
    for i in 0..rows {
        log_softmax_into(s_student.row(i), tau, &mut ls);
        log_softmax_into(s_teacher.row(i), tau, &mut lt);
        let g = grad.row_mut(i);
        match direction {
            KlDirection::StudentFirst => {
                let kl: f64 = ls
                    .iter()
                    .zip(&lt)
                    .map(|(a, b)| a.exp() * (a - b))
                    .sum();
                total += kl;
                for ((gv, a), b) in g.iter_mut().zip(&ls).zip(&lt) {
                    *gv = scale / tau * a.exp() * (a - b - kl);
                }
            }
            KlDirection::TeacherFirst => {
                let kl: f64 = ls
                    .iter()
                    .zip(&lt)
                    .map(|(a, b)| b.exp() * (b - a))
                    .sum();
                total += kl;
                for ((gv, a), b) in g.iter_mut().zip(&ls).zip(&lt) {
                    *gv = scale / tau * (a.exp() - b.exp());
                }
            }
        }
    }
    Ok((total * scale, grad))
}
