use rand::Rng;
use rand_distr::StandardNormal;

use crate::embedding::{dot, l2_normalize_rows};
use crate::error::{CirkdError, Result};
use crate::matrix::{DenseMatrix, FeatureMap, LabelMap, LogitMap};
use crate::rng::seeded;

/// Deterministic teacher that emits a noisy class prototype per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTeacher {
    /// `C x d` unit prototypes, pairwise cosine below [`Self::MAX_COSINE`].
    pub prototypes: DenseMatrix,
    pub noise: f64,
    /// Logit assigned to the labeled class; other classes get 0.
    pub margin: f64,
}

impl OracleTeacher {
    pub const MAX_COSINE: f64 = 0.5;

    pub fn new(num_classes: usize, dim: usize, noise: f64, margin: f64, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(CirkdError::Param("oracle teacher needs C, d >= 1".into()));
        }
        let mut rng = seeded(seed);
        let prototypes = if num_classes <= dim {
            orthonormal_rows(num_classes, dim, &mut rng)?
        } else {
            rejection_rows(num_classes, dim, &mut rng)?
        };
        Ok(Self {
            prototypes,
            noise,
            margin,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// Features `normalize(prototype[y] + noise)` and logits `margin * one_hot(y)`.
    /// Ignored pixels use prototype 0 and class-0 logits.
    pub fn emit<R: Rng + ?Sized>(&self, labels: &LabelMap, rng: &mut R) -> Result<(FeatureMap, LogitMap)> {
        let c = self.num_classes();
        labels.validate(c)?;
        let d = self.dim();
        let a = labels.area();
        let mut feats = DenseMatrix::zeros(a, d);
        let mut logits = DenseMatrix::zeros(a, c);
        for i in 0..a {
            let cls = labels.class_at(i).unwrap_or(0);
            let row = feats.row_mut(i);
            row.copy_from_slice(self.prototypes.row(cls));
            if self.noise > 0.0 {
                for v in row.iter_mut() {
                    *v += self.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            logits.set(i, cls, self.margin);
        }
        let feats = FeatureMap::new(labels.height(), labels.width(), l2_normalize_rows(&feats)?)?;
        Ok((
            feats.normalized()?,
            LogitMap::new(labels.height(), labels.width(), logits)?,
        ))
    }
}

fn orthonormal_rows<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<DenseMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let p = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    Ok(DenseMatrix::from_rows(&rows))
}

fn rejection_rows<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<DenseMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while rows.len() < n {
        attempts += 1;
        if attempts > 100_000 {
            return Err(CirkdError::Param(format!(
                "cannot place {n} prototypes in {d} dimensions with cosine < {}",
                OracleTeacher::MAX_COSINE
            )));
        }
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        if rows.iter().all(|r| dot(r, &v) < OracleTeacher::MAX_COSINE) {
            rows.push(v);
        }
    }
    Ok(DenseMatrix::from_rows(&rows))
}
