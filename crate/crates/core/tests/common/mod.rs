//! Test oracles: brute-force loss formulas in double-double arithmetic and
//! a naive bounded-list queue.
//!
//! The formulas never call into the library's kernels: inputs are plain
//! `f64` slices and every softmax, log and KL is composed directly.

#![allow(dead_code)]

use std::collections::VecDeque;
use std::ops::{Add, Div, Mul, Neg, Sub};

use cirkd::embedding::l2_normalize_rows;
use cirkd::losses::{
    batch_p2p_loss, cirkd_total, kd_pixel_loss, memory_p2p_loss, memory_p2r_loss, region_pool,
    task_ce_loss, CirkdInputs, DistillConfig, RelationOpts,
};
use cirkd::memory::{ClassQueue, SampleBatch};
use cirkd::{DenseMatrix, FeatureMap, LabelMap, LogitMap, DEFAULT_IGNORE};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// Multiplies by a power of two, exactly.
    fn ldexp(self, k: i32) -> Dd {
        let s = 2f64.powi(k);
        Dd { hi: self.hi * s, lo: self.lo * s }
    }

    pub fn exp(self) -> Dd {
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::from(k)).ldexp(-6);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..=20 {
            term = term * r / Dd::from(n as f64);
            sum = sum + term;
        }
        for _ in 0..6 {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }

    pub fn ln(self) -> Dd {
        assert!(self.hi > 0.0, "ln of a non-positive value");
        let mut y = Dd::from(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn sqrt(self) -> Dd {
        if self.hi == 0.0 {
            return Dd::ZERO;
        }
        let y = Dd::from(self.hi.sqrt());
        y + (self - y * y) / (y + y)
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from(q2);
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2) + Dd::from(q3)
    }
}

fn sum(it: impl IntoIterator<Item = Dd>) -> Dd {
    it.into_iter().fold(Dd::ZERO, |a, b| a + b)
}

/// Log of the softmax of `z / t`.
fn log_softmax(z: &[Dd], t: Dd) -> Vec<Dd> {
    let scaled: Vec<Dd> = z.iter().map(|&v| v / t).collect();
    let m = scaled.iter().map(|v| v.hi).fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<Dd> = scaled.iter().map(|&v| v - Dd::from(m)).collect();
    let log_z = sum(shifted.iter().map(|v| v.exp())).ln();
    shifted.into_iter().map(|v| v - log_z).collect()
}

/// `KL(softmax(p / t) || softmax(q / t))`.
fn kl(p: &[Dd], q: &[Dd], t: Dd) -> Dd {
    let lp = log_softmax(p, t);
    let lq = log_softmax(q, t);
    sum(lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)))
}

fn lift(v: &[f64]) -> Vec<Dd> {
    v.iter().map(|&x| Dd::from(x)).collect()
}

fn normalize(rows: &[f64], d: usize) -> Vec<Vec<Dd>> {
    rows.chunks(d)
        .map(|r| {
            let r = lift(r);
            let norm = sum(r.iter().map(|&v| v * v)).sqrt();
            r.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

fn gram(a: &[Vec<Dd>], b: &[Vec<Dd>]) -> Vec<Vec<Dd>> {
    a.iter()
        .map(|x| b.iter().map(|y| sum(x.iter().zip(y).map(|(&p, &q)| p * q))).collect())
        .collect()
}

fn mean_row_kl(s: &[Vec<Dd>], t: &[Vec<Dd>], tau: f64) -> Dd {
    let total = sum(s.iter().zip(t).map(|(a, b)| kl(a, b, Dd::from(tau))));
    total / Dd::from(s.len() as f64)
}

/// Cross-entropy averaged over the non-ignored pixels of one image.
pub fn task_loss(logits: &[f64], c: usize, labels: &[u8], ignore: u8) -> f64 {
    let mut total = Dd::ZERO;
    let mut count = 0usize;
    for (row, &y) in logits.chunks(c).zip(labels) {
        if y == ignore {
            continue;
        }
        total = total - log_softmax(&lift(row), Dd::ONE)[y as usize];
        count += 1;
    }
    if count == 0 {
        return 0.0;
    }
    (total / Dd::from(count as f64)).to_f64()
}

/// Pixel KL between class distributions, averaged over pixels.
pub fn kd_loss(student: &[f64], teacher: &[f64], c: usize, t_kd: f64) -> f64 {
    let pixels = student.len() / c;
    let total = sum(
        student
            .chunks(c)
            .zip(teacher.chunks(c))
            .map(|(s, t)| kl(&lift(s), &lift(t), Dd::from(t_kd))),
    );
    (total / Dd::from(pixels as f64)).to_f64()
}

/// Mean over every ordered image pair of the row KL between normalized
/// student and teacher cross-image similarity matrices.
pub fn batch_p2p(student: &[Vec<f64>], ds: usize, teacher: &[Vec<f64>], dt: usize, tau: f64) -> f64 {
    let s: Vec<_> = student.iter().map(|m| normalize(m, ds)).collect();
    let t: Vec<_> = teacher.iter().map(|m| normalize(m, dt)).collect();
    let n = s.len();
    let mut total = Dd::ZERO;
    for i in 0..n {
        for j in 0..n {
            total = total + mean_row_kl(&gram(&s[i], &s[j]), &gram(&t[i], &t[j]), tau);
        }
    }
    (total / Dd::from((n * n) as f64)).to_f64()
}

/// Row KL between anchor-to-contrast similarities of student and teacher.
pub fn memory_loss(student: &[f64], teacher: &[f64], d: usize, contrast: &[f64], tau: f64) -> f64 {
    let v: Vec<Vec<Dd>> = contrast.chunks(d).map(lift).collect();
    let ps = gram(&normalize(student, d), &v);
    let pt = gram(&normalize(teacher, d), &v);
    mean_row_kl(&ps, &pt, tau).to_f64()
}

/// Per-class mean of normalized teacher pixels, renormalized, ascending class.
pub fn region_means(teacher: &[f64], d: usize, labels: &[u8], ignore: u8) -> Vec<(usize, Vec<f64>)> {
    let units = normalize(teacher, d);
    let mut classes: Vec<u8> = labels.iter().copied().filter(|&y| y != ignore).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .filter_map(|c| {
            let members: Vec<&Vec<Dd>> = units.iter().zip(labels).filter(|(_, &y)| y == c).map(|(u, _)| u).collect();
            let mean: Vec<Dd> = (0..d)
                .map(|k| sum(members.iter().map(|u| u[k])) / Dd::from(members.len() as f64))
                .collect();
            let norm = sum(mean.iter().map(|&v| v * v)).sqrt();
            // a mean with no direction is dropped
            (norm.hi >= 1e-12).then(|| (c as usize, mean.into_iter().map(|v| (v / norm).to_f64()).collect()))
        })
        .collect()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

fn units(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> DenseMatrix {
    let m = DenseMatrix::new(rows, d, normals(rng, rows * d)).unwrap();
    l2_normalize_rows(&m).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, area: usize, c: usize) -> Vec<u8> {
    let mut v: Vec<u8> = (0..area)
        .map(|_| if rng.gen_bool(0.2) { DEFAULT_IGNORE } else { rng.gen_range(0..c) as u8 })
        .collect();
    v[0] = 0;
    v
}

/// Largest absolute gap between each kernel and its brute-force formula over
/// `instances` random cases with `A, K <= 8`.
pub fn formula_gaps(seed: u64, instances: usize) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaps = vec![
        ("task", 0.0f64),
        ("kd", 0.0),
        ("batch_p2p", 0.0),
        ("memory_p2p", 0.0),
        ("region_pool", 0.0),
        ("memory_p2r", 0.0),
        ("total", 0.0),
    ];
    let mut record = |i: usize, gap: f64| gaps[i].1 = gaps[i].1.max(gap);
    for _ in 0..instances {
        let n = rng.gen_range(1..=3);
        let (h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=4));
        let a = h * w;
        let c = rng.gen_range(2..=4);
        let d = rng.gen_range(1..=5);
        let dt = rng.gen_range(1..=5);
        let tau = [0.05, 0.1, 0.5, 1.0][rng.gen_range(0..4)];
        let t_kd = [1.0, 2.0, 4.0][rng.gen_range(0..3)];
        let k = rng.gen_range(1..=8);

        let sf: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, a * d)).collect();
        let tf_wide: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, a * dt)).collect();
        let tf: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, a * d)).collect();
        let sl: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, a * c).iter().map(|v| 3.0 * v).collect()).collect();
        let tl: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, a * c).iter().map(|v| 3.0 * v).collect()).collect();
        let labels: Vec<Vec<u8>> = (0..n).map(|_| random_labels(&mut rng, a, c)).collect();
        let pixels = units(&mut rng, k, d);

        let fmap = |v: &Vec<f64>, dim: usize| FeatureMap::new(h, w, DenseMatrix::new(a, dim, v.clone()).unwrap()).unwrap();
        let lmap = |v: &Vec<f64>| LogitMap::new(h, w, DenseMatrix::new(a, c, v.clone()).unwrap()).unwrap();
        let labmap = |v: &Vec<u8>| LabelMap::new(h, w, v.clone(), DEFAULT_IGNORE).unwrap();
        let opts = RelationOpts::new(tau);

        let mut task_sum = 0.0;
        let mut kd_sum = 0.0;
        let mut mp_sum = 0.0;
        let mut mr_sum = 0.0;
        let mut regions = Vec::new();
        for i in 0..n {
            let oracle_task = task_loss(&sl[i], c, &labels[i], DEFAULT_IGNORE);
            record(0, (task_ce_loss(&lmap(&sl[i]), &labmap(&labels[i])).unwrap().value - oracle_task).abs());
            task_sum += oracle_task;

            let oracle_kd = kd_loss(&sl[i], &tl[i], c, t_kd);
            let kernel = kd_pixel_loss(&lmap(&sl[i]), &lmap(&tl[i]), t_kd, Default::default()).unwrap();
            record(1, (kernel.value - oracle_kd).abs());
            kd_sum += oracle_kd;

            let oracle_mp = memory_loss(&sf[i], &tf[i], d, pixels.data(), tau);
            let kernel = memory_p2p_loss(&fmap(&sf[i], d), &fmap(&tf[i], d), &SampleBatch {
                embeddings: pixels.clone(),
                class_ids: vec![0; k],
            }, &opts)
            .unwrap();
            record(3, (kernel.value - oracle_mp).abs());
            mp_sum += oracle_mp;

            let pooled = region_means(&tf[i], d, &labels[i], DEFAULT_IGNORE);
            let (kernel_rows, kernel_ids) = region_pool(&fmap(&tf[i], d), &labmap(&labels[i]), true).unwrap();
            let ids: Vec<usize> = pooled.iter().map(|(c, _)| *c).collect();
            assert_eq!(kernel_ids, ids);
            for (row, (_, mean)) in kernel_rows.row_iter().zip(&pooled) {
                for (x, y) in row.iter().zip(mean) {
                    record(4, (x - y).abs());
                }
            }
            regions.extend(pooled);
        }

        // region contrast set: pooled teacher regions, capped at 8
        regions.truncate(8);
        if regions.is_empty() {
            regions.push((0, units(&mut rng, 1, d).into_data()));
        }
        let region_rows: Vec<f64> = regions.iter().flat_map(|(_, v)| v.clone()).collect();
        let region_batch = SampleBatch {
            embeddings: DenseMatrix::new(regions.len(), d, region_rows.clone()).unwrap(),
            class_ids: regions.iter().map(|(c, _)| *c).collect(),
        };
        for i in 0..n {
            let oracle_mr = memory_loss(&sf[i], &tf[i], d, &region_rows, tau);
            let kernel = memory_p2r_loss(&fmap(&sf[i], d), &fmap(&tf[i], d), &region_batch, &opts).unwrap();
            record(5, (kernel.value - oracle_mr).abs());
            mr_sum += oracle_mr;
        }

        let s_maps: Vec<FeatureMap> = sf.iter().map(|v| fmap(v, d)).collect();
        let wide: Vec<FeatureMap> = tf_wide.iter().map(|v| fmap(v, dt)).collect();
        let oracle_bp = batch_p2p(&sf, d, &tf_wide, dt, tau);
        record(2, (batch_p2p_loss(&s_maps, &wide, &opts).unwrap().value - oracle_bp).abs());

        // full objective with the same-width teacher
        let t_maps: Vec<FeatureMap> = tf.iter().map(|v| fmap(v, d)).collect();
        let s_logits: Vec<LogitMap> = sl.iter().map(lmap).collect();
        let t_logits: Vec<LogitMap> = tl.iter().map(lmap).collect();
        let label_maps: Vec<LabelMap> = labels.iter().map(labmap).collect();
        let pixel_batch = SampleBatch { embeddings: pixels.clone(), class_ids: vec![0; k] };
        let cfg = DistillConfig {
            tau,
            t_kd,
            kd_weight: 0.7,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            ..DistillConfig::desk_scale()
        };
        let total = cirkd_total(
            &CirkdInputs {
                student_feats: &s_maps,
                teacher_feats: &t_maps,
                student_logits: &s_logits,
                teacher_logits: &t_logits,
                labels: &label_maps,
                pixel_samples: Some(&pixel_batch),
                region_samples: Some(&region_batch),
            },
            &cfg,
        )
        .unwrap();
        let nf = n as f64;
        let oracle_total = task_sum / nf
            + 0.7 * kd_sum / nf
            + batch_p2p(&sf, d, &tf, d, tau)
            + 0.1 * mp_sum / nf
            + 0.1 * mr_sum / nf;
        record(6, (total.value - oracle_total).abs());
    }
    gaps
}

/// Bounded lists, oldest entry first.
pub struct Naive {
    pub capacity: usize,
    pub lists: Vec<VecDeque<Vec<f64>>>,
}

impl Naive {
    pub fn mirror(q: &ClassQueue) -> Self {
        Self {
            capacity: q.capacity(),
            lists: (0..q.num_classes())
                .map(|c| q.class_contents(c).into_iter().map(<[f64]>::to_vec).collect())
                .collect(),
        }
    }

    pub fn push(&mut self, class: usize, m: &DenseMatrix) {
        for row in m.row_iter() {
            self.lists[class].push_back(row.to_vec());
            if self.lists[class].len() > self.capacity {
                self.lists[class].pop_front();
            }
        }
    }

    pub fn matches(&self, q: &ClassQueue) -> bool {
        self.lists.iter().enumerate().all(|(c, list)| {
            let live = q.class_contents(c);
            live.len() == list.len() && live.iter().zip(list).all(|(a, b)| *a == b.as_slice())
        })
    }
}
