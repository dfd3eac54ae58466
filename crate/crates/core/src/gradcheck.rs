//! Finite-difference gradient suite.
//!
//! Each check draws seeded random small instances, compares the analytic
//! gradient with central differences and reports the worst relative error.
//! The relative error of one instance is `|a - n| / max(|a|, |n|, 1e-8)` in
//! the Euclidean norm over its whole gradient (input and every parameter).
//! Instances whose gradient is nearly zero, or whose ReLU inputs sit on a
//! kink, are redrawn.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::embedding::{
    l2_normalize_rows, l2_normalize_vjp, row_kl_with_grad, row_softmax_kl_with_grad, similarity,
    similarity_vjp, KlDirection,
};
use crate::error::{CirkdError, Result};
use crate::losses::{
    batch_p2p_loss, cirkd_total, kd_pixel_loss, memory_p2p_loss, memory_p2r_loss, region_pool,
    task_ce_loss, CirkdInputs, DistillConfig, RelationOpts,
};
use crate::matrix::{DenseMatrix, FeatureMap, LabelMap, LogitMap, DEFAULT_IGNORE};
use crate::memory::SampleBatch;
use crate::nets::{
    BatchNorm, Conv2d, EncoderSpec, Layer, Mode, ProjectionHead, Relu, Segmenter, Sequential, Tensor,
};
use crate::rng::SeededRng;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 100;

const MAX_AREA_SIDE: usize = 4;
const MAX_DIM: usize = 5;
const MAX_CLASSES: usize = 4;
const MAX_CONTRAST: usize = 8;
const MAX_BATCH: usize = 3;
// pre-activations closer than this to a ReLU kink cause a redraw
const KINK_MARGIN: f64 = 1e-3;
// instances with a smaller gradient norm are below what h = 1e-5 resolves
const MIN_GRAD_NORM: f64 = 1e-6;
const MAX_REDRAWS: usize = 50;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

pub fn central_difference(
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub worst_instance: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

type Scalar = Box<dyn Fn(&[f64]) -> Result<f64>>;

struct Instance {
    x: Vec<f64>,
    analytic: Vec<f64>,
    f: Scalar,
}

impl Instance {
    fn rel_err(&self) -> Result<f64> {
        let numeric = central_difference(&self.x, FD_STEP, &self.f)?;
        Ok(relative_error(&self.analytic, &numeric))
    }

    fn grad_norm(&self) -> f64 {
        self.analytic.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

type Generator = fn(&mut SeededRng) -> Result<Instance>;

const CHECKS: [(&str, Generator); 20] = [
    ("l2_normalize_vjp", gen_normalize),
    ("similarity_vjp", gen_similarity),
    ("row_softmax_kl_with_grad", gen_row_kl_student_first),
    ("row_kl_with_grad/teacher_first", gen_row_kl_teacher_first),
    ("task_ce_loss", gen_task_ce),
    ("kd_pixel_loss", gen_kd),
    ("batch_p2p_loss", gen_batch_p2p),
    ("memory_p2p_loss", gen_memory_p2p),
    ("memory_p2r_loss", gen_memory_p2r),
    ("cirkd_total", gen_total),
    ("conv2d/k1", gen_conv_k1),
    ("conv2d/k3", gen_conv_k3),
    ("conv2d/k3_stride2", gen_conv_k3_s2),
    ("relu", gen_relu),
    ("batch_norm/train", gen_bn_train),
    ("batch_norm/eval", gen_bn_eval),
    ("projection_head/train", gen_head_train),
    ("projection_head/eval", gen_head_eval),
    ("segmenter", gen_segmenter),
    ("segmenter/batch_norm", gen_segmenter_bn),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs one named check on `instances` draws from a stream keyed by `seed`
/// and the check's position in the suite.
pub fn run_check(name: &str, seed: u64, instances: usize) -> Result<GradCheckReport> {
    let (idx, (name, gen)) = CHECKS
        .iter()
        .enumerate()
        .find(|(_, (n, _))| *n == name)
        .ok_or_else(|| CirkdError::Param(format!("unknown gradient check `{name}`")))?;
    let mut rng = crate::rng::seeded(seed);
    rng.set_stream(100 + idx as u64);
    let mut report = GradCheckReport {
        name,
        instances,
        max_rel_err: 0.0,
        worst_instance: 0,
    };
    for i in 0..instances {
        let mut inst = gen(&mut rng)?;
        for _ in 0..MAX_REDRAWS {
            if inst.grad_norm() >= MIN_GRAD_NORM {
                break;
            }
            inst = gen(&mut rng)?;
        }
        let err = inst.rel_err()?;
        if !(err <= report.max_rel_err) {
            report.max_rel_err = err;
            report.worst_instance = i;
        }
    }
    Ok(report)
}

pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<GradCheckReport>> {
    CHECKS
        .iter()
        .map(|(name, _)| run_check(name, seed, instances))
        .collect()
}

fn normals(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normal_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::new(rows, cols, normals(rng, rows * cols)).expect("sized data")
}

fn unit_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
    loop {
        if let Ok(m) = l2_normalize_rows(&normal_matrix(rng, rows, cols)) {
            return m;
        }
    }
}

fn similarity_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
    let v = (0..rows * cols).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    DenseMatrix::new(rows, cols, v).expect("sized data")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spatial size with at most 16 pixels.
fn area(rng: &mut SeededRng) -> (usize, usize) {
    (rng.gen_range(1..=MAX_AREA_SIDE), rng.gen_range(1..=MAX_AREA_SIDE))
}

fn labels(rng: &mut SeededRng, h: usize, w: usize, classes: usize) -> LabelMap {
    let mut v: Vec<u8> = (0..h * w)
        .map(|_| {
            if rng.gen_bool(0.15) {
                DEFAULT_IGNORE
            } else {
                rng.gen_range(0..classes) as u8
            }
        })
        .collect();
    v[0] = rng.gen_range(0..classes) as u8;
    LabelMap::new(h, w, v, DEFAULT_IGNORE).expect("sized labels")
}

fn tau(rng: &mut SeededRng) -> f64 {
    [0.1, 0.25, 0.5, 1.0][rng.gen_range(0..4)]
}

fn direction(rng: &mut SeededRng) -> KlDirection {
    if rng.gen_bool(0.5) {
        KlDirection::StudentFirst
    } else {
        KlDirection::TeacherFirst
    }
}

fn matrix_of(shape: (usize, usize), v: &[f64]) -> DenseMatrix {
    DenseMatrix::new(shape.0, shape.1, v.to_vec()).expect("sized data")
}

fn gen_normalize(rng: &mut SeededRng) -> Result<Instance> {
    let (rows, d) = (rng.gen_range(1..=16), rng.gen_range(1..=MAX_DIM));
    let m = normal_matrix(rng, rows, d);
    let up = normal_matrix(rng, rows, d);
    let analytic = l2_normalize_vjp(&m, &up)?.into_data();
    let shape = m.shape();
    Ok(Instance {
        x: m.into_data(),
        analytic,
        f: Box::new(move |v| Ok(dot(l2_normalize_rows(&matrix_of(shape, v))?.data(), up.data()))),
    })
}

fn gen_similarity(rng: &mut SeededRng) -> Result<Instance> {
    let (a, b, d) = (rng.gen_range(1..=16), rng.gen_range(1..=MAX_CONTRAST), rng.gen_range(1..=MAX_DIM));
    let fa = normal_matrix(rng, a, d);
    let fb = normal_matrix(rng, b, d);
    let up = normal_matrix(rng, a, b);
    let (ga, gb) = similarity_vjp(&fa, &fb, &up)?;
    let na = a * d;
    let mut x = fa.into_data();
    x.extend_from_slice(fb.data());
    let mut analytic = ga.into_data();
    analytic.extend(gb.into_data());
    Ok(Instance {
        x,
        analytic,
        f: Box::new(move |v| {
            let s = similarity(&matrix_of((a, d), &v[..na]), &matrix_of((b, d), &v[na..]))?;
            Ok(dot(s.data(), up.data()))
        }),
    })
}

fn row_kl_instance(rng: &mut SeededRng, dir: KlDirection) -> Result<Instance> {
    let (rows, k) = (rng.gen_range(1..=16), rng.gen_range(1..=MAX_CONTRAST));
    let t = tau(rng);
    // similarities of unit vectors live in [-1, 1]
    let s = similarity_matrix(rng, rows, k);
    let target = similarity_matrix(rng, rows, k);
    let (_, g) = match dir {
        KlDirection::StudentFirst => row_softmax_kl_with_grad(&s, &target, t)?,
        KlDirection::TeacherFirst => row_kl_with_grad(&s, &target, t, dir)?,
    };
    Ok(Instance {
        x: s.into_data(),
        analytic: g.into_data(),
        f: Box::new(move |v| Ok(row_kl_with_grad(&matrix_of((rows, k), v), &target, t, dir)?.0)),
    })
}

fn gen_row_kl_student_first(rng: &mut SeededRng) -> Result<Instance> {
    row_kl_instance(rng, KlDirection::StudentFirst)
}

fn gen_row_kl_teacher_first(rng: &mut SeededRng) -> Result<Instance> {
    row_kl_instance(rng, KlDirection::TeacherFirst)
}

fn gen_task_ce(rng: &mut SeededRng) -> Result<Instance> {
    let (h, w) = area(rng);
    let c = rng.gen_range(2..=MAX_CLASSES);
    let logits = LogitMap::new(h, w, normal_matrix(rng, h * w, c))?;
    let lab = labels(rng, h, w, c);
    let g = task_ce_loss(&logits, &lab)?.grad_logits.expect("task loss has a logit gradient");
    Ok(Instance {
        x: logits.flat().data().to_vec(),
        analytic: g.into_data(),
        f: Box::new(move |v| Ok(task_ce_loss(&LogitMap::new(h, w, matrix_of((h * w, c), v))?, &lab)?.value)),
    })
}

fn gen_kd(rng: &mut SeededRng) -> Result<Instance> {
    let (h, w) = area(rng);
    let c = rng.gen_range(2..=MAX_CLASSES);
    let t_kd = [0.5, 1.0, 2.0, 4.0][rng.gen_range(0..4)];
    let dir = direction(rng);
    let student = LogitMap::new(h, w, normal_matrix(rng, h * w, c))?;
    let teacher = LogitMap::new(h, w, normal_matrix(rng, h * w, c))?;
    let g = kd_pixel_loss(&student, &teacher, t_kd, dir)?
        .grad_logits
        .expect("kd loss has a logit gradient");
    Ok(Instance {
        x: student.flat().data().to_vec(),
        analytic: g.into_data(),
        f: Box::new(move |v| {
            let s = LogitMap::new(h, w, matrix_of((h * w, c), v))?;
            Ok(kd_pixel_loss(&s, &teacher, t_kd, dir)?.value)
        }),
    })
}

fn feature_maps(rng: &mut SeededRng, n: usize, h: usize, w: usize, d: usize) -> Result<Vec<FeatureMap>> {
    (0..n).map(|_| FeatureMap::new(h, w, normal_matrix(rng, h * w, d))).collect()
}

fn split_maps(v: &[f64], n: usize, h: usize, w: usize, d: usize) -> Result<Vec<FeatureMap>> {
    let len = h * w * d;
    (0..n)
        .map(|i| FeatureMap::new(h, w, matrix_of((h * w, d), &v[i * len..(i + 1) * len])))
        .collect()
}

fn gen_batch_p2p(rng: &mut SeededRng) -> Result<Instance> {
    let n = rng.gen_range(1..=MAX_BATCH);
    let (h, w) = area(rng);
    let (ds, dt) = (rng.gen_range(1..=MAX_DIM), rng.gen_range(1..=MAX_DIM));
    let t = tau(rng);
    let dir = direction(rng);
    let student = feature_maps(rng, n, h, w, ds)?;
    let teacher = feature_maps(rng, n, h, w, dt)?;
    let opts = RelationOpts::new(t).with_direction(dir);
    let res = batch_p2p_loss(&student, &teacher, &opts)?;
    let x: Vec<f64> = student.iter().flat_map(|m| m.flat().data().to_vec()).collect();
    let analytic: Vec<f64> = res.grad_feats.into_iter().flat_map(DenseMatrix::into_data).collect();
    Ok(Instance {
        x,
        analytic,
        f: Box::new(move |v| {
            let opts = RelationOpts::new(t).with_direction(dir);
            Ok(batch_p2p_loss(&split_maps(v, n, h, w, ds)?, &teacher, &opts)?.value)
        }),
    })
}

fn sample_batch(embeddings: DenseMatrix, classes: usize) -> SampleBatch {
    let class_ids = (0..embeddings.rows()).map(|i| i % classes).collect();
    SampleBatch { embeddings, class_ids }
}

fn memory_instance(rng: &mut SeededRng, regions: bool) -> Result<Instance> {
    let (h, w) = area(rng);
    let d = rng.gen_range(1..=MAX_DIM);
    let t = tau(rng);
    let dir = direction(rng);
    let student = FeatureMap::new(h, w, normal_matrix(rng, h * w, d))?;
    let teacher = FeatureMap::new(h, w, normal_matrix(rng, h * w, d))?;
    let samples = if regions {
        // pooled regions of a second teacher map, topped up with random units
        let other = FeatureMap::new(h, w, normal_matrix(rng, h * w, d))?.normalized()?;
        let (pooled, _) = region_pool(&other, &labels(rng, h, w, MAX_CLASSES), true)?;
        let extra = rng.gen_range(1..=MAX_CONTRAST - pooled.rows().min(MAX_CONTRAST - 1));
        let rows = DenseMatrix::vstack(&[&pooled, &unit_matrix(rng, extra, d)])?;
        sample_batch(rows, MAX_CLASSES)
    } else {
        let k = rng.gen_range(1..=MAX_CONTRAST);
        sample_batch(unit_matrix(rng, k, d), MAX_CLASSES)
    };
    let mask: Option<Vec<bool>> = if rng.gen_bool(0.3) {
        let mut m: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.7)).collect();
        m[0] = true;
        Some(m)
    } else {
        None
    };
    let loss = move |s: &FeatureMap| {
        let mut opts = RelationOpts::new(t).with_direction(dir);
        opts.anchor_mask = mask.as_deref();
        if regions {
            memory_p2r_loss(s, &teacher, &samples, &opts)
        } else {
            memory_p2p_loss(s, &teacher, &samples, &opts)
        }
    };
    let g = loss(&student)?.grad_feat.expect("memory loss has a feature gradient");
    Ok(Instance {
        x: student.flat().data().to_vec(),
        analytic: g.into_data(),
        f: Box::new(move |v| Ok(loss(&FeatureMap::new(h, w, matrix_of((h * w, d), v))?)?.value)),
    })
}

fn gen_memory_p2p(rng: &mut SeededRng) -> Result<Instance> {
    memory_instance(rng, false)
}

fn gen_memory_p2r(rng: &mut SeededRng) -> Result<Instance> {
    memory_instance(rng, true)
}

fn gen_total(rng: &mut SeededRng) -> Result<Instance> {
    let n = rng.gen_range(1..=MAX_BATCH);
    let (h, w) = area(rng);
    let d = rng.gen_range(1..=MAX_DIM);
    let c = rng.gen_range(2..=MAX_CLASSES);
    let sf = feature_maps(rng, n, h, w, d)?;
    let tf = feature_maps(rng, n, h, w, d)?;
    let sl: Vec<LogitMap> = (0..n)
        .map(|_| LogitMap::new(h, w, normal_matrix(rng, h * w, c)))
        .collect::<Result<_>>()?;
    let tl: Vec<LogitMap> = (0..n)
        .map(|_| LogitMap::new(h, w, normal_matrix(rng, h * w, c)))
        .collect::<Result<_>>()?;
    let lab: Vec<LabelMap> = (0..n).map(|_| labels(rng, h, w, c)).collect();
    let k = rng.gen_range(1..=MAX_CONTRAST);
    let pixels = sample_batch(unit_matrix(rng, k, d), c);
    let kr = rng.gen_range(1..=MAX_CONTRAST);
    let regions = sample_batch(unit_matrix(rng, kr, d), c);
    let cfg = DistillConfig {
        tau: tau(rng),
        t_kd: [1.0, 2.0][rng.gen_range(0..2)],
        kd_weight: rng.gen_range(0.0..2.0),
        alpha: rng.gen_range(0.1..2.0),
        beta: rng.gen_range(0.1..2.0),
        gamma: rng.gen_range(0.1..2.0),
        ..DistillConfig::default()
    };
    let total = cirkd_total(
        &CirkdInputs {
            student_feats: &sf,
            teacher_feats: &tf,
            student_logits: &sl,
            teacher_logits: &tl,
            labels: &lab,
            pixel_samples: Some(&pixels),
            region_samples: Some(&regions),
        },
        &cfg,
    )?;
    let nf = n * h * w * d;
    let mut x: Vec<f64> = sf.iter().flat_map(|m| m.flat().data().to_vec()).collect();
    x.extend(sl.iter().flat_map(|m| m.flat().data().to_vec()));
    let mut analytic: Vec<f64> = total.grad_feats.into_iter().flat_map(DenseMatrix::into_data).collect();
    analytic.extend(total.grad_logits.into_iter().flat_map(DenseMatrix::into_data));
    Ok(Instance {
        x,
        analytic,
        f: Box::new(move |v| {
            let feats = split_maps(&v[..nf], n, h, w, d)?;
            let logits: Vec<LogitMap> = (0..n)
                .map(|i| {
                    let len = h * w * c;
                    LogitMap::new(h, w, matrix_of((h * w, c), &v[nf + i * len..nf + (i + 1) * len]))
                })
                .collect::<Result<_>>()?;
            let inputs = CirkdInputs {
                student_feats: &feats,
                teacher_feats: &tf,
                student_logits: &logits,
                teacher_logits: &tl,
                labels: &lab,
                pixel_samples: Some(&pixels),
                region_samples: Some(&regions),
            };
            Ok(cirkd_total(&inputs, &cfg)?.value)
        }),
    })
}

/// Smallest distance of any ReLU input to zero on a forward pass.
fn relu_margin(net: &Sequential, x: &Tensor, mode: Mode) -> Result<f64> {
    let mut net = net.clone();
    let mut cur = x.clone();
    let mut margin = f64::INFINITY;
    for layer in &mut net.layers {
        if let Layer::Relu(_) = layer {
            margin = cur.data.iter().fold(margin, |m, v| m.min(v.abs()));
        }
        cur = layer.forward(&cur, mode)?;
    }
    Ok(margin)
}

fn input_tensor(rng: &mut SeededRng, n: usize, h: usize, w: usize, c: usize) -> Tensor {
    Tensor::from_data(n, h, w, c, normals(rng, n * h * w * c)).expect("sized data")
}

/// Gradient w.r.t. the input and every parameter of `net` for the scalar
/// `<U, net(x)>`.
fn sequential_instance(net: Sequential, x: Tensor, mode: Mode, rng: &mut SeededRng) -> Result<Instance> {
    let mut probe = net.clone();
    let out = probe.forward(&x, mode)?;
    let up = Tensor::from_data(out.n, out.h, out.w, out.c, normals(rng, out.data.len()))?;
    probe.zero_grad();
    let gx = probe.backward(&up)?;
    let nx = x.data.len();
    let mut values = x.data.clone();
    let mut analytic = gx.data;
    for p in probe.params() {
        values.extend_from_slice(&p.value);
        analytic.extend_from_slice(&p.grad);
    }
    let shape = x.shape();
    Ok(Instance {
        x: values,
        analytic,
        f: Box::new(move |v| {
            let mut m = net.clone();
            let mut at = nx;
            for p in m.params_mut() {
                let len = p.len();
                p.value.copy_from_slice(&v[at..at + len]);
                at += len;
            }
            let input = Tensor::from_data(shape[0], shape[1], shape[2], shape[3], v[..nx].to_vec())?;
            Ok(dot(&m.forward(&input, mode)?.data, &up.data))
        }),
    })
}

/// Redraws until no ReLU input sits within the kink margin.
fn kink_free(
    rng: &mut SeededRng,
    mode: Mode,
    mut draw: impl FnMut(&mut SeededRng) -> (Sequential, Tensor),
) -> Result<Instance> {
    let mut attempt = 0;
    loop {
        let (net, x) = draw(rng);
        attempt += 1;
        if attempt >= MAX_REDRAWS || relu_margin(&net, &x, mode)? > KINK_MARGIN {
            return sequential_instance(net, x, mode, rng);
        }
    }
}

fn random_bias(rng: &mut SeededRng, conv: &mut Conv2d) {
    conv.bias.value = normals(rng, conv.bias.len()).iter().map(|b| 0.1 * b).collect();
}

fn conv_instance(rng: &mut SeededRng, kernel: usize, stride: usize) -> Result<Instance> {
    let (n, (h, w)) = (rng.gen_range(1..=MAX_BATCH), area(rng));
    let (cin, cout) = (rng.gen_range(1..=MAX_DIM), rng.gen_range(1..=MAX_DIM));
    let mut conv = Conv2d::he(cin, cout, kernel, stride, rng);
    random_bias(rng, &mut conv);
    let x = input_tensor(rng, n, h, w, cin);
    sequential_instance(Sequential::new(vec![Layer::Conv(conv)]), x, Mode::Train, rng)
}

fn gen_conv_k1(rng: &mut SeededRng) -> Result<Instance> {
    conv_instance(rng, 1, 1)
}

fn gen_conv_k3(rng: &mut SeededRng) -> Result<Instance> {
    conv_instance(rng, 3, 1)
}

fn gen_conv_k3_s2(rng: &mut SeededRng) -> Result<Instance> {
    conv_instance(rng, 3, 2)
}

fn gen_relu(rng: &mut SeededRng) -> Result<Instance> {
    kink_free(rng, Mode::Train, |rng| {
        let (n, (h, w)) = (rng.gen_range(1..=MAX_BATCH), area(rng));
        let c = rng.gen_range(1..=MAX_DIM);
        let x = input_tensor(rng, n, h, w, c);
        (Sequential::new(vec![Layer::Relu(Relu::default())]), x)
    })
}

fn random_bn(rng: &mut SeededRng, c: usize) -> BatchNorm {
    let mut bn = BatchNorm::new(c);
    bn.gamma.value = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    bn.beta.value = normals(rng, c).iter().map(|b| 0.2 * b).collect();
    bn.running_mean = normals(rng, c).iter().map(|m| 0.5 * m).collect();
    bn.running_var = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    bn
}

/// Batch and area with at least four values per channel.
fn bn_batch(rng: &mut SeededRng) -> (usize, usize, usize) {
    loop {
        let (n, (h, w)) = (rng.gen_range(1..=MAX_BATCH), area(rng));
        if n * h * w >= 4 {
            return (n, h, w);
        }
    }
}

fn bn_instance(rng: &mut SeededRng, mode: Mode) -> Result<Instance> {
    let (n, h, w) = bn_batch(rng);
    let c = rng.gen_range(1..=MAX_DIM);
    let bn = random_bn(rng, c);
    let x = input_tensor(rng, n, h, w, c);
    sequential_instance(Sequential::new(vec![Layer::BatchNorm(bn)]), x, mode, rng)
}

fn gen_bn_train(rng: &mut SeededRng) -> Result<Instance> {
    bn_instance(rng, Mode::Train)
}

fn gen_bn_eval(rng: &mut SeededRng) -> Result<Instance> {
    bn_instance(rng, Mode::Eval)
}

fn head_instance(rng: &mut SeededRng, mode: Mode) -> Result<Instance> {
    kink_free(rng, mode, |rng| {
        let (n, h, w) = bn_batch(rng);
        let (ds, dh, dt) = (
            rng.gen_range(1..=MAX_DIM),
            rng.gen_range(1..=MAX_DIM),
            rng.gen_range(1..=MAX_DIM),
        );
        let mut head = ProjectionHead::new(ds, dh, dt, rng);
        for layer in &mut head.net.layers {
            match layer {
                Layer::BatchNorm(bn) => *bn = random_bn(rng, bn.channels),
                Layer::Conv(conv) => random_bias(rng, conv),
                Layer::Relu(_) => {}
            }
        }
        let x = input_tensor(rng, n, h, w, ds);
        (head.net, x)
    })
}

fn gen_head_train(rng: &mut SeededRng) -> Result<Instance> {
    head_instance(rng, Mode::Train)
}

fn gen_head_eval(rng: &mut SeededRng) -> Result<Instance> {
    head_instance(rng, Mode::Eval)
}

/// Full segmenter: upstream gradients arrive at both the features and the
/// logits.
fn segmenter_instance(rng: &mut SeededRng, batch_norm: bool) -> Result<Instance> {
    let mode = Mode::Train;
    let mut attempt = 0;
    let (net, x) = loop {
        let (n, h, w) = bn_batch(rng);
        let stride = [1, 2][rng.gen_range(0..2)];
        if batch_norm && n * h.div_ceil(stride) * w.div_ceil(stride) < 4 {
            continue;
        }
        let spec = EncoderSpec::student(3, rng.gen_range(1..=MAX_DIM), stride)?.with_batch_norm(batch_norm);
        let net = Segmenter::new(spec, rng.gen_range(2..=MAX_CLASSES), rng);
        let x = input_tensor(rng, n, h, w, 3);
        attempt += 1;
        if attempt >= MAX_REDRAWS || relu_margin(&net.encoder, &x, mode)? > KINK_MARGIN {
            break (net, x);
        }
    };
    let mut probe = net.clone();
    let out = probe.forward(&x, mode)?;
    let f_shape = out.features.shape();
    let l_shape = out.logits.shape();
    let uf = Tensor::from_data(f_shape[0], f_shape[1], f_shape[2], f_shape[3], normals(rng, out.features.data.len()))?;
    let ul = Tensor::from_data(l_shape[0], l_shape[1], l_shape[2], l_shape[3], normals(rng, out.logits.data.len()))?;
    probe.zero_grad();
    let gx = probe.backward(Some(&uf), &ul)?;
    let nx = x.data.len();
    let mut values = x.data.clone();
    let mut analytic = gx.data;
    for p in probe.params() {
        values.extend_from_slice(&p.value);
        analytic.extend_from_slice(&p.grad);
    }
    let shape = x.shape();
    Ok(Instance {
        x: values,
        analytic,
        f: Box::new(move |v| {
            let mut m = net.clone();
            let mut at = nx;
            for p in m.params_mut() {
                let len = p.len();
                p.value.copy_from_slice(&v[at..at + len]);
                at += len;
            }
            let input = Tensor::from_data(shape[0], shape[1], shape[2], shape[3], v[..nx].to_vec())?;
            let out = m.forward(&input, mode)?;
            Ok(dot(&out.features.data, &uf.data) + dot(&out.logits.data, &ul.data))
        }),
    })
}

fn gen_segmenter(rng: &mut SeededRng) -> Result<Instance> {
    segmenter_instance(rng, false)
}

fn gen_segmenter_bn(rng: &mut SeededRng) -> Result<Instance> {
    segmenter_instance(rng, true)
}
