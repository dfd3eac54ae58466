use cirkd::embedding::{l2_normalize_rows, row_softmax, row_softmax_kl_with_grad};
use cirkd::losses::{
    batch_p2p_loss, cirkd_total, kd_pixel_loss, memory_p2p_loss, memory_p2r_loss, task_ce_loss,
    CirkdInputs, DistillConfig, RelationOpts,
};
use cirkd::memory::SampleBatch;
use cirkd::{DenseMatrix, FeatureMap, LabelMap, LogitMap, DEFAULT_IGNORE};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| DenseMatrix::new(rows, cols, v).unwrap())
}

/// Rows bounded away from zero so normalization is well defined.
fn features(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    matrix(rows, cols, -2.0, 2.0).prop_filter("non-degenerate rows", |m| {
        m.row_iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-4)
    })
}

fn fmap(h: usize, w: usize, m: DenseMatrix) -> FeatureMap {
    FeatureMap::new(h, w, m).unwrap()
}

fn units(m: DenseMatrix) -> DenseMatrix {
    l2_normalize_rows(&m).unwrap()
}

struct Batch {
    h: usize,
    w: usize,
    sf: Vec<FeatureMap>,
    tf: Vec<FeatureMap>,
    sl: Vec<LogitMap>,
    tl: Vec<LogitMap>,
    labels: Vec<LabelMap>,
    pixels: SampleBatch,
    regions: SampleBatch,
}

impl std::fmt::Debug for Batch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Batch {}x{} n={}", self.h, self.w, self.sf.len())
    }
}

impl Batch {
    fn inputs(&self) -> CirkdInputs<'_> {
        CirkdInputs {
            student_feats: &self.sf,
            teacher_feats: &self.tf,
            student_logits: &self.sl,
            teacher_logits: &self.tl,
            labels: &self.labels,
            pixel_samples: Some(&self.pixels),
            region_samples: Some(&self.regions),
        }
    }
}

fn batch() -> impl Strategy<Value = Batch> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..5, 2usize..5, 1usize..9, 1usize..9).prop_flat_map(
        |(n, h, w, d, c, kp, kr)| {
            let a = h * w;
            (
                prop::collection::vec(features(a, d), n),
                prop::collection::vec(features(a, d), n),
                prop::collection::vec(matrix(a, c, -4.0, 4.0), n),
                prop::collection::vec(matrix(a, c, -4.0, 4.0), n),
                prop::collection::vec(prop::collection::vec(prop_oneof![4 => 0..c as u8, 1 => Just(DEFAULT_IGNORE)], a), n),
                features(kp, d),
                features(kr, d),
            )
                .prop_map(move |(sf, tf, sl, tl, labels, p, r)| Batch {
                    h,
                    w,
                    sf: sf.into_iter().map(|m| fmap(h, w, m)).collect(),
                    tf: tf.into_iter().map(|m| fmap(h, w, m)).collect(),
                    sl: sl.into_iter().map(|m| LogitMap::new(h, w, m).unwrap()).collect(),
                    tl: tl.into_iter().map(|m| LogitMap::new(h, w, m).unwrap()).collect(),
                    labels: labels
                        .into_iter()
                        .map(|mut l| {
                            // an image with nothing supervised is rejected by the task loss
                            if l[0] == DEFAULT_IGNORE {
                                l[0] = 0;
                            }
                            LabelMap::new(h, w, l, DEFAULT_IGNORE).unwrap()
                        })
                        .collect(),
                    pixels: SampleBatch { class_ids: vec![0; kp], embeddings: units(p) },
                    regions: SampleBatch { class_ids: vec![0; kr], embeddings: units(r) },
                })
        },
    )
}

fn tau() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.05), Just(0.1), Just(0.5), Just(1.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_rows(
        (s, t) in (1usize..8, 1usize..8).prop_flat_map(|(r, k)| (matrix(r, k, -3.0, 3.0), matrix(r, k, -3.0, 3.0))),
        tau in tau(),
    ) {
        prop_assert!(row_softmax_kl_with_grad(&s, &t, tau).unwrap().0 >= -1e-12);
        prop_assert!(row_softmax_kl_with_grad(&s, &s, tau).unwrap().0.abs() <= 1e-12);
    }

    #[test]
    fn softmax_ignores_row_shifts(
        (s, shifts) in (1usize..8, 1usize..8).prop_flat_map(|(r, k)| (matrix(r, k, -3.0, 3.0), prop::collection::vec(-50.0..50.0f64, r))),
        tau in tau(),
    ) {
        let mut shifted = s.clone();
        for (i, c) in shifts.iter().enumerate() {
            shifted.row_mut(i).iter_mut().for_each(|v| *v += c);
        }
        let a = row_softmax(&s, tau).unwrap();
        let b = row_softmax(&shifted, tau).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn normalization_is_idempotent_and_scale_free(
        m in (1usize..8, 1usize..6).prop_flat_map(|(r, d)| features(r, d)),
        c in 1e-3..1e3f64,
    ) {
        let u = l2_normalize_rows(&m).unwrap();
        prop_assert!(l2_normalize_rows(&u).unwrap().max_abs_diff(&u) <= 1e-12);
        let mut scaled = m.clone();
        scaled.scale(c);
        prop_assert!(l2_normalize_rows(&scaled).unwrap().max_abs_diff(&u) <= 1e-12);
    }

    #[test]
    fn huge_temperature_flattens_kl(
        (s, t) in (1usize..8, 1usize..8).prop_flat_map(|(r, k)| (matrix(r, k, -1.0, 1.0), matrix(r, k, -1.0, 1.0))),
    ) {
        prop_assert!(row_softmax_kl_with_grad(&s, &t, 1e6).unwrap().0 <= 1e-6);
    }

    #[test]
    fn batch_p2p_ignores_image_order(b in batch(), tau in tau(), rot in 0usize..3) {
        let opts = RelationOpts::new(tau);
        let base = batch_p2p_loss(&b.sf, &b.tf, &opts).unwrap().value;
        let mut sf = b.sf.clone();
        let mut tf = b.tf.clone();
        let k = rot % sf.len();
        sf.rotate_left(k);
        tf.rotate_left(k);
        sf.reverse();
        tf.reverse();
        prop_assert!((batch_p2p_loss(&sf, &tf, &opts).unwrap().value - base).abs() <= 1e-12);
    }

    #[test]
    fn teacher_magnitude_is_absorbed(b in batch(), tau in tau(), c in 1e-2..1e2f64) {
        let opts = RelationOpts::new(tau);
        let scaled: Vec<FeatureMap> = b.tf.iter().map(|m| {
            let mut f = m.flat().clone();
            f.scale(c);
            fmap(b.h, b.w, f)
        }).collect();
        let bp = |t: &[FeatureMap]| batch_p2p_loss(&b.sf, t, &opts).unwrap().value;
        prop_assert!((bp(&b.tf) - bp(&scaled)).abs() <= 1e-12);
        let mp = |t: &FeatureMap| memory_p2p_loss(&b.sf[0], t, &b.pixels, &opts).unwrap().value;
        prop_assert!((mp(&b.tf[0]) - mp(&scaled[0])).abs() <= 1e-12);
        let mr = |t: &FeatureMap| memory_p2r_loss(&b.sf[0], t, &b.regions, &opts).unwrap().value;
        prop_assert!((mr(&b.tf[0]) - mr(&scaled[0])).abs() <= 1e-12);
    }

    #[test]
    fn ignored_pixels_do_not_move_task_loss(b in batch(), bump in -10.0..10.0f64) {
        let labels = &b.labels[0];
        let base = task_ce_loss(&b.sl[0], labels).unwrap().value;
        let mut flat = b.sl[0].flat().clone();
        for i in 0..labels.area() {
            if labels.is_ignored(i) {
                flat.row_mut(i)[0] += bump;
            }
        }
        let moved = task_ce_loss(&LogitMap::new(b.h, b.w, flat).unwrap(), labels).unwrap().value;
        prop_assert_eq!(base, moved);
        prop_assert!(base >= -1e-12);
    }

    #[test]
    fn total_is_weighted_sum_of_terms(b in batch(), tau in tau(), w in prop::array::uniform4(0.0..2.0f64)) {
        let cfg = DistillConfig { tau, kd_weight: w[0], alpha: w[1], beta: w[2], gamma: w[3], ..DistillConfig::desk_scale() };
        let total = cirkd_total(&b.inputs(), &cfg).unwrap();
        let n = b.sf.len() as f64;
        let opts = RelationOpts::new(tau);
        let mean = |f: &dyn Fn(usize) -> f64| (0..b.sf.len()).map(f).sum::<f64>() / n;
        let task = mean(&|i| task_ce_loss(&b.sl[i], &b.labels[i]).unwrap().value);
        let kd = mean(&|i| kd_pixel_loss(&b.sl[i], &b.tl[i], cfg.t_kd, cfg.direction()).unwrap().value);
        let bp = batch_p2p_loss(&b.sf, &b.tf, &opts).unwrap().value;
        let mp = mean(&|i| memory_p2p_loss(&b.sf[i], &b.tf[i], &b.pixels, &opts).unwrap().value);
        let mr = mean(&|i| memory_p2r_loss(&b.sf[i], &b.tf[i], &b.regions, &opts).unwrap().value);
        let mut expected = task;
        for (weight, v) in [(w[0], kd), (w[1], bp), (w[2], mp), (w[3], mr)] {
            if weight > 0.0 {
                expected += weight * v;
            }
        }
        prop_assert!((total.value - expected).abs() <= 1e-12);
        for v in [task, kd, bp, mp, mr] {
            prop_assert!(v >= -1e-12);
        }
    }

    #[test]
    fn perfect_mimic_zeroes_distillation(b in batch(), tau in tau()) {
        let mimic = Batch { sf: b.tf.clone(), sl: b.tl.clone(), ..b };
        let total = cirkd_total(&mimic.inputs(), &DistillConfig { tau, ..DistillConfig::desk_scale() }).unwrap();
        let p = total.parts;
        for v in [p.kd, p.batch_p2p, p.memory_p2p, p.memory_p2r] {
            prop_assert!(v.abs() <= 1e-12);
        }
        prop_assert!((total.value - p.task).abs() <= 1e-11);
    }
}
