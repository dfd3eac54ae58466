//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Pass criterion numbers as arguments to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cirkd::embedding::l2_normalize_rows;
use cirkd::gradcheck::{run_suite, TOLERANCE};
use cirkd::losses::{
    batch_p2p_loss, cirkd_total, memory_p2p_loss, memory_p2r_loss, CirkdInputs, DistillConfig, RelationOpts,
};
use cirkd::memory::{ClassQueue, SampleBatch};
use cirkd::metrics::ConfusionMatrix;
use cirkd::rng::seeded;
use cirkd::trainer::{ablation_grid, run_ablation, train_loop, TrainConfig, TRACE_FILE};
use cirkd::{DenseMatrix, FeatureMap, LabelMap, LogitMap, DEFAULT_IGNORE};
use common::{formula_gaps, Naive};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() <= limit_s, || {
        format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(0, 100).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    for r in &reports {
        ensure(r.passed(), || {
            format!("{} rel err {:.3e} on instance {}", r.name, r.max_rel_err, r.worst_instance)
        })?;
    }
    within(elapsed, 60.0)?;
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(format!(
        "{} checks x 100 instances, worst rel err {worst:.2e} <= {TOLERANCE:e}, {:.1} s",
        reports.len(),
        elapsed.as_secs_f64()
    ))
}

fn formula_oracles() -> Outcome {
    let gaps = formula_gaps(2024, 200);
    for (name, gap) in &gaps {
        ensure(*gap <= 1e-10, || format!("{name} differs by {gap:.3e}"))?;
    }
    let worst = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    Ok(format!("{} formulas x 200 instances, worst gap {worst:.2e}", gaps.len()))
}

/// A batch at training scale: student and teacher drawn independently.
struct Instance {
    sf: Vec<FeatureMap>,
    tf: Vec<FeatureMap>,
    sl: Vec<LogitMap>,
    tl: Vec<LogitMap>,
    labels: Vec<LabelMap>,
    pixels: SampleBatch,
    regions: SampleBatch,
}

impl Instance {
    fn random(seed: u64) -> Self {
        let (n, h, w, d, c) = (4, 8, 8, 16, 5);
        let a = h * w;
        let mut rng = seeded(seed);
        let mut mat = |rows: usize, cols: usize, scale: f64| {
            let v = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
            DenseMatrix::new(rows, cols, v).unwrap()
        };
        let sf = (0..n).map(|_| FeatureMap::new(h, w, mat(a, d, 2.0)).unwrap()).collect();
        let tf = (0..n).map(|_| FeatureMap::new(h, w, mat(a, d, 2.0)).unwrap()).collect();
        let sl = (0..n).map(|_| LogitMap::new(h, w, mat(a, c, 4.0)).unwrap()).collect();
        let tl = (0..n).map(|_| LogitMap::new(h, w, mat(a, c, 4.0)).unwrap()).collect();
        let labels = (0..n)
            .map(|_| {
                let l = (0..a)
                    .map(|i| if i > 0 && rng.gen_bool(0.1) { DEFAULT_IGNORE } else { rng.gen_range(0..c as u8) })
                    .collect();
                LabelMap::new(h, w, l, DEFAULT_IGNORE).unwrap()
            })
            .collect();
        let pixels = ClassQueue::init(c, 256, d, seed).unwrap().sample_balanced(128, &mut rng).unwrap();
        let regions = ClassQueue::init(c, 64, d, seed + 1).unwrap().sample_balanced(32, &mut rng).unwrap();
        Self { sf, tf, sl, tl, labels, pixels, regions }
    }

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

fn perfect_mimic() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut inst = Instance::random(seed);
        inst.sf = inst.tf.clone();
        inst.sl = inst.tl.clone();
        for tau in [0.05, 0.1, 0.5, 1.0] {
            let cfg = DistillConfig { tau, ..DistillConfig::desk_scale() };
            let total = cirkd_total(&inst.inputs(), &cfg).map_err(|e| e.to_string())?;
            let p = total.parts;
            for (name, v) in [("kd", p.kd), ("batch_p2p", p.batch_p2p), ("memory_p2p", p.memory_p2p), ("memory_p2r", p.memory_p2r)] {
                ensure(v.abs() <= 1e-12, || format!("{name} = {v:.3e} at seed {seed}, tau {tau}"))?;
                worst = worst.max(v.abs());
            }
            let gap = total.value - p.task;
            ensure(gap.abs() <= 1e-11, || format!("total - task = {gap:.3e} at seed {seed}, tau {tau}"))?;
        }
    }
    Ok(format!("20 batches x 4 temperatures, largest term {worst:.2e}"))
}

fn unit_rows<R: Rng>(rows: usize, d: usize, rng: &mut R) -> DenseMatrix {
    let v = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0) + 1e-3).collect();
    let m = DenseMatrix::new(rows, d, v).unwrap();
    if rows == 0 {
        m
    } else {
        l2_normalize_rows(&m).unwrap()
    }
}

fn check_draw(q: &ClassQueue, naive: &Naive, k: usize, seed: u64) -> Result<(), String> {
    let batch = q.sample_balanced(k, &mut seeded(seed)).map_err(|e| e.to_string())?;
    ensure(batch.len() == k, || format!("asked for {k}, got {}", batch.len()))?;
    let cnt = batch.class_counts(q.num_classes());
    let spread = cnt.iter().max().unwrap() - cnt.iter().min().unwrap();
    ensure(spread <= 1, || format!("unbalanced draw {cnt:?}"))?;
    for (i, &c) in batch.class_ids.iter().enumerate() {
        let row = batch.embeddings.row(i);
        ensure(naive.lists[c].iter().any(|x| x.as_slice() == row), || format!("row {i} not in class {c}"))?;
    }
    Ok(())
}

fn queue_correctness() -> Outcome {
    let mut draws = 0;
    for s in 0..1000u64 {
        let mut rng = seeded(10_000 + s);
        let (c, cap, d) = (rng.gen_range(1..6), rng.gen_range(1..10), rng.gen_range(1..5));
        let mut q = ClassQueue::init(c, cap, d, s).map_err(|e| e.to_string())?;
        let mut naive = Naive::mirror(&q);
        for _ in 0..40 {
            if rng.gen_bool(0.7) {
                let class = rng.gen_range(0..c);
                let m = unit_rows(rng.gen_range(0..2 * cap + 1), d, &mut rng);
                q.enqueue(class, &m).map_err(|e| e.to_string())?;
                naive.push(class, &m);
                ensure(naive.matches(&q), || format!("sequence {s} diverges from the bounded list"))?;
            } else {
                let before = q.clone();
                check_draw(&q, &naive, rng.gen_range(1..16), rng.gen())?;
                ensure(q == before, || format!("sampling mutated the queue in sequence {s}"))?;
                draws += 1;
            }
        }
    }
    let q = ClassQueue::init(19, 256, 4, 3).map_err(|e| e.to_string())?;
    for seed in 0..10 {
        let cnt = q.sample_balanced(4096, &mut seeded(seed)).map_err(|e| e.to_string())?.class_counts(19);
        ensure(cnt.iter().all(|&n| n == 215 || n == 216), || format!("C=19 K=4096 counts {cnt:?}"))?;
        ensure(cnt.iter().sum::<usize>() == 4096, || "C=19 K=4096 total".into())?;
    }
    Ok(format!("1000 sequences, {draws} balanced draws, C=19 K=4096 counts in {{215, 216}}"))
}

fn ablation_direction() -> Outcome {
    let cfg = TrainConfig::default();
    let rows: Vec<_> = ablation_grid()
        .into_iter()
        .filter(|r| r.name != "kd+memory_p2p+memory_p2r")
        .collect();
    let seeds: Vec<u64> = (0..5).collect();
    let start = Instant::now();
    let table = run_ablation(&cfg, &seeds, &rows, |_, _, _| {}).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    print!("{}", table.to_markdown());
    let mean = |row: &str| table.mean_of(row).ok_or_else(|| format!("missing row {row}"));
    let (base, kd, full) = (mean("baseline")?, mean("kd")?, mean("full")?);
    ensure(full >= base + 0.01, || format!("full {full:.4} < baseline {base:.4} + 0.01"))?;
    ensure(full >= kd, || format!("full {full:.4} < kd {kd:.4}"))?;
    for row in ["kd+batch_p2p", "kd+memory_p2p", "kd+memory_p2r"] {
        let m = mean(row)?;
        ensure(m >= kd - 0.005, || format!("{row} {m:.4} < kd {kd:.4} - 0.005"))?;
    }
    within(elapsed, 600.0)?;
    Ok(format!(
        "baseline {base:.4}, kd {kd:.4}, full {full:.4} over 5 seeds, {:.0} s",
        elapsed.as_secs_f64()
    ))
}

fn miou_correctness() -> Outcome {
    let miou = |rows: &[Vec<u64>]| ConfusionMatrix::from_counts(rows).and_then(|m| m.miou()).map_err(|e| e.to_string());
    let got = miou(&[vec![3, 1], vec![1, 3]])?;
    ensure(got == 0.6, || format!("2x2 case gives {got}"))?;
    // class 2 absent from both prediction and ground truth
    let got = miou(&[vec![2, 0, 0], vec![1, 1, 0], vec![0, 0, 0]])?;
    ensure(got == (2.0 / 3.0 + 0.5) / 2.0, || format!("absent-class case gives {got}"))?;
    // class 1 only ever predicted: IoU 0 counts
    let got = miou(&[vec![4, 1], vec![0, 0]])?;
    ensure(got == 0.4, || format!("predicted-only case gives {got}"))?;
    let labels = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, DEFAULT_IGNORE], DEFAULT_IGNORE).map_err(|e| e.to_string())?;
    let pred = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0], DEFAULT_IGNORE).map_err(|e| e.to_string())?;
    let mut m = ConfusionMatrix::new(3);
    m.accumulate(&pred, &labels).map_err(|e| e.to_string())?;
    let got = m.miou().map_err(|e| e.to_string())?;
    ensure(got == 1.0, || format!("perfect prediction gives {got}"))?;
    Ok("hand-built matrices exact, absent class excluded, perfect = 1.0".into())
}

fn temperature_behavior() -> Outcome {
    for seed in 0..10 {
        let inst = Instance::random(100 + seed);
        for tau in [0.05, 0.1, 0.5, 1.0] {
            let cfg = DistillConfig { tau, ..DistillConfig::desk_scale() };
            let total = cirkd_total(&inst.inputs(), &cfg).map_err(|e| e.to_string())?;
            let p = total.parts;
            let values = [total.value, p.task, p.kd, p.batch_p2p, p.memory_p2p, p.memory_p2r];
            ensure(values.iter().all(|v| v.is_finite()), || format!("non-finite loss at tau {tau}: {values:?}"))?;
            ensure(total.grad_feats.iter().chain(&total.grad_logits).all(DenseMatrix::is_finite), || format!("non-finite gradient at tau {tau}"))?;
        }
    }
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let inst = Instance::random(200 + seed);
        let opts = RelationOpts::new(1e6);
        let mut values = vec![batch_p2p_loss(&inst.sf, &inst.tf, &opts).map_err(|e| e.to_string())?.value];
        for i in 0..inst.sf.len() {
            values.push(memory_p2p_loss(&inst.sf[i], &inst.tf[i], &inst.pixels, &opts).map_err(|e| e.to_string())?.value);
            values.push(memory_p2r_loss(&inst.sf[i], &inst.tf[i], &inst.regions, &opts).map_err(|e| e.to_string())?.value);
        }
        for v in values {
            ensure(v.is_finite() && v <= 1e-6, || format!("relational loss {v:.3e} at tau 1e6"))?;
            worst = worst.max(v);
        }
    }
    Ok(format!("finite over the sweep, largest relational loss at tau 1e6 is {worst:.2e}"))
}

fn determinism() -> Outcome {
    let cfg = TrainConfig::default();
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut traces = Vec::new();
    for d in &dirs {
        train_loop(&cfg, d.path()).map_err(|e| e.to_string())?;
        traces.push(std::fs::read(d.path().join(TRACE_FILE)).map_err(|e| e.to_string())?);
    }
    ensure(traces[0] == traces[1], || "trace.csv differs between runs".into())?;
    Ok(format!("two default runs, {} identical bytes", traces[0].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("formula oracles", formula_oracles),
        ("perfect-mimic fixed point", perfect_mimic),
        ("queue correctness", queue_correctness),
        ("ablation direction", ablation_direction),
        ("mIoU correctness", miou_correctness),
        ("temperature behavior", temperature_behavior),
        ("determinism", determinism),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id} {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
