//! Distillation training: data pool, teacher, step loop and evaluation.

mod ablation;
mod config;
mod report;

pub use ablation::{ablation_grid, run_ablation, AblationResult, AblationRow, AblationTable};
pub use config::{TeacherKind, TrainConfig};
pub use report::{
    read_summary, to_json, trace_csv, write_summary, write_trace_csv, FinalLosses, RunSummary, TraceRow, TRACE_HEADER,
};

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{batch_images, downsample_labels, generate_scene_with, upsample_labels, Scene};
use crate::error::{CirkdError, Result};
use crate::losses::{cirkd_total, region_pool, select_queue_pixels, task_ce_loss, CirkdInputs, LossBreakdown};
use crate::matrix::{DenseMatrix, FeatureMap, LabelMap, LogitMap};
use crate::memory::ClassQueue;
use crate::metrics::ConfusionMatrix;
use crate::nets::{
    load_tensors, save_tensors, EncoderSpec, Mode, OracleTeacher, Param, ProjectionHead, Segmenter, Sgd, Tensor,
};
use crate::rng::{stream_rng, SeededRng, Stream};

/// `base * (1 - iter / total)^power`.
pub fn poly_lr(iter: usize, total: usize, base: f64, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(CirkdError::Param("total iterations must be >= 1".into()));
    }
    if iter > total {
        return Err(CirkdError::Param(format!("iteration {iter} exceeds total {total}")));
    }
    Ok(base * (1.0 - iter as f64 / total as f64).powf(power))
}

/// The frozen teacher.
#[derive(Debug, Clone)]
pub enum Teacher {
    Net(Segmenter),
    Oracle(OracleTeacher),
}

impl Teacher {
    /// Builds the teacher named by `cfg`, pretraining it when needed.
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        match cfg.teacher {
            TeacherKind::Pretrained => pretrain_teacher(cfg).map(Teacher::Net),
            TeacherKind::Oracle => OracleTeacher::new(
                cfg.num_classes,
                cfg.d_t,
                cfg.oracle_noise,
                cfg.oracle_margin,
                stream_rng(cfg.seed, Stream::TeacherInit).gen(),
            )
            .map(Teacher::Oracle),
        }
    }

    fn outputs(
        &mut self,
        scenes: &[&Scene],
        labels: &[LabelMap],
        rng: &mut SeededRng,
    ) -> Result<Vec<(FeatureMap, LogitMap)>> {
        match self {
            Teacher::Net(net) => {
                let out = net.forward(&batch_images(scenes)?, Mode::Eval)?;
                Ok(out.features.to_feature_maps().into_iter().zip(out.logits.to_logit_maps()?).collect())
            }
            Teacher::Oracle(oracle) => labels.iter().map(|y| oracle.emit(y, rng)).collect(),
        }
    }
}

fn feature_labels(cfg: &TrainConfig, scene: &Scene) -> Result<LabelMap> {
    downsample_labels(
        &scene.labels,
        cfg.height / cfg.feature_stride,
        cfg.width / cfg.feature_stride,
    )
}

/// Trains the three-layer teacher on fresh scenes with the task loss only.
pub fn pretrain_teacher(cfg: &TrainConfig) -> Result<Segmenter> {
    let spec = EncoderSpec::teacher(3, cfg.teacher_width, cfg.d_t, cfg.feature_stride)?
        .with_batch_norm(cfg.encoder_bn);
    let mut net = Segmenter::new(spec, cfg.num_classes, &mut stream_rng(cfg.seed, Stream::TeacherInit));
    let mut data_rng = stream_rng(cfg.seed, Stream::TeacherData);
    let mut opt = Sgd::new(cfg.momentum);
    let total = cfg.teacher_iterations;
    for it in 0..total {
        let lr = poly_lr(it, total, cfg.teacher_lr, cfg.lr_power)?;
        let scenes = (0..cfg.batch_size)
            .map(|_| generate_scene_with(data_rng.gen(), cfg.height, cfg.width, cfg.num_classes, &cfg.scene))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Scene> = scenes.iter().collect();
        let out = net.forward(&batch_images(&refs)?, Mode::Train)?;
        let logits = out.logits.to_logit_maps()?;
        let mut grads = Vec::with_capacity(scenes.len());
        for (z, s) in logits.iter().zip(&scenes) {
            let mut g = task_ce_loss(z, &feature_labels(cfg, s)?)?
                .grad_logits
                .expect("task loss yields logit grads");
            g.scale(1.0 / scenes.len() as f64);
            grads.push(g);
        }
        net.zero_grad();
        net.backward(None, &Tensor::from_maps(out.logits.h, out.logits.w, &grads)?)?;
        opt.step(net.params_mut(), lr)?;
        check_params(net.params())?;
    }
    Ok(net)
}

/// Rescales all gradients together so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

fn check_params<'a>(params: impl IntoIterator<Item = &'a Param>) -> Result<()> {
    for p in params {
        if !p.value.iter().all(|v| v.is_finite()) {
            return Err(CirkdError::NumericOverflow("parameter update".into()));
        }
    }
    Ok(())
}

/// One training-pool entry with the teacher's cached outputs.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub scene: Scene,
    /// Labels at feature resolution.
    pub labels: LabelMap,
    pub teacher_feat: FeatureMap,
    pub teacher_logits: LogitMap,
}

/// Teacher, training pool and validation split shared by every run of one seed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub teacher: Teacher,
    pub train: Vec<TrainSample>,
    pub val: Vec<Scene>,
}

impl Experiment {
    pub fn prepare(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut teacher = Teacher::build(cfg)?;
        let mut scene_rng = stream_rng(cfg.seed, Stream::TrainScenes);
        let mut noise_rng = stream_rng(cfg.seed, Stream::OracleNoise);
        let scenes = (0..cfg.train_scenes)
            .map(|_| generate_scene_with(scene_rng.gen(), cfg.height, cfg.width, cfg.num_classes, &cfg.scene))
            .collect::<Result<Vec<_>>>()?;
        let mut train = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(16) {
            let refs: Vec<&Scene> = chunk.iter().collect();
            let labels = chunk.iter().map(|s| feature_labels(cfg, s)).collect::<Result<Vec<_>>>()?;
            let outs = teacher.outputs(&refs, &labels, &mut noise_rng)?;
            for ((scene, labels), (teacher_feat, teacher_logits)) in chunk.iter().zip(labels).zip(outs) {
                train.push(TrainSample {
                    scene: scene.clone(),
                    labels,
                    teacher_feat,
                    teacher_logits,
                });
            }
        }
        Ok(Self {
            teacher,
            train,
            val: validation_split(cfg)?,
        })
    }

    /// Teacher mIoU on the validation split, when the teacher is a network.
    pub fn teacher_miou(&self, cfg: &TrainConfig) -> Result<Option<f64>> {
        match &self.teacher {
            Teacher::Net(net) => evaluate(&mut net.clone(), &self.val, cfg.num_classes)?.miou().map(Some),
            Teacher::Oracle(_) => Ok(None),
        }
    }
}

/// Student network shaped by `cfg` with weights restored from a checkpoint
/// written by [`train_loop`].
pub fn load_student(cfg: &TrainConfig, checkpoint: &Path) -> Result<Segmenter> {
    cfg.validate()?;
    let spec = EncoderSpec::student(3, cfg.d_s, cfg.feature_stride)?.with_batch_norm(cfg.encoder_bn);
    let mut net = Segmenter::new(spec, cfg.num_classes, &mut stream_rng(cfg.seed, Stream::StudentInit));
    net.load_state(&load_tensors(checkpoint)?)?;
    Ok(net)
}

pub fn validation_split(cfg: &TrainConfig) -> Result<Vec<Scene>> {
    (0..cfg.val_scenes as u64)
        .map(|i| generate_scene_with(cfg.val_seed + i, cfg.height, cfg.width, cfg.num_classes, &cfg.scene))
        .collect()
}

/// Full-resolution confusion matrix of a network's upsampled predictions.
pub fn evaluate(net: &mut Segmenter, scenes: &[Scene], num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for chunk in scenes.chunks(16) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let out = net.forward(&batch_images(&refs)?, Mode::Eval)?;
        for (z, scene) in out.logits.to_logit_maps()?.iter().zip(chunk) {
            let pred = upsample_labels(&z.argmax(scene.labels.ignore_index()), scene.height, scene.width)?;
            cm.accumulate(&pred, &scene.labels)?;
        }
    }
    Ok(cm)
}

/// Optimizer, schedule and random streams of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: usize,
    pub total_iterations: usize,
    pub base_lr: f64,
    pub power: f64,
    pub optimizer: Sgd,
    order_rng: SeededRng,
    sampling_rng: SeededRng,
    select_rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
}

impl TrainState {
    fn new(cfg: &TrainConfig, pool: usize) -> Self {
        Self {
            iteration: 0,
            total_iterations: cfg.iterations,
            base_lr: cfg.base_lr,
            power: cfg.lr_power,
            optimizer: Sgd::new(cfg.momentum),
            order_rng: stream_rng(cfg.seed, Stream::DataOrder),
            sampling_rng: stream_rng(cfg.seed, Stream::QueueSampling),
            select_rng: stream_rng(cfg.seed, Stream::QueueSelect),
            order: (0..pool).collect(),
            cursor: pool,
        }
    }

    pub fn lr(&self) -> Result<f64> {
        if self.total_iterations == 0 {
            return Ok(self.base_lr);
        }
        poly_lr(self.iteration, self.total_iterations, self.base_lr, self.power)
    }

    /// Next mini-batch of pool indices; the pool is reshuffled every epoch.
    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.order_rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Number of completed steps, counting this one.
    pub iteration: usize,
    pub lr: f64,
    pub parts: LossBreakdown,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub student: Segmenter,
    /// Present only when the student and teacher widths differ.
    pub head: Option<ProjectionHead>,
    pub pixel_queue: ClassQueue,
    pub region_queue: ClassQueue,
    pub state: TrainState,
    pub experiment: Arc<Experiment>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, experiment: Arc<Experiment>) -> Result<Self> {
        cfg.validate()?;
        let mut init = stream_rng(cfg.seed, Stream::StudentInit);
        let spec = EncoderSpec::student(3, cfg.d_s, cfg.feature_stride)?.with_batch_norm(cfg.encoder_bn);
        let student = Segmenter::new(spec, cfg.num_classes, &mut init);
        let head = (cfg.d_s != cfg.d_t).then(|| ProjectionHead::new(cfg.d_s, cfg.d_t, cfg.d_t, &mut init));
        let mut qrng = stream_rng(cfg.seed, Stream::QueueInit);
        let d = &cfg.distill;
        Ok(Self {
            pixel_queue: ClassQueue::init(cfg.num_classes, d.n_p, cfg.d_t, qrng.gen())?,
            region_queue: ClassQueue::init(cfg.num_classes, d.n_r, cfg.d_t, qrng.gen())?,
            state: TrainState::new(cfg, experiment.train.len()),
            cfg: cfg.clone(),
            student,
            head,
            experiment,
        })
    }

    fn relational(&self) -> bool {
        let d = &self.cfg.distill;
        d.alpha > 0.0 || d.beta > 0.0 || d.gamma > 0.0
    }

    /// One iteration: forward, losses, student update, then queue pushes.
    pub fn train_step(&mut self) -> Result<StepReport> {
        if self.state.iteration >= self.state.total_iterations {
            return Err(CirkdError::State("iteration budget exhausted".into()));
        }
        let lr = self.state.lr()?;
        let exp = Arc::clone(&self.experiment);
        let batch: Vec<&TrainSample> = self
            .state
            .next_batch(self.cfg.batch_size)
            .into_iter()
            .map(|i| &exp.train[i])
            .collect();
        let scenes: Vec<&Scene> = batch.iter().map(|s| &s.scene).collect();
        let relational = self.relational();
        let dc = &self.cfg.distill;

        let out = self.student.forward(&batch_images(&scenes)?, Mode::Train)?;
        let (fh, fw) = (out.logits.h, out.logits.w);
        let student_logits = out.logits.to_logit_maps()?;
        let student_feats = match (&mut self.head, relational) {
            (Some(head), true) => head.forward(&out.features, Mode::Train)?.to_feature_maps(),
            _ => out.features.to_feature_maps(),
        };
        let teacher_feats: Vec<FeatureMap> = batch.iter().map(|s| s.teacher_feat.clone()).collect();
        let teacher_logits: Vec<LogitMap> = batch.iter().map(|s| s.teacher_logits.clone()).collect();
        let labels: Vec<LabelMap> = batch.iter().map(|s| s.labels.clone()).collect();

        let pixel_samples = if dc.beta > 0.0 {
            Some(self.pixel_queue.sample_balanced(dc.k_p, &mut self.state.sampling_rng)?)
        } else {
            None
        };
        let region_samples = if dc.gamma > 0.0 {
            Some(self.region_queue.sample_balanced(dc.k_r, &mut self.state.sampling_rng)?)
        } else {
            None
        };
        let loss = cirkd_total(
            &CirkdInputs {
                student_feats: &student_feats,
                teacher_feats: &teacher_feats,
                student_logits: &student_logits,
                teacher_logits: &teacher_logits,
                labels: &labels,
                pixel_samples: pixel_samples.as_ref(),
                region_samples: region_samples.as_ref(),
            },
            dc,
        )?;
        if !loss.value.is_finite() {
            return Err(CirkdError::NumericOverflow(format!(
                "total loss at iteration {}",
                self.state.iteration
            )));
        }

        self.student.zero_grad();
        let grad_logits = Tensor::from_maps(fh, fw, &loss.grad_logits)?;
        let grad_feat = if relational {
            let g = Tensor::from_maps(fh, fw, &loss.grad_feats)?;
            Some(match &mut self.head {
                Some(head) => {
                    head.zero_grad();
                    head.backward(&g)?
                }
                None => g,
            })
        } else {
            None
        };
        self.student.backward(grad_feat.as_ref(), &grad_logits)?;
        let mut params = self.student.params_mut();
        if relational {
            if let Some(head) = &mut self.head {
                params.extend(head.params_mut());
            }
        }
        if self.cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut params, self.cfg.grad_clip);
        }
        self.state.optimizer.step(params, lr)?;
        check_params(self.student.params())?;

        self.state.iteration += 1;
        self.push_teacher_embeddings(&batch)?;
        Ok(StepReport {
            iteration: self.state.iteration,
            lr,
            parts: loss.parts,
            total: loss.value,
        })
    }

    /// Pushes `v_push` pixels per present class and every region embedding of
    /// each image, tagged with the current iteration. All pushes are
    /// validated before any is applied.
    fn push_teacher_embeddings(&mut self, batch: &[&TrainSample]) -> Result<()> {
        let dc = &self.cfg.distill;
        let mut pixel_pushes: Vec<(usize, DenseMatrix)> = Vec::new();
        let mut region_pushes: Vec<(usize, DenseMatrix)> = Vec::new();
        for s in batch {
            let picks = select_queue_pixels(
                &s.teacher_feat,
                &s.labels,
                self.cfg.num_classes,
                dc.v_push,
                &mut self.state.select_rng,
            )?;
            for (c, m) in picks.into_iter().enumerate() {
                if m.rows() > 0 {
                    self.pixel_queue.check_push(c, &m)?;
                    pixel_pushes.push((c, m));
                }
            }
            let (regions, ids) = region_pool(&s.teacher_feat, &s.labels, dc.renormalize_regions)?;
            for (k, c) in ids.into_iter().enumerate() {
                let m = DenseMatrix::from_rows(&[regions.row(k)]);
                self.region_queue.check_push(c, &m)?;
                region_pushes.push((c, m));
            }
        }
        let tag = self.state.iteration as u64;
        for (c, m) in pixel_pushes {
            self.pixel_queue.enqueue_tagged(c, &m, tag)?;
        }
        for (c, m) in region_pushes {
            self.region_queue.enqueue_tagged(c, &m, tag)?;
        }
        Ok(())
    }

    pub fn evaluate(&mut self) -> Result<ConfusionMatrix> {
        let exp = Arc::clone(&self.experiment);
        evaluate(&mut self.student, &exp.val, self.cfg.num_classes)
    }

    /// Runs every remaining step, evaluating at iteration 0, every
    /// `eval_interval` steps and at the end. `on_row` sees each trace row.
    pub fn run(&mut self, mut on_row: impl FnMut(&TraceRow)) -> Result<RunOutcome> {
        let start = Instant::now();
        let mut trace = Vec::with_capacity(self.state.total_iterations + 1);
        let mut cm = self.evaluate()?;
        let first = TraceRow {
            iter: self.state.iteration,
            lr: self.state.lr()?,
            parts: None,
            total: None,
            val_miou: cm.miou().ok(),
        };
        on_row(&first);
        trace.push(first);
        let mut last = None;
        while self.state.iteration < self.state.total_iterations {
            let step = self.train_step()?;
            let due = step.iteration % self.cfg.eval_interval == 0
                || step.iteration == self.state.total_iterations;
            let val_miou = if due {
                cm = self.evaluate()?;
                Some(cm.miou()?)
            } else {
                None
            };
            let row = TraceRow {
                iter: step.iteration,
                lr: step.lr,
                parts: Some(step.parts),
                total: Some(step.total),
                val_miou,
            };
            on_row(&row);
            trace.push(row);
            last = Some(step);
        }
        Ok(RunOutcome {
            final_miou: cm.miou()?,
            per_class_iou: cm.per_class_iou(),
            last_step: last,
            trace,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn summary(&self, outcome: &RunOutcome) -> RunSummary {
        RunSummary {
            config: self.cfg.clone(),
            iterations: self.state.iteration,
            final_miou: outcome.final_miou,
            per_class_iou: outcome.per_class_iou.clone(),
            final_losses: outcome.last_step.map(|s| FinalLosses {
                task: s.parts.task,
                kd: s.parts.kd,
                batch_p2p: s.parts.batch_p2p,
                memory_p2p: s.parts.memory_p2p,
                memory_p2r: s.parts.memory_p2r,
                total: s.total,
            }),
            wall_clock_seconds: outcome.seconds,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub last_step: Option<StepReport>,
    pub trace: Vec<TraceRow>,
    pub seconds: f64,
}

/// Artifact names written by [`train_loop`].
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "student.ckpt";

/// Prepares the teacher and data, trains, and writes the trace, the JSON
/// summary and the student checkpoint into `out_dir`.
pub fn train_loop(cfg: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| CirkdError::io(out_dir, e))?;
    let experiment = Arc::new(Experiment::prepare(cfg)?);
    let mut trainer = Trainer::new(cfg, experiment)?;
    let outcome = trainer.run(|_| {})?;
    write_trace_csv(&out_dir.join(TRACE_FILE), &outcome.trace)?;
    let summary = trainer.summary(&outcome);
    write_summary(&out_dir.join(SUMMARY_FILE), &summary)?;
    save_tensors(&out_dir.join(CHECKPOINT_FILE), &trainer.student.state_tensors())?;
    Ok(summary)
}
