//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SceneParams;
use crate::error::{CirkdError, Result};
use crate::losses::DistillConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    /// Three-layer encoder trained on the task before distillation.
    Pretrained,
    /// Noisy class prototypes read off the ground truth.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub d_s: usize,
    pub d_t: usize,
    pub feature_stride: usize,
    /// Batch norm between each encoder convolution and its ReLU.
    pub encoder_bn: bool,
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling for the student update; 0 disables clipping.
    pub grad_clip: f64,
    pub eval_interval: usize,
    pub val_scenes: usize,
    /// First seed of the validation split; independent of `seed`.
    pub val_seed: u64,
    /// Size of the fixed training pool.
    pub train_scenes: usize,
    pub teacher: TeacherKind,
    pub teacher_width: usize,
    pub teacher_iterations: usize,
    pub teacher_lr: f64,
    pub oracle_noise: f64,
    pub oracle_margin: f64,
    pub scene: SceneParams,
    pub distill: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            batch_size: 4,
            height: 32,
            width: 32,
            num_classes: 4,
            d_s: 8,
            d_t: 16,
            feature_stride: 4,
            encoder_bn: true,
            base_lr: 0.02,
            lr_power: 0.9,
            momentum: 0.9,
            grad_clip: 0.0,
            eval_interval: 100,
            val_scenes: 64,
            val_seed: 1 << 40,
            train_scenes: 32,
            teacher: TeacherKind::Pretrained,
            teacher_width: 16,
            teacher_iterations: 2000,
            teacher_lr: 0.02,
            oracle_noise: 0.1,
            oracle_margin: 5.0,
            scene: SceneParams::default(),
            distill: DistillConfig::desk_scale(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CirkdError::Config(format!("invalid value {value:?} for key {key:?}")))
}

impl TrainConfig {
    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "d_s" => self.d_s = parse(key, v)?,
            "d_t" => self.d_t = parse(key, v)?,
            "feature_stride" => self.feature_stride = parse(key, v)?,
            "encoder_bn" => self.encoder_bn = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "lr_power" => self.lr_power = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "val_scenes" => self.val_scenes = parse(key, v)?,
            "val_seed" => self.val_seed = parse(key, v)?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "teacher" => {
                self.teacher = match v {
                    "pretrained" => TeacherKind::Pretrained,
                    "oracle" => TeacherKind::Oracle,
                    _ => return Err(CirkdError::Config(format!("unknown teacher kind {v:?}"))),
                }
            }
            "teacher_width" => self.teacher_width = parse(key, v)?,
            "teacher_iterations" => self.teacher_iterations = parse(key, v)?,
            "teacher_lr" => self.teacher_lr = parse(key, v)?,
            "oracle_noise" => self.oracle_noise = parse(key, v)?,
            "oracle_margin" => self.oracle_margin = parse(key, v)?,
            "pixel_noise" => self.scene.pixel_noise = parse(key, v)?,
            "color_jitter" => self.scene.color_jitter = parse(key, v)?,
            "min_gain" => self.scene.min_gain = parse(key, v)?,
            "global_shift" => self.scene.global_shift = parse(key, v)?,
            "ignore_border_prob" => self.scene.ignore_border_prob = parse(key, v)?,
            "ignore_index" => {
                let idx = parse(key, v)?;
                self.scene.ignore_index = idx;
                self.distill.ignore_index = idx;
            }
            "kd_weight" => self.distill.kd_weight = parse(key, v)?,
            "alpha" => self.distill.alpha = parse(key, v)?,
            "beta" => self.distill.beta = parse(key, v)?,
            "gamma" => self.distill.gamma = parse(key, v)?,
            "tau" => self.distill.tau = parse(key, v)?,
            "t_kd" => self.distill.t_kd = parse(key, v)?,
            "v_push" => self.distill.v_push = parse(key, v)?,
            "k_p" => self.distill.k_p = parse(key, v)?,
            "k_r" => self.distill.k_r = parse(key, v)?,
            "n_p" => self.distill.n_p = parse(key, v)?,
            "n_r" => self.distill.n_r = parse(key, v)?,
            "kl_reversed" => self.distill.kl_reversed = parse(key, v)?,
            "renormalize_regions" => self.distill.renormalize_regions = parse(key, v)?,
            "mask_ignored_anchors" => self.distill.mask_ignored_anchors = parse(key, v)?,
            _ => return Err(CirkdError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CirkdError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| CirkdError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CirkdError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_str(&text).map_err(|e| CirkdError::Config(format!("{}: {e}", path.display())))
    }

    /// Every key with its current value, in the order [`Self::set`] accepts them.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let d = &self.distill;
        let teacher = match self.teacher {
            TeacherKind::Pretrained => "pretrained",
            TeacherKind::Oracle => "oracle",
        };
        vec![
            ("seed", self.seed.to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("d_s", self.d_s.to_string()),
            ("d_t", self.d_t.to_string()),
            ("feature_stride", self.feature_stride.to_string()),
            ("encoder_bn", self.encoder_bn.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("lr_power", self.lr_power.to_string()),
            ("momentum", self.momentum.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("val_scenes", self.val_scenes.to_string()),
            ("val_seed", self.val_seed.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("teacher", teacher.to_string()),
            ("teacher_width", self.teacher_width.to_string()),
            ("teacher_iterations", self.teacher_iterations.to_string()),
            ("teacher_lr", self.teacher_lr.to_string()),
            ("oracle_noise", self.oracle_noise.to_string()),
            ("oracle_margin", self.oracle_margin.to_string()),
            ("pixel_noise", self.scene.pixel_noise.to_string()),
            ("color_jitter", self.scene.color_jitter.to_string()),
            ("min_gain", self.scene.min_gain.to_string()),
            ("global_shift", self.scene.global_shift.to_string()),
            ("ignore_border_prob", self.scene.ignore_border_prob.to_string()),
            ("ignore_index", self.scene.ignore_index.to_string()),
            ("kd_weight", d.kd_weight.to_string()),
            ("alpha", d.alpha.to_string()),
            ("beta", d.beta.to_string()),
            ("gamma", d.gamma.to_string()),
            ("tau", d.tau.to_string()),
            ("t_kd", d.t_kd.to_string()),
            ("v_push", d.v_push.to_string()),
            ("k_p", d.k_p.to_string()),
            ("k_r", d.k_r.to_string()),
            ("n_p", d.n_p.to_string()),
            ("n_r", d.n_r.to_string()),
            ("kl_reversed", d.kl_reversed.to_string()),
            ("renormalize_regions", d.renormalize_regions.to_string()),
            ("mask_ignored_anchors", d.mask_ignored_anchors.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CirkdError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.num_classes < 2 || self.num_classes >= self.scene.ignore_index as usize {
            return bad(format!(
                "num_classes must lie in [2, {}), got {}",
                self.scene.ignore_index, self.num_classes
            ));
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("images must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if ![1, 2, 4].contains(&self.feature_stride)
            || self.height % self.feature_stride != 0
            || self.width % self.feature_stride != 0
        {
            return bad(format!(
                "feature_stride {} must be 1, 2 or 4 and divide the image size",
                self.feature_stride
            ));
        }
        if self.d_s == 0 || self.d_t == 0 || self.teacher_width == 0 {
            return bad("feature widths must be >= 1".into());
        }
        for (name, v) in [("base_lr", self.base_lr), ("teacher_lr", self.teacher_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if !(self.lr_power >= 0.0 && self.lr_power.is_finite()) {
            return bad(format!("lr_power must be >= 0, got {}", self.lr_power));
        }
        if self.eval_interval == 0 || self.val_scenes == 0 || self.train_scenes == 0 {
            return bad("eval_interval, val_scenes and train_scenes must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.scene.ignore_border_prob) {
            return bad("ignore_border_prob must lie in [0, 1]".into());
        }
        if self.scene.ignore_index != self.distill.ignore_index {
            return bad("scene and loss ignore indices differ".into());
        }
        self.distill
            .validate(self.num_classes)
            .map_err(|e| CirkdError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.seed = 99;
        cfg.teacher = TeacherKind::Oracle;
        cfg.distill.tau = 0.37;
        cfg.scene.color_jitter = 0.1 + 0.2;
        assert_eq!(TrainConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = TrainConfig::parse_str("# run\n\n  iterations = 5 \nalpha=0  # off\n").unwrap();
        assert_eq!(cfg.iterations, 5);
        assert_eq!(cfg.distill.alpha, 0.0);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for text in ["lr = 0.1", "iterations = -3", "iterations", "teacher = big", "tau = 0"] {
            let err = TrainConfig::parse_str(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = TrainConfig::load(Path::new("/nonexistent/run.cfg")).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("/nonexistent/run.cfg"));
    }
}
