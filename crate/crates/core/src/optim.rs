//! First-order optimizers over kernel parameters with per-group step sizes.

use serde::{Deserialize, Serialize};

use crate::raster::ParamGradients;
use crate::scene::{normalize_quat, Scene, MIN_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Bias-corrected first and second moment estimates.
    Adam,
    /// `m ← β₁ m + (1 − β₁) g`, `x ← x − lr · m`.
    Momentum,
}

/// Per-group step sizes. The position rate is relative to the scene radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub position: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub seg: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            color: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
            seg: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

const ROW: usize = 16;

/// Optimizer state for one stage. Indices refer to the scene's kernel order,
/// which must not change while the optimizer is in use.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    row_lr: [f64; ROW],
    m: Vec<[f64; ROW]>,
    v: Vec<[f64; ROW]>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, kernel_count: usize, scene_radius: f64) -> Self {
        let lr = &config.lr;
        let mut row_lr = [0.0; ROW];
        row_lr[0..3].fill(lr.position * scene_radius);
        row_lr[3..6].fill(lr.scale);
        row_lr[6..10].fill(lr.rotation);
        row_lr[10..13].fill(lr.color);
        row_lr[13] = lr.opacity;
        row_lr[14] = lr.seg;
        Self {
            config,
            row_lr,
            m: vec![[0.0; ROW]; kernel_count],
            v: vec![[0.0; ROW]; kernel_count],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Kernels and groups frozen in the scene's mask are
    /// left untouched, including their optimizer state.
    pub fn step(&mut self, scene: &mut Scene, grads: &ParamGradients) {
        assert_eq!(scene.len(), self.m.len(), "optimizer/scene size mismatch");
        assert_eq!(grads.len(), scene.len(), "gradient/scene size mismatch");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let log_floor = MIN_SCALE.ln();

        let masks = scene.trainable().to_vec();
        for (i, mask) in masks.iter().enumerate() {
            if !mask.any() {
                continue;
            }
            let g = grads.row(i);
            let active: [bool; ROW] = std::array::from_fn(|j| match j {
                0..=9 => mask.geometry,
                10..=12 => mask.color,
                13 => mask.opacity,
                14 => mask.seg,
                _ => false,
            });
            let mut delta = [0.0; ROW];
            for j in 0..ROW {
                if !active[j] {
                    continue;
                }
                let m = &mut self.m[i][j];
                *m = c.beta1 * *m + (1.0 - c.beta1) * g[j];
                delta[j] = match c.kind {
                    OptimizerKind::Momentum => self.row_lr[j] * *m,
                    OptimizerKind::Adam => {
                        let v = &mut self.v[i][j];
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g[j] * g[j];
                        self.row_lr[j] * (*m / bc1) / ((*v / bc2).sqrt() + c.eps)
                    }
                };
            }

            let k = &mut scene.kernels_mut()[i];
            if mask.geometry {
                for a in 0..3 {
                    k.position[a] = (k.position[a] as f64 - delta[a]) as f32;
                    k.log_scale[a] = (k.log_scale[a] as f64 - delta[3 + a]).max(log_floor) as f32;
                }
                let q: [f64; 4] = std::array::from_fn(|a| k.rotation[a] as f64 - delta[6 + a]);
                k.rotation = normalize_quat(q).map(|v| v as f32);
            }
            if mask.color {
                for a in 0..3 {
                    k.color[a] = (k.color[a] as f64 - delta[10 + a]).clamp(0.0, 1.0) as f32;
                }
            }
            if mask.opacity {
                k.opacity_logit = (k.opacity_logit as f64 - delta[13]) as f32;
            }
            if mask.seg {
                k.seg_logit = (k.seg_logit as f64 - delta[14]) as f32;
            }
        }
    }
}
