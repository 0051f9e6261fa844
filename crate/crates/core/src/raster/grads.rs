use crate::scene::{ParamGroup, TrainMask};

/// Per-kernel gradients of a scalar loss, one row per kernel of the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub position: Vec<[f64; 3]>,
    pub log_scale: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub color: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub seg: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![[0.0; 3]; n],
            log_scale: vec![[0.0; 3]; n],
            rotation: vec![[0.0; 4]; n],
            color: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            seg: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    /// Flattened view of one kernel's gradient, in storage order
    /// `position, log_scale, rotation, color, opacity, seg`.
    pub fn row(&self, i: usize) -> [f64; 16] {
        let mut r = [0.0; 16];
        r[0..3].copy_from_slice(&self.position[i]);
        r[3..6].copy_from_slice(&self.log_scale[i]);
        r[6..10].copy_from_slice(&self.rotation[i]);
        r[10..13].copy_from_slice(&self.color[i]);
        r[13] = self.opacity[i];
        r[14] = self.seg[i];
        r
    }

    pub fn zero_row(&mut self, i: usize) {
        self.position[i] = [0.0; 3];
        self.log_scale[i] = [0.0; 3];
        self.rotation[i] = [0.0; 4];
        self.color[i] = [0.0; 3];
        self.opacity[i] = 0.0;
        self.seg[i] = 0.0;
    }

    /// Zeroes every row/group that `masks` marks as frozen.
    pub fn apply_mask(&mut self, masks: &[TrainMask]) {
        assert_eq!(masks.len(), self.len());
        for (i, m) in masks.iter().enumerate() {
            if !m.geometry {
                self.position[i] = [0.0; 3];
                self.log_scale[i] = [0.0; 3];
                self.rotation[i] = [0.0; 4];
            }
            if !m.color {
                self.color[i] = [0.0; 3];
            }
            if !m.opacity {
                self.opacity[i] = 0.0;
            }
            if !m.seg {
                self.seg[i] = 0.0;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        let rows = self
            .position
            .iter_mut()
            .chain(self.log_scale.iter_mut())
            .chain(self.color.iter_mut())
            .flat_map(|r| r.iter_mut());
        for v in rows
            .chain(self.rotation.iter_mut().flatten())
            .chain(self.opacity.iter_mut())
            .chain(self.seg.iter_mut())
        {
            *v *= k;
        }
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &ParamGradients, k: f64) {
        assert_eq!(self.len(), other.len(), "gradient length mismatch");
        fn axpy<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]], k: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                for (u, v) in x.iter_mut().zip(y) {
                    *u += k * v;
                }
            }
        }
        axpy(&mut self.position, &other.position, k);
        axpy(&mut self.log_scale, &other.log_scale, k);
        axpy(&mut self.rotation, &other.rotation, k);
        axpy(&mut self.color, &other.color, k);
        for (x, y) in self.opacity.iter_mut().zip(&other.opacity) {
            *x += k * y;
        }
        for (x, y) in self.seg.iter_mut().zip(&other.seg) {
            *x += k * y;
        }
    }

    pub fn add(&mut self, other: &ParamGradients) {
        self.add_scaled(other, 1.0);
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.position
            .iter()
            .flatten()
            .chain(self.log_scale.iter().flatten())
            .chain(self.rotation.iter().flatten())
            .chain(self.color.iter().flatten())
            .chain(self.opacity.iter())
            .chain(self.seg.iter())
            .copied()
    }

    pub fn is_all_zero(&self) -> bool {
        self.iter_values().all(|v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.iter_values().map(f64::abs).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &ParamGradients) -> f64 {
        self.iter_values()
            .zip(other.iter_values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Flattened gradients of one parameter group across all kernels.
    /// Geometry is split so each sub-parameter can be checked on its own.
    pub fn group(&self, group: GradGroup) -> Vec<f64> {
        match group {
            GradGroup::Position => self.position.iter().flatten().copied().collect(),
            GradGroup::LogScale => self.log_scale.iter().flatten().copied().collect(),
            GradGroup::Rotation => self.rotation.iter().flatten().copied().collect(),
            GradGroup::Color => self.color.iter().flatten().copied().collect(),
            GradGroup::Opacity => self.opacity.clone(),
            GradGroup::Seg => self.seg.clone(),
        }
    }
}

/// Gradient blocks addressed individually; `Position | LogScale | Rotation`
/// together form [`ParamGroup::Geometry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradGroup {
    Position,
    LogScale,
    Rotation,
    Color,
    Opacity,
    Seg,
}

impl GradGroup {
    pub const ALL: [GradGroup; 6] = [
        GradGroup::Position,
        GradGroup::LogScale,
        GradGroup::Rotation,
        GradGroup::Color,
        GradGroup::Opacity,
        GradGroup::Seg,
    ];

    pub fn param_group(self) -> ParamGroup {
        match self {
            GradGroup::Position | GradGroup::LogScale | GradGroup::Rotation => ParamGroup::Geometry,
            GradGroup::Color => ParamGroup::Color,
            GradGroup::Opacity => ParamGroup::Opacity,
            GradGroup::Seg => ParamGroup::Seg,
        }
    }

    pub fn width(self) -> usize {
        match self {
            GradGroup::Position | GradGroup::LogScale | GradGroup::Color => 3,
            GradGroup::Rotation => 4,
            GradGroup::Opacity | GradGroup::Seg => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GradGroup::Position => "position",
            GradGroup::LogScale => "log_scale",
            GradGroup::Rotation => "rotation",
            GradGroup::Color => "color",
            GradGroup::Opacity => "opacity",
            GradGroup::Seg => "seg",
        }
    }
}
