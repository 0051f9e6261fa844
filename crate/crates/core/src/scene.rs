//! Gaussian kernels, scenes and trainable masks.

use nalgebra::{Matrix3, Vector3};

/// Lower bound on every kernel axis scale, in scene units.
pub const MIN_SCALE: f64 = 1e-6;
/// Lower bound on covariance eigenvalues (scene units squared).
pub const MIN_COV_EIGENVALUE: f64 = 1e-12;

/// Mark bookkeeping for kernels created around a block transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Mark {
    #[default]
    Original,
    Extended,
    NewPart,
}

impl Mark {
    pub fn to_u8(self) -> u8 {
        match self {
            Mark::Original => 0,
            Mark::Extended => 1,
            Mark::NewPart => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Mark> {
        match v {
            0 => Some(Mark::Original),
            1 => Some(Mark::Extended),
            2 => Some(Mark::NewPart),
            _ => None,
        }
    }
}

/// One splat. Stored in the same precision as its on-disk form so that
/// checkpoints round-trip exactly; all rendering arithmetic is done in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub position: [f32; 3],
    /// Natural log of the per-axis standard deviation.
    pub log_scale: [f32; 3],
    /// Quaternion, `w x y z`.
    pub rotation: [f32; 4],
    pub color: [f32; 3],
    pub opacity_logit: f32,
    pub seg_logit: f32,
    pub block_id: i32,
    pub mark: Mark,
    /// Raw little-endian bytes of PLY properties this crate does not interpret.
    pub extra: Vec<u8>,
}

impl Default for GaussianKernel {
    fn default() -> Self {
        Self {
            position: [0.0; 3],
            log_scale: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            color: [0.5; 3],
            opacity_logit: 0.0,
            seg_logit: 0.0,
            block_id: 0,
            mark: Mark::Original,
            extra: Vec::new(),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn bits3(a: &[f32; 3]) -> [u32; 3] {
    a.map(f32::to_bits)
}

impl GaussianKernel {
    pub fn with_position(mut self, p: [f64; 3]) -> Self {
        self.position = p.map(|v| v as f32);
        self
    }

    pub fn with_scale(mut self, s: [f64; 3]) -> Self {
        self.log_scale = s.map(|v| v.max(MIN_SCALE).ln() as f32);
        self
    }

    pub fn with_color(mut self, c: [f64; 3]) -> Self {
        self.color = c.map(|v| v as f32);
        self
    }

    pub fn with_opacity(mut self, alpha: f64) -> Self {
        self.opacity_logit = logit(alpha) as f32;
        self
    }

    pub fn with_rotation(mut self, q: [f64; 4]) -> Self {
        self.rotation = q.map(|v| v as f32);
        self
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(
            self.position[0] as f64,
            self.position[1] as f64,
            self.position[2] as f64,
        )
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(|l| (l as f64).exp().max(MIN_SCALE))
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit as f64)
    }

    pub fn p_seg(&self) -> f64 {
        sigmoid(self.seg_logit as f64)
    }

    pub fn color_f64(&self) -> [f64; 3] {
        self.color.map(|c| c as f64)
    }

    /// Unit quaternion (`w x y z`); a zero quaternion maps to the identity.
    pub fn unit_rotation(&self) -> [f64; 4] {
        normalize_quat(self.rotation.map(|v| v as f64))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.unit_rotation())
    }

    /// Field-wise comparison on the raw bit patterns.
    pub fn bit_eq(&self, other: &GaussianKernel) -> bool {
        bits3(&self.position) == bits3(&other.position)
            && bits3(&self.log_scale) == bits3(&other.log_scale)
            && self.rotation.map(f32::to_bits) == other.rotation.map(f32::to_bits)
            && bits3(&self.color) == bits3(&other.color)
            && self.opacity_logit.to_bits() == other.opacity_logit.to_bits()
            && self.seg_logit.to_bits() == other.seg_logit.to_bits()
            && self.block_id == other.block_id
            && self.mark == other.mark
            && self.extra == other.extra
    }

    /// Same as [`bit_eq`](Self::bit_eq) but ignores `seg_logit`.
    pub fn bit_eq_except_seg(&self, other: &GaussianKernel) -> bool {
        let mut a = self.clone();
        a.seg_logit = other.seg_logit;
        a.bit_eq(other)
    }
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n < 1e-12 {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        q.map(|v| v / n)
    }
}

/// Rotation matrix of a unit quaternion `w x y z`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Symmetric positive semi-definite 3x3 covariance in scene units squared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

impl Covariance3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// `R S Sᵀ Rᵀ` for the kernel's rotation `R` and `S = diag(scale)`.
pub fn covariance(kernel: &GaussianKernel) -> Covariance3 {
    let r = kernel.rotation_matrix();
    let s = kernel.scale();
    let d = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let m = r * d * r.transpose();
    // Symmetrize away rounding asymmetry.
    Covariance3((m + m.transpose()) * 0.5)
}

/// Parameter groups that can be independently frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Position, log-scale and rotation.
    Geometry,
    Color,
    Opacity,
    Seg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrainMask {
    pub geometry: bool,
    pub color: bool,
    pub opacity: bool,
    pub seg: bool,
}

impl TrainMask {
    pub const ALL: TrainMask = TrainMask {
        geometry: true,
        color: true,
        opacity: true,
        seg: true,
    };
    pub const NONE: TrainMask = TrainMask {
        geometry: false,
        color: false,
        opacity: false,
        seg: false,
    };
    pub const SEG_ONLY: TrainMask = TrainMask {
        geometry: false,
        color: false,
        opacity: false,
        seg: true,
    };
    /// Everything except the segmentation logit.
    pub const APPEARANCE: TrainMask = TrainMask {
        geometry: true,
        color: true,
        opacity: true,
        seg: false,
    };

    pub fn any(&self) -> bool {
        self.geometry || self.color || self.opacity || self.seg
    }

    pub fn get(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Geometry => self.geometry,
            ParamGroup::Color => self.color,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Seg => self.seg,
        }
    }
}

/// Ordered kernel collection plus per-kernel trainable masks.
///
/// The mask vector always has one entry per kernel; every mutation that
/// changes the kernel count goes through methods that keep both in step.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    kernels: Vec<GaussianKernel>,
    trainable: Vec<TrainMask>,
    pub rng_seed: u64,
    /// Uninterpreted PLY vertex properties, in file order.
    pub extra_properties: Vec<crate::ply::ExtraProperty>,
}

impl Default for Scene {
    fn default() -> Self {
        Self::new(0)
    }
}

impl Scene {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            kernels: Vec::new(),
            trainable: Vec::new(),
            rng_seed,
            extra_properties: Vec::new(),
        }
    }

    pub fn from_kernels(kernels: Vec<GaussianKernel>, rng_seed: u64) -> Self {
        let trainable = vec![TrainMask::ALL; kernels.len()];
        Self {
            kernels,
            trainable,
            rng_seed,
            extra_properties: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernels(&self) -> &[GaussianKernel] {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut [GaussianKernel] {
        &mut self.kernels
    }

    pub fn kernel(&self, i: usize) -> &GaussianKernel {
        &self.kernels[i]
    }

    pub fn trainable(&self) -> &[TrainMask] {
        &self.trainable
    }

    pub fn mask(&self, i: usize) -> TrainMask {
        self.trainable[i]
    }

    pub fn set_mask(&mut self, i: usize, mask: TrainMask) {
        self.trainable[i] = mask;
    }

    pub fn push(&mut self, kernel: GaussianKernel, mask: TrainMask) {
        self.kernels.push(kernel);
        self.trainable.push(mask);
    }

    /// Keeps kernels for which `keep(index, kernel)` holds, preserving order.
    /// Returns the number removed.
    pub fn retain<F>(&mut self, mut keep: F) -> usize
    where
        F: FnMut(usize, &GaussianKernel) -> bool,
    {
        let before = self.kernels.len();
        let flags: Vec<bool> = self
            .kernels
            .iter()
            .enumerate()
            .map(|(i, k)| keep(i, k))
            .collect();
        let mut it = flags.iter();
        self.kernels.retain(|_| *it.next().unwrap());
        let mut it = flags.iter();
        self.trainable.retain(|_| *it.next().unwrap());
        before - self.kernels.len()
    }

    /// Freezes every parameter group of kernels matching `pred`.
    pub fn freeze<F>(&mut self, mut pred: F)
    where
        F: FnMut(usize, &GaussianKernel) -> bool,
    {
        for (i, k) in self.kernels.iter().enumerate() {
            if pred(i, k) {
                self.trainable[i] = TrainMask::NONE;
            }
        }
    }

    /// Makes every parameter group of kernels matching `pred` trainable.
    pub fn unfreeze<F>(&mut self, pred: F)
    where
        F: FnMut(usize, &GaussianKernel) -> bool,
    {
        self.set_trainable(pred, TrainMask::ALL);
    }

    /// Assigns `mask` to matching kernels, leaving others untouched.
    pub fn set_trainable<F>(&mut self, mut pred: F, mask: TrainMask)
    where
        F: FnMut(usize, &GaussianKernel) -> bool,
    {
        for (i, k) in self.kernels.iter().enumerate() {
            if pred(i, k) {
                self.trainable[i] = mask;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.trainable.fill(TrainMask::NONE);
    }

    pub fn max_block_id(&self) -> Option<i32> {
        self.kernels.iter().map(|k| k.block_id).max()
    }

    /// Radius of the smallest origin-centred sphere holding every kernel center.
    pub fn bounding_radius(&self, center: [f64; 3]) -> f64 {
        let c = Vector3::from(center);
        self.kernels
            .iter()
            .map(|k| (k.position() - c).norm())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of the kernel lists (masks are not compared).
    pub fn kernels_bit_eq(&self, other: &Scene) -> bool {
        self.len() == other.len()
            && self
                .kernels
                .iter()
                .zip(&other.kernels)
                .all(|(a, b)| a.bit_eq(b))
    }
}
