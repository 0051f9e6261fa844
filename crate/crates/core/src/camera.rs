//! Spherical cameras, view sampling, EWA projection and view-conditioned prompts.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scene::{covariance, GaussianKernel};

/// Kernels at or closer than this camera-frame depth are not projected.
pub const Z_NEAR: f64 = 0.01;
/// Floor on the eigenvalues of projected 2D covariances, in px².
pub const MIN_COV2_EIGENVALUE: f64 = 1e-8;
pub const DEFAULT_FOV_Y: f64 = 49.1;
/// Camera distance as a multiple of the scene bounding radius.
pub const DEFAULT_RADIUS_FACTOR: f64 = 1.8;

/// Pinhole camera on a sphere around `look_at`. Angles are in degrees.
///
/// The camera frame is right-handed with x to the right, y down and z along
/// the viewing direction; pixel centers sit at half-integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraView {
    pub fn new(azimuth: f64, elevation: f64, radius: f64, width: usize, height: usize) -> Self {
        Self {
            azimuth,
            elevation,
            radius,
            fov_y: DEFAULT_FOV_Y,
            width,
            height,
            look_at: [0.0; 3],
            up: default_up(),
        }
    }

    pub fn with_fov(mut self, fov_y: f64) -> Self {
        self.fov_y = fov_y;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.radius > 0.0
            && self.fov_y > 0.0
            && self.fov_y < 180.0
            && self.width >= 1
            && self.height >= 1
            && (-90.0..=90.0).contains(&self.elevation)
    }

    pub fn eye(&self) -> Vector3<f64> {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        Vector3::from(self.look_at)
            + self.radius * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }

    /// World→camera rotation `W` (rows: right, down, forward) and
    /// translation `t` with `x_cam = W x + t`.
    pub fn world_to_camera(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let eye = self.eye();
        let forward = (Vector3::from(self.look_at) - eye).normalize();
        let mut up = Vector3::from(self.up);
        if forward.cross(&up).norm() < 1e-9 {
            // Looking straight along `up`; pick any perpendicular reference.
            up = if forward.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
        }
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let w = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(w * eye);
        (w, t)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let fy = 0.5 * self.height as f64 / (0.5 * self.fov_y.to_radians()).tan();
        Intrinsics {
            fx: fy,
            fy,
            cx: 0.5 * self.width as f64,
            cy: 0.5 * self.height as f64,
        }
    }

    /// Same view, different image size.
    pub fn resized(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }
}

/// Screen-space footprint of one kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected2D {
    pub center: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

/// Intermediate quantities of the EWA projection, reused by the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionParts {
    pub t_cam: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    /// Camera-frame 3D covariance `W Σ Wᵀ`.
    pub cov_cam: Matrix3<f64>,
    pub projected: Projected2D,
}

/// Perspective projection of a center and covariance under `view`.
/// Returns `None` when the center is not in front of the near plane.
pub fn project_parts(
    position: &Vector3<f64>,
    cov3: &Matrix3<f64>,
    w: &Matrix3<f64>,
    t: &Vector3<f64>,
    k: &Intrinsics,
) -> Option<ProjectionParts> {
    let tc = w * position + t;
    if tc.z <= Z_NEAR {
        return None;
    }
    let (iz, iz2) = (1.0 / tc.z, 1.0 / (tc.z * tc.z));
    let jacobian = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * tc.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * tc.y * iz2,
    );
    let cov_cam = w * cov3 * w.transpose();
    let mut cov = jacobian * cov_cam * jacobian.transpose();
    cov = (cov + cov.transpose()) * 0.5;
    let min_ev = min_eigenvalue_sym2(&cov);
    if min_ev < MIN_COV2_EIGENVALUE {
        let bump = MIN_COV2_EIGENVALUE - min_ev;
        cov[(0, 0)] += bump;
        cov[(1, 1)] += bump;
    }
    let center = Vector2::new(k.fx * tc.x * iz + k.cx, k.fy * tc.y * iz + k.cy);
    Some(ProjectionParts {
        t_cam: tc,
        jacobian,
        cov_cam,
        projected: Projected2D {
            center,
            cov,
            depth: tc.z,
        },
    })
}

pub fn min_eigenvalue_sym2(m: &Matrix2<f64>) -> f64 {
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    mid - rad
}

pub fn max_eigenvalue_sym2(m: &Matrix2<f64>) -> f64 {
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    mid + rad
}

/// Projects a kernel: center by perspective division, covariance
/// `J W Σ Wᵀ Jᵀ` with `J` the Jacobian of the perspective map at the center.
pub fn project(kernel: &GaussianKernel, view: &CameraView) -> Option<Projected2D> {
    let (w, t) = view.world_to_camera();
    project_parts(
        &kernel.position(),
        covariance(kernel).matrix(),
        &w,
        &t,
        &view.intrinsics(),
    )
    .map(|p| p.projected)
}

/// Distribution of sampled training views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSampler {
    pub radius: f64,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub elevation_range: [f64; 2],
    pub look_at: [f64; 3],
}

impl ViewSampler {
    pub fn new(radius: f64, width: usize, height: usize) -> Self {
        Self {
            radius,
            fov_y: DEFAULT_FOV_Y,
            width,
            height,
            elevation_range: [-45.0, 45.0],
            look_at: [0.0; 3],
        }
    }

    /// Radius taken as the scene's bounding radius times [`DEFAULT_RADIUS_FACTOR`].
    pub fn for_scene(scene: &crate::scene::Scene, width: usize, height: usize) -> Self {
        let r = scene.bounding_radius([0.0; 3]).max(1e-3);
        Self::new(r * DEFAULT_RADIUS_FACTOR, width, height)
    }

    pub fn view(&self, azimuth: f64, elevation: f64) -> CameraView {
        CameraView {
            azimuth,
            elevation,
            radius: self.radius,
            fov_y: self.fov_y,
            width: self.width,
            height: self.height,
            look_at: self.look_at,
            up: default_up(),
        }
    }
}

/// Elevation uniform over the sampler's range, azimuth uniform on `[0, 360)`.
pub fn sample_view<R: Rng + ?Sized>(rng: &mut R, sampler: &ViewSampler) -> CameraView {
    let [lo, hi] = sampler.elevation_range;
    let elevation = rng.random_range(lo..=hi);
    let azimuth = rng.random_range(0.0..360.0);
    sampler.view(azimuth, elevation)
}

/// Appends the view-dependent suffix used to condition score providers.
pub fn view_prompt(base: &str, view: &CameraView) -> String {
    format!("{base}, {} view", view_label(view))
}

pub fn view_label(view: &CameraView) -> &'static str {
    if view.elevation > 60.0 {
        return "overhead";
    }
    let az = view.azimuth.rem_euclid(360.0);
    if !(45.0..315.0).contains(&az) {
        "front"
    } else if (135.0..225.0).contains(&az) {
        "back"
    } else {
        "side"
    }
}
