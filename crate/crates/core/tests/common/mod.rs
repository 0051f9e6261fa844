//! Reference implementations used as test oracles. Nothing here calls into
//! the library's projection or compositing code.

#![allow(dead_code)]

use hcog::camera::CameraView;
use hcog::image::Image;
use hcog::raster::GradGroup;
use hcog::scene::{GaussianKernel, Scene};
use nalgebra::{Isometry3, Matrix2, Matrix3, Point3, Quaternion, UnitQuaternion, Vector2, Vector3, Matrix4, Vector4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random kernels inside a ball of radius 0.6 around the origin.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Scene {
    let mut kernels = Vec::with_capacity(n);
    for _ in 0..n {
        let p: [f64; 3] = loop {
            let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if v.iter().map(|x: &f64| x * x).sum::<f64>() <= 1.0 {
                break v.map(|x| 0.6 * x);
            }
        };
        let scale = [
            rng.random_range(0.04..0.25),
            rng.random_range(0.04..0.25),
            rng.random_range(0.04..0.25),
        ];
        let q = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let mut k = GaussianKernel::default()
            .with_position(p)
            .with_scale(scale)
            .with_rotation(q)
            .with_color([rng.random(), rng.random(), rng.random()])
            .with_opacity(rng.random_range(0.15..0.95));
        k.seg_logit = rng.random_range(-3.0..3.0);
        kernels.push(k);
    }
    Scene::from_kernels(kernels, 0)
}

pub fn random_view(rng: &mut ChaCha8Rng, width: usize, height: usize) -> CameraView {
    CameraView::new(
        rng.random_range(0.0..360.0),
        rng.random_range(-45.0..45.0),
        rng.random_range(2.2..3.5),
        width,
        height,
    )
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
    Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// 3×4 pinhole projection `K [R | t]` in homogeneous coordinates, built from
/// a right-handed look-at isometry (camera looks down −z, y up).
struct Pinhole {
    view: Matrix4<f64>,
    proj: nalgebra::Matrix3x4<f64>,
}

impl Pinhole {
    fn new(v: &CameraView) -> Self {
        let (az, el) = (v.azimuth.to_radians(), v.elevation.to_radians());
        let target = Point3::from(v.look_at);
        let eye = target + v.radius * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        let mut up = Vector3::from(v.up);
        if (target - eye).normalize().cross(&up).norm() < 1e-9 {
            up = if (target - eye).normalize().x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        }
        let iso = Isometry3::look_at_rh(&eye, &target, &up);
        let f = 0.5 * v.height as f64 / (0.5 * v.fov_y.to_radians()).tan();
        // Flip to x-right / y-down / z-forward image conventions.
        let proj = nalgebra::Matrix3x4::new(
            f, 0.0, -0.5 * v.width as f64, 0.0,
            0.0, -f, -0.5 * v.height as f64, 0.0,
            0.0, 0.0, -1.0, 0.0,
        );
        Self { view: iso.to_homogeneous(), proj }
    }

    fn project(&self, x: &Vector3<f64>) -> (Vector2<f64>, f64) {
        let h = self.proj * (self.view * Vector4::new(x.x, x.y, x.z, 1.0));
        (Vector2::new(h.x / h.z, h.y / h.z), h.z)
    }
}

fn oracle_cov3(k: &GaussianKernel) -> Matrix3<f64> {
    let r = k.rotation.map(|v| v as f64);
    let q = UnitQuaternion::from_quaternion(Quaternion::new(r[0], r[1], r[2], r[3]));
    let rot = q.to_rotation_matrix().into_inner();
    let s = k.log_scale.map(|l| (l as f64).exp().max(1e-6));
    let m = rot * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
    m * m.transpose()
}

struct OracleSplat {
    depth: f64,
    center: Vector2<f64>,
    inv: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
    prob: f64,
}

/// Per-pixel compositing over every kernel, no tiles or footprint bounds.
/// Contributions with `α′ < min_alpha` are dropped.
pub fn brute_force(scene: &Scene, view: &CameraView, min_alpha: f64) -> (Image, Image, Image) {
    let cam = Pinhole::new(view);
    let mut splats = Vec::new();
    for k in scene.kernels() {
        let x = Vector3::new(k.position[0] as f64, k.position[1] as f64, k.position[2] as f64);
        let (center, depth) = cam.project(&x);
        if depth <= 0.01 {
            continue;
        }
        // Jacobian of the full world→pixel map by central differences.
        let h = 1e-5 * depth;
        let mut j = nalgebra::Matrix2x3::zeros();
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = h;
            let (p, _) = cam.project(&(x + e));
            let (m, _) = cam.project(&(x - e));
            j.set_column(a, &((p - m) / (2.0 * h)));
        }
        let cov = j * oracle_cov3(k) * j.transpose();
        let Some(inv) = cov.try_inverse() else { continue };
        let sig = |v: f32| 1.0 / (1.0 + (-(v as f64)).exp());
        splats.push(OracleSplat {
            depth,
            center,
            inv,
            opacity: sig(k.opacity_logit),
            color: k.color.map(|c| c as f64),
            prob: sig(k.seg_logit),
        });
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap());

    let (w, h) = (view.width, view.height);
    let mut color = Image::zeros(w, h, 3);
    let mut prob = Image::zeros(w, h, 1);
    let mut alpha = Image::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let (mut c, mut pr, mut al) = ([0.0; 3], 0.0, 0.0);
            for s in &splats {
                let d = p - s.center;
                let a = s.opacity * (-0.5 * (d.transpose() * s.inv * d)[(0, 0)]).exp();
                if a < min_alpha {
                    continue;
                }
                for (ci, si) in c.iter_mut().zip(s.color) {
                    *ci += si * a * t;
                }
                pr += s.prob * a * t;
                al += a * t;
                t *= 1.0 - a;
            }
            color.pixel_mut(x, y).copy_from_slice(&c);
            prob.pixel_mut(x, y)[0] = pr;
            alpha.pixel_mut(x, y)[0] = al;
        }
    }
    (color, prob, alpha)
}

/// `⟨up_c, C⟩ + ⟨up_p, P⟩ + ⟨up_a, A⟩` of the brute-force render.
pub fn oracle_loss(scene: &Scene, view: &CameraView, up: &(Image, Image, Image)) -> f64 {
    let (c, p, a) = brute_force(scene, view, 0.0);
    let dot = |x: &Image, y: &Image| x.data.iter().zip(&y.data).map(|(u, v)| u * v).sum::<f64>();
    dot(&c, &up.0) + dot(&p, &up.1) + dot(&a, &up.2)
}

fn param_mut(k: &mut GaussianKernel, group: GradGroup, j: usize) -> &mut f32 {
    match group {
        GradGroup::Position => &mut k.position[j],
        GradGroup::LogScale => &mut k.log_scale[j],
        GradGroup::Rotation => &mut k.rotation[j],
        GradGroup::Color => &mut k.color[j],
        GradGroup::Opacity => &mut k.opacity_logit,
        GradGroup::Seg => &mut k.seg_logit,
    }
}

/// Central finite differences of [`oracle_loss`] for one parameter group,
/// flattened in the same order as `ParamGradients::group`.
pub fn fd_group(scene: &Scene, view: &CameraView, up: &(Image, Image, Image), group: GradGroup, h: f32) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..scene.len() {
        for j in 0..group.width() {
            let mut plus = scene.clone();
            let mut minus = scene.clone();
            let x = *param_mut(&mut plus.kernels_mut()[i], group, j);
            *param_mut(&mut plus.kernels_mut()[i], group, j) = x + h;
            *param_mut(&mut minus.kernels_mut()[i], group, j) = x - h;
            let step = (x + h) as f64 - (x - h) as f64;
            out.push((oracle_loss(&plus, view, up) - oracle_loss(&minus, view, up)) / step);
        }
    }
    out
}

/// `‖a − b‖ / ‖b‖`, or the absolute norm when `b` vanishes.
pub fn rel_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    if norm < 1e-12 { diff } else { diff / norm }
}

pub mod toy;
pub mod stub;
pub mod wire;
