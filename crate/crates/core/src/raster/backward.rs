//! Reverse-mode gradients of a render with respect to kernel parameters.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::{splat_alpha, ParamGradients, RasterError, RenderTape, Splat};
use crate::camera::CameraView;
use crate::image::Image;
use crate::scene::{Scene, MIN_SCALE};

/// Upstream gradients `∂L/∂channel` for each rendered image. Missing channels
/// contribute nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossImages<'a> {
    pub color: Option<&'a Image>,
    pub prob: Option<&'a Image>,
    pub alpha: Option<&'a Image>,
}

/// Screen-space gradient of one splat: mean (2), conic (3), opacity,
/// color (3), probability.
type Local = [f64; 10];

fn check_shape(
    channel: &'static str,
    img: Option<&Image>,
    view: &CameraView,
    channels: usize,
) -> Result<(), RasterError> {
    if let Some(img) = img {
        let expected = (view.width, view.height, channels);
        let found = (img.width, img.height, img.channels);
        if expected != found {
            return Err(RasterError::ShapeMismatch {
                channel,
                expected,
                found,
            });
        }
    }
    Ok(())
}

/// Gradients of `L` given `∂L/∂(color, prob, alpha)` for the render recorded in
/// `tape`. Rows of frozen parameter groups are zero.
pub fn backward(
    scene: &Scene,
    view: &CameraView,
    tape: &RenderTape,
    losses: &LossImages,
) -> Result<ParamGradients, RasterError> {
    tape.check(scene, view)?;
    check_shape("color", losses.color, view, 3)?;
    check_shape("prob", losses.prob, view, 1)?;
    check_shape("alpha", losses.alpha, view, 1)?;

    let ts = tape.settings().tile_size;
    let min_alpha = tape.settings().min_alpha;
    let (width, height) = (view.width, view.height);

    let per_tile: Vec<Vec<Local>> = tape
        .tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let mut local = vec![[0.0; 10]; list.len()];
            if list.is_empty() {
                return local;
            }
            let (ox, oy) = tape.tile_origin(ti);
            let mut hits: Vec<Hit> = Vec::new();
            for y in oy..(oy + ts).min(height) {
                for x in ox..(ox + ts).min(width) {
                    let o = y * width + x;
                    let g = [
                        losses.color.map_or(0.0, |c| c.data[3 * o]),
                        losses.color.map_or(0.0, |c| c.data[3 * o + 1]),
                        losses.color.map_or(0.0, |c| c.data[3 * o + 2]),
                        losses.prob.map_or(0.0, |p| p.data[o]),
                        losses.alpha.map_or(0.0, |a| a.data[o]),
                    ];
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    pixel_backward(&tape.splats, list, x, y, min_alpha, &g, &mut hits, &mut local);
                }
            }
            local
        })
        .collect();

    let mut screen = vec![[0.0; 10]; tape.splats.len()];
    for (list, local) in tape.tiles.iter().zip(&per_tile) {
        for (&si, l) in list.iter().zip(local) {
            let acc = &mut screen[si as usize];
            for (a, v) in acc.iter_mut().zip(l) {
                *a += v;
            }
        }
    }

    let (w, _) = view.world_to_camera();
    let intr = view.intrinsics();
    let rows: Vec<(usize, [f64; 16])> = tape
        .splats
        .par_iter()
        .zip(&screen)
        .map(|(s, g)| (s.kernel, kernel_chain(scene, s, g, &w, intr.fx, intr.fy)))
        .collect();

    let mut grads = ParamGradients::zeros(scene.len());
    for (k, r) in rows {
        grads.position[k] = [r[0], r[1], r[2]];
        grads.log_scale[k] = [r[3], r[4], r[5]];
        grads.rotation[k] = [r[6], r[7], r[8], r[9]];
        grads.color[k] = [r[10], r[11], r[12]];
        grads.opacity[k] = r[13];
        grads.seg[k] = r[14];
    }
    grads.apply_mask(scene.trainable());
    Ok(grads)
}

struct Hit {
    local: usize,
    alpha: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
    transmittance: f64,
}

#[allow(clippy::too_many_arguments)]
fn pixel_backward(
    splats: &[Splat],
    list: &[u32],
    x: usize,
    y: usize,
    min_alpha: f64,
    g: &[f64; 5],
    hits: &mut Vec<Hit>,
    local: &mut [Local],
) {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let (xi, yi) = (x as i64, y as i64);
    hits.clear();
    let mut t = 1.0;
    for (li, &si) in list.iter().enumerate() {
        let s = &splats[si as usize];
        if xi < s.rect[0] || xi > s.rect[1] || yi < s.rect[2] || yi > s.rect[3] {
            continue;
        }
        let (a, gauss, dx, dy) = splat_alpha(s, px, py);
        if a < min_alpha {
            continue;
        }
        hits.push(Hit {
            local: li,
            alpha: a,
            gauss,
            dx,
            dy,
            transmittance: t,
        });
        t *= 1.0 - a;
    }

    // `behind` is g · Σ_{j after i} f_j α′_j Π_{i<k<j}(1 − α′_k).
    let mut behind = 0.0;
    for h in hits.iter().rev() {
        let s = &splats[list[h.local] as usize];
        let f = [s.color[0], s.color[1], s.color[2], s.prob, 1.0];
        let gf: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
        let w = h.alpha * h.transmittance;
        let d_alpha = h.transmittance * (gf - behind);
        behind = gf * h.alpha + (1.0 - h.alpha) * behind;

        let d_power = d_alpha * h.alpha;
        let [ca, cb, cc] = s.conic;
        let l = &mut local[h.local];
        l[0] += d_power * (ca * h.dx + cb * h.dy);
        l[1] += d_power * (cb * h.dx + cc * h.dy);
        l[2] += d_power * (-0.5 * h.dx * h.dx);
        l[3] += d_power * (-h.dx * h.dy);
        l[4] += d_power * (-0.5 * h.dy * h.dy);
        l[5] += d_alpha * h.gauss;
        l[6] += g[0] * w;
        l[7] += g[1] * w;
        l[8] += g[2] * w;
        l[9] += g[3] * w;
    }
}

fn quat_jacobians(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    [
        Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0),
        Matrix3::new(
            0.0,
            2.0 * y,
            2.0 * z,
            2.0 * y,
            -4.0 * x,
            -2.0 * w,
            2.0 * z,
            2.0 * w,
            -4.0 * x,
        ),
        Matrix3::new(
            -4.0 * y,
            2.0 * x,
            2.0 * w,
            2.0 * x,
            0.0,
            2.0 * z,
            -2.0 * w,
            2.0 * z,
            -4.0 * y,
        ),
        Matrix3::new(
            -4.0 * z,
            -2.0 * w,
            2.0 * x,
            2.0 * w,
            -4.0 * z,
            2.0 * y,
            2.0 * x,
            2.0 * y,
            0.0,
        ),
    ]
}

/// Chains a splat's screen-space gradient back to its kernel parameters.
fn kernel_chain(
    scene: &Scene,
    s: &Splat,
    g: &Local,
    w: &Matrix3<f64>,
    fx: f64,
    fy: f64,
) -> [f64; 16] {
    let kernel = scene.kernel(s.kernel);
    let mut out = [0.0; 16];

    // Conic → 2D covariance.
    let [ca, cb, cc] = s.conic;
    let q = Matrix2::new(ca, cb, cb, cc);
    let g_q = Matrix2::new(g[2], 0.5 * g[3], 0.5 * g[3], g[4]);
    let g_cov2 = -(q * g_q * q);

    // 2D covariance → camera covariance and Jacobian.
    let j: Matrix2x3<f64> = s.parts.jacobian;
    let m = s.parts.cov_cam;
    let g_m = j.transpose() * g_cov2 * j;
    let g_j = 2.0 * g_cov2 * j * m;

    // Camera covariance → world covariance → rotation and scale.
    let g_cov3 = w.transpose() * g_m * w;
    let r = kernel.rotation_matrix();
    let scale = kernel.scale();
    let d = Matrix3::from_diagonal(&Vector3::new(
        scale[0] * scale[0],
        scale[1] * scale[1],
        scale[2] * scale[2],
    ));
    let g_r = 2.0 * g_cov3 * r * d;
    let g_d = r.transpose() * g_cov3 * r;
    for a in 0..3 {
        let clamped = (kernel.log_scale[a] as f64).exp() < MIN_SCALE;
        out[3 + a] = if clamped {
            0.0
        } else {
            g_d[(a, a)] * 2.0 * d[(a, a)]
        };
    }

    let raw = kernel.rotation.map(|v| v as f64);
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm >= 1e-12 {
        let qh = raw.map(|v| v / norm);
        let jac = quat_jacobians(qh);
        let g_qh: [f64; 4] = std::array::from_fn(|k| g_r.component_mul(&jac[k]).sum());
        let dot: f64 = qh.iter().zip(&g_qh).map(|(a, b)| a * b).sum();
        for k in 0..4 {
            out[6 + k] = (g_qh[k] - qh[k] * dot) / norm;
        }
    }

    // Center and Jacobian → camera-space position → world position.
    let t = s.parts.t_cam;
    let (iz, iz2) = (1.0 / t.z, 1.0 / (t.z * t.z));
    let iz3 = iz2 * iz;
    let (gu, gv) = (g[0], g[1]);
    let mut g_t = Vector3::new(
        gu * fx * iz,
        gv * fy * iz,
        -gu * fx * t.x * iz2 - gv * fy * t.y * iz2,
    );
    g_t.x += g_j[(0, 2)] * (-fx * iz2);
    g_t.y += g_j[(1, 2)] * (-fy * iz2);
    g_t.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    let g_x = w.transpose() * g_t;
    out[0..3].copy_from_slice(g_x.as_slice());

    out[10..13].copy_from_slice(&g[6..9]);
    out[13] = g[5] * s.opacity * (1.0 - s.opacity);
    out[14] = if s.seg_eligible {
        g[9] * s.prob * (1.0 - s.prob)
    } else {
        0.0
    };
    out
}
