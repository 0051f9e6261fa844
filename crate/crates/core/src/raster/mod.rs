//! Tile-based rasterization of Gaussian scenes and its analytic backward pass.
//!
//! Per pixel `p`, with contributors sorted front-to-back by camera depth,
//!
//! ```text
//! C(p) = Σ_i c_i α′_i Π_{j<i} (1 − α′_j),   α′_i = α_i exp(−½ dᵢᵀ Σ′ᵢ⁻¹ dᵢ)
//! ```
//!
//! where `Σ′ᵢ` is the projected 2D covariance and `dᵢ` the offset from the
//! projected center. The probability channel reuses the same weights with
//! `c_i` replaced by the kernel's segmentation probability; the alpha channel
//! is the sum of the weights. Contributions with `α′ < min_alpha` are dropped.
//! Each kernel is binned only into the tiles its `min_alpha` footprint
//! reaches, so binning never removes a contribution the threshold would keep.

mod backward;
mod grads;

use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use thiserror::Error;

pub use backward::{backward, LossImages};
pub use grads::{GradGroup, ParamGradients};

use crate::camera::{max_eigenvalue_sym2, project_parts, CameraView, ProjectionParts};
use crate::image::{Image, Mask};
use crate::scene::{covariance, GaussianKernel, Scene};

pub const DEFAULT_TILE_SIZE: usize = 16;
pub const DEFAULT_MIN_ALPHA: f64 = 1.0 / 255.0;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("render tape does not match the scene/view: {0}")]
    TapeMismatch(String),
    #[error("loss image `{channel}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        channel: &'static str,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// Contributions with `α′` below this are discarded. Zero disables the
    /// cut and makes every kernel cover the whole image.
    pub min_alpha: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            min_alpha: DEFAULT_MIN_ALPHA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub color: bool,
    pub prob: bool,
}

impl Channels {
    pub const ALL: Channels = Channels {
        color: true,
        prob: true,
    };
    pub const COLOR: Channels = Channels {
        color: true,
        prob: false,
    };
    pub const ALPHA_ONLY: Channels = Channels {
        color: false,
        prob: false,
    };
}

impl Default for Channels {
    fn default() -> Self {
        Channels::ALL
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RenderOptions<'a> {
    pub channels: Channels,
    pub settings: RenderSettings,
    /// Kernels taking part in the render; `None` means all.
    pub include: Option<&'a [bool]>,
    /// Kernels whose probability enters the prob channel; the rest count as 0.
    pub seg_eligible: Option<&'a [bool]>,
}

impl<'a> RenderOptions<'a> {
    pub fn with_channels(mut self, channels: Channels) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_settings(mut self, settings: RenderSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn with_include(mut self, include: &'a [bool]) -> Self {
        self.include = Some(include);
        self
    }

    pub fn with_seg_eligible(mut self, eligible: &'a [bool]) -> Self {
        self.seg_eligible = Some(eligible);
        self
    }
}

/// A projected kernel, ready for compositing.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub kernel: usize,
    pub mean: Vector2<f64>,
    /// Inverse 2D covariance as `(a, b, c)` of `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub prob: f64,
    pub seg_eligible: bool,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` of the footprint.
    pub rect: [i64; 4],
    pub parts: ProjectionParts,
}

/// Everything the backward pass needs to replay a render.
#[derive(Debug, Clone)]
pub struct RenderTape {
    fingerprint: u64,
    kernel_count: usize,
    view: CameraView,
    settings: RenderSettings,
    channels: Channels,
    pub(crate) splats: Vec<Splat>,
    /// Per tile, indices into `splats` in front-to-back order.
    pub(crate) tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

impl RenderTape {
    pub fn view(&self) -> &CameraView {
        &self.view
    }

    pub fn settings(&self) -> &RenderSettings {
        &self.settings
    }

    pub fn channels(&self) -> Channels {
        self.channels
    }

    pub fn kernel_count(&self) -> usize {
        self.kernel_count
    }

    /// Number of kernels that were projected in front of the camera.
    pub fn visible_count(&self) -> usize {
        self.splats.len()
    }

    pub(crate) fn tile_origin(&self, tile: usize) -> (usize, usize) {
        let ts = self.settings.tile_size;
        ((tile % self.tiles_x) * ts, (tile / self.tiles_x) * ts)
    }

    pub(crate) fn check(&self, scene: &Scene, view: &CameraView) -> Result<(), RasterError> {
        if self.kernel_count != scene.len() {
            return Err(RasterError::TapeMismatch(format!(
                "tape has {} kernels, scene has {}",
                self.kernel_count,
                scene.len()
            )));
        }
        if self.view != *view {
            return Err(RasterError::TapeMismatch("camera view differs".into()));
        }
        if self.fingerprint != scene_fingerprint(scene) {
            return Err(RasterError::TapeMismatch(
                "kernel parameters changed since the render".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    pub prob: Image,
    pub alpha: Image,
    /// Weight-averaged camera depth, not normalized by alpha.
    pub depth: Image,
    pub tape: RenderTape,
}

pub(crate) fn scene_fingerprint(scene: &Scene) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for k in scene.kernels() {
        for v in k
            .position
            .iter()
            .chain(&k.log_scale)
            .chain(&k.rotation)
            .chain(&k.color)
            .chain([&k.opacity_logit, &k.seg_logit])
        {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn footprint_radius(cov: &Matrix2<f64>, opacity: f64, min_alpha: f64) -> Option<f64> {
    if min_alpha <= 0.0 {
        return Some(f64::INFINITY);
    }
    if opacity < min_alpha {
        return None;
    }
    // α exp(−q/2) ≥ min_alpha  ⇔  q ≤ 2 ln(α / min_alpha), and q ≥ |d|² / λ_max.
    let q_max = 2.0 * (opacity / min_alpha).ln();
    Some((q_max * max_eigenvalue_sym2(cov)).sqrt())
}

fn project_kernel(
    index: usize,
    kernel: &GaussianKernel,
    view_parts: &ViewParts,
    eligible: bool,
    settings: &RenderSettings,
) -> Option<Splat> {
    let parts = project_parts(
        &kernel.position(),
        covariance(kernel).matrix(),
        &view_parts.w,
        &view_parts.t,
        &view_parts.intr,
    )?;
    let cov = parts.projected.cov;
    let det = cov.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let opacity = kernel.opacity();
    let radius = footprint_radius(&cov, opacity, settings.min_alpha)?;
    let mean = parts.projected.center;
    let (wmax, hmax) = (view_parts.width as f64 - 1.0, view_parts.height as f64 - 1.0);
    // Pixel x is reachable when |x + 0.5 − mean.x| ≤ radius; one pixel of
    // slack on each side absorbs rounding.
    let (x0, x1, y0, y1) = if radius.is_finite() {
        (
            (mean.x - radius - 0.5).ceil() - 1.0,
            (mean.x + radius - 0.5).floor() + 1.0,
            (mean.y - radius - 0.5).ceil() - 1.0,
            (mean.y + radius - 0.5).floor() + 1.0,
        )
    } else {
        (0.0, wmax, 0.0, hmax)
    };
    if !(x1 >= 0.0 && y1 >= 0.0 && x0 <= wmax && y0 <= hmax) {
        return None;
    }
    let rect = [
        x0.max(0.0) as i64,
        x1.min(wmax) as i64,
        y0.max(0.0) as i64,
        y1.min(hmax) as i64,
    ];
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    Some(Splat {
        kernel: index,
        mean,
        conic,
        opacity,
        color: kernel.color_f64(),
        prob: if eligible { kernel.p_seg() } else { 0.0 },
        seg_eligible: eligible,
        rect,
        parts,
    })
}

struct ViewParts {
    w: nalgebra::Matrix3<f64>,
    t: nalgebra::Vector3<f64>,
    intr: crate::camera::Intrinsics,
    width: usize,
    height: usize,
}

/// `α′` of `splat` at the pixel center `(px, py)`, with the Gaussian factor.
#[inline]
pub(crate) fn splat_alpha(s: &Splat, px: f64, py: f64) -> (f64, f64, f64, f64) {
    let dx = px - s.mean.x;
    let dy = py - s.mean.y;
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
    let g = power.min(0.0).exp();
    (s.opacity * g, g, dx, dy)
}

#[derive(Default)]
struct PixelOut {
    color: [f64; 3],
    prob: f64,
    alpha: f64,
    depth: f64,
}

fn bin_tiles(splats: &[Splat], tiles_x: usize, tiles_y: usize, ts: usize) -> Vec<Vec<u32>> {
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let tx0 = s.rect[0] as usize / ts;
        let tx1 = (s.rect[1] as usize / ts).min(tiles_x - 1);
        let ty0 = s.rect[2] as usize / ts;
        let ty1 = (s.rect[3] as usize / ts).min(tiles_y - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    tiles
}

/// Renders color, probability, alpha and depth for `view`.
pub fn render(scene: &Scene, view: &CameraView, opts: &RenderOptions) -> RenderOutput {
    let settings = opts.settings;
    assert!(settings.tile_size > 0, "tile size must be positive");
    let (width, height) = (view.width, view.height);
    let (w, t) = view.world_to_camera();
    let vp = ViewParts {
        w,
        t,
        intr: view.intrinsics(),
        width,
        height,
    };
    let n = scene.len();
    if let Some(inc) = opts.include {
        assert_eq!(inc.len(), n, "include mask length");
    }
    if let Some(el) = opts.seg_eligible {
        assert_eq!(el.len(), n, "seg-eligible mask length");
    }

    let mut splats: Vec<Splat> = scene
        .kernels()
        .par_iter()
        .enumerate()
        .filter_map(|(i, k)| {
            if opts.include.is_some_and(|m| !m[i]) {
                return None;
            }
            let eligible = opts.seg_eligible.is_none_or(|m| m[i]);
            project_kernel(i, k, &vp, eligible, &settings)
        })
        .collect();
    splats.sort_by(|a, b| {
        a.parts
            .projected
            .depth
            .total_cmp(&b.parts.projected.depth)
            .then(a.kernel.cmp(&b.kernel))
    });

    let ts = settings.tile_size;
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let tiles = bin_tiles(&splats, tiles_x, tiles_y, ts);

    let min_alpha = settings.min_alpha;
    let tile_pixels: Vec<Vec<PixelOut>> = tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let (ox, oy) = ((ti % tiles_x) * ts, (ti / tiles_x) * ts);
            let mut out = Vec::with_capacity(ts * ts);
            for y in oy..(oy + ts).min(height) {
                for x in ox..(ox + ts).min(width) {
                    out.push(composite_pixel(&splats, list, x, y, min_alpha));
                }
            }
            out
        })
        .collect();

    let mut color = Image::zeros(width, height, 3);
    let mut prob = Image::zeros(width, height, 1);
    let mut alpha = Image::zeros(width, height, 1);
    let mut depth = Image::zeros(width, height, 1);
    for (ti, pixels) in tile_pixels.into_iter().enumerate() {
        let (ox, oy) = ((ti % tiles_x) * ts, (ti / tiles_x) * ts);
        let tw = (ox + ts).min(width) - ox;
        for (j, px) in pixels.into_iter().enumerate() {
            let (x, y) = (ox + j % tw, oy + j / tw);
            if opts.channels.color {
                color.pixel_mut(x, y).copy_from_slice(&px.color);
            }
            if opts.channels.prob {
                prob.pixel_mut(x, y)[0] = px.prob;
            }
            alpha.pixel_mut(x, y)[0] = px.alpha;
            depth.pixel_mut(x, y)[0] = px.depth;
        }
    }

    RenderOutput {
        color,
        prob,
        alpha,
        depth,
        tape: RenderTape {
            fingerprint: scene_fingerprint(scene),
            kernel_count: n,
            view: *view,
            settings,
            channels: opts.channels,
            splats,
            tiles,
            tiles_x,
        },
    }
}

fn composite_pixel(splats: &[Splat], list: &[u32], x: usize, y: usize, min_alpha: f64) -> PixelOut {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let (xi, yi) = (x as i64, y as i64);
    let mut out = PixelOut::default();
    let mut transmittance = 1.0;
    for &si in list {
        let s = &splats[si as usize];
        if xi < s.rect[0] || xi > s.rect[1] || yi < s.rect[2] || yi > s.rect[3] {
            continue;
        }
        let (a, _, _, _) = splat_alpha(s, px, py);
        if a < min_alpha {
            continue;
        }
        let w = a * transmittance;
        for c in 0..3 {
            out.color[c] += s.color[c] * w;
        }
        out.prob += s.prob * w;
        out.alpha += w;
        out.depth += s.parts.projected.depth * w;
        transmittance *= 1.0 - a;
    }
    out
}

/// Binary silhouette of the kernels selected by `pred`: their alpha, thresholded at 0.5.
pub fn render_silhouette<F>(scene: &Scene, mut pred: F, view: &CameraView) -> Mask
where
    F: FnMut(usize, &GaussianKernel) -> bool,
{
    let include: Vec<bool> = scene
        .kernels()
        .iter()
        .enumerate()
        .map(|(i, k)| pred(i, k))
        .collect();
    let out = render(
        scene,
        view,
        &RenderOptions::default()
            .with_channels(Channels::ALPHA_ONLY)
            .with_include(&include),
    );
    Mask::from_threshold(&out.alpha, 0.5)
}
