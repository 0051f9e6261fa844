//! Score distillation: noise schedule, SDS gradients, score providers and the
//! `/v1/score` client.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::camera::{view_prompt, CameraView};
use crate::image::{Image, Mask};
use crate::raster::{backward, render, Channels, LossImages, ParamGradients, RasterError, RenderOptions, RenderOutput};
use crate::scene::Scene;
use crate::wire::{self, JsonClient, RetryPolicy, WireError};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("timestep {t} outside [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },
    #[error("image shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("image encoding: {0}")]
    Image(#[from] crate::image::ImageError),
}

/// Linear-β diffusion schedule with `ᾱ_t = Π_{s≤t} (1 − β_s)`, `t ∈ 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, GuidanceError> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(GuidanceError::InvalidSchedule(format!(
                "need T ≥ 2 and 0 < β_start < β_end < 1, got T={steps}, β={beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, GuidanceError> {
        if t == 0 || t > self.steps() {
            return Err(GuidanceError::TimestepOutOfRange {
                t,
                min: 1,
                max: self.steps(),
            });
        }
        Ok(self.alpha_bar[t - 1])
    }

    /// `[⌊0.02 T⌋, ⌊0.98 T⌋]`.
    pub fn default_range(&self) -> (usize, usize) {
        let t = self.steps() as f64;
        (((0.02 * t) as usize).max(1), (0.98 * t) as usize)
    }
}

/// `√ᾱ_t · image + √(1 − ᾱ_t) · ε`.
pub fn add_noise(image: &Image, t: usize, eps: &Image, schedule: &NoiseSchedule) -> Result<Image, GuidanceError> {
    check_shape(image, eps)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(image.zip_map(eps, |x, e| a * x + b * e))
}

fn check_shape(expected: &Image, found: &Image) -> Result<(), GuidanceError> {
    if !expected.same_shape(found) {
        return Err(GuidanceError::ShapeMismatch {
            expected: (expected.width, expected.height, expected.channels),
            found: (found.width, found.height, found.channels),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepWeight {
    #[default]
    Constant,
    OneMinusAlphaBar,
}

impl TimestepWeight {
    pub fn weight(self, schedule: &NoiseSchedule, t: usize) -> Result<f64, GuidanceError> {
        Ok(match self {
            TimestepWeight::Constant => 1.0,
            TimestepWeight::OneMinusAlphaBar => 1.0 - schedule.alpha_bar(t)?,
        })
    }
}

/// Uniform integer timestep in `[min, max]`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, range: (usize, usize)) -> usize {
    rng.random_range(range.0..=range.1)
}

/// Standard normal noise, drawn in f32 so it survives the wire format exactly.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize) -> Image {
    let data = (0..width * height * 3)
        .map(|_| rng.sample::<f32, _>(StandardNormal) as f64)
        .collect();
    Image::from_vec(width, height, 3, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderTag {
    Multiview,
    ShapeConditioned,
    PhotometricOracle,
}

impl ProviderTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderTag::Multiview => "multiview",
            ProviderTag::ShapeConditioned => "shape_conditioned",
            ProviderTag::PhotometricOracle => "photometric_oracle",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GuidanceRequest {
    /// View-suffixed prompt.
    pub prompt: String,
    /// Rendered RGB image.
    pub image: Image,
    pub timestep: usize,
    pub noise: Image,
    pub conditioning: Option<Mask>,
    pub provider: ProviderTag,
    pub cfg_scale: f64,
    /// Camera the image was rendered from. Not part of the wire format.
    pub view: CameraView,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceResponse {
    pub noise_pred: Image,
}

pub trait ScoreProvider: Send + Sync {
    fn score(&self, request: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError>;
}

/// Returns the request noise unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoProvider;

impl ScoreProvider for EchoProvider {
    fn score(&self, request: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        Ok(GuidanceResponse {
            noise_pred: request.noise.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub enum PhotometricTarget {
    /// Fixed image, independent of the view.
    Image(Image),
    /// Scene rendered from the request's view.
    Scene(Arc<Scene>),
}

/// `ε̂ = ε + k · (rendered − target)`, which turns SDS into image matching.
#[derive(Debug, Clone)]
pub struct PhotometricOracle {
    pub target: PhotometricTarget,
    pub k: f64,
}

impl PhotometricOracle {
    pub fn new(target: PhotometricTarget) -> Self {
        Self { target, k: 1.0 }
    }

    pub fn target_for(&self, view: &CameraView) -> Image {
        match &self.target {
            PhotometricTarget::Image(img) => img.clone(),
            PhotometricTarget::Scene(s) => {
                render(s, view, &RenderOptions::default().with_channels(Channels::COLOR)).color
            }
        }
    }
}

impl ScoreProvider for PhotometricOracle {
    fn score(&self, request: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        let target = self.target_for(&request.view);
        check_shape(&request.image, &target)?;
        check_shape(&request.image, &request.noise)?;
        let k = self.k;
        let diff = request.image.zip_map(&target, |r, t| k * (r - t));
        Ok(GuidanceResponse {
            noise_pred: request.noise.zip_map(&diff, |e, d| e + d),
        })
    }
}

/// `w(t) · (ε̂ − ε)` pulled back through the rasterizer.
pub fn sds_gradient(
    scene: &Scene,
    view: &CameraView,
    output: &RenderOutput,
    response: &GuidanceResponse,
    eps: &Image,
    weight: f64,
) -> Result<ParamGradients, GuidanceError> {
    check_shape(&output.color, &response.noise_pred)?;
    check_shape(&output.color, eps)?;
    let up = response.noise_pred.zip_map(eps, |p, e| weight * (p - e));
    Ok(backward(
        scene,
        view,
        &output.tape,
        &LossImages {
            color: Some(&up),
            ..Default::default()
        },
    )?)
}

/// `/v1/score` client for one provider tag.
#[derive(Debug, Clone)]
pub struct ScoreClient {
    endpoint: String,
    client: JsonClient,
}

impl ScoreClient {
    pub fn new(endpoint: impl Into<String>, retry: RetryPolicy) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            client: JsonClient::new(retry),
        }
    }

    pub fn url(&self) -> String {
        format!("{}/v1/score", self.endpoint)
    }
}

/// Exact request body sent to `/v1/score`.
pub fn score_request_body(req: &GuidanceRequest) -> Result<Vec<u8>, GuidanceError> {
    let conditioning = match &req.conditioning {
        None => serde_json::Value::Null,
        Some(mask) => json!({
            "type": "silhouette",
            "image": wire::b64_encode(&mask.encode_png()?),
        }),
    };
    #[derive(Serialize)]
    struct Body<'a> {
        prompt: &'a str,
        image: String,
        timestep: usize,
        noise: String,
        conditioning: serde_json::Value,
        provider: &'static str,
        cfg_scale: f64,
    }
    let body = Body {
        prompt: &req.prompt,
        image: wire::b64_encode(&req.image.encode_png()?),
        timestep: req.timestep,
        noise: wire::b64_encode(&wire::f32_le_bytes(&req.noise.data)),
        conditioning,
        provider: req.provider.as_str(),
        cfg_scale: req.cfg_scale,
    };
    Ok(serde_json::to_vec(&body).expect("serializable"))
}

/// Validates a `/v1/score` reply against the request's image shape.
pub fn parse_score_response(value: &serde_json::Value, width: usize, height: usize) -> Result<GuidanceResponse, WireError> {
    let b64 = wire::str_field(value, "noise_pred")?;
    let bytes = wire::b64_decode("noise_pred", b64)?;
    let data = wire::f32_le_values("noise_pred", &bytes, width * height * 3)?;
    Ok(GuidanceResponse {
        noise_pred: Image::from_vec(width, height, 3, data),
    })
}

impl ScoreProvider for ScoreClient {
    fn score(&self, request: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        let body = score_request_body(request)?;
        let reply = self.client.post(&self.url(), &body)?;
        Ok(parse_score_response(&reply, request.image.width, request.image.height)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSettings {
    pub multiview_weight: f64,
    pub shape_weight: f64,
    pub cfg_scale: f64,
    pub timestep_weight: TimestepWeight,
    /// Inclusive timestep range; defaults to `[0.02 T, 0.98 T]`.
    pub t_range: Option<(usize, usize)>,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        Self {
            multiview_weight: 1.0,
            shape_weight: 1.0,
            cfg_scale: 7.5,
            timestep_weight: TimestepWeight::Constant,
            t_range: None,
        }
    }
}

/// Score providers plus schedule; produces per-step gradients.
#[derive(Clone)]
pub struct Guidance {
    pub multiview: Arc<dyn ScoreProvider>,
    pub shape_conditioned: Arc<dyn ScoreProvider>,
    pub schedule: NoiseSchedule,
    pub settings: GuidanceSettings,
}

/// Gradient of one step plus the timesteps used.
#[derive(Debug, Clone)]
pub struct GuidanceStep {
    pub grads: ParamGradients,
    /// `(provider, t, ‖ε̂ − ε‖²)` for each queried provider.
    pub queries: Vec<(ProviderTag, usize, f64)>,
}

impl Guidance {
    pub fn new(multiview: Arc<dyn ScoreProvider>, shape_conditioned: Arc<dyn ScoreProvider>) -> Self {
        Self {
            multiview,
            shape_conditioned,
            schedule: NoiseSchedule::default(),
            settings: GuidanceSettings::default(),
        }
    }

    fn t_range(&self) -> Result<(usize, usize), GuidanceError> {
        let r = self.settings.t_range.unwrap_or_else(|| self.schedule.default_range());
        if r.0 < 1 || r.0 > r.1 || r.1 > self.schedule.steps() {
            return Err(GuidanceError::TimestepOutOfRange {
                t: r.1,
                min: 1,
                max: self.schedule.steps(),
            });
        }
        Ok(r)
    }

    fn request<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        provider: ProviderTag,
        prompt: &str,
        output: &RenderOutput,
        view: &CameraView,
        conditioning: Option<&Mask>,
    ) -> Result<GuidanceRequest, GuidanceError> {
        let t = sample_timestep(rng, self.t_range()?);
        let noise = sample_noise(rng, view.width, view.height);
        Ok(GuidanceRequest {
            prompt: view_prompt(prompt, view),
            image: output.color.clone(),
            timestep: t,
            noise,
            conditioning: conditioning.cloned(),
            provider,
            cfg_scale: self.settings.cfg_scale,
            view: *view,
        })
    }

    fn upstream(&self, req: &GuidanceRequest, resp: &GuidanceResponse, scale: f64) -> Result<(Image, f64), GuidanceError> {
        check_shape(&req.noise, &resp.noise_pred)?;
        let w = scale * self.settings.timestep_weight.weight(&self.schedule, req.timestep)?;
        let diff = resp.noise_pred.sub(&req.noise);
        let norm = diff.sum_sq();
        Ok((diff.scaled(w), norm))
    }

    /// Multiview-only SDS gradient (the coarse stage).
    pub fn multiview_gradient<R: Rng + ?Sized>(
        &self,
        scene: &Scene,
        view: &CameraView,
        prompt: &str,
        rng: &mut R,
    ) -> Result<GuidanceStep, GuidanceError> {
        let output = render(scene, view, &RenderOptions::default().with_channels(Channels::COLOR));
        let req = self.request(rng, ProviderTag::Multiview, prompt, &output, view, None)?;
        let resp = self.multiview.score(&req)?;
        let (up, norm) = self.upstream(&req, &resp, self.settings.multiview_weight)?;
        let grads = backward(scene, view, &output.tape, &LossImages { color: Some(&up), ..Default::default() })?;
        Ok(GuidanceStep {
            grads,
            queries: vec![(ProviderTag::Multiview, req.timestep, norm)],
        })
    }

    /// `w_mv · ∇SDS_multiview + w_shape · ∇SDS_shape(silhouette)`. Each
    /// provider gets its own timestep and noise; the two are queried
    /// concurrently.
    pub fn combined_loss_gradient<R: Rng + ?Sized>(
        &self,
        scene: &Scene,
        view: &CameraView,
        prompt: &str,
        silhouette: &Mask,
        rng: &mut R,
    ) -> Result<GuidanceStep, GuidanceError> {
        let output = render(scene, view, &RenderOptions::default().with_channels(Channels::COLOR));
        let mv_req = self.request(rng, ProviderTag::Multiview, prompt, &output, view, None)?;
        let sc_req = self.request(rng, ProviderTag::ShapeConditioned, prompt, &output, view, Some(silhouette))?;
        let (mv, sc) = rayon::join(|| self.multiview.score(&mv_req), || self.shape_conditioned.score(&sc_req));
        let (up_mv, n_mv) = self.upstream(&mv_req, &mv?, self.settings.multiview_weight)?;
        let (up_sc, n_sc) = self.upstream(&sc_req, &sc?, self.settings.shape_weight)?;
        let up = up_mv.zip_map(&up_sc, |a, b| a + b);
        let grads = backward(scene, view, &output.tape, &LossImages { color: Some(&up), ..Default::default() })?;
        Ok(GuidanceStep {
            grads,
            queries: vec![
                (ProviderTag::Multiview, mv_req.timestep, n_mv),
                (ProviderTag::ShapeConditioned, sc_req.timestep, n_sc),
            ],
        })
    }
}
