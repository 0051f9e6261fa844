//! Per-kernel part labels learned from 2D masks through the probability channel.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{sample_view, CameraView, ViewSampler};
use crate::image::{decode_gray8, Image, ImageError, Mask};
use crate::optim::{LearningRates, Optimizer, OptimizerConfig, OptimizerKind};
use crate::raster::{backward, render, Channels, LossImages, RasterError, RenderOptions};
use crate::scene::{GaussianKernel, Scene, TrainMask};
use crate::wire::{self, JsonClient, RetryPolicy, WireError};

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("no ground truth registered for part `{0}`")]
    UnknownPart(String),
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegOptimizer {
    Adam,
    GradientDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    pub views_per_iteration: usize,
    /// Pixels with rendered alpha at or below this are left out of the loss.
    pub coverage_threshold: f64,
    /// Standard deviation of the seg-logit initialization.
    pub init_std: f64,
    pub optimizer: SegOptimizer,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            learning_rate: 0.05,
            threshold: 0.9,
            views_per_iteration: 1,
            coverage_threshold: 0.05,
            init_std: 0.01,
            optimizer: SegOptimizer::Adam,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(SegmentationError::InvalidConfig(format!(
                "threshold {} not in (0, 1)",
                self.threshold
            )));
        }
        if self.iterations == 0 || self.views_per_iteration == 0 {
            return Err(SegmentationError::InvalidConfig(
                "iterations and views_per_iteration must be ≥ 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SegmentationError::InvalidConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// What a mask oracle is asked for one view.
pub struct MaskQuery<'a> {
    pub image: &'a Image,
    pub view: &'a CameraView,
    /// Current scene, for oracles that derive masks from geometry.
    pub scene: &'a Scene,
    pub text: &'a str,
}

pub trait MaskOracle: Send + Sync {
    fn mask(&self, query: &MaskQuery) -> Result<Mask, SegmentationError>;
}

/// Ground-truth kernel set of a part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSelector {
    All,
    None,
    Indices(Vec<usize>),
    /// Kernels whose center lies within `radius` of `center`.
    Sphere { center: [f64; 3], radius: f64 },
}

impl KernelSelector {
    pub fn contains(&self, index: usize, kernel: &GaussianKernel) -> bool {
        match self {
            KernelSelector::All => true,
            KernelSelector::None => false,
            KernelSelector::Indices(v) => v.contains(&index),
            KernelSelector::Sphere { center, radius } => {
                let p = kernel.position();
                let d = p - nalgebra::Vector3::from(*center);
                d.norm() <= *radius
            }
        }
    }

    pub fn members(&self, scene: &Scene) -> Vec<bool> {
        let mut out: Vec<bool> = scene
            .kernels()
            .iter()
            .enumerate()
            .map(|(i, k)| self.contains(i, k))
            .collect();
        if let KernelSelector::Indices(v) = self {
            out.iter_mut().for_each(|b| *b = false);
            for &i in v {
                if i < out.len() {
                    out[i] = true;
                }
            }
        }
        out
    }
}

/// Renders ground-truth part masks from a kernel selection: a pixel is in
/// the mask when the part carries more than half of its coverage.
#[derive(Debug, Clone, Default)]
pub struct SyntheticMaskOracle {
    parts: BTreeMap<String, KernelSelector>,
}

impl SyntheticMaskOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_part(mut self, text: impl Into<String>, selector: KernelSelector) -> Self {
        self.parts.insert(text.into(), selector);
        self
    }

    pub fn insert(&mut self, text: impl Into<String>, selector: KernelSelector) {
        self.parts.insert(text.into(), selector);
    }

    pub fn selector(&self, text: &str) -> Option<&KernelSelector> {
        self.parts.get(text)
    }

    /// Visible mask of `selector` in `scene` from `view`.
    pub fn render_mask(scene: &Scene, selector: &KernelSelector, view: &CameraView) -> Mask {
        let members = selector.members(scene);
        let mut gt = scene.clone();
        for (k, &m) in gt.kernels_mut().iter_mut().zip(&members) {
            k.seg_logit = if m { 50.0 } else { -50.0 };
        }
        let out = render(
            &gt,
            view,
            &RenderOptions::default()
                .with_channels(Channels {
                    color: false,
                    prob: true,
                })
                .with_seg_eligible(&members),
        );
        Mask {
            width: view.width,
            height: view.height,
            data: out
                .prob
                .data
                .iter()
                .zip(&out.alpha.data)
                .map(|(&p, &a)| a > 0.05 && p > 0.5 * a)
                .collect(),
        }
    }
}

impl MaskOracle for SyntheticMaskOracle {
    fn mask(&self, q: &MaskQuery) -> Result<Mask, SegmentationError> {
        let sel = self
            .parts
            .get(q.text)
            .ok_or_else(|| SegmentationError::UnknownPart(q.text.to_string()))?;
        Ok(Self::render_mask(q.scene, sel, q.view))
    }
}

/// Same mask for every query.
#[derive(Debug, Clone)]
pub struct ConstantMaskOracle(pub bool);

impl MaskOracle for ConstantMaskOracle {
    fn mask(&self, q: &MaskQuery) -> Result<Mask, SegmentationError> {
        Ok(Mask::new(q.view.width, q.view.height, self.0))
    }
}

/// `/v1/segment` client.
#[derive(Debug, Clone)]
pub struct MaskClient {
    endpoint: String,
    client: JsonClient,
}

impl MaskClient {
    pub fn new(endpoint: impl Into<String>, retry: RetryPolicy) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            client: JsonClient::new(retry),
        }
    }

    pub fn url(&self) -> String {
        format!("{}/v1/segment", self.endpoint)
    }
}

pub fn segment_request_body(image: &Image, query: &str) -> Result<Vec<u8>, ImageError> {
    #[derive(Serialize)]
    struct Body<'a> {
        image: String,
        query: &'a str,
    }
    Ok(serde_json::to_vec(&Body {
        image: wire::b64_encode(&image.encode_png()?),
        query,
    })
    .expect("serializable"))
}

pub fn parse_segment_response(value: &serde_json::Value, width: usize, height: usize) -> Result<Mask, WireError> {
    let bytes = wire::b64_decode("mask", wire::str_field(value, "mask")?)?;
    let (w, h, px) = decode_gray8(&bytes).map_err(|e| WireError::schema("mask", e.to_string()))?;
    if (w, h) != (width, height) {
        return Err(WireError::schema(
            "mask",
            format!("expected {width}x{height}, got {w}x{h}"),
        ));
    }
    if let Some(v) = px.iter().find(|&&v| v != 0 && v != 255) {
        return Err(WireError::schema("mask", format!("pixel value {v} is neither 0 nor 255")));
    }
    Ok(Mask {
        width,
        height,
        data: px.into_iter().map(|v| v == 255).collect(),
    })
}

impl MaskOracle for MaskClient {
    fn mask(&self, q: &MaskQuery) -> Result<Mask, SegmentationError> {
        let body = segment_request_body(q.image, q.text)?;
        let reply = self.client.post(&self.url(), &body)?;
        Ok(parse_segment_response(&reply, q.image.width, q.image.height)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmptySelection {
    pub part: String,
}

#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub selected: Vec<usize>,
    pub warning: Option<EmptySelection>,
    /// Mean covered-pixel BCE of the last iteration.
    pub final_loss: f64,
}

/// `{ i ∈ candidates : σ(seg_logit_i) ≥ threshold }`.
pub fn select(scene: &Scene, threshold: f64, candidates: Option<&[bool]>) -> Vec<usize> {
    scene
        .kernels()
        .iter()
        .enumerate()
        .filter(|(i, k)| candidates.is_none_or(|c| c[*i]) && k.p_seg() >= threshold)
        .map(|(i, _)| i)
        .collect()
}

const P_CLAMP: f64 = 1e-6;

/// Mean BCE over covered pixels and its gradient with respect to `prob`.
pub fn bce_loss(prob: &Image, alpha: &Image, mask: &Mask, coverage: f64) -> (f64, Image) {
    let mut grad = Image::zeros(prob.width, prob.height, 1);
    let covered: Vec<usize> = (0..prob.data.len()).filter(|&i| alpha.data[i] > coverage).collect();
    if covered.is_empty() {
        return (0.0, grad);
    }
    let n = covered.len() as f64;
    let mut loss = 0.0;
    for i in covered {
        let raw = prob.data[i];
        let p = raw.clamp(P_CLAMP, 1.0 - P_CLAMP);
        let clamped = p != raw;
        if mask.data[i] {
            loss -= p.ln();
            if !clamped {
                grad.data[i] = -1.0 / (p * n);
            }
        } else {
            loss -= (1.0 - p).ln();
            if !clamped {
                grad.data[i] = 1.0 / ((1.0 - p) * n);
            }
        }
    }
    (loss / n, grad)
}

/// Learns seg logits for `part_text` and returns the selected kernels.
///
/// Only `candidates` (all kernels when `None`) are trained and selectable;
/// the rest render with probability 0. Every parameter other than the
/// candidates' `seg_logit` is left bit-identical, and the scene's train
/// masks are restored on return.
pub fn segment_part<R: Rng + ?Sized>(
    scene: &mut Scene,
    part_text: &str,
    oracle: &dyn MaskOracle,
    config: &SegmentationConfig,
    sampler: &ViewSampler,
    candidates: Option<&[bool]>,
    rng: &mut R,
) -> Result<SegmentationResult, SegmentationError> {
    config.validate()?;
    let n = scene.len();
    let cand: Vec<bool> = match candidates {
        Some(c) => {
            assert_eq!(c.len(), n, "candidate mask length");
            c.to_vec()
        }
        None => vec![true; n],
    };
    let saved = scene.trainable().to_vec();
    for (i, &c) in cand.iter().enumerate() {
        scene.set_mask(i, if c { TrainMask::SEG_ONLY } else { TrainMask::NONE });
    }
    let init = Normal::new(0.0, config.init_std.max(0.0)).expect("finite std");
    for (k, &c) in scene.kernels_mut().iter_mut().zip(&cand) {
        if c {
            k.seg_logit = init.sample(rng) as f32;
        }
    }

    let result = optimize_labels(scene, part_text, oracle, config, sampler, &cand, rng);
    for (i, m) in saved.into_iter().enumerate() {
        scene.set_mask(i, m);
    }
    let final_loss = result?;

    let selected = select(scene, config.threshold, Some(&cand));
    let warning = selected.is_empty().then(|| {
        log::warn!("segmentation of `{part_text}` selected no kernels");
        EmptySelection {
            part: part_text.to_string(),
        }
    });
    Ok(SegmentationResult {
        selected,
        warning,
        final_loss,
    })
}

fn optimize_labels<R: Rng + ?Sized>(
    scene: &mut Scene,
    part_text: &str,
    oracle: &dyn MaskOracle,
    config: &SegmentationConfig,
    sampler: &ViewSampler,
    cand: &[bool],
    rng: &mut R,
) -> Result<f64, SegmentationError> {
    let mut adam = Optimizer::new(
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: LearningRates {
                seg: config.learning_rate,
                ..LearningRates::default()
            },
            ..OptimizerConfig::default()
        },
        scene.len(),
        1.0,
    );
    let mut last_loss = 0.0;
    for _ in 0..config.iterations {
        let mut total = crate::raster::ParamGradients::zeros(scene.len());
        let mut loss_sum = 0.0;
        for _ in 0..config.views_per_iteration {
            let view = sample_view(rng, sampler);
            let out = render(scene, &view, &RenderOptions::default().with_seg_eligible(cand));
            let mask = oracle.mask(&MaskQuery {
                image: &out.color,
                view: &view,
                scene,
                text: part_text,
            })?;
            let (loss, up) = bce_loss(&out.prob, &out.alpha, &mask, config.coverage_threshold);
            loss_sum += loss;
            let g = backward(
                scene,
                &view,
                &out.tape,
                &LossImages {
                    prob: Some(&up),
                    ..Default::default()
                },
            )?;
            total.add(&g);
        }
        let k = 1.0 / config.views_per_iteration as f64;
        total.scale(k);
        last_loss = loss_sum * k;
        match config.optimizer {
            SegOptimizer::Adam => adam.step(scene, &total),
            SegOptimizer::GradientDescent => {
                for (i, kern) in scene.kernels_mut().iter_mut().enumerate() {
                    if cand[i] {
                        kern.seg_logit = (kern.seg_logit as f64 - config.learning_rate * total.seg[i]) as f32;
                    }
                }
            }
        }
    }
    Ok(last_loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_gradient_matches_finite_difference() {
        let prob = Image::from_vec(3, 1, 1, vec![0.3, 0.6, 0.2]);
        let alpha = Image::from_vec(3, 1, 1, vec![0.9, 0.8, 0.01]);
        let mask = Mask {
            width: 3,
            height: 1,
            data: vec![true, false, true],
        };
        let (_, g) = bce_loss(&prob, &alpha, &mask, 0.05);
        for i in 0..2 {
            let h = 1e-6;
            let mut a = prob.clone();
            let mut b = prob.clone();
            a.data[i] += h;
            b.data[i] -= h;
            let fd = (bce_loss(&a, &alpha, &mask, 0.05).0 - bce_loss(&b, &alpha, &mask, 0.05).0) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-6);
        }
        assert_eq!(g.data[2], 0.0);
    }

    #[test]
    fn selection_is_monotone_in_threshold() {
        let ks = (0..20)
            .map(|i| GaussianKernel {
                seg_logit: (i as f32 - 10.0) * 0.4,
                ..GaussianKernel::default()
            })
            .collect();
        let s = Scene::from_kernels(ks, 0);
        let lo = select(&s, 0.3, None);
        let hi = select(&s, 0.8, None);
        assert!(hi.iter().all(|i| lo.contains(i)));
        assert!(hi.len() < lo.len());
    }

    #[test]
    fn segment_response_rejects_gray_levels_and_wrong_size() {
        let mut img = Image::zeros(2, 2, 1);
        img.data[0] = 0.5;
        let v = serde_json::json!({ "mask": wire::b64_encode(&img.encode_png().unwrap()) });
        assert!(matches!(parse_segment_response(&v, 2, 2), Err(WireError::Schema { .. })));
        let ok = Mask::new(3, 2, true);
        let v = serde_json::json!({ "mask": wire::b64_encode(&ok.encode_png().unwrap()) });
        assert!(matches!(parse_segment_response(&v, 2, 2), Err(WireError::Schema { .. })));
        assert_eq!(parse_segment_response(&v, 3, 2).unwrap(), ok);
    }
}
