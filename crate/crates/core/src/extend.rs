//! Gaussian extension between blocks and label elimination of the surplus.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::ViewSampler;
use crate::scene::{Mark, Scene, TrainMask};
use crate::segmentation::{segment_part, EmptySelection, MaskOracle, SegmentationConfig, SegmentationError};

#[derive(Debug, Error)]
pub enum ExtendError {
    #[error("extension count must be at least 1")]
    ZeroCount,
    #[error("cannot extend an empty scene")]
    EmptyScene,
    #[error("{0} kernel(s) are still marked Extended; eliminate before extending again")]
    PendingExtended(usize),
    #[error("scene has no Extended kernels to eliminate")]
    NoExtended,
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtensionConfig {
    /// Number of new kernels; defaults to the current kernel count.
    pub count: Option<usize>,
    /// Isotropic position perturbation std, scene units.
    pub perturb_sigma: f64,
    /// Block id for new kernels; defaults to one past the current maximum.
    pub block_id: Option<i32>,
    /// Std of the re-randomized seg logit.
    pub seg_init_std: f64,
}

impl Default for ExtensionConfig {
    fn default() -> Self {
        Self {
            count: None,
            perturb_sigma: 0.01,
            block_id: None,
            seg_init_std: 0.01,
        }
    }
}

/// Appends kernels spawned from uniformly drawn parents and freezes every
/// pre-existing kernel. Each child copies its parent except for
/// `x = x_parent + R S z + ε`, `z ~ N(0, I)`, `ε ~ N(0, σ² I)`.
/// Returns the indices of the new kernels.
pub fn extend<R: Rng + ?Sized>(
    scene: &mut Scene,
    config: &ExtensionConfig,
    rng: &mut R,
) -> Result<Vec<usize>, ExtendError> {
    let n = scene.len();
    if n == 0 {
        return Err(ExtendError::EmptyScene);
    }
    let pending = scene.kernels().iter().filter(|k| k.mark == Mark::Extended).count();
    if pending > 0 {
        return Err(ExtendError::PendingExtended(pending));
    }
    let count = config.count.unwrap_or(n);
    if count == 0 {
        return Err(ExtendError::ZeroCount);
    }
    let block = config
        .block_id
        .unwrap_or_else(|| scene.max_block_id().map_or(0, |b| b + 1));
    let perturb = Normal::new(0.0, config.perturb_sigma.max(0.0)).expect("finite sigma");
    let seg = Normal::new(0.0, config.seg_init_std.max(0.0)).expect("finite std");

    scene.freeze_all();
    for _ in 0..count {
        let parent = scene.kernel(rng.random_range(0..n)).clone();
        let r = parent.rotation_matrix();
        let s = parent.scale();
        let z = nalgebra::Vector3::new(
            s[0] * rng.sample::<f64, _>(StandardNormal),
            s[1] * rng.sample::<f64, _>(StandardNormal),
            s[2] * rng.sample::<f64, _>(StandardNormal),
        );
        let offset = r * z;
        let mut child = parent;
        for a in 0..3 {
            let x = child.position[a] as f64 + offset[a] + perturb.sample(rng);
            child.position[a] = x as f32;
        }
        child.mark = Mark::Extended;
        child.block_id = block;
        child.seg_logit = seg.sample(rng) as f32;
        scene.push(child, TrainMask::ALL);
    }
    Ok((n..n + count).collect())
}

#[derive(Debug, Clone, Default)]
pub struct EliminationReport {
    pub removed: usize,
    pub kept: usize,
    pub warnings: Vec<EmptySelection>,
}

/// Segments each new part among the Extended kernels, marks the union as
/// NewPart and deletes the remaining Extended kernels. Kernels not marked
/// Extended are never touched.
pub fn label_eliminate<R: Rng + ?Sized>(
    scene: &mut Scene,
    part_texts: &[String],
    oracle: &dyn MaskOracle,
    config: &SegmentationConfig,
    sampler: &ViewSampler,
    rng: &mut R,
) -> Result<EliminationReport, ExtendError> {
    let candidates: Vec<bool> = scene.kernels().iter().map(|k| k.mark == Mark::Extended).collect();
    if !candidates.iter().any(|&c| c) {
        return Err(ExtendError::NoExtended);
    }
    let mut keep = vec![false; scene.len()];
    let mut warnings = Vec::new();
    for text in part_texts {
        let res = segment_part(scene, text, oracle, config, sampler, Some(&candidates), rng)?;
        for i in res.selected {
            keep[i] = true;
        }
        warnings.extend(res.warning);
    }
    let mut kept = 0;
    for (k, &keep) in scene.kernels_mut().iter_mut().zip(&keep) {
        if keep {
            k.mark = Mark::NewPart;
            kept += 1;
        }
    }
    let removed = scene.retain(|_, k| k.mark != Mark::Extended);
    Ok(EliminationReport {
        removed,
        kept,
        warnings,
    })
}
