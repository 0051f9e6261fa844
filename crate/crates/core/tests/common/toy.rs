//! Two-cluster "body" then "hat" fixture for end-to-end runs.

use std::path::Path;

use hcog::pipeline::{InitConfig, ProviderMode, RandomBall, RunConfig};
use hcog::planner::{Block, PartSpec, Plan};
use hcog::ply::save_ply;
use hcog::scene::{GaussianKernel, Scene};
use hcog::segmentation::KernelSelector;
use rand::Rng;

use super::rng;

pub const HAT_CENTER: [f64; 3] = [0.0, 0.0, 0.55];

fn cluster(seed: u64, n: usize, center: [f64; 3], spread: f64, color: [f64; 3]) -> Vec<GaussianKernel> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let p = [0, 1, 2].map(|a| center[a] + r.random_range(-spread..spread));
            GaussianKernel::default()
                .with_position(p)
                .with_scale([0.08; 3])
                .with_color(color)
                .with_opacity(0.7)
        })
        .collect()
}

pub fn body_scene() -> Scene {
    Scene::from_kernels(cluster(11, 24, [0.0; 3], 0.25, [0.9, 0.2, 0.1]), 0)
}

pub fn body_and_hat_scene() -> Scene {
    let mut k = cluster(11, 24, [0.0; 3], 0.25, [0.9, 0.2, 0.1]);
    k.extend(cluster(12, 12, HAT_CENTER, 0.12, [0.1, 0.2, 0.9]));
    Scene::from_kernels(k, 0)
}

pub fn plan() -> Plan {
    Plan {
        source_prompt: "a red body wearing a blue hat".into(),
        blocks: vec![
            Block {
                index: 0,
                initial_text: "a body".into(),
                parts: vec![PartSpec::new("body", "red body")],
            },
            Block {
                index: 1,
                initial_text: "a body with hat".into(),
                parts: vec![PartSpec::new("hat", "blue hat")],
            },
        ],
        occlusion_edges: vec![("body".into(), "hat".into())],
    }
}

/// Oracle-mode config with small step counts; writes the target PLYs into `dir`.
pub fn config(dir: &Path) -> RunConfig {
    let t0 = dir.join("target_block0.ply");
    let t1 = dir.join("target_block1.ply");
    save_ply(&body_scene(), &t0).unwrap();
    save_ply(&body_and_hat_scene(), &t1).unwrap();
    let mut c = RunConfig {
        seed: 7,
        ..RunConfig::default()
    };
    c.plan.inline = Some(plan());
    c.init = InitConfig::RandomBall(RandomBall {
        count: 16,
        radius: 0.4,
        opacity: 0.3,
        ..RandomBall::default()
    });
    c.steps.coarse = 12;
    c.steps.fine = 6;
    c.segmentation.iterations = 80;
    c.render.width = 24;
    c.render.height = 24;
    c.render.radius = Some(2.5);
    c.turntable.width = 16;
    c.turntable.height = 16;
    c.providers.mode = ProviderMode::Oracle;
    c.providers.oracle_targets = vec![t0, t1];
    c.providers.oracle_parts.insert(
        "body".into(),
        KernelSelector::Sphere {
            center: [0.0; 3],
            radius: 0.45,
        },
    );
    c.providers.oracle_parts.insert(
        "hat".into(),
        KernelSelector::Sphere {
            center: [0.0, 0.0, 0.6],
            radius: 0.55,
        },
    );
    c
}

/// Two separated clusters of small kernels; returns the scene and the
/// ground-truth membership of cluster A (at negative x).
pub fn two_clusters(seed: u64, n_a: usize, n_b: usize) -> (Scene, Vec<bool>) {
    let mut k = shell(seed, n_a, [-0.45, 0.0, 0.0], 0.22, [0.8, 0.3, 0.2]);
    k.extend(shell(seed + 1, n_b, [0.45, 0.0, 0.0], 0.22, [0.2, 0.3, 0.8]));
    let gt = (0..n_a + n_b).map(|i| i < n_a).collect();
    (Scene::from_kernels(k, 0), gt)
}

/// Kernels spread evenly on a sphere so that each is visible from some view.
pub fn shell(seed: u64, n: usize, center: [f64; 3], radius: f64, color: [f64; 3]) -> Vec<GaussianKernel> {
    let mut r = rng(seed);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let d = [rho * phi.cos(), rho * phi.sin(), z];
            let p = [0, 1, 2].map(|a| center[a] + radius * d[a]);
            let mut k = GaussianKernel::default()
                .with_position(p)
                .with_scale([0.045; 3])
                .with_color(color)
                .with_opacity(0.6);
            k.seg_logit = r.random_range(-0.01..0.01);
            k
        })
        .collect()
}
