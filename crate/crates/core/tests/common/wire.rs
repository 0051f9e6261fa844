//! Fixed inputs behind the wire golden fixtures.

use std::path::PathBuf;

use base64::Engine;
use hcog::camera::CameraView;
use hcog::guidance::{GuidanceRequest, ProviderTag};
use hcog::image::{Image, Mask};
use hcog::guidance::{GuidanceError, GuidanceResponse, ScoreClient, ScoreProvider};
use hcog::planner::{teaser_plan, LlmClient, Plan, PlanError, PlanSource};
use hcog::scene::Scene;
use hcog::segmentation::{MaskClient, MaskOracle, MaskQuery, SegmentationError};
use hcog::wire::RetryPolicy;

use super::stub::Stub;

pub const W: usize = 4;
pub const H: usize = 3;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/wire").join(name)
}

pub fn read(name: &str) -> Vec<u8> {
    std::fs::read(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn quick() -> RetryPolicy {
    RetryPolicy {
        retries: 2,
        base_delay_secs: 0.001,
        timeout_secs: 5.0,
    }
}

pub fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Values exactly representable in 8 bits so the PNG round trip is lossless.
pub fn image() -> Image {
    let data = (0..W * H * 3)
        .map(|i| {
            let (p, c) = (i / 3, i % 3);
            let (x, y) = (p % W, p / W);
            ((x * 3 + y * 5 + c * 7) % 11) as f64 * 51.0 / 255.0 / 2.0
        })
        .map(|v| (v * 255.0).round() / 255.0)
        .collect();
    Image::from_vec(W, H, 3, data)
}

pub fn noise_values() -> Vec<f32> {
    (0..W * H * 3).map(|i| ((i * 37 % 19) as f32 - 9.0) / 4.0).collect()
}

pub fn noise_pred_values() -> Vec<f32> {
    (0..W * H * 3).map(|i| i as f32 * 0.125 - 2.0).collect()
}

pub fn silhouette() -> Mask {
    Mask {
        width: W,
        height: H,
        data: (0..W * H).map(|p| p % W < 2).collect(),
    }
}

pub fn segment_mask() -> Mask {
    Mask {
        width: W,
        height: H,
        data: (0..W * H).map(|p| (p % W + p / W).is_multiple_of(2)).collect(),
    }
}

pub fn request(conditioned: bool) -> GuidanceRequest {
    GuidanceRequest {
        prompt: "a red chair, front view".into(),
        image: image(),
        timestep: 500,
        noise: Image::from_vec(W, H, 3, noise_values().into_iter().map(f64::from).collect()),
        conditioning: conditioned.then(silhouette),
        provider: if conditioned {
            ProviderTag::ShapeConditioned
        } else {
            ProviderTag::Multiview
        },
        cfg_scale: 7.5,
        view: CameraView::new(0.0, 0.0, 3.0, W, H),
    }
}

pub fn gray_png(w: u32, h: u32, px: Vec<u8>) -> Vec<u8> {
    let img = image::GrayImage::from_raw(w, h, px).unwrap();
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png).unwrap();
    out
}

pub fn json_bytes(v: serde_json::Value) -> Vec<u8> {
    serde_json::to_vec(&v).unwrap()
}

pub fn score_with(reply: Vec<u8>, conditioned: bool) -> (Result<GuidanceResponse, GuidanceError>, Vec<u8>) {
    let stub = Stub::start(vec![(200, reply)]);
    let client = ScoreClient::new(stub.url.clone(), quick());
    let out = client.score(&request(conditioned));
    let rec = stub.finish();
    assert_eq!(rec[0].path, "/v1/score");
    (out, rec[0].body.clone())
}

pub fn segment_with(reply: Vec<u8>) -> (Result<Mask, SegmentationError>, Vec<u8>) {
    let stub = Stub::start(vec![(200, reply)]);
    let client = MaskClient::new(format!("{}/", stub.url), quick());
    let img = image();
    let view = CameraView::new(0.0, 0.0, 3.0, W, H);
    let scene = Scene::new(0);
    let out = client.mask(&MaskQuery {
        image: &img,
        view: &view,
        scene: &scene,
        text: "chair leg",
    });
    let rec = stub.finish();
    assert_eq!(rec[0].path, "/v1/segment");
    (out, rec[0].body.clone())
}

pub fn llm_with(reply: Vec<u8>) -> (Result<Plan, PlanError>, Vec<u8>) {
    let stub = Stub::start(vec![(200, reply)]);
    let client = LlmClient::new(stub.url.clone(), Some("planner-test".into()), quick());
    let out = hcog::planner::synthesize_plan(&teaser_plan().source_prompt, PlanSource::Llm(&client));
    let rec = stub.finish();
    assert_eq!(rec[0].path, "/v1/chat/completions");
    (out, rec[0].body.clone())
}
