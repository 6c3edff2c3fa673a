//! Browser demo: feature rasters of a synthetic street, the BerHu loss
//! curve, and the ground-truth error overlay.
//!
//! Images are returned as RGBA bytes ready for `ImageData`. The plain Rust
//! functions carry the logic; the `#[wasm_bindgen]` wrappers only convert
//! errors.

use meshcorr::correction::error_overlay;
use meshcorr::groundtruth::{compute_gt, GroundTruthConfig};
use meshcorr::metrics::{berhu, berhu_dx};
use meshcorr::raster::{rasterize, FeatureImageSet, FeatureKind};
use meshcorr::synthetic::{default_intrinsics, generate, SceneSpec, SyntheticScene};
use wasm_bindgen::prelude::*;

const BACKGROUND: [u8; 4] = [24, 24, 28, 255];

fn scene(seed: u32) -> Result<SyntheticScene, String> {
    generate(&SceneSpec::street(seed as u64)).map_err(|e| e.to_string())
}

fn render(scene: &SyntheticScene, frame: u32, camera: bool) -> Result<FeatureImageSet, String> {
    let pose = scene
        .trajectory
        .poses()
        .get(frame as usize)
        .ok_or_else(|| format!("frame {frame} out of range (0..{})", scene.trajectory.len()))?;
    let mesh = if camera { &scene.camera } else { &scene.laser };
    Ok(rasterize(mesh, pose, &default_intrinsics()))
}

/// Maps one feature channel to display colors. Scalar channels are scaled
/// by their maximum over covered pixels; area uses a log scale since
/// triangle sizes span orders of magnitude.
pub fn feature_rgba(set: &FeatureImageSet, kind: FeatureKind) -> Vec<u8> {
    let img = set.channel(kind);
    let covered = || set.mask.data().iter().zip(img.data().chunks_exact(img.channels()));
    let transform = |v: f32| match kind {
        FeatureKind::Area => (1.0 + v.max(0.0) * 1e4).ln(),
        _ => v,
    };
    let max = covered()
        .filter(|(&m, _)| m)
        .fold(0f32, |a, (_, px)| a.max(transform(px[0]).abs()))
        .max(f32::MIN_POSITIVE);
    let mut out = Vec::with_capacity(set.mask.data().len() * 4);
    for (&m, px) in covered() {
        if !m {
            out.extend_from_slice(&BACKGROUND);
            continue;
        }
        let rgb = match kind {
            FeatureKind::Rgb => [px[0], px[1], px[2]],
            FeatureKind::Normal => [0, 1, 2].map(|k| 0.5 * (px[k] + 1.0)),
            FeatureKind::ViewAngle => [px[0]; 3],
            _ => [transform(px[0]) / max; 3],
        };
        out.extend(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.push(255);
    }
    out
}

pub fn feature_raster_impl(seed: u32, frame: u32, feature: &str, camera: bool) -> Result<Vec<u8>, String> {
    let kind = FeatureKind::from_name(feature).ok_or_else(|| format!("unknown feature `{feature}`"))?;
    Ok(feature_rgba(&render(&scene(seed)?, frame, camera)?, kind))
}

/// Signed inverse-depth error between camera and reference renders, red
/// where the camera surface is too near, blue where too far.
pub fn error_overlay_impl(seed: u32, frame: u32, scale: f64) -> Result<Vec<u8>, String> {
    let s = scene(seed)?;
    let gt = compute_gt(&render(&s, frame, true)?, &render(&s, frame, false)?, &GroundTruthConfig::default())
        .map_err(|e| e.to_string())?;
    let rgb = error_overlay(&gt, scale);
    let mut out = Vec::with_capacity(rgb.data().len() / 3 * 4);
    for (px, &m) in rgb.data().chunks_exact(3).zip(gt.mask.data()) {
        if m {
            out.extend_from_slice(px);
            out.push(255);
        } else {
            out.extend_from_slice(&BACKGROUND);
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn image_width() -> u32 {
    default_intrinsics().width as u32
}

#[wasm_bindgen]
pub fn image_height() -> u32 {
    default_intrinsics().height as u32
}

#[wasm_bindgen]
pub fn frame_count() -> u32 {
    SceneSpec::street(0).frames as u32
}

/// RGBA raster of `feature` (`rgb`, `inverse_depth`, `area`, `normal`,
/// `edge_ratio`, `view_angle`) for the camera or the reference mesh.
#[wasm_bindgen]
pub fn feature_raster(seed: u32, frame: u32, feature: &str, camera: bool) -> Result<Vec<u8>, JsError> {
    feature_raster_impl(seed, frame, feature, camera).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn error_overlay_rgba(seed: u32, frame: u32, scale: f64) -> Result<Vec<u8>, JsError> {
    error_overlay_impl(seed, frame, scale).map_err(|e| JsError::new(&e))
}

/// `samples` points of the BerHu loss on `[-x_max, x_max]` as interleaved
/// `(x, b(x), b'(x))` triples.
#[wasm_bindgen]
pub fn berhu_curve(c: f64, x_max: f64, samples: u32) -> Vec<f64> {
    let n = samples.max(2) as usize;
    let c = c.max(meshcorr::metrics::BERHU_MIN_C);
    (0..n)
        .flat_map(|i| {
            let x = -x_max + 2.0 * x_max * i as f64 / (n - 1) as f64;
            [x, berhu(x, c), berhu_dx(x, c)]
        })
        .collect()
}
