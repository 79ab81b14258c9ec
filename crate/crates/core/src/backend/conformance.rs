//! Backend contract checks shared by every [`Backend`] implementation.
//!
//! The same suite runs against the in-process mock and against a sidecar
//! reached over HTTP.

use image::RgbImage;

use super::{Backend, DrawSpec, PromptSpec};

/// Runs the contract suite and returns the list of violated checks (empty on
/// success).
pub fn check_backend(backend: &dyn Backend, image: &RgbImage, label: &PromptSpec) -> Vec<String> {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    let latent = match backend.encode(image, "conformance") {
        Ok(l) => l,
        Err(e) => return vec![format!("encode failed: {e}")],
    };
    match backend.encode(image, "conformance") {
        Ok(again) => check("encode is deterministic", again == latent),
        Err(e) => check(&format!("second encode failed: {e}"), false),
    }
    let expected_factor = latent.downsample_factor;
    check(
        "latent extent times factor covers the image",
        latent.width() as u32 * expected_factor <= image.width()
            && latent.height() as u32 * expected_factor <= image.height(),
    );

    let draws = [
        DrawSpec::new(0.3, 11).expect("valid draw"),
        DrawSpec::new(0.6, 12).expect("valid draw"),
        DrawSpec::new(0.3, 11).expect("valid draw"),
    ];
    let cond = backend.loss_maps(&latent, label, &draws);
    let null = backend.loss_maps(&latent, &PromptSpec::Null, &draws);
    match (cond, null) {
        (Ok(cond), Ok(null)) => {
            check("one map per draw", cond.len() == draws.len() && null.len() == draws.len());
            let shape = (latent.height(), latent.width());
            check(
                "loss maps match latent shape",
                cond.iter().chain(&null).all(|m| m.data.dim() == shape),
            );
            check(
                "loss maps are finite",
                cond.iter().chain(&null).all(|m| m.data.iter().all(|v| v.is_finite())),
            );
            check("duplicate draws give duplicate maps", cond[0].data == cond[2].data);
            check("draws keep request order", cond.iter().zip(&draws).all(|(m, d)| m.draw == *d));
            match backend.loss_maps(&latent, label, &draws[..1]) {
                Ok(again) => check("repeated request is bit-identical", again[0].data == cond[0].data),
                Err(e) => check(&format!("repeat loss_map failed: {e}"), false),
            }
        }
        (Err(e), _) | (_, Err(e)) => check(&format!("loss_map failed: {e}"), false),
    }

    check(
        "draw outside (0,1) rejected",
        backend
            .loss_maps(&latent, label, &[DrawSpec { t: 1.5, noise_seed: 0 }])
            .is_err(),
    );

    match (
        backend.feature(&latent, label, 1.6, "default"),
        backend.feature(&latent, label, 1.6, "default"),
    ) {
        (Ok(a), Ok(b)) => {
            check("features are deterministic", a.values == b.values);
            check("features are finite", a.values.iter().all(|v| v.is_finite()));
            check("feature time passed through", a.feature_t == 1.6);
        }
        (Err(e), _) | (_, Err(e)) => check(&format!("features failed: {e}"), false),
    }
    match backend.features(&[], label, 1.6, "default") {
        Ok(v) => check("zero latents give zero features", v.is_empty()),
        Err(e) => check(&format!("empty features request failed: {e}"), false),
    }
    failures
}
