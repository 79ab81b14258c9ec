//! Per-run memoization of loss maps keyed by (source, window, prompt, draw).

use std::collections::HashMap;
use std::sync::Mutex;

use image::RgbImage;
use ndarray::Array2;

use super::{Backend, BackendError, DrawSpec, FeatureVector, LatentMap, LossMap, PromptSpec};

type Key = (String, (usize, usize), (usize, usize), PromptSpec, (u64, u64));

pub struct CachedBackend<B> {
    inner: B,
    maps: Mutex<HashMap<Key, Array2<f32>>>,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            maps: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cached_maps(&self) -> usize {
        self.maps.lock().expect("cache lock").len()
    }

    fn key(latent: &LatentMap, prompt: &PromptSpec, draw: &DrawSpec) -> Key {
        (
            latent.source_id.clone(),
            latent.origin,
            (latent.height(), latent.width()),
            prompt.clone(),
            draw.key(),
        )
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn encode(&self, image: &RgbImage, source_id: &str) -> Result<LatentMap, BackendError> {
        self.inner.encode(image, source_id)
    }

    fn loss_maps(
        &self,
        latent: &LatentMap,
        prompt: &PromptSpec,
        draws: &[DrawSpec],
    ) -> Result<Vec<LossMap>, BackendError> {
        let mut out: Vec<Option<LossMap>> = vec![None; draws.len()];
        let mut missing = Vec::new();
        {
            let maps = self.maps.lock().expect("cache lock");
            for (i, d) in draws.iter().enumerate() {
                match maps.get(&Self::key(latent, prompt, d)) {
                    Some(m) => {
                        out[i] = Some(LossMap {
                            data: m.clone(),
                            draw: *d,
                            prompt: prompt.clone(),
                        })
                    }
                    None => missing.push(i),
                }
            }
        }
        if !missing.is_empty() {
            let wanted: Vec<DrawSpec> = missing.iter().map(|&i| draws[i]).collect();
            let fresh = self.inner.loss_maps(latent, prompt, &wanted)?;
            let mut maps = self.maps.lock().expect("cache lock");
            for (i, map) in missing.into_iter().zip(fresh) {
                maps.insert(Self::key(latent, prompt, &draws[i]), map.data.clone());
                out[i] = Some(map);
            }
        }
        Ok(out.into_iter().map(|m| m.expect("filled")).collect())
    }

    fn features(
        &self,
        latents: &[LatentMap],
        prompt: &PromptSpec,
        feature_t: f64,
        layer: &str,
    ) -> Result<Vec<FeatureVector>, BackendError> {
        self.inner.features(latents, prompt, feature_t, layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{activation_latent, MockBackend, MockWorld};

    #[test]
    fn cache_hits_return_identical_maps() {
        let backend = CachedBackend::new(MockBackend::new(MockWorld::planted(2, 0)).unwrap());
        let latent = activation_latent(Array2::from_elem((48, 48), 0.5), "x");
        let draws = [DrawSpec::new(0.2, 1).unwrap(), DrawSpec::new(0.4, 2).unwrap()];
        let a = backend.loss_maps(&latent, &PromptSpec::Null, &draws).unwrap();
        assert_eq!(backend.cached_maps(), 2);
        let b = backend.loss_maps(&latent, &PromptSpec::Null, &draws[1..]).unwrap();
        assert_eq!(backend.cached_maps(), 2);
        assert_eq!(a[1], b[0]);
    }
}
