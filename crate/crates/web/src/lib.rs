//! Browser bindings: corrupt a synthetic transient and look at the result,
//! and run a small exact t-SNE on Gaussian clusters.

use wasm_bindgen::prelude::*;

use pae_core::corruption::{corrupt, CorruptionSpec};
use pae_core::datagen::{self, BreakLocation, TEMPLATES};
use pae_core::manifold::{knn_purity, tsne_embed, EmbeddingConfig};
use pae_core::rng;

const PATCHES_PER_CHANNEL: usize = 5;

/// One generated transient with its corrupted copy (raw units).
#[wasm_bindgen]
pub struct Preview {
    samples: usize,
    clean: Vec<f64>,
    corrupted: Vec<f64>,
    mask: Vec<u8>,
}

impl Preview {
    pub fn build(location: &str, size_cm: f64, snr_db: f64, mask_ratio: f64, seed: u64) -> Result<Preview, String> {
        let location = BreakLocation::parse(location).ok_or_else(|| format!("unknown break location `{location}`"))?;
        if !(datagen::MIN_BREAK_CM..=datagen::MAX_BREAK_CM).contains(&size_cm) {
            return Err(format!(
                "break size must lie in [{}, {}] cm",
                datagen::MIN_BREAK_CM,
                datagen::MAX_BREAK_CM
            ));
        }
        let t = datagen::generate_transient("preview", location, size_cm, seed, &TEMPLATES).map_err(|e| e.to_string())?;
        let spec = CorruptionSpec::new(snr_db, mask_ratio, rng::derive(seed, &[1])).map_err(|e| e.to_string())?;
        let c = corrupt(&t.channels, &spec, PATCHES_PER_CHANNEL).map_err(|e| e.to_string())?;
        Ok(Preview {
            samples: t.channels.cols(),
            clean: t.channels.into_data(),
            corrupted: c.input.into_data(),
            mask: c.mask.iter().map(|&m| u8::from(m)).collect(),
        })
    }

    fn channel(&self, data: &[f64], c: usize) -> Vec<f64> {
        data.get(c * self.samples..(c + 1) * self.samples)
            .map(<[f64]>::to_vec)
            .unwrap_or_default()
    }
}

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(constructor)]
    pub fn new(location: &str, size_cm: f64, snr_db: f64, mask_ratio: f64, seed: u64) -> Result<Preview, JsError> {
        Preview::build(location, size_cm, snr_db, mask_ratio, seed).map_err(|e| JsError::new(&e))
    }

    pub fn clean(&self, channel: usize) -> Vec<f64> {
        self.channel(&self.clean, channel)
    }

    pub fn corrupted(&self, channel: usize) -> Vec<f64> {
        self.channel(&self.corrupted, channel)
    }

    /// One byte per patch, channel-major, 1 where masked.
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }

    #[wasm_bindgen(js_name = patchesPerChannel)]
    pub fn patches_per_channel(&self) -> usize {
        PATCHES_PER_CHANNEL
    }
}

#[wasm_bindgen(js_name = channelNames)]
pub fn channel_names() -> Vec<String> {
    datagen::channel_names().iter().map(|s| s.to_string()).collect()
}

/// Embedding of three Gaussian clusters in 10-D.
#[wasm_bindgen]
pub struct ClusterEmbedding {
    coords: Vec<f64>,
    labels: Vec<u8>,
    purity: f64,
    final_kl: f64,
}

impl ClusterEmbedding {
    pub fn build(per_cluster: usize, separation: f64, perplexity: f64, iterations: usize, seed: u64) -> Result<ClusterEmbedding, String> {
        let dims = 10;
        let mut r = rng::stream(seed);
        let mut x = Vec::with_capacity(3 * per_cluster);
        let mut labels = Vec::with_capacity(3 * per_cluster);
        for c in 0..3 {
            for _ in 0..per_cluster {
                x.push(
                    (0..dims)
                        .map(|d| if d == c { separation } else { 0.0 } + rng::normal(&mut r))
                        .collect::<Vec<f64>>(),
                );
                labels.push(c);
            }
        }
        let cfg = EmbeddingConfig {
            perplexity,
            iterations,
            seed,
            ..EmbeddingConfig::default()
        };
        let emb = tsne_embed(&x, &cfg).map_err(|e| e.to_string())?;
        let k = 10.min(x.len() - 1);
        let purity = knn_purity(&emb.coords, &labels, k).map_err(|e| e.to_string())?;
        Ok(ClusterEmbedding {
            coords: emb.coords.iter().flatten().copied().collect(),
            labels: labels.iter().map(|&l| l as u8).collect(),
            purity,
            final_kl: emb.kl_trace.last().copied().unwrap_or(f64::NAN),
        })
    }
}

#[wasm_bindgen]
impl ClusterEmbedding {
    #[wasm_bindgen(constructor)]
    pub fn new(per_cluster: usize, separation: f64, perplexity: f64, iterations: usize, seed: u64) -> Result<ClusterEmbedding, JsError> {
        ClusterEmbedding::build(per_cluster, separation, perplexity, iterations, seed).map_err(|e| JsError::new(&e))
    }

    /// Interleaved `x, y` per point.
    pub fn coords(&self) -> Vec<f64> {
        self.coords.clone()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }

    pub fn purity(&self) -> f64 {
        self.purity
    }

    #[wasm_bindgen(js_name = finalKl)]
    pub fn final_kl(&self) -> f64 {
        self.final_kl
    }
}
