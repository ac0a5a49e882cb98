//! Dataset-level evaluation helpers shared by the command-line tool and the
//! test suites: corrupted views, latent extraction, reconstruction quality.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt, Corrupted, CorruptionSpec};
use crate::datagen::{Dataset, Split};
use crate::diagnosis::{self, CorruptionInfo, EvalReport, HeadConfig, Samples};
use crate::error::Result;
use crate::manifold::{knn_purity, tsne_embed, EmbeddingConfig};
use crate::model::{patchify, ModelConfig, PaeModel};
use crate::numerics::Tensor;
use crate::rng;
use crate::training::{fit_window, windows};

/// Corruption of transient `index` under an evaluation seed. Keyed by the
/// dataset index so every consumer sees the same noise and mask.
pub fn eval_spec(snr_db: f64, mask_ratio: f64, seed: u64, index: usize) -> CorruptionSpec {
    CorruptionSpec {
        snr_db,
        mask_ratio,
        seed: rng::derive(seed, &[0xe7, index as u64]),
    }
}

/// A clean model window and its corrupted counterpart.
#[derive(Clone, Debug)]
pub struct View {
    pub index: usize,
    pub clean: Tensor,
    pub corrupted: Corrupted,
}

pub fn views(cfg: &ModelConfig, dataset: &Dataset, indices: &[usize], snr_db: f64, mask_ratio: f64, seed: u64) -> Result<Vec<View>> {
    let clean = windows(dataset, indices, cfg)?;
    indices
        .par_iter()
        .zip(clean)
        .map(|(&index, clean)| {
            let spec = eval_spec(snr_db, mask_ratio, seed, index);
            spec.validate()?;
            let corrupted = corrupt(&clean, &spec, cfg.patches_per_channel)?;
            Ok(View { index, clean, corrupted })
        })
        .collect()
}

/// Eval-mode latents of the corrupted views.
pub fn latents(model: &PaeModel, views: &[View]) -> Result<Vec<Vec<f64>>> {
    views
        .par_iter()
        .map(|v| Ok(model.encode(&v.corrupted.input, &v.corrupted.mask)?.latent.0))
        .collect()
}

/// Eval-mode reconstructions of the corrupted views.
pub fn reconstructions(model: &PaeModel, views: &[View]) -> Result<Vec<Tensor>> {
    views
        .par_iter()
        .map(|v| {
            let enc = model.encode(&v.corrupted.input, &v.corrupted.mask)?;
            model.decode(&enc)
        })
        .collect()
}

pub fn samples(dataset: &Dataset, indices: &[usize], features: Vec<Vec<f64>>) -> Result<Samples> {
    let labels = indices.iter().map(|&i| dataset.transients[i].break_location.class_index()).collect();
    let sizes = indices.iter().map(|&i| dataset.transients[i].break_size_cm).collect();
    Samples::new(features, labels, sizes)
}

/// Flattened normalized windows (no corruption) for every transient,
/// channel-major.
pub fn clean_features(cfg: &ModelConfig, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..dataset.len())
        .map(|i| Ok(fit_window(&dataset.normalized(i)?, cfg)?.into_data()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionQuality {
    /// Reconstruction vs clean, over masked patches only.
    pub masked_mse: f64,
    /// Zero fill vs clean over the same patches.
    pub zero_fill_mse: f64,
    /// Reconstruction vs clean over whole windows.
    pub recon_mse: f64,
    /// Corrupted input vs clean over whole windows.
    pub corrupted_mse: f64,
}

pub fn reconstruction_quality(model: &PaeModel, views: &[View]) -> Result<ReconstructionQuality> {
    let recon = reconstructions(model, views)?;
    let m = model.config.patches_per_channel;
    let (mut masked_se, mut zero_se, mut masked_n) = (0.0, 0.0, 0usize);
    let (mut recon_se, mut corrupt_se, mut total_n) = (0.0, 0.0, 0usize);
    for (v, r) in views.iter().zip(&recon) {
        let cp = patchify(&v.clean, m)?;
        let rp = patchify(r, m)?;
        for (row, _) in v.corrupted.mask.iter().enumerate().filter(|(_, &k)| k) {
            for (c, x) in cp.row(row).iter().zip(rp.row(row)) {
                masked_se += (c - x) * (c - x);
                zero_se += c * c;
            }
            masked_n += cp.cols();
        }
        for ((c, x), y) in v.clean.data().iter().zip(r.data()).zip(v.corrupted.input.data()) {
            recon_se += (c - x) * (c - x);
            corrupt_se += (c - y) * (c - y);
        }
        total_n += v.clean.len();
    }
    let masked_n = masked_n.max(1) as f64;
    Ok(ReconstructionQuality {
        masked_mse: masked_se / masked_n,
        zero_fill_mse: zero_se / masked_n,
        recon_mse: recon_se / total_n as f64,
        corrupted_mse: corrupt_se / total_n as f64,
    })
}

pub fn split_indices(dataset: &Dataset) -> (Vec<usize>, Vec<usize>) {
    (dataset.indices(Split::Train), dataset.indices(Split::Test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub snr_db: f64,
    /// Mask ratio for the inpainting score.
    pub inpaint_mask: f64,
    /// Mask ratio for denoising, diagnosis and the embeddings.
    pub mask: f64,
    pub seed: u64,
    pub head: HeadConfig,
    pub knn_k: usize,
    pub tsne: EmbeddingConfig,
    pub purity_k: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            snr_db: 35.0,
            inpaint_mask: 0.2,
            mask: 0.1,
            seed: 0,
            head: HeadConfig::default(),
            knn_k: 5,
            tsne: EmbeddingConfig::default(),
            purity_k: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Purity {
    pub clean: f64,
    pub corrupted: f64,
    pub latent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub inpainting: ReconstructionQuality,
    pub denoising: ReconstructionQuality,
    pub two_stage: EvalReport,
    pub end_to_end: EvalReport,
    pub knn: EvalReport,
    pub purity: Purity,
}

fn flatten(views: &[View]) -> Vec<Vec<f64>> {
    views.iter().map(|v| v.corrupted.input.data().to_vec()).collect()
}

/// Break-location purity of a 2-D embedding of `features`.
pub fn embedding_purity(dataset: &Dataset, features: &[Vec<f64>], tsne: &EmbeddingConfig, k: usize) -> Result<f64> {
    let labels: Vec<usize> = dataset.transients.iter().map(|t| t.break_location.class_index()).collect();
    let emb = tsne_embed(features, tsne)?;
    knn_purity(&emb.coords, &labels, k)
}

/// Every quality score of a trained model on one dataset: reconstruction on
/// the test split, two-stage vs end-to-end vs k-NN diagnosis on identical
/// corrupted inputs, and t-SNE purity over all transients.
pub fn evaluate(model: &PaeModel, dataset: &Dataset, s: &EvalSettings) -> Result<EvalSummary> {
    let cfg = &model.config;
    let (train, test) = split_indices(dataset);
    let inpainting = reconstruction_quality(model, &views(cfg, dataset, &test, s.snr_db, s.inpaint_mask, s.seed)?)?;

    let all: Vec<usize> = (0..dataset.len()).collect();
    let all_views = views(cfg, dataset, &all, s.snr_db, s.mask, s.seed)?;
    let test_views: Vec<View> = test.iter().map(|&i| all_views[i].clone()).collect();
    let denoising = reconstruction_quality(model, &test_views)?;

    let z = latents(model, &all_views)?;
    let raw = flatten(&all_views);
    let pick = |f: &[Vec<f64>], idx: &[usize]| idx.iter().map(|&i| f[i].clone()).collect::<Vec<_>>();
    let info = CorruptionInfo {
        snr_db: s.snr_db,
        mask_ratio: s.mask,
    };
    let z_train = samples(dataset, &train, pick(&z, &train))?;
    let z_test = samples(dataset, &test, pick(&z, &test))?;
    let two_stage = diagnosis::two_stage(&z_train, &z_test, &s.head, info)?;
    let knn = diagnosis::knn_baseline(&z_train, &z_test, s.knn_k, info)?;
    let end_to_end = diagnosis::end_to_end_baseline(
        &samples(dataset, &train, pick(&raw, &train))?,
        &samples(dataset, &test, pick(&raw, &test))?,
        &s.head,
        info,
    )?;

    let purity = Purity {
        clean: embedding_purity(dataset, &clean_features(cfg, dataset)?, &s.tsne, s.purity_k)?,
        corrupted: embedding_purity(dataset, &raw, &s.tsne, s.purity_k)?,
        latent: embedding_purity(dataset, &z, &s.tsne, s.purity_k)?,
    };
    Ok(EvalSummary {
        inpainting,
        denoising,
        two_stage,
        end_to_end,
        knn,
        purity,
    })
}
