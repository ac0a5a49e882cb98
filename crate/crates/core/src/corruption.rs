//! Additive per-channel Gaussian noise at a target SNR and whole-patch zero
//! masking. Noise is applied first; masked patches read exactly zero.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PaeError, Result};
use crate::model::{depatchify, patchify};
use crate::numerics::Tensor;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub snr_db: f64,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(snr_db: f64, mask_ratio: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            snr_db,
            mask_ratio,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(PaeError::Parameter(format!(
                "mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.snr_db.is_nan() {
            return Err(PaeError::Parameter("snr_db is NaN".into()));
        }
        Ok(())
    }
}

/// Noise standard deviation giving `snr_db` against a signal of mean power
/// `power`.
pub fn noise_std(power: f64, snr_db: f64) -> f64 {
    (power / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Adds independent Gaussian noise to every channel (row), scaled so the
/// channel's mean-square power over the window sits `snr_db` above the noise.
pub fn add_noise<R: Rng + ?Sized>(x: &Tensor, snr_db: f64, rng: &mut R) -> Tensor {
    let mut out = x.clone();
    for c in 0..x.rows() {
        let row = out.row_mut(c);
        let power = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        if power == 0.0 {
            continue;
        }
        let sigma = noise_std(power, snr_db);
        for v in row.iter_mut() {
            *v += sigma * rng::normal(rng);
        }
    }
    out
}

pub fn masked_count(patches: usize, mask_ratio: f64) -> usize {
    ((mask_ratio * patches as f64).round() as usize).min(patches)
}

/// Zeroes `round(mask_ratio · N)` patch rows chosen uniformly without
/// replacement. `xp` must not contain the class token.
pub fn mask_patches<R: Rng + ?Sized>(xp: &Tensor, mask_ratio: f64, rng: &mut R) -> Result<(Tensor, Vec<bool>)> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(PaeError::Parameter(format!("mask_ratio must lie in [0, 1), got {mask_ratio}")));
    }
    let n = xp.rows();
    let mut mask = vec![false; n];
    let mut out = xp.clone();
    for r in index::sample(rng, n, masked_count(n, mask_ratio)) {
        mask[r] = true;
        out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
    }
    Ok((out, mask))
}

/// A corrupted window in channel layout plus its patch mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Corrupted {
    pub input: Tensor,
    pub mask: Vec<bool>,
}

/// Noise then patch masking of a normalized `[channels × samples]` window,
/// drawing from the stream seeded by `spec.seed`.
pub fn corrupt(x: &Tensor, spec: &CorruptionSpec, patches_per_channel: usize) -> Result<Corrupted> {
    spec.validate()?;
    let mut stream = rng::stream(spec.seed);
    let noisy = add_noise(x, spec.snr_db, &mut stream);
    let patches = patchify(&noisy, patches_per_channel)?;
    let (masked, mask) = mask_patches(&patches, spec.mask_ratio, &mut stream)?;
    Ok(Corrupted {
        input: depatchify(&masked, x.rows(), x.cols())?,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = stream(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng::normal(&mut r)).collect()).unwrap()
    }

    #[test]
    fn huge_snr_is_identity() {
        let x = random_matrix(38, 200, 1);
        let y = add_noise(&x, 300.0, &mut stream(2));
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn zero_channel_passes_through() {
        let mut x = random_matrix(3, 50, 4);
        x.row_mut(1).iter_mut().for_each(|v| *v = 0.0);
        let y = add_noise(&x, 10.0, &mut stream(5));
        assert!(y.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empirical_snr_matches_target() {
        // 10^4 channels, each one window long
        let x = random_matrix(10_000, 200, 6);
        let y = add_noise(&x, 35.0, &mut stream(7));
        let (mut ps, mut pn) = (0.0, 0.0);
        for (a, b) in x.data().iter().zip(y.data()) {
            ps += a * a;
            pn += (b - a) * (b - a);
        }
        let snr = 10.0 * (ps / pn).log10();
        assert!((snr - 35.0).abs() < 0.5, "measured {snr} dB");
    }

    #[test]
    fn noise_is_zero_mean() {
        let x = Tensor::filled(&[1, 100_000], 1.0);
        let y = add_noise(&x, 0.0, &mut stream(8));
        let mean = y.data().iter().map(|v| v - 1.0).sum::<f64>() / 1e5;
        // sigma = 1 at 0 dB against unit power
        assert!(mean.abs() < 4.0 / (1e5f64).sqrt());
    }

    #[test]
    fn mask_counts() {
        let xp = random_matrix(190, 40, 9);
        let (same, none) = mask_patches(&xp, 0.0, &mut stream(1)).unwrap();
        assert_eq!(same, xp);
        assert!(none.iter().all(|&m| !m));

        let (masked, mask) = mask_patches(&xp, 0.40, &mut stream(1)).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 76);
        for r in 0..190 {
            if mask[r] {
                assert!(masked.row(r).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(masked.row(r), xp.row(r));
            }
        }
        let (_, again) = mask_patches(&xp, 0.40, &mut stream(1)).unwrap();
        assert_eq!(mask, again);
        assert!(mask_patches(&xp, 1.0, &mut stream(1)).is_err());
    }

    #[test]
    fn masked_regions_are_exactly_zero_after_noise() {
        let x = random_matrix(38, 200, 10);
        let spec = CorruptionSpec::new(20.0, 0.25, 3).unwrap();
        let c = corrupt(&x, &spec, 5).unwrap();
        assert_eq!(c.mask.iter().filter(|&&m| m).count(), 48);
        let patches = patchify(&c.input, 5).unwrap();
        for (r, &m) in c.mask.iter().enumerate() {
            let row = patches.row(r);
            if m {
                assert!(row.iter().all(|&v| v == 0.0));
            } else {
                assert!(row.iter().any(|&v| v != 0.0));
            }
        }
    }
}
