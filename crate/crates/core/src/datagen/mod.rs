//! Deterministic synthetic loss-of-coolant transients.
//!
//! Each transient is a 38-channel window sampled twice per second for
//! 100 s after break initiation. Channels follow saturating-exponential
//! responses whose speed scales with break size and whose amplitude and
//! onset depend on the break location.

mod io;
mod templates;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{read_dataset, read_manifest, write_dataset, Manifest, TransientRecord, SCHEMA_VERSION};
pub use templates::{channel_names, ChannelTemplate, CHANNELS, TEMPLATES, TEMPLATE_VERSION};

use crate::error::{PaeError, Result};
use crate::numerics::Tensor;
use crate::rng;

pub const SAMPLES: usize = 200;
pub const SAMPLE_PERIOD_S: f64 = 0.5;
pub const MIN_BREAK_CM: f64 = 0.1;
pub const MAX_BREAK_CM: f64 = 35.5;
pub const STD_FLOOR: f64 = 1e-8;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakLocation {
    ColdLeg,
    HotLeg,
}

impl BreakLocation {
    pub fn class_index(self) -> usize {
        match self {
            BreakLocation::ColdLeg => 0,
            BreakLocation::HotLeg => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Self {
        if i == 0 {
            BreakLocation::ColdLeg
        } else {
            BreakLocation::HotLeg
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BreakLocation::ColdLeg => "cold_leg",
            BreakLocation::HotLeg => "hot_leg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cold_leg" => Some(BreakLocation::ColdLeg),
            "hot_leg" => Some(BreakLocation::HotLeg),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transient {
    pub id: String,
    /// `[38 × 200]`, raw units.
    pub channels: Tensor,
    pub break_location: BreakLocation,
    pub break_size_cm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub transients: Vec<Transient>,
    pub split: Vec<Split>,
    pub channel_stats: ChannelStats,
}

/// Saturating response `1 − exp(−max(t, 0)/τ)`.
pub fn response(t: f64, tau: f64) -> f64 {
    1.0 - (-(t.max(0.0)) / tau).exp()
}

pub fn time_constant(template: &ChannelTemplate, size_cm: f64) -> f64 {
    template.time_constant_ref * (MAX_BREAK_CM / size_cm)
}

fn check_size(size_cm: f64) -> Result<()> {
    if !(MIN_BREAK_CM..=MAX_BREAK_CM).contains(&size_cm) {
        return Err(PaeError::Parameter(format!(
            "break size {size_cm} cm outside [{MIN_BREAK_CM}, {MAX_BREAK_CM}]"
        )));
    }
    Ok(())
}

/// Noise-free value of one channel at time `t` seconds after the break.
pub fn channel_value(template: &ChannelTemplate, location: BreakLocation, size_cm: f64, t: f64) -> f64 {
    let (amp, delay) = match location {
        BreakLocation::ColdLeg => (template.amplitude_cold, template.delay_cold),
        BreakLocation::HotLeg => (template.amplitude_hot, template.delay_hot),
    };
    template.baseline + amp * response(t - delay, time_constant(template, size_cm))
}

pub fn generate_transient(
    id: impl Into<String>,
    location: BreakLocation,
    size_cm: f64,
    seed: u64,
    templates: &[ChannelTemplate],
) -> Result<Transient> {
    check_size(size_cm)?;
    let mut noise = rng::stream(seed);
    let mut data = Vec::with_capacity(templates.len() * SAMPLES);
    for tpl in templates {
        for n in 0..SAMPLES {
            let t = n as f64 * SAMPLE_PERIOD_S;
            data.push(channel_value(tpl, location, size_cm, t) + tpl.noise_floor * rng::normal(&mut noise));
        }
    }
    Ok(Transient {
        id: id.into(),
        channels: Tensor::matrix(templates.len(), SAMPLES, data)?,
        break_location: location,
        break_size_cm: size_cm,
    })
}

/// Log-uniform draw over the break-size range.
fn draw_size<R: Rng>(rng: &mut R) -> f64 {
    let (lo, hi) = (MIN_BREAK_CM.ln(), MAX_BREAK_CM.ln());
    (lo + (hi - lo) * rng.random::<f64>()).exp().clamp(MIN_BREAK_CM, MAX_BREAK_CM)
}

pub fn transient_id(index: usize) -> String {
    format!("T{index:04}")
}

/// Generates `count` transients with alternating break locations and
/// log-uniform sizes, a location-stratified 80/20 split, and training-split
/// channel statistics.
pub fn generate_dataset(count: usize, seed: u64) -> Result<Dataset> {
    if count < 2 {
        return Err(PaeError::Parameter(format!("need at least 2 transients, got {count}")));
    }
    let transients = (0..count)
        .into_par_iter()
        .map(|k| {
            let location = if k % 2 == 0 {
                BreakLocation::ColdLeg
            } else {
                BreakLocation::HotLeg
            };
            let size = draw_size(&mut rng::substream(seed, &[1, k as u64]));
            generate_transient(transient_id(k), location, size, rng::derive(seed, &[2, k as u64]), &TEMPLATES)
        })
        .collect::<Result<Vec<_>>>()?;
    let split = stratified_split(&transients, seed);
    let channel_stats = ChannelStats::from_split(&transients, &split);
    Ok(Dataset {
        seed,
        transients,
        split,
        channel_stats,
    })
}

fn stratified_split(transients: &[Transient], seed: u64) -> Vec<Split> {
    let mut split = vec![Split::Test; transients.len()];
    let mut shuffle = rng::substream(seed, &[3]);
    for location in [BreakLocation::ColdLeg, BreakLocation::HotLeg] {
        let mut members: Vec<usize> = (0..transients.len())
            .filter(|&i| transients[i].break_location == location)
            .collect();
        members.shuffle(&mut shuffle);
        let n_train = (members.len() as f64 * TRAIN_FRACTION).round() as usize;
        for &i in &members[..n_train] {
            split[i] = Split::Train;
        }
    }
    split
}

impl ChannelStats {
    /// Per-channel mean and population standard deviation over every sample
    /// of every training transient.
    pub fn from_split(transients: &[Transient], split: &[Split]) -> Self {
        let train: Vec<&Transient> = transients
            .iter()
            .zip(split)
            .filter(|(_, s)| **s == Split::Train)
            .map(|(t, _)| t)
            .collect();
        let channels = transients.first().map_or(0, |t| t.channels.rows());
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for c in 0..channels {
            let n = (train.len() * train.first().map_or(0, |t| t.channels.cols())) as f64;
            let m = train.iter().flat_map(|t| t.channels.row(c)).sum::<f64>() / n;
            let var = train
                .iter()
                .flat_map(|t| t.channels.row(c))
                .map(|v| (v - m) * (v - m))
                .sum::<f64>()
                / n;
            mean[c] = m;
            std[c] = var.sqrt().max(STD_FLOOR);
        }
        Self { mean, std }
    }

    fn floored(&self, c: usize) -> f64 {
        self.std[c].max(STD_FLOOR)
    }
}

/// Per-channel z-score.
pub fn normalize(x: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    if x.rows() != stats.mean.len() {
        return Err(PaeError::shape("normalize", x.shape(), &[stats.mean.len()]));
    }
    let mut out = x.clone();
    for c in 0..x.rows() {
        let (m, s) = (stats.mean[c], stats.floored(c));
        out.row_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

pub fn denormalize(z: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    if z.rows() != stats.mean.len() {
        return Err(PaeError::shape("denormalize", z.shape(), &[stats.mean.len()]));
    }
    let mut out = z.clone();
    for c in 0..z.rows() {
        let (m, s) = (stats.mean[c], stats.floored(c));
        out.row_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
    }
    Ok(out)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transients.is_empty()
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn normalized(&self, index: usize) -> Result<Tensor> {
        normalize(&self.transients[index].channels, &self.channel_stats)
    }

    pub fn location_counts(&self) -> (usize, usize) {
        let cold = self
            .transients
            .iter()
            .filter(|t| t.break_location == BreakLocation::ColdLeg)
            .count();
        (cold, self.len() - cold)
    }
}
