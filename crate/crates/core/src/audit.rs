//! Two-step dataset audit: latent similarity screening against a known
//! target, then the target-free encoder-decoder examination that flags any
//! sample whose reconstruction distance clears a threshold.

use serde::{Deserialize, Serialize};

use crate::codec::Autoencoder;
use crate::diffcore::Tensor;
use crate::distances::{d1, d2};
use crate::error::{Error, Result};
use crate::par;

/// One dataset member with a stable identifier for reports.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor) -> Self {
        Sample { id: id.into(), image }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScreenEntry {
    pub id: String,
    /// d2 between the sample latent and the target latent.
    pub distance: f64,
    /// distance <= gamma2
    pub suspect: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScreenReport {
    pub gamma2: f64,
    pub entries: Vec<ScreenEntry>,
}

impl ScreenReport {
    pub fn suspects(&self) -> impl Iterator<Item = &ScreenEntry> {
        self.entries.iter().filter(|e| e.suspect)
    }
}

/// Flags every sample whose latent sits within `gamma2` of the target's.
/// Report order equals dataset order.
pub fn feature_screen(
    ae: &Autoencoder,
    x_c: &Tensor,
    dataset: &[Sample],
    gamma2: f64,
) -> Result<ScreenReport> {
    if dataset.is_empty() {
        return Err(Error::contract("screen dataset is empty".to_string()));
    }
    let z_c = ae.encode(x_c)?;
    let distances: Vec<Result<f64>> = par::map_slice(dataset, |s| {
        let z = ae.encode(&s.image)?;
        d2(&z_c, &z)
    });
    let mut entries = Vec::with_capacity(dataset.len());
    for (s, dist) in dataset.iter().zip(distances) {
        let distance = dist?;
        entries.push(ScreenEntry { id: s.id.clone(), distance, suspect: distance <= gamma2 });
    }
    Ok(ScreenReport { gamma2, entries })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExamEntry {
    pub id: String,
    /// Reconstruction loss d1(D(E(x)), x).
    pub loss: f64,
    /// loss >= zeta (ties resolve to disguise).
    pub is_disguise: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExamReport {
    pub zeta: f64,
    pub entries: Vec<ExamEntry>,
}

/// Exam report plus the reconstructions, aligned with `report.entries`.
#[derive(Clone, Debug)]
pub struct ExamResult {
    pub report: ExamReport,
    pub recons: Vec<Tensor>,
}

/// Reconstructs every sample and applies the threshold rule. The decoded
/// images are returned for qualitative inspection: for a true disguise the
/// reconstruction drifts toward the hidden target rather than the sample.
pub fn encoder_decoder_exam(ae: &Autoencoder, samples: &[Sample], zeta: f64) -> Result<ExamResult> {
    if samples.is_empty() {
        return Err(Error::contract("exam dataset is empty".to_string()));
    }
    let per_sample: Vec<Result<(Tensor, f64)>> = par::map_slice(samples, |s| {
        let recon = ae.reconstruct(&s.image)?;
        let loss = d1(&recon, &s.image)?;
        Ok((recon, loss))
    });
    let mut entries = Vec::with_capacity(samples.len());
    let mut recons = Vec::with_capacity(samples.len());
    for (s, r) in samples.iter().zip(per_sample) {
        let (recon, loss) = r?;
        entries.push(ExamEntry { id: s.id.clone(), loss, is_disguise: loss >= zeta });
        recons.push(recon);
    }
    Ok(ExamResult { report: ExamReport { zeta, entries }, recons })
}

/// Threshold that admits every calibration disguise: the minimum of their
/// reconstruction losses (zero false negatives by construction).
pub fn calibrate_threshold(disguise_losses: &[f64]) -> Result<f64> {
    if disguise_losses.is_empty() {
        return Err(Error::contract("cannot calibrate a threshold from zero disguises".to_string()));
    }
    if disguise_losses.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(Error::contract("reconstruction losses must be finite and non-negative".to_string()));
    }
    Ok(disguise_losses.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Probability that a random positive outscores a random negative, ties
/// counted half. Computed from average ranks; exact for the integer/half
/// rank arithmetic involved.
pub fn auroc(positive_scores: &[f64], negative_scores: &[f64]) -> Result<f64> {
    if positive_scores.is_empty() || negative_scores.is_empty() {
        return Err(Error::contract("auroc needs at least one score on each side".to_string()));
    }
    let np = positive_scores.len();
    let nn = negative_scores.len();
    let mut all: Vec<(f64, bool)> = positive_scores
        .iter()
        .map(|&s| (s, true))
        .chain(negative_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Average 1-based rank of the tied run [i, j).
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (np * (np + 1)) as f64 / 2.0;
    Ok(u / (np as f64 * nn as f64))
}

/// Quadratic reference for `auroc`: counts every (positive, negative) pair.
pub fn auroc_pairwise(positive_scores: &[f64], negative_scores: &[f64]) -> Result<f64> {
    if positive_scores.is_empty() || negative_scores.is_empty() {
        return Err(Error::contract("auroc needs at least one score on each side".to_string()));
    }
    let mut twice_wins = 0u64;
    for &p in positive_scores {
        for &n in negative_scores {
            if p > n {
                twice_wins += 2;
            } else if p == n {
                twice_wins += 1;
            }
        }
    }
    Ok(twice_wins as f64 / (2.0 * positive_scores.len() as f64 * negative_scores.len() as f64))
}

/// Fraction of clean losses at or above the threshold.
pub fn fpr(clean_losses: &[f64], zeta: f64) -> Result<f64> {
    if clean_losses.is_empty() {
        return Err(Error::contract("fpr needs at least one clean loss".to_string()));
    }
    let fp = clean_losses.iter().filter(|&&l| l >= zeta).count();
    Ok(fp as f64 / clean_losses.len() as f64)
}

/// Reference screening threshold when the generation gamma2 is unknown:
/// the stated percentile (nearest-rank) of all pairwise latent distances
/// within a clean corpus.
pub fn clean_pair_gamma2(ae: &Autoencoder, corpus: &[Tensor], percentile: f64) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::contract("gamma2 calibration needs at least two clean images".to_string()));
    }
    if !(0.0 < percentile && percentile <= 100.0) {
        return Err(Error::contract(format!("percentile {percentile} outside (0, 100]")));
    }
    let latents: Vec<Result<Tensor>> = par::map_slice(corpus, |x| ae.encode(x));
    let latents: Vec<Tensor> = latents.into_iter().collect::<Result<_>>()?;
    let mut dists = Vec::with_capacity(corpus.len() * (corpus.len() - 1) / 2);
    for i in 0..latents.len() {
        for j in i + 1..latents.len() {
            dists.push(d2(&latents[i], &latents[j])?);
        }
    }
    dists.sort_by(f64::total_cmp);
    let k = ((percentile / 100.0 * dists.len() as f64).ceil() as usize).max(1);
    Ok(dists[k - 1])
}

/// The quantitative summary the examination reports: mean losses per class,
/// the threshold, error counts/rates and the ranking quality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n_disguise: usize,
    pub n_clean: usize,
    pub mean_disguise_loss: f64,
    pub mean_clean_loss: f64,
    pub zeta: f64,
    pub false_positive_count: usize,
    pub false_positive_rate: f64,
    pub false_negative_count: usize,
    pub false_negative_rate: f64,
    pub auroc: f64,
}

pub fn summarize(disguise_losses: &[f64], clean_losses: &[f64], zeta: f64) -> Result<MetricsSummary> {
    if disguise_losses.is_empty() || clean_losses.is_empty() {
        return Err(Error::contract("metrics need both disguise and clean losses".to_string()));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let fp = clean_losses.iter().filter(|&&l| l >= zeta).count();
    let fneg = disguise_losses.iter().filter(|&&l| l < zeta).count();
    Ok(MetricsSummary {
        n_disguise: disguise_losses.len(),
        n_clean: clean_losses.len(),
        mean_disguise_loss: mean(disguise_losses),
        mean_clean_loss: mean(clean_losses),
        zeta,
        false_positive_count: fp,
        false_positive_rate: fp as f64 / clean_losses.len() as f64,
        false_negative_count: fneg,
        false_negative_rate: fneg as f64 / disguise_losses.len() as f64,
        auroc: auroc(disguise_losses, clean_losses)?,
    })
}
