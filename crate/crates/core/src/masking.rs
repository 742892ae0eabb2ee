//! Subspace masks over center-embedding units.
//!
//! One mask is drawn per training step and shared by every sample in the
//! batch. Masked-out units simply drop out of the intra-class loss; there is
//! no activation rescaling.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{RngState, Vector};
use crate::losses::{CenterBank, EmbeddingBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Each unit kept independently with probability `p`.
    #[default]
    Bernoulli,
    /// `round(p·d)` units drawn without replacement, proportional to their
    /// intra-class distance.
    Weighted,
    /// The `round(p·d)` units with the largest intra-class distance.
    Hard,
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskStrategy::Bernoulli => "bernoulli",
            MaskStrategy::Weighted => "weighted",
            MaskStrategy::Hard => "hard",
        })
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bernoulli" => Ok(Self::Bernoulli),
            "weighted" => Ok(Self::Weighted),
            "hard" => Ok(Self::Hard),
            other => Err(format!("unknown mask strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Probability of keeping a unit (Bernoulli) or kept fraction (others).
    pub p: f64,
    pub strategy: MaskStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { p: 0.5, strategy: MaskStrategy::Bernoulli }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(invalid(format!("mask p must lie in [0, 1] (got {})", self.p)));
        }
        Ok(())
    }

    /// Number of active units for the fixed-cardinality strategies.
    pub fn active_units(&self, dim: usize) -> usize {
        ((self.p * dim as f64).round() as usize).min(dim)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspaceMask {
    bits: Vec<bool>,
    strategy: MaskStrategy,
}

impl SubspaceMask {
    pub fn from_bits(bits: Vec<bool>, strategy: MaskStrategy) -> Self {
        Self { bits, strategy }
    }

    pub fn ones(dim: usize) -> Self {
        Self::from_bits(vec![true; dim], MaskStrategy::Bernoulli)
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_bits(vec![false; dim], MaskStrategy::Bernoulli)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.strategy
    }
}

/// `u[k] = Σ_i (v_i[k] − c_{y_i}[k])²`.
pub fn per_unit_intra_dist(batch: &EmbeddingBatch, bank: &CenterBank) -> Result<Vector> {
    if batch.dim() != bank.dim() {
        return Err(invalid("per_unit_intra_dist: dimension mismatch"));
    }
    let d = bank.dim();
    let mut u = vec![0.0; d];
    for (i, &y) in batch.labels.iter().enumerate() {
        if y >= bank.num_classes() {
            return Err(invalid(format!("label {y} out of range")));
        }
        let v = batch.features.row(i);
        for k in 0..d {
            let diff = v[k] - bank.weights.get(k, y);
            u[k] += diff * diff;
        }
    }
    Vector::new(u)
}

pub fn sample_bernoulli(cfg: &MaskConfig, dim: usize, rng: &mut RngState) -> SubspaceMask {
    let bits = (0..dim).map(|_| rng.bernoulli(cfg.p)).collect();
    SubspaceMask::from_bits(bits, MaskStrategy::Bernoulli)
}

fn check_weights(unit_dists: &Vector) -> Result<()> {
    if unit_dists.as_slice().iter().any(|&w| w < 0.0) {
        return Err(invalid("unit distances must be non-negative"));
    }
    Ok(())
}

/// Sequential weighted draws without replacement. When the remaining weight
/// mass is zero the draw is uniform over the remaining units.
pub fn sample_weighted(
    cfg: &MaskConfig,
    unit_dists: &Vector,
    rng: &mut RngState,
) -> Result<SubspaceMask> {
    check_weights(unit_dists)?;
    let d = unit_dists.dim();
    let target = cfg.active_units(d);
    let mut bits = vec![false; d];
    let mut remaining: Vec<usize> = (0..d).collect();
    for _ in 0..target {
        let mass: f64 = remaining.iter().map(|&k| unit_dists[k]).sum();
        let pick = if mass > 0.0 {
            let mut r = rng.uniform() * mass;
            let mut chosen = None;
            for (pos, &k) in remaining.iter().enumerate() {
                let w = unit_dists[k];
                if w > 0.0 {
                    chosen = Some(pos);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            chosen.expect("positive mass implies a positive weight")
        } else {
            rng.below(remaining.len())
        };
        bits[remaining.remove(pick)] = true;
    }
    Ok(SubspaceMask::from_bits(bits, MaskStrategy::Weighted))
}

/// Keeps the `round(p·d)` largest units; ties go to the lower index.
pub fn sample_hard(cfg: &MaskConfig, unit_dists: &Vector) -> Result<SubspaceMask> {
    check_weights(unit_dists)?;
    let d = unit_dists.dim();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| unit_dists[b].total_cmp(&unit_dists[a]).then(a.cmp(&b)));
    let mut bits = vec![false; d];
    for &k in order.iter().take(cfg.active_units(d)) {
        bits[k] = true;
    }
    Ok(SubspaceMask::from_bits(bits, MaskStrategy::Hard))
}

/// Draws the mask for one training step under `cfg.strategy`.
pub fn draw_mask(
    cfg: &MaskConfig,
    batch: &EmbeddingBatch,
    bank: &CenterBank,
    rng: &mut RngState,
) -> Result<SubspaceMask> {
    match cfg.strategy {
        MaskStrategy::Bernoulli => Ok(sample_bernoulli(cfg, bank.dim(), rng)),
        MaskStrategy::Weighted => sample_weighted(cfg, &per_unit_intra_dist(batch, bank)?, rng),
        MaskStrategy::Hard => sample_hard(cfg, &per_unit_intra_dist(batch, bank)?),
    }
}
