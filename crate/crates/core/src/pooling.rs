//! Dual-pooling head: average- and max-pooled branches, each supervised by
//! its own batch-hard triplet loss, fused by element-wise averaging.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{Matrix, Vector};
use crate::losses::{triplet_batch_hard, EmbeddingBatch, LossReport};

/// A `channels × height × width` activation tensor, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height * width == 0 {
            return Err(invalid("feature map dimensions must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(invalid(format!(
                "feature map {channels}x{height}x{width} given {} values",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("feature map has non-finite entries"));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self { data: vec![0.0; self.data.len()], ..*self }
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.spatial();
        &self.data[c * s..(c + 1) * s]
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let s = self.spatial();
        &mut self.data[c * s..(c + 1) * s]
    }
}

pub fn avg_pool(fm: &FeatureMap) -> Vector {
    let n = fm.spatial() as f64;
    let v = (0..fm.channels).map(|c| fm.channel(c).iter().sum::<f64>() / n).collect();
    Vector::new(v).expect("finite map pools to finite vector")
}

pub fn avg_pool_backward(fm: &FeatureMap, upstream: &[f64]) -> FeatureMap {
    let mut g = fm.zeros_like();
    let n = fm.spatial() as f64;
    for (c, &u) in upstream.iter().enumerate() {
        g.channel_mut(c).iter_mut().for_each(|x| *x = u / n);
    }
    g
}

/// Per-channel spatial max and the flat spatial index it came from. Ties
/// resolve to the lowest row-major index.
pub fn max_pool(fm: &FeatureMap) -> (Vector, Vec<usize>) {
    let (vals, idx) = (0..fm.channels)
        .map(|c| {
            let ch = fm.channel(c);
            let mut best = 0;
            for (i, &x) in ch.iter().enumerate() {
                if x > ch[best] {
                    best = i;
                }
            }
            (ch[best], best)
        })
        .unzip();
    (Vector::new(vals).expect("finite map pools to finite vector"), idx)
}

pub fn max_pool_backward(fm: &FeatureMap, argmax: &[usize], upstream: &[f64]) -> FeatureMap {
    let mut g = fm.zeros_like();
    for (c, (&u, &at)) in upstream.iter().zip(argmax).enumerate() {
        g.channel_mut(c)[at] = u;
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledPair {
    pub v_ap: Vector,
    pub v_mp: Vector,
    pub argmax_indices: Vec<usize>,
}

impl PooledPair {
    pub fn from_map(fm: &FeatureMap) -> Self {
        let (v_mp, argmax_indices) = max_pool(fm);
        Self { v_ap: avg_pool(fm), v_mp, argmax_indices }
    }
}

/// `(v_ap + v_mp) / 2`.
pub fn fuse(v_ap: &[f64], v_mp: &[f64]) -> Result<Vec<f64>> {
    if v_ap.len() != v_mp.len() {
        return Err(invalid(format!(
            "cannot fuse branches of dims {} and {}",
            v_ap.len(),
            v_mp.len()
        )));
    }
    Ok(v_ap.iter().zip(v_mp).map(|(a, m)| (a + m) / 2.0).collect())
}

/// Splits an upstream gradient evenly between the two branches.
pub fn fuse_backward(upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let half: Vec<f64> = upstream.iter().map(|g| g * 0.5).collect();
    (half.clone(), half)
}

/// Forward state of the head for one batch.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub pooled_ap: Matrix,
    pub pooled_mp: Matrix,
    argmax: Vec<Vec<usize>>,
    ap_maps: Vec<FeatureMap>,
    mp_maps: Vec<FeatureMap>,
    pub triplet_ap: LossReport,
    pub triplet_mp: LossReport,
    /// Element-wise average of the two branches, one row per sample.
    pub fused: EmbeddingBatch,
}

/// Runs the head with separate inputs for the average and max branches.
/// Passing the same maps twice gives the shared-pathway head.
pub fn head_forward(
    ap_maps: &[FeatureMap],
    mp_maps: &[FeatureMap],
    labels: &[usize],
    margin: f64,
) -> Result<HeadForward> {
    if ap_maps.is_empty() || ap_maps.len() != mp_maps.len() || ap_maps.len() != labels.len() {
        return Err(invalid("head: map and label counts must agree and be non-zero"));
    }
    let c = ap_maps[0].channels;
    if ap_maps.iter().chain(mp_maps).any(|m| m.channels != c) {
        return Err(invalid("head: all maps must have the same channel count"));
    }
    let b = ap_maps.len();
    let mut pooled_ap = Matrix::zeros(b, c);
    let mut pooled_mp = Matrix::zeros(b, c);
    let mut fused = Matrix::zeros(b, c);
    let mut argmax = Vec::with_capacity(b);
    for i in 0..b {
        let ap = avg_pool(&ap_maps[i]);
        let (mp, idx) = max_pool(&mp_maps[i]);
        pooled_ap.row_mut(i).copy_from_slice(ap.as_slice());
        pooled_mp.row_mut(i).copy_from_slice(mp.as_slice());
        fused.row_mut(i).copy_from_slice(&fuse(ap.as_slice(), mp.as_slice())?);
        argmax.push(idx);
    }
    let ap_batch = EmbeddingBatch::new(pooled_ap.clone(), labels.to_vec())?;
    let mp_batch = EmbeddingBatch::new(pooled_mp.clone(), labels.to_vec())?;
    let triplet_ap = triplet_batch_hard(&ap_batch, margin)?;
    let triplet_mp = triplet_batch_hard(&mp_batch, margin)?;
    Ok(HeadForward {
        pooled_ap,
        pooled_mp,
        argmax,
        ap_maps: ap_maps.to_vec(),
        mp_maps: mp_maps.to_vec(),
        triplet_ap,
        triplet_mp,
        fused: EmbeddingBatch::new(fused, labels.to_vec())?,
    })
}

/// Shared-pathway head over a single set of maps.
pub fn head_losses(maps: &[FeatureMap], labels: &[usize], margin: f64) -> Result<HeadForward> {
    head_forward(maps, maps, labels, margin)
}

impl HeadForward {
    /// Weighted sum of the two branch triplet losses.
    pub fn branch_loss(&self, branch_weight: f64) -> f64 {
        branch_weight * (self.triplet_ap.value + self.triplet_mp.value)
    }

    /// Gradients into the average-branch and max-branch maps, combining the
    /// branch triplet losses (scaled by `branch_weight`) with `grad_fused`
    /// flowing back from whatever consumed the fused embeddings.
    pub fn backward(
        &self,
        branch_weight: f64,
        grad_fused: Option<&Matrix>,
    ) -> (Vec<FeatureMap>, Vec<FeatureMap>) {
        let b = self.fused.len();
        let c = self.fused.dim();
        let tap = self.triplet_ap.grad_features.as_ref().expect("triplet grads");
        let tmp = self.triplet_mp.grad_features.as_ref().expect("triplet grads");
        let mut gap = vec![0.0; c];
        let mut gmp = vec![0.0; c];
        let mut out_ap = Vec::with_capacity(b);
        let mut out_mp = Vec::with_capacity(b);
        for i in 0..b {
            for ch in 0..c {
                gap[ch] = branch_weight * tap.get(i, ch);
                gmp[ch] = branch_weight * tmp.get(i, ch);
            }
            if let Some(g) = grad_fused {
                let (ha, hm) = fuse_backward(g.row(i));
                for ch in 0..c {
                    gap[ch] += ha[ch];
                    gmp[ch] += hm[ch];
                }
            }
            out_ap.push(avg_pool_backward(&self.ap_maps[i], &gap));
            out_mp.push(max_pool_backward(&self.mp_maps[i], &self.argmax[i], &gmp));
        }
        (out_ap, out_mp)
    }

    /// [`HeadForward::backward`] for the shared-pathway head: both branch
    /// gradients land on the same maps.
    pub fn backward_shared(&self, branch_weight: f64, grad_fused: Option<&Matrix>) -> Vec<FeatureMap> {
        let (mut ap, mp) = self.backward(branch_weight, grad_fused);
        for (a, m) in ap.iter_mut().zip(mp) {
            for (x, y) in a.data.iter_mut().zip(m.data) {
                *x += y;
            }
        }
        ap
    }
}
