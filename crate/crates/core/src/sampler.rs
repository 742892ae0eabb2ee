//! Identity-balanced P×K batch sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PkBatchSpec {
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity.
    pub k: usize,
}

impl Default for PkBatchSpec {
    fn default() -> Self {
        Self { p: 16, k: 4 }
    }
}

impl PkBatchSpec {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.p < 2 {
            v.push(format!("P must be >= 2 (got {})", self.p));
        }
        if self.k < 2 {
            v.push(format!("K must be >= 2 (got {})", self.k));
        }
        v
    }
}

/// Sample indices grouped by identity; identity `i` owns `groups[i]`.
#[derive(Debug, Clone)]
pub struct PkSampler {
    spec: PkBatchSpec,
    groups: Vec<Vec<usize>>,
}

impl PkSampler {
    /// `labels[j]` is the identity of sample `j`. Identities with no samples
    /// are ignored.
    pub fn new(labels: &[usize], spec: PkBatchSpec) -> Result<Self> {
        let problems = spec.violations();
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems.join("; ")));
        }
        let n_ids = labels.iter().max().map_or(0, |&m| m + 1);
        let mut groups = vec![Vec::new(); n_ids];
        for (j, &y) in labels.iter().enumerate() {
            groups[y].push(j);
        }
        groups.retain(|g| !g.is_empty());
        if groups.len() < spec.p {
            return Err(Error::InvalidConfig(format!(
                "P = {} identities per batch but the dataset has only {}",
                spec.p,
                groups.len()
            )));
        }
        Ok(Self { spec, groups })
    }

    pub fn spec(&self) -> PkBatchSpec {
        self.spec
    }

    /// K samples of one identity: without replacement when it has at least K,
    /// with replacement otherwise.
    fn draw_k(&self, group: &[usize], rng: &mut RngState) -> Vec<usize> {
        let k = self.spec.k;
        if group.len() >= k {
            let mut g = group.to_vec();
            rng.shuffle(&mut g);
            g.truncate(k);
            g
        } else {
            (0..k).map(|_| group[rng.below(group.len())]).collect()
        }
    }

    /// One batch of P random distinct identities with K samples each.
    pub fn sample(&self, rng: &mut RngState) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.groups.len()).collect();
        rng.shuffle(&mut ids);
        ids[..self.spec.p].iter().flat_map(|&g| self.draw_k(&self.groups[g], rng)).collect()
    }

    /// One epoch of batches. Each identity's samples are shuffled and cut
    /// into K-sized chunks (a single with-replacement chunk when it has fewer
    /// than K); batches take one chunk from each of P distinct identities
    /// until every chunk is used, so every identity appears at least once.
    /// The final batches are topped up with random other identities when
    /// fewer than P still have chunks.
    pub fn epoch(&self, rng: &mut RngState) -> Vec<Vec<usize>> {
        let k = self.spec.k;
        let mut chunks: Vec<Vec<Vec<usize>>> = self
            .groups
            .iter()
            .map(|g| {
                if g.len() < k {
                    vec![self.draw_k(g, rng)]
                } else {
                    let mut s = g.clone();
                    rng.shuffle(&mut s);
                    s.chunks_exact(k).map(<[usize]>::to_vec).collect()
                }
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut available: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].is_empty()).collect();
            if available.is_empty() {
                break;
            }
            rng.shuffle(&mut available);
            let chosen: Vec<usize> = available.into_iter().take(self.spec.p).collect();
            if chosen.len() < self.spec.p {
                let mut others: Vec<usize> = (0..chunks.len()).filter(|i| !chosen.contains(i)).collect();
                rng.shuffle(&mut others);
                let need = self.spec.p - chosen.len();
                let fill: Vec<usize> = others.into_iter().take(need).collect();
                let mut batch: Vec<usize> =
                    chosen.iter().flat_map(|&i| chunks[i].pop().expect("available")).collect();
                for i in fill {
                    batch.extend(self.draw_k(&self.groups[i], rng));
                }
                batches.push(batch);
                continue;
            }
            batches.push(chosen.iter().flat_map(|&i| chunks[i].pop().expect("available")).collect());
        }
        batches
    }
}
