//! Synthetic Gaussian-cluster datasets and their CSV form.
//!
//! CSV layout: header `id,camera,split,f_0,…,f_{D-1}`, one row per sample.
//! `camera` is empty when the dataset has no camera ids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::GallerySet;
use crate::linalg::{Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of samples around their class mean.
    pub cluster_spread: f64,
    /// Norm of every class mean; means point in random directions.
    pub separation: f64,
    pub query_fraction: f64,
    pub gallery_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 200,
            dim: 32,
            cluster_spread: 1.0,
            separation: 3.0,
            query_fraction: 0.1,
            gallery_fraction: 0.3,
        }
    }
}

impl SyntheticSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_classes < 2 {
            v.push("num_classes must be >= 2".to_string());
        }
        if self.samples_per_class < 3 {
            v.push("samples_per_class must be >= 3 (train, query and gallery each need one)".to_string());
        }
        if self.dim == 0 {
            v.push("dim must be positive".to_string());
        }
        if !(self.cluster_spread.is_finite() && self.cluster_spread >= 0.0) {
            v.push("cluster_spread must be finite and >= 0".to_string());
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            v.push("separation must be finite and >= 0".to_string());
        }
        let fracs_ok = (0.0..1.0).contains(&self.query_fraction)
            && (0.0..1.0).contains(&self.gallery_fraction)
            && self.query_fraction + self.gallery_fraction < 1.0;
        if !fracs_ok {
            v.push("query_fraction and gallery_fraction must be in [0, 1) and sum below 1".to_string());
        }
        v
    }

    /// `(query, gallery)` counts per class; train gets the rest. Each split
    /// gets at least one sample.
    fn split_counts(&self) -> (usize, usize) {
        let n = self.samples_per_class;
        let q = ((self.query_fraction * n as f64).round() as usize).clamp(1, n - 2);
        let g = ((self.gallery_fraction * n as f64).round() as usize).clamp(1, n - 1 - q);
        (q, g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub ids: Vec<usize>,
    pub cameras: Option<Vec<i64>>,
    pub splits: Vec<Split>,
}

/// Manifest written beside a generated CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub rows: usize,
    pub train: usize,
    pub query: usize,
    pub gallery: usize,
    /// Hidden ground-truth class means, one per identity.
    pub class_means: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Rows of one split as a gallery-style set.
    pub fn subset(&self, split: Split) -> Result<GallerySet> {
        let idx = self.indices(split);
        if idx.is_empty() {
            return Err(invalid(format!("dataset has no {} rows", split.as_str())));
        }
        let data = idx.iter().flat_map(|&i| self.features.row(i).to_vec()).collect();
        GallerySet::new(
            Matrix::new(idx.len(), self.dim(), data)?,
            idx.iter().map(|&i| self.ids[i]).collect(),
            self.cameras.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
        )
    }

    pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<(Self, Manifest)> {
        let problems = spec.violations();
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems.join("; ")));
        }
        let mut rng = RngState::new(seed);
        let class_means: Vec<Vec<f64>> = (0..spec.num_classes)
            .map(|_| {
                let g: Vec<f64> = (0..spec.dim).map(|_| rng.normal()).collect();
                let n = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                g.iter().map(|x| spec.separation * x / n).collect()
            })
            .collect();
        let (nq, ng) = spec.split_counts();
        let total = spec.num_classes * spec.samples_per_class;
        let mut data = Vec::with_capacity(total * spec.dim);
        let mut ids = Vec::with_capacity(total);
        let mut splits = Vec::with_capacity(total);
        for (c, mean) in class_means.iter().enumerate() {
            let mut roles: Vec<Split> = (0..spec.samples_per_class)
                .map(|j| match j {
                    j if j < nq => Split::Query,
                    j if j < nq + ng => Split::Gallery,
                    _ => Split::Train,
                })
                .collect();
            rng.shuffle(&mut roles);
            for role in roles {
                data.extend(mean.iter().map(|m| m + spec.cluster_spread * rng.normal()));
                ids.push(c);
                splits.push(role);
            }
        }
        let ds = Dataset { features: Matrix::new(total, spec.dim, data)?, ids, cameras: None, splits };
        let manifest = Manifest {
            spec: spec.clone(),
            seed,
            rows: total,
            train: ds.indices(Split::Train).len(),
            query: ds.indices(Split::Query).len(),
            gallery: ds.indices(Split::Gallery).len(),
            class_means,
        };
        Ok((ds, manifest))
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "camera".to_string(), "split".to_string()];
        header.extend((0..self.dim()).map(|k| format!("f_{k}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![
                self.ids[i].to_string(),
                self.cameras.as_ref().map_or(String::new(), |c| c[i].to_string()),
                self.splits[i].as_str().to_string(),
            ];
            rec.extend(self.features.row(i).iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.len() < 4 || &header[0] != "id" || &header[1] != "camera" || &header[2] != "split" {
            return Err(invalid("dataset CSV header must start with id,camera,split,f_0"));
        }
        let dim = header.len() - 3;
        let mut data = Vec::new();
        let mut ids = Vec::new();
        let mut cams: Vec<Option<i64>> = Vec::new();
        let mut splits = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| invalid(format!("row {}: bad {what}", line + 1));
            ids.push(rec[0].parse::<usize>().map_err(|_| bad("id"))?);
            cams.push(if rec[1].is_empty() { None } else { Some(rec[1].parse().map_err(|_| bad("camera"))?) });
            splits.push(Split::parse(&rec[2])?);
            for k in 0..dim {
                data.push(rec[3 + k].parse::<f64>().map_err(|_| bad("feature"))?);
            }
        }
        if ids.is_empty() {
            return Err(invalid("dataset CSV has no rows"));
        }
        let cameras = if cams.iter().all(Option::is_some) {
            Some(cams.into_iter().map(|c| c.expect("checked")).collect())
        } else if cams.iter().all(Option::is_none) {
            None
        } else {
            return Err(invalid("camera ids must be present on all rows or none"));
        };
        Ok(Dataset { features: Matrix::new(ids.len(), dim, data)?, ids, cameras, splits })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Sorted distinct identities of the training split; position in this
    /// list is the class index used by the center bank.
    pub fn train_classes(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.indices(Split::Train).iter().map(|&i| self.ids[i]).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> SyntheticSpec {
        SyntheticSpec { num_classes: 10, samples_per_class: 20, dim: 16, ..Default::default() }
    }

    #[test]
    fn counts_and_splits() {
        let (ds, m) = Dataset::generate(&small(), 1).unwrap();
        assert_eq!(ds.len(), 200);
        assert_eq!(m.rows, 200);
        assert_eq!(m.train + m.query + m.gallery, 200);
        let query_ids: BTreeSet<usize> = ds.indices(Split::Query).iter().map(|&i| ds.ids[i]).collect();
        let gallery_ids: BTreeSet<usize> = ds.indices(Split::Gallery).iter().map(|&i| ds.ids[i]).collect();
        assert!(query_ids.is_subset(&gallery_ids));
        assert_eq!(ds.train_classes(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let (ds, _) = Dataset::generate(&small(), 2).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        Dataset::generate(&small(), 2).unwrap().0.write_csv(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn zero_spread_collapses_classes() {
        let spec = SyntheticSpec { cluster_spread: 0.0, ..small() };
        let (ds, m) = Dataset::generate(&spec, 3).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.features.row(i), m.class_means[ds.ids[i]].as_slice());
        }
    }

    #[test]
    fn rejects_bad_spec_listing_all_problems() {
        let spec = SyntheticSpec { num_classes: 1, dim: 0, query_fraction: 0.8, gallery_fraction: 0.5, ..small() };
        match Dataset::generate(&spec, 0) {
            Err(Error::InvalidConfig(msg)) => assert_eq!(msg.split("; ").count(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_csv() {
        assert!(Dataset::read_csv("a,b,c\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("id,camera,split,f_0\n1,,nowhere,0.5\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("id,camera,split,f_0\n1,,train,x\n".as_bytes()).is_err());
        let ok = Dataset::read_csv("id,camera,split,f_0\n1,4,train,0.5\n".as_bytes()).unwrap();
        assert_eq!(ok.cameras, Some(vec![4]));
    }
}
