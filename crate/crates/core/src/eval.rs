//! Single-query retrieval evaluation (CMC and mAP) and center diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, normalize_slice, sq_dist, Matrix};
use crate::losses::{CenterBank, EmbeddingBatch};

/// Embeddings with identity and optional camera ids, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct GallerySet {
    pub embeddings: Matrix,
    pub ids: Vec<usize>,
    pub cameras: Option<Vec<i64>>,
}

impl GallerySet {
    pub fn new(embeddings: Matrix, ids: Vec<usize>, cameras: Option<Vec<i64>>) -> Result<Self> {
        if embeddings.rows() != ids.len() {
            return Err(invalid("gallery ids must cover every row"));
        }
        if cameras.as_ref().is_some_and(|c| c.len() != ids.len()) {
            return Err(invalid("gallery camera ids must cover every row"));
        }
        if !embeddings.is_finite() {
            return Err(invalid("gallery embeddings are not finite"));
        }
        Ok(Self { embeddings, ids, cameras })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// `cmc[k-1]` is the Rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Average precision per evaluated query, in query order.
    pub average_precisions: Vec<f64>,
    pub evaluated_queries: usize,
    /// Queries with no same-identity gallery entry after exclusion.
    pub skipped_queries: usize,
}

impl RetrievalResult {
    pub fn rank(&self, k: usize) -> f64 {
        let idx = k.clamp(1, self.cmc.len()) - 1;
        self.cmc[idx]
    }
}

/// Gallery indices by ascending Euclidean distance to `query`, ties by index.
/// When both the query and the gallery carry camera ids, entries with the
/// query's identity *and* camera are dropped.
pub fn rank_gallery(
    query: &[f64],
    query_id: usize,
    query_camera: Option<i64>,
    gallery: &GallerySet,
) -> Result<Vec<usize>> {
    if query.len() != gallery.embeddings.cols() {
        return Err(invalid(format!(
            "query dim {} does not match gallery dim {}",
            query.len(),
            gallery.embeddings.cols()
        )));
    }
    let excluded = |j: usize| match (query_camera, gallery.cameras.as_ref()) {
        (Some(qc), Some(cams)) => gallery.ids[j] == query_id && cams[j] == qc,
        _ => false,
    };
    let mut scored: Vec<(f64, usize)> = (0..gallery.len())
        .filter(|&j| !excluded(j))
        .map(|j| (sq_dist(query, gallery.embeddings.row(j)), j))
        .collect();
    if scored.is_empty() {
        return Err(Error::NoValidGallery);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, j)| j).collect())
}

/// CMC up to `k_max` and mAP over all queries that have at least one
/// same-identity gallery entry.
pub fn evaluate(queries: &GallerySet, gallery: &GallerySet, k_max: usize) -> Result<RetrievalResult> {
    if k_max == 0 {
        return Err(invalid("k_max must be positive"));
    }
    let mut hits = vec![0usize; k_max];
    let mut aps = Vec::new();
    let mut skipped = 0;
    for q in 0..queries.len() {
        let qid = queries.ids[q];
        let qcam = queries.cameras.as_ref().map(|c| c[q]);
        let order = match rank_gallery(queries.embeddings.row(q), qid, qcam, gallery) {
            Ok(o) => o,
            Err(Error::NoValidGallery) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let positives = order.iter().filter(|&&j| gallery.ids[j] == qid).count();
        if positives == 0 {
            skipped += 1;
            continue;
        }
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first: Option<usize> = None;
        for (r, &j) in order.iter().enumerate() {
            if gallery.ids[j] == qid {
                found += 1;
                precision_sum += found as f64 / (r + 1) as f64;
                first.get_or_insert(r);
                if found == positives {
                    break;
                }
            }
        }
        let first = first.expect("at least one positive");
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
        aps.push(precision_sum / positives as f64);
    }
    if aps.is_empty() {
        return Err(invalid("no query has a same-identity gallery entry"));
    }
    let n = aps.len() as f64;
    Ok(RetrievalResult {
        cmc: hits.iter().map(|&h| h as f64 / n).collect(),
        map: aps.iter().sum::<f64>() / n,
        evaluated_queries: aps.len(),
        average_precisions: aps,
        skipped_queries: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub classes: Vec<usize>,
    /// Cosine similarity between normalized centers, row-major k×k.
    pub cosine: Vec<Vec<f64>>,
    pub mean_abs_off_diagonal: f64,
    pub max_abs_off_diagonal: f64,
}

/// Pairwise cosines among the centers of `subset` (all classes when `None`).
pub fn center_correlation_report(bank: &CenterBank, subset: Option<&[usize]>) -> Result<CorrelationReport> {
    let classes: Vec<usize> = subset.map_or_else(|| (0..bank.num_classes()).collect(), <[usize]>::to_vec);
    if classes.len() < 2 {
        return Err(invalid("correlation report needs at least two centers"));
    }
    if let Some(c) = classes.iter().find(|&&c| c >= bank.num_classes()) {
        return Err(invalid(format!("class {c} out of range")));
    }
    let units: Vec<Vec<f64>> = classes.iter().map(|&c| normalize_slice(&bank.center(c))).collect();
    let k = units.len();
    let mut cosine = vec![vec![0.0; k]; k];
    let (mut sum, mut max) = (0.0f64, 0.0f64);
    for a in 0..k {
        for b in 0..k {
            let c = dot(&units[a], &units[b]);
            cosine[a][b] = c;
            if a != b {
                sum += c.abs();
                max = max.max(c.abs());
            }
        }
    }
    Ok(CorrelationReport {
        classes,
        cosine,
        mean_abs_off_diagonal: sum / (k * (k - 1)) as f64,
        max_abs_off_diagonal: max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactnessReport {
    /// `(class, mean ‖v − c_class‖)` for every class present in the batch.
    pub per_class: Vec<(usize, f64)>,
    /// Mean distance over all samples.
    pub global_mean: f64,
}

pub fn compactness_report(batch: &EmbeddingBatch, bank: &CenterBank) -> Result<CompactnessReport> {
    if batch.dim() != bank.dim() {
        return Err(invalid("compactness: dimension mismatch"));
    }
    if batch.is_empty() {
        return Err(invalid("compactness: empty batch"));
    }
    let mut sums = vec![(0.0, 0usize); bank.num_classes()];
    let mut total = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        if y >= bank.num_classes() {
            return Err(invalid(format!("label {y} out of range")));
        }
        let d = sq_dist(batch.features.row(i), &bank.center(y)).sqrt();
        sums[y].0 += d;
        sums[y].1 += 1;
        total += d;
    }
    Ok(CompactnessReport {
        per_class: sums
            .iter()
            .enumerate()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(c, (s, n))| (c, s / *n as f64))
            .collect(),
        global_mean: total / batch.len() as f64,
    })
}

/// CSV rows `id,camera,f_0..f_{d-1}`; camera is empty when absent.
pub fn write_embeddings_csv<W: std::io::Write>(set: &GallerySet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = set.embeddings.cols();
    let mut header = vec!["id".to_string(), "camera".to_string()];
    header.extend((0..d).map(|k| format!("f_{k}")));
    w.write_record(&header)?;
    for i in 0..set.len() {
        let mut rec = vec![set.ids[i].to_string()];
        rec.push(set.cameras.as_ref().map_or(String::new(), |c| c[i].to_string()));
        rec.extend(set.embeddings.row(i).iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RngState;
    use proptest::prelude::*;

    fn set(rows: &[Vec<f64>], ids: &[usize]) -> GallerySet {
        GallerySet::new(Matrix::from_rows(rows).unwrap(), ids.to_vec(), None).unwrap()
    }

    fn random_set(rng: &mut RngState, n: usize, d: usize, ids: usize) -> GallerySet {
        let m = Matrix::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
        GallerySet::new(m, (0..n).map(|_| rng.below(ids)).collect(), None).unwrap()
    }

    /// Ranks by counting how many entries precede each one, then scores AP
    /// and first-hit directly from those ranks.
    fn oracle(queries: &GallerySet, gallery: &GallerySet, k_max: usize) -> Option<(Vec<f64>, f64)> {
        let mut hits = vec![0usize; k_max];
        let mut aps = Vec::new();
        for q in 0..queries.len() {
            let qv = queries.embeddings.row(q);
            let dist: Vec<f64> = (0..gallery.len())
                .map(|j| sq_dist(qv, gallery.embeddings.row(j)))
                .collect();
            let rank = |j: usize| {
                (0..gallery.len()).filter(|&i| dist[i] < dist[j] || (dist[i] == dist[j] && i < j)).count() + 1
            };
            let mut pos_ranks: Vec<usize> =
                (0..gallery.len()).filter(|&j| gallery.ids[j] == queries.ids[q]).map(rank).collect();
            if pos_ranks.is_empty() {
                continue;
            }
            pos_ranks.sort_unstable();
            let mut ap = 0.0;
            for (n, &r) in pos_ranks.iter().enumerate() {
                ap += (n + 1) as f64 / r as f64;
            }
            aps.push(ap / pos_ranks.len() as f64);
            for k in 1..=k_max {
                if pos_ranks[0] <= k {
                    hits[k - 1] += 1;
                }
            }
        }
        if aps.is_empty() {
            return None;
        }
        let n = aps.len() as f64;
        Some((hits.iter().map(|&h| h as f64 / n).collect(), aps.iter().sum::<f64>() / n))
    }

    #[test]
    fn rank_examples() {
        let g = set(&[vec![1.0, 1.0]], &[0]);
        assert_eq!(rank_gallery(&[0.0, 0.0], 0, None, &g).unwrap(), vec![0]);
        let g = set(&[vec![5.0], vec![4.0], vec![3.0], vec![0.5], vec![0.7]], &[0, 1, 2, 3, 4]);
        assert_eq!(rank_gallery(&[0.5], 0, None, &g).unwrap()[0], 3);
        assert!(rank_gallery(&[0.5, 1.0], 0, None, &g).is_err());
    }

    #[test]
    fn rank_matches_full_sort() {
        let mut rng = RngState::new(50);
        let g = random_set(&mut rng, 20, 4, 5);
        let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let order = rank_gallery(&q, 0, None, &g).unwrap();
        let mut oracle: Vec<usize> = (0..20).collect();
        oracle.sort_by(|&a, &b| {
            let da = sq_dist(&q, g.embeddings.row(a));
            let db = sq_dist(&q, g.embeddings.row(b));
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        assert_eq!(order, oracle);
    }

    #[test]
    fn camera_exclusion() {
        let g = GallerySet::new(
            Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap(),
            vec![7, 7, 3],
            Some(vec![1, 2, 1]),
        )
        .unwrap();
        assert_eq!(rank_gallery(&[0.0], 7, Some(1), &g).unwrap(), vec![1, 2]);
        assert_eq!(rank_gallery(&[0.0], 3, Some(1), &g).unwrap(), vec![0, 1]);
        let lone = GallerySet::new(Matrix::from_rows(&[vec![0.0]]).unwrap(), vec![7], Some(vec![1])).unwrap();
        assert!(matches!(rank_gallery(&[0.0], 7, Some(1), &lone), Err(Error::NoValidGallery)));
    }

    #[test]
    fn perfect_retrieval() {
        let rows = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]];
        let g = set(&rows, &[0, 1, 2]);
        let r = evaluate(&g, &g, 3).unwrap();
        assert_eq!(r.cmc, vec![1.0, 1.0, 1.0]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn correct_item_second() {
        let q = set(&[vec![0.0]], &[1]);
        let g = set(&[vec![1.0], vec![2.0]], &[0, 1]);
        let r = evaluate(&q, &g, 2).unwrap();
        assert_eq!(r.cmc, vec![0.0, 1.0]);
        assert_eq!(r.average_precisions, vec![0.5]);
    }

    #[test]
    fn skips_queries_without_positives() {
        let q = set(&[vec![0.0], vec![1.0]], &[0, 9]);
        let g = set(&[vec![1.0], vec![2.0]], &[0, 1]);
        let r = evaluate(&q, &g, 2).unwrap();
        assert_eq!(r.evaluated_queries, 1);
        assert_eq!(r.skipped_queries, 1);
        let q = set(&[vec![0.0]], &[9]);
        assert!(evaluate(&q, &g, 2).is_err());
    }

    #[test]
    fn matches_oracle_on_large_instance() {
        let mut rng = RngState::new(51);
        let q = random_set(&mut rng, 50, 8, 20);
        let g = random_set(&mut rng, 200, 8, 20);
        let r = evaluate(&q, &g, 10).unwrap();
        let (cmc, map) = oracle(&q, &g, 10).unwrap();
        assert_eq!(r.cmc, cmc);
        assert_eq!(r.map, map);
    }

    #[test]
    fn correlation_examples() {
        let r = center_correlation_report(&CenterBank::new(Matrix::identity(3)), None).unwrap();
        assert_eq!(r.mean_abs_off_diagonal, 0.0);
        assert_eq!(r.max_abs_off_diagonal, 0.0);
        let same = Matrix::from_columns(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let r = center_correlation_report(&CenterBank::new(same), None).unwrap();
        assert!((r.mean_abs_off_diagonal - 1.0).abs() < 1e-15);
        assert!(center_correlation_report(&CenterBank::new(Matrix::identity(3)), Some(&[1])).is_err());
    }

    #[test]
    fn correlation_loop_oracle() {
        let mut rng = RngState::new(52);
        let bank = CenterBank::new(Matrix::new(5, 4, (0..20).map(|_| rng.normal()).collect()).unwrap());
        let r = center_correlation_report(&bank, Some(&[0, 2, 3])).unwrap();
        let (mut sum, mut max) = (0.0f64, 0.0f64);
        for (a, &ca) in [0, 2, 3].iter().enumerate() {
            for (b, &cb) in [0, 2, 3].iter().enumerate() {
                let (x, y) = (bank.center(ca), bank.center(cb));
                let cos = dot(&x, &y) / (dot(&x, &x).sqrt() * dot(&y, &y).sqrt());
                assert!((r.cosine[a][b] - cos).abs() < 1e-12);
                if a != b {
                    sum += cos.abs();
                    max = max.max(cos.abs());
                }
            }
        }
        assert!((r.mean_abs_off_diagonal - sum / 6.0).abs() < 1e-12);
        assert!((r.max_abs_off_diagonal - max).abs() < 1e-12);
    }

    #[test]
    fn compactness_examples() {
        let bank = CenterBank::new(Matrix::zeros(2, 2));
        let at = EmbeddingBatch::new(Matrix::zeros(2, 2), vec![0, 1]).unwrap();
        let r = compactness_report(&at, &bank).unwrap();
        assert_eq!(r.global_mean, 0.0);
        let one = EmbeddingBatch::new(Matrix::from_rows(&[vec![0.0, 2.0]]).unwrap(), vec![1]).unwrap();
        let r = compactness_report(&one, &bank).unwrap();
        assert_eq!(r.per_class, vec![(1, 2.0)]);

        let mut rng = RngState::new(53);
        let bank = CenterBank::new(Matrix::new(3, 2, (0..6).map(|_| rng.normal()).collect()).unwrap());
        let f = Matrix::new(5, 3, (0..15).map(|_| rng.normal()).collect()).unwrap();
        let batch = EmbeddingBatch::new(f, vec![0, 1, 1, 0, 1]).unwrap();
        let r = compactness_report(&batch, &bank).unwrap();
        let mut per = [(0.0, 0); 2];
        for i in 0..5 {
            let y = batch.labels[i];
            let mut s = 0.0;
            for k in 0..3 {
                s += (batch.features.get(i, k) - bank.weights.get(k, y)).powi(2);
            }
            per[y].0 += s.sqrt();
            per[y].1 += 1;
        }
        for (c, m) in &r.per_class {
            assert!((m - per[*c].0 / per[*c].1 as f64).abs() < 1e-12);
        }
        assert!((r.global_mean - (per[0].0 + per[1].0) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_export() {
        let g = GallerySet::new(Matrix::from_rows(&[vec![0.5, -1.0]]).unwrap(), vec![3], Some(vec![2])).unwrap();
        let mut buf = Vec::new();
        write_embeddings_csv(&g, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "id,camera,f_0,f_1\n3,2,0.5,-1\n");
    }

    proptest! {
        #[test]
        fn small_instances_match_oracle(seed in any::<u64>(), n in 1usize..=8, nq in 1usize..6) {
            let mut rng = RngState::new(seed);
            let g = random_set(&mut rng, n, 3, 3);
            let q = random_set(&mut rng, nq, 3, 3);
            match (evaluate(&q, &g, n), oracle(&q, &g, n)) {
                (Ok(r), Some((cmc, map))) => {
                    prop_assert_eq!(&r.cmc, &cmc);
                    prop_assert_eq!(r.map, map);
                    prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                    prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
                }
                (Err(_), None) => {}
                (a, b) => prop_assert!(false, "mismatch {:?} vs {:?}", a, b),
            }
        }

        #[test]
        fn scale_and_permutation_invariance(seed in any::<u64>(), scale in 0.1f64..10.0) {
            let mut rng = RngState::new(seed);
            let g = random_set(&mut rng, 12, 4, 4);
            let q = random_set(&mut rng, 5, 4, 4);
            let Ok(base) = evaluate(&q, &g, 5) else { return Ok(()); };

            let mut scaled_g = g.clone();
            scaled_g.embeddings.scale(scale);
            let mut scaled_q = q.clone();
            scaled_q.embeddings.scale(scale);
            for i in 0..q.len() {
                let a = rank_gallery(q.embeddings.row(i), q.ids[i], None, &g).unwrap();
                let b = rank_gallery(scaled_q.embeddings.row(i), q.ids[i], None, &scaled_g).unwrap();
                prop_assert_eq!(a, b);
            }

            let mut perm: Vec<usize> = (0..12).collect();
            rng.shuffle(&mut perm);
            let rows: Vec<Vec<f64>> = perm.iter().map(|&j| g.embeddings.row(j).to_vec()).collect();
            let ids: Vec<usize> = perm.iter().map(|&j| g.ids[j]).collect();
            let permuted = set(&rows, &ids);
            let r = evaluate(&q, &permuted, 5).unwrap();
            prop_assert!((r.map - base.map).abs() < 1e-12);
            prop_assert_eq!(r.cmc, base.cmc);
        }
    }
}
