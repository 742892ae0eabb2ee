//! Loss terms with hand-derived gradients.
//!
//! Every operation returns a [`LossReport`] carrying the scalar value and the
//! gradients with respect to whichever tensors participate. Tensors that do not
//! participate get `None`, never a silent zero matrix.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, normalize_slice, Matrix, NORM_EPS};
use crate::masking::SubspaceMask;

/// Rows of `features` are sample embeddings; `labels[i]` is the class of row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(invalid(format!(
                "batch has {} rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(invalid("batch features are not finite"));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Sorted, deduplicated class ids present in the batch.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Class centers stored as the columns of the d×M softmax weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterBank {
    pub weights: Matrix,
}

impl CenterBank {
    pub fn new(weights: Matrix) -> Self {
        Self { weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn center(&self, class: usize) -> Vec<f64> {
        self.weights.column(class)
    }
}

/// Which inter-class term `total_loss` adds under `alpha3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterTerm {
    /// Frobenius orthogonality on normalized batch centers.
    #[default]
    Orth,
    /// Max absolute correlation among normalized batch centers.
    Max,
    /// Pairwise hinge on Euclidean center distances.
    Euclid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub lambda_orth: f64,
    pub triplet_margin: f64,
    pub euclid_margin: f64,
    pub inter: InterTerm,
    /// Drop same-class pairs from the Euclidean hinge.
    pub euclid_exclude_same_class: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 5e-4,
            alpha3: 1e-2,
            lambda_orth: 1.0,
            triplet_margin: 0.3,
            euclid_margin: 1.0,
            inter: InterTerm::Orth,
            euclid_exclude_same_class: false,
        }
    }
}

impl LossWeights {
    /// Returns one message per invalid field.
    pub fn violations(&self) -> Vec<String> {
        let fields = [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("lambda_orth", self.lambda_orth),
            ("triplet_margin", self.triplet_margin),
            ("euclid_margin", self.euclid_margin),
        ];
        fields
            .iter()
            .filter(|(_, v)| !v.is_finite() || *v < 0.0)
            .map(|(name, v)| format!("{name} must be finite and >= 0 (got {v})"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad_features: Option<Matrix>,
    pub grad_centers: Option<Matrix>,
}

fn check_dims(batch: &EmbeddingBatch, bank: &CenterBank) -> Result<()> {
    if batch.dim() != bank.dim() {
        return Err(invalid(format!(
            "batch dim {} does not match center dim {}",
            batch.dim(),
            bank.dim()
        )));
    }
    check_labels(&batch.labels, bank.num_classes())
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(y) => Err(invalid(format!("label {y} out of range for {num_classes} classes"))),
        None => Ok(()),
    }
}

/// Mean softmax cross-entropy of the bias-free logits `Wᵀv`.
pub fn softmax_ce(batch: &EmbeddingBatch, bank: &CenterBank) -> Result<LossReport> {
    check_dims(batch, bank)?;
    let (d, m) = bank.weights.shape();
    let b = batch.len();
    let w = &bank.weights;
    let scale = 1.0 / b as f64;
    let mut grad_f = Matrix::zeros(b, d);
    let mut grad_w = Matrix::zeros(d, m);
    let mut total = 0.0;
    let mut logits = vec![0.0; m];
    for i in 0..b {
        let v = batch.features.row(i);
        logits.iter_mut().for_each(|z| *z = 0.0);
        for (k, &vk) in v.iter().enumerate() {
            let wrow = w.row(k);
            for (z, &wkj) in logits.iter_mut().zip(wrow) {
                *z += wkj * vk;
            }
        }
        let zmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|z| (z - zmax).exp()).sum();
        let log_z = zmax + sum_exp.ln();
        let y = batch.labels[i];
        total += log_z - logits[y];
        // dL/dz = softmax - onehot
        let dz: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(j, z)| ((z - log_z).exp() - if j == y { 1.0 } else { 0.0 }) * scale)
            .collect();
        let gf = grad_f.row_mut(i);
        for k in 0..d {
            let wrow = w.row(k);
            gf[k] = dot(wrow, &dz);
            let gw = grad_w.row_mut(k);
            for j in 0..m {
                gw[j] += v[k] * dz[j];
            }
        }
    }
    Ok(LossReport {
        value: (total * scale).max(0.0),
        grad_features: Some(grad_f),
        grad_centers: Some(grad_w),
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss on Euclidean distances, averaged over anchors
/// that have at least one positive.
pub fn triplet_batch_hard(batch: &EmbeddingBatch, margin: f64) -> Result<LossReport> {
    let b = batch.len();
    let feats = &batch.features;
    if batch.classes().len() < 2 {
        return Err(Error::NoNegative);
    }
    let mut dist = Matrix::zeros(b, b);
    for i in 0..b {
        for j in (i + 1)..b {
            let d = euclid(feats.row(i), feats.row(j));
            dist.set(i, j, d);
            dist.set(j, i, d);
        }
    }
    // (anchor, hardest positive, hardest negative, hinge)
    let mut active = Vec::new();
    let mut anchors = 0usize;
    let mut total = 0.0;
    for a in 0..b {
        let ya = batch.labels[a];
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            if batch.labels[j] == ya {
                if pos.is_none_or(|p| dist.get(a, j) > dist.get(a, p)) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| dist.get(a, j) < dist.get(a, n)) {
                neg = Some(j);
            }
        }
        let (Some(p), Some(n)) = (pos, neg) else { continue };
        anchors += 1;
        let h = margin + dist.get(a, p) - dist.get(a, n);
        if h > 0.0 {
            total += h;
            active.push((a, p, n));
        }
    }
    if anchors == 0 {
        return Err(Error::NoValidAnchor);
    }
    let scale = 1.0 / anchors as f64;
    let mut grad = Matrix::zeros(b, batch.dim());
    for (a, p, n) in active {
        let dap = dist.get(a, p);
        if dap > 0.0 {
            for k in 0..batch.dim() {
                let g = scale * (feats.get(a, k) - feats.get(p, k)) / dap;
                grad.add_at(a, k, g);
                grad.add_at(p, k, -g);
            }
        }
        let dan = dist.get(a, n);
        if dan > 0.0 {
            for k in 0..batch.dim() {
                let g = scale * (feats.get(a, k) - feats.get(n, k)) / dan;
                grad.add_at(a, k, -g);
                grad.add_at(n, k, g);
            }
        }
    }
    Ok(LossReport { value: total * scale, grad_features: Some(grad), grad_centers: None })
}

fn intra_impl(batch: &EmbeddingBatch, bank: &CenterBank, mask: Option<&[bool]>) -> Result<LossReport> {
    check_dims(batch, bank)?;
    let (d, m) = bank.weights.shape();
    let mut grad_f = Matrix::zeros(batch.len(), d);
    let mut grad_w = Matrix::zeros(d, m);
    let mut total = 0.0;
    for i in 0..batch.len() {
        let y = batch.labels[i];
        let v = batch.features.row(i);
        let mut row_sum = 0.0;
        for k in 0..d {
            if mask.is_some_and(|bits| !bits[k]) {
                continue;
            }
            let diff = v[k] - bank.weights.get(k, y);
            row_sum += diff * diff;
            grad_f.set(i, k, 2.0 * diff);
            grad_w.add_at(k, y, -2.0 * diff);
        }
        total += row_sum;
    }
    Ok(LossReport { value: total, grad_features: Some(grad_f), grad_centers: Some(grad_w) })
}

/// Sum of squared distances between each sample and its class center.
pub fn l_intra(batch: &EmbeddingBatch, bank: &CenterBank) -> Result<LossReport> {
    intra_impl(batch, bank, None)
}

/// [`l_intra`] restricted to the units selected by `mask`.
pub fn l_intra_masked(
    batch: &EmbeddingBatch,
    bank: &CenterBank,
    mask: &SubspaceMask,
) -> Result<LossReport> {
    if mask.len() != bank.dim() {
        return Err(invalid(format!(
            "mask length {} does not match center dim {}",
            mask.len(),
            bank.dim()
        )));
    }
    intra_impl(batch, bank, Some(mask.bits()))
}

fn check_classes(bank: &CenterBank, classes: &[usize]) -> Result<()> {
    if classes.is_empty() {
        return Err(invalid("batch class list is empty"));
    }
    check_labels(classes, bank.num_classes())?;
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != classes.len() {
        return Err(invalid("batch class list has duplicates"));
    }
    Ok(())
}

/// Normalized centers for `classes` plus the raw norms.
fn normalized_centers(bank: &CenterBank, classes: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    classes
        .iter()
        .map(|&c| {
            let raw = bank.center(c);
            let norm = dot(&raw, &raw).sqrt();
            (normalize_slice(&raw), norm)
        })
        .unzip()
}

/// Chain `dL/dĉ` back through `ĉ = c/‖c‖`: `(I − ĉĉᵀ) g / ‖c‖`.
fn backprop_normalize(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    if norm <= NORM_EPS {
        return vec![0.0; unit.len()];
    }
    let proj = dot(unit, grad_unit);
    unit.iter().zip(grad_unit).map(|(u, g)| (g - proj * u) / norm).collect()
}

/// `ĈᵀĈ − I` over the normalized centers.
fn correlation_residual(units: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = units.len();
    let mut g = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let v = dot(&units[a], &units[b]) - if a == b { 1.0 } else { 0.0 };
            g[a][b] = v;
            g[b][a] = v;
        }
    }
    g
}

/// `λ‖ĈᵀĈ − I‖²_F` over the L2-normalized centers of `classes`. `W` itself is
/// not modified.
pub fn l_inter_orth(bank: &CenterBank, classes: &[usize], lambda: f64) -> Result<LossReport> {
    check_classes(bank, classes)?;
    let (units, norms) = normalized_centers(bank, classes);
    let resid = correlation_residual(&units);
    let value = lambda * resid.iter().flatten().map(|x| x * x).sum::<f64>();
    let d = bank.dim();
    let mut grad_w = Matrix::zeros(d, bank.num_classes());
    // dL/dĈ = 4λ Ĉ (ĈᵀĈ − I)
    for (a, &class) in classes.iter().enumerate() {
        let mut g_unit = vec![0.0; d];
        for (b, ub) in units.iter().enumerate() {
            let coeff = 4.0 * lambda * resid[b][a];
            for k in 0..d {
                g_unit[k] += coeff * ub[k];
            }
        }
        let g = backprop_normalize(&units[a], norms[a], &g_unit);
        grad_w.set_column(class, &g);
    }
    Ok(LossReport { value, grad_features: None, grad_centers: Some(grad_w) })
}

/// Largest absolute entry of `ĈᵀĈ − I`. The subgradient goes to the first
/// maximizing entry in row-major order.
pub fn l_inter_max(bank: &CenterBank, classes: &[usize]) -> Result<LossReport> {
    check_classes(bank, classes)?;
    let (units, norms) = normalized_centers(bank, classes);
    let resid = correlation_residual(&units);
    let k = units.len();
    let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
    for a in 0..k {
        for b in 0..k {
            if resid[a][b].abs() > best {
                best = resid[a][b].abs();
                at = (a, b);
            }
        }
    }
    let d = bank.dim();
    let mut grad_w = Matrix::zeros(d, bank.num_classes());
    let (a, b) = at;
    let sign = resid[a][b].signum();
    if resid[a][b] != 0.0 {
        if a == b {
            let g_unit: Vec<f64> = units[a].iter().map(|u| 2.0 * sign * u).collect();
            grad_w.set_column(classes[a], &backprop_normalize(&units[a], norms[a], &g_unit));
        } else {
            let ga: Vec<f64> = units[b].iter().map(|u| sign * u).collect();
            let gb: Vec<f64> = units[a].iter().map(|u| sign * u).collect();
            grad_w.set_column(classes[a], &backprop_normalize(&units[a], norms[a], &ga));
            grad_w.set_column(classes[b], &backprop_normalize(&units[b], norms[b], &gb));
        }
    }
    Ok(LossReport { value: best.max(0.0), grad_features: None, grad_centers: Some(grad_w) })
}

/// `Σ_i Σ_{j≠i} max(0, m − ‖c_{y_i} − c_{y_j}‖)` over ordered batch pairs.
/// Same-class pairs sit at distance zero and contribute `m` unless excluded.
pub fn l_inter_euclid(
    batch: &EmbeddingBatch,
    bank: &CenterBank,
    margin: f64,
    exclude_same_class: bool,
) -> Result<LossReport> {
    check_dims(batch, bank)?;
    if batch.is_empty() {
        return Err(invalid("l_inter_euclid: empty batch"));
    }
    let d = bank.dim();
    let centers: Vec<Vec<f64>> = (0..bank.num_classes()).map(|c| bank.center(c)).collect();
    let mut grad_w = Matrix::zeros(d, bank.num_classes());
    let mut total = 0.0;
    for (i, &yi) in batch.labels.iter().enumerate() {
        for (j, &yj) in batch.labels.iter().enumerate() {
            if i == j || (exclude_same_class && yi == yj) {
                continue;
            }
            let dist = if yi == yj { 0.0 } else { euclid(&centers[yi], &centers[yj]) };
            let h = margin - dist;
            if h <= 0.0 {
                continue;
            }
            total += h;
            if dist > 0.0 {
                for k in 0..d {
                    let g = (centers[yi][k] - centers[yj][k]) / dist;
                    grad_w.add_at(k, yi, -g);
                    grad_w.add_at(k, yj, g);
                }
            }
        }
    }
    Ok(LossReport { value: total, grad_features: None, grad_centers: Some(grad_w) })
}

/// Per-term values from [`total_loss`]; disabled terms report zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub softmax: f64,
    pub triplet: f64,
    pub intra: f64,
    pub inter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub report: LossReport,
    pub components: LossComponents,
}

/// Inter-class term selected by `weights.inter`, unweighted by `alpha3`.
pub fn inter_term(
    batch: &EmbeddingBatch,
    bank: &CenterBank,
    weights: &LossWeights,
    classes: &[usize],
) -> Result<LossReport> {
    match weights.inter {
        InterTerm::Orth => l_inter_orth(bank, classes, weights.lambda_orth),
        InterTerm::Max => {
            let mut r = l_inter_max(bank, classes)?;
            r.value *= weights.lambda_orth;
            if let Some(g) = r.grad_centers.as_mut() {
                g.scale(weights.lambda_orth);
            }
            Ok(r)
        }
        InterTerm::Euclid => l_inter_euclid(
            batch,
            bank,
            weights.euclid_margin,
            weights.euclid_exclude_same_class,
        ),
    }
}

fn accumulate(target: &mut Matrix, weight: f64, grad: Option<&Matrix>) {
    if let Some(g) = grad {
        target.axpy(weight, g);
    }
}

/// `L_softmax + α1·L_triplet + α2·L^m_intra + α3·L_inter`. Terms whose weight
/// is zero are skipped entirely and report zero.
pub fn total_loss(
    batch: &EmbeddingBatch,
    bank: &CenterBank,
    weights: &LossWeights,
    mask: &SubspaceMask,
    classes: &[usize],
) -> Result<TotalLoss> {
    let base = softmax_ce(batch, bank)?;
    let mut components = LossComponents { softmax: base.value, ..Default::default() };
    let mut value = base.value;
    let mut grad_f = base.grad_features.expect("softmax populates feature grads");
    let mut grad_w = base.grad_centers.expect("softmax populates center grads");

    if weights.alpha1 > 0.0 {
        let r = triplet_batch_hard(batch, weights.triplet_margin)?;
        components.triplet = r.value;
        value += weights.alpha1 * r.value;
        accumulate(&mut grad_f, weights.alpha1, r.grad_features.as_ref());
    }
    if weights.alpha2 > 0.0 {
        let r = l_intra_masked(batch, bank, mask)?;
        components.intra = r.value;
        value += weights.alpha2 * r.value;
        accumulate(&mut grad_f, weights.alpha2, r.grad_features.as_ref());
        accumulate(&mut grad_w, weights.alpha2, r.grad_centers.as_ref());
    }
    if weights.alpha3 > 0.0 {
        let r = inter_term(batch, bank, weights, classes)?;
        components.inter = r.value;
        value += weights.alpha3 * r.value;
        accumulate(&mut grad_w, weights.alpha3, r.grad_centers.as_ref());
    }
    Ok(TotalLoss {
        report: LossReport { value, grad_features: Some(grad_f), grad_centers: Some(grad_w) },
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, relative_error};
    use crate::linalg::RngState;
    use crate::masking::MaskStrategy;

    const H: f64 = 1e-5;

    fn random_matrix(rng: &mut RngState, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn batch_of(features: Matrix, labels: Vec<usize>) -> EmbeddingBatch {
        EmbeddingBatch::new(features, labels).unwrap()
    }

    fn fd_features(batch: &EmbeddingBatch, f: impl Fn(&EmbeddingBatch) -> f64) -> Matrix {
        central_diff(&batch.features, H, |m| f(&batch_of(m.clone(), batch.labels.clone())))
    }

    fn fd_centers(bank: &CenterBank, f: impl Fn(&CenterBank) -> f64) -> Matrix {
        central_diff(&bank.weights, H, |m| f(&CenterBank::new(m.clone())))
    }

    #[test]
    fn softmax_symmetric_and_uniform() {
        let bank = CenterBank::new(Matrix::from_columns(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap());
        let batch = batch_of(Matrix::from_rows(&[vec![0.3, -7.0]]).unwrap(), vec![1]);
        assert!((softmax_ce(&batch, &bank).unwrap().value - 2f64.ln()).abs() < 1e-14);

        let bank = CenterBank::new(Matrix::zeros(3, 4));
        let batch = batch_of(Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap(), vec![3]);
        assert!((softmax_ce(&batch, &bank).unwrap().value - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn softmax_rejects_bad_label() {
        let bank = CenterBank::new(Matrix::zeros(2, 2));
        let batch = batch_of(Matrix::zeros(1, 2), vec![2]);
        assert!(matches!(softmax_ce(&batch, &bank), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = RngState::new(11);
        let batch = batch_of(random_matrix(&mut rng, 4, 3), vec![0, 4, 2, 4]);
        let bank = CenterBank::new(random_matrix(&mut rng, 3, 5));
        let r = softmax_ce(&batch, &bank).unwrap();
        let nf = fd_features(&batch, |b| softmax_ce(b, &bank).unwrap().value);
        let nw = fd_centers(&bank, |w| softmax_ce(&batch, w).unwrap().value);
        assert!(relative_error(r.grad_features.as_ref().unwrap(), &nf) < 1e-5);
        assert!(relative_error(r.grad_centers.as_ref().unwrap(), &nw) < 1e-5);
    }

    /// Enumerates every (anchor, positive, negative) triple to find the
    /// hardest terms instead of scanning distance rows.
    fn exhaustive_triplet(batch: &EmbeddingBatch, margin: f64) -> f64 {
        let b = batch.len();
        let f = &batch.features;
        let mut total = 0.0;
        let mut anchors = 0;
        for a in 0..b {
            let mut worst: Option<f64> = None;
            for p in 0..b {
                for n in 0..b {
                    if p == a || batch.labels[p] != batch.labels[a] || batch.labels[n] == batch.labels[a] {
                        continue;
                    }
                    let dp = crate::linalg::sq_dist(f.row(a), f.row(p)).sqrt();
                    let dn = crate::linalg::sq_dist(f.row(a), f.row(n)).sqrt();
                    let t = dp - dn;
                    worst = Some(worst.map_or(t, |w: f64| w.max(t)));
                }
            }
            if let Some(w) = worst {
                anchors += 1;
                total += (margin + w).max(0.0);
            }
        }
        total / anchors as f64
    }

    #[test]
    fn triplet_examples() {
        let batch = batch_of(Matrix::zeros(4, 3), vec![0, 0, 1, 1]);
        assert!((triplet_batch_hard(&batch, 0.3).unwrap().value - 0.3).abs() < 1e-15);

        let f = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 0.0], vec![10.0, 0.0]])
            .unwrap();
        assert_eq!(triplet_batch_hard(&batch_of(f, vec![0, 0, 1, 1]), 0.3).unwrap().value, 0.0);

        let mut rng = RngState::new(12);
        for _ in 0..5 {
            let batch = batch_of(random_matrix(&mut rng, 8, 4), vec![0, 0, 1, 1, 2, 2, 3, 3]);
            let r = triplet_batch_hard(&batch, 0.3).unwrap();
            assert!((r.value - exhaustive_triplet(&batch, 0.3)).abs() < 1e-12);
            let num = fd_features(&batch, |b| triplet_batch_hard(b, 0.3).unwrap().value);
            assert!(relative_error(r.grad_features.as_ref().unwrap(), &num) < 1e-5);
        }
    }

    #[test]
    fn triplet_errors() {
        let batch = batch_of(Matrix::zeros(3, 2), vec![1, 1, 1]);
        assert!(matches!(triplet_batch_hard(&batch, 0.3), Err(Error::NoNegative)));
        let batch = batch_of(Matrix::zeros(3, 2), vec![0, 1, 2]);
        assert!(matches!(triplet_batch_hard(&batch, 0.3), Err(Error::NoValidAnchor)));
        // singleton classes are skipped but others still count
        let f = Matrix::from_rows(&[vec![0.0], vec![0.0], vec![5.0]]).unwrap();
        let r = triplet_batch_hard(&batch_of(f, vec![0, 0, 1]), 0.3).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn intra_examples() {
        let bank = CenterBank::new(Matrix::from_columns(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap());
        let batch = batch_of(Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap(), vec![0, 1]);
        assert_eq!(l_intra(&batch, &bank).unwrap().value, 0.0);

        let bank = CenterBank::new(Matrix::zeros(2, 1));
        let batch = batch_of(Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(), vec![0]);
        assert_eq!(l_intra(&batch, &bank).unwrap().value, 1.0);
    }

    #[test]
    fn intra_matches_direct_summation() {
        let mut rng = RngState::new(13);
        let batch = batch_of(random_matrix(&mut rng, 6, 5), vec![0, 1, 2, 0, 1, 2]);
        let bank = CenterBank::new(random_matrix(&mut rng, 5, 3));
        let r = l_intra(&batch, &bank).unwrap();
        let mut expect = 0.0;
        for i in 0..6 {
            for k in 0..5 {
                expect += (batch.features.get(i, k) - bank.weights.get(k, batch.labels[i])).powi(2);
            }
        }
        assert!((r.value - expect).abs() < 1e-10);
        let nf = fd_features(&batch, |b| l_intra(b, &bank).unwrap().value);
        let nw = fd_centers(&bank, |w| l_intra(&batch, w).unwrap().value);
        assert!(relative_error(r.grad_features.as_ref().unwrap(), &nf) < 1e-5);
        assert!(relative_error(r.grad_centers.as_ref().unwrap(), &nw) < 1e-5);
    }

    #[test]
    fn masked_intra_cases() {
        let mut rng = RngState::new(14);
        let batch = batch_of(random_matrix(&mut rng, 2, 4), vec![0, 1]);
        let bank = CenterBank::new(random_matrix(&mut rng, 4, 2));

        let full = l_intra(&batch, &bank).unwrap();
        let ones = l_intra_masked(&batch, &bank, &SubspaceMask::ones(4)).unwrap();
        assert_eq!(full, ones);

        let zeros = l_intra_masked(&batch, &bank, &SubspaceMask::zeros(4)).unwrap();
        assert_eq!(zeros.value, 0.0);
        assert!(zeros.grad_features.unwrap().as_slice().iter().all(|&g| g == 0.0));

        let mask = SubspaceMask::from_bits(vec![true, false, true, false], MaskStrategy::Bernoulli);
        let r = l_intra_masked(&batch, &bank, &mask).unwrap();
        let mut expect = 0.0;
        for i in 0..2 {
            for k in [0, 2] {
                expect += (batch.features.get(i, k) - bank.weights.get(k, batch.labels[i])).powi(2);
            }
        }
        assert!((r.value - expect).abs() < 1e-12);
        assert!(l_intra_masked(&batch, &bank, &SubspaceMask::ones(3)).is_err());
    }

    #[test]
    fn orth_examples() {
        let bank = CenterBank::new(Matrix::identity(2));
        assert_eq!(l_inter_orth(&bank, &[0, 1], 1.0).unwrap().value, 0.0);
        let bank = CenterBank::new(Matrix::from_columns(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap());
        assert!((l_inter_orth(&bank, &[0, 1], 1.0).unwrap().value - 2.0).abs() < 1e-12);
        assert!(l_inter_orth(&bank, &[0, 0], 1.0).is_err());
        assert!(l_inter_orth(&bank, &[2], 1.0).is_err());
        assert!(l_inter_orth(&bank, &[], 1.0).is_err());
    }

    /// normalize → gram → frobenius written out with the public primitives.
    fn orth_oracle(bank: &CenterBank, classes: &[usize], lambda: f64) -> f64 {
        use crate::linalg::{frobenius_sq, gram, l2_normalize, Vector};
        let cols: Vec<Vec<f64>> = classes
            .iter()
            .map(|&c| l2_normalize(&Vector::new(bank.center(c)).unwrap()).unwrap().into_inner())
            .collect();
        let mut g = gram(&Matrix::from_columns(&cols).unwrap());
        g.axpy(-1.0, &Matrix::identity(classes.len()));
        lambda * frobenius_sq(&g)
    }

    #[test]
    fn orth_matches_composition_oracle() {
        let mut rng = RngState::new(15);
        for _ in 0..5 {
            let bank = CenterBank::new(random_matrix(&mut rng, 6, 6));
            let classes = [0, 2, 3, 5];
            let r = l_inter_orth(&bank, &classes, 0.5).unwrap();
            assert!((r.value - orth_oracle(&bank, &classes, 0.5)).abs() < 1e-12);
            let num = fd_centers(&bank, |w| orth_oracle(w, &classes, 0.5));
            assert!(relative_error(r.grad_centers.as_ref().unwrap(), &num) < 1e-5);
            let g = r.grad_centers.unwrap();
            for k in 0..6 {
                assert_eq!(g.get(k, 1), 0.0);
                assert_eq!(g.get(k, 4), 0.0);
            }
        }
    }

    #[test]
    fn max_examples_and_oracle() {
        let bank = CenterBank::new(Matrix::identity(2));
        assert_eq!(l_inter_max(&bank, &[0, 1]).unwrap().value, 0.0);
        let bank = CenterBank::new(Matrix::from_columns(&[vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap());
        assert!((l_inter_max(&bank, &[0, 1]).unwrap().value - 1.0).abs() < 1e-15);

        let mut rng = RngState::new(16);
        for _ in 0..5 {
            let bank = CenterBank::new(random_matrix(&mut rng, 5, 3));
            let r = l_inter_max(&bank, &[0, 1, 2]).unwrap();
            let mut expect: f64 = 0.0;
            for a in 0..3 {
                let ca = bank.center(a);
                let na = dot(&ca, &ca).sqrt();
                for b in 0..3 {
                    let cb = bank.center(b);
                    let nb = dot(&cb, &cb).sqrt();
                    let term = if a == b { (dot(&ca, &ca) / (na * na) - 1.0).abs() } else { (dot(&ca, &cb) / (na * nb)).abs() };
                    expect = expect.max(term);
                }
            }
            assert!((r.value - expect).abs() < 1e-12);
            let num = fd_centers(&bank, |w| l_inter_max(w, &[0, 1, 2]).unwrap().value);
            assert!(relative_error(r.grad_centers.as_ref().unwrap(), &num) < 1e-5);
        }
    }

    #[test]
    fn euclid_examples() {
        let bank = CenterBank::new(Matrix::from_columns(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap());
        let same = batch_of(Matrix::zeros(3, 2), vec![1, 1, 1]);
        assert_eq!(l_inter_euclid(&same, &bank, 1.0, false).unwrap().value, 6.0);
        assert_eq!(l_inter_euclid(&same, &bank, 1.0, true).unwrap().value, 0.0);
        let apart = batch_of(Matrix::zeros(2, 2), vec![0, 1]);
        assert_eq!(l_inter_euclid(&apart, &bank, 1.0, false).unwrap().value, 0.0);
    }

    #[test]
    fn euclid_matches_double_loop() {
        let mut rng = RngState::new(17);
        let bank = CenterBank::new(random_matrix(&mut rng, 3, 4));
        let batch = batch_of(random_matrix(&mut rng, 6, 3), vec![0, 1, 2, 3, 0, 2]);
        let m = 2.5;
        let r = l_inter_euclid(&batch, &bank, m, false).unwrap();
        let mut expect = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    let d = crate::linalg::sq_dist(&bank.center(batch.labels[i]), &bank.center(batch.labels[j])).sqrt();
                    expect += (m - d).max(0.0);
                }
            }
        }
        assert!((r.value - expect).abs() < 1e-12);
        let num = fd_centers(&bank, |w| l_inter_euclid(&batch, w, m, false).unwrap().value);
        assert!(relative_error(r.grad_centers.as_ref().unwrap(), &num) < 1e-5);
    }

    #[test]
    fn total_degenerate_weights_is_softmax() {
        let mut rng = RngState::new(18);
        let batch = batch_of(random_matrix(&mut rng, 4, 3), vec![0, 0, 1, 1]);
        let bank = CenterBank::new(random_matrix(&mut rng, 3, 2));
        let w = LossWeights { alpha1: 0.0, alpha2: 0.0, alpha3: 0.0, ..Default::default() };
        let t = total_loss(&batch, &bank, &w, &SubspaceMask::ones(3), &[0, 1]).unwrap();
        let s = softmax_ce(&batch, &bank).unwrap();
        assert_eq!(t.report, s);
    }

    #[test]
    fn total_zero_terms_at_orthonormal_centers() {
        let bank = CenterBank::new(Matrix::identity(3));
        let batch = batch_of(
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(),
            vec![0, 1],
        );
        let w = LossWeights { alpha1: 0.0, alpha2: 1.0, alpha3: 1.0, ..Default::default() };
        let t = total_loss(&batch, &bank, &w, &SubspaceMask::ones(3), &[0, 1]).unwrap();
        assert_eq!(t.components.intra, 0.0);
        assert!(t.components.inter.abs() < 1e-30);
    }

    #[test]
    fn total_is_weighted_component_sum() {
        let mut rng = RngState::new(19);
        let batch = batch_of(random_matrix(&mut rng, 8, 5), vec![0, 0, 1, 1, 2, 2, 4, 4]);
        let bank = CenterBank::new(random_matrix(&mut rng, 5, 5));
        let mask = SubspaceMask::from_bits(vec![true, true, false, true, false], MaskStrategy::Bernoulli);
        let classes = batch.classes();
        let w = LossWeights { alpha1: 1.0, alpha2: 0.5, alpha3: 0.005, ..Default::default() };
        let t = total_loss(&batch, &bank, &w, &mask, &classes).unwrap();

        let s = softmax_ce(&batch, &bank).unwrap();
        let tr = triplet_batch_hard(&batch, w.triplet_margin).unwrap();
        let im = l_intra_masked(&batch, &bank, &mask).unwrap();
        let io = l_inter_orth(&bank, &classes, 1.0).unwrap();
        let expect = s.value + 1.0 * tr.value + 0.5 * im.value + 0.005 * io.value;
        assert!((t.report.value - expect).abs() < 1e-12);

        let gf = t.report.grad_features.as_ref().unwrap();
        let gw = t.report.grad_centers.as_ref().unwrap();
        for idx in 0..gf.as_slice().len() {
            let e = s.grad_features.as_ref().unwrap().as_slice()[idx]
                + tr.grad_features.as_ref().unwrap().as_slice()[idx]
                + 0.5 * im.grad_features.as_ref().unwrap().as_slice()[idx];
            assert!((gf.as_slice()[idx] - e).abs() < 1e-12);
        }
        for idx in 0..gw.as_slice().len() {
            let e = s.grad_centers.as_ref().unwrap().as_slice()[idx]
                + 0.5 * im.grad_centers.as_ref().unwrap().as_slice()[idx]
                + 0.005 * io.grad_centers.as_ref().unwrap().as_slice()[idx];
            assert!((gw.as_slice()[idx] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn orth_scale_invariance() {
        let mut rng = RngState::new(20);
        let mut bank = CenterBank::new(random_matrix(&mut rng, 6, 4));
        let before = l_inter_orth(&bank, &[0, 1, 2, 3], 1.0).unwrap().value;
        let col: Vec<f64> = bank.center(2).iter().map(|x| x * 7.3).collect();
        bank.weights.set_column(2, &col);
        let after = l_inter_orth(&bank, &[0, 1, 2, 3], 1.0).unwrap().value;
        assert!((before - after).abs() < 1e-9);
    }
}
