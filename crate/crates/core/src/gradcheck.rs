//! Central finite-difference verification of every analytic gradient.

use serde::Serialize;

use crate::linalg::{Matrix, RngState};
use crate::losses::{
    l_inter_euclid, l_inter_max, l_inter_orth, l_intra, l_intra_masked, softmax_ce, total_loss,
    triplet_batch_hard, CenterBank, EmbeddingBatch, LossReport, LossWeights,
};
use crate::masking::{sample_bernoulli, MaskConfig, SubspaceMask};
use crate::pooling::{head_losses, FeatureMap};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Gradient of `f` at `x` by `(f(x+h) − f(x−h)) / 2h`, one entry at a time.
pub fn central_diff(x: &Matrix, h: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.as_slice().len() {
        let orig = x.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[idx] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[idx] = orig;
        out.as_mut_slice()[idx] = (up - down) / (2.0 * h);
    }
    out
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`: entrywise error relative to the largest
/// gradient magnitude, zero when both are identically zero.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let inf = |m: &Matrix| m.as_slice().iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let diff = analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .fold(0.0f64, |acc, (a, n)| acc.max((a - n).abs()));
    let scale = inf(analytic).max(inf(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Names of every operation the suite checks, in report order.
pub const OPS: [&str; 9] = [
    "softmax_ce",
    "triplet_batch_hard",
    "l_intra",
    "l_intra_masked",
    "l_inter_orth",
    "l_inter_max",
    "l_inter_euclid",
    "total_loss",
    "pooling_head",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
    /// Seed of the instance with the largest error.
    pub worst_seed: u64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: perturb the analytic gradient of this op.
    pub corrupt: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: None,
        }
    }
}

struct Instance {
    batch: EmbeddingBatch,
    bank: CenterBank,
    mask: SubspaceMask,
    rng: RngState,
}

fn random_matrix(rng: &mut RngState, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.normal()).collect()).expect("finite normals")
}

/// Random instance within d ≤ 16, B ≤ 8, M ≤ 8, with at least two classes of
/// two samples so triplet mining is well-posed.
fn instance(seed: u64) -> Instance {
    let mut rng = RngState::new(seed);
    let d = 2 + rng.below(15);
    let per_class = 2;
    let classes = 2 + rng.below(3);
    let b = classes * per_class;
    let m = classes + rng.below(9 - classes);
    let mut ids: Vec<usize> = (0..m).collect();
    rng.shuffle(&mut ids);
    let labels = (0..b).map(|i| ids[i / per_class]).collect();
    let batch = EmbeddingBatch::new(random_matrix(&mut rng, b, d), labels).expect("valid batch");
    let bank = CenterBank::new(random_matrix(&mut rng, d, m));
    let mut mask = sample_bernoulli(&MaskConfig::default(), d, &mut rng);
    if mask.count_ones() == 0 {
        mask = SubspaceMask::ones(d);
    }
    Instance { batch, bank, mask, rng }
}

fn corrupt_if(name: &str, cfg: &SuiteConfig, m: &mut Matrix) {
    if cfg.corrupt.as_deref() == Some(name) {
        m.as_mut_slice()[0] += 0.1 * (1.0 + m.as_slice()[0].abs());
    }
}

fn check_report(
    name: &str,
    cfg: &SuiteConfig,
    inst: &Instance,
    report: LossReport,
    eval: &dyn Fn(&EmbeddingBatch, &CenterBank) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    if let Some(mut g) = report.grad_features {
        corrupt_if(name, cfg, &mut g);
        let num = central_diff(&inst.batch.features, cfg.step, |f| {
            let b = EmbeddingBatch { features: f.clone(), labels: inst.batch.labels.clone() };
            eval(&b, &inst.bank)
        });
        worst = worst.max(relative_error(&g, &num));
    }
    if let Some(mut g) = report.grad_centers {
        corrupt_if(name, cfg, &mut g);
        let num = central_diff(&inst.bank.weights, cfg.step, |w| {
            eval(&inst.batch, &CenterBank::new(w.clone()))
        });
        worst = worst.max(relative_error(&g, &num));
    }
    worst
}

fn check_op(name: &str, cfg: &SuiteConfig, seed: u64) -> f64 {
    let mut inst = instance(seed);
    let margin = 0.3;
    let classes = inst.batch.classes();
    match name {
        "softmax_ce" => {
            let eval = |b: &EmbeddingBatch, w: &CenterBank| softmax_ce(b, w).unwrap().value;
            let r = softmax_ce(&inst.batch, &inst.bank).unwrap();
            check_report(name, cfg, &inst, r, &eval)
        }
        "triplet_batch_hard" => {
            let eval = |b: &EmbeddingBatch, _: &CenterBank| triplet_batch_hard(b, margin).unwrap().value;
            let r = triplet_batch_hard(&inst.batch, margin).unwrap();
            check_report(name, cfg, &inst, r, &eval)
        }
        "l_intra" => {
            let eval = |b: &EmbeddingBatch, w: &CenterBank| l_intra(b, w).unwrap().value;
            let r = l_intra(&inst.batch, &inst.bank).unwrap();
            check_report(name, cfg, &inst, r, &eval)
        }
        "l_intra_masked" => {
            let mask = inst.mask.clone();
            let eval = move |b: &EmbeddingBatch, w: &CenterBank| l_intra_masked(b, w, &mask).unwrap().value;
            let r = l_intra_masked(&inst.batch, &inst.bank, &inst.mask).unwrap();
            check_report(name, cfg, &inst, r, &eval)
        }
        "l_inter_orth" => {
            let lambda = 0.5 + inst.rng.uniform();
            let c = classes.clone();
            let eval = move |_: &EmbeddingBatch, w: &CenterBank| l_inter_orth(w, &c, lambda).unwrap().value;
            let r = l_inter_orth(&inst.bank, &classes, lambda).unwrap();
            check_report(name, cfg, &inst, r, &eval)
        }
        "l_inter_max" => {
            let c = classes.clone();
            let eval = move |_: &EmbeddingBatch, w: &CenterBank| l_inter_max(w, &c).unwrap().value;
            let r = l_inter_max(&inst.bank, &classes).unwrap();
            check_report(name, cfg, &inst, r, &eval)
        }
        "l_inter_euclid" => {
            // Margin on the scale of typical center distances so some hinges are active.
            let m = (0.5 + inst.rng.uniform()) * (2.0 * inst.bank.dim() as f64).sqrt();
            let eval = move |b: &EmbeddingBatch, w: &CenterBank| l_inter_euclid(b, w, m, false).unwrap().value;
            let r = l_inter_euclid(&inst.batch, &inst.bank, m, false).unwrap();
            check_report(name, cfg, &inst, r, &eval)
        }
        "total_loss" => {
            let weights = LossWeights { alpha1: 1.0, alpha2: 0.5, alpha3: 0.2, ..Default::default() };
            let mask = inst.mask.clone();
            let c = classes.clone();
            let w2 = weights.clone();
            let eval = move |b: &EmbeddingBatch, w: &CenterBank| {
                total_loss(b, w, &w2, &mask, &c).unwrap().report.value
            };
            let r = total_loss(&inst.batch, &inst.bank, &weights, &inst.mask, &classes).unwrap().report;
            check_report(name, cfg, &inst, r, &eval)
        }
        "pooling_head" => check_head(cfg, &mut inst),
        other => panic!("unknown gradcheck op {other}"),
    }
}

/// Branch triplets plus a random linear read-out of the fused features,
/// differentiated with respect to the raw feature maps.
fn check_head(cfg: &SuiteConfig, inst: &mut Instance) -> f64 {
    let rng = &mut inst.rng;
    let b = inst.batch.len();
    let c = inst.batch.dim();
    let (h, w) = (1 + rng.below(3), 1 + rng.below(3));
    let maps = random_matrix(rng, b, c * h * w);
    let proj = random_matrix(rng, b, c);
    let labels = inst.batch.labels.clone();
    let to_maps = |m: &Matrix| -> Vec<FeatureMap> {
        (0..b).map(|i| FeatureMap::new(c, h, w, m.row(i).to_vec()).unwrap()).collect()
    };
    let branch_weight = 1.0;
    let head = head_losses(&to_maps(&maps), &labels, 0.3).unwrap();
    let grads = head.backward_shared(branch_weight, Some(&proj));
    let mut analytic =
        Matrix::new(b, c * h * w, grads.into_iter().flat_map(|g| g.data).collect()).unwrap();
    corrupt_if("pooling_head", cfg, &mut analytic);
    let numeric = central_diff(&maps, cfg.step, |m| {
        let head = head_losses(&to_maps(m), &labels, 0.3).unwrap();
        let read: f64 = head
            .fused
            .features
            .as_slice()
            .iter()
            .zip(proj.as_slice())
            .map(|(x, p)| x * p)
            .sum();
        head.branch_loss(branch_weight) + read
    });
    relative_error(&analytic, &numeric)
}

/// Runs every op over `cfg.instances` seeded instances.
pub fn run_suite(cfg: &SuiteConfig) -> Vec<OpCheck> {
    OPS.iter()
        .enumerate()
        .map(|(op_idx, &name)| {
            let mut worst = (0.0f64, cfg.seed);
            for i in 0..cfg.instances {
                let seed = cfg
                    .seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add((op_idx * 10_000 + i) as u64);
                let err = check_op(name, cfg, seed);
                if err > worst.0 || i == 0 {
                    worst = (err.max(worst.0), seed);
                }
            }
            OpCheck {
                op: name.to_string(),
                instances: cfg.instances,
                max_rel_error: worst.0,
                worst_seed: worst.1,
                passed: worst.0 < cfg.tolerance,
            }
        })
        .collect()
}
