//! End-to-end training: P×K sampling → extractor → dual-pooling head →
//! batch norm → mask draw → total loss (+ branch triplets) → backward → Adam.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::eval::{center_correlation_report, compactness_report, evaluate, GallerySet, RetrievalResult};
use crate::linalg::{Matrix, RngState};
use crate::losses::{total_loss, EmbeddingBatch, LossComponents, LossWeights};
use crate::masking::{draw_mask, MaskConfig, SubspaceMask};
use crate::model::{ExtractorConfig, InputShape, Model};
use crate::optim::{adam_step, lr_at, AdamConfig, OptimState, Schedule};
use crate::pooling::{head_forward, FeatureMap};
use crate::sampler::{PkBatchSpec, PkSampler};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub extractor: ExtractorConfig,
    pub weights: LossWeights,
    /// Weight of each pooling-branch triplet loss; `None` uses `alpha1`.
    pub branch_weight: Option<f64>,
    pub mask: MaskConfig,
    pub batch: PkBatchSpec,
    pub schedule: Schedule,
    /// Warmup length as a fraction of the first epoch's steps, used when
    /// `schedule.warmup_steps` is 0.
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Evaluate every this many epochs (0 disables in-loop evaluation).
    pub eval_every: usize,
    pub eval_k_max: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::default(),
            weights: LossWeights::default(),
            branch_weight: None,
            mask: MaskConfig::default(),
            batch: PkBatchSpec::default(),
            schedule: Schedule::default(),
            warmup_fraction: 0.1,
            adam: AdamConfig::default(),
            epochs: 30,
            eval_every: 5,
            eval_k_max: 10,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// Every problem with the config, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.extractor.violations();
        v.extend(self.weights.violations());
        v.extend(self.batch.violations());
        if let Err(e) = self.mask.validate() {
            v.push(e.to_string());
        }
        if self.branch_weight.is_some_and(|w| !(w.is_finite() && w >= 0.0)) {
            v.push("branch_weight must be finite and >= 0".into());
        }
        if !(self.schedule.base_lr.is_finite() && self.schedule.base_lr > 0.0) {
            v.push("base_lr must be positive".into());
        }
        if !(self.schedule.decay_factor.is_finite() && self.schedule.decay_factor > 0.0) {
            v.push("decay_factor must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            v.push("warmup_fraction must lie in [0, 1]".into());
        }
        if !(self.adam.weight_decay.is_finite() && self.adam.weight_decay >= 0.0) {
            v.push("weight_decay must be finite and >= 0".into());
        }
        if self.eval_k_max == 0 {
            v.push("eval_k_max must be positive".into());
        }
        v
    }

    pub fn branch_weight(&self) -> f64 {
        self.branch_weight.unwrap_or(self.weights.alpha1)
    }

    /// Hash of everything that shapes the trajectory except `epochs`, so a
    /// run can be resumed with a longer horizon.
    pub fn trajectory_hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-epoch trace line. Every key is always present; disabled terms are 0
/// and evaluation fields are `null` off-cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub total: f64,
    pub softmax: f64,
    pub triplet: f64,
    pub intra: f64,
    pub inter: f64,
    pub triplet_ap: f64,
    pub triplet_mp: f64,
    pub rank1: Option<f64>,
    pub rank5: Option<f64>,
    pub rank10: Option<f64>,
    pub map: Option<f64>,
    pub center_corr_mean: Option<f64>,
    pub compactness: Option<f64>,
}

impl TraceRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

/// Encoded train split plus held-out query/gallery sets.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub features: Matrix,
    /// Class index (into the center bank) of each training row.
    pub labels: Vec<usize>,
    /// Identity id for each class index.
    pub class_ids: Vec<usize>,
    pub query: Option<GallerySet>,
    pub gallery: Option<GallerySet>,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let class_ids = ds.train_classes();
        if class_ids.is_empty() {
            return Err(invalid("dataset has no training rows"));
        }
        let train = ds.subset(Split::Train)?;
        let labels = train
            .ids
            .iter()
            .map(|id| class_ids.binary_search(id).expect("train id is a train class"))
            .collect();
        Ok(Self {
            features: train.embeddings,
            labels,
            class_ids,
            query: ds.subset(Split::Query).ok(),
            gallery: ds.subset(Split::Gallery).ok(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    fn rows(&self, idx: &[usize]) -> Matrix {
        let d = self.features.cols();
        let data = idx.iter().flat_map(|&i| self.features.row(i).to_vec()).collect();
        Matrix::from_raw(idx.len(), d, data)
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub model: Model,
    pub optim: OptimState,
    pub rng: RngState,
    pub epochs_done: usize,
    pub class_ids: Vec<usize>,
    pub trace: Vec<TraceRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Diagnostics of a model on held-out data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub retrieval: Option<RetrievalResult>,
    pub center_corr_mean: f64,
    pub center_corr_max: f64,
    /// Mean ‖v − c_y‖ over the training split in inference mode.
    pub compactness: f64,
}

/// Embeds a set in inference mode.
pub fn embed_set(model: &Model, set: &GallerySet) -> Result<GallerySet> {
    GallerySet::new(model.extractor.embed(&set.embeddings)?, set.ids.clone(), set.cameras.clone())
}

pub fn model_metrics(model: &Model, data: &TrainData, k_max: usize) -> Result<ModelMetrics> {
    let retrieval = match (&data.query, &data.gallery) {
        (Some(q), Some(g)) => Some(evaluate(&embed_set(model, q)?, &embed_set(model, g)?, k_max)?),
        _ => None,
    };
    let corr = center_correlation_report(&model.bank, None)?;
    let train = EmbeddingBatch::new(model.extractor.embed(&data.features)?, data.labels.clone())?;
    let compact = compactness_report(&train, &model.bank)?;
    Ok(ModelMetrics {
        retrieval,
        center_corr_mean: corr.mean_abs_off_diagonal,
        center_corr_max: corr.max_abs_off_diagonal,
        compactness: compact.global_mean,
    })
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub total: f64,
    pub components: LossComponents,
    pub triplet_ap: f64,
    pub triplet_mp: f64,
    pub lr: f64,
}

/// Training state machine. Owns the model, optimizer and RNG.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optim: OptimState,
    rng: RngState,
    sampler: PkSampler,
    pub epochs_done: usize,
    pub trace: Vec<TraceRecord>,
    /// Per-tensor flag: received a nonzero gradient during the last epoch.
    pub coverage: Vec<bool>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &TrainData) -> Result<Self> {
        let problems = config.violations();
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems.join("; ")));
        }
        check_input(&config.extractor.input, data.features.cols())?;
        let sampler = PkSampler::new(&data.labels, config.batch)?;
        let mut rng = RngState::new(config.seed);
        let model = Model::new(config.extractor.clone(), data.num_classes(), &mut rng)?;
        let shapes: Vec<usize> = model.param_slices().iter().map(|p| p.len()).collect();
        let optim = OptimState::new(config.schedule.clone(), config.adam, &shapes);
        let coverage = vec![false; shapes.len()];
        Ok(Self { config, model, optim, rng, sampler, epochs_done: 0, trace: Vec::new(), coverage })
    }

    pub fn resume(checkpoint: Checkpoint, config: TrainConfig, data: &TrainData) -> Result<Self> {
        if checkpoint.config_hash != config.trajectory_hash() {
            return Err(Error::InvalidConfig(
                "checkpoint was produced by a different configuration".into(),
            ));
        }
        if checkpoint.class_ids != data.class_ids {
            return Err(Error::InvalidConfig("checkpoint classes do not match the dataset".into()));
        }
        check_input(&config.extractor.input, data.features.cols())?;
        let sampler = PkSampler::new(&data.labels, config.batch)?;
        let coverage = vec![false; checkpoint.model.param_slices().len()];
        Ok(Self {
            config,
            model: checkpoint.model,
            optim: checkpoint.optim,
            rng: checkpoint.rng,
            sampler,
            epochs_done: checkpoint.epochs_done,
            trace: checkpoint.trace,
            coverage,
        })
    }

    pub fn checkpoint(&self, data: &TrainData) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: self.config.trajectory_hash(),
            config: self.config.clone(),
            model: self.model.clone(),
            optim: self.optim.clone(),
            rng: self.rng.clone(),
            epochs_done: self.epochs_done,
            class_ids: data.class_ids.clone(),
            trace: self.trace.clone(),
        }
    }

    /// One optimizer step on the given training rows.
    pub fn step(&mut self, data: &TrainData, idx: &[usize], epoch: usize) -> Result<StepOutput> {
        let x = data.rows(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let cfg = &self.config;
        let branch_weight = cfg.branch_weight();
        let ext = &mut self.model.extractor;

        let (maps, builder) = ext.forward_maps(&x)?;
        let ap = ext.to_feature_maps(&maps[0]);
        let mp = ext.to_feature_maps(maps.last().expect("pathway"));
        let head = head_forward(&ap, &mp, &labels, cfg.weights.triplet_margin).map_err(|e| diverged_or(e, self.optim.step, epoch))?;
        let cache = ext.bn_forward_train(&head.fused.features, builder, maps);
        let batch = EmbeddingBatch::new(cache.output().clone(), labels).map_err(|e| diverged_or(e, self.optim.step, epoch))?;

        let mask = if cfg.weights.alpha2 > 0.0 {
            draw_mask(&cfg.mask, &batch, &self.model.bank, &mut self.rng)?
        } else {
            SubspaceMask::ones(batch.dim())
        };
        let classes = batch.classes();
        let loss = total_loss(&batch, &self.model.bank, &cfg.weights, &mask, &classes)?;
        let total = loss.report.value + head.branch_loss(branch_weight);
        if !total.is_finite() {
            return Err(Error::Diverged { step: self.optim.step, epoch, detail: format!("loss is {total}") });
        }

        let mut grads = self.model.zero_grads();
        let n_ext = grads.len() - 1;
        let ext = &self.model.extractor;
        let g_v = loss.report.grad_features.as_ref().expect("total loss populates feature grads");
        let g_fused = ext.bn_backward(&cache, g_v, &mut grads[..n_ext]);
        let grad_maps = if ext.pathways() == 2 {
            let (g_ap, g_mp) = head.backward(branch_weight, Some(&g_fused));
            vec![stack_maps(&g_ap), stack_maps(&g_mp)]
        } else {
            vec![stack_maps(&head.backward_shared(branch_weight, Some(&g_fused)))]
        };
        ext.maps_backward(&cache, &grad_maps, &mut grads[..n_ext]);
        grads[n_ext] = loss.report.grad_centers.expect("total loss populates center grads").into_inner();

        for (flag, g) in self.coverage.iter_mut().zip(&grads) {
            *flag |= g.iter().any(|&x| x != 0.0);
        }

        let lr = lr_at(self.optim.step, epoch, &self.optim.schedule);
        adam_step(&mut self.model.param_slices_mut(), &grads, &mut self.optim, lr, epoch)?;
        Ok(StepOutput {
            total,
            components: loss.components,
            triplet_ap: head.triplet_ap.value,
            triplet_mp: head.triplet_mp.value,
            lr,
        })
    }

    /// Runs one epoch and appends its trace record.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<&TraceRecord> {
        let epoch = self.epochs_done;
        let batches = self.sampler.epoch(&mut self.rng);
        if self.optim.step == 0 && self.optim.schedule.warmup_steps == 0 {
            self.optim.schedule.warmup_steps = (self.config.warmup_fraction * batches.len() as f64).ceil() as u64;
        }
        self.coverage.iter_mut().for_each(|c| *c = false);
        let mut sums = [0.0f64; 7];
        let mut lr = 0.0;
        for idx in &batches {
            let out = self.step(data, idx, epoch)?;
            let c = out.components;
            for (s, v) in sums
                .iter_mut()
                .zip([out.total, c.softmax, c.triplet, c.intra, c.inter, out.triplet_ap, out.triplet_mp])
            {
                *s += v;
            }
            lr = out.lr;
        }
        let n = batches.len().max(1) as f64;
        let mut record = TraceRecord {
            epoch,
            steps: self.optim.step,
            lr,
            total: sums[0] / n,
            softmax: sums[1] / n,
            triplet: sums[2] / n,
            intra: sums[3] / n,
            inter: sums[4] / n,
            triplet_ap: sums[5] / n,
            triplet_mp: sums[6] / n,
            rank1: None,
            rank5: None,
            rank10: None,
            map: None,
            center_corr_mean: None,
            compactness: None,
        };
        if self.config.eval_every > 0 && (epoch + 1).is_multiple_of(self.config.eval_every) {
            let m = model_metrics(&self.model, data, self.config.eval_k_max)?;
            if let Some(r) = &m.retrieval {
                record.rank1 = Some(r.rank(1));
                record.rank5 = Some(r.rank(5));
                record.rank10 = Some(r.rank(10));
                record.map = Some(r.map);
            }
            record.center_corr_mean = Some(m.center_corr_mean);
            record.compactness = Some(m.compactness);
        }
        self.epochs_done += 1;
        self.trace.push(record);
        Ok(self.trace.last().expect("just pushed"))
    }

    /// Trains until `config.epochs` epochs are done.
    pub fn run(&mut self, data: &TrainData) -> Result<()> {
        while self.epochs_done < self.config.epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        self.model.param_names()
    }
}

fn check_input(input: &InputShape, cols: usize) -> Result<()> {
    if input.flat_len() != cols {
        return Err(Error::InvalidConfig(format!(
            "extractor expects {} input features but the dataset has {cols}",
            input.flat_len()
        )));
    }
    Ok(())
}

fn stack_maps(maps: &[FeatureMap]) -> Matrix {
    let cols = maps.first().map_or(0, |m| m.data.len());
    Matrix::from_raw(maps.len(), cols, maps.iter().flat_map(|m| m.data.iter().copied()).collect())
}

fn diverged_or(e: Error, step: u64, epoch: usize) -> Error {
    match e {
        Error::InvalidInput(msg) if msg.contains("finite") => Error::Diverged { step, epoch, detail: msg },
        other => other,
    }
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(config: TrainConfig, data: &TrainData) -> Result<Trainer> {
    let mut t = Trainer::new(config, data)?;
    t.run(data)?;
    Ok(t)
}
