use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ocl_core::data::{Dataset, SyntheticSpec};
use ocl_core::eval::write_embeddings_csv;
use ocl_core::gradcheck::{run_suite, OpCheck, SuiteConfig};
use ocl_core::masking::MaskStrategy;
use ocl_core::trainer::{embed_set, model_metrics, Checkpoint, ModelMetrics, TrainConfig, TrainData, Trainer};

use crate::{CliError, RunConfig};

pub const DATASET_FILE: &str = "dataset.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const ABLATION_FILE: &str = "ablation.csv";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

/// Writes the synthetic dataset CSV and its manifest into `dir`.
pub fn generate(spec: &SyntheticSpec, seed: u64, dir: &Path) -> Result<PathBuf, CliError> {
    let problems = spec.violations();
    if !problems.is_empty() {
        return Err(CliError::Config(problems.join("\n")));
    }
    create_dir(dir)?;
    let (ds, manifest) = Dataset::generate(spec, seed)?;
    let path = dir.join(DATASET_FILE);
    ds.write_csv(BufWriter::new(File::create(&path)?))?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub data: TrainData,
    pub trace_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Trains (or resumes) and writes the JSONL trace plus the final checkpoint.
/// The trace file is appended to as epochs finish, so a diverged run still
/// leaves its completed epochs on disk.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let data = TrainData::from_dataset(&ds)?;
    let tcfg = cfg.resolved_train(ds.dim());
    let mut trainer = match resume {
        Some(p) => Trainer::resume(load_checkpoint(p)?, tcfg, &data)?,
        None => Trainer::new(tcfg, &data)?,
    };
    create_dir(&cfg.output_dir)?;
    let trace_path = cfg.output_dir.join(TRACE_FILE);
    let checkpoint_path = cfg.output_dir.join(CHECKPOINT_FILE);
    let mut trace = BufWriter::new(File::create(&trace_path)?);
    for rec in &trainer.trace {
        writeln!(trace, "{}", rec.to_json_line())?;
    }
    while trainer.epochs_done < trainer.config.epochs {
        let line = trainer.run_epoch(&data)?.to_json_line();
        writeln!(trace, "{line}")?;
        trace.flush()?;
    }
    trace.flush()?;
    trainer.checkpoint(&data).save(&checkpoint_path)?;
    Ok(TrainOutcome { trainer, data, trace_path, checkpoint_path })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| match e {
        ocl_core::Error::Io(io) => CliError::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        ocl_core::Error::Json(j) => CliError::Config(format!("checkpoint {} is malformed: {j}", path.display())),
        other => other.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
    pub center_corr_mean: f64,
    pub center_corr_max: f64,
    pub compactness: f64,
}

impl EvalReport {
    fn from_metrics(m: &ModelMetrics) -> Result<Self, CliError> {
        let r = m
            .retrieval
            .as_ref()
            .ok_or_else(|| CliError::Config("dataset has no query/gallery split to evaluate".into()))?;
        Ok(Self {
            rank1: r.rank(1),
            rank5: r.rank(5),
            rank10: r.rank(10),
            map: r.map,
            cmc: r.cmc.clone(),
            evaluated_queries: r.evaluated_queries,
            skipped_queries: r.skipped_queries,
            center_corr_mean: m.center_corr_mean,
            center_corr_max: m.center_corr_max,
            compactness: m.compactness,
        })
    }
}

/// Embeds query and gallery with a checkpointed model and writes
/// `metrics.json` to `out_dir`; optionally exports both embedding sets.
pub fn eval(checkpoint: &Path, dataset: &Dataset, out_dir: &Path, export: bool) -> Result<EvalReport, CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let expected = ck.config.extractor.input.flat_len();
    if dataset.dim() != expected {
        return Err(CliError::Config(format!(
            "checkpoint expects {expected} input features but the dataset has {}",
            dataset.dim()
        )));
    }
    let data = TrainData::from_dataset(dataset)?;
    if data.class_ids != ck.class_ids {
        return Err(CliError::Config(format!(
            "checkpoint was trained on {} classes but the dataset's training split has {} (or different ids)",
            ck.class_ids.len(),
            data.class_ids.len()
        )));
    }
    let metrics = model_metrics(&ck.model, &data, ck.config.eval_k_max.max(10))?;
    let report = EvalReport::from_metrics(&metrics)?;
    create_dir(out_dir)?;
    fs::write(out_dir.join(METRICS_FILE), serde_json::to_string_pretty(&report)?)?;
    if export {
        for (name, set) in [("query", &data.query), ("gallery", &data.gallery)] {
            if let Some(set) = set {
                let emb = embed_set(&ck.model, set)?;
                write_embeddings_csv(&emb, BufWriter::new(File::create(out_dir.join(format!("embeddings_{name}.csv")))?))?;
            }
        }
    }
    Ok(report)
}

/// Runs the finite-difference suite and renders the per-op table. Fails with
/// a verification error naming each failing op and its worst seed.
pub fn gradcheck(suite: &SuiteConfig) -> (Vec<OpCheck>, String, Result<(), CliError>) {
    let checks = run_suite(suite);
    let mut table = format!("{:<20} {:>9} {:>14} {:>10}  status\n", "op", "instances", "max_rel_err", "worst_seed");
    for c in &checks {
        table += &format!(
            "{:<20} {:>9} {:>14.3e} {:>10}  {}\n",
            c.op,
            c.instances,
            c.max_rel_error,
            c.worst_seed,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} (seed {}, rel err {:.3e})", c.op, c.worst_seed, c.max_rel_error))
        .collect();
    let status = if failed.is_empty() { Ok(()) } else { Err(CliError::Verification(failed.join(", "))) };
    (checks, table, status)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rung: String,
    pub alpha2: f64,
    pub alpha3: f64,
    pub mask_p: f64,
    pub strategy: MaskStrategy,
    pub epochs: usize,
    pub rank1: f64,
    pub map: f64,
    pub center_corr_mean: f64,
    pub compactness: f64,
    pub compactness_init: f64,
}

/// The ladder of loss configurations, each derived from `base`:
/// softmax+triplet only, then the unmasked intra pull, the masked pull, and
/// the masked pull with the inter-center term. With `strategy_sweep` the
/// full configuration is repeated once per mask strategy.
pub fn ablation_ladder(base: &TrainConfig, strategy_sweep: bool) -> Vec<(String, TrainConfig)> {
    let with = |a2: f64, a3: f64, p: f64, s: MaskStrategy| {
        let mut c = base.clone();
        c.weights.alpha2 = a2;
        c.weights.alpha3 = a3;
        c.mask.p = p;
        c.mask.strategy = s;
        c
    };
    let (a2, a3, p, s) = (base.weights.alpha2, base.weights.alpha3, base.mask.p, base.mask.strategy);
    let mut rungs = vec![
        ("baseline".to_string(), with(0.0, 0.0, p, s)),
        ("+intra".to_string(), with(a2, 0.0, 1.0, s)),
        ("+masked_intra".to_string(), with(a2, 0.0, p, s)),
        ("+masked_intra+inter".to_string(), with(a2, a3, p, s)),
    ];
    if strategy_sweep {
        for strat in [MaskStrategy::Bernoulli, MaskStrategy::Weighted, MaskStrategy::Hard] {
            rungs.push((format!("full/{strat}"), with(a2, a3, p, strat)));
        }
    }
    rungs
}

/// Trains every rung from the same seed and writes `ablation.csv`.
pub fn ablate(cfg: &RunConfig, strategy_sweep: bool) -> Result<Vec<AblationRow>, CliError> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let data = TrainData::from_dataset(&ds)?;
    let base = cfg.resolved_train(ds.dim());
    let mut rows = Vec::new();
    for (name, tcfg) in ablation_ladder(&base, strategy_sweep) {
        let mut t = Trainer::new(tcfg.clone(), &data)?;
        let init = model_metrics(&t.model, &data, tcfg.eval_k_max)?;
        t.run(&data)?;
        let m = model_metrics(&t.model, &data, tcfg.eval_k_max)?;
        let r = EvalReport::from_metrics(&m)?;
        rows.push(AblationRow {
            rung: name,
            alpha2: tcfg.weights.alpha2,
            alpha3: tcfg.weights.alpha3,
            mask_p: tcfg.mask.p,
            strategy: tcfg.mask.strategy,
            epochs: tcfg.epochs,
            rank1: r.rank1,
            map: r.map,
            center_corr_mean: m.center_corr_mean,
            compactness: m.compactness,
            compactness_init: init.compactness,
        });
    }
    create_dir(&cfg.output_dir)?;
    let mut w = csv::Writer::from_path(cfg.output_dir.join(ABLATION_FILE))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_shapes() {
        let base = TrainConfig::default();
        let rungs = ablation_ladder(&base, false);
        assert_eq!(rungs.len(), 4);
        assert_eq!(rungs[0].1.weights.alpha2, 0.0);
        assert_eq!(rungs[0].1.weights.alpha3, 0.0);
        assert_eq!(rungs[1].1.mask.p, 1.0);
        assert_eq!(rungs[1].1.weights.alpha3, 0.0);
        assert_eq!(rungs[2].1.mask.p, base.mask.p);
        assert_eq!(rungs[3].1.weights, base.weights);
        let sweep = ablation_ladder(&base, true);
        assert_eq!(sweep.len(), 7);
        assert_eq!(sweep[6].1.mask.strategy, MaskStrategy::Hard);
    }

    #[test]
    fn gradcheck_table_lists_every_op() {
        let (checks, table, status) = gradcheck(&SuiteConfig { instances: 2, ..Default::default() });
        assert!(status.is_ok());
        for c in &checks {
            assert!(table.contains(&c.op));
        }
    }
}
