use ocl_core::data::{Dataset, SyntheticSpec};
use ocl_core::model::{ExtractorConfig, InputShape};
use ocl_core::sampler::PkBatchSpec;
use ocl_core::trainer::{model_metrics, train, TrainConfig, TrainData, Trainer};

fn ten_class_data() -> TrainData {
    let spec = SyntheticSpec { samples_per_class: 60, ..Default::default() };
    TrainData::from_dataset(&Dataset::generate(&spec, 11).unwrap().0).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        extractor: ExtractorConfig { input: InputShape::Vector { dim: 32 }, ..Default::default() },
        batch: PkBatchSpec { p: 8, k: 4 },
        epochs,
        eval_every: 10,
        ..Default::default()
    }
}

#[test]
fn baseline_softmax_decreases() {
    let data = ten_class_data();
    let mut cfg = config(30);
    cfg.weights.alpha2 = 0.0;
    cfg.weights.alpha3 = 0.0;
    let t = train(cfg, &data).unwrap();
    let first = t.trace.first().unwrap();
    let last = t.trace.last().unwrap();
    assert!(last.softmax < first.softmax, "{} -> {}", first.softmax, last.softmax);
    assert_eq!(last.intra, 0.0);
    assert_eq!(last.inter, 0.0);
}

#[test]
fn trace_schema_is_fixed() {
    let data = ten_class_data();
    let mut cfg = config(2);
    cfg.eval_every = 2;
    cfg.weights.alpha2 = 0.0;
    let t = train(cfg, &data).unwrap();
    let keys = |line: &str| -> Vec<String> {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        v.as_object().unwrap().keys().cloned().collect()
    };
    let a = keys(&t.trace[0].to_json_line());
    let b = keys(&t.trace[1].to_json_line());
    assert_eq!(a, b);
    for k in ["softmax", "triplet", "intra", "inter", "triplet_ap", "triplet_mp", "lr", "rank1", "map"] {
        assert!(a.iter().any(|x| x == k), "missing {k}");
    }
    assert!(t.trace[0].rank1.is_none());
    assert!(t.trace[1].rank1.is_some());
}

#[test]
fn full_loss_training_improves_retrieval_over_init() {
    let data = ten_class_data();
    let init = Trainer::new(config(15), &data).unwrap();
    let before = model_metrics(&init.model, &data, 10).unwrap();
    let t = train(config(15), &data).unwrap();
    let after = model_metrics(&t.model, &data, 10).unwrap();
    let (rb, ra) = (before.retrieval.unwrap(), after.retrieval.unwrap());
    assert!(ra.map > rb.map, "mAP {} -> {}", rb.map, ra.map);
    assert!(after.compactness < before.compactness);
}
