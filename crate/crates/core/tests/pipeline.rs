use std::fs;

use npu_prefill::experiment::{
    cmd_calibrate, cmd_prefill, prompt_tokens, CalibrationConfig, ExperimentConfig, CALIBRATION_FILE,
    HOT_CHANNELS_FILE, IMPORTANCE_FILE, MANIFEST_FILE, WEIGHTS_FILE,
};
use npu_prefill::graph::plan_chunks;
use npu_prefill::model::{build_model, ModelConfig};
use npu_prefill::prefill::{calibrate_model, chunked_prefill, QuantMode};
use npu_prefill::quant::ImportanceTable;

fn small_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 64,
        heads: 4,
        vocab: 256,
        ..ModelConfig::default()
    }
}

fn config(dir: &std::path::Path, model: ModelConfig) -> ExperimentConfig {
    ExperimentConfig {
        seed: Some(11),
        out_dir: dir.to_path_buf(),
        model,
        prompt_lens: vec![64],
        chunk_len: 32,
        calibration: CalibrationConfig {
            prompts: 3,
            prompt_len: 64,
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn calibration_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), small_model());
    let files = [WEIGHTS_FILE, MANIFEST_FILE, CALIBRATION_FILE, HOT_CHANNELS_FILE, IMPORTANCE_FILE];
    cmd_calibrate(&cfg).unwrap();
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    cmd_calibrate(&cfg).unwrap();
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&fs::read(dir.path().join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn twenty_layers_prune_seventeen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        ModelConfig {
            layers: 20,
            hidden: 32,
            ..small_model()
        },
    );
    let r = cmd_calibrate(&cfg).unwrap();
    assert_eq!(r.calibration.unwrap().pruned_layers.len(), 17);
    let table: ImportanceTable =
        serde_json::from_str(&fs::read_to_string(dir.path().join(IMPORTANCE_FILE)).unwrap()).unwrap();
    assert_eq!(table.layers.iter().filter(|l| l.pruned).count(), 17);
}

#[test]
fn percentile_sweep_is_monotone() {
    let cfg = ModelConfig {
        seed: 4,
        ..small_model()
    };
    let model = build_model(&cfg).unwrap();
    let corpus: Vec<Vec<u32>> = (0..3).map(|i| prompt_tokens(4, &format!("c{i}"), 96, cfg.vocab)).collect();
    let mut prev = u64::MAX;
    for p in [99.0, 99.5, 99.9, 99.99] {
        let cal = calibrate_model(&model, &corpus, p).unwrap();
        let total: u64 = cal.profiles.iter().map(|x| x.total_outliers()).sum();
        assert!(total <= prev, "p{p}: {total} > {prev}");
        prev = total;
    }
}

#[test]
fn shadow_beats_naive_on_outlier_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig {
        hidden: 128,
        ..small_model()
    };
    let cfg = ExperimentConfig {
        prune_rate: 0.0,
        prompt_lens: vec![100, 128],
        ..config(dir.path(), model.clone())
    };
    let built = build_model(&cfg.model_config(11)).unwrap();
    for &len in &cfg.prompt_lens {
        let toks = prompt_tokens(11, &format!("prompts-{len}"), len, model.vocab);
        assert!(toks.iter().any(|t| built.spike_tokens.contains(t)), "prompt {len} has no outlier token");
    }
    cmd_calibrate(&cfg).unwrap();
    let r = cmd_prefill(&cfg).unwrap();
    for p in &r.prompts {
        let modes = &p.prefill.as_ref().unwrap().modes;
        let err = |m: QuantMode| modes.iter().find(|x| x.mode == m).unwrap().max_abs_error;
        assert!(err(QuantMode::Float32) <= 1e-4);
        assert!(
            err(QuantMode::W8A8Shadow) < err(QuantMode::W8A8Naive),
            "prompt {}: shadow {} naive {}",
            p.prompt_len,
            err(QuantMode::W8A8Shadow),
            err(QuantMode::W8A8Naive)
        );
    }
}

#[test]
fn long_prompt_trace_has_four_chunks() {
    let cfg = ModelConfig {
        layers: 1,
        hidden: 32,
        heads: 2,
        ..small_model()
    };
    let model = build_model(&cfg).unwrap();
    let toks = prompt_tokens(1, "p", 1024, cfg.vocab);
    let out = chunked_prefill(&model, &toks, &plan_chunks(1024, 256).unwrap(), QuantMode::Float32, None).unwrap();
    assert_eq!(out.trace.num_chunks, 4);
    let chunks: std::collections::BTreeSet<usize> = out.trace.entries.iter().map(|e| e.chunk).collect();
    assert_eq!(chunks.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert_eq!(out.trace.entries.len(), 4 * 5);
}
