//! Regression against a stored report. Set `NPU_PREFILL_BLESS=1` to rewrite
//! the golden file after an intended change.

use std::fs;
use std::path::PathBuf;

use npu_prefill::experiment::{cmd_demo, CalibrationConfig, ExperimentConfig};
use npu_prefill::model::ModelConfig;

fn golden_config(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        seed: Some(42),
        out_dir: dir.to_path_buf(),
        model: ModelConfig {
            layers: 2,
            hidden: 32,
            heads: 4,
            vocab: 128,
            ..ModelConfig::default()
        },
        prompt_lens: vec![20, 40],
        chunk_len: 16,
        calibration: CalibrationConfig {
            prompts: 2,
            prompt_len: 32,
        },
        decode_tokens: 8,
        ..ExperimentConfig::default()
    }
}

#[test]
fn demo_report_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_demo(&golden_config(dir.path())).unwrap();
    let text = report.to_json().unwrap();
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/small_report.json");
    if std::env::var_os("NPU_PREFILL_BLESS").is_some() || !golden.exists() {
        fs::write(&golden, &text).unwrap();
        return;
    }
    let expected = fs::read_to_string(&golden).unwrap();
    assert!(text == expected, "report differs from {}", golden.display());
}

#[test]
fn greedy_decode_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_demo(&golden_config(dir.path())).unwrap();
    let decode = report.decode.unwrap();
    assert_eq!(decode.prompt_len, 20);
    assert_eq!(decode.tokens, GOLDEN_TOKENS);
}

const GOLDEN_TOKENS: [u32; 8] = [78, 7, 85, 115, 47, 20, 115, 65];
