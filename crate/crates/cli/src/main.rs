use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use npu_prefill::experiment::{
    cmd_calibrate, cmd_demo, cmd_prefill, cmd_report, cmd_schedule, ExperimentConfig, Overrides, RunReport,
    REPORT_FILE, SUMMARY_FILE,
};
use npu_prefill::prefill::QuantMode;
use npu_prefill::Error;

/// Chunked W8A8 prefill with shadow outliers and NPU/CPU subgraph scheduling.
#[derive(Parser)]
#[command(name = "npu-prefill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the toy model and write calibration artifacts.
    Calibrate(Common),
    /// Run chunked prefill in every quantization mode and report logit errors.
    Prefill(Common),
    /// Simulate in-order and out-of-order subgraph schedules.
    Schedule {
        #[command(flatten)]
        common: Common,
        /// Also search for the optimal schedule (small instances only).
        #[arg(long)]
        optimal: bool,
    },
    /// Merge report fragments and print a summary.
    Report {
        #[arg(required = true)]
        fragments: Vec<PathBuf>,
        /// Directory for the merged report and summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate, prefill, schedule and decode end to end.
    Demo(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, env = "NPU_PREFILL_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "NPU_PREFILL_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "NPU_PREFILL_CHUNK_LEN")]
    chunk_len: Option<usize>,
    /// float32, w8a8-naive or w8a8-shadow.
    #[arg(long, env = "NPU_PREFILL_QUANT_MODE")]
    quant_mode: Option<QuantMode>,
    #[arg(long, env = "NPU_PREFILL_PRUNE_RATE")]
    prune_rate: Option<f64>,
    /// Output directory.
    #[arg(long, env = "NPU_PREFILL_OUT")]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref())?;
        cfg.apply(&Overrides {
            seed: self.seed,
            chunk_len: self.chunk_len,
            quant_mode: self.quant_mode,
            prune_rate: self.prune_rate,
            out_dir: self.out.clone(),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(cfg: &ExperimentConfig, name: &str, report: &RunReport) -> Result<(), Error> {
    write(&cfg.out_dir.join(name), &report.to_json()?)?;
    print!("{}", report.summary());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Calibrate(c) => {
            let cfg = c.resolve()?;
            emit(&cfg, "calibrate.json", &cmd_calibrate(&cfg)?)
        }
        Command::Prefill(c) => {
            let cfg = c.resolve()?;
            emit(&cfg, "prefill.json", &cmd_prefill(&cfg)?)
        }
        Command::Schedule { common, optimal } => {
            let mut cfg = common.resolve()?;
            cfg.optimal |= optimal;
            emit(&cfg, "schedule.json", &cmd_schedule(&cfg)?)
        }
        Command::Report { fragments, out } => {
            let (report, summary) = cmd_report(&fragments)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write(&dir.join(REPORT_FILE), &report.to_json()?)?;
                write(&dir.join(SUMMARY_FILE), &summary)?;
            }
            print!("{summary}");
            Ok(())
        }
        Command::Demo(c) => {
            let cfg = c.resolve()?;
            print!("{}", cmd_demo(&cfg)?.summary());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_io() => 3,
        Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

fn exec<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(exec(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "prompt_lens = [24]\nchunk_len = 8\ndecode_tokens = 2\n\n[model]\nlayers = 2\nhidden = 32\nheads = 4\nvocab = 64\n\n[calibration]\nprompts = 2\nprompt_len = 16\n";

    fn setup() -> (tempfile::TempDir, String, String) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("exp.toml");
        fs::write(&cfg, SMALL).unwrap();
        let out = dir.path().join("out");
        (dir, cfg.display().to_string(), out.display().to_string())
    }

    fn parse(args: &[&str]) -> Common {
        match Cli::try_parse_from(args).unwrap().command {
            Command::Demo(c) | Command::Calibrate(c) | Command::Prefill(c) => c,
            Command::Schedule { common, .. } => common,
            Command::Report { .. } => unreachable!(),
        }
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(exec(["npu-prefill", "frobnicate"]), 1);
        assert_eq!(exec(["npu-prefill", "report"]), 1);
        assert_eq!(exec(["npu-prefill", "prefill", "--quant-mode", "int4", "--seed", "1"]), 1);
        assert_eq!(exec(["npu-prefill", "--help"]), 0);
    }

    /// All environment-dependent checks share one test so no other test sees
    /// the variable set.
    #[test]
    fn seed_precedence_and_requirement() {
        let (_dir, cfg, out) = setup();
        assert_eq!(exec(["npu-prefill", "calibrate", "--config", &cfg, "--out", &out]), 1);

        fs::write(&cfg, format!("seed = 5\n{SMALL}")).unwrap();
        let c = parse(&["npu-prefill", "demo", "--config", &cfg]);
        assert_eq!(c.resolve().unwrap().seed, Some(5));

        std::env::set_var("NPU_PREFILL_SEED", "6");
        let c = parse(&["npu-prefill", "demo", "--config", &cfg]);
        assert_eq!(c.resolve().unwrap().seed, Some(6));
        let c = parse(&["npu-prefill", "demo", "--config", &cfg, "--seed", "7", "--chunk-len", "4"]);
        let r = c.resolve().unwrap();
        std::env::remove_var("NPU_PREFILL_SEED");
        assert_eq!((r.seed, r.chunk_len), (Some(7), 4));
    }

    #[test]
    fn pipeline_and_exit_codes() {
        let (dir, cfg, out) = setup();
        let base = ["--config", cfg.as_str(), "--out", out.as_str(), "--seed", "3"];
        let with = |cmd: &str, extra: &[&str]| {
            let mut v = vec!["npu-prefill", cmd];
            v.extend_from_slice(&base);
            v.extend_from_slice(extra);
            exec(v)
        };
        // quantized prefill before calibration
        assert_eq!(with("prefill", &[]), 3);
        assert_eq!(with("prefill", &["--quant-mode", "float32"]), 0);
        assert_eq!(with("calibrate", &[]), 0);
        assert_eq!(with("prefill", &["--quant-mode", "w8a8-shadow"]), 0);
        assert_eq!(with("schedule", &[]), 0);
        // 3 chunks x 10 stages exceed the exhaustive search limit
        assert_eq!(with("schedule", &["--optimal"]), 2);
        assert_eq!(with("prefill", &["--prune-rate", "1.5"]), 1);

        let outp = Path::new(&out);
        for f in ["calibrate.json", "prefill.json", "schedule.json", "costs_24.json", "gantt_24.csv", "trace_24.json"] {
            assert!(outp.join(f).is_file(), "{f}");
        }
        let frags: Vec<String> = ["calibrate.json", "prefill.json", "schedule.json"]
            .iter()
            .map(|f| outp.join(f).display().to_string())
            .collect();
        let merged = dir.path().join("merged");
        let mut args = vec!["npu-prefill", "report", "--out", merged.to_str().unwrap()];
        args.extend(frags.iter().map(String::as_str));
        assert_eq!(exec(args), 0);
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(merged.join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(report["prompts"][0]["num_chunks"], 3);
        assert!(report["prompts"][0]["prefill"].is_object());
        assert!(report["prompts"][0]["schedule"].is_object());
        assert!(report["calibration"].is_object());

        let bad = dir.path().join("bad.json");
        fs::write(&bad, fs::read_to_string(&frags[0]).unwrap().replacen("\"version\": 1", "\"version\": 9", 1)).unwrap();
        assert_eq!(exec(["npu-prefill", "report", bad.to_str().unwrap()]), 2);
        assert_eq!(exec(["npu-prefill", "report", "/nonexistent/x.json"]), 3);
    }
}
