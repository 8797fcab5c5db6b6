use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ssdwm"))
}

fn scratch(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("ssdwm-cli-{}-{name}", std::process::id()))
}

#[test]
fn verify_passes_and_names_every_check() {
    let out = bin().arg("verify").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    for name in ["mode_equivalence", "linear_attention", "world_model_gradients", "dfs_laws", "free_bits", "causality", "tokenizer_round_trip"] {
        assert!(text.lines().any(|l| l.starts_with("PASS") && l.contains(name)), "{name} missing:\n{text}");
    }
}

#[test]
fn injected_fault_is_caught() {
    let out = bin().args(["verify", "--inject-fault", "linear-attention"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!out.status.success());
    let failed: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(failed.len(), 1, "{text}");
    assert!(failed[0].contains("linear_attention"));
}

#[test]
fn bench_writes_csv_and_config_echo() {
    let dir = scratch("bench");
    let cfg = dir.join("in.cfg");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(&cfg, "d = 16\nhead_dim = 8\nstate = 4\nchunk = 4\nbench_lengths = 26, 52\nbench_warmup = 0\nbench_iters = 1\n").unwrap();
    let out = bin().args(["bench-scaling", "--mode", "quadratic", "--seed", "7", "--config"]).arg(&cfg).arg("--out").arg(&dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo = std::fs::read_to_string(dir.join("config.cfg")).unwrap();
    assert!(echo.contains("seed = 7") && echo.contains("mode = quadratic"), "{echo}");
    let csv = std::fs::read_to_string(dir.join("bench_quadratic.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("config_hash,step,ms_per_step")), "{csv}");
    assert!(!dir.join("bench_chunked.csv").exists());
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn rejects_unknown_sampler_and_bad_config() {
    let out = bin().args(["train-agent", "--sampler", "priority"]).output().unwrap();
    assert!(!out.status.success());
    let dir = scratch("badcfg");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "d = 64\nno_such_key = 1\n").unwrap();
    let out = bin().arg("train-gridworld").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    std::fs::remove_dir_all(dir).ok();
}
