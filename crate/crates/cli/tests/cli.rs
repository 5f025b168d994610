use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const SMALL: &str = r#"
schema_version = 1
checkpoint_every = 2

[link]
n_spans = 2

[train]
batch_symbols = 64
iterations = 4
use_preemph = false
train_preemph = false

[finetune]
corpus_sequences = 1
sequence_symbols = 256
iterations = 3
batch_symbols = 64
use_preemph = false

[eval]
n_seq = 2
seq_len = 256
use_preemph = false
"#;

fn fiber_ae(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_fiber-ae"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn column(csv_text: &str, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

#[test]
fn validate_rp_without_kerr_hits_the_sdr_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[link]\nn_spans = 2\ngamma = 0.0\n[validate]\nn_symbols = 512\npowers_dbm = [-2.0, 0.0, 3.0]\n";
    ok(&fiber_ae(dir.path(), cfg, &["validate-rp"]));
    let text = fs::read_to_string(dir.path().join("out/validate_rp.csv")).unwrap();
    assert!(text.starts_with("power_dbm,snr_ssfm,snr_rp,sdr,seed"));
    let sdr = column(&text, "sdr");
    assert_eq!(sdr.len(), 3);
    assert!(sdr.iter().all(|&s| s >= 100.0), "{sdr:?}");
}

#[test]
fn validate_rp_reduced_link_is_fast_and_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[link]\nn_spans = 4\n[validate]\nn_symbols = 4096\n";
    let t = Instant::now();
    ok(&fiber_ae(dir.path(), cfg, &["validate-rp"]));
    assert!(t.elapsed() < Duration::from_secs(60), "took {:?}", t.elapsed());
    let sdr = column(&fs::read_to_string(dir.path().join("out/validate_rp.csv")).unwrap(), "sdr");
    assert_eq!(sdr.len(), 21);
    assert!(sdr.windows(2).all(|w| w[1] < w[0]), "{sdr:?}");
}

#[test]
fn zero_iterations_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("iterations = 4", "iterations = 0");
    ok(&fiber_ae(dir.path(), &cfg, &["train"]));
    let ck: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/checkpoint.json")).unwrap()).unwrap();
    let expect = serde_json::to_value(fiber_ae::pipeline::ModelParams::initial(1)).unwrap();
    assert_eq!(ck["params"], expect);
    let text = fs::read_to_string(dir.path().join("out/constellation.txt")).unwrap();
    assert_eq!(text, fiber_ae::autoencoder::Constellation::qam64().to_text());
}

#[test]
fn train_resume_finetune_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&fiber_ae(dir.path(), SMALL, &["train"]));
    let full = fs::read_to_string(out.join("checkpoint.json")).unwrap();

    let half = tempfile::tempdir().unwrap();
    ok(&fiber_ae(half.path(), &SMALL.replace("iterations = 4", "iterations = 2"), &["train"]));
    let ck = half.path().join("out/checkpoint.json");
    ok(&fiber_ae(half.path(), SMALL, &["train", "--resume", ck.to_str().unwrap()]));
    let resumed = fs::read_to_string(&ck).unwrap();
    assert_eq!(full, resumed);

    let ck = out.join("checkpoint.json");
    ok(&fiber_ae(dir.path(), SMALL, &["finetune", "--checkpoint", ck.to_str().unwrap()]));
    assert!(out.join("checkpoint_finetuned.json").exists());
    assert!(out.join("finetuned_preemph.txt").exists());

    let ft = out.join("checkpoint_finetuned.json");
    ok(&fiber_ae(dir.path(), SMALL, &["evaluate", "--checkpoint", ft.to_str().unwrap()]));
    let first = fs::read(out.join("metrics.csv")).unwrap();
    ok(&fiber_ae(dir.path(), SMALL, &["evaluate", "--checkpoint", ft.to_str().unwrap()]));
    assert_eq!(first, fs::read(out.join("metrics.csv")).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("power_dbm,metric,value,std,channel,seed"));
    assert!(text.contains(",mi,") && text.contains(",ssfm,"));

    let snapshot = fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(snapshot.contains("power_dbm = 2.0"));
}

#[test]
fn evaluate_over_rp_is_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("iterations = 4", "iterations = 0");
    ok(&fiber_ae(dir.path(), &cfg, &["train"]));
    let ck = dir.path().join("out/checkpoint.json");
    ok(&fiber_ae(
        dir.path(),
        &cfg,
        &["evaluate", "--channel", "rp", "--power-dbm", "-1.5", "--checkpoint", ck.to_str().unwrap()],
    ));
    let text = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert!(text.contains("-1.5,mi,") && text.contains(",rp,"), "{text}");
}

#[test]
fn sweep_writes_long_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}\n[sweep]\npowers_dbm = [1.0, 2.0]\n");
    ok(&fiber_ae(dir.path(), &cfg, &["sweep"]));
    let text = fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    let mi_rows = text.lines().filter(|l| l.contains(",mi,")).count();
    assert_eq!(mi_rows, 2);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = fiber_ae(dir.path(), "bogus_key = 3\n", &["validate-rp"]);
    assert_eq!(o.status.code(), Some(1));
    let o = fiber_ae(dir.path(), SMALL, &["evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--checkpoint"));
    let o = fiber_ae(dir.path(), SMALL, &["evaluate", "--checkpoint", "/nonexistent/ck.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn numeric_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[link]\nn_spans = 1\n[validate]\nn_symbols = 256\n";
    let o = fiber_ae(dir.path(), cfg, &["validate-rp", "--power-dbm", "3000"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn environment_overrides_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    fs::write(&cfg, SMALL).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fiber-ae"))
        .args(["--config", cfg.to_str().unwrap(), "--out", dir.path().join("out").to_str().unwrap(), "train"])
        .env("FIBER_AE_TRAIN__ITERATIONS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(&o);
    let ck: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck["train_state"]["iteration"], 1);
}
