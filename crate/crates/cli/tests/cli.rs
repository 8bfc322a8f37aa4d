use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fdfo::checkpoint::Checkpoint;
use fdfo::posttrain::METRICS_HEADER;
use tempfile::TempDir;

fn fdfo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdfo"))
        .args(args)
        .env("FDFO_THREADS", "2")
        .output()
        .expect("spawn fdfo")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small gauss1d experiment and returns its path.
fn write_config(dir: &Path, epochs: usize) -> PathBuf {
    let text = format!(
        r#"{{
  "seed": 5,
  "dataset": {{ "name": "gauss1d", "sigma": 1.0 }},
  "model": {{ "hidden": [8, 8] }},
  "pretrain": {{ "steps": 150, "batch_size": 32, "log_every": 50 }},
  "reward": [ {{ "spec": {{ "variant": "linear", "coeffs": [1.0] }} }} ],
  "posttrain": {{
    "pairs_per_epoch": 8,
    "batches_per_epoch": 2,
    "steps": 8,
    "epochs": {epochs},
    "group_size": 4,
    "checkpoint_every": 2,
    "eval": {{ "samples_per_condition": 200, "steps": 8, "diversity_samples": 16 }}
  }}
}}"#
    );
    let path = dir.join("cfg.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn pretrained(dir: &TempDir, epochs: usize) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir.path(), epochs);
    let out = dir.path().join("pre");
    let run = fdfo(&["--config", s(&cfg), "pretrain", "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    (cfg, out.join("pre.ckpt"))
}

#[test]
fn missing_config_names_the_path() {
    let out = fdfo(&["--config", "/nonexistent/exp.json", "pretrain"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/nonexistent/exp.json"));
}

#[test]
fn schema_errors_are_line_anchored() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"dataset\": { \"name\": \"gauss1d\" },\n  \"learning_rate\": 3\n}\n").unwrap();
    let out = fdfo(&["--config", s(&path), "pretrain"]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains("bad.json:3:") && msg.contains("learning_rate"), "{msg}");
}

#[test]
fn pretrain_is_seeded_and_loadable() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 0);
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let run = fdfo(&["--config", s(&cfg), "--seed", "7", "pretrain", "--out", s(&out)]);
        assert_eq!(code(&run), 0, "{}", stderr(&run));
        bytes.push(std::fs::read(out.join("pre.ckpt")).unwrap());
        let loss = std::fs::read_to_string(out.join("pretrain_loss.csv")).unwrap();
        assert!(loss.lines().count() > 2);
    }
    assert_eq!(bytes[0], bytes[1]);
    let ck = Checkpoint::from_bytes(&bytes[0]).unwrap();
    assert_eq!(ck.net.arch().dim, 1);
    assert!(ck.meta.contains("gauss1d"));
}

#[test]
fn zero_epochs_copy_the_checkpoint() {
    let dir = TempDir::new().unwrap();
    let (cfg, init) = pretrained(&dir, 0);
    let out = dir.path().join("post");
    let run = fdfo(&["--config", s(&cfg), "posttrain", "--init", s(&init), "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv, format!("{METRICS_HEADER}\n"));
    let a = Checkpoint::load(&init).unwrap();
    let b = Checkpoint::load(&out.join("epoch_0.ckpt")).unwrap();
    assert_eq!(a.net, b.net);
}

#[test]
fn methods_share_schema_and_budget() {
    let dir = TempDir::new().unwrap();
    let (cfg, init) = pretrained(&dir, 3);
    let mut tables = Vec::new();
    for (name, extra) in [("fdfo", None), ("grpo", Some("--baseline"))] {
        let out = dir.path().join(name);
        let mut args = vec!["--config", s(&cfg), "posttrain", "--init", s(&init), "--out", s(&out)];
        args.extend(extra);
        let run = fdfo(&args);
        assert_eq!(code(&run), 0, "{}", stderr(&run));
        tables.push(std::fs::read_to_string(out.join("metrics.csv")).unwrap());
    }
    let header: Vec<&str> = tables[0].lines().next().unwrap().split(',').collect();
    assert_eq!(tables[0].lines().next(), tables[1].lines().next());
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for (a, b) in tables[0].lines().zip(tables[1].lines()).skip(1) {
        let a: Vec<&str> = a.split(',').collect();
        let b: Vec<&str> = b.split(',').collect();
        for name in ["epoch", "model_evals", "reward_evals"] {
            assert_eq!(a[col(name)], b[col(name)]);
        }
    }
    assert_eq!(tables[0].lines().count(), 4);
}

#[test]
fn epochs_flag_and_architecture_check() {
    let dir = TempDir::new().unwrap();
    let (cfg, init) = pretrained(&dir, 5);
    let out = dir.path().join("post");
    let run = fdfo(&["--config", s(&cfg), "posttrain", "--init", s(&init), "--epochs", "1", "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 2);
    assert!(out.join("epoch_1.ckpt").exists());

    let other = std::fs::read_to_string(&cfg).unwrap().replace("[8, 8]", "[8, 6]");
    let other_cfg = dir.path().join("other.json");
    std::fs::write(&other_cfg, other).unwrap();
    let run = fdfo(&["--config", s(&other_cfg), "posttrain", "--init", s(&init), "--out", s(&out)]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("architecture"));
}

#[test]
fn eval_is_reproducible_and_consistent() {
    let dir = TempDir::new().unwrap();
    let (cfg, init) = pretrained(&dir, 2);
    let post = dir.path().join("post");
    let run = fdfo(&["--config", s(&cfg), "posttrain", "--init", s(&init), "--out", s(&post)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let ckpt = post.join("epoch_2.ckpt");
    let reports: Vec<String> = ["e1.csv", "e2.csv"]
        .iter()
        .map(|f| {
            let path = dir.path().join(f);
            let run = fdfo(&["--config", s(&cfg), "eval", s(&ckpt), "--metrics", s(&path)]);
            assert_eq!(code(&run), 0, "{}", stderr(&run));
            std::fs::read_to_string(path).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    let value = |key: &str| -> f64 {
        let line = reports[0].lines().find(|l| l.starts_with(&format!("{key},all,"))).unwrap();
        line.rsplit(',').next().unwrap().parse().unwrap()
    };
    let metrics = std::fs::read_to_string(post.join("metrics.csv")).unwrap();
    let header: Vec<&str> = metrics.lines().next().unwrap().split(',').collect();
    let last: Vec<&str> = metrics.lines().last().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "eval_reward").unwrap();
    let trained: f64 = last[col].parse().unwrap();
    let (mean, se) = (value("mean_reward"), value("reward_std_err"));
    assert!((mean - trained).abs() < 3.0 * se * 2f64.sqrt(), "{mean} vs {trained} (se {se})");
}

#[test]
fn verify_checks_and_exit_codes() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("deg.json");
    let run = fdfo(&["verify", "sampler-degeneracy", "--out", s(&report)]);
    assert_eq!(code(&run), 0);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["passed"], true);
    assert_eq!(json["check"], "sampler-degeneracy");
    assert_eq!(json["details"]["mismatches"], 0);

    let run = fdfo(&["verify", "stein", "--n", "1e6"]);
    assert_eq!(code(&run), 0);
    let json: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert!(json["details"]["report"]["relative_error"].as_f64().unwrap() < 0.02);

    assert_eq!(code(&fdfo(&["verify", "marginal", "--break-mixer"])), 1);
    assert_eq!(code(&fdfo(&["verify", "marginal"])), 0);
    assert_eq!(code(&fdfo(&["verify", "curvature"])), 2);
    assert_eq!(code(&fdfo(&["verify", "gradcheck", "--n", "20"])), 0);
}

#[test]
fn verify_surveys_a_network() {
    let dir = TempDir::new().unwrap();
    let (cfg, init) = pretrained(&dir, 0);
    let run = fdfo(&["--config", s(&cfg), "verify", "jacobian", "--init", s(&init), "--n", "20"]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let json: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    let frac = json["details"]["net"]["positive_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&frac));
    assert_eq!(json["details"]["net"]["statistics"].as_array().unwrap().len(), 20);
    assert_eq!(code(&fdfo(&["verify", "jacobian", "--init", s(&init)])), 2);
}

#[test]
fn plots() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("fdfo.csv");
    let b = dir.path().join("grpo.csv");
    std::fs::write(&a, "epoch,mean_reward\n1,50\n2,70\n3,90\n").unwrap();
    std::fs::write(&b, "epoch,mean_reward\n1,50\n2,55\n3,60\n").unwrap();
    let svgs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let run = fdfo(&["plot", s(&a), s(&b)]);
            assert_eq!(code(&run), 0);
            run.stdout
        })
        .collect();
    assert_eq!(svgs[0], svgs[1]);
    let svg = String::from_utf8(svgs[0].clone()).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, format!("{METRICS_HEADER}\n")).unwrap();
    let out = dir.path().join("empty.svg");
    assert_eq!(code(&fdfo(&["plot", s(&empty), "--out", s(&out)])), 0);
    let svg = std::fs::read_to_string(out).unwrap();
    assert!(svg.starts_with("<svg") && !svg.contains("<polyline"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "epoch,mean_reward\n1,abc\n").unwrap();
    assert_eq!(code(&fdfo(&["plot", s(&bad)])), 2);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = fdfo::config::ExperimentConfig::load(&path).unwrap();
        assert!(cfg.reward().is_ok(), "{}", path.display());
        n += 1;
    }
    assert!(n >= 3);
}
