use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use vaem::checkpoint::Checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_vaem");

fn vaem(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("VAEM_LOG", "warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = vaem::synthetic::mixed(60, 1).unwrap();
        data.write_csv(&dir.path().join("train.csv")).unwrap();
        vaem::synthetic::mixed(12, 2).unwrap().write_csv(&dir.path().join("test.csv")).unwrap();
        std::fs::write(
            dir.path().join("schema.json"),
            serde_json::to_string(&data.schema.to_doc()).unwrap(),
        )
        .unwrap();
        let config = json!({
            "dataset": dir.path().join("train.csv"),
            "schema": dir.path().join("schema.json"),
            "model": "vaem",
            "stage1_epochs": 10,
            "stage2_epochs": 10,
            "discriminator_epochs": 0,
            "batch_size": 100,
            "learning_rate": 0.001,
            "k_prior": 10,
            "seeds": [3],
            "output_dir": dir.path().join("out"),
            "importance_samples": 10,
            "compact": true,
        });
        std::fs::write(dir.path().join("config.json"), config.to_string()).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn train(&self, extra: &[&str]) -> Output {
        let cfg = self.s("config.json");
        let mut args = vec!["train", "--config", cfg.as_str()];
        args.extend_from_slice(extra);
        vaem(&args)
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn train_writes_reproducible_checkpoints_and_logs() {
    let fx = Fixture::new();
    let out = fx.train(&[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ck_path = fx.path("out/vaem-seed3.json");
    let first = std::fs::read(&ck_path).unwrap();
    let ck = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(Checkpoint::from_json(&ck.to_json().unwrap()).unwrap(), ck);
    let log = read_json(&fx.path("out/vaem-seed3.log.json"));
    assert_eq!(log["config_hash"], ck.config_hash.as_str());
    assert_eq!(log["history"]["stage2_elbo"].as_array().unwrap().len(), 10);

    assert_eq!(code(&fx.train(&[])), 0);
    assert_eq!(std::fs::read(&ck_path).unwrap(), first);

    let out = fx.train(&["--model", "vae_balanced", "--seeds", "1,2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(fx.path("out/vae_balanced-seed1.json").exists());
    assert!(fx.path("out/vae_balanced-seed2.json").exists());
}

#[test]
fn missing_schema_is_a_runtime_failure_naming_the_path() {
    let fx = Fixture::new();
    let out = fx.train(&["--schema", "/nonexistent/schema.json"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("/nonexistent/schema.json"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_with_two() {
    let fx = Fixture::new();
    assert_eq!(code(&vaem(&[])), 2);
    assert_eq!(code(&vaem(&["frobnicate"])), 2);
    assert_eq!(code(&fx.train(&["--model", "gan"])), 2);
    assert_eq!(code(&vaem(&["train"])), 2);
    let ck = fx.s("out/vaem-seed3.json");
    let data = fx.s("test.csv");
    assert_eq!(code(&vaem(&["evaluate", "--checkpoint", &ck, "--data", &data, "--mode", "dream"])), 2);
}

#[test]
fn evaluate_saia_and_export_pairs() {
    let fx = Fixture::new();
    assert_eq!(code(&fx.train(&[])), 0);
    let ck = fx.s("out/vaem-seed3.json");
    let data = fx.s("test.csv");
    let hash = Checkpoint::load(Path::new(&ck)).unwrap().config_hash;

    let gen = fx.s("gen.json");
    let out = vaem(&["evaluate", "--checkpoint", &ck, "--data", &data, "--mode", "generate", "--output", &gen]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(Path::new(&gen));
    assert!(report["generation_nll"].as_f64().unwrap().is_finite());
    assert_eq!(report["config_hash"], hash.as_str());
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed, report);

    let imp = fx.s("imp.json");
    let out = vaem(&["evaluate", "--checkpoint", &ck, "--data", &data, "--mode", "impute", "--output", &imp]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(Path::new(&imp));
    assert!(report["conditional_nll"].as_f64().unwrap().is_finite());
    assert!(report["imputation_rmse"].as_f64().unwrap() >= 0.0);

    let curves = fx.s("saia.json");
    let out = vaem(&[
        "saia", "--checkpoint", &ck, "--data", &data, "--seeds", "0,1", "--outer-samples", "2", "--inner-samples", "2",
        "--mc-samples", "2", "--output", &curves,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(Path::new(&curves));
    let per_seed = report["curves"].as_array().unwrap();
    assert_eq!(per_seed.len(), 2);
    let steps = per_seed[0]["rmse"].as_array().unwrap().len();
    assert_eq!(steps, 7 + 1);
    let mean = report["mean"]["rmse"].as_array().unwrap();
    for i in 0..steps {
        let m = (per_seed[0]["rmse"][i].as_f64().unwrap() + per_seed[1]["rmse"][i].as_f64().unwrap()) / 2.0;
        assert!((mean[i].as_f64().unwrap() - m).abs() < 1e-12);
    }
    assert_eq!(report["config_hash"], hash.as_str());

    let pairs = fx.s("pairs.json");
    let out = vaem(&[
        "export-pairs", "--checkpoint", &ck, "--samples", "40", "--dims", "bimodal,colour", "--data", &data, "--output", &pairs,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(Path::new(&pairs));
    let counts: u64 = report["model"]["histograms"][0]["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, 40);
    assert_eq!(report["data"]["pairs"][0]["points"].as_array().unwrap().len(), 12);
}

#[test]
fn evaluate_rejects_data_with_a_different_schema() {
    let fx = Fixture::new();
    assert_eq!(code(&fx.train(&[])), 0);
    std::fs::write(fx.path("other.csv"), "p,q\n1,2\n").unwrap();
    let out = vaem(&["evaluate", "--checkpoint", &fx.s("out/vaem-seed3.json"), "--data", &fx.s("other.csv"), "--mode", "generate"]);
    assert_eq!(code(&out), 1);
}

fn http_get(addr: &str, path: &str) -> Option<(u16, Value)> {
    let mut s = TcpStream::connect(addr).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(10))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    let status = buf.split_whitespace().nth(1)?.parse().ok()?;
    let body = buf.split("\r\n\r\n").nth(1)?;
    Some((status, serde_json::from_str(body).ok()?))
}

#[test]
fn serve_answers_health_lists_models_and_reports_busy_ports() {
    let fx = Fixture::new();
    assert_eq!(code(&fx.train(&[])), 0);
    let ck = fx.s("out/vaem-seed3.json");

    let busy = TcpListener::bind("127.0.0.1:0").unwrap();
    let busy_addr = busy.local_addr().unwrap().to_string();
    let out = vaem(&["serve", "--checkpoint", &ck, "--bind", &busy_addr]);
    assert_eq!(code(&out), 1);
    drop(busy);

    let addr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().to_string()
    };
    let second = format!("other={ck}");
    let mut child = Command::new(BIN)
        .args(["serve", "--checkpoint", &ck, "--checkpoint", &second, "--bind", &addr])
        .env("VAEM_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let health = loop {
        if let Some(r) = http_get(&addr, "/health") {
            break r;
        }
        assert!(start.elapsed() < Duration::from_secs(30), "service did not start");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert_eq!(health.0, 200);
    let (status, models) = http_get(&addr, "/models").unwrap();
    assert_eq!(status, 200);
    let ids: Vec<&str> = models["models"].as_array().unwrap().iter().map(|m| m["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["other", "vaem-seed3"]);

    let term = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(term.success());
    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(0));
}
