use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use futures_util::{SinkExt, StreamExt};
use tokio_tungstenite::tungstenite::Message;

fn csa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csa")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = csa(dir.path(), &["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for sub in [
        "collect",
        "train-teacher",
        "train-forward",
        "distill",
        "train-ddpm",
        "eval",
        "sweep",
        "bench",
        "assist-bench",
        "serve",
        "oracle-check",
    ] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn collect_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.csad", "b.csad"] {
        let o = csa(dir.path(), &["collect", "--env", "lander", "--n", "1000", "--seed", "7", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a.csad")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csad")).unwrap());
    assert_eq!(a.len(), 24 + 1000 * 10 * 4);
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train-teacher", "--out", "t.ck"],
        vec!["train-teacher", "--data", "missing.csad", "--out", "t.ck"],
        vec!["collect", "--env", "lander", "--out", "x", "--bogus", "1"],
        vec!["collect", "--env", "mars", "--out", "x"],
        vec!["frobnicate"],
        vec!["collect", "--env", "lander", "--out", "x", "--config", "missing.cfg"],
    ] {
        let o = csa(dir.path(), &args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn corrupt_inputs_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csad"), b"not a dataset at all").unwrap();
    let o = csa(dir.path(), &["train-teacher", "--data", "bad.csad", "--out", "t.ck"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!dir.path().join("t.ck").exists());
}

#[test]
fn config_file_sits_under_flags_and_the_header_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# smoke\nenv = slot\nn = 500\nseed = 3\nout = a.csad\n").unwrap();
    let o = csa(dir.path(), &["collect", "--config", "run.cfg", "--n", "700"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let header: String = stderr(&o)
        .lines()
        .take_while(|l| !l.starts_with('[') || l.starts_with("[csa"))
        .map(|l| format!("{l}\n"))
        .collect();
    assert!(header.contains("n = 700") && header.contains("seed = 3") && header.contains("env = slot"), "{header}");
    let bytes = std::fs::read(dir.path().join("a.csad")).unwrap();
    assert_eq!(bytes.len(), 24 + 700 * 10 * 4);

    // Feeding the echoed header back as a config file repeats the run exactly.
    std::fs::write(dir.path().join("echo.cfg"), header).unwrap();
    let o = csa(dir.path(), &["collect", "--config", "echo.cfg", "--out", "b.csad"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(bytes, std::fs::read(dir.path().join("b.csad")).unwrap());
}

#[test]
fn oracle_check_dumps_every_rung_and_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let o = csa(dir.path(), &["oracle-check", "--fixture", "two-mode-2d", "--grid", "5", "--T", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "rung,sigma,x0,x1,oracle0,oracle1");
    assert_eq!(lines.len(), 1 + 10 * 25);
    // At the largest σ the closed form is close to the mean of the two modes.
    let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert!(first[4].abs() < 0.05 && first[5].abs() < 0.05, "{first:?}");
}

/// Tiny models for the plumbing tests.
fn tiny_models(dir: &Path) {
    let steps = ["--steps", "20", "--hidden", "16", "--layers", "1"];
    let run = |args: Vec<&str>| {
        let o = csa(dir, &args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    };
    run(vec!["collect", "--env", "lander", "--n", "2000", "--out", "d.csad"]);
    run([vec!["train-teacher", "--data", "d.csad", "--out", "t.ck", "--eval-every", "10"], steps.to_vec()].concat());
    run(vec![
        "distill",
        "--teacher",
        "t.ck",
        "--data",
        "d.csad",
        "--out",
        "csa.ck",
        "--steps",
        "20",
        "--eval-every",
        "10",
    ]);
    run(vec![
        "distill",
        "--teacher",
        "t.ck",
        "--data",
        "d.csad",
        "--mode",
        "csa-dagger",
        "--out",
        "dag.ck",
        "--steps",
        "20",
        "--eval-every",
        "10",
    ]);
    run([vec!["train-forward", "--data", "d.csad", "--out", "phi.ck"], steps.to_vec()].concat());
    run([vec!["train-ddpm", "--data", "d.csad", "--out", "ddpm.ck"], steps.to_vec()].concat());
}

#[test]
fn trained_artifacts_feed_eval_bench_and_assist_bench() {
    let dir = tempfile::tempdir().unwrap();
    tiny_models(dir.path());
    let models = ["--ckpt", "csa.ck", "--ckpt", "dag.ck", "--ckpt", "phi.ck", "--ckpt", "ddpm.ck"];
    let grid = ["--env", "lander", "--epsilon", "0.5", "--seeds", "2", "--rollouts", "2"];

    let o = csa(dir.path(), &[&["eval", "--alpha", "0.4", "--format", "json"][..], &models, &grid].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let copilots: Vec<&str> =
        table["rows"].as_array().unwrap().iter().map(|r| r["copilot"].as_str().unwrap()).collect();
    assert_eq!(copilots, ["none", "csa", "csa_dagger", "ddpm"]);

    let o = csa(dir.path(), &[&["bench", "--alphas", "0.2,0.6"][..], &models, &grid].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "pilot,copilot,alpha,success_mean,success_std,crash_mean,crash_std,nfe,lat_p50_us,lat_p99_us"
    );
    assert_eq!(csv.lines().count(), 5);

    let o =
        csa(dir.path(), &["assist-bench", "--ckpt", "csa.ck", "--ckpt", "ddpm.ck", "--alphas", "0.5", "--calls", "50"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let nfe: Vec<&str> = out.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(nfe, ["1", "25"]);

    // A teacher is not a copilot; a dagger student without its forward model is refused.
    for bad in [vec!["--ckpt", "t.ck"], vec!["--ckpt", "dag.ck"]] {
        let o = csa(dir.path(), &[&["eval"][..], &bad, &grid].concat());
        assert_eq!(code(&o), 2, "{bad:?}: {}", stderr(&o));
    }
}

#[tokio::test]
async fn serve_answers_a_hello() {
    let dir = tempfile::tempdir().unwrap();
    tiny_models(dir.path());
    let mut child = Command::new(env!("CARGO_BIN_EXE_csa"))
        .current_dir(dir.path())
        .args(["serve", "--ckpt", "csa.ck", "--port", "0", "--env", "lander"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let url = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some(i) = line.find("ws://") {
            break line[i..].trim().to_owned();
        }
    };
    let (mut ws, _) = tokio_tungstenite::connect_async(url.as_str()).await.unwrap();
    ws.send(Message::text(r#"{"type":"hello","env":"lander","copilot":"csa","alpha":0.5,"seed":1}"#)).await.unwrap();
    let reply = ws.next().await.unwrap().unwrap().into_text().unwrap();
    assert!(reply.starts_with(r#"{"type":"session_ready""#), "{reply}");
    ws.send(Message::text(r#"{"type":"pilot_action","tick":1,"a":[0.0,0.3]}"#)).await.unwrap();
    let reply: serde_json::Value =
        serde_json::from_str(&ws.next().await.unwrap().unwrap().into_text().unwrap()).unwrap();
    assert_eq!(reply["nfe"], 1);
    ws.send(Message::text(r#"{"type":"hello","env":"slot","copilot":"none","alpha":0.5,"seed":1}"#)).await.unwrap();
    let reply = ws.next().await.unwrap().unwrap().into_text().unwrap();
    assert!(reply.contains("BAD_MESSAGE"), "{reply}");
    child.kill().unwrap();
    child.wait().unwrap();
}

/// End-to-end run of the pipeline script at reduced size.
#[test]
fn pipeline_script_shows_uplift_over_the_noised_pilot() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new("bash")
        .arg(repo_root().join("scripts/pipeline.sh"))
        .current_dir(repo_root())
        .env("CSA", env!("CARGO_BIN_EXE_csa"))
        .env("OUT", dir.path())
        .env("N", "20000")
        .env("TEACHER_STEPS", "3000")
        .env("DISTILL_STEPS", "3000")
        .env("SEEDS", "5")
        .env("ROLLOUTS", "20")
        .env("ALPHAS", "0.1,0.2,0.3,0.4")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    println!("{csv}");
    let success = |row: &str| row.split(',').nth(3).unwrap().parse::<f64>().unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let unassisted = success(rows[0]);
    let best = rows[1..].iter().map(|r| success(r)).fold(0.0, f64::max);
    assert!(best > unassisted, "best csa {best} vs unassisted {unassisted}\n{csv}");
}
