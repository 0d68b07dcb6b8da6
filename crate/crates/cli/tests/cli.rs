use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn topic_table() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets/generation_topics.csv")
}

fn valuelens() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_valuelens"));
    cmd.env("SOURCE_DATE_EPOCH", "1700000000").env_remove("VALUELENS_CONFIG");
    cmd
}

fn run(args: &[&str]) -> Output {
    valuelens().args(args).output().unwrap()
}

fn with_mock(args: &[&str]) -> Output {
    let mock = fixture("mock_table.json");
    let mut all = vec!["--mock", mock.to_str().unwrap()];
    all.extend_from_slice(args);
    run(&all)
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

fn analyze_args<'a>(corpus: &'a Path, themes: &'a Path, out: &'a Path) -> Vec<&'a str> {
    vec!["analyze", "--corpus", p(corpus), "--themes", p(themes), "--out", p(out)]
}

#[test]
fn extract_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let res = with_mock(&["extract", "--corpus", p(&fixture("corpus10.jsonl")), "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(read(&out.join("extraction.jsonl")), read(&fixture("golden_extraction.jsonl")));
    let manifest: Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "extract");
    assert!(manifest["inputs"]["corpus"]["sha256"].as_str().unwrap().len() == 64);
    assert!(manifest["outputs"]["themes.jsonl"].is_string());
    assert_eq!(manifest["timestamp"], "2023-11-14T22:13:20Z");
}

#[test]
fn extract_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let res = with_mock(&["extract", "--corpus", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("nope.jsonl"), "{}", stderr(&res));
    assert!(!dir.path().join("o").exists());

    let corpus = dir.path().join("bad.jsonl");
    fs::write(&corpus, "{\"id\":\"d1\",\"text\":\"fine\",\"position\":\"pro\"}\n{\"id\":\"d2\",\"text\":\"\",\"position\":\"anti\"}\n").unwrap();
    let res = with_mock(&["extract", "--corpus", p(&corpus), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("d2"), "{}", stderr(&res));
}

#[test]
fn unreachable_backend_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config = dir.path().join("backends.toml");
    fs::write(
        &config,
        format!(
            "[extractor]\nendpoint = \"http://127.0.0.1:{port}/complete\"\nmodel_name = \"gpt-4\"\nretry_backoff_ms = 1\n\n[classifier]\nendpoint = \"http://127.0.0.1:{port}/nli\"\nmodel_name = \"nli\"\nretry_backoff_ms = 1\n"
        ),
    )
    .unwrap();
    let res = valuelens()
        .env("VALUELENS_CONFIG", &config)
        .args(["extract", "--corpus", p(&fixture("corpus10.jsonl")), "--out", p(&dir.path().join("o"))])
        .output()
        .unwrap();
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    assert!(stderr(&res).contains("3 attempt"), "{}", stderr(&res));

    let res = valuelens()
        .env("VALUELENS_CONFIG", &config)
        .args(analyze_args(&fixture("corpus10.jsonl"), &fixture("themes.jsonl"), &dir.path().join("a")))
        .output()
        .unwrap();
    assert_eq!(code(&res), 3, "{}", stderr(&res));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("backends.toml");
    fs::write(&config, "[classifier]\nendpoint = \"http://x\"\napi_key = \"inline\"\n").unwrap();
    let res = run(&["--config", p(&config), "network", "--themes", p(&fixture("themes.jsonl")), "--out", p(&dir.path().join("n"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("api_key"), "{}", stderr(&res));
}

#[test]
fn analyze_matches_golden_report_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = with_mock(&analyze_args(&fixture("corpus10.jsonl"), &fixture("themes.jsonl"), out));
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    assert_eq!(read(&a.join("report.csv")), read(&fixture("golden_report.csv")));
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "cell_cache.jsonl", "consolidated.json", "manifest.json", "matrix.jsonl", "profiles.json", "report.csv",
            "report.json", "themes.jsonl"
        ]
    );
    for name in &names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
    let manifest: Value = serde_json::from_str(&read(&a.join("manifest.json"))).unwrap();
    for name in names.iter().filter(|n| *n != "manifest.json") {
        assert!(manifest["outputs"][name].is_string(), "{name} missing from manifest");
    }
}

#[test]
fn analyze_resumes_from_cell_cache() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let res = with_mock(&analyze_args(&fixture("corpus10.jsonl"), &fixture("themes.jsonl"), &out));
    assert_eq!(code(&res), 0);

    // every answer from this table contradicts; only cached cells can reproduce the report
    let contrarian = dir.path().join("contrarian.json");
    fs::write(&contrarian, "{\"default_label\": \"contradiction\"}").unwrap();
    let mut args = vec!["--mock", p(&contrarian)];
    let (corpus, themes) = (fixture("corpus10.jsonl"), fixture("themes.jsonl"));
    let rest = analyze_args(&corpus, &themes, &out);
    args.extend(rest.iter().copied());
    let res = run(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(read(&out.join("report.csv")), read(&fixture("golden_report.csv")));
    let manifest: Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert!(manifest["inputs"]["cell_cache"].is_object());

    args.push("--fresh");
    assert_eq!(code(&run(&args)), 0);
    assert_ne!(read(&out.join("report.csv")), read(&fixture("golden_report.csv")));
}

#[test]
fn analyze_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("pro_only.jsonl");
    let lines: String = read(&fixture("corpus10.jsonl")).lines().filter(|l| l.contains("\"pro\"")).map(|l| format!("{l}\n")).collect();
    fs::write(&corpus, lines).unwrap();
    let res = with_mock(&analyze_args(&corpus, &fixture("themes.jsonl"), &dir.path().join("o")));
    assert_eq!(code(&res), 4);
    assert!(stderr(&res).contains("comparative analysis requires two positions"));

    let res = run(&[
        "analyze", "--corpus", p(&fixture("corpus10.jsonl")), "--themes", p(&fixture("themes.jsonl")), "--out",
        p(&dir.path().join("o")), "--strategy", "classifier-cluster",
    ]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));
}

#[test]
fn full_threshold_yields_empty_groups() {
    let dir = tempfile::tempdir().unwrap();
    // drop the themes every comment of some position takes a side on, leaving only noisy ones
    let themes = dir.path().join("noisy.jsonl");
    let noisy: String = read(&fixture("themes.jsonl"))
        .lines()
        .filter(|l| !l.contains("Cow's milk") && !l.contains("Mothers should") && !l.contains("is dirty"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&themes, noisy).unwrap();
    let corpus = fixture("corpus10.jsonl");

    let baseline = dir.path().join("b");
    assert_eq!(code(&with_mock(&analyze_args(&corpus, &themes, &baseline))), 0);
    assert_eq!(read(&baseline.join("report.csv")).lines().count(), 3);

    let out = dir.path().join("o");
    let mut args = analyze_args(&corpus, &themes, &out);
    args.extend(["--min-nonneutral", "1.0"]);
    let res = with_mock(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(read(&out.join("report.csv")).lines().count(), 1);
    let report: Value = serde_json::from_str(&read(&out.join("report.json"))).unwrap();
    let groups = report["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 3);
    assert!(groups.iter().all(|g| g["rows"].as_array().unwrap().is_empty()));
}

#[test]
fn network_edges() {
    let dir = tempfile::tempdir().unwrap();
    let themes = dir.path().join("three.jsonl");
    let three: String = read(&fixture("themes.jsonl")).lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(&themes, three).unwrap();
    let mock = dir.path().join("mock.json");
    fs::write(
        &mock,
        r#"{"judgments": [
            {"premise": "Colostrum is dirty.", "hypothesis": "Cow's milk is clean.", "label": "resonance", "scores": [0.8, 0.1, 0.1]},
            {"premise": "Cow's milk is clean.", "hypothesis": "Colostrum is dirty.", "label": "neutral", "scores": [0.2, 0.7, 0.1]}
        ]}"#,
    )
    .unwrap();
    let out = dir.path().join("n");
    let res = run(&["--mock", p(&mock), "network", "--themes", p(&themes), "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let records: Vec<Value> = read(&out.join("network.jsonl")).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let edges: Vec<&Value> = records.iter().filter(|r| r["kind"] == "edge").collect();
    assert_eq!(edges.len(), 6);
    let label_of = |from: &str, to: &str| -> String {
        let id = |text: &str| {
            records
                .iter()
                .find(|r| r["kind"] == "node" && r["text"] == text)
                .unwrap()["id"]
                .as_str()
                .unwrap()
                .to_string()
        };
        let (f, t) = (id(from), id(to));
        edges.iter().find(|e| e["from"] == f && e["to"] == t).unwrap()["label"].as_str().unwrap().to_string()
    };
    assert_eq!(label_of("Colostrum is dirty.", "Cow's milk is clean."), "resonance");
    assert_eq!(label_of("Cow's milk is clean.", "Colostrum is dirty."), "neutral");

    let one = dir.path().join("one.jsonl");
    fs::write(&one, read(&fixture("themes.jsonl")).lines().next().unwrap()).unwrap();
    let res = run(&["--mock", p(&mock), "network", "--themes", p(&one), "--out", p(&dir.path().join("m"))]);
    assert_eq!(code(&res), 2);
}

#[test]
fn eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e");
    let res = run(&["eval", "--gold", p(&fixture("wvc_shape_predictions.jsonl")), "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let metrics: Value = serde_json::from_str(&read(&out.join("metrics.json"))).unwrap();
    assert_eq!(format!("{:.2}", metrics["micro_f1"].as_f64().unwrap()), "0.97");
    assert_eq!(
        read(&out.join("confusion.csv")),
        "gold\\predicted,resonance,neutral,contradiction\nresonance,49,0,1\nneutral,4,146,0\ncontradiction,3,1,96\n"
    );

    let perfect = dir.path().join("perfect.jsonl");
    fs::write(&perfect, "{\"premise\":\"a\",\"hypothesis\":\"b\",\"gold\":\"entailment\",\"predicted\":\"resonance\"}\n{\"premise\":\"a\",\"hypothesis\":\"c\",\"gold\":\"neutral\",\"predicted\":\"neutral\"}\n").unwrap();
    let res = run(&["eval", "--gold", p(&perfect), "--out", p(&dir.path().join("p"))]);
    assert_eq!(code(&res), 0);
    assert!(String::from_utf8_lossy(&res.stdout).contains("micro-F1 1.0000"));

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&run(&["eval", "--gold", p(&empty), "--out", p(&dir.path().join("x"))])), 2);

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"premise\":\"a\",\"hypothesis\":\"b\",\"gold\":\"favor\",\"predicted\":\"neutral\"}\n").unwrap();
    assert_eq!(code(&run(&["eval", "--gold", p(&bad), "--out", p(&dir.path().join("x"))])), 2);
}

#[test]
fn eval_fills_predictions_from_backend() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    fs::write(&gold, "{\"premise\":\"Colostrum is liquid gold. My son never got sick his first year because I fed him colostrum.\",\"hypothesis\":\"Colostrum boosts newborns' immune systems.\",\"gold\":\"resonance\"}\n{\"premise\":\"x\",\"hypothesis\":\"y\",\"gold\":\"contradiction\"}\n").unwrap();
    let out = dir.path().join("e");
    let res = with_mock(&["eval", "--gold", p(&gold), "--predict", "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let metrics: Value = serde_json::from_str(&read(&out.join("metrics.json"))).unwrap();
    assert_eq!(metrics["micro_f1"].as_f64().unwrap(), 0.5);
    assert_eq!(read(&out.join("predictions.jsonl")).lines().count(), 2);

    assert_eq!(code(&run(&["eval", "--gold", p(&gold), "--out", p(&dir.path().join("f"))])), 2);
}

#[test]
fn genprompts_batches() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let res = run(&["genprompts", "--table", p(&topic_table()), "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let jobs: Vec<Value> = read(&out.join("prompts.jsonl")).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(jobs.len(), 4);
    assert!(jobs.iter().all(|j| j["repeats"] == 5 && j["settings"]["temperature"] == 1.0 && j["settings"]["model"] == "gpt-4"));

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "topic,article,stance,agenda,evaluation\n").unwrap();
    assert_eq!(code(&run(&["genprompts", "--table", p(&empty), "--out", p(&dir.path().join("e"))])), 2);

    let blank = dir.path().join("blank.csv");
    fs::write(&blank, "topic,article,stance,agenda,evaluation\nT,Headline,pro,Do things,\n").unwrap();
    let res = run(&["genprompts", "--table", p(&blank), "--out", p(&dir.path().join("b"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("row 1: evaluation is empty"), "{}", stderr(&res));
}

fn write_items(dir: &Path) -> PathBuf {
    let items = dir.join("items.jsonl");
    let mut lines = String::new();
    for (i, (kind, tag)) in [("human", "H1"), ("machine", "GPT4")].iter().enumerate() {
        lines.push_str(&format!(
            "{{\"set_id\":\"s{i}\",\"source_text\":\"Some comment.\",\"themes\":[{{\"text\":\"Milk is good.\",\"category\":\"Evaluation\"}}],\"provenance\":{{\"kind\":\"{kind}\",\"id\":\"{tag}\"}}}}\n"
        ));
    }
    fs::write(&items, lines).unwrap();
    items
}

#[test]
fn judge_serve_bind_failure_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let items = write_items(dir.path());
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let res = run(&["judge-serve", "--items", p(&items), "--store", p(&dir.path().join("log.jsonl")), "--bind", &addr]);
    assert_eq!(code(&res), 5, "{}", stderr(&res));
}

#[cfg(unix)]
#[test]
fn judge_serve_runs_and_shuts_down_gracefully() {
    let dir = tempfile::tempdir().unwrap();
    let items = write_items(dir.path());
    let log = dir.path().join("log.jsonl");
    let mut child = valuelens()
        .args(["judge-serve", "--items", p(&items), "--store", p(&log), "--bind", "127.0.0.1:0"])
        .env("VALUELENS_ADMIN_TOKEN", "t0ken")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut r = agent
        .post(format!("{base}/v1/sessions"))
        .send_json(serde_json::json!({"judge_id": "j", "seed": 5}))
        .unwrap();
    assert_eq!(r.status().as_u16(), 201);
    let body = r.body_mut().read_to_string().unwrap();
    assert!(!body.contains("H1") && !body.contains("GPT4"));
    let r = agent.get(format!("{base}/v1/export")).header("Authorization", "Bearer t0ken").call().unwrap();
    assert_eq!(r.status().as_u16(), 200);

    let status = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    let exit = child.wait().unwrap();
    assert_eq!(exit.code(), Some(0));
    assert_eq!(read(&log).lines().count(), 1);
}
