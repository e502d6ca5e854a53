use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn itemdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itemdiff")).args(args).env_remove("OPENAI_API_KEY").output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulated(dir: &Path) -> (PathBuf, PathBuf) {
    let resp = dir.join("responses.csv");
    let items = dir.join("items.csv");
    assert!(itemdiff(&["simulate", "--items", "12", "--respondents", "300", "--seed", "9", "--out", s(&resp)])
        .status
        .success());
    assert!(itemdiff(&["aggregate", "--input", s(&resp), "--output", s(&items)]).status.success());
    (resp, items)
}

#[test]
fn aggregate_is_deterministic_and_reports_range() {
    let dir = tempfile::tempdir().unwrap();
    let (resp, items) = simulated(dir.path());
    let again = dir.path().join("again.csv");
    let out = itemdiff(&["aggregate", "--input", s(&resp), "--output", s(&again)]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("12 items; difficulty range ["), "{stdout}");
    assert_eq!(fs::read(&items).unwrap(), fs::read(&again).unwrap());
    let header = fs::read_to_string(&items).unwrap();
    assert!(header.starts_with("item_id,difficulty,easiness,n_responses,"));
}

#[test]
fn aggregate_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "item_id,image_url,question_text,possible_responses,incorrect_response\n").unwrap();
    let out = itemdiff(&["aggregate", "--input", s(&empty), "--output", s(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("MissingData"));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn split_writes_both_files() {
    let dir = tempfile::tempdir().unwrap();
    let (_, items) = simulated(dir.path());
    let out_dir = dir.path().join("split");
    let out = itemdiff(&["split", "--input", s(&items), "--fraction", "0.75", "--seed", "1", "--out-dir", s(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = |name: &str| fs::read_to_string(out_dir.join(name)).unwrap().lines().count() - 1;
    assert_eq!(rows("validation.csv"), 9);
    assert_eq!(rows("test.csv"), 3);
}

#[test]
fn filter_drops_svg_items() {
    let dir = tempfile::tempdir().unwrap();
    let items = dir.path().join("items.csv");
    fs::write(
        &items,
        "item_id,difficulty,n_responses,image_url,question_text,possible_responses\n\
         a,0.5,2,a.png,Q?,x|y\nb,0.5,2,b.svg,Q?,x|y\nc,0.5,2,c.jpg,Q?,x|y\n",
    )
    .unwrap();
    let kept = dir.path().join("kept.csv");
    let out = itemdiff(&["filter", "--input", s(&items), "--formats", "png,jpeg", "--output", s(&kept)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&kept).unwrap();
    assert!(text.contains("\na,") && text.contains("\nc,") && !text.contains("\nb,"));
}

#[test]
fn text_mode_needs_no_images_and_writes_one_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (_, items) = simulated(dir.path());
    let preds = dir.path().join("preds.csv");
    let out = itemdiff(&[
        "predict",
        "--mode",
        "text",
        "--items",
        s(&items),
        "--out",
        s(&preds),
        "--offline-fixture",
        s(&items),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 13);
    let manifests: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(Result::ok)
        .filter(|e| e.file_name().to_string_lossy().ends_with(".manifest.json"))
        .collect();
    assert_eq!(manifests.len(), 1);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(manifests[0].path()).unwrap()).unwrap();
    assert_eq!(m["prompt_version"], "v1");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
    assert!(m["finished_at"].is_string());
    assert!(!m.to_string().contains("offline"), "api key leaked into manifest");
}

#[test]
fn missing_images_are_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (_, items) = simulated(dir.path());
    let preds = dir.path().join("preds.csv");
    let out = itemdiff(&[
        "predict",
        "--mode",
        "vision",
        "--items",
        s(&items),
        "--out",
        s(&preds),
        "--offline-fixture",
        s(&items),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let sidecar = fs::read_to_string(dir.path().join("preds.csv.failures.csv")).unwrap();
    assert!(sidecar.starts_with("index,item_id,error\n0,item_0000,"));
    assert_eq!(sidecar.lines().count(), 13);
}

#[test]
fn missing_api_key_is_an_auth_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, items) = simulated(dir.path());
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[client]\napi_key_env_var = \"ITEMDIFF_TEST_UNSET_KEY\"\ncache_dir = \"cache\"\n").unwrap();
    let out = itemdiff(&[
        "predict",
        "--mode",
        "text",
        "--items",
        s(&items),
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("p.csv")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, items) = simulated(dir.path());
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[batch]\nfallback_value = 2.0\n").unwrap();
    let p = dir.path().join("p.csv");
    let out = itemdiff(&["predict", "--mode", "text", "--items", s(&items), "--config", s(&cfg), "--out", s(&p)]);
    assert_eq!(out.status.code(), Some(2));
    let out = itemdiff(&["predict", "--mode", "audio", "--items", s(&items), "--out", s(&p)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_writes_report_and_plot_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (_, items) = simulated(dir.path());
    let preds = dir.path().join("preds.csv");
    assert!(itemdiff(&[
        "predict",
        "--mode",
        "text",
        "--items",
        s(&items),
        "--out",
        s(&preds),
        "--offline-fixture",
        s(&items)
    ])
    .status
    .success());
    let report = dir.path().join("report.json");
    let out = itemdiff(&["evaluate", "--preds", s(&preds), "--truth", s(&items), "--out", s(&report), "--bins", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["mae"], 0.0);
    assert_eq!(r["n_items"], 12);
    assert_eq!(r["histogram"].as_array().unwrap().len(), 4);
    let mae = fs::read_to_string(dir.path().join("report.mae.csv")).unwrap();
    assert!(mae.starts_with("kind,mae,sem_abs_error,mse,rank,best\ntext,0,"));
    let dist = fs::read_to_string(dir.path().join("report.distribution.csv")).unwrap();
    assert_eq!(dist.lines().count(), 5);
    assert!(dir.path().join("report.json.manifest.json").exists());
}

#[test]
fn evaluate_rejects_unknown_items() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.csv");
    fs::write(&preds, "item_id,kind,prediction\na,text,0.5\nzzz,text,0.4\n").unwrap();
    let truth = dir.path().join("t.csv");
    fs::write(&truth, "item_id,easiness\na,0.6\n").unwrap();
    let out =
        itemdiff(&["evaluate", "--preds", s(&preds), "--truth", s(&truth), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("zzz"));
}

#[test]
fn submit_clamps_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.csv");
    fs::write(&preds, "item_id,kind,prediction\na,text,1.3\nb,text,-0.2\nc,text,0.25\n").unwrap();
    let sub = dir.path().join("s.csv");
    assert!(itemdiff(&["submit", "--preds", s(&preds), "--out", s(&sub)]).status.success());
    assert_eq!(fs::read_to_string(&sub).unwrap(), "item_id,prediction\na,1\nb,0\nc,0.25\n");
}

#[test]
fn help_documents_column_formats() {
    let out = itemdiff(&["predict", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["provenance", "failures.csv", "Exit codes", "api_key_env_var"] {
        assert!(text.contains(needle), "missing {needle}");
    }
    let out = itemdiff(&["aggregate", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("incorrect_response"));
}
