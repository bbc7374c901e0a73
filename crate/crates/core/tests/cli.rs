//! The `lrlf` binary end to end on a small toy corpus.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn lrlf(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_lrlf"))
        .args(args)
        .env_remove("LRLF_SEED")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut pipe = child.stdin.take().unwrap();
    pipe.write_all(stdin.unwrap_or("").as_bytes()).unwrap();
    drop(pipe);
    child.wait_with_output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lrlf(args, None);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn repair_zwj_passes_other_text_through() {
    let text = "plain English line\nதமிழ் உரை\n\nmixed ක් ර and more\n";
    let out = lrlf(&["repair-zwj"], Some(text));
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "plain English line\nதமிழ் உரை\n\nmixed ක්‍ර and more\n"
    );
}

#[test]
fn score_of_a_file_against_itself_is_100() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f.txt");
    fs::write(&f, "the cat sat on the mat\na second line of text here\n").unwrap();
    let out = ok(&["score", "--hyp", s(&f), "--ref", s(&f)]);
    assert!(out.starts_with("BLEU = 100.00"), "{out}");
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(lrlf(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(lrlf(&["score", "--hyp", "x"], None).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.txt");
    let out = lrlf(&["score", "--hyp", s(&missing), "--ref", s(&missing)], None);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error[") && line.contains("]: "), "{line}");

    let out = lrlf(&["pipeline", "show", "X-FT", "--target", "si-en"], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("error[config]"));
}

#[test]
fn pipeline_show_lists_stages() {
    let out = ok(&["pipeline", "show", "biCPT,3-B-FT", "--target", "si-en"]);
    for stage in ["cpt", "ft-out", "ft-mixed", "ft-in"] {
        assert!(out.contains(stage), "{out}");
    }
    let names = ok(&["pipeline", "list"]);
    assert!(names.lines().any(|l| l.trim() == "M-FT(best),B-FT"), "{names}");
}

fn recipe(dir: &Path, manifest: &Path, name: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{}.toml", name.replace(',', "_")));
    let text = format!(
        r#"manifest = {manifest:?}

[preset]
name = {name:?}
target = "src-tgt"
scale = 0.02
desk = true

[preset.train]
max_updates = 6
save_interval = 3
batch_tokens = 128

[settings]
valid_lines = 4

[settings.decode]
max_output_len = 8
"#,
        manifest = s(manifest)
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn prepare_run_translate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&["prepare", "--toy", "reverse", "--run-dir", s(root)]);
    let manifest = root.join("data/manifest.toml");
    assert!(manifest.is_file());
    assert!(root.join("effective_config.toml").is_file());

    // Vocabulary and denoising dump from the toy corpus.
    let vdir = root.join("vocab");
    ok(&[
        "train-vocab",
        "--manifest",
        s(&manifest),
        "--size",
        "300",
        "--run-dir",
        s(&vdir),
    ]);
    let dump = root.join("denoise.tsv");
    ok(&[
        "make-denoise",
        "--input",
        s(&root.join("data/mono/in.src")),
        "--lang",
        "src",
        "--vocab",
        s(&vdir.join("vocab.txt")),
        "--dump",
        s(&dump),
        "--run-dir",
        s(&vdir),
    ]);
    let rows = fs::read_to_string(&dump).unwrap();
    assert!(rows.lines().count() > 1);
    for row in rows.lines() {
        let cols: Vec<Vec<u32>> = row
            .split('\t')
            .map(|c| c.split(' ').map(|x| x.parse().unwrap()).collect())
            .collect();
        assert_eq!(cols.len(), 3);
        // Decoder input is the labels shifted right behind the language id.
        assert_eq!(cols[1][1..], cols[2][..cols[2].len() - 1]);
        assert_eq!(cols[0].last(), cols[1].first());
    }

    let runs = root.join("runs");
    let bicpt = runs.join("bicpt");
    let file = recipe(root, &manifest, "biCPT,3-B-FT");
    let out = ok(&["pipeline", "run", s(&file), "--out", s(&bicpt)]);
    assert!(out.contains("src-tgt: valid BLEU"), "{out}");
    let mut stages: Vec<String> = fs::read_dir(&bicpt)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("stage_"))
        .collect();
    stages.sort();
    assert_eq!(
        stages,
        ["stage_01_cpt", "stage_02_ft-out", "stage_03_ft-mixed", "stage_04_ft-in"]
    );

    // The frozen config reproduces the run.
    let frozen = bicpt.join("effective_config.toml");
    let again = root.join("again");
    ok(&["pipeline", "run", s(&frozen), "--out", s(&again)]);
    assert_eq!(
        fs::read_to_string(again.join("run_record.json")).unwrap(),
        fs::read_to_string(bicpt.join("run_record.json")).unwrap()
    );

    let bft = runs.join("bft");
    ok(&["pipeline", "run", s(&recipe(root, &manifest, "B-FT")), "--out", s(&bft)]);

    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(bicpt.join("run_record.json")).unwrap()).unwrap();
    let ckpt = bicpt.join(record["final_checkpoint"].as_str().unwrap());
    let input = root.join("data/para/src-tgt.in.test.src");
    let n_in = fs::read_to_string(&input).unwrap().lines().count();
    let hyp = root.join("hyp.txt");
    let models = format!("{},{}", s(&ckpt), s(&ckpt));
    ok(&[
        "translate",
        "--model",
        &models,
        "--src",
        s(&input),
        "--out",
        s(&hyp),
        "--src-lang",
        "src",
        "--tgt-lang",
        "tgt",
        "--beam",
        "2",
        "--max-len",
        "8",
        "--run-dir",
        s(&root.join("tr")),
    ]);
    assert_eq!(fs::read_to_string(&hyp).unwrap().lines().count(), n_in);
    assert!(root.join("tr/effective_config.toml").is_file());

    let json = root.join("table.json");
    let table = ok(&["report", "--runs", s(&runs), "--baseline", "B-FT", "--json", s(&json)]);
    assert!(table.contains("B-FT (baseline)"), "{table}");
    assert!(table.contains("biCPT,3-B-FT"), "{table}");
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(parsed["baseline"]["name"], "B-FT");
    assert_eq!(parsed["rows"][0]["name"], "biCPT,3-B-FT");

    let out = lrlf(&["report", "--runs", s(&runs), "--baseline", "M2M-FT"], None);
    assert_eq!(out.status.code(), Some(1));
}
