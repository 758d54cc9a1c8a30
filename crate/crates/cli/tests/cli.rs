use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn visrep(args: &[&str], stdin: &str, cwd: &Path) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_visrep"))
        .args(args)
        .current_dir(cwd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const CONFIG: &str = r#"
run_dir = "run"

[corpus]
dev_size = 5
test_size = 5

[corpus.synthetic]
task = "copy"
size = 40
alphabet = "abcdef"
max_tokens = 4

[model]
layers = 1
heads = 2
d_model = 8
d_ff = 16
target_merges = 5

[model.frontend]
kind = "visual"

[model.frontend.slice]
window = 20
stride = 10

[train]
batch_size = 10
max_steps = 4
eval_every = 2

[[noise]]
kind = "swap"

[eval]
ps = [0.0, 0.5, 1.0]
seeds = [1, 2]
"#;

#[test]
fn noise_writes_text_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = visrep(&["noise", "--kind", "swap", "--p", "0"], "language model\n", tmp.path());
    assert_eq!(ok(&out), "language model\n");
    let report = String::from_utf8(out.stderr).unwrap();
    assert!(report.contains("\"tokens_total\":2"), "{report}");
    let out = visrep(
        &["noise", "--kind", "mapchars", "--table", "latin-cyrillic", "--p", "1"],
        "ace\n",
        tmp.path(),
    );
    assert_eq!(ok(&out), "асе\n");
}

#[test]
fn render_slice_and_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&visrep(
        &["render", "--text", "hello", "--out-dir", "img"],
        "",
        tmp.path(),
    ));
    assert!(out.starts_with("line-0000.pgm\t"));
    assert!(fs::read(tmp.path().join("img/line-0000.pgm"))
        .unwrap()
        .starts_with(b"P5"));
    let out = ok(&visrep(
        &["slice", "--window", "20", "--stride", "10", "--out-dir", "s"],
        "hi\n",
        tmp.path(),
    ));
    assert!(out.contains("slices of 20x16"), "{out}");
    let bad = visrep(&["slice", "--window", "5", "--stride", "10"], "hi\n", tmp.path());
    assert!(!bad.status.success());
    let stats = ok(&visrep(&["pixel-stats"], "the quick brown fox\n", tmp.path()));
    assert!(stats.contains("avg_density"));
}

#[test]
fn bpe_and_corpus_generation() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&visrep(
        &["bpe", "train", "--merges", "3", "--model", "m.bpe"],
        "low lower lowest\n",
        tmp.path(),
    ));
    let seg = ok(&visrep(&["bpe", "apply", "--model", "m.bpe"], "lowest\n", tmp.path()));
    assert_eq!(seg.trim().replace('·', ""), "lowest");
    let chars = ok(&visrep(&["bpe", "apply", "--mode", "char"], "ab\n", tmp.path()));
    assert_eq!(chars, "a·b\n");

    ok(&visrep(
        &[
            "gen-corpus",
            "--task",
            "copy",
            "--size",
            "1",
            "--seed",
            "4",
            "--out-dir",
            "c",
        ],
        "",
        tmp.path(),
    ));
    let src = fs::read_to_string(tmp.path().join("c/source.txt")).unwrap();
    assert_eq!(src, fs::read_to_string(tmp.path().join("c/target.txt")).unwrap());
    assert_eq!(src.lines().count(), 1);
}

#[test]
fn train_translate_evaluate_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), CONFIG).unwrap();
    ok(&visrep(&["train", "--config", "run.toml"], "", dir));
    ok(&visrep(
        &["train", "--config", "run.toml", "--out-dir", "again"],
        "",
        dir,
    ));
    for f in ["metrics.jsonl", "curves/0-swap.csv"] {
        assert_eq!(
            fs::read(dir.join("run").join(f)).unwrap(),
            fs::read(dir.join("again").join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(dir.join("run/checkpoint/manifest.txt").exists());

    let bad = CONFIG.replace("window = 20", "window = 8");
    fs::write(dir.join("bad.toml"), bad).unwrap();
    let out = visrep(&["train", "--config", "bad.toml", "--out-dir", "bad"], "", dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[config]"));
    assert!(!dir.join("bad").exists());

    let t = ok(&visrep(
        &["translate", "--checkpoint", "run/checkpoint"],
        "a b\nc\n",
        dir,
    ));
    assert_eq!(t.lines().count(), 2);
    let data = [
        "--checkpoint",
        "run/checkpoint",
        "--source",
        "run/data/test.src",
        "--target",
        "run/data/test.tgt",
    ];
    let score = ok(&visrep(&[&["evaluate"], &data[..]].concat(), "", dir));
    assert!(score.contains("\"bleu\""));
    let mut noisy = vec!["evaluate", "--kind", "swap", "--ps", "0,1", "--seeds", "1"];
    noisy.extend_from_slice(&data);
    let csv = ok(&visrep(&noisy, "", dir));
    assert!(csv.starts_with("p,bleu,model,kind,seed\n0.0,"));

    fs::write(dir.join("grid.toml"), "[[axis]]\nname = \"stride\"\nvalues = [10]\n").unwrap();
    let table = ok(&visrep(
        &[
            "sweep",
            "--grid",
            "grid.toml",
            "--config",
            "run.toml",
            "--out-dir",
            "sw",
        ],
        "",
        dir,
    ));
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.starts_with("stride,bleu\n10,"));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        if text.contains("[[axis]]") {
            visrep::harness::SweepGrid::parse(&text).unwrap();
        } else {
            let cfg = visrep::harness::RunConfig::parse(&text).unwrap();
            cfg.validate(&dir).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
        seen += 1;
    }
    assert_eq!(seen, 3);
}
