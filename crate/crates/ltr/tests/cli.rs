//! Integration tests exercising the `ltr` binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ltr"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    model: PathBuf,
}

/// Generate a small dataset and train a quick rsa model once.
fn trained_workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    run_ok(bin()
        .args(["synth", "--seed", "9", "--queries", "20", "--valid-queries", "8"])
        .args(["--test-queries", "8", "--docs-per-query", "10", "--features", "6"])
        .arg("--out")
        .arg(&data));
    let run = root.join("run");
    run_ok(bin()
        .arg("train")
        .arg("--train")
        .arg(data.join("train.txt"))
        .arg("--valid")
        .arg(data.join("valid.txt"))
        .args(["--variant", "rsa", "--hidden-dim", "4", "--epochs", "3", "--seed", "1"])
        .arg("--out")
        .arg(&run));
    Workspace { root, data, model: run.join("model.ckpt"), _dir: dir }
}

#[test]
fn usage_errors_exit_with_code_2() {
    // unknown flag
    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    // missing required --valid
    let out = bin().args(["train", "--train", "x.txt"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--valid"));
    // bad config file key
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = bin().arg("config-dump").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_1() {
    let out = bin()
        .args(["eval", "--model", "/nonexistent.ckpt", "--test", "/nonexistent.txt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_dump_prints_defaults_and_applies_overrides() {
    let out = run_ok(bin().arg("config-dump"));
    let text = stdout(&out);
    assert!(text.contains("variant = rsa"));
    assert!(text.contains("encoders = +>-<"));
    assert!(text.contains("hidden_dim = 64"));
    assert!(text.contains("normalize = none"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "variant = sa\nseed = 123\n").unwrap();
    let out = run_ok(bin()
        .arg("config-dump")
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "456"]));
    let text = stdout(&out);
    // config file applied, flag wins over file
    assert!(text.contains("variant = sa"));
    assert!(text.contains("seed = 456"));
}

#[test]
fn predict_emits_one_row_per_document_in_input_order() {
    let ws = trained_workspace();
    let out_dir = ws.root.join("pred");
    run_ok(bin()
        .arg("predict")
        .arg("--model")
        .arg(&ws.model)
        .arg("--test")
        .arg(ws.data.join("test.txt"))
        .arg("--out")
        .arg(&out_dir));
    let text = std::fs::read_to_string(out_dir.join("predictions.tsv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 8 * 10, "one row per document");
    // input order: qids appear grouped, doc indices count up from 0
    let mut expected_qid = None;
    let mut expected_doc = 0usize;
    for row in &rows {
        let mut cols = row.split('\t');
        let qid = cols.next().unwrap();
        let doc: usize = cols.next().unwrap().parse().unwrap();
        let _score: f64 = cols.next().unwrap().parse().unwrap();
        if expected_qid != Some(qid.to_string()) {
            expected_qid = Some(qid.to_string());
            expected_doc = 0;
        }
        assert_eq!(doc, expected_doc);
        expected_doc += 1;
    }
}

#[test]
fn eval_report_matches_training_best_score() {
    let ws = trained_workspace();
    // retrain to capture the printed best validation score
    let run2 = ws.root.join("run2");
    let out = run_ok(bin()
        .arg("train")
        .arg("--train")
        .arg(ws.data.join("train.txt"))
        .arg("--valid")
        .arg(ws.data.join("valid.txt"))
        .args(["--variant", "rsa", "--hidden-dim", "4", "--epochs", "3", "--seed", "1"])
        .arg("--out")
        .arg(&run2));
    let text = stdout(&out);
    let best: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("validation ndcg@10 "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();

    let eval_dir = ws.root.join("eval");
    run_ok(bin()
        .arg("eval")
        .arg("--model")
        .arg(run2.join("model.ckpt"))
        .arg("--test")
        .arg(ws.data.join("valid.txt"))
        .arg("--out")
        .arg(&eval_dir));
    let per_query = std::fs::read_to_string(eval_dir.join("per_query.tsv")).unwrap();
    let mut header = per_query.lines().next().unwrap().split('\t');
    let ndcg10_col = header.position(|c| c == "ndcg@10").unwrap();
    let values: Vec<f64> = per_query
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(ndcg10_col).unwrap().parse().unwrap())
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    assert!(
        (mean - best).abs() < 1e-12,
        "eval per-query mean {mean} vs training best {best}"
    );
}

#[test]
fn attention_export_ranges_and_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // the grade sequence from the heatmap example: three 3s, two 1s, five 0s
    let grades = [3u32, 0, 0, 1, 3, 0, 0, 1, 0, 3];
    let mut letor = String::new();
    for (i, g) in grades.iter().enumerate() {
        letor.push_str(&format!(
            "{g} qid:42 1:{} 2:{}\n",
            (i as f64) / 10.0,
            (*g as f64) / 4.0 + 0.01 * i as f64
        ));
    }
    // a second query so training has something to shuffle
    letor.push_str("1 qid:43 1:0.5 2:0.3\n0 qid:43 1:0.2 2:0.1\n");
    let data_path = root.join("mini.txt");
    std::fs::write(&data_path, &letor).unwrap();

    let run = root.join("run");
    run_ok(bin()
        .arg("train")
        .arg("--train")
        .arg(&data_path)
        .arg("--valid")
        .arg(&data_path)
        .args(["--variant", "rsa", "--hidden-dim", "3", "--epochs", "2", "--seed", "3"])
        .arg("--out")
        .arg(&run));

    let att = root.join("att");
    let out = run_ok(bin()
        .arg("attention")
        .arg("--model")
        .arg(run.join("model.ckpt"))
        .arg("--test")
        .arg(&data_path)
        .args(["--qid", "42"])
        .arg("--out")
        .arg(&att));
    assert!(stdout(&out).contains("mean-bce"));

    for slug in ["plus", "gt", "minus", "lt"] {
        for role in ["learned", "ideal"] {
            assert!(att.join(format!("attention_42_{slug}_{role}.csv")).exists());
            assert!(att.join(format!("attention_42_{slug}_{role}.pgm")).exists());
        }
    }

    let learned = read_csv(&att.join("attention_42_plus_learned.csv"));
    assert_eq!(learned.len(), 10);
    for row in &learned {
        assert_eq!(row.len(), 10);
        for &v in row {
            assert!(v > 0.0 && v < 1.0, "sigma entry {v} outside (0,1)");
        }
    }

    let ideal = read_csv(&att.join("attention_42_plus_ideal.csv"));
    for (i, row) in ideal.iter().enumerate() {
        for &v in row {
            assert!(v == 0.0 || v == 1.0, "ideal entry {v} not binary");
        }
        let all_zero = row.iter().all(|&v| v == 0.0);
        // grade-3 documents attend to nothing under the more-relevant target
        assert_eq!(all_zero, grades[i] == 3, "row {i}");
    }

    // PGM round-trip sanity against the csv grid
    let pgm = std::fs::read_to_string(att.join("attention_42_plus_learned.pgm")).unwrap();
    let mut tokens = pgm.split_whitespace();
    assert_eq!(tokens.next(), Some("P2"));
    assert_eq!(tokens.next(), Some("10"));
    assert_eq!(tokens.next(), Some("10"));
    assert_eq!(tokens.next(), Some("255"));
    let gray: Vec<u32> = tokens.map(|t| t.parse().unwrap()).collect();
    assert_eq!(gray.len(), 100);
    for (g, v) in gray.iter().zip(learned.iter().flatten()) {
        assert_eq!(*g, (v * 255.0).round() as u32);
    }
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|t| t.parse().unwrap()).collect())
        .collect()
}

#[test]
fn attention_csv_reproduces_sigma_within_print_precision() {
    let ws = trained_workspace();
    let att = ws.root.join("att");
    run_ok(bin()
        .arg("attention")
        .arg("--model")
        .arg(&ws.model)
        .arg("--test")
        .arg(ws.data.join("test.txt"))
        .args(["--qid", "29"])
        .arg("--out")
        .arg(&att));

    // the parsed CSV must match the in-memory sigma of the same checkpoint
    let model = ltr::train::load_checkpoint(&ws.model).unwrap();
    let test_ds = {
        let file = std::fs::File::open(ws.data.join("test.txt")).unwrap();
        ltr::data::parse_letor(std::io::BufReader::new(file)).unwrap().with_k_max_floor(4)
    };
    let group = test_ds.groups.iter().find(|g| g.qid == "29").unwrap();
    let (_, sigmas) = model.forward_group(group).unwrap();
    for (kind, sigma) in &sigmas {
        let parsed = read_csv(&att.join(format!("attention_29_{}_learned.csv", kind.slug())));
        for (i, row) in parsed.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!(
                    (v - sigma.get(i, j)).abs() <= 1e-9,
                    "kind {} entry ({i},{j}): {v} vs {}",
                    kind.symbol(),
                    sigma.get(i, j)
                );
            }
        }
    }

    let out = bin()
        .arg("attention")
        .arg("--model")
        .arg(&ws.model)
        .arg("--test")
        .arg(ws.data.join("test.txt"))
        .args(["--qid", "does-not-exist"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown qid"));
}

#[test]
fn significance_reproduces_library_t_test() {
    let ws = trained_workspace();
    // evaluate the same checkpoint on two different splits to get two files
    let eval_a = ws.root.join("eval_a");
    let eval_b = ws.root.join("eval_b");
    for (dir, split) in [(&eval_a, "test.txt"), (&eval_b, "valid.txt")] {
        run_ok(bin()
            .arg("eval")
            .arg("--model")
            .arg(&ws.model)
            .arg("--test")
            .arg(ws.data.join(split))
            .arg("--out")
            .arg(dir));
    }
    // same qid sequences are required: rewrite file b with file a's qids
    let a_text = std::fs::read_to_string(eval_a.join("per_query.tsv")).unwrap();
    let b_text = std::fs::read_to_string(eval_b.join("per_query.tsv")).unwrap();
    let patched: String = b_text
        .lines()
        .zip(a_text.lines())
        .map(|(b, a)| {
            let qid = a.split('\t').next().unwrap();
            let rest: Vec<&str> = b.split('\t').skip(1).collect();
            format!("{qid}\t{}\n", rest.join("\t"))
        })
        .collect();
    let b_path = ws.root.join("b_patched.tsv");
    std::fs::write(&b_path, patched).unwrap();

    let out = run_ok(bin()
        .arg("significance")
        .arg("--a")
        .arg(eval_a.join("per_query.tsv"))
        .arg("--b")
        .arg(&b_path));
    let text = stdout(&out);
    let ndcg10_row = text.lines().find(|l| l.starts_with("ndcg@10\t")).unwrap();
    let cols: Vec<&str> = ndcg10_row.split('\t').collect();
    let printed_t: f64 = cols[4].parse().unwrap();
    let printed_p: f64 = cols[6].parse().unwrap();

    // recompute with the library on the same columns
    let parse_col = |text: &str| -> Vec<f64> {
        let mut header = text.lines().next().unwrap().split('\t');
        let idx = header.position(|c| c == "ndcg@10").unwrap();
        text.lines()
            .skip(1)
            .map(|l| l.split('\t').nth(idx).unwrap().parse().unwrap())
            .collect()
    };
    let a_vals = parse_col(&a_text);
    let b_vals = parse_col(&std::fs::read_to_string(&b_path).unwrap());
    let r = ltr::metrics::paired_t_test(&a_vals, &b_vals).unwrap();
    assert!((printed_t - r.t).abs() < 1e-3, "printed t {printed_t} vs {}", r.t);
    assert!((printed_p - r.p).abs() < 1e-5, "printed p {printed_p} vs {}", r.p);
}

#[test]
fn single_encoder_ablation_trains() {
    let ws = trained_workspace();
    let run = ws.root.join("ablation");
    run_ok(bin()
        .arg("train")
        .arg("--train")
        .arg(ws.data.join("train.txt"))
        .arg("--valid")
        .arg(ws.data.join("valid.txt"))
        .args(["--variant", "rsa", "--encoders", "+"])
        .args(["--hidden-dim", "4", "--epochs", "2", "--seed", "2"])
        .arg("--out")
        .arg(&run));
    // only the configured encoder shows up in the attention export
    let att = ws.root.join("att_abl");
    run_ok(bin()
        .arg("attention")
        .arg("--model")
        .arg(run.join("model.ckpt"))
        .arg("--test")
        .arg(ws.data.join("test.txt"))
        .args(["--qid", "29"])
        .arg("--out")
        .arg(&att));
    assert!(att.join("attention_29_plus_learned.csv").exists());
    assert!(!att.join("attention_29_gt_learned.csv").exists());
}
