use std::path::Path;
use std::process::{Command, Output};

use bltd::corpus::synthetic;
use bltd::metrics::{memory_bandwidth_gb, ComponentParams};
use bltd::model::checkpoint;

const TINY_CFG: &str = "steps = 10\nwarmup = 2\nbatch_bytes = 64\nexample_len = 32\nblock_size = 4\n\
d_local = 16\nd_global = 32\nheads_enc = 2\nheads_glob = 2\nheads_dec = 2\nl_glob = 1\nl_dec = 1\nffn_mult = 2\n";

fn bltd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bltd"))
        .current_dir(dir)
        .args(args)
        .env_remove("BLTD_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Temp dir holding a corpus, config and a trained `m.ckpt`.
fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.txt"), synthetic(8_000, 3)).unwrap();
    std::fs::write(dir.path().join("run.cfg"), TINY_CFG).unwrap();
    let o = bltd(
        dir.path(),
        &["train", "--config", "run.cfg", "--corpus", "corpus.txt", "--out", "m.ckpt"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn missing_corpus_exits_3_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = bltd(dir.path(), &["train", "--corpus", "nowhere.txt", "--out", "m.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nowhere.txt"), "{}", stderr(&o));
}

#[test]
fn empty_corpus_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.txt"), b"").unwrap();
    let o = bltd(dir.path(), &["train", "--corpus", "empty.txt", "--out", "m.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.txt"), synthetic(2_000, 1)).unwrap();
    let o = bltd(
        dir.path(),
        &["train", "--corpus", "corpus.txt", "--out", "m.ckpt", "--set", "bogus=1"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_and_loss_curve() {
    let dir = trained();
    let header = checkpoint::read_header(&mut std::fs::File::open(dir.path().join("m.ckpt")).unwrap()).unwrap();
    let get = |k: &str| header.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
    assert_eq!(get("d_local").as_deref(), Some("16"));
    assert_eq!(get("d_global").as_deref(), Some("32"));
    checkpoint::load(&dir.path().join("m.ckpt")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("m.ckpt.loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,l_clean,l_mask,l_total,lr");
    assert_eq!(lines.len(), 11);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn seed_flag_changes_the_checkpoint() {
    let dir = trained();
    let a = std::fs::read(dir.path().join("m.ckpt")).unwrap();
    let o = bltd(
        dir.path(),
        &["train", "--config", "run.cfg", "--corpus", "corpus.txt", "--out", "s.ckpt", "--seed", "9"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(a, std::fs::read(dir.path().join("s.ckpt")).unwrap());
}

#[test]
fn generate_one_byte_with_ar() {
    let dir = trained();
    let o = bltd(
        dir.path(),
        &["generate", "m.ckpt", "--prompt", "The ", "--length", "1", "--trace", "t.json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.len() <= 1);
    let trace: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(dir.path().join("t.json")).unwrap().trim()).unwrap();
    assert_eq!(trace["engine"], "ar");
    assert_eq!(trace["decoder_nfes"], 1);
    assert_eq!(trace["output_len"], o.stdout.len());
}

#[test]
fn blt_s_stdout_equals_ar_stdout() {
    let dir = trained();
    let ar = bltd(dir.path(), &["generate", "m.ckpt", "--prompt", "A t", "--length", "40"]);
    for k in ["1", "3", "8"] {
        let s = bltd(
            dir.path(),
            &["generate", "m.ckpt", "--prompt", "A t", "--length", "40", "--engine", "blt-s", "--window", k],
        );
        assert!(s.status.success(), "{}", stderr(&s));
        assert_eq!(s.stdout, ar.stdout);
    }
}

#[test]
fn hex_output_encodes_the_raw_bytes() {
    let dir = trained();
    let raw = bltd(dir.path(), &["generate", "m.ckpt", "--prompt", "The", "--length", "12"]);
    let hex = bltd(dir.path(), &["generate", "m.ckpt", "--prompt", "The", "--length", "12", "--hex"]);
    let text = String::from_utf8(hex.stdout).unwrap();
    let expected: String = raw.stdout.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(text.trim_end(), expected);
}

#[test]
fn eb_trace_records_strategy_and_gamma() {
    let dir = trained();
    let o = bltd(
        dir.path(),
        &[
            "generate", "m.ckpt", "--prompt", "The", "--length", "16", "--engine", "blt-d", "--strategy", "eb",
            "--gamma", "0.8", "--trace", "t.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let trace: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(dir.path().join("t.json")).unwrap().trim()).unwrap();
    assert_eq!(trace["engine"], "blt-d");
    assert_eq!(trace["strategy"], "eb");
    assert_eq!(trace["gamma"], 0.8);
    assert_eq!(trace["alpha"], serde_json::Value::Null);
}

#[test]
fn incompatible_engine_flags_exit_2() {
    let dir = trained();
    let cases: &[&[&str]] = &[
        &["--engine", "ar", "--block-size", "4"],
        &["--engine", "blt-s", "--alpha", "0.5"],
        &["--engine", "blt-d", "--window", "4"],
        &["--engine", "blt-d", "--strategy", "confidence", "--gamma", "1"],
        &["--engine", "blt-d", "--strategy", "one-step", "--alpha", "0.5"],
        &["--engine", "blt-dv", "--strategy", "eb", "--alpha", "0.5"],
        &["--engine", "blt-d", "--alpha", "1.5"],
        &["--engine", "gpt"],
    ];
    for flags in cases {
        let mut args = vec!["generate", "m.ckpt", "--prompt", "x"];
        args.extend_from_slice(flags);
        let o = bltd(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{flags:?}: {}", stderr(&o));
    }
}

#[test]
fn generate_rejects_a_corrupt_checkpoint() {
    let dir = trained();
    std::fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let o = bltd(dir.path(), &["generate", "bad.ckpt", "--prompt", "x"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bench_writes_one_row_per_prompt_and_config() {
    let dir = trained();
    let d = dir.path();
    std::fs::write(d.join("prompts.txt"), "The \nA t\\x41\n").unwrap();
    std::fs::write(
        d.join("sweep.txt"),
        "# engines\nengine=ar\n\nengine=blt-d block=4 strategy=confidence alpha=0.5\nengine=blt-s k=2\n",
    )
    .unwrap();
    let o = bltd(
        d,
        &["bench", "m.ckpt", "--prompts", "prompts.txt", "--sweep", "sweep.txt", "--length", "20", "--out", "b.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("b.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "engine,config,decoder_nfes,encoder_global_nfes,memory_gb,acceptance_rate,ttr");
    assert_eq!(lines.len(), 1 + 3 * 2);
    let (model, _) = checkpoint::load(&d.join("m.ckpt")).unwrap();
    let params = ComponentParams::of_model(&model);
    for row in &lines[1..] {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f.len(), 7, "{row}");
        let gb: f64 = f[4].parse().unwrap();
        let expect = memory_bandwidth_gb(f[2].parse().unwrap(), f[3].parse().unwrap(), &params);
        assert_eq!(gb, expect, "{row}");
        match f[0] {
            "ar" | "blt-d" => assert_eq!(f[5], "", "{row}"),
            "blt-s" => assert!(f[5].parse::<f64>().is_ok(), "{row}"),
            other => panic!("unexpected engine {other}"),
        }
    }
    assert_eq!(lines[1].split(',').nth(1), Some("-"));
    assert_eq!(lines[3].split(',').nth(1), Some("block=4 strategy=confidence alpha=0.5"));
}

#[test]
fn score_single_and_duplicate_candidates() {
    let dir = trained();
    let d = dir.path();
    std::fs::write(d.join("one.txt"), "the cat\n").unwrap();
    let o = bltd(d, &["score", "m.ckpt", "one.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().last(), Some("argmax\t0"));

    std::fs::write(d.join("dup.txt"), "zq\nthe dog\nthe dog\n").unwrap();
    let out = String::from_utf8(bltd(d, &["score", "m.ckpt", "dup.txt"]).stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    let score = |l: &str| l.split('\t').nth(1).unwrap().to_string();
    assert_eq!(score(lines[1]), score(lines[2]));
    assert!(lines[0].starts_with("0\t") && lines[0].ends_with("\tzq"));

    std::fs::write(d.join("none.txt"), "").unwrap();
    assert_eq!(bltd(d, &["score", "m.ckpt", "none.txt"]).status.code(), Some(2));
    std::fs::write(d.join("bad.txt"), "ab\\q\n").unwrap();
    assert_eq!(bltd(d, &["score", "m.ckpt", "bad.txt"]).status.code(), Some(3));
}

#[test]
fn patch_inspect_covers_the_text() {
    let dir = trained();
    let o = bltd(dir.path(), &["patch-inspect", "--checkpoint", "m.ckpt", "--text", "The cat sat on the mat."]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "start\tlength\ttrigger\tbytes");
    assert_eq!(lines[1], "0\t1\tbos\t<bos>");
    assert!(lines[2].starts_with("1\t") && lines[2].contains("\tafter-bos\t"));
    let mut next = 0;
    for l in &lines[1..] {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f[0].parse::<usize>().unwrap(), next);
        let len: usize = f[1].parse().unwrap();
        assert!((1..=8).contains(&len));
        next += len;
    }
    assert_eq!(next, 1 + "The cat sat on the mat.".len());

    let fresh = bltd(dir.path(), &["patch-inspect", "--corpus", "corpus.txt", "--text", "abc"]);
    assert!(fresh.status.success(), "{}", stderr(&fresh));
}
