//! End-to-end tests of the command surface: flags, exit codes, file
//! outputs and determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small model + small batches so the tests stay fast.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "[model]\n\
         name = tiny\n\
         input_size = 64\n\
         stage_depths = 1,1,1,1,1\n\
         stage_widths = 4,8,8,16,16\n\
         stage_kinds = res,res,fmbconv,evit,evit\n\
         neck_depth = 1\n\
         neck_width = 8\n\
         embed_dim = 16\n\
         head_dim = 8\n\
         stage4_scales =\n\
         stage5_scales =\n\
         [train]\n\
         batch_size = 2\n\
         epochs = 2\n\
         hflip_prob = 0.0\n\
         seed = 5\n",
    )
    .unwrap();
    path
}

fn gen_data(dir: &Path, count: usize) -> PathBuf {
    let data = dir.join("data");
    let out = run(&[
        "gen",
        "--seed",
        "3",
        "--count",
        &count.to_string(),
        "--size",
        "64",
        "--max-instances",
        "2",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn help_exits_zero_everywhere() {
    for sub in ["gen", "distill", "train", "eval", "bench"] {
        let out = run(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub} --help");
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--"), "{sub} help documents flags");
    }
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["gen", "--bogus"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gen_writes_expected_files_and_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path(), 10);
    let index = std::fs::read_to_string(data.join("index.txt")).unwrap();
    assert_eq!(index.lines().count(), 10);
    for i in 0..10 {
        assert!(data.join(format!("images/{i:04}.ppm")).exists());
        assert!(data.join(format!("masks/{i:04}.rle")).exists());
    }
}

#[test]
fn gen_same_seed_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let res = run(&[
            "gen", "--seed", "9", "--count", "4", "--size", "64", "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&res), 0);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn gen_rejects_bad_size_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen",
        "--size",
        "60",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn distill_writes_trace_and_supports_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = gen_data(tmp.path(), 4);
    let out1 = tmp.path().join("d1");
    let res = run(&[
        "distill",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out1.to_str().unwrap(),
        "--steps",
        "6",
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let trace = std::fs::read_to_string(out1.join("distill_trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().collect();
    assert_eq!(rows[0], "step,lr,loss");
    assert_eq!(rows.len(), 7, "header + 6 rows");
    assert!(rows[1].starts_with("1,"));
    assert!(rows[6].starts_with("6,"));

    // Resume: the step counter continues from the checkpoint.
    let out2 = tmp.path().join("d2");
    let res = run(&[
        "distill",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--steps",
        "4",
        "--resume",
        out1.join("distill.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let trace2 = std::fs::read_to_string(out2.join("distill_trace.csv")).unwrap();
    assert!(trace2.lines().nth(1).unwrap().starts_with("7,"));
    assert!(trace2.lines().nth(4).unwrap().starts_with("10,"));
}

#[test]
fn distill_loss_improves_on_default_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = gen_data(tmp.path(), 4);
    let out = tmp.path().join("d");
    let res = run(&[
        "distill",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--steps",
        "50",
    ]);
    assert_eq!(code(&res), 0);
    let trace = std::fs::read_to_string(out.join("distill_trace.csv")).unwrap();
    let loss = |line: &str| -> f32 { line.split(',').nth(2).unwrap().parse().unwrap() };
    let lines: Vec<&str> = trace.lines().skip(1).collect();
    assert!(
        loss(lines.last().unwrap()) < loss(lines.first().unwrap()),
        "final loss below initial"
    );
}

#[test]
fn train_is_deterministic_and_resumable_shapes_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = gen_data(tmp.path(), 4);
    let (o1, o2) = (tmp.path().join("t1"), tmp.path().join("t2"));
    for out in [&o1, &o2] {
        let res = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--steps",
            "3",
        ]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(dir_bytes(&o1), dir_bytes(&o2), "same seed, same bytes");
    let trace = std::fs::read_to_string(o1.join("train_trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "step,lr,focal,dice,total");
    assert_eq!(trace.lines().count(), 4);

    // A checkpoint from a different architecture is a config error.
    let other_out = tmp.path().join("t3");
    let res = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        other_out.to_str().unwrap(),
        "--steps",
        "1",
        "--init",
        o1.join("model.ckpt").to_str().unwrap(),
        // default config: the desk model, different shapes
    ]);
    assert_eq!(code(&res), 2, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn eval_point_and_box_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = gen_data(tmp.path(), 3);
    let train_out = tmp.path().join("t");
    let res = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
        "--steps",
        "2",
    ]);
    assert_eq!(code(&res), 0);
    let ckpt = train_out.join("model.ckpt");

    let eval_out = tmp.path().join("e_point");
    let res = run(&[
        "eval",
        "--mode",
        "point",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(eval_out.join("point_eval.csv")).unwrap();
    assert!(csv.starts_with("mask_id,area_bucket,iou@1,iou@3,iou@5"));
    assert!(csv.lines().count() > 1);
    let summary = std::fs::read_to_string(eval_out.join("summary.txt")).unwrap();
    assert!(summary.contains("miou@1 = "));
    assert!(summary.contains("miou@5 = "));

    let eval_out = tmp.path().join("e_box");
    let res = run(&[
        "eval",
        "--mode",
        "box",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0);
    let csv = std::fs::read_to_string(eval_out.join("box_eval.csv")).unwrap();
    assert!(csv.starts_with("mask_id,area_bucket,box_iou"));
    let summary = std::fs::read_to_string(eval_out.join("summary.txt")).unwrap();
    assert!(summary.contains("miou = "));
}

#[test]
fn eval_missing_checkpoint_and_empty_dataset_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path(), 2);
    let res = run(&[
        "eval",
        "--mode",
        "box",
        "--ckpt",
        tmp.path().join("nope.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2, "missing checkpoint is a config error");

    // Empty dataset: generate zero images, then point at it.
    let empty = tmp.path().join("empty");
    let res = run(&["gen", "--count", "0", "--size", "64", "--out", empty.to_str().unwrap()]);
    assert_eq!(code(&res), 0);
    let cfg = tiny_config(tmp.path());
    let train_out = tmp.path().join("t");
    let res = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
        "--steps",
        "1",
    ]);
    assert_eq!(code(&res), 0);
    let res = run(&[
        "eval",
        "--mode",
        "box",
        "--ckpt",
        train_out.join("model.ckpt").to_str().unwrap(),
        "--data",
        empty.to_str().unwrap(),
        "--out",
        tmp.path().join("e2").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 1, "empty dataset is a usage error");
}

#[test]
fn bench_macs_matches_library_and_time_respects_reps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("bench");
    let res = run(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "macs",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(out_dir.join("cost.csv")).unwrap();
    let total_line = csv.lines().last().unwrap();
    let parts: Vec<&str> = total_line.split(',').collect();
    let (params, macs): (u64, u64) = (parts[2].parse().unwrap(), parts[3].parse().unwrap());
    let lib_cfg = promptseg::data::parse_config(&cfg).unwrap().model;
    let report = promptseg::cost::count_macs(&lib_cfg, lib_cfg.input_size).unwrap();
    assert_eq!(params, report.total_params);
    assert_eq!(macs, report.total_macs);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("total"), "aligned table printed");

    let res = run(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "time",
        "--reps",
        "5",
        "--warmup",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let timing = std::fs::read_to_string(out_dir.join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 6, "header + 5 samples");
    assert!(String::from_utf8_lossy(&res.stdout).contains("over 5 reps"));
}

#[test]
fn bench_unknown_mode_is_usage_error() {
    let res = run(&["bench", "--mode", "flops"]);
    assert_eq!(code(&res), 1);
}
