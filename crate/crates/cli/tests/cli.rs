//! End-to-end smoke test of the binary: pretrain → convert → decode →
//! eval → report, all inside a temp directory.

use std::path::Path;
use std::process::Command;

fn run(dir: &Path, args: &[&str]) -> String {
    let output = Command::new(env!("CARGO_BIN_EXE_blockdlm"))
        .args(args)
        .current_dir(dir)
        .env("BLOCKDLM_OUT", dir.join("runs"))
        .output()
        .expect("binary should launch");
    assert!(
        output.status.success(),
        "blockdlm {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout).expect("stdout should be utf-8")
}

#[test]
fn full_pipeline_runs() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = tmp.path();
    let cfg = dir.join("tiny.cfg");
    std::fs::write(
        &cfg,
        "run_id = cli-ar\n\
         seed = 3\n\
         d_model = 32\n\
         n_heads = 4\n\
         n_layers = 1\n\
         d_ffn = 64\n\
         max_positions = 64\n\
         task = copy\n\
         seq_len = 32\n\
         batch_size = 4\n\
         steps = 20\n\
         train_block_size = 4\n\
         eval_block_sizes = 4\n\
         tau_grid = off,0.5\n\
         max_new_tokens = 8\n\
         eval_instances = 2\n\
         mc_samples = 2\n",
    )
    .expect("write config");
    let cfg = cfg.to_str().expect("utf-8 path");

    run(dir, &["--config", cfg, "pretrain-ar"]);
    let ar_ckpt = dir.join("runs/cli-ar/checkpoints/final.ckpt");
    assert!(ar_ckpt.is_file(), "pretrain should write a checkpoint");

    run(
        dir,
        &[
            "--config",
            cfg,
            "--run-id",
            "cli-dlm",
            "convert",
            "--from",
            ar_ckpt.to_str().expect("utf-8 path"),
        ],
    );
    let dlm_ckpt = dir.join("runs/cli-dlm/checkpoints/final.ckpt");
    let dlm_ckpt = dlm_ckpt.to_str().expect("utf-8 path");

    let text = run(
        dir,
        &[
            "--config",
            cfg,
            "decode",
            "--checkpoint",
            dlm_ckpt,
            "--prompt",
            "copy:ab=",
            "--pad-to",
            "16",
            "--tau",
            "0.5",
            "--trace-out",
            dir.join("trace.json").to_str().expect("utf-8 path"),
        ],
    );
    assert!(!text.is_empty(), "decode should print something");
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("trace.json")).expect("trace file"))
            .expect("trace should be valid JSON");
    assert_eq!(trace["eval_block_size"], 4);
    assert_eq!(trace["confidence_threshold"], 0.5);

    let table = run(
        dir,
        &[
            "--config",
            cfg,
            "eval-gen",
            "--checkpoint",
            dlm_ckpt,
            "--out",
            dir.join("gen.csv").to_str().expect("utf-8 path"),
        ],
    );
    assert!(table.starts_with("task,eval_block_size,tau,"), "header first");
    // 1 task x 1 block size x 2 thresholds.
    assert_eq!(table.lines().count(), 3, "header plus one row per cell:\n{table}");
    assert_eq!(
        std::fs::read_to_string(dir.join("gen.csv")).expect("gen.csv"),
        table,
        "--out must save exactly what was printed"
    );

    let mc = run(dir, &["--config", cfg, "eval-mc", "--checkpoint", dlm_ckpt]);
    assert!(mc.starts_with("mc_accuracy "), "got: {mc}");

    let listing = run(
        dir,
        &[
            "report",
            "--run-dir",
            dir.join("runs/cli-dlm").to_str().expect("utf-8 path"),
        ],
    );
    assert!(
        listing.lines().any(|l| l.ends_with("summary.json")),
        "report should emit a summary: {listing}"
    );

    let grid = run(dir, &["layout", "--kind", "block_noisy", "--rows", "8", "--block", "4"]);
    assert_eq!(grid.lines().count(), 8);
    assert!(grid.lines().all(|l| l.len() == 8));
}
