//! End-to-end tests of the command-line interface: training, runs, config
//! files with flag overrides, the bias study, sweeps, and exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unmix-tns"))
}

fn train_small_model(dir: &Path) -> std::path::PathBuf {
    let model = dir.join("model.txt");
    let out = bin()
        .args([
            "train-source",
            "--out",
            model.to_str().unwrap(),
            "--classes",
            "3",
            "--input-channels",
            "4",
            "--spatial",
            "2",
            "--n-per-class",
            "150",
            "--hidden",
            "8,8",
            "--epochs",
            "12",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "train-source failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    model
}

#[test]
fn train_run_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_small_model(dir.path());
    assert!(model.exists());

    let trace_a = dir.path().join("a.trace");
    let trace_b = dir.path().join("b.trace");
    for trace in [&trace_a, &trace_b] {
        let out = bin()
            .args([
                "run",
                "--model",
                model.to_str().unwrap(),
                "--out",
                trace.to_str().unwrap(),
                "--norm",
                "unmix",
                "--scenario",
                "continual",
                "--delta",
                "0.1",
                "--batch-size",
                "32",
                "--seed",
                "5",
            ])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "run failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let a = std::fs::read(&trace_a).unwrap();
    let b = std::fs::read(&trace_b).unwrap();
    assert_eq!(a, b, "identical runs must produce identical trace files");
    assert!(String::from_utf8_lossy(&a).starts_with("unmix-tns-trace v1"));
}

#[test]
fn config_file_supplies_values_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_small_model(dir.path());

    let cfg = dir.path().join("run.cfg");
    let from_file = dir.path().join("file.trace");
    std::fs::write(
        &cfg,
        format!(
            "model={}\nout={}\nnorm=tbn\nscenario=single\ndelta=0.05\nbatch-size=32\nseed=3\n",
            model.display(),
            from_file.display()
        ),
    )
    .unwrap();
    let out = bin().args(["run", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(
        out.status.success(),
        "config run failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(from_file.exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("tbn"), "stdout: {stdout}");

    // The --norm flag overrides the file entry; the trace records carry the
    // norm name.
    let overridden = dir.path().join("override.trace");
    let out = bin()
        .args([
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--norm",
            "ema-bn",
            "--out",
            overridden.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&overridden).unwrap();
    assert!(text.lines().skip(5).all(|l| l.is_empty() || l.contains(" ema-bn ")));

    // Unknown config keys are rejected.
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "model=x\nnot-a-key=1\n").unwrap();
    let out = bin().args(["run", "--config", bad.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn invalid_arguments_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_small_model(dir.path());
    let trace = dir.path().join("x.trace");

    let out = bin()
        .args([
            "run",
            "--model",
            model.to_str().unwrap(),
            "--out",
            trace.to_str().unwrap(),
            "--scenario",
            "sideways",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("sideways"), "stderr: {stderr}");

    let out = bin()
        .args([
            "run",
            "--model",
            model.to_str().unwrap(),
            "--out",
            trace.to_str().unwrap(),
            "--delta=-1",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("delta"), "stderr: {stderr}");

    // Missing the model entirely.
    let out = bin().args(["run", "--out", trace.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn bias_trace_writes_study_file() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("bias.trace");
    let out = bin()
        .args([
            "bias-trace",
            "--out",
            out_path.to_str().unwrap(),
            "--steps",
            "40",
            "--segment",
            "10",
            "--batch-size",
            "16",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "bias-trace failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert!(text.starts_with("unmix-tns-bias-trace v1"));
    // Header, dims, columns, then one line per step.
    assert_eq!(text.lines().count(), 3 + 40);
}

#[test]
fn sweep_emits_summary_table() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_small_model(dir.path());
    let summary = dir.path().join("sweep.txt");
    let out = bin()
        .args([
            "sweep",
            "--model",
            model.to_str().unwrap(),
            "--out",
            summary.to_str().unwrap(),
            "--axis",
            "delta",
            "--values",
            "0.05,1.0",
            "--norm",
            "tbn",
            "--batch-size",
            "32",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "sweep failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&summary).unwrap();
    assert!(text.starts_with("unmix-tns-sweep v1"));
    assert_eq!(text.lines().count(), 3 + 2);

    let out = bin()
        .args([
            "sweep",
            "--model",
            model.to_str().unwrap(),
            "--out",
            summary.to_str().unwrap(),
            "--axis",
            "sideways",
            "--values",
            "1",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
