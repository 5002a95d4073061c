//! End-to-end command flows through the CLI layer: artifact production,
//! byte-identical reruns, and error paths.

use std::path::PathBuf;

use metantk::cli::{config_for, main_with_args, run_command};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join(format!("metantk-cli-{}", std::process::id()))
        .join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn args(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn gen_tasks_then_kernel_pipeline() {
    let dir = scratch("pipeline");
    let tasks_dir = dir.join("tasks");
    let code = main_with_args(&args(&[
        "gen-tasks",
        &format!("--out_dir={}", tasks_dir.display()),
        "--seed=5",
        "--tasks.num=3",
        "--tasks.query=3",
        "--tasks.support=3",
    ]));
    assert_eq!(code, 0);
    let tasks_file = tasks_dir.join("tasks.txt");
    assert!(tasks_file.exists());
    assert!(tasks_dir.join("manifest.txt").exists());

    let kern_dir = dir.join("kernel");
    let code = main_with_args(&args(&[
        "kernel",
        &format!("--out_dir={}", kern_dir.display()),
        &format!("--tasks_file={}", tasks_file.display()),
        "--net.widths=16,16",
        "--kind=metantk",
    ]));
    assert_eq!(code, 0);
    let bin = std::fs::read(kern_dir.join("kernel.bin")).unwrap();
    let kernel = metantk::kernels::KernelMatrix::from_bytes(&bin).unwrap();
    assert_eq!(kernel.kind, metantk::kernels::KernelKind::MetaNtk);
    assert_eq!(kernel.mat.rows(), 9);
    let csv = std::fs::read_to_string(kern_dir.join("kernel.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = scratch("rerun");
    let run = |out: &PathBuf| {
        let cfg = config_for(
            "nas-search",
            &[
                ("out_dir", out.to_str().unwrap()),
                ("nas.cells", "1"),
                ("nas.nodes", "1"),
                ("nas.width", "8"),
                ("nas.ops", "dense,dense_relu,zero"),
                ("probes.count", "32"),
                ("tasks.num", "2"),
                ("tasks.query", "3"),
                ("tasks.support", "3"),
            ],
        )
        .unwrap();
        run_command("nas-search", &cfg).unwrap();
    };
    let a = dir.join("a");
    let b = dir.join("b");
    run(&a);
    run(&b);
    for name in ["architecture.txt", "audit.csv"] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs between identical runs");
    }
}

#[test]
fn train_and_predict_commands() {
    let dir = scratch("train");
    let tasks_dir = dir.join("tasks");
    let cfg = config_for(
        "gen-tasks",
        &[
            ("out_dir", tasks_dir.to_str().unwrap()),
            ("tasks.num", "3"),
            ("tasks.query", "4"),
            ("tasks.support", "4"),
        ],
    )
    .unwrap();
    run_command("gen-tasks", &cfg).unwrap();
    let test_dir = dir.join("test-tasks");
    let cfg = config_for(
        "gen-tasks",
        &[
            ("out_dir", test_dir.to_str().unwrap()),
            ("seed", "99"),
            ("tasks.num", "2"),
            ("tasks.query", "4"),
            ("tasks.support", "4"),
        ],
    )
    .unwrap();
    run_command("gen-tasks", &cfg).unwrap();

    let train_out = dir.join("train");
    let tasks_file = tasks_dir.join("tasks.txt");
    let cfg = config_for(
        "train-maml",
        &[
            ("out_dir", train_out.to_str().unwrap()),
            ("tasks_file", tasks_file.to_str().unwrap()),
            ("net.widths", "32,32"),
            ("train.steps", "10"),
            ("train.eta", "0.002"),
            ("train.lambda", "0.01"),
            ("log_kernel", "1"),
            ("train.kernel_log_interval", "5"),
        ],
    )
    .unwrap();
    run_command("train-maml", &cfg).unwrap();
    let csv = std::fs::read_to_string(train_out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,loss,param_dist,kernel_drift");
    assert_eq!(lines.count(), 11);

    let pred_out = dir.join("predict");
    let cfg = config_for(
        "predict",
        &[
            ("out_dir", pred_out.to_str().unwrap()),
            ("tasks_file", tasks_file.to_str().unwrap()),
            ("test_file", test_dir.join("tasks.txt").to_str().unwrap()),
            ("net.widths", "32,32"),
        ],
    )
    .unwrap();
    run_command("predict", &cfg).unwrap();
    let csv = std::fs::read_to_string(pred_out.join("predictions.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "task,query,output,value");
    // 2 test tasks x 4 queries x 1 output
    assert_eq!(lines.count(), 8);
}

#[test]
fn verify_commands_emit_reports() {
    let dir = scratch("verify");
    let eq_out = dir.join("equivalence");
    let cfg = config_for(
        "verify-equivalence",
        &[
            ("out_dir", eq_out.to_str().unwrap()),
            ("net.width", "32"),
            ("tasks.num", "2"),
            ("train.steps", "20"),
            ("check.times", "5,20"),
        ],
    )
    .unwrap();
    run_command("verify-equivalence", &cfg).unwrap();
    let csv = std::fs::read_to_string(eq_out.join("equivalence.csv")).unwrap();
    assert!(csv.starts_with("t,rel_rmse\n"));
    assert_eq!(csv.lines().count(), 3);

    let conv_out = dir.join("convergence");
    let cfg = config_for(
        "verify-kernel-convergence",
        &[
            ("out_dir", conv_out.to_str().unwrap()),
            ("widths", "16,32"),
            ("seeds", "2"),
        ],
    )
    .unwrap();
    run_command("verify-kernel-convergence", &cfg).unwrap();
    let csv = std::fs::read_to_string(conv_out.join("kernel_convergence.csv")).unwrap();
    assert!(csv.starts_with("width,rel_frob_error\n"));
    assert_eq!(csv.lines().count(), 3);

    let rate_out = dir.join("rate");
    let cfg = config_for(
        "verify-rate",
        &[
            ("out_dir", rate_out.to_str().unwrap()),
            ("net.width", "32"),
            ("tasks.num", "2"),
            ("train.steps", "25"),
        ],
    )
    .unwrap();
    run_command("verify-rate", &cfg).unwrap();
    let csv = std::fs::read_to_string(rate_out.join("rate.csv")).unwrap();
    assert!(csv.starts_with("log_loss_slope,r_squared,decay_per_step,bound_factor\n"));

    let stab_out = dir.join("stability");
    let cfg = config_for(
        "verify-stability",
        &[
            ("out_dir", stab_out.to_str().unwrap()),
            ("widths", "16,32"),
            ("seeds", "1"),
            ("tasks.num", "2"),
            ("train.steps", "10"),
            ("train.kernel_log_interval", "5"),
        ],
    )
    .unwrap();
    run_command("verify-stability", &cfg).unwrap();
    let csv = std::fs::read_to_string(stab_out.join("stability.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let regions_out = dir.join("regions");
    let cfg = config_for(
        "regions",
        &[("out_dir", regions_out.to_str().unwrap()), ("probes.count", "64")],
    )
    .unwrap();
    run_command("regions", &cfg).unwrap();
    let csv = std::fs::read_to_string(regions_out.join("regions.csv")).unwrap();
    assert!(csv.starts_with("probes,regions\n"));
}

#[test]
fn missing_input_fails_without_artifacts() {
    let dir = scratch("missing");
    let out = dir.join("kernel");
    let code = main_with_args(&args(&[
        "kernel",
        &format!("--out_dir={}", out.display()),
        "--tasks_file=/nonexistent/tasks.txt",
    ]));
    assert_eq!(code, 1);
    assert!(!out.join("kernel.bin").exists());
    assert!(!out.join("kernel.csv").exists());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(main_with_args(&args(&["kernel", "--not-a-flag"])), 2);
    assert_eq!(main_with_args(&args(&["kernel", "--bogus.key=1"])), 2);
    assert_eq!(main_with_args(&args(&["verify"])), 2);
    assert_eq!(main_with_args(&args(&["verify", "bogus"])), 2);
}

#[test]
fn manifest_freezes_resolved_config() {
    let dir = scratch("manifest");
    let out = dir.join("gen");
    let code = main_with_args(&args(&[
        "gen-tasks",
        &format!("--out_dir={}", out.display()),
        "--tasks.num=2",
    ]));
    assert_eq!(code, 0);
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    // overridden value and untouched defaults both echoed
    assert!(manifest.contains("tasks.num = 2"));
    assert!(manifest.contains("tasks.family = sinusoid"));
    assert!(manifest.contains("seed = 0"));
}
