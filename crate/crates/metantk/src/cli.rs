//! Command-line surface.
//!
//! One subcommand per workflow: task generation, kernel computation, meta
//! training, few-shot prediction, the verification protocols, region
//! counting, and the architecture search. Every run writes a `manifest.txt`
//! echoing the fully resolved configuration (defaults included) next to its
//! artifacts; re-running with the same manifest reproduces the artifacts
//! byte for byte.
//!
//! Configuration is flat dotted keys, `key = value` per line in an optional
//! config file, overridable with `--key=value` flags. Exit codes: 0 ok,
//! 1 runtime error, 2 usage error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ioutil::{atomic_write, fmt_float, write_csv};
use crate::kernels::{
    assemble_train_kernel, metantk_direct, metantk_direct_cross, relative_frob_distance,
    BaseKernelSource, KernelKind, KernelMatrix,
};
use crate::linalg::{eig_sym, TimeMode};
use crate::maml::{self, TrainConfig};
use crate::mat::Mat;
use crate::nas;
use crate::net::{init_params, Activation, NetworkSpec};
use crate::predictor;
use crate::regions::{self, ProbeGen};
use crate::tasks::{self, Task, TaskBatchConfig, TaskFamily};

const USAGE: &str = "usage: metantk <command> [config-file] [--key=value ...]

commands:
  gen-tasks            generate a synthetic few-shot task batch
  kernel               build a kernel matrix (ntk | metantk | anil; empirical | analytic)
  train-maml           full-batch meta-training with trajectory logging
  predict              kernel-regression few-shot prediction on test tasks
  verify equivalence   trained meta-outputs vs closed-form kernel outputs
  verify rate          log-loss linearity and decay-rate bound check
  verify stability     kernel drift across widths
  verify kernel-convergence  empirical-to-analytic kernel error across widths
  regions              linear-region count of a network
  nas-search           training-free architecture search over a cell space
";

/// Flat dotted-key configuration with provenance-preserving echo.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    fn from_defaults(defaults: &[(&str, &str)]) -> Self {
        let values = defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        RunConfig { values }
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: lineno + 1,
                msg: format!("expected key = value, got {raw:?}"),
            })?;
            self.set_checked(k.trim(), v.trim(), true)?;
        }
        Ok(())
    }

    fn set_checked(&mut self, key: &str, value: &str, from_file: bool) -> Result<()> {
        if !self.values.contains_key(key) {
            let msg = format!("unknown configuration key {key:?}");
            return Err(if from_file { Error::InvalidConfig(msg) } else { Error::Usage(msg) });
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or_else(|| panic!("key {key} missing"))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let raw = self.get(key);
        raw.parse::<f64>()
            .map_err(|_| Error::InvalidConfig(format!("{key} must be a float, got {raw:?}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let raw = self.get(key);
        raw.parse::<usize>()
            .map_err(|_| Error::InvalidConfig(format!("{key} must be an integer, got {raw:?}")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let raw = self.get(key);
        raw.parse::<u64>()
            .map_err(|_| Error::InvalidConfig(format!("{key} must be an integer, got {raw:?}")))
    }

    pub fn u32(&self, key: &str) -> Result<u32> {
        Ok(self.usize(key)? as u32)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "1" | "true" | "yes" | "on" => Ok(true),
            "0" | "false" | "no" | "off" => Ok(false),
            other => Err(Error::InvalidConfig(format!("{key} must be a boolean, got {other:?}"))),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.get(key);
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim().parse::<usize>().map_err(|_| {
                    Error::InvalidConfig(format!("{key} must be a comma list of integers"))
                })
            })
            .collect()
    }

    /// Sorted `key = value` echo of the fully resolved configuration.
    pub fn manifest(&self, command: &str) -> String {
        let mut out = format!("command = {command}\n");
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    Ok(match s {
        "relu" => Activation::ReLU,
        "erf" => Activation::Erf,
        "identity" => Activation::Identity,
        other => return Err(Error::InvalidConfig(format!("unknown activation {other:?}"))),
    })
}

fn parse_probe_gen(s: &str) -> Result<ProbeGen> {
    Ok(match s {
        "cube" => ProbeGen::UniformCube,
        "sphere" => ProbeGen::UnitSphere,
        other => return Err(Error::InvalidConfig(format!("unknown probe generation {other:?}"))),
    })
}

fn net_spec_from(cfg: &RunConfig) -> Result<NetworkSpec> {
    NetworkSpec::new(
        cfg.usize("net.input_dim")?,
        cfg.usize_list("net.widths")?,
        cfg.usize("net.output_dim")?,
        parse_activation(cfg.get("net.activation"))?,
        cfg.f64("net.sigma_w")?,
        cfg.f64("net.sigma_b")?,
    )
}

fn time_mode_from(cfg: &RunConfig, lt_key: &str) -> Result<TimeMode> {
    TimeMode::continuous(cfg.f64(lt_key)?)
}

fn task_family_from(cfg: &RunConfig) -> Result<TaskFamily> {
    match cfg.get("tasks.family") {
        "sinusoid" => Ok(TaskFamily::Sinusoid {
            amplitude: (cfg.f64("tasks.amplitude_lo")?, cfg.f64("tasks.amplitude_hi")?),
            phase: (cfg.f64("tasks.phase_lo")?, cfg.f64("tasks.phase_hi")?),
        }),
        "blobs" => Ok(TaskFamily::GaussianBlobs {
            classes: cfg.usize("tasks.classes")?,
            spread: cfg.f64("tasks.spread")?,
        }),
        other => Err(Error::InvalidConfig(format!("unknown task family {other:?}"))),
    }
}

fn task_batch_from(cfg: &RunConfig) -> Result<TaskBatchConfig> {
    Ok(TaskBatchConfig {
        num_tasks: cfg.usize("tasks.num")?,
        query_size: cfg.usize("tasks.query")?,
        support_size: cfg.usize("tasks.support")?,
        input_dim: cfg.usize("tasks.input_dim")?,
        output_dim: cfg.usize("tasks.output_dim")?,
        family: task_family_from(cfg)?,
        seed: cfg.u64("seed")?,
        normalize_inputs: cfg.bool("tasks.normalize")?,
    })
}

fn load_task_file(path: &str) -> Result<Vec<Task>> {
    Ok(tasks::load_tasks(Path::new(path))?.0)
}

fn write_manifest(cfg: &RunConfig, command: &str) -> Result<()> {
    atomic_write(&cfg.out_dir().join("manifest.txt"), cfg.manifest(command).as_bytes())
}

fn configure_threads(cfg: &RunConfig) -> Result<()> {
    let threads = cfg.usize("threads")?;
    if threads > 0 {
        // ignore the error if a pool already exists (e.g. repeated calls in tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// command implementations

const COMMON_DEFAULTS: &[(&str, &str)] = &[("out_dir", "out"), ("seed", "0"), ("threads", "0")];

fn defaults_for(command: &str) -> Option<Vec<(&'static str, &'static str)>> {
    let mut d: Vec<(&str, &str)> = COMMON_DEFAULTS.to_vec();
    match command {
        "gen-tasks" => d.extend([
            ("tasks.num", "8"),
            ("tasks.query", "5"),
            ("tasks.support", "5"),
            ("tasks.input_dim", "1"),
            ("tasks.output_dim", "1"),
            ("tasks.family", "sinusoid"),
            ("tasks.amplitude_lo", "0.5"),
            ("tasks.amplitude_hi", "2.0"),
            ("tasks.phase_lo", "0.0"),
            ("tasks.phase_hi", "3.141592653589793"),
            ("tasks.classes", "2"),
            ("tasks.spread", "0.25"),
            ("tasks.normalize", "1"),
        ]),
        "kernel" => d.extend([
            ("tasks_file", "tasks.txt"),
            ("base", "empirical"),
            ("kind", "metantk"),
            ("net.input_dim", "1"),
            ("net.widths", "64,64"),
            ("net.output_dim", "1"),
            ("net.activation", "relu"),
            ("net.sigma_w", "1.4142135623730951"),
            ("net.sigma_b", "0.1"),
            ("kernel.lambda_tau", "inf"),
            ("kernel.ridge", "0.001"),
        ]),
        "train-maml" => d.extend([
            ("tasks_file", "tasks.txt"),
            ("probes_file", ""),
            ("log_kernel", "0"),
            ("net.input_dim", "1"),
            ("net.widths", "64,64"),
            ("net.output_dim", "1"),
            ("net.activation", "erf"),
            ("net.sigma_w", "1.0"),
            ("net.sigma_b", "0.1"),
            ("train.eta", "0.001"),
            ("train.lambda", "0.001"),
            ("train.tau", "1"),
            ("train.steps", "100"),
            ("train.kernel_log_interval", "20"),
        ]),
        "predict" => d.extend([
            ("tasks_file", "tasks.txt"),
            ("test_file", "test_tasks.txt"),
            ("base", "analytic"),
            ("net.input_dim", "1"),
            ("net.widths", "64,64"),
            ("net.output_dim", "1"),
            ("net.activation", "relu"),
            ("net.sigma_w", "1.4142135623730951"),
            ("net.sigma_b", "0.1"),
            ("kernel.lambda_tau", "inf"),
            ("kernel.outer_lambda_tau", "inf"),
            ("kernel.ridge", "0.001"),
        ]),
        "verify-equivalence" => d.extend([
            ("net.width", "256"),
            ("net.sigma_w", "1.0"),
            ("net.sigma_b", "0.1"),
            ("tasks.num", "3"),
            ("tasks.query", "4"),
            ("tasks.support", "4"),
            ("probes.num", "1"),
            ("train.eta0", "0.05"),
            ("train.lambda0", "0.3"),
            ("train.tau", "1"),
            ("train.steps", "120"),
            ("check.times", "10,50,120"),
        ]),
        "verify-rate" => d.extend([
            ("net.width", "256"),
            ("net.sigma_w", "1.0"),
            ("net.sigma_b", "0.1"),
            ("tasks.num", "3"),
            ("tasks.query", "4"),
            ("tasks.support", "4"),
            ("train.eta0", "0.05"),
            ("train.lambda0", "0.3"),
            ("train.tau", "1"),
            ("train.steps", "120"),
        ]),
        "verify-stability" => d.extend([
            ("widths", "128,256"),
            ("seeds", "3"),
            ("net.sigma_w", "1.0"),
            ("net.sigma_b", "0.1"),
            ("tasks.num", "3"),
            ("tasks.query", "4"),
            ("tasks.support", "4"),
            ("train.eta0", "0.05"),
            ("train.lambda0", "0.3"),
            ("train.tau", "1"),
            ("train.steps", "60"),
            ("train.kernel_log_interval", "15"),
        ]),
        "verify-kernel-convergence" => d.extend([
            ("widths", "64,128,256"),
            ("seeds", "5"),
            ("net.input_dim", "2"),
            ("net.depth", "2"),
            ("net.sigma_w", "1.4142135623730951"),
            ("net.sigma_b", "0.1"),
            ("tasks.num", "2"),
            ("tasks.query", "3"),
            ("tasks.support", "3"),
            ("kernel.lambda_tau", "1.0"),
            ("kernel.ridge", "0.001"),
        ]),
        "regions" => d.extend([
            ("net.input_dim", "2"),
            ("net.widths", "16,16"),
            ("net.output_dim", "1"),
            ("net.activation", "relu"),
            ("net.sigma_w", "1.4142135623730951"),
            ("net.sigma_b", "0.1"),
            ("probes.count", "512"),
            ("probes.gen", "cube"),
            ("probes.seed", "0"),
        ]),
        "nas-search" => d.extend([
            ("tasks_file", ""),
            ("tasks.num", "2"),
            ("tasks.query", "4"),
            ("tasks.support", "4"),
            ("tasks.input_dim", "4"),
            ("tasks.output_dim", "2"),
            ("tasks.family", "blobs"),
            ("tasks.amplitude_lo", "0.5"),
            ("tasks.amplitude_hi", "2.0"),
            ("tasks.phase_lo", "0.0"),
            ("tasks.phase_hi", "3.141592653589793"),
            ("tasks.classes", "2"),
            ("tasks.spread", "0.25"),
            ("tasks.normalize", "1"),
            ("nas.cells", "2"),
            ("nas.nodes", "3"),
            ("nas.width", "16"),
            ("nas.ops", "skip,zero,dense,dense_relu,dense_tanh,bottleneck"),
            ("nas.score_seeds", "3"),
            ("kernel.lambda_tau", "inf"),
            ("kernel.ridge", "0.001"),
            ("kernel.kind", "metantk"),
            ("probes.count", "512"),
            ("probes.gen", "cube"),
            ("probes.seed", "0"),
        ]),
        _ => return None,
    }
    Some(d)
}

fn cmd_gen_tasks(cfg: &RunConfig) -> Result<()> {
    let batch = task_batch_from(cfg)?;
    let tasks = tasks::gen_tasks(&batch)?;
    tasks::save_tasks(&tasks, &batch.family, batch.seed, &cfg.out_dir().join("tasks.txt"))?;
    write_manifest(cfg, "gen-tasks")
}

fn cmd_kernel(cfg: &RunConfig) -> Result<()> {
    let spec = net_spec_from(cfg)?;
    let tasks = load_task_file(cfg.get("tasks_file"))?;
    let params;
    let base = match cfg.get("base") {
        "empirical" => {
            params = init_params(&spec, cfg.u64("seed")?);
            BaseKernelSource::EmpiricalNtk { spec: &spec, params: &params }
        }
        "analytic" => BaseKernelSource::AnalyticNtk { spec: &spec },
        other => return Err(Error::InvalidConfig(format!("unknown base {other:?}"))),
    };
    let mode = time_mode_from(cfg, "kernel.lambda_tau")?;
    let ridge = cfg.f64("kernel.ridge")?;
    let kernel = match cfg.get("kind") {
        "ntk" => {
            // plain base Gram over all query points
            let n = tasks[0].query_count();
            let d = tasks[0].input_dim();
            let mut all_q = Mat::zeros(n * tasks.len(), d);
            for (i, t) in tasks.iter().enumerate() {
                all_q.paste(i * n, 0, &t.query_x);
            }
            KernelMatrix::single_block(base.gram(&all_q, &all_q)?, KernelKind::Ntk)
        }
        "metantk" => assemble_train_kernel(&tasks, &base, mode, ridge, KernelKind::MetaNtk)?,
        "anil" => assemble_train_kernel(&tasks, &base, mode, ridge, KernelKind::Anil)?,
        other => return Err(Error::InvalidConfig(format!("unknown kernel kind {other:?}"))),
    };
    atomic_write(&cfg.out_dir().join("kernel.bin"), &kernel.to_bytes())?;
    atomic_write(&cfg.out_dir().join("kernel.csv"), kernel.to_csv().as_bytes())?;
    write_manifest(cfg, "kernel")
}

fn cmd_train_maml(cfg: &RunConfig) -> Result<()> {
    let spec = net_spec_from(cfg)?;
    let tasks = load_task_file(cfg.get("tasks_file"))?;
    let probes = match cfg.get("probes_file") {
        "" => Vec::new(),
        path => load_task_file(path)?,
    };
    let train_cfg = TrainConfig {
        eta: cfg.f64("train.eta")?,
        lambda: cfg.f64("train.lambda")?,
        tau: cfg.u32("train.tau")?,
        steps: cfg.usize("train.steps")?,
        seed: cfg.u64("seed")?,
        kernel_log_interval: cfg.usize("train.kernel_log_interval")?,
    };
    let params0 = init_params(&spec, train_cfg.seed);
    let traj = maml::train(&spec, &params0, &tasks, &train_cfg, &probes, cfg.bool("log_kernel")?)?;
    atomic_write(&cfg.out_dir().join("trajectory.csv"), traj.to_csv().as_bytes())?;
    write_manifest(cfg, "train-maml")
}

fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let spec = net_spec_from(cfg)?;
    let train_tasks = load_task_file(cfg.get("tasks_file"))?;
    let test_tasks = load_task_file(cfg.get("test_file"))?;
    let params;
    let base = match cfg.get("base") {
        "empirical" => {
            params = init_params(&spec, cfg.u64("seed")?);
            BaseKernelSource::EmpiricalNtk { spec: &spec, params: &params }
        }
        "analytic" => BaseKernelSource::AnalyticNtk { spec: &spec },
        other => return Err(Error::InvalidConfig(format!("unknown base {other:?}"))),
    };
    let inner = time_mode_from(cfg, "kernel.lambda_tau")?;
    let outer = time_mode_from(cfg, "kernel.outer_lambda_tau")?;
    let ridge = cfg.f64("kernel.ridge")?;
    let mut rows = Vec::new();
    for (ti, task) in test_tasks.iter().enumerate() {
        let out = predictor::kernel_regression_predict(&train_tasks, &base, task, inner, outer, ridge)?;
        let k = task.output_dim();
        for (flat, v) in out.iter().enumerate() {
            rows.push(vec![
                ti.to_string(),
                (flat / k).to_string(),
                (flat % k).to_string(),
                fmt_float(*v),
            ]);
        }
    }
    write_csv(&cfg.out_dir().join("predictions.csv"), &["task", "query", "output", "value"], &rows)?;
    write_manifest(cfg, "predict")
}

fn sin_batch(cfg: &RunConfig, seed: u64, num_key: &str) -> Result<Vec<Task>> {
    tasks::gen_tasks(&TaskBatchConfig {
        num_tasks: cfg.usize(num_key)?,
        query_size: cfg.usize("tasks.query")?,
        support_size: cfg.usize("tasks.support")?,
        input_dim: 1,
        output_dim: 1,
        family: TaskFamily::Sinusoid { amplitude: (0.8, 1.2), phase: (0.0, 2.0) },
        seed,
        normalize_inputs: true,
    })
}

/// Shared protocol behind `verify equivalence` and `verify rate`: a wide-net
/// training run against its empirical-kernel closed form.
pub struct EquivalenceRun {
    pub trajectory: maml::Trajectory,
    pub closed_form_at: Vec<(usize, Vec<f64>)>,
    pub rel_rmse: Vec<(usize, f64)>,
    pub g0_lambda_min: f64,
    pub eta_eff: f64,
}

pub fn run_equivalence_protocol(
    spec: &NetworkSpec,
    train_tasks: &[Task],
    probe_tasks: &[Task],
    eta0: f64,
    lambda0: f64,
    tau: u32,
    steps: usize,
    check_times: &[usize],
    seed: u64,
    log_kernel: bool,
    kernel_log_interval: usize,
) -> Result<EquivalenceRun> {
    let l = spec.width_norm();
    let eta = eta0 / l;
    let lambda = lambda0 / l;
    let params0 = init_params(spec, seed);
    let train_cfg = TrainConfig {
        eta,
        lambda,
        tau,
        steps,
        seed,
        kernel_log_interval,
    };
    let trajectory = maml::train(spec, &params0, train_tasks, &train_cfg, probe_tasks, log_kernel)?;

    // empirical meta kernel and init outputs at theta_0
    let g0 = metantk_direct(spec, &params0, train_tasks, lambda, tau)?;
    let g0_lambda_min = eig_sym(&g0.to_sym()?)?.values.first().copied().unwrap_or(0.0);
    let mut f0_train = Vec::new();
    let mut y_train = Vec::new();
    for t in train_tasks {
        f0_train.extend_from_slice(maml::meta_output(spec, &params0, t, lambda, tau)?.data());
        y_train.extend_from_slice(t.query_y.data());
    }
    let eta_eff = eta * l;
    let state = predictor::PredictorState::new(
        g0,
        f0_train,
        y_train,
        eta_eff,
        predictor::TimeStyle::Discrete,
        0.0,
    )?;
    let strip = metantk_direct_cross(spec, &params0, probe_tasks, train_tasks, lambda, tau)?;
    let mut f0_test = Vec::new();
    for t in probe_tasks {
        f0_test.extend_from_slice(maml::meta_output(spec, &params0, t, lambda, tau)?.data());
    }

    let mut closed_form_at = Vec::new();
    let mut rel_rmse = Vec::new();
    for &t in check_times {
        let pred = predictor::closed_form_meta_output(&state, &strip, &f0_test, t as f64)?;
        let rec = trajectory
            .record_at(t)
            .ok_or_else(|| Error::InvalidConfig(format!("no trajectory record at t = {t}")))?;
        let actual = &rec.probe_outputs;
        let num: f64 = pred.iter().zip(actual).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = actual.iter().map(|b| b * b).sum();
        rel_rmse.push((t, (num / den.max(f64::MIN_POSITIVE)).sqrt()));
        closed_form_at.push((t, pred));
    }
    Ok(EquivalenceRun { trajectory, closed_form_at, rel_rmse, g0_lambda_min, eta_eff })
}

fn cmd_verify_equivalence(cfg: &RunConfig) -> Result<()> {
    let w = cfg.usize("net.width")?;
    let spec = NetworkSpec::new(
        1,
        vec![w, w],
        1,
        Activation::Erf,
        cfg.f64("net.sigma_w")?,
        cfg.f64("net.sigma_b")?,
    )?;
    let seed = cfg.u64("seed")?;
    let train_tasks = sin_batch(cfg, seed, "tasks.num")?;
    let probe_tasks = sin_batch(cfg, seed + 1000, "probes.num")?;
    let times = cfg.usize_list("check.times")?;
    let run = run_equivalence_protocol(
        &spec,
        &train_tasks,
        &probe_tasks,
        cfg.f64("train.eta0")?,
        cfg.f64("train.lambda0")?,
        cfg.u32("train.tau")?,
        cfg.usize("train.steps")?,
        &times,
        seed,
        false,
        cfg.usize("train.steps")?.max(1),
    )?;
    let rows: Vec<Vec<String>> = run
        .rel_rmse
        .iter()
        .map(|(t, e)| vec![t.to_string(), fmt_float(*e)])
        .collect();
    write_csv(&cfg.out_dir().join("equivalence.csv"), &["t", "rel_rmse"], &rows)?;
    write_manifest(cfg, "verify-equivalence")
}

fn cmd_verify_rate(cfg: &RunConfig) -> Result<()> {
    let w = cfg.usize("net.width")?;
    let spec = NetworkSpec::new(
        1,
        vec![w, w],
        1,
        Activation::Erf,
        cfg.f64("net.sigma_w")?,
        cfg.f64("net.sigma_b")?,
    )?;
    let seed = cfg.u64("seed")?;
    let train_tasks = sin_batch(cfg, seed, "tasks.num")?;
    let probe_tasks = sin_batch(cfg, seed + 1000, "tasks.num")?;
    let steps = cfg.usize("train.steps")?;
    let run = run_equivalence_protocol(
        &spec,
        &train_tasks,
        &probe_tasks,
        cfg.f64("train.eta0")?,
        cfg.f64("train.lambda0")?,
        cfg.u32("train.tau")?,
        steps,
        &[steps],
        seed,
        false,
        steps.max(1),
    )?;
    let (slope, _, r2) = maml::fit_log_loss_line(&run.trajectory.records)
        .ok_or_else(|| Error::InvalidConfig("not enough positive losses for a fit".into()))?;
    let decay = slope.exp();
    let bound = {
        let x = run.eta_eff * run.g0_lambda_min / 3.0;
        (1.0 - x) * (1.0 - x)
    };
    let rows = vec![vec![
        fmt_float(slope),
        fmt_float(r2),
        fmt_float(decay),
        fmt_float(bound),
    ]];
    write_csv(
        &cfg.out_dir().join("rate.csv"),
        &["log_loss_slope", "r_squared", "decay_per_step", "bound_factor"],
        &rows,
    )?;
    write_manifest(cfg, "verify-rate")
}

/// Mean (over seeds) of the max relative kernel drift during training at one
/// width. Used by `verify stability`.
pub fn kernel_drift_at_width(
    width: usize,
    sigma_w: f64,
    sigma_b: f64,
    train_tasks: &[Task],
    eta0: f64,
    lambda0: f64,
    tau: u32,
    steps: usize,
    interval: usize,
    seeds: &[u64],
) -> Result<(f64, f64)> {
    let spec = NetworkSpec::new(1, vec![width, width], 1, Activation::Erf, sigma_w, sigma_b)?;
    let l = spec.width_norm();
    let mut drift_acc = 0.0;
    let mut dist_acc = 0.0;
    for &seed in seeds {
        let params0 = init_params(&spec, seed);
        let cfg = TrainConfig {
            eta: eta0 / l,
            lambda: lambda0 / l,
            tau,
            steps,
            seed,
            kernel_log_interval: interval,
        };
        let traj = maml::train(&spec, &params0, train_tasks, &cfg, &[], true)?;
        let max_drift = traj
            .records
            .iter()
            .filter_map(|r| r.kernel_drift)
            .fold(0.0_f64, f64::max);
        drift_acc += max_drift;
        dist_acc += traj.records.last().map(|r| r.param_dist).unwrap_or(0.0);
    }
    let n = seeds.len() as f64;
    Ok((drift_acc / n, dist_acc / n))
}

fn cmd_verify_stability(cfg: &RunConfig) -> Result<()> {
    let widths = cfg.usize_list("widths")?;
    let n_seeds = cfg.usize("seeds")?;
    let seed0 = cfg.u64("seed")?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|s| seed0 + s).collect();
    let train_tasks = sin_batch(cfg, seed0, "tasks.num")?;
    let mut rows = Vec::new();
    for &w in &widths {
        let (drift, dist) = kernel_drift_at_width(
            w,
            cfg.f64("net.sigma_w")?,
            cfg.f64("net.sigma_b")?,
            &train_tasks,
            cfg.f64("train.eta0")?,
            cfg.f64("train.lambda0")?,
            cfg.u32("train.tau")?,
            cfg.usize("train.steps")?,
            cfg.usize("train.kernel_log_interval")?,
            &seeds,
        )?;
        rows.push(vec![w.to_string(), fmt_float(drift), fmt_float(dist)]);
    }
    write_csv(
        &cfg.out_dir().join("stability.csv"),
        &["width", "mean_max_kernel_drift", "mean_final_param_dist"],
        &rows,
    )?;
    write_manifest(cfg, "verify-stability")
}

/// Mean relative Frobenius error between the empirical composite kernel and
/// its analytic wide limit at one width. Used by `verify kernel-convergence`.
pub fn kernel_convergence_at_width(
    spec_of: impl Fn(usize) -> Result<NetworkSpec>,
    width: usize,
    tasks: &[Task],
    mode: TimeMode,
    ridge: f64,
    seeds: &[u64],
) -> Result<f64> {
    let spec = spec_of(width)?;
    let analytic = assemble_train_kernel(
        tasks,
        &BaseKernelSource::AnalyticNtk { spec: &spec },
        mode,
        ridge,
        KernelKind::MetaNtk,
    )?;
    let mut acc = 0.0;
    for &seed in seeds {
        let params = init_params(&spec, seed);
        let empirical = assemble_train_kernel(
            tasks,
            &BaseKernelSource::EmpiricalNtk { spec: &spec, params: &params },
            mode,
            ridge,
            KernelKind::MetaNtk,
        )?;
        acc += relative_frob_distance(&empirical.mat, &analytic.mat);
    }
    Ok(acc / seeds.len() as f64)
}

fn cmd_verify_kernel_convergence(cfg: &RunConfig) -> Result<()> {
    let widths = cfg.usize_list("widths")?;
    let n_seeds = cfg.usize("seeds")?;
    let seed0 = cfg.u64("seed")?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|s| seed0 + 100 + s).collect();
    let d = cfg.usize("net.input_dim")?;
    let depth = cfg.usize("net.depth")?;
    let sigma_w = cfg.f64("net.sigma_w")?;
    let sigma_b = cfg.f64("net.sigma_b")?;
    let tasks = tasks::gen_tasks(&TaskBatchConfig {
        num_tasks: cfg.usize("tasks.num")?,
        query_size: cfg.usize("tasks.query")?,
        support_size: cfg.usize("tasks.support")?,
        input_dim: d,
        output_dim: 1,
        family: TaskFamily::Sinusoid { amplitude: (0.8, 1.2), phase: (0.0, 2.0) },
        seed: seed0,
        normalize_inputs: true,
    })?;
    let mode = time_mode_from(cfg, "kernel.lambda_tau")?;
    let ridge = cfg.f64("kernel.ridge")?;
    let mut rows = Vec::new();
    for &w in &widths {
        let err = kernel_convergence_at_width(
            |width| NetworkSpec::new(d, vec![width; depth], 1, Activation::ReLU, sigma_w, sigma_b),
            w,
            &tasks,
            mode,
            ridge,
            &seeds,
        )?;
        rows.push(vec![w.to_string(), fmt_float(err)]);
    }
    write_csv(&cfg.out_dir().join("kernel_convergence.csv"), &["width", "rel_frob_error"], &rows)?;
    write_manifest(cfg, "verify-kernel-convergence")
}

fn cmd_regions(cfg: &RunConfig) -> Result<()> {
    let spec = net_spec_from(cfg)?;
    let params = init_params(&spec, cfg.u64("seed")?);
    let probes = regions::sample_probes(
        spec.input_dim,
        cfg.usize("probes.count")?,
        parse_probe_gen(cfg.get("probes.gen"))?,
        cfg.u64("probes.seed")?,
    )?;
    let r = regions::count_linear_regions(&spec, &params, &probes)?;
    write_csv(
        &cfg.out_dir().join("regions.csv"),
        &["probes", "regions"],
        &[vec![probes.inputs.rows().to_string(), r.to_string()]],
    )?;
    write_manifest(cfg, "regions")
}

fn cmd_nas_search(cfg: &RunConfig) -> Result<()> {
    let tasks = match cfg.get("tasks_file") {
        "" => tasks::gen_tasks(&task_batch_from(cfg)?)?,
        path => load_task_file(path)?,
    };
    let ops: Vec<nas::OperatorKind> = cfg
        .get("nas.ops")
        .split(',')
        .map(|s| nas::OperatorKind::from_name(s.trim()))
        .collect::<Result<_>>()?;
    let supernet = nas::build_supernet(&nas::SuperNetConfig {
        num_cells: cfg.usize("nas.cells")?,
        nodes_per_cell: cfg.usize("nas.nodes")?,
        width: cfg.usize("nas.width")?,
        input_dim: tasks[0].input_dim(),
        output_dim: tasks[0].output_dim(),
        ops,
    })?;
    let seed = cfg.u64("seed")?;
    let n_score_seeds = cfg.u64("nas.score_seeds")?;
    let kind = match cfg.get("kernel.kind") {
        "metantk" => KernelKind::MetaNtk,
        "anil" => KernelKind::Anil,
        other => return Err(Error::InvalidConfig(format!("unknown scoring kernel {other:?}"))),
    };
    let search_cfg = nas::SearchConfig {
        kernel: nas::KernelScoreConfig {
            mode: time_mode_from(cfg, "kernel.lambda_tau")?,
            ridge: cfg.f64("kernel.ridge")?,
            kind,
            seeds: (0..n_score_seeds).map(|s| seed + s).collect(),
        },
        probes: regions::sample_probes(
            tasks[0].input_dim(),
            cfg.usize("probes.count")?,
            parse_probe_gen(cfg.get("probes.gen"))?,
            cfg.u64("probes.seed")?,
        )?,
    };
    let (arch, audit) = nas::search(&supernet, &tasks, &search_cfg)?;
    atomic_write(&cfg.out_dir().join("architecture.txt"), arch.to_text().as_bytes())?;
    atomic_write(&cfg.out_dir().join("audit.csv"), nas::audit_csv(&audit).as_bytes())?;
    write_manifest(cfg, "nas-search")
}

// ---------------------------------------------------------------------------
// dispatch

/// Parses `args` (without the program name) and runs. Returns the exit code.
pub fn main_with_args(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{USAGE}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(args: &[String]) -> std::result::Result<(), Error> {
    let mut it = args.iter();
    let mut command = match it.next() {
        Some(c) => c.clone(),
        None => return Err(Error::Usage("missing command".into())),
    };
    let rest: Vec<String> = it.cloned().collect();
    let mut rest_slice = rest.as_slice();
    if command == "verify" {
        let sub = rest_slice
            .first()
            .ok_or_else(|| Error::Usage("verify needs a mode: equivalence | rate | stability | kernel-convergence".into()))?;
        command = format!("verify-{sub}");
        rest_slice = &rest_slice[1..];
    }

    let defaults = defaults_for(&command)
        .ok_or_else(|| Error::Usage(format!("unknown command {command:?}")))?;
    let mut cfg = RunConfig::from_defaults(&defaults);

    let mut config_path: Option<PathBuf> = None;
    let mut overrides = Vec::new();
    for arg in rest_slice {
        if let Some(kv) = arg.strip_prefix("--") {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("flags take the form --key=value, got {arg:?}")))?;
            overrides.push((k.to_string(), v.to_string()));
        } else if config_path.is_none() {
            config_path = Some(PathBuf::from(arg));
        } else {
            return Err(Error::Usage(format!("unexpected positional argument {arg:?}")));
        }
    }
    if let Some(path) = config_path {
        cfg.apply_file(&path)?;
    }
    for (k, v) in overrides {
        cfg.set_checked(&k, &v, false)?;
    }

    configure_threads(&cfg)?;
    run_command(&command, &cfg)
}

/// Runs a resolved command; exposed so integration tests drive the CLI
/// in-process.
pub fn run_command(command: &str, cfg: &RunConfig) -> Result<()> {
    match command {
        "gen-tasks" => cmd_gen_tasks(cfg),
        "kernel" => cmd_kernel(cfg),
        "train-maml" => cmd_train_maml(cfg),
        "predict" => cmd_predict(cfg),
        "verify-equivalence" => cmd_verify_equivalence(cfg),
        "verify-rate" => cmd_verify_rate(cfg),
        "verify-stability" => cmd_verify_stability(cfg),
        "verify-kernel-convergence" => cmd_verify_kernel_convergence(cfg),
        "regions" => cmd_regions(cfg),
        "nas-search" => cmd_nas_search(cfg),
        other => Err(Error::Usage(format!("unknown command {other:?}"))),
    }
}

/// Builds a config for tests and examples: command defaults plus overrides.
pub fn config_for(command: &str, overrides: &[(&str, &str)]) -> Result<RunConfig> {
    config_from_file(command, None, overrides)
}

/// Like [`config_for`] but layering a config file between the defaults and
/// the overrides, mirroring the binary's precedence.
pub fn config_from_file(
    command: &str,
    file: Option<&Path>,
    overrides: &[(&str, &str)],
) -> Result<RunConfig> {
    let defaults = defaults_for(command)
        .ok_or_else(|| Error::Usage(format!("unknown command {command:?}")))?;
    let mut cfg = RunConfig::from_defaults(&defaults);
    if let Some(path) = file {
        cfg.apply_file(path)?;
    }
    for (k, v) in overrides {
        cfg.set_checked(k, v, false)?;
    }
    Ok(cfg)
}
