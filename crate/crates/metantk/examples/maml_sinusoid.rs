//! Meta-trains a network on sinusoid episodes and prints the loss
//! trajectory together with the meta-output of a held-out probe task.

use metantk::maml::{self, TrainConfig};
use metantk::net::{init_params, Activation, NetworkSpec};
use metantk::tasks::{gen_tasks, TaskBatchConfig, TaskFamily};

fn main() -> metantk::Result<()> {
    let spec = NetworkSpec::new(1, vec![128, 128], 1, Activation::Erf, 1.0, 0.1)?;
    let batch = |num, seed| {
        gen_tasks(&TaskBatchConfig {
            num_tasks: num,
            query_size: 5,
            support_size: 5,
            input_dim: 1,
            output_dim: 1,
            family: TaskFamily::Sinusoid { amplitude: (0.8, 1.2), phase: (0.0, 2.0) },
            seed,
            normalize_inputs: true,
        })
    };
    let tasks = batch(16, 3)?;
    let probes = batch(1, 99)?;

    let l = spec.width_norm();
    let config = TrainConfig {
        eta: 0.1 / l,
        lambda: 1.0 / l,
        tau: 5,
        steps: 500,
        seed: 1,
        kernel_log_interval: 100,
    };
    let params0 = init_params(&spec, config.seed);
    let traj = maml::train(&spec, &params0, &tasks, &config, &probes, false)?;

    println!("step    meta-loss     |theta - theta0|");
    for r in traj.records.iter().step_by(50) {
        println!("{:4}    {:.6}      {:.5}", r.step, r.loss, r.param_dist);
    }
    let first = &traj.records[0];
    let last = traj.records.last().unwrap();
    println!("\nprobe meta-outputs (query targets follow):");
    println!("  at t=0:   {:?}", round3(&first.probe_outputs));
    println!("  at t=end: {:?}", round3(&last.probe_outputs));
    println!("  targets:  {:?}", round3(probes[0].query_y.data()));
    Ok(())
}

fn round3(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
