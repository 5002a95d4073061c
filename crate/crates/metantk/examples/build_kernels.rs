//! Builds the meta kernel of a small task batch two ways — from the
//! Jacobians of a sampled finite network and from the closed-form wide
//! limit — and reports how close they are.

use metantk::kernels::{assemble_train_kernel, relative_frob_distance, BaseKernelSource, KernelKind};
use metantk::linalg::{condition_number, TimeMode};
use metantk::net::{init_params, Activation, NetworkSpec};
use metantk::tasks::{gen_tasks, TaskBatchConfig, TaskFamily};

fn main() -> metantk::Result<()> {
    let tasks = gen_tasks(&TaskBatchConfig {
        num_tasks: 3,
        query_size: 4,
        support_size: 4,
        input_dim: 2,
        output_dim: 1,
        family: TaskFamily::Sinusoid { amplitude: (0.8, 1.2), phase: (0.0, 2.0) },
        seed: 7,
        normalize_inputs: true,
    })?;
    let mode = TimeMode::continuous(1.0)?;
    let ridge = 1e-3;

    println!("width   rel_frob_error   cond(empirical)   cond(analytic)");
    for width in [32usize, 128, 512] {
        let spec = NetworkSpec::new(2, vec![width, width], 1, Activation::ReLU, 2.0_f64.sqrt(), 0.1)?;
        let analytic = assemble_train_kernel(
            &tasks,
            &BaseKernelSource::AnalyticNtk { spec: &spec },
            mode,
            ridge,
            KernelKind::MetaNtk,
        )?;
        let params = init_params(&spec, 1);
        let empirical = assemble_train_kernel(
            &tasks,
            &BaseKernelSource::EmpiricalNtk { spec: &spec, params: &params },
            mode,
            ridge,
            KernelKind::MetaNtk,
        )?;
        let err = relative_frob_distance(&empirical.mat, &analytic.mat);
        let c_emp = condition_number(&empirical.to_sym()?, ridge)?;
        let c_ana = condition_number(&analytic.to_sym()?, ridge)?;
        println!("{width:5}   {err:14.6}   {c_emp:15.2}   {c_ana:14.2}");
    }
    Ok(())
}
