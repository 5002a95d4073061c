//! Few-shot prediction without training a network: the kernel-regression
//! meta-output with the analytic wide-limit kernel, compared against the
//! per-task support regression alone.

use metantk::kernels::BaseKernelSource;
use metantk::linalg::TimeMode;
use metantk::net::{Activation, NetworkSpec};
use metantk::predictor::{g_predictor, kernel_regression_predict};
use metantk::tasks::{gen_tasks, TaskBatchConfig, TaskFamily};

fn main() -> metantk::Result<()> {
    let spec = NetworkSpec::new(1, vec![64, 64], 1, Activation::ReLU, 2.0_f64.sqrt(), 0.1)?;
    let base = BaseKernelSource::AnalyticNtk { spec: &spec };
    let inner = TimeMode::continuous(f64::INFINITY)?;
    let outer = TimeMode::continuous(f64::INFINITY)?;
    let ridge = 1e-3;
    let batch = |num, seed| {
        gen_tasks(&TaskBatchConfig {
            num_tasks: num,
            query_size: 8,
            support_size: 3,
            input_dim: 1,
            output_dim: 1,
            family: TaskFamily::Sinusoid { amplitude: (0.8, 1.2), phase: (0.0, 2.0) },
            seed,
            normalize_inputs: true,
        })
    };

    let mut mse_full = 0.0;
    let mut mse_baseline = 0.0;
    let draws = 10;
    for draw in 0..draws {
        let train = batch(20, 100 + draw)?;
        let test = &batch(1, 700 + draw)?[0];
        let full = kernel_regression_predict(&train, &base, test, inner, outer, ridge)?;
        let baseline = g_predictor(&base, test, inner, ridge)?;
        let y = test.query_y.data();
        mse_full += y.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
        mse_baseline +=
            y.iter().zip(&baseline).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    }
    println!("mean query MSE over {draws} held-out task draws:");
    println!("  support-only regression: {:.5}", mse_baseline / draws as f64);
    println!("  with meta-training term: {:.5}", mse_full / draws as f64);
    Ok(())
}
