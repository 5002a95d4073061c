//! Closed-form meta-outputs.
//!
//! Two routes to the same object. With empirical kernels at initialization,
//! the training ODE solves to
//!     F_t = F_0 + G_0(test, train) T(t) (Y - F_0(train)),
//! where T(t) is the solution operator of kernel gradient flow on the train
//! kernel. In the wide limit the init terms are replaced by the
//! support-regression predictor G built from the base kernel, giving the
//! kernel-regression form used for few-shot prediction without any training.
//!
//! Rates here act on width-normalized kernels: a parameter-space outer rate
//! `eta_p` on a width-l network enters as `eta = l * eta_p`.

use crate::error::{Error, Result};
use crate::kernels::{
    assemble_test_train, assemble_train_kernel, BaseKernelSource, KernelKind, KernelMatrix,
};
use crate::linalg::{t_tilde, SymMatrix, TimeMode};
use crate::tasks::Task;

/// Whether queried times index continuous flow or discrete descent steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeStyle {
    Continuous,
    Discrete,
}

/// Everything the closed-form output needs about the training side.
#[derive(Debug, Clone)]
pub struct PredictorState {
    pub g_train: KernelMatrix,
    pub f0_train: Vec<f64>,
    pub y_train: Vec<f64>,
    /// Effective outer rate on the normalized kernel.
    pub eta: f64,
    pub mode: TimeStyle,
    pub ridge: f64,
}

impl PredictorState {
    pub fn new(
        g_train: KernelMatrix,
        f0_train: Vec<f64>,
        y_train: Vec<f64>,
        eta: f64,
        mode: TimeStyle,
        ridge: f64,
    ) -> Result<Self> {
        if !g_train.is_square() {
            return Err(Error::DimMismatch {
                context: "predictor train kernel",
                expected: g_train.mat.rows(),
                got: g_train.mat.cols(),
            });
        }
        if f0_train.len() != g_train.mat.rows() || y_train.len() != g_train.mat.rows() {
            return Err(Error::DimMismatch {
                context: "predictor vectors",
                expected: g_train.mat.rows(),
                got: f0_train.len().max(y_train.len()),
            });
        }
        if !(eta > 0.0) || !(ridge >= 0.0) {
            return Err(Error::InvalidConfig("predictor needs eta > 0, ridge >= 0".into()));
        }
        Ok(PredictorState { g_train, f0_train, y_train, eta, mode, ridge })
    }

    fn time_mode(&self, t: f64) -> Result<TimeMode> {
        if t.is_nan() || t < 0.0 {
            return Err(Error::NegativeTime(t));
        }
        match self.mode {
            TimeStyle::Continuous => TimeMode::continuous(self.eta * t),
            TimeStyle::Discrete => {
                if t.is_infinite() {
                    TimeMode::continuous(f64::INFINITY)
                } else {
                    let steps = t.round();
                    if (t - steps).abs() > 1e-9 {
                        return Err(Error::InvalidConfig(format!(
                            "discrete predictor time must be an integer step count, got {t}"
                        )));
                    }
                    TimeMode::discrete(self.eta, steps as u32)
                }
            }
        }
    }
}

/// F_t on a test strip: f0_test + strip * T(t) * (Y - F_0(train)).
/// `t = 0` returns f0_test exactly; `t = inf` uses the inverse limit (which
/// requires the train kernel to be nonsingular after the ridge).
pub fn closed_form_meta_output(
    state: &PredictorState,
    test_strip: &KernelMatrix,
    f0_test: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    if test_strip.mat.cols() != state.g_train.mat.rows() {
        return Err(Error::DimMismatch {
            context: "test strip columns",
            expected: state.g_train.mat.rows(),
            got: test_strip.mat.cols(),
        });
    }
    if test_strip.mat.rows() != f0_test.len() {
        return Err(Error::DimMismatch {
            context: "test strip rows",
            expected: f0_test.len(),
            got: test_strip.mat.rows(),
        });
    }
    if t == 0.0 {
        return Ok(f0_test.to_vec());
    }
    let mode = state.time_mode(t)?;
    let t_op = t_tilde(&state.g_train.to_sym()?, mode, state.ridge)?;
    let residual: Vec<f64> = state
        .y_train
        .iter()
        .zip(&state.f0_train)
        .map(|(y, f)| y - f)
        .collect();
    let v = t_op.mat().matvec(&residual);
    let corr = test_strip.mat.matvec(&v);
    Ok(f0_test.iter().zip(&corr).map(|(f, c)| f + c).collect())
}

/// Support-regression predictor: Theta(X, X') T(X') Y'. At infinite time this
/// is the kernel ridge posterior mean on the support set.
pub fn g_predictor(
    base: &BaseKernelSource<'_>,
    task: &Task,
    mode: TimeMode,
    ridge: f64,
) -> Result<Vec<f64>> {
    let theta_qs = base.gram(&task.query_x, &task.support_x)?;
    let theta_ss = base.gram(&task.support_x, &task.support_x)?;
    let t_op = t_tilde(&SymMatrix::new(theta_ss)?, mode, ridge)?;
    let y = task.support_y.data().to_vec();
    Ok(theta_qs.matvec(&t_op.mat().matvec(&y)))
}

/// The full kernel-regression meta-output on a test task:
/// G(test) + G(test, train) T_outer (Y - G(train)).
pub fn kernel_regression_predict(
    tasks: &[Task],
    base: &BaseKernelSource<'_>,
    test_task: &Task,
    inner_mode: TimeMode,
    outer_mode: TimeMode,
    ridge: f64,
) -> Result<Vec<f64>> {
    let g_test = g_predictor(base, test_task, inner_mode, ridge)?;
    let mut g_train = Vec::new();
    let mut y_train = Vec::new();
    for t in tasks {
        g_train.extend(g_predictor(base, t, inner_mode, ridge)?);
        y_train.extend_from_slice(t.query_y.data());
    }
    let g = assemble_train_kernel(tasks, base, inner_mode, ridge, KernelKind::MetaNtk)?;
    let strip = assemble_test_train(test_task, tasks, base, inner_mode, ridge, KernelKind::MetaNtk)?;
    let t_op = t_tilde(&g.to_sym()?, outer_mode, ridge)?;
    let residual: Vec<f64> = y_train.iter().zip(&g_train).map(|(y, g)| y - g).collect();
    let v = t_op.mat().matvec(&residual);
    let corr = strip.mat.matvec(&v);
    Ok(g_test.iter().zip(&corr).map(|(g, c)| g + c).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{metantk_direct, metantk_direct_cross};
    use crate::maml;
    use crate::mat::Mat;
    use crate::net::{init_params, Activation, NetworkSpec, ParamVector};
    use crate::tasks::{gen_tasks, TaskBatchConfig, TaskFamily};

    fn sin_tasks(count: usize, n: usize, m: usize, seed: u64) -> Vec<Task> {
        gen_tasks(&TaskBatchConfig {
            num_tasks: count,
            query_size: n,
            support_size: m,
            input_dim: 1,
            output_dim: 1,
            family: TaskFamily::Sinusoid { amplitude: (0.8, 1.2), phase: (0.0, 2.0) },
            seed,
            normalize_inputs: true,
        })
        .unwrap()
    }

    fn empirical_state(
        spec: &NetworkSpec,
        params: &ParamVector,
        tasks: &[Task],
        lambda: f64,
        tau: u32,
        eta: f64,
        ridge: f64,
    ) -> PredictorState {
        let g = metantk_direct(spec, params, tasks, lambda, tau).unwrap();
        let mut f0 = Vec::new();
        let mut y = Vec::new();
        for t in tasks {
            f0.extend_from_slice(maml::meta_output(spec, params, t, lambda, tau).unwrap().data());
            y.extend_from_slice(t.query_y.data());
        }
        PredictorState::new(g, f0, y, eta, TimeStyle::Continuous, ridge).unwrap()
    }

    #[test]
    fn zero_time_returns_initial_outputs() {
        let spec = NetworkSpec::new(1, vec![16], 1, Activation::Erf, 1.0, 0.1).unwrap();
        let p = init_params(&spec, 3);
        let tasks = sin_tasks(2, 3, 3, 5);
        let probes = sin_tasks(1, 3, 3, 99);
        let state = empirical_state(&spec, &p, &tasks, 0.01, 1, 1.0, 1e-3);
        let strip = metantk_direct_cross(&spec, &p, &probes, &tasks, 0.01, 1).unwrap();
        let f0_test: Vec<f64> =
            maml::meta_output(&spec, &p, &probes[0], 0.01, 1).unwrap().data().to_vec();
        let out = closed_form_meta_output(&state, &strip, &f0_test, 0.0).unwrap();
        assert_eq!(out, f0_test);
    }

    #[test]
    fn infinite_time_interpolates_training_targets() {
        let spec = NetworkSpec::new(1, vec![32], 1, Activation::Erf, 1.0, 0.2).unwrap();
        let p = init_params(&spec, 11);
        let tasks = sin_tasks(2, 3, 3, 6);
        let state = empirical_state(&spec, &p, &tasks, 0.02, 1, 0.7, 0.0);
        // strip for training task 0 = its rows of the train kernel
        let kn = 3;
        let strip_mat = state.g_train.mat.submatrix(0, kn, 0, state.g_train.mat.cols());
        let strip = KernelMatrix::single_block(strip_mat, KernelKind::MetaNtk);
        let f0_test = state.f0_train[..kn].to_vec();
        let out = closed_form_meta_output(&state, &strip, &f0_test, f64::INFINITY).unwrap();
        for (o, y) in out.iter().zip(&state.y_train[..kn]) {
            assert!((o - y).abs() < 1e-6, "{o} vs {y}");
        }
    }

    #[test]
    fn monotone_interpolation_on_train_tasks() {
        let spec = NetworkSpec::new(1, vec![24], 1, Activation::Erf, 1.0, 0.15).unwrap();
        let p = init_params(&spec, 8);
        let tasks = sin_tasks(3, 3, 4, 7);
        let state = empirical_state(&spec, &p, &tasks, 0.02, 1, 0.5, 0.0);
        let strip = KernelMatrix::single_block(state.g_train.mat.clone(), KernelKind::MetaNtk);
        let f0 = state.f0_train.clone();
        let mut prev = f64::INFINITY;
        for t in [0.0, 0.3, 1.0, 3.0, 10.0, f64::INFINITY] {
            let out = closed_form_meta_output(&state, &strip, &f0, t).unwrap();
            let err: f64 = out
                .iter()
                .zip(&state.y_train)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err <= prev + 1e-9, "residual must not increase: {err} after {prev}");
            prev = err;
        }
    }

    #[test]
    fn g_predictor_hand_cases() {
        // linear model on R^2: query = support = (1, 0) gives unit grams,
        // so the infinite-time predictor returns the support label
        let spec = NetworkSpec::new(2, vec![], 1, Activation::Identity, 1.0, 0.0)
            .unwrap()
            .without_bias();
        let p = ParamVector::zeros(&spec);
        let t = Task::new(
            Mat::from_rows(&[vec![1.0, 0.0]]),
            Mat::from_rows(&[vec![0.0]]),
            Mat::from_rows(&[vec![1.0, 0.0]]),
            Mat::from_rows(&[vec![5.0]]),
        )
        .unwrap();
        let base = BaseKernelSource::EmpiricalNtk { spec: &spec, params: &p };
        let g =
            g_predictor(&base, &t, TimeMode::continuous(f64::INFINITY).unwrap(), 0.0).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-12);

        // zero time: no adaptation, prediction vanishes
        let z = g_predictor(&base, &t, TimeMode::continuous(0.0).unwrap(), 0.0).unwrap();
        assert_eq!(z[0], 0.0);

        // zero labels: linear in Y'
        let t0 = Task::new(
            t.query_x.clone(),
            t.query_y.clone(),
            t.support_x.clone(),
            Mat::from_rows(&[vec![0.0]]),
        )
        .unwrap();
        let g0 =
            g_predictor(&base, &t0, TimeMode::continuous(2.0).unwrap(), 1e-3).unwrap();
        assert_eq!(g0[0], 0.0);
    }

    #[test]
    fn predictions_linear_in_labels() {
        let spec = NetworkSpec::new(1, vec![8, 8], 1, Activation::ReLU, 2.0_f64.sqrt(), 0.1).unwrap();
        let tasks = sin_tasks(3, 4, 3, 21);
        let test = &sin_tasks(1, 4, 3, 77)[0];
        let base = BaseKernelSource::AnalyticNtk { spec: &spec };
        let inner = TimeMode::continuous(f64::INFINITY).unwrap();
        let outer = TimeMode::continuous(f64::INFINITY).unwrap();
        let base_out =
            kernel_regression_predict(&tasks, &base, test, inner, outer, 1e-3).unwrap();

        let double = |t: &Task| {
            Task::new(
                t.query_x.clone(),
                t.query_y.scale(2.0),
                t.support_x.clone(),
                t.support_y.scale(2.0),
            )
            .unwrap()
        };
        let tasks2: Vec<Task> = tasks.iter().map(double).collect();
        let test2 = double(test);
        let doubled =
            kernel_regression_predict(&tasks2, &base, &test2, inner, outer, 1e-3).unwrap();
        for (a, b) in base_out.iter().zip(&doubled) {
            assert!((2.0 * a - b).abs() < 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn meta_training_term_beats_support_only_baseline() {
        // averaged over draws, folding in the train-task residuals must beat
        // the per-task support regression alone
        let spec = NetworkSpec::new(1, vec![16, 16], 1, Activation::ReLU, 2.0_f64.sqrt(), 0.1)
            .unwrap();
        let base = BaseKernelSource::AnalyticNtk { spec: &spec };
        let inner = TimeMode::continuous(f64::INFINITY).unwrap();
        let outer = TimeMode::continuous(f64::INFINITY).unwrap();
        let mut err_full = 0.0;
        let mut err_g = 0.0;
        let draws = 10;
        for draw in 0..draws {
            let tasks = sin_tasks(20, 8, 3, 500 + draw);
            let test = &sin_tasks(1, 8, 3, 900 + draw)[0];
            let full =
                kernel_regression_predict(&tasks, &base, test, inner, outer, 1e-3).unwrap();
            let g_only = g_predictor(&base, test, inner, 1e-3).unwrap();
            let y = test.query_y.data();
            err_full += full.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            err_g += g_only.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        assert!(
            err_full < err_g,
            "meta term should help: full {err_full:.4} vs baseline {err_g:.4}"
        );
    }

    #[test]
    fn empirical_closed_form_approaches_analytic_regression_with_width() {
        // centered init (option b): the init-network contribution is removed
        // by shifting labels, so the finite-width closed form converges to
        // the analytic kernel-regression output as width grows
        let tasks = sin_tasks(2, 3, 3, 31);
        let test_tasks = sin_tasks(1, 3, 3, 32);
        let lambda_kernel = 0.8;
        let tau = 2;
        let t_query = 3.0;
        let eta = 0.5;
        let mut errs = Vec::new();
        for &width in &[64usize, 256] {
            let spec = NetworkSpec::new(1, vec![width, width], 1, Activation::ReLU, 2.0_f64.sqrt(), 0.1)
                .unwrap();
            let inner = TimeMode::discrete(lambda_kernel, tau).unwrap();
            let outer = TimeMode::continuous(eta * t_query).unwrap();
            let analytic_base = BaseKernelSource::AnalyticNtk { spec: &spec };
            let reference = kernel_regression_predict(
                &tasks,
                &analytic_base,
                &test_tasks[0],
                inner,
                outer,
                1e-3,
            )
            .unwrap();
            let mut acc = 0.0;
            let seeds = 5;
            for seed in 0..seeds {
                let p = init_params(&spec, 4000 + seed);
                let lambda_param = lambda_kernel / spec.width_norm();
                let shifted = maml::shift_tasks_by_init(&spec, &p, &tasks).unwrap();
                let shifted_test = maml::shift_tasks_by_init(&spec, &p, &test_tasks).unwrap();
                let g = metantk_direct(&spec, &p, &shifted, lambda_param, tau).unwrap();
                let strip =
                    metantk_direct_cross(&spec, &p, &shifted_test, &shifted, lambda_param, tau)
                        .unwrap();
                let f0_of = |tk: &Task, raw_x: &Mat| {
                    let out = maml::meta_output(&spec, &p, tk, lambda_param, tau).unwrap();
                    let init = crate::net::predict(&spec, &p, raw_x).unwrap();
                    out.sub(&init)
                };
                let mut f0_train = Vec::new();
                let mut y_train = Vec::new();
                for (tk, raw) in shifted.iter().zip(&tasks) {
                    f0_train.extend_from_slice(f0_of(tk, &raw.query_x).data());
                    y_train.extend_from_slice(raw.query_y.data());
                }
                let state =
                    PredictorState::new(g, f0_train, y_train, eta, TimeStyle::Continuous, 1e-3)
                        .unwrap();
                let f0_test = f0_of(&shifted_test[0], &test_tasks[0].query_x);
                let out =
                    closed_form_meta_output(&state, &strip, f0_test.data(), t_query).unwrap();
                let diff: f64 = out
                    .iter()
                    .zip(&reference)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                acc += diff;
            }
            errs.push(acc / seeds as f64);
        }
        assert!(errs[1] < errs[0], "width trend {errs:?}");
    }
}
