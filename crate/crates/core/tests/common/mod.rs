#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use gn_tracking::config::{Experiment, ExperimentConfig};
use gn_tracking::{
    generate_reference, road_profile, AuxProblem, GridSignal, InputPair, LinearModel, LinearizedModel, Model,
    QuarterCar, QuarterCarParams, RoadProfileSpec, TimeGrid, TrackingProblem, Weights, QUARTER_CAR_P_REF,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

pub fn experiment(name: &str) -> Experiment {
    ExperimentConfig::load(&config_path(name)).unwrap().build().unwrap()
}

pub fn quarter_car() -> Arc<dyn Model> {
    Arc::new(QuarterCar::new(QuarterCarParams::default()).unwrap())
}

pub fn p_ref() -> DVector<f64> {
    DVector::from_element(1, QUARTER_CAR_P_REF)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_signal(rng: &mut ChaCha8Rng, grid: TimeGrid, dim: usize) -> GridSignal {
    GridSignal::new(grid, DMatrix::from_fn(grid.n_nodes(), dim, |_, _| rng.gen_range(-1.0..1.0))).unwrap()
}

/// Quarter-car tracking problem on `[0, tf]` with a synthetic reference of
/// the given bump heights, `p` fixed at the reference value.
pub fn quarter_car_problem(tf: f64, dt: f64, amplitude: [f64; 2], weights: Weights) -> TrackingProblem {
    let grid = TimeGrid::with_step(0.0, tf, dt).unwrap();
    let car = quarter_car();
    let spec = RoadProfileSpec {
        amplitude_m: amplitude,
        ..RoadProfileSpec::default()
    };
    let u = road_profile(&spec, &grid).unwrap();
    let y_ref = generate_reference(car.as_ref(), &InputPair::new(u, p_ref()).unwrap(), 4).unwrap();
    TrackingProblem::new(car, y_ref, weights)
        .unwrap()
        .with_fixed_parameter(p_ref())
        .unwrap()
}

pub fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Lightly damped oscillator driven by `u`, observing position.
pub fn oscillator_model() -> Arc<dyn Model> {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -0.8]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    Arc::new(LinearModel::without_parameters(a, b, c, DMatrix::zeros(1, 1)).unwrap())
}

/// Minimizer of a quadratic functional of the grid values of `u`, computed
/// from finite differences of the functional itself. For a quadratic the
/// central second differences are exact up to rounding.
pub fn quadratic_minimizer(n: usize, cost: impl Fn(&DVector<f64>) -> f64, step: f64) -> DVector<f64> {
    let zero = DVector::zeros(n);
    let c0 = cost(&zero);
    let e = |i: usize| {
        let mut v = DVector::zeros(n);
        v[i] = step;
        v
    };
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let diag: Vec<f64> = (0..n).map(|i| cost(&e(i))).collect();
    for i in 0..n {
        let minus = cost(&(-e(i)));
        grad[i] = (diag[i] - minus) / (2.0 * step);
        hess[(i, i)] = (diag[i] - 2.0 * c0 + minus) / (step * step);
        for j in 0..i {
            let both = cost(&(e(i) + e(j)));
            let v = (both - diag[i] - diag[j] + c0) / (step * step);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    -hess.cholesky().expect("quadratic is not strictly convex").solve(&grad)
}

pub fn signal_from(grid: TimeGrid, v: &DVector<f64>) -> GridSignal {
    GridSignal::new(grid, DMatrix::from_column_slice(v.len(), 1, v.as_slice())).unwrap()
}

fn hat(grid: &TimeGrid, j: usize, t: f64) -> f64 {
    let s = (t - grid.node(j)) / grid.dt();
    (1.0 - s.abs()).max(0.0)
}

/// Continuous-time optimum of `½‖x - r‖² + ½α‖u‖²` subject to `x' = a x + u`,
/// `x(0) = 0`, over piecewise-linear `u` on `grid`, with constant `r`. Each hat
/// function response is integrated with a fine RK4 and the Gram matrix is
/// formed by Simpson's rule.
pub fn galerkin_scalar_lq(grid: TimeGrid, a: f64, alpha: f64, r: f64, sub: usize) -> DVector<f64> {
    let n = grid.n_nodes();
    let fine = grid.n_steps() * sub;
    let h = (grid.tf() - grid.t0()) / fine as f64;
    let time = |s: usize| grid.t0() + s as f64 * h;
    let responses: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let f = |t: f64, x: f64| a * x + hat(&grid, j, t);
            let mut xs = vec![0.0; fine + 1];
            for s in 0..fine {
                let (t, x) = (time(s), xs[s]);
                let k1 = f(t, x);
                let k2 = f(t + h / 2.0, x + h / 2.0 * k1);
                let k3 = f(t + h / 2.0, x + h / 2.0 * k2);
                let k4 = f(t + h, x + h * k3);
                xs[s + 1] = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            xs
        })
        .collect();
    let simpson = |g: &dyn Fn(usize) -> f64| {
        let inner: f64 = (1..fine).map(|s| if s % 2 == 1 { 4.0 } else { 2.0 } * g(s)).sum();
        (g(0) + g(fine) + inner) * h / 3.0
    };
    let mut gram = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for i in 0..n {
        rhs[i] = r * simpson(&|s| responses[i][s]);
        for j in 0..=i {
            let v = simpson(&|s| {
                responses[i][s] * responses[j][s] + alpha * hat(&grid, i, time(s)) * hat(&grid, j, time(s))
            });
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    gram.cholesky().unwrap().solve(&rhs)
}

/// Auxiliary problem for `x' = a x + u`, `y = x`, constant reference `r`.
pub fn scalar_aux(grid: TimeGrid, a: f64, alpha: f64, r: f64) -> AuxProblem {
    let lin = LinearizedModel::constant(
        grid,
        scalar(a),
        scalar(1.0),
        scalar(1.0),
        scalar(0.0),
        GridSignal::constant(grid, &[r]),
        GridSignal::zeros(grid, 1),
        4,
    )
    .unwrap();
    AuxProblem::new(lin, &Weights::scalar(1.0, 0.0, alpha, 0.0), false).unwrap()
}

pub fn max_abs_diff(a: &GridSignal, b: &DVector<f64>) -> f64 {
    (0..b.len()).map(|k| (a.row(k)[0] - b[k]).abs()).fold(0.0, f64::max)
}

/// Minimizer over grid values of `u` of the trapezoid-discretized
/// `½‖Q^½(y - y_ref)‖² + ½|T^½(y(tf) - y_ref(tf))|² + ½α‖u‖²` for a problem
/// whose input-to-output map is affine in `u`, with a single control and
/// output. The map is sampled column by column.
pub fn affine_least_squares(prob: &TrackingProblem, p: &DVector<f64>) -> DVector<f64> {
    let g = *prob.grid();
    let n = g.n_nodes();
    let output = |u: GridSignal| prob.output(&InputPair::new(u, p.clone()).unwrap()).unwrap();
    let y0 = output(GridSignal::zeros(g, 1));
    let mut map = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        map.set_column(i, &(output(signal_from(g, &e)).values().column(0) - y0.values().column(0)));
    }
    let w = prob.weights();
    let mut weight = DVector::from_fn(n, |k, _| g.weight(k) * w.q[(0, 0)]);
    weight[n - 1] += w.terminal[(0, 0)];
    let residual = prob.y_ref().values().column(0) - y0.values().column(0);
    let weighted = DMatrix::from_diagonal(&weight) * &map;
    let hess = map.transpose() * &weighted + DMatrix::from_diagonal(&DVector::from_fn(n, |k, _| w.alpha_u * g.weight(k)));
    let rhs = weighted.transpose() * residual;
    hess.cholesky().expect("normal matrix is not positive definite").solve(&rhs)
}
