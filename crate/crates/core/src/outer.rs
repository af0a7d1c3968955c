//! Projected Gauss-Newton iteration and the direct gradient-descent baseline.

use std::io::Write;

use log::info;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::aux::{solve_aux_gd, solve_aux_riccati, AuxProblem, AuxSolution, GdSettings, InnerStop};
use crate::error::{Error, Result};
use crate::grid::{fmt_f64, l2_inner, l2_norm, l2_norm_sq, GridSignal};
use crate::linearization::linearize;
use crate::model::{outputs_along, simulate, InputPair, ParameterUnits};
use crate::ode::{rk4_reverse, StageClock};
use crate::problem::{CostBreakdown, TrackingProblem};

/// Value and exact discrete gradient of the tracking cost.
#[derive(Debug, Clone)]
pub struct CostGradient {
    pub cost: CostBreakdown,
    pub output: GridSignal,
    /// `L²` representative of the control gradient.
    pub u: GridSignal,
    /// Parameter gradient; zero when the parameter is fixed.
    pub p: DVector<f64>,
}

impl CostGradient {
    /// `J'(u, p)(du, dp)`.
    pub fn directional(&self, du: &GridSignal, dp: &DVector<f64>) -> Result<f64> {
        Ok(l2_inner(&self.u, du)? + self.p.dot(dp))
    }

    fn norm_sq(&self) -> f64 {
        l2_norm_sq(&self.u) + self.p.norm_squared()
    }
}

/// Cost and gradient of the nonlinear tracking functional.
///
/// The gradient is the transpose of the RK4 discretization linearized at the
/// recorded stage states, so it is the exact derivative of the computed cost.
pub fn cost_gradient(prob: &TrackingProblem, input: &InputPair) -> Result<CostGradient> {
    prob.check_input(input)?;
    let model = prob.model();
    let sim = simulate(model, input, prob.substeps(), true)?;
    let y = outputs_along(model, input, &sim.states);
    let cost = prob.cost_of_output(&y, input)?;
    let grid = *prob.grid();
    let n = grid.n_steps();
    let weights = prob.weights();
    let p = &input.p;

    let mut bar_u: Vec<DVector<f64>> = Vec::with_capacity(grid.n_nodes());
    let mut seeds: Vec<DVector<f64>> = Vec::with_capacity(grid.n_nodes());
    let mut bar_p = DVector::zeros(p.len());
    for k in 0..grid.n_nodes() {
        let t = grid.node(k);
        let x = sim.states.row(k);
        let u = input.u.row(k);
        let e = y.row(k) - prob.y_ref().row(k);
        let mut w = &weights.q * &e * grid.weight(k);
        if k == n {
            w += &weights.terminal * &e;
        }
        bar_u.push(model.h_u(t, &x, &u, p).tr_mul(&w));
        bar_p += model.h_p(t, &x, &u, p).tr_mul(&w);
        seeds.push(model.h_x(t, &x, &u, p).tr_mul(&w));
    }

    let clock = sim.clock;
    let stage_point = |s: usize, stage: usize| {
        let j = StageClock::stage_index(s, stage);
        let (i, theta) = clock.half_locate(j);
        (clock.half_time(j), &sim.stages[4 * s + stage], input.u.interpolate(i, theta), i, theta)
    };
    let mut bar_p_dyn = DVector::zeros(p.len());
    rk4_reverse(
        &clock,
        model.dims().n_x,
        |s, stage, v| {
            let (t, x, u, _, _) = stage_point(s, stage);
            model.f_x(t, x, &u, p).tr_mul(v)
        },
        |k| Some(seeds[k].clone()),
        |s, stage, bar| {
            let (t, x, u, i, theta) = stage_point(s, stage);
            let g = model.f_u(t, x, &u, p).tr_mul(bar);
            if theta == 1.0 {
                bar_u[i + 1] += g;
            } else {
                bar_u[i] += &g * (1.0 - theta);
                if theta > 0.0 {
                    bar_u[i + 1] += g * theta;
                }
            }
            bar_p_dyn += model.f_p(t, x, &u, p).tr_mul(bar);
        },
    );

    let rows: Vec<DVector<f64>> = bar_u
        .iter()
        .enumerate()
        .map(|(k, b)| b / grid.weight(k) + input.u.row(k) * weights.alpha_u)
        .collect();
    let gu = GridSignal::new(grid, DMatrix::from_fn(rows.len(), input.u.dim(), |k, i| rows[k][i]))?;
    let gp = if prob.p_fixed().is_some() {
        DVector::zeros(p.len())
    } else {
        bar_p + bar_p_dyn + p * weights.alpha_p
    };
    Ok(CostGradient {
        cost,
        output: y,
        u: gu,
        p: gp,
    })
}

/// Inner solver of a Gauss-Newton step.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    GradientDescent(GdSettings),
    Riccati,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussNewtonConfig {
    pub j_tol: f64,
    pub max_outer: usize,
    pub armijo_beta: f64,
    pub armijo_sigma: f64,
    pub max_backtracks: usize,
    pub min_relative_progress: f64,
    pub inner: InnerSolver,
    /// Starting parameter step of every inner descent solve.
    pub dp0: Option<DVector<f64>>,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        Self {
            j_tol: 1e-8,
            max_outer: 10,
            armijo_beta: 0.75,
            armijo_sigma: 1e-4,
            max_backtracks: 40,
            min_relative_progress: 1e-10,
            inner: InnerSolver::Riccati,
            dp0: None,
        }
    }
}

fn check_armijo(beta: f64, sigma: f64, max_backtracks: usize) -> Result<()> {
    let unit = |v: f64| v > 0.0 && v < 1.0;
    if !unit(beta) || !unit(sigma) || max_backtracks == 0 {
        return Err(Error::InvalidParameter(
            "Armijo beta and sigma must lie in (0, 1) with at least one backtrack".into(),
        ));
    }
    Ok(())
}

impl GaussNewtonConfig {
    pub fn validate(&self, prob: &TrackingProblem) -> Result<()> {
        check_armijo(self.armijo_beta, self.armijo_sigma, self.max_backtracks)?;
        if !(self.j_tol >= 0.0) {
            return Err(Error::InvalidParameter("j_tol must be non-negative".into()));
        }
        match &self.inner {
            InnerSolver::Riccati => {
                if prob.p_fixed().is_none() {
                    return Err(Error::InvalidParameter(
                        "the Riccati inner solver requires a fixed parameter".into(),
                    ));
                }
                if !(prob.weights().alpha_u > 0.0) {
                    return Err(Error::InvalidParameter(
                        "the Riccati inner solver requires alpha_u > 0".into(),
                    ));
                }
            }
            InnerSolver::GradientDescent(s) => s.validate()?,
        }
        if let Some(dp0) = &self.dp0 {
            if dp0.len() != prob.model().dims().n_p {
                return Err(Error::DimensionMismatch {
                    what: "initial parameter step",
                    expected: prob.model().dims().n_p,
                    got: dp0.len(),
                });
            }
        }
        Ok(())
    }
}

/// Settings of the direct steepest-descent baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DirectGdConfig {
    pub j_tol: f64,
    pub max_iter: usize,
    pub armijo_beta: f64,
    pub armijo_sigma: f64,
    pub max_backtracks: usize,
    pub min_relative_progress: f64,
}

impl Default for DirectGdConfig {
    fn default() -> Self {
        Self {
            j_tol: 1e-8,
            max_iter: 50,
            armijo_beta: 0.3,
            armijo_sigma: 1e-4,
            max_backtracks: 40,
            min_relative_progress: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxIterations,
    Stall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InnerSummary {
    pub iterations: usize,
    pub j_alpha: f64,
    pub grad_norm: f64,
    pub stop: InnerStop,
}

impl From<&AuxSolution> for InnerSummary {
    fn from(s: &AuxSolution) -> Self {
        Self {
            iterations: s.iterations,
            j_alpha: s.cost,
            grad_norm: s.diagnostics.last().map_or(f64::NAN, |r| r.grad_norm),
            stop: s.stop,
        }
    }
}

/// Accepted iterate `k`; `gamma` is the step that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    pub cost: CostBreakdown,
    pub gamma: Option<f64>,
    pub p: Vec<f64>,
    pub inner: Option<InnerSummary>,
}

/// Search direction data of the step taken from iterate `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepTrace {
    pub k: usize,
    pub directional_derivative: f64,
    pub du_norm: f64,
    pub dp_norm: f64,
    pub gamma: Option<f64>,
    pub backtracks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub method: &'static str,
    pub iterates: Vec<IterationRecord>,
    pub steps: Vec<StepTrace>,
    pub termination: Termination,
    pub final_p: Vec<f64>,
    #[serde(skip)]
    pub final_input: InputPair,
    /// Output of every accepted iterate, in order.
    #[serde(skip)]
    pub outputs: Vec<GridSignal>,
}

impl SolveReport {
    pub fn costs(&self) -> Vec<f64> {
        self.iterates.iter().map(|r| r.cost.total).collect()
    }

    pub fn final_cost(&self) -> f64 {
        self.iterates.last().map_or(f64::NAN, |r| r.cost.total)
    }

    /// `k,J,data_misfit,terminal_misfit,reg_u,reg_p,gamma,p_0..`, with the
    /// parameter columns in `units`.
    pub fn write_iterations_csv<W: Write>(&self, w: W, units: ParameterUnits) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let n_p = self.final_p.len();
        let mut header: Vec<String> = ["k", "J", "data_misfit", "terminal_misfit", "reg_u", "reg_p", "gamma"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..n_p).map(|j| format!("p_{j}{}", units.suffix)));
        wr.write_record(&header)?;
        for r in &self.iterates {
            let mut rec = vec![
                r.k.to_string(),
                fmt_f64(r.cost.total),
                fmt_f64(r.cost.data_misfit),
                fmt_f64(r.cost.terminal_misfit),
                fmt_f64(r.cost.reg_u),
                fmt_f64(r.cost.reg_p),
                r.gamma.map_or(String::new(), fmt_f64),
            ];
            rec.extend(r.p.iter().map(|v| fmt_f64(units.display(*v))));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

struct Progress {
    iterates: Vec<IterationRecord>,
    steps: Vec<StepTrace>,
    outputs: Vec<GridSignal>,
}

impl Progress {
    fn new(cost: CostBreakdown, input: &InputPair, y: GridSignal) -> Self {
        Self {
            iterates: vec![IterationRecord {
                k: 0,
                cost,
                gamma: None,
                p: input.p.iter().copied().collect(),
                inner: None,
            }],
            steps: Vec::new(),
            outputs: vec![y],
        }
    }

    fn finish(self, method: &'static str, termination: Termination, input: InputPair) -> SolveReport {
        SolveReport {
            method,
            iterates: self.iterates,
            steps: self.steps,
            termination,
            final_p: input.p.iter().copied().collect(),
            final_input: input,
            outputs: self.outputs,
        }
    }
}

struct Accepted {
    input: InputPair,
    cost: CostBreakdown,
    output: GridSignal,
    gamma: f64,
    backtracks: usize,
}

/// Backtracking over projected trial points `Π(x + γ d)`, `γ = β^i`, `i = 0, 1, ..`,
/// against the decrease `σ γ J'(x)(d)` of the unprojected direction.
#[allow(clippy::too_many_arguments)]
fn projected_armijo(
    prob: &TrackingProblem,
    x: &InputPair,
    cost: f64,
    du: &GridSignal,
    dp: &DVector<f64>,
    slope: f64,
    beta: f64,
    sigma: f64,
    max_backtracks: usize,
) -> Result<Option<Accepted>> {
    let mut gamma = 1.0;
    for i in 0..=max_backtracks {
        let trial = InputPair {
            u: x.u.axpy(gamma, du)?,
            p: &x.p + dp * gamma,
        };
        let trial = prob.admissible(&trial)?;
        match prob.output(&trial) {
            Ok(y) => {
                let c = prob.cost_of_output(&y, &trial)?;
                if c.total <= cost + sigma * gamma * slope {
                    return Ok(Some(Accepted {
                        input: trial,
                        cost: c,
                        output: y,
                        gamma,
                        backtracks: i,
                    }));
                }
            }
            Err(Error::Divergence { .. }) | Err(Error::NonFinite(_)) => {}
            Err(e) => return Err(e),
        }
        gamma *= beta;
    }
    Ok(None)
}

fn project_start(prob: &TrackingProblem, start: &InputPair) -> Result<InputPair> {
    let x = prob.admissible(start)?;
    if !x.u.values().eq(start.u.values()) || (prob.p_fixed().is_none() && x.p != start.p) {
        info!("starting point projected onto the admissible set");
    }
    Ok(x)
}

/// Projected Gauss-Newton method with line search.
pub fn gauss_newton_solve(prob: &TrackingProblem, start: &InputPair, cfg: &GaussNewtonConfig) -> Result<SolveReport> {
    cfg.validate(prob)?;
    let mut x = project_start(prob, start)?;
    let y0 = prob.output(&x)?;
    let mut cost = prob.cost_of_output(&y0, &x)?;
    let mut progress = Progress::new(cost, &x, y0);
    let n_p = prob.model().dims().n_p;
    let mut k = 0;
    let termination = loop {
        if cost.total <= cfg.j_tol {
            break Termination::Tolerance;
        }
        if k >= cfg.max_outer {
            break Termination::MaxIterations;
        }
        let lin = linearize(prob, &x)?;
        let aux = AuxProblem::from_problem(prob, lin)?;
        let solution = match &cfg.inner {
            InnerSolver::Riccati => solve_aux_riccati(&aux)?.0,
            InnerSolver::GradientDescent(settings) => {
                let du0 = GridSignal::zeros(*prob.grid(), x.u.dim());
                let dp0 = match (&cfg.dp0, prob.p_fixed()) {
                    (Some(d), None) => d.clone(),
                    _ => DVector::zeros(n_p),
                };
                solve_aux_gd(&aux, (&du0, &dp0), settings)?
            }
        };
        let gradient = cost_gradient(prob, &x)?;
        let slope = gradient.directional(&solution.du, &solution.dp)?;
        let mut trace = StepTrace {
            k,
            directional_derivative: slope,
            du_norm: l2_norm(&solution.du),
            dp_norm: solution.dp.norm(),
            gamma: None,
            backtracks: 0,
        };
        if !(slope < 0.0) {
            progress.steps.push(trace);
            break Termination::Stall;
        }
        let accepted = projected_armijo(
            prob,
            &x,
            cost.total,
            &solution.du,
            &solution.dp,
            slope,
            cfg.armijo_beta,
            cfg.armijo_sigma,
            cfg.max_backtracks,
        )?;
        let Some(acc) = accepted else {
            trace.backtracks = cfg.max_backtracks;
            progress.steps.push(trace);
            break Termination::Stall;
        };
        trace.gamma = Some(acc.gamma);
        trace.backtracks = acc.backtracks;
        progress.steps.push(trace);
        let previous = cost.total;
        k += 1;
        info!("outer iteration {k}: J = {:.6e}, gamma = {}", acc.cost.total, acc.gamma);
        progress.iterates.push(IterationRecord {
            k,
            cost: acc.cost,
            gamma: Some(acc.gamma),
            p: acc.input.p.iter().copied().collect(),
            inner: Some(InnerSummary::from(&solution)),
        });
        progress.outputs.push(acc.output);
        x = acc.input;
        cost = acc.cost;
        if previous - cost.total <= cfg.min_relative_progress * previous {
            break Termination::Stall;
        }
    };
    Ok(progress.finish("gauss_newton", termination, x))
}

/// Projected steepest descent on the nonlinear tracking cost.
pub fn direct_gradient_solve(prob: &TrackingProblem, start: &InputPair, cfg: &DirectGdConfig) -> Result<SolveReport> {
    check_armijo(cfg.armijo_beta, cfg.armijo_sigma, cfg.max_backtracks)?;
    let mut x = project_start(prob, start)?;
    let mut gradient = cost_gradient(prob, &x)?;
    let mut cost = gradient.cost;
    let mut progress = Progress::new(cost, &x, gradient.output.clone());
    let mut k = 0;
    let termination = loop {
        if cost.total <= cfg.j_tol {
            break Termination::Tolerance;
        }
        if k >= cfg.max_iter {
            break Termination::MaxIterations;
        }
        let du = gradient.u.scaled(-1.0);
        let dp = -&gradient.p;
        let slope = -gradient.norm_sq();
        let mut trace = StepTrace {
            k,
            directional_derivative: slope,
            du_norm: l2_norm(&du),
            dp_norm: dp.norm(),
            gamma: None,
            backtracks: 0,
        };
        if !(slope < 0.0) {
            progress.steps.push(trace);
            break Termination::Stall;
        }
        let accepted = projected_armijo(
            prob,
            &x,
            cost.total,
            &du,
            &dp,
            slope,
            cfg.armijo_beta,
            cfg.armijo_sigma,
            cfg.max_backtracks,
        )?;
        let Some(acc) = accepted else {
            trace.backtracks = cfg.max_backtracks;
            progress.steps.push(trace);
            break Termination::Stall;
        };
        trace.gamma = Some(acc.gamma);
        trace.backtracks = acc.backtracks;
        progress.steps.push(trace);
        let previous = cost.total;
        k += 1;
        progress.iterates.push(IterationRecord {
            k,
            cost: acc.cost,
            gamma: Some(acc.gamma),
            p: acc.input.p.iter().copied().collect(),
            inner: None,
        });
        progress.outputs.push(acc.output);
        x = acc.input;
        cost = acc.cost;
        if previous - cost.total <= cfg.min_relative_progress * previous {
            break Termination::Stall;
        }
        gradient = cost_gradient(prob, &x)?;
    };
    Ok(progress.finish("gradient_descent", termination, x))
}

/// Testable conclusions of the convergence theory for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Certificate {
    pub k: usize,
    pub directional_derivative: f64,
    pub descent: bool,
    pub monotone: bool,
    /// `‖du‖ + J'(du)/‖du‖`.
    pub step_ratio: f64,
    /// `-α_u ‖du‖²`, reported in the fixed-parameter, `Q = I`, `T = 0`,
    /// unbounded setting.
    pub coercivity_bound: Option<f64>,
    pub coercivity_holds: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateSummary {
    pub theorem_setting: bool,
    pub entries: Vec<Certificate>,
}

impl CertificateSummary {
    pub fn all_descent(&self) -> bool {
        self.entries.iter().all(|c| c.descent)
    }

    pub fn all_monotone(&self) -> bool {
        self.entries.iter().all(|c| c.monotone)
    }

    /// `None` outside the theorem's setting.
    pub fn coercivity_holds(&self) -> Option<bool> {
        self.theorem_setting
            .then(|| self.entries.iter().all(|c| c.coercivity_holds == Some(true)))
    }
}

/// Whether `prob` is in the setting of the coercivity estimate.
pub fn theorem_setting(prob: &TrackingProblem) -> bool {
    let w = prob.weights();
    let n_y = w.q.nrows();
    prob.p_fixed().is_some()
        && w.q == DMatrix::identity(n_y, n_y)
        && w.terminal.iter().all(|v| *v == 0.0)
        && prob.bounds().is_unbounded()
}

/// Certificates for every accepted step of `report`. A direction rejected at
/// termination is not an iteration and is left out.
pub fn descent_certificates(report: &SolveReport, prob: &TrackingProblem) -> CertificateSummary {
    let setting = theorem_setting(prob);
    let alpha = prob.weights().alpha_u;
    let entries = report
        .steps
        .iter()
        .filter(|s| s.gamma.is_some())
        .map(|s| {
            let slope = s.directional_derivative;
            let monotone = match (report.iterates.get(s.k), report.iterates.get(s.k + 1)) {
                (Some(a), Some(b)) => b.cost.total < a.cost.total,
                _ => false,
            };
            let bound = setting.then(|| -alpha * s.du_norm * s.du_norm);
            Certificate {
                k: s.k,
                directional_derivative: slope,
                descent: slope < 0.0,
                monotone,
                step_ratio: if s.du_norm > 0.0 {
                    s.du_norm + slope / s.du_norm
                } else {
                    f64::NAN
                },
                coercivity_bound: bound,
                coercivity_holds: bound.map(|b| slope <= b),
            }
        })
        .collect();
    CertificateSummary {
        theorem_setting: setting,
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::model::{LinearModel, Model};
    use crate::problem::Weights;
    use std::sync::Arc;

    fn first_order() -> Arc<dyn Model> {
        Arc::new(
            LinearModel::without_parameters(
                DMatrix::from_element(1, 1, -1.0),
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::zeros(1, 1),
            )
            .unwrap(),
        )
    }

    #[test]
    fn exact_start_terminates_immediately() {
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let model = first_order();
        let prob = TrackingProblem::new(model, GridSignal::zeros(g, 1), Weights::scalar(1.0, 0.0, 0.0, 0.0))
            .unwrap()
            .with_fixed_parameter(DVector::zeros(1))
            .unwrap();
        let start = InputPair::zero_control(g, 1, DVector::zeros(1));
        let cfg = GaussNewtonConfig {
            inner: InnerSolver::GradientDescent(GdSettings::default()),
            ..GaussNewtonConfig::default()
        };
        let report = gauss_newton_solve(&prob, &start, &cfg).unwrap();
        assert_eq!(report.termination, Termination::Tolerance);
        assert_eq!(report.iterates.len(), 1);
        assert!(descent_certificates(&report, &prob).entries.is_empty());
    }

    #[test]
    fn riccati_requires_fixed_parameter() {
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let prob =
            TrackingProblem::new(first_order(), GridSignal::constant(g, &[1.0]), Weights::scalar(1.0, 0.0, 0.1, 0.0))
                .unwrap();
        let start = InputPair::zero_control(g, 1, DVector::zeros(1));
        assert!(gauss_newton_solve(&prob, &start, &GaussNewtonConfig::default()).is_err());
    }

    #[test]
    fn linear_problem_descends() {
        let g = TimeGrid::new(0.0, 1.0, 40).unwrap();
        let prob =
            TrackingProblem::new(first_order(), GridSignal::constant(g, &[1.0]), Weights::scalar(1.0, 0.0, 0.1, 0.0))
                .unwrap()
                .with_fixed_parameter(DVector::zeros(1))
                .unwrap();
        let start = InputPair::zero_control(g, 1, DVector::zeros(1));
        let gn = gauss_newton_solve(&prob, &start, &GaussNewtonConfig::default()).unwrap();
        let gd = direct_gradient_solve(&prob, &start, &DirectGdConfig::default()).unwrap();
        assert!(gn.final_cost() < gn.costs()[0]);
        assert!(gd.final_cost() < gd.costs()[0]);
        let cert = descent_certificates(&gn, &prob);
        assert!(cert.theorem_setting);
        assert!(cert.all_descent());
        assert_eq!(cert.coercivity_holds(), Some(true));
        let mut buf = Vec::new();
        gn.write_iterations_csv(&mut buf, ParameterUnits::SI).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,J,data_misfit,terminal_misfit,reg_u,reg_p,gamma,p_0\n"));
    }
}
