//! The `simulate`, `solve`, `compare` and `verify` commands. Each writes its
//! results into an output directory and returns a summary.

use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aux::{aux_gradient, solve_aux_gd, solve_aux_riccati, AuxProblem, GdSettings};
use crate::config::{Experiment, ReferenceConfig};
use crate::error::{Error, Result};
use crate::grid::{fmt_f64, l2_inner, l2_norm, GridSignal, TimeGrid};
use crate::linearization::{adjoint_apply, linearize, normal_equation_residual, sensitivity_apply};
use crate::model::{check_jacobians, input_to_state, InputPair, Model, PerturbedJacobian, ProbePoint};
use crate::outer::{
    cost_gradient, descent_certificates, direct_gradient_solve, gauss_newton_solve, SolveReport,
};
use crate::problem::{generate_reference, TrackingProblem, Weights};
use crate::profile::road_profile;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes the reference input, state and output.
pub fn cmd_simulate(ex: &Experiment, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let Some((input, states)) = &ex.reference_input else {
        return Err(Error::Config(
            "reference: simulate needs a reference given by its input".into(),
        ));
    };
    ex.y_ref.save_csv(&out.join("y_ref.csv"))?;
    input.u.save_csv(&out.join("u_ref.csv"))?;
    states.save_csv(&out.join("x_ref.csv"))?;
    info!("wrote reference signals to {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct SolveFile<'a> {
    name: &'a str,
    parameter_units: &'a str,
    final_p_display: Vec<f64>,
    #[serde(flatten)]
    report: &'a SolveReport,
}

fn unit_label(ex: &Experiment) -> &'static str {
    match ex.units.suffix {
        "" => "SI",
        _ => "kN/m",
    }
}

/// Runs the Gauss-Newton method on the configured problem.
pub fn cmd_solve(ex: &Experiment, out: &Path) -> Result<SolveReport> {
    fs::create_dir_all(out)?;
    let report = gauss_newton_solve(&ex.problem, &ex.start, &ex.gauss_newton)?;
    let file = SolveFile {
        name: &ex.config.name,
        parameter_units: unit_label(ex),
        final_p_display: report.final_p.iter().map(|v| ex.units.display(*v)).collect(),
        report: &report,
    };
    write_json(&out.join("report.json"), &file)?;
    let csv = BufWriter::new(fs::File::create(out.join("iterations.csv"))?);
    report.write_iterations_csv(csv, ex.units)?;
    report.final_input.u.save_csv(&out.join("u_final.csv"))?;
    if let Some(y) = report.outputs.last() {
        y.save_csv(&out.join("y_final.csv"))?;
    }
    for &k in &ex.config.output.save_iterations {
        if let Some(y) = report.outputs.get(k) {
            y.save_csv(&out.join(format!("y_iter_{k}.csv")))?;
        }
    }
    info!(
        "{}: {} iterations, J {} -> {}, {:?}",
        ex.config.name,
        report.iterates.len() - 1,
        report.iterates[0].cost.total,
        report.final_cost(),
        report.termination
    );
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub j0: f64,
    pub threshold: f64,
    /// First iteration with `J <= threshold`, if any.
    pub gn_crossing: Option<usize>,
    pub gd_crossing: Option<usize>,
    pub gn_final: f64,
    pub gd_final: f64,
    pub gn_iterations: usize,
    pub gd_iterations: usize,
}

fn crossing(costs: &[f64], threshold: f64) -> Option<usize> {
    costs.iter().position(|&j| j <= threshold)
}

/// Gauss-Newton against direct steepest descent from the same start.
///
/// `compare.csv` has one row per iteration up to the longer run; a method
/// that stopped earlier repeats its final value.
pub fn cmd_compare(ex: &Experiment, out: &Path) -> Result<CompareSummary> {
    if ex.problem.p_fixed().is_none() {
        return Err(Error::Config(
            "solver.fix_parameter: compare needs a fixed-parameter problem".into(),
        ));
    }
    fs::create_dir_all(out)?;
    let (gn, gd) = std::thread::scope(|s| {
        let gn = s.spawn(|| gauss_newton_solve(&ex.problem, &ex.start, &ex.gauss_newton));
        let gd = direct_gradient_solve(&ex.problem, &ex.start, &ex.direct);
        (gn.join().expect("Gauss-Newton thread panicked"), gd)
    });
    let (gn, gd) = (gn?.costs(), gd?.costs());
    let rows = gn.len().max(gd.len());
    let mut wr = csv::Writer::from_writer(BufWriter::new(fs::File::create(out.join("compare.csv"))?));
    wr.write_record(["iter", "J_gn", "J_gd"])?;
    for i in 0..rows {
        let at = |c: &[f64]| fmt_f64(c[i.min(c.len() - 1)]);
        wr.write_record([i.to_string(), at(&gn), at(&gd)])?;
    }
    wr.flush()?;
    let j0 = gn[0];
    let threshold = ex.config.compare.crossing_fraction * j0;
    let summary = CompareSummary {
        j0,
        threshold,
        gn_crossing: crossing(&gn, threshold),
        gd_crossing: crossing(&gd, threshold),
        gn_final: *gn.last().unwrap(),
        gd_final: *gd.last().unwrap(),
        gn_iterations: gn.len() - 1,
        gd_iterations: gd.len() - 1,
    };
    write_json(&out.join("compare_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: CheckStatus,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn measured(name: &'static str, value: f64, tolerance: f64, detail: String) -> Self {
        let status = if value <= tolerance {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        Self {
            name,
            status,
            value,
            tolerance,
            detail,
        }
    }

    fn skipped(name: &'static str, detail: &str) -> Self {
        Self {
            name,
            status: CheckStatus::Skipped,
            value: f64::NAN,
            tolerance: f64::NAN,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn failed(&self) -> Vec<&'static str> {
        self.checks
            .iter()
            .filter(|c| c.status == CheckStatus::Fail)
            .map(|c| c.name)
            .collect()
    }
}

const JACOBIAN_TOL: f64 = 1e-5;
const ADJOINT_TOL: f64 = 1e-6;
const GRADIENT_TOL: f64 = 1e-4;
const CROSS_CHECK_TOL: f64 = 1e-2;
const NORMAL_RESIDUAL_TOL: f64 = 1e-3;

fn random_signal(rng: &mut ChaCha8Rng, grid: TimeGrid, dim: usize, scale: f64) -> GridSignal {
    let values = DMatrix::from_fn(grid.n_nodes(), dim, |_, _| scale * rng.gen_range(-1.0..=1.0));
    GridSignal::new(grid, values).expect("shape matches grid")
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(n, |i, _| scale[i] * rng.gen_range(-1.0..=1.0))
}

fn parameter_scale(p: &DVector<f64>) -> DVector<f64> {
    p.map(|v| 1e-2 * v.abs().max(1.0))
}

fn control_scale(u: &GridSignal) -> f64 {
    1e-2 * u.max_abs().max(1.0)
}

fn jacobian_check(ex: &Experiment, model: &dyn Model, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let states = input_to_state(model, &ex.start, ex.problem.substeps())?;
    let grid = ex.grid;
    let mut probes = Vec::new();
    for _ in 0..ex.config.verify.jacobian_probes {
        let k = rng.gen_range(0..grid.n_nodes());
        let x = states.row(k).map(|v| v + 1e-3 * (1.0 + v.abs()) * rng.gen_range(-1.0..=1.0));
        let u = ex.start.u.row(k).map(|v| v + 1e-2 * rng.gen_range(-1.0..=1.0));
        let p = ex.start.p.map(|v| v * (1.0 + 1e-2 * rng.gen_range(-1.0..=1.0)));
        probes.push(ProbePoint { t: grid.node(k), x, u, p });
    }
    let check = check_jacobians(model, &probes);
    Ok(CheckResult::measured(
        "jacobian_consistency",
        check.max_relative_error,
        JACOBIAN_TOL,
        format!("worst: {}", check.worst_jacobian),
    ))
}

fn adjoint_check(ex: &Experiment, prob: &TrackingProblem, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let lin = linearize(prob, &ex.start)?;
    let dims = prob.model().dims();
    let zero_p = DVector::zeros(dims.n_p);
    let mut worst: f64 = 0.0;
    for _ in 0..ex.config.verify.adjoint_pairs {
        let du = random_signal(rng, ex.grid, dims.n_u, 1.0);
        let dy = random_signal(rng, ex.grid, dims.n_y, 1.0);
        let lhs = l2_inner(&sensitivity_apply(&lin, &du, &zero_p)?, &dy)?;
        let rhs = l2_inner(&du, &adjoint_apply(&lin, &dy)?)?;
        worst = worst.max((lhs - rhs).abs() / (l2_norm(&du) * l2_norm(&dy)));
    }
    Ok(CheckResult::measured(
        "adjoint_identity",
        worst,
        ADJOINT_TOL,
        format!("{} random pairs", ex.config.verify.adjoint_pairs),
    ))
}

fn aux_gradient_check(ex: &Experiment, prob: &TrackingProblem, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let aux = AuxProblem::from_problem(prob, linearize(prob, &ex.start)?)?;
    let dims = prob.model().dims();
    let joint = aux.is_joint();
    let u_scale = control_scale(&ex.start.u);
    let p_scale = parameter_scale(&ex.start.p);
    let mut worst: f64 = 0.0;
    for _ in 0..ex.config.verify.gradient_directions {
        let du = random_signal(rng, ex.grid, dims.n_u, u_scale);
        let eu = random_signal(rng, ex.grid, dims.n_u, u_scale);
        let (dp, ep) = if joint {
            (random_vector(rng, dims.n_p, &p_scale), random_vector(rng, dims.n_p, &p_scale))
        } else {
            (DVector::zeros(dims.n_p), DVector::zeros(dims.n_p))
        };
        let (gu, gp) = aux_gradient(&aux, &du, &dp)?;
        let analytic = l2_inner(&gu, &eu)? + if joint { gp.dot(&ep) } else { 0.0 };
        let eps = 1e-3;
        let plus = aux.cost(&du.axpy(eps, &eu)?, &(&dp + &ep * eps))?;
        let minus = aux.cost(&du.axpy(-eps, &eu)?, &(&dp - &ep * eps))?;
        let fd = (plus - minus) / (2.0 * eps);
        worst = worst.max((fd - analytic).abs() / analytic.abs().max(1e-12));
    }
    Ok(CheckResult::measured(
        "aux_gradient",
        worst,
        GRADIENT_TOL,
        format!("{} directions, central differences", ex.config.verify.gradient_directions),
    ))
}

fn cost_gradient_check(ex: &Experiment, prob: &TrackingProblem, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let dims = prob.model().dims();
    let joint = prob.p_fixed().is_none();
    let x0 = prob.admissible(&ex.start)?;
    let grad = cost_gradient(prob, &x0)?;
    let u_scale = control_scale(&x0.u);
    let p_scale = parameter_scale(&x0.p);
    let mut worst: f64 = 0.0;
    for _ in 0..ex.config.verify.gradient_directions {
        let eu = random_signal(rng, ex.grid, dims.n_u, u_scale);
        let ep = if joint {
            random_vector(rng, dims.n_p, &p_scale)
        } else {
            DVector::zeros(dims.n_p)
        };
        let analytic = grad.directional(&eu, &ep)?;
        let eps = 1e-4;
        let at = |s: f64| -> Result<f64> {
            let x = InputPair::new(x0.u.axpy(s, &eu)?, &x0.p + &ep * s)?;
            Ok(prob.evaluate_cost(&x)?.total)
        };
        let fd = (at(eps)? - at(-eps)?) / (2.0 * eps);
        worst = worst.max((fd - analytic).abs() / analytic.abs().max(1e-12));
    }
    Ok(CheckResult::measured(
        "cost_gradient",
        worst,
        GRADIENT_TOL,
        format!("{} directions, central differences", ex.config.verify.gradient_directions),
    ))
}

/// Restriction of `s` to `grid`, which must lie inside the signal's grid.
fn resample(s: &GridSignal, grid: TimeGrid) -> Result<GridSignal> {
    let rows: Vec<DVector<f64>> = grid.nodes().map(|t| s.sample(t)).collect::<Result<_>>()?;
    GridSignal::new(grid, DMatrix::from_fn(rows.len(), s.dim(), |k, i| rows[k][i]))
}

/// Riccati against converged descent in the unweighted setting (`Q = I`,
/// `T = 0`) on a refined copy of the start of the horizon. The reference is
/// re-simulated on the fine grid when its input is known.
fn cross_check(ex: &Experiment, prob: &TrackingProblem, model: Arc<dyn Model>) -> Result<[CheckResult; 2]> {
    let names = ["riccati_vs_descent", "normal_equation_residual"];
    let Some(p) = prob.p_fixed() else {
        let why = "needs a fixed-parameter problem";
        return Ok(names.map(|n| CheckResult::skipped(n, why)));
    };
    let w = prob.weights();
    if !(w.alpha_u > 0.0) {
        return Err(Error::Config(
            "weights.alpha_u: the Riccati method needs alpha_u > 0 for a positive definite R".into(),
        ));
    }
    let v = &ex.config.verify;
    let span = v.cross_check_horizon.min(ex.grid.tf() - ex.grid.t0());
    let coarse = ((span / ex.grid.dt()).round() as usize).max(1);
    let fine = TimeGrid::new(ex.grid.t0(), ex.grid.node(coarse), coarse * v.cross_check_refinement.max(1))?;
    let n_y = w.q.nrows();
    let weights = Weights {
        q: DMatrix::identity(n_y, n_y),
        terminal: DMatrix::zeros(n_y, n_y),
        alpha_u: w.alpha_u,
        alpha_p: w.alpha_p,
    };
    let y_ref = match &ex.reference_input {
        Some((input, _)) => {
            let u = match &ex.config.reference {
                ReferenceConfig::Synthetic { profile, .. } => road_profile(profile, &fine)?,
                _ => resample(&input.u, fine)?,
            };
            generate_reference(ex.model.as_ref(), &InputPair::new(u, input.p.clone())?, prob.substeps())?
        }
        None => resample(prob.y_ref(), fine)?,
    };
    let sub = TrackingProblem::new(model, y_ref, weights)?
        .with_fixed_parameter(p.clone())?
        .with_substeps(prob.substeps())?;
    let start = InputPair::new(resample(&ex.start.u, fine)?, p.clone())?;
    let lin = linearize(&sub, &start)?;
    let aux = AuxProblem::from_problem(&sub, lin.clone())?;
    let (ric, _) = solve_aux_riccati(&aux)?;
    let settings = GdSettings {
        tol: 1e-8,
        max_iter: 20_000,
        min_relative_decrease: 0.0,
        ..GdSettings::default()
    };
    let dims = sub.model().dims();
    let gd = solve_aux_gd(&aux, (&GridSignal::zeros(fine, dims.n_u), &DVector::zeros(dims.n_p)), &settings)?;
    let gap = l2_norm(&ric.du.sub(&gd.du)?) / l2_norm(&gd.du).max(f64::MIN_POSITIVE);
    let residual = normal_equation_residual(&lin, &ric.du, w.alpha_u)?;
    let detail = format!(
        "[{}, {}] with dt {:e}, Q = I, T = 0; descent stopped after {} iterations ({:?})",
        fine.t0(),
        fine.tf(),
        fine.dt(),
        gd.iterations,
        gd.stop
    );
    Ok([
        CheckResult::measured(names[0], gap, CROSS_CHECK_TOL, detail.clone()),
        CheckResult::measured(names[1], residual, NORMAL_RESIDUAL_TOL, detail),
    ])
}

fn certificate_check(ex: &Experiment, prob: &TrackingProblem) -> Result<CheckResult> {
    let report = gauss_newton_solve(prob, &ex.start, &ex.gauss_newton)?;
    let cert = descent_certificates(&report, prob);
    let worst = cert
        .entries
        .iter()
        .map(|c| c.directional_derivative)
        .fold(f64::NEG_INFINITY, f64::max);
    let coercive = cert.coercivity_holds();
    let ok = cert.all_descent() && cert.all_monotone() && coercive != Some(false);
    let detail = format!(
        "{} accepted steps, monotone: {}, coercivity: {}",
        cert.entries.len(),
        cert.all_monotone(),
        coercive.map_or("not applicable".to_string(), |c| c.to_string())
    );
    Ok(CheckResult {
        name: "descent_certificates",
        status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
        value: worst,
        tolerance: 0.0,
        detail,
    })
}

/// Runs the derivative, adjoint, inner-solver and descent checks on the
/// configured problem and writes `verify.json`.
pub fn cmd_verify(ex: &Experiment, out: &Path) -> Result<VerifyReport> {
    let v = &ex.config.verify;
    let model: Arc<dyn Model> = match v.fault_injection {
        Some(offset) => Arc::new(PerturbedJacobian {
            inner: ex.model.clone(),
            offset,
        }),
        None => ex.model.clone(),
    };
    let prob = ex.problem.with_model(model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(v.seed);
    let mut checks = vec![
        jacobian_check(ex, model.as_ref(), &mut rng)?,
        adjoint_check(ex, &prob, &mut rng)?,
        aux_gradient_check(ex, &prob, &mut rng)?,
        cost_gradient_check(ex, &prob, &mut rng)?,
    ];
    checks.extend(cross_check(ex, &prob, model.clone())?);
    checks.push(certificate_check(ex, &prob)?);
    let report = VerifyReport {
        passed: checks.iter().all(|c| c.status != CheckStatus::Fail),
        checks,
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("verify.json"), &report)?;
    Ok(report)
}
