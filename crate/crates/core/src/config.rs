//! JSON experiment configuration and its translation into a solvable problem.
//!
//! Physical quantities of the quarter car are given in kN-based units with
//! explicit suffixes and converted to SI on load. Parameter values elsewhere
//! in the file (reference, start, bounds, `dp0`) use the model's display
//! units: kN/m for the quarter car, SI for linear models.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aux::GdSettings;
use crate::error::{Error, Result};
use crate::grid::{GridSignal, TimeGrid, Trajectory};
use crate::model::{input_to_state, InputPair, LinearModel, Model, ParameterUnits, QuarterCar, QuarterCarParams};
use crate::outer::{DirectGdConfig, GaussNewtonConfig, InnerSolver};
use crate::problem::{BoxBounds, TrackingProblem, Weights};
use crate::profile::{road_profile, RoadProfileSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub weights: WeightsConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default)]
    pub start: StartConfig,
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    QuarterCar(QuarterCarConfig),
    Linear(LinearConfig),
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuarterCarConfig {
    pub m1_kg: f64,
    pub m2_kg: f64,
    pub k2_kN_per_m: f64,
    pub d1_kNs_per_m: f64,
    /// Cubic coefficient of the suspension spring, in 1/m².
    pub c_per_m2: f64,
}

impl Default for QuarterCarConfig {
    fn default() -> Self {
        Self {
            m1_kg: 3600.0,
            m2_kg: 380.0,
            k2_kN_per_m: 1000.0,
            d1_kNs_per_m: 34.0,
            c_per_m2: 40.0,
        }
    }
}

/// `x' = A x + Bu u + Bp p`, `y = C x + Du u + Dp p`; matrices as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    pub a: Vec<Vec<f64>>,
    pub bu: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bp: Option<Vec<Vec<f64>>>,
    pub c: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub du: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t0: f64,
    pub tf: f64,
    pub dt: f64,
}

/// A weight matrix, either `s * I` from a scalar or explicit rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub q: MatrixSpec,
    pub terminal: MatrixSpec,
    pub alpha_u: f64,
    pub alpha_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundsConfig {
    #[default]
    None,
    /// `p` within `(1 ± fraction) * p_start`; controls unbounded.
    RelativeParameter { fraction: f64 },
    /// Missing entries are unbounded.
    Absolute {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        u_low: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        u_up: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p_low: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p_up: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StartControl {
    #[default]
    Zero,
    /// The reference input; only for references given by their input.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StartConfig {
    #[serde(default)]
    pub u: StartControl,
    /// Defaults to the reference parameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceConfig {
    /// Output of the model driven by a synthetic road profile.
    Synthetic { profile: RoadProfileSpec, p: Vec<f64> },
    /// Output of the model at rest input.
    Zero { p: Vec<f64> },
    /// Output of the model driven by an input read from CSV.
    InputFile { path: PathBuf, p: Vec<f64> },
    /// A reference output read from CSV.
    OutputFile { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerKind {
    #[default]
    Riccati,
    GradientDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub j_tol: f64,
    pub max_outer: usize,
    pub armijo_beta: f64,
    pub armijo_sigma: f64,
    pub max_backtracks: usize,
    pub min_relative_progress: f64,
    pub inner: InnerKind,
    pub gradient_descent: GdSettings,
    /// Keep `p` at its start value and optimize the control only.
    pub fix_parameter: bool,
    /// Starting parameter step of each inner descent solve.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dp0: Option<Vec<f64>>,
    pub substeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let gn = GaussNewtonConfig::default();
        Self {
            j_tol: gn.j_tol,
            max_outer: gn.max_outer,
            armijo_beta: gn.armijo_beta,
            armijo_sigma: gn.armijo_sigma,
            max_backtracks: gn.max_backtracks,
            min_relative_progress: gn.min_relative_progress,
            inner: InnerKind::Riccati,
            gradient_descent: GdSettings::default(),
            fix_parameter: false,
            dp0: None,
            substeps: crate::ode::DEFAULT_SUBSTEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub gd_iterations: usize,
    pub gd_armijo_beta: f64,
    pub gd_armijo_sigma: f64,
    /// Crossing level as a fraction of the initial cost.
    pub crossing_fraction: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let d = DirectGdConfig::default();
        Self {
            gd_iterations: d.max_iter,
            gd_armijo_beta: d.armijo_beta,
            gd_armijo_sigma: d.armijo_sigma,
            crossing_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Iterates whose outputs are written as `y_iter_{k}.csv`.
    pub save_iterations: Vec<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            save_iterations: vec![1, 3, 5, 7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub adjoint_pairs: usize,
    pub gradient_directions: usize,
    pub jacobian_probes: usize,
    /// Adds this offset to every entry of the analytic `f_x`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault_injection: Option<f64>,
    /// Horizon and grid refinement of the Riccati/descent cross-check.
    pub cross_check_horizon: f64,
    pub cross_check_refinement: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            adjoint_pairs: 20,
            gradient_directions: 5,
            jacobian_probes: 20,
            fault_injection: None,
            cross_check_horizon: 2.0,
            cross_check_refinement: 10,
        }
    }
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(config_err(field, "expected a non-empty rectangular matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl MatrixSpec {
    fn build(&self, field: &str, n: usize) -> Result<DMatrix<f64>> {
        let m = match self {
            MatrixSpec::Scalar(s) => DMatrix::identity(n, n) * *s,
            MatrixSpec::Rows(rows) => matrix(field, rows)?,
        };
        if m.shape() != (n, n) {
            return Err(config_err(field, format!("expected a {n}x{n} matrix")));
        }
        Ok(m)
    }
}

fn vector(field: &str, v: &[f64], n: usize, units: ParameterUnits) -> Result<DVector<f64>> {
    if v.len() != n {
        return Err(config_err(field, format!("expected {n} entries, got {}", v.len())));
    }
    Ok(DVector::from_iterator(n, v.iter().map(|x| units.to_si(*x))))
}

impl ModelConfig {
    pub fn build(&self) -> Result<Arc<dyn Model>> {
        match self {
            ModelConfig::QuarterCar(q) => {
                let params = QuarterCarParams::from_kilonewton_units(
                    q.m1_kg,
                    q.m2_kg,
                    q.k2_kN_per_m,
                    q.d1_kNs_per_m,
                    q.c_per_m2,
                )
                .map_err(|e| config_err("model", e))?;
                Ok(Arc::new(QuarterCar::new(params)?))
            }
            ModelConfig::Linear(l) => {
                let a = matrix("model.a", &l.a)?;
                let bu = matrix("model.bu", &l.bu)?;
                let c = matrix("model.c", &l.c)?;
                let (n_x, n_u, n_y) = (a.nrows(), bu.ncols(), c.nrows());
                let bp = match &l.bp {
                    Some(rows) => matrix("model.bp", rows)?,
                    None => DMatrix::zeros(n_x, 1),
                };
                let n_p = bp.ncols();
                let du = match &l.du {
                    Some(rows) => matrix("model.du", rows)?,
                    None => DMatrix::zeros(n_y, n_u),
                };
                let dp = match &l.dp {
                    Some(rows) => matrix("model.dp", rows)?,
                    None => DMatrix::zeros(n_y, n_p),
                };
                let x0 = DVector::from_vec(l.x0.clone().unwrap_or_else(|| vec![0.0; n_x]));
                let model = LinearModel::new(a, bu, bp, c, du, dp, x0).map_err(|e| config_err("model", e))?;
                Ok(Arc::new(model))
            }
        }
    }

    pub fn parameter_units(&self) -> ParameterUnits {
        match self {
            ModelConfig::QuarterCar(_) => ParameterUnits::KILONEWTON_PER_METRE,
            ModelConfig::Linear(_) => ParameterUnits::SI,
        }
    }
}

/// A configuration resolved into model, reference and solver settings.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub units: ParameterUnits,
    pub model: Arc<dyn Model>,
    pub grid: TimeGrid,
    pub y_ref: GridSignal,
    /// Reference input and its state trajectory, when the reference is
    /// generated from an input.
    pub reference_input: Option<(InputPair, Trajectory)>,
    pub start: InputPair,
    pub problem: TrackingProblem,
    pub gauss_newton: GaussNewtonConfig,
    pub direct: DirectGdConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(config_err(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", cfg.schema_version),
            ));
        }
        Ok(cfg)
    }

    /// Reads a config; relative reference paths are resolved against the
    /// directory of `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.reference {
            ReferenceConfig::InputFile { path, .. } | ReferenceConfig::OutputFile { path } if path.is_relative() => {
                *path = base.join(&*path);
            }
            _ => {}
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let ReferenceConfig::Synthetic { profile, .. } = &mut self.reference {
            profile.seed = seed;
        }
        self.verify.seed = seed;
        self
    }

    pub fn build(&self) -> Result<Experiment> {
        let model = self.model.build()?;
        let units = self.model.parameter_units();
        let dims = model.dims();
        let g = &self.grid;
        let grid = TimeGrid::with_step(g.t0, g.tf, g.dt).map_err(|e| config_err("grid", e))?;
        let substeps = self.solver.substeps;
        if substeps == 0 {
            return Err(config_err("solver.substeps", "must be positive"));
        }

        let reference_input = |u: GridSignal, p: &[f64]| -> Result<InputPair> {
            InputPair::new(u, vector("reference.p", p, dims.n_p, units)?)
        };
        let ref_input = match &self.reference {
            ReferenceConfig::Synthetic { profile, p } => {
                if dims.n_u != 1 {
                    return Err(config_err("reference", "a road profile needs a single control input"));
                }
                let u = road_profile(profile, &grid).map_err(|e| config_err("reference.profile", e))?;
                Some(reference_input(u, p)?)
            }
            ReferenceConfig::Zero { p } => Some(reference_input(GridSignal::zeros(grid, dims.n_u), p)?),
            ReferenceConfig::InputFile { path, p } => {
                let u = load_on_grid(path, &grid, dims.n_u)?;
                Some(reference_input(u, p)?)
            }
            ReferenceConfig::OutputFile { .. } => None,
        };
        let (y_ref, reference_input) = match (ref_input, &self.reference) {
            (Some(input), _) => {
                let x = input_to_state(model.as_ref(), &input, substeps)?;
                let y = crate::model::outputs_along(model.as_ref(), &input, &x);
                (y, Some((input, x)))
            }
            (None, ReferenceConfig::OutputFile { path }) => (load_on_grid(path, &grid, dims.n_y)?, None),
            (None, _) => unreachable!("only output files come without an input"),
        };

        let p_start = match (&self.start.p, &reference_input) {
            (Some(p), _) => vector("start.p", p, dims.n_p, units)?,
            (None, Some((input, _))) => input.p.clone(),
            (None, None) => return Err(config_err("start.p", "required when the reference is an output file")),
        };
        let u_start = match (self.start.u, &reference_input) {
            (StartControl::Zero, _) => GridSignal::zeros(grid, dims.n_u),
            (StartControl::Reference, Some((input, _))) => input.u.clone(),
            (StartControl::Reference, None) => {
                return Err(config_err("start.u", "no reference input is available"));
            }
        };
        let start = InputPair::new(u_start, p_start.clone())?;

        let w = &self.weights;
        let weights = Weights {
            q: w.q.build("weights.q", dims.n_y)?,
            terminal: w.terminal.build("weights.terminal", dims.n_y)?,
            alpha_u: w.alpha_u,
            alpha_p: w.alpha_p,
        };
        let bounds = match &self.bounds {
            BoundsConfig::None => BoxBounds::unbounded(dims.n_u, dims.n_p),
            BoundsConfig::RelativeParameter { fraction } => BoxBounds::relative_to_parameter(dims.n_u, &p_start, *fraction)
                .map_err(|e| config_err("bounds.fraction", e))?,
            BoundsConfig::Absolute { u_low, u_up, p_low, p_up } => {
                let side = |field: &str, v: &Option<Vec<f64>>, n: usize, inf: f64, units: ParameterUnits| match v {
                    Some(v) => vector(field, v, n, units),
                    None => Ok(DVector::from_element(n, inf)),
                };
                BoxBounds::new(
                    side("bounds.u_low", u_low, dims.n_u, f64::NEG_INFINITY, ParameterUnits::SI)?,
                    side("bounds.u_up", u_up, dims.n_u, f64::INFINITY, ParameterUnits::SI)?,
                    side("bounds.p_low", p_low, dims.n_p, f64::NEG_INFINITY, units)?,
                    side("bounds.p_up", p_up, dims.n_p, f64::INFINITY, units)?,
                )
                .map_err(|e| config_err("bounds", e))?
            }
        };
        let mut problem = TrackingProblem::new(model.clone(), y_ref.clone(), weights)
            .map_err(|e| config_err("weights", e))?
            .with_bounds(bounds)?
            .with_substeps(substeps)?;
        if self.solver.fix_parameter {
            problem = problem.with_fixed_parameter(p_start)?;
        }

        let s = &self.solver;
        let gauss_newton = GaussNewtonConfig {
            j_tol: s.j_tol,
            max_outer: s.max_outer,
            armijo_beta: s.armijo_beta,
            armijo_sigma: s.armijo_sigma,
            max_backtracks: s.max_backtracks,
            min_relative_progress: s.min_relative_progress,
            inner: match s.inner {
                InnerKind::Riccati => InnerSolver::Riccati,
                InnerKind::GradientDescent => InnerSolver::GradientDescent(s.gradient_descent),
            },
            dp0: s
                .dp0
                .as_ref()
                .map(|v| vector("solver.dp0", v, dims.n_p, units))
                .transpose()?,
        };
        gauss_newton.validate(&problem).map_err(|e| config_err("solver", e))?;
        let c = &self.compare;
        let direct = DirectGdConfig {
            j_tol: s.j_tol,
            max_iter: c.gd_iterations,
            armijo_beta: c.gd_armijo_beta,
            armijo_sigma: c.gd_armijo_sigma,
            ..DirectGdConfig::default()
        };
        if !(c.crossing_fraction > 0.0 && c.crossing_fraction < 1.0) {
            return Err(config_err("compare.crossing_fraction", "must lie in (0, 1)"));
        }
        Ok(Experiment {
            config: self.clone(),
            units,
            model,
            grid,
            y_ref,
            reference_input,
            start,
            problem,
            gauss_newton,
            direct,
        })
    }
}

fn load_on_grid(path: &Path, grid: &TimeGrid, dim: usize) -> Result<GridSignal> {
    if !path.exists() {
        return Err(config_err("reference.path", format!("{} does not exist", path.display())));
    }
    let s = GridSignal::load_csv(path)?;
    let data_err = |reason: String| Error::Data {
        path: path.display().to_string(),
        reason,
    };
    if s.dim() != dim {
        return Err(data_err(format!("expected {dim} columns, found {}", s.dim())));
    }
    if s.grid().n_steps() != grid.n_steps()
        || (s.grid().t0() - grid.t0()).abs() > 1e-9
        || (s.grid().tf() - grid.tf()).abs() > 1e-9
    {
        return Err(data_err("time column does not match the configured grid".into()));
    }
    GridSignal::new(*grid, s.values().clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_json() -> &'static str {
        r#"{
            "schema_version": 1,
            "model": {"kind": "linear", "a": [[-1.0]], "bu": [[1.0]], "c": [[1.0]]},
            "grid": {"t0": 0.0, "tf": 1.0, "dt": 0.05},
            "weights": {"q": 1.0, "terminal": 0.0, "alpha_u": 0.1, "alpha_p": 0.0},
            "reference": {"kind": "synthetic", "p": [0.0],
                "profile": {"seed": 3, "amplitude_m": [0.5, 1.0], "width_s": [0.2, 0.3], "gap_s": [0.0, 0.1]}},
            "solver": {"inner": "gradient_descent", "fix_parameter": true}
        }"#
    }

    #[test]
    fn parses_and_builds() {
        let cfg = ExperimentConfig::from_json(linear_json()).unwrap();
        let ex = cfg.build().unwrap();
        assert_eq!(ex.grid.n_steps(), 20);
        assert!(ex.y_ref.max_abs() > 0.0);
        assert!(ex.problem.p_fixed().is_some());
        assert_eq!(cfg.output.save_iterations, vec![1, 3, 5, 7]);
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = ExperimentConfig::from_json(linear_json()).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn field_errors_are_reported() {
        let bad = linear_json().replace("\"alpha_p\"", "\"alpha_q\"");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config(m)) => assert!(m.contains("alpha_q"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = linear_json().replace("\"dt\": 0.05", "\"dt\": 0.3");
        let err = ExperimentConfig::from_json(&bad).unwrap().build().err().unwrap();
        assert!(matches!(err, Error::Config(ref m) if m.starts_with("grid")), "{err:?}");
        let bad = linear_json().replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn riccati_with_zero_alpha_is_rejected() {
        let bad = linear_json()
            .replace("\"alpha_u\": 0.1", "\"alpha_u\": 0.0")
            .replace("gradient_descent", "riccati");
        let err = ExperimentConfig::from_json(&bad).unwrap().build().err().unwrap();
        assert!(matches!(err, Error::Config(ref m) if m.contains("alpha_u")), "{err:?}");
    }

    #[test]
    fn quarter_car_units_convert() {
        let q = ModelConfig::QuarterCar(QuarterCarConfig::default());
        assert_eq!(q.parameter_units().to_si(230.0), 230_000.0);
        let m = q.build().unwrap();
        assert_eq!(m.dims().n_x, 4);
    }
}
