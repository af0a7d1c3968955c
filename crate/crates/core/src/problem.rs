//! The tracking cost functional, box constraints and projection.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{ensure_dim, Error, Result};
use crate::grid::{l2_norm_sq, GridSignal, TimeGrid};
use crate::model::{input_to_output, outputs_along, simulate, InputPair, Model};
use crate::ode::DEFAULT_SUBSTEPS;

/// Componentwise bounds on controls and parameters. Entries may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub u_low: DVector<f64>,
    pub u_up: DVector<f64>,
    pub p_low: DVector<f64>,
    pub p_up: DVector<f64>,
}

impl BoxBounds {
    pub fn new(u_low: DVector<f64>, u_up: DVector<f64>, p_low: DVector<f64>, p_up: DVector<f64>) -> Result<Self> {
        ensure_dim("upper control bound", u_low.len(), u_up.len())?;
        ensure_dim("upper parameter bound", p_low.len(), p_up.len())?;
        let ordered = |lo: &DVector<f64>, up: &DVector<f64>| lo.iter().zip(up.iter()).all(|(l, u)| l <= u);
        if !ordered(&u_low, &u_up) || !ordered(&p_low, &p_up) {
            return Err(Error::InvalidParameter("lower bound exceeds upper bound".into()));
        }
        if u_low.iter().chain(u_up.iter()).chain(p_low.iter()).chain(p_up.iter()).any(|v| v.is_nan()) {
            return Err(Error::NonFinite("bounds"));
        }
        Ok(Self {
            u_low,
            u_up,
            p_low,
            p_up,
        })
    }

    pub fn unbounded(n_u: usize, n_p: usize) -> Self {
        Self {
            u_low: DVector::from_element(n_u, f64::NEG_INFINITY),
            u_up: DVector::from_element(n_u, f64::INFINITY),
            p_low: DVector::from_element(n_p, f64::NEG_INFINITY),
            p_up: DVector::from_element(n_p, f64::INFINITY),
        }
    }

    /// Parameter bounds `[(1 - frac) p0, (1 + frac) p0]`, controls unbounded.
    pub fn relative_to_parameter(n_u: usize, p0: &DVector<f64>, frac: f64) -> Result<Self> {
        let a = p0.map(|v| v * (1.0 - frac));
        let b = p0.map(|v| v * (1.0 + frac));
        let p_low = a.zip_map(&b, f64::min);
        let p_up = a.zip_map(&b, f64::max);
        Self::new(
            DVector::from_element(n_u, f64::NEG_INFINITY),
            DVector::from_element(n_u, f64::INFINITY),
            p_low,
            p_up,
        )
    }

    pub fn is_unbounded(&self) -> bool {
        let inf = |lo: &DVector<f64>, up: &DVector<f64>| {
            lo.iter().all(|v| *v == f64::NEG_INFINITY) && up.iter().all(|v| *v == f64::INFINITY)
        };
        inf(&self.u_low, &self.u_up) && inf(&self.p_low, &self.p_up)
    }

    pub fn contains(&self, input: &InputPair) -> bool {
        let u_ok = (0..input.u.grid().n_nodes()).all(|k| {
            let row = input.u.values().row(k);
            (0..row.len()).all(|i| row[i] >= self.u_low[i] && row[i] <= self.u_up[i])
        });
        let p_ok = (0..input.p.len()).all(|j| input.p[j] >= self.p_low[j] && input.p[j] <= self.p_up[j]);
        u_ok && p_ok
    }

    pub(crate) fn check_dims(&self, n_u: usize, n_p: usize) -> Result<()> {
        ensure_dim("control bounds", n_u, self.u_low.len())?;
        ensure_dim("parameter bounds", n_p, self.p_low.len())
    }
}

/// Componentwise clamping of `input` into `bounds`.
pub fn project(input: &InputPair, bounds: &BoxBounds) -> InputPair {
    let mut values = input.u.values().clone();
    for mut row in values.row_iter_mut() {
        for i in 0..row.len() {
            row[i] = row[i].clamp(bounds.u_low[i], bounds.u_up[i]);
        }
    }
    let p = DVector::from_iterator(
        input.p.len(),
        (0..input.p.len()).map(|j| input.p[j].clamp(bounds.p_low[j], bounds.p_up[j])),
    );
    InputPair {
        u: GridSignal::new(*input.u.grid(), values).expect("clamping preserves shape and finiteness"),
        p,
    }
}

/// Weights and regularization of the tracking functional.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub q: DMatrix<f64>,
    pub terminal: DMatrix<f64>,
    pub alpha_u: f64,
    pub alpha_p: f64,
}

impl Weights {
    /// Scalar weights for single-output systems.
    pub fn scalar(q: f64, terminal: f64, alpha_u: f64, alpha_p: f64) -> Self {
        Self {
            q: DMatrix::from_element(1, 1, q),
            terminal: DMatrix::from_element(1, 1, terminal),
            alpha_u,
            alpha_p,
        }
    }
}

/// Cost split into its data and regularization parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub total: f64,
    pub data_misfit: f64,
    pub terminal_misfit: f64,
    pub reg_u: f64,
    pub reg_p: f64,
}

impl CostBreakdown {
    pub fn regularization(&self) -> f64 {
        self.reg_u + self.reg_p
    }
}

fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidParameter(format!("{name} must be square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{name} has non-finite entries")));
    }
    let scale = m.norm().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).norm() > 1e-12 * scale {
        return Err(Error::InvalidParameter(format!("{name} must be symmetric")));
    }
    let min = m.clone().symmetric_eigen().eigenvalues.min();
    if min < -1e-12 * scale {
        return Err(Error::InvalidParameter(format!(
            "{name} must be positive semi-definite (smallest eigenvalue {min})"
        )));
    }
    Ok(())
}

/// Output tracking with regularization on a fixed grid.
#[derive(Clone)]
pub struct TrackingProblem {
    model: Arc<dyn Model>,
    y_ref: GridSignal,
    weights: Weights,
    bounds: BoxBounds,
    p_fixed: Option<DVector<f64>>,
    substeps: usize,
}

impl std::fmt::Debug for TrackingProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrackingProblem")
            .field("dims", &self.model.dims())
            .field("grid", self.grid())
            .field("weights", &self.weights)
            .field("bounds", &self.bounds)
            .field("p_fixed", &self.p_fixed)
            .finish()
    }
}

impl TrackingProblem {
    pub fn new(model: Arc<dyn Model>, y_ref: GridSignal, weights: Weights) -> Result<Self> {
        let dims = model.dims();
        dims.validate()?;
        ensure_dim("reference output", dims.n_y, y_ref.dim())?;
        ensure_dim("Q", dims.n_y, weights.q.nrows())?;
        ensure_dim("T", dims.n_y, weights.terminal.nrows())?;
        check_psd("Q", &weights.q)?;
        check_psd("T", &weights.terminal)?;
        if !(weights.alpha_u >= 0.0 && weights.alpha_p >= 0.0) {
            return Err(Error::InvalidParameter("regularization weights must be non-negative".into()));
        }
        Ok(Self {
            bounds: BoxBounds::unbounded(dims.n_u, dims.n_p),
            model,
            y_ref,
            weights,
            p_fixed: None,
            substeps: DEFAULT_SUBSTEPS,
        })
    }

    pub fn with_bounds(mut self, bounds: BoxBounds) -> Result<Self> {
        let dims = self.model.dims();
        bounds.check_dims(dims.n_u, dims.n_p)?;
        self.bounds = bounds;
        Ok(self)
    }

    /// Restricts the problem to the controls, with the parameter held at `p`.
    pub fn with_fixed_parameter(mut self, p: DVector<f64>) -> Result<Self> {
        ensure_dim("fixed parameter", self.model.dims().n_p, p.len())?;
        self.p_fixed = Some(p);
        Ok(self)
    }

    pub fn with_substeps(mut self, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::InvalidParameter("substeps must be positive".into()));
        }
        self.substeps = substeps;
        Ok(self)
    }

    /// The same problem for another model of identical dimensions.
    pub fn with_model(&self, model: Arc<dyn Model>) -> Result<Self> {
        if model.dims() != self.model.dims() {
            return Err(Error::InvalidParameter("replacement model has different dimensions".into()));
        }
        Ok(Self {
            model,
            ..self.clone()
        })
    }

    pub fn model(&self) -> &dyn Model {
        self.model.as_ref()
    }

    pub fn grid(&self) -> &TimeGrid {
        self.y_ref.grid()
    }

    pub fn y_ref(&self) -> &GridSignal {
        &self.y_ref
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    pub fn p_fixed(&self) -> Option<&DVector<f64>> {
        self.p_fixed.as_ref()
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Puts `input` into the form the solvers work with: the fixed parameter
    /// (if any) substituted and the result projected onto the bounds.
    pub fn admissible(&self, input: &InputPair) -> Result<InputPair> {
        self.check_input(input)?;
        let mut x = input.clone();
        if let Some(p) = &self.p_fixed {
            x.p = p.clone();
        }
        let mut x = project(&x, &self.bounds);
        if let Some(p) = &self.p_fixed {
            x.p = p.clone();
        }
        Ok(x)
    }

    pub(crate) fn check_input(&self, input: &InputPair) -> Result<()> {
        input.check_dims(&self.model.dims())?;
        if !input.u.grid().same_as(self.grid()) {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    pub fn output(&self, input: &InputPair) -> Result<GridSignal> {
        self.check_input(input)?;
        input_to_output(self.model(), input, self.substeps)
    }

    pub fn evaluate_cost(&self, input: &InputPair) -> Result<CostBreakdown> {
        let y = self.output(input)?;
        self.cost_of_output(&y, input)
    }

    /// Cost of `input` given its already simulated output `y`.
    pub fn cost_of_output(&self, y: &GridSignal, input: &InputPair) -> Result<CostBreakdown> {
        let e = y.sub(&self.y_ref)?;
        let grid = self.grid();
        let q = &self.weights.q;
        let data_misfit = 0.5
            * (0..grid.n_nodes())
                .map(|k| {
                    let ek = e.row(k);
                    grid.weight(k) * ek.dot(&(q * &ek))
                })
                .sum::<f64>();
        let e_n = e.row(grid.n_steps());
        let terminal_misfit = 0.5 * e_n.dot(&(&self.weights.terminal * &e_n));
        let reg_u = 0.5 * self.weights.alpha_u * l2_norm_sq(&input.u);
        let reg_p = if self.p_fixed.is_some() {
            0.0
        } else {
            0.5 * self.weights.alpha_p * input.p.norm_squared()
        };
        let total = data_misfit + terminal_misfit + reg_u + reg_p;
        if !total.is_finite() {
            return Err(Error::NonFinite("cost"));
        }
        Ok(CostBreakdown {
            total,
            data_misfit,
            terminal_misfit,
            reg_u,
            reg_p,
        })
    }

}

/// Reference output obtained by simulating `model` under `reference` inputs.
pub fn generate_reference(model: &dyn Model, reference: &InputPair, substeps: usize) -> Result<GridSignal> {
    let sim = simulate(model, reference, substeps, false)?;
    Ok(outputs_along(model, reference, &sim.states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearModel, QuarterCar, QuarterCarParams};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    /// y = u through a dummy one-dimensional state.
    fn identity_output_model() -> LinearModel {
        LinearModel::without_parameters(
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn constant_reference_cost() {
        let g = TimeGrid::new(0.0, 10.0, 1000).unwrap();
        let prob = TrackingProblem::new(
            Arc::new(identity_output_model()),
            GridSignal::constant(g, &[1.0]),
            Weights::scalar(1.0, 0.0, 0.0, 0.0),
        )
        .unwrap();
        let c = prob.evaluate_cost(&InputPair::zero_control(g, 1, v(&[0.0]))).unwrap();
        assert!((c.total - 5.0).abs() < 1e-12);
        assert_eq!(c.reg_u, 0.0);
    }

    #[test]
    fn self_generated_reference_has_zero_cost() {
        let car: Arc<dyn Model> = Arc::new(QuarterCar::new(QuarterCarParams::default()).unwrap());
        let g = TimeGrid::new(0.0, 2.0, 200).unwrap();
        let u = GridSignal::from_fn(g, 1, |t| v(&[0.02 * (3.0 * t).sin()])).unwrap();
        let input = InputPair::new(u, v(&[230_000.0])).unwrap();
        let y_ref = generate_reference(car.as_ref(), &input, 4).unwrap();
        assert!(y_ref.max_abs() > 0.0);
        let prob = TrackingProblem::new(car, y_ref, Weights::scalar(0.1, 0.7, 0.0, 0.0)).unwrap();
        let c = prob.evaluate_cost(&input).unwrap();
        assert!(c.total.abs() < 1e-10);
    }

    #[test]
    fn decomposition_sums_to_total() {
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let y_ref = GridSignal::from_fn(g, 1, |t| v(&[t * t])).unwrap();
        let prob = TrackingProblem::new(Arc::new(identity_output_model()), y_ref, Weights::scalar(2.0, 3.0, 0.5, 0.25))
            .unwrap();
        let u = GridSignal::from_fn(g, 1, |t| v(&[t.cos()])).unwrap();
        let c = prob.evaluate_cost(&InputPair::new(u, v(&[2.0])).unwrap()).unwrap();
        let sum = c.data_misfit + c.terminal_misfit + c.reg_u + c.reg_p;
        assert!((c.total - sum).abs() <= 1e-10 * c.total);
        assert!((c.reg_p - 0.5).abs() < 1e-15);
        let e = 1.0f64.cos() - 1.0;
        assert!((c.terminal_misfit - 1.5 * e * e).abs() < 1e-14);
    }

    #[test]
    fn fixed_parameter_drops_its_regularization() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let prob = TrackingProblem::new(
            Arc::new(identity_output_model()),
            GridSignal::zeros(g, 1),
            Weights::scalar(1.0, 0.0, 1.0, 1.0),
        )
        .unwrap()
        .with_fixed_parameter(v(&[3.0]))
        .unwrap();
        let c = prob.evaluate_cost(&InputPair::zero_control(g, 1, v(&[3.0]))).unwrap();
        assert_eq!(c.total, 0.0);
    }

    #[test]
    fn rejects_indefinite_weights() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let bad = Weights::scalar(-1.0, 0.0, 1.0, 1.0);
        assert!(TrackingProblem::new(Arc::new(identity_output_model()), GridSignal::zeros(g, 1), bad).is_err());
        let neg_alpha = Weights::scalar(1.0, 0.0, -1.0, 1.0);
        assert!(TrackingProblem::new(Arc::new(identity_output_model()), GridSignal::zeros(g, 1), neg_alpha).is_err());
    }

    #[test]
    fn projection_clamps() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let b = BoxBounds::new(v(&[-1.0]), v(&[1.5]), v(&[195.5]), v(&[264.5])).unwrap();
        let x = InputPair::new(GridSignal::constant(g, &[2.0]), v(&[300.0])).unwrap();
        let px = project(&x, &b);
        assert!(px.u.values().iter().all(|&u| u == 1.5));
        assert_eq!(px.p[0], 264.5);
        assert!(b.contains(&px));
        assert_eq!(project(&px, &b), px);
    }

    #[test]
    fn relative_bounds() {
        let b = BoxBounds::relative_to_parameter(1, &v(&[230.0]), 0.15).unwrap();
        assert!((b.p_low[0] - 195.5).abs() < 1e-12);
        assert!((b.p_up[0] - 264.5).abs() < 1e-12);
        assert!(!b.is_unbounded());
        assert!(BoxBounds::unbounded(1, 1).is_unbounded());
        assert!(BoxBounds::new(v(&[1.0]), v(&[0.0]), v(&[0.0]), v(&[0.0])).is_err());
    }

    #[test]
    fn zero_road_gives_zero_reference() {
        let car = QuarterCar::new(QuarterCarParams::default()).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let y = generate_reference(&car, &InputPair::zero_control(g, 1, v(&[230_000.0])), 4).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }
}
