//! Dynamical systems `x' = f(t, x, u, p)`, `y = h(t, x, u, p)` together with
//! their Jacobians, and the input-to-state / input-to-output maps.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::grid::{GridSignal, TimeGrid, Trajectory};
use crate::ode::{rk4_forward, StageClock};

/// State, control, parameter and output dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_p: usize,
    pub n_y: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_u == 0 || self.n_y == 0 {
            return Err(Error::InvalidParameter(
                "n_x, n_u and n_y must be positive".into(),
            ));
        }
        if self.n_y > self.n_x {
            return Err(Error::InvalidParameter(format!(
                "output dimension {} exceeds state dimension {}",
                self.n_y, self.n_x
            )));
        }
        Ok(())
    }
}

/// A controlled dynamical system with outputs.
///
/// Only `f` and `h` are required; every Jacobian defaults to central finite
/// differences, so models that come from an external tool only need to
/// provide evaluations.
pub trait Model: Send + Sync {
    fn dims(&self) -> Dims;

    fn initial_state(&self) -> DVector<f64>;

    fn f(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64>;

    fn h(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64>;

    fn f_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        central_difference(x, |xs| self.f(t, xs, u, p))
    }

    fn f_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        central_difference(u, |us| self.f(t, x, us, p))
    }

    fn f_p(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        central_difference(p, |ps| self.f(t, x, u, ps))
    }

    fn h_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        central_difference(x, |xs| self.h(t, xs, u, p))
    }

    fn h_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        central_difference(u, |us| self.h(t, x, us, p))
    }

    fn h_p(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        central_difference(p, |ps| self.h(t, x, u, ps))
    }
}

impl<M: Model + ?Sized> Model for Arc<M> {
    fn dims(&self) -> Dims {
        (**self).dims()
    }
    fn initial_state(&self) -> DVector<f64> {
        (**self).initial_state()
    }
    fn f(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        (**self).f(t, x, u, p)
    }
    fn h(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        (**self).h(t, x, u, p)
    }
    fn f_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        (**self).f_x(t, x, u, p)
    }
    fn f_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        (**self).f_u(t, x, u, p)
    }
    fn f_p(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        (**self).f_p(t, x, u, p)
    }
    fn h_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        (**self).h_x(t, x, u, p)
    }
    fn h_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        (**self).h_u(t, x, u, p)
    }
    fn h_p(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        (**self).h_p(t, x, u, p)
    }
}

/// Central differences with per-component step `1e-6 max(1, |z_i|)`.
pub fn central_difference<F>(z: &DVector<f64>, mut g: F) -> DMatrix<f64>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let base = g(z);
    let mut jac = DMatrix::zeros(base.len(), z.len());
    let mut probe = z.clone();
    for i in 0..z.len() {
        let step = 1e-6 * z[i].abs().max(1.0);
        probe[i] = z[i] + step;
        let plus = g(&probe);
        probe[i] = z[i] - step;
        let minus = g(&probe);
        probe[i] = z[i];
        jac.set_column(i, &((plus - minus) / (2.0 * step)));
    }
    jac
}

/// Decision variable: a control signal and a parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPair {
    pub u: GridSignal,
    pub p: DVector<f64>,
}

impl InputPair {
    pub fn new(u: GridSignal, p: DVector<f64>) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(Self { u, p })
    }

    pub fn zero_control(grid: TimeGrid, n_u: usize, p: DVector<f64>) -> Self {
        Self {
            u: GridSignal::zeros(grid, n_u),
            p,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        self.u.grid()
    }

    pub(crate) fn check_dims(&self, dims: &Dims) -> Result<()> {
        ensure_dim("control dimension", dims.n_u, self.u.dim())?;
        ensure_dim("parameter dimension", dims.n_p, self.p.len())
    }
}

/// Forward simulation of `x' = f(t, x, u(t), p)`, `x(t0) = x0`.
pub fn input_to_state(model: &dyn Model, input: &InputPair, substeps: usize) -> Result<Trajectory> {
    Ok(simulate(model, input, substeps, false)?.states)
}

/// Pointwise output `y(t_k) = h(t_k, x(t_k), u(t_k), p)` along the simulated state.
pub fn input_to_output(model: &dyn Model, input: &InputPair, substeps: usize) -> Result<GridSignal> {
    let sim = simulate(model, input, substeps, false)?;
    Ok(outputs_along(model, input, &sim.states))
}

pub(crate) fn outputs_along(model: &dyn Model, input: &InputPair, states: &Trajectory) -> GridSignal {
    let n_y = model.dims().n_y;
    states.map_rows(n_y, |k, x| model.h(states.grid().node(k), &x, &input.u.row(k), &input.p))
}

/// Node states plus, optionally, the four RK4 stage states of every step.
pub(crate) struct Simulation {
    pub states: Trajectory,
    pub stages: Vec<DVector<f64>>,
    pub clock: StageClock,
}

pub(crate) fn simulate(
    model: &dyn Model,
    input: &InputPair,
    substeps: usize,
    record_stages: bool,
) -> Result<Simulation> {
    let dims = model.dims();
    input.check_dims(&dims)?;
    let x0 = model.initial_state();
    ensure_dim("initial state", dims.n_x, x0.len())?;
    let clock = StageClock::new(*input.grid(), substeps)?;
    let mut stages = Vec::new();
    let nodes = rk4_forward(
        &clock,
        &x0,
        |j, t, x| {
            let (interval, theta) = clock.half_locate(j);
            model.f(t, x, &input.u.interpolate(interval, theta), &input.p)
        },
        record_stages.then_some(&mut stages),
    )?;
    Ok(Simulation {
        states: GridSignal::from_rows(*input.grid(), dims.n_x, &nodes),
        stages,
        clock,
    })
}

/// Physical constants of the quarter-car model in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuarterCarParams {
    /// Upper (body) mass [kg].
    pub m1: f64,
    /// Lower (wheel) mass [kg].
    pub m2: f64,
    /// Tyre stiffness [N/m].
    pub k2: f64,
    /// Suspension damping [N s/m].
    pub d1: f64,
    /// Cubic stiffness coefficient of the suspension spring.
    pub c: f64,
}

impl QuarterCarParams {
    /// Builds parameters from values quoted in kN-based units.
    pub fn from_kilonewton_units(m1: f64, m2: f64, k2_kn_per_m: f64, d1_kn_s_per_m: f64, c: f64) -> Result<Self> {
        let params = Self {
            m1,
            m2,
            k2: k2_kn_per_m * 1e3,
            d1: d1_kn_s_per_m * 1e3,
            c,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.m1, self.m2, self.k2, self.d1, self.c];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("quarter-car parameters"));
        }
        if self.m1 <= 0.0 || self.m2 <= 0.0 || self.k2 <= 0.0 {
            return Err(Error::InvalidParameter("m1, m2 and k2 must be positive".into()));
        }
        if self.d1 < 0.0 || self.c < 0.0 {
            return Err(Error::InvalidParameter("d1 and c must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for QuarterCarParams {
    fn default() -> Self {
        Self {
            m1: 3600.0,
            m2: 380.0,
            k2: 1.0e6,
            d1: 3.4e4,
            c: 40.0,
        }
    }
}

/// Display units of a model parameter vector: `display = si / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterUnits {
    pub scale: f64,
    /// Column-name suffix such as `_kN_per_m`; empty for SI.
    pub suffix: &'static str,
}

impl ParameterUnits {
    pub const SI: Self = Self { scale: 1.0, suffix: "" };
    pub const KILONEWTON_PER_METRE: Self = Self {
        scale: 1e3,
        suffix: "_kN_per_m",
    };

    pub fn display(&self, si: f64) -> f64 {
        si / self.scale
    }

    pub fn to_si(&self, display: f64) -> f64 {
        display * self.scale
    }
}

/// Reference suspension stiffness `p_ref = 230 kN/m` in N/m.
pub const QUARTER_CAR_P_REF: f64 = 230_000.0;

/// Two-mass quarter car driven by the road profile `u`, with unknown
/// suspension stiffness `p` and body acceleration as output.
///
/// States: body and wheel displacement, body and wheel velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarterCar {
    params: QuarterCarParams,
}

impl QuarterCar {
    pub fn new(params: QuarterCarParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &QuarterCarParams {
        &self.params
    }

    /// Suspension force per unit stiffness and its derivative in the deflection.
    fn spring(&self, x: &DVector<f64>) -> (f64, f64) {
        let z = x[0] - x[1];
        (z + self.params.c * z * z * z, 1.0 + 3.0 * self.params.c * z * z)
    }

    fn body_accel(&self, x: &DVector<f64>, p: f64) -> f64 {
        let (s, _) = self.spring(x);
        let q = &self.params;
        -(p / q.m1) * s - (q.d1 / q.m1) * (x[2] - x[3])
    }
}

impl Model for QuarterCar {
    fn dims(&self) -> Dims {
        Dims {
            n_x: 4,
            n_u: 1,
            n_p: 1,
            n_y: 1,
        }
    }

    fn initial_state(&self) -> DVector<f64> {
        DVector::zeros(4)
    }

    fn f(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let q = &self.params;
        let (s, _) = self.spring(x);
        let v = x[2] - x[3];
        DVector::from_vec(vec![
            x[2],
            x[3],
            self.body_accel(x, p[0]),
            (p[0] / q.m2) * s + (q.d1 / q.m2) * v - (q.k2 / q.m2) * (x[1] - u[0]),
        ])
    }

    fn h(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.body_accel(x, p[0]))
    }

    fn f_x(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        let q = &self.params;
        let (_, ds) = self.spring(x);
        let (a1, b1) = (p[0] / q.m1 * ds, q.d1 / q.m1);
        let (a2, b2) = (p[0] / q.m2 * ds, q.d1 / q.m2);
        DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                -a1, a1, -b1, b1, //
                a2, -a2 - q.k2 / q.m2, b2, -b2,
            ],
        )
    }

    fn f_u(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>, _p: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 0.0, self.params.k2 / self.params.m2])
    }

    fn f_p(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>, _p: &DVector<f64>) -> DMatrix<f64> {
        let (s, _) = self.spring(x);
        DMatrix::from_column_slice(4, 1, &[0.0, 0.0, -s / self.params.m1, s / self.params.m2])
    }

    fn h_x(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        let q = &self.params;
        let (_, ds) = self.spring(x);
        let (a1, b1) = (p[0] / q.m1 * ds, q.d1 / q.m1);
        DMatrix::from_row_slice(1, 4, &[-a1, a1, -b1, b1])
    }

    fn h_u(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>, _p: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn h_p(&self, _t: f64, x: &DVector<f64>, _u: &DVector<f64>, _p: &DVector<f64>) -> DMatrix<f64> {
        let (s, _) = self.spring(x);
        DMatrix::from_element(1, 1, -s / self.params.m1)
    }
}

/// Time-invariant linear system
/// `x' = A x + B_u u + B_p p`, `y = C x + D_u u + D_p p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub bu: DMatrix<f64>,
    pub bp: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub du: DMatrix<f64>,
    pub dp: DMatrix<f64>,
    pub x0: DVector<f64>,
}

impl LinearModel {
    pub fn new(
        a: DMatrix<f64>,
        bu: DMatrix<f64>,
        bp: DMatrix<f64>,
        c: DMatrix<f64>,
        du: DMatrix<f64>,
        dp: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let n_x = a.nrows();
        let n_u = bu.ncols();
        let n_p = bp.ncols();
        let n_y = c.nrows();
        let shape_ok = a.is_square()
            && bu.nrows() == n_x
            && bp.nrows() == n_x
            && c.ncols() == n_x
            && du.shape() == (n_y, n_u)
            && dp.shape() == (n_y, n_p)
            && x0.len() == n_x;
        if !shape_ok {
            return Err(Error::InvalidParameter("inconsistent linear model matrix shapes".into()));
        }
        let model = Self {
            a,
            bu,
            bp,
            c,
            du,
            dp,
            x0,
        };
        model.dims().validate()?;
        Ok(model)
    }

    /// A model without parameter influence (`n_p = 1`, zero `B_p`, `D_p`).
    pub fn without_parameters(a: DMatrix<f64>, bu: DMatrix<f64>, c: DMatrix<f64>, du: DMatrix<f64>) -> Result<Self> {
        let n_x = a.nrows();
        let n_y = c.nrows();
        Self::new(
            a,
            bu,
            DMatrix::zeros(n_x, 1),
            c,
            du,
            DMatrix::zeros(n_y, 1),
            DVector::zeros(n_x),
        )
    }
}

impl Model for LinearModel {
    fn dims(&self) -> Dims {
        Dims {
            n_x: self.a.nrows(),
            n_u: self.bu.ncols(),
            n_p: self.bp.ncols(),
            n_y: self.c.nrows(),
        }
    }

    fn initial_state(&self) -> DVector<f64> {
        self.x0.clone()
    }

    fn f(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.bu * u + &self.bp * p
    }

    fn h(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.du * u + &self.dp * p
    }

    fn f_x(&self, _: f64, _: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn f_u(&self, _: f64, _: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
        self.bu.clone()
    }

    fn f_p(&self, _: f64, _: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
        self.bp.clone()
    }

    fn h_x(&self, _: f64, _: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
        self.c.clone()
    }

    fn h_u(&self, _: f64, _: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
        self.du.clone()
    }

    fn h_p(&self, _: f64, _: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
        self.dp.clone()
    }
}

type VectorField = dyn Fn(f64, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;

/// A model given only through evaluations of `f` and `h`; all Jacobians are
/// central finite differences.
pub struct FiniteDifferenceModel {
    dims: Dims,
    x0: DVector<f64>,
    f: Box<VectorField>,
    h: Box<VectorField>,
}

impl std::fmt::Debug for FiniteDifferenceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FiniteDifferenceModel")
            .field("dims", &self.dims)
            .finish_non_exhaustive()
    }
}

/// Wraps right-hand side and output evaluations into a [`Model`] whose
/// Jacobians are computed by central differences.
pub fn finite_difference_jacobians<F, H>(f: F, h: H, dims: Dims, x0: DVector<f64>) -> Result<FiniteDifferenceModel>
where
    F: Fn(f64, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    H: Fn(f64, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
{
    dims.validate()?;
    ensure_dim("initial state", dims.n_x, x0.len())?;
    Ok(FiniteDifferenceModel {
        dims,
        x0,
        f: Box::new(f),
        h: Box::new(h),
    })
}

impl Model for FiniteDifferenceModel {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn initial_state(&self) -> DVector<f64> {
        self.x0.clone()
    }

    fn f(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, x, u, p)
    }

    fn h(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        (self.h)(t, x, u, p)
    }
}

/// Wraps a model and adds `offset` to every entry of `f_x`. Used to check that
/// Jacobian verification catches a broken analytic derivative.
#[derive(Debug, Clone)]
pub struct PerturbedJacobian<M> {
    pub inner: M,
    pub offset: f64,
}

impl<M: Model> Model for PerturbedJacobian<M> {
    fn dims(&self) -> Dims {
        self.inner.dims()
    }
    fn initial_state(&self) -> DVector<f64> {
        self.inner.initial_state()
    }
    fn f(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        self.inner.f(t, x, u, p)
    }
    fn h(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        self.inner.h(t, x, u, p)
    }
    fn f_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        self.inner.f_x(t, x, u, p).add_scalar(self.offset)
    }
    fn f_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        self.inner.f_u(t, x, u, p)
    }
    fn f_p(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        self.inner.f_p(t, x, u, p)
    }
    fn h_x(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        self.inner.h_x(t, x, u, p)
    }
    fn h_u(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        self.inner.h_u(t, x, u, p)
    }
    fn h_p(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        self.inner.h_p(t, x, u, p)
    }
}

/// A point at which model derivatives are probed.
#[derive(Debug, Clone)]
pub struct ProbePoint {
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub p: DVector<f64>,
}

/// Largest relative discrepancy between a model's Jacobians and central
/// differences of its `f` and `h`.
#[derive(Debug, Clone, Serialize)]
pub struct JacobianCheck {
    pub max_relative_error: f64,
    pub worst_jacobian: &'static str,
}

fn relative_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

pub fn check_jacobians(model: &dyn Model, probes: &[ProbePoint]) -> JacobianCheck {
    let mut worst = JacobianCheck {
        max_relative_error: 0.0,
        worst_jacobian: "none",
    };
    for pt in probes {
        let (t, x, u, p) = (pt.t, &pt.x, &pt.u, &pt.p);
        let pairs: [(&'static str, DMatrix<f64>, DMatrix<f64>); 6] = [
            ("f_x", model.f_x(t, x, u, p), central_difference(x, |z| model.f(t, z, u, p))),
            ("f_u", model.f_u(t, x, u, p), central_difference(u, |z| model.f(t, x, z, p))),
            ("f_p", model.f_p(t, x, u, p), central_difference(p, |z| model.f(t, x, u, z))),
            ("h_x", model.h_x(t, x, u, p), central_difference(x, |z| model.h(t, z, u, p))),
            ("h_u", model.h_u(t, x, u, p), central_difference(u, |z| model.h(t, x, z, p))),
            ("h_p", model.h_p(t, x, u, p), central_difference(p, |z| model.h(t, x, u, z))),
        ];
        for (name, analytic, fd) in pairs {
            let gap = relative_gap(&analytic, &fd);
            if gap > worst.max_relative_error || gap.is_nan() {
                worst = JacobianCheck {
                    max_relative_error: gap,
                    worst_jacobian: name,
                };
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn quarter_car_equilibrium() {
        let car = QuarterCar::new(QuarterCarParams::default()).unwrap();
        for p in [1.0, QUARTER_CAR_P_REF, 5e5] {
            let f = car.f(0.0, &DVector::zeros(4), &v(&[0.0]), &v(&[p]));
            assert_eq!(f, DVector::zeros(4));
            assert_eq!(car.h(0.0, &DVector::zeros(4), &v(&[0.0]), &v(&[p]))[0], 0.0);
        }
    }

    #[test]
    fn quarter_car_units() {
        let p = QuarterCarParams::from_kilonewton_units(3600.0, 380.0, 1000.0, 34.0, 40.0).unwrap();
        assert_eq!(p.k2, 1.0e6);
        assert_eq!(p.d1, 3.4e4);
        assert_eq!(p, QuarterCarParams::default());
        assert!(QuarterCarParams::from_kilonewton_units(-1.0, 380.0, 1000.0, 34.0, 40.0).is_err());
        assert!(QuarterCarParams::from_kilonewton_units(3600.0, 380.0, 1000.0, -1.0, 40.0).is_err());
    }

    #[test]
    fn output_is_independent_of_road() {
        let car = QuarterCar::new(QuarterCarParams::default()).unwrap();
        let x = v(&[0.01, -0.02, 0.1, 0.3]);
        let hu = car.h_u(1.0, &x, &v(&[0.04]), &v(&[2.3e5]));
        assert_eq!(hu, DMatrix::zeros(1, 1));
    }

    #[test]
    fn body_stiffness_entry_at_origin() {
        let car = QuarterCar::new(QuarterCarParams::default()).unwrap();
        let a = car.f_x(0.0, &DVector::zeros(4), &v(&[0.0]), &v(&[QUARTER_CAR_P_REF]));
        assert!((a[(2, 0)] + 230_000.0 / 3600.0).abs() < 1e-12);
    }

    #[test]
    fn linear_model_difference_jacobians_are_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.5, -3.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, -0.5]);
        let f = move |_t: f64, x: &DVector<f64>, u: &DVector<f64>, _p: &DVector<f64>| &a * x + &b * u;
        let h = |_t: f64, x: &DVector<f64>, _u: &DVector<f64>, _p: &DVector<f64>| x.rows(0, 1).into_owned();
        let dims = Dims {
            n_x: 2,
            n_u: 1,
            n_p: 1,
            n_y: 1,
        };
        let m = finite_difference_jacobians(f, h, dims, DVector::zeros(2)).unwrap();
        let x = v(&[0.3, -2.0]);
        let fx = m.f_x(0.0, &x, &v(&[1.0]), &v(&[0.0]));
        let fu = m.f_u(0.0, &x, &v(&[1.0]), &v(&[0.0]));
        assert!((fx - DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.5, -3.0])).amax() < 1e-8);
        assert!((fu - DMatrix::from_row_slice(2, 1, &[1.0, -0.5])).amax() < 1e-8);
    }

    #[test]
    fn constant_field_has_zero_jacobians() {
        let dims = Dims {
            n_x: 2,
            n_u: 1,
            n_p: 1,
            n_y: 1,
        };
        let m = finite_difference_jacobians(
            |_, _, _, _| v(&[1.0, 2.0]),
            |_, _, _, _| v(&[3.0]),
            dims,
            DVector::zeros(2),
        )
        .unwrap();
        let (x, u, p) = (v(&[0.5, 0.1]), v(&[2.0]), v(&[7.0]));
        assert_eq!(m.f_x(0.0, &x, &u, &p), DMatrix::zeros(2, 2));
        assert_eq!(m.h_p(0.0, &x, &u, &p), DMatrix::zeros(1, 1));
    }

    #[test]
    fn dims_require_fewer_outputs_than_states() {
        let d = Dims {
            n_x: 1,
            n_u: 1,
            n_p: 0,
            n_y: 2,
        };
        assert!(d.validate().is_err());
    }

    #[test]
    fn linear_first_order_response() {
        let m = LinearModel::without_parameters(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let g = TimeGrid::new(0.0, 3.0, 300).unwrap();
        let input = InputPair::new(GridSignal::constant(g, &[1.0]), v(&[0.0])).unwrap();
        let x = input_to_state(&m, &input, 4).unwrap();
        for k in 0..g.n_nodes() {
            let t = g.node(k);
            assert!((x.row(k)[0] - (1.0 - (-t).exp())).abs() < 1e-6);
        }
        let y = input_to_output(&m, &input, 4).unwrap();
        assert_eq!(y.values(), x.values());
    }
}
