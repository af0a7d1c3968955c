//! Linearization of the input-to-output map around an iterate.
//!
//! The sensitivity system is the model's RK4 scheme linearized at the
//! recorded stage states, so `S'` is the derivative of the discrete
//! input-to-output map. Its adjoint is the exact transpose of that scheme
//! composed with the trapezoid Riesz map, so the identity
//! `<S'du, dy> = <du, S'*dy>` holds to rounding error on the grid.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_dim, Error, Result};
use crate::grid::{l2_norm, GridMatrixFunction, GridSignal, TimeGrid, Trajectory};
use crate::model::{simulate, InputPair};
use crate::ode::{rk4_forward_staged, rk4_reverse, StageClock};
use crate::problem::TrackingProblem;

/// Time-varying linear system `dx' = A dx + B_u du + B_p dp`,
/// `dy = C dx + D_u du + D_p dp` with the residual `r = y_ref - y_k`.
#[derive(Debug, Clone)]
pub struct LinearizedModel {
    pub(crate) a: GridMatrixFunction,
    pub(crate) bu: GridMatrixFunction,
    pub(crate) bp: GridMatrixFunction,
    pub(crate) c: GridMatrixFunction,
    pub(crate) du: GridMatrixFunction,
    pub(crate) dp: GridMatrixFunction,
    pub(crate) r: GridSignal,
    pub(crate) u_k: GridSignal,
    pub(crate) p_k: DVector<f64>,
    pub(crate) x_k: Trajectory,
    pub(crate) clock: StageClock,
    /// `A`, `B_u`, `B_p` at every RK4 stage, indexed `4 * step + stage`.
    stages: [Vec<DMatrix<f64>>; 3],
}

fn stage_table(f: &GridMatrixFunction, clock: &StageClock) -> Vec<DMatrix<f64>> {
    (0..4 * clock.n_micro())
        .map(|q| {
            let (i, theta) = clock.half_locate(StageClock::stage_index(q / 4, q % 4));
            f.interpolate(i, theta)
        })
        .collect()
}

/// Input sensitivities of a scalar functional: raw (unweighted) per-node
/// control cotangents and the parameter cotangent.
pub(crate) struct Pullback {
    pub u: Vec<DVector<f64>>,
    pub p: DVector<f64>,
}

impl LinearizedModel {
    /// Assembles a linearized model from its coefficient functions.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        a: GridMatrixFunction,
        bu: GridMatrixFunction,
        bp: GridMatrixFunction,
        c: GridMatrixFunction,
        du: GridMatrixFunction,
        dp: GridMatrixFunction,
        r: GridSignal,
        u_k: GridSignal,
        p_k: DVector<f64>,
        x_k: Trajectory,
        substeps: usize,
    ) -> Result<Self> {
        let grid = *a.grid();
        let (n_x, n_x2) = a.shape();
        ensure_dim("A columns", n_x, n_x2)?;
        let n_u = bu.shape().1;
        let n_p = bp.shape().1;
        let n_y = c.shape().0;
        let shapes = [
            (bu.shape(), (n_x, n_u)),
            (bp.shape(), (n_x, n_p)),
            (c.shape(), (n_y, n_x)),
            (du.shape(), (n_y, n_u)),
            (dp.shape(), (n_y, n_p)),
        ];
        if shapes.iter().any(|(got, want)| got != want) {
            return Err(Error::InvalidParameter("inconsistent linearized model shapes".into()));
        }
        ensure_dim("residual dimension", n_y, r.dim())?;
        ensure_dim("control dimension", n_u, u_k.dim())?;
        ensure_dim("parameter dimension", n_p, p_k.len())?;
        ensure_dim("state dimension", n_x, x_k.dim())?;
        let grids = [bu.grid(), bp.grid(), c.grid(), du.grid(), dp.grid(), r.grid(), u_k.grid(), x_k.grid()];
        if grids.iter().any(|g| !g.same_as(&grid)) {
            return Err(Error::GridMismatch);
        }
        let clock = StageClock::new(grid, substeps)?;
        Ok(Self {
            stages: [stage_table(&a, &clock), stage_table(&bu, &clock), stage_table(&bp, &clock)],
            a,
            bu,
            bp,
            c,
            du,
            dp,
            r,
            u_k,
            p_k,
            x_k,
            clock,
        })
    }

    /// Constant-coefficient model with zero state trajectory, for tests and
    /// small oracle problems.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        grid: TimeGrid,
        a: DMatrix<f64>,
        bu: DMatrix<f64>,
        c: DMatrix<f64>,
        du: DMatrix<f64>,
        r: GridSignal,
        u_k: GridSignal,
        substeps: usize,
    ) -> Result<Self> {
        let n_x = a.nrows();
        let n_y = c.nrows();
        Self::from_parts(
            GridMatrixFunction::constant(grid, a),
            GridMatrixFunction::constant(grid, bu),
            GridMatrixFunction::constant(grid, DMatrix::zeros(n_x, 1)),
            GridMatrixFunction::constant(grid, c),
            GridMatrixFunction::constant(grid, du),
            GridMatrixFunction::constant(grid, DMatrix::zeros(n_y, 1)),
            r,
            u_k,
            DVector::zeros(1),
            GridSignal::zeros(grid, n_x),
            substeps,
        )
    }

    pub fn grid(&self) -> &TimeGrid {
        self.a.grid()
    }

    pub fn substeps(&self) -> usize {
        self.clock.substeps()
    }

    pub fn n_x(&self) -> usize {
        self.a.shape().0
    }

    pub fn n_u(&self) -> usize {
        self.bu.shape().1
    }

    pub fn n_p(&self) -> usize {
        self.bp.shape().1
    }

    pub fn n_y(&self) -> usize {
        self.c.shape().0
    }

    pub fn a(&self) -> &GridMatrixFunction {
        &self.a
    }

    pub fn bu(&self) -> &GridMatrixFunction {
        &self.bu
    }

    pub fn bp(&self) -> &GridMatrixFunction {
        &self.bp
    }

    pub fn c(&self) -> &GridMatrixFunction {
        &self.c
    }

    pub fn du(&self) -> &GridMatrixFunction {
        &self.du
    }

    pub fn dp(&self) -> &GridMatrixFunction {
        &self.dp
    }

    pub fn residual(&self) -> &GridSignal {
        &self.r
    }

    pub fn u_k(&self) -> &GridSignal {
        &self.u_k
    }

    pub fn p_k(&self) -> &DVector<f64> {
        &self.p_k
    }

    pub fn x_k(&self) -> &Trajectory {
        &self.x_k
    }

    fn check_du(&self, du: &GridSignal) -> Result<()> {
        if !du.grid().same_as(self.grid()) {
            return Err(Error::GridMismatch);
        }
        ensure_dim("control perturbation", self.n_u(), du.dim())
    }

    /// Discrete sensitivity: node values of `dy` for the perturbation `(du, dp)`.
    pub(crate) fn sensitivity(&self, du: &GridSignal, dp: &DVector<f64>) -> Result<GridSignal> {
        self.check_du(du)?;
        ensure_dim("parameter perturbation", self.n_p(), dp.len())?;
        let x0 = DVector::zeros(self.n_x());
        let clock = self.clock;
        let [a, bu, bp] = &self.stages;
        let dx = rk4_forward_staged(
            &clock,
            &x0,
            |s, stage, _t, x| {
                let q = 4 * s + stage;
                let (i, theta) = clock.half_locate(StageClock::stage_index(s, stage));
                &a[q] * x + &bu[q] * du.interpolate(i, theta) + &bp[q] * dp
            },
            None,
        )?;
        let rows: Vec<DVector<f64>> = (0..self.grid().n_nodes())
            .map(|k| self.c.at(k) * &dx[k] + self.du.at(k) * du.row(k) + self.dp.at(k) * dp)
            .collect();
        Ok(GridSignal::from_rows(*self.grid(), self.n_y(), &rows))
    }

    /// Transposed sensitivity: given `w_k = dL/d(dy_k)` at every node, returns
    /// `dL/d(du_k)` and `dL/d(dp)`.
    pub(crate) fn pullback(&self, w: &[DVector<f64>]) -> Pullback {
        let n = self.grid().n_steps();
        let mut bar_u: Vec<DVector<f64>> = (0..=n).map(|k| self.du.at(k).tr_mul(&w[k])).collect();
        let mut bar_p = DVector::zeros(self.n_p());
        for (k, wk) in w.iter().enumerate() {
            bar_p += self.dp.at(k).tr_mul(wk);
        }
        let clock = self.clock;
        let mut bar_p_dyn = DVector::zeros(self.n_p());
        let [a, bu, bp] = &self.stages;
        rk4_reverse(
            &clock,
            self.n_x(),
            |s, stage, v| a[4 * s + stage].tr_mul(v),
            |k| Some(self.c.at(k).tr_mul(&w[k])),
            |s, stage, bar| {
                let j = StageClock::stage_index(s, stage);
                let (i, theta) = clock.half_locate(j);
                let g = bu[4 * s + stage].tr_mul(bar);
                if theta == 1.0 {
                    bar_u[i + 1] += g;
                } else if theta == 0.0 {
                    bar_u[i] += g;
                } else {
                    bar_u[i] += &g * (1.0 - theta);
                    bar_u[i + 1] += g * theta;
                }
                bar_p_dyn += bp[4 * s + stage].tr_mul(bar);
            },
        );
        Pullback {
            u: bar_u,
            p: bar_p + bar_p_dyn,
        }
    }

    /// Divides raw control cotangents by the quadrature weights, giving the
    /// `L²` gradient representative.
    pub(crate) fn riesz(&self, raw: &[DVector<f64>]) -> GridSignal {
        let grid = *self.grid();
        let rows: Vec<DVector<f64>> = raw.iter().enumerate().map(|(k, v)| v / grid.weight(k)).collect();
        GridSignal::from_rows(grid, self.n_u(), &rows)
    }
}

/// Linearizes `prob` around `input`: simulates the state, evaluates all six
/// Jacobians at every node and those of `f` at every RK4 stage, and
/// forms `r = y_ref - y_k`.
pub fn linearize(prob: &TrackingProblem, input: &InputPair) -> Result<LinearizedModel> {
    prob.check_input(input)?;
    let model = prob.model();
    let sim = simulate(model, input, prob.substeps(), true)?;
    let grid = *prob.grid();
    let p = &input.p;
    let mut mats: [Vec<DMatrix<f64>>; 6] = Default::default();
    let mut y = Vec::with_capacity(grid.n_nodes());
    for k in 0..grid.n_nodes() {
        let t = grid.node(k);
        let x = sim.states.row(k);
        let u = input.u.row(k);
        mats[0].push(model.f_x(t, &x, &u, p));
        mats[1].push(model.f_u(t, &x, &u, p));
        mats[2].push(model.f_p(t, &x, &u, p));
        mats[3].push(model.h_x(t, &x, &u, p));
        mats[4].push(model.h_u(t, &x, &u, p));
        mats[5].push(model.h_p(t, &x, &u, p));
        y.push(model.h(t, &x, &u, p));
    }
    let y = GridSignal::from_rows(grid, model.dims().n_y, &y);
    let r = prob.y_ref().sub(&y)?;
    let clock = sim.clock;
    let mut stages: [Vec<DMatrix<f64>>; 3] = Default::default();
    for (q, x) in sim.stages.iter().enumerate() {
        let j = StageClock::stage_index(q / 4, q % 4);
        let (i, theta) = clock.half_locate(j);
        let (t, u) = (clock.half_time(j), input.u.interpolate(i, theta));
        stages[0].push(model.f_x(t, x, &u, p));
        stages[1].push(model.f_u(t, x, &u, p));
        stages[2].push(model.f_p(t, x, &u, p));
    }
    let [a, bu, bp, c, du, dp] = mats.map(|v| GridMatrixFunction::new(grid, v));
    let mut lin = LinearizedModel::from_parts(
        a?,
        bu?,
        bp?,
        c?,
        du?,
        dp?,
        r,
        input.u.clone(),
        input.p.clone(),
        sim.states,
        prob.substeps(),
    )?;
    lin.stages = stages;
    Ok(lin)
}

/// `S'(u_k, p_k)(du, dp)` on the grid.
pub fn sensitivity_apply(lin: &LinearizedModel, du: &GridSignal, dp: &DVector<f64>) -> Result<GridSignal> {
    lin.sensitivity(du, dp)
}

/// `S'*(dy)` for the control-only map, as an `L²` function on the grid.
pub fn adjoint_apply(lin: &LinearizedModel, dy: &GridSignal) -> Result<GridSignal> {
    if !dy.grid().same_as(lin.grid()) {
        return Err(Error::GridMismatch);
    }
    ensure_dim("output perturbation", lin.n_y(), dy.dim())?;
    let grid = lin.grid();
    let w: Vec<DVector<f64>> = (0..grid.n_nodes()).map(|k| dy.row(k) * grid.weight(k)).collect();
    Ok(lin.riesz(&lin.pullback(&w).u))
}

/// Residual of the normal equations
/// `[S'*S' + alpha I] du = -[S'*(y_k - y_ref) + alpha u_k]` at `du`, relative
/// to the norm of the right-hand side (absolute when that vanishes).
pub fn normal_equation_residual(lin: &LinearizedModel, du: &GridSignal, alpha_u: f64) -> Result<f64> {
    let zero_p = DVector::zeros(lin.n_p());
    let sdu = lin.sensitivity(du, &zero_p)?;
    let lhs = adjoint_apply(lin, &sdu)?;
    let rhs = adjoint_apply(lin, &lin.r.scaled(-1.0))?.axpy(alpha_u, &lin.u_k)?;
    let res = lhs.axpy(alpha_u, du)?.axpy(1.0, &rhs)?;
    let scale = l2_norm(&rhs);
    Ok(if scale > 0.0 { l2_norm(&res) / scale } else { l2_norm(&res) })
}
