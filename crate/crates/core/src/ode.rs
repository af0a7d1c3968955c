//! Fixed-step classical Runge–Kutta integration aligned with a [`TimeGrid`].
//!
//! Every grid interval is split into `substeps` RK4 steps. RK4 stage times
//! fall on the half-step lattice `t0 + j h/2`, which is indexed explicitly so
//! that forward sweeps, reverse (transposed) sweeps and precomputed
//! coefficient tables all agree on where a stage lives.
//!
//! Backward problems are solved by time reversal `s = t0 + tf - t` with the
//! same forward code path.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{GridMatrixFunction, GridSignal, TimeGrid, Trajectory};

pub const DEFAULT_SUBSTEPS: usize = 4;

/// RK4 step geometry for a grid with a fixed number of substeps per interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageClock {
    grid: TimeGrid,
    substeps: usize,
}

impl StageClock {
    pub fn new(grid: TimeGrid, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::InvalidParameter("substeps must be at least 1".into()));
        }
        Ok(Self { grid, substeps })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Step size of a single RK4 step.
    pub fn h(&self) -> f64 {
        self.grid.dt() / self.substeps as f64
    }

    /// Total number of RK4 steps over the grid.
    pub fn n_micro(&self) -> usize {
        self.grid.n_steps() * self.substeps
    }

    /// Number of points on the half-step lattice.
    pub fn n_half(&self) -> usize {
        2 * self.n_micro() + 1
    }

    /// Lattice index of stage `stage` (0..4) of RK4 step `step`.
    pub fn stage_index(step: usize, stage: usize) -> usize {
        match stage {
            0 => 2 * step,
            1 | 2 => 2 * step + 1,
            _ => 2 * step + 2,
        }
    }

    /// Grid interval and interpolation fraction of lattice point `j`.
    pub fn half_locate(&self, j: usize) -> (usize, f64) {
        let per = 2 * self.substeps;
        let interval = j / per;
        if interval >= self.grid.n_steps() {
            return (self.grid.n_steps() - 1, 1.0);
        }
        (interval, (j % per) as f64 / per as f64)
    }

    pub fn half_time(&self, j: usize) -> f64 {
        let (interval, theta) = self.half_locate(j);
        self.grid.node(interval) + theta * self.grid.dt()
    }
}

fn check_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Core forward RK4 sweep. `rhs` receives the lattice index, the time and the
/// stage state. When `tape` is given, the four stage states of every step are
/// appended to it in order.
pub(crate) fn rk4_forward<F>(
    clock: &StageClock,
    x0: &DVector<f64>,
    mut rhs: F,
    tape: Option<&mut Vec<DVector<f64>>>,
) -> Result<Vec<DVector<f64>>>
where
    F: FnMut(usize, f64, &DVector<f64>) -> DVector<f64>,
{
    rk4_forward_staged(clock, x0, |s, stage, t, x| rhs(StageClock::stage_index(s, stage), t, x), tape)
}

/// As [`rk4_forward`], with `rhs` receiving the micro-step and stage number
/// instead of the lattice index.
pub(crate) fn rk4_forward_staged<F>(
    clock: &StageClock,
    x0: &DVector<f64>,
    mut rhs: F,
    mut tape: Option<&mut Vec<DVector<f64>>>,
) -> Result<Vec<DVector<f64>>>
where
    F: FnMut(usize, usize, f64, &DVector<f64>) -> DVector<f64>,
{
    let dim = x0.len();
    if !check_finite(x0) {
        return Err(Error::NonFinite("initial value"));
    }
    let h = clock.h();
    let m = clock.substeps();
    let mut nodes = Vec::with_capacity(clock.grid().n_nodes());
    nodes.push(x0.clone());
    let mut x = x0.clone();
    for s in 0..clock.n_micro() {
        let j0 = 2 * s;
        let (t0, t1, t2) = (
            clock.half_time(j0),
            clock.half_time(j0 + 1),
            clock.half_time(j0 + 2),
        );
        let x1 = x.clone();
        let k1 = rhs(s, 0, t0, &x1);
        if k1.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "right-hand side output",
                expected: dim,
                got: k1.len(),
            });
        }
        let x2 = &x + &k1 * (0.5 * h);
        let k2 = rhs(s, 1, t1, &x2);
        let x3 = &x + &k2 * (0.5 * h);
        let k3 = rhs(s, 2, t1, &x3);
        let x4 = &x + &k3 * h;
        let k4 = rhs(s, 3, t2, &x4);
        x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        if !check_finite(&x) {
            return Err(Error::Divergence { t: t2 });
        }
        if let Some(tape) = tape.as_deref_mut() {
            tape.extend([x1, x2, x3, x4]);
        }
        if (s + 1) % m == 0 {
            nodes.push(x.clone());
        }
    }
    Ok(nodes)
}

/// Transposed RK4 sweep for a linear(ized) system `x' = A x + g`.
///
/// `a_transpose(step, stage, v)` must return `A_stageᵀ v`, `seed(k)` the
/// sensitivity of the scalar output with respect to the node state `x_k`,
/// and `forcing(step, stage, bar_k)` receives the sensitivity with respect
/// to the stage derivative, from which input sensitivities are pulled back.
/// Returns the accumulated node adjoints.
pub(crate) fn rk4_reverse<A, S, G>(
    clock: &StageClock,
    dim: usize,
    mut a_transpose: A,
    mut seed: S,
    mut forcing: G,
) -> Vec<DVector<f64>>
where
    A: FnMut(usize, usize, &DVector<f64>) -> DVector<f64>,
    S: FnMut(usize) -> Option<DVector<f64>>,
    G: FnMut(usize, usize, &DVector<f64>),
{
    let h = clock.h();
    let m = clock.substeps();
    let n = clock.grid().n_steps();
    let mut nodes = vec![DVector::zeros(dim); n + 1];
    let mut mu = seed(n).unwrap_or_else(|| DVector::zeros(dim));
    nodes[n] = mu.clone();
    for s in (0..clock.n_micro()).rev() {
        let mut bk1 = &mu * (h / 6.0);
        let mut bk2 = &mu * (h / 3.0);
        let mut bk3 = bk2.clone();
        let bk4 = &mu * (h / 6.0);
        let mut bx = mu;

        forcing(s, 3, &bk4);
        let t4 = a_transpose(s, 3, &bk4);
        bk3.axpy(h, &t4, 1.0);
        bx += t4;

        forcing(s, 2, &bk3);
        let t3 = a_transpose(s, 2, &bk3);
        bk2.axpy(0.5 * h, &t3, 1.0);
        bx += t3;

        forcing(s, 1, &bk2);
        let t2 = a_transpose(s, 1, &bk2);
        bk1.axpy(0.5 * h, &t2, 1.0);
        bx += t2;

        forcing(s, 0, &bk1);
        bx += a_transpose(s, 0, &bk1);

        mu = bx;
        if s % m == 0 {
            let k = s / m;
            if let Some(extra) = seed(k) {
                mu += extra;
            }
            nodes[k] = mu.clone();
        }
    }
    nodes
}

/// Integrates `x' = rhs(t, x)`, `x(t0) = x0` forward over `grid`.
pub fn integrate_forward<F>(
    mut rhs: F,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<Trajectory>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let clock = StageClock::new(*grid, substeps)?;
    let nodes = rk4_forward(&clock, x0, |_, t, x| rhs(t, x), None)?;
    Ok(GridSignal::from_rows(*grid, x0.len(), &nodes))
}

/// Integrates `x' = rhs(t, x)`, `x(tf) = x_end` backward over `grid`.
pub fn integrate_backward<F>(
    mut rhs: F,
    x_end: &DVector<f64>,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<Trajectory>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let nodes = vector_backward(|_, t, x| rhs(t, x), x_end, grid, substeps)?;
    Ok(GridSignal::from_rows(*grid, x_end.len(), &nodes))
}

/// Backward vector sweep; `rhs` receives the forward-time lattice index.
pub(crate) fn vector_backward<F>(
    mut rhs: F,
    x_end: &DVector<f64>,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<Vec<DVector<f64>>>
where
    F: FnMut(usize, f64, &DVector<f64>) -> DVector<f64>,
{
    let clock = StageClock::new(*grid, substeps)?;
    let (t0, tf) = (grid.t0(), grid.tf());
    let last = clock.n_half() - 1;
    let mut nodes = rk4_forward(&clock, x_end, |j, s, y| -rhs(last - j, t0 + tf - s, y), None)
        .map_err(|e| reflect_divergence(e, t0, tf))?;
    nodes.reverse();
    Ok(nodes)
}

fn reflect_divergence(e: Error, t0: f64, tf: f64) -> Error {
    match e {
        Error::Divergence { t } => Error::Divergence { t: t0 + tf - t },
        other => other,
    }
}

/// Integrates the matrix ODE `M' = rhs(t, M)`, `M(tf) = m_end` backward by
/// flattening `M` column-wise into a vector system.
pub fn integrate_matrix_backward<F>(
    rhs: F,
    m_end: &DMatrix<f64>,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<GridMatrixFunction>
where
    F: FnMut(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let mut rhs = rhs;
    matrix_backward(|_, t, m| rhs(t, m), m_end, grid, substeps, false)
}

/// As [`integrate_matrix_backward`] for square matrices that must stay
/// symmetric; the state is replaced by `(M + Mᵀ)/2` after every step.
pub fn integrate_symmetric_matrix_backward<F>(
    rhs: F,
    m_end: &DMatrix<f64>,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<GridMatrixFunction>
where
    F: FnMut(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    if !m_end.is_square() {
        return Err(Error::InvalidParameter("symmetric integration needs a square matrix".into()));
    }
    let mut rhs = rhs;
    matrix_backward(|_, t, m| rhs(t, m), m_end, grid, substeps, true)
}

/// Backward matrix sweep whose right-hand side also receives the forward-time
/// lattice index of the stage.
pub(crate) fn matrix_backward<F>(
    mut rhs: F,
    m_end: &DMatrix<f64>,
    grid: &TimeGrid,
    substeps: usize,
    symmetrize: bool,
) -> Result<GridMatrixFunction>
where
    F: FnMut(usize, f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let clock = StageClock::new(*grid, substeps)?;
    let (rows, cols) = m_end.shape();
    let (t0, tf) = (grid.t0(), grid.tf());
    let h = clock.h();
    let m = clock.substeps();
    let last = clock.n_half() - 1;
    let mut eval = |j: usize, s: f64, y: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let d = rhs(last - j, t0 + tf - s, y);
        if d.shape() != (rows, cols) {
            return Err(Error::InvalidParameter(format!(
                "matrix right-hand side returned {}x{}, expected {rows}x{cols}",
                d.nrows(),
                d.ncols()
            )));
        }
        Ok(-d)
    };
    let mut y = m_end.clone();
    let mut nodes = Vec::with_capacity(grid.n_nodes());
    nodes.push(y.clone());
    for s in 0..clock.n_micro() {
        let j0 = 2 * s;
        let (s0, s1, s2) = (
            clock.half_time(j0),
            clock.half_time(j0 + 1),
            clock.half_time(j0 + 2),
        );
        let k1 = eval(j0, s0, &y)?;
        let k2 = eval(j0 + 1, s1, &(&y + &k1 * (0.5 * h)))?;
        let k3 = eval(j0 + 1, s1, &(&y + &k2 * (0.5 * h)))?;
        let k4 = eval(j0 + 2, s2, &(&y + &k3 * h))?;
        y += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        if symmetrize {
            y = (&y + y.transpose()) * 0.5;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { t: t0 + tf - s2 });
        }
        if (s + 1) % m == 0 {
            nodes.push(y.clone());
        }
    }
    nodes.reverse();
    GridMatrixFunction::new(*grid, nodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn zero_field_keeps_value() {
        let g = TimeGrid::new(0.0, 2.0, 10).unwrap();
        let c = DVector::from_vec(vec![1.5, -2.0]);
        let fwd = integrate_forward(|_, x| DVector::zeros(x.len()), &c, &g, 3).unwrap();
        let bwd = integrate_backward(|_, x| DVector::zeros(x.len()), &c, &g, 3).unwrap();
        for k in 0..g.n_nodes() {
            assert_eq!(fwd.row(k), c);
            assert_eq!(bwd.row(k), c);
        }
        let mt = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mf = integrate_matrix_backward(|_, m| DMatrix::zeros(m.nrows(), m.ncols()), &mt, &g, 2)
            .unwrap();
        for k in 0..g.n_nodes() {
            assert_eq!(mf.at(k), &mt);
        }
    }

    #[test]
    fn exponential_growth_and_decay() {
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let e = std::f64::consts::E;
        let fwd = integrate_forward(|_, x| x.clone(), &v1(1.0), &g, 1).unwrap();
        assert!((fwd.row(100)[0] - e).abs() < 1e-8);
        let bwd = integrate_backward(|_, x| -x, &v1(1.0), &g, 1).unwrap();
        assert!((bwd.row(0)[0] - e).abs() < 1e-8);
        assert_eq!(bwd.row(100)[0], 1.0);
    }

    #[test]
    fn fourth_order_convergence() {
        let err = |n| {
            let g = TimeGrid::new(0.0, 1.0, n).unwrap();
            let x = integrate_forward(|_, x| x.clone(), &v1(1.0), &g, 1).unwrap();
            (x.row(n)[0] - std::f64::consts::E).abs()
        };
        let ratio = err(10) / err(20);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn backward_then_forward_round_trip() {
        let g = TimeGrid::new(0.0, 2.0, 200).unwrap();
        let rhs = |t: f64, x: &DVector<f64>| DVector::from_vec(vec![x[1], -x[0] + 0.3 * t.sin()]);
        let end = DVector::from_vec(vec![0.4, -1.0]);
        let back = integrate_backward(rhs, &end, &g, 4).unwrap();
        let again = integrate_forward(rhs, &back.row(0), &g, 4).unwrap();
        assert!((again.row(200) - end).norm() < 1e-6);
    }

    #[test]
    fn scalar_matrix_matches_vector_backward() {
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let m = integrate_matrix_backward(
            |t, m| m * (-1.0) + DMatrix::from_element(1, 1, t),
            &DMatrix::from_element(1, 1, 2.0),
            &g,
            3,
        )
        .unwrap();
        let v = integrate_backward(|t, x| -x + v1(t), &v1(2.0), &g, 3).unwrap();
        for k in 0..g.n_nodes() {
            assert_eq!(m.at(k)[(0, 0)], v.row(k)[0]);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let err = integrate_forward(|_, x| x.map(|v| v * v * 1e10), &v1(1.0), &g, 1).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn reverse_sweep_is_transpose_of_forward() {
        // x' = a(t) x + g(t) with g given at lattice points; check
        // <seed, x> computed forward equals <bar_g, g> + <mu_0, x0>.
        let g = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let clock = StageClock::new(g, 2).unwrap();
        let a = |t: f64| DMatrix::from_row_slice(2, 2, &[-1.0, t, 0.5, -2.0 * t]);
        let forcing: Vec<DVector<f64>> = (0..clock.n_half())
            .map(|j| DVector::from_vec(vec![(j as f64).sin(), (j as f64 * 0.7).cos()]))
            .collect();
        let x0 = DVector::from_vec(vec![0.3, -0.2]);
        let nodes = rk4_forward(
            &clock,
            &x0,
            |j, t, x| a(t) * x + &forcing[j],
            None,
        )
        .unwrap();
        let w: Vec<DVector<f64>> = (0..g.n_nodes())
            .map(|k| DVector::from_vec(vec![1.0 + k as f64, -0.5 * k as f64]))
            .collect();
        let lhs: f64 = nodes.iter().zip(&w).map(|(x, w)| x.dot(w)).sum();
        let mut bar_forcing = vec![DVector::zeros(2); clock.n_half()];
        let mu = rk4_reverse(
            &clock,
            2,
            |s, i, v| a(clock.half_time(StageClock::stage_index(s, i))).transpose() * v,
            |k| Some(w[k].clone()),
            |s, i, bk| bar_forcing[StageClock::stage_index(s, i)] += bk,
        );
        let rhs: f64 = mu[0].dot(&x0)
            + bar_forcing
                .iter()
                .zip(&forcing)
                .map(|(b, f)| b.dot(f))
                .sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
