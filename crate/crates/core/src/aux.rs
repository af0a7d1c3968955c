//! Solvers for the linear-quadratic auxiliary problem of a Gauss-Newton step:
//! projected-free steepest descent with Armijo backtracking, and the one-shot
//! Riccati feedback solution for the control-only case.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::grid::{fmt_f64, l2_inner, l2_norm_sq, GridMatrixFunction, GridSignal, Trajectory};
use crate::linearization::LinearizedModel;
use crate::problem::{TrackingProblem, Weights};

/// The quadratic model `Ĵ_α(du, dp)` of the tracking cost around an iterate.
#[derive(Debug, Clone)]
pub struct AuxProblem {
    lin: LinearizedModel,
    q: DMatrix<f64>,
    terminal: DMatrix<f64>,
    alpha_u: f64,
    alpha_p: f64,
    joint: bool,
}

impl AuxProblem {
    /// `joint = false` freezes the parameter (`dp = 0`, no parameter regularization).
    pub fn new(lin: LinearizedModel, weights: &Weights, joint: bool) -> Result<Self> {
        ensure_dim("Q", lin.n_y(), weights.q.nrows())?;
        ensure_dim("T", lin.n_y(), weights.terminal.nrows())?;
        Ok(Self {
            lin,
            q: weights.q.clone(),
            terminal: weights.terminal.clone(),
            alpha_u: weights.alpha_u,
            alpha_p: weights.alpha_p,
            joint,
        })
    }

    pub fn from_problem(prob: &TrackingProblem, lin: LinearizedModel) -> Result<Self> {
        Self::new(lin, prob.weights(), prob.p_fixed().is_none())
    }

    pub fn lin(&self) -> &LinearizedModel {
        &self.lin
    }

    pub fn is_joint(&self) -> bool {
        self.joint
    }

    pub fn alpha_u(&self) -> f64 {
        self.alpha_u
    }

    fn zero_dp(&self) -> DVector<f64> {
        DVector::zeros(self.lin.n_p())
    }

    fn effective_dp(&self, dp: &DVector<f64>) -> DVector<f64> {
        if self.joint {
            dp.clone()
        } else {
            self.zero_dp()
        }
    }

    /// Output of the linearized model for `(du, dp)`.
    pub fn output(&self, du: &GridSignal, dp: &DVector<f64>) -> Result<GridSignal> {
        self.lin.sensitivity(du, &self.effective_dp(dp))
    }

    pub fn cost(&self, du: &GridSignal, dp: &DVector<f64>) -> Result<f64> {
        let dy = self.output(du, dp)?;
        Ok(self.cost_from_output(&dy, du, dp))
    }

    pub(crate) fn cost_from_output(&self, dy: &GridSignal, du: &GridSignal, dp: &DVector<f64>) -> f64 {
        let grid = self.lin.grid();
        let r = &self.lin.r;
        let mut misfit = 0.0;
        for k in 0..grid.n_nodes() {
            let e = dy.row(k) - r.row(k);
            misfit += grid.weight(k) * e.dot(&(&self.q * &e));
        }
        let n = grid.n_steps();
        let e_n = dy.row(n) - r.row(n);
        let terminal = e_n.dot(&(&self.terminal * &e_n));
        let u = self.lin.u_k.axpy(1.0, du).expect("compatible signals");
        let mut total = 0.5 * (misfit + terminal) + 0.5 * self.alpha_u * l2_norm_sq(&u);
        if self.joint {
            total += 0.5 * self.alpha_p * (&self.lin.p_k + dp).norm_squared();
        }
        total
    }

    /// Gradient of `Ĵ_α` given the already computed output `dy` of `(du, dp)`.
    pub(crate) fn gradient_from_output(
        &self,
        dy: &GridSignal,
        du: &GridSignal,
        dp: &DVector<f64>,
    ) -> Result<(GridSignal, DVector<f64>)> {
        let grid = *self.lin.grid();
        let n = grid.n_steps();
        let w: Vec<DVector<f64>> = (0..grid.n_nodes())
            .map(|k| {
                let e = dy.row(k) - self.lin.r.row(k);
                let mut wk = &self.q * &e * grid.weight(k);
                if k == n {
                    wk += &self.terminal * &e;
                }
                wk
            })
            .collect();
        let pb = self.lin.pullback(&w);
        let u = self.lin.u_k.axpy(1.0, du)?;
        let gu = self.lin.riesz(&pb.u).axpy(self.alpha_u, &u)?;
        let gp = if self.joint {
            pb.p + (&self.lin.p_k + dp) * self.alpha_p
        } else {
            self.zero_dp()
        };
        Ok((gu, gp))
    }

    fn grad_norm_sq(&self, gu: &GridSignal, gp: &DVector<f64>) -> f64 {
        l2_norm_sq(gu) + if self.joint { gp.norm_squared() } else { 0.0 }
    }
}

/// `∇Ĵ_α(du, dp)`: the `L²` control component and the parameter component.
pub fn aux_gradient(aux: &AuxProblem, du: &GridSignal, dp: &DVector<f64>) -> Result<(GridSignal, DVector<f64>)> {
    let dy = aux.output(du, dp)?;
    aux.gradient_from_output(&dy, du, dp)
}

/// Settings of the auxiliary steepest-descent solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdSettings {
    pub beta: f64,
    pub sigma: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
    pub min_relative_decrease: f64,
}

impl Default for GdSettings {
    fn default() -> Self {
        Self {
            beta: 0.3,
            sigma: 1e-4,
            tol: 1e-6,
            max_iter: 500,
            max_backtracks: 40,
            min_relative_decrease: 1e-10,
        }
    }
}

impl GdSettings {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.beta) || !unit(self.sigma) {
            return Err(Error::InvalidParameter("Armijo beta and sigma must lie in (0, 1)".into()));
        }
        if !(self.tol > 0.0) || self.max_backtracks == 0 || self.min_relative_decrease < 0.0 {
            return Err(Error::InvalidParameter("invalid descent tolerances".into()));
        }
        Ok(())
    }
}

/// Why an inner solve stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerStop {
    GradientTolerance,
    Stagnation,
    MaxIterations,
    ArmijoStall,
    Direct,
}

/// One descent iteration: cost and gradient norm at the iterate, and the step
/// that led to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GdRecord {
    pub iter: usize,
    pub j_alpha: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct AuxSolution {
    pub du: GridSignal,
    pub dp: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub diagnostics: Vec<GdRecord>,
    pub stop: InnerStop,
}

impl AuxSolution {
    /// Writes the diagnostics as `iter,J_alpha,grad_norm,step`.
    pub fn write_diagnostics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iter", "J_alpha", "grad_norm", "step"])?;
        for r in &self.diagnostics {
            wr.write_record([r.iter.to_string(), fmt_f64(r.j_alpha), fmt_f64(r.grad_norm), fmt_f64(r.step)])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Steepest descent on `Ĵ_α` with Armijo backtracking.
///
/// `Ĵ_α` is quadratic, so trial costs along `d` follow from one extra
/// sensitivity solve per iteration; each iteration costs one forward and
/// one backward sweep.
pub fn solve_aux_gd(
    aux: &AuxProblem,
    start: (&GridSignal, &DVector<f64>),
    settings: &GdSettings,
) -> Result<AuxSolution> {
    settings.validate()?;
    let mut du = start.0.clone();
    let mut dp = aux.effective_dp(start.1);
    ensure_dim("parameter step", aux.lin.n_p(), dp.len())?;
    let mut dy = aux.output(&du, &dp)?;
    let mut cost = aux.cost_from_output(&dy, &du, &dp);
    let mut diagnostics = Vec::new();
    let mut step = 0.0;
    let mut iter = 0;
    let stop = loop {
        let (gu, gp) = aux.gradient_from_output(&dy, &du, &dp)?;
        let gnorm_sq = aux.grad_norm_sq(&gu, &gp);
        let gnorm = gnorm_sq.sqrt();
        diagnostics.push(GdRecord {
            iter,
            j_alpha: cost,
            grad_norm: gnorm,
            step,
        });
        if gnorm <= settings.tol * (1.0 + cost.abs()) {
            break InnerStop::GradientTolerance;
        }
        if iter >= settings.max_iter {
            break InnerStop::MaxIterations;
        }
        let dir_u = gu.scaled(-1.0);
        let dir_p = -gp;
        let s_dir = aux.output(&dir_u, &dir_p)?;
        let mut gamma = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.max_backtracks {
            let tu = du.axpy(gamma, &dir_u)?;
            let tp = &dp + &dir_p * gamma;
            let ty = dy.axpy(gamma, &s_dir)?;
            let trial = aux.cost_from_output(&ty, &tu, &tp);
            if trial <= cost - settings.sigma * gamma * gnorm_sq {
                accepted = Some((tu, tp, ty, trial));
                break;
            }
            gamma *= settings.beta;
        }
        let Some((tu, tp, ty, trial)) = accepted else {
            break InnerStop::ArmijoStall;
        };
        let decrease = cost - trial;
        du = tu;
        dp = tp;
        dy = ty;
        step = gamma;
        iter += 1;
        let previous = cost;
        cost = trial;
        if decrease <= settings.min_relative_decrease * previous.abs() {
            diagnostics.push(GdRecord {
                iter,
                j_alpha: cost,
                grad_norm: f64::NAN,
                step,
            });
            break InnerStop::Stagnation;
        }
    };
    if stop == InnerStop::Stagnation {
        // The final record's gradient was not needed for the decision.
        let (gu, gp) = aux.gradient_from_output(&dy, &du, &dp)?;
        if let Some(last) = diagnostics.last_mut() {
            last.grad_norm = aux.grad_norm_sq(&gu, &gp).sqrt();
        }
    }
    Ok(AuxSolution {
        du,
        dp,
        cost,
        iterations: iter,
        diagnostics,
        stop,
    })
}

/// Weight matrices of the control-only auxiliary problem after eliminating
/// the cross terms, sampled at the grid nodes.
#[derive(Debug, Clone)]
pub struct RiccatiData {
    /// `R = D_uᵀ Q D_u + α_u I`.
    pub r: GridMatrixFunction,
    /// `Z = Q D_u`.
    pub z: GridMatrixFunction,
    /// `Q̃ = Q - Z R⁻¹ Zᵀ`.
    pub q_tilde: GridMatrixFunction,
    /// `k = α_u u_k`.
    pub k: GridSignal,
    /// `T̃ = T - Z̃ R̃⁺ Z̃ᵀ` with `R̃ = D_u(tf)ᵀ T D_u(tf)`, `Z̃ = T D_u(tf)`.
    pub t_tilde: DMatrix<f64>,
    /// Augmented state weight on `(dx, 1)`.
    pub q_hat: GridMatrixFunction,
    /// Augmented terminal weight on `(dx(tf), 1)`.
    pub t_hat: DMatrix<f64>,
    /// Smallest eigenvalue over all `Q̂(t_k)` and `T̂`.
    pub min_augmented_eigenvalue: f64,
}

#[derive(Debug, Clone)]
pub struct RiccatiSolveArtifacts {
    pub data: RiccatiData,
    pub p: GridMatrixFunction,
    pub beta: Trajectory,
    /// Feedback gain `F = -R⁻¹ B_uᵀ P`.
    pub f_gain: GridMatrixFunction,
    /// Closed-loop state perturbation.
    pub dx: Trajectory,
    /// Largest number of RK4 steps on one grid interval in the Riccati sweeps.
    pub refinement: usize,
}

fn require_control_only(aux: &AuxProblem) -> Result<()> {
    if aux.joint {
        return Err(Error::InvalidParameter(
            "the Riccati solver handles the fixed-parameter problem only".into(),
        ));
    }
    if !(aux.alpha_u > 0.0) {
        return Err(Error::InvalidParameter(
            "the Riccati solver requires alpha_u > 0 for a positive definite R".into(),
        ));
    }
    Ok(())
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

fn invert_spd(r: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    match r.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => Err(Error::NotPositiveDefinite {
            t,
            min_eigenvalue: min_eigenvalue(r),
        }),
    }
}

/// Samples `R`, `Z`, `Q̃`, `k`, `T̃`, `Q̂`, `T̂` on the grid and checks the
/// semi-definiteness of the augmented weights (with a warning only).
pub fn assemble_riccati_data(aux: &AuxProblem) -> Result<RiccatiData> {
    require_control_only(aux)?;
    let lin = &aux.lin;
    let grid = *lin.grid();
    let n_u = lin.n_u();
    let n_x = lin.n_x();
    let q = &aux.q;
    let mut r_s = Vec::with_capacity(grid.n_nodes());
    let mut z_s = Vec::with_capacity(grid.n_nodes());
    let mut qt_s = Vec::with_capacity(grid.n_nodes());
    let mut qh_s = Vec::with_capacity(grid.n_nodes());
    let mut min_eig = f64::INFINITY;
    let k_sig = lin.u_k.scaled(aux.alpha_u);
    for i in 0..grid.n_nodes() {
        let du = lin.du.at(i);
        let c = lin.c.at(i);
        let r = du.transpose() * q * du + DMatrix::identity(n_u, n_u) * aux.alpha_u;
        let min_r = min_eigenvalue(&r);
        if !(min_r > 0.0) {
            return Err(Error::NotPositiveDefinite {
                t: grid.node(i),
                min_eigenvalue: min_r,
            });
        }
        let rinv = invert_spd(&r, grid.node(i))?;
        let z = q * du;
        let qt = q - &z * &rinv * z.transpose();
        let res = lin.r.row(i);
        let k = k_sig.row(i);
        let mut qh = DMatrix::zeros(n_x + 1, n_x + 1);
        qh.view_mut((0, 0), (n_x, n_x)).copy_from(&(c.transpose() * &qt * c));
        let off = -(c.transpose() * &qt * &res) - c.transpose() * &z * &rinv * &k;
        qh.view_mut((0, n_x), (n_x, 1)).copy_from(&off);
        qh.view_mut((n_x, 0), (1, n_x)).copy_from(&off.transpose());
        qh[(n_x, n_x)] = res.dot(&(&qt * &res)) + 2.0 * res.dot(&(&z * &rinv * &k)) - k.dot(&(&rinv * &k));
        min_eig = min_eig.min(min_eigenvalue(&qh) / qh.norm().max(1.0));
        r_s.push(r);
        z_s.push(z);
        qt_s.push(qt);
        qh_s.push(qh);
    }
    let n = grid.n_steps();
    let du_f = lin.du.at(n);
    let c_f = lin.c.at(n);
    let r_tilde = du_f.transpose() * &aux.terminal * du_f;
    let z_tilde = &aux.terminal * du_f;
    let pinv = r_tilde
        .clone()
        .pseudo_inverse(1e-12 * r_tilde.norm())
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let t_tilde = &aux.terminal - &z_tilde * pinv * z_tilde.transpose();
    let r_f = lin.r.row(n);
    let mut t_hat = DMatrix::zeros(n_x + 1, n_x + 1);
    t_hat.view_mut((0, 0), (n_x, n_x)).copy_from(&(c_f.transpose() * &t_tilde * c_f));
    let off = -(c_f.transpose() * &t_tilde * &r_f);
    t_hat.view_mut((0, n_x), (n_x, 1)).copy_from(&off);
    t_hat.view_mut((n_x, 0), (1, n_x)).copy_from(&off.transpose());
    t_hat[(n_x, n_x)] = r_f.dot(&(&t_tilde * &r_f));
    min_eig = min_eig.min(min_eigenvalue(&t_hat) / t_hat.norm().max(1.0));
    if min_eig < -1e-8 {
        warn!("augmented weights are not positive semi-definite (relative smallest eigenvalue {min_eig:.3e})");
    }
    Ok(RiccatiData {
        r: GridMatrixFunction::new(grid, r_s)?,
        z: GridMatrixFunction::new(grid, z_s)?,
        q_tilde: GridMatrixFunction::new(grid, qt_s)?,
        k: k_sig,
        t_tilde,
        q_hat: GridMatrixFunction::new(grid, qh_s)?,
        t_hat,
        min_augmented_eigenvalue: min_eig,
    })
}

/// Coefficients of the Riccati, costate and closed-loop equations at one time.
struct Coef {
    abar: DMatrix<f64>,
    s: DMatrix<f64>,
    m: DMatrix<f64>,
    phi: DVector<f64>,
    qv: DVector<f64>,
    rinv_bt: DMatrix<f64>,
    gx: DMatrix<f64>,
    uff: DVector<f64>,
}

fn coefficients(aux: &AuxProblem, i: usize, theta: f64, t: f64) -> Result<Coef> {
    let lin = &aux.lin;
    let a = lin.a.interpolate(i, theta);
    let b = lin.bu.interpolate(i, theta);
    let c = lin.c.interpolate(i, theta);
    let du = lin.du.interpolate(i, theta);
    let r = lin.r.interpolate(i, theta);
    let k = lin.u_k.interpolate(i, theta) * aux.alpha_u;
    let n_u = lin.n_u();
    let q = &aux.q;
    let rr = du.transpose() * q * &du + DMatrix::identity(n_u, n_u) * aux.alpha_u;
    let rinv = invert_spd(&rr, t)?;
    let z = q * &du;
    let qt = q - &z * &rinv * z.transpose();
    let rinv_bt = &rinv * b.transpose();
    let gx = &rinv * z.transpose() * &c;
    let uff = &rinv * (z.transpose() * &r - &k);
    Ok(Coef {
        abar: &a - &b * &gx,
        s: &b * &rinv_bt,
        m: c.transpose() * &qt * &c,
        phi: &b * &uff,
        qv: -(c.transpose() * &qt * &r) - c.transpose() * &z * &rinv * &k,
        rinv_bt,
        gx,
        uff,
    })
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    let r = m.complex_eigenvalues().iter().fold(0.0f64, |acc, z| acc.max(z.norm()));
    if r.is_finite() {
        r
    } else {
        m.norm()
    }
}

/// Largest spectral radius of the Hamiltonian matrix over the grid nodes.
fn hamiltonian_radius(aux: &AuxProblem) -> Result<f64> {
    let lin = &aux.lin;
    let grid = *lin.grid();
    let n_x = lin.n_x();
    let mut rho: f64 = 0.0;
    for i in 0..grid.n_nodes() {
        let (cell, theta) = if i == grid.n_steps() { (i - 1, 1.0) } else { (i, 0.0) };
        let c = coefficients(aux, cell, theta, grid.node(i))?;
        let mut h = DMatrix::zeros(2 * n_x, 2 * n_x);
        h.view_mut((0, 0), (n_x, n_x)).copy_from(&c.abar);
        h.view_mut((0, n_x), (n_x, n_x)).copy_from(&(-&c.s));
        h.view_mut((n_x, 0), (n_x, n_x)).copy_from(&(-&c.m));
        h.view_mut((n_x, n_x), (n_x, n_x)).copy_from(&(-c.abar.transpose()));
        rho = rho.max(spectral_radius(&h));
    }
    Ok(rho)
}

/// Target for `h * rate` in the explicit sweeps, well inside the RK4
/// stability region.
const STEP_RATE: f64 = 0.5;

/// Dense backward solution of the coupled Riccati and costate equations on a
/// single grid interval: values and time derivatives at `m + 1` equally
/// spaced points, in increasing time.
struct CellSweep {
    m: usize,
    p: Vec<DMatrix<f64>>,
    dp: Vec<DMatrix<f64>>,
    beta: Vec<DVector<f64>>,
    dbeta: Vec<DVector<f64>>,
}

fn riccati_rhs(c: &Coef, p: &DMatrix<f64>, b: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let pa = p * &c.abar;
    let dp = -(&pa + pa.transpose() - p * &c.s * p + &c.m);
    let closed = &c.abar - &c.s * p;
    let db = -(closed.tr_mul(b)) - p * &c.phi - &c.qv;
    (dp, db)
}

fn closed_loop_rate(c: &Coef, p: &DMatrix<f64>) -> f64 {
    2.0 * spectral_radius(&(&c.abar - &c.s * p))
}

fn sweep_cell(
    aux: &AuxProblem,
    cell: usize,
    m: usize,
    p_end: &DMatrix<f64>,
    b_end: &DVector<f64>,
) -> Result<CellSweep> {
    let grid = *aux.lin.grid();
    let dt = grid.dt();
    let h = dt / m as f64;
    let coef_at = |theta: f64| coefficients(aux, cell, theta, grid.node(cell) + theta * dt);
    let mut p = p_end.clone();
    let mut b = b_end.clone();
    let mut c_hi = coef_at(1.0)?;
    let (mut dp_hi, mut db_hi) = riccati_rhs(&c_hi, &p, &b);
    let mut out = CellSweep {
        m,
        p: vec![p.clone()],
        dp: vec![dp_hi.clone()],
        beta: vec![b.clone()],
        dbeta: vec![db_hi.clone()],
    };
    for s in (0..m).rev() {
        let c_mid = coef_at((s as f64 + 0.5) / m as f64)?;
        let c_lo = coef_at(s as f64 / m as f64)?;
        // Reversed time: y' = -rhs.
        let (k1p, k1b) = (-&dp_hi, -&db_hi);
        let (a, bb) = riccati_rhs(&c_mid, &(&p + &k1p * (0.5 * h)), &(&b + &k1b * (0.5 * h)));
        let (k2p, k2b) = (-a, -bb);
        let (a, bb) = riccati_rhs(&c_mid, &(&p + &k2p * (0.5 * h)), &(&b + &k2b * (0.5 * h)));
        let (k3p, k3b) = (-a, -bb);
        let (a, bb) = riccati_rhs(&c_lo, &(&p + &k3p * h), &(&b + &k3b * h));
        let (k4p, k4b) = (-a, -bb);
        p += (k1p + (k2p + k3p) * 2.0 + k4p) * (h / 6.0);
        p = (&p + p.transpose()) * 0.5;
        b += (k1b + (k2b + k3b) * 2.0 + k4b) * (h / 6.0);
        if p.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                t: grid.node(cell) + s as f64 * h,
            });
        }
        c_hi = c_lo;
        (dp_hi, db_hi) = riccati_rhs(&c_hi, &p, &b);
        out.p.push(p.clone());
        out.dp.push(dp_hi.clone());
        out.beta.push(b.clone());
        out.dbeta.push(db_hi.clone());
    }
    out.p.reverse();
    out.dp.reverse();
    out.beta.reverse();
    out.dbeta.reverse();
    Ok(out)
}

/// Integrates one interval, refining until the closed-loop rate at both ends
/// is resolved.
fn sweep_cell_adaptive(
    aux: &AuxProblem,
    cell: usize,
    base: usize,
    hamiltonian: f64,
    p_end: &DMatrix<f64>,
    b_end: &DVector<f64>,
) -> Result<CellSweep> {
    let grid = *aux.lin.grid();
    let dt = grid.dt();
    let c_hi = coefficients(aux, cell, 1.0, grid.node(cell + 1))?;
    let rate = hamiltonian.max(closed_loop_rate(&c_hi, p_end));
    let mut m = base.max((dt * rate / STEP_RATE).ceil() as usize);
    for _ in 0..8 {
        let sweep = sweep_cell(aux, cell, m, p_end, b_end);
        if let Ok(sweep) = sweep {
            let c_lo = coefficients(aux, cell, 0.0, grid.node(cell))?;
            let rate_lo = closed_loop_rate(&c_lo, &sweep.p[0]);
            if dt / m as f64 * rate_lo <= 2.0 * STEP_RATE {
                return Ok(sweep);
            }
            m = m.max((dt * rate_lo / STEP_RATE).ceil() as usize);
        } else {
            m *= 4;
        }
    }
    sweep_cell(aux, cell, m, p_end, b_end)
}

/// Cubic Hermite midpoint of a step of length `h`.
fn hermite_mid<T>(y0: &T, d0: &T, y1: &T, d1: &T, h: f64) -> T
where
    for<'a> &'a T: std::ops::Add<&'a T, Output = T> + std::ops::Sub<&'a T, Output = T>,
    T: std::ops::Mul<f64, Output = T> + std::ops::Add<T, Output = T>,
{
    (y0 + y1) * 0.5 + (d0 - d1) * (h / 8.0)
}

/// One-shot solution of the control-only auxiliary problem by the Riccati
/// feedback law.
///
/// The Riccati and costate equations are swept backward with explicit RK4,
/// using on each grid interval enough substeps to resolve both the
/// Hamiltonian spectrum and the closed-loop rate `2 ρ(Ā - S P)`; the latter
/// is large just before the final time when the terminal weight is active.
pub fn solve_aux_riccati(aux: &AuxProblem) -> Result<(AuxSolution, RiccatiSolveArtifacts)> {
    let data = assemble_riccati_data(aux)?;
    let lin = &aux.lin;
    let grid = *lin.grid();
    let n = grid.n_steps();
    let hamiltonian = hamiltonian_radius(aux)?;
    let base = lin.substeps().max(1);

    let c_f = lin.c.at(n);
    let mut p = c_f.transpose() * &data.t_tilde * c_f;
    let mut b = -(c_f.transpose() * &data.t_tilde * lin.r.row(n));
    let mut cells: Vec<CellSweep> = Vec::with_capacity(n);
    for cell in (0..n).rev() {
        let sweep = sweep_cell_adaptive(aux, cell, base, hamiltonian, &p, &b)?;
        p = sweep.p[0].clone();
        b = sweep.beta[0].clone();
        cells.push(sweep);
    }
    cells.reverse();

    let mut x = DVector::zeros(lin.n_x());
    let closed = |c: &Coef, p: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>| {
        (&c.abar - &c.s * p) * x - &c.s * b + &c.phi
    };
    let mut du_rows = Vec::with_capacity(grid.n_nodes());
    let mut dx_rows = Vec::with_capacity(grid.n_nodes());
    let mut beta_rows = Vec::with_capacity(grid.n_nodes());
    let mut p_nodes = Vec::with_capacity(grid.n_nodes());
    let mut f_nodes = Vec::with_capacity(grid.n_nodes());
    let mut record = |k: usize, p: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>| -> Result<()> {
        let (cell, theta) = if k == n { (n - 1, 1.0) } else { (k, 0.0) };
        let c = coefficients(aux, cell, theta, grid.node(k))?;
        let f_gain = -(&c.rinv_bt * p);
        du_rows.push((&f_gain - &c.gx) * x - &c.rinv_bt * b + &c.uff);
        dx_rows.push(x.clone());
        beta_rows.push(b.clone());
        p_nodes.push(p.clone());
        f_nodes.push(f_gain);
        Ok(())
    };
    let mut max_m = 0;
    for (cell, sw) in cells.iter().enumerate() {
        record(cell, &sw.p[0], &sw.beta[0], &x)?;
        max_m = max_m.max(sw.m);
        let h = grid.dt() / sw.m as f64;
        let coef_at = |theta: f64| coefficients(aux, cell, theta, grid.node(cell) + theta * grid.dt());
        let mut c_lo = coef_at(0.0)?;
        for s in 0..sw.m {
            let c_mid = coef_at((s as f64 + 0.5) / sw.m as f64)?;
            let c_hi = coef_at((s + 1) as f64 / sw.m as f64)?;
            let p_mid = hermite_mid(&sw.p[s], &sw.dp[s], &sw.p[s + 1], &sw.dp[s + 1], h);
            let b_mid = hermite_mid(&sw.beta[s], &sw.dbeta[s], &sw.beta[s + 1], &sw.dbeta[s + 1], h);
            let k1 = closed(&c_lo, &sw.p[s], &sw.beta[s], &x);
            let k2 = closed(&c_mid, &p_mid, &b_mid, &(&x + &k1 * (0.5 * h)));
            let k3 = closed(&c_mid, &p_mid, &b_mid, &(&x + &k2 * (0.5 * h)));
            let k4 = closed(&c_hi, &sw.p[s + 1], &sw.beta[s + 1], &(&x + &k3 * h));
            x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    t: grid.node(cell) + (s + 1) as f64 * h,
                });
            }
            c_lo = c_hi;
        }
    }
    let last = &cells[n - 1];
    record(n, &last.p[last.m], &last.beta[last.m], &x)?;

    let du = GridSignal::new(grid, to_matrix(&du_rows, lin.n_u()))?;
    let dp = DVector::zeros(lin.n_p());
    let dy = aux.output(&du, &dp)?;
    let cost = aux.cost_from_output(&dy, &du, &dp);
    let (gu, gp) = aux.gradient_from_output(&dy, &du, &dp)?;
    let solution = AuxSolution {
        du,
        dp,
        cost,
        iterations: 1,
        diagnostics: vec![GdRecord {
            iter: 0,
            j_alpha: cost,
            grad_norm: aux.grad_norm_sq(&gu, &gp).sqrt(),
            step: 1.0,
        }],
        stop: InnerStop::Direct,
    };
    let artifacts = RiccatiSolveArtifacts {
        data,
        p: GridMatrixFunction::new(grid, p_nodes)?,
        beta: GridSignal::new(grid, to_matrix(&beta_rows, lin.n_x()))?,
        f_gain: GridMatrixFunction::new(grid, f_nodes)?,
        dx: GridSignal::new(grid, to_matrix(&dx_rows, lin.n_x()))?,
        refinement: max_m,
    };
    Ok((solution, artifacts))
}

fn to_matrix(rows: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), dim, |k, i| rows[k][i])
}

/// Directional derivative of `Ĵ_α` at `(du, dp)` along `(eu, ep)`.
pub fn aux_directional_derivative(
    aux: &AuxProblem,
    du: &GridSignal,
    dp: &DVector<f64>,
    eu: &GridSignal,
    ep: &DVector<f64>,
) -> Result<f64> {
    let (gu, gp) = aux_gradient(aux, du, dp)?;
    let pe = if aux.joint { gp.dot(ep) } else { 0.0 };
    Ok(l2_inner(&gu, eu)? + pe)
}
