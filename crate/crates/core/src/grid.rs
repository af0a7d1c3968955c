//! Uniform time grids, grid-sampled signals and matrix functions, and the
//! trapezoidal quadrature that realizes every L² inner product and cost
//! integral in the crate.
//!
//! Signals are piecewise-linear between nodes. The trapezoidal rule is
//! exact for the products of constants and second order otherwise.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_dim, Error, Result};

/// Relative slack (in units of `dt`) tolerated when sampling just outside the
/// grid, so that stage times produced by floating-point arithmetic at `tf`
/// still resolve to the last interval.
const EDGE_SLACK: f64 = 1e-9;

/// A uniform grid `t0 = t_0 < t_1 < ... < t_N = tf` with `t_k = t0 + k dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    tf: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, tf: f64, n_steps: usize) -> Result<Self> {
        if !t0.is_finite() || !tf.is_finite() {
            return Err(Error::NonFinite("time grid bounds"));
        }
        if tf <= t0 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs tf > t0 (got t0 = {t0}, tf = {tf})"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidParameter(
                "time grid needs at least one interval".into(),
            ));
        }
        Ok(Self { t0, tf, n_steps })
    }

    /// Builds a grid from a step size, which must divide `tf - t0` to 1e-12.
    pub fn with_step(t0: f64, tf: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let span = tf - t0;
        let n = (span / dt).round();
        if n < 1.0 || (n * dt - span).abs() > 1e-12 * span.abs().max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "dt = {dt} does not divide the interval [{t0}, {tf}]"
            )));
        }
        Self::new(t0, tf, n as usize)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.tf - self.t0) / self.n_steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes()).map(move |k| self.node(k))
    }

    /// Grid with every interval split into `factor` equal parts.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            t0: self.t0,
            tf: self.tf,
            n_steps: self.n_steps * factor.max(1),
        }
    }

    /// Trapezoidal quadrature weight of node `k`.
    pub fn weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.n_steps {
            0.5 * self.dt()
        } else {
            self.dt()
        }
    }

    /// Interval index `j` and fraction `theta` with `t = t_j + theta dt`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let dt = self.dt();
        let slack = EDGE_SLACK * dt;
        if !t.is_finite() || t < self.t0 - slack || t > self.tf + slack {
            return Err(Error::OutOfRange {
                t,
                t0: self.t0,
                tf: self.tf,
            });
        }
        Ok(self.locate_clamped(t))
    }

    pub(crate) fn locate_clamped(&self, t: f64) -> (usize, f64) {
        let s = (t - self.t0) / self.dt();
        let j = (s.floor().max(0.0) as usize).min(self.n_steps - 1);
        let theta = (s - j as f64).clamp(0.0, 1.0);
        (j, theta)
    }

    pub(crate) fn same_as(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps
            && (self.t0 - other.t0).abs() <= 1e-12 * self.t0.abs().max(1.0)
            && (self.tf - other.tf).abs() <= 1e-12 * self.tf.abs().max(1.0)
    }
}

/// A vector-valued signal sampled at the nodes of a [`TimeGrid`]; row `k` of
/// `values` holds the sample at `t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSignal {
    grid: TimeGrid,
    values: DMatrix<f64>,
}

/// State trajectories share the signal representation.
pub type Trajectory = GridSignal;

impl GridSignal {
    pub fn new(grid: TimeGrid, values: DMatrix<f64>) -> Result<Self> {
        ensure_dim("signal node count", grid.n_nodes(), values.nrows())?;
        if values.ncols() == 0 {
            return Err(Error::InvalidParameter("signal dimension must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("signal samples"));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            values: DMatrix::zeros(grid.n_nodes(), dim.max(1)),
        }
    }

    pub fn constant(grid: TimeGrid, value: &[f64]) -> Self {
        let values = DMatrix::from_fn(grid.n_nodes(), value.len(), |_, j| value[j]);
        Self { grid, values }
    }

    pub fn from_fn<F>(grid: TimeGrid, dim: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(f64) -> DVector<f64>,
    {
        let mut values = DMatrix::zeros(grid.n_nodes(), dim);
        for k in 0..grid.n_nodes() {
            let v = f(grid.node(k));
            ensure_dim("signal sample", dim, v.len())?;
            values.set_row(k, &v.transpose());
        }
        Self::new(grid, values)
    }

    /// Builds a signal from node rows without re-validating finiteness.
    pub(crate) fn from_rows(grid: TimeGrid, dim: usize, rows: &[DVector<f64>]) -> Self {
        let mut values = DMatrix::zeros(grid.n_nodes(), dim);
        for (k, r) in rows.iter().enumerate() {
            values.set_row(k, &r.transpose());
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn row(&self, k: usize) -> DVector<f64> {
        self.values.row(k).transpose()
    }

    pub fn set_row(&mut self, k: usize, v: &DVector<f64>) {
        self.values.set_row(k, &v.transpose());
    }

    /// Piecewise-linear interpolation; no extrapolation beyond `[t0, tf]`.
    pub fn sample(&self, t: f64) -> Result<DVector<f64>> {
        let (j, theta) = self.grid.locate(t)?;
        Ok(self.interpolate(j, theta))
    }

    pub(crate) fn interpolate(&self, j: usize, theta: f64) -> DVector<f64> {
        if theta == 0.0 {
            return self.row(j);
        }
        if theta == 1.0 {
            return self.row(j + 1);
        }
        let a = self.values.row(j);
        let b = self.values.row(j + 1);
        (a * (1.0 - theta) + b * theta).transpose()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            grid: self.grid,
            values: &self.values * s,
        }
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &GridSignal) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Self {
            grid: self.grid,
            values: &self.values + &other.values * s,
        })
    }

    pub fn sub(&self, other: &GridSignal) -> Result<Self> {
        self.axpy(-1.0, other)
    }

    pub fn map_rows<F>(&self, out_dim: usize, mut f: F) -> Self
    where
        F: FnMut(usize, DVector<f64>) -> DVector<f64>,
    {
        let mut values = DMatrix::zeros(self.grid.n_nodes(), out_dim);
        for k in 0..self.grid.n_nodes() {
            let v = f(k, self.row(k));
            values.set_row(k, &v.transpose());
        }
        Self {
            grid: self.grid,
            values,
        }
    }

    pub(crate) fn check_compatible(&self, other: &GridSignal) -> Result<()> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::GridMismatch);
        }
        ensure_dim("signal dimension", self.dim(), other.dim())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim()).map(|i| format!("v{i}")));
        wr.write_record(&header)?;
        for k in 0..self.grid.n_nodes() {
            let mut rec = vec![fmt_f64(self.grid.node(k))];
            rec.extend(self.values.row(k).iter().map(|v| fmt_f64(*v)));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Parses the CSV layout written by [`GridSignal::write_csv`] and
    /// reconstructs the uniform grid from the time column.
    pub fn read_csv<R: Read>(r: R, source: &str) -> Result<Self> {
        let bad = |reason: String| Error::Data {
            path: source.to_string(),
            reason,
        };
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.is_empty() || &header[0] != "t" || header.len() < 2 {
            return Err(bad("expected header `t,v0,...`".into()));
        }
        let dim = header.len() - 1;
        let mut times = Vec::new();
        let mut data = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != dim + 1 {
                return Err(bad(format!("row with {} fields, expected {}", rec.len(), dim + 1)));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("cannot parse `{s}`: {e}")))
            };
            times.push(parse(&rec[0])?);
            for field in rec.iter().skip(1) {
                data.push(parse(field)?);
            }
        }
        if times.len() < 2 {
            return Err(bad("need at least two rows".into()));
        }
        let grid = TimeGrid::new(times[0], *times.last().unwrap(), times.len() - 1)?;
        for (k, t) in times.iter().enumerate() {
            if (t - grid.node(k)).abs() > 1e-9 * grid.dt() {
                return Err(bad(format!("row {k}: time {t} is not on a uniform grid")));
            }
        }
        let values = DMatrix::from_row_slice(times.len(), dim, &data);
        Self::new(grid, values)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), &path.display().to_string())
    }
}

/// Formats with 17 significant digits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Trapezoidal approximation of the L² inner product `∫ a(t)ᵀ b(t) dt`.
pub fn l2_inner(a: &GridSignal, b: &GridSignal) -> Result<f64> {
    a.check_compatible(b)?;
    let grid = a.grid;
    let mut acc = 0.0;
    for k in 0..grid.n_nodes() {
        let dot: f64 = a.values.row(k).dot(&b.values.row(k));
        acc += grid.weight(k) * dot;
    }
    Ok(acc)
}

pub fn l2_norm_sq(a: &GridSignal) -> f64 {
    // A signal is always compatible with itself.
    l2_inner(a, a).expect("self inner product")
}

pub fn l2_norm(a: &GridSignal) -> f64 {
    l2_norm_sq(a).sqrt()
}

/// A matrix-valued function sampled at grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMatrixFunction {
    grid: TimeGrid,
    rows: usize,
    cols: usize,
    values: Vec<DMatrix<f64>>,
}

impl GridMatrixFunction {
    pub fn new(grid: TimeGrid, values: Vec<DMatrix<f64>>) -> Result<Self> {
        ensure_dim("matrix function node count", grid.n_nodes(), values.len())?;
        let (rows, cols) = values[0].shape();
        for m in &values {
            if m.shape() != (rows, cols) {
                return Err(Error::InvalidParameter(format!(
                    "matrix function expects {rows}x{cols} samples, found {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("matrix function samples"));
            }
        }
        Ok(Self {
            grid,
            rows,
            cols,
            values,
        })
    }

    pub fn constant(grid: TimeGrid, m: DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        Self {
            grid,
            rows,
            cols,
            values: vec![m; grid.n_nodes()],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        &self.values[k]
    }

    pub fn samples(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn sample(&self, t: f64) -> Result<DMatrix<f64>> {
        let (j, theta) = self.grid.locate(t)?;
        Ok(self.interpolate(j, theta))
    }

    pub(crate) fn interpolate(&self, j: usize, theta: f64) -> DMatrix<f64> {
        if theta == 0.0 {
            return self.values[j].clone();
        }
        if theta == 1.0 {
            return self.values[j + 1].clone();
        }
        &self.values[j] * (1.0 - theta) + &self.values[j + 1] * theta
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(1.0, 1.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::with_step(0.0, 1.0, 0.3).is_err());
        let g = TimeGrid::with_step(0.0, 10.0, 0.01).unwrap();
        assert_eq!(g.n_steps(), 1000);
        assert_eq!(g.node(7), 7.0 * g.dt());
    }

    #[test]
    fn inner_product_of_zero_is_zero() {
        let g = TimeGrid::new(0.0, 10.0, 37).unwrap();
        let a = GridSignal::zeros(g, 2);
        let b = GridSignal::from_fn(g, 2, |t| DVector::from_vec(vec![t.sin(), t])).unwrap();
        assert_eq!(l2_inner(&a, &b).unwrap(), 0.0);
        assert_eq!(l2_norm_sq(&a), 0.0);
    }

    #[test]
    fn constant_integrands() {
        let g = TimeGrid::new(0.0, 10.0, 100).unwrap();
        let one = GridSignal::constant(g, &[1.0]);
        assert!((l2_inner(&one, &one).unwrap() - 10.0).abs() < 1e-12);
        let two = GridSignal::constant(g, &[2.0]);
        assert!((l2_norm_sq(&two) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_integrand() {
        let g = unit_grid(100);
        let a = GridSignal::from_fn(g, 1, |t| DVector::from_element(1, t)).unwrap();
        assert!((l2_inner(&a, &a).unwrap() - 1.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn quadrature_is_second_order() {
        // ∫₀¹ sin(t) cos(t) dt = sin²(1) / 2
        let exact = 1.0f64.sin().powi(2) / 2.0;
        let err = |n| {
            let g = unit_grid(n);
            let a = GridSignal::from_fn(g, 1, |t| DVector::from_element(1, t.sin())).unwrap();
            let b = GridSignal::from_fn(g, 1, |t| DVector::from_element(1, t.cos())).unwrap();
            (l2_inner(&a, &b).unwrap() - exact).abs()
        };
        let ratio = err(40) / err(80);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn sampling() {
        let g = unit_grid(4);
        let s = GridSignal::from_fn(g, 1, |t| DVector::from_element(1, t * t)).unwrap();
        for k in 0..5 {
            assert_eq!(s.sample(g.node(k)).unwrap()[0], s.row(k)[0]);
        }
        let mid = s.sample(0.5 * (g.node(1) + g.node(2))).unwrap()[0];
        assert!((mid - 0.5 * (s.row(1)[0] + s.row(2)[0])).abs() < 1e-15);
        assert!(s.sample(1.0 - 1e-13).unwrap()[0].is_finite());
        assert!(matches!(s.sample(1.1), Err(Error::OutOfRange { .. })));
        assert!(matches!(s.sample(-0.01), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn rejects_non_finite_and_mismatch() {
        let g = unit_grid(2);
        let mut m = DMatrix::zeros(3, 1);
        m[(1, 0)] = f64::NAN;
        assert!(matches!(GridSignal::new(g, m), Err(Error::NonFinite(_))));
        let a = GridSignal::zeros(g, 1);
        let b = GridSignal::zeros(g, 2);
        assert!(matches!(l2_inner(&a, &b), Err(Error::DimensionMismatch { .. })));
        let c = GridSignal::zeros(unit_grid(3), 1);
        assert!(matches!(l2_inner(&a, &c), Err(Error::GridMismatch)));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let g = TimeGrid::new(0.0, 0.3, 3).unwrap();
        let s = GridSignal::from_fn(g, 2, |t| DVector::from_vec(vec![t.exp(), 1.0 / 3.0 + t]))
            .unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,v0,v1\n"));
        let back = GridSignal::read_csv(buf.as_slice(), "mem").unwrap();
        assert_eq!(back.values(), s.values());
        assert_eq!(back.grid().n_steps(), 3);
    }

    #[test]
    fn matrix_function_interpolates() {
        let g = unit_grid(2);
        let f = GridMatrixFunction::new(
            g,
            vec![
                DMatrix::from_element(2, 2, 0.0),
                DMatrix::from_element(2, 2, 2.0),
                DMatrix::from_element(2, 2, 4.0),
            ],
        )
        .unwrap();
        assert_eq!(f.sample(0.25).unwrap()[(1, 1)], 1.0);
        assert_eq!(f.sample(1.0).unwrap()[(0, 1)], 4.0);
    }
}
