//! Deterministic synthetic road profiles built from raised-cosine bumps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSignal, TimeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadProfileSpec {
    pub seed: u64,
    /// Range of peak heights in metres; each bump is a rise or a dip.
    pub amplitude_m: [f64; 2],
    /// Range of bump durations in seconds.
    pub width_s: [f64; 2],
    /// Range of flat stretches between consecutive bumps, in seconds.
    pub gap_s: [f64; 2],
}

impl Default for RoadProfileSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            amplitude_m: [0.02, 0.05],
            width_s: [0.1, 0.14],
            gap_s: [0.0, 0.2],
        }
    }
}

impl RoadProfileSpec {
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        let [a0, a1] = self.amplitude_m;
        let [w0, w1] = self.width_s;
        let [g0, g1] = self.gap_s;
        if !(a0 >= 0.0 && a0 <= a1 && a1.is_finite()) {
            return Err(Error::Config("road profile amplitude range is invalid".into()));
        }
        if !(w0 > 0.0 && w0 <= w1 && w1 <= grid.tf() - grid.t0()) {
            return Err(Error::Config("road profile width range is invalid".into()));
        }
        if !(g0 >= 0.0 && g0 <= g1 && g1.is_finite()) {
            return Err(Error::Config("road profile gap range is invalid".into()));
        }
        Ok(())
    }
}

/// `½ a (1 + cos(2π (t - c) / w))` on `|t - c| ≤ w/2`, zero elsewhere.
fn raised_cosine(t: f64, center: f64, width: f64, amplitude: f64) -> f64 {
    let s = (t - center) / width;
    if s.abs() >= 0.5 {
        0.0
    } else {
        0.5 * amplitude * (1.0 + (2.0 * std::f64::consts::PI * s).cos())
    }
}

/// Samples the profile described by `spec` on `grid`. Bumps are laid out one
/// after another from the start of the horizon until the next would not fit.
pub fn road_profile(spec: &RoadProfileSpec, grid: &TimeGrid) -> Result<GridSignal> {
    spec.validate(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let mut bumps = Vec::new();
    let mut t = grid.t0();
    loop {
        let gap = draw(&mut rng, spec.gap_s);
        let width = draw(&mut rng, spec.width_s);
        let height = draw(&mut rng, spec.amplitude_m);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        if t + gap + width > grid.tf() {
            break;
        }
        bumps.push((t + gap + 0.5 * width, width, sign * height));
        t += gap + width;
    }
    GridSignal::from_fn(*grid, 1, |t| {
        let v = bumps.iter().map(|&(c, w, a)| raised_cosine(t, c, w, a)).sum();
        nalgebra::DVector::from_element(1, v)
    })
}
