//! Firing-rate maps: occupancy-normalized spatial histograms of model
//! neuron activity.

use super::PipelineError;
use crate::attractor::circular_dist;
use std::f64::consts::TAU;
use std::fmt::Write as _;

/// Which unit's tuning curve to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unit {
    /// Head-direction unit with a preferred ring phase.
    Hd { preferred: f64 },
    /// Grid unit with preferred torus phases per axis.
    Grid { preferred: (f64, f64) },
}

impl Unit {
    /// Parses `hd:<phase>` or `grid:<px>,<py>`.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let bad = || PipelineError::Config(format!("bad unit spec '{text}' (hd:<phase> or grid:<px>,<py>)"));
        if let Some(rest) = text.strip_prefix("hd:") {
            return rest
                .trim()
                .parse::<f64>()
                .map(|preferred| Unit::Hd { preferred })
                .map_err(|_| bad());
        }
        if let Some(rest) = text.strip_prefix("grid:") {
            let mut parts = rest.split(',');
            let px = parts.next().and_then(|s| s.trim().parse::<f64>().ok());
            let py = parts.next().and_then(|s| s.trim().parse::<f64>().ok());
            if let (Some(px), Some(py), None) = (px, py, parts.next()) {
                return Ok(Unit::Grid {
                    preferred: (px, py),
                });
            }
        }
        Err(bad())
    }

    /// Gaussian tuning on the ring/torus; grid activity is the product over
    /// the two axes.
    pub fn activity(&self, hd_phase: f64, grid_phase: (f64, f64), sigma: f64) -> f64 {
        let g = |d: f64| (-d * d / (2.0 * sigma * sigma)).exp();
        match self {
            Unit::Hd { preferred } => g(circular_dist(hd_phase, *preferred, TAU)),
            Unit::Grid { preferred } => {
                g(circular_dist(grid_phase.0, preferred.0, TAU))
                    * g(circular_dist(grid_phase.1, preferred.1, TAU))
            }
        }
    }
}

/// One logged step: planar position plus the network phase estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSample {
    pub x: f64,
    pub y: f64,
    pub hd: f64,
    pub grid: (f64, f64),
}

/// Occupancy-normalized activity on a regular spatial grid. Bins visited
/// fewer than the minimum occupancy are empty (`None`).
#[derive(Debug, Clone)]
pub struct RateMap {
    pub origin: (f64, f64),
    pub bin_size: f64,
    pub cols: usize,
    pub rows: usize,
    pub rates: Vec<Option<f64>>,
}

impl RateMap {
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        self.rates[row * self.cols + col]
    }

    /// Bin index of a world position.
    pub fn bin_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin.0) / self.bin_size).floor();
        let r = ((y - self.origin.1) / self.bin_size).floor();
        if c < 0.0 || r < 0.0 || c as usize >= self.cols || r as usize >= self.rows {
            None
        } else {
            Some((c as usize, r as usize))
        }
    }

    /// 8-bit PGM with rates scaled to the map maximum; empty bins are 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let peak = self
            .rates
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(*v))
            .max(1e-12);
        let mut bytes = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        bytes.extend(self.rates.iter().map(|r| match r {
            Some(v) => ((v / peak) * 255.0).round().clamp(0.0, 255.0) as u8,
            None => 0u8,
        }));
        bytes
    }

    /// CSV of bin values: `col,row,x_center,y_center,rate` (empty rate for
    /// unvisited bins).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("col,row,x,y,rate\n");
        for r in 0..self.rows {
            for c in 0..self.cols {
                let x = self.origin.0 + (c as f64 + 0.5) * self.bin_size;
                let y = self.origin.1 + (r as f64 + 0.5) * self.bin_size;
                match self.get(c, r) {
                    Some(v) => writeln!(out, "{c},{r},{x},{y},{v}").unwrap(),
                    None => writeln!(out, "{c},{r},{x},{y},").unwrap(),
                }
            }
        }
        out
    }
}

/// Builds the firing-rate map of `unit` from aligned trajectory/phase logs.
pub fn firing_rate_map(
    samples: &[PhaseSample],
    unit: Unit,
    tuning_sigma: f64,
    bin_size: f64,
    min_occupancy: usize,
) -> Result<RateMap, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::Config("no samples for rate map".into()));
    }
    if bin_size <= 0.0 || tuning_sigma <= 0.0 {
        return Err(PipelineError::Config(
            "bin_size and tuning_sigma must be positive".into(),
        ));
    }
    let min_x = samples.iter().map(|s| s.x).fold(f64::INFINITY, f64::min);
    let max_x = samples.iter().map(|s| s.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = samples.iter().map(|s| s.y).fold(f64::INFINITY, f64::min);
    let max_y = samples.iter().map(|s| s.y).fold(f64::NEG_INFINITY, f64::max);
    let cols = (((max_x - min_x) / bin_size).floor() as usize + 1).max(1);
    let rows = (((max_y - min_y) / bin_size).floor() as usize + 1).max(1);
    let mut activity = vec![0.0f64; cols * rows];
    let mut occupancy = vec![0usize; cols * rows];
    for s in samples {
        let c = (((s.x - min_x) / bin_size).floor() as usize).min(cols - 1);
        let r = (((s.y - min_y) / bin_size).floor() as usize).min(rows - 1);
        activity[r * cols + c] += unit.activity(s.hd, s.grid, tuning_sigma);
        occupancy[r * cols + c] += 1;
    }
    let rates = activity
        .into_iter()
        .zip(&occupancy)
        .map(|(a, &n)| (n >= min_occupancy.max(1)).then(|| a / n as f64))
        .collect();
    Ok(RateMap {
        origin: (min_x, min_y),
        bin_size,
        cols,
        rows,
        rates,
    })
}
