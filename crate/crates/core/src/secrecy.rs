//! Secrecy maps: per-cell ε-outage secrecy rates of an uplink under
//! log-distance path loss with log-normal shadowing.
//!
//! Shadowing draws are keyed by (seed, cell, receiver position), so an access
//! point sees the same draws whatever else is deployed, and an eavesdropper
//! standing on an access point sees that access point's draws.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::euclidean;
use crate::rng;

pub const MIN_DISTANCE_M: f64 = 0.1;
pub const MIN_TRIALS: usize = 1_000;
pub const DEFAULT_LEVEL_EDGES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Error, PartialEq)]
pub enum SecrecyError {
    #[error("at least one access point is required")]
    NoAccessPoints,
    #[error("at least one eavesdropper position is required")]
    NoEavesdroppers,
    #[error("outage probability must lie strictly between 0 and 1, got {0}")]
    BadEpsilon(f64),
    #[error("grid has no cells")]
    EmptyGrid,
    #[error("at least {MIN_TRIALS} trials are required, got {0}")]
    TooFewTrials(usize),
    #[error("invalid propagation model: {0}")]
    BadModel(&'static str),
    #[error("sample file line {line}: {msg}")]
    Samples { line: usize, msg: String },
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationModel {
    /// Path loss at the reference distance, dB.
    pub pl0_db: f64,
    pub d0_m: f64,
    pub exponent: f64,
    pub shadowing_sigma_db: f64,
    pub noise_floor_dbm: f64,
    pub tx_power_dbm: f64,
}

impl Default for PropagationModel {
    fn default() -> Self {
        Self {
            pl0_db: 48.0,
            d0_m: 1.0,
            exponent: 2.0,
            shadowing_sigma_db: 4.0,
            noise_floor_dbm: -90.0,
            tx_power_dbm: 0.0,
        }
    }
}

impl PropagationModel {
    pub fn validate(&self) -> Result<(), SecrecyError> {
        if !(self.exponent > 0.0) {
            return Err(SecrecyError::BadModel("exponent must be positive"));
        }
        if !(self.shadowing_sigma_db >= 0.0) {
            return Err(SecrecyError::BadModel("shadowing sigma must be non-negative"));
        }
        if !(self.d0_m > 0.0) {
            return Err(SecrecyError::BadModel("reference distance must be positive"));
        }
        Ok(())
    }

    /// Mean SNR in dB, before shadowing.
    pub fn mean_snr_db(&self, tx: [f64; 3], rx: [f64; 3]) -> f64 {
        let d = euclidean(tx, rx).max(MIN_DISTANCE_M);
        self.tx_power_dbm - self.pl0_db - 10.0 * self.exponent * (d / self.d0_m).log10() - self.noise_floor_dbm
    }
}

/// SNR in dB for one shadowing draw `x_db` (already scaled by sigma).
pub fn snr_at(tx: [f64; 3], rx: [f64; 3], model: &PropagationModel, x_db: f64) -> f64 {
    model.mean_snr_db(tx, rx) - x_db
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Eavesdroppers {
    Fixed { positions: Vec<[f64; 3]> },
    /// Worst case over a regular lattice covering the box.
    Region { min: [f64; 3], max: [f64; 3], step_m: f64 },
}

impl Eavesdroppers {
    pub fn positions(&self) -> Vec<[f64; 3]> {
        match self {
            Eavesdroppers::Fixed { positions } => positions.clone(),
            Eavesdroppers::Region { min, max, step_m } => {
                let step = step_m.max(1e-3);
                let count = |k: usize| (((max[k] - min[k]) / step).floor().max(0.0) as usize) + 1;
                let mut out = Vec::new();
                for i in 0..count(0) {
                    for j in 0..count(1) {
                        for k in 0..count(2) {
                            out.push([
                                min[0] + i as f64 * step,
                                min[1] + j as f64 * step,
                                min[2] + k as f64 * step,
                            ]);
                        }
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub resolution_m: f64,
    #[serde(default)]
    pub height_m: f64,
}

impl Grid {
    pub fn dims(&self) -> (usize, usize) {
        let n = |k: usize| {
            let span = self.max[k] - self.min[k];
            if self.resolution_m > 0.0 && span > 0.0 {
                (span / self.resolution_m).round() as usize
            } else {
                0
            }
        };
        (n(0), n(1))
    }

    /// Centre of cell `(ix, iy)`.
    pub fn center(&self, ix: usize, iy: usize) -> [f64; 3] {
        [
            self.min[0] + (ix as f64 + 0.5) * self.resolution_m,
            self.min[1] + (iy as f64 + 0.5) * self.resolution_m,
            self.height_m,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecrecyScenario {
    pub access_points: Vec<[f64; 3]>,
    pub eavesdroppers: Eavesdroppers,
    pub epsilon: f64,
    pub grid: Grid,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_edges")]
    pub level_edges: [f64; 4],
}

fn default_trials() -> usize {
    10_000
}

fn default_edges() -> [f64; 4] {
    DEFAULT_LEVEL_EDGES
}

impl SecrecyScenario {
    pub fn validate(&self) -> Result<(), SecrecyError> {
        if self.access_points.is_empty() {
            return Err(SecrecyError::NoAccessPoints);
        }
        if self.eavesdroppers.positions().is_empty() {
            return Err(SecrecyError::NoEavesdroppers);
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(SecrecyError::BadEpsilon(self.epsilon));
        }
        let (nx, ny) = self.grid.dims();
        if nx == 0 || ny == 0 {
            return Err(SecrecyError::EmptyGrid);
        }
        if self.trials < MIN_TRIALS {
            return Err(SecrecyError::TooFewTrials(self.trials));
        }
        Ok(())
    }
}

/// Secrecy capacity of one channel use, bits.
pub fn secrecy_capacity(snr_b_db: f64, snr_e_db: f64) -> f64 {
    let c = |db: f64| (1.0 + 10f64.powf(db / 10.0)).log2();
    (c(snr_b_db) - c(snr_e_db)).max(0.0)
}

/// Largest `r` in `samples` with P(C ≥ r) ≥ 1 − ε. Sorts in place.
pub fn outage_quantile(samples: &mut [f64], epsilon: f64) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len();
    let m = (((1.0 - epsilon) * n as f64) - 1e-9).ceil().max(1.0) as usize;
    samples[n - m.min(n)]
}

/// Standard-normal shadowing draws of one (cell, receiver) pair.
pub fn shadowing_draws(seed: u64, cell: u64, rx: [f64; 3], sigma_db: f64, trials: usize) -> Vec<f64> {
    let q = |v: f64| (v * 1000.0).round() as i64 as u64;
    let mut r = rng::stream(seed, &[rng::purpose::SHADOWING, cell, q(rx[0]), q(rx[1]), q(rx[2])]);
    (0..trials)
        .map(|_| sigma_db * r.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Per-trial secrecy capacities of a transmitter at `tx` (cell `cell`):
/// best access point against the worst eavesdropper.
pub fn capacity_samples(
    tx: [f64; 3],
    cell: u64,
    access_points: &[[f64; 3]],
    eavesdroppers: &[[f64; 3]],
    model: &PropagationModel,
    trials: usize,
    seed: u64,
) -> Vec<f64> {
    let sigma = model.shadowing_sigma_db;
    let per_rx = |rx: &[f64; 3]| -> (f64, Vec<f64>) {
        (model.mean_snr_db(tx, *rx), shadowing_draws(seed, cell, *rx, sigma, trials))
    };
    let aps: Vec<_> = access_points.iter().map(per_rx).collect();
    let eves: Vec<_> = eavesdroppers.iter().map(per_rx).collect();
    (0..trials)
        .map(|t| {
            let best = |set: &[(f64, Vec<f64>)]| set.iter().map(|(m, x)| m - x[t]).fold(f64::NEG_INFINITY, f64::max);
            secrecy_capacity(best(&aps), best(&eves))
        })
        .collect()
}

pub fn outage_secrecy_rate(
    tx: [f64; 3],
    cell: u64,
    scenario: &SecrecyScenario,
    model: &PropagationModel,
    seed: u64,
) -> Result<f64, SecrecyError> {
    scenario.validate()?;
    model.validate()?;
    let eves = scenario.eavesdroppers.positions();
    let mut s = capacity_samples(tx, cell, &scenario.access_points, &eves, model, scenario.trials, seed);
    Ok(outage_quantile(&mut s, scenario.epsilon))
}

pub fn quantize_level(rate: f64, edges: &[f64; 4]) -> u8 {
    edges.iter().filter(|e| rate >= **e).count() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapCell {
    pub x: f64,
    pub y: f64,
    pub rate: f64,
    pub level: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecrecyMap {
    pub nx: usize,
    pub ny: usize,
    pub epsilon: f64,
    /// Row-major, `iy * nx + ix`.
    pub cells: Vec<MapCell>,
}

impl SecrecyMap {
    pub fn cell(&self, ix: usize, iy: usize) -> &MapCell {
        &self.cells[iy * self.nx + ix]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,rate,level\n");
        for c in &self.cells {
            let _ = writeln!(s, "{:.3},{:.3},{:.6},{}", c.x, c.y, c.rate, c.level);
        }
        s
    }

    /// Binary PGM, one pixel per cell, gray value = level, top row = max y.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n4\n", self.nx, self.ny).into_bytes();
        for iy in (0..self.ny).rev() {
            for ix in 0..self.nx {
                out.push(self.cell(ix, iy).level);
            }
        }
        out
    }
}

/// Evaluates every cell; `jobs` bounds the worker threads (None = rayon
/// default). Results do not depend on `jobs`.
pub fn build_map(
    scenario: &SecrecyScenario,
    model: &PropagationModel,
    seed: u64,
    jobs: Option<usize>,
) -> Result<SecrecyMap, SecrecyError> {
    scenario.validate()?;
    model.validate()?;
    let (nx, ny) = scenario.grid.dims();
    let eves = scenario.eavesdroppers.positions();
    let eval = || -> Vec<MapCell> {
        (0..nx * ny)
            .into_par_iter()
            .map(|i| {
                let (ix, iy) = (i % nx, i / nx);
                let tx = scenario.grid.center(ix, iy);
                let mut s = capacity_samples(tx, i as u64, &scenario.access_points, &eves, model, scenario.trials, seed);
                let rate = outage_quantile(&mut s, scenario.epsilon);
                MapCell {
                    x: tx[0],
                    y: tx[1],
                    rate,
                    level: quantize_level(rate, &scenario.level_edges),
                }
            })
            .collect()
    };
    let cells = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| SecrecyError::Pool(e.to_string()))?
            .install(eval),
        None => eval(),
    };
    Ok(SecrecyMap {
        nx,
        ny,
        epsilon: scenario.epsilon,
        cells,
    })
}

/// Builds a map from measured samples instead of the model. Each CSV row is
/// `cell,snr_bob_db,snr_eve_db`; rows of one cell are its trials.
pub fn map_from_samples(csv: &str, scenario: &SecrecyScenario) -> Result<SecrecyMap, SecrecyError> {
    let (nx, ny) = scenario.grid.dims();
    if nx == 0 || ny == 0 {
        return Err(SecrecyError::EmptyGrid);
    }
    if !(scenario.epsilon > 0.0 && scenario.epsilon < 1.0) {
        return Err(SecrecyError::BadEpsilon(scenario.epsilon));
    }
    let mut per_cell: Vec<Vec<f64>> = vec![Vec::new(); nx * ny];
    for (i, line) in csv.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("cell") {
            continue;
        }
        let err = |msg: String| SecrecyError::Samples { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(err(format!("expected 3 fields, got {}", f.len())));
        }
        let cell: usize = f[0].parse().map_err(|e| err(format!("cell: {e}")))?;
        let b: f64 = f[1].parse().map_err(|e| err(format!("snr_bob_db: {e}")))?;
        let e: f64 = f[2].parse().map_err(|e| err(format!("snr_eve_db: {e}")))?;
        let slot = per_cell.get_mut(cell).ok_or_else(|| err(format!("cell {cell} outside grid")))?;
        slot.push(secrecy_capacity(b, e));
    }
    let cells = per_cell
        .into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            let c = scenario.grid.center(i % nx, i / nx);
            let rate = if s.is_empty() { 0.0 } else { outage_quantile(&mut s, scenario.epsilon) };
            MapCell {
                x: c[0],
                y: c[1],
                rate,
                level: quantize_level(rate, &scenario.level_edges),
            }
        })
        .collect();
    Ok(SecrecyMap {
        nx,
        ny,
        epsilon: scenario.epsilon,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room(aps: Vec<[f64; 3]>, n: usize) -> SecrecyScenario {
        SecrecyScenario {
            access_points: aps,
            eavesdroppers: Eavesdroppers::Fixed {
                positions: vec![[18.0, 18.0, 0.0]],
            },
            epsilon: 0.1,
            grid: Grid {
                min: [0.0, 0.0],
                max: [n as f64, n as f64],
                resolution_m: 1.0,
                height_m: 0.0,
            },
            trials: 1_000,
            level_edges: DEFAULT_LEVEL_EDGES,
        }
    }

    #[test]
    fn snr_examples() {
        let m = PropagationModel {
            pl0_db: 40.0,
            tx_power_dbm: 0.0,
            noise_floor_dbm: -70.0,
            shadowing_sigma_db: 0.0,
            ..Default::default()
        };
        let o = [0.0; 3];
        assert!((snr_at(o, [1.0, 0.0, 0.0], &m, 0.0) - 30.0).abs() < 1e-12);
        assert!((snr_at(o, [10.0, 0.0, 0.0], &m, 0.0) - 10.0).abs() < 1e-12);
        assert_eq!(snr_at(o, o, &m, 0.0), snr_at(o, [0.1, 0.0, 0.0], &m, 0.0));
    }

    #[test]
    fn shadowing_std_matches_sigma() {
        let x = shadowing_draws(3, 0, [1.0, 2.0, 0.0], 4.0, 100_000);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt();
        assert!((sd - 4.0).abs() < 0.1, "{sd}");
    }

    #[test]
    fn deterministic_capacity() {
        let c = secrecy_capacity(30.0, 10.0);
        assert!((c - (1001f64.log2() - 11f64.log2())).abs() < 1e-12);
        assert!((c - 6.507).abs() < 1e-3);
        assert_eq!(secrecy_capacity(10.0, 30.0), 0.0);
    }

    #[test]
    fn quantile_definition() {
        let mut s: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        assert_eq!(outage_quantile(&mut s, 0.1), 2.0);
        let mut s: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        assert_eq!(outage_quantile(&mut s, 0.5), 6.0);
    }

    #[test]
    fn levels() {
        let e = DEFAULT_LEVEL_EDGES;
        assert_eq!(
            [0.0, 0.49, 0.5, 1.0, 1.99, 2.0, 3.9, 4.0, 9.0].map(|r| quantize_level(r, &e)),
            [0, 0, 1, 2, 2, 3, 3, 4, 4]
        );
    }

    #[test]
    fn eavesdropper_on_the_access_point_gets_nothing() {
        let mut s = room(vec![[5.0, 5.0, 0.0]], 4);
        s.eavesdroppers = Eavesdroppers::Fixed {
            positions: vec![[5.0, 5.0, 0.0]],
        };
        let m = build_map(&s, &PropagationModel::default(), 1, None).unwrap();
        assert!(m.cells.iter().all(|c| c.rate == 0.0 && c.level == 0));
    }

    #[test]
    fn one_cell_grid_is_the_cell_rate() {
        let s = room(vec![[2.0, 2.0, 0.0]], 1);
        let m = build_map(&s, &PropagationModel::default(), 9, None).unwrap();
        let r = outage_secrecy_rate(s.grid.center(0, 0), 0, &s, &PropagationModel::default(), 9).unwrap();
        assert_eq!(m.cells.len(), 1);
        assert_eq!(m.cells[0].rate, r);
    }

    #[test]
    fn second_access_point_never_hurts() {
        let model = PropagationModel::default();
        let one = build_map(&room(vec![[2.0, 2.0, 0.0]], 6), &model, 4, None).unwrap();
        let two = build_map(&room(vec![[2.0, 2.0, 0.0], [5.0, 1.0, 0.0]], 6), &model, 4, None).unwrap();
        for (a, b) in one.cells.iter().zip(&two.cells) {
            assert!(b.rate >= a.rate && b.level >= a.level);
        }
    }

    #[test]
    fn jobs_do_not_change_the_map() {
        let s = room(vec![[2.0, 2.0, 0.0]], 5);
        let m = PropagationModel::default();
        assert_eq!(build_map(&s, &m, 2, Some(1)).unwrap(), build_map(&s, &m, 2, Some(4)).unwrap());
    }

    #[test]
    fn validation() {
        let mut s = room(vec![], 2);
        assert_eq!(s.validate(), Err(SecrecyError::NoAccessPoints));
        s.access_points.push([0.0; 3]);
        s.epsilon = 1.0;
        assert_eq!(s.validate(), Err(SecrecyError::BadEpsilon(1.0)));
        s.epsilon = 0.1;
        s.grid.max = [0.0, 0.0];
        assert_eq!(s.validate(), Err(SecrecyError::EmptyGrid));
    }

    #[test]
    fn pgm_header_and_size() {
        let s = room(vec![[2.0, 2.0, 0.0]], 3);
        let m = build_map(&s, &PropagationModel::default(), 2, None).unwrap();
        let p = m.to_pgm();
        assert!(p.starts_with(b"P5\n3 3\n4\n"));
        assert_eq!(p.len(), b"P5\n3 3\n4\n".len() + 9);
    }

    #[test]
    fn samples_csv() {
        let s = room(vec![[0.0; 3]], 1);
        let csv = "cell,snr_bob_db,snr_eve_db\n0,30,10\n0,30,10\n";
        let m = map_from_samples(csv, &s).unwrap();
        assert!((m.cells[0].rate - secrecy_capacity(30.0, 10.0)).abs() < 1e-12);
        assert!(matches!(map_from_samples("0,1\n", &s), Err(SecrecyError::Samples { line: 1, .. })));
    }
}
