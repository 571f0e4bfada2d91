//! Cycle-level model of an output-stationary systolic array of sign-select
//! processing engines (8-bit activations, ternary weights, 32-bit
//! accumulators).
//!
//! Each output tile of `R x C` accumulators is computed in one pass:
//! activations enter from the left edge one row per PE row, skewed by one
//! cycle per row; weights enter from the top edge, skewed by one cycle per
//! column. PE `(r, c)` sees operand index `k = t - r - c` at cycle `t`. After
//! the last operand reaches the bottom-right PE the accumulators are read out
//! one PE row per cycle.
//!
//! Cycle model per tile: `K + (R - 1) + (C - 1)` streaming cycles plus `R`
//! drain cycles. The fill and drain constants are modeling conventions, not
//! measured hardware behaviour.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_depth, AccMatrix, ActivationMatrix, Matrix, PackedTernaryMatrix, Ternary};

pub const REPORTED_AREA_RATIO: f64 = 15.0;
pub const REPORTED_POWER_RATIO: f64 = 12.0;

/// Textual description of the cycle model, echoed in reports.
pub const CYCLE_MODEL: &str =
    "output-stationary; per tile K + (R-1) + (C-1) stream/fill cycles + R drain cycles; fill/drain are conventions";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    /// Reported area advantage over a full-precision array. Metadata only.
    pub area_ratio: f64,
    /// Reported power advantage. Metadata only.
    pub power_ratio: f64,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        ArrayConfig {
            rows: 8,
            cols: 8,
            area_ratio: REPORTED_AREA_RATIO,
            power_ratio: REPORTED_POWER_RATIO,
        }
    }
}

impl ArrayConfig {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        let cfg = ArrayConfig {
            rows,
            cols,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidSpec(format!(
                "array must be at least 1x1, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.area_ratio > 0.0 && self.power_ratio > 0.0) {
            return Err(Error::InvalidSpec("reported ratios must be positive".into()));
        }
        Ok(())
    }

    pub fn pe_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Cycles for one tile at depth `k`.
    pub fn tile_cycles(&self, k: usize) -> u64 {
        (k + (self.rows - 1) + (self.cols - 1) + self.rows) as u64
    }
}

/// Registers of one processing engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PeState {
    pub accumulator: i32,
    pub a_reg: Option<u8>,
    pub b_reg: Option<Ternary>,
}

/// One multiplier-free MAC: the weight's sign selects `+a`, `-a` or nothing.
#[inline]
pub fn pe_step(a: u8, b: Ternary, acc: i32) -> i32 {
    b.apply(acc, a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSchedule {
    pub tiles: Vec<Tile>,
    pub total_cycles: u64,
}

/// Splits an `M x N` output into array-sized tiles, row-major over tiles.
/// K is never split.
pub fn schedule_tiles(m: usize, n: usize, k: usize, cfg: &ArrayConfig) -> TileSchedule {
    let per_tile = cfg.tile_cycles(k);
    let mut tiles = Vec::new();
    for row0 in (0..m).step_by(cfg.rows) {
        for col0 in (0..n).step_by(cfg.cols) {
            tiles.push(Tile {
                row0,
                col0,
                rows: cfg.rows.min(m - row0),
                cols: cfg.cols.min(n - col0),
                cycles: per_tile,
            });
        }
    }
    let total_cycles = per_tile * tiles.len() as u64;
    TileSchedule {
        tiles,
        total_cycles,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub output: AccMatrix,
    pub cycles: u64,
    pub macs: u64,
    pub pe_utilization: f64,
    pub tiles: usize,
}

/// Machine-readable summary of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub tiles: usize,
    pub cycles: u64,
    pub macs: u64,
    pub utilization: f64,
    pub reported_area_ratio: f64,
    pub reported_power_ratio: f64,
    pub cycle_model: String,
}

impl SimResult {
    pub fn report(&self, k: usize, cfg: &ArrayConfig) -> SimReport {
        SimReport {
            m: self.output.rows(),
            n: self.output.cols(),
            k,
            tiles: self.tiles,
            cycles: self.cycles,
            macs: self.macs,
            utilization: self.pe_utilization,
            reported_area_ratio: cfg.area_ratio,
            reported_power_ratio: cfg.power_ratio,
            cycle_model: CYCLE_MODEL.to_string(),
        }
    }
}

struct Array {
    rows: usize,
    cols: usize,
    pes: Vec<PeState>,
}

impl Array {
    fn new(rows: usize, cols: usize) -> Self {
        Array {
            rows,
            cols,
            pes: vec![PeState::default(); rows * cols],
        }
    }

    /// Shifts operands one hop right/down, injects the edge values and fires
    /// every PE holding a valid operand pair. Returns the MACs performed.
    fn step(&mut self, left: &[Option<u8>], top: &[Option<Ternary>], bound: i64) -> Result<u64> {
        let (rows, cols) = (self.rows, self.cols);
        // Walk from the far corner so each PE reads its neighbour's previous value.
        for r in (0..rows).rev() {
            for c in (0..cols).rev() {
                let a = if c == 0 { left[r] } else { self.pes[r * cols + c - 1].a_reg };
                let b = if r == 0 { top[c] } else { self.pes[(r - 1) * cols + c].b_reg };
                let pe = &mut self.pes[r * cols + c];
                pe.a_reg = a;
                pe.b_reg = b;
            }
        }
        let mut macs = 0;
        for pe in &mut self.pes {
            if let (Some(a), Some(b)) = (pe.a_reg, pe.b_reg) {
                pe.accumulator = pe_step(a, b, pe.accumulator);
                if (pe.accumulator as i64).abs() > bound {
                    return Err(Error::Invariant(format!(
                        "accumulator {} exceeds bound {bound}",
                        pe.accumulator
                    )));
                }
                macs += 1;
            }
        }
        Ok(macs)
    }
}

/// Runs the full GEMM through the cycle-level array model.
pub fn simulate(a: &ActivationMatrix, b: &PackedTernaryMatrix, cfg: &ArrayConfig) -> Result<SimResult> {
    cfg.validate()?;
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "inner dimensions differ: A has {} columns, B has {} rows",
            a.cols(),
            b.rows()
        )));
    }
    let (m, n, k) = (a.rows(), b.cols(), b.rows());
    check_depth(k)?;
    b.validate()?;

    let schedule = schedule_tiles(m, n, k, cfg);
    let (pr, pc) = (cfg.rows, cfg.cols);
    let bound = (k as i64) * 255;
    let mut out: AccMatrix = Matrix::zeros(m, n);
    let mut cycles = 0u64;
    let mut macs = 0u64;
    let mut left = vec![None; pr];
    let mut top = vec![None; pc];

    for tile in &schedule.tiles {
        let mut array = Array::new(pr, pc);
        let stream = k + (pr - 1) + (pc - 1);
        for t in 0..stream {
            for (r, slot) in left.iter_mut().enumerate() {
                *slot = match t.checked_sub(r) {
                    Some(p) if p < k && r < tile.rows => Some(a.get(tile.row0 + r, p)),
                    _ => None,
                };
            }
            for (c, slot) in top.iter_mut().enumerate() {
                *slot = match t.checked_sub(c) {
                    Some(p) if p < k && c < tile.cols => Some(b.get(p, tile.col0 + c)?),
                    _ => None,
                };
            }
            macs += array.step(&left, &top, bound)?;
            cycles += 1;
        }
        // Drain: one PE row leaves the array per cycle.
        for r in 0..pr {
            if r < tile.rows {
                for c in 0..tile.cols {
                    out.set(tile.row0 + r, tile.col0 + c, array.pes[r * pc + c].accumulator);
                }
            }
            cycles += 1;
        }
    }

    if cycles != schedule.total_cycles {
        return Err(Error::Invariant(format!(
            "simulated {cycles} cycles, schedule predicts {}",
            schedule.total_cycles
        )));
    }
    if macs != (m * n * k) as u64 {
        return Err(Error::Invariant(format!("performed {macs} MACs, expected {}", m * n * k)));
    }
    let pe_utilization = macs as f64 / (cycles as f64 * cfg.pe_count() as f64);
    Ok(SimResult {
        output: out,
        cycles,
        macs,
        pe_utilization,
        tiles: schedule.tiles.len(),
    })
}
