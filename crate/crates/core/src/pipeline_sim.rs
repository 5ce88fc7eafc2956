//! Cycle-level model of the pipelined matrix-vector dataflow.
//!
//! Each weight row `w_i` is concatenated with the input `d` into a `2n`-word
//! reorganized row. Rows stream from RAM into an input buffer on the load
//! clock (`load_bandwidth` words per load cycle) and are consumed by the
//! processing units (PUs) on an independent compute clock:
//!
//! - a row becomes eligible once all of its words are buffered;
//! - row `i` starts at least one compute cycle after row `i - 1`;
//! - a PU retires one MAC per compute cycle, so a row occupies it for `n`
//!   cycles, after which the row's words leave the buffer.
//!
//! With every row buffered up front and at least `m` PUs, an `m x n` GEMV
//! takes `n + m - 1` compute cycles. Stall cycles are the compute cycles
//! spent beyond that data-ready schedule.
//!
//! The numeric result never depends on the timing parameters.

use std::fmt;
use std::ops::AddAssign;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mlp::{Activation, SigmoidTable};
use crate::quant::{Codebook, QuantizedTensor};
use crate::shift_arith::{ArithMode, FixedPointValue, OpCounts, ShiftMultiplier, ACTIVATION_FRAC_BITS};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Period of the input-buffer load clock, ns.
    pub load_clock_period_ns: f64,
    /// Period of the compute clock, ns.
    pub compute_clock_period_ns: f64,
    /// Words moved from RAM into the buffer per load cycle.
    pub load_bandwidth_words: usize,
    pub buffer_capacity_words: usize,
    pub pu_count: usize,
    /// When set, weights already sit in the buffer and only the data vector
    /// is loaded (once per GEMV).
    pub weights_resident: bool,
}

impl Default for PipelineConfig {
    /// 300 ns loads against 500 ns compute cycles, one 784-wide reorganized
    /// row per load cycle, and a PU for every hidden unit of a 784-128-10 MLP.
    fn default() -> Self {
        Self {
            load_clock_period_ns: 300.0,
            compute_clock_period_ns: 500.0,
            load_bandwidth_words: 2 * 784,
            buffer_capacity_words: 1 << 18,
            pu_count: 128,
            weights_resident: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let period_ok = |p: f64| p.is_finite() && p > 0.0;
        if !period_ok(self.load_clock_period_ns) || !period_ok(self.compute_clock_period_ns) {
            return Err(Error::InvalidConfig(
                "clock periods must be positive and finite".into(),
            ));
        }
        if self.load_bandwidth_words == 0 || self.buffer_capacity_words == 0 || self.pu_count == 0
        {
            return Err(Error::InvalidConfig(
                "bandwidth, buffer capacity and PU count must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "load_clock_period_ns={}", self.load_clock_period_ns)?;
        writeln!(f, "compute_clock_period_ns={}", self.compute_clock_period_ns)?;
        writeln!(f, "load_bandwidth_words={}", self.load_bandwidth_words)?;
        writeln!(f, "buffer_capacity_words={}", self.buffer_capacity_words)?;
        writeln!(f, "pu_count={}", self.pu_count)?;
        writeln!(f, "weights_resident={}", self.weights_resident)
    }
}

impl FromStr for PipelineConfig {
    type Err = Error;

    /// `key=value` lines; blank lines and `#` comments are ignored. Missing
    /// keys keep their defaults.
    fn from_str(text: &str) -> Result<Self> {
        let mut config = PipelineConfig::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(lineno, format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::parse(lineno, format!("bad value {value:?} for {key}"));
            match key {
                "load_clock_period_ns" => config.load_clock_period_ns = value.parse().map_err(|_| bad())?,
                "compute_clock_period_ns" => {
                    config.compute_clock_period_ns = value.parse().map_err(|_| bad())?
                }
                "load_bandwidth_words" => config.load_bandwidth_words = value.parse().map_err(|_| bad())?,
                "buffer_capacity_words" => {
                    config.buffer_capacity_words = value.parse().map_err(|_| bad())?
                }
                "pu_count" => config.pu_count = value.parse().map_err(|_| bad())?,
                "weights_resident" => config.weights_resident = value.parse().map_err(|_| bad())?,
                other => return Err(Error::parse(lineno, format!("unknown key {other:?}"))),
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// Cycle, stall and operation accounting for one or more simulated GEMVs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimReport {
    pub compute_cycles: u64,
    pub load_cycles: u64,
    pub stall_cycles: u64,
    pub wall_time_ns: f64,
    pub ops: OpCounts,
}

impl AddAssign for SimReport {
    /// Sequential composition: cycles and wall time add up.
    fn add_assign(&mut self, rhs: Self) {
        self.compute_cycles += rhs.compute_cycles;
        self.load_cycles += rhs.load_cycles;
        self.stall_cycles += rhs.stall_cycles;
        self.wall_time_ns += rhs.wall_time_ns;
        self.ops += rhs.ops;
    }
}

impl fmt::Display for SimReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "compute_cycles={} load_cycles={} stall_cycles={} wall_time_ns={:.3} shifts={} adds={}",
            self.compute_cycles,
            self.load_cycles,
            self.stall_cycles,
            self.wall_time_ns,
            self.ops.shifts,
            self.ops.adds
        )
    }
}

/// A weight row paired with the data vector: the `2n`-word unit of work.
#[derive(Debug, Clone, Copy)]
pub struct ReorganizedRow<'a> {
    pub weight_codes: &'a [u32],
    pub data_values: &'a [FixedPointValue],
}

impl ReorganizedRow<'_> {
    pub fn len(&self) -> usize {
        self.weight_codes.len() + self.data_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits `weights` (m x n) into m rows, each paired with `data` (length n).
pub fn preprocess<'a>(
    weights: &'a QuantizedTensor,
    data: &'a [FixedPointValue],
) -> Result<Vec<ReorganizedRow<'a>>> {
    let (rows, cols) = weights.matrix_dims()?;
    if cols != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "{rows}x{cols} weights against data of length {}",
            data.len()
        )));
    }
    Ok((0..rows)
        .map(|i| ReorganizedRow {
            weight_codes: weights.row(i),
            data_values: data,
        })
        .collect())
}

/// One line of the optional per-compute-cycle trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub cycle: u64,
    /// `(pu, row)` pairs busy during this cycle.
    pub active: Vec<(usize, usize)>,
    pub buffer_words: usize,
    /// The next row could have started but was not yet buffered.
    pub stalled: bool,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cycle={} buffer={} active=", self.cycle, self.buffer_words)?;
        if self.active.is_empty() {
            write!(f, "-")?;
        }
        for (k, (pu, row)) in self.active.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "pu{pu}:row{row}")?;
        }
        if self.stalled {
            write!(f, " stall")?;
        }
        Ok(())
    }
}

/// Timing of one GEMV; separate from the arithmetic so it can be reused for
/// layers of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub row_starts: Vec<u64>,
    pub report: SimReport,
    pub trace: Vec<TraceEntry>,
}

/// Start cycles when every row is buffered at time zero.
fn ideal_cycles(rows: usize, cols: usize, pus: usize) -> u64 {
    if rows == 0 || cols == 0 {
        return 0;
    }
    let mut starts: Vec<u64> = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut s = i as u64;
        if i >= pus {
            s = s.max(starts[i - pus] + cols as u64);
        }
        if i > 0 {
            s = s.max(starts[i - 1] + 1);
        }
        starts.push(s);
    }
    starts[rows - 1] + cols as u64
}

/// Simulates the load and compute clock domains for an `rows x cols` GEMV.
pub fn schedule_gemv(
    rows: usize,
    cols: usize,
    config: &PipelineConfig,
    trace: bool,
) -> Result<Schedule> {
    config.validate()?;
    let row_words = 2 * cols;
    if row_words > config.buffer_capacity_words {
        return Err(Error::InvalidConfig(format!(
            "buffer of {} words cannot hold a {row_words}-word row",
            config.buffer_capacity_words
        )));
    }
    if rows == 0 || cols == 0 {
        return Ok(Schedule {
            row_starts: vec![0; rows],
            report: SimReport::default(),
            trace: Vec::new(),
        });
    }

    // Words each row pulls from RAM, and the running totals.
    let demand: Vec<usize> = (0..rows)
        .map(|i| match (config.weights_resident, i) {
            (false, _) => row_words,
            (true, 0) => cols,
            (true, _) => 0,
        })
        .collect();
    let mut cumulative = Vec::with_capacity(rows);
    let mut total = 0usize;
    for &d in &demand {
        total += d;
        cumulative.push(total);
    }

    let t_load = config.load_clock_period_ns;
    let t_compute = config.compute_clock_period_ns;
    let bandwidth = config.load_bandwidth_words;
    let capacity = config.buffer_capacity_words;

    let mut delivered = 0usize;
    let mut freed = 0usize;
    let mut next_edge = 0u64;
    let mut last_load_edge: Option<u64> = None;
    let mut buffered_rows = 0usize; // rows whose words are all delivered

    let mut starts: Vec<u64> = Vec::with_capacity(rows);
    let mut pu_of_row: Vec<usize> = Vec::with_capacity(rows);
    let mut pu_free_at = vec![0u64; config.pu_count];
    let mut next_free_row = 0usize; // next row whose words leave the buffer
    let mut entries = Vec::new();

    let mut load_edges_until = |limit: f64,
                                inclusive: bool,
                                delivered: &mut usize,
                                freed: usize,
                                buffered_rows: &mut usize| {
        loop {
            let t = next_edge as f64 * t_load;
            let due = if inclusive { t <= limit } else { t < limit };
            if !due || *delivered == total {
                break;
            }
            let space = capacity - (*delivered - freed);
            let amount = bandwidth.min(space).min(total - *delivered);
            if amount > 0 {
                *delivered += amount;
                last_load_edge = Some(next_edge);
            }
            while *buffered_rows < rows && cumulative[*buffered_rows] <= *delivered {
                *buffered_rows += 1;
            }
            next_edge += 1;
        }
    };

    let mut cycle = 0u64;
    loop {
        let now = cycle as f64 * t_compute;
        load_edges_until(now, false, &mut delivered, freed, &mut buffered_rows);
        while next_free_row < starts.len() && starts[next_free_row] + cols as u64 <= cycle {
            freed += demand[next_free_row];
            next_free_row += 1;
        }
        if next_free_row == rows {
            break;
        }
        load_edges_until(now, true, &mut delivered, freed, &mut buffered_rows);

        let mut stalled = false;
        let next_row = starts.len();
        if next_row < rows && starts.last().is_none_or(|&s| s < cycle) {
            // PUs free up in row order, so row i reuses the PU of row i - pu_count
            let pu = if next_row < config.pu_count {
                next_row
            } else {
                pu_of_row[next_row - config.pu_count]
            };
            if pu_free_at[pu] <= cycle {
                if next_row < buffered_rows {
                    starts.push(cycle);
                    pu_of_row.push(pu);
                    pu_free_at[pu] = cycle + cols as u64;
                } else {
                    stalled = true;
                }
            }
        }

        if trace {
            let active = (next_free_row..starts.len())
                .filter(|&r| starts[r] <= cycle && cycle < starts[r] + cols as u64)
                .map(|r| (pu_of_row[r], r))
                .collect();
            entries.push(TraceEntry {
                cycle,
                active,
                buffer_words: delivered - freed,
                stalled,
            });
        }
        cycle += 1;
    }

    let compute_cycles = cycle;
    let load_cycles = last_load_edge.map_or(0, |k| k + 1);
    let stall_cycles = compute_cycles - ideal_cycles(rows, cols, config.pu_count);
    let wall_time_ns = (load_cycles as f64 * t_load).max(compute_cycles as f64 * t_compute);
    Ok(Schedule {
        row_starts: starts,
        report: SimReport {
            compute_cycles,
            load_cycles,
            stall_cycles,
            wall_time_ns,
            ops: OpCounts::default(),
        },
        trace: entries,
    })
}

/// A configured accelerator: pipeline timing plus the shift-add datapath for
/// one codebook.
#[derive(Debug, Clone)]
pub struct Accelerator {
    config: PipelineConfig,
    engine: ShiftMultiplier,
    sigmoid: SigmoidTable,
}

impl Accelerator {
    pub fn new(config: PipelineConfig, codebook: &Codebook, mode: ArithMode) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            engine: ShiftMultiplier::new(codebook, mode)?,
            sigmoid: SigmoidTable::default(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn mode(&self) -> ArithMode {
        self.engine.mode()
    }

    fn check_rows(rows: &[ReorganizedRow<'_>]) -> Result<usize> {
        let n = rows.first().map_or(0, |r| r.weight_codes.len());
        for (i, r) in rows.iter().enumerate() {
            if r.weight_codes.len() != n || r.data_values.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} weights and {} data values, expected {n}",
                    r.weight_codes.len(),
                    r.data_values.len()
                )));
            }
        }
        Ok(n)
    }

    pub fn gemv(&self, rows: &[ReorganizedRow<'_>]) -> Result<(Vec<FixedPointValue>, SimReport)> {
        let (out, schedule) = self.gemv_traced(rows, false)?;
        Ok((out, schedule.report))
    }

    pub fn gemv_traced(
        &self,
        rows: &[ReorganizedRow<'_>],
        trace: bool,
    ) -> Result<(Vec<FixedPointValue>, Schedule)> {
        let n = Self::check_rows(rows)?;
        let mut schedule = schedule_gemv(rows.len(), n, &self.config, trace)?;
        let mut ops = OpCounts::default();
        let out = rows
            .iter()
            .map(|r| self.engine.dot(r.weight_codes, r.data_values, &mut ops))
            .collect::<Result<Vec<_>>>()?;
        schedule.report.ops = ops;
        Ok((out, schedule))
    }

    /// GEMV, bias add and activation. Activations take one compute cycle per
    /// output element after the GEMV drains.
    pub fn layer(
        &self,
        weights: &QuantizedTensor,
        bias: &[FixedPointValue],
        data: &[FixedPointValue],
        activation: Activation,
    ) -> Result<(Vec<FixedPointValue>, SimReport)> {
        let rows = preprocess(weights, data)?;
        if bias.len() != rows.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} biases for {} rows",
                bias.len(),
                rows.len()
            )));
        }
        let (sums, mut report) = self.gemv(&rows)?;
        let out = sums
            .iter()
            .zip(bias)
            .map(|(s, b)| {
                let pre = s.aligned_add(b)?;
                report.ops.adds += 1;
                Ok(self.activate(pre, activation))
            })
            .collect::<Result<Vec<_>>>()?;

        report.compute_cycles += out.len() as u64;
        report.wall_time_ns = report
            .wall_time_ns
            .max(report.compute_cycles as f64 * self.config.compute_clock_period_ns);
        Ok((out, report))
    }

    fn activate(&self, pre: FixedPointValue, activation: Activation) -> FixedPointValue {
        let narrow = |v: FixedPointValue| match self.mode() {
            ArithMode::Exact => v.round_to(ACTIVATION_FRAC_BITS),
            ArithMode::Truncate => v.truncate_to(ACTIVATION_FRAC_BITS),
        };
        match activation {
            Activation::Identity => narrow(pre),
            Activation::Sigmoid => {
                let y = self.sigmoid.eval(pre.to_f64());
                FixedPointValue::new(
                    (y * f64::from(1u32 << ACTIVATION_FRAC_BITS)).round() as i128,
                    ACTIVATION_FRAC_BITS,
                )
            }
        }
    }
}

/// Runs one GEMV in exact arithmetic.
pub fn simulate_gemv(
    rows: &[ReorganizedRow<'_>],
    config: &PipelineConfig,
    codebook: &Codebook,
) -> Result<(Vec<FixedPointValue>, SimReport)> {
    Accelerator::new(config.clone(), codebook, ArithMode::Exact)?.gemv(rows)
}

/// One MLP layer: `activation(W d + b)` in exact arithmetic.
pub fn simulate_layer(
    weights: &QuantizedTensor,
    bias: &[FixedPointValue],
    data: &[FixedPointValue],
    config: &PipelineConfig,
    codebook: &Codebook,
    activation: Activation,
) -> Result<(Vec<FixedPointValue>, SimReport)> {
    Accelerator::new(config.clone(), codebook, ArithMode::Exact)?.layer(weights, bias, data, activation)
}
