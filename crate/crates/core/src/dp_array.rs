//! The bitcell dot-product array and its dot-product line (DPL).
//!
//! Each column accumulates the XNOR results of its active cells onto the DPL
//! through the coupling capacitance `C_c`. The DPL can be split into units
//! (serial or parallel switches) so that only the units mapped by a layer load
//! the line, which raises the attenuation factor for small channel counts.

use crate::charge::ktc_sigma;
use crate::error::{config, usage, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Array geometry. Defaults describe the 1152x256 macro.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacroGeometry {
    pub n_rows: usize,
    pub n_cols: usize,
    pub rows_per_unit: usize,
    pub units_per_col: usize,
    pub cols_per_block: usize,
    pub n_blocks: usize,
}

impl Default for MacroGeometry {
    fn default() -> Self {
        Self {
            n_rows: 1152,
            n_cols: 256,
            rows_per_unit: 36,
            units_per_col: 32,
            cols_per_block: 4,
            n_blocks: 64,
        }
    }
}

impl MacroGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.rows_per_unit == 0 || self.units_per_col == 0 || self.cols_per_block == 0 {
            return config("geometry counts must be non-zero");
        }
        if self.n_rows != self.rows_per_unit * self.units_per_col {
            return config(format!(
                "n_rows {} != rows_per_unit {} x units_per_col {}",
                self.n_rows, self.rows_per_unit, self.units_per_col
            ));
        }
        if self.n_cols != self.cols_per_block * self.n_blocks {
            return config(format!(
                "n_cols {} != cols_per_block {} x n_blocks {}",
                self.n_cols, self.cols_per_block, self.n_blocks
            ));
        }
        Ok(())
    }

    /// Units needed to hold `rows` active rows.
    pub fn units_for_rows(&self, rows: usize) -> usize {
        rows.div_ceil(self.rows_per_unit).max(1)
    }
}

/// Electrical parameters of one column. All capacitances in farads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElectricalParams<T> {
    pub c_c: T,
    pub c_p_per_unit: T,
    /// Global-line routing parasitic of the parallel-split topology.
    pub c_p_glob: T,
    pub c_mb: T,
    pub c_adc: T,
    pub c_acc: T,
    pub v_ddl: T,
    pub v_ddh: T,
    pub temperature: f64,
}

impl<T: Scalar> Default for ElectricalParams<T> {
    fn default() -> Self {
        let ff = 1e-15;
        let c_c = 0.7 * ff;
        // SAR array (33 C_c) plus its routing parasitic; the rest of the 40 fF
        // DPL load belongs to the MBIW switches.
        let c_adc = 33.0 * c_c + 2.0 * ff;
        let c_mb = 40.0 * ff - c_adc;
        Self {
            c_c: T::lit(c_c),
            c_p_per_unit: T::lit(0.3 * ff),
            c_p_glob: T::lit(4.8 * ff),
            c_mb: T::lit(c_mb),
            c_adc: T::lit(c_adc),
            c_acc: T::lit(c_mb) + T::lit(c_adc),
            v_ddl: T::lit(0.4),
            v_ddh: T::lit(0.8),
            temperature: 300.0,
        }
    }
}

impl<T: Scalar> ElectricalParams<T> {
    /// Non-DP load on the DPL, `C_L = C_mb + C_adc`.
    pub fn c_l(&self) -> T {
        self.c_mb + self.c_adc
    }

    /// Sets the supply pair, keeping everything else.
    pub fn with_supplies(mut self, v_ddl: T, v_ddh: T) -> Self {
        self.v_ddl = v_ddl;
        self.v_ddh = v_ddh;
        self
    }

    pub fn validate(&self, geom: &MacroGeometry) -> Result<()> {
        let z = T::zero();
        if !(self.c_c > z && self.c_mb > z && self.c_adc > z && self.c_acc > z) {
            return config("C_c, C_mb, C_adc and C_acc must be positive");
        }
        if self.c_p_per_unit < z || self.c_p_glob < z {
            return config("parasitic capacitances must be non-negative");
        }
        if self.c_p_glob > self.c_p_per_unit * T::lit(geom.units_per_col as f64) {
            return config("C_p_glob cannot exceed the full-column parasitic units_per_col x C_p_per_unit");
        }
        if !(self.v_ddl > z && self.v_ddh > self.v_ddl) {
            return config("supplies must satisfy 0 < V_DDL < V_DDH");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DplVariant {
    Baseline,
    SerialSplit,
    ParallelSplit,
}

impl std::str::FromStr for DplVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Self::Baseline),
            "serial" | "serial-split" | "serialsplit" => Ok(Self::SerialSplit),
            "parallel" | "parallel-split" | "parallelsplit" => Ok(Self::ParallelSplit),
            other => config(format!("unknown topology '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DplTopology {
    pub variant: DplVariant,
    connected_units: usize,
}

impl DplTopology {
    pub fn baseline(geom: &MacroGeometry) -> Self {
        Self { variant: DplVariant::Baseline, connected_units: geom.units_per_col }
    }

    pub fn new(variant: DplVariant, connected_units: usize, geom: &MacroGeometry) -> Result<Self> {
        if variant == DplVariant::Baseline {
            return Ok(Self::baseline(geom));
        }
        if connected_units == 0 || connected_units > geom.units_per_col {
            return config(format!(
                "connected_units {connected_units} outside [1, {}]",
                geom.units_per_col
            ));
        }
        Ok(Self { variant, connected_units })
    }

    pub fn serial(connected_units: usize, geom: &MacroGeometry) -> Result<Self> {
        Self::new(DplVariant::SerialSplit, connected_units, geom)
    }

    pub fn parallel(connected_units: usize, geom: &MacroGeometry) -> Result<Self> {
        Self::new(DplVariant::ParallelSplit, connected_units, geom)
    }

    pub fn connected_units(&self) -> usize {
        self.connected_units
    }

    pub fn connected_rows(&self, geom: &MacroGeometry) -> usize {
        self.connected_units * geom.rows_per_unit
    }
}

/// Routing parasitic seen by the DPL for a topology.
///
/// Parallel split replaces the shared trunk of each unit segment by the global
/// line, so its local segments carry `C_p_per_unit - C_p_glob/units_per_col`.
pub fn routing_parasitic<T: Scalar>(
    params: &ElectricalParams<T>,
    geom: &MacroGeometry,
    topo: &DplTopology,
) -> T {
    let n = T::lit(topo.connected_units as f64);
    match topo.variant {
        DplVariant::Baseline | DplVariant::SerialSplit => n * params.c_p_per_unit,
        DplVariant::ParallelSplit => {
            let local = params.c_p_per_unit - params.c_p_glob / T::lit(geom.units_per_col as f64);
            n * local + params.c_p_glob
        }
    }
}

/// Total DPL capacitance during a DP phase, `N_dp C_c + C_p + C_L`.
pub fn dpl_capacitance<T: Scalar>(
    params: &ElectricalParams<T>,
    geom: &MacroGeometry,
    topo: &DplTopology,
) -> T {
    let n_dp = T::lit(topo.connected_rows(geom) as f64);
    n_dp * params.c_c + routing_parasitic(params, geom, topo) + params.c_l()
}

/// Charge-injection attenuation factor `C_c / (N_dp C_c + C_p + C_L)`.
pub fn alpha_eff<T: Scalar>(params: &ElectricalParams<T>, geom: &MacroGeometry, topo: &DplTopology) -> T {
    params.c_c / dpl_capacitance(params, geom, topo)
}

/// Ideal peak-to-peak DPL swing with `n_on` aligned rows.
pub fn max_swing<T: Scalar>(
    params: &ElectricalParams<T>,
    geom: &MacroGeometry,
    topo: &DplTopology,
    n_on: usize,
) -> Result<T> {
    let cap = topo.connected_rows(geom);
    if n_on > cap {
        return usage(format!("n_on {n_on} exceeds connected capacity {cap}"));
    }
    Ok(T::lit(2.0) * alpha_eff(params, geom, topo) * T::lit(n_on as f64) * params.v_ddl)
}

/// Binary weights of the array. Bit 1 acts as +1, bit 0 as -1.
///
/// Stored column-major as packed words so that a column read is contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightPlane {
    n_rows: usize,
    n_cols: usize,
    words_per_col: usize,
    words: Vec<u64>,
}

pub const WEIGHT_PLANE_MAGIC: &[u8; 4] = b"CIMW";
pub const WEIGHT_PLANE_VERSION: u16 = 1;
pub const WEIGHT_PLANE_HEADER_LEN: usize = 16;

impl WeightPlane {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        let words_per_col = n_rows.div_ceil(64);
        Self { n_rows, n_cols, words_per_col, words: vec![0; words_per_col * n_cols] }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        debug_assert!(row < self.n_rows && col < self.n_cols);
        let w = self.words[col * self.words_per_col + row / 64];
        (w >> (row % 64)) & 1 == 1
    }

    pub fn set(&mut self, row: usize, col: usize, bit: bool) {
        assert!(row < self.n_rows && col < self.n_cols, "weight index out of range");
        let w = &mut self.words[col * self.words_per_col + row / 64];
        if bit {
            *w |= 1 << (row % 64);
        } else {
            *w &= !(1 << (row % 64));
        }
    }

    /// Sign (+1 / -1) of the cell.
    pub fn sign(&self, row: usize, col: usize) -> i32 {
        if self.get(row, col) { 1 } else { -1 }
    }

    /// Serializes with the 16-byte `CIMW` header followed by a little-endian,
    /// row-major packed bit matrix (bit `r * n_cols + c`, LSB first).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(WEIGHT_PLANE_HEADER_LEN + self.payload_len());
        out.extend_from_slice(WEIGHT_PLANE_MAGIC);
        out.extend_from_slice(&WEIGHT_PLANE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_cols as u32).to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        let mut payload = vec![0u8; self.payload_len()];
        for r in 0..self.n_rows {
            for c in 0..self.n_cols {
                if self.get(r, c) {
                    let idx = r * self.n_cols + c;
                    payload[idx / 8] |= 1 << (idx % 8);
                }
            }
        }
        out.extend_from_slice(&payload);
        out
    }

    pub fn payload_len(&self) -> usize {
        (self.n_rows * self.n_cols).div_ceil(8)
    }

    /// Parses a serialized plane; returns the plane and the bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < WEIGHT_PLANE_HEADER_LEN {
            return Err(Error::Load("weight plane header truncated".into()));
        }
        if &bytes[0..4] != WEIGHT_PLANE_MAGIC {
            return Err(Error::Load("weight plane magic mismatch (expected CIMW)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != WEIGHT_PLANE_VERSION {
            return Err(Error::Load(format!("unsupported weight plane version {version}")));
        }
        let n_rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let n_cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        if bytes[14] != 0 || bytes[15] != 0 {
            return Err(Error::Load("weight plane reserved field must be zero".into()));
        }
        let mut plane = Self::zeros(n_rows, n_cols);
        let need = plane.payload_len();
        let payload = bytes
            .get(WEIGHT_PLANE_HEADER_LEN..WEIGHT_PLANE_HEADER_LEN + need)
            .ok_or_else(|| {
                Error::Load(format!(
                    "weight plane payload truncated: need {need} bytes, have {}",
                    bytes.len() - WEIGHT_PLANE_HEADER_LEN
                ))
            })?;
        let total = n_rows * n_cols;
        for idx in 0..total {
            if (payload[idx / 8] >> (idx % 8)) & 1 == 1 {
                plane.set(idx / n_cols, idx % n_cols, true);
            }
        }
        if total % 8 != 0 && payload[need - 1] >> (total % 8) != 0 {
            return Err(Error::Load("weight plane padding bits must be zero".into()));
        }
        Ok((plane, WEIGHT_PLANE_HEADER_LEN + need))
    }
}

/// One input bit-plane `X_i[k]` over the array rows. Rows past `bits.len()`
/// are inactive.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InputBitVector {
    pub bits: Vec<bool>,
}

impl InputBitVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Bit `k` of each unsigned input.
    pub fn from_inputs(inputs: &[u32], k: u32) -> Self {
        Self { bits: inputs.iter().map(|x| (x >> k) & 1 == 1).collect() }
    }

    pub fn n_on(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    fn check(&self, geom: &MacroGeometry, topo: &DplTopology) -> Result<()> {
        let cap = topo.connected_rows(geom);
        if let Some(last) = self.bits.iter().rposition(|b| *b) {
            if last >= cap {
                return config(format!(
                    "active row {last} lies outside the {} connected unit(s)",
                    topo.connected_units()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corner {
    SS,
    TT,
    FF,
}

impl Corner {
    /// Multiplier applied to settling time constants.
    pub fn tau_factor(self) -> f64 {
        match self {
            Corner::SS => 1.5,
            Corner::TT => 1.0,
            Corner::FF => 0.7,
        }
    }
}

impl std::str::FromStr for Corner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SS" => Ok(Corner::SS),
            "TT" => Ok(Corner::TT),
            "FF" => Ok(Corner::FF),
            other => config(format!("unknown corner '{other}'")),
        }
    }
}

/// Parametric settling-error model of split DPLs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettlingParams {
    /// Error amplitude before the exponential deficit, volts.
    pub e_max: f64,
    pub tau_serial: f64,
    pub tau_parallel: f64,
    /// DP pulse duration, seconds.
    pub t_dp: f64,
    pub corner: Corner,
    /// Same-polarity runs no longer than this do not disturb settling.
    pub run_threshold: usize,
}

impl Default for SettlingParams {
    fn default() -> Self {
        Self {
            e_max: 8e-3,
            tau_serial: 1.2e-9,
            tau_parallel: 0.36e-9,
            t_dp: 5e-9,
            corner: Corner::TT,
            run_threshold: 32,
        }
    }
}

impl SettlingParams {
    pub fn tau(&self, variant: DplVariant) -> Option<f64> {
        let base = match variant {
            DplVariant::Baseline => return None,
            DplVariant::SerialSplit => self.tau_serial,
            DplVariant::ParallelSplit => self.tau_parallel,
        };
        Some(base * self.corner.tau_factor())
    }
}

/// Injection polarity of each connected row: XNOR of input bit and weight bit.
pub fn polarity_pattern(weights: &WeightPlane, inputs: &InputBitVector, col: usize, rows: usize) -> Vec<i8> {
    (0..rows.min(weights.n_rows()))
        .map(|r| {
            let x = inputs.bits.get(r).copied().unwrap_or(false);
            if x == weights.get(r, col) { 1 } else { -1 }
        })
        .collect()
}

/// Longest run of equal polarity and the polarity of that run.
pub fn longest_run(pattern: &[i8]) -> (usize, i8) {
    longest_crossing_run(pattern, usize::MAX)
}

/// Longest run of equal polarity that spans at least two units of
/// `rows_per_unit` rows (every run qualifies when `rows_per_unit` is
/// `usize::MAX`), with its polarity.
pub fn longest_crossing_run(pattern: &[i8], rows_per_unit: usize) -> (usize, i8) {
    let mut best = (0usize, 0i8);
    let mut start = 0usize;
    for i in 0..=pattern.len() {
        if i == pattern.len() || pattern[i] != pattern[start] {
            if i > start {
                let len = i - start;
                let crosses = rows_per_unit == usize::MAX || start / rows_per_unit != (i - 1) / rows_per_unit;
                if crosses && len > best.0 {
                    best = (len, pattern[start]);
                }
            }
            start = i;
        }
    }
    best
}

/// Deterministic settling error for one DP phase, volts.
///
/// `E_max * exp(-T_dp / tau) * f_run * f_prox`, signed against the polarity of
/// the longest same-polarity run that crosses a unit boundary. `f_run` is zero
/// for runs up to the threshold and reaches one when the run covers half the
/// connected rows; `f_prox` is one when the target sits at mid-rail and falls
/// linearly to zero at the rails.
pub fn settling_error(
    pattern: &[i8],
    target: f64,
    v_ddh: f64,
    topo: &DplTopology,
    settling: &SettlingParams,
    rows_per_unit: usize,
) -> f64 {
    let Some(tau) = settling.tau(topo.variant) else {
        return 0.0;
    };
    if !settling.t_dp.is_finite() {
        return 0.0;
    }
    let (run, polarity) = longest_crossing_run(pattern, rows_per_unit);
    if run <= settling.run_threshold || pattern.is_empty() {
        return 0.0;
    }
    let half = (pattern.len() as f64 / 2.0).max(1.0);
    let f_run = (run as f64 / half).min(1.0);
    let mid = v_ddh / 2.0;
    let f_prox = (1.0 - (target - mid).abs() / mid).clamp(0.0, 1.0);
    let magnitude = settling.e_max * (-settling.t_dp / tau).exp() * f_run * f_prox;
    -(polarity as f64) * magnitude
}

/// Per-evaluation switches for the DP phase.
#[derive(Debug, Clone, Copy, Default)]
pub struct DpNonideality<'a> {
    pub settling: Option<&'a SettlingParams>,
    pub thermal: bool,
    /// Relative C_c deviation per row of this column.
    pub cell_mismatch: Option<&'a [f32]>,
}

/// Settled DPL voltage after one input bit-plane on column `col`:
/// `V_DDL (1 + alpha_eff * sum_i X_i[k] W_ij)` plus the enabled error terms,
/// clamped to the rails.
#[allow(clippy::too_many_arguments)]
pub fn dp_bit_plane<T: Scalar>(
    weights: &WeightPlane,
    inputs: &InputBitVector,
    col: usize,
    params: &ElectricalParams<T>,
    geom: &MacroGeometry,
    topo: &DplTopology,
    nonideal: &DpNonideality<'_>,
    rng: Option<&mut Rng>,
) -> Result<T> {
    if col >= weights.n_cols() {
        return usage(format!("column {col} outside plane with {} columns", weights.n_cols()));
    }
    inputs.check(geom, topo)?;
    let alpha = alpha_eff(params, geom, topo);
    let mut v = match nonideal.cell_mismatch {
        None => {
            let sum: i64 = inputs
                .bits
                .iter()
                .enumerate()
                .filter(|(_, x)| **x)
                .map(|(r, _)| weights.sign(r, col) as i64)
                .sum();
            params.v_ddl * (T::one() + alpha * T::lit(sum as f64))
        }
        Some(dev) => {
            let sum = T::compensated_sum(inputs.bits.iter().enumerate().filter(|(_, x)| **x).map(|(r, _)| {
                T::lit(weights.sign(r, col) as f64 * (1.0 + dev.get(r).copied().unwrap_or(0.0) as f64))
            }));
            params.v_ddl * (T::one() + alpha * sum)
        }
    };
    let v_ddh = params.v_ddh.to_f64_lossy();
    if let Some(settling) = nonideal.settling {
        let rows = topo.connected_rows(geom);
        let pattern = polarity_pattern(weights, inputs, col, rows);
        v = v + T::lit(settling_error(&pattern, v.to_f64_lossy(), v_ddh, topo, settling, geom.rows_per_unit));
    }
    if nonideal.thermal {
        if let Some(rng) = rng {
            let a = alpha.to_f64_lossy();
            let cell = a * ktc_sigma(params.c_c.to_f64_lossy(), params.temperature);
            let n_on = inputs.n_on() as f64;
            let line = ktc_sigma(dpl_capacitance(params, geom, topo).to_f64_lossy(), params.temperature);
            let sigma = (n_on * cell * cell + line * line).sqrt();
            v = v + T::lit(rng.normal(sigma));
        }
    }
    Ok(v.max(T::zero()).min(params.v_ddh))
}
