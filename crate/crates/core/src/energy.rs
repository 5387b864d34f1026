//! Parametric energy bookkeeping.
//!
//! Absolute values are calibration targets, not silicon constants; what the
//! model preserves is where energy goes and how it scales.

use std::fmt;

use crate::dp_array::{alpha_eff, DplTopology, ElectricalParams, MacroGeometry};
use crate::error::{usage, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EnergyCategory {
    DpDrive,
    DplPrecharge,
    ChargeShare,
    SaDecision,
    LadderDc,
    Register,
    ShiftRegister,
    Lmem,
    Leakage,
}

impl EnergyCategory {
    pub const ALL: [EnergyCategory; 9] = [
        Self::DpDrive,
        Self::DplPrecharge,
        Self::ChargeShare,
        Self::SaDecision,
        Self::LadderDc,
        Self::Register,
        Self::ShiftRegister,
        Self::Lmem,
        Self::Leakage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::DpDrive => "dp_drive",
            Self::DplPrecharge => "dpl_precharge",
            Self::ChargeShare => "charge_share",
            Self::SaDecision => "sa_decision",
            Self::LadderDc => "ladder_dc",
            Self::Register => "register",
            Self::ShiftRegister => "shift_register",
            Self::Lmem => "lmem",
            Self::Leakage => "leakage",
        }
    }
}

/// Per-event energies, joules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    pub sa_decision: f64,
    /// Ladder bias current and settling window per conversion.
    pub ladder_current: f64,
    pub ladder_time: f64,
    pub register_bit: f64,
    pub shift_register_bit: f64,
    pub lmem_access_128b: f64,
    pub leakage_per_idle_cycle: f64,
    /// Charge sharing between precharged nodes draws nothing from a supply.
    pub charge_share: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            sa_decision: 5e-15,
            ladder_current: 1e-3,
            ladder_time: 5e-9,
            register_bit: 2e-15,
            shift_register_bit: 1e-15,
            lmem_access_128b: 2e-12,
            leakage_per_idle_cycle: 0.1e-12,
            charge_share: 0.0,
        }
    }
}

/// Accumulated energy per category together with event counts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyLedger {
    joules: [f64; 9],
    events: [u64; 9],
}

impl EnergyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one event.
    pub fn add(&mut self, cat: EnergyCategory, joules: f64) {
        self.add_n(cat, 1, joules);
    }

    /// Records `n` events totalling `joules`.
    pub fn add_n(&mut self, cat: EnergyCategory, n: u64, joules: f64) {
        let i = cat as usize;
        self.joules[i] += joules;
        self.events[i] += n;
    }

    pub fn merge(&mut self, other: &EnergyLedger) {
        for i in 0..9 {
            self.joules[i] += other.joules[i];
            self.events[i] += other.events[i];
        }
    }

    pub fn energy(&self, cat: EnergyCategory) -> f64 {
        self.joules[cat as usize]
    }

    pub fn events(&self, cat: EnergyCategory) -> u64 {
        self.events[cat as usize]
    }

    pub fn total(&self) -> f64 {
        self.joules.iter().sum()
    }

    pub fn total_events(&self) -> u64 {
        self.events.iter().sum()
    }
}

impl fmt::Display for EnergyLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in EnergyCategory::ALL {
            writeln!(f, "{},{},{:.6e}", c.name(), self.events(c), self.energy(c))?;
        }
        write!(f, "total,{},{:.6e}", self.total_events(), self.total())
    }
}

/// Supply energy of one DP phase on one column: input lines driving `n_on`
/// cells to V_DDL while the DPL moves by `alpha * V_DDL * sum_s`,
/// `C_c V_DDL^2 (n_on - alpha sum_s^2)`.
pub fn dp_drive_energy<T: Scalar>(
    params: &ElectricalParams<T>,
    geom: &MacroGeometry,
    topo: &DplTopology,
    n_on: usize,
    sum_s: i64,
) -> f64 {
    let a = alpha_eff(params, geom, topo).to_f64_lossy();
    let v = params.v_ddl.to_f64_lossy();
    let c = params.c_c.to_f64_lossy();
    c * v * v * (n_on as f64 - a * (sum_s * sum_s) as f64)
}

/// Fractional DP drive-energy saving of the serial split over the baseline
/// line with `channels` 3x3 input channels fully aligned, at load `c_l`.
pub fn dp_energy_savings(params: &ElectricalParams<f64>, geom: &MacroGeometry, channels: usize, c_l: f64) -> Result<f64> {
    let rows = 9 * channels;
    if rows == 0 || rows > geom.n_rows {
        return usage(format!("{channels} channels do not fit the array"));
    }
    // redistribute the load between MBIW and ADC proportionally
    let scale = c_l / params.c_l();
    let p = ElectricalParams { c_mb: params.c_mb * scale, c_adc: params.c_adc * scale, ..*params };
    let split = DplTopology::serial(geom.units_for_rows(rows), geom)?;
    let base = DplTopology::baseline(geom);
    let n = rows as i64;
    let e_split = dp_drive_energy(&p, geom, &split, rows, n);
    let e_base = dp_drive_energy(&p, geom, &base, rows, n);
    Ok(1.0 - e_split / e_base)
}
