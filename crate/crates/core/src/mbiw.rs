//! Multi-bit input-and-weight (MBIW) accumulation.
//!
//! Inputs are processed bit-serially, LSB first: after each DP phase the DPL
//! (held on `C_mb + C_adc`) shares its charge with the accumulation capacitor
//! `C_acc`, halving the weight of everything accumulated so far. Weight bits
//! are then combined spatially by sharing adjacent column DPLs pairwise from
//! the LSB column to the MSB column.

use crate::charge::{ktc_sigma, share_pair, CapNode};
use crate::dp_array::ElectricalParams;
use crate::error::{config, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MbiwPhase {
    Dp,
    AccumulateIn,
    WeightSelfWeight,
    WeightPairShare,
    Done,
}

/// Sequencing state of one group of columns that form a multi-bit weight.
#[derive(Debug, Clone, PartialEq)]
pub struct MbiwState<T> {
    pub v_acc: Vec<T>,
    pub v_dpl: Vec<T>,
    phase: MbiwPhase,
    k: u32,
    r_in: u32,
    r_w: u32,
}

/// `(C_mb + C_adc) / (C_acc + C_mb + C_adc)`.
pub fn alpha_mb<T: Scalar>(params: &ElectricalParams<T>) -> T {
    params.c_l() / (params.c_acc + params.c_l())
}

impl<T: Scalar> MbiwState<T> {
    /// Fresh state in the first DP phase with every `C_acc` precharged to V_DDL.
    pub fn new(r_in: u32, r_w: u32, cols_per_block: usize, v_ddl: T) -> Result<Self> {
        if !(1..=8).contains(&r_in) {
            return config(format!("r_in {r_in} outside [1, 8]"));
        }
        if r_w == 0 || r_w as usize > cols_per_block {
            return config(format!("r_w {r_w} outside [1, {cols_per_block}]"));
        }
        let n = r_w as usize;
        Ok(Self { v_acc: vec![v_ddl; n], v_dpl: vec![v_ddl; n], phase: MbiwPhase::Dp, k: 0, r_in, r_w })
    }

    pub fn phase(&self) -> MbiwPhase {
        self.phase
    }

    /// Index of the input bit currently being processed.
    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn r_in(&self) -> u32 {
        self.r_in
    }

    pub fn r_w(&self) -> u32 {
        self.r_w
    }

    /// Closes the DP phase of bit `k`: the array is disconnected from the DPL
    /// before the accumulation switch may close.
    pub fn end_dp(&mut self) -> Result<()> {
        self.expect(MbiwPhase::Dp, "end_dp")?;
        self.phase = MbiwPhase::AccumulateIn;
        Ok(())
    }

    fn expect(&self, phase: MbiwPhase, op: &str) -> Result<()> {
        if self.phase != phase {
            return Err(Error::Sequencing(format!(
                "{op} requires phase {phase:?} but state is in {:?} (bit {})",
                self.phase, self.k
            )));
        }
        Ok(())
    }

    /// Folds the DP voltages of bit `k` into the accumulators.
    ///
    /// `V_acc,k = (1 - a) V_acc,k-1 + a v_dp,k + e_inj + e_leak`, with the DPL
    /// precharged back to V_DDL afterwards. With `r_in = 1` the accumulation is
    /// bypassed and the DP voltage is kept on the DPL as is.
    pub fn accumulate_input_bit(
        &mut self,
        v_dp: &[T],
        params: &ElectricalParams<T>,
        errors: &MbiwErrors,
        mut rng: Option<&mut Rng>,
    ) -> Result<()> {
        self.expect(MbiwPhase::AccumulateIn, "accumulate_input_bit")?;
        if v_dp.len() != self.v_acc.len() {
            return Err(Error::Usage(format!(
                "expected {} DP voltages, got {}",
                self.v_acc.len(),
                v_dp.len()
            )));
        }
        if self.r_in == 1 {
            self.v_dpl.copy_from_slice(v_dp);
            self.phase = MbiwPhase::WeightSelfWeight;
            return Ok(());
        }
        let v_ddl = params.v_ddl.to_f64_lossy();
        let v_ddh = params.v_ddh.to_f64_lossy();
        let c_acc = params.c_acc.to_f64_lossy();
        let c_total = (params.c_acc + params.c_l()).to_f64_lossy();
        for (acc, &vd) in self.v_acc.iter_mut().zip(v_dp) {
            let prev = acc.to_f64_lossy();
            let mut hold = CapNode::new(params.c_acc, *acc)?;
            let mut line = CapNode::new(params.c_l(), vd)?;
            let mut v = share_pair(&mut hold, &mut line);
            let vd = vd.to_f64_lossy();
            v = v + T::lit(errors.injection.error(vd, prev, v_ddl));
            if let Some(leak) = &errors.leakage {
                v = v + T::lit(leak.step_drift(prev, v_ddl, v_ddh, c_acc, self.r_in));
            }
            if errors.thermal {
                if let Some(rng) = rng.as_deref_mut() {
                    v = v + T::lit(rng.normal(ktc_sigma(c_total, params.temperature)));
                }
            }
            *acc = v.max(T::zero()).min(params.v_ddh);
        }
        for d in self.v_dpl.iter_mut() {
            *d = params.v_ddl;
        }
        self.k += 1;
        self.phase = if self.k == self.r_in {
            // the accumulated result is handed back to the DPL for the weight phase
            self.v_dpl.copy_from_slice(&self.v_acc);
            MbiwPhase::WeightSelfWeight
        } else {
            MbiwPhase::Dp
        };
        Ok(())
    }

    /// Runs the spatial weight accumulation and returns the voltage left on
    /// the MSB column's DPL.
    pub fn accumulate_weights(&mut self, params: &ElectricalParams<T>) -> Result<T> {
        self.expect(MbiwPhase::WeightSelfWeight, "accumulate_weights")?;
        let v = accumulate_weights(&self.v_dpl, params)?;
        self.phase = MbiwPhase::WeightPairShare;
        for d in self.v_dpl.iter_mut() {
            *d = v;
        }
        self.phase = MbiwPhase::Done;
        Ok(v)
    }
}

/// Physical pairwise-share sequence over the column DPL voltages of one weight
/// (`v_cols[0]` is the LSB column).
///
/// The LSB DPL first shares with its `C_acc` precharged to V_DDL, then the
/// running node shares with each next column in turn. With equal capacitances
/// the result is `sum_k (1/2)^(r_w-k) V_k + (1/2)^r_w V_DDL`.
pub fn accumulate_weights<T: Scalar>(v_cols: &[T], params: &ElectricalParams<T>) -> Result<T> {
    if v_cols.is_empty() {
        return config("weight accumulation needs at least one column");
    }
    let mut running = CapNode::new(params.c_l(), v_cols[0])?;
    let mut acc = CapNode::new(params.c_acc, params.v_ddl)?;
    share_pair(&mut running, &mut acc);
    for &v in &v_cols[1..] {
        let mut next = CapNode::new(params.c_l(), v)?;
        share_pair(&mut running, &mut next);
        running = next;
    }
    Ok(running.voltage)
}

/// V_DDL contribution of the self-weighting precharge in the ideal result.
pub fn weight_common_mode<T: Scalar>(r_w: u32, v_ddl: T) -> T {
    v_ddl * T::lit(0.5f64.powi(r_w as i32))
}

/// Deterministic charge-injection error of one accumulation share.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InjectionErrorModel {
    #[default]
    Disabled,
    /// `bound * tanh(slope (v_in - V_DDL)) * tanh(slope (v_acc - V_DDL))`.
    Analytic { bound: f64, slope: f64 },
    Table(InjectionTable),
}

pub const INJECTION_BOUND: f64 = 3.125e-3;

impl InjectionErrorModel {
    pub fn analytic_default() -> Self {
        Self::Analytic { bound: INJECTION_BOUND, slope: 5.0 }
    }

    pub fn bound(&self) -> f64 {
        match self {
            Self::Disabled => 0.0,
            Self::Analytic { bound, .. } => *bound,
            Self::Table(t) => t.bound,
        }
    }

    pub fn error(&self, v_in: f64, v_acc_prev: f64, v_ddl: f64) -> f64 {
        match self {
            Self::Disabled => 0.0,
            Self::Analytic { bound, slope } => {
                bound * (slope * (v_in - v_ddl)).tanh() * (slope * (v_acc_prev - v_ddl)).tanh()
            }
            Self::Table(t) => t.lookup(v_in, v_acc_prev),
        }
    }
}

/// Tabulated error map over `(v_in, v_acc)`, bilinearly interpolated and
/// clamped at the edges.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionTable {
    n_vin: usize,
    n_vacc: usize,
    vmin: f64,
    vmax: f64,
    /// Row-major over `v_in`, volts.
    values: Vec<f64>,
    pub bound: f64,
}

impl InjectionTable {
    /// Parses `n_vin n_vacc vmin vmax` followed by `n_vin * n_vacc` entries in
    /// millivolts. `#` starts a comment.
    pub fn parse(text: &str, bound: f64) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(|l| l.split(|c: char| c.is_whitespace() || c == ','))
            .filter(|t| !t.is_empty());
        let mut next = |what: &str| {
            tokens.next().ok_or_else(|| Error::Load(format!("injection map: missing {what}")))
        };
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| Error::Load(format!("injection map: {e}")));
        let parse_f64 = |s: &str| s.parse::<f64>().map_err(|e| Error::Load(format!("injection map: {e}")));
        let n_vin = parse_usize(next("n_vin")?)?;
        let n_vacc = parse_usize(next("n_vacc")?)?;
        let vmin = parse_f64(next("vmin")?)?;
        let vmax = parse_f64(next("vmax")?)?;
        if n_vin < 2 || n_vacc < 2 || !(vmax > vmin) {
            return Err(Error::Load("injection map: need at least a 2x2 grid and vmax > vmin".into()));
        }
        let mut values = Vec::with_capacity(n_vin * n_vacc);
        for i in 0..n_vin * n_vacc {
            let v = parse_f64(next(&format!("entry {i}"))?)? * 1e-3;
            if !(v.abs() <= bound) {
                return Err(Error::Load(format!(
                    "injection map entry {i} = {} mV exceeds the {} mV bound",
                    v * 1e3,
                    bound * 1e3
                )));
            }
            values.push(v);
        }
        if next("end").is_ok() {
            return Err(Error::Load("injection map: trailing entries".into()));
        }
        Ok(Self { n_vin, n_vacc, vmin, vmax, values, bound })
    }

    pub fn load(path: &std::path::Path, bound: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::parse(&text, bound)
    }

    fn axis(&self, v: f64, n: usize) -> (usize, f64) {
        let x = ((v - self.vmin) / (self.vmax - self.vmin)).clamp(0.0, 1.0) * (n - 1) as f64;
        let i = (x.floor() as usize).min(n - 2);
        (i, x - i as f64)
    }

    pub fn lookup(&self, v_in: f64, v_acc: f64) -> f64 {
        let (i, fx) = self.axis(v_in, self.n_vin);
        let (j, fy) = self.axis(v_acc, self.n_vacc);
        let at = |a: usize, b: usize| self.values[a * self.n_vacc + b];
        let top = at(i, j) * (1.0 - fy) + at(i, j + 1) * fy;
        let bot = at(i + 1, j) * (1.0 - fy) + at(i + 1, j + 1) * fy;
        top * (1.0 - fx) + bot * fx
    }
}

/// Leakage of the accumulation node, cubic in the distance from V_DDL.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakageModel {
    /// Leakage current when the node sits at a rail, amperes.
    pub i_leak_at_rail: f64,
    /// Total accumulation time of an 8b input, seconds.
    pub horizon: f64,
}

impl Default for LeakageModel {
    fn default() -> Self {
        Self { i_leak_at_rail: 0.5e-9, horizon: 80e-9 }
    }
}

impl LeakageModel {
    /// Drift over one input-bit step; the horizon is split into eight steps
    /// regardless of `r_in`.
    pub fn step_drift(&self, v: f64, v_ddl: f64, v_ddh: f64, c_acc: f64, _r_in: u32) -> f64 {
        let x = (v - v_ddl) / (v_ddh / 2.0);
        -self.i_leak_at_rail * (self.horizon / 8.0) / c_acc * x * x * x
    }

    /// Drift accumulated over the whole horizon at a fixed voltage.
    pub fn horizon_drift(&self, v: f64, v_ddl: f64, v_ddh: f64, c_acc: f64) -> f64 {
        8.0 * self.step_drift(v, v_ddl, v_ddh, c_acc, 8)
    }
}

/// Error switches of the accumulation phase.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MbiwErrors {
    pub injection: InjectionErrorModel,
    pub leakage: Option<LeakageModel>,
    pub thermal: bool,
}

impl MbiwErrors {
    pub fn ideal() -> Self {
        Self::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> ElectricalParams<f64> {
        ElectricalParams::default()
    }

    #[test]
    fn alpha_mb_is_half_with_matched_caps() {
        assert_eq!(alpha_mb(&p()), 0.5);
    }

    #[test]
    fn fixed_point_at_v_ddl() {
        let mut s = MbiwState::new(4, 1, 4, 0.4).unwrap();
        s.end_dp().unwrap();
        s.accumulate_input_bit(&[0.4], &p(), &MbiwErrors::ideal(), None).unwrap();
        assert_eq!(s.v_acc[0], 0.4);
        assert_eq!(s.phase(), MbiwPhase::Dp);
        assert_eq!(s.k(), 1);
    }

    #[test]
    fn accumulate_during_dp_is_a_sequencing_error() {
        let mut s = MbiwState::new(4, 1, 4, 0.4).unwrap();
        let err = s.accumulate_input_bit(&[0.5], &p(), &MbiwErrors::ideal(), None);
        assert!(matches!(err, Err(Error::Sequencing(_))));
        assert!(matches!(s.accumulate_weights(&p()), Err(Error::Sequencing(_))));
    }

    #[test]
    fn single_bit_input_bypasses_accumulation() {
        let mut s = MbiwState::new(1, 1, 4, 0.4).unwrap();
        s.end_dp().unwrap();
        s.accumulate_input_bit(&[0.55], &p(), &MbiwErrors::ideal(), None).unwrap();
        assert_eq!(s.v_dpl[0], 0.55);
        assert_eq!(s.phase(), MbiwPhase::WeightSelfWeight);
    }

    #[test]
    fn weight_examples() {
        assert!((accumulate_weights(&[0.5], &p()).unwrap() - 0.45).abs() < 1e-15);
        assert_eq!(accumulate_weights(&[0.4; 4], &p()).unwrap(), 0.4);
        assert!(MbiwState::<f64>::new(2, 5, 4, 0.4).is_err());
    }

    #[test]
    fn injection_bound_and_anchor() {
        let m = InjectionErrorModel::analytic_default();
        assert_eq!(m.error(0.4, 0.4, 0.4), 0.0);
        for i in 0..=40 {
            for j in 0..=40 {
                let e = m.error(i as f64 * 0.02, j as f64 * 0.02, 0.4);
                assert!(e.abs() <= INJECTION_BOUND);
            }
        }
        assert_eq!(InjectionErrorModel::Disabled.error(0.8, 0.0, 0.4), 0.0);
    }

    #[test]
    fn injection_table_parses_and_interpolates() {
        let t = InjectionTable::parse("2 2 0.0 0.8\n0 1\n2 3\n", INJECTION_BOUND).unwrap();
        assert!((t.lookup(0.4, 0.4) - 1.5e-3).abs() < 1e-15);
        assert!((t.lookup(-1.0, 0.8) - 1e-3).abs() < 1e-15);
        assert!(InjectionTable::parse("2 2 0.0 0.8\n0 1\n2 5\n", INJECTION_BOUND).is_err());
        assert!(InjectionTable::parse("2 2 0.0 0.8\n0 1\n2\n", INJECTION_BOUND).is_err());
    }

    #[test]
    fn leakage_is_zero_at_midpoint_and_small_nearby() {
        let l = LeakageModel::default();
        let c = p().c_acc;
        assert_eq!(l.step_drift(0.4, 0.4, 0.8, c, 8), 0.0);
        for v in [0.2, 0.6] {
            assert!(l.horizon_drift(v, 0.4, 0.8, c).abs() < 0.05 * 3.125e-3);
        }
        assert!(l.horizon_drift(0.8, 0.4, 0.8, c) < 0.0);
        assert!(l.horizon_drift(0.0, 0.4, 0.8, c) > 0.0);
    }
}
