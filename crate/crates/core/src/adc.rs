//! Distribution-shaping SAR ADC with analog batch-norm (ABN) injection.
//!
//! Two models of the same converter live here:
//!
//! * [`convert_behavioral`]: the closed-form transfer
//!   `D = floor(2^(r-1) + gamma (dV + dV_beta + dV_cal) / (alpha_adc V_DDH / 2^(r-1)))`.
//! * [`convert_structural`]: the charge-injection SAR itself. Bits 7..3 of the
//!   8b array use binary-weighted MSB capacitors driven from the gain-adaptive
//!   reference ladder; bits 2..0 reuse unit cells at linearly downscaled ladder
//!   levels. An `r`-bit conversion uses the top `r` bits of the array.
//!
//! The ladder has 33 taps on a `V_DDH/32` grid. Level deviations from mid-rail
//! are snapped to that grid (round half away from zero), which is what loses
//! LSB information at high gain.

use std::fmt::Write as _;

use crate::error::{config, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Supported ABN gains.
pub const GAMMAS: [u32; 6] = [1, 2, 4, 8, 16, 32];
/// Largest gain the MSB bank reaches on the ladder grid.
pub const MAX_MSB_GAIN: u32 = 16;
/// Number of ladder segments between ground and V_DDH.
pub const LADDER_SEGMENTS: usize = 32;
/// Comparator tie tolerance in volts: a residue within 1 pV below the
/// reference still resolves high, so float rounding of exact ties does not
/// flip decisions.
pub const DECISION_TIE: f64 = 1e-12;
/// Relative tolerance of the floor in the behavioral transfer, in code units.
pub const FLOOR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcConfig {
    pub r_out: u32,
    pub gamma: u32,
    pub n_msb_caps: u32,
    pub n_lsb_cells: u32,
    pub c_c: f64,
    pub c_sar: f64,
    pub c_p_sar: f64,
    pub v_ddh: f64,
    /// Reference level for the deviations in the transfer (V_DDL by default).
    pub v_ref: f64,
    /// Relative sigma of each ladder segment resistance.
    pub ladder_mismatch_sigma: f64,
    /// Snap ladder levels to the `V_DDH/32` grid.
    pub ladder_quantization: bool,
}

impl Default for AdcConfig {
    fn default() -> Self {
        let c_c = 0.7e-15;
        Self {
            r_out: 8,
            gamma: 1,
            n_msb_caps: 5,
            n_lsb_cells: 2,
            c_c,
            c_sar: 33.0 * c_c,
            c_p_sar: 2e-15,
            v_ddh: 0.8,
            v_ref: 0.4,
            ladder_mismatch_sigma: 0.005,
            ladder_quantization: true,
        }
    }
}

impl AdcConfig {
    pub fn alpha_adc(&self) -> f64 {
        self.c_sar / (self.c_sar + self.c_p_sar)
    }

    pub fn ladder_step(&self) -> f64 {
        self.v_ddh / LADDER_SEGMENTS as f64
    }

    /// `C_sar` implied by the capacitor banks.
    pub fn bank_capacitance(&self) -> f64 {
        let msb: f64 = (0..self.n_msb_caps).map(|i| (1u64 << i) as f64).sum();
        (msb + self.n_lsb_cells as f64) * self.c_c
    }

    /// One output LSB referred to the DPL, volts.
    pub fn lsb(&self) -> f64 {
        self.alpha_adc() * self.v_ddh / (self.gamma as f64 * (1u64 << (self.r_out - 1)) as f64)
    }

    /// One LSB of an 8b conversion at unity gain without the divider,
    /// `V_DDH/256`, used for input-referred budgets.
    pub fn lsb8(&self) -> f64 {
        self.v_ddh / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.r_out) {
            return config(format!("r_out {} outside [1, 8]", self.r_out));
        }
        if !GAMMAS.contains(&self.gamma) {
            return config(format!("gamma {} not in {{1, 2, 4, 8, 16, 32}}", self.gamma));
        }
        if self.n_msb_caps != 5 || self.n_lsb_cells != 2 {
            return config("only the 5 MSB capacitor + 2 LSB cell split is modeled");
        }
        if ((self.bank_capacitance() - self.c_sar) / self.c_sar).abs() > 1e-9 {
            return config("C_sar must equal the sum of the MSB capacitors and LSB cells");
        }
        if !(self.c_p_sar >= 0.0 && self.v_ddh > 0.0 && self.ladder_mismatch_sigma >= 0.0) {
            return config("invalid ADC electrical parameters");
        }
        Ok(())
    }

    /// Whether results at this gain rely on the uniform grid extension beyond
    /// the MSB bank's maximum gain.
    pub fn extrapolated(&self) -> bool {
        self.gamma > MAX_MSB_GAIN
    }
}

/// Per-column ABN offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AbnParams {
    /// Signed 5b code in `-15..=15`.
    pub beta_code: i8,
}

pub const BETA_STEP: f64 = 60e-3 / 31.0;

impl AbnParams {
    pub fn new(beta_code: i8) -> Result<Self> {
        if !(-15..=15).contains(&beta_code) {
            return config(format!("beta code {beta_code} outside the 5b range -15..=15"));
        }
        Ok(Self { beta_code })
    }

    pub fn delta_v(&self) -> f64 {
        self.beta_code as f64 * BETA_STEP
    }
}

/// StrongArm sense amplifier of one column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SenseAmp {
    /// Input-referred offset: the SA resolves high when `V + offset >= V_ref`.
    pub offset: f64,
    pub sigma_prelayout: f64,
    pub postlayout_factor: f64,
    pub kickback: f64,
    pub decision_noise: f64,
}

impl Default for SenseAmp {
    fn default() -> Self {
        Self { offset: 0.0, sigma_prelayout: 20e-3, postlayout_factor: 1.75, kickback: 0.0, decision_noise: 0.0 }
    }
}

impl SenseAmp {
    pub fn ideal() -> Self {
        Self::default()
    }

    pub fn sigma_postlayout(&self) -> f64 {
        self.sigma_prelayout * self.postlayout_factor
    }

    /// Same amplifier with an offset drawn at the post-layout sigma.
    pub fn with_random_offset(mut self, rng: &mut Rng) -> Self {
        self.offset = rng.normal(self.sigma_postlayout());
        self
    }

    /// One comparator decision on a DPL deviation `v` from the reference.
    pub fn decide(&self, v: f64, rng: Option<&mut Rng>) -> bool {
        let noise = match rng {
            Some(r) => r.normal(self.decision_noise),
            None => 0.0,
        };
        v + self.offset + noise >= -DECISION_TIE
    }
}

/// 7b SA-offset calibration bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalUnit {
    pub code: u8,
    pub out_of_range: bool,
}

pub const CAL_BITS: u32 = 7;
pub const CAL_MID: u8 = 64;
pub const CAL_RESOLUTION: f64 = 0.47e-3;

impl Default for CalUnit {
    fn default() -> Self {
        Self { code: CAL_MID, out_of_range: false }
    }
}

impl CalUnit {
    pub fn new(code: u8) -> Result<Self> {
        if code >= 1 << CAL_BITS {
            return config(format!("calibration code {code} exceeds 7 bits"));
        }
        Ok(Self { code, out_of_range: false })
    }

    pub fn delta_v(&self) -> f64 {
        Self::level(self.code)
    }

    pub fn level(code: u8) -> f64 {
        (code as f64 - CAL_MID as f64) * CAL_RESOLUTION
    }

    pub fn range() -> (f64, f64) {
        (Self::level(0), Self::level((1 << CAL_BITS) - 1))
    }
}

fn floor_tol(x: f64) -> f64 {
    let f = x.floor();
    if (f + 1.0 - x) <= FLOOR_TOL * x.abs().max(1.0) {
        f + 1.0
    } else {
        f
    }
}

fn saturate(x: f64, r_out: u32) -> u32 {
    x.clamp(0.0, ((1u32 << r_out) - 1) as f64) as u32
}

/// Pre-floor argument of the behavioral transfer.
pub fn transfer_argument<T: Scalar>(delta_v: T, abn: &AbnParams, cal: &CalUnit, cfg: &AdcConfig) -> f64 {
    let half = (1u64 << (cfg.r_out - 1)) as f64;
    let dv = delta_v.to_f64_lossy() + abn.delta_v() + cal.delta_v();
    half + cfg.gamma as f64 * dv / (cfg.alpha_adc() * cfg.v_ddh / half)
}

/// Behavioral conversion of the DPL voltage `v_mbiw`.
pub fn convert_behavioral<T: Scalar>(v_mbiw: T, abn: &AbnParams, cal: &CalUnit, cfg: &AdcConfig) -> u32 {
    let dv = v_mbiw.to_f64_lossy() - cfg.v_ref;
    saturate(floor_tol(transfer_argument(dv, abn, cal, cfg)), cfg.r_out)
}

/// The reference ladder: 33 taps from ground to V_DDH.
#[derive(Debug, Clone, PartialEq)]
pub struct Ladder {
    taps: Vec<f64>,
}

impl Ladder {
    pub fn ideal(v_ddh: f64) -> Self {
        Self { taps: (0..=LADDER_SEGMENTS).map(|i| v_ddh * i as f64 / LADDER_SEGMENTS as f64).collect() }
    }

    /// Resistive ladder whose segment resistances deviate by `sigma`
    /// (relative); tap errors accumulate along the string and both ends stay
    /// on the rails.
    pub fn with_mismatch(v_ddh: f64, sigma: f64, rng: &mut Rng) -> Self {
        let segs: Vec<f64> = (0..LADDER_SEGMENTS).map(|_| (1.0 + rng.normal(sigma)).max(1e-3)).collect();
        let total: f64 = segs.iter().sum();
        let mut taps = Vec::with_capacity(LADDER_SEGMENTS + 1);
        let mut acc = 0.0;
        taps.push(0.0);
        for (i, s) in segs.iter().enumerate() {
            acc += s;
            taps.push(if i + 1 == LADDER_SEGMENTS { v_ddh } else { v_ddh * acc / total });
        }
        Self { taps }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn v_ddh(&self) -> f64 {
        self.taps[LADDER_SEGMENTS]
    }
}

/// Ladder levels seen by the SAR at one gain: the deviation from mid-rail used
/// for each bit position of the 8b array (index = bit, 0..8).
#[derive(Debug, Clone, PartialEq)]
pub struct LadderLevels {
    pub gamma: u32,
    /// `(S-IN, S-INb)` tap voltages per bit position; `None` when the position
    /// needs no update step (bit 0).
    pub pairs: [Option<(f64, f64)>; 8],
    pub extrapolated: bool,
}

impl LadderLevels {
    /// Half the differential tap swing for bit position `b8`.
    pub fn deviation(&self, b8: u32) -> f64 {
        self.pairs[b8 as usize].map_or(0.0, |(hi, lo)| (hi - lo) / 2.0)
    }
}

/// Round half away from zero.
fn snap(x: f64) -> f64 {
    x.round()
}

/// Ideal deviation for bit position `b8` at gain `gamma`: the MSB bank uses
/// `V_DDH/(2 gamma)`, the LSB cells a linearly downscaled copy.
pub fn ideal_deviation(b8: u32, gamma: u32, v_ddh: f64) -> f64 {
    let d = v_ddh / (2.0 * gamma as f64);
    if b8 >= 3 {
        d
    } else {
        d * 0.5f64.powi(3 - b8 as i32)
    }
}

pub fn ladder_levels(gamma: u32, cfg: &AdcConfig, ladder: &Ladder) -> Result<LadderLevels> {
    if !GAMMAS.contains(&gamma) {
        return config(format!("gamma {gamma} not in {{1, 2, 4, 8, 16, 32}}"));
    }
    let mid = LADDER_SEGMENTS / 2;
    let step = cfg.ladder_step();
    let mut pairs = [None; 8];
    for b8 in 1..8u32 {
        let dev = ideal_deviation(b8, gamma, cfg.v_ddh);
        pairs[b8 as usize] = Some(if cfg.ladder_quantization {
            // the differential swing spans `n` taps; odd spans use an
            // asymmetric pair, whose common-mode shift the injection rejects
            let n = (snap(2.0 * dev / step) as usize).min(2 * mid);
            (ladder.taps[mid + n.div_ceil(2)], ladder.taps[mid - n / 2])
        } else {
            let center = cfg.v_ddh / 2.0;
            (center + dev, center - dev)
        });
    }
    Ok(LadderLevels { gamma, pairs, extrapolated: gamma > MAX_MSB_GAIN })
}

/// Residue step injected after deciding bit position `b8`, referred to the DPL.
fn step_for(b8: u32, levels: &LadderLevels, cfg: &AdcConfig) -> f64 {
    let dev = levels.deviation(b8);
    let weight = if b8 >= 3 { (1u32 << (b8 - 3)) as f64 } else { 1.0 };
    cfg.alpha_adc() * weight / 16.0 * dev
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversion {
    pub code: u32,
    /// Residue (DPL deviation from the reference) before each decision, MSB first.
    pub residues: Vec<f64>,
    pub decisions: Vec<bool>,
}

/// Charge-injection SAR conversion of the DPL voltage `v_dpl`.
pub fn convert_structural<T: Scalar>(
    v_dpl: T,
    abn: &AbnParams,
    cal: &CalUnit,
    cfg: &AdcConfig,
    levels: &LadderLevels,
    sa: &SenseAmp,
    mut rng: Option<&mut Rng>,
) -> Result<Conversion> {
    if levels.gamma != cfg.gamma {
        return Err(Error::Usage(format!(
            "ladder levels built for gamma {} used at gamma {}",
            levels.gamma, cfg.gamma
        )));
    }
    let r = cfg.r_out;
    // offset + calibration injection precede the first decision
    let mut res = v_dpl.to_f64_lossy() - cfg.v_ref + abn.delta_v() + cal.delta_v();
    let mut code = 0u32;
    let mut residues = Vec::with_capacity(r as usize);
    let mut decisions = Vec::with_capacity(r as usize);
    for b in (0..r).rev() {
        residues.push(res);
        let d = sa.decide(res, rng.as_deref_mut());
        decisions.push(d);
        let sign = if d { 1.0 } else { -1.0 };
        res += sign * sa.kickback;
        if d {
            code |= 1 << b;
        }
        if b > 0 {
            let b8 = b + 8 - r;
            res -= sign * step_for(b8, levels, cfg);
        }
    }
    Ok(Conversion { code, residues, decisions })
}

/// Calibration search for one column with the DPL precharged to the
/// reference: a 7-cycle SAR over the calibration bank with the comparison
/// shifted by half a resolution step, so the residual offset ends within
/// `resolution / 2` when in range. Out-of-range offsets clamp to the extreme
/// code and are flagged.
pub fn calibrate(sa: &SenseAmp, mut rng: Option<&mut Rng>) -> CalUnit {
    let half = CAL_RESOLUTION / 2.0;
    // "high" means the calibration level already overshoots the offset
    let high = |code: u8, rng: Option<&mut Rng>| sa.decide(CalUnit::level(code) - half, rng);
    let mut code = 0u8;
    for bit in (0..CAL_BITS).rev() {
        let trial = code | (1 << bit);
        if !high(trial, rng.as_deref_mut()) {
            code = trial;
        }
    }
    let top = (1u8 << CAL_BITS) - 1;
    let out_of_range = if code == top {
        !sa.decide(CalUnit::level(top) + half, rng.as_deref_mut())
    } else if code == 0 {
        high(0, rng.as_deref_mut())
    } else {
        false
    };
    CalUnit { code, out_of_range }
}

/// Calibration that falls back on the ABN offset bank when the 7b bank alone
/// cannot reach the offset: a 5-step search over the signed beta trim picks
/// the smallest trim that overshoots, then the 7b search refines the rest.
/// Returns the calibration code and the beta trim.
pub fn calibrate_with_beta(sa: &SenseAmp, mut rng: Option<&mut Rng>) -> (CalUnit, i8) {
    let cal = calibrate(sa, rng.as_deref_mut());
    if !cal.out_of_range {
        return (cal, 0);
    }
    let (mut lo, mut hi) = (-15i8, 15i8);
    if !sa.decide(hi as f64 * BETA_STEP, rng.as_deref_mut()) {
        lo = hi;
    } else {
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if sa.decide(mid as f64 * BETA_STEP, rng.as_deref_mut()) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
    }
    let trim = lo;
    let shifted = SenseAmp { offset: sa.offset + trim as f64 * BETA_STEP, ..*sa };
    (calibrate(&shifted, rng), trim)
}

/// Renders calibration codes as `col,code,flag` lines.
pub fn dump_calibration(cals: &[CalUnit]) -> String {
    let mut s = String::new();
    for (col, c) in cals.iter().enumerate() {
        let _ = writeln!(s, "{col},{},{}", c.code, u8::from(c.out_of_range));
    }
    s
}

/// Parses `col,code,flag` lines; every column in `0..n_cols` must appear once.
pub fn restore_calibration(text: &str, n_cols: usize) -> Result<Vec<CalUnit>> {
    let mut out = vec![None; n_cols];
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Load(format!("calibration line {}: {what}: '{line}'", ln + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad("expected col,code,flag"));
        }
        let col: usize = fields[0].parse().map_err(|_| bad("bad column"))?;
        let code: u8 = fields[1].parse().map_err(|_| bad("bad code"))?;
        let flag = match fields[2] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("flag must be 0 or 1")),
        };
        if col >= n_cols {
            return Err(bad("column out of range"));
        }
        if code >= 1 << CAL_BITS {
            return Err(bad("code exceeds 7 bits"));
        }
        if out[col].replace(CalUnit { code, out_of_range: flag }).is_some() {
            return Err(bad("duplicate column"));
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(c, v)| v.ok_or_else(|| Error::Load(format!("calibration missing column {c}"))))
        .collect()
}

/// Master/slave output registers: conversions land in the master stage and
/// become visible only on [`OutputRegisters::commit`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputRegisters {
    master: Vec<u32>,
    slave: Vec<u32>,
}

impl OutputRegisters {
    pub fn new(n_cols: usize) -> Self {
        Self { master: vec![0; n_cols], slave: vec![0; n_cols] }
    }

    pub fn write(&mut self, col: usize, code: u32) {
        self.master[col] = code;
    }

    pub fn commit(&mut self) {
        self.slave.copy_from_slice(&self.master);
    }

    pub fn read(&self, col: usize) -> u32 {
        self.slave[col]
    }

    pub fn visible(&self) -> &[u32] {
        &self.slave
    }
}

/// Code-transition voltages of a transfer function found by a dense sweep.
/// Entry `c - 1` is the lowest swept input giving a code `>= c`, for
/// `c = 1..n_codes`; `None` when the code is never reached.
pub fn find_transitions(
    mut code_at: impl FnMut(f64) -> u32,
    v_lo: f64,
    v_hi: f64,
    n_codes: u32,
    points_per_code: u32,
) -> Vec<Option<f64>> {
    let n = (n_codes as usize * points_per_code as usize).max(2);
    let mut out = vec![None; n_codes as usize - 1];
    // codes already exceeded at the bottom of the sweep have no observed transition
    let mut reached = code_at(v_lo).min(n_codes - 1);
    for i in 1..=n {
        let v = v_lo + (v_hi - v_lo) * i as f64 / n as f64;
        let c = code_at(v).min(n_codes - 1);
        while reached < c {
            reached += 1;
            out[reached as usize - 1] = Some(v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linearity {
    /// Per transition, in LSB of the best-fit line.
    pub inl: Vec<f64>,
    pub dnl: Vec<f64>,
    pub mean_abs_inl: f64,
    pub peak_abs_inl: f64,
    pub missing_codes: usize,
}

/// INL/DNL against the least-squares line through the observed transitions.
pub fn linearity(transitions: &[Option<f64>]) -> Linearity {
    let pts: Vec<(f64, f64)> = transitions
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|v| (i as f64 + 1.0, v)))
        .collect();
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let inl: Vec<f64> = pts.iter().map(|(x, y)| (y - (my + slope * (x - mx))) / slope).collect();
    let dnl: Vec<f64> = pts.windows(2).map(|w| (w[1].1 - w[0].1) / slope - 1.0).collect();
    let missing = transitions
        .windows(2)
        .filter(|w| matches!(w, [Some(a), Some(b)] if a == b))
        .count()
        + transitions.iter().filter(|t| t.is_none()).count();
    let mean = inl.iter().map(|x| x.abs()).sum::<f64>() / inl.len().max(1) as f64;
    let peak = inl.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Linearity { inl, dnl, mean_abs_inl: mean, peak_abs_inl: peak, missing_codes: missing }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ideal_cfg(gamma: u32, r_out: u32) -> AdcConfig {
        AdcConfig { gamma, r_out, ladder_mismatch_sigma: 0.0, ..Default::default() }
    }

    #[test]
    fn default_banks_sum_to_c_sar() {
        AdcConfig::default().validate().unwrap();
        let cfg = AdcConfig::default();
        assert!((cfg.ladder_step() - 0.025).abs() < 1e-15);
        assert!(AdcConfig { gamma: 3, ..cfg }.validate().is_err());
    }

    #[test]
    fn behavioral_examples() {
        let cfg = AdcConfig { c_p_sar: 0.0, ..ideal_cfg(1, 8) };
        let (abn, cal) = (AbnParams::default(), CalUnit::default());
        assert_eq!(convert_behavioral(0.4, &abn, &cal, &cfg), 128);
        let dv = 2.5 * 0.8 / 128.0;
        assert_eq!(convert_behavioral(0.4 + dv, &abn, &cal, &cfg), 130);
        let cfg2 = AdcConfig { gamma: 2, ..cfg };
        assert_eq!(convert_behavioral(0.4 + dv, &abn, &cal, &cfg2), 133);
        let dv = 2.0 * 0.8 / 128.0 + 1e-6;
        assert_eq!(convert_behavioral(0.4 + dv, &abn, &cal, &cfg), 130);
        assert_eq!(convert_behavioral(0.4 + dv, &abn, &cal, &cfg2), 132);
        let cfg32 = AdcConfig { gamma: 32, ..cfg };
        assert_eq!(convert_behavioral(0.8, &abn, &cal, &cfg32), 255);
        assert_eq!(convert_behavioral(0.0, &abn, &cal, &cfg32), 0);
    }

    #[test]
    fn ladder_rail_and_grid_examples() {
        let cfg = AdcConfig::default();
        let ladder = Ladder::ideal(0.8);
        let l1 = ladder_levels(1, &cfg, &ladder).unwrap();
        assert_eq!(l1.pairs[7], Some((0.8, 0.0)));
        let mut rng = crate::rng::NoiseStreams::new(3).stream3(0, 0, 0);
        let mismatched = Ladder::with_mismatch(0.8, 0.05, &mut rng);
        let l1m = ladder_levels(1, &cfg, &mismatched).unwrap();
        assert_eq!(l1m.pairs[7], Some((0.8, 0.0)));
        let l2 = ladder_levels(2, &cfg, &ladder).unwrap();
        assert!((l2.deviation(7) - 0.2).abs() < 1e-15);
        let l32 = ladder_levels(32, &cfg, &ladder).unwrap();
        assert!(l32.extrapolated);
        // one-tap asymmetric span: half a grid step of differential deviation
        assert!((l32.deviation(7) - 0.0125).abs() < 1e-15);
        assert_eq!(l32.pairs[7], Some((ladder.taps[17], ladder.taps[16])));
        // LSB cells below half a tap span are lost
        assert_eq!(l32.deviation(1), 0.0);
        assert!(ladder_levels(3, &cfg, &ladder).is_err());
    }

    #[test]
    fn structural_matches_behavioral_on_a_sweep() {
        for r_out in 1..=8 {
            let cfg = ideal_cfg(1, r_out);
            let lv = ladder_levels(1, &cfg, &Ladder::ideal(0.8)).unwrap();
            for i in 0..=2000 {
                let v = 0.4 * i as f64 / 1000.0;
                let s = convert_structural(v, &AbnParams::default(), &CalUnit::default(), &cfg, &lv, &SenseAmp::ideal(), None)
                    .unwrap();
                assert_eq!(s.code, convert_behavioral(v, &AbnParams::default(), &CalUnit::default(), &cfg), "v={v} r={r_out}");
                assert_eq!(s.residues.len(), r_out as usize);
            }
        }
    }

    #[test]
    fn calibration_examples() {
        let sa = SenseAmp { offset: 20e-3, ..SenseAmp::ideal() };
        let c = calibrate(&sa, None);
        assert!((c.delta_v() + 20e-3).abs() <= CAL_RESOLUTION / 2.0 + 1e-12);
        assert!(!c.out_of_range);
        let c0 = calibrate(&SenseAmp::ideal(), None);
        assert_eq!(c0.code, CAL_MID);
        let far = calibrate(&SenseAmp { offset: 80e-3, ..SenseAmp::ideal() }, None);
        assert_eq!((far.code, far.out_of_range), (0, true));
        let far = calibrate(&SenseAmp { offset: -80e-3, ..SenseAmp::ideal() }, None);
        assert_eq!((far.code, far.out_of_range), (127, true));
    }

    #[test]
    fn offset_cancelled_by_matching_calibration() {
        let cfg = ideal_cfg(1, 8);
        let lv = ladder_levels(1, &cfg, &Ladder::ideal(0.8)).unwrap();
        let sa = SenseAmp { offset: 10e-3, ..SenseAmp::ideal() };
        let cal = calibrate(&sa, None);
        for v in [0.3, 0.41, 0.47, 0.52] {
            let ideal = convert_behavioral(v, &AbnParams::default(), &CalUnit::default(), &cfg) as i64;
            let got = convert_structural(v, &AbnParams::default(), &cal, &cfg, &lv, &sa, None).unwrap().code as i64;
            assert!((got - ideal).abs() <= 1, "{got} vs {ideal}");
        }
    }

    #[test]
    fn beta_bank_extends_the_calibration_range() {
        for off in [-55e-3, -31e-3, 45e-3, 58e-3] {
            let sa = SenseAmp { offset: off, ..SenseAmp::ideal() };
            let (cal, trim) = calibrate_with_beta(&sa, None);
            assert!(!cal.out_of_range, "{off}");
            let residual = off + trim as f64 * BETA_STEP + cal.delta_v();
            assert!(residual.abs() <= CAL_RESOLUTION / 2.0 + 1e-12, "{off}: {residual}");
        }
        let (cal, trim) = calibrate_with_beta(&SenseAmp { offset: 5e-3, ..SenseAmp::ideal() }, None);
        assert_eq!(trim, 0);
        assert!(!cal.out_of_range);
        let (cal, _) = calibrate_with_beta(&SenseAmp { offset: 0.1, ..SenseAmp::ideal() }, None);
        assert!(cal.out_of_range);
    }

    #[test]
    fn calibration_text_roundtrip() {
        let cals = vec![CalUnit { code: 3, out_of_range: false }, CalUnit { code: 127, out_of_range: true }];
        let text = dump_calibration(&cals);
        assert_eq!(text, "0,3,0\n1,127,1\n");
        assert_eq!(restore_calibration(&text, 2).unwrap(), cals);
        assert!(restore_calibration("0,3,0\n", 2).is_err());
        assert!(restore_calibration("0,200,0\n1,1,0\n", 2).is_err());
    }

    #[test]
    fn registers_change_only_on_commit() {
        let mut r = OutputRegisters::new(2);
        r.write(0, 7);
        assert_eq!(r.read(0), 0);
        r.commit();
        assert_eq!(r.read(0), 7);
        r.write(0, 9);
        assert_eq!(r.visible(), &[7, 0]);
    }
}
