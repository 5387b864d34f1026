//! One macro instance and its full compute cycle.
//!
//! A cycle runs the four phases in order: bit-serial DP over the input
//! bit-planes (LSB first) with input accumulation after each plane, spatial
//! weight accumulation inside each block, then conversion of every output.
//! Noise draws come from streams keyed by `(cycle_id, column, stage)`, so the
//! result does not depend on how outputs are scheduled across threads.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;

use crate::adc::{
    self, convert_behavioral, convert_structural, ladder_levels, AbnParams, AdcConfig, CalUnit, Ladder, LadderLevels,
    OutputRegisters, SenseAmp, BETA_STEP,
};
use crate::config::{AdcModel, MacroConfig, NonidealityConfig};
use crate::dp_array::{
    dp_bit_plane, dpl_capacitance, routing_parasitic, DpNonideality, DplTopology, DplVariant,
    InputBitVector, WeightPlane,
};
use crate::energy::{dp_drive_energy, EnergyCategory, EnergyLedger, EnergyParams};
use crate::error::{config, usage, Error, Result};
use crate::mbiw::{accumulate_weights, MbiwState};
use crate::rng::{domain, NoiseStreams, Rng};
use crate::scalar::Scalar;

/// Outputs packed into one 4-column block at weight precision `r_w`.
pub fn outputs_per_block(r_w: u32) -> usize {
    match r_w {
        1 => 4,
        2 => 2,
        _ => 1,
    }
}

/// Columns holding output `o`, LSB column first.
pub fn output_columns(o: usize, r_w: u32, cols_per_block: usize) -> Vec<usize> {
    let per = outputs_per_block(r_w);
    let first = (o / per) * cols_per_block + (o % per) * r_w as usize;
    (first..first + r_w as usize).collect()
}

/// Operands of one macro operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CimCycleInput {
    /// Unsigned inputs, one per active row starting at row 0.
    pub inputs: Vec<u32>,
    pub r_in: u32,
    pub r_w: u32,
    pub r_out: u32,
    pub gamma: u32,
    pub n_outputs: usize,
    /// Per-output ABN offset codes; empty means all zero.
    pub beta: Vec<i8>,
}

impl CimCycleInput {
    fn beta(&self, o: usize) -> i8 {
        self.beta.get(o).copied().unwrap_or(0)
    }
}

/// Exact oracle result for one output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleCode {
    pub code: u32,
    /// Pre-floor transfer argument.
    pub argument: BigRational,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceReport {
    /// DPL voltage after each DP phase: `[output][weight column][input bit]`.
    pub dp_voltages: Vec<Vec<Vec<f64>>>,
    /// Per output and weight column, the value handed to the weight phase.
    pub accumulated: Vec<Vec<f64>>,
    /// Voltage on the MSB column's DPL after weight accumulation.
    pub mbiw: Vec<f64>,
    pub codes: Vec<u32>,
    pub oracle: Option<Vec<OracleCode>>,
    /// Oracle argument outside `[0, 2^r_out)` (set from the oracle when present).
    pub saturated: Vec<bool>,
    pub cal_out_of_range: Vec<bool>,
    pub energy: EnergyLedger,
}

impl TraceReport {
    /// Outputs whose code differs from the oracle.
    pub fn oracle_mismatches(&self) -> usize {
        self.oracle
            .as_ref()
            .map_or(0, |o| o.iter().zip(&self.codes).filter(|(a, c)| a.code != **c).count())
    }
}

/// Result of the macro-level calibration routine.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSummary {
    /// Input-referred offset before calibration, per column.
    pub before: Vec<f64>,
    /// Residual after calibration (including any beta trim), per column.
    pub after: Vec<f64>,
    pub out_of_range: Vec<bool>,
    pub beta_trims: Vec<i8>,
}

impl CalibrationSummary {
    pub fn fraction_within(&self, tol: f64) -> f64 {
        self.after.iter().filter(|r| r.abs() <= tol).count() as f64 / self.after.len().max(1) as f64
    }
}

fn rms(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len().max(1) as f64).sqrt()
}

impl CalibrationSummary {
    pub fn rms_before(&self) -> f64 {
        rms(&self.before)
    }

    pub fn rms_after(&self) -> f64 {
        rms(&self.after)
    }
}

#[derive(Debug, Clone)]
pub struct MacroInstance<T> {
    cfg: MacroConfig<T>,
    nonideal: NonidealityConfig,
    weights: WeightPlane,
    sense_amps: Vec<SenseAmp>,
    cal: Vec<CalUnit>,
    beta_trim: Vec<i8>,
    ladder: Ladder,
    /// Column-major relative C_c deviations.
    cell_mismatch: Option<Vec<f32>>,
    registers: OutputRegisters,
    streams: NoiseStreams,
    energy: EnergyParams,
}

const STAGE_DP: u64 = 0;
const STAGE_MBIW: u64 = 1;
const STAGE_ADC: u64 = 2;

impl<T: Scalar> MacroInstance<T> {
    /// Builds an instance; every per-instance random quantity (SA offsets,
    /// ladder taps, cell mismatch) is drawn here from the seed.
    pub fn new(cfg: MacroConfig<T>, nonideal: NonidealityConfig) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.geometry;
        let streams = NoiseStreams::new(nonideal.seed);
        let sense_amps = (0..g.n_cols)
            .map(|c| {
                let mut sa = cfg.sense_amp;
                if nonideal.sa_offset {
                    sa = sa.with_random_offset(&mut streams.stream3(domain::SA_OFFSET, c as u64, 0));
                } else {
                    sa.offset = 0.0;
                }
                if !nonideal.sa_decision_noise {
                    sa.decision_noise = 0.0;
                }
                sa
            })
            .collect();
        let v_ddh = cfg.adc.v_ddh;
        let ladder = if nonideal.ladder_mismatch {
            Ladder::with_mismatch(v_ddh, cfg.adc.ladder_mismatch_sigma, &mut streams.stream3(domain::LADDER, 0, 0))
        } else {
            Ladder::ideal(v_ddh)
        };
        let cell_mismatch = (nonideal.cell_mismatch_sigma > 0.0).then(|| {
            let mut out = Vec::with_capacity(g.n_rows * g.n_cols);
            for c in 0..g.n_cols {
                let mut rng = streams.stream3(domain::CAP_MISMATCH, c as u64, 0);
                out.extend((0..g.n_rows).map(|_| rng.normal(nonideal.cell_mismatch_sigma) as f32));
            }
            out
        });
        Ok(Self {
            weights: WeightPlane::zeros(g.n_rows, g.n_cols),
            cal: vec![CalUnit::default(); g.n_cols],
            beta_trim: vec![0; g.n_cols],
            registers: OutputRegisters::new(g.n_cols),
            cfg,
            nonideal,
            sense_amps,
            ladder,
            cell_mismatch,
            streams,
            energy: EnergyParams::default(),
        })
    }

    /// Ideal instance with default parameters.
    pub fn ideal() -> Self {
        Self::new(MacroConfig::default(), NonidealityConfig::ideal()).expect("defaults are valid")
    }

    pub fn config(&self) -> &MacroConfig<T> {
        &self.cfg
    }

    pub fn nonideality(&self) -> &NonidealityConfig {
        &self.nonideal
    }

    pub fn weights(&self) -> &WeightPlane {
        &self.weights
    }

    pub fn set_weights(&mut self, plane: WeightPlane) -> Result<()> {
        let g = &self.cfg.geometry;
        if plane.n_rows() != g.n_rows || plane.n_cols() != g.n_cols {
            return config(format!(
                "weight plane is {}x{}, macro is {}x{}",
                plane.n_rows(),
                plane.n_cols(),
                g.n_rows,
                g.n_cols
            ));
        }
        self.weights = plane;
        Ok(())
    }

    pub fn energy_params(&self) -> &EnergyParams {
        &self.energy
    }

    pub fn set_energy_params(&mut self, p: EnergyParams) {
        self.energy = p;
    }

    /// Writes offset-binary weights `w[o][row]` (each `< 2^r_w`) of `n_outputs`
    /// outputs into the plane; unused rows of those columns are cleared.
    pub fn load_weights(&mut self, w: &[Vec<u32>], r_w: u32) -> Result<()> {
        let g = self.cfg.geometry;
        if r_w == 0 || r_w as usize > g.cols_per_block {
            return config(format!("r_w {r_w} outside [1, {}]", g.cols_per_block));
        }
        let max_out = g.n_blocks * outputs_per_block(r_w);
        if w.len() > max_out {
            return Err(Error::Capacity { what: "outputs".into(), required: w.len(), available: max_out });
        }
        for (o, rows) in w.iter().enumerate() {
            if rows.len() > g.n_rows {
                return Err(Error::Capacity { what: "rows".into(), required: rows.len(), available: g.n_rows });
            }
            for (j, &col) in output_columns(o, r_w, g.cols_per_block).iter().enumerate() {
                for r in 0..g.n_rows {
                    let v = rows.get(r).copied().unwrap_or(0);
                    if v >> r_w != 0 {
                        return config(format!("weight {v} at output {o} row {r} exceeds {r_w} bits"));
                    }
                    self.weights.set(r, col, (v >> j) & 1 == 1);
                }
            }
        }
        Ok(())
    }

    pub fn sense_amps(&self) -> &[SenseAmp] {
        &self.sense_amps
    }

    pub fn ladder(&self) -> &Ladder {
        &self.ladder
    }

    pub fn calibration(&self) -> &[CalUnit] {
        &self.cal
    }

    pub fn beta_trims(&self) -> &[i8] {
        &self.beta_trim
    }

    pub fn set_calibration(&mut self, cal: Vec<CalUnit>) -> Result<()> {
        if cal.len() != self.cfg.geometry.n_cols {
            return config(format!("{} calibration codes for {} columns", cal.len(), self.cfg.geometry.n_cols));
        }
        self.cal = cal;
        Ok(())
    }

    pub fn set_beta_trims(&mut self, trims: Vec<i8>) -> Result<()> {
        if trims.len() != self.cfg.geometry.n_cols || trims.iter().any(|t| !(-15..=15).contains(t)) {
            return config("beta trims must give one 5b code per column");
        }
        self.beta_trim = trims;
        Ok(())
    }

    /// Runs the calibration routine on every column with the DPL precharged
    /// to the reference. `use_beta` lets columns that overflow the 7b bank
    /// borrow the ABN offset bank.
    pub fn calibrate(&mut self, use_beta: bool) -> CalibrationSummary {
        let n = self.cfg.geometry.n_cols;
        let mut before = Vec::with_capacity(n);
        let mut after = Vec::with_capacity(n);
        let mut flags = Vec::with_capacity(n);
        for c in 0..n {
            let sa = self.sense_amps[c];
            let mut rng = self.streams.stream3(domain::CALIBRATION, c as u64, 0);
            let (cal, trim) = if use_beta {
                adc::calibrate_with_beta(&sa, Some(&mut rng))
            } else {
                (adc::calibrate(&sa, Some(&mut rng)), 0)
            };
            before.push(sa.offset);
            after.push(sa.offset + trim as f64 * BETA_STEP + cal.delta_v());
            flags.push(cal.out_of_range);
            self.cal[c] = cal;
            self.beta_trim[c] = trim;
        }
        CalibrationSummary { before, after, out_of_range: flags, beta_trims: self.beta_trim.clone() }
    }

    /// DPL topology used for `rows` active rows.
    pub fn topology_for(&self, rows: usize) -> Result<DplTopology> {
        let g = &self.cfg.geometry;
        match self.cfg.topology {
            DplVariant::Baseline => Ok(DplTopology::baseline(g)),
            v => DplTopology::new(v, g.units_for_rows(rows), g),
        }
    }

    fn check_input(&self, input: &CimCycleInput) -> Result<()> {
        let g = &self.cfg.geometry;
        if !(1..=8).contains(&input.r_in) {
            return config(format!("r_in {} outside [1, 8]", input.r_in));
        }
        if input.r_w == 0 || input.r_w as usize > g.cols_per_block {
            return config(format!("r_w {} outside [1, {}]", input.r_w, g.cols_per_block));
        }
        AdcConfig { r_out: input.r_out, gamma: input.gamma, ..self.cfg.adc }.validate()?;
        if input.inputs.is_empty() || input.inputs.len() > g.n_rows {
            return config(format!("{} active rows outside [1, {}]", input.inputs.len(), g.n_rows));
        }
        if let Some(x) = input.inputs.iter().find(|x| **x >> input.r_in != 0) {
            return config(format!("input {x} exceeds {} bits", input.r_in));
        }
        let max_out = g.n_blocks * outputs_per_block(input.r_w);
        if input.n_outputs == 0 || input.n_outputs > max_out {
            return config(format!("{} outputs outside [1, {max_out}]", input.n_outputs));
        }
        if input.beta.len() > input.n_outputs || input.beta.iter().any(|b| !(-15..=15).contains(b)) {
            return config("beta codes must be 5b signed, at most one per output");
        }
        Ok(())
    }

    fn adc_config(&self, input: &CimCycleInput) -> AdcConfig {
        AdcConfig {
            r_out: input.r_out,
            gamma: input.gamma,
            ladder_quantization: self.nonideal.ladder_quantization,
            ..self.cfg.adc
        }
    }

    /// Executes one full macro operation. `cycle_id` keys the noise streams.
    pub fn run_cycle(&self, input: &CimCycleInput, cycle_id: u64) -> Result<TraceReport> {
        self.run_cycle_with(input, cycle_id, true)
    }

    /// As [`run_cycle`](Self::run_cycle); `with_oracle = false` skips the exact
    /// oracle (bulk sweeps that only need codes).
    pub fn run_cycle_with(&self, input: &CimCycleInput, cycle_id: u64, with_oracle: bool) -> Result<TraceReport> {
        self.check_input(input)?;
        let topo = self.topology_for(input.inputs.len())?;
        let adc_cfg = self.adc_config(input);
        let levels = ladder_levels(input.gamma, &adc_cfg, &self.ladder)?;
        let planes: Vec<InputBitVector> =
            (0..input.r_in).map(|k| InputBitVector::from_inputs(&input.inputs, k)).collect();
        let per_output: Vec<Result<(OutputTrace, EnergyLedger)>> = (0..input.n_outputs)
            .into_par_iter()
            .map(|o| self.run_output(input, o, cycle_id, &topo, &planes, &adc_cfg, &levels))
            .collect();
        let mut report = TraceReport {
            dp_voltages: Vec::with_capacity(input.n_outputs),
            accumulated: Vec::with_capacity(input.n_outputs),
            mbiw: Vec::with_capacity(input.n_outputs),
            codes: Vec::with_capacity(input.n_outputs),
            oracle: None,
            saturated: Vec::new(),
            cal_out_of_range: Vec::with_capacity(input.n_outputs),
            energy: EnergyLedger::new(),
        };
        for r in per_output {
            let (t, e) = r?;
            report.dp_voltages.push(t.dp);
            report.accumulated.push(t.accumulated);
            report.mbiw.push(t.mbiw);
            report.codes.push(t.code);
            report.cal_out_of_range.push(t.cal_flag);
            report.energy.merge(&e);
        }
        let e = &self.energy;
        report.energy.add(EnergyCategory::LadderDc, e.ladder_current * e.ladder_time * adc_cfg.v_ddh);
        if with_oracle {
            let oracle = self.integer_oracle(input)?;
            report.saturated = oracle.iter().map(|o| o.saturated).collect();
            report.oracle = Some(oracle);
        } else {
            let max = (1u32 << input.r_out) - 1;
            report.saturated = report.codes.iter().map(|c| *c == 0 || *c == max).collect();
        }
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_output(
        &self,
        input: &CimCycleInput,
        o: usize,
        cycle_id: u64,
        topo: &DplTopology,
        planes: &[InputBitVector],
        adc_cfg: &AdcConfig,
        levels: &LadderLevels,
    ) -> Result<(OutputTrace, EnergyLedger)> {
        let g = &self.cfg.geometry;
        let p = &self.cfg.electrical;
        let ni = &self.nonideal;
        let cols = output_columns(o, input.r_w, g.cols_per_block);
        let msb = *cols.last().expect("r_w >= 1");
        let mut energy = EnergyLedger::new();
        let mut col_rngs: Vec<Rng> = cols
            .iter()
            .map(|&c| self.streams.stream3(domain::CYCLE, cycle_id, ((c as u64) << 2) | STAGE_DP))
            .collect();
        let mut mbiw_rng = self.streams.stream3(domain::CYCLE, cycle_id, ((msb as u64) << 2) | STAGE_MBIW);
        let mut adc_rng = self.streams.stream3(domain::CYCLE, cycle_id, ((msb as u64) << 2) | STAGE_ADC);
        let errors = ni.mbiw_errors();
        let mut state = MbiwState::new(input.r_in, input.r_w, g.cols_per_block, p.v_ddl)?;
        let mut dp = vec![Vec::with_capacity(input.r_in as usize); cols.len()];
        let c_dpl = dpl_capacitance(p, g, topo).to_f64_lossy();
        let v_ddl = p.v_ddl.to_f64_lossy();
        for plane in planes {
            let mut v_dp = Vec::with_capacity(cols.len());
            for (j, &c) in cols.iter().enumerate() {
                let mismatch = self.cell_mismatch.as_ref().map(|m| &m[c * g.n_rows..(c + 1) * g.n_rows]);
                let nonideal = DpNonideality {
                    settling: ni.settling.then_some(&self.cfg.settling),
                    thermal: ni.thermal_noise,
                    cell_mismatch: mismatch,
                };
                let v = dp_bit_plane(&self.weights, plane, c, p, g, topo, &nonideal, Some(&mut col_rngs[j]))?;
                let (n_on, sum_s) = plane_sum(&self.weights, plane, c);
                energy.add(EnergyCategory::DpDrive, dp_drive_energy(p, g, topo, n_on, sum_s));
                dp[j].push(v.to_f64_lossy());
                v_dp.push(v);
            }
            state.end_dp()?;
            state.accumulate_input_bit(&v_dp, p, &errors, Some(&mut mbiw_rng))?;
            for v in &v_dp {
                // DPL restored to V_DDL before the next plane
                energy.add(EnergyCategory::DplPrecharge, c_dpl * v_ddl * (v.to_f64_lossy() - v_ddl).abs());
            }
            if input.r_in > 1 {
                energy.add_n(EnergyCategory::ChargeShare, cols.len() as u64, cols.len() as f64 * self.energy.charge_share);
            }
        }
        let accumulated: Vec<f64> = state.v_dpl.iter().map(|v| v.to_f64_lossy()).collect();
        let v_mbiw = state.accumulate_weights(p)?;
        energy.add_n(EnergyCategory::ChargeShare, cols.len() as u64, cols.len() as f64 * self.energy.charge_share);
        let beta = (input.beta(o) as i32 + self.beta_trim[msb] as i32).clamp(-15, 15) as i8;
        let abn = AbnParams { beta_code: beta };
        let cal = self.cal[msb];
        let sa = &self.sense_amps[msb];
        let code = match self.cfg.adc_model {
            AdcModel::Structural => {
                convert_structural(v_mbiw, &abn, &cal, adc_cfg, levels, sa, Some(&mut adc_rng))?.code
            }
            AdcModel::Behavioral => {
                let noise = adc_rng.normal(sa.decision_noise);
                convert_behavioral(v_mbiw + T::lit(sa.offset + noise), &abn, &cal, adc_cfg)
            }
        };
        let e = &self.energy;
        energy.add_n(EnergyCategory::SaDecision, input.r_out as u64, input.r_out as f64 * e.sa_decision);
        energy.add_n(EnergyCategory::Register, input.r_out as u64, input.r_out as f64 * e.register_bit);
        Ok((
            OutputTrace { dp, accumulated, mbiw: v_mbiw.to_f64_lossy(), code, cal_flag: cal.out_of_range },
            energy,
        ))
    }

    /// Latches a cycle's codes into the master registers (indexed by the
    /// output's MSB column) and commits them to the visible stage.
    pub fn commit(&mut self, input: &CimCycleInput, report: &TraceReport) {
        let cpb = self.cfg.geometry.cols_per_block;
        for (o, code) in report.codes.iter().enumerate() {
            let msb = *output_columns(o, input.r_w, cpb).last().expect("r_w >= 1");
            self.registers.write(msb, *code);
        }
        self.registers.commit();
    }

    pub fn registers(&self) -> &OutputRegisters {
        &self.registers
    }

    /// Exact evaluation of the ideal transfer chain with rational arithmetic
    /// on the exact binary values of the (rounded) circuit parameters.
    pub fn integer_oracle(&self, input: &CimCycleInput) -> Result<Vec<OracleCode>> {
        self.check_input(input)?;
        let g = &self.cfg.geometry;
        let p = &self.cfg.electrical;
        let topo = self.topology_for(input.inputs.len())?;
        let q = |x: f64| BigRational::from_float(x).expect("finite parameter");
        let c_c = q(p.c_c.to_f64_lossy());
        let c_p = q(routing_parasitic(p, g, &topo).to_f64_lossy());
        let c_l = q(p.c_l().to_f64_lossy());
        let c_acc = q(p.c_acc.to_f64_lossy());
        let v_ddl = q(p.v_ddl.to_f64_lossy());
        let n_dp = BigRational::from_integer(BigInt::from(topo.connected_rows(g)));
        let alpha = &c_c / (n_dp * &c_c + &c_p + &c_l);
        // weight of DP bit k in the accumulated value of one column
        let r_in = input.r_in as usize;
        let k_weights: Vec<BigRational> = if r_in == 1 {
            vec![BigRational::one()]
        } else {
            let a = &c_l / (&c_acc + &c_l);
            let keep = BigRational::one() - &a;
            (0..r_in).map(|k| &a * pow(&keep, r_in - 1 - k)).collect()
        };
        // weight of column j in the MBIW voltage; column 0 also self-weights
        let r_w = input.r_w as usize;
        let half = BigRational::new(BigInt::from(1), BigInt::from(2));
        let self_weight = &c_l / (&c_l + &c_acc);
        let j_weights: Vec<BigRational> = (0..r_w)
            .map(|j| {
                let stages = if j == 0 { r_w - 1 } else { r_w - j };
                let w = pow(&half, stages);
                if j == 0 {
                    w * &self_weight
                } else {
                    w
                }
            })
            .collect();
        let cfg = self.adc_config(input);
        let halfcode = BigRational::from_integer(BigInt::from(1u64 << (input.r_out - 1)));
        let lsb = q(cfg.alpha_adc()) * q(cfg.v_ddh) / &halfcode;
        let gain = BigRational::from_integer(BigInt::from(input.gamma)) / &lsb;
        // every accumulated value is V_DDL + alpha V_DDL sum_k w_k DP_k, and the
        // ideal chain is affine in the V_DDL common mode with unit total weight
        let reference = q(cfg.v_ref);
        let max = (1u32 << input.r_out) - 1;
        let planes: Vec<InputBitVector> = (0..input.r_in).map(|k| InputBitVector::from_inputs(&input.inputs, k)).collect();
        let mut out = Vec::with_capacity(input.n_outputs);
        for o in 0..input.n_outputs {
            let cols = output_columns(o, input.r_w, g.cols_per_block);
            let mut dv = BigRational::zero();
            for (j, &c) in cols.iter().enumerate() {
                let mut col = BigRational::zero();
                for (k, plane) in planes.iter().enumerate() {
                    let (_, s) = plane_sum(&self.weights, plane, c);
                    if s != 0 {
                        col += &k_weights[k] * BigRational::from_integer(BigInt::from(s));
                    }
                }
                dv += &j_weights[j] * col;
            }
            let common = &v_ddl - &reference;
            let v = &alpha * &v_ddl * dv + common;
            let beta = (input.beta(o) as i32 + self.beta_trim[*cols.last().unwrap()] as i32).clamp(-15, 15);
            let offsets = q(beta as f64 * BETA_STEP) + q(self.cal[*cols.last().unwrap()].delta_v());
            let arg = &halfcode + &gain * (v + offsets);
            let fl = arg.floor().to_integer();
            let saturated = fl < BigInt::zero() || fl > BigInt::from(max);
            let code = if fl.is_negative() { 0 } else { fl.to_u64().map_or(max, |x| x.min(max as u64) as u32) };
            out.push(OracleCode { code, argument: arg, saturated });
        }
        Ok(out)
    }
}

fn pow(x: &BigRational, n: usize) -> BigRational {
    let mut r = BigRational::one();
    for _ in 0..n {
        r *= x;
    }
    r
}

/// Active-row count and signed XNOR sum of one column for one bit-plane.
pub fn plane_sum(weights: &WeightPlane, plane: &InputBitVector, col: usize) -> (usize, i64) {
    let mut n = 0;
    let mut s = 0i64;
    for (r, x) in plane.bits.iter().enumerate() {
        if *x {
            n += 1;
            s += weights.sign(r, col) as i64;
        }
    }
    (n, s)
}

struct OutputTrace {
    dp: Vec<Vec<f64>>,
    accumulated: Vec<f64>,
    mbiw: f64,
    code: u32,
    cal_flag: bool,
}

/// Effective signed weight of an offset-binary code.
pub fn effective_weight(w: u32, r_w: u32) -> i64 {
    2 * w as i64 - ((1i64 << r_w) - 1)
}

/// Ideal MBIW deviation per unit `alpha_eff V_DDL` with `alpha_mb = 1/2`:
/// the radix-weighted sum `S / 2^(r_w + r_in)` (or `S / 2^r_w` when the input
/// accumulation is bypassed), returned as the integer `S`.
pub fn radix_sum(inputs: &[u32], weights: &[u32], r_w: u32) -> i64 {
    inputs.iter().zip(weights).map(|(&x, &w)| x as i64 * effective_weight(w, r_w)).sum()
}

/// Weight-phase result of the physical sequence, as a convenience for
/// callers holding column voltages only.
pub fn combine_columns<T: Scalar>(v_cols: &[T], cfg: &MacroConfig<T>) -> Result<T> {
    if v_cols.is_empty() || v_cols.len() > cfg.geometry.cols_per_block {
        return usage("between 1 and cols_per_block column voltages required");
    }
    accumulate_weights(v_cols, &cfg.electrical)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(inputs: Vec<u32>, r_in: u32, r_w: u32, r_out: u32, n_outputs: usize) -> CimCycleInput {
        CimCycleInput { inputs, r_in, r_w, r_out, gamma: 1, n_outputs, beta: vec![] }
    }

    #[test]
    fn column_placement() {
        assert_eq!(output_columns(0, 1, 4), vec![0]);
        assert_eq!(output_columns(5, 1, 4), vec![5]);
        assert_eq!(output_columns(1, 2, 4), vec![2, 3]);
        assert_eq!(output_columns(3, 2, 4), vec![6, 7]);
        assert_eq!(output_columns(2, 3, 4), vec![8, 9, 10]);
        assert_eq!(output_columns(1, 4, 4), vec![4, 5, 6, 7]);
    }

    #[test]
    fn zero_inputs_read_midcode() {
        let mut m = MacroInstance::<f64>::ideal();
        m.load_weights(&[vec![3; 20], vec![1; 20]], 2).unwrap();
        let r = m.run_cycle(&input(vec![0; 20], 4, 2, 8, 2), 0).unwrap();
        assert_eq!(r.codes, vec![128, 128]);
        assert_eq!(r.oracle_mismatches(), 0);
    }

    #[test]
    fn single_row_matches_symbolic_oracle() {
        let mut m = MacroInstance::<f64>::ideal();
        m.load_weights(&[vec![1]], 1).unwrap();
        let r = m.run_cycle(&input(vec![1], 1, 1, 8, 1), 0).unwrap();
        let p = &m.config().electrical;
        let a = crate::dp_array::alpha_eff(p, &m.config().geometry, &m.topology_for(1).unwrap());
        let adc = &m.config().adc;
        // r_in = 1 bypass, then one self-weighting share halves the deviation
        let expect = (128.0 + 0.5 * a * 0.4 / (adc.alpha_adc() * 0.8 / 128.0)).floor() as u32;
        assert_eq!(r.codes[0], expect);
        assert_eq!(r.oracle.unwrap()[0].code, expect);
    }

    #[test]
    fn registers_follow_commit() {
        let mut m = MacroInstance::<f64>::ideal();
        m.load_weights(&[vec![1; 8]], 1).unwrap();
        let inp = input(vec![1; 8], 1, 1, 8, 1);
        let r = m.run_cycle(&inp, 0).unwrap();
        assert_eq!(m.registers().read(0), 0);
        m.commit(&inp, &r);
        assert_eq!(m.registers().read(0), r.codes[0]);
    }

    #[test]
    fn config_errors() {
        let m = MacroInstance::<f64>::ideal();
        assert!(matches!(m.run_cycle(&input(vec![4], 2, 1, 8, 1), 0), Err(Error::Config(_))));
        assert!(matches!(m.run_cycle(&input(vec![1], 1, 5, 8, 1), 0), Err(Error::Config(_))));
        let mut bad = input(vec![1], 1, 1, 8, 1);
        bad.gamma = 3;
        assert!(m.run_cycle(&bad, 0).is_err());
    }
}
