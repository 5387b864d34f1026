//! Macro-level configuration: geometry, electrical parameters, DPL topology,
//! ADC parameters and the switchboard of analog non-idealities.

use crate::adc::{AdcConfig, SenseAmp};
use crate::dp_array::{DplVariant, ElectricalParams, MacroGeometry, SettlingParams};
use crate::error::{config, Result};
use crate::mbiw::{InjectionErrorModel, LeakageModel, MbiwErrors};
use crate::scalar::Scalar;

/// Which SAR model produces the output codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdcModel {
    #[default]
    Structural,
    Behavioral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroConfig<T> {
    pub geometry: MacroGeometry,
    pub electrical: ElectricalParams<T>,
    pub topology: DplVariant,
    pub settling: SettlingParams,
    /// `r_out` and `gamma` here are defaults; each cycle supplies its own.
    pub adc: AdcConfig,
    /// Template for every column's sense amplifier (offset drawn per instance).
    pub sense_amp: SenseAmp,
    pub adc_model: AdcModel,
}

impl<T: Scalar> Default for MacroConfig<T> {
    fn default() -> Self {
        let electrical = ElectricalParams::<T>::default();
        let c_c = electrical.c_c.to_f64_lossy();
        let adc = AdcConfig {
            c_c,
            c_sar: 33.0 * c_c,
            c_p_sar: electrical.c_adc.to_f64_lossy() - 33.0 * c_c,
            v_ddh: electrical.v_ddh.to_f64_lossy(),
            v_ref: electrical.v_ddl.to_f64_lossy(),
            ..AdcConfig::default()
        };
        Self {
            geometry: MacroGeometry::default(),
            electrical,
            topology: DplVariant::SerialSplit,
            settling: SettlingParams::default(),
            adc,
            sense_amp: SenseAmp { decision_noise: DEFAULT_DECISION_NOISE, ..SenseAmp::default() },
            adc_model: AdcModel::Structural,
        }
    }
}

/// Default comparator decision noise, volts RMS.
pub const DEFAULT_DECISION_NOISE: f64 = 1.0e-3;

impl<T: Scalar> MacroConfig<T> {
    /// Changes both supplies and keeps the ADC reference tied to V_DDL.
    pub fn set_supplies(&mut self, v_ddl: f64, v_ddh: f64) {
        self.electrical.v_ddl = T::lit(v_ddl);
        self.electrical.v_ddh = T::lit(v_ddh);
        self.adc.v_ddh = v_ddh;
        self.adc.v_ref = v_ddl;
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.electrical.validate(&self.geometry)?;
        self.adc.validate()?;
        let c_adc = self.electrical.c_adc.to_f64_lossy();
        if ((self.adc.c_sar + self.adc.c_p_sar - c_adc) / c_adc).abs() > 1e-6 {
            return config("C_adc must equal C_sar + C_p_sar");
        }
        if (self.adc.v_ddh - self.electrical.v_ddh.to_f64_lossy()).abs() > 1e-6 {
            return config("ADC V_DDH differs from the array supply");
        }
        if self.geometry.cols_per_block != 4 {
            return config("the weight accumulation network spans exactly 4 columns per block");
        }
        let s = &self.settling;
        if !(s.t_dp > 0.0 && s.tau_serial > 0.0 && s.tau_parallel > 0.0 && s.e_max >= 0.0) {
            return config("settling parameters must be positive");
        }
        Ok(())
    }
}

/// Every analog error source, individually switchable. All random draws are
/// derived from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonidealityConfig {
    pub seed: u64,
    /// kT/C noise on the DPL and accumulation shares.
    pub thermal_noise: bool,
    pub settling: bool,
    pub injection: InjectionErrorModel,
    pub leakage: Option<LeakageModel>,
    /// Draw per-column SA offsets at the post-layout sigma.
    pub sa_offset: bool,
    pub sa_decision_noise: bool,
    pub ladder_mismatch: bool,
    /// Snap ladder levels to the V_DDH/32 grid.
    pub ladder_quantization: bool,
    /// Relative sigma of per-cell C_c mismatch (0 disables).
    pub cell_mismatch_sigma: f64,
}

impl NonidealityConfig {
    /// No error source at all; run_cycle then matches the integer oracle.
    pub fn ideal() -> Self {
        Self {
            seed: 0,
            thermal_noise: false,
            settling: false,
            injection: InjectionErrorModel::Disabled,
            leakage: None,
            sa_offset: false,
            sa_decision_noise: false,
            ladder_mismatch: false,
            ladder_quantization: false,
            cell_mismatch_sigma: 0.0,
        }
    }

    /// The documented default error mix.
    pub fn defaults(seed: u64) -> Self {
        Self {
            seed,
            thermal_noise: true,
            settling: true,
            injection: InjectionErrorModel::analytic_default(),
            leakage: Some(LeakageModel::default()),
            sa_offset: true,
            sa_decision_noise: true,
            ladder_mismatch: true,
            ladder_quantization: true,
            cell_mismatch_sigma: 0.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_ideal(&self) -> bool {
        !self.thermal_noise
            && !self.settling
            && matches!(self.injection, InjectionErrorModel::Disabled)
            && self.leakage.is_none()
            && !self.sa_offset
            && !self.sa_decision_noise
            && !self.ladder_mismatch
            && !self.ladder_quantization
            && self.cell_mismatch_sigma == 0.0
    }

    pub fn mbiw_errors(&self) -> MbiwErrors {
        MbiwErrors { injection: self.injection.clone(), leakage: self.leakage, thermal: self.thermal_noise }
    }

    /// True when some source draws from the per-cycle random streams.
    pub fn stochastic(&self) -> bool {
        self.thermal_noise || self.sa_decision_noise
    }
}

impl Default for NonidealityConfig {
    fn default() -> Self {
        Self::defaults(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        MacroConfig::<f64>::default().validate().unwrap();
        MacroConfig::<f32>::default().validate().unwrap();
    }

    #[test]
    fn supplies_move_the_reference() {
        let mut c = MacroConfig::<f64>::default();
        c.set_supplies(0.35, 0.7);
        assert_eq!(c.adc.v_ref, 0.35);
        c.validate().unwrap();
    }

    #[test]
    fn ideal_is_ideal() {
        assert!(NonidealityConfig::ideal().is_ideal());
        assert!(!NonidealityConfig::defaults(1).is_ideal());
    }
}
