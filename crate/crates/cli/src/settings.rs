//! Layered run settings.
//!
//! Precedence, lowest first: the embedded defaults, the `--config` file (and
//! whatever it includes), `IMAGINE_SIM_*` environment variables, `--set`
//! overrides and finally the dedicated command-line flags. Only keys present
//! in the defaults are accepted.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use imagine_sim::adc::AdcConfig;
use imagine_sim::characterize::FillSweep;
use imagine_sim::config::{AdcModel, MacroConfig, NonidealityConfig};
use imagine_sim::dataflow::{DramParams, LayerConfig, LayerKind, PipelineConfig, PipelineMode};
use imagine_sim::dp_array::{Corner, DplVariant, ElectricalParams, MacroGeometry, SettlingParams};
use imagine_sim::energy::EnergyParams;
use imagine_sim::mbiw::{InjectionErrorModel, InjectionTable, LeakageModel};
use imagine_sim::{Error, MacroConfigF64, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

pub const DEFAULTS: &str = include_str!("../defaults.toml");
pub const ENV_PREFIX: &str = "IMAGINE_SIM_";
const MAX_INCLUDE_DEPTH: usize = 16;

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub version: u32,
    pub run: Run,
    pub geometry: Geometry,
    pub electrical: Electrical,
    pub topology: Topology,
    pub settling: Settling,
    pub adc: Adc,
    pub sense_amp: SenseAmpSection,
    pub nonideality: Nonideality,
    pub energy: Energy,
    pub pipeline: Pipeline,
    pub dram: Dram,
    pub characterize: Characterize,
    pub layer: Layer,
    pub network: Network,
    pub sweep: Sweep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Run {
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub n_rows: usize,
    pub n_cols: usize,
    pub rows_per_unit: usize,
    pub units_per_col: usize,
    pub cols_per_block: usize,
    pub n_blocks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Electrical {
    pub c_c: f64,
    pub c_p_per_unit: f64,
    pub c_p_glob: f64,
    pub c_p_sar: f64,
    pub c_l: f64,
    pub v_ddl: f64,
    pub v_ddh: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub variant: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settling {
    pub e_max: f64,
    pub tau_serial: f64,
    pub tau_parallel: f64,
    pub t_dp: f64,
    pub corner: String,
    pub run_threshold: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adc {
    pub model: String,
    pub ladder_mismatch_sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SenseAmpSection {
    pub sigma_prelayout: f64,
    pub postlayout_factor: f64,
    pub kickback: f64,
    pub decision_noise: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nonideality {
    pub thermal_noise: bool,
    pub settling: bool,
    pub injection: String,
    pub injection_bound: f64,
    pub injection_slope: f64,
    pub injection_table: String,
    pub leakage: bool,
    pub leakage_current: f64,
    pub leakage_horizon: f64,
    pub sa_offset: bool,
    pub sa_decision_noise: bool,
    pub ladder_mismatch: bool,
    pub ladder_quantization: bool,
    pub cell_mismatch_sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Energy {
    pub sa_decision: f64,
    pub ladder_current: f64,
    pub ladder_time: f64,
    pub register_bit: f64,
    pub shift_register_bit: f64,
    pub lmem_access_128b: f64,
    pub leakage_per_idle_cycle: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pipeline {
    pub mode: String,
    pub n_cim: u32,
    pub bw: u32,
    pub clock_hz: f64,
    pub lmem_in_bits: u64,
    pub lmem_out_bits: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dram {
    pub offchip_bw: u32,
    pub energy_per_bit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Characterize {
    pub rows: usize,
    pub fill_step: usize,
    pub iters: usize,
    pub gammas: Vec<u32>,
    pub r_out: u32,
    pub calibration_samples: usize,
    pub cluster_rows: usize,
    pub cluster_run_lengths: Vec<usize>,
    pub cluster_iters: usize,
    pub cluster_gamma: u32,
    pub cluster_corner: String,
    pub cluster_t_dp: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub kind: String,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub r_in: u32,
    pub r_w: u32,
    pub r_out: u32,
    pub gamma: u32,
    pub beta: Vec<i8>,
    pub stride: usize,
    pub padding: usize,
    pub signed_input: bool,
    pub signed_output: bool,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    pub images: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub kind: String,
    pub channels: Vec<usize>,
    pub c_l: Vec<f64>,
    pub r_in: Vec<u32>,
    pub energy_per_bit: Vec<f64>,
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| cfg_err(format!("{origin}: {e}")))
}

/// Reads a config file, resolving `include` (a path or list of paths,
/// relative to the including file). Included files are applied first, in
/// order, and the including file overrides them.
pub fn read_config_file(path: &Path) -> Result<Table> {
    read_with_includes(path, &mut Vec::new())
}

fn read_with_includes(path: &Path, stack: &mut Vec<PathBuf>) -> Result<Table> {
    let canon = path.canonicalize().map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
    if stack.contains(&canon) {
        return Err(cfg_err(format!("include cycle through {}", path.display())));
    }
    if stack.len() >= MAX_INCLUDE_DEPTH {
        return Err(cfg_err(format!("includes nested deeper than {MAX_INCLUDE_DEPTH}")));
    }
    let text = std::fs::read_to_string(&canon).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
    let mut own = parse_table(&text, &path.display().to_string())?;
    let includes = match own.remove("include") {
        None => vec![],
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(cfg_err(format!("include entries must be strings, got {other}"))),
            })
            .collect::<Result<_>>()?,
        Some(other) => return Err(cfg_err(format!("include must be a path or list of paths, got {other}"))),
    };
    stack.push(canon.clone());
    let dir = canon.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut merged = Table::new();
    for inc in includes {
        merge(&mut merged, read_with_includes(&dir.join(inc), stack)?);
    }
    stack.pop();
    merge(&mut merged, own);
    Ok(merged)
}

/// Parses an override value as a TOML literal, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `dotted` (e.g. `settling.t_dp`) in `table`; the key must already exist.
pub fn set_dotted(table: &mut Table, dotted: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    let (leaf, path) = parts.split_last().ok_or_else(|| cfg_err("empty key"))?;
    let mut cur = table;
    for p in path {
        cur = match cur.get_mut(*p) {
            Some(Value::Table(t)) => t,
            _ => return Err(cfg_err(format!("unknown key '{dotted}'"))),
        };
    }
    match cur.get(*leaf) {
        Some(Value::Table(_)) => Err(cfg_err(format!("'{dotted}' is a section, not a key"))),
        Some(old) => {
            // integers written where floats are expected stay floats
            let value = match (old, value) {
                (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
                (_, v) => v,
            };
            cur.insert(leaf.to_string(), value);
            Ok(())
        }
        None => Err(cfg_err(format!("unknown key '{dotted}'"))),
    }
}

/// Splits a `key=value` override.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| cfg_err(format!("override '{s}' is not key=value")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// Maps `IMAGINE_SIM_SETTLING__T_DP` to `settling.t_dp`.
pub fn env_key(var: &str) -> Option<String> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    Some(rest.to_ascii_lowercase().replace("__", "."))
}

/// Where the user-supplied layers come from.
#[derive(Debug, Default, Clone)]
pub struct Sources {
    pub config: Option<PathBuf>,
    pub env: Vec<(String, String)>,
    pub sets: Vec<String>,
    /// Applied last, after `sets`.
    pub flags: Vec<(String, Value)>,
}

impl Sources {
    /// Collects the `IMAGINE_SIM_*` variables of the current process.
    pub fn with_process_env(mut self) -> Self {
        let mut env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        env.sort();
        self.env = env;
        self
    }
}

impl Settings {
    #[cfg(test)]
    pub fn defaults() -> Self {
        Self::load(&Sources::default()).expect("embedded defaults are valid")
    }

    pub fn load(src: &Sources) -> Result<Self> {
        let mut table = parse_table(DEFAULTS, "defaults")?;
        if let Some(path) = &src.config {
            let user = read_config_file(path)?;
            check_known(&table, &user, "")?;
            merge(&mut table, user);
        }
        for (var, raw) in &src.env {
            if let Some(k) = env_key(var) {
                set_dotted(&mut table, &k, parse_value(raw)).map_err(|e| cfg_err(format!("{var}: {e}")))?;
            }
        }
        for s in &src.sets {
            let (k, v) = parse_assignment(s)?;
            set_dotted(&mut table, &k, v)?;
        }
        for (k, v) in &src.flags {
            set_dotted(&mut table, k, v.clone())?;
        }
        let s: Settings = Value::Table(table).try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        if s.version != 1 {
            return Err(cfg_err(format!("unsupported config version {}", s.version)));
        }
        Ok(s)
    }

    /// Canonical text of the fully resolved settings.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("settings serialize")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn corner(&self) -> Result<Corner> {
        self.settling.corner.parse()
    }

    pub fn geometry(&self) -> MacroGeometry {
        let g = &self.geometry;
        MacroGeometry {
            n_rows: g.n_rows,
            n_cols: g.n_cols,
            rows_per_unit: g.rows_per_unit,
            units_per_col: g.units_per_col,
            cols_per_block: g.cols_per_block,
            n_blocks: g.n_blocks,
        }
    }

    pub fn macro_config(&self) -> Result<MacroConfigF64> {
        let e = &self.electrical;
        let c_sar = 33.0 * e.c_c;
        let c_adc = c_sar + e.c_p_sar;
        if e.c_l <= c_adc {
            return Err(cfg_err(format!("C_L {:e} F does not exceed the ADC load {:e} F", e.c_l, c_adc)));
        }
        let electrical = ElectricalParams {
            c_c: e.c_c,
            c_p_per_unit: e.c_p_per_unit,
            c_p_glob: e.c_p_glob,
            c_mb: e.c_l - c_adc,
            c_adc,
            c_acc: e.c_l,
            v_ddl: e.v_ddl,
            v_ddh: e.v_ddh,
            temperature: e.temperature,
        };
        let s = &self.settling;
        let settling = SettlingParams {
            e_max: s.e_max,
            tau_serial: s.tau_serial,
            tau_parallel: s.tau_parallel,
            t_dp: s.t_dp,
            corner: self.corner()?,
            run_threshold: s.run_threshold,
        };
        let adc_model = match self.adc.model.to_ascii_lowercase().as_str() {
            "structural" => AdcModel::Structural,
            "behavioral" | "behavioural" => AdcModel::Behavioral,
            other => return Err(cfg_err(format!("unknown ADC model '{other}'"))),
        };
        let base = MacroConfig::<f64>::default();
        let cfg = MacroConfig {
            geometry: self.geometry(),
            electrical,
            topology: self.topology.variant.parse::<DplVariant>()?,
            settling,
            adc: AdcConfig {
                c_c: e.c_c,
                c_sar,
                c_p_sar: e.c_p_sar,
                v_ddh: e.v_ddh,
                v_ref: e.v_ddl,
                ladder_mismatch_sigma: self.adc.ladder_mismatch_sigma,
                ladder_quantization: self.nonideality.ladder_quantization,
                ..base.adc
            },
            sense_amp: imagine_sim::adc::SenseAmp {
                offset: 0.0,
                sigma_prelayout: self.sense_amp.sigma_prelayout,
                postlayout_factor: self.sense_amp.postlayout_factor,
                kickback: self.sense_amp.kickback,
                decision_noise: self.sense_amp.decision_noise,
            },
            adc_model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn nonideality(&self) -> Result<NonidealityConfig> {
        let n = &self.nonideality;
        let injection = match n.injection.to_ascii_lowercase().as_str() {
            "off" | "disabled" | "none" => InjectionErrorModel::Disabled,
            "analytic" => InjectionErrorModel::Analytic { bound: n.injection_bound, slope: n.injection_slope },
            "table" => {
                if n.injection_table.is_empty() {
                    return Err(cfg_err("nonideality.injection = \"table\" needs nonideality.injection_table"));
                }
                let text = std::fs::read_to_string(&n.injection_table)
                    .map_err(|e| cfg_err(format!("{}: {e}", n.injection_table)))?;
                InjectionErrorModel::Table(InjectionTable::parse(&text, n.injection_bound)?)
            }
            other => return Err(cfg_err(format!("unknown injection model '{other}'"))),
        };
        Ok(NonidealityConfig {
            seed: self.run.seed,
            thermal_noise: n.thermal_noise,
            settling: n.settling,
            injection,
            leakage: n
                .leakage
                .then_some(LeakageModel { i_leak_at_rail: n.leakage_current, horizon: n.leakage_horizon }),
            sa_offset: n.sa_offset,
            sa_decision_noise: n.sa_decision_noise,
            ladder_mismatch: n.ladder_mismatch,
            ladder_quantization: n.ladder_quantization,
            cell_mismatch_sigma: n.cell_mismatch_sigma,
        })
    }

    pub fn energy_params(&self) -> EnergyParams {
        let e = &self.energy;
        EnergyParams {
            sa_decision: e.sa_decision,
            ladder_current: e.ladder_current,
            ladder_time: e.ladder_time,
            register_bit: e.register_bit,
            shift_register_bit: e.shift_register_bit,
            lmem_access_128b: e.lmem_access_128b,
            leakage_per_idle_cycle: e.leakage_per_idle_cycle,
            ..EnergyParams::default()
        }
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let p = &self.pipeline;
        let cfg = PipelineConfig {
            mode: p.mode.parse::<PipelineMode>()?,
            n_cim: p.n_cim,
            bw: p.bw,
            clock_hz: p.clock_hz,
            lmem_in_bits: p.lmem_in_bits,
            lmem_out_bits: p.lmem_out_bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dram(&self) -> DramParams {
        DramParams {
            offchip_bw: (self.dram.offchip_bw > 0).then_some(self.dram.offchip_bw),
            energy_per_bit: self.dram.energy_per_bit,
        }
    }

    pub fn fill_sweep(&self) -> FillSweep {
        let c = &self.characterize;
        FillSweep { rows: c.rows, fill_step: c.fill_step, iters: c.iters, gammas: c.gammas.clone(), r_out: c.r_out }
    }

    /// The `[layer]` section with its input height and width.
    pub fn layer(&self) -> Result<(LayerConfig, usize, usize)> {
        let l = &self.layer;
        let cfg = LayerConfig {
            kind: l.kind.parse::<LayerKind>()?,
            k: l.k,
            c_in: l.c_in,
            c_out: l.c_out,
            r_in: l.r_in,
            r_w: l.r_w,
            r_out: l.r_out,
            gamma: l.gamma,
            beta: l.beta.clone(),
            stride: l.stride,
            padding: l.padding,
            signed_input: l.signed_input,
            signed_output: l.signed_output,
        };
        cfg.validate()?;
        Ok((cfg, l.height, l.width))
    }
}

/// Rejects keys in `user` that the defaults do not define.
fn check_known(defaults: &Table, user: &Table, prefix: &str) -> Result<()> {
    let known: BTreeSet<&String> = defaults.keys().collect();
    for (k, v) in user {
        let full = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if !known.contains(k) {
            return Err(cfg_err(format!("unknown key '{full}'")));
        }
        if let (Some(Value::Table(d)), Value::Table(u)) = (defaults.get(k), v) {
            check_known(d, u, &full)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_library_defaults() {
        let s = Settings::defaults();
        let ours = s.macro_config().unwrap();
        let mut lib = MacroConfig::<f64>::default();
        // the file states C_L and C_p_sar directly, the library derives them
        let e = (&ours.electrical, &lib.electrical);
        for (a, b) in [(e.0.c_mb, e.1.c_mb), (e.0.c_adc, e.1.c_adc), (e.0.c_acc, e.1.c_acc), (ours.adc.c_p_sar, lib.adc.c_p_sar)] {
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
        }
        lib.electrical = ours.electrical.clone();
        lib.adc.c_p_sar = ours.adc.c_p_sar;
        assert_eq!(ours, lib);
        assert_eq!(s.pipeline().unwrap(), PipelineConfig::default());
        assert_eq!(s.energy_params(), EnergyParams::default());
        assert_eq!(s.dram(), DramParams::default());
        assert_eq!(s.nonideality().unwrap(), NonidealityConfig::defaults(1));
        assert_eq!(s.fill_sweep(), FillSweep::default());
    }

    #[test]
    fn overrides_apply_in_order() {
        let src = Sources {
            env: vec![("IMAGINE_SIM_SETTLING__T_DP".into(), "3e-9".into())],
            sets: vec!["settling.t_dp=4e-9".into(), "run.seed = 9".into(), "electrical.v_ddl=0".into()],
            ..Sources::default()
        };
        let s = Settings::load(&src).unwrap();
        assert_eq!(s.settling.t_dp, 4e-9);
        assert_eq!(s.run.seed, 9);
        // integer literal promoted to the float the key holds
        assert_eq!(s.electrical.v_ddl, 0.0);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let src = Sources { sets: vec!["settling.t_dpp=1".into()], ..Sources::default() };
        assert_eq!(Settings::load(&src).unwrap_err().exit_code(), 2);
        let src = Sources { sets: vec!["nonsense".into()], ..Sources::default() };
        assert!(Settings::load(&src).is_err());
    }

    #[test]
    fn includes_resolve_relative_and_detect_cycles() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.toml"), "[settling]\ncorner = \"SS\"\nt_dp = 1e-9\n").unwrap();
        std::fs::write(dir.path().join("top.toml"), "include = \"base.toml\"\n[settling]\nt_dp = 2e-9\n").unwrap();
        let src = Sources { config: Some(dir.path().join("top.toml")), ..Sources::default() };
        let s = Settings::load(&src).unwrap();
        assert_eq!(s.settling.corner, "SS");
        assert_eq!(s.settling.t_dp, 2e-9);

        std::fs::write(dir.path().join("a.toml"), "include = \"b.toml\"\n").unwrap();
        std::fs::write(dir.path().join("b.toml"), "include = [\"a.toml\"]\n").unwrap();
        let src = Sources { config: Some(dir.path().join("a.toml")), ..Sources::default() };
        assert!(Settings::load(&src).unwrap_err().to_string().contains("cycle"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Settings::defaults();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.run.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn env_keys_map_to_dotted_paths() {
        assert_eq!(env_key("IMAGINE_SIM_PIPELINE__N_CIM").as_deref(), Some("pipeline.n_cim"));
        assert_eq!(env_key("PATH"), None);
    }
}
