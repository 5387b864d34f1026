//! Command-line front end of the CIM macro simulator.

mod output;
mod settings;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imagine_sim::bundle::{load_bundle, ModelBundle};
use imagine_sim::characterize::{
    calibration_csv, characterize_calibration, characterize_clustering, characterize_transfer, clustering_csv,
    rms_csv, rms_from_transfer, transfer_csv, HwNoiseSpec,
};
use imagine_sim::dataflow::{
    closed_form_cycles, cycles_per_output, dram_overlay_estimate, simulate_layer, LayerConfig, PipelineMode,
};
use imagine_sim::dp_array::{alpha_eff, max_swing, DplTopology, DplVariant};
use imagine_sim::energy::{dp_energy_savings, EnergyCategory};
use imagine_sim::engine::MacroInstance;
use imagine_sim::network::{random_image, reference_bundle, reference_cnn_shapes, run_network};
use imagine_sim::rng::{domain, key};
use imagine_sim::{Error, MacroInstanceF64, Result};
use toml::Value;

use output::{provenance_header, Emit, OutputDir};
use settings::{Settings, Sources};

#[derive(Parser, Debug)]
#[command(name = "imagine-sim", version, about = "Charge-domain CIM SRAM macro and dataflow simulator")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Config file (TOML sections; `include` pulls in other files).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set settling.t_dp=2e-9`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[arg(long, global = true, value_parser = ["SS", "TT", "FF"])]
    corner: Option<String>,
    /// Supplies as `<low>/<high>` volts, e.g. `0.4/0.8`.
    #[arg(long, global = true, value_name = "LOW/HIGH")]
    vdd: Option<String>,
    #[arg(long, global = true, value_parser = ["baseline", "serial", "parallel"])]
    topology: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Emit::Csv)]
    emit: Emit,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Transfer function, RMS, clustering and calibration sweeps, plus the
    /// noise specification for hardware-aware training.
    Characterize {
        /// Comma-separated gains to sweep.
        #[arg(long, value_delimiter = ',')]
        gamma: Option<Vec<u32>>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        skip_clustering: bool,
    },
    /// One layer of the `[layer]` section on random data.
    SimLayer {
        #[arg(long, value_parser = ["serial", "pipelined"])]
        mode: Option<String>,
    },
    /// Runs a model bundle on random images, next to the exact reference.
    RunNet {
        /// Bundle file; the built-in reference network when omitted.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        images: Option<usize>,
    },
    /// Writes the built-in reference network as a bundle.
    ExportReference {
        #[arg(long, default_value = "reference.cimb")]
        file: PathBuf,
    },
    /// Design-space sweeps: swing, dp-energy, cycles or dram.
    Sweep {
        #[arg(long, value_parser = ["swing", "dp-energy", "cycles", "dram"])]
        kind: Option<String>,
    },
    /// Calibrates the comparator offsets of one instance; optionally stores
    /// the result into a bundle.
    Calibrate {
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Where the calibrated bundle goes (requires --bundle).
        #[arg(long, requires = "bundle")]
        write_bundle: Option<PathBuf>,
    },
    /// Prints the fully resolved settings.
    ShowConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Characterize { .. } => "characterize",
            Command::SimLayer { .. } => "sim-layer",
            Command::RunNet { .. } => "run-net",
            Command::ExportReference { .. } => "export-reference",
            Command::Sweep { .. } => "sweep",
            Command::Calibrate { .. } => "calibrate",
            Command::ShowConfig => "show-config",
        }
    }
}

fn flag_overrides(g: &GlobalArgs, cmd: &Command) -> Result<Vec<(String, Value)>> {
    let mut f = vec![];
    if let Some(s) = g.seed {
        let s = i64::try_from(s).map_err(|_| Error::Usage(format!("seed {s} is too large")))?;
        f.push(("run.seed".into(), Value::Integer(s)));
    }
    if let Some(c) = &g.corner {
        f.push(("settling.corner".into(), Value::String(c.clone())));
    }
    if let Some(t) = &g.topology {
        f.push(("topology.variant".into(), Value::String(t.clone())));
    }
    if let Some(v) = &g.vdd {
        let bad = || Error::Usage(format!("--vdd expects <low>/<high> volts, got '{v}'"));
        let (lo, hi) = v.split_once('/').ok_or_else(bad)?;
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        f.push(("electrical.v_ddl".into(), Value::Float(lo)));
        f.push(("electrical.v_ddh".into(), Value::Float(hi)));
    }
    match cmd {
        Command::Characterize { gamma, iters, .. } => {
            if let Some(g) = gamma {
                f.push(("characterize.gammas".into(), Value::Array(g.iter().map(|x| Value::Integer(*x as i64)).collect())));
            }
            if let Some(n) = iters {
                f.push(("characterize.iters".into(), Value::Integer(*n as i64)));
            }
        }
        Command::SimLayer { mode: Some(m) } => f.push(("pipeline.mode".into(), Value::String(m.clone()))),
        Command::RunNet { images: Some(n), .. } => f.push(("network.images".into(), Value::Integer(*n as i64))),
        Command::Sweep { kind: Some(k) } => f.push(("sweep.kind".into(), Value::String(k.clone()))),
        _ => {}
    }
    Ok(f)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("imagine-sim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    rayon::ThreadPoolBuilder::new()
        .num_threads(g.jobs)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    let sources = Sources {
        config: g.config.clone(),
        sets: g.sets.clone(),
        flags: flag_overrides(g, &cli.command)?,
        ..Sources::default()
    }
    .with_process_env();
    let s = Settings::load(&sources)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", provenance_header("show-config", s.run.seed, &s.hash()));
        print!("{}", s.canonical());
        return Ok(());
    }
    let header = provenance_header(cli.command.name(), s.run.seed, &s.hash());
    let mut out = OutputDir::new(&g.out, g.emit, header)?;
    match &cli.command {
        Command::Characterize { skip_clustering, .. } => characterize(&s, *skip_clustering, &mut out)?,
        Command::SimLayer { .. } => sim_layer(&s, &mut out)?,
        Command::RunNet { bundle, .. } => run_net(&s, bundle.as_ref(), &mut out)?,
        Command::ExportReference { file } => {
            let path = if file.is_absolute() { file.clone() } else { g.out.join(file) };
            reference_model(&s).save(&path)?;
            println!("wrote {}", path.display());
            return Ok(());
        }
        Command::Sweep { .. } => sweep(&s, &mut out)?,
        Command::Calibrate { bundle, write_bundle } => calibrate(&s, bundle.as_ref(), write_bundle.as_ref(), &mut out)?,
        Command::ShowConfig => unreachable!(),
    }
    for p in out.written() {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn characterize(s: &Settings, skip_clustering: bool, out: &mut OutputDir) -> Result<()> {
    let cfg = s.macro_config()?;
    let ni = s.nonideality()?;
    let transfer = characterize_transfer(&cfg, &ni, &s.fill_sweep())?;
    let rms = rms_from_transfer(&transfer);
    out.write_table("transfer", &transfer_csv(&transfer))?;
    out.write_table("rms", &rms_csv(&rms))?;
    let c = &s.characterize;
    let clustering = if skip_clustering {
        vec![]
    } else {
        let mut cc = cfg.clone();
        cc.settling.corner = c.cluster_corner.parse()?;
        cc.settling.t_dp = c.cluster_t_dp;
        let rows = characterize_clustering(&cc, &ni, c.cluster_rows, &c.cluster_run_lengths, c.cluster_iters, c.cluster_gamma)?;
        out.write_table("clustering", &clustering_csv(&rows))?;
        rows
    };
    let cal = characterize_calibration(&cfg, &ni, c.calibration_samples)?;
    out.write_table("calibration", &calibration_csv(&cal))?;
    let injection_bound = match ni.injection {
        imagine_sim::mbiw::InjectionErrorModel::Disabled => 0.0,
        _ => s.nonideality.injection_bound.max(0.0),
    };
    let spec = HwNoiseSpec::from_characterization(&rms, &clustering, &cal, injection_bound);
    out.write_csv("hw_noise_spec.csv", &spec.to_csv())?;
    for r in &rms {
        println!("gamma {:>2}: max RMS {:.3} LSB (fill {} rows)", r.gamma, r.max_rms, r.argmax_fill);
    }
    println!(
        "calibration: {:.1}% of columns within 1 LSB, spatial sigma {:.3} -> {:.3} LSB",
        100.0 * cal.fraction_within(1.0),
        cal.spatial_before(),
        cal.spatial_after()
    );
    Ok(())
}

fn ready_macro(s: &Settings) -> Result<MacroInstanceF64> {
    let ni = s.nonideality()?;
    let mut m = MacroInstance::new(s.macro_config()?, ni.clone())?;
    m.set_energy_params(s.energy_params());
    if ni.sa_offset {
        m.calibrate(true);
    }
    Ok(m)
}

fn sim_layer(s: &Settings, out: &mut OutputDir) -> Result<()> {
    let (layer, h, w) = s.layer()?;
    let pipe = s.pipeline()?;
    let mut m = ready_macro(s)?;
    let weights = reference_bundle(std::slice::from_ref(&layer), s.run.seed).layers.remove(0).weights;
    m.load_weights(&weights, layer.r_w)?;
    let image = random_image(h, w, layer.c_in, layer.r_in, s.run.seed);
    let t = simulate_layer(&layer, &image, &pipe, &mut m, key(&[domain::USER, s.run.seed]))?;
    let mut summary = String::from("quantity,value\n");
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(summary, "{k},{v}");
    };
    kv("h_out", t.output.h.to_string());
    kv("w_out", t.output.w.to_string());
    kv("cycles", t.cycles.to_string());
    kv("closed_form_cycles", t.closed_form_cycles.to_string());
    if let Some(p) = t.per_output {
        kv("n_in", p.n_in.to_string());
        kv("n_out", p.n_out.to_string());
        kv("cycles_per_output", p.cycles.to_string());
        kv("regime", p.regime.to_string());
    }
    kv("input_transfers", t.input_transfers.to_string());
    kv("output_transfers", t.output_transfers.to_string());
    kv("padded_taps", t.padded_taps.to_string());
    kv("saturated", t.saturated.to_string());
    kv("ops", t.ops(&layer).to_string());
    for c in EnergyCategory::ALL {
        kv(&format!("energy_{}_j", c.name()), format!("{:.6e}", t.energy.energy(c)));
    }
    kv("energy_total_j", format!("{:.6e}", t.energy.total()));
    let seconds = t.cycles as f64 / pipe.clock_hz;
    kv("tops_per_w", format!("{:.4}", t.ops(&layer) as f64 / t.energy.total().max(f64::MIN_POSITIVE) / 1e12));
    kv("seconds", format!("{seconds:.6e}"));
    out.write_table("layer_summary", &summary)?;
    let mut codes = String::from("y,x,channel,code\n");
    for y in 0..t.output.h {
        for x in 0..t.output.w {
            for c in 0..t.output.c {
                let _ = writeln!(codes, "{y},{x},{c},{}", t.output.get(y, x, c));
            }
        }
    }
    out.write_table("layer_output", &codes)?;
    println!(
        "{} cycles ({} closed form), {:.3e} J, {} saturated outputs",
        t.cycles,
        t.closed_form_cycles,
        t.energy.total(),
        t.saturated
    );
    Ok(())
}

fn reference_model(s: &Settings) -> ModelBundle {
    let shapes: Vec<LayerConfig> = reference_cnn_shapes().into_iter().map(|(l, _, _)| l).collect();
    reference_bundle(&shapes, s.run.seed)
}

fn run_net(s: &Settings, bundle: Option<&PathBuf>, out: &mut OutputDir) -> Result<()> {
    let bundle = match bundle {
        Some(p) => load_bundle(p)?,
        None => reference_model(s),
    };
    let pipe = s.pipeline()?;
    let ni = s.nonideality()?;
    let mut m = MacroInstance::new(s.macro_config()?, ni.clone())?;
    m.set_energy_params(s.energy_params());
    match (&bundle.calibration, ni.sa_offset) {
        (Some(cal), _) => {
            m.set_calibration(cal.clone())?;
            if let Some(t) = &bundle.beta_trims {
                m.set_beta_trims(t.clone())?;
            }
        }
        (None, true) => {
            m.calibrate(true);
        }
        (None, false) => {}
    }
    let first = bundle.layers.first().ok_or_else(|| Error::Load("bundle has no layers".into()))?;
    let n = &s.network;
    let images: Vec<_> = (0..n.images)
        .map(|i| random_image(n.height, n.width, first.cfg.c_in, first.cfg.r_in, key(&[s.run.seed, i as u64])))
        .collect();
    let report = run_network(&bundle, &images, None, &m, &pipe, true)?;
    let mut csv = String::from("image,prediction,reference_prediction,scores\n");
    let mut agree = 0;
    for (i, r) in report.images.iter().enumerate() {
        let reference = r.reference_prediction.map_or(String::new(), |p| p.to_string());
        agree += usize::from(r.reference_prediction == Some(r.prediction));
        let scores: Vec<String> = r.scores.iter().map(u32::to_string).collect();
        let _ = writeln!(csv, "{i},{},{reference},{}", r.prediction, scores.join(" "));
    }
    out.write_table("network", &csv)?;
    let mut layers = String::from("layer,passes,cycles,closed_form_cycles,saturated");
    for c in EnergyCategory::ALL {
        let _ = write!(layers, ",{}_j", c.name());
    }
    layers.push_str(",total_j\n");
    for l in &report.layers {
        let _ = write!(layers, "{},{},{},{},{}", l.layer, l.passes, l.cycles, l.closed_form_cycles, l.saturated);
        for c in EnergyCategory::ALL {
            let _ = write!(layers, ",{:.6e}", l.energy.energy(c));
        }
        let _ = writeln!(layers, ",{:.6e}", l.energy.total());
    }
    out.write_table("network_layers", &layers)?;
    println!("{} images, {agree} agree with the exact reference", report.images.len());
    Ok(())
}

fn sweep(s: &Settings, out: &mut OutputDir) -> Result<()> {
    let cfg = s.macro_config()?;
    let geom = cfg.geometry;
    let sw = &s.sweep;
    let mut csv = String::new();
    match sw.kind.as_str() {
        "swing" => {
            csv.push_str("channels,topology,connected_units,alpha_eff,max_swing_v\n");
            for &ch in &sw.channels {
                let rows = 9 * ch;
                if rows > geom.n_rows {
                    continue;
                }
                for v in [DplVariant::Baseline, DplVariant::SerialSplit, DplVariant::ParallelSplit] {
                    let topo = match v {
                        DplVariant::Baseline => DplTopology::baseline(&geom),
                        _ => DplTopology::new(v, geom.units_for_rows(rows), &geom)?,
                    };
                    let a = alpha_eff(&cfg.electrical, &geom, &topo);
                    let sw = max_swing(&cfg.electrical, &geom, &topo, rows)?;
                    let _ = writeln!(csv, "{ch},{v:?},{},{a:.6e},{sw:.6e}", topo.connected_units());
                }
            }
        }
        "dp-energy" => {
            csv.push_str("channels,c_l_f,saving\n");
            for &ch in &sw.channels {
                for &cl in &sw.c_l {
                    let saving = dp_energy_savings(&cfg.electrical, &geom, ch, cl)?;
                    let _ = writeln!(csv, "{ch},{cl:.3e},{saving:.6}");
                }
            }
        }
        "cycles" => {
            let (base, h, w) = s.layer()?;
            let pipe = s.pipeline()?;
            csv.push_str("mode,c_in,r_in,n_in,n_out,cycles_per_output,regime,layer_cycles\n");
            for mode in [PipelineMode::Serial, PipelineMode::Pipelined] {
                let pipe = imagine_sim::dataflow::PipelineConfig { mode, ..pipe };
                for &ch in &sw.channels {
                    for &r in &sw.r_in {
                        let l = LayerConfig { c_in: ch, r_in: r, ..base.clone() };
                        if l.validate().is_err() || l.rows() > geom.n_rows {
                            continue;
                        }
                        let (ho, wo) = l.output_dims(h, w);
                        let p = cycles_per_output(&l, &pipe)?;
                        let total = closed_form_cycles(&l, &pipe, ho, wo)?;
                        let _ = writeln!(
                            csv,
                            "{mode:?},{ch},{r},{},{},{},{},{total}",
                            p.n_in, p.n_out, p.cycles, p.regime
                        );
                    }
                }
            }
        }
        "dram" => {
            let pipe = s.pipeline()?;
            let energy = s.energy_params();
            csv.push_str("energy_per_bit_j,offchip_bw,compute_cycles,transfer_cycles,latency_ratio,energy_ratio\n");
            let e = &cfg.electrical;
            for &epb in &sw.energy_per_bit {
                let dram = imagine_sim::dataflow::DramParams { energy_per_bit: epb, ..s.dram() };
                let o = dram_overlay_estimate(&reference_cnn_shapes(), &geom, &pipe, &dram, &energy, e.c_c, e.v_ddl, e.v_ddh)?;
                let bw = dram.offchip_bw.map_or("unlimited".to_string(), |b| b.to_string());
                let _ = writeln!(
                    csv,
                    "{epb:.3e},{bw},{},{},{:.6},{:.6}",
                    o.compute_cycles, o.transfer_cycles, o.latency_ratio, o.energy_ratio
                );
            }
        }
        other => return Err(Error::Config(format!("unknown sweep kind '{other}'"))),
    }
    out.write_table(&format!("sweep_{}", sw.kind.replace('-', "_")), &csv)?;
    Ok(())
}

fn calibrate(s: &Settings, bundle: Option<&PathBuf>, write: Option<&PathBuf>, out: &mut OutputDir) -> Result<()> {
    let ni = s.nonideality()?;
    let mut m = MacroInstance::new(s.macro_config()?, ni)?;
    let summary = m.calibrate(true);
    let mut csv = String::from("col,code,out_of_range,beta_trim,before_v,after_v\n");
    for (i, u) in m.calibration().iter().enumerate() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{:.6e},{:.6e}",
            u.code,
            u8::from(u.out_of_range),
            summary.beta_trims[i],
            summary.before[i],
            summary.after[i]
        );
    }
    out.write_table("calibration_codes", &csv)?;
    println!(
        "offset RMS {:.3} mV -> {:.3} mV, {} columns out of range",
        1e3 * summary.rms_before(),
        1e3 * summary.rms_after(),
        summary.out_of_range.iter().filter(|x| **x).count()
    );
    if let (Some(src), Some(dst)) = (bundle, write) {
        let mut b = load_bundle(src)?;
        b.calibration = Some(m.calibration().to_vec());
        b.beta_trims = Some(m.beta_trims().to_vec());
        b.save(dst)?;
        println!("wrote {}", dst.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use imagine_sim::mbiw::INJECTION_BOUND;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn default_injection_bound_matches_library() {
        assert_eq!(Settings::defaults().nonideality.injection_bound, INJECTION_BOUND);
    }
}
