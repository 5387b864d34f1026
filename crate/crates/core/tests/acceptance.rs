//! Acceptance run: one line per criterion, non-zero exit when any fails.
//!
//! Run with `cargo test -p imagine-sim --test acceptance`.

use std::time::Instant;

use imagine_sim::adc::{
    convert_behavioral, convert_structural, find_transitions, ladder_levels, linearity, transfer_argument, AbnParams,
    AdcConfig, CalUnit, Ladder, SenseAmp, GAMMAS,
};
use imagine_sim::characterize::{characterize_calibration, characterize_rms, characterize_transfer, FillSweep};
use imagine_sim::charge::{sample_noise, CapNode, NoiseSource};
use imagine_sim::config::{MacroConfig, NonidealityConfig};
use imagine_sim::dataflow::{
    closed_form_cycles, cycles_per_output, simulate_timeline, stall_cycles, timeline_cycles, LayerConfig, LayerKind,
    PipelineConfig, PipelineMode,
};
use imagine_sim::dp_array::{alpha_eff, max_swing, DplTopology, ElectricalParams, MacroGeometry};
use imagine_sim::energy::dp_energy_savings;
use imagine_sim::engine::{CimCycleInput, MacroInstance};
use imagine_sim::mbiw::{accumulate_weights, alpha_mb, weight_common_mode, MbiwErrors, MbiwState};
use imagine_sim::network::{random_image, reference_bundle, run_network};
use imagine_sim::rng::{domain, NoiseStreams, Rng};
use rayon::prelude::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn rng(a: u64) -> Rng {
    NoiseStreams::new(0xACCE_97).stream3(domain::USER, a, 0)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn oracle_equivalence() -> Verdict {
    const N: u64 = 10_000;
    let t0 = Instant::now();
    let base = MacroInstance::<f64>::new(MacroConfig::default(), NonidealityConfig::ideal()).unwrap();
    let mismatches: usize = (0..N)
        .into_par_iter()
        .map(|i| {
            let mut r = rng(i);
            let r_in = 1 + r.below(8) as u32;
            let r_w = 1 + r.below(4) as u32;
            let r_out = 1 + r.below(8) as u32;
            let rows = 1 + r.below(72) as usize;
            let gamma = GAMMAS[r.below(6) as usize];
            let n_outputs = 1 + r.below(6) as usize;
            let weights: Vec<Vec<u32>> =
                (0..n_outputs).map(|_| (0..rows).map(|_| r.below(1 << r_w) as u32).collect()).collect();
            let inputs = (0..rows).map(|_| r.below(1 << r_in) as u32).collect();
            let beta = if r.bit() { (0..n_outputs).map(|_| r.below(31) as i8 - 15).collect() } else { vec![] };
            let mut m = base.clone();
            m.load_weights(&weights, r_w).unwrap();
            let input = CimCycleInput { inputs, r_in, r_w, r_out, gamma, n_outputs, beta };
            m.run_cycle(&input, i).unwrap().oracle_mismatches()
        })
        .sum();
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 60.0,
        format!("{mismatches} mismatches over {N} instances in {secs:.1} s"),
    )
}

fn mbiw_closed_forms() -> Verdict {
    let p = ElectricalParams::<f64>::default();
    let a = alpha_mb(&p);
    let mut worst: f64 = 0.0;
    for r_in in 1..=8u32 {
        for trial in 0..50 {
            let mut r = rng(1000 + 100 * r_in as u64 + trial);
            let v: Vec<f64> = (0..r_in).map(|_| 0.8 * r.uniform()).collect();
            let mut s = MbiwState::new(r_in, 1, 4, p.v_ddl).unwrap();
            for vk in &v {
                s.end_dp().unwrap();
                s.accumulate_input_bit(&[*vk], &p, &MbiwErrors::ideal(), None).unwrap();
            }
            let expected = if r_in == 1 {
                v[0]
            } else {
                (0..r_in as usize).map(|k| a * (1.0 - a).powi((r_in as usize - 1 - k) as i32) * v[k]).sum::<f64>()
                    + (1.0 - a).powi(r_in as i32) * p.v_ddl
            };
            worst = worst.max(rel(s.v_dpl[0], expected));
        }
    }
    let mut worst_w: f64 = 0.0;
    for r_w in 1..=4u32 {
        for trial in 0..50 {
            let mut r = rng(2000 + 100 * r_w as u64 + trial);
            let v: Vec<f64> = (0..r_w).map(|_| 0.8 * r.uniform()).collect();
            let got = accumulate_weights(&v, &p).unwrap() - weight_common_mode(r_w, p.v_ddl);
            let expected: f64 = (0..r_w as usize).map(|j| 0.5f64.powi((r_w as usize - j) as i32) * v[j]).sum();
            worst_w = worst_w.max(rel(got, expected));
        }
    }
    verdict(
        worst <= 1e-12 && worst_w <= 1e-12,
        format!("temporal worst rel err {worst:.2e}, spatial worst rel err {worst_w:.2e}"),
    )
}

fn ktc_noise() -> Verdict {
    let node = CapNode::new(0.7e-15, 0.4).unwrap();
    let src = NoiseSource::thermal(300.0);
    let mut r = rng(3);
    let n = 1_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let x: f64 = sample_noise(&src, &node, &mut r);
        s += x;
        s2 += x * x;
    }
    let mean = s / n as f64;
    let std = (s2 / n as f64 - mean * mean).sqrt();
    verdict(rel(std, 2.4e-3) <= 0.02, format!("sample std {:.4} mV (target 2.4 mV +- 2%)", std * 1e3))
}

fn swing_adaptivity() -> Verdict {
    let g = MacroGeometry::default();
    let ratio = |p: &ElectricalParams<f64>| {
        alpha_eff(p, &g, &DplTopology::serial(1, &g).unwrap()) / alpha_eff(p, &g, &DplTopology::baseline(&g))
    };
    let p = ElectricalParams::<f64>::default();
    let default_ratio = ratio(&p);
    // calibration knob: the per-unit parasitic that brings the ratio to 20x
    let (mut lo, mut hi) = (0.0, 100e-15);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if ratio(&ElectricalParams { c_p_per_unit: mid, ..p }) < 20.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let calibrated = ratio(&ElectricalParams { c_p_per_unit: hi, ..p });
    let mut ordered = true;
    for ch in 1..=128usize {
        let rows = 9 * ch;
        let units = g.units_for_rows(rows);
        let s = max_swing(&p, &g, &DplTopology::serial(units, &g).unwrap(), rows).unwrap();
        let q = max_swing(&p, &g, &DplTopology::parallel(units, &g).unwrap(), rows).unwrap();
        let b = max_swing(&p, &g, &DplTopology::baseline(&g), rows).unwrap();
        ordered &= s >= q && q >= b;
    }
    verdict(
        default_ratio >= 10.0 && (calibrated - 20.0).abs() < 0.1 && ordered,
        format!(
            "default ratio {default_ratio:.2}x, 20x at C_p = {:.1} fF/unit; serial >= parallel >= baseline at every C_in: {ordered}",
            hi * 1e15
        ),
    )
}

fn dp_energy() -> Verdict {
    let g = MacroGeometry::default();
    let p = ElectricalParams::<f64>::default();
    let at40 = dp_energy_savings(&p, &g, 64, 40e-15).unwrap();
    let loads: Vec<f64> = (1..=32).map(|i| 5e-15 * i as f64).collect();
    let s: Vec<f64> = loads.iter().map(|&cl| dp_energy_savings(&p, &g, 64, cl).unwrap()).collect();
    let monotone = s.windows(2).all(|w| w[1] < w[0]);
    verdict(
        (at40 - 0.72).abs() <= 0.10 && monotone,
        format!("saving {:.1}% at 64 ch / 40 fF, decreasing over 5..160 fF: {monotone}", at40 * 100.0),
    )
}

fn adc() -> Verdict {
    // structural vs behavioral over every code, ideal, unit gain
    let mut disagreements = 0;
    let mut off_code = 0;
    for r_out in 1..=8u32 {
        let cfg = AdcConfig { r_out, gamma: 1, ladder_mismatch_sigma: 0.0, ..Default::default() };
        let lv = ladder_levels(1, &cfg, &Ladder::ideal(cfg.v_ddh)).unwrap();
        let half = (1u32 << (r_out - 1)) as f64;
        let lsb = cfg.alpha_adc() * cfg.v_ddh / half;
        for c in 0..(1u32 << r_out) {
            for j in 0..16 {
                let v = cfg.v_ref + (c as f64 - half + (j as f64 + 0.5) / 16.0) * lsb;
                let s = convert_structural(v, &AbnParams::default(), &CalUnit::default(), &cfg, &lv, &SenseAmp::ideal(), None)
                    .unwrap()
                    .code;
                let b = convert_behavioral(v, &AbnParams::default(), &CalUnit::default(), &cfg);
                disagreements += usize::from(s != b);
                off_code += usize::from(b != c);
            }
        }
    }
    // monotone codes under default ladder mismatch, every gain
    let mut monotone = true;
    for gamma in GAMMAS {
        for seed in 0..5 {
            let cfg = AdcConfig { gamma, ..Default::default() };
            let lad = Ladder::with_mismatch(cfg.v_ddh, cfg.ladder_mismatch_sigma, &mut rng(4000 + seed));
            let lv = ladder_levels(gamma, &cfg, &lad).unwrap();
            let span = 0.45 / gamma as f64;
            let mut last = 0;
            for i in 0..=4000 {
                let v = cfg.v_ref - span + 2.0 * span * i as f64 / 4000.0;
                let c = convert_structural(v, &AbnParams::default(), &CalUnit::default(), &cfg, &lv, &SenseAmp::ideal(), None)
                    .unwrap()
                    .code;
                monotone &= c >= last;
                last = c;
            }
        }
    }
    // INL at the highest gain, averaged over ladder draws
    let seeds = 20;
    let (mut mean, mut peak) = (0.0, 0.0f64);
    for seed in 0..seeds {
        let cfg = AdcConfig { gamma: 32, ..Default::default() };
        let lad = Ladder::with_mismatch(cfg.v_ddh, cfg.ladder_mismatch_sigma, &mut rng(5000 + seed));
        let lv = ladder_levels(32, &cfg, &lad).unwrap();
        let span = 0.42 / 32.0;
        let t = find_transitions(
            |dv| {
                convert_structural(cfg.v_ref + dv, &AbnParams::default(), &CalUnit::default(), &cfg, &lv, &SenseAmp::ideal(), None)
                    .unwrap()
                    .code
            },
            -span,
            span,
            256,
            16,
        );
        let l = linearity(&t);
        mean += l.mean_abs_inl / seeds as f64;
        peak = peak.max(l.peak_abs_inl);
    }
    // pre-floor gain doubles exactly with gamma
    let mut worst_gain: f64 = 0.0;
    for w in GAMMAS.windows(2) {
        for i in 1..=50 {
            let dv = 1e-4 * i as f64 - 2.6e-3;
            let arg = |g| {
                let cfg = AdcConfig { gamma: g, ..Default::default() };
                transfer_argument(dv, &AbnParams::default(), &CalUnit::default(), &cfg) - 128.0
            };
            worst_gain = worst_gain.max(rel(arg(w[1]) / arg(w[0]), 2.0));
        }
    }
    let inl_ok = (0.55..=1.65).contains(&mean) && peak <= 4.5;
    verdict(
        disagreements == 0 && off_code == 0 && monotone && inl_ok && worst_gain <= 1e-12,
        format!(
            "{disagreements} structural/behavioral mismatches, {off_code} off-code, monotone: {monotone}, INL@32 mean {mean:.2} peak {peak:.2} LSB, gain-doubling err {worst_gain:.1e}"
        ),
    )
}

fn calibration() -> Verdict {
    let cfg = MacroConfig::<f64>::default();
    let ni = NonidealityConfig::defaults(0);
    let report = characterize_calibration(&cfg, &ni, 16).unwrap();
    let within = report.fraction_within(1.0);
    let ratio = report.spatial_before() / report.spatial_after();
    // residual bound of the search itself: offsets the 7b bank reaches,
    // resolved by a comparator without decision noise
    let in_range = |ni: NonidealityConfig| {
        let mut m = MacroInstance::new(cfg.clone(), ni).unwrap();
        let summary = m.calibrate(true);
        summary
            .after
            .iter()
            .zip(&summary.out_of_range)
            .zip(&summary.beta_trims)
            .filter(|((_, o), t)| !**o && **t == 0)
            .fold(0.0f64, |w, ((a, _), _)| w.max(a.abs()))
    };
    let quiet = in_range(NonidealityConfig { sa_decision_noise: false, ..ni.clone() });
    let noisy = in_range(ni);
    verdict(
        within >= 0.9 && quiet <= 0.47e-3 && ratio >= 5.0,
        format!(
            "{:.1}% within 1 LSB8, in-range residual <= {:.3} mV ({:.3} mV with decision noise), spatial deviation {:.2} -> {:.2} LSB8 ({ratio:.2}x)",
            within * 100.0,
            quiet * 1e3,
            noisy * 1e3,
            report.spatial_before(),
            report.spatial_after()
        ),
    )
}

fn random_layer(r: &mut Rng) -> (LayerConfig, PipelineConfig, usize, usize) {
    let kind = if r.bit() { LayerKind::Conv } else { LayerKind::Fc };
    let r_in = 1 + r.below(8) as u32;
    let r_w = 1 + r.below(4) as u32;
    let r_out = 1 + r.below(8) as u32;
    let mut l = match kind {
        LayerKind::Conv => {
            let side = [1usize, 3, 5][r.below(3) as usize];
            LayerConfig {
                k: side * side,
                padding: r.below(side as u64 / 2 + 1) as usize,
                ..LayerConfig::conv(4 * (1 + r.below(16) as usize), 1 + r.below(256) as usize, r_in, r_w, r_out)
            }
        }
        LayerKind::Fc => LayerConfig::fc(1 + r.below(1152) as usize, 1 + r.below(256) as usize, r_in, r_w, r_out),
    };
    l.stride = 1 + r.below(2) as usize;
    let pipe = PipelineConfig {
        mode: if r.bit() { PipelineMode::Pipelined } else { PipelineMode::Serial },
        n_cim: 1 + r.below(4) as u32,
        bw: [16, 32, 64, 128, 256][r.below(5) as usize],
        ..PipelineConfig::default()
    };
    let (h, w) = if kind == LayerKind::Fc { (1, 1) } else { (1 + r.below(12) as usize, 1 + r.below(12) as usize) };
    (l, pipe, h, w)
}

fn cycle_model() -> Verdict {
    let mut mismatches = 0;
    for i in 0..1000 {
        let (l, pipe, h, w) = random_layer(&mut rng(6000 + i));
        let (ho, wo) = l.output_dims(h, w);
        let sim = timeline_cycles(&simulate_timeline(&l, &pipe, ho, wo).unwrap());
        mismatches += usize::from(sim != closed_form_cycles(&l, &pipe, ho, wo).unwrap());
    }
    let pipe = PipelineConfig::default();
    let n_in = cycles_per_output(&LayerConfig::conv(16, 64, 8, 1, 8), &pipe).unwrap().n_in;
    let n_out = cycles_per_output(&LayerConfig::conv(16, 64, 8, 1, 8), &pipe).unwrap().n_out;
    let stall = stall_cycles(&LayerConfig::conv(16, 256, 8, 1, 8), &pipe).unwrap();
    verdict(
        mismatches == 0 && (n_in, n_out, stall) == (9, 4, 18),
        format!("{mismatches} of 1000 random layers differ; N_in {n_in}, N_out {n_out}, N_stall {stall}"),
    )
}

fn rms_vs_gamma() -> Verdict {
    let rows = characterize_rms(&MacroConfig::<f64>::default(), &NonidealityConfig::defaults(0), &FillSweep::default()).unwrap();
    let nondecreasing = rows.windows(2).all(|w| w[1].max_rms >= w[0].max_rms);
    let unity = rows.iter().find(|r| r.gamma == 1).map_or(f64::NAN, |r| r.max_rms);
    let curve: Vec<String> = rows.iter().map(|r| format!("{}:{:.2}", r.gamma, r.max_rms)).collect();
    verdict(
        nondecreasing && (0.26..=0.78).contains(&unity),
        format!("max RMS by gamma [{}] LSB, non-decreasing: {nondecreasing}", curve.join(" ")),
    )
}

fn determinism() -> Verdict {
    let cfg = MacroConfig::<f64>::default();
    let ni = NonidealityConfig::defaults(9);
    let sweep = FillSweep { iters: 5, fill_step: 16, ..FillSweep::default() };
    let bundle = reference_bundle(&[LayerConfig::conv(4, 8, 4, 2, 4), LayerConfig::fc(8 * 8 * 8, 10, 4, 2, 8)], 3);
    let images: Vec<_> = (0..3).map(|i| random_image(8, 8, 4, 4, i)).collect();
    let mut m = MacroInstance::new(cfg.clone(), ni.clone()).unwrap();
    m.calibrate(true);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let t = characterize_transfer(&cfg, &ni, &sweep).unwrap();
            let n = run_network(&bundle, &images, None, &m, &PipelineConfig::default(), false).unwrap();
            (format!("{t:?}"), format!("{n:?}"))
        })
    };
    let one = run(1);
    let same = [run(1), run(2), run(5)].iter().all(|r| *r == one);
    verdict(same, format!("transfer sweep and network run identical on 1, 2 and 5 threads: {same}"))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("accumulation closed forms", mbiw_closed_forms),
        ("kT/C noise", ktc_noise),
        ("swing adaptivity", swing_adaptivity),
        ("DP energy savings", dp_energy),
        ("ADC", adc),
        ("calibration", calibration),
        ("cycle model", cycle_model),
        ("RMS vs gamma", rms_vs_gamma),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let v = check();
        failed += usize::from(!v.pass);
        println!(
            "criterion {:>2} {} {name}: {} [{:.1} s]",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
