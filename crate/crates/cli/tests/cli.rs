use std::path::Path;
use std::process::{Command, Output};

use imagine_sim::bundle::{LayerRecord, ModelBundle, Pool, QuantMeta};
use imagine_sim::characterize::HwNoiseSpec;
use imagine_sim::dataflow::LayerConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_imagine-sim"));
    // keep the caller's environment from leaking into the settings
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("IMAGINE_SIM_")) {
        c.env_remove(k);
    }
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    let o = bin().args(args).arg("--out").arg(out).output().unwrap();
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn small_net(dir: &Path) -> std::path::PathBuf {
    let layers = [LayerConfig::conv(4, 8, 4, 2, 4), LayerConfig::fc(8 * 8 * 8, 10, 4, 2, 8)];
    let path = dir.join("small.cimb");
    imagine_sim::network::reference_bundle(&layers, 11).save(&path).unwrap();
    path
}

const QUICK: &[&str] = &["characterize", "--iters", "3", "--gamma", "1,4", "--set", "characterize.cluster_iters=2"];

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let o = bin().output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn bad_flags_and_unknown_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().args(["sweep", "--set", "settling.nope=1"]).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["sweep", "--vdd", "0.4"]).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["sweep", "--corner", "XX"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn every_output_file_starts_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    run(QUICK, dir.path());
    run(&["sim-layer", "--seed", "7"], dir.path());
    let mut n = 0;
    for e in std::fs::read_dir(dir.path()).unwrap() {
        let text = read(&e.unwrap().path());
        let lines: Vec<&str> = text.lines().take(4).collect();
        assert!(lines[0].starts_with("# imagine-sim "), "{lines:?}");
        assert!(lines[1].starts_with("# seed "));
        let hash = lines[2].strip_prefix("# config sha256:").unwrap();
        assert_eq!(hash.len(), 64);
        assert!(lines[3].starts_with("# command "));
        n += 1;
    }
    assert_eq!(n, 7);
    assert!(read(&dir.path().join("layer_summary.csv")).contains("# seed 7\n"));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, jobs) in [(a.path(), "1"), (b.path(), "3")] {
        let mut args = QUICK.to_vec();
        args.extend(["--jobs", jobs]);
        run(&args, dir);
        run(&["sim-layer", "--jobs", jobs], dir);
        let net = small_net(dir);
        run(&["run-net", "--bundle", net.to_str().unwrap(), "--images", "2", "--jobs", jobs, "--set", "network.height=8", "--set", "network.width=8"], dir);
    }
    for name in ["transfer.csv", "rms.csv", "clustering.csv", "calibration.csv", "hw_noise_spec.csv", "layer_output.csv", "network.csv", "network_layers.csv", "small.cimb"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn noise_spec_is_readable_by_the_consumer() {
    let dir = tempfile::tempdir().unwrap();
    run(QUICK, dir.path());
    let spec = HwNoiseSpec::from_csv(&read(&dir.path().join("hw_noise_spec.csv"))).unwrap();
    assert_eq!(spec.gamma_curve.iter().map(|g| g.0).collect::<Vec<_>>(), vec![1, 4]);
    assert!(spec.rms_lsb > 0.0);
}

#[test]
fn config_file_env_and_flags_layer_in_order() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("base.toml"), "[settling]\ncorner = \"FF\"\n[run]\nseed = 3\n").unwrap();
    std::fs::write(dir.path().join("run.toml"), "include = \"base.toml\"\n[settling]\nt_dp = 2e-9\n").unwrap();
    let show = |extra: &[&str], env: Option<(&str, &str)>| {
        let mut c = bin();
        c.arg("show-config").arg("--config").arg(dir.path().join("run.toml")).args(extra);
        if let Some((k, v)) = env {
            c.env(k, v);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let s = show(&[], None);
    assert!(s.contains("# seed 3\n"));
    assert!(s.contains("corner = \"FF\"") && s.contains("t_dp = 0.000000002\n"));
    let s = show(&[], Some(("IMAGINE_SIM_SETTLING__CORNER", "\"SS\"")));
    assert!(s.contains("corner = \"SS\""));
    let s = show(&["--corner", "TT", "--set", "settling.corner=\"SS\""], Some(("IMAGINE_SIM_SETTLING__CORNER", "FF")));
    assert!(s.contains("corner = \"TT\""));
    let s = show(&["--vdd", "0.35/0.7", "--topology", "parallel"], None);
    assert!(s.contains("v_ddl = 0.35") && s.contains("v_ddh = 0.7") && s.contains("variant = \"parallel\""));
}

#[test]
fn emit_plot_data_writes_whitespace_columns() {
    let dir = tempfile::tempdir().unwrap();
    run(&["sweep", "--kind", "cycles", "--emit", "plot-data"], dir.path());
    let text = read(&dir.path().join("sweep_cycles.dat"));
    let body: Vec<&str> = text.lines().skip(4).collect();
    assert!(body[0].starts_with("# mode c_in r_in"));
    assert!(body[1..].iter().all(|l| !l.contains(',') && l.split_whitespace().count() == 8));
}

#[test]
fn unmappable_bundle_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LayerConfig { k: 17 * 17, padding: 8, ..LayerConfig::conv(4, 2, 4, 1, 4) };
    let rows = cfg.rows();
    let b = ModelBundle {
        layers: vec![LayerRecord { cfg, pool: Pool::None, quant: QuantMeta::default(), weights: vec![vec![0; rows]; 2] }],
        calibration: None,
        beta_trims: None,
    };
    let path = dir.path().join("big.cimb");
    b.save(&path).unwrap();
    let o = bin().arg("run-net").arg("--bundle").arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn calibration_round_trips_through_a_bundle() {
    let dir = tempfile::tempdir().unwrap();
    run(&["export-reference", "--file", "ref.cimb"], dir.path());
    let src = dir.path().join("ref.cimb");
    let dst = dir.path().join("cal.cimb");
    run(&["calibrate", "--bundle", src.to_str().unwrap(), "--write-bundle", dst.to_str().unwrap()], dir.path());
    let b = imagine_sim::bundle::load_bundle(&dst).unwrap();
    assert_eq!(b.calibration.as_ref().map(Vec::len), Some(256));
    assert_eq!(b.beta_trims.as_ref().map(Vec::len), Some(256));
    assert_eq!(b.layers, imagine_sim::bundle::load_bundle(&src).unwrap().layers);
}
