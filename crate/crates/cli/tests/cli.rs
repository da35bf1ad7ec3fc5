use std::fs;
use std::path::Path;
use std::process::Command;

use mafo::{main_with, EXIT_CERTIFICATE_FAILS, EXIT_GAINS_EXCEED_BOUND, EXIT_INPUT, EXIT_OK};
use tempfile::TempDir;

fn mafo(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["mafo"];
    full.extend_from_slice(args);
    let code = main_with(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name}"));
    lines.map(|l| l.split(',').nth(k).unwrap().parse().unwrap()).collect()
}

const TWO_BUS_FEEDER: &str = r#"
buses = [
  { id = "s", phases = "abc", base_voltage_v = 2400.0 },
  { id = "h", phases = "abc", base_voltage_v = 2400.0 },
]
lines = [ { id = "L", from = "s", to = "h", z_self_ohm = [0.1, 0.2], z_mutual_ohm = [0.0, 0.0], ampacity_a = 300.0 } ]
slack = { bus = "s", voltage_pu = 1.0 }
ders = [ { id = "D", bus = "h" } ]
"#;

const TWO_BUS_PARTITION: &str = r#"
[[areas]]
id = "A"
interface_bus = "s"
ders = ["D"]
monitored_buses = ["h"]
"#;

fn two_bus(dir: &Path) -> String {
    fs::write(dir.join("f.toml"), TWO_BUS_FEEDER).unwrap();
    fs::write(dir.join("p.toml"), TWO_BUS_PARTITION).unwrap();
    let sc = dir.join("sc.toml");
    fs::write(
        &sc,
        "feeder = \"f.toml\"\npartition = \"p.toml\"\nduration_s = 2.0\n\n[[reference]]\ntime_s = 0.0\ndp_w = 50000.0\n",
    )
    .unwrap();
    sc.to_str().unwrap().to_string()
}

const UNIT_A: [&str; 14] = [
    "--set", "controller.a_lambda=1000",
    "--set", "controller.a_mu=1000",
    "--set", "controller.a_eta=1000",
    "--set", "controller.a_psi=1000",
    "--set", "controller.a_gamma=1000",
    "--set", "controller.a_nu=1000",
    "--set", "controller.a_zeta=1000",
];

#[test]
fn run_preset_tracks_the_head_request() {
    let tmp = TempDir::new().unwrap();
    let o = tmp.path().to_str().unwrap();
    let (code, out, err) = mafo(&["run", "-s", "5bus-step-2ca", "-o", o]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("[tracking]"));
    let csv = fs::read_to_string(tmp.path().join("timeseries.csv")).unwrap();
    let dp0 = column(&csv, "dp0_w");
    let t = column(&csv, "time_s");
    // Settled just before the load step at 5 s.
    let k = t.iter().position(|&x| x >= 4.9).unwrap();
    assert!((dp0[k] - 200e3).abs() < 4e3, "dp0 at 4.9 s = {}", dp0[k]);
    assert!(tmp.path().join("summary.txt").exists());
}

#[test]
fn override_is_applied_and_echoed() {
    let tmp = TempDir::new().unwrap();
    let o = tmp.path().to_str().unwrap();
    let (code, out, _) = mafo(&["run", "-s", "5bus-step-2ca", "-o", o, "--set", "controller.alpha=0.003"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("override: controller.alpha=0.003"));
    assert!(out.contains("alpha = 0.003"));
}

#[test]
fn missing_file_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let sc = tmp.path().join("sc.toml");
    fs::write(&sc, "feeder = \"nope.toml\"\npartition = \"p.toml\"\nduration_s = 1.0\n").unwrap();
    let o = tmp.path().join("o");
    let (code, _, err) = mafo(&["run", "-s", sc.to_str().unwrap(), "-o", o.to_str().unwrap()]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("file not found"), "{err}");
    assert!(err.contains("nope.toml"), "{err}");
}

#[test]
fn unknown_key_reports_its_line() {
    let tmp = TempDir::new().unwrap();
    let sc = two_bus(tmp.path());
    let text = fs::read_to_string(&sc).unwrap() + "\n[controller]\nalpah = 0.1\n";
    fs::write(&sc, text).unwrap();
    let (code, _, err) = mafo(&["run", "-s", &sc, "-o", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("alpah"), "{err}");
    assert!(err.contains("line 10"), "{err}");
}

#[test]
fn malformed_feeder_is_diagnosed() {
    let tmp = TempDir::new().unwrap();
    let sc = two_bus(tmp.path());
    fs::write(tmp.path().join("f.toml"), TWO_BUS_FEEDER.replace("ampacity_a = 300.0", "ampacity_a = -1.0")).unwrap();
    let (code, _, err) = mafo(&["run", "-s", &sc, "-o", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("ampacity"), "{err}");

    fs::write(tmp.path().join("f.toml"), "buses = [").unwrap();
    let (code, _, err) = mafo(&["run", "-s", &sc, "-o", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("f.toml"), "{err}");
}

#[test]
fn bad_override_is_rejected() {
    let (code, _, err) = mafo(&["run", "-s", "5bus-step-2ca", "--set", "controller.alpha=fast"]);
    assert_eq!(code, EXIT_INPUT);
    assert!(err.contains("controller.alpha"), "{err}");
    let (code, _, _) = mafo(&["run", "-s", "5bus-step-2ca", "--set", "no_equals_sign"]);
    assert_eq!(code, EXIT_INPUT);
}

#[test]
fn certify_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let o = tmp.path().to_str().unwrap();

    // Unit gains, tiny step: certificate holds and the gains are inside the bound.
    let mut args = vec!["certify", "-s", "5bus-step-1ca", "-o", o, "-q", "--set", "controller.alpha=1e-8"];
    args.extend_from_slice(&UNIT_A);
    let (code, _, err) = mafo(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("certificate.json")).unwrap()).unwrap();
    assert_eq!(json["pass"], true);
    assert_eq!(json["gains_admissible"], true);

    // Same certificate, step 10^6 larger.
    let mut args = vec!["certify", "-s", "5bus-step-1ca", "-o", o, "-q", "--set", "controller.alpha=1e-2"];
    args.extend_from_slice(&UNIT_A);
    assert_eq!(mafo(&args).0, EXIT_GAINS_EXCEED_BOUND);

    assert_eq!(mafo(&["certify", "-s", "5bus-step-2ca", "-o", o, "-q"]).0, EXIT_CERTIFICATE_FAILS);
    assert!(tmp.path().join("certificate.txt").exists());
}

#[test]
fn linearize_head_der_on_an_unloaded_feeder() {
    let tmp = TempDir::new().unwrap();
    let sc = two_bus(tmp.path());
    let o = tmp.path().join("o");
    let (code, _, err) = mafo(&["linearize", "-s", &sc, "-o", o.to_str().unwrap(), "-q"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(o.join("sensitivities.json")).unwrap()).unwrap();
    let area = &json["areas"][0];
    let col = |key: &str, j: usize| -> Vec<f64> {
        area[key].as_array().unwrap().iter().map(|r| r[j].as_f64().unwrap()).collect()
    };
    // With no load the import drops one-for-one with the DER injection,
    // split equally over the phases.
    let m_p = col("M", 0);
    assert!((m_p.iter().sum::<f64>() + 1.0).abs() < 1e-6, "{m_p:?}");
    for m in &m_p {
        assert!((m + 1.0 / 3.0).abs() < 1e-6);
    }
    let h_q = col("H", 1);
    assert!((h_q.iter().sum::<f64>() + 1.0).abs() < 1e-6);
    // |V| rises by r * P_phase / V per phase: 0.1 / (3 * 2400).
    for a in col("A", 0) {
        assert!((a - 0.1 / 7200.0).abs() < 1e-9, "{a}");
    }
    for a in col("A", 1) {
        assert!((a - 0.2 / 7200.0).abs() < 1e-9, "{a}");
    }
}

#[test]
fn dumped_sensitivities_reproduce_the_run() {
    let tmp = TempDir::new().unwrap();
    let sc = two_bus(tmp.path());
    let lin = tmp.path().join("lin");
    assert_eq!(mafo(&["linearize", "-s", &sc, "-o", lin.to_str().unwrap(), "-q"]).0, EXIT_OK);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(mafo(&["run", "-s", &sc, "-o", a.to_str().unwrap(), "-q"]).0, EXIT_OK);
    let file = format!("sensitivities_file=\"{}\"", lin.join("sensitivities.json").display());
    let (code, _, err) = mafo(&["run", "-s", &sc, "-o", b.to_str().unwrap(), "-q", "--set", &file]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(
        fs::read_to_string(a.join("timeseries.csv")).unwrap(),
        fs::read_to_string(b.join("timeseries.csv")).unwrap()
    );
}

#[test]
fn exported_presets_all_run() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("presets");
    let (code, out, _) = mafo(&["presets", "--export", dir.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert!(out.lines().count() >= 10);
    let (_, listing, _) = mafo(&["presets"]);
    for line in listing.lines() {
        let name = line.split_whitespace().next().unwrap();
        let sc = dir.join(format!("{name}.toml"));
        assert!(sc.exists(), "{}", sc.display());
        let o = tmp.path().join(name);
        let mut args = vec!["run", "-s", sc.to_str().unwrap(), "-o", o.to_str().unwrap(), "-q"];
        // The long synthetic ramp is exercised elsewhere; a short window is enough here.
        if name.starts_with("synthetic") {
            args.extend_from_slice(&["--set", "duration_s=2.0"]);
        }
        let (code, _, err) = mafo(&args);
        assert_eq!(code, EXIT_OK, "{name}: {err}");
        assert!(o.join("timeseries.csv").exists());
    }
}

#[test]
fn binary_help_lists_exit_codes() {
    let out = Command::new(env!("CARGO_BIN_EXE_mafo")).arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Exit codes:"));
    for code in ["0 ", "1 ", "2 ", "3 ", "4 "] {
        assert!(text.contains(&format!("  {code}")), "{code}");
    }
}

#[test]
fn binary_exit_status_matches() {
    let tmp = TempDir::new().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_mafo"))
        .args(["certify", "-s", "5bus-step-2ca", "-q", "-o"])
        .arg(tmp.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_CERTIFICATE_FAILS));
    let status = Command::new(env!("CARGO_BIN_EXE_mafo")).args(["run", "-s", "no-such-preset"]).status().unwrap();
    assert_eq!(status.code(), Some(EXIT_INPUT));
}
