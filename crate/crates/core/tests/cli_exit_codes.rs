use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_beamgeom"))
}

fn fixture() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/delta_compare.toml"))
}

#[test]
fn fixture_passes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let st = bin().args(["compare", "--config"]).arg(fixture()).arg("--out").arg(tmp.path()).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], true);
    assert!(summary["metrics"]["max_position_separation"].as_f64().unwrap() < 1e-9);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[validity]\ne0 = 1\nunknown = 3\n").unwrap();
    assert_eq!(bin().args(["validity", "--config"]).arg(&bad).status().unwrap().code(), Some(2));
    let missing = tmp.path().join("missing.toml");
    assert_eq!(bin().args(["validity", "--config"]).arg(&missing).status().unwrap().code(), Some(1));
    let strict = tmp.path().join("strict.toml");
    std::fs::write(
        &strict,
        "[validity]\ne0 = 100\nalpha = 0.01\nfield_norm = 1\nl_max_geom = 1\nbeam_length = 1\n[validity.constants]\nk = 1\n[[assert]]\nmetric = \"t_max_velocity\"\nmin = 1e5\n",
    )
    .unwrap();
    let out = tmp.path().join("o");
    assert_eq!(bin().args(["validity", "--config"]).arg(&strict).arg("--out").arg(&out).status().unwrap().code(), Some(4));
    // ultra-relativistic sample that overflows the shell normalization
    let numeric = tmp.path().join("numeric.toml");
    std::fs::write(&numeric, "[field]\nkind = \"normal-dipole\"\nb0 = 1e300\n[simulate]\nu = [0, 1e300, 0]\ntau = 1\n").unwrap();
    assert_eq!(bin().args(["simulate", "--config"]).arg(&numeric).arg("--out").arg(&out).status().unwrap().code(), Some(3));
}

#[test]
fn dry_run_prints_plan() {
    let out = bin().args(["compare", "--dry-run", "--config"]).arg(fixture()).output().unwrap();
    assert!(out.status.success());
    let plan: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(plan["command"], "compare");
    assert_eq!(plan["config"]["field"]["kind"], "normal-dipole");
}
