use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wavemap"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(sub: &str, cfg: &Path, out: &Path, extra: &[&str]) -> i32 {
    let st = bin()
        .arg(sub)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .status()
        .expect("binary runs");
    st.code().expect("exit code")
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn geodesic_solve_is_tiled_or_continued_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run("solve", &config("geodesic.toml"), &a, &["--threads", "1"]), 0);
    assert_eq!(run("solve", &config("geodesic.toml"), &b, &["--threads", "3"]), 0);
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));
    let diag: serde_json::Value = serde_json::from_slice(&fs::read(a.join("diagnostics.json")).unwrap()).unwrap();
    let path = diag["path"].as_str().unwrap();
    assert!(path == "Continued" || path == "Tiled", "{path}");
    assert_eq!(diag["manifold_defect_ok"], true);
}

#[test]
fn convergence_study_reaches_second_order() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run("converge", &config("geodesic_converge.toml"), tmp.path(), &[]), 0);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("convergence.json")).unwrap()).unwrap();
    assert_eq!(v["reference"], "closed_form");
    assert!(v["min_order"].as_f64().unwrap() >= 1.8);
    let csv = fs::read_to_string(tmp.path().join("convergence.csv")).unwrap();
    assert!(csv.starts_with("h,sup_error,order\n6.2500000000000000e-2,"));
}

#[test]
fn traveling_wave_errors_sit_at_rounding_level() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run("converge", &config("traveling_wave.toml"), tmp.path(), &[]), 0);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("convergence.json")).unwrap()).unwrap();
    for e in v["errors"].as_array().unwrap() {
        assert!(e.as_f64().unwrap() < 1e-14);
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    assert_eq!(run("verify-estimates", &config("verify.toml"), &out, &["--seed", "99"]), 0);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("estimates.json")).unwrap()).unwrap();
    assert_eq!(v["seed"], 99);
    assert_eq!(v["failed"], 0);
}

#[test]
fn scatter_writes_both_tables() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run("scatter", &config("cone_scatter.toml"), tmp.path(), &[]), 0);
    let defects = fs::read_to_string(tmp.path().join("defects.csv")).unwrap();
    assert!(defects.starts_with("t,sup_defect,l1_ut,l1_ux\n"));
    let data = fs::read_to_string(tmp.path().join("scattering_data.csv")).unwrap();
    assert!(data.starts_with("x,ubar_1,ubar_2,ubar_3,vbar_1,vbar_2,vbar_3\n"));
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(config("geodesic.toml")).unwrap();
    // spacing that does not divide the base
    let bad_h = tmp.path().join("bad_h.toml");
    fs::write(&bad_h, base.replace("h = 0.015625", "h = 0.3")).unwrap();
    assert_eq!(run("solve", &bad_h, &tmp.path().join("o1"), &[]), 2);
    // missing file
    assert_eq!(run("solve", &tmp.path().join("nope.toml"), &tmp.path().join("o2"), &[]), 2);
    // velocity normal to the sphere
    let table = tmp.path().join("t.csv");
    let mut rows = String::from("x,u1,u2,u3,v1,v2,v3\n");
    for i in 0..=128 {
        rows.push_str(&format!("{},0,0,1,0,0,1\n", -1.0 + i as f64 / 64.0));
    }
    fs::write(&table, rows).unwrap();
    let incompatible = tmp.path().join("inc.toml");
    let data = format!("[data]\nkind = \"table\"\nfile = \"{}\"\n", table.display());
    fs::write(&incompatible, base.replace("[data]\nkind = \"geodesic\"\nomega = 1.0\n", &data)).unwrap();
    assert_eq!(run("solve", &incompatible, &tmp.path().join("o3"), &[]), 3);
    // the default budget stalls on the geodesic at this spacing
    let stall = tmp.path().join("stall.toml");
    fs::write(&stall, base.replace("eta = 0.25", "eta = 0.03125")).unwrap();
    assert_eq!(run("solve", &stall, &tmp.path().join("o4"), &[]), 4);
}

#[test]
fn log_level_does_not_change_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run("solve", &config("verify.toml"), &a, &[]), 0);
    let st = bin()
        .env("WAVEMAP_LOG", "debug")
        .args(["solve", "--config"])
        .arg(config("verify.toml"))
        .arg("--out")
        .arg(&b)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));
}
