use std::path::Path;
use std::process::{Command, Output};

fn spinbath(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinbath")).args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const CONFIG: &str = r#"
schema_version = 1

[system]
central_isotope = "13C"
central_position_nm = [0.0, 0.0, 0.0]
field_mT = 50.0

[bath]
source = "file"
file = "bath.xyz"

[sequence]
protocol = "hahn"
t_max_ms = 20.0
points = 21

[engine]
method = "gcce"
order = 2

[output]
directory = "run"
"#;

#[test]
fn generate_couple_simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a.xyz", "b.xyz"] {
        let o = spinbath(&["generate-bath", "--extent", "1.5", "1.5", "1.5", "--seed", "4", "--out", name], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(d.join("a.xyz")).unwrap(), std::fs::read(d.join("b.xyz")).unwrap());

    let o = spinbath(&["couplings", "--bath", "a.xyz", "--point-dipole", "--out", "bath.xyz"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();

    let mut traces = Vec::new();
    for out in ["one.csv", "two.csv"] {
        let o = spinbath(&["simulate", "--config", "run.toml", "--out", out, "--output-dir", out.trim_end_matches(".csv")], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        traces.push(spinbath::io::read_trace(&d.join(out)).unwrap());
    }
    assert_eq!(traces[0].values, traces[1].values);
    assert!((traces[0].values[0].norm() - 1.0).abs() < 1e-12);

    let o = spinbath(&["fit", "one.csv"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn invalid_input_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), CONFIG.replace("order = 2", "order = 0")).unwrap();
    std::fs::write(d.join("bath.xyz"), "13C 0.3 0.2 0.5\n").unwrap();
    assert_eq!(code(&spinbath(&["simulate", "--config", "bad.toml"], d)), 2);
    assert_eq!(code(&spinbath(&["simulate", "--config", "missing.toml"], d)), 2);
    assert_eq!(code(&spinbath(&["generate-bath", "--abundance", "1.5", "--out", "x.xyz"], d)), 2);
    assert_eq!(code(&spinbath(&["no-such-command"], d)), 2);
}

#[test]
fn two_spin_oracle_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = spinbath(&["oracle", "two-spin", "--points", "5"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines[0], "t_ms,re_L,im_L,abs_L");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0.0,1.0,0.0"));
}
