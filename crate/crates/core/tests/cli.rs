use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tcp_ssm::tensor_io::{read_tensor, write_tensor, Rng, Tensor};

fn tcpssm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcpssm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_params(out: &Path, extra: &[&str]) {
    let mut args = vec!["gen-params", "--out", path(out)];
    args.extend_from_slice(extra);
    let o = tcpssm(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let n = shape.iter().product();
    let data = Rng::new(seed).normals(n);
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn identity_init_scan_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    let input = dir.path().join("x.tcpt");
    let out = dir.path().join("o.tcpt");
    gen_params(&params, &["--channels", "8", "--groups", "2", "--seed", "3"]);
    let x = random_tensor(vec![2, 50, 8], 1);
    write_tensor(&input, &x).unwrap();
    for routes in ["fwd", "fwd,bwd"] {
        let o = tcpssm(&["scan", "--params", path(&params), "--input", path(&input), "--out", path(&out), "--routes", routes]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let y = read_tensor(&out).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }
}

#[test]
fn first_order_impulse_is_geometric() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    let out = dir.path().join("imp");
    gen_params(&params, &["--channels", "2", "--real-poles", "1", "--complex-pairs", "0", "--r-f", "1"]);
    let o = tcpssm(&["impulse", "--params", path(&params), "--len", "64", "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("impulse.json")).unwrap()).unwrap();
    let a = -report["q"][0].as_f64().unwrap();
    let csv = fs::read_to_string(out.join("impulse.csv")).unwrap();
    let h: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(h.len(), 64);
    for (k, v) in h.iter().enumerate() {
        let want = a.powi(k as i32);
        assert!((v - want).abs() <= 1e-12 * want.abs().max(1e-300), "h[{k}] = {v}, want {want}");
    }
    assert!((report["rho_max"].as_f64().unwrap() - a.abs()).abs() < 1e-12);
}

#[test]
fn zero_margin_params_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    gen_params(&params, &["--channels", "2"]);
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&params).unwrap()).unwrap();
    v["config"]["epsilon"] = 0.0.into();
    v["pole"]["epsilon"] = 0.0.into();
    v["pole"]["rho_hat_c"][0][0] = 40.0.into();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, serde_json::to_string(&v).unwrap()).unwrap();
    let o = tcpssm(&["certify", "--params", path(&bad)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epsilon"));
}

#[test]
fn generated_params_certify() {
    let dir = tempfile::tempdir().unwrap();
    for init in ["identity", "random"] {
        let params = dir.path().join(format!("{init}.json"));
        let input = dir.path().join("x.tcpt");
        gen_params(
            &params,
            &["--channels", "12", "--groups", "4", "--real-poles", "2", "--complex-pairs", "2", "--init", init, "--layers", "2"],
        );
        write_tensor(&input, &random_tensor(vec![1, 40, 12], 5)).unwrap();
        for layer in ["0", "1"] {
            let o = tcpssm(&["certify", "--params", path(&params), "--layer", layer, "--input", path(&input)]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        }
    }
}

#[test]
fn sabotaged_margin_fails_verification() {
    let o = tcpssm(&["verify", "--mutate-epsilon", "0"]);
    assert_eq!(code(&o), 5);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("[FAIL]") && l.contains("stability_fuzz")));
}

#[test]
fn memmap_writes_grid_sized_images() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    let input = dir.path().join("fm.tcpt");
    let out = dir.path().join("maps");
    gen_params(&params, &["--channels", "6", "--groups", "3", "--init", "random", "--seed", "9"]);
    write_tensor(&input, &random_tensor(vec![5, 7, 6], 2)).unwrap();
    for (group, tag) in [("all", "layer0_all"), ("1", "layer0_g1")] {
        let o = tcpssm(&["memmap", "--params", path(&params), "--input", path(&input), "--group", group, "--out", path(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        for field in ["tau", "osc", "rho_max"] {
            let img = fs::read(out.join(format!("{tag}_{field}.pgm"))).unwrap();
            let header = b"P5\n7 5\n255\n";
            assert!(img.starts_with(header));
            assert_eq!(img.len(), header.len() + 35);
        }
        let csv = fs::read_to_string(out.join(format!("{tag}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 36);
        let report: Value = serde_json::from_str(&fs::read_to_string(out.join(format!("{tag}.json"))).unwrap()).unwrap();
        assert_eq!(report["height"], 5);
        assert_eq!(report["width"], 7);
    }
}

#[test]
fn verify_in_single_precision() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let o = tcpssm(&["verify", "--precision", "f32", "--out", path(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let oracle = v["checks"].as_array().unwrap().iter().find(|c| c["name"] == "oracle_equivalence").unwrap();
    assert_eq!(oracle["tolerance"].as_f64().unwrap(), 1e-4);
    assert_eq!(v["all_passed"], true);
}

#[test]
fn flops_per_token_costs() {
    let o = tcpssm(&["flops", "--r", "6", "--r-f", "4", "--channels", "192", "--len", "196"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("operator 24 (2r + 3r_f), baseline 112 (7N"), "{stdout}");
}

#[test]
fn missing_input_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    gen_params(&params, &["--channels", "2"]);
    let o = tcpssm(&["scan", "--params", path(&params), "--input", "/nonexistent.tcpt", "--out", path(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
}
