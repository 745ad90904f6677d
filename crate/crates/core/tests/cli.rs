use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use planemorph::checkpoint::save_checkpoint;
use planemorph::field::{warp, Interp};
use planemorph::mvol::{read_field, read_volume, write_mvol};
use planemorph::network::{build_model, ModelConfig, Variant};
use planemorph::trainer::MetricsReport;
use planemorph::volume::Volume;

fn planemorph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_planemorph")).args(args).env_remove("PLANEMORPH_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = planemorph(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, n: usize, size: usize, max_disp: f64) {
    let (n, size, md) = (n.to_string(), size.to_string(), max_disp.to_string());
    ok(&["gen-data", "--out", s(dir), "--n", &n, "--size", &size, "--labels", "2", "--max-disp", &md, "--sigma", "3", "--seed", "4"]);
}

fn near_identity_checkpoint(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("ident.json");
    save_checkpoint(&build_model(&ModelConfig::with_variant(Variant::Em11, 2, 8)).unwrap(), &path).unwrap();
    path
}

#[test]
fn gen_data_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--out", s(&a), "--n", "4", "--size", "32", "--labels", "4", "--max-disp", "2", "--seed", "9"]);
    ok(&["gen-data", "--out", s(&b), "--n", "4", "--size", "32", "--labels", "4", "--max-disp", "2", "--seed", "9"]);
    let mut names: Vec<String> = vec!["manifest.json".into()];
    for i in 0..4 {
        for f in ["fixed", "moving", "seg_fixed", "seg_moving", "gt_field"] {
            names.push(format!("{f}_{i}.mvol"));
        }
        names.push(format!("landmarks_{i}.json"));
    }
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
    assert!(read_field(a.join("gt_field_0.mvol")).unwrap().max_abs() > 1.9);
}

#[test]
fn gen_data_zero_displacement() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), 1, 16, 0.0);
    let f = read_volume(tmp.path().join("fixed_0.mvol")).unwrap();
    let m = read_volume(tmp.path().join("moving_0.mvol")).unwrap();
    assert!(f.data().iter().zip(m.data()).all(|(a, b)| (a - b).abs() <= 1e-6));
    assert_eq!(fs::read(tmp.path().join("seg_fixed_0.mvol")).unwrap(), fs::read(tmp.path().join("seg_moving_0.mvol")).unwrap());
}

#[test]
fn gen_data_unwritable_output() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("file");
    fs::write(&file, b"x").unwrap();
    let out = planemorph(&["gen-data", "--out", s(&file.join("sub")), "--n", "1", "--size", "8", "--labels", "1", "--max-disp", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_writes_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 4, 16, 2.0);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": {"variant": "EM-11", "stride": 2, "embed_dim": 16}, "train": {"epochs": 5, "lr": 1e-3}}"#).unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("epoch,"));
    for f in ["resolved-config.json", "final.json", "final.bin", "best.json", "best.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let resolved = fs::read_to_string(run.join("resolved-config.json")).unwrap();
    assert!(resolved.contains("\"n_heads\": 4"), "{resolved}");
}

#[test]
fn train_multires_echoes_strides() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2, 16, 2.0);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": {"embed_dim": 8, "multires": [2, 4]}, "train": {"epochs": 1}}"#).unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("resolved-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["multires"], serde_json::json!([2, 4]));
}

#[test]
fn config_errors_exit_2_with_key_path() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 1, 8, 1.0);
    for (text, key) in [
        (r#"{"model": {"variant": "EM-99"}}"#, "model.variant"),
        (r#"{"loss": {"ncc_windw": 5}}"#, "loss.ncc_windw"),
        (r#"{"train": {"lr": "fast"}}"#, "train.lr"),
    ] {
        let cfg = tmp.path().join("cfg.json");
        fs::write(&cfg, text).unwrap();
        let out = planemorph(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("run"))]);
        assert_eq!(out.status.code(), Some(2), "{text}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(key), "{text}");
    }
    assert_eq!(planemorph(&["train", "--config"]).status.code(), Some(2));
    assert_eq!(planemorph(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2, 8, 1.0);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": {"embed_dim": 8}, "train": {"epochs": 3, "lr": 1e39, "scheduler": "none"}}"#).unwrap();
    let out = planemorph(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_identity_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 3, 16, 0.0);
    let ckpt = near_identity_checkpoint(tmp.path());
    let report = tmp.path().join("report.json");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    let r: MetricsReport = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_value(&r).unwrap(), serde_json::from_str::<serde_json::Value>(&text).unwrap());
    let dice = r.dice.unwrap();
    assert!((dice.mean - 1.0).abs() < 1e-3, "{}", dice.mean);
    let per_pair: Vec<f64> = r.pairs.iter().map(|p| p.dice.unwrap()).collect();
    assert!((dice.mean - per_pair.iter().sum::<f64>() / per_pair.len() as f64).abs() <= 1e-9);
    assert_eq!(r.pairs.len(), 3);
    assert!(r.params > 0 && r.pairs.iter().all(|p| p.runtime_s >= 0.0));
    assert_eq!(r.neg_fraction.mean, 0.0);
}

#[test]
fn register_outputs_and_reapplication() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 1, 16, 2.0);
    let ckpt = near_identity_checkpoint(tmp.path());
    let fixed = data.join("fixed_0.mvol");
    let (w, phi) = (tmp.path().join("w.mvol"), tmp.path().join("phi.mvol"));
    ok(&["register", "--checkpoint", s(&ckpt), "--fixed", s(&fixed), "--moving", s(&fixed), "--out", s(&w), "--field", s(&phi)]);
    let (m, wv) = (read_volume(&fixed).unwrap(), read_volume(&w).unwrap());
    assert!(m.data().iter().zip(wv.data()).all(|(a, b)| (a - b).abs() <= 1e-3));

    let moving = data.join("moving_0.mvol");
    ok(&["register", "--checkpoint", s(&ckpt), "--fixed", s(&fixed), "--moving", s(&moving), "--out", s(&w), "--field", s(&phi)]);
    let again = warp(&read_volume(&moving).unwrap(), &read_field(&phi).unwrap(), Interp::Trilinear).unwrap();
    let wv = read_volume(&w).unwrap();
    assert!(again.data().iter().zip(wv.data()).all(|(a, b)| (a - b).abs() <= 1e-6));
    assert!(fs::read(&phi).unwrap().windows(14).any(|x| x == b"\"components\":3"));

    let small = tmp.path().join("small.mvol");
    write_mvol(&small, Volume::zeros([8, 16, 16])).unwrap();
    let out = planemorph(&["register", "--checkpoint", s(&ckpt), "--fixed", s(&fixed), "--moving", s(&small), "--out", s(&w), "--field", s(&phi)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_attn_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cost.csv");
    ok(&["bench-attn", "--grid", "8,8,8", "--dim", "16", "--out", s(&out)]);
    let csv = fs::read_to_string(&out).unwrap();
    let col = |name: &str, strategy: &str| -> String {
        let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
        let i = header.iter().position(|h| *h == name).unwrap();
        let row = csv.lines().find(|l| l.starts_with(&format!("{strategy},"))).unwrap();
        row.split(',').nth(i).unwrap().to_string()
    };
    assert_eq!(col("score_elems", "full"), "262144");
    assert_eq!(col("score_elems", "xy"), "32768");
    let strategies: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(strategies, ["full", "xy", "yz", "zx"]);

    ok(&["bench-attn", "--grid", "1,1,1", "--dim", "8", "--out", s(&out)]);
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("1")), "{csv}");

    assert_eq!(planemorph(&["bench-attn", "--grid", "8,8", "--dim", "16", "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn threads_variable_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cost.csv");
    let args = ["bench-attn", "--grid", "2,2,2", "--dim", "4", "--out", s(&out)];
    let run = |v: &str| Command::new(env!("CARGO_BIN_EXE_planemorph")).args(args).env("PLANEMORPH_THREADS", v).output().unwrap().status;
    assert!(run("1").success());
    assert!(run("4").success());
    assert_eq!(run("zero").code(), Some(2));
}

#[test]
fn count_params_prints_total() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": {"variant": "EM-11", "stride": 2, "embed_dim": 16}}"#).unwrap();
    let out = ok(&["count-params", "--config", s(&cfg)]);
    let n: usize = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert_eq!(n, build_model(&ModelConfig::with_variant(Variant::Em11, 2, 16)).unwrap().count_params());
}
