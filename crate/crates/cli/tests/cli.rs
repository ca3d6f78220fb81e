use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn laser() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_laser"));
    cmd.env_remove("LASER_OUT_DIR");
    cmd
}

fn run(args: &[&str]) -> Output {
    laser().args(args).output().expect("spawn laser")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synthetic(
    layers: usize,
    experts: usize,
    tokens: usize,
    batches: usize,
    generator: &str,
) -> String {
    format!(
        "[workload.synthetic]\nnum_layers = {layers}\nnum_experts = {experts}\ntokens_per_batch = {tokens}\nnum_batches = {batches}\nseed = 3\nbands = [{{ layers = [0, {}], generator = {generator} }}]\n",
        layers - 1
    )
}

const FLAT: &str = r#"{ kind = "dirichlet", alpha = 1.0 }"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_with_mixtral_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.toml",
        &format!(
            "preset = \"mixtral-gsm8k\"\nbaselines = true\n{}[laser]\nc = 4\n",
            synthetic(6, 8, 32, 3, FLAT)
        ),
    );
    let out_dir = dir.path().join("out");
    let out = run(&["run", "--config", s(&cfg), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.contains("laser") && text.contains("vanilla") && text.contains("p95"),
        "{text}"
    );

    let effective = fs::read_to_string(out_dir.join("effective_config.toml")).unwrap();
    for needle in [
        "eps_high = 0.72",
        "eps_high = 0.75",
        "eps_high = 0.8",
        "t_fix = 0.6",
        "k = 2",
    ] {
        assert!(
            effective.contains(needle),
            "{needle} missing from\n{effective}"
        );
    }
    for f in [
        "decisions.csv",
        "counts_0.csv",
        "counts_2.csv",
        "imbalance.csv",
        "heatmap.csv",
        "layerstats.csv",
    ] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let decisions = fs::read_to_string(out_dir.join("decisions.csv")).unwrap();
    assert!(decisions.starts_with("batch,layer,token,path,m,c_star,selected\n"));
    assert_eq!(decisions.lines().count(), 1 + 6 * 32 * 3);
}

#[test]
fn deepseek_gsm8k_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.toml",
        &format!(
            "preset = \"deepseek-gsm8k\"\ndecisions = false\n{}[laser]\nc = 8\n",
            synthetic(6, 64, 16, 1, FLAT)
        ),
    );
    let out_dir = dir.path().join("out");
    let out = run(&["run", "--config", s(&cfg), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let effective = fs::read_to_string(out_dir.join("effective_config.toml")).unwrap();
    for needle in [
        "t_fix = 0.25",
        "t_fix = 0.45",
        "t_fix = 0.55",
        "eps_high = 0.3",
        "k = 6",
    ] {
        assert!(
            effective.contains(needle),
            "{needle} missing from\n{effective}"
        );
    }
    assert!(!out_dir.join("decisions.csv").exists());
}

#[test]
fn uncovered_bands_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.toml",
        &format!(
            "k = 2\n{}[laser]\nc = 4\nbands = [{{ layers = [0, 1], eps_high = 0.7, t_fix = 0.6 }}, {{ layers = [4, 5], eps_high = 0.7, t_fix = 0.6 }}]\n",
            synthetic(6, 8, 8, 1, FLAT)
        ),
    );
    let out = run(&[
        "run",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("uncovered layers [2..3]"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn schema_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.toml",
        &format!(
            "k = 2\npolicy = \"vanilla\"\nflavour = 1\n{}",
            synthetic(2, 4, 4, 1, FLAT)
        ),
    );
    let out = run(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("flavour") && err.contains("line 3"), "{err}");

    let out = run(&["run", "--config", s(&cfg), "--bogus-flag"]);
    assert_eq!(code(&out), 2);

    let bad_weights = write(
        dir.path(),
        "w.toml",
        &format!(
            "k = 2\npolicy = \"vanilla\"\n{}",
            synthetic(2, 4, 4, 1, FLAT)
        ),
    );
    let out = run(&["run", "--config", s(&bad_weights), "--weights", "cubic"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn malformed_trace_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("bad.bin");
    fs::write(&trace, b"MOEGATETRACE\0v01 not really a trace").unwrap();
    let cfg = write(
        dir.path(),
        "exp.toml",
        &format!(
            "k = 1\npolicy = \"vanilla\"\n[workload]\ntrace = \"{}\"\n",
            s(&trace)
        ),
    );
    let out = run(&[
        "run",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("offset"), "{}", stderr(&out));

    let out = run(&["analyze", s(&trace), "--k", "2"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_config_file_is_a_runtime_error() {
    let out = run(&["run", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(code(&out), 1);
}

fn sweep_config(dir: &Path) -> PathBuf {
    write(
        dir,
        "sweep.toml",
        &format!(
            "k = 2\n{}[laser]\nc = 2\nbands = [{{ layers = [0, 3], eps_high = 1.0, t_fix = 0.000001 }}]\n",
            synthetic(4, 8, 256, 20, FLAT)
        ),
    )
}

#[test]
fn sweep_at_k_matches_vanilla() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = run(&[
        "sweep",
        "--config",
        s(&cfg),
        "--c-list",
        "2",
        "--out-dir",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let sum = summary(&out_dir);
    let vanilla = sum["policies"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["policy"] == "vanilla")
        .unwrap();
    assert_eq!(sum["sweep"][0]["c"], 2);
    assert_eq!(sum["sweep"][0]["i_agg"], vanilla["i_agg"]);
}

#[test]
fn sweep_is_monotone_and_deduplicates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = run(&[
        "sweep",
        "--config",
        s(&cfg),
        "--c-list",
        "2,3,3,4",
        "--out-dir",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("duplicate c = 3"), "{}", stderr(&out));
    let sum = summary(&out_dir);
    let sweep = sum["sweep"].as_array().unwrap();
    let cs: Vec<u64> = sweep.iter().map(|p| p["c"].as_u64().unwrap()).collect();
    assert_eq!(cs, [2, 3, 4]);
    let p50: Vec<f64> = sweep
        .iter()
        .map(|p| p["i_agg"]["p50"].as_f64().unwrap())
        .collect();
    assert!(p50.windows(2).all(|w| w[1] <= w[0]), "{p50:?}");
    for c in [2, 3, 4] {
        assert!(out_dir.join(format!("heatmap_c{c}.csv")).exists());
    }
}

#[test]
fn sweep_rejects_out_of_range_c() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path());
    let out = run(&[
        "sweep",
        "--config",
        s(&cfg),
        "--c-list",
        "2,9",
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 2);
    let out = run(&[
        "sweep",
        "--config",
        s(&cfg),
        "--c-list",
        "1",
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 2);
    let out = run(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 2, "no c list given");
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec![
        "gen",
        "--out",
        s(&path),
        "--layers",
        "6",
        "--experts",
        "8",
        "--tokens",
        "200",
        "--batches",
        "2",
    ];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

fn layerstats(dir: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(dir.join("layerstats.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "layer,mean_Mk,entropy_p25,entropy_p50,entropy_p75,frac_single_head,frac_plateau,frac_smooth,tokens"
    );
    lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn analyze_uniform_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(
        dir.path(),
        "flat.bin",
        &["--profile", "flat", "--alpha", "10000"],
    );
    let out_dir = dir.path().join("stats");
    let out = run(&["analyze", s(&trace), "--k", "2", "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = layerstats(&out_dir);
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert!((r[1] - 0.25).abs() < 0.01, "mean_Mk {}", r[1]);
        assert_eq!(r[8], 400.0);
    }
}

#[test]
fn analyze_spiked_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(
        dir.path(),
        "spiked.ndjson",
        &["--profile", "spiked", "--p-head", "0.9"],
    );
    let out_dir = dir.path().join("stats");
    let out = run(&[
        "analyze",
        s(&trace),
        "--k",
        "2",
        "--out-dir",
        s(&out_dir),
        "--phase",
        "decode",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for r in layerstats(&out_dir) {
        assert!(r[5] > 0.99, "frac_single_head {}", r[5]);
    }
    // generated traces are tagged decode, so a prefill filter sees nothing
    let out = run(&[
        "analyze",
        s(&trace),
        "--k",
        "2",
        "--out-dir",
        s(&out_dir),
        "--phase",
        "prefill",
    ]);
    assert_eq!(code(&out), 0);
    assert!(layerstats(&out_dir).is_empty());
}

#[test]
fn suggest_straddles_two_regimes() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(
        dir.path(),
        "banded.bin",
        &["--profile", "banded", "--p-head", "0.8", "--alpha", "1"],
    );
    let out_dir = dir.path().join("stats");
    let out = run(&[
        "analyze",
        s(&trace),
        "--k",
        "2",
        "--out-dir",
        s(&out_dir),
        "--suggest",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = layerstats(&out_dir);
    let skewed = (rows[0][1] + rows[5][1]) / 2.0;
    let flat = (rows[2][1] + rows[3][1]) / 2.0;
    let eps: Vec<f64> = stdout(&out)
        .lines()
        .filter_map(|l| l.split("eps_high = ").nth(1))
        .map(|v| v.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(eps.len(), 3);
    assert!(eps[1] < eps[0] && eps[1] < eps[2], "{eps:?}");
    assert!((eps[1] - flat).abs() < 0.02, "{eps:?} vs flat {flat}");
    assert!(
        (eps[0] - skewed).abs() < 0.02 && (eps[2] - skewed).abs() < 0.02,
        "{eps:?} vs skewed {skewed}"
    );
}

#[test]
fn effective_config_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.toml",
        &format!(
            "preset = \"mixtral-arc-easy\"\nbaselines = true\n{}[laser]\nc = 3\ntrim = \"random\"\nseed = 5\n[perf]\ngamma = 0.01\nt_comm = 0.002\n",
            synthetic(6, 8, 64, 4, FLAT)
        ),
    );
    let first = dir.path().join("first");
    let out = run(&[
        "run",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&first),
        "--seed",
        "11",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let effective = first.join("effective_config.toml");
    let second = dir.path().join("second");
    let out = run(&["run", "--config", s(&effective), "--out-dir", s(&second)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [
        "decisions.csv",
        "summary.json",
        "imbalance.csv",
        "heatmap.csv",
        "layerstats.csv",
        "effective_config.toml",
    ] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
    let sum = summary(&first);
    assert!(
        sum["policies"][0]["perf"]["throughput_ratio_vs_base"]
            .as_f64()
            .unwrap()
            >= 1.0
    );
}

#[test]
fn trace_workload_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "t.bin", &["--seed", "9"]);
    fs::write(dir.path().join("flops.txt"), "1 2 3\n3, 2, 1\n").unwrap();
    fs::write(
        dir.path().join("place.csv"),
        "1,1,0,0,0,0,0,0\n0,0,1,1,0,0,0,0\n0,0,0,0,1,1,1,1\n",
    )
    .unwrap();
    let cfg = write(
        dir.path(),
        "exp.toml",
        "preset = \"mixtral-mmlu\"\npolicy = \"vanilla\"\n[workload]\ntrace = \"t.bin\"\n[laser]\nc = 4\n",
    );
    let out_dir = dir.path().join("out");
    let out = laser()
        .args([
            "run",
            "--config",
            s(&cfg),
            "--policy",
            "laser",
            "--weights",
            &format!("flops:{}", s(&dir.path().join("flops.txt"))),
            "--placement",
            s(&dir.path().join("place.csv")),
            "--load-reset",
            "cumulative",
        ])
        .env("LASER_OUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let sum = summary(&out_dir);
    assert_eq!(sum["policies"][0]["policy"], "laser");
    assert_eq!(sum["load_reset"], "cumulative");
    assert!(sum["policies"][0]["gpu_i_agg"]["mean"].as_f64().unwrap() >= 1.0);
    let imbalance = fs::read_to_string(out_dir.join("imbalance.csv")).unwrap();
    let first_row: Vec<&str> = imbalance.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first_row.len(), 6);
    assert!(first_row.iter().all(|v| !v.is_empty()), "{first_row:?}");
}

#[test]
fn gen_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.toml",
        &format!("k = 2\n{}", synthetic(3, 4, 5, 2, FLAT)),
    );
    let path = dir.path().join("t.jsonl");
    let out = run(&["gen", "--config", s(&cfg), "--out", s(&path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read_to_string(&path).unwrap().lines().count(),
        1 + 3 * 5 * 2
    );
}
