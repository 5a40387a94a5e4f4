use std::path::Path;
use std::process::{Command, Output};

use lice::data::{Dataset, DatasetSchema, MadWeights};
use lice::formulation::CeConstraints;
use lice::nn::Mlp;
use lice::oracle::{brute_force_ce, random_spn, DiscreteGrid, DEFAULT_GRID_CAP};
use lice::spn::{Domain, Spn, SpnNode};
use serde_json::Value as Json;

const COLUMNS: &str = "variant,valid_rate,actionable_rate,nll_mean,nll_sd,dist_mean,dist_sd,sparsity_mean,sparsity_sd,approx_err_mean,median_time_s";

fn lice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lice"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn toy(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/toy")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_args<'a>(nn: &'a str, spn: &'a str, data: &'a str) -> Vec<String> {
    vec![
        "--schema".into(),
        toy("schema.json"),
        "--data".into(),
        toy(data),
        "--nn".into(),
        toy(nn),
        "--spn".into(),
        toy(spn),
    ]
}

fn run(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    lice(&refs)
}

fn explain_toy(variant: &str, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["explain".to_string()];
    args.extend(toy_args("nn.json", "spn.json", "data.csv"));
    args.extend(["--factual-row", "0", "--variant", variant, "--out", out].map(String::from));
    args.extend(extra.iter().map(|s| s.to_string()));
    run(args)
}

#[test]
fn synth_then_learn_with_auto_slice() {
    let dir = tempfile::tempdir().unwrap();
    let o = lice(&["synth", "--rows", "1000", "--seed", "3", "--out-dir", &p(dir.path(), "")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = lice(&[
        "learn-spn",
        "--data",
        &p(dir.path(), "data.csv"),
        "--schema",
        &p(dir.path(), "schema.json"),
        "--out",
        &p(dir.path(), "spn.json"),
        "--min-slice",
        "auto",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("min-slice: 50"), "{out}");
    assert!(out.contains("validation: ok"));
    let spn = Spn::load(dir.path().join("spn.json")).unwrap();
    assert!(spn.validate().is_empty());
    let schema = DatasetSchema::from_json_file(dir.path().join("schema.json")).unwrap();
    assert_eq!(spn.num_features(), schema.len() + 1);
    let mlp = Mlp::load(dir.path().join("nn.json")).unwrap();
    mlp.check_fingerprint(&schema.fingerprint()).unwrap();
}

#[test]
fn synth_is_seeded() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = lice(&["synth", "--rows", "50", "--seed", "9", "--out-dir", &p(d.path(), "")]);
        assert!(o.status.success());
    }
    for f in ["schema.json", "nn.json", "data.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn empty_dataset_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "spn.json");
    let o = lice(&["learn-spn", "--data", &toy("empty.csv"), "--schema", &toy("schema.json"), "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty dataset"));
    assert!(!Path::new(&out).exists());
}

#[test]
fn explain_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "e.json");
    let o = explain_toy("lice-opt", &out, &["--pool", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got = std::fs::read(&out).unwrap();
    let want = std::fs::read(toy("golden_explain_lice_opt.json")).unwrap();
    assert!(got == want, "output differs from the golden file");
    // nothing but the output is left behind
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

/// The golden optimum agrees with exhaustive search over the toy grid.
#[test]
fn golden_is_oracle_optimal() {
    let golden: Json = serde_json::from_slice(&std::fs::read(toy("golden_explain_lice_opt.json")).unwrap()).unwrap();
    let schema = DatasetSchema::from_json_file(toy("schema.json")).unwrap();
    let data = Dataset::read_csv(toy("data.csv"), &schema).unwrap();
    let rows = data.normalize(&schema, false).unwrap();
    let mlp = Mlp::load(toy("nn.json")).unwrap();
    let spn = Spn::load(toy("spn.json")).unwrap();
    let weights = MadWeights::fit(&schema, &rows).unwrap();
    let grid = DiscreteGrid::for_schema(&schema, 16, DEFAULT_GRID_CAP).unwrap();
    let cons = CeConstraints {
        alpha: 0.1,
        ..Default::default()
    };
    let best = brute_force_ce(&schema, &rows[0], &grid, &mlp, Some(&spn), &weights, &cons)
        .unwrap()
        .unwrap();
    let pool = golden["pool"].as_array().unwrap();
    let first = pool[0]["objective"].as_f64().unwrap();
    assert!((first - best.objective).abs() < 1e-6, "{first} vs {}", best.objective);
    for e in pool {
        assert!(e["valid"].as_bool().unwrap() && e["actionable"].as_bool().unwrap());
        assert!(e["objective"].as_f64().unwrap() >= best.objective - 1e-6);
    }
    let sel = golden["selected"].as_u64().unwrap() as usize;
    let best_nll = pool.iter().map(|e| e["nll_exact"].as_f64().unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(pool[sel]["nll_exact"].as_f64().unwrap(), best_nll);
}

#[test]
fn explain_is_deterministic_and_timing_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, t) = (p(dir.path(), "a.json"), p(dir.path(), "b.json"), p(dir.path(), "t.json"));
    assert!(explain_toy("lice-med", &a, &["--seed", "4"]).status.success());
    assert!(explain_toy("lice-med", &b, &["--seed", "4"]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(explain_toy("mio", &t, &["--timing"]).status.success());
    let doc: Json = serde_json::from_slice(&std::fs::read(&t).unwrap()).unwrap();
    assert!(doc["wall_time_s"].as_f64().is_some());
    let doc: Json = serde_json::from_slice(&std::fs::read(&a).unwrap()).unwrap();
    assert!(doc.get("wall_time_s").is_none());
    let delta = doc["delta_spn"].as_f64().unwrap();
    for e in doc["pool"].as_array().unwrap() {
        assert!(e["o_root_mio"].as_f64().unwrap() >= delta - 1e-6);
    }
}

#[test]
fn impossible_threshold_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "e.json");
    let mut args = vec!["explain".to_string()];
    args.extend(toy_args("nn.json", "spn_all_rejected.json", "data_all_rejected.csv"));
    args.extend(["--factual-row", "0", "--variant", "lice-med", "--out", &out].map(String::from));
    let o = run(args);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let doc: Json = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(doc["status"], "infeasible");
    assert!(doc["pool"].as_array().unwrap().is_empty());
}

#[test]
fn fingerprint_mismatch_exits_2_before_solving() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "e.json");
    let mut args = vec!["explain".to_string()];
    args.extend(toy_args("nn_bad_fingerprint.json", "spn.json", "data.csv"));
    args.extend(["--factual-row", "0", "--variant", "mio", "--out", &out].map(String::from));
    let o = run(args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fingerprint"));
    assert!(!Path::new(&out).exists());
}

#[test]
fn bad_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "e.json");
    let o = explain_toy("lice-fast", &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown variant"));
    let mut args = vec!["explain".to_string()];
    args.extend(toy_args("nn.json", "spn.json", "data.csv"));
    args.extend(["--factual-row", "5000", "--out", &out].map(String::from));
    assert_eq!(run(args).status.code(), Some(2));
}

fn benchmark(dir: &Path, prefix: &str, n: &str, variants: &str) -> Output {
    let mut args = vec!["benchmark".to_string()];
    args.extend(toy_args("nn.json", "spn.json", "data.csv"));
    args.extend(
        [
            "--n",
            n,
            "--variants",
            variants,
            "--pool",
            "3",
            "--seed",
            "1",
            "--report",
            &p(dir, prefix),
        ]
        .map(String::from),
    );
    run(args)
}

#[test]
fn benchmark_report_columns_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let o = benchmark(dir.path(), "a", "6", "mio,lice-opt,lice-q");
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), COLUMNS);
    assert_eq!(lines.count(), 3);
    let json: Json = serde_json::from_slice(&std::fs::read(dir.path().join("a.json")).unwrap()).unwrap();
    let cols: Vec<&str> = json["columns"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    assert_eq!(cols.join(","), COLUMNS);
    for row in json["rows"].as_array().unwrap() {
        let keys: Vec<&String> = row.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 11);
        assert!(row["median_time_s"].is_null());
        let rate = row["valid_rate"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }
    // the threshold variant may leave a factual without counterfactual; the plain one may not
    assert_eq!(json["rows"][0]["valid_rate"].as_f64().unwrap(), 1.0);
    assert!(benchmark(dir.path(), "b", "6", "mio,lice-opt,lice-q").status.success());
    for ext in ["csv", "json"] {
        assert_eq!(
            std::fs::read(dir.path().join(format!("a.{ext}"))).unwrap(),
            std::fs::read(dir.path().join(format!("b.{ext}"))).unwrap()
        );
    }
}

#[test]
fn benchmark_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let o = benchmark(dir.path(), "empty", "0", "mio");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("empty.csv")).unwrap();
    assert_eq!(csv.trim_end(), COLUMNS);
    let o = benchmark(dir.path(), "bad", "3", "mio,nope");
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("bad.csv").exists());
}

fn write_grid_fixture(dir: &Path, spn: &Spn) -> (String, String) {
    let schema = r#"{"features": [
        {"name": "a", "kind": {"type": "continuous", "lb": 0.0, "ub": 1.0}},
        {"name": "b", "kind": {"type": "continuous", "lb": 0.0, "ub": 1.0}}],
        "target": {"name": "y", "kind": "binary"}}"#;
    std::fs::write(dir.join("schema.json"), schema).unwrap();
    spn.save(dir.join("spn.json")).unwrap();
    (p(dir, "schema.json"), p(dir, "spn.json"))
}

fn grid(dir: &Path, schema: &str, spn: &str, features: &str, r: usize) -> (Output, Vec<Vec<f64>>) {
    let out = p(dir, "grid.csv");
    let o = lice(&[
        "marginal-grid",
        "--spn",
        spn,
        "--schema",
        schema,
        "--features",
        features,
        "--resolution",
        &r.to_string(),
        "--out",
        &out,
    ]);
    let cells = std::fs::read_to_string(&out)
        .map(|t| {
            t.lines()
                .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
                .collect()
        })
        .unwrap_or_default();
    (o, cells)
}

#[test]
fn marginal_grid_of_uniforms_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let uniform = |feature| SpnNode::Histogram {
        feature,
        breakpoints: vec![0.0, 1.0],
        log_densities: vec![0.0],
    };
    let spn = Spn::new(
        2,
        vec![SpnNode::Product { children: vec![1, 2] }, uniform(0), uniform(1)],
        0,
    )
    .unwrap();
    let (schema, spn) = write_grid_fixture(dir.path(), &spn);
    for r in [1, 7] {
        let (o, cells) = grid(dir.path(), &schema, &spn, "a,b", r);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(cells.len(), r);
        assert!(cells.iter().all(|row| row.len() == r && row.iter().all(|v| *v == 0.0)));
    }
    let (o, _) = grid(dir.path(), &schema, &spn, "a,zzz", 3);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown feature"));
}

/// Riemann sum of the density over the unit square.
#[test]
fn marginal_grid_integrates_to_one() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let spn = random_spn(&[Domain::Real, Domain::Real], 25, seed).unwrap();
        let (schema, path) = write_grid_fixture(dir.path(), &spn);
        let r = 200;
        let (o, cells) = grid(dir.path(), &schema, &path, "a,b", r);
        assert!(o.status.success());
        let mass: f64 = cells.iter().flatten().map(|v| v.exp()).sum::<f64>() / (r * r) as f64;
        assert!((mass - 1.0).abs() < 0.05, "seed {seed}: {mass}");
    }
}

#[test]
fn inspect_prints_summaries() {
    let o = lice(&["inspect", "--schema", &toy("schema.json"), "--nn", &toy("nn.json"), "--spn", &toy("spn.json")]);
    assert!(o.status.success());
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("fingerprint matches"));
    assert!(out.contains("density network"));
    assert_eq!(lice(&["inspect"]).status.code(), Some(2));
}
