use std::path::{Path, PathBuf};
use std::process::Command;

use cdlab::sweep::{parse_axis, resolve_axis};
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn run(args: &[&str], out: &Path) -> (i32, Value) {
    let status = Command::new(env!("CARGO_BIN_EXE_cdlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("CDLAB_OUT_DIR")
        .output()
        .expect("spawn cdlab");
    let summary = std::fs::read_to_string(out.join("summary.json"))
        .map(|t| serde_json::from_str(&t).expect("summary is JSON"))
        .unwrap_or(Value::Null);
    (status.status.code().expect("exit code"), summary)
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .expect("csv")
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn check<'a>(summary: &'a Value, name: &str) -> &'a Value {
    summary["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == name)
        .unwrap_or_else(|| panic!("no check {name}"))
}

#[test]
fn binomial_tree_duality_passes_with_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (code, s) = run(&["tree-duality", "--tree", fixture("binomial_1.json").to_str().unwrap()], dir.path());
    assert_eq!(code, 0);
    assert_eq!(s["status"], "pass");
    assert_eq!(s["failures"].as_array().unwrap().len(), 0);
    let gap = check(&s, "conjugacy_gap");
    assert!(gap["value"].as_f64().unwrap() <= 1e-8);
    assert_eq!(gap["threshold"], 1e-8);
    for c in s["checks"].as_array().unwrap() {
        for key in ["name", "value", "threshold", "pass", "comparison"] {
            assert!(c.get(key).is_some(), "{c}");
        }
    }
    assert!((s["results"]["y_star"].as_f64().unwrap() - 2.0).abs() <= 1e-8);
    assert_eq!(s["results"]["u_source"], "direct");
    let nodes = read_csv(&dir.path().join("nodes.csv"));
    assert_eq!(nodes.len(), 4);
    assert_eq!(nodes[0][7], "consumption");
    assert_eq!(nodes[1][7], "0.5");
    assert!(dir.path().join("metadata.json").exists());
    assert!(!std::fs::read_to_string(dir.path().join("summary.json")).unwrap().contains("created"));
}

#[test]
fn coarse_bessel_fails_with_named_check() {
    let dir = tempfile::tempdir().unwrap();
    let (code, s) = run(&["bessel", "--config", fixture("bessel_coarse.toml").to_str().unwrap()], dir.path());
    assert_eq!(code, 1);
    assert_eq!(s["status"], "fail");
    let failures: Vec<&str> = s["failures"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert!(failures.contains(&"mhat_tolerance"), "{failures:?}");
    // the bound alpha x dt itself is loose and still holds
    assert_eq!(check(&s, "mhat_quadrature_bound")["pass"], true);
}

#[test]
fn io_and_parse_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, s) = run(&["tree-duality", "--tree", "does-not-exist.json"], dir.path());
    assert_eq!(code, 2);
    assert_eq!(s["status"], "error");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let (code, _) = run(&["tree-duality", "--tree", bad.to_str().unwrap()], &dir.path().join("b"));
    assert_eq!(code, 2);

    let (code, _) = run(&["conjugate", "--grid", "5:1:3"], &dir.path().join("c"));
    assert_eq!(code, 2);
    let (code, _) = run(&["conjugate", "--utility", "power"], &dir.path().join("d"));
    assert_eq!(code, 2);
}

#[test]
fn tolerance_overrides_are_validated_and_applied() {
    let dir = tempfile::tempdir().unwrap();
    let tree = fixture("trinomial_2.json");
    let tree = tree.to_str().unwrap();
    let (code, _) = run(&["tree-duality", "--tree", tree, "--tol", "no_such_check=1"], &dir.path().join("a"));
    assert_eq!(code, 2);
    let (code, _) = run(&["tree-duality", "--tree", tree, "--tol", "conjugacy_gap=-1"], &dir.path().join("b"));
    assert_eq!(code, 2);
    let config = fixture("bessel_log.toml");
    let (code, s) = run(
        &["bessel", "--config", config.to_str().unwrap(), "--tol", "mhat_tolerance=1e-12"],
        &dir.path().join("c"),
    );
    assert_eq!(code, 1);
    assert_eq!(check(&s, "mhat_tolerance")["threshold"], 1e-12);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture("bessel_power.toml");
    let config = config.to_str().unwrap();
    let (_, a) = run(&["bessel", "--config", config, "--seed", "1"], &dir.path().join("a"));
    run(&["bessel", "--config", config, "--seed", "2"], &dir.path().join("b"));
    assert_eq!(a["seed"], 1);
    assert_eq!(a["inputs"]["sde"]["seed"], 1);
    assert_ne!(
        std::fs::read(dir.path().join("a/dual_scan.csv")).unwrap(),
        std::fs::read(dir.path().join("b/dual_scan.csv")).unwrap()
    );
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_cdlab"))
        .args(["conjugate", "--utility", "log", "--grid", "0.1:10:5"])
        .env("CDLAB_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    assert!(dir.path().join("conjugate.csv").exists());
}

#[test]
fn conjugate_table_matches_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(&["conjugate", "--utility", "log", "--grid", "0.01:100:21"], &dir.path().join("log"));
    assert_eq!(code, 0);
    let rows = read_csv(&dir.path().join("log/conjugate.csv"));
    assert_eq!(rows[0], ["y", "v", "v_prime", "inverse_marginal", "fenchel_gap_at_inverse"]);
    assert_eq!(rows.len(), 22);
    for r in &rows[1..] {
        let f: Vec<f64> = r.iter().map(|v| v.parse().unwrap()).collect();
        let y = f[0];
        assert!((f[1] - (-y.ln() - 1.0)).abs() <= 1e-12);
        assert!((f[2] + 1.0 / y).abs() <= 1e-12 * (1.0 / y));
        assert!((f[3] - 1.0 / y).abs() <= 1e-12 * (1.0 / y));
    }

    // p = 1/2: V(y) = 1/y, I(y) = y^-2
    let (code, _) = run(
        &["conjugate", "--utility", "power", "--p", "0.5", "--grid", "0.01:100:21"],
        &dir.path().join("pow"),
    );
    assert_eq!(code, 0);
    for r in &read_csv(&dir.path().join("pow/conjugate.csv"))[1..] {
        let f: Vec<f64> = r.iter().map(|v| v.parse().unwrap()).collect();
        let y = f[0];
        assert!((f[1] - 1.0 / y).abs() <= 1e-12 * (1.0 / y));
        assert!((f[3] - y.powi(-2)).abs() <= 1e-12 * y.powi(-2));
    }
}

#[test]
fn superhedge_put_and_consumption_plans() {
    let dir = tempfile::tempdir().unwrap();
    let tree = fixture("binomial_1.json");
    let tree = tree.to_str().unwrap();
    // replicating a put struck at 1 on the 2 / 0.5 binomial costs 1/3
    let (code, s) = run(&["superhedge", "--tree", tree, "--claim", "put:1"], &dir.path().join("put"));
    assert_eq!(code, 0);
    assert!((s["results"]["w0"].as_f64().unwrap() - 1.0 / 3.0).abs() <= 1e-14);

    let plan = fixture("plan_binomial_1.json");
    let spec = format!("consumption:{}", plan.display());
    let (code, s) = run(&["superhedge", "--tree", tree, "--claim", &spec], &dir.path().join("plan"));
    assert_eq!(code, 0);
    assert_eq!(s["results"]["admissible"], true);

    let scaled = dir.path().join("scaled.json");
    std::fs::write(&scaled, "[0.75, 1.125, 0.5625]").unwrap();
    let spec = format!("consumption:{}", scaled.display());
    let (code, s) = run(&["superhedge", "--tree", tree, "--claim", &spec], &dir.path().join("big"));
    assert_eq!(code, 1);
    assert_eq!(s["results"]["admissible"], false);
    assert_eq!(s["failures"][0], "capital_excess");
    let (code, _) = run(
        &["superhedge", "--tree", tree, "--claim", &spec, "--capital", "1.5"],
        &dir.path().join("big_capital"),
    );
    assert_eq!(code, 0);
}

#[test]
fn bessel_alpha_sweep_has_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let base = fixture("sweep_bessel_alpha.toml");
    let (code, s) = run(
        &["sweep", "--base", base.to_str().unwrap(), "--axis", "alpha=0.05,0.1,0.2"],
        dir.path(),
    );
    assert_eq!(code, 0, "{s}");
    let rows = read_csv(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 4);
    let col = |name: &str| rows[0].iter().position(|h| h == name).unwrap();
    for (row, alpha) in rows[1..].iter().zip([0.05f64, 0.1, 0.2]) {
        assert_eq!(row[col("axis_value")].parse::<f64>().unwrap(), alpha);
        assert_eq!(row[col("alpha")].parse::<f64>().unwrap(), alpha);
        let t: f64 = row[col("potential_t")].parse().unwrap();
        let target: f64 = row[col("potential_target")].parse().unwrap();
        assert!((target - (-alpha * t).exp()).abs() <= 1e-15);
    }
    assert!(dir.path().join("cell_002/summary.json").exists());
}

#[test]
fn tree_x_sweep_is_increasing_and_records_failures() {
    let dir = tempfile::tempdir().unwrap();
    let base = fixture("sweep_tree_x.toml");
    let base = base.to_str().unwrap();
    let (code, s) = run(&["sweep", "--base", base, "--axis", "x=0.25,0.5,1,2,4"], &dir.path().join("x"));
    assert_eq!(code, 0);
    assert_eq!(check(&s, "u_increasing_in_x")["pass"], true);
    let rows = read_csv(&dir.path().join("x/sweep.csv"));
    let u = rows[0].iter().position(|h| h == "u_of_x").unwrap();
    let values: Vec<f64> = rows[1..].iter().map(|r| r[u].parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] > w[0]));

    let (code, s) = run(
        &["sweep", "--base", base, "--axis", "tree=trinomial_2.json,missing.json,binomial_1.json"],
        &dir.path().join("t"),
    );
    assert_eq!(code, 1);
    assert_eq!(s["failures"].as_array().unwrap().len(), 1);
    let rows = read_csv(&dir.path().join("t/sweep.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[2][1], "error");
    assert_eq!(rows[3][1], "pass");
}

#[test]
fn empty_axis_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let base = fixture("sweep_tree_x.toml");
    let (code, s) = run(&["sweep", "--base", base.to_str().unwrap(), "--axis", "x="], dir.path());
    assert_eq!(code, 2);
    assert_eq!(s["status"], "error");
    assert!(parse_axis("x=").is_err());
    assert!(parse_axis("=1,2").is_err());
    assert!(parse_axis("x").is_err());
}

#[test]
fn axis_names_resolve_to_nested_keys() {
    let section: toml::Table = toml::from_str(
        "[sde]\nalpha = 0.1\nseed = 1\n[report]\nlevel = 0.99\nseed = 2\n",
    )
    .unwrap();
    assert_eq!(resolve_axis(&section, "alpha").unwrap(), ["sde", "alpha"]);
    assert_eq!(resolve_axis(&section, "report.level").unwrap(), ["report", "level"]);
    assert!(resolve_axis(&section, "seed").is_err());
    assert!(resolve_axis(&section, "sde.missing").is_err());
    assert_eq!(parse_axis("n_paths=10,20").unwrap().values[0], toml::Value::Integer(10));
}
