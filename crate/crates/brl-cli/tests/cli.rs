//! Config parsing, emission, and exit-code behavior of the command-line
//! front end.

use brl_cli::config::{materialize, parse_config_file, ConfigError};
use brl_cli::output::{csv_document, json_document};
use brl_cli::run;

fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
    items
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn flag_example_materializes_the_documented_model() {
    let overrides = pairs(&[
        ("k", "2"),
        ("w", "2"),
        ("a", "diag:0,4"),
        ("ensemble", "goe"),
        ("lambda", "0.3"),
    ]);
    let config = materialize("sets", None, &overrides).unwrap();
    assert_eq!(config.k, 2);
    assert_eq!(config.w, 2);
    assert_eq!(config.a, "diag:0,4");
    let model = config.model_at(0.3).unwrap();
    assert_eq!(model.k, 2);
    assert_eq!(model.w, 2);
    assert_eq!(model.lambda, 0.3);
    assert_eq!(model.base_eigenvalues(), vec![0.0, 4.0]);
}

#[test]
fn matrix_rows_parse_and_reject_asymmetry() {
    let ok = materialize(
        "sets",
        None,
        &pairs(&[("w", "2"), ("a", "rows:0 1;1 0")]),
    )
    .unwrap();
    let model = ok.model_at(0.0).unwrap();
    assert_eq!(model.a.at(0, 1), 1.0);
    assert_eq!(model.a.at(1, 0), 1.0);
    assert_eq!(model.a.at(0, 0), 0.0);

    let err = materialize(
        "sets",
        None,
        &pairs(&[("w", "2"), ("a", "rows:0 1;0 0")]),
    )
    .unwrap_err();
    assert!(matches!(err, ConfigError::BadMatrixFile { .. }), "{err}");
}

#[test]
fn matrix_file_loads_and_canonicalizes() {
    let path = std::env::temp_dir().join("brl-cli-test-matrix.txt");
    std::fs::write(&path, "0 1\n1 0\n").unwrap();
    let config = materialize(
        "sets",
        None,
        &pairs(&[("w", "2"), ("a", &format!("file:{}", path.display()))]),
    )
    .unwrap();
    assert_eq!(config.a, "rows:0 1;1 0");
    let model = config.model_at(0.0).unwrap();
    assert_eq!(model.a.at(0, 1), 1.0);
    std::fs::remove_file(&path).ok();
}

#[test]
fn unknown_keys_are_rejected() {
    let err = materialize("sets", None, &pairs(&[("krab", "2")])).unwrap_err();
    assert!(matches!(err, ConfigError::UnknownKey { .. }), "{err}");
    let err = materialize("sets", Some("krab = 2\n"), &[]).unwrap_err();
    assert!(matches!(err, ConfigError::UnknownKey { .. }), "{err}");
}

#[test]
fn config_file_comments_and_flag_precedence() {
    let text = "# a comment\nlambda = 0.4\nseed = 9\n\n";
    let parsed = parse_config_file(text).unwrap();
    assert_eq!(parsed.len(), 2);
    let config =
        materialize("phase", Some(text), &pairs(&[("lambda", "0.7")])).unwrap();
    assert_eq!(config.lambda, "0.7");
    assert_eq!(config.seed, 9);
}

#[test]
fn emitted_key_values_round_trip_exactly() {
    let overrides = pairs(&[
        ("k", "3"),
        ("w", "2"),
        ("a", "diag:0,4"),
        ("lambda", "0:0.4:0.2"),
        ("e", "1,2,2.5"),
        ("eta", "0.01,0.001"),
        ("burn_in", "120"),
        ("l_ref", "0.52"),
        ("seed", "77"),
        ("format", "json"),
    ]);
    let config = materialize("phase", None, &overrides).unwrap();
    let text: String = config
        .to_key_values()
        .iter()
        .filter(|(k, _)| k != "subcommand")
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    let reparsed = materialize("phase", Some(&text), &[]).unwrap();
    assert_eq!(config, reparsed);
}

#[test]
fn default_burn_in_drops_to_zero_at_zero_coupling() {
    let free = materialize("lyapunov", None, &pairs(&[("lambda", "0")])).unwrap();
    assert_eq!(free.burn_in, 0);
    let disordered =
        materialize("lyapunov", None, &pairs(&[("lambda", "0.3")])).unwrap();
    assert_eq!(disordered.burn_in, 300);
    let forced = materialize(
        "lyapunov",
        None,
        &pairs(&[("lambda", "0"), ("burn_in", "50")]),
    )
    .unwrap();
    assert_eq!(forced.burn_in, 50);
}

#[test]
fn grid_specs_expand_inclusively() {
    let config = materialize(
        "phase",
        None,
        &pairs(&[("lambda", "0:1:0.25"), ("e", "-1,0,1")]),
    )
    .unwrap();
    assert_eq!(config.lambda_grid().unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(config.e_grid().unwrap(), vec![-1.0, 0.0, 1.0]);
}

#[test]
fn empty_results_emit_metadata_and_header_only() {
    let config = materialize("lyapunov", None, &[]).unwrap();
    let table = brl_cli::output::RunTable::new(vec!["E", "L_hat"]);
    let doc = csv_document(&config, &table);
    let lines: Vec<&str> = doc.lines().collect();
    assert!(lines[0].starts_with("# brl "));
    assert_eq!(*lines.last().unwrap(), "E,L_hat");
    assert!(lines.iter().take(lines.len() - 1).all(|l| l.starts_with('#')));

    let json = json_document(&config, &table);
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(value["rows"].as_array().unwrap().len(), 0);
    assert_eq!(value["meta"]["tool"], "brl");
}

#[test]
fn identical_configs_render_identical_documents() {
    let overrides = pairs(&[
        ("k", "2"),
        ("lambda", "0"),
        ("e", "3"),
        ("eta", "0.0001"),
        ("pool", "64"),
        ("chain", "50"),
        ("replicas", "2"),
        ("seed", "5"),
    ]);
    let mut first = materialize("lyapunov", None, &overrides).unwrap();
    let mut second = materialize("lyapunov", None, &overrides).unwrap();
    let out_a = brl_cli::commands::run_config(&mut first).unwrap();
    let out_b = brl_cli::commands::run_config(&mut second).unwrap();
    assert_eq!(
        csv_document(&first, &out_a.table),
        csv_document(&second, &out_b.table)
    );
    assert_eq!(
        json_document(&first, &out_a.table),
        json_document(&second, &out_b.table)
    );
}

#[test]
fn exit_codes_separate_usage_numerical_and_success() {
    let ok = run([
        "brl", "sets", "--K", "2", "--W", "2", "--A", "diag:0,4", "--lambda",
        "0.3", "--out", "/dev/null",
    ]);
    assert_eq!(ok, 0);

    let usage = run(["brl", "sets", "--bogus-flag", "1"]);
    assert_eq!(usage, 1);

    let usage = run(["brl", "frobnicate"]);
    assert_eq!(usage, 1);

    // Exact square-sum mode over a deep tree exceeds the vertex budget:
    // a numerical-domain failure, not a usage error.
    let numerical = run([
        "brl", "sw", "--K", "2", "--E", "0", "--eta", "0.001", "--depth", "40",
        "--sw-mode", "exact", "--out", "/dev/null",
    ]);
    assert_eq!(numerical, 2);
}
