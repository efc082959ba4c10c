mod common;

use common::*;

fn fixture_config(ws: &Workspace, fixtures: &[String], target_n: usize) -> String {
    let list: Vec<String> = fixtures.iter().map(|f| format!("{f:?}")).collect();
    ws.write(
        "run.toml",
        &format!(
            r#"
label = "mock"
master_seed = 11
output_dir = "out"

[provider]
kind = "mock"
mock_fixtures = [{}]

[generation]
state_name = "Colorado"
target_n = {target_n}
"#,
            list.join(", ")
        ),
    );
    "run.toml".into()
}

#[test]
fn missing_credentials_name_the_variable() {
    let ws = Workspace::new();
    ws.write(
        "run.toml",
        r#"
label = "gpt"
[provider]
kind = "openai-compatible"
endpoint = "http://127.0.0.1:9/v1"
model_id = "gpt-x"
credentials_env = "POPSYNTH_TEST_UNSET_KEY"
[generation]
state_name = "Colorado"
target_n = 10
"#,
    );
    let out = ws.run("run.toml", &["generate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("POPSYNTH_TEST_UNSET_KEY"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn unreachable_provider_exits_with_provider_code() {
    let ws = Workspace::new();
    ws.write(
        "run.toml",
        r#"
label = "gpt"
[provider]
kind = "openai-compatible"
endpoint = "http://127.0.0.1:9/v1"
model_id = "gpt-x"
credentials_env = "PATH"
timeout_secs = 5
[generation]
state_name = "Colorado"
target_n = 10
max_retries = 0
"#,
    );
    let out = ws.run("run.toml", &["generate"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_config_is_a_validation_error() {
    let out = popsynth(&["synthesize"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--config"));
}

#[test]
fn generate_from_fixtures_writes_survey_and_summary() {
    let ws = Workspace::new();
    let fx = write_fixtures(&ws, 5, 2, 75);
    let cfg = fixture_config(&ws, &fx, 150);
    let out = ws.run(&cfg, &["generate"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = ws.read("out/survey_mock.csv");
    assert_eq!(csv.lines().count(), 151);
    let summary: serde_json::Value =
        serde_json::from_str(&ws.read("out/generation_summary_mock.json")).unwrap();
    assert_eq!(summary["batches_issued"], 2);
    assert_eq!(summary["records_returned"], 150);
    let printed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(printed, summary);
    assert!(ws.path("out/checkpoints/mock/meta.json").is_file());
}

#[test]
fn second_generate_refuses_existing_checkpoint() {
    let ws = Workspace::new();
    let fx = write_fixtures(&ws, 5, 1, 20);
    let cfg = fixture_config(&ws, &fx, 20);
    assert!(ws.run(&cfg, &["generate"]).status.success());
    let again = ws.run(&cfg, &["generate"]);
    assert_eq!(again.status.code(), Some(1), "{}", stderr(&again));
}

#[test]
fn synthesize_requires_a_seed() {
    let ws = Workspace::new();
    ws.write(
        "run.toml",
        "label = \"x\"\n[synthesis]\nmarginals_path = \"m.csv\"\n",
    );
    let out = ws.run("run.toml", &["synthesize"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("master_seed"));
}

#[test]
fn marginals_with_unknown_variable_report_the_line() {
    let ws = Workspace::new();
    write_survey(&ws, "survey.csv", &generated_survey(1, 50));
    ws.write(
        "m.csv",
        "geoid,variable,code,count\n08031000100,sex,1,10\n08031000100,shoe_size,9,3\n",
    );
    ws.write(
        "run.toml",
        "label = \"x\"\nmaster_seed = 1\n[synthesis]\nsurvey_path = \"survey.csv\"\nmarginals_path = \"m.csv\"\n",
    );
    let out = ws.run("run.toml", &["synthesize"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("line 3") && err.contains("shoe_size"), "{err}");
}

#[test]
fn seed_flag_overrides_config() {
    let ws = Workspace::new();
    let survey = generated_survey(2, 120);
    write_survey(&ws, "survey.csv", &survey);
    let tracts = integer_tracts(&survey, 2, 200, 3);
    write_marginals(&ws, "m.csv", &marginal_rows(&survey, &tracts));
    ws.write(
        "run.toml",
        "label = \"x\"\n[synthesis]\nsurvey_path = \"survey.csv\"\nmarginals_path = \"m.csv\"\n",
    );
    let out = ws.run("run.toml", &["--seed", "9", "synthesize"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let diag: serde_json::Value =
        serde_json::from_str(&ws.read("out/population_x_diagnostics.json")).unwrap();
    assert_eq!(diag["master_seed"], 9);
    assert_eq!(diag["individuals"], 200);
    assert_eq!(ws.read("out/population_x.csv").lines().count(), 201);
}

#[test]
fn self_evaluation_gives_zero_tables() {
    let ws = Workspace::new();
    write_survey(&ws, "truth.csv", &generated_survey(4, 200));
    ws.write(
        "run.toml",
        r#"
label = "self"
[evaluation]
ground_truth_path = "truth.csv"
[[evaluation.candidates]]
label = "Truth"
survey_path = "truth.csv"
"#,
    );
    let out = ws.run("run.toml", &["evaluate"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let t: serde_json::Value =
        serde_json::from_str(&ws.read("out/table_pre_synthesis.json")).unwrap();
    let cells = t["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 14);
    for row in cells {
        assert_eq!(row[0].as_f64(), Some(0.0));
    }
    assert_eq!(t["grand_mean"].as_f64(), Some(0.0));
    assert!(ws
        .read("out/residuals_pre_synthesis.csv")
        .starts_with("candidate,variable,code"));
}

#[test]
fn sae_without_overlap_fails_after_writing_tables() {
    let ws = Workspace::new();
    let survey = generated_survey(6, 150);
    write_survey(&ws, "survey.csv", &survey);
    let tracts = integer_tracts(&survey, 3, 300, 1);
    write_marginals(&ws, "m.csv", &marginal_rows(&survey, &tracts));
    ws.write(
        "bench.csv",
        "geoid,value\n99999999999,0.2\n99999999998,0.3\n",
    );
    ws.write(
        "run.toml",
        r#"
label = "m"
master_seed = 5
[synthesis]
survey_path = "survey.csv"
marginals_path = "m.csv"
[evaluation]
ground_truth_path = "survey.csv"
[[evaluation.candidates]]
label = "M"
survey_path = "survey.csv"
population_path = "out/population_m.csv"
[[evaluation.benchmarks]]
name = "uninsured"
path = "bench.csv"
variable = "insurance"
positive_codes = [88]
outcome_label = "uninsured"
"#,
    );
    assert!(ws.run("run.toml", &["synthesize"]).status.success());
    let out = ws.run("run.toml", &["evaluate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("uninsured"));
    assert!(ws.path("out/table_delta.csv").is_file());
    let sae: serde_json::Value = serde_json::from_str(&ws.read("out/sae_summary.json")).unwrap();
    assert!(sae[0]["error"].as_str().is_some());
    assert!(ws.path("out/evaluation_report.json").is_file());
}

#[test]
fn sae_with_overlap_writes_residual_map() {
    let ws = Workspace::new();
    let survey = generated_survey(8, 150);
    write_survey(&ws, "survey.csv", &survey);
    let tracts = integer_tracts(&survey, 3, 300, 2);
    write_marginals(&ws, "m.csv", &marginal_rows(&survey, &tracts));
    let bench: String = tracts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{},{}\n", t.geoid, 10 + 5 * i))
        .collect();
    ws.write("bench.csv", &format!("geoid,value\n{bench}"));
    ws.write(
        "run.toml",
        r#"
label = "m"
master_seed = 5
[synthesis]
survey_path = "survey.csv"
marginals_path = "m.csv"
[evaluation]
ground_truth_path = "survey.csv"
[[evaluation.candidates]]
label = "M"
population_path = "out/population_m.csv"
[[evaluation.benchmarks]]
name = "uninsured"
path = "bench.csv"
source = "ACS 2023"
variable = "insurance"
positive_codes = [88]
outcome_label = "uninsured"
"#,
    );
    assert!(ws.run("run.toml", &["synthesize"]).status.success());
    let out = ws.run("run.toml", &["evaluate"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let map = ws.read("out/sae_uninsured_M.csv");
    assert_eq!(map.lines().count(), 4);
    let sae: serde_json::Value = serde_json::from_str(&ws.read("out/sae_summary.json")).unwrap();
    let s = &sae[0]["summary"];
    assert_eq!(s["n_tracts"], 3);
    assert_eq!(s["benchmark_source"], "ACS 2023");
}

#[test]
fn validate_flags_missing_files() {
    let ws = Workspace::new();
    write_survey(&ws, "truth.csv", &generated_survey(4, 20));
    ws.write(
        "run.toml",
        r#"
label = "v"
[synthesis]
marginals_path = "nope.csv"
[evaluation]
ground_truth_path = "truth.csv"
"#,
    );
    let out = ws.run("run.toml", &["validate"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("ok      ground truth"), "{text}");
    assert!(text.contains("error   marginals"), "{text}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::new();
    ws.write("run.toml", "label = \"v\"\nsed = 3\n");
    let out = ws.run("run.toml", &["validate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("sed"));
}
