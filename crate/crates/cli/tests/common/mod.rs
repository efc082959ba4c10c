#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use popsynth_core::codebook::{Codebook, SurveyDataset};
use popsynth_core::genpipe::{parse_and_validate_batch, MockProvider, RawBatch};
use popsynth_core::io;
use popsynth_core::ipf::{MarginalRow, DEFAULT_FITTING_VARIABLES};

pub struct Workspace {
    pub dir: TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> PathBuf {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).unwrap();
        }
        fs::write(&p, contents).unwrap();
        p
    }

    pub fn read(&self, name: &str) -> String {
        fs::read_to_string(self.path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    /// Runs the binary with `--config <config>` followed by `args`.
    pub fn run(&self, config: &str, args: &[&str]) -> Output {
        popsynth(&[&["--config", self.path(config).to_str().unwrap()], args].concat())
    }
}

pub fn popsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popsynth"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn brfss() -> Arc<Codebook> {
    Arc::new(Codebook::default_brfss())
}

/// Writes `batches` generator payloads of `batch_size` rows; returns the file names.
pub fn write_fixtures(ws: &Workspace, seed: u64, batches: u64, batch_size: usize) -> Vec<String> {
    let cb = brfss();
    (0..batches)
        .map(|b| {
            let name = format!("fixtures/batch_{b}.json");
            ws.write(
                &name,
                &MockProvider::generated_payload(&cb, seed, b, batch_size, None),
            );
            name
        })
        .collect()
}

/// A valid survey of `n` generated records.
pub fn generated_survey(seed: u64, n: usize) -> SurveyDataset {
    let cb = brfss();
    let payload = MockProvider::generated_payload(&cb, seed, 0, n, None);
    let parsed = parse_and_validate_batch(&RawBatch::new(payload), &cb);
    assert_eq!(parsed.accepted.len(), n);
    SurveyDataset::from_records(cb, &parsed.accepted, None, format!("generated {seed}")).unwrap()
}

pub fn write_survey(ws: &Workspace, name: &str, ds: &SurveyDataset) -> PathBuf {
    let p = ws.path(name);
    io::write_survey_file(ds, &p).unwrap();
    p
}

/// Tract with integer per-record weights of the form `a(age) * b(sex)`.
pub struct ToyTract {
    pub geoid: String,
    pub weights: Vec<u64>,
}

impl ToyTract {
    pub fn total(&self) -> u64 {
        self.weights.iter().sum()
    }

    /// Weighted count of each code of `variable`, in codebook order.
    pub fn targets(&self, survey: &SurveyDataset, variable: &str) -> Vec<(i64, u64)> {
        let (col, spec) = survey.codebook().require(variable).unwrap();
        spec.codes
            .iter()
            .map(|&code| {
                let n = survey
                    .rows()
                    .iter()
                    .zip(&self.weights)
                    .filter(|(r, _)| r[col] == code)
                    .map(|(_, w)| *w)
                    .sum();
                (code, n)
            })
            .collect()
    }
}

fn column(survey: &SurveyDataset, variable: &str) -> (Vec<i64>, Vec<usize>) {
    let (col, spec) = survey.codebook().require(variable).unwrap();
    let idx = survey
        .rows()
        .iter()
        .map(|r| spec.code_index(r[col]).unwrap())
        .collect();
    (spec.codes.clone(), idx)
}

/// `n_tracts` tracts totalling exactly `total` individuals whose marginals
/// admit an exact integer fit on `survey`.
pub fn integer_tracts(
    survey: &SurveyDataset,
    n_tracts: usize,
    total: u64,
    seed: u64,
) -> Vec<ToyTract> {
    let (age_codes, age) = column(survey, "age");
    let (sex_codes, sex) = column(survey, "sex");
    let mut age_n = vec![0u64; age_codes.len()];
    for &c in &age {
        age_n[c] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let share = total as f64 / n_tracts as f64;
    'attempt: loop {
        let mut tracts = Vec::new();
        while tracts.len() + 1 < n_tracts {
            let a: Vec<u64> = age_codes.iter().map(|_| rng.random_range(0..=3)).collect();
            let b: Vec<u64> = sex_codes.iter().map(|_| rng.random_range(1..=2)).collect();
            let weights: Vec<u64> = age.iter().zip(&sex).map(|(&i, &j)| a[i] * b[j]).collect();
            let t: u64 = weights.iter().sum();
            if (t as f64) > 0.6 * share && (t as f64) < 1.4 * share {
                tracts.push(weights);
            }
        }
        let used: u64 = tracts.iter().flatten().sum();
        let Some(rest) = total.checked_sub(used).filter(|r| *r > 0) else {
            continue 'attempt;
        };
        let Some(a) = bounded_knapsack(&age_n, 3, rest) else {
            continue 'attempt;
        };
        tracts.push(age.iter().map(|&i| a[i]).collect());
        return tracts
            .into_iter()
            .enumerate()
            .map(|(t, weights)| ToyTract {
                geoid: format!("080310{t:05}"),
                weights,
            })
            .collect();
    }
}

/// Multipliers `a_c ∈ 0..=max` with `Σ a_c n_c = target`.
fn bounded_knapsack(n: &[u64], max: u64, target: u64) -> Option<Vec<u64>> {
    let t = target as usize;
    // reach[k][s]: multiplier of item k-1 that first reached sum s
    let mut reach: Vec<Vec<Option<u64>>> = vec![vec![None; t + 1]; n.len() + 1];
    reach[0][0] = Some(0);
    for (k, &nk) in n.iter().enumerate() {
        for s in 0..=t {
            if reach[k][s].is_none() {
                continue;
            }
            for a in 0..=max {
                let s2 = s + (a * nk) as usize;
                if s2 <= t && reach[k + 1][s2].is_none() {
                    reach[k + 1][s2] = Some(a);
                }
            }
        }
    }
    reach[n.len()][t]?;
    let mut out = vec![0; n.len()];
    let mut s = t;
    for k in (0..n.len()).rev() {
        let a = reach[k + 1][s].unwrap();
        out[k] = a;
        s -= (a * n[k]) as usize;
    }
    Some(out)
}

pub fn marginal_rows(survey: &SurveyDataset, tracts: &[ToyTract]) -> Vec<MarginalRow> {
    let mut rows = Vec::new();
    for t in tracts {
        for v in DEFAULT_FITTING_VARIABLES {
            for (code, count) in t.targets(survey, v) {
                rows.push(MarginalRow {
                    geoid: t.geoid.clone(),
                    variable: v.to_string(),
                    code,
                    count: count as f64,
                    line: 0,
                });
            }
        }
    }
    rows
}

pub fn write_marginals(ws: &Workspace, name: &str, rows: &[MarginalRow]) -> PathBuf {
    let mut buf = Vec::new();
    io::write_marginals(rows, &mut buf).unwrap();
    ws.write(name, &String::from_utf8(buf).unwrap())
}
