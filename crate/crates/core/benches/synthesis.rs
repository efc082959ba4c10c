use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use popsynth_core::codebook::{Codebook, SurveyDataset};
use popsynth_core::exec::Execution;
use popsynth_core::genpipe::{parse_and_validate_batch, MockProvider, RawBatch};
use popsynth_core::ipf::{
    synthesize_population, ConstraintSet, Margin, SynthesisConfig, TractMarginals,
    DEFAULT_FITTING_VARIABLES,
};
use popsynth_core::metrics::divergence_table;

fn survey(codebook: &Arc<Codebook>, n: usize) -> SurveyDataset {
    let payload = MockProvider::generated_payload(codebook, 99, 0, n, None);
    let parsed = parse_and_validate_batch(&RawBatch::new(payload), codebook);
    SurveyDataset::from_records(codebook.clone(), &parsed.accepted, None, "bench").unwrap()
}

fn constraints(codebook: &Codebook, tracts: usize) -> ConstraintSet {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vars: Vec<String> = DEFAULT_FITTING_VARIABLES
        .iter()
        .map(|s| s.to_string())
        .collect();
    let tracts = (0..tracts).map(|t| {
        let total = rng.random_range(1500.0..5000.0f64).round();
        let margins = vars
            .iter()
            .map(|v| {
                let spec = codebook.variable(v).unwrap();
                let raw: Vec<f64> = spec
                    .codes
                    .iter()
                    .map(|_| rng.random_range(0.5..2.0))
                    .collect();
                let s: f64 = raw.iter().sum();
                Margin {
                    variable: v.clone(),
                    codes: spec.codes.clone(),
                    counts: raw.iter().map(|x| x / s * total).collect(),
                }
            })
            .collect();
        TractMarginals {
            geoid: format!("08031{t:06}"),
            margins,
            population_total: total,
            zero_total_variables: Vec::new(),
        }
    });
    ConstraintSet::from_tracts(vars.clone(), tracts).unwrap()
}

fn bench_synthesis(c: &mut Criterion) {
    let codebook = Arc::new(Codebook::default_brfss());
    let survey = survey(&codebook, 3000);
    let cs = constraints(&codebook, 64);
    let mut group = c.benchmark_group("synthesize_population");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let config = SynthesisConfig {
            execution: exec,
            ..Default::default()
        };
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &config,
            |b, cfg| {
                b.iter(|| {
                    synthesize_population(black_box(&survey), &cs, cfg, 1)
                        .unwrap()
                        .len()
                })
            },
        );
    }
    group.finish();

    let pop = synthesize_population(&survey, &cs, &SynthesisConfig::default(), 1).unwrap();
    let other = survey.truncated(1500);
    let names: Vec<String> = codebook.names().map(String::from).collect();
    let mut group = c.benchmark_group("divergence_table");
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| {
                divergence_table(
                    &other,
                    &[
                        ("population".to_string(), &pop),
                        ("population2".to_string(), &pop),
                    ],
                    &names,
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_synthesis);
criterion_main!(benches);
