use std::collections::BTreeSet;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ebdid::matching::match_nearest;
use ebdid::trends::{estimate_trends, TrendKind};
use ebdid::{
    build_constraints, fit_did, generate_panel, scenario_spec, solve_entropy_balance, Overrides, ScenarioId,
    SolverSettings, TimeSpec,
};

fn bench(c: &mut Criterion) {
    let spec = scenario_spec(ScenarioId::Scenario1, &Overrides::default()).unwrap();
    let panel = generate_panel(&spec, 7).unwrap();
    let (treated, comparison) = estimate_trends(&panel, TrendKind::LINEAR).unwrap().split(&panel);
    let prob = build_constraints(&comparison, &treated, None, &BTreeSet::from([1])).unwrap();
    let settings = SolverSettings::default();

    c.bench_function("generate_panel scenario1", |b| b.iter(|| generate_panel(black_box(&spec), 7).unwrap()));
    c.bench_function("estimate_trends linear", |b| {
        b.iter(|| estimate_trends(black_box(&panel), TrendKind::LINEAR).unwrap())
    });
    c.bench_function("entropy balance linear", |b| {
        b.iter(|| solve_entropy_balance(black_box(&prob), &settings).unwrap())
    });
    c.bench_function("match_nearest caliper 0.2", |b| {
        b.iter(|| match_nearest(black_box(&treated), &comparison, 0.2).unwrap())
    });
    let weights = solve_entropy_balance(&prob, &settings).unwrap().unit_weights(&panel).unwrap();
    c.bench_function("fit_did weighted np", |b| {
        b.iter(|| fit_did(black_box(&panel), Some(&weights), TimeSpec::Nonparametric).unwrap())
    });
}

criterion_group!(benches, bench);
criterion_main!(benches);
