use std::collections::BTreeSet;

use ebdid::matching::match_nearest;
use ebdid::trends::{estimate_trends, TrendKind};
use ebdid::{
    build_constraints, fit_did, generate_panel, load_panel, match_weights, scenario_spec, solve_entropy_balance,
    Overrides, ScenarioId, SolverSettings, TimeSpec,
};

#[test]
fn csv_roundtrip_then_balance_and_estimate() {
    let spec = scenario_spec(ScenarioId::Scenario1, &Overrides { tau: Some(2.0), ..Default::default() }).unwrap();
    let generated = generate_panel(&spec, 17).unwrap();
    let mut buf = Vec::new();
    generated.write_csv(&mut buf).unwrap();
    let (panel, report) = load_panel(buf.as_slice(), spec.intervention_time()).unwrap();
    assert!(report.is_ok());
    assert_eq!(panel, generated);

    let trends = estimate_trends(&panel, TrendKind::LINEAR).unwrap();
    let (treated, comparison) = trends.split(&panel);
    let prob = build_constraints(&comparison, &treated, None, &BTreeSet::from([1])).unwrap();
    let bw = solve_entropy_balance(&prob, &SolverSettings::default()).unwrap();
    assert!(bw.diagnostics.max_violation < 1e-8);

    let weights = bw.unit_weights(&panel).unwrap();
    let before = fit_did(&panel, None, TimeSpec::LINEAR).unwrap();
    let after = fit_did(&panel, Some(&weights), TimeSpec::LINEAR).unwrap();
    // scenario 1: unweighted DD is biased upward by the slope gap; balancing removes most of it
    assert!((after.tau_hat - 2.0).abs() < (before.tau_hat - 2.0).abs());

    let ms = match_nearest(&treated, &comparison, 0.2).unwrap();
    let mw = match_weights(&ms, &panel).unwrap();
    let matched = fit_did(&panel, Some(&mw), TimeSpec::LINEAR).unwrap();
    assert!(matched.tau_hat.is_finite());
}

#[test]
fn invalid_csv_reports_every_problem() {
    let csv = "unit,time,group,outcome\n1,1,0,1.0\n1,2,0,abc\n2,1,1,1.0\n2,1,1,2.0\n";
    let err = load_panel(csv.as_bytes(), 2.0).unwrap_err();
    match err {
        ebdid::PanelError::Invalid(report) => assert!(report.errors.len() >= 2, "{report}"),
        other => panic!("unexpected {other}"),
    }
}
