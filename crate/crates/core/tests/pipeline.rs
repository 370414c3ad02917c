use panel_mc::nuclear_solver::SolverConfig;
use panel_mc::panel_data::{read_csv, CsvSchema};
use panel_mc::pipeline::{self, MethodSpec, Target};
use panel_mc::simulation::{draw_panel, DgpConfig};

#[test]
fn simulated_panel_survives_a_csv_round_trip() {
    let cfg = DgpConfig {
        n_units: 16,
        n_periods: 12,
        seed: 11,
        ..DgpConfig::default()
    };
    let sim = draw_panel(&cfg, None).unwrap();
    let schema = CsvSchema::default();
    let mut buf = Vec::new();
    sim.dataset.write_csv(&mut buf, &schema).unwrap();
    let back = read_csv(buf.as_slice(), &schema).unwrap();
    assert_eq!(back.outcomes(), sim.dataset.outcomes());
    assert_eq!(back.treatments(), sim.dataset.treatments());

    let solver = SolverConfig::default();
    let specs = [MethodSpec::Dmeans, MethodSpec::Did, MethodSpec::mc_rank(3), MethodSpec::twm(5, 3), MethodSpec::sm(5, 3)];
    let a = pipeline::estimate_many(&sim.dataset, &specs, Target::untreated_on_treated(), &solver);
    let b = pipeline::estimate_many(&back, &specs, Target::untreated_on_treated(), &solver);
    for (x, y) in a.into_iter().zip(b) {
        let (x, y) = (x.unwrap(), y.unwrap());
        assert_eq!(x.aggregate, y.aggregate, "{}", x.method);
        assert_eq!(x.per_period, y.per_period, "{}", x.method);
    }
}

#[test]
fn shared_fits_match_one_at_a_time_estimates() {
    let sim = draw_panel(&DgpConfig::default(), None).unwrap();
    let solver = SolverConfig::default();
    let specs = pipeline::default_specs();
    let many = pipeline::estimate_many(&sim.dataset, &specs, Target::untreated_on_treated(), &solver);
    for (spec, shared) in specs.iter().zip(many) {
        let single = pipeline::estimate(&sim.dataset, spec, Target::untreated_on_treated(), &solver).unwrap();
        assert_eq!(shared.unwrap(), single, "{}", spec.label());
    }
}

#[test]
fn default_specs_give_finite_effects_with_normalized_weights() {
    let sim = draw_panel(&DgpConfig::default(), None).unwrap();
    let solver = SolverConfig::default();
    for spec in pipeline::default_specs() {
        let att = pipeline::treatment_effect(&sim.dataset, &spec, Some(1), &solver).unwrap();
        assert!(att.aggregate.is_finite(), "{}", spec.label());
        let weights: f64 = att.period_weights.iter().sum();
        assert!((weights - 1.0).abs() < 1e-12);
    }
    assert!(sim.truth.aggregate > 0.0);
}
